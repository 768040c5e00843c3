//! Finite-difference checks over every tape primitive and every composite loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{
    ctc_loss, info_nce, rnnt_loss, sample_candidates, total_loss, ItemLoss, LabelSeq, Source, Vocab,
};
use crate::numerics::gradcheck::{relative_error, FD_STEP, FD_TOLERANCE};
use crate::numerics::{Graph, Tensor, Var};

/// Worst relative error of one check over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub worst: f64,
    pub seeds: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.worst <= FD_TOLERANCE
    }
}

type CaseFn = fn(&mut ChaCha8Rng) -> Result<f64>;

/// Entries bounded away from zero so that kinks (relu) are never straddled.
fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), v).expect("valid shape")
}

/// Random-weighted sum, so that outputs with constant sums still have informative gradients.
fn wsum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_t(&mut rng, g.shape(x));
    let w = g.constant(w);
    let y = g.mul(x, w)?;
    Ok(g.sum(y))
}

fn check(
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    relative_error(&inputs, FD_STEP, |g, v| {
        let out = f(g, v)?;
        if g.value(out).numel() == 1 {
            Ok(out)
        } else {
            wsum(g, out, 99)
        }
    })
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..5))
}

fn cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("add", |r| {
            let (a, b) = dims(r);
            check(vec![rand_t(r, &[a, b]), rand_t(r, &[a, b])], |g, v| {
                g.add(v[0], v[1])
            })
        }),
        ("sub", |r| {
            let (a, b) = dims(r);
            check(vec![rand_t(r, &[a, b]), rand_t(r, &[a, b])], |g, v| {
                g.sub(v[0], v[1])
            })
        }),
        ("mul", |r| {
            let (a, b) = dims(r);
            check(vec![rand_t(r, &[a, b]), rand_t(r, &[a, b])], |g, v| {
                g.mul(v[0], v[1])
            })
        }),
        ("add_row", |r| {
            let (a, b) = dims(r);
            check(vec![rand_t(r, &[a, b]), rand_t(r, &[b])], |g, v| {
                g.add_row(v[0], v[1])
            })
        }),
        ("mul_row", |r| {
            let (a, b) = dims(r);
            check(vec![rand_t(r, &[a, b]), rand_t(r, &[b])], |g, v| {
                g.mul_row(v[0], v[1])
            })
        }),
        ("scale", |r| {
            let (a, b) = dims(r);
            let c = r.gen_range(-2.0..2.0);
            check(vec![rand_t(r, &[a, b])], move |g, v| Ok(g.scale(v[0], c)))
        }),
        ("matmul", |r| {
            let (a, b) = dims(r);
            let c = r.gen_range(1..5);
            check(vec![rand_t(r, &[a, b]), rand_t(r, &[b, c])], |g, v| {
                g.matmul(v[0], v[1])
            })
        }),
        ("linear", |r| {
            let (a, b) = dims(r);
            let c = r.gen_range(1..5);
            check(
                vec![rand_t(r, &[a, b]), rand_t(r, &[b, c]), rand_t(r, &[c])],
                |g, v| g.linear(v[0], v[1], Some(v[2])),
            )
        }),
        ("transpose", |r| {
            let (a, b) = dims(r);
            check(vec![rand_t(r, &[a, b])], |g, v| g.transpose(v[0]))
        }),
        ("reshape", |r| {
            let (a, b) = dims(r);
            check(vec![rand_t(r, &[a, b])], move |g, v| {
                g.reshape(v[0], &[b, a])
            })
        }),
        ("relu", |r| {
            let (a, b) = dims(r);
            check(vec![rand_t(r, &[a, b])], |g, v| Ok(g.relu(v[0])))
        }),
        ("sigmoid", |r| {
            let (a, b) = dims(r);
            check(vec![rand_t(r, &[a, b])], |g, v| Ok(g.sigmoid(v[0])))
        }),
        ("silu", |r| {
            let (a, b) = dims(r);
            check(vec![rand_t(r, &[a, b])], |g, v| Ok(g.silu(v[0])))
        }),
        ("tanh", |r| {
            let (a, b) = dims(r);
            check(vec![rand_t(r, &[a, b])], |g, v| Ok(g.tanh(v[0])))
        }),
        ("glu", |r| {
            let (a, b) = dims(r);
            check(vec![rand_t(r, &[a, 2 * b])], |g, v| g.glu(v[0]))
        }),
        ("log_softmax", |r| {
            let (a, b) = dims(r);
            check(vec![rand_t(r, &[a, b + 1])], |g, v| Ok(g.log_softmax(v[0])))
        }),
        ("softmax", |r| {
            let (a, b) = dims(r);
            check(vec![rand_t(r, &[a, b + 1])], |g, v| Ok(g.softmax(v[0])))
        }),
        ("layer_norm", |r| {
            let (a, b) = dims(r);
            let b = b + 1;
            check(
                vec![rand_t(r, &[a, b]), rand_t(r, &[b]), rand_t(r, &[b])],
                |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
            )
        }),
        ("conv2d", |r| {
            let (t, f) = (r.gen_range(2..7), r.gen_range(2..7));
            let (ci, co) = (r.gen_range(1..3), r.gen_range(1..3));
            let stride = (r.gen_range(1..3), r.gen_range(1..3));
            check(
                vec![rand_t(r, &[t, f, ci]), rand_t(r, &[3, 3, ci, co])],
                move |g, v| g.conv2d(v[0], v[1], stride),
            )
        }),
        ("depthwise_conv1d", |r| {
            let (t, d) = dims(r);
            let k = [1, 3, 5][r.gen_range(0..3)];
            check(vec![rand_t(r, &[t + 1, d]), rand_t(r, &[k, d])], |g, v| {
                g.depthwise_conv1d(v[0], v[1])
            })
        }),
        ("slice_cols", |r| {
            let (a, b) = dims(r);
            let s = r.gen_range(0..b);
            let l = r.gen_range(1..=b - s);
            check(vec![rand_t(r, &[a, b])], move |g, v| {
                g.slice_cols(v[0], s, l)
            })
        }),
        ("concat_cols", |r| {
            let (a, b) = dims(r);
            check(vec![rand_t(r, &[a, b]), rand_t(r, &[a, 2])], |g, v| {
                g.concat_cols(&[v[0], v[1]])
            })
        }),
        ("concat_rows", |r| {
            let (a, b) = dims(r);
            check(vec![rand_t(r, &[a, b]), rand_t(r, &[2, b])], |g, v| {
                g.concat_rows(&[v[0], v[1]])
            })
        }),
        ("gather_rows", |r| {
            let (a, b) = dims(r);
            let idx: Vec<usize> = (0..4).map(|_| r.gen_range(0..a)).collect();
            check(vec![rand_t(r, &[a, b])], move |g, v| {
                g.gather_rows(v[0], &idx)
            })
        }),
        ("gather", |r| {
            let (a, b) = dims(r);
            let idx: Vec<usize> = (0..5).map(|_| r.gen_range(0..a * b)).collect();
            check(vec![rand_t(r, &[a, b])], move |g, v| g.gather(v[0], &idx))
        }),
        ("mask_rows", |r| {
            let (a, b) = dims(r);
            let m: Vec<bool> = (0..a).map(|_| r.gen()).collect();
            check(vec![rand_t(r, &[a, b]), rand_t(r, &[b])], move |g, v| {
                g.mask_rows(v[0], &m, v[1])
            })
        }),
        ("l2_normalize_rows", |r| {
            let (a, b) = dims(r);
            check(vec![rand_t(r, &[a, b])], |g, v| {
                Ok(g.l2_normalize_rows(v[0], 1e-8))
            })
        }),
        ("sum", |r| {
            let (a, b) = dims(r);
            check(vec![rand_t(r, &[a, b])], |g, v| {
                let s = g.tanh(v[0]);
                Ok(g.sum(s))
            })
        }),
        ("mean", |r| {
            let (a, b) = dims(r);
            check(vec![rand_t(r, &[a, b])], |g, v| {
                let s = g.sigmoid(v[0]);
                Ok(g.mean(s))
            })
        }),
        ("add_all", |r| {
            let (a, b) = dims(r);
            check(
                vec![rand_t(r, &[a, b]), rand_t(r, &[a, b]), rand_t(r, &[a, b])],
                |g, v| g.add_all(v),
            )
        }),
        ("outer_add", |r| {
            let (a, b) = dims(r);
            check(vec![rand_t(r, &[a, b]), rand_t(r, &[3, b])], |g, v| {
                g.outer_add(v[0], v[1])
            })
        }),
        ("dropout", |r| {
            let (a, b) = dims(r);
            let seed = r.gen();
            check(vec![rand_t(r, &[a, b])], move |g, v| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                g.dropout(v[0], 0.3, &mut rng)
            })
        }),
        ("contrastive", |r| {
            let t = r.gen_range(3..7);
            let d = r.gen_range(2..5);
            let masked: Vec<usize> = (0..t).filter(|_| r.gen_bool(0.7)).collect();
            let masked = if masked.len() < 2 {
                vec![0, t - 1]
            } else {
                masked
            };
            let cands = sample_candidates(&masked, r.gen_range(1..4), r);
            let kappa = r.gen_range(0.1..1.0);
            check(vec![rand_t(r, &[t, d]), rand_t(r, &[t, d])], move |g, v| {
                info_nce(g, v[0], v[1], &cands, kappa)
            })
        }),
        ("ctc", |r| {
            let (t, v) = (r.gen_range(3..7), r.gen_range(2..5));
            let u = r.gen_range(1..3);
            let ids: Vec<usize> = (0..u).map(|_| r.gen_range(1..v)).collect();
            let y = LabelSeq::new(ids, Vocab::Phoneme);
            check(vec![rand_t(r, &[t, v])], move |g, x| ctc_loss(g, x[0], &y))
        }),
        ("rnnt", |r| {
            let (t, v) = (r.gen_range(1..4), r.gen_range(2..5));
            let u = r.gen_range(0..3);
            let ids: Vec<usize> = (0..u).map(|_| r.gen_range(1..v)).collect();
            let y = LabelSeq::new(ids, Vocab::Wordpiece);
            check(vec![rand_t(r, &[t, u + 1, v])], move |g, x| {
                rnnt_loss(g, x[0], &y)
            })
        }),
        ("total", |r| {
            let (t, d, v) = (5, 3, 4);
            let cands = sample_candidates(&[0, 2, 3, 4], 2, r);
            let y = LabelSeq::new(vec![1, 3], Vocab::Phoneme);
            let lambda = r.gen_range(0.1..2.0);
            let inputs = vec![
                rand_t(r, &[t, d]),
                rand_t(r, &[t, d]),
                rand_t(r, &[t, d]),
                rand_t(r, &[t, d]),
                rand_t(r, &[t, v]),
            ];
            check(inputs, move |g, x| {
                let real = info_nce(g, x[0], x[1], &cands, 0.5)?;
                let synth = info_nce(g, x[2], x[3], &cands, 0.5)?;
                let aux = ctc_loss(g, x[4], &y)?;
                let items = [
                    ItemLoss {
                        source: Source::Real,
                        contrastive: Some(real),
                        aux: vec![],
                    },
                    ItemLoss {
                        source: Source::Synthesized,
                        contrastive: Some(synth),
                        aux: vec![(Vocab::Phoneme, aux)],
                    },
                ];
                Ok(total_loss(g, &items, lambda)?.0.expect("terms present"))
            })
        }),
    ]
}

/// Names of every check, in run order.
pub fn check_names() -> Vec<&'static str> {
    cases().into_iter().map(|c| c.0).collect()
}

/// Runs every check over `seeds` random draws each.
pub fn run(seeds: usize) -> Result<Vec<CheckReport>> {
    cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, f))| {
            let mut worst = 0.0f64;
            for s in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(((i as u64) << 32) | s as u64);
                worst = worst.max(f(&mut rng)?);
            }
            Ok(CheckReport { name, worst, seeds })
        })
        .collect()
}

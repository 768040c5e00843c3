//! Transducer loss over the T×(U+1) alignment lattice.

use crate::error::{Error, Result};
use crate::numerics::tape::log_softmax_rows;
use crate::numerics::{Graph, Real, Tensor, Var};

use super::ctc::log_add;
use super::{LabelSeq, BLANK};

#[derive(Clone, Debug)]
pub struct RnntOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// `joint: [T×(U+1)×V]` unnormalized; blank advances t, a label advances u.
pub fn rnnt_forward_backward<F: Real>(joint: &Tensor<F>, ids: &[usize]) -> Result<RnntOutput> {
    let shape = joint.shape();
    if shape.len() != 3 || shape[1] != ids.len() + 1 {
        return Err(Error::dim(
            "rnnt_loss",
            format!("joint {:?} for {} labels", shape, ids.len()),
        ));
    }
    let (t_len, u1, v) = (shape[0], shape[1], shape[2]);
    if let Some(&bad) = ids.iter().find(|&&i| i == BLANK || i >= v) {
        return Err(Error::arg(format!("label {bad} outside [1, {v})")));
    }
    let lp = log_softmax_rows(joint);
    let at = |t: usize, u: usize, k: usize| lp[(t * u1 + u) * v + k];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * u1];
    for t in 0..t_len {
        for u in 0..u1 {
            alpha[t * u1 + u] = if t == 0 && u == 0 {
                0.0
            } else {
                let mut a = ninf;
                if t > 0 {
                    a = alpha[(t - 1) * u1 + u] + at(t - 1, u, BLANK);
                }
                if u > 0 {
                    a = log_add(a, alpha[t * u1 + u - 1] + at(t, u - 1, ids[u - 1]));
                }
                a
            };
        }
    }
    let log_p = alpha[(t_len - 1) * u1 + u1 - 1] + at(t_len - 1, u1 - 1, BLANK);

    let mut beta = vec![ninf; t_len * u1];
    for t in (0..t_len).rev() {
        for u in (0..u1).rev() {
            beta[t * u1 + u] = if t == t_len - 1 && u == u1 - 1 {
                at(t, u, BLANK)
            } else {
                let mut b = ninf;
                if t + 1 < t_len {
                    b = beta[(t + 1) * u1 + u] + at(t, u, BLANK);
                }
                if u + 1 < u1 {
                    b = log_add(b, beta[t * u1 + u + 1] + at(t, u, ids[u]));
                }
                b
            };
        }
    }

    // gradient w.r.t. log-probs, then through the per-node log-softmax
    let mut grad = vec![0.0; lp.len()];
    for t in 0..t_len {
        for u in 0..u1 {
            let base = (t * u1 + u) * v;
            let a = alpha[t * u1 + u];
            let mut g_lp = vec![0.0; v];
            let blank_next = if t + 1 < t_len {
                beta[(t + 1) * u1 + u]
            } else if u == u1 - 1 {
                0.0
            } else {
                ninf
            };
            g_lp[BLANK] = -(a + at(t, u, BLANK) + blank_next - log_p).exp();
            if u + 1 < u1 {
                let k = ids[u];
                g_lp[k] -= (a + at(t, u, k) + beta[t * u1 + u + 1] - log_p).exp();
            }
            let s: f64 = g_lp.iter().sum();
            for k in 0..v {
                grad[base + k] = g_lp[k] - lp[base + k].exp() * s;
            }
        }
    }
    Ok(RnntOutput { loss: -log_p, grad })
}

pub fn rnnt_loss<F: Real>(g: &mut Graph<F>, joint: Var, target: &LabelSeq) -> Result<Var> {
    let out = rnnt_forward_backward(g.value(joint), &target.ids)?;
    let shape = g.shape(joint).to_vec();
    let grad = Tensor::from_parts(shape, out.grad.into_iter().map(F::of).collect());
    Ok(g.fused_scalar(joint, F::of(out.loss), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Sum over every ordering of T blanks and U labels ending in a blank.
    fn enumerate(joint: &Tensor<f64>, ids: &[usize]) -> f64 {
        let (t_len, u1, v) = (joint.shape()[0], joint.shape()[1], joint.shape()[2]);
        let lp = joint.log_softmax();
        let moves = t_len + ids.len();
        let mut total = 0.0;
        for bits in 0u32..(1 << moves) {
            if bits.count_ones() as usize != ids.len() {
                continue;
            }
            let (mut t, mut u, mut logp, mut ok) = (0, 0, 0.0, true);
            for m in 0..moves {
                if bits >> m & 1 == 1 {
                    logp += lp.data()[(t * u1 + u) * v + ids[u]];
                    u += 1;
                } else {
                    logp += lp.data()[(t * u1 + u) * v + BLANK];
                    t += 1;
                    if t == t_len && m != moves - 1 {
                        ok = false;
                        break;
                    }
                }
            }
            if ok && t == t_len {
                total += logp.exp();
            }
        }
        -total.ln()
    }

    #[test]
    fn two_path_case() {
        let joint = Tensor::<f64>::zeros(&[2, 2, 2]);
        let out = rnnt_forward_backward(&joint, &[1]).unwrap();
        assert!((out.loss - 4f64.ln()).abs() < 1e-12);
        assert!((enumerate(&joint, &[1]) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn blank_only_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let joint = Tensor::<f64>::randn(&[3, 1, 4], 1.0, &mut rng);
        let lp = joint.log_softmax();
        let want = -(0..3).map(|t| lp.data()[t * 4]).sum::<f64>();
        assert!((rnnt_forward_backward(&joint, &[]).unwrap().loss - want).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let joint = Tensor::<f64>::zeros(&[2, 3, 2]);
        assert!(matches!(
            rnnt_forward_backward(&joint, &[1]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let t = rng.gen_range(1..=4);
            let u = rng.gen_range(0..=3usize);
            let v = rng.gen_range(2..=4);
            let ids: Vec<usize> = (0..u).map(|_| rng.gen_range(1..v)).collect();
            let joint = Tensor::<f64>::randn(&[t, u + 1, v], 1.5, &mut rng);
            let dp = rnnt_forward_backward(&joint, &ids).unwrap().loss;
            assert!(
                (dp - enumerate(&joint, &ids)).abs() < 1e-9,
                "t={t} ids={ids:?}"
            );
        }
    }
}

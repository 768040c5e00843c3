//! Connectionist temporal classification in log space.

use crate::error::{Error, Result};
use crate::numerics::tape::log_softmax_rows;
use crate::numerics::{Graph, Real, Tensor, Var};

use super::{LabelSeq, BLANK};

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Number of adjacent equal labels; each forces a blank between them.
pub fn repeats(ids: &[usize]) -> usize {
    ids.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Minimum number of frames that can emit `ids`.
pub fn min_frames(ids: &[usize]) -> usize {
    ids.len() + repeats(ids)
}

/// Negative log-likelihood and its gradient with respect to the logits.
#[derive(Clone, Debug)]
pub struct CtcOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Forward-backward over the blank-interleaved label sequence.
pub fn ctc_forward_backward<F: Real>(logits: &Tensor<F>, ids: &[usize]) -> Result<CtcOutput> {
    if logits.rank() != 2 {
        return Err(Error::dim(
            "ctc_loss",
            format!("logits must be T×V, got {:?}", logits.shape()),
        ));
    }
    let (t_len, v) = (logits.shape()[0], logits.shape()[1]);
    if let Some(&bad) = ids.iter().find(|&&i| i == BLANK || i >= v) {
        return Err(Error::arg(format!("label {bad} outside [1, {v})")));
    }
    if t_len < min_frames(ids) {
        return Err(Error::InfeasibleAlignment {
            frames: t_len,
            labels: ids.len(),
            repeats: repeats(ids),
        });
    }
    let lp = log_softmax_rows(logits);
    let s_len = 2 * ids.len() + 1;
    let label = |s: usize| {
        if s.is_multiple_of(2) {
            BLANK
        } else {
            ids[s / 2]
        }
    };
    let skip_ok = |s: usize| s >= 2 && s % 2 == 1 && ids[s / 2] != ids[s / 2 - 1];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp[label(0)];
    if s_len > 1 {
        alpha[1] = lp[label(1)];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = a + lp[t * v + label(s)];
        }
    }
    let last = (t_len - 1) * s_len;
    let log_p = if s_len > 1 {
        log_add(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };

    let mut beta = vec![ninf; t_len * s_len];
    beta[last + s_len - 1] = lp[(t_len - 1) * v + label(s_len - 1)];
    if s_len > 1 {
        beta[last + s_len - 2] = lp[(t_len - 1) * v + label(s_len - 2)];
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = log_add(b, next[s + 2]);
            }
            beta[t * s_len + s] = b + lp[t * v + label(s)];
        }
    }

    // d(-log p)/d logit = softmax - occupancy of paths through each label
    let mut grad: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
    for t in 0..t_len {
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - lp[t * v + label(s)] - log_p;
            if occ > ninf {
                grad[t * v + label(s)] -= occ.exp();
            }
        }
    }
    Ok(CtcOutput { loss: -log_p, grad })
}

/// CTC negative log-likelihood of `target` given unnormalized `logits: [T×V]`.
pub fn ctc_loss<F: Real>(g: &mut Graph<F>, logits: Var, target: &LabelSeq) -> Result<Var> {
    let out = ctc_forward_backward(g.value(logits), &target.ids)?;
    let shape = g.shape(logits).to_vec();
    let grad = Tensor::from_parts(shape, out.grad.into_iter().map(F::of).collect());
    Ok(g.fused_scalar(logits, F::of(out.loss), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::Vocab;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Sum over all V^T frame paths whose collapse equals `ids`.
    pub(crate) fn enumerate_ctc(logits: &Tensor<f64>, ids: &[usize]) -> f64 {
        let (t_len, v) = (logits.shape()[0], logits.shape()[1]);
        let lp = logits.log_softmax();
        let mut total = 0.0;
        let mut path = vec![0usize; t_len];
        loop {
            let mut collapsed = Vec::new();
            let mut prev = None;
            for &p in &path {
                if Some(p) != prev && p != BLANK {
                    collapsed.push(p);
                }
                prev = Some(p);
            }
            if collapsed == ids {
                total += path
                    .iter()
                    .enumerate()
                    .map(|(t, &p)| lp.data()[t * v + p])
                    .sum::<f64>()
                    .exp();
            }
            let mut k = 0;
            loop {
                if k == t_len {
                    return -total.ln();
                }
                path[k] += 1;
                if path[k] < v {
                    break;
                }
                path[k] = 0;
                k += 1;
            }
        }
    }

    fn uniform(t: usize, v: usize) -> Tensor<f64> {
        Tensor::zeros(&[t, v])
    }

    #[test]
    fn hand_cases() {
        let a = ctc_forward_backward(&uniform(2, 3), &[1]).unwrap().loss;
        assert!((a - 3f64.ln()).abs() < 1e-12);
        let ab = ctc_forward_backward(&uniform(2, 3), &[1, 2]).unwrap().loss;
        assert!((ab - 9f64.ln()).abs() < 1e-12);
        assert!((enumerate_ctc(&uniform(2, 3), &[1]) - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infeasible_repeat() {
        let err = ctc_forward_backward(&uniform(2, 3), &[1, 1]).unwrap_err();
        assert!(matches!(
            err,
            Error::InfeasibleAlignment {
                frames: 2,
                labels: 2,
                repeats: 1
            }
        ));
        assert!(ctc_forward_backward(&uniform(3, 3), &[1, 1]).is_ok());
    }

    #[test]
    fn blank_label_rejected() {
        assert!(matches!(
            ctc_forward_backward(&uniform(3, 3), &[0]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn empty_target_is_all_blank() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let lp = x.log_softmax();
        let want: f64 = -(0..4).map(|t| lp.data()[t * 3]).sum::<f64>();
        let got = ctc_forward_backward(&x, &[]).unwrap().loss;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn matches_enumeration_on_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..60 {
            let t = rng.gen_range(1..=5);
            let v = rng.gen_range(2..=4);
            let u = rng.gen_range(0..=3usize);
            let ids: Vec<usize> = (0..u).map(|_| rng.gen_range(1..v)).collect();
            if min_frames(&ids) > t {
                continue;
            }
            let x = Tensor::<f64>::randn(&[t, v], 2.0, &mut rng);
            let dp = ctc_forward_backward(&x, &ids).unwrap().loss;
            assert!((dp - enumerate_ctc(&x, &ids)).abs() < 1e-9);
        }
    }

    #[test]
    fn appended_certain_blank_frame_is_absorbed() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let mut rows: Vec<Vec<f64>> = (0..4).map(|i| x.row(i).to_vec()).collect();
        rows.push(vec![0.0, -1e4, -1e4]);
        let extended = Tensor::from_rows(&rows).unwrap();
        let a = ctc_forward_backward(&x, &[1, 2]).unwrap().loss;
        let b = ctc_forward_backward(&extended, &[1, 2]).unwrap().loss;
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn tape_op_matches_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[2, 3]));
        let l = ctc_loss(&mut g, x, &LabelSeq::new(vec![1], Vocab::Phoneme)).unwrap();
        assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-12);
    }
}

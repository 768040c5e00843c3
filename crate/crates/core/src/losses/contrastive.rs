//! InfoNCE between context vectors at masked positions and their targets.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Var};

const NORM_EPS: f64 = 1e-12;

/// For each masked position: the positive target index followed by distractor
/// indices drawn uniformly without replacement from the other masked positions.
/// `k` is reduced to `masked.len() - 1` when fewer positions are available.
pub fn sample_candidates<R: Rng + ?Sized>(
    masked: &[usize],
    k: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let k_eff = k.min(masked.len().saturating_sub(1));
    masked
        .iter()
        .enumerate()
        .map(|(i, &pos)| {
            let mut c = Vec::with_capacity(k_eff + 1);
            c.push(pos);
            for j in sample(rng, masked.len() - 1, k_eff).into_iter() {
                let j = if j >= i { j + 1 } else { j };
                c.push(masked[j]);
            }
            c
        })
        .collect()
}

/// Mean over anchors of `-log softmax(cos(c_t, q)/κ)[positive]`, where the
/// softmax runs over each anchor's candidate list (positive first).
pub fn info_nce<F: Real>(
    g: &mut Graph<F>,
    contexts: Var,
    targets: Var,
    candidates: &[Vec<usize>],
    temperature: f64,
) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::arg("contrastive temperature must be positive"));
    }
    if candidates.is_empty() {
        return Err(Error::arg("no contrastive anchors"));
    }
    let width = candidates[0].len();
    if width == 0 || candidates.iter().any(|c| c.len() != width) {
        return Err(Error::arg("candidate lists must share a non-zero length"));
    }
    let anchors: Vec<usize> = candidates.iter().map(|c| c[0]).collect();
    let n_targets = g.shape(targets)[0];
    let c = g.gather_rows(contexts, &anchors)?;
    let c = g.l2_normalize_rows(c, F::of(NORM_EPS));
    let q = g.l2_normalize_rows(targets, F::of(NORM_EPS));
    let qt = g.transpose(q)?;
    let sims = g.matmul(c, qt)?;
    let sims = g.scale(sims, F::of(1.0 / temperature));
    let flat: Vec<usize> = candidates
        .iter()
        .enumerate()
        .flat_map(|(i, cand)| cand.iter().map(move |&j| i * n_targets + j))
        .collect();
    let picked = g.gather(sims, &flat)?;
    let logits = g.reshape(picked, &[candidates.len(), width])?;
    let lsm = g.log_softmax(logits);
    let pos: Vec<usize> = (0..candidates.len()).map(|i| i * width).collect();
    let pos_lp = g.gather(lsm, &pos)?;
    let mean = g.mean(pos_lp);
    Ok(g.scale(mean, F::of(-1.0)))
}

/// Contrastive loss for one utterance. Returns `None` when fewer than two
/// positions are masked (no distractor exists).
pub fn contrastive_loss<F: Real, R: Rng + ?Sized>(
    g: &mut Graph<F>,
    contexts: Var,
    targets: Var,
    mask: &[bool],
    distractors: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Option<Var>> {
    if distractors < 1 {
        return Err(Error::arg("distractor count must be at least 1"));
    }
    if temperature <= 0.0 {
        return Err(Error::arg("contrastive temperature must be positive"));
    }
    if mask.len() != g.shape(contexts)[0] || g.shape(contexts) != g.shape(targets) {
        return Err(Error::dim(
            "contrastive_loss",
            format!(
                "mask {} contexts {:?} targets {:?}",
                mask.len(),
                g.shape(contexts),
                g.shape(targets)
            ),
        ));
    }
    let masked: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i)
        .collect();
    if masked.len() < 2 {
        return Ok(None);
    }
    let candidates = sample_candidates(&masked, distractors, rng);
    info_nce(g, contexts, targets, &candidates, temperature).map(Some)
}

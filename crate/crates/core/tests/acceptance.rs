//! Acceptance suite. Each test prints one PASS/FAIL line for its criterion.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tts4pretrain::features::{contrastive_time_mask, specaugment, AugmentPolicy, FeatureMatrix};
use tts4pretrain::gradsuite;
use tts4pretrain::lm::{select_text, NGramLM, Tokenization};
use tts4pretrain::losses::{ctc_loss, rnnt_loss, LabelSeq, Source, Vocab};
use tts4pretrain::numerics::{Graph, Tensor};
use tts4pretrain::pipeline::corpus::{CorpusConfig, ToyCorpus, ToyLanguage, Utterance};
use tts4pretrain::pipeline::experiment::{
    finetune_variant, pretrain_variants, ExperimentConfig, FinetuneRun, Pretrained, Variant,
};
use tts4pretrain::pipeline::{evaluate, finetune_head, DecodeConfig, DecodeMode};
use tts4pretrain::Error;

fn report(id: u32, what: &str, ok: bool, detail: String) {
    println!(
        "{} criterion {id} ({what}): {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {id} failed: {detail}");
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let z = log_sum_exp(row);
    row.iter().map(|x| x - z).collect()
}

/// −ln Σ over every frame labeling whose collapse equals `y`.
fn ctc_by_enumeration(logits: &[Vec<f64>], y: &[usize]) -> f64 {
    let lp: Vec<Vec<f64>> = logits.iter().map(|r| log_softmax_row(r)).collect();
    let (t_len, v) = (lp.len(), lp[0].len());
    let mut terms = Vec::new();
    let mut path = vec![0usize; t_len];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = usize::MAX;
        for &c in &path {
            if c != prev && c != 0 {
                collapsed.push(c);
            }
            prev = c;
        }
        if collapsed == y {
            terms.push(path.iter().enumerate().map(|(t, &c)| lp[t][c]).sum());
        }
        let mut i = 0;
        while i < t_len {
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
        if i == t_len {
            break;
        }
    }
    -log_sum_exp(&terms)
}

fn ctc_dp(logits: &[Vec<f64>], y: &[usize]) -> Result<f64, Error> {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_rows(logits).unwrap());
    let l = ctc_loss(&mut g, x, &LabelSeq::new(y.to_vec(), Vocab::Phoneme))?;
    Ok(g.value(l).item())
}

fn all_sequences(len: usize, v: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p| {
                (1..v).map(move |c| {
                    let mut q = p.clone();
                    q.push(c);
                    q
                })
            })
            .collect();
    }
    out
}

#[test]
fn criterion_1_ctc_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    let mut ok = true;
    for t in 1..=6 {
        for v in 2..=4 {
            for u in 0..=3 {
                for y in all_sequences(u, v) {
                    for _ in 0..200 {
                        let logits: Vec<Vec<f64>> = (0..t)
                            .map(|_| (0..v).map(|_| rng.gen_range(-3.0..3.0)).collect())
                            .collect();
                        let want = ctc_by_enumeration(&logits, &y);
                        match ctc_dp(&logits, &y) {
                            Ok(got) => worst = worst.max((got - want).abs()),
                            Err(Error::InfeasibleAlignment { .. }) => ok &= want == f64::INFINITY,
                            Err(e) => panic!("{e}"),
                        }
                        cases += 1;
                    }
                }
            }
        }
    }
    let uniform = vec![vec![0.0; 3]; 2];
    let ln3 = ctc_dp(&uniform, &[1]).unwrap();
    let ln9 = ctc_dp(&uniform, &[1, 2]).unwrap();
    let hand = (ln3 - 3f64.ln()).abs() <= 1e-9 && (ln9 - 9f64.ln()).abs() <= 1e-9;
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        "CTC oracle equivalence",
        ok && hand && worst <= 1e-6 && secs < 60.0,
        format!(
            "{cases} draws, max |dp-enum| = {worst:.2e}, ln3 {ln3:.6}, ln9 {ln9:.6}, {secs:.1}s"
        ),
    );
}

/// −ln Σ over every monotone lattice path from (0,0) to the final blank at (T−1, U).
fn rnnt_by_enumeration(lp: &[Vec<Vec<f64>>], y: &[usize]) -> f64 {
    let mut terms = Vec::new();
    // A path is an interleaving of T blanks and U labels ending in a blank.
    fn walk(lp: &[Vec<Vec<f64>>], y: &[usize], t: usize, u: usize, acc: f64, terms: &mut Vec<f64>) {
        let (t_len, u_len) = (lp.len(), y.len());
        if t == t_len - 1 && u == u_len {
            terms.push(acc + lp[t][u][0]);
            return;
        }
        if u < u_len {
            walk(lp, y, t, u + 1, acc + lp[t][u][y[u]], terms);
        }
        if t + 1 < t_len {
            walk(lp, y, t + 1, u, acc + lp[t][u][0], terms);
        }
    }
    walk(lp, y, 0, 0, 0.0, &mut terms);
    -log_sum_exp(&terms)
}

fn rnnt_dp(joint: &[Vec<Vec<f64>>], y: &[usize]) -> f64 {
    let (t, u1, v) = (joint.len(), joint[0].len(), joint[0][0].len());
    let flat: Vec<f64> = joint.iter().flatten().flatten().cloned().collect();
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::new(vec![t, u1, v], flat).unwrap());
    let l = rnnt_loss(&mut g, x, &LabelSeq::new(y.to_vec(), Vocab::Wordpiece)).unwrap();
    g.value(l).item()
}

#[test]
fn criterion_2_rnnt_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    for t in 1..=4 {
        for v in 2..=4 {
            for u in 0..=3 {
                for y in all_sequences(u, v) {
                    for _ in 0..200 {
                        let joint: Vec<Vec<Vec<f64>>> = (0..t)
                            .map(|_| {
                                (0..=u)
                                    .map(|_| (0..v).map(|_| rng.gen_range(-3.0..3.0)).collect())
                                    .collect()
                            })
                            .collect();
                        let lp: Vec<Vec<Vec<f64>>> = joint
                            .iter()
                            .map(|r| r.iter().map(|n| log_softmax_row(n)).collect())
                            .collect();
                        let want = rnnt_by_enumeration(&lp, &y);
                        worst = worst.max((rnnt_dp(&joint, &y) - want).abs());
                        cases += 1;
                    }
                }
            }
        }
    }
    let two_path = rnnt_dp(&vec![vec![vec![0.0, 0.0]; 2]; 2], &[1]);
    let hand = (two_path - 4f64.ln()).abs() <= 1e-9;
    let secs = start.elapsed().as_secs_f64();
    report(
        2,
        "RNN-T oracle equivalence",
        hand && worst <= 1e-6 && secs < 60.0,
        format!("{cases} draws, max |dp-enum| = {worst:.2e}, two-path {two_path:.6}, {secs:.1}s"),
    );
}

#[test]
fn criterion_3_gradient_suite() {
    let start = Instant::now();
    let reports = gradsuite::run(20).unwrap();
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{}={:.2e}", r.name, r.worst))
        .collect();
    let worst = reports.iter().map(|r| r.worst).fold(0.0, f64::max);
    let names: Vec<&str> = reports.iter().map(|r| r.name).collect();
    let composites = ["contrastive", "ctc", "rnnt", "total"]
        .iter()
        .all(|c| names.contains(c));
    let secs = start.elapsed().as_secs_f64();
    report(
        3,
        "gradient suite",
        failed.is_empty() && composites && secs < 300.0,
        format!(
            "{} checks x 20 seeds, worst rel err {worst:.2e}, failures {failed:?}, {secs:.1}s",
            reports.len()
        ),
    );
}

#[test]
fn criterion_4_masking_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let len = 200;
    let mut coverage = 0.0;
    for _ in 0..1000 {
        let m = contrastive_time_mask(len, 0.5, 10, &mut rng).unwrap();
        coverage += m.iter().filter(|&&b| b).count() as f64 / len as f64;
    }
    coverage /= 1000.0;

    let policy = AugmentPolicy::default();
    let mut worst_time = 0.0f64;
    let mut worst_freq = 0.0f64;
    for _ in 0..1000 {
        let frames = rng.gen_range(20..300);
        let vals = (0..frames * 80).map(|_| rng.gen_range(0.5..5.0)).collect();
        let f = FeatureMatrix::new(frames, 80, vals, Source::Real).unwrap();
        let out = specaugment(&f, &policy, &mut rng).unwrap();
        let zero_rows = (0..frames)
            .filter(|&t| out.frame(t).iter().all(|&x| x == 0.0))
            .count();
        let zero_cols = (0..80)
            .filter(|&d| (0..frames).all(|t| out.get(t, d) == 0.0))
            .count();
        worst_time = worst_time.max(zero_rows as f64 / frames as f64);
        worst_freq = worst_freq.max(zero_cols as f64 / 80.0);
    }
    let slack = 0.01;
    report(
        4,
        "masking statistics",
        (0.45..=0.55).contains(&coverage) && worst_time <= 0.2 + slack && worst_freq <= 0.2 + slack,
        format!("contrastive coverage {coverage:.4}, worst SpecAugment time {worst_time:.3}, freq {worst_freq:.3}"),
    );
}

fn unigram(probs: &[(&str, f64)]) -> NGramLM {
    let mut s = String::from("\\data\\\nngram 1=");
    s.push_str(&format!("{}\n\n\\1-grams:\n", probs.len() + 2));
    s.push_str("-30\t<unk>\n-30\t</s>\n");
    for (w, p) in probs {
        s.push_str(&format!("{}\t{w}\n", p.ln()));
    }
    s.push_str("\n\\end\\\n");
    NGramLM::from_arpa(&s).unwrap()
}

#[test]
fn criterion_5_text_selection() {
    let in_dom = ToyLanguage::generate(40, 3, 3, 6, 501).unwrap();
    let out_dom = ToyLanguage::generate(40, 3, 3, 6, 502).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d_train: Vec<String> = (0..2000).map(|_| in_dom.sentence(&mut rng)).collect();
    let b_train: Vec<String> = (0..2000)
        .map(|i| {
            if i % 2 == 0 {
                in_dom.sentence(&mut rng)
            } else {
                out_dom.sentence(&mut rng)
            }
        })
        .collect();
    let mut pool: Vec<(String, bool)> = (0..1000)
        .map(|_| {
            let inside = rng.gen_bool(0.5);
            (
                if inside {
                    in_dom.sentence(&mut rng)
                } else {
                    out_dom.sentence(&mut rng)
                },
                inside,
            )
        })
        .collect();
    pool.shuffle(&mut rng);
    let lm_d = NGramLM::train(&d_train, 3, 1, Tokenization::Words).unwrap();
    let lm_b = NGramLM::train(&b_train, 3, 1, Tokenization::Words).unwrap();
    let texts: Vec<&str> = pool.iter().map(|p| p.0.as_str()).collect();
    let top = select_text(&texts, &lm_d, &lm_b, 100).unwrap();
    let hits = top
        .iter()
        .filter(|s| pool.iter().any(|(t, inside)| *inside && t == &s.text))
        .count();

    let d = unigram(&[("a", 0.5), ("b", 0.5)]);
    let b = unigram(&[("a", 0.25), ("b", 0.25), ("c", 0.25), ("d", 0.25)]);
    let mut worst = 0.0f64;
    for n in 1..=60 {
        let s: Vec<&str> = (0..n).map(|_| if rng.gen() { "a" } else { "b" }).collect();
        let line = s.join(" ");
        let sel = select_text(&[line.as_str()], &d, &b, 1).unwrap();
        worst = worst.max((sel[0].score - 2f64.ln()).abs());
    }
    report(
        5,
        "contrastive text selection",
        hits >= 95 && worst <= 1e-9,
        format!("{hits}/100 top lines in-domain, max |S - ln 2| = {worst:.2e} over lengths 1..60"),
    );
}

const STUDY_SEEDS: [u64; 3] = [0, 1, 2];

struct SeedRun {
    pretrained: Pretrained,
    runs: BTreeMap<Variant, FinetuneRun>,
}

impl SeedRun {
    fn csvs(&self) -> Vec<(Variant, String, String)> {
        self.runs
            .iter()
            .map(|(v, r)| (*v, r.log.to_csv(), r.log.eval_csv()))
            .collect()
    }
}

struct Study {
    corpus: ToyCorpus,
    seeds: Vec<(u64, SeedRun)>,
    elapsed: Duration,
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn study_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig::load(ExperimentConfig::desk(), None, &[], Some(seed)).unwrap()
}

fn run_seed(corpus: &ToyCorpus, seed: u64) -> SeedRun {
    let cfg = study_config(seed);
    let pretrained = pretrain_variants(&cfg, corpus, &Variant::ALL, workers()).unwrap();
    let runs = Variant::ALL
        .iter()
        .map(|&v| {
            (
                v,
                finetune_variant(
                    &cfg,
                    &pretrained,
                    v,
                    &corpus.finetune,
                    &corpus.test,
                    workers(),
                )
                .unwrap(),
            )
        })
        .collect();
    SeedRun { pretrained, runs }
}

fn study() -> &'static Study {
    static STUDY: OnceLock<Study> = OnceLock::new();
    STUDY.get_or_init(|| {
        let t = Instant::now();
        let corpus = ToyCorpus::generate(&CorpusConfig::default(), workers()).unwrap();
        let seeds = STUDY_SEEDS
            .iter()
            .map(|&s| (s, run_seed(&corpus, s)))
            .collect();
        Study {
            corpus,
            seeds,
            elapsed: t.elapsed(),
        }
    })
}

fn median_wer(st: &Study, v: Variant) -> f64 {
    let mut w: Vec<f64> = st.seeds.iter().map(|(_, r)| r.runs[&v].test_wer).collect();
    w.sort_by(f64::total_cmp);
    w[w.len() / 2]
}

fn per_seed(st: &Study, v: Variant) -> String {
    let w: Vec<String> = st
        .seeds
        .iter()
        .map(|(_, r)| format!("{:.3}", r.runs[&v].test_wer))
        .collect();
    w.join("/")
}

#[test]
fn criterion_6_joint_pretraining_direction() {
    let st = study();
    let c = &st.corpus;
    let sizes_ok = c.pretrain.len() == 2000 && c.unspoken.len() == 2000 && c.finetune.len() == 100;
    let none = median_wer(st, Variant::NoPretrain);
    let speech = median_wer(st, Variant::SpeechOnly);
    let joint = median_wer(st, Variant::Joint);
    report(
        6,
        "joint pretraining beats speech-only and none",
        sizes_ok
            && joint <= speech - 0.01
            && joint <= none
            && speech <= none
            && st.elapsed < Duration::from_secs(30 * 60),
        format!(
            "median WER none {none:.4} ({}), speech_only {speech:.4} ({}), joint {joint:.4} ({}); \
             {} unlabeled, {} text, {} labeled; study took {:.0} s",
            per_seed(st, Variant::NoPretrain),
            per_seed(st, Variant::SpeechOnly),
            per_seed(st, Variant::Joint),
            c.pretrain.len(),
            c.unspoken.len(),
            c.finetune.len(),
            st.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_7_aux_decoder_ablation() {
    let st = study();
    let joint = median_wer(st, Variant::Joint);
    let noaux = median_wer(st, Variant::JointNoAux);
    report(
        7,
        "auxiliary decoders help joint pretraining",
        noaux - joint >= 0.005,
        format!(
            "median WER joint {joint:.4} ({}), without aux {noaux:.4} ({}), gap {:.4}",
            per_seed(st, Variant::Joint),
            per_seed(st, Variant::JointNoAux),
            noaux - joint
        ),
    );
}

/// Greedy WER followed by beam WER for each beta.
fn fusion_sweep(
    cfg: &ExperimentConfig,
    run: &FinetuneRun,
    test: &[Utterance],
    lm: &NGramLM,
    betas: &[f64],
) -> (f64, Vec<f64>) {
    let encoder = cfg.encoder().unwrap();
    let head = finetune_head(cfg.finetune.objective, cfg.finetune.joint_dim);
    let params = run.state.eval_params();
    let greedy = DecodeConfig {
        mode: DecodeMode::Greedy,
        ..cfg.decode.clone()
    };
    let g = evaluate(params, &encoder, &head, test, &greedy, None, workers()).unwrap();
    let beams = betas
        .iter()
        .map(|&beta| {
            let d = DecodeConfig {
                mode: DecodeMode::Beam,
                beta,
                ..cfg.decode.clone()
            };
            evaluate(params, &encoder, &head, test, &d, Some(lm), workers()).unwrap()
        })
        .collect();
    (g, beams)
}

#[test]
fn criterion_8_shallow_fusion() {
    let st = study();
    let (seed, first) = &st.seeds[0];
    let cfg = study_config(*seed);
    let lm = NGramLM::train(&st.corpus.unspoken, 2, 1, Tokenization::Words).unwrap();
    let betas = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

    let (g100, b100) = fusion_sweep(
        &cfg,
        &first.runs[&Variant::Joint],
        &st.corpus.test,
        &lm,
        &betas,
    );
    let small = finetune_variant(
        &cfg,
        &first.pretrained,
        Variant::Joint,
        &st.corpus.finetune[..25],
        &st.corpus.test,
        workers(),
    )
    .unwrap();
    let (g25, b25) = fusion_sweep(&cfg, &small, &st.corpus.test, &lm, &betas);

    let exact = b100[0] == g100 && b25[0] == g25;
    let worst = b100[1..]
        .iter()
        .chain(&b25[1..])
        .zip([g100; 5].iter().chain(&[g25; 5]))
        .map(|(b, g)| b - g)
        .fold(f64::NEG_INFINITY, f64::max);
    let best25 = b25[1..].iter().cloned().fold(f64::INFINITY, f64::min);
    let fmt = |ws: &[f64]| {
        ws.iter()
            .zip(&betas)
            .map(|(w, b)| format!("{b}:{w:.4}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    report(
        8,
        "shallow fusion sanity",
        exact && worst <= 0.005 && best25 < g25,
        format!(
            "100 labeled: greedy {g100:.4}, beam {}; 25 labeled: greedy {g25:.4}, beam {}; worst increase {worst:.4}",
            fmt(&b100),
            fmt(&b25)
        ),
    );
}

#[test]
fn criterion_9_determinism() {
    let st = study();
    let (seed, first) = &st.seeds[0];
    let again = run_seed(&st.corpus, *seed);
    let (a, b) = (first.csvs(), again.csvs());
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let rows: usize = a.iter().map(|(_, m, _)| m.lines().count() - 1).sum();
    report(
        9,
        "identical seeds give identical metrics",
        a.len() == b.len() && differing.is_empty(),
        format!(
            "{} variants, {rows} metric rows compared for seed {seed}; differing: {differing:?}",
            a.len()
        ),
    );
}

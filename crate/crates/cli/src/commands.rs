use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tts4pretrain::features::{write_features, FeatureMatrix};
use tts4pretrain::gradsuite;
use tts4pretrain::lm::{format_selection, select_text, NGramLM, Tokenization};
use tts4pretrain::losses::Objective;
use tts4pretrain::numerics::ModelParams;
use tts4pretrain::pipeline::corpus::{load_utterances, ToyCorpus, Utterance};
use tts4pretrain::pipeline::experiment::ExperimentConfig;
use tts4pretrain::pipeline::{
    corpus_wer, derive_seed, evaluate, finetune_head, init_pretrain_params, run_finetuning,
    run_pretraining, start_finetuning, transcribe_all, MetricsLog, TrainConfig, TrainState,
};
use tts4pretrain::pseudotts::{g2p, Lexicon};
use tts4pretrain::{Error, Result};

use crate::{Cli, Command, Global};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PretrainPhase {
    SpeechOnly,
    Joint,
    Both,
}

fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var("TTS4P_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("TTS4P_SEED={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn resolve(g: &Global) -> Result<ExperimentConfig> {
    let base = if g.desk {
        ExperimentConfig::desk()
    } else {
        ExperimentConfig::default()
    };
    let cfg = ExperimentConfig::load(base, g.config.as_deref(), &g.overrides, seed_from_env()?)?;
    if g.workers == 0 {
        return Err(Error::Config("--workers must be at least 1".into()));
    }
    Ok(cfg)
}

fn echo(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<()> {
    let json = cfg.to_json();
    println!("{json}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), json + "\n")?;
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn load_lexicon(dir: &Path) -> Result<Lexicon> {
    let (lex, inv) = (dir.join("lexicon.tsv"), dir.join("phones.txt"));
    if !lex.exists() || !inv.exists() {
        return Err(Error::Data(format!(
            "{} lacks lexicon.tsv or phones.txt",
            dir.display()
        )));
    }
    Lexicon::load(lex, inv)
}

fn load_split(dir: &Path, name: &str) -> Result<Vec<Utterance>> {
    let p = dir.join(format!("{name}.jsonl"));
    if !p.exists() {
        return Err(Error::Data(format!("missing manifest {}", p.display())));
    }
    load_utterances(p)
}

fn load_ckpt(path: &Path) -> Result<ModelParams> {
    ModelParams::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", path.display())),
        e => e,
    })
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.global)?;
    let workers = cli.global.workers;
    let data_dir = |d: &Option<PathBuf>| {
        d.clone()
            .unwrap_or_else(|| PathBuf::from(&cfg.paths.data_dir))
    };
    let out_dir = |d: &Option<PathBuf>| {
        d.clone()
            .unwrap_or_else(|| PathBuf::from(&cfg.paths.out_dir))
    };
    match cli.command {
        Command::MakeToyCorpus {
            out,
            vocab_size,
            n_utts,
            seed,
        } => {
            let mut cfg = cfg;
            if let Some(v) = vocab_size {
                cfg.corpus.vocab_size = v;
            }
            if let Some(n) = n_utts {
                cfg.corpus.n_pretrain = n;
            }
            if let Some(s) = seed {
                cfg.corpus.seed = s;
            }
            echo(&cfg, None)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| Error::Data(format!("{}: {e}", out.display())))?;
            let corpus = ToyCorpus::generate(&cfg.corpus, workers)?;
            corpus.write(&out)?;
            eprintln!(
                "wrote {} pretrain, {} finetune, {} test utterances and {} text lines to {}",
                corpus.pretrain.len(),
                corpus.finetune.len(),
                corpus.test.len(),
                corpus.unspoken.len(),
                out.display()
            );
            Ok(())
        }
        Command::Pretrain {
            data,
            out,
            phase,
            init,
            text,
        } => {
            let (data, out) = (data_dir(&data), out_dir(&out));
            echo(&cfg, Some(&out))?;
            pretrain(
                &cfg,
                &data,
                &out,
                phase,
                init.as_deref(),
                text.as_deref(),
                workers,
            )
        }
        Command::Finetune { data, out, init } => {
            let (data, out) = (data_dir(&data), out_dir(&out));
            echo(&cfg, Some(&out))?;
            finetune(&cfg, &data, &out, init.as_deref(), workers)
        }
        Command::Decode {
            ckpt,
            manifest,
            out,
            refs,
        } => {
            echo(&cfg, None)?;
            decode(
                &cfg,
                &ckpt,
                &manifest,
                out.as_deref(),
                refs.as_deref(),
                workers,
            )
        }
        Command::Score { reference, hyp } => {
            echo(&cfg, None)?;
            score(&reference, &hyp)
        }
        Command::SelectText {
            in_domain,
            background,
            pool,
            top_k,
            out,
        } => {
            echo(&cfg, None)?;
            let n = cfg.lm.select_order;
            let lm_d = NGramLM::train(
                &read_lines(&in_domain)?,
                n,
                cfg.lm.min_count,
                Tokenization::Words,
            )?;
            let lm_b = NGramLM::train(
                &read_lines(&background)?,
                n,
                cfg.lm.min_count,
                Tokenization::Words,
            )?;
            let sel = select_text(&read_lines(&pool)?, &lm_d, &lm_b, top_k)?;
            emit(out.as_deref(), &format_selection(&sel))
        }
        Command::TrainLm {
            text,
            out,
            order,
            chars,
        } => {
            echo(&cfg, None)?;
            let tok = if chars {
                Tokenization::Chars
            } else {
                cfg.lm.fusion_tokenization
            };
            let lm = NGramLM::train(
                &read_lines(&text)?,
                order.unwrap_or(cfg.lm.fusion_order),
                cfg.lm.min_count,
                tok,
            )?;
            lm.save(&out)
        }
        Command::Synth { text, out, data } => {
            echo(&cfg, None)?;
            let lex = match data {
                Some(d) => load_lexicon(&d)?,
                None => Lexicon::toy(),
            };
            let phones = g2p(&text, &lex)?;
            let synth = cfg.synthesizer(lex)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x5f]));
            let u = synth.synth_on_the_fly(&text, &mut rng)?;
            write_features(&out, &u.features)?;
            let syms: Vec<&str> = phones
                .ids
                .iter()
                .map(|&i| synth.lexicon.symbol(i).unwrap_or("?"))
                .collect();
            eprintln!(
                "{} frames, phonemes: {}",
                u.features.frames(),
                syms.join(" ")
            );
            Ok(())
        }
        Command::Gradcheck { seeds } => {
            echo(&cfg, None)?;
            let reports = gradsuite::run(seeds)?;
            let mut bad = Vec::new();
            for r in &reports {
                println!(
                    "{:<20} {:.3e} {}",
                    r.name,
                    r.worst,
                    if r.passed() { "ok" } else { "FAIL" }
                );
                if !r.passed() {
                    bad.push(r.name);
                }
            }
            if bad.is_empty() {
                Ok(())
            } else {
                Err(Error::Numeric(format!(
                    "gradient check failed for {}",
                    bad.join(", ")
                )))
            }
        }
        Command::Report { metrics, out } => {
            echo(&cfg, None)?;
            report(&metrics, &out)
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => Ok(std::fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn pretrain(
    cfg: &ExperimentConfig,
    data: &Path,
    out: &Path,
    phase: PretrainPhase,
    init: Option<&Path>,
    text: Option<&Path>,
    workers: usize,
) -> Result<()> {
    let encoder = cfg.encoder()?;
    let lex = load_lexicon(data)?;
    let real: Vec<FeatureMatrix> = load_split(data, "pretrain")?
        .into_iter()
        .map(|u| u.features)
        .collect();
    let texts = read_lines(
        &text
            .map(Path::to_path_buf)
            .unwrap_or_else(|| data.join("unspoken.txt")),
    )?;
    let synth = cfg.synthesizer(lex.clone())?;
    let mut log = MetricsLog::default();
    let mut params = match init {
        Some(p) => Some(load_ckpt(p)?),
        None => None,
    };
    if phase != PretrainPhase::Joint {
        let mut st = TrainState::new(
            init_pretrain_params(&encoder, &[], cfg.seed)?,
            cfg.pretrain.use_ema,
        );
        run_pretraining(
            &mut st,
            &real,
            &texts,
            &synth,
            &encoder,
            &[],
            &cfg.augment,
            &cfg.pretrain,
            workers,
            &mut log,
        )?;
        save_state(&st, out, "speech_only")?;
        params = Some(st.params);
    }
    if phase != PretrainPhase::SpeechOnly {
        let start = params.ok_or_else(|| {
            Error::Config("joint pretraining needs --init or a speech-only phase".into())
        })?;
        let jc: &TrainConfig = &cfg.joint;
        let heads = if jc.lambda_aux > 0.0 {
            cfg.aux.heads(&lex)
        } else {
            Vec::new()
        };
        let mut st = TrainState::continue_from(&start, &encoder, &heads, jc.use_ema, cfg.seed)?;
        run_pretraining(
            &mut st,
            &real,
            &texts,
            &synth,
            &encoder,
            &heads,
            &cfg.augment,
            jc,
            workers,
            &mut log,
        )?;
        save_state(&st, out, "joint")?;
    }
    log.append_csv(out.join("metrics.csv"))
}

fn save_state(st: &TrainState, out: &Path, name: &str) -> Result<()> {
    st.params.save(out.join(format!("{name}.ckpt")))?;
    if let Some(e) = &st.ema {
        e.save(out.join(format!("{name}_ema.ckpt")))?;
    }
    Ok(())
}

fn finetune(
    cfg: &ExperimentConfig,
    data: &Path,
    out: &Path,
    init: Option<&Path>,
    workers: usize,
) -> Result<()> {
    let encoder = cfg.encoder()?;
    let head = finetune_head(cfg.finetune.objective, cfg.finetune.joint_dim);
    let train = load_split(data, "finetune")?;
    let pre = match init {
        Some(p) => Some(load_ckpt(p)?),
        None => None,
    };
    let mut st = start_finetuning(pre.as_ref(), &encoder, &head, &cfg.finetune)?;
    let mut log = MetricsLog::default();
    run_finetuning(
        &mut st,
        &train,
        &encoder,
        &head,
        &cfg.augment,
        &cfg.finetune,
        workers,
        &mut log,
    )?;
    save_state(&st, out, "finetuned")?;
    log.append_csv(out.join("metrics.csv"))?;
    let test_path = data.join("test.jsonl");
    if test_path.exists() {
        let test = load_utterances(&test_path)?;
        let lm = fusion_lm(cfg)?;
        let w = evaluate(
            st.eval_params(),
            &encoder,
            &head,
            &test,
            &cfg.decode,
            lm.as_ref(),
            workers,
        )?;
        let mut ev = MetricsLog::default();
        ev.push_eval("finetuned", "test", w);
        ev.append_eval_csv(out.join("eval.csv"))?;
        eprintln!("test WER {w:.4}");
    }
    Ok(())
}

fn fusion_lm(cfg: &ExperimentConfig) -> Result<Option<NGramLM>> {
    match &cfg.decode.lm {
        Some(p) => Ok(Some(
            NGramLM::load(p).map_err(|e| Error::Data(format!("{p}: {e}")))?,
        )),
        None => Ok(None),
    }
}

fn decode(
    cfg: &ExperimentConfig,
    ckpt: &Path,
    manifest: &Path,
    out: Option<&Path>,
    refs: Option<&Path>,
    workers: usize,
) -> Result<()> {
    let params = load_ckpt(ckpt)?;
    let objective = if params.contains("ft.wordpiece.w") {
        Objective::Ctc
    } else if params.contains("ft.wordpiece.enc_w") {
        Objective::Rnnt
    } else {
        return Err(Error::Data(format!(
            "{} has no fine-tuned decoder",
            ckpt.display()
        )));
    };
    let joint_dim = params
        .get("ft.wordpiece.enc_w")
        .map_or(cfg.finetune.joint_dim, |t| t.shape()[1]);
    let head = finetune_head(objective, joint_dim);
    let encoder = cfg.encoder()?;
    let utts = load_utterances(manifest)?;
    let lm = fusion_lm(cfg)?;
    let hyps = transcribe_all(
        &params,
        &encoder,
        &head,
        &utts,
        &cfg.decode,
        lm.as_ref(),
        workers,
    )?;
    let mut text = String::new();
    for (u, h) in utts.iter().zip(&hyps) {
        let _ = writeln!(text, "{}\t{h}", u.id);
    }
    emit(out, &text)?;
    if let Some(r) = refs {
        let mut text = String::new();
        for u in &utts {
            let _ = writeln!(text, "{}\t{}", u.id, u.text.as_deref().unwrap_or(""));
        }
        std::fs::write(r, text)?;
    }
    Ok(())
}

/// Drops a leading `id<TAB>` field when present.
fn transcript(line: &str) -> &str {
    line.split_once('\t').map_or(line, |(_, t)| t)
}

fn score(reference: &Path, hyp: &Path) -> Result<()> {
    let read = |p: &Path| -> Result<Vec<String>> {
        let text =
            std::fs::read_to_string(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
        Ok(text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(String::from)
            .collect())
    };
    let (r, h) = (read(reference)?, read(hyp)?);
    if r.len() != h.len() {
        return Err(Error::Data(format!(
            "{} reference lines but {} hypothesis lines",
            r.len(),
            h.len()
        )));
    }
    let pairs: Vec<(&str, &str)> = r
        .iter()
        .zip(&h)
        .map(|(a, b)| (transcript(a), transcript(b)))
        .collect();
    let w = corpus_wer(&pairs).map_err(|e| Error::Data(e.to_string()))?;
    println!("{w:.4}");
    Ok(())
}

fn report(metrics: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(metrics)
        .map_err(|e| Error::Data(format!("{}: {e}", metrics.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("empty metrics file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"step") || !cols.contains(&"phase") {
        return Err(Error::Data(format!(
            "{} is not a metrics CSV",
            metrics.display()
        )));
    }
    let mut s = format!("# {}\n", cols.join(" "));
    for (n, l) in lines.enumerate() {
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != cols.len() {
            return Err(Error::Data(format!(
                "metrics row {} has {} fields",
                n + 2,
                f.len()
            )));
        }
        s.push_str(&f.join(" "));
        s.push('\n');
    }
    std::fs::write(out, s)?;
    Ok(())
}

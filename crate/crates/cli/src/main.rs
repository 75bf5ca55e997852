//! Command-line driver: synthetic data generation, n-gram training, both
//! training phases, decoding, metrics and gradient checks.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numerical-invariant
//! failure.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use dbeam_core::config::Config;
use dbeam_core::data::{
    load_lexicon, load_lm_corpus, load_split, load_tokens, synth_generate, write_dataset,
    SynthConfig,
};
use dbeam_core::dbd::Aggregation;
use dbeam_core::error::CoreError;
use dbeam_core::gradcheck;
use dbeam_core::lexicon::{build_trie, Lexicon};
use dbeam_core::lm::{
    arpa_load, arpa_save, ngram_train, BilinearLm, PretrainedWrapper, SmoothingConfig, WordLm,
};
use dbeam_core::metrics::ErrorRateAccumulator;
use dbeam_core::train::{
    beam_transcribe, prepare, train_asg, train_dbd, Checkpoint, Model, TrainConfig,
};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "dbeam",
    version,
    about = "lexicon-constrained differentiable beam search toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset, lexicon and LM corpus
    Synth {
        /// flat key=value config file
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a smoothed n-gram and save it as ARPA text
    LmTrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 2)]
        order: usize,
        #[arg(long)]
        out: PathBuf,
        /// additive smoothing constant
        #[arg(long, default_value_t = 0.1)]
        add_k: f64,
        /// reserve an <unk> entry
        #[arg(long, default_value_t = false)]
        with_unk: bool,
    },
    /// Bootstrap phase: train scorer and transitions with the
    /// all-sequences normalizer
    TrainAsg {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune through the lexicon-constrained beam from a bootstrap
    /// checkpoint
    TrainDbd {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// starting checkpoint; omit only with --from-scratch
        #[arg(long)]
        from: Option<PathBuf>,
        /// train without a bootstrap checkpoint
        #[arg(long, default_value_t = false)]
        from_scratch: bool,
        #[arg(long, value_parser = parse_lm_spec)]
        lm: LmSpec,
        /// beam size override
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a split and report error rates
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_lm_spec)]
        lm: LmSpec,
        #[arg(long, default_value_t = 500)]
        beam: usize,
        #[arg(long, value_enum, default_value_t = Criterion::Forward)]
        criterion: Criterion,
        #[arg(long, default_value = "test")]
        split: String,
        /// hypotheses file (id<TAB>words)
        #[arg(long, default_value = "hyps.tsv")]
        out: PathBuf,
        /// language model weight override (wrapper only)
        #[arg(long, allow_negative_numbers = true)]
        lm_weight: Option<f64>,
        /// word insertion score override (wrapper only)
        #[arg(long, allow_negative_numbers = true)]
        word_score: Option<f64>,
    },
    /// Score a hypotheses file against a reference file
    Eval {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Run a finite-difference gradient suite
    Gradcheck {
        #[arg(long)]
        suite: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        cases: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Criterion {
    Forward,
    Viterbi,
}

#[derive(Clone, Debug)]
enum LmSpec {
    Zero,
    Arpa(PathBuf),
    Bilinear,
}

fn parse_lm_spec(s: &str) -> Result<LmSpec, String> {
    if s == "zero" {
        Ok(LmSpec::Zero)
    } else if s == "bilinear" {
        Ok(LmSpec::Bilinear)
    } else if let Some(path) = s.strip_prefix("arpa:") {
        Ok(LmSpec::Arpa(PathBuf::from(path)))
    } else {
        Err(format!(
            "unknown LM spec {s:?} (want zero, arpa:PATH or bilinear)"
        ))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CoreError::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<Config, CoreError> {
    match path {
        Some(p) => Config::from_file(p),
        None => Ok(Config::empty()),
    }
}

fn run(cli: Cli) -> Result<(), CoreError> {
    match cli.command {
        Command::Synth { config, out } => {
            let cfg = SynthConfig::from_config(&load_config(&config)?)?;
            let data = synth_generate(&cfg)?;
            write_dataset(&out, &data)?;
            println!(
                "wrote {} train / {} valid / {} test utterances, {} lexicon words, {} LM sentences to {}",
                data.train.len(),
                data.valid.len(),
                data.test.len(),
                data.lexicon.len(),
                data.lm_sentences.len(),
                out.display()
            );
            Ok(())
        }
        Command::LmTrain {
            corpus,
            order,
            out,
            add_k,
            with_unk,
        } => {
            let sentences = load_lm_corpus(&corpus)?;
            let lm = ngram_train(&sentences, order, SmoothingConfig { add_k, with_unk })?;
            arpa_save(&lm, &out)?;
            let ppl = lm.perplexity(&sentences)?;
            println!(
                "trained {order}-gram over {} sentences ({} words); train perplexity {ppl:.3}; saved {}",
                sentences.len(),
                lm.vocab().len(),
                out.display()
            );
            Ok(())
        }
        Command::TrainAsg { config, data, out } => {
            let cfg = TrainConfig::from_config(&load_config(&config)?)?;
            let tokens = load_tokens(&data)?;
            let lexicon = load_lexicon(&data, &tokens)?;
            let train = prepare(load_split(&data, "train")?, &tokens, &lexicon)?;
            for s in &train.skipped {
                eprintln!("skipping {s}");
            }
            let valid = load_split(&data, "valid")?;
            let feature_dim = train
                .utts
                .first()
                .map(|u| u.features.cols())
                .ok_or_else(|| CoreError::data("training split is empty"))?;
            let mut model = Model::new(&cfg, feature_dim, tokens.size())?;
            let stats = train_asg(&cfg, &mut model, &train, &valid, &tokens, &lexicon, &out)?;
            if let Some(last) = stats.last() {
                println!(
                    "asg done: epoch {} loss {:.4} valid CER {:.2}% WER {:.2}%",
                    last.epoch, last.loss, last.valid_cer, last.valid_wer
                );
            }
            Ok(())
        }
        Command::TrainDbd {
            config,
            data,
            from,
            from_scratch,
            lm,
            beam,
            out,
        } => {
            let mut cfg = TrainConfig::from_config(&load_config(&config)?)?;
            if let Some(b) = beam {
                cfg.beam_size = b;
            }
            let tokens = load_tokens(&data)?;
            let lexicon = load_lexicon(&data, &tokens)?;
            let train = prepare(load_split(&data, "train")?, &tokens, &lexicon)?;
            for s in &train.skipped {
                eprintln!("skipping {s}");
            }
            let valid = load_split(&data, "valid")?;
            let feature_dim = train
                .utts
                .first()
                .map(|u| u.features.cols())
                .ok_or_else(|| CoreError::data("training split is empty"))?;
            let mut model = match (&from, from_scratch) {
                (Some(path), _) => Checkpoint::load(path)?.restore_model()?,
                (None, true) => Model::new(&cfg, feature_dim, tokens.size())?,
                (None, false) => return Err(CoreError::data(
                    "beam training starts from a checkpoint; pass --from CKPT or --from-scratch",
                )),
            };
            let mut word_lm = build_word_lm(&lm, &cfg, &from, &lexicon, None, None)?;
            let stats = train_dbd(
                &cfg,
                &mut model,
                &mut word_lm,
                &train,
                &valid,
                &tokens,
                &lexicon,
                &out,
            )?;
            if let Some(last) = stats.last() {
                println!(
                    "dbd done: epoch {} loss {:.4} valid CER {:.2}% WER {:.2}%",
                    last.epoch, last.loss, last.valid_cer, last.valid_wer
                );
            }
            if let WordLm::Pretrained(w) = &word_lm {
                println!(
                    "learned lm weight {:.4}, word score {:.4}",
                    w.lambda, w.gamma
                );
            }
            Ok(())
        }
        Command::Decode {
            ckpt,
            data,
            lm,
            beam,
            criterion,
            split,
            out,
            lm_weight,
            word_score,
        } => {
            let tokens = load_tokens(&data)?;
            let lexicon = load_lexicon(&data, &tokens)?;
            let utts = load_split(&data, &split)?;
            let checkpoint = Checkpoint::load(&ckpt)?;
            let model = checkpoint.restore_model()?;
            let word_lm = build_word_lm(
                &lm,
                &TrainConfig::default(),
                &Some(ckpt.clone()),
                &lexicon,
                lm_weight,
                word_score,
            )?;
            let trie = build_trie(&lexicon, &tokens)?;
            let opts = dbeam_core::DecoderOpts {
                beam_size: beam,
                apply_eos: true,
            };
            let agg = match criterion {
                Criterion::Forward => Aggregation::Forward,
                Criterion::Viterbi => Aggregation::Viterbi,
            };
            let mut acc = ErrorRateAccumulator::new();
            let mut hyp_text = String::new();
            for u in &utts {
                let hyp = beam_transcribe(&model, &word_lm, &trie, &lexicon, &opts, agg, u)?;
                writeln!(hyp_text, "{}\t{}", u.id, hyp.join(" ")).expect("string write");
                acc.push(&hyp, &u.words);
            }
            std::fs::write(&out, hyp_text)?;
            println!(
                "{split}: {} utterances, WER {:.2}% CER {:.2}%; hypotheses in {}",
                utts.len(),
                acc.wer(),
                acc.cer(),
                out.display()
            );
            Ok(())
        }
        Command::Eval { hyp, reference } => {
            let hyps = read_tsv(&hyp)?;
            let refs = read_tsv(&reference)?;
            let mut acc = ErrorRateAccumulator::new();
            let mut n = 0usize;
            for (id, ref_words) in &refs {
                let hyp_words = hyps
                    .iter()
                    .find(|(hid, _)| hid == id)
                    .map(|(_, w)| w.clone())
                    .ok_or_else(|| CoreError::data(format!("hypotheses lack utterance {id}")))?;
                acc.push(&hyp_words, ref_words);
                n += 1;
            }
            println!(
                "{n} utterances, WER {:.2}% CER {:.2}%",
                acc.wer(),
                acc.cer()
            );
            Ok(())
        }
        Command::Gradcheck { suite, seed, cases } => {
            let reports = gradcheck::run_suite(&suite, seed, cases)?;
            let mut failed = 0usize;
            for r in &reports {
                println!(
                    "{} {} max_rel_err {:.3e} tol {:.1e} {}",
                    r.suite,
                    r.case,
                    r.max_rel_err,
                    r.tol,
                    if r.passed { "ok" } else { "FAIL" }
                );
                if !r.passed {
                    failed += 1;
                }
            }
            if failed > 0 {
                return Err(CoreError::numeric(format!(
                    "{failed}/{} gradient checks failed in suite {suite}",
                    reports.len()
                )));
            }
            println!("suite {suite}: {} checks passed", reports.len());
            Ok(())
        }
    }
}

/// Builds the word model for beam training or decoding. Wrapper weights
/// come from (in priority order) explicit overrides, the checkpoint, then
/// the config initial values.
fn build_word_lm(
    spec: &LmSpec,
    cfg: &TrainConfig,
    ckpt: &Option<PathBuf>,
    lexicon: &Lexicon,
    lm_weight: Option<f64>,
    word_score: Option<f64>,
) -> Result<WordLm, CoreError> {
    let checkpoint = match ckpt {
        Some(path) => Some(Checkpoint::load(path)?),
        None => None,
    };
    match spec {
        LmSpec::Zero => Ok(WordLm::Zero),
        LmSpec::Arpa(path) => {
            let base = arpa_load(path)?;
            let restored = checkpoint
                .as_ref()
                .and_then(|c| c.restore_lm(Some(base.clone()), lexicon).ok())
                .and_then(|lm| match lm {
                    WordLm::Pretrained(w) => Some(w),
                    _ => None,
                });
            let mut wrapper = match restored {
                Some(w) => w,
                None => {
                    let mut w =
                        PretrainedWrapper::new(base, cfg.lambda_init, cfg.gamma_init, lexicon)?;
                    w.per_word_gamma = cfg.per_word_gamma;
                    w
                }
            };
            if let Some(l) = lm_weight {
                wrapper.lambda = l;
            }
            if let Some(g) = word_score {
                wrapper.gamma = g;
            }
            Ok(WordLm::Pretrained(wrapper))
        }
        LmSpec::Bilinear => {
            if let Some(c) = checkpoint.as_ref() {
                if c.meta.get("lm").map(String::as_str) == Some("bilinear") {
                    return c.restore_lm(None, lexicon);
                }
            }
            Ok(WordLm::Bilinear(BilinearLm::new(
                lexicon.len(),
                cfg.bilinear_order,
                cfg.bilinear_dim,
                cfg.init_seed,
            )?))
        }
    }
}

fn read_tsv(path: &Path) -> Result<Vec<(String, Vec<String>)>, CoreError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, words) = line.split_once('\t').ok_or_else(|| {
            CoreError::data(format!(
                "{}:{}: expected id<TAB>words",
                path.display(),
                lineno + 1
            ))
        })?;
        out.push((
            id.to_string(),
            words.split_whitespace().map(str::to_string).collect(),
        ));
    }
    Ok(out)
}

//! Dataset layout, feature-file binary format, and the synthetic corpus
//! generator that stands in for recorded speech.
//!
//! A dataset directory holds `tokens.txt` (one symbol per line),
//! `lexicon.txt`, `{train,valid,test}.tsv` (`id<TAB>transcript`),
//! `features/<id>.bin` and `lm_corpus.txt`. Feature files carry a header of
//! two little-endian u64 (frames, feature dim) followed by row-major
//! little-endian f64.
//!
//! Synthetic utterances are drawn from a ground-truth word bigram; each
//! token of the spelled transcript (single separators between words) emits
//! a run of frames around a fixed random unit embedding plus isotropic
//! Gaussian noise.

use crate::config::Config;
use crate::error::{CoreError, Result};
use crate::lexicon::Lexicon;
use crate::tensor::Mat;
use crate::token::TokenSet;
use rand::distributions::Distribution;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub features: Mat,
    pub words: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub word_len_min: usize,
    pub word_len_max: usize,
    pub alphabet_size: usize,
    pub feature_dim: usize,
    pub duration_min: usize,
    pub duration_max: usize,
    pub noise_sigma: f64,
    /// exponent sharpening the ground-truth bigram rows; 1 keeps the raw
    /// exponential weights, larger values concentrate each row on fewer
    /// successors (a more informative word model)
    pub bigram_peakiness: f64,
    pub sentence_len_min: usize,
    pub sentence_len_max: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub n_lm_sentences: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 50,
            word_len_min: 2,
            word_len_max: 6,
            alphabet_size: 26,
            feature_dim: 8,
            duration_min: 1,
            duration_max: 3,
            noise_sigma: 0.0,
            bigram_peakiness: 1.0,
            sentence_len_min: 1,
            sentence_len_max: 4,
            n_train: 200,
            n_valid: 50,
            n_test: 50,
            n_lm_sentences: 2000,
            seed: 1,
        }
    }
}

pub const SYNTH_CONFIG_KEYS: &[&str] = &[
    "vocab_size",
    "word_len_min",
    "word_len_max",
    "alphabet_size",
    "feature_dim",
    "duration_min",
    "duration_max",
    "noise_sigma",
    "bigram_peakiness",
    "sentence_len_min",
    "sentence_len_max",
    "n_train",
    "n_valid",
    "n_test",
    "n_lm_sentences",
    "seed",
];

impl SynthConfig {
    pub fn from_config(c: &Config) -> Result<Self> {
        c.ensure_known(SYNTH_CONFIG_KEYS)?;
        let d = SynthConfig::default();
        let cfg = SynthConfig {
            vocab_size: c.get_usize("vocab_size", d.vocab_size)?,
            word_len_min: c.get_usize("word_len_min", d.word_len_min)?,
            word_len_max: c.get_usize("word_len_max", d.word_len_max)?,
            alphabet_size: c.get_usize("alphabet_size", d.alphabet_size)?,
            feature_dim: c.get_usize("feature_dim", d.feature_dim)?,
            duration_min: c.get_usize("duration_min", d.duration_min)?,
            duration_max: c.get_usize("duration_max", d.duration_max)?,
            noise_sigma: c.get_f64("noise_sigma", d.noise_sigma)?,
            bigram_peakiness: c.get_f64("bigram_peakiness", d.bigram_peakiness)?,
            sentence_len_min: c.get_usize("sentence_len_min", d.sentence_len_min)?,
            sentence_len_max: c.get_usize("sentence_len_max", d.sentence_len_max)?,
            n_train: c.get_usize("n_train", d.n_train)?,
            n_valid: c.get_usize("n_valid", d.n_valid)?,
            n_test: c.get_usize("n_test", d.n_test)?,
            n_lm_sentences: c.get_usize("n_lm_sentences", d.n_lm_sentences)?,
            seed: c.get_u64("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.feature_dim == 0
            || self.n_train == 0
            || self.word_len_min == 0
            || self.duration_min == 0
            || self.sentence_len_min == 0
        {
            return Err(CoreError::data("synthetic config sizes must be positive"));
        }
        if self.word_len_min > self.word_len_max
            || self.duration_min > self.duration_max
            || self.sentence_len_min > self.sentence_len_max
        {
            return Err(CoreError::data("synthetic config ranges are inverted"));
        }
        if self.noise_sigma < 0.0 {
            return Err(CoreError::data("noise_sigma must be non-negative"));
        }
        if self.bigram_peakiness <= 0.0 {
            return Err(CoreError::data("bigram_peakiness must be positive"));
        }
        if self.alphabet_size == 0 || self.alphabet_size > 26 {
            return Err(CoreError::data("alphabet_size must be in 1..=26"));
        }
        Ok(())
    }
}

/// Everything the generator produces before it is written to disk.
pub struct SynthOutput {
    pub tokens: TokenSet,
    pub lexicon: Lexicon,
    pub train: Vec<Utterance>,
    pub valid: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub lm_sentences: Vec<Vec<String>>,
    /// ground-truth next-word distribution, rows = previous word
    /// (last row = sentence start), used by tests
    pub bigram: Mat,
}

/// Samples the vocabulary, the word bigram, the token embeddings and all
/// three splits. Deterministic given the seed.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let letters: String = ('a'..='z').take(cfg.alphabet_size).collect();
    let tokens = TokenSet::from_chars(&letters, true)?;

    // unique random words
    let mut words: Vec<String> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let letter_vec: Vec<char> = letters.chars().collect();
    let mut attempts = 0usize;
    while words.len() < cfg.vocab_size {
        attempts += 1;
        if attempts > cfg.vocab_size * 1000 {
            return Err(CoreError::data(
                "could not sample enough distinct words; enlarge the alphabet or word length",
            ));
        }
        let len = rng.gen_range(cfg.word_len_min..=cfg.word_len_max);
        let w: String = (0..len)
            .map(|_| letter_vec[rng.gen_range(0..letter_vec.len())])
            .collect();
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    let lexicon = Lexicon::from_words(words.iter().map(String::as_str), &tokens)?;

    // ground-truth bigram: rows 0..V condition on a word, row V on sentence
    // start; exponential weights normalized per row
    let v = cfg.vocab_size;
    let mut bigram = Mat::from_fn(v + 1, v, |_, _| {
        (-rng.gen::<f64>().ln()).powf(cfg.bigram_peakiness)
    });
    for r in 0..v + 1 {
        let total: f64 = bigram.row(r).iter().sum();
        for c in 0..v {
            let p = bigram.get(r, c) / total;
            bigram.set(r, c, p);
        }
    }

    // fixed random unit embedding per token
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let n_tokens = tokens.size();
    let mut embeddings = Mat::from_fn(n_tokens, cfg.feature_dim, |_, _| normal.sample(&mut rng));
    for t in 0..n_tokens {
        let norm: f64 = embeddings.row(t).iter().map(|x| x * x).sum::<f64>().sqrt();
        for c in 0..cfg.feature_dim {
            let x = embeddings.get(t, c) / norm;
            embeddings.set(t, c, x);
        }
    }

    let sample_sentence = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let len = rng.gen_range(cfg.sentence_len_min..=cfg.sentence_len_max);
        let mut out = Vec::with_capacity(len);
        let mut prev = v; // sentence-start row
        for _ in 0..len {
            let x: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = v - 1;
            for w in 0..v {
                acc += bigram.get(prev, w);
                if x < acc {
                    pick = w;
                    break;
                }
            }
            out.push(pick);
            prev = pick;
        }
        out
    };

    let make_split = |rng: &mut ChaCha8Rng, name: &str, count: usize| -> Result<Vec<Utterance>> {
        let mut utts = Vec::with_capacity(count);
        for i in 0..count {
            let sentence = sample_sentence(rng);
            let word_strs: Vec<&str> = sentence.iter().map(|&w| lexicon.word(w)).collect();
            let token_string = lexicon.target_tokens(&word_strs, &tokens)?;
            let mut rows: Vec<Vec<f64>> = Vec::new();
            for &tok in &token_string {
                let dur = rng.gen_range(cfg.duration_min..=cfg.duration_max);
                for _ in 0..dur {
                    let row: Vec<f64> = (0..cfg.feature_dim)
                        .map(|c| {
                            embeddings.get(tok, c)
                                + if cfg.noise_sigma > 0.0 {
                                    cfg.noise_sigma * normal.sample(rng)
                                } else {
                                    0.0
                                }
                        })
                        .collect();
                    rows.push(row);
                }
            }
            utts.push(Utterance {
                id: format!("{name}-{i:05}"),
                features: Mat::from_rows(&rows)?,
                words: word_strs.iter().map(|s| s.to_string()).collect(),
            });
        }
        Ok(utts)
    };

    let train = make_split(&mut rng, "train", cfg.n_train)?;
    let valid = make_split(&mut rng, "valid", cfg.n_valid)?;
    let test = make_split(&mut rng, "test", cfg.n_test)?;

    let mut lm_sentences = Vec::with_capacity(cfg.n_lm_sentences);
    for _ in 0..cfg.n_lm_sentences {
        let s = sample_sentence(&mut rng);
        lm_sentences.push(s.into_iter().map(|w| lexicon.word(w).to_string()).collect());
    }

    Ok(SynthOutput {
        tokens,
        lexicon,
        train,
        valid,
        test,
        lm_sentences,
        bigram,
    })
}

pub fn write_features(path: &Path, features: &Mat) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + features.data().len() * 8);
    buf.extend_from_slice(&(features.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(features.cols() as u64).to_le_bytes());
    for v in features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Mat> {
    let mut file = std::fs::File::open(path)?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header)?;
    let rows = u64::from_le_bytes(header[0..8].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() != rows * cols * 8 {
        return Err(CoreError::data(format!(
            "{}: expected {} payload bytes, found {}",
            path.display(),
            rows * cols * 8,
            payload.len()
        )));
    }
    let mut m = Mat::zeros(rows, cols);
    for (i, chunk) in payload.chunks_exact(8).enumerate() {
        m.data_mut()[i] = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    if !m.all_finite() {
        return Err(CoreError::data(format!(
            "{}: non-finite feature values",
            path.display()
        )));
    }
    Ok(m)
}

/// Writes the full dataset directory produced by [`synth_generate`].
pub fn write_dataset(dir: &Path, out: &SynthOutput) -> Result<()> {
    std::fs::create_dir_all(dir.join("features"))?;
    let mut token_lines = String::new();
    for s in out.tokens.symbols() {
        token_lines.push_str(s);
        token_lines.push('\n');
    }
    std::fs::write(dir.join("tokens.txt"), token_lines)?;
    out.lexicon.save(&dir.join("lexicon.txt"), &out.tokens)?;
    for (name, utts) in [
        ("train", &out.train),
        ("valid", &out.valid),
        ("test", &out.test),
    ] {
        let mut tsv = String::new();
        for u in utts.iter() {
            writeln!(tsv, "{}\t{}", u.id, u.words.join(" ")).expect("string write");
            write_features(
                &dir.join("features").join(format!("{}.bin", u.id)),
                &u.features,
            )?;
        }
        std::fs::write(dir.join(format!("{name}.tsv")), tsv)?;
    }
    let mut corpus = String::new();
    for s in &out.lm_sentences {
        writeln!(corpus, "{}", s.join(" ")).expect("string write");
    }
    let mut f = std::fs::File::create(dir.join("lm_corpus.txt"))?;
    f.write_all(corpus.as_bytes())?;
    Ok(())
}

pub fn load_tokens(dir: &Path) -> Result<TokenSet> {
    let text = std::fs::read_to_string(dir.join("tokens.txt"))?;
    TokenSet::from_symbols(text.lines().map(str::to_string).collect())
}

pub fn load_lexicon(dir: &Path, tokens: &TokenSet) -> Result<Lexicon> {
    Lexicon::load(&dir.join("lexicon.txt"), tokens)
}

pub fn load_split(dir: &Path, split: &str) -> Result<Vec<Utterance>> {
    let tsv_path = dir.join(format!("{split}.tsv"));
    let text = std::fs::read_to_string(&tsv_path)?;
    let mut utts = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, transcript) = line.split_once('\t').ok_or_else(|| {
            CoreError::data(format!(
                "{}:{}: expected id<TAB>transcript",
                tsv_path.display(),
                lineno + 1
            ))
        })?;
        let features = read_features(&dir.join("features").join(format!("{id}.bin")))?;
        utts.push(Utterance {
            id: id.to_string(),
            features,
            words: transcript.split_whitespace().map(str::to_string).collect(),
        });
    }
    Ok(utts)
}

pub fn load_lm_corpus(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

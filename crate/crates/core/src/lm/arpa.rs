//! ARPA text format for backoff n-gram models.
//!
//! `\data\` header with per-order counts, one `\m-grams:` section per
//! order (`log10prob<TAB>w1 .. wm[<TAB>log10backoff]`), closed by `\end\`.
//! Probabilities are log10 on disk and natural log in memory.

use super::ngram::{NGramEntry, NGramLm};
use crate::error::{CoreError, Result};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

const LN10: f64 = std::f64::consts::LN_10;
/// ARPA's conventional stand-in for log(0).
const LOG10_FLOOR: f64 = -99.0;

pub fn arpa_save(lm: &NGramLm, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("\\data\\\n");
    for m in 1..=lm.order() {
        writeln!(out, "ngram {}={}", m, lm.n_entries(m)).expect("string write");
    }
    for m in 1..=lm.order() {
        writeln!(out, "\n\\{m}-grams:").expect("string write");
        let mut entries: Vec<(&Vec<u32>, &NGramEntry)> = lm.tables()[m - 1].iter().collect();
        entries.sort_by(|a, b| a.0.cmp(b.0));
        for (ngram, e) in entries {
            let words: Vec<&str> = ngram
                .iter()
                .map(|&id| lm.vocab()[id as usize].as_str())
                .collect();
            let logp = (e.log_prob / LN10).max(LOG10_FLOOR);
            if m < lm.order() {
                writeln!(
                    out,
                    "{:.7}\t{}\t{:.7}",
                    logp,
                    words.join(" "),
                    e.backoff / LN10
                )
                .expect("string write");
            } else {
                writeln!(out, "{:.7}\t{}", logp, words.join(" ")).expect("string write");
            }
        }
    }
    out.push_str("\n\\end\\\n");
    std::fs::write(path, out)?;
    Ok(())
}

pub fn arpa_load(path: &Path) -> Result<NGramLm> {
    let text = std::fs::read_to_string(path)?;
    let err = |lineno: usize, msg: String| {
        CoreError::data(format!("{}:{}: {msg}", path.display(), lineno + 1))
    };

    let mut lines = text.lines().enumerate();

    // anything before \data\ is a free-form preamble
    let mut found_data = false;
    for (_, line) in lines.by_ref() {
        if line.trim() == "\\data\\" {
            found_data = true;
            break;
        }
    }
    if !found_data {
        return Err(CoreError::data(format!(
            "{}: missing \\data\\ header",
            path.display()
        )));
    }

    // declared counts
    let mut declared: Vec<usize> = Vec::new();
    let mut pending: Option<(usize, String)> = None;
    for (no, line) in lines.by_ref() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("ngram ") {
            let (m, count) = rest
                .split_once('=')
                .ok_or_else(|| err(no, format!("malformed count line {line:?}")))?;
            let m: usize = m
                .trim()
                .parse()
                .map_err(|_| err(no, format!("bad order in {line:?}")))?;
            let count: usize = count
                .trim()
                .parse()
                .map_err(|_| err(no, format!("bad count in {line:?}")))?;
            if m != declared.len() + 1 {
                return Err(err(no, format!("orders must be contiguous, got {m}")));
            }
            declared.push(count);
        } else {
            pending = Some((no, line.to_string()));
            break;
        }
    }
    if declared.is_empty() {
        return Err(CoreError::data(format!(
            "{}: \\data\\ section declares no orders",
            path.display()
        )));
    }
    let order = declared.len();

    let mut vocab: Vec<String> = Vec::new();
    let mut index: HashMap<String, u32> = HashMap::new();
    let intern = |w: &str, vocab: &mut Vec<String>, index: &mut HashMap<String, u32>| -> u32 {
        if let Some(&id) = index.get(w) {
            return id;
        }
        let id = vocab.len() as u32;
        vocab.push(w.to_string());
        index.insert(w.to_string(), id);
        id
    };
    // <s> and </s> must exist even if the file never mentions them
    intern(super::ngram::BOS, &mut vocab, &mut index);
    intern(super::ngram::EOS, &mut vocab, &mut index);

    let mut tables: Vec<HashMap<Vec<u32>, NGramEntry>> = vec![HashMap::new(); order];
    let mut current: Option<usize> = None;
    let mut seen_end = false;

    let handle = |no: usize,
                  line: &str,
                  current: &mut Option<usize>,
                  tables: &mut Vec<HashMap<Vec<u32>, NGramEntry>>,
                  vocab: &mut Vec<String>,
                  index: &mut HashMap<String, u32>|
     -> Result<bool> {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            return Ok(false);
        }
        if trimmed == "\\end\\" {
            return Ok(true);
        }
        if let Some(rest) = trimmed.strip_prefix('\\') {
            let m: usize = rest
                .strip_suffix("-grams:")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err(no, format!("unrecognized section header {trimmed:?}")))?;
            if m < 1 || m > order {
                return Err(err(
                    no,
                    format!("section order {m} not declared in \\data\\"),
                ));
            }
            *current = Some(m);
            return Ok(false);
        }
        let m = current.ok_or_else(|| err(no, "n-gram line outside any section".to_string()))?;
        let mut fields = trimmed.split_whitespace();
        let logp: f64 = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(no, "missing probability".to_string()))?;
        let mut ngram = Vec::with_capacity(m);
        let mut rest: Vec<&str> = fields.collect();
        if rest.len() == m + 1 {
            // trailing backoff weight
            let bow: f64 = rest
                .pop()
                .unwrap()
                .parse()
                .map_err(|_| err(no, "malformed backoff weight".to_string()))?;
            for w in &rest {
                ngram.push(intern(w, vocab, index));
            }
            tables[m - 1].insert(
                ngram,
                NGramEntry {
                    log_prob: logp * LN10,
                    backoff: bow * LN10,
                },
            );
        } else if rest.len() == m {
            for w in &rest {
                ngram.push(intern(w, vocab, index));
            }
            tables[m - 1].insert(
                ngram,
                NGramEntry {
                    log_prob: logp * LN10,
                    backoff: 0.0,
                },
            );
        } else {
            return Err(err(
                no,
                format!(
                    "expected {m} words (plus optional backoff), got {}",
                    rest.len()
                ),
            ));
        }
        Ok(false)
    };

    if let Some((no, line)) = pending {
        if handle(no, &line, &mut current, &mut tables, &mut vocab, &mut index)? {
            seen_end = true;
        }
    }
    for (no, line) in lines {
        if seen_end {
            break;
        }
        if handle(no, line, &mut current, &mut tables, &mut vocab, &mut index)? {
            seen_end = true;
        }
    }
    if !seen_end {
        return Err(CoreError::data(format!(
            "{}: missing \\end\\ marker",
            path.display()
        )));
    }
    for (m, &want) in declared.iter().enumerate() {
        let got = tables[m].len();
        if got != want {
            return Err(CoreError::data(format!(
                "{}: \\data\\ declares {want} {}-grams but section has {got}",
                path.display(),
                m + 1
            )));
        }
    }
    NGramLm::from_parts(order, vocab, tables)
}

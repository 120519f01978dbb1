use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassifiedExample, Tier, Vocabulary};
use crate::error::{Error, Result};

/// Fraction of malformed lines above which loading fails.
const MAX_MALFORMED: f64 = 0.10;

#[derive(Deserialize)]
struct Line {
    text: String,
    label: usize,
    #[serde(default)]
    tier: Option<Tier>,
}

#[derive(Serialize)]
struct LineOut<'a> {
    text: &'a str,
    label: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    tier: Option<Tier>,
}

#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub examples: Vec<ClassifiedExample>,
    pub malformed: usize,
    pub truncated: usize,
    pub lines: usize,
}

/// Parses one `{"text": .., "label": .., "tier"?: ..}` line.
pub fn parse_jsonl_line(line: &str, vocab: &Vocabulary) -> Result<ClassifiedExample> {
    let parsed: Line = serde_json::from_str(line)?;
    Ok(ClassifiedExample::new(
        vocab.encode(&parsed.text),
        parsed.label,
        parsed.tier,
    ))
}

/// Loads a JSONL file, skipping and counting malformed lines. Blank lines
/// are ignored.
pub fn load_jsonl(path: &Path, vocab: &Vocabulary, max_len: usize) -> Result<LoadReport> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut report = LoadReport::default();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        match parse_jsonl_line(&line, vocab) {
            Ok(mut ex) => {
                if ex.truncate(max_len) {
                    report.truncated += 1;
                }
                report.examples.push(ex);
            }
            Err(e) => {
                log::warn!("{}:{}: skipping malformed line: {e}", path.display(), lineno + 1);
                report.malformed += 1;
            }
        }
    }
    if report.malformed as f64 > MAX_MALFORMED * report.lines as f64 {
        return Err(Error::Data(format!(
            "{}: {} of {} lines are malformed",
            path.display(),
            report.malformed,
            report.lines
        )));
    }
    if report.truncated > 0 {
        log::info!("{}: truncated {} examples to {max_len} tokens", path.display(), report.truncated);
    }
    Ok(report)
}

pub fn write_jsonl(path: &Path, examples: &[ClassifiedExample], vocab: &Vocabulary) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for ex in examples {
        let text = vocab.decode(&ex.token_ids);
        let line = serde_json::to_string(&LineOut {
            text: &text,
            label: ex.label,
            tier: ex.tier,
        })?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

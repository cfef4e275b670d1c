//! Whitespace-separated column files: one token per line, label in the last
//! column (or a configured one), blank lines between sentences.

use std::fs;
use std::path::Path;

use super::labels::is_valid_label;
use super::RawSentence;
use crate::error::{Error, Result};

/// Document separators emitted by some CoNLL exports.
const DOCSTART: &str = "-DOCSTART-";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConllColumns {
    pub token: usize,
    /// `None` means the last column.
    pub label: Option<usize>,
}

pub fn read_conll(path: &Path, columns: ConllColumns) -> Result<Vec<RawSentence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_conll(&text, columns)
}

pub fn parse_conll(text: &str, columns: ConllColumns) -> Result<Vec<RawSentence>> {
    let mut sentences = Vec::new();
    let mut words = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;

    let mut flush = |words: &mut Vec<String>, labels: &mut Vec<String>| {
        if !words.is_empty() {
            sentences.push(RawSentence {
                words: std::mem::take(words),
                labels: std::mem::take(labels),
            });
        }
    };

    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            flush(&mut words, &mut labels);
            continue;
        }
        if fields[0] == DOCSTART {
            flush(&mut words, &mut labels);
            continue;
        }
        if fields.len() < 2 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected at least 2 columns, found {}", fields.len()),
            });
        }
        match width {
            Some(w) if w != fields.len() => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("ragged line: expected {w} columns, found {}", fields.len()),
                })
            }
            None => width = Some(fields.len()),
            _ => {}
        }
        let label_col = columns.label.unwrap_or(fields.len() - 1);
        let (Some(token), Some(label)) = (fields.get(columns.token), fields.get(label_col)) else {
            return Err(Error::Parse {
                line: line_no,
                message: format!("column out of range for a {}-column line", fields.len()),
            });
        };
        if !is_valid_label(label) {
            return Err(Error::InvalidLabel {
                line: Some(line_no),
                label: label.to_string(),
            });
        }
        words.push(token.to_string());
        labels.push(label.to_string());
    }
    flush(&mut words, &mut labels);
    Ok(sentences)
}

/// Two tab-separated columns per token, a blank line after each sentence.
pub fn write_conll(sentences: &[RawSentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        for (w, l) in s.words.iter().zip(&s.labels) {
            out.push_str(w);
            out.push('\t');
            out.push_str(l);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

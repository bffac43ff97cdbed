use std::path::Path;

use serde::Deserialize;

use crate::{tokenizer, BenchError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub text: String,
    pub tokens: Vec<u32>,
}

#[derive(Deserialize)]
struct JsonlPrompt {
    prompt: String,
}

/// Loads prompts from plain text (one per line) or JSONL with a `"prompt"`
/// field. Files ending in `.jsonl` are parsed as JSONL; empty lines are
/// skipped in both formats.
pub fn ingest_corpus(path: &Path) -> Result<Vec<Prompt>> {
    let raw = std::fs::read_to_string(path).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let jsonl = path.extension().is_some_and(|e| e == "jsonl");
    let mut prompts = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let text = if jsonl {
            serde_json::from_str::<JsonlPrompt>(line)
                .map_err(|e| BenchError::Corpus {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })?
                .prompt
        } else {
            line.to_string()
        };
        prompts.push(Prompt {
            tokens: tokenizer::encode(&text),
            text,
        });
    }
    Ok(prompts)
}

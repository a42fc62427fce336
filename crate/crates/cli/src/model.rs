//! Run directories opened for inference.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use moodgen_core::corpus::SentimentLabel;
use moodgen_core::generator::DecodeMode;
use moodgen_core::model::ModelFamily;
use moodgen_core::trainer::{RunBundle, CONFIG_FILE};
use serde::Serialize;

/// A trained run, immutable after load.
pub struct LoadedModel {
    pub id: String,
    pub bundle: RunBundle,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub label: SentimentLabel,
    /// Classifier probability of `label`.
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub response: String,
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub verdict: Option<Verdict>,
}

impl LoadedModel {
    pub fn load(id: impl Into<String>, dir: &Path) -> Result<Self> {
        let bundle = RunBundle::load(dir).with_context(|| format!("loading run directory {}", dir.display()))?;
        Ok(Self { id: id.into(), bundle })
    }

    pub fn family(&self) -> ModelFamily {
        self.bundle.family
    }

    /// Token ids of `text`, keeping the most recent `max_len` tokens so a
    /// long client-held transcript still fits the encoder. `None` when
    /// nothing survives tokenization.
    pub fn encode_history(&self, text: &str) -> Option<Vec<usize>> {
        let ids = self.bundle.vocab.encode(text);
        if ids.is_empty() {
            return None;
        }
        let keep = self.bundle.config.max_len.max(1);
        Some(ids[ids.len().saturating_sub(keep)..].to_vec())
    }

    pub fn verdict(&self, tokens: &[usize]) -> Result<Option<Verdict>> {
        let Some(clf) = &self.bundle.classifier else {
            return Ok(None);
        };
        let p = clf.prob_positive(tokens)?;
        Ok(Some(if p > 0.5 {
            Verdict {
                label: SentimentLabel::Positive,
                probability: p,
            }
        } else {
            Verdict {
                label: SentimentLabel::Negative,
                probability: 1.0 - p,
            }
        }))
    }

    pub fn reply(&self, history: &[usize], y: SentimentLabel, mode: DecodeMode, seed: u64) -> Result<Reply> {
        let g = &self.bundle.generator;
        let tokens = g.respond(history, y, self.bundle.config.sample_max_len, mode, seed)?;
        let log_prob = g.response_log_prob(history, y, &tokens)?;
        Ok(Reply {
            response: self.bundle.vocab.decode(&tokens),
            verdict: self.verdict(&tokens)?,
            tokens,
            log_prob,
        })
    }
}

fn is_run_dir(dir: &Path) -> bool {
    dir.join(CONFIG_FILE).is_file()
}

fn dir_name(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

/// `dir` itself when it is a run directory, otherwise every run directory
/// directly inside it, in name order. Model ids are directory names.
pub fn discover(dir: &Path) -> Result<Vec<LoadedModel>> {
    if is_run_dir(dir) {
        let canonical = dir.canonicalize().unwrap_or_else(|_| dir.to_path_buf());
        return Ok(vec![LoadedModel::load(dir_name(&canonical), dir)?]);
    }
    let mut dirs: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_run_dir(p))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no run directories (containing {CONFIG_FILE}) under {}", dir.display());
    }
    dirs.iter().map(|d| LoadedModel::load(dir_name(d), d)).collect()
}

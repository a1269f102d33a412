//! The report written by every command. The report is the certificate: it
//! carries every intermediate needed to recheck the verdict by hand.

use std::io::Write;

use overwhelm_core::bounds::Verdict;
use overwhelm_core::convergence::FreeSlots;
use overwhelm_core::model::{Dtype, ModelWeights};
use overwhelm_core::{Method, TokenId};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::args::ReportFormat;
use crate::error::Result;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct ModelInfo {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
    pub d_vocab: usize,
    pub d_emb: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub n_ctx_max: usize,
    pub dtype: Dtype,
    pub ln_eps: f64,
    pub rope_enabled: bool,
    pub rope_base: f64,
    pub rope_dim: usize,
}

impl ModelInfo {
    pub fn new(path: String, file: &[u8], w: &ModelWeights) -> Self {
        Self {
            path,
            sha256: format!("{:x}", Sha256::digest(file)),
            bytes: file.len() as u64,
            d_vocab: w.d_vocab,
            d_emb: w.d_emb,
            n_heads: w.n_heads,
            d_head: w.d_head(),
            d_mlp: w.d_mlp,
            n_ctx_max: w.n_ctx_max,
            dtype: w.dtype,
            ln_eps: w.ln.eps,
            rope_enabled: w.rope.enabled,
            rope_base: w.rope.base,
            rope_dim: w.rope.dim,
        }
    }
}

/// The resolved command-line configuration. Thread count is left out since
/// it cannot change any result.
#[derive(Debug, Serialize)]
pub struct ConfigEcho {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed: Option<Vec<TokenId>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_free: Option<usize>,
    pub query: TokenId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perm: Option<Vec<TokenId>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fill: Option<Vec<TokenId>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<u128>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub free_slots: Option<FreeSlots>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<usize>>,
    pub slack: f64,
}

impl ConfigEcho {
    pub fn new(query: TokenId) -> Self {
        Self {
            vocab: None,
            fixed: None,
            n_free: None,
            query,
            perm: None,
            method: None,
            fill: None,
            limit: None,
            free_slots: None,
            schedule: None,
            slack: 0.0,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Outcome {
    pub verdict: Verdict,
    pub exit_code: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub greedy_token: Option<TokenId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub greedy_text: Option<String>,
}

impl Outcome {
    pub fn new(verdict: Verdict) -> Self {
        Self {
            verdict,
            exit_code: exit_code(verdict),
            greedy_token: None,
            greedy_text: None,
        }
    }
}

pub fn exit_code(verdict: Verdict) -> u8 {
    match verdict {
        Verdict::Overwhelmed => 0,
        Verdict::Inconclusive => 1,
    }
}

#[derive(Debug, Serialize)]
pub struct Report<T: Serialize> {
    pub report_version: u32,
    pub command: &'static str,
    pub config: ConfigEcho,
    pub model: ModelInfo,
    pub result: T,
    pub outcome: Outcome,
    pub wall_time_seconds: f64,
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    let key = |k: &str| if prefix.is_empty() { k.to_owned() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(map) => map.iter().for_each(|(k, v)| flatten(&key(k), v, out)),
        Value::Array(items) => items
            .iter()
            .enumerate()
            .for_each(|(i, v)| flatten(&key(&i.to_string()), v, out)),
        Value::String(s) => out.push((prefix.to_owned(), s.clone())),
        Value::Null => out.push((prefix.to_owned(), String::new())),
        other => out.push((prefix.to_owned(), other.to_string())),
    }
}

/// JSON keeps field order; CSV is one `field,value` row per leaf with
/// dotted paths, sorted by path.
pub fn write<T: Serialize, W: Write>(report: &Report<T>, format: ReportFormat, mut sink: W) -> Result<()> {
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut sink, report)?;
            sink.write_all(b"\n").map_err(serde_json::Error::io)?;
        }
        ReportFormat::Csv => {
            let mut rows = Vec::new();
            flatten("", &serde_json::to_value(report)?, &mut rows);
            let mut w = csv::Writer::from_writer(sink);
            w.write_record(["field", "value"])?;
            for (k, v) in rows {
                w.write_record([k, v])?;
            }
            w.flush().map_err(csv::Error::from)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flatten_uses_dotted_paths() {
        let mut rows = Vec::new();
        flatten("", &json!({"a": {"b": [1.5, null]}, "c": "x"}), &mut rows);
        assert_eq!(
            rows,
            vec![
                ("a.b.0".to_owned(), "1.5".to_owned()),
                ("a.b.1".to_owned(), String::new()),
                ("c".to_owned(), "x".to_owned()),
            ]
        );
    }
}

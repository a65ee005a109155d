//! Plain-text model spec documents.
//!
//! One `key = value` per line; `#` starts a comment. A single block is
//! described with top-level keys:
//!
//! ```text
//! variant = ccp
//! d = 2
//! order = 3
//! k = 3
//! o = 1
//! ```
//!
//! A chain lists blocks in order, each as space-separated `key=value`
//! fields. Top-level `k`, `omega`, `norm` and `eps` act as defaults:
//!
//! ```text
//! d = 2
//! k = 2
//! block.0 = variant=ncp order=2 o=3
//! block.1 = variant=ccp order=3 o=1 norm=tanh
//! ```
//!
//! Other top-level keys: `seed` (default 0) and `inner_bias` (default
//! false). `N` is accepted for `order`, `w` for `omega`.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::polynet::{BlockSpec, ModelSpec, NormMode, NormalizationSpec, PolyError, Variant, DEFAULT_NORM_EPS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("spec line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("spec: {0}")]
    Missing(String),
    #[error(transparent)]
    Invalid(#[from] PolyError),
}

pub type Result<T> = std::result::Result<T, SpecError>;

const TOP_KEYS: &[&str] = &["d", "seed", "inner_bias", "variant", "order", "k", "omega", "o", "norm", "eps"];
const BLOCK_KEYS: &[&str] = &["variant", "order", "k", "omega", "o", "norm", "eps"];

fn canonical_key(k: &str) -> &str {
    match k {
        "N" => "order",
        "w" | "ω" => "omega",
        other => other,
    }
}

struct Entry {
    value: String,
    line: usize,
}

fn parse_num<T: std::str::FromStr>(e: &Entry, key: &str) -> Result<T> {
    e.value.parse::<T>().map_err(|_| SpecError::Syntax {
        line: e.line,
        msg: format!("'{}' is not a valid value for {key}", e.value),
    })
}

fn block_from(fields: &BTreeMap<String, Entry>, defaults: &BTreeMap<String, Entry>, what: &str) -> Result<BlockSpec> {
    let get = |k: &str| fields.get(k).or_else(|| defaults.get(k));
    let need = |k: &str| get(k).ok_or_else(|| SpecError::Missing(format!("{what}: missing '{k}'")));
    let v = need("variant")?;
    let variant: Variant = v.value.parse().map_err(|e: PolyError| SpecError::Syntax {
        line: v.line,
        msg: e.to_string(),
    })?;
    let order = parse_num(need("order")?, "order")?;
    let output_dim = parse_num(need("o")?, "o")?;
    let rank = match get("k") {
        Some(e) => parse_num(e, "k")?,
        None if variant == Variant::Simple => 0,
        None => return Err(SpecError::Missing(format!("{what}: missing 'k'"))),
    };
    let aux_dim = get("omega").map(|e| parse_num(e, "omega")).transpose()?;
    let norm = match get("norm") {
        None => None,
        Some(e) => {
            let mode: NormMode = e.value.parse().map_err(|err: PolyError| SpecError::Syntax {
                line: e.line,
                msg: err.to_string(),
            })?;
            let epsilon = get("eps").map(|e| parse_num(e, "eps")).transpose()?.unwrap_or(DEFAULT_NORM_EPS);
            Some(NormalizationSpec { mode, epsilon })
        }
    };
    Ok(BlockSpec {
        variant,
        order,
        rank,
        aux_dim,
        output_dim,
        norm,
    })
}

/// Parses and validates a spec document.
pub fn parse_spec(text: &str) -> Result<ModelSpec> {
    let mut top: BTreeMap<String, Entry> = BTreeMap::new();
    let mut blocks: BTreeMap<usize, (usize, BTreeMap<String, Entry>)> = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = no + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let syntax = |msg: String| SpecError::Syntax { line, msg };
        let (key, value) = body.split_once('=').ok_or_else(|| syntax(format!("expected 'key = value', got '{body}'")))?;
        let (key, value) = (canonical_key(key.trim()), value.trim());
        if let Some(idx) = key.strip_prefix("block.") {
            let idx: usize = idx.parse().map_err(|_| syntax(format!("bad block index in '{key}'")))?;
            let mut fields = BTreeMap::new();
            for field in value.split_whitespace() {
                let (k, v) = field.split_once('=').ok_or_else(|| syntax(format!("expected 'key=value', got '{field}'")))?;
                let k = canonical_key(k.trim());
                if !BLOCK_KEYS.contains(&k) {
                    return Err(syntax(format!("unknown block key '{k}'")));
                }
                let prev = fields.insert(
                    k.to_string(),
                    Entry {
                        value: v.trim().to_string(),
                        line,
                    },
                );
                if prev.is_some() {
                    return Err(syntax(format!("duplicate block key '{k}'")));
                }
            }
            if blocks.insert(idx, (line, fields)).is_some() {
                return Err(syntax(format!("duplicate block.{idx}")));
            }
            continue;
        }
        if !TOP_KEYS.contains(&key) {
            return Err(syntax(format!("unknown key '{key}'")));
        }
        if top.insert(key.to_string(), Entry { value: value.to_string(), line }).is_some() {
            return Err(syntax(format!("duplicate key '{key}'")));
        }
    }

    let d_entry = top.get("d").ok_or_else(|| SpecError::Missing("missing 'd'".into()))?;
    let input_dim = parse_num(d_entry, "d")?;
    let seed = top.get("seed").map(|e| parse_num(e, "seed")).transpose()?.unwrap_or(0);
    let inner_bias = top.get("inner_bias").map(|e| parse_num(e, "inner_bias")).transpose()?.unwrap_or(false);

    let blocks = if blocks.is_empty() {
        vec![block_from(&top, &BTreeMap::new(), "model")?]
    } else {
        for k in ["variant", "order", "o"] {
            if let Some(e) = top.get(k) {
                return Err(SpecError::Syntax {
                    line: e.line,
                    msg: format!("'{k}' belongs on block lines when blocks are listed"),
                });
            }
        }
        let mut out = Vec::with_capacity(blocks.len());
        for (expect, (idx, (line, fields))) in blocks.iter().enumerate() {
            if *idx != expect {
                return Err(SpecError::Syntax {
                    line: *line,
                    msg: format!("block indices must run 0, 1, 2, ...; found block.{idx} in position {expect}"),
                });
            }
            out.push(block_from(fields, &top, &format!("block.{idx}"))?);
        }
        out
    };
    let spec = ModelSpec {
        input_dim,
        blocks,
        inner_bias,
        seed,
    };
    spec.validate()?;
    Ok(spec)
}

/// Canonical text for `spec`; [`parse_spec`] reads it back unchanged.
pub fn format_spec(spec: &ModelSpec) -> String {
    let mut s = format!("d = {}\nseed = {}\ninner_bias = {}\n", spec.input_dim, spec.seed, spec.inner_bias);
    for (i, b) in spec.blocks.iter().enumerate() {
        s.push_str(&format!("block.{i} = variant={} order={}", b.variant, b.order));
        if b.variant != Variant::Simple || b.rank != 0 {
            s.push_str(&format!(" k={}", b.rank));
        }
        if let Some(w) = b.aux_dim {
            s.push_str(&format!(" omega={w}"));
        }
        s.push_str(&format!(" o={}", b.output_dim));
        if let Some(n) = &b.norm {
            s.push_str(&format!(" norm={} eps={}", n.mode, n.epsilon));
        }
        s.push('\n');
    }
    s
}

//! Expert-load traces: synthetic generation and JSON Lines storage.
//!
//! File layout: the first line is the meta object, every following line is
//! `{"iter": i, "layer": l, "counts": [[...], ...]}` with one row per device
//! and one column per expert.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::load::TokenCounts;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },
    #[error("line {line}: {message}")]
    Dimension { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub iterations: usize,
    pub layers: usize,
    pub experts: usize,
    pub devices: usize,
    pub tokens_per_device: u64,
}

/// Gate decisions per iteration and layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub meta: TraceMeta,
    /// `steps[iteration][layer]`.
    pub steps: Vec<Vec<TokenCounts>>,
}

/// Splits `total` into integer parts proportional to `weights`, assigning the
/// leftover units to the largest fractional parts (ties to the lower index).
/// The parts always sum to `total`.
pub fn largest_remainder(weights: &[f64], total: u64) -> Vec<u64> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    let shares: Vec<f64> = if sum > 0.0 {
        weights.iter().map(|w| w / sum * total as f64).collect()
    } else {
        vec![total as f64 / weights.len() as f64; weights.len()]
    };
    let mut parts: Vec<u64> = shares.iter().map(|s| s.floor() as u64).collect();
    let assigned: u64 = parts.iter().sum();
    let mut left = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        parts[i] += 1;
        left -= 1;
    }
    parts
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Default concentration. The typical max/mean expert load it produces is
/// about 5 with 16 experts and about 7.5 with 32; the ratio grows with the
/// expert count.
pub const DEFAULT_SKEW: f64 = 0.7;
/// Default random-walk step of the expert logits per iteration.
pub const DEFAULT_DRIFT: f64 = 0.05;

/// Generates a smoothly drifting, skewed trace.
///
/// Each layer's expert logits start at `N(0, 1) / skew` and take a random
/// walk with step `drift * N(0, 1)`, clamped to `±4 / skew`. Every device
/// splits its tokens over the softmax of the logits by largest remainder.
pub fn gen_synthetic_trace(meta: TraceMeta, skew: f64, drift: f64, seed: u64) -> Trace {
    assert!(skew > 0.0, "skew must be positive");
    assert!(drift >= 0.0, "drift must be non-negative");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 4.0 / skew;
    let mut logits: Vec<Vec<f64>> = (0..meta.layers)
        .map(|_| {
            (0..meta.experts)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z / skew).clamp(-bound, bound)
                })
                .collect()
        })
        .collect();
    let mut steps = Vec::with_capacity(meta.iterations);
    for iter in 0..meta.iterations {
        if iter > 0 {
            for layer in &mut logits {
                for l in layer.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *l = (*l + drift * z).clamp(-bound, bound);
                }
            }
        }
        steps.push(
            logits
                .iter()
                .map(|l| constant_layer(&meta, &softmax(l)))
                .collect(),
        );
    }
    Trace { meta, steps }
}

fn constant_layer(meta: &TraceMeta, probs: &[f64]) -> TokenCounts {
    let row = largest_remainder(probs, meta.tokens_per_device);
    TokenCounts::from_rows(vec![row; meta.devices]).expect("rows have equal length")
}

impl Trace {
    /// Every iteration and layer uses the same expert distribution `probs`.
    pub fn constant(meta: TraceMeta, probs: &[f64]) -> Self {
        assert_eq!(probs.len(), meta.experts, "one weight per expert");
        let layer = constant_layer(&meta, probs);
        Self {
            meta,
            steps: vec![vec![layer; meta.layers]; meta.iterations],
        }
    }

    pub fn uniform(meta: TraceMeta) -> Self {
        Self::constant(meta, &vec![1.0; meta.experts])
    }

    /// Largest per-expert load over the mean, maximized over steps and layers.
    pub fn max_over_mean(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for step in &self.steps {
            for layer in step {
                let totals = layer.expert_totals();
                let mean = totals.iter().sum::<u64>() as f64 / totals.len() as f64;
                if mean > 0.0 {
                    let max = totals.iter().copied().max().unwrap_or(0) as f64;
                    worst = worst.max(max / mean);
                }
            }
        }
        worst
    }

    /// Checks dimensions and per-device token conservation.
    pub fn validate(&self) -> Result<(), TraceError> {
        let m = &self.meta;
        if self.steps.len() != m.iterations {
            return Err(TraceError::Dimension {
                line: 0,
                message: format!("meta says {} iterations, trace has {}", m.iterations, self.steps.len()),
            });
        }
        for (iter, step) in self.steps.iter().enumerate() {
            if step.len() != m.layers {
                return Err(TraceError::Dimension {
                    line: 0,
                    message: format!("iteration {iter} has {} layers, expected {}", step.len(), m.layers),
                });
            }
            for (layer, counts) in step.iter().enumerate() {
                let line = 2 + iter * m.layers + layer;
                check_counts(counts, m, line)?;
            }
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        serde_json::to_writer(&mut out, &self.meta)?;
        out.write_all(b"\n")?;
        for (iter, step) in self.steps.iter().enumerate() {
            for (layer, counts) in step.iter().enumerate() {
                let rows: Vec<&[u64]> = counts.rows().collect();
                let line = serde_json::json!({ "iter": iter, "layer": layer, "counts": rows });
                serde_json::to_writer(&mut out, &line)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, TraceError> {
        let mut lines = input.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| TraceError::Parse {
            line: 1,
            field: "meta".into(),
            message: "empty trace".into(),
        })?;
        let first = first.map_err(|e| parse_err(1, "meta", e))?;
        let meta: TraceMeta = serde_json::from_str(&first).map_err(|e| parse_err(1, "meta", e))?;
        let mut slots: Vec<Vec<Option<TokenCounts>>> = vec![vec![None; meta.layers]; meta.iterations];

        for (idx, text) in lines {
            let line = idx + 1;
            let text = text.map_err(|e| parse_err(line, "line", e))?;
            if text.trim().is_empty() {
                continue;
            }
            let value: Value = serde_json::from_str(&text).map_err(|e| parse_err(line, "line", e))?;
            let iter = index_field(&value, "iter", line)?;
            let layer = index_field(&value, "layer", line)?;
            if iter >= meta.iterations || layer >= meta.layers {
                return Err(TraceError::Dimension {
                    line,
                    message: format!("step (iter {iter}, layer {layer}) outside meta bounds"),
                });
            }
            let counts = parse_counts(&value, line)?;
            check_counts(&counts, &meta, line)?;
            let slot = &mut slots[iter][layer];
            if slot.is_some() {
                return Err(TraceError::Dimension {
                    line,
                    message: format!("duplicate step (iter {iter}, layer {layer})"),
                });
            }
            *slot = Some(counts);
        }

        let mut steps = Vec::with_capacity(meta.iterations);
        for (iter, row) in slots.into_iter().enumerate() {
            let mut layers = Vec::with_capacity(meta.layers);
            for (layer, slot) in row.into_iter().enumerate() {
                layers.push(slot.ok_or_else(|| TraceError::Dimension {
                    line: 0,
                    message: format!("missing step (iter {iter}, layer {layer})"),
                })?);
            }
            steps.push(layers);
        }
        Ok(Trace { meta, steps })
    }
}

fn parse_err(line: usize, field: &str, e: impl std::fmt::Display) -> TraceError {
    TraceError::Parse {
        line,
        field: field.to_string(),
        message: e.to_string(),
    }
}

fn index_field(value: &Value, field: &str, line: usize) -> Result<usize, TraceError> {
    value
        .get(field)
        .and_then(Value::as_u64)
        .map(|v| v as usize)
        .ok_or_else(|| parse_err(line, field, "expected a non-negative integer"))
}

fn parse_counts(value: &Value, line: usize) -> Result<TokenCounts, TraceError> {
    let rows = value
        .get("counts")
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err(line, "counts", "expected an array of rows"))?;
    let mut parsed = Vec::with_capacity(rows.len());
    for (d, row) in rows.iter().enumerate() {
        let row = row
            .as_array()
            .ok_or_else(|| parse_err(line, &format!("counts[{d}]"), "expected an array"))?;
        let mut out = Vec::with_capacity(row.len());
        for (e, v) in row.iter().enumerate() {
            let n = v.as_u64().ok_or_else(|| {
                parse_err(
                    line,
                    &format!("counts[{d}][{e}]"),
                    format!("expected a non-negative integer, got {v}"),
                )
            })?;
            out.push(n);
        }
        parsed.push(out);
    }
    TokenCounts::from_rows(parsed).ok_or_else(|| TraceError::Dimension {
        line,
        message: "rows of `counts` differ in length".into(),
    })
}

fn check_counts(counts: &TokenCounts, meta: &TraceMeta, line: usize) -> Result<(), TraceError> {
    if counts.devices() != meta.devices || counts.experts() != meta.experts {
        return Err(TraceError::Dimension {
            line,
            message: format!(
                "counts are {}x{} but meta says {} devices x {} experts",
                counts.devices(),
                counts.experts(),
                meta.devices,
                meta.experts
            ),
        });
    }
    for (d, total) in counts.device_totals().into_iter().enumerate() {
        if total != meta.tokens_per_device {
            return Err(TraceError::Dimension {
                line,
                message: format!(
                    "device {d} routes {total} tokens, meta says {}",
                    meta.tokens_per_device
                ),
            });
        }
    }
    Ok(())
}

pub fn save_trace(trace: &Trace, path: &Path) -> Result<(), TraceError> {
    let io = |source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    trace.write_jsonl(&mut w).map_err(io)?;
    w.flush().map_err(io)
}

pub fn load_trace(path: &Path) -> Result<Trace, TraceError> {
    let file = File::open(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Trace::read_jsonl(BufReader::new(file))
}

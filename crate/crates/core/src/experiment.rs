//! Experiment configuration and policy sweeps.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::overlap_degree;
use crate::load::ExpertLoadMatrix;
use crate::placement::ShardPlan;
use crate::planner::{estimate_loads, heterogeneous_sharding, sparse_materialization, MaterializationPlan, PlanError};
use crate::sim::{derived_capacity, simulate_run, PolicyKind, SimError, REPORT_SCHEMA_VERSION};
use crate::trace::{gen_synthetic_trace, load_trace, Trace, TraceError, TraceMeta, DEFAULT_DRIFT, DEFAULT_SKEW};
use crate::{Model, Report, Topology};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("trace error: {0}")]
    Trace(#[from] TraceError),
    #[error("simulation error: {0}")]
    Sim(#[from] SimError),
}

impl ExperimentError {
    /// Process exit code: 1 config, 2 data, 3 internal invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 1,
            ExperimentError::Data(_) | ExperimentError::Trace(_) => 2,
            ExperimentError::Sim(SimError::Config(_) | SimError::Topology(_)) => 1,
            ExperimentError::Sim(SimError::TraceMismatch(_)) => 2,
            ExperimentError::Sim(_) => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Json,
    Csv,
    #[default]
    Both,
}

impl OutputFormat {
    pub fn json(self) -> bool {
        matches!(self, OutputFormat::Json | OutputFormat::Both)
    }

    pub fn csv(self) -> bool {
        matches!(self, OutputFormat::Csv | OutputFormat::Both)
    }
}

fn default_skew() -> f64 {
    DEFAULT_SKEW
}

fn default_drift() -> f64 {
    DEFAULT_DRIFT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub iterations: usize,
    pub tokens_per_device: u64,
    #[serde(default = "default_skew")]
    pub skew: f64,
    #[serde(default = "default_drift")]
    pub drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSource {
    Path(PathBuf),
    Generate(GeneratorParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub topology: Topology,
    pub model: Model,
    pub policies: Vec<PolicyKind>,
    pub trace: TraceSource,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub format: OutputFormat,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Cross-checks every section before anything runs.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let cfg = |e: SimError| ExperimentError::Config(e.to_string());
        self.topology
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.model.validate().map_err(cfg)?;
        for p in &self.policies {
            p.validate().map_err(cfg)?;
        }
        if self.policies.is_empty() {
            return Err(ExperimentError::Config("at least one policy is required".into()));
        }
        if let TraceSource::Generate(g) = &self.trace {
            if !(g.skew > 0.0) || !(g.drift >= 0.0) {
                return Err(ExperimentError::Config(
                    "generator needs skew > 0 and drift >= 0".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn trace_meta(&self, iterations: usize, tokens_per_device: u64) -> TraceMeta {
        TraceMeta {
            iterations,
            layers: self.model.layers,
            experts: self.model.experts_per_layer,
            devices: self.topology.num_devices(),
            tokens_per_device,
        }
    }

    /// Loads or generates the trace, checking it against the model.
    pub fn resolve_trace(&self) -> Result<Trace, ExperimentError> {
        let trace = match &self.trace {
            TraceSource::Path(p) => load_trace(p)?,
            TraceSource::Generate(g) => gen_synthetic_trace(
                self.trace_meta(g.iterations, g.tokens_per_device),
                g.skew,
                g.drift,
                self.seed,
            ),
        };
        trace.validate()?;
        Ok(trace)
    }

    /// Runs every policy on `trace`, in parallel, keeping config order.
    pub fn run_policies(&self, trace: &Trace) -> Result<Vec<Report>, ExperimentError> {
        let results: Vec<Result<Report, SimError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = self
                .policies
                .iter()
                .map(|p| scope.spawn(move || simulate_run(&self.model, &self.topology, p, trace)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("simulation thread panicked"))
                .collect()
        });
        results.into_iter().map(|r| r.map_err(ExperimentError::from)).collect()
    }
}

/// Shard and materialization plans computed from one set of expert loads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOutput {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub overlap_degree: usize,
    pub memory_capacity: usize,
    /// Global load of every expert, per layer.
    pub loads: Vec<Vec<f64>>,
    pub shards: ShardPlan,
    pub materializations: Vec<MaterializationPlan>,
}

impl ExperimentConfig {
    /// Mean per-layer loads over the first `window` iterations of `trace`.
    pub fn estimated_loads(&self, trace: &Trace, window: usize) -> Result<Vec<Vec<f64>>, ExperimentError> {
        let head = &trace.steps[..window.min(trace.steps.len())];
        (0..trace.meta.layers)
            .map(|l| {
                let history: Vec<_> = head.iter().map(|step| step[l].clone()).collect();
                let est: ExpertLoadMatrix<f64> = estimate_loads(&history, window).map_err(SimError::from)?;
                Ok(est.expert_loads())
            })
            .collect()
    }

    /// Heterogeneous shards for `loads`, then a materialization plan per
    /// layer. `t` defaults to the overlap degree implied by attention time
    /// and `m` to the capacity implied by device memory.
    pub fn plan(&self, loads: Vec<Vec<f64>>, t: Option<usize>, m: Option<usize>) -> Result<PlanOutput, ExperimentError> {
        let model = &self.model;
        if loads.len() != model.layers || loads.iter().any(|l| l.len() != model.experts_per_layer) {
            return Err(ExperimentError::Data(format!(
                "loads must be {} layers x {} experts",
                model.layers, model.experts_per_layer
            )));
        }
        if loads.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(ExperimentError::Data("loads must be finite and non-negative".into()));
        }
        let t = t.unwrap_or_else(|| overlap_degree(model.attn_fwd_time, &self.topology, model.expert_bytes));
        let profile = crate::planner::GlobalLoadProfile::new(loads.clone());
        let shards = heterogeneous_sharding(&profile, t, &self.topology).map_err(SimError::from)?;
        let m = m.unwrap_or_else(|| derived_capacity(model, &shards, true));
        let materializations = shards
            .per_layer
            .iter()
            .zip(&loads)
            .map(|(p, l)| {
                let row = ExpertLoadMatrix::from_rows(vec![l.clone()])
                    .ok_or_else(|| SimError::from(PlanError::EmptyHistory))?;
                Ok(sparse_materialization(p, &row, t, m, &self.topology))
            })
            .collect::<Result<Vec<_>, SimError>>()?;
        Ok(PlanOutput {
            schema_version: REPORT_SCHEMA_VERSION,
            config: self.echo(),
            overlap_degree: t,
            memory_capacity: m,
            loads,
            shards,
            materializations,
        })
    }

    /// The config as recorded in reports; output location is left out so
    /// reports do not depend on where they are written.
    pub fn echo(&self) -> Self {
        Self {
            out: None,
            ..self.clone()
        }
    }
}

/// Full result document: schema version, config echo and every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub reports: Vec<Report>,
}

impl ExperimentOutput {
    pub fn new(config: ExperimentConfig, reports: Vec<Report>) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            config: config.echo(),
            reports,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("output serializes")
    }

    /// Per-iteration, per-layer rows of every report.
    pub fn timeline_csv(&self) -> String {
        let mut out = String::new();
        for (i, r) in self.reports.iter().enumerate() {
            let csv = r.to_csv();
            if i == 0 {
                out.push_str(&csv);
            } else {
                out.extend(csv.lines().skip(1).map(|l| format!("{l}\n")));
            }
        }
        out
    }
}

fn ep_latency(reports: &[Report]) -> Option<f64> {
    reports.iter().find(|r| r.policy == "ep").map(|r| r.total_latency)
}

/// One row per policy: totals, speedup over EP when EP was run, memory and
/// event counts.
pub fn compare_csv(reports: &[Report]) -> String {
    let ep = ep_latency(reports);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "policy",
        "approximation",
        "total_latency",
        "mean_iteration_latency",
        "speedup_vs_ep",
        "exposed_comm",
        "rearrange_time",
        "peak_device_bytes",
        "peak_materialized_bytes",
        "reshards",
        "rearrangements",
        "calibrations_accepted",
    ])
    .expect("in-memory write");
    for r in reports {
        let b = &r.breakdown;
        let exposed = b.exposed_spag + b.exposed_sprs + b.calibration + b.replication + b.sync;
        w.write_record([
            r.policy.clone(),
            r.approximation.to_string(),
            r.total_latency.to_string(),
            r.mean_iteration_latency.to_string(),
            ep.map(|e| (e / r.total_latency).to_string()).unwrap_or_default(),
            exposed.to_string(),
            b.rearrange.to_string(),
            r.peak_device_bytes.to_string(),
            r.peak_materialized_bytes.to_string(),
            r.counters.reshards.to_string(),
            r.counters.rearrangements.to_string(),
            r.counters.calibrations_accepted.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Human-readable summary table.
pub fn summary_table(reports: &[Report]) -> String {
    let ep = ep_latency(reports);
    let mut out = format!(
        "{:<28} {:>14} {:>10} {:>16}\n",
        "policy", "total (s)", "vs ep", "peak mem (MB)"
    );
    for r in reports {
        let speedup = ep.map_or_else(|| "-".to_string(), |e| format!("{:.2}x", e / r.total_latency));
        let label = if r.approximation {
            format!("{} ~", r.policy)
        } else {
            r.policy.clone()
        };
        out.push_str(&format!(
            "{:<28} {:>14.6} {:>10} {:>16.1}\n",
            label,
            r.total_latency,
            speedup,
            r.peak_device_bytes as f64 / 1e6
        ));
    }
    if reports.iter().any(|r| r.approximation) {
        out.push_str("~ simplified model of a rearrangement-based system\n");
    }
    out
}

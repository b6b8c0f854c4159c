//! Config-driven experiments: paired ERM / debiasify runs over several seeds,
//! one-axis sweeps, and the artifacts they leave behind.
//!
//! Layout under the output directory:
//!
//! ```text
//! config.resolved.json
//! summary.csv            mode × median {unbiased, worst-group}
//! runs.csv               one row per (mode, seed)
//! decodability.csv       layer, method, attribute, median accuracy
//! <mode>/seed<s>/metrics.jsonl
//! <mode>/seed<s>/group_metrics.json
//! <mode>/seed<s>/clustering.json
//! <mode>/seed<s>/decodability.csv
//! <mode>/seed<s>/checkpoint.json
//! <mode>/seed<s>/timing.json
//! ```
//!
//! Every file except `timing.json` is a pure function of the config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterModel;
use crate::datagen::{generate, BiasSpec, BiasedDataset, Split, SplitSizes};
use crate::error::{Error, Result};
use crate::eval::{decodability_probe, write_probe_csv, GroupMetrics, LayerProbe, ProbeConfig};
use crate::model::{forward_cached, NUM_BLOCKS};
use crate::numerics::SeededRng;
use crate::trainer::{save_checkpoint, train, Checkpoint, RunRecord, TrainConfig, TrainMode};

/// Environment variable naming the root under which configs without an
/// `output_dir` write their artifacts.
pub const OUTPUT_ROOT_ENV: &str = "D2S_OUTPUT_ROOT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub spec: BiasSpec,
    pub sizes: SplitSizes,
    /// Dataset seed; when absent every run seed generates its own dataset.
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub probe: bool,
    /// Blocks whose outputs are probed for every bias attribute.
    pub layers: Vec<usize>,
    pub probe_config: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe: true,
            layers: (1..=NUM_BLOCKS).collect(),
            probe_config: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output_dir: Option<PathBuf>,
    pub comparisons: Vec<TrainMode>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            output_dir: None,
            comparisons: vec![TrainMode::Erm, TrainMode::Debiasify],
            seeds: vec![0],
        }
    }
}

fn prefixed(prefix: &str, e: Error) -> Error {
    match e {
        Error::Validation { field, message } => Error::Validation {
            field: format!("{prefix}.{field}"),
            message,
        },
        other => other,
    }
}

impl ExperimentConfig {
    /// Parses a JSON config; syntax errors and unknown keys carry line and
    /// column.
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            what: origin.to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.spec.validate().map_err(|e| prefixed("dataset.spec", e))?;
        let groups = self.dataset.spec.num_groups();
        if self.dataset.sizes.total() < 10 * groups {
            return Err(Error::validation(
                "dataset.sizes",
                format!("needs at least {} samples for {groups} groups", 10 * groups),
            ));
        }
        if self.dataset.sizes.val < groups || self.dataset.sizes.test < groups {
            return Err(Error::validation(
                "dataset.sizes",
                format!("val and test need at least one sample per group ({groups})"),
            ));
        }
        self.train.validate().map_err(|e| prefixed("train", e))?;
        if self.eval.probe {
            if let Some(&l) = self.eval.layers.iter().find(|&&l| !(1..=NUM_BLOCKS).contains(&l)) {
                return Err(Error::validation(
                    "eval.layers",
                    format!("block {l} is outside 1..={NUM_BLOCKS}"),
                ));
            }
            let p = &self.eval.probe_config;
            if !(p.learning_rate > 0.0 && p.learning_rate.is_finite()) {
                return Err(Error::validation("eval.probe_config.learning_rate", "must be positive"));
            }
            if !(p.train_fraction > 0.0 && p.train_fraction < 1.0) {
                return Err(Error::validation("eval.probe_config.train_fraction", "must lie in (0, 1)"));
            }
        }
        if self.comparisons.is_empty() {
            return Err(Error::validation("comparisons", "needs at least one mode"));
        }
        let mut modes = self.comparisons.clone();
        modes.sort();
        modes.dedup();
        if modes.len() != self.comparisons.len() {
            return Err(Error::validation("comparisons", "lists a mode twice"));
        }
        if self.seeds.is_empty() {
            return Err(Error::validation("seeds", "needs at least one seed"));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::validation("seeds", "lists a seed twice"));
        }
        Ok(())
    }

    /// `output_dir`, or `$D2S_OUTPUT_ROOT/<name>` (default root `runs`).
    pub fn resolve_output_dir(&self, name: &str) -> PathBuf {
        match &self.output_dir {
            Some(p) => p.clone(),
            None => {
                let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
                root.join(name)
            }
        }
    }

    pub fn dataset_for(&self, seed: u64) -> Result<BiasedDataset> {
        let data_seed = self.dataset.seed.unwrap_or(seed);
        generate(&self.dataset.spec, self.dataset.sizes, &SeededRng::new(data_seed).substream("dataset"))
    }

    pub fn train_config_for(&self, mode: TrainMode, seed: u64) -> TrainConfig {
        TrainConfig {
            mode,
            seed,
            ..self.train.clone()
        }
    }
}

/// Outcome of one (mode, seed) run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub mode: TrainMode,
    pub seed: u64,
    pub record: RunRecord,
    pub decodability: Vec<LayerProbe>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub mode: TrainMode,
    pub seeds: usize,
    pub val_unbiased: f64,
    pub val_worst_group: f64,
    pub test_unbiased: f64,
    pub test_worst_group: f64,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub output_dir: PathBuf,
    pub runs: Vec<RunOutcome>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentReport {
    pub fn outcome(&self, mode: TrainMode, seed: u64) -> Option<&RunOutcome> {
        self.runs.iter().find(|r| r.mode == mode && r.seed == seed)
    }
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    assert!(n > 0, "median of an empty slice");
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Linear decodability of every bias attribute from the given blocks'
/// outputs on the (group-balanced) validation split.
pub fn probe_layers(
    record: &RunRecord,
    ds: &BiasedDataset,
    layers: &[usize],
    config: &ProbeConfig,
    rng: &SeededRng,
) -> Result<Vec<LayerProbe>> {
    let params = record
        .final_params
        .as_ref()
        .ok_or_else(|| Error::Precondition("run record carries no parameters".into()))?;
    let val = ds.slice(Split::Val);
    let cache = forward_cached(params, &val.x)?;
    let mut rows = Vec::new();
    for &layer in layers {
        for j in 0..ds.cardinalities.len() {
            let labels = val.attribute(j);
            let probe = decodability_probe(
                cache.block_output(layer),
                &labels,
                Some(&val.group_id),
                &rng.substream(&format!("layer{layer}/attr{j}")),
                config,
            )?;
            rows.push(LayerProbe {
                layer,
                method: record.mode.as_str().to_string(),
                attribute: format!("a{j}"),
                accuracy: probe.accuracy,
            });
        }
    }
    Ok(rows)
}

/// Trains one (mode, seed) pair and probes it; writes nothing.
pub fn run_single(config: &ExperimentConfig, mode: TrainMode, seed: u64) -> Result<RunOutcome> {
    let ds = config.dataset_for(seed)?;
    let record = train(&config.train_config_for(mode, seed), &ds)?;
    let decodability = if config.eval.probe {
        probe_layers(
            &record,
            &ds,
            &config.eval.layers,
            &config.eval.probe_config,
            &SeededRng::new(seed).substream("probe"),
        )?
    } else {
        Vec::new()
    };
    Ok(RunOutcome {
        mode,
        seed,
        record,
        decodability,
    })
}

#[derive(Serialize)]
struct GroupMetricsFile<'a> {
    final_train_accuracy: f64,
    final_val: &'a GroupMetrics,
    final_test: &'a GroupMetrics,
    best_epoch: usize,
    best_val: &'a GroupMetrics,
    best_test: &'a GroupMetrics,
}

#[derive(Serialize)]
struct ClusteringFile<'a> {
    events: &'a [crate::trainer::ClusteringEvent],
    final_models: &'a [ClusterModel],
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_run_artifacts(dir: &Path, config: &ExperimentConfig, outcome: &RunOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let r = &outcome.record;
    write(&dir.join("metrics.jsonl"), &r.metrics_jsonl()?)?;
    let gm = GroupMetricsFile {
        final_train_accuracy: r.final_train_accuracy,
        final_val: &r.final_val,
        final_test: &r.final_test,
        best_epoch: r.best.epoch,
        best_val: &r.best.val,
        best_test: &r.best.test,
    };
    write(&dir.join("group_metrics.json"), &serde_json::to_string_pretty(&gm)?)?;
    let clustering = ClusteringFile {
        events: &r.clustering_events,
        final_models: r.cluster_models.as_deref().unwrap_or(&[]),
    };
    write(&dir.join("clustering.json"), &serde_json::to_string(&clustering)?)?;
    if config.eval.probe {
        write_probe_csv(&dir.join("decodability.csv"), &outcome.decodability)?;
    }
    let network = r
        .network
        .as_ref()
        .ok_or_else(|| Error::Precondition("run record carries no network config".into()))?;
    let params = r
        .final_params
        .as_ref()
        .ok_or_else(|| Error::Precondition("run record carries no parameters".into()))?;
    let train = config.train_config_for(outcome.mode, outcome.seed);
    save_checkpoint(&Checkpoint::new(params, network, &train), &dir.join("checkpoint.json"))?;
    write(
        &dir.join("timing.json"),
        &serde_json::to_string(&serde_json::json!({ "wall_clock_seconds": r.wall_clock_seconds }))?,
    )
}

pub fn summarize(config: &ExperimentConfig, runs: &[RunOutcome]) -> Vec<SummaryRow> {
    config
        .comparisons
        .iter()
        .map(|&mode| {
            let rs: Vec<&RunOutcome> = runs.iter().filter(|r| r.mode == mode).collect();
            let col = |f: &dyn Fn(&RunRecord) -> f64| median(&rs.iter().map(|r| f(&r.record)).collect::<Vec<_>>());
            SummaryRow {
                mode,
                seeds: rs.len(),
                val_unbiased: col(&|r| r.final_val.unbiased_accuracy),
                val_worst_group: col(&|r| r.final_val.worst_group_accuracy),
                test_unbiased: col(&|r| r.final_test.unbiased_accuracy),
                test_worst_group: col(&|r| r.final_test.worst_group_accuracy),
            }
        })
        .collect()
}

fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("mode,seeds,val_unbiased,val_worst_group,test_unbiased,test_worst_group\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.mode.as_str(),
            r.seeds,
            r.val_unbiased,
            r.val_worst_group,
            r.test_unbiased,
            r.test_worst_group
        );
    }
    out
}

fn runs_csv(runs: &[RunOutcome]) -> String {
    let mut out = String::from(
        "mode,seed,train_accuracy,val_unbiased,val_worst_group,test_unbiased,test_worst_group,best_epoch\n",
    );
    for o in runs {
        let r = &o.record;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            o.mode.as_str(),
            o.seed,
            r.final_train_accuracy,
            r.final_val.unbiased_accuracy,
            r.final_val.worst_group_accuracy,
            r.final_test.unbiased_accuracy,
            r.final_test.worst_group_accuracy,
            r.best.epoch
        );
    }
    out
}

fn median_decodability(runs: &[RunOutcome]) -> Vec<LayerProbe> {
    let mut by_key: BTreeMap<(usize, TrainMode, String), Vec<f64>> = BTreeMap::new();
    for o in runs {
        for p in &o.decodability {
            by_key
                .entry((p.layer, o.mode, p.attribute.clone()))
                .or_default()
                .push(p.accuracy);
        }
    }
    by_key
        .into_iter()
        .map(|((layer, mode, attribute), acc)| LayerProbe {
            layer,
            method: mode.as_str().to_string(),
            attribute,
            accuracy: median(&acc),
        })
        .collect()
}

/// Runs every (mode, seed) pair of a validated config with at most `jobs`
/// runs in flight, and writes all artifacts under `output_dir`.
pub fn run_experiment(config: &ExperimentConfig, output_dir: &Path, jobs: usize) -> Result<ExperimentReport> {
    config.validate()?;
    std::fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let resolved = ExperimentConfig {
        output_dir: Some(output_dir.to_path_buf()),
        ..config.clone()
    };
    write(&output_dir.join("config.resolved.json"), &serde_json::to_string_pretty(&resolved)?)?;

    let pairs: Vec<(TrainMode, u64)> = config
        .comparisons
        .iter()
        .flat_map(|&m| config.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Precondition(format!("cannot start worker pool: {e}")))?;
    let runs: Vec<RunOutcome> = pool.install(|| {
        pairs
            .par_iter()
            .map(|&(mode, seed)| {
                let outcome = run_single(config, mode, seed)?;
                let dir = output_dir.join(mode.as_str()).join(format!("seed{seed}"));
                write_run_artifacts(&dir, config, &outcome)?;
                Ok(outcome)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let summary = summarize(config, &runs);
    write(&output_dir.join("summary.csv"), &summary_csv(&summary))?;
    write(&output_dir.join("runs.csv"), &runs_csv(&runs))?;
    if config.eval.probe {
        write_probe_csv(&output_dir.join("decodability.csv"), &median_decodability(&runs))?;
    }
    Ok(ExperimentReport {
        output_dir: output_dir.to_path_buf(),
        runs,
        summary,
    })
}

/// Tunables a sweep may vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Gamma,
    Alpha,
    ShallowTapBlock,
    FixedK,
    DistanceKind,
    ReclusterEvery,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 6] = [
        SweepAxis::Gamma,
        SweepAxis::Alpha,
        SweepAxis::ShallowTapBlock,
        SweepAxis::FixedK,
        SweepAxis::DistanceKind,
        SweepAxis::ReclusterEvery,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Gamma => "gamma",
            SweepAxis::Alpha => "alpha",
            SweepAxis::ShallowTapBlock => "shallow_tap_block",
            SweepAxis::FixedK => "fixed_K",
            SweepAxis::DistanceKind => "distance_kind",
            SweepAxis::ReclusterEvery => "recluster_every",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|a| a.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| {
                let known: Vec<&str> = Self::ALL.iter().map(|a| a.name()).collect();
                Error::validation("axis", format!("unknown axis `{name}`; expected one of {}", known.join(", ")))
            })
    }

    /// Copy of `base` with this axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let bad = |what: &str| Error::validation(self.name(), format!("`{value}` is not {what}"));
        let mut c = base.clone();
        let t = &mut c.train;
        match self {
            SweepAxis::Gamma => t.gamma = value.parse().map_err(|_| bad("a number"))?,
            SweepAxis::Alpha => t.alpha = value.parse().map_err(|_| bad("a number"))?,
            SweepAxis::ShallowTapBlock => t.shallow_taps = vec![value.parse().map_err(|_| bad("a block index"))?],
            SweepAxis::FixedK => {
                t.fixed_k = if value.eq_ignore_ascii_case("none") {
                    None
                } else {
                    Some(value.parse().map_err(|_| bad("a count or `none`"))?)
                }
            }
            SweepAxis::DistanceKind => {
                t.distance_kind = serde_json::from_value(serde_json::Value::String(value.to_string()))
                    .map_err(|_| bad("`mmd` or `gaussian_kl`"))?
            }
            SweepAxis::ReclusterEvery => t.recluster_every = value.parse().map_err(|_| bad("a count"))?,
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug)]
pub struct SweepEntry {
    pub value: String,
    pub report: ExperimentReport,
}

/// One experiment per value, each in its own `<axis>=<value>` directory,
/// all sharing the base config's seeds. Every value is validated before
/// the first run starts.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
    output_dir: &Path,
    jobs: usize,
) -> Result<Vec<SweepEntry>> {
    base.validate()?;
    if values.is_empty() {
        return Err(Error::validation("values", "needs at least one value"));
    }
    let configs = values
        .iter()
        .map(|v| axis.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let mut entries = Vec::with_capacity(values.len());
    let mut table = String::from("value,mode,seeds,val_unbiased,val_worst_group,test_unbiased,test_worst_group\n");
    for (value, config) in values.iter().zip(&configs) {
        let dir = output_dir.join(format!("{}={}", axis.name(), value));
        let report = run_experiment(config, &dir, jobs)?;
        for r in &report.summary {
            let _ = writeln!(
                table,
                "{value},{},{},{},{},{},{}",
                r.mode.as_str(),
                r.seeds,
                r.val_unbiased,
                r.val_worst_group,
                r.test_unbiased,
                r.test_worst_group
            );
        }
        entries.push(SweepEntry {
            value: value.clone(),
            report,
        });
    }
    write(&output_dir.join("sweep_summary.csv"), &table)?;
    Ok(entries)
}

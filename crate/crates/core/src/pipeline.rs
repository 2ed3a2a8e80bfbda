//! Search, derive, retrain and evaluate in one call, and repeated over seeds.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SynthConfig};
use crate::error::{config_err, Result};
use crate::eval::{evaluate, retrain, MetricsReport, RetrainConfig, RetrainEpoch};
use crate::genotype::{derive_genotype, Genotype};
use crate::search::{run_search, EpochLog, SearchConfig};
use crate::supernet::SupernetConfig;

/// Every knob of a run; loadable from a JSON file with any subset of fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub network: SupernetConfig,
    pub search: SearchConfig,
    pub retrain: RetrainConfig,
}

impl ExperimentConfig {
    /// The same configuration with search and retraining driven by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.search.seed = seed;
        cfg.retrain.seed = seed;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.network.validate()?;
        self.search.validate()?;
        self.retrain.validate()
    }
}

/// Output of one seed of the full pipeline.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub genotype: Genotype,
    pub search_log: Vec<EpochLog>,
    pub retrain_log: Vec<RetrainEpoch>,
    pub metrics: MetricsReport,
    pub search_seconds: f64,
    pub retrain_seconds: f64,
}

/// Searches on `train` (split internally), derives, retrains on all of
/// `train` and evaluates on `test`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, train: &Dataset, test: &Dataset) -> Result<SeedRun> {
    let cfg = cfg.with_seed(seed);
    cfg.validate()?;
    let start = Instant::now();
    let outcome = run_search(&cfg.search, &cfg.network, train)?;
    let genotype = derive_genotype(&outcome.arch, &cfg.network)?;
    let search_seconds = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let (mut model, retrain_log) = retrain(&genotype, train, &cfg.retrain)?;
    let metrics = evaluate(&mut model, test)?;
    Ok(SeedRun {
        seed,
        genotype,
        search_log: outcome.log,
        retrain_log,
        metrics,
        search_seconds,
        retrain_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Spread {
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }
}

/// Per-seed metrics with their spread.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedStudy {
    pub rows: Vec<MetricsReport>,
    pub accuracy: Spread,
    pub map: Spread,
}

impl SeedStudy {
    pub fn from_reports(rows: Vec<MetricsReport>) -> Result<Self> {
        if rows.is_empty() {
            return Err(config_err!("a seed study needs at least one seed"));
        }
        let acc: Vec<f64> = rows.iter().map(|r| r.overall_accuracy).collect();
        let map: Vec<f64> = rows.iter().map(|r| r.map).collect();
        Ok(SeedStudy {
            accuracy: Spread::of(&acc),
            map: Spread::of(&map),
            rows,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

impl fmt::Display for SeedStudy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>6} {:>10} {:>10} {:>8} {:>8} {:>10} {:>12}  genotype",
            "seed", "acc", "class acc", "mAP", "AUC", "params", "MACs"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>6} {:>9.2}% {:>9.2}% {:>7.2}% {:>7.2}% {:>10} {:>12}  {}",
                r.seed,
                100.0 * r.overall_accuracy,
                100.0 * r.per_class_accuracy,
                100.0 * r.map,
                100.0 * r.auc,
                r.params,
                r.macs,
                r.genotype
            )?;
        }
        for (name, s) in [("accuracy", self.accuracy), ("mAP", self.map)] {
            writeln!(
                f,
                "{name:<9} mean {:.2}% std {:.2} min {:.2}% max {:.2}% spread {:.2} points",
                100.0 * s.mean,
                100.0 * s.std,
                100.0 * s.min,
                100.0 * s.max,
                100.0 * s.range()
            )?;
        }
        Ok(())
    }
}

/// Runs the pipeline once per seed; `on_run` sees each finished run.
pub fn seed_study(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    train: &Dataset,
    test: &Dataset,
    mut on_run: impl FnMut(&SeedRun) -> Result<()>,
) -> Result<(SeedStudy, Vec<SeedRun>)> {
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let run = run_seed(cfg, seed, train, test)?;
        on_run(&run)?;
        runs.push(run);
    }
    let study = SeedStudy::from_reports(runs.iter().map(|r| r.metrics.clone()).collect())?;
    Ok((study, runs))
}

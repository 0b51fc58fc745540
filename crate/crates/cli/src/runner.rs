//! Executes configured runs, repeat sets and depth sweeps.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wus_core::controller::{gate_plan_for, Phase, Variant};
use wus_core::data::{load_cifar10_subset, load_idx, normalize, synthetic_splits, Dataset};
use wus_core::metrics::{reduction_percent, RunSummary, RunWriter};
use wus_core::{Network, Precision, Scalar, TrainConfig, Trainer};

use crate::config::{DatasetConfig, ExperimentConfig};
use crate::error::CliError;

fn to_json<S: Serialize>(value: &S) -> Result<Vec<u8>, CliError> {
    serde_json::to_vec_pretty(value).map_err(|e| CliError::Core(e.into()))
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset), CliError> {
    let (mut train, mut val, norm) = match &cfg.dataset {
        DatasetConfig::Cifar10 {
            path,
            train_limit,
            val_limit,
            normalization,
        } => {
            let dir = path.as_deref().ok_or_else(|| CliError::Config("dataset.path missing".into()))?;
            let (t, v) = load_cifar10_subset(dir, *train_limit, *val_limit)?;
            (t, v, *normalization)
        }
        DatasetConfig::Idx {
            path,
            train_images,
            train_labels,
            val_images,
            val_labels,
            normalization,
        } => {
            let root = path.clone().unwrap_or_default();
            let t = load_idx(&root.join(train_images), &root.join(train_labels))?;
            let v = load_idx(&root.join(val_images), &root.join(val_labels))?;
            if t.sample_shape() != v.sample_shape() {
                return Err(CliError::Config("IDX train and validation image sizes differ".into()));
            }
            let classes = t.class_count().max(v.class_count());
            let widen = |d: Dataset| Dataset::new(d.images().clone(), d.labels().to_vec(), classes);
            (widen(t)?, widen(v)?, *normalization)
        }
        DatasetConfig::Synthetic {
            n_train,
            n_val,
            classes,
            shape,
            noise,
            data_seed,
            normalization,
        } => {
            let (t, v) = synthetic_splits(*data_seed, *n_train, *n_val, *classes, shape, *noise)?;
            (t, v, *normalization)
        }
    };
    normalize(&mut train, &mut val, norm);
    Ok((train, val))
}

/// Mean over the repeats of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateSummary {
    pub variant: String,
    pub depth_k: usize,
    pub repeats: usize,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub total_weights: u64,
    pub total_biases: u64,
    pub mean_total_wall_seconds: f64,
    pub mean_backward_wall_seconds: f64,
    pub mean_backward_flops: f64,
    pub mean_final_val_accuracy: f64,
    pub std_final_val_accuracy: f64,
    pub mean_parameter_updates: f64,
    pub mean_update_reduction_percent: f64,
    pub mean_wus_epochs: f64,
    pub runs: Vec<RunSummary>,
}

impl AggregateSummary {
    pub fn from_runs(runs: Vec<RunSummary>) -> Result<Self, CliError> {
        let first = runs.first().ok_or_else(|| CliError::Config("no runs to aggregate".into()))?;
        let n = runs.len() as f64;
        let mean = |f: &dyn Fn(&RunSummary) -> f64| runs.iter().map(f).sum::<f64>() / n;
        let acc = mean(&|r| r.final_val_accuracy);
        let acc_var = runs.iter().map(|r| (r.final_val_accuracy - acc).powi(2)).sum::<f64>() / n;
        Ok(AggregateSummary {
            variant: first.variant.clone(),
            depth_k: first.depth_k,
            repeats: runs.len(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            epochs: first.epochs,
            total_weights: first.total_weights,
            total_biases: first.total_biases,
            mean_total_wall_seconds: mean(&|r| r.total_wall_seconds),
            mean_backward_wall_seconds: mean(&|r| r.backward_wall_seconds),
            mean_backward_flops: mean(&|r| r.backward_flops as f64),
            mean_final_val_accuracy: acc,
            std_final_val_accuracy: acc_var.sqrt(),
            mean_parameter_updates: mean(&|r| (r.weights_updated + r.biases_updated) as f64),
            mean_update_reduction_percent: mean(&|r| r.update_reduction_percent),
            mean_wus_epochs: mean(&|r| r.wus_epochs as f64),
            runs,
        })
    }

    /// Reads an aggregate `summary.json`, or lifts a single run's summary.
    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join("summary.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        if let Ok(agg) = serde_json::from_str::<AggregateSummary>(&text) {
            return Ok(agg);
        }
        let run: RunSummary = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{} is not a run summary: {e}", path.display())))?;
        Self::from_runs(vec![run])
    }
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub run_dirs: Vec<PathBuf>,
    pub summary: AggregateSummary,
}

fn run_typed<T: Scalar>(
    cfg: &ExperimentConfig,
    train: &Dataset,
    val: &Dataset,
    seed: u64,
    dir: &Path,
) -> Result<RunSummary, CliError> {
    let specs = cfg.layer_specs(train.class_count())?;
    let net = Network::<T>::build(&specs, train.sample_shape(), seed)?;
    let train_cfg = TrainConfig {
        sgd: cfg.sgd.clone(),
        controller: cfg.controller.clone(),
        schedule: cfg.schedule.clone(),
        seed,
        histogram_epochs: cfg.histograms.epochs.clone(),
        histogram_bins: cfg.histograms.bins,
        eval_batch_size: cfg.eval_batch_size,
    };
    let mut trainer = Trainer::new(net, train, val, train_cfg)?.with_writer(RunWriter::create(dir)?);
    while trainer.epoch() < cfg.sgd.epochs {
        trainer.run_epoch()?;
    }
    let summary = trainer.summary()?;
    fs::write(dir.join("summary.json"), to_json(&summary)?)?;
    let file = fs::File::create(dir.join("model.wusm"))?;
    trainer.net().save_snapshot(std::io::BufWriter::new(file))?;
    Ok(summary)
}

fn run_with_data(cfg: &ExperimentConfig, train: &Dataset, val: &Dataset) -> Result<RunArtifacts, CliError> {
    cfg.validate_model(train.sample_shape(), train.class_count())?;
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml())?;
    let mut runs = Vec::new();
    let mut run_dirs = Vec::new();
    for r in 0..cfg.repeats as u64 {
        let seed = cfg.seed + r;
        let dir = cfg.output_dir.join(format!("seed_{seed}"));
        let summary = match cfg.precision {
            Precision::F32 => run_typed::<f32>(cfg, train, val, seed, &dir)?,
            Precision::F64 => run_typed::<f64>(cfg, train, val, seed, &dir)?,
        };
        runs.push(summary);
        run_dirs.push(dir);
    }
    let summary = AggregateSummary::from_runs(runs)?;
    fs::write(
        cfg.output_dir.join("summary.json"),
        to_json(&summary)?,
    )?;
    Ok(RunArtifacts {
        dir: cfg.output_dir.clone(),
        run_dirs,
        summary,
    })
}

/// Runs `repeats` seeds (`seed`, `seed + 1`, …) into `output_dir/seed_<n>/`
/// and writes the aggregate `output_dir/summary.json`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunArtifacts, CliError> {
    cfg.validate()?;
    let (train, val) = load_data(cfg)?;
    run_with_data(cfg, &train, &val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub time_reduction_percent: f64,
    pub backward_time_reduction_percent: f64,
    pub flops_reduction_percent: f64,
    /// Analytic backward cost of one full WUS-phase epoch at this depth.
    pub wus_epoch_backward_flops: u64,
    pub update_reduction_percent: f64,
    pub mean_final_val_accuracy: f64,
    pub mean_wus_epochs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub baseline: AggregateSummary,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Plot-ready: one line per k.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "k,time_reduction_percent,backward_time_reduction_percent,flops_reduction_percent,\
             wus_epoch_backward_flops,update_reduction_percent,mean_final_val_accuracy,mean_wus_epochs\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.k,
                r.time_reduction_percent,
                r.backward_time_reduction_percent,
                r.flops_reduction_percent,
                r.wus_epoch_backward_flops,
                r.update_reduction_percent,
                r.mean_final_val_accuracy,
                r.mean_wus_epochs
            ));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "baseline: {:.2} s, val acc {:.2}%\n{:>3} {:>9} {:>11} {:>9} {:>16} {:>10} {:>9}\n",
            self.baseline.mean_total_wall_seconds,
            self.baseline.mean_final_val_accuracy,
            "k",
            "time %",
            "backward %",
            "flops %",
            "wus epoch flops",
            "updates %",
            "val acc"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:>3} {:>9.2} {:>11.2} {:>9.2} {:>16} {:>10.2} {:>9.2}\n",
                r.k,
                r.time_reduction_percent,
                r.backward_time_reduction_percent,
                r.flops_reduction_percent,
                r.wus_epoch_backward_flops,
                r.update_reduction_percent,
                r.mean_final_val_accuracy
            ));
        }
        out
    }
}

/// Backward FLOPs of one epoch over `n` samples under the WUS plan at depth `k`.
fn wus_epoch_flops(cfg: &ExperimentConfig, shape: &[usize], classes: usize, n: usize, k: usize) -> Result<u64, CliError> {
    let net = wus_core::Network32::build(&cfg.layer_specs(classes)?, shape, 0)?;
    let plan = gate_plan_for(Phase::Wus, k, &net.parametric_layout())?;
    let full = n / cfg.sgd.batch_size;
    let rest = n % cfg.sgd.batch_size;
    Ok(full as u64 * net.backward_flops(&plan, cfg.sgd.batch_size)
        + if rest > 0 { net.backward_flops(&plan, rest) } else { 0 })
}

/// One baseline run set plus one run set per depth `k`, under
/// `output_dir/baseline` and `output_dir/k<k>`.
pub fn sweep_layers(cfg: &ExperimentConfig, ks: &[usize]) -> Result<SweepReport, CliError> {
    cfg.validate()?;
    if ks.is_empty() {
        return Err(CliError::Config("sweep needs at least one k".into()));
    }
    let (train, val) = load_data(cfg)?;
    let shape = train.sample_shape().to_vec();
    let classes = train.class_count();
    let variant = match cfg.controller.variant {
        Variant::Baseline => Variant::Wus,
        v => v,
    };
    for &k in ks {
        let mut c = cfg.clone();
        c.controller.depth_k = k;
        c.validate_model(&shape, classes)?;
    }

    let mut base_cfg = cfg.clone();
    base_cfg.controller.variant = Variant::Baseline;
    base_cfg.output_dir = cfg.output_dir.join("baseline");
    let baseline = run_with_data(&base_cfg, &train, &val)?.summary;

    let mut rows = Vec::new();
    for &k in ks {
        let mut c = cfg.clone();
        c.controller.variant = variant;
        c.controller.depth_k = k;
        c.output_dir = cfg.output_dir.join(format!("k{k}"));
        let s = run_with_data(&c, &train, &val)?.summary;
        rows.push(SweepRow {
            k,
            time_reduction_percent: reduction_percent(baseline.mean_total_wall_seconds, s.mean_total_wall_seconds)?,
            backward_time_reduction_percent: reduction_percent(
                baseline.mean_backward_wall_seconds,
                s.mean_backward_wall_seconds,
            )?,
            flops_reduction_percent: reduction_percent(baseline.mean_backward_flops, s.mean_backward_flops)?,
            wus_epoch_backward_flops: wus_epoch_flops(cfg, &shape, classes, train.len(), k)?,
            update_reduction_percent: reduction_percent(baseline.mean_parameter_updates, s.mean_parameter_updates)?,
            mean_final_val_accuracy: s.mean_final_val_accuracy,
            mean_wus_epochs: s.mean_wus_epochs,
        });
    }
    let report = SweepReport { baseline, rows };
    fs::write(
        cfg.output_dir.join("sweep.json"),
        to_json(&report)?,
    )?;
    fs::write(cfg.output_dir.join("sweep.csv"), report.to_csv())?;
    fs::write(cfg.output_dir.join("sweep.txt"), report.to_table())?;
    Ok(report)
}

//! Per-depth metrics, subset sweeps, and the ablation harness.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::datastore::{AvailabilityMask, Dataset, NormStats, Split, SplitData, VariableUniverse};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::trainer::same_except_variant;

fn check_pair(preds: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Data("metrics need at least one sample".into()));
    }
    if preds.len() != targets.len() {
        return Err(Error::Shape(format!("{} predictions vs {} targets", preds.len(), targets.len())));
    }
    for (p, t) in preds.iter().zip(targets) {
        if p.len() != t.len() || p.is_empty() {
            return Err(Error::Shape(format!(
                "sample sizes differ or are empty ({} vs {})",
                p.len(),
                t.len()
            )));
        }
    }
    Ok(())
}

/// Mean over samples of the per-sample root-mean-square error.
pub fn rmse(preds: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    check_pair(preds, targets)?;
    let total: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let mse = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
            mse.sqrt()
        })
        .sum();
    Ok(total / preds.len() as f64)
}

/// Mean over samples of the per-sample mean absolute error.
pub fn mae(preds: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    check_pair(preds, targets)?;
    let total: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64)
        .sum();
    Ok(total / preds.len() as f64)
}

/// Pearson coefficient of one sample, `None` when either side is constant.
pub fn sample_pcc(p: &[f64], t: &[f64]) -> Option<f64> {
    let n = p.len() as f64;
    let pm = p.iter().sum::<f64>() / n;
    let tm = t.iter().sum::<f64>() / n;
    let (mut num, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(t) {
        let (da, db) = (a - pm, b - tm);
        num += da * db;
        sp += da * da;
        st += db * db;
    }
    if sp <= 0.0 || st <= 0.0 {
        return None;
    }
    Some((num / (sp.sqrt() * st.sqrt())).clamp(-1.0, 1.0))
}

/// Mean per-sample Pearson coefficient and the number of degenerate samples skipped.
pub fn pcc_with_skips(preds: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<(f64, usize)> {
    check_pair(preds, targets)?;
    let values: Vec<f64> = preds.iter().zip(targets).filter_map(|(p, t)| sample_pcc(p, t)).collect();
    if values.is_empty() {
        return Err(Error::Data("every sample has a constant prediction or target; PCC undefined".into()));
    }
    let skipped = preds.len() - values.len();
    Ok((values.iter().sum::<f64>() / values.len() as f64, skipped))
}

pub fn pcc(preds: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    Ok(pcc_with_skips(preds, targets)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub level: String,
    /// m/s
    pub rmse: f64,
    /// m/s
    pub mae: f64,
    /// `None` when every sample was degenerate.
    pub pcc: Option<f64>,
    pub pcc_skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub mask: String,
    pub mask_bits: Vec<bool>,
    pub scenario: String,
    pub samples: usize,
    pub checkpoint: String,
    pub levels: Vec<LevelMetrics>,
}

impl MetricsReport {
    pub fn rmse(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.rmse).collect()
    }
}

/// Scenario names used in ablation tables.
pub fn scenario_name(mask: &AvailabilityMask, universe: &VariableUniverse) -> String {
    if mask.is_full() {
        "Complete Observation".to_string()
    } else {
        format!("Incomplete Observation ({})", universe_names(mask, universe).join(","))
    }
}

fn universe_names(mask: &AvailabilityMask, universe: &VariableUniverse) -> Vec<String> {
    mask.present().into_iter().map(|i| universe.names()[i].clone()).collect()
}

/// Default nested family `{SSH} ⊂ {SSH,U,V} ⊂ {SSH,U,V,B}`.
pub fn default_family(universe: &VariableUniverse) -> Result<Vec<AvailabilityMask>> {
    ["SSH", "SSH+U+V", "SSH+U+V+B"]
        .iter()
        .map(|l| AvailabilityMask::parse(universe, l))
        .collect()
}

/// Per-level metrics in physical units for normalized predictions produced by `predict`.
pub fn level_metrics<F>(data: &SplitData, stats: &NormStats, levels: &[String], mut predict: F) -> Result<Vec<LevelMetrics>>
where
    F: FnMut(usize) -> Result<Tensor<f32>>,
{
    if data.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let mut preds: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(data.len()); levels.len()];
    let mut targets: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(data.len()); levels.len()];
    for i in 0..data.len() {
        let pred = stats.denormalize_target(&predict(i)?)?;
        let target = &data.target_raw[i];
        if pred.shape() != target.shape() || pred.shape()[0] != levels.len() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs target {:?}",
                pred.shape(),
                target.shape()
            )));
        }
        for c in 0..levels.len() {
            preds[c].push(pred.channel(c).iter().map(|&v| v as f64).collect());
            targets[c].push(target.channel(c).iter().map(|&v| v as f64).collect());
        }
    }
    levels
        .iter()
        .enumerate()
        .map(|(c, level)| {
            let (pcc, pcc_skipped) = match pcc_with_skips(&preds[c], &targets[c]) {
                Ok((v, s)) => (Some(v), s),
                Err(Error::Data(_)) => (None, data.len()),
                Err(e) => return Err(e),
            };
            Ok(LevelMetrics {
                level: level.clone(),
                rmse: rmse(&preds[c], &targets[c])?,
                mae: mae(&preds[c], &targets[c])?,
                pcc,
                pcc_skipped,
            })
        })
        .collect()
}

/// A trained model bound to an evaluation split.
pub struct Evaluator<'a> {
    pub checkpoint: &'a Checkpoint,
    pub model: Model,
    pub data: SplitData,
    pub stats: NormStats,
    levels: Vec<String>,
    identity: String,
}

impl<'a> Evaluator<'a> {
    pub fn new(checkpoint: &'a Checkpoint, dataset: &Dataset, split: Split) -> Result<Evaluator<'a>> {
        if dataset.universe() != &checkpoint.universe {
            return Err(Error::Data(format!(
                "dataset variables {:?} do not match the model's {:?}",
                dataset.universe().names(),
                checkpoint.universe.names()
            )));
        }
        let model = Model::new(&checkpoint.model, checkpoint.universe.len())?;
        let stats = dataset.read_stats()?;
        let data = dataset.load_split(split, &stats)?;
        Ok(Evaluator {
            checkpoint,
            model,
            data,
            stats,
            levels: dataset.manifest().levels.clone(),
            identity: checkpoint.identity(),
        })
    }

    fn report(&self, mask: &AvailabilityMask, variant: &str, levels: Vec<LevelMetrics>) -> MetricsReport {
        let universe = &self.checkpoint.universe;
        MetricsReport {
            variant: variant.to_string(),
            mask: mask.label(universe),
            mask_bits: mask.bits().to_vec(),
            scenario: scenario_name(mask, universe),
            samples: self.data.len(),
            checkpoint: self.identity.clone(),
            levels,
        }
    }

    fn check_mask(&self, mask: &AvailabilityMask) -> Result<()> {
        if mask.len() != self.checkpoint.universe.len() {
            return Err(Error::Config("mask length does not match the variable universe".into()));
        }
        if mask.is_empty() {
            return Err(Error::Config("evaluation mask selects no variables".into()));
        }
        Ok(())
    }

    /// Normalized prediction for sample `i` of the split.
    pub fn predict(&self, i: usize, mask: &AvailabilityMask) -> Result<Tensor<f32>> {
        self.model.forward(&self.checkpoint.params, &self.data.inputs(i, mask), mask)
    }

    pub fn evaluate(&self, mask: &AvailabilityMask) -> Result<MetricsReport> {
        self.check_mask(mask)?;
        let levels = level_metrics(&self.data, &self.stats, &self.levels, |i| self.predict(i, mask))?;
        Ok(self.report(mask, self.checkpoint.model.variant.name(), levels))
    }

    /// The training-mean predictor (zero in normalized units).
    pub fn climatology(&self, mask: &AvailabilityMask) -> Result<MetricsReport> {
        self.check_mask(mask)?;
        let shape = self.data.target[0].shape().to_vec();
        let levels = level_metrics(&self.data, &self.stats, &self.levels, |_| Ok(Tensor::zeros(&shape)))?;
        Ok(self.report(mask, "climatology", levels))
    }

    pub fn sweep(&self, family: &[AvailabilityMask]) -> Result<SweepResult> {
        if family.is_empty() {
            return Err(Error::Config("subset family is empty".into()));
        }
        let distinct: BTreeSet<_> = family.iter().collect();
        if distinct.len() != family.len() {
            return Err(Error::Config("subset family repeats a mask".into()));
        }
        Ok(SweepResult {
            entries: family.iter().map(|m| self.evaluate(m)).collect::<Result<_>>()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub entries: Vec<MetricsReport>,
}

/// Side-by-side reports for several variants trained under one configuration.
pub fn ablate(checkpoints: &[&Checkpoint], dataset: &Dataset, scenarios: &[AvailabilityMask]) -> Result<Vec<MetricsReport>> {
    let Some(first) = checkpoints.first() else {
        return Err(Error::Config("ablation needs at least one variant".into()));
    };
    for c in &checkpoints[1..] {
        let same = same_except_variant(&first.model, &c.model)
            && first.train == c.train
            && first.policy == c.policy
            && first.universe == c.universe
            && first.epoch == c.epoch;
        if !same {
            return Err(Error::Config(format!(
                "variant {} was trained under a different configuration than {}",
                c.model.variant.name(),
                first.model.variant.name()
            )));
        }
    }
    let mut out = Vec::new();
    for c in checkpoints {
        let ev = Evaluator::new(c, dataset, Split::Test)?;
        for m in scenarios {
            out.push(ev.evaluate(m)?);
        }
    }
    Ok(out)
}

pub const CSV_HEADER: [&str; 8] = ["variant", "mask", "depth", "rmse", "mae", "pcc", "n", "pcc_skipped"];

/// One row per report and depth level.
pub fn write_csv(reports: &[MetricsReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(CSV_HEADER).map_err(|e| csv_error(path, e))?;
    for r in reports {
        for l in &r.levels {
            w.write_record([
                r.variant.clone(),
                r.mask.clone(),
                l.level.clone(),
                format!("{:e}", l.rmse),
                format!("{:e}", l.mae),
                l.pcc.map(|v| format!("{v}")).unwrap_or_default(),
                r.samples.to_string(),
                l.pcc_skipped.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

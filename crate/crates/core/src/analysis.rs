//! Flatness probe (random-direction parameter perturbation), prediction
//! variance between heads, and mean/std aggregation across runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::losses;
use crate::metrics::{self, Phase};
use crate::model::{MultiBranchModel, SingleNet};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{evaluate_single, HeadEval};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub d_max: f64,
    /// Evenly spaced magnitudes over `[0, d_max]`, endpoints included.
    pub points: usize,
    pub directions: usize,
    pub seed: u64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        PerturbationSpec { d_max: 5.0, points: 11, directions: 5, seed: 0 }
    }
}

impl PerturbationSpec {
    pub fn magnitudes(&self) -> Vec<f64> {
        match self.points {
            0 => Vec::new(),
            1 => vec![0.0],
            p => (0..p).map(|i| self.d_max * i as f64 / (p - 1) as f64).collect(),
        }
    }
}

/// A unit vector over the concatenation of all trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Direction {
    pub flat: Vec<f64>,
    pub shapes: Vec<Vec<usize>>,
}

impl Direction {
    pub fn norm(&self) -> f64 {
        self.flat.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Per-tensor pieces, in parameter order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.shapes.len());
        let mut off = 0;
        for s in &self.shapes {
            let n: usize = s.iter().product();
            out.push(&self.flat[off..off + n]);
            off += n;
        }
        out
    }
}

/// Standard-normal draw normalised to unit length, i.e. uniform on the
/// sphere of the full parameter space.
pub fn sample_unit_direction(shapes: &[Vec<usize>], rng: &mut Rng) -> Result<Direction> {
    let dim: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if dim == 0 {
        return Err(Error::Domain("direction over an empty parameter set".into()));
    }
    let mut flat: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let norm = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut flat {
        *v /= norm;
    }
    Ok(Direction { flat, shapes: shapes.to_vec() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub d: f64,
    pub direction: usize,
    pub train_ce: f64,
    pub train_err: f64,
    pub test_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub spec: PerturbationSpec,
    pub baseline: RobustnessRow,
    pub rows: Vec<RobustnessRow>,
}

pub const ROBUSTNESS_HEADER: &str = "d,direction,train_ce,train_err,test_err";

impl RobustnessReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{ROBUSTNESS_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.d, r.direction, r.train_ce, r.train_err, r.test_err);
        }
        s
    }

    /// Mean train CE over directions at each magnitude.
    pub fn mean_train_ce(&self) -> Vec<(f64, f64)> {
        let mut by_d: Vec<(f64, f64, usize)> = Vec::new();
        for r in &self.rows {
            match by_d.iter_mut().find(|e| e.0 == r.d) {
                Some(e) => {
                    e.1 += r.train_ce;
                    e.2 += 1;
                }
                None => by_d.push((r.d, r.train_ce, 1)),
            }
        }
        by_d.into_iter().map(|(d, s, n)| (d, s / n as f64)).collect()
    }
}

fn probe(net: &SingleNet<f32>, train: &Dataset, test: &Dataset, batch: usize) -> Result<(HeadEval, HeadEval)> {
    Ok((evaluate_single(net, train, batch, "train")?, evaluate_single(net, test, batch, "test")?))
}

fn row(d: f64, direction: usize, evals: Result<(HeadEval, HeadEval)>) -> Result<RobustnessRow> {
    match evals {
        Ok((tr, te)) => Ok(RobustnessRow { d, direction, train_ce: tr.ce, train_err: tr.top1_err, test_err: te.top1_err }),
        // Large perturbations can overflow; the row is kept as NaN.
        Err(Error::Numeric(_)) => {
            Ok(RobustnessRow { d, direction, train_ce: f64::NAN, train_err: f64::NAN, test_err: f64::NAN })
        }
        Err(e) => Err(e),
    }
}

/// Evaluates `theta + d * v` for every magnitude and direction. The same
/// directions are used at every magnitude. Only trainable parameters move;
/// running statistics stay fixed. Parameters are restored bit-exactly
/// after each probe.
pub fn perturb_and_eval(
    net: &mut SingleNet<f32>,
    spec: &PerturbationSpec,
    train: &Dataset,
    test: &Dataset,
    batch: usize,
) -> Result<RobustnessReport> {
    if !(spec.d_max >= 0.0 && spec.d_max.is_finite()) {
        return Err(Error::config(format!("invalid d_max {}", spec.d_max)));
    }
    let baseline = row(0.0, 0, probe(net, train, test, batch))?;
    let shapes = net.store().shapes();
    let root = Rng::new(spec.seed).derive_named("perturb");
    let dirs = (0..spec.directions)
        .map(|k| sample_unit_direction(&shapes, &mut root.derive(k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let original: Vec<Tensor<f32>> = net.store().params().iter().map(|p| p.value.clone()).collect();
    let mut rows = Vec::new();
    for d in spec.magnitudes() {
        for (k, dir) in dirs.iter().enumerate() {
            if d != 0.0 {
                for (p, v) in net.store_mut().params_mut().iter_mut().zip(dir.slices()) {
                    for (w, &vi) in p.value.data_mut().iter_mut().zip(v) {
                        *w = (*w as f64 + d * vi) as f32;
                    }
                }
            }
            let evals = probe(net, train, test, batch);
            for (p, o) in net.store_mut().params_mut().iter_mut().zip(&original) {
                p.value = o.clone();
            }
            rows.push(row(d, k, evals)?);
        }
    }
    Ok(RobustnessReport { spec: spec.clone(), baseline, rows })
}

/// Mean over samples and unordered head pairs of the Euclidean distance
/// between the heads' predicted distributions. Each tensor is `N x C`.
pub fn branch_variance(heads: &[Tensor<f32>]) -> Result<f64> {
    if heads.len() < 2 {
        return Err(Error::config(format!("variance needs at least two prediction heads, got {}", heads.len())));
    }
    let shape = heads[0].shape();
    if shape.len() != 2 || heads.iter().any(|h| h.shape() != shape) {
        return Err(Error::dim("heads must share an N x C shape"));
    }
    let (n, c) = (shape[0], shape[1]);
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..heads.len() {
        for b in a + 1..heads.len() {
            let (pa, pb) = (heads[a].data(), heads[b].data());
            for i in 0..n {
                let d2: f64 = (0..c)
                    .map(|j| {
                        let d = pa[i * c + j] as f64 - pb[i * c + j] as f64;
                        d * d
                    })
                    .sum();
                total += d2.sqrt();
            }
            pairs += 1;
        }
    }
    Ok(total / (pairs * n) as f64)
}

fn concat_rows(parts: Vec<Tensor<f32>>) -> Result<Tensor<f32>> {
    let c = parts[0].shape()[1];
    let data: Vec<f32> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(vec![data.len() / c, c], data)
}

/// Softmax posteriors of every branch of a multi-branch model.
pub fn branch_posteriors(model: &MultiBranchModel<f32>, data: &Dataset, batch: usize) -> Result<Vec<Tensor<f32>>> {
    let mut per: Vec<Vec<Tensor<f32>>> = vec![Vec::new(); model.branch_count()];
    for b in data::eval_batches(data, batch) {
        let p = model.predict(&b.images)?;
        for (i, z) in p.branch_logits.iter().enumerate() {
            per[i].push(losses::softmax_tensor(z, 1.0));
        }
    }
    per.into_iter().map(concat_rows).collect()
}

/// Softmax posteriors of independent networks.
pub fn net_posteriors(nets: &[SingleNet<f32>], data: &Dataset, batch: usize) -> Result<Vec<Tensor<f32>>> {
    nets.iter()
        .map(|n| {
            let parts = data::eval_batches(data, batch)
                .map(|b| n.predict(&b.images).map(|z| losses::softmax_tensor(&z, 1.0)))
                .collect::<Result<Vec<_>>>()?;
            concat_rows(parts)
        })
        .collect()
}

/// Size of the fixed training sample used for variance measurements.
pub const VARIANCE_SAMPLES: usize = 1000;

pub fn variance_sample(train: &Dataset) -> Result<Dataset> {
    train.subset(VARIANCE_SAMPLES, crate::train::SUBSET_SEED)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    // Deviations from the first value keep identical inputs exact.
    let v0 = values[0];
    let shift = values.iter().map(|v| v - v0).sum::<f64>() / n as f64;
    let mean = v0 + shift;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - v0 - shift) * (v - v0 - shift)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub head: String,
    pub runs: usize,
    pub top1_mean: f64,
    pub top1_std: f64,
    pub top5_mean: f64,
    pub top5_std: f64,
}

pub const SUMMARY_HEADER: &str = "head,runs,top1_mean,top1_std,top5_mean,top5_std";

/// Final-epoch test errors per head, aggregated across metrics CSV files.
pub fn aggregate(files: &[&Path]) -> Result<Vec<SummaryRow>> {
    if files.is_empty() {
        return Err(Error::config("no metrics files given"));
    }
    let mut by_head: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for f in files {
        let records = metrics::read_csv(f)?;
        let last = records
            .iter()
            .filter(|r| r.phase == Phase::Test)
            .map(|r| r.epoch)
            .max()
            .ok_or_else(|| Error::Data(format!("{}: no test rows", f.display())))?;
        for r in records.iter().filter(|r| r.phase == Phase::Test && r.epoch == last) {
            let e = by_head.entry(r.head.clone()).or_default();
            e.0.push(r.top1_err);
            e.1.push(r.top5_err);
        }
    }
    Ok(by_head
        .into_iter()
        .map(|(head, (t1, t5))| {
            let (top1_mean, top1_std) = mean_std(&t1);
            let (top5_mean, top5_std) = mean_std(&t5);
            SummaryRow { head, runs: t1.len(), top1_mean, top1_std, top5_mean, top5_std }
        })
        .collect())
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.head, r.runs, r.top1_mean, r.top1_std, r.top5_mean, r.top5_std);
    }
    s
}

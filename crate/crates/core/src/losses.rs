//! Objective terms: softmax posterior, cross-entropy, temperature-softened
//! targets, KL distillation and the combined multi-branch loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::graph::{Graph, Var, PROB_FLOOR};
use crate::model::ForwardOutputs;
use crate::tensor::Tensor;

/// Softening temperature; strictly positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(t: f64) -> Result<Self> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Domain(format!("temperature must be positive and finite, got {t}")));
        }
        Ok(Temperature(t))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature(3.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossFlags {
    /// Drop the KL term entirely.
    pub no_distill: bool,
    /// Let the KL term backpropagate into the teacher logits.
    pub kl_backprop_teacher: bool,
}

/// Components of the combined loss for one batch (batch means).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub branch_ce: Vec<f64>,
    pub teacher_ce: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `sum(branch_ce) + teacher_ce + T^2 * kl`.
    pub fn reconstruct(&self, t: Temperature) -> f64 {
        self.branch_ce.iter().sum::<f64>() + self.teacher_ce + t.0 * t.0 * self.kl
    }
}

pub fn softmax<F: Float>(g: &mut Graph<F>, logits: Var) -> Result<Var> {
    g.softmax(logits)
}

fn one_hot<F: Float>(labels: &[usize], classes: usize) -> Result<Tensor<F>> {
    let mut data = vec![F::ZERO; labels.len() * classes];
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::dim(format!("label {y} out of range for {classes} classes")));
        }
        data[r * classes + y] = F::ONE;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Mean of `-log p(y)` over rows of a probability matrix; `p(y)` is floored
/// at 1e-12 (counted on the graph's clamp counter).
pub fn cross_entropy<F: Float>(g: &mut Graph<F>, probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::dim(format!("probabilities {shape:?} vs {} labels", labels.len())));
    }
    let y = g.constant(one_hot(labels, shape[1])?)?;
    let picked = g.mul(probs, y)?;
    let picked = g.sum_axis(picked, 1)?;
    let floored = g.clamp_min(picked, F::cast(PROB_FLOOR))?;
    let logp = g.log(floored)?;
    let s = g.mean(logp)?;
    g.scale(s, -F::ONE)
}

/// Softmax followed by cross-entropy, fused; gradient is `(p - onehot(y)) / N`.
pub fn softmax_cross_entropy<F: Float>(g: &mut Graph<F>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.softmax_cross_entropy(logits, labels)
}

/// `softmax(z / T)` row-wise.
pub fn soft_targets<F: Float>(g: &mut Graph<F>, logits: Var, t: Temperature) -> Result<Var> {
    let scaled = g.scale(logits, F::cast(1.0 / t.0))?;
    g.softmax(scaled)
}

/// Row-averaged `KL(target || pred)` between probability matrices.
pub fn kl_divergence<F: Float>(g: &mut Graph<F>, target: Var, pred: Var) -> Result<Var> {
    if g.shape(target) != g.shape(pred) {
        return Err(Error::dim("kl operands differ in shape"));
    }
    let rows = g.shape(target)[0];
    let floor = F::cast(PROB_FLOOR);
    let lt = g.clamp_min(target, floor)?;
    let lt = g.log(lt)?;
    let lp = g.clamp_min(pred, floor)?;
    let lp = g.log(lp)?;
    let d = g.sub(lt, lp)?;
    let w = g.mul(target, d)?;
    let s = g.sum(w)?;
    g.scale(s, F::ONE / F::cast_usize(rows))
}

/// Distillation term over softened distributions: `sum_i KL(p_e || p_i)`,
/// batch-averaged. The teacher distribution is detached.
pub fn kl_distill<F: Float>(g: &mut Graph<F>, teacher_soft: Var, branch_softs: &[Var]) -> Result<Var> {
    if branch_softs.is_empty() {
        return Err(Error::dim("kl_distill needs at least one branch"));
    }
    let target = g.detach(teacher_soft)?;
    let mut acc: Option<Var> = None;
    for &p in branch_softs {
        let k = kl_divergence(g, target, p)?;
        acc = Some(match acc {
            Some(a) => g.add(a, k)?,
            None => k,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// Same quantity as [`kl_distill`] computed directly from logits by a fused
/// kernel. `backprop_teacher` chooses whether gradients reach `z_e`.
pub fn kl_distill_logits<F: Float>(
    g: &mut Graph<F>,
    teacher_logits: Var,
    branch_logits: &[Var],
    t: Temperature,
    backprop_teacher: bool,
) -> Result<Var> {
    if branch_logits.is_empty() {
        return Err(Error::dim("kl_distill needs at least one branch"));
    }
    let mut acc: Option<Var> = None;
    for &z in branch_logits {
        let k = g.kl_distill(teacher_logits, z, F::cast(t.0), backprop_teacher)?;
        acc = Some(match acc {
            Some(a) => g.add(a, k)?,
            None => k,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// `L = sum_i CE(z_i) + CE(z_e) + T^2 * sum_i KL(p~_e || p~_i)`.
pub fn total_loss<F: Float>(
    g: &mut Graph<F>,
    outputs: &ForwardOutputs,
    labels: &[usize],
    t: Temperature,
    flags: LossFlags,
) -> Result<(Var, LossBreakdown)> {
    let mut branch_ce = Vec::with_capacity(outputs.branch_logits.len());
    let mut total: Option<Var> = None;
    for &z in &outputs.branch_logits {
        let ce = g.softmax_cross_entropy(z, labels)?;
        branch_ce.push(g.value(ce).item().as_f64());
        total = Some(match total {
            Some(acc) => g.add(acc, ce)?,
            None => ce,
        });
    }
    let teacher = g.softmax_cross_entropy(outputs.teacher_logits, labels)?;
    let teacher_ce = g.value(teacher).item().as_f64();
    let mut total = g.add(total.ok_or_else(|| Error::dim("no branches"))?, teacher)?;
    let mut kl = 0.0;
    if !flags.no_distill {
        let k = kl_distill_logits(g, outputs.teacher_logits, &outputs.branch_logits, t, flags.kl_backprop_teacher)?;
        kl = g.value(k).item().as_f64();
        let weighted = g.scale(k, F::cast(t.0 * t.0))?;
        total = g.add(total, weighted)?;
    }
    let breakdown = LossBreakdown { branch_ce, teacher_ce, kl, total: g.value(total).item().as_f64() };
    Ok((total, breakdown))
}

/// Row-wise softmax of a concrete tensor at temperature `t`.
pub fn softmax_tensor<F: Float>(logits: &Tensor<F>, t: f64) -> Tensor<F> {
    let cols = *logits.shape().last().expect("non-scalar");
    let inv = F::cast(1.0 / t);
    let mut out = Vec::with_capacity(logits.len());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let m = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v * inv));
        let e: Vec<F> = row.iter().map(|&v| (v * inv - m).exp()).collect();
        let s: F = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    debug_assert_eq!(out.len(), logits.rows() * cols);
    Tensor::from_parts(logits.shape().to_vec(), out)
}

//! Browser bindings for a few of the loss computations, built with
//! `wasm-pack build crates/web --target web --out-dir www/pkg`.

use one_core::losses::{self, LossFlags, Temperature};
use one_core::model::ForwardOutputs;
use one_core::{Error, Graph, ParamStore, Result, Tensor};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js(e: Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn row(values: &[f64]) -> Result<Tensor<f64>> {
    if values.is_empty() {
        return Err(Error::Dimension("empty logit vector".into()));
    }
    Tensor::from_f64(&[1, values.len()], values)
}

/// `softmax(z / t)` of one logit vector.
pub fn soften_logits(logits: &[f64], t: f64) -> Result<Vec<f64>> {
    let t = Temperature::new(t)?;
    Ok(losses::softmax_tensor(&row(logits)?, t.value()).into_data())
}

#[derive(Debug, Serialize, PartialEq)]
pub struct KlScaling {
    pub kl: f64,
    /// Norm of the KL gradient with respect to the student logits.
    pub grad_norm: f64,
    /// Same, after multiplying the loss by `t^2`.
    pub weighted_grad_norm: f64,
}

pub fn kl_scaling_of(teacher: &[f64], student: &[f64], t: f64) -> Result<KlScaling> {
    let t = Temperature::new(t)?;
    let mut g = Graph::<f64>::new();
    let mut store = ParamStore::new();
    let te = g.constant(row(teacher)?)?;
    let st = g.variable(row(student)?)?;
    let k = losses::kl_distill_logits(&mut g, te, &[st], t, false)?;
    g.backward(k, &mut store)?;
    let grad_norm = g.grad(st).map(|gr| gr.data().iter().map(|v| v * v).sum::<f64>().sqrt()).unwrap_or(0.0);
    Ok(KlScaling { kl: g.value(k).item(), grad_norm, weighted_grad_norm: grad_norm * t.value() * t.value() })
}

#[derive(Debug, Serialize, PartialEq)]
pub struct Breakdown {
    pub branch_ce: Vec<f64>,
    pub teacher_ce: f64,
    pub kl: f64,
    pub total: f64,
    pub teacher_logits: Vec<f64>,
    pub gate: Vec<f64>,
}

/// Loss terms for one sample: `branch_logits` holds `branches` rows of
/// `classes` logits, `gate_scores` are turned into weights with a softmax.
pub fn breakdown_of(branch_logits: &[f64], branches: usize, gate_scores: &[f64], label: usize, t: f64) -> Result<Breakdown> {
    let t = Temperature::new(t)?;
    if branches == 0 || branch_logits.len() % branches != 0 || gate_scores.len() != branches {
        return Err(Error::Dimension(format!(
            "{} logits, {} gate scores for {branches} branches",
            branch_logits.len(),
            gate_scores.len()
        )));
    }
    let classes = branch_logits.len() / branches;
    if label >= classes {
        return Err(Error::Dimension(format!("label {label} out of range for {classes} classes")));
    }
    let mut g = Graph::<f64>::new();
    let logits = branch_logits
        .chunks_exact(classes)
        .map(|z| g.constant(row(z)?))
        .collect::<Result<Vec<_>>>()?;
    let scores = g.constant(row(gate_scores)?)?;
    let gate_weights = g.softmax(scores)?;
    let teacher_logits = g.gate_combine(gate_weights, &logits)?;
    let out = ForwardOutputs { branch_logits: logits, gate_weights, teacher_logits };
    let (_, b) = losses::total_loss(&mut g, &out, &[label], t, LossFlags::default())?;
    Ok(Breakdown {
        branch_ce: b.branch_ce,
        teacher_ce: b.teacher_ce,
        kl: b.kl,
        total: b.total,
        teacher_logits: g.value(teacher_logits).data().to_vec(),
        gate: g.value(gate_weights).data().to_vec(),
    })
}

#[wasm_bindgen]
pub fn soften(logits: Vec<f64>, t: f64) -> std::result::Result<Vec<f64>, JsValue> {
    soften_logits(&logits, t).map_err(js)
}

/// JSON `{kl, grad_norm, weighted_grad_norm}`.
#[wasm_bindgen]
pub fn kl_scaling(teacher: Vec<f64>, student: Vec<f64>, t: f64) -> std::result::Result<String, JsValue> {
    let r = kl_scaling_of(&teacher, &student, t).map_err(js)?;
    Ok(serde_json::to_string(&r).expect("serialises"))
}

/// JSON `{branch_ce, teacher_ce, kl, total, teacher_logits, gate}`.
#[wasm_bindgen]
pub fn loss_breakdown(
    branch_logits: Vec<f64>,
    branches: usize,
    gate_scores: Vec<f64>,
    label: usize,
    t: f64,
) -> std::result::Result<String, JsValue> {
    let r = breakdown_of(&branch_logits, branches, &gate_scores, label, t).map_err(js)?;
    Ok(serde_json::to_string(&r).expect("serialises"))
}

//! Finite-difference gradient suite over every differentiable op, layer and
//! loss term. Each entry runs `INSTANCES` random instances with dims <= 8.

use one_core::graph::{BnState, Mode};
use one_core::losses::{self, LossFlags, Temperature};
use one_core::model::{ArchSpec, Layout, MultiBranchModel};
use one_core::nn::{BatchNorm, Layer, LayerDesc, NormConfig};
use one_core::{Graph, ParamStore, Rng};

use super::{gradcheck, gradcheck_pair, rand_positive, randn, weighted_sum};

pub const INSTANCES: u64 = 20;

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn labels(rng: &mut Rng, n: usize, c: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(c)).collect()
}

type Case = fn(u64) -> f64;

fn matmul_case(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (m, k, n) = (dim(&mut rng, 1, 8), dim(&mut rng, 1, 8), dim(&mut rng, 1, 8));
    let mut s = ParamStore::new();
    let a = s.add_param("a", randn(&mut rng, &[m, k], 1.0)).unwrap();
    let b = s.add_param("b", randn(&mut rng, &[k, n], 1.0)).unwrap();
    gradcheck(&mut s, |g, s| {
        let (a, b) = (g.param(s, a)?, g.param(s, b)?);
        let c = g.matmul(a, b)?;
        weighted_sum(g, c, seed)
    })
}

fn binary_case(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (r, c) = (dim(&mut rng, 1, 8), dim(&mut rng, 1, 8));
    let rhs_shape: Vec<usize> = match seed % 3 {
        0 => vec![r, c],
        1 => vec![c],
        _ => vec![1],
    };
    let mut s = ParamStore::new();
    let a = s.add_param("a", randn(&mut rng, &[r, c], 1.0)).unwrap();
    let b = s.add_param("b", rand_positive(&mut rng, &rhs_shape)).unwrap();
    gradcheck(&mut s, |g, s| {
        let (a, b) = (g.param(s, a)?, g.param(s, b)?);
        let x = g.add(a, b)?;
        let y = g.sub(x, b)?;
        let y = g.sub(b, y)?;
        let z = g.mul(y, a)?;
        let q = g.div(z, b)?;
        weighted_sum(g, q, seed)
    })
}

fn unary_case(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let n = dim(&mut rng, 1, 8);
    let mut s = ParamStore::new();
    let x = s.add_param("x", randn(&mut rng, &[n], 1.0)).unwrap();
    let p = s.add_param("p", rand_positive(&mut rng, &[n])).unwrap();
    gradcheck(&mut s, |g, s| {
        let (x, p) = (g.param(s, x)?, g.param(s, p)?);
        let e = g.exp(x)?;
        let l = g.log(p)?;
        let r = g.relu(x)?;
        let c = g.scale(r, 0.7)?;
        let m = g.clamp_min(p, 0.1)?;
        let a = g.add(e, l)?;
        let a = g.add(a, c)?;
        let a = g.mul(a, m)?;
        weighted_sum(g, a, seed)
    })
}

fn reduce_case(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let shape = [dim(&mut rng, 1, 4), dim(&mut rng, 2, 5), dim(&mut rng, 1, 4)];
    let axis = (seed % 3) as usize;
    let mut s = ParamStore::new();
    let x = s.add_param("x", randn(&mut rng, &shape, 1.0)).unwrap();
    gradcheck(&mut s, |g, s| {
        let x = g.param(s, x)?;
        let a = g.sum_axis(x, axis)?;
        let b = g.mean_axis(x, axis)?;
        let c = g.max_axis(x, axis)?;
        let a = weighted_sum(g, a, seed)?;
        let b = weighted_sum(g, b, seed + 1)?;
        let c = weighted_sum(g, c, seed + 2)?;
        let m = g.mean(x)?;
        let t = g.add(a, b)?;
        let t = g.add(t, c)?;
        g.add(t, m)
    })
}

fn softmax_case(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (n, c) = (dim(&mut rng, 1, 8), dim(&mut rng, 2, 8));
    let mut s = ParamStore::new();
    let z = s.add_param("z", randn(&mut rng, &[n, c], 2.0)).unwrap();
    gradcheck(&mut s, |g, s| {
        let z = g.param(s, z)?;
        let p = losses::softmax(g, z)?;
        let lp = g.log_softmax(z)?;
        let a = weighted_sum(g, p, seed)?;
        let b = weighted_sum(g, lp, seed + 7)?;
        g.add(a, b)
    })
}

fn cross_entropy_case(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (n, c) = (dim(&mut rng, 1, 8), dim(&mut rng, 2, 8));
    let y = labels(&mut rng, n, c);
    let mut s = ParamStore::new();
    let z = s.add_param("z", randn(&mut rng, &[n, c], 2.0)).unwrap();
    gradcheck(&mut s, |g, s| {
        let z = g.param(s, z)?;
        let fused = losses::softmax_cross_entropy(g, z, &y)?;
        let p = losses::softmax(g, z)?;
        let composed = losses::cross_entropy(g, p, &y)?;
        g.add(fused, composed)
    })
}

fn soft_target_case(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (n, c) = (dim(&mut rng, 1, 8), dim(&mut rng, 2, 8));
    let t = Temperature::new(0.5 + 4.0 * rng.uniform()).unwrap();
    let mut s = ParamStore::new();
    let z = s.add_param("z", randn(&mut rng, &[n, c], 2.0)).unwrap();
    gradcheck(&mut s, |g, s| {
        let z = g.param(s, z)?;
        let p = losses::soft_targets(g, z, t)?;
        weighted_sum(g, p, seed)
    })
}

fn kl_detached_case(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (n, c, k) = (dim(&mut rng, 1, 8), dim(&mut rng, 2, 8), dim(&mut rng, 1, 4));
    let t = Temperature::new(1.0 + 4.0 * rng.uniform()).unwrap();
    let teacher = randn(&mut rng, &[n, c], 2.0);
    let mut s = ParamStore::new();
    let zs: Vec<_> = (0..k).map(|i| s.add_param(format!("z{i}"), randn(&mut rng, &[n, c], 2.0)).unwrap()).collect();
    gradcheck(&mut s, |g, s| {
        let ze = g.constant(teacher.clone())?;
        let z: Vec<_> = zs.iter().map(|&id| g.param(s, id)).collect::<Result<_, _>>()?;
        let fused = losses::kl_distill_logits(g, ze, &z, t, false)?;
        let pe = losses::soft_targets(g, ze, t)?;
        let ps: Vec<_> = z.iter().map(|&v| losses::soft_targets(g, v, t)).collect::<Result<_, _>>()?;
        let composed = losses::kl_distill(g, pe, &ps)?;
        g.add(fused, composed)
    })
}

fn kl_coupled_case(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (n, c) = (dim(&mut rng, 1, 8), dim(&mut rng, 2, 8));
    let t = Temperature::new(1.0 + 4.0 * rng.uniform()).unwrap();
    let mut s = ParamStore::new();
    let ze = s.add_param("ze", randn(&mut rng, &[n, c], 2.0)).unwrap();
    let z1 = s.add_param("z1", randn(&mut rng, &[n, c], 2.0)).unwrap();
    gradcheck(&mut s, |g, s| {
        let (ze, z1) = (g.param(s, ze)?, g.param(s, z1)?);
        let fused = losses::kl_distill_logits(g, ze, &[z1], t, true)?;
        let pe = losses::soft_targets(g, ze, t)?;
        let p1 = losses::soft_targets(g, z1, t)?;
        let composed = losses::kl_divergence(g, pe, p1)?;
        g.add(fused, composed)
    })
}

fn conv_case(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (n, c, co) = (dim(&mut rng, 1, 3), dim(&mut rng, 1, 3), dim(&mut rng, 1, 4));
    let k = if seed % 2 == 0 { 3 } else { 1 + 2 * rng.below(2) };
    let stride = 1 + rng.below(2);
    let pad = rng.below(2);
    let (h, w) = (dim(&mut rng, k.max(2), 7), dim(&mut rng, k.max(2), 7));
    let mut s = ParamStore::new();
    let x = s.add_param("x", randn(&mut rng, &[n, c, h, w], 1.0)).unwrap();
    let wt = s.add_param("w", randn(&mut rng, &[co, c, k, k], 1.0)).unwrap();
    let b = s.add_param("b", randn(&mut rng, &[co], 1.0)).unwrap();
    let with_bias = seed % 3 != 0;
    gradcheck(&mut s, |g, s| {
        let (x, wt, b) = (g.param(s, x)?, g.param(s, wt)?, g.param(s, b)?);
        let y = g.conv2d(x, wt, if with_bias { Some(b) } else { None }, stride, pad)?;
        // keeps b in the objective when the conv itself has no bias
        let extra = g.sum(b)?;
        let main = weighted_sum(g, y, seed)?;
        g.add(main, extra)
    })
}

fn pool_case(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let shape = [dim(&mut rng, 1, 3), dim(&mut rng, 1, 3), dim(&mut rng, 2, 8), dim(&mut rng, 2, 8)];
    let mut s = ParamStore::new();
    let x = s.add_param("x", randn(&mut rng, &shape, 1.0)).unwrap();
    gradcheck(&mut s, |g, s| {
        let x = g.param(s, x)?;
        let m = g.max_pool2d(x, 2, 2)?;
        let a = g.global_avg_pool(x)?;
        let m = weighted_sum(g, m, seed)?;
        let a = weighted_sum(g, a, seed + 3)?;
        g.add(m, a)
    })
}

fn batchnorm_case(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let n = dim(&mut rng, 2, 6);
    let c = dim(&mut rng, 1, 4);
    let shape: Vec<usize> = if seed % 2 == 0 { vec![n, c] } else { vec![n, c, dim(&mut rng, 1, 4), dim(&mut rng, 1, 4)] };
    let mode = if seed % 4 < 3 { Mode::Train } else { Mode::Eval };
    let mut s = ParamStore::new();
    let bn = BatchNorm::build("bn", c, NormConfig::default(), &mut s).unwrap();
    *s.value_mut(bn.gamma) = randn(&mut rng, &[c], 1.0);
    *s.value_mut(bn.beta) = randn(&mut rng, &[c], 1.0);
    *s.buffer_mut(bn.running_mean) = randn(&mut rng, &[c], 1.0);
    *s.buffer_mut(bn.running_var) = rand_positive(&mut rng, &[c]);
    let x = s.add_param("x", randn(&mut rng, &shape, 2.0)).unwrap();
    gradcheck(&mut s, |g, s| {
        let xv = g.param(s, x)?;
        let gamma = g.param(s, bn.gamma)?;
        let beta = g.param(s, bn.beta)?;
        let st = BnState {
            running_mean: s.buffer(bn.running_mean),
            running_var: s.buffer(bn.running_var),
            ids: (bn.running_mean, bn.running_var),
            eps: 1e-5,
            momentum: 0.9,
        };
        let y = g.batch_norm(xv, gamma, beta, st, mode)?;
        weighted_sum(g, y, seed)
    })
}

fn linear_case(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (n, i, o) = (dim(&mut rng, 1, 8), dim(&mut rng, 1, 8), dim(&mut rng, 1, 8));
    let mut s = ParamStore::new();
    let layer = Layer::build(&LayerDesc::Linear { in_features: i, out_features: o, bias: true }, "fc", NormConfig::default(), &mut s, &rng).unwrap();
    if let Layer::Linear(l) = &layer {
        *s.value_mut(l.bias.unwrap()) = randn(&mut rng, &[o], 1.0);
    }
    let x = s.add_param("x", randn(&mut rng, &[n, i], 1.0)).unwrap();
    gradcheck(&mut s, |g, s| {
        let xv = g.param(s, x)?;
        let y = layer.forward(g, s, xv, Mode::Train)?;
        weighted_sum(g, y, seed)
    })
}

fn gate_case(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (n, c, k) = (dim(&mut rng, 1, 8), dim(&mut rng, 1, 8), dim(&mut rng, 2, 5));
    let mut s = ParamStore::new();
    let gate = s.add_param("g", randn(&mut rng, &[n, k], 1.0)).unwrap();
    let zs: Vec<_> = (0..k).map(|i| s.add_param(format!("z{i}"), randn(&mut rng, &[n, c], 1.0)).unwrap()).collect();
    gradcheck(&mut s, |g, s| {
        let gv = g.param(s, gate)?;
        let gw = g.softmax(gv)?;
        let z: Vec<_> = zs.iter().map(|&id| g.param(s, id)).collect::<Result<_, _>>()?;
        let ze = g.gate_combine(gw, &z)?;
        weighted_sum(g, ze, seed)
    })
}

fn tiny_model(seed: u64, layout: Layout) -> MultiBranchModel<f64> {
    let arch = ArchSpec::desk([1, 4, 4], 3, &[2], 2);
    MultiBranchModel::build(&arch, layout, seed).unwrap()
}

fn model_loss_case(seed: u64, flags: LossFlags) -> f64 {
    let mut rng = Rng::new(seed);
    let n = dim(&mut rng, 2, 4);
    let model = tiny_model(seed, Layout::one(1 + (seed % 2) as usize));
    let x = randn(&mut rng, &[n, 1, 4, 4], 1.0);
    let y = labels(&mut rng, n, 3);
    let t = Temperature::new(3.0).unwrap();
    // A detached teacher is a stop-gradient: the matching finite-difference
    // objective holds the teacher logits at their unperturbed value inside
    // the KL term.
    let frozen_teacher = {
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let out = model.forward(&mut g, xv, Mode::Train).unwrap();
        g.value(out.teacher_logits).clone()
    };
    let mut store = model.store().clone();
    let with_model = |s: &ParamStore<f64>| {
        let mut m = model.clone();
        *m.store_mut() = s.clone();
        m
    };
    let library = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let m = with_model(s);
        let xv = g.constant(x.clone())?;
        let out = m.forward(g, xv, Mode::Train)?;
        Ok(losses::total_loss(g, &out, &y, t, flags)?.0)
    };
    if flags.kl_backprop_teacher || flags.no_distill {
        return gradcheck(&mut store, library);
    }
    let frozen = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let m = with_model(s);
        let xv = g.constant(x.clone())?;
        let out = m.forward(g, xv, Mode::Train)?;
        let mut total = g.softmax_cross_entropy(out.teacher_logits, &y)?;
        for &z in &out.branch_logits {
            let ce = g.softmax_cross_entropy(z, &y)?;
            total = g.add(total, ce)?;
        }
        let ze = g.constant(frozen_teacher.clone())?;
        let kl = losses::kl_distill_logits(g, ze, &out.branch_logits, t, false)?;
        let kl = g.scale(kl, t.value() * t.value())?;
        g.add(total, kl)
    };
    gradcheck_pair(&mut store, library, frozen)
}

fn total_loss_case(seed: u64) -> f64 {
    model_loss_case(seed, LossFlags::default())
}

fn total_loss_coupled_case(seed: u64) -> f64 {
    model_loss_case(seed, LossFlags { no_distill: false, kl_backprop_teacher: true })
}

fn total_loss_no_distill_case(seed: u64) -> f64 {
    model_loss_case(seed, LossFlags { no_distill: true, kl_backprop_teacher: false })
}

pub fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("matmul", matmul_case as Case),
        ("add/sub/mul/div (broadcast)", binary_case),
        ("exp/log/relu/scale/clamp", unary_case),
        ("sum/mean/max reductions", reduce_case),
        ("softmax/log_softmax", softmax_case),
        ("cross-entropy (fused + composed)", cross_entropy_case),
        ("temperature soft targets", soft_target_case),
        ("kl distillation (detached teacher)", kl_detached_case),
        ("kl distillation (coupled teacher)", kl_coupled_case),
        ("conv2d", conv_case),
        ("max_pool/global_avg_pool", pool_case),
        ("batch_norm", batchnorm_case),
        ("linear", linear_case),
        ("gate combine", gate_case),
        ("total loss through model", total_loss_case),
        ("total loss, coupled kl", total_loss_coupled_case),
        ("total loss, no distillation", total_loss_no_distill_case),
    ]
}

/// Worst relative error per case over all instances.
pub fn run() -> Vec<(&'static str, f64)> {
    cases()
        .into_iter()
        .map(|(name, case)| {
            let worst = (0..INSTANCES).map(case).fold(0.0f64, f64::max);
            (name, worst)
        })
        .collect()
}

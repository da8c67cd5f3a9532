//! Epoch loop for the multi-branch model and for the baselines: plain
//! cross-entropy training, two-phase offline distillation and independent
//! ensembles.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::checkpoint::{self, Checkpoint, TrainState};
use crate::config::{DatasetKind, TrainConfig};
use crate::data::{self, BatchIterator, Dataset, Split, DATA_ROOT_ENV};
use crate::error::{Error, Result};
use crate::flops;
use crate::graph::{Graph, Mode};
use crate::losses::{self, Temperature};
use crate::metrics::{topk_errors, MetricsRecord, Phase};
use crate::model::{Layout, MultiBranchModel, SingleNet};
use crate::optim::{sgd_nesterov_step, LrSchedule, OptimizerState, SgdConfig};
use crate::tensor::Tensor;

/// Seed of the stratified subsets, fixed so every run sees the same data.
pub const SUBSET_SEED: u64 = 0;

#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Resolves the dataset root: explicit value, then `ONE_DATA_ROOT`, then
/// `./data`.
pub fn data_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Loads both splits, takes the configured subsets and normalises with
/// train-split statistics.
pub fn prepare_data(cfg: &TrainConfig) -> Result<TrainData> {
    let root = data_root(cfg.data_root.as_deref());
    let (train, test) = match cfg.dataset {
        DatasetKind::Mnist => (data::load_mnist(&root, Split::Train)?, data::load_mnist(&root, Split::Test)?),
        DatasetKind::Cifar10 => (data::load_cifar10(&root, Split::Train)?, data::load_cifar10(&root, Split::Test)?),
    };
    prepare_from(cfg, train, test)
}

pub fn prepare_from(cfg: &TrainConfig, train: Dataset, test: Dataset) -> Result<TrainData> {
    let mut train = if cfg.train_subset > 0 { train.subset(cfg.train_subset, SUBSET_SEED)? } else { train };
    let mut test = if cfg.test_subset > 0 { test.subset(cfg.test_subset, SUBSET_SEED)? } else { test };
    data::normalise_pair(&mut train, &mut test)?;
    Ok(TrainData { train, test })
}

/// Where and how often to write checkpoints and where to send rows.
#[derive(Default)]
pub struct RunHooks<'a> {
    pub checkpoint_dir: Option<PathBuf>,
    /// File stem for checkpoints, e.g. `one` gives `one.ckpt`.
    pub tag: String,
    pub on_record: Option<&'a mut dyn FnMut(&MetricsRecord) -> Result<()>>,
    /// Stop after this many epochs in this call (for interrupted runs).
    pub stop_after: Option<usize>,
}

impl RunHooks<'_> {
    fn emit(&mut self, r: &MetricsRecord) -> Result<()> {
        match self.on_record.as_mut() {
            Some(f) => f(r),
            None => Ok(()),
        }
    }

    pub fn final_path(&self) -> Option<PathBuf> {
        self.checkpoint_dir.as_ref().map(|d| d.join(format!("{}.ckpt", self.tag)))
    }

    pub fn state_path(&self) -> Option<PathBuf> {
        self.checkpoint_dir.as_ref().map(|d| d.join(format!("{}-state.ckpt", self.tag)))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub records: Vec<MetricsRecord>,
    /// Total training FLOPs including any teacher phase.
    pub train_flops: u64,
    /// Wall-clock seconds per epoch; kept out of the metric rows so those
    /// stay reproducible.
    pub epoch_seconds: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
struct CheckpointMeta<'a> {
    method: &'a str,
    config: &'a TrainConfig,
}

fn meta_json(method: &str, cfg: &TrainConfig) -> String {
    serde_json::to_string(&CheckpointMeta { method, config: cfg }).expect("meta serialises")
}

enum Objective<'a> {
    /// Branch CEs + teacher CE + T^2 KL.
    One,
    /// CE of the single branch.
    Vanilla,
    /// CE + T^2 KL against a frozen teacher network.
    Distill(&'a SingleNet<f32>),
}

/// Per-head accuracy and loss over a dataset in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadEval {
    pub head: String,
    pub top1_err: f64,
    pub top5_err: f64,
    pub ce: f64,
}

fn eval_scores(name: String, scores: &[Tensor<f32>], labels: &[usize], classes: usize) -> Result<HeadEval> {
    let mut w1 = 0;
    let mut w5 = 0;
    let mut ce = 0.0;
    let mut off = 0;
    for s in scores {
        let n = s.rows();
        let y = &labels[off..off + n];
        let (a, b) = topk_errors(s.data(), classes, y, 5);
        w1 += a;
        w5 += b;
        let p = losses::softmax_tensor(s, 1.0);
        for (row, &l) in p.data().chunks_exact(classes).zip(y) {
            ce -= (row[l] as f64).max(crate::graph::PROB_FLOOR).ln();
        }
        off += n;
    }
    let n = labels.len() as f64;
    Ok(HeadEval { head: name, top1_err: 100.0 * w1 as f64 / n, top5_err: 100.0 * w5 as f64 / n, ce: ce / n })
}

/// Eval-mode metrics for every branch (`branch{i}`) and, with more than one
/// branch, the gated teacher (`teacher`).
pub fn evaluate(model: &MultiBranchModel<f32>, data: &Dataset, batch_size: usize) -> Result<Vec<HeadEval>> {
    let k = model.branch_count();
    let mut branch: Vec<Vec<Tensor<f32>>> = vec![Vec::new(); k];
    let mut teacher = Vec::new();
    for b in data::eval_batches(data, batch_size) {
        let p = model.predict(&b.images)?;
        for (i, z) in p.branch_logits.into_iter().enumerate() {
            branch[i].push(z);
        }
        teacher.push(p.teacher_logits);
    }
    let c = model.num_classes();
    let mut out = branch
        .iter()
        .enumerate()
        .map(|(i, s)| eval_scores(format!("branch{i}"), s, &data.labels, c))
        .collect::<Result<Vec<_>>>()?;
    if k > 1 {
        out.push(eval_scores("teacher".into(), &teacher, &data.labels, c)?);
    }
    Ok(out)
}

/// Eval-mode metrics of the stripped deployment network.
pub fn evaluate_single(net: &SingleNet<f32>, data: &Dataset, batch_size: usize, head: &str) -> Result<HeadEval> {
    let scores = data::eval_batches(data, batch_size).map(|b| net.predict(&b.images)).collect::<Result<Vec<_>>>()?;
    eval_scores(head.into(), &scores, &data.labels, net.arch().num_classes)
}

/// Averaged-softmax ensemble of several networks.
pub fn evaluate_ensemble(nets: &[SingleNet<f32>], data: &Dataset, batch_size: usize) -> Result<HeadEval> {
    if nets.is_empty() {
        return Err(Error::config("empty ensemble"));
    }
    let mut scores = Vec::new();
    for b in data::eval_batches(data, batch_size) {
        let mut avg: Option<Tensor<f32>> = None;
        for net in nets {
            let p = losses::softmax_tensor(&net.predict(&b.images)?, 1.0);
            match avg.as_mut() {
                Some(a) => a.add_assign(&p),
                None => avg = Some(p),
            }
        }
        let inv = 1.0 / nets.len() as f32;
        // log of the averaged posterior keeps the CE computation shared
        scores.push(avg.expect("non-empty").map(|v| (v * inv).max(1e-30).ln()));
    }
    eval_scores("ensemble".into(), &scores, &data.labels, nets[0].arch().num_classes)
}

fn check_data(model: &MultiBranchModel<f32>, data: &TrainData) -> Result<()> {
    for ds in [&data.train, &data.test] {
        if ds.sample_shape() != model.arch().input {
            return Err(Error::config(format!(
                "dataset samples are {:?}, architecture expects {:?}",
                ds.sample_shape(),
                model.arch().input
            )));
        }
        if ds.num_classes != model.num_classes() {
            return Err(Error::config(format!(
                "dataset has {} classes, architecture {}",
                ds.num_classes,
                model.num_classes()
            )));
        }
    }
    Ok(())
}

/// Core epoch loop shared by all methods.
#[allow(clippy::too_many_arguments)]
fn fit(
    model: &mut MultiBranchModel<f32>,
    cfg: &TrainConfig,
    data: &TrainData,
    objective: Objective<'_>,
    method: &str,
    mut state: TrainState,
    flops_offset: u64,
    hooks: &mut RunHooks<'_>,
) -> Result<(Vec<MetricsRecord>, u64, Vec<f64>)> {
    check_data(model, data)?;
    let schedule = LrSchedule::new(cfg.lr, cfg.epochs)?;
    let sgd = SgdConfig { momentum: cfg.momentum, weight_decay: cfg.weight_decay };
    let t = Temperature::new(cfg.temperature)?;
    let flags = cfg.flags.loss();
    let mut per_sample = flops::train_step_flops(model.arch(), model.layout())?;
    if let Objective::Distill(teacher) = objective {
        per_sample += flops::forward_flops(teacher.arch(), Layout::single())?;
    }
    let heads = model.branch_count();
    let with_teacher = matches!(objective, Objective::One);
    let meta = meta_json(method, cfg);
    let mut records = Vec::new();
    let mut seconds = Vec::new();
    let start_epoch = state.next_epoch;
    let mut samples = start_epoch as u64 * trained_per_epoch(data.train.len(), cfg.batch_size) as u64;

    for epoch in start_epoch..cfg.epochs {
        if hooks.stop_after.is_some_and(|n| epoch - start_epoch >= n) {
            break;
        }
        let started = Instant::now();
        let lr = schedule.lr_at(epoch)?;
        let mut sum_ce = vec![0.0; heads + 1];
        let mut wrong = vec![0usize; heads + 1];
        let mut wrong5 = vec![0usize; heads + 1];
        let (mut sum_total, mut sum_kl, mut batches, mut seen) = (0.0, 0.0, 0usize, 0usize);
        for batch in BatchIterator::new(&data.train, cfg.batch_size, cfg.seed, epoch, cfg.augment)? {
            let n = batch.labels.len();
            if n < 2 {
                continue;
            }
            let mut g = Graph::new();
            let teacher_logits = match objective {
                Objective::Distill(teacher) => Some(teacher.predict(&batch.images)?),
                _ => None,
            };
            let x = g.constant(batch.images)?;
            let (root, logits, breakdown) = match objective {
                Objective::One => {
                    let out = model.forward(&mut g, x, Mode::Train)?;
                    let (root, b) = losses::total_loss(&mut g, &out, &batch.labels, t, flags)?;
                    let mut l = out.branch_logits.clone();
                    l.push(out.teacher_logits);
                    (root, l, b)
                }
                Objective::Vanilla => {
                    let z = model.forward_target(&mut g, x, Mode::Train)?;
                    let ce = g.softmax_cross_entropy(z, &batch.labels)?;
                    let v = g.value(ce).item() as f64;
                    (ce, vec![z], losses::LossBreakdown { branch_ce: vec![v], teacher_ce: 0.0, kl: 0.0, total: v })
                }
                Objective::Distill(_) => {
                    let z = model.forward_target(&mut g, x, Mode::Train)?;
                    let ce = g.softmax_cross_entropy(z, &batch.labels)?;
                    let zt = g.constant(teacher_logits.expect("teacher pass"))?;
                    let kl = losses::kl_distill_logits(&mut g, zt, &[z], t, false)?;
                    let scaled = g.scale(kl, (t.value() * t.value()) as f32)?;
                    let root = g.add(ce, scaled)?;
                    let b = losses::LossBreakdown {
                        branch_ce: vec![g.value(ce).item() as f64],
                        teacher_ce: 0.0,
                        kl: g.value(kl).item() as f64,
                        total: g.value(root).item() as f64,
                    };
                    (root, vec![z], b)
                }
            };
            for (i, &z) in logits.iter().enumerate() {
                let (a, b) = topk_errors(g.value(z).data(), model.num_classes(), &batch.labels, 5);
                wrong[i] += a;
                wrong5[i] += b;
            }
            for (i, ce) in breakdown.branch_ce.iter().enumerate() {
                sum_ce[i] += ce;
            }
            sum_ce[heads] += breakdown.teacher_ce;
            sum_total += breakdown.total;
            sum_kl += breakdown.kl;
            batches += 1;
            seen += n;

            model.store_mut().zero_grad();
            g.backward(root, model.store_mut())?;
            model.absorb_bn_updates(&mut g);
            sgd_nesterov_step(model.store_mut(), &mut state.optimizer, lr, sgd)?;
        }
        if batches == 0 {
            return Err(Error::config("training split yields no batch of at least two samples"));
        }
        samples += seen as u64;
        let cum = flops_offset + samples * per_sample;
        let nb = batches as f64;
        let mut emit = |r: MetricsRecord| -> Result<()> {
            hooks.emit(&r)?;
            records.push(r);
            Ok(())
        };
        let shown = if with_teacher { heads + 1 } else { heads };
        for i in 0..shown {
            emit(MetricsRecord {
                epoch,
                phase: Phase::Train,
                head: if i == heads { "teacher".into() } else { format!("branch{i}") },
                top1_err: 100.0 * wrong[i] as f64 / seen as f64,
                top5_err: 100.0 * wrong5[i] as f64 / seen as f64,
                ce: sum_ce[i] / nb,
                loss_total: sum_total / nb,
                loss_kl: sum_kl / nb,
                lr,
                train_flops: cum,
            })?;
        }
        for h in evaluate(model, &data.test, cfg.eval_batch_size)? {
            emit(MetricsRecord {
                epoch,
                phase: Phase::Test,
                head: h.head,
                top1_err: h.top1_err,
                top5_err: h.top5_err,
                ce: h.ce,
                loss_total: f64::NAN,
                loss_kl: f64::NAN,
                lr,
                train_flops: cum,
            })?;
        }
        state.next_epoch = epoch + 1;
        seconds.push(started.elapsed().as_secs_f64());
        let due = cfg.checkpoint_every > 0 && state.next_epoch % cfg.checkpoint_every == 0;
        if let Some(p) = hooks.state_path() {
            if due || state.next_epoch == cfg.epochs {
                checkpoint::save(&p, model, cfg.seed, &meta, Some(&state))?;
            }
        }
    }
    if state.next_epoch == cfg.epochs {
        if let Some(p) = hooks.final_path() {
            checkpoint::save(&p, model, cfg.seed, &meta, None)?;
        }
    }
    let total = flops_offset + samples * per_sample;
    Ok((records, total, seconds))
}

fn trained_per_epoch(n: usize, batch: usize) -> usize {
    if n % batch == 1 {
        n - 1
    } else {
        n
    }
}

fn fresh_state(model: &MultiBranchModel<f32>) -> TrainState {
    TrainState { next_epoch: 0, optimizer: OptimizerState::new(model.store()) }
}

/// Trains the full multi-branch model with the combined objective.
pub fn train_one(cfg: &TrainConfig, data: &TrainData, hooks: &mut RunHooks<'_>) -> Result<TrainOutcome<MultiBranchModel<f32>>> {
    cfg.validate()?;
    let mut model = MultiBranchModel::build(&cfg.arch(), cfg.layout(), cfg.seed)?;
    let state = fresh_state(&model);
    let (records, train_flops, epoch_seconds) = fit(&mut model, cfg, data, Objective::One, "one", state, 0, hooks)?;
    Ok(TrainOutcome { model, records, train_flops, epoch_seconds })
}

/// Continues a run from a train-state checkpoint written by [`train_one`]
/// or [`train_vanilla`]. The finished run is bit-identical to an
/// uninterrupted one.
pub fn resume(cfg: &TrainConfig, data: &TrainData, ckpt: Checkpoint, hooks: &mut RunHooks<'_>) -> Result<TrainOutcome<MultiBranchModel<f32>>> {
    cfg.validate()?;
    let state = ckpt.train_state.ok_or_else(|| Error::Checkpoint("checkpoint has no training state".into()))?;
    let mut model = ckpt.model;
    let method = if model.layout() == Layout::single() { "vanilla" } else { "one" };
    let objective = if method == "one" { Objective::One } else { Objective::Vanilla };
    let (records, train_flops, epoch_seconds) = fit(&mut model, cfg, data, objective, method, state, 0, hooks)?;
    Ok(TrainOutcome { model, records, train_flops, epoch_seconds })
}

/// Plain cross-entropy training of the single deployment network.
pub fn train_vanilla(cfg: &TrainConfig, data: &TrainData, hooks: &mut RunHooks<'_>) -> Result<TrainOutcome<SingleNet<f32>>> {
    cfg.validate()?;
    train_single(cfg, &cfg.arch(), data, None, hooks, 0, "vanilla")
}

fn train_single(
    cfg: &TrainConfig,
    arch: &crate::model::ArchSpec,
    data: &TrainData,
    teacher: Option<&SingleNet<f32>>,
    hooks: &mut RunHooks<'_>,
    flops_offset: u64,
    method: &str,
) -> Result<TrainOutcome<SingleNet<f32>>> {
    let mut model = MultiBranchModel::build(arch, Layout::single(), cfg.seed)?;
    let state = fresh_state(&model);
    let objective = teacher.map_or(Objective::Vanilla, Objective::Distill);
    let (records, train_flops, epoch_seconds) = fit(&mut model, cfg, data, objective, method, state, flops_offset, hooks)?;
    Ok(TrainOutcome { model: SingleNet::from_model(model)?, records, train_flops, epoch_seconds })
}

/// Two-phase distillation: a wider teacher (`teacher_*` channels) is
/// trained with cross-entropy, then the student is trained with
/// `CE + T^2 KL(teacher || student)`. The returned FLOPs cover both phases.
pub fn train_kd_offline(cfg: &TrainConfig, data: &TrainData, hooks: &mut RunHooks<'_>) -> Result<(TrainOutcome<SingleNet<f32>>, SingleNet<f32>)> {
    cfg.validate()?;
    let mut teacher_hooks = RunHooks {
        checkpoint_dir: hooks.checkpoint_dir.clone(),
        tag: format!("{}-teacher", hooks.tag),
        on_record: None,
        stop_after: None,
    };
    let teacher = train_single(cfg, &cfg.teacher_arch(), data, None, &mut teacher_hooks, 0, "kd-teacher")?;
    let mut student = train_single(cfg, &cfg.arch(), data, Some(&teacher.model), hooks, teacher.train_flops, "kd")?;
    let mut records = teacher.records.clone();
    for r in &mut records {
        r.head = format!("kd_teacher_{}", r.head);
    }
    records.append(&mut student.records);
    student.records = records;
    Ok((student, teacher.model))
}

/// `n` networks trained with cross-entropy from seeds `seed .. seed + n`,
/// evaluated individually and as an averaged-softmax ensemble.
pub fn train_indep_ensemble(cfg: &TrainConfig, n: usize, data: &TrainData, hooks: &mut RunHooks<'_>) -> Result<TrainOutcome<Vec<SingleNet<f32>>>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::config("ensemble needs at least one network"));
    }
    let mut nets = Vec::with_capacity(n);
    let mut records = Vec::new();
    let mut total = 0;
    let mut seconds = Vec::new();
    for i in 0..n {
        let mut c = cfg.clone();
        c.seed = cfg.seed + i as u64;
        let mut sub = RunHooks {
            checkpoint_dir: hooks.checkpoint_dir.clone(),
            tag: format!("{}-net{i}", hooks.tag),
            on_record: None,
            stop_after: None,
        };
        let out = train_single(&c, &c.arch(), data, None, &mut sub, total, "vanilla")?;
        for mut r in out.records {
            r.head = format!("net{i}");
            hooks.emit(&r)?;
            records.push(r);
        }
        total = out.train_flops;
        seconds.extend(out.epoch_seconds);
        nets.push(out.model);
    }
    let e = evaluate_ensemble(&nets, &data.test, cfg.eval_batch_size)?;
    let last = cfg.epochs - 1;
    let r = MetricsRecord {
        epoch: last,
        phase: Phase::Test,
        head: e.head,
        top1_err: e.top1_err,
        top5_err: e.top5_err,
        ce: e.ce,
        loss_total: f64::NAN,
        loss_kl: f64::NAN,
        lr: LrSchedule::new(cfg.lr, cfg.epochs)?.lr_at(last)?,
        train_flops: total,
    };
    hooks.emit(&r)?;
    records.push(r);
    Ok(TrainOutcome { model: nets, records, train_flops: total, epoch_seconds: seconds })
}

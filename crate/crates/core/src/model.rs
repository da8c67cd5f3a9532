//! Multi-branch network: shared trunk, identical branches with their own
//! classifiers, and a gate head that mixes branch logits into the ensemble
//! teacher.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::graph::{Graph, Mode, Var};
use crate::nn::{BatchNorm, BlockSpec, LayerDesc, NormConfig, Stack};
use crate::params::ParamStore;
use crate::rng::{fnv1a64, Rng};
use crate::tensor::Tensor;

/// Architecture of one deployable network: trunk followed by one branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// Per-sample input shape `[C, H, W]`.
    pub input: [usize; 3],
    pub num_classes: usize,
    pub trunk: BlockSpec,
    pub branch: BlockSpec,
    #[serde(default)]
    pub norm: NormConfig,
}

impl ArchSpec {
    /// Small CPU-scale reference net: two conv-BN-ReLU-pool trunk stages and
    /// a conv-BN-ReLU branch with global pooling and a linear classifier.
    pub fn desk(input: [usize; 3], num_classes: usize, trunk_channels: &[usize], branch_channels: usize) -> Self {
        let mut trunk = Vec::new();
        let mut c = input[0];
        for &out in trunk_channels {
            trunk.extend(BlockSpec::conv_bn_relu(c, out, true));
            c = out;
        }
        let mut branch = BlockSpec::conv_bn_relu(c, branch_channels, false);
        branch.push(LayerDesc::GlobalAvgPool);
        branch.push(LayerDesc::Linear { in_features: branch_channels, out_features: num_classes, bias: true });
        ArchSpec {
            input,
            num_classes,
            trunk: BlockSpec::new(trunk),
            branch: BlockSpec::new(branch),
            norm: NormConfig::default(),
        }
    }

    pub fn trunk_output(&self) -> Result<Vec<usize>> {
        self.trunk.output_shape(&self.input)
    }

    /// Validates the trunk/branch hand-off and the classifier width.
    pub fn validate(&self) -> Result<()> {
        let t = self.trunk_output()?;
        let out = self
            .branch
            .output_shape(&t)
            .map_err(|e| Error::config(format!("branch does not accept trunk output {t:?}: {e}")))?;
        if out != [self.num_classes] {
            return Err(Error::config(format!("branch emits {out:?}, expected [{}]", self.num_classes)));
        }
        Ok(())
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(serde_json::to_string(self).expect("arch serialises").as_bytes())
    }
}

/// How many branches exist and which components are shared or present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    /// Total branches, `m + 1`.
    pub branches: usize,
    /// `false` gives every branch its own trunk copy.
    pub shared_trunk: bool,
    /// `false` replaces the learned gate with uniform weights.
    pub gated: bool,
}

impl Layout {
    pub fn one(m: usize) -> Self {
        Layout { branches: m + 1, shared_trunk: true, gated: true }
    }

    pub fn single() -> Self {
        Layout { branches: 1, shared_trunk: true, gated: false }
    }
}

/// FC -> BN -> ReLU -> softmax over one score per branch, fed by globally
/// pooled trunk features.
#[derive(Clone, Debug)]
pub struct GateHead {
    pub fc: crate::params::ParamId,
    pub bn: BatchNorm,
}

impl GateHead {
    fn build<F: Float>(feature_dim: usize, branches: usize, norm: NormConfig, store: &mut ParamStore<F>, rng: &Rng) -> Result<Self> {
        let name = "gate.fc.weight";
        let std = (2.0 / feature_dim as f64).sqrt();
        let mut r = rng.derive_named(name);
        let w = (0..feature_dim * branches).map(|_| F::cast(r.normal() * std)).collect();
        let fc = store.add_param(name, Tensor::new(vec![feature_dim, branches], w)?)?;
        let bn = BatchNorm::build("gate.bn", branches, norm, store)?;
        Ok(GateHead { fc, bn })
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, store: &ParamStore<F>, features: Var, mode: Mode) -> Result<Var> {
        let pooled = if g.shape(features).len() == 4 { g.global_avg_pool(features)? } else { features };
        let w = g.param(store, self.fc)?;
        let s = g.matmul(pooled, w)?;
        let s = self.bn.forward(g, store, s, mode)?;
        let s = g.relu(s)?;
        g.softmax(s)
    }
}

/// Per-batch outputs of the full model.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    /// `z_i`, each `N x C`; index 0 is the deployment branch.
    pub branch_logits: Vec<Var>,
    /// `N x (m+1)`, rows on the simplex.
    pub gate_weights: Var,
    /// Gate-weighted sum of branch logits, `N x C`.
    pub teacher_logits: Var,
}

#[derive(Clone, Debug)]
pub struct MultiBranchModel<F: Float = f32> {
    arch: ArchSpec,
    layout: Layout,
    trunks: Vec<Stack>,
    branches: Vec<Stack>,
    gate: Option<GateHead>,
    store: ParamStore<F>,
}

fn trunk_prefix(i: usize) -> String {
    if i == 0 {
        "trunk".to_string()
    } else {
        format!("trunk{i}")
    }
}

impl<F: Float> MultiBranchModel<F> {
    /// Builds `layout.branches` independently initialised branches on a
    /// shared (or per-branch) trunk. Initialisation is keyed by
    /// `(seed, parameter name)`, so branch 0 and the trunk of a single net
    /// built with the same seed start from identical weights.
    pub fn build(arch: &ArchSpec, layout: Layout, seed: u64) -> Result<Self> {
        if layout.branches == 0 {
            return Err(Error::config("at least one branch is required"));
        }
        if layout.gated && layout.branches < 2 {
            return Err(Error::config("a gate needs at least two branches (m >= 1)"));
        }
        arch.validate()?;
        let rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let trunk_count = if layout.shared_trunk { 1 } else { layout.branches };
        let trunks = (0..trunk_count)
            .map(|i| Stack::build(&arch.trunk, &trunk_prefix(i), arch.norm, &mut store, &rng))
            .collect::<Result<Vec<_>>>()?;
        let branches = (0..layout.branches)
            .map(|i| Stack::build(&arch.branch, &format!("branch{i}"), arch.norm, &mut store, &rng))
            .collect::<Result<Vec<_>>>()?;
        let gate = if layout.gated {
            let feat = arch.trunk_output()?[0];
            Some(GateHead::build(feat, layout.branches, arch.norm, &mut store, &rng)?)
        } else {
            None
        };
        Ok(MultiBranchModel { arch: arch.clone(), layout, trunks, branches, gate, store })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn branch_count(&self) -> usize {
        self.layout.branches
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn gate(&self) -> Option<&GateHead> {
        self.gate.as_ref()
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    fn check_input(&self, g: &Graph<F>, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[1..] != self.arch.input {
            return Err(Error::dim(format!("model expects N x {:?}, got {s:?}", self.arch.input)));
        }
        Ok(())
    }

    /// Trunk features (per trunk copy) and logits of the requested branches.
    fn branch_pass(&self, g: &mut Graph<F>, x: Var, mode: Mode, only_first: bool) -> Result<(Vec<Var>, Vec<Var>)> {
        self.check_input(g, x)?;
        let wanted = if only_first { 1 } else { self.branches.len() };
        let trunk_count = if self.layout.shared_trunk { 1 } else { wanted };
        let feats = self.trunks[..trunk_count]
            .iter()
            .map(|t| t.forward(g, &self.store, x, mode))
            .collect::<Result<Vec<_>>>()?;
        let logits = self.branches[..wanted]
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let f = if self.layout.shared_trunk { feats[0] } else { feats[i] };
                b.forward(g, &self.store, f, mode)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((feats, logits))
    }

    /// Full forward pass. Train-mode batch-norm updates are queued on the
    /// graph; call [`MultiBranchModel::absorb_bn_updates`] to commit them.
    pub fn forward(&self, g: &mut Graph<F>, x: Var, mode: Mode) -> Result<ForwardOutputs> {
        let (feats, branch_logits) = self.branch_pass(g, x, mode, false)?;
        let n = g.shape(x)[0];
        let k = self.branches.len();
        let gate_weights = match &self.gate {
            Some(gate) => gate.forward(g, &self.store, feats[0], mode)?,
            None => g.constant(Tensor::full(&[n, k], F::ONE / F::cast_usize(k)))?,
        };
        let teacher_logits = g.gate_combine(gate_weights, &branch_logits)?;
        Ok(ForwardOutputs { branch_logits, gate_weights, teacher_logits })
    }

    /// Logits of branch 0 only, skipping the other branches and the gate.
    pub fn forward_target(&self, g: &mut Graph<F>, x: Var, mode: Mode) -> Result<Var> {
        let (_, logits) = self.branch_pass(g, x, mode, true)?;
        Ok(logits[0])
    }

    pub fn absorb_bn_updates(&mut self, g: &mut Graph<F>) {
        for u in g.take_bn_updates() {
            self.store.apply_bn_update(&u);
        }
    }

    /// Eval-mode forward on a batch tensor; returns concrete tensors.
    pub fn predict(&self, batch: &Tensor<F>) -> Result<Predictions<F>> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone())?;
        let out = self.forward(&mut g, x, Mode::Eval)?;
        Ok(Predictions {
            branch_logits: out.branch_logits.iter().map(|&v| g.value(v).clone()).collect(),
            gate_weights: g.value(out.gate_weights).clone(),
            teacher_logits: g.value(out.teacher_logits).clone(),
        })
    }

    /// Ensemble posterior `softmax(z_e)` (T = 1), evaluated in eval mode.
    pub fn ensemble_predict(&self, batch: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone())?;
        let out = self.forward(&mut g, x, Mode::Eval)?;
        let p = g.softmax(out.teacher_logits)?;
        Ok(g.value(p).clone())
    }

    /// Standalone network made of the trunk and branch 0; the gate and the
    /// auxiliary branches are dropped.
    pub fn strip(&self) -> Result<SingleNet<F>> {
        let mut single = MultiBranchModel::build(&self.arch, Layout::single(), 0)?;
        let copied = single.store.copy_matching_from(&self.store)?;
        let expected = single.store.params().len() + single.store.buffers().len();
        if copied != expected {
            return Err(Error::config(format!("strip copied {copied} of {expected} tensors")));
        }
        Ok(SingleNet(single))
    }

    pub(crate) fn from_parts(arch: ArchSpec, layout: Layout, seed: u64, store: ParamStore<F>) -> Result<Self> {
        let mut m = Self::build(&arch, layout, seed)?;
        let copied = m.store.copy_matching_from(&store)?;
        let expected = m.store.params().len() + m.store.buffers().len();
        if copied != expected || store.params().len() != m.store.params().len() {
            return Err(Error::Checkpoint(format!("parameter set mismatch: matched {copied} of {expected}")));
        }
        Ok(m)
    }
}

#[derive(Clone, Debug)]
pub struct Predictions<F: Float> {
    pub branch_logits: Vec<Tensor<F>>,
    pub gate_weights: Tensor<F>,
    pub teacher_logits: Tensor<F>,
}

/// Deployable single network: trunk + branch 0 + classifier 0.
#[derive(Clone, Debug)]
pub struct SingleNet<F: Float = f32>(MultiBranchModel<F>);

impl<F: Float> SingleNet<F> {
    pub fn build(arch: &ArchSpec, seed: u64) -> Result<Self> {
        Ok(SingleNet(MultiBranchModel::build(arch, Layout::single(), seed)?))
    }

    pub fn forward(&self, g: &mut Graph<F>, x: Var, mode: Mode) -> Result<Var> {
        self.0.forward_target(g, x, mode)
    }

    pub fn predict(&self, batch: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone())?;
        let y = self.forward(&mut g, x, Mode::Eval)?;
        Ok(g.value(y).clone())
    }

    pub fn arch(&self) -> &ArchSpec {
        self.0.arch()
    }

    pub fn store(&self) -> &ParamStore<F> {
        self.0.store()
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        self.0.store_mut()
    }

    pub fn num_params(&self) -> usize {
        self.0.num_params()
    }

    pub fn absorb_bn_updates(&mut self, g: &mut Graph<F>) {
        self.0.absorb_bn_updates(g)
    }

    pub fn as_model(&self) -> &MultiBranchModel<F> {
        &self.0
    }

    pub fn into_model(self) -> MultiBranchModel<F> {
        self.0
    }

    /// Wraps a one-branch, ungated model.
    pub fn from_model(m: MultiBranchModel<F>) -> Result<Self> {
        if m.layout() != Layout::single() {
            return Err(Error::config("not a single-branch model"));
        }
        Ok(SingleNet(m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> ArchSpec {
        ArchSpec::desk([1, 8, 8], 4, &[3], 5)
    }

    #[test]
    fn branch_counts_follow_m() {
        for m in 1..=4 {
            let model = MultiBranchModel::<f32>::build(&tiny_arch(), Layout::one(m), 1).unwrap();
            assert_eq!(model.branch_count(), m + 1);
        }
        assert!(MultiBranchModel::<f32>::build(&tiny_arch(), Layout::one(0), 1).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = MultiBranchModel::<f32>::build(&tiny_arch(), Layout::one(2), 9).unwrap();
        let b = MultiBranchModel::<f32>::build(&tiny_arch(), Layout::one(2), 9).unwrap();
        assert_eq!(a.store(), b.store());
        let c = MultiBranchModel::<f32>::build(&tiny_arch(), Layout::one(2), 10).unwrap();
        assert_ne!(a.store(), c.store());
    }

    #[test]
    fn branches_are_initialised_independently() {
        let m = MultiBranchModel::<f32>::build(&tiny_arch(), Layout::one(2), 3).unwrap();
        let s = m.store();
        let w0 = s.value(s.param_id("branch0.0.weight").unwrap());
        let w1 = s.value(s.param_id("branch1.0.weight").unwrap());
        assert_ne!(w0, w1);
    }

    #[test]
    fn mismatched_branch_is_a_config_error() {
        let mut arch = tiny_arch();
        arch.branch.layers[0] = LayerDesc::Conv { in_channels: 7, out_channels: 5, kernel: 3, stride: 1, padding: 1, bias: false };
        assert!(matches!(MultiBranchModel::<f32>::build(&arch, Layout::one(2), 0), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let m = MultiBranchModel::<f32>::build(&tiny_arch(), Layout::one(1), 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 1, 9, 9])).unwrap();
        assert!(matches!(m.forward(&mut g, x, Mode::Eval), Err(Error::Dimension(_))));
    }

    #[test]
    fn no_sharing_gives_disjoint_storage() {
        let layout = Layout { branches: 3, shared_trunk: false, gated: true };
        let m = MultiBranchModel::<f32>::build(&tiny_arch(), layout, 0).unwrap();
        let names: Vec<&str> = m.store().params().iter().map(|p| p.name.as_str()).collect();
        for i in 0..3 {
            let prefix = if i == 0 { "trunk." } else if i == 1 { "trunk1." } else { "trunk2." };
            assert!(names.iter().any(|n| n.starts_with(prefix)));
        }
    }

    #[test]
    fn strip_keeps_branch_zero_only() {
        let m = MultiBranchModel::<f32>::build(&tiny_arch(), Layout::one(2), 4).unwrap();
        let s = m.strip().unwrap();
        assert!(s.num_params() < m.num_params());
        assert!(s.store().params().iter().all(|p| p.name.starts_with("trunk.") || p.name.starts_with("branch0.")));
    }
}

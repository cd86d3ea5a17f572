//! The full network: three modality branches with auxiliary regressors, the
//! VAD-aware audio pathway, fusion, and the shared six-way regression head.
//!
//! Branch pipeline (per modality, on pre-aligned `[batch × T × d]` input):
//! project each row to `H`, activate, dropout, temporal mean → `z ∈ ℝᴴ`.
//!
//! Audio additionally computes `a_mean` (temporal mean of the projected rows,
//! before activation), `v̂ = σ(f_vad(a_mean)) ∈ (0,1)³`, and injects it as
//! `z_a = z_a_main + W_inj·v̂`. The injected embedding feeds both fusion and
//! the audio auxiliary head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Activation, DropoutLayer, LinearLayer, Mode, Param};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Number of regression targets.
pub const NUM_TARGETS: usize = 6;
/// Dimensionality of the valence-arousal-dominance latent.
pub const VAD_DIM: usize = 3;

pub const TARGET_NAMES: [&str; NUM_TARGETS] = ["adm", "amu", "det", "emp", "exc", "joy"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Audio,
    Text,
}

impl Modality {
    /// Fixed order used for storage, concatenation, and parameter naming.
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Audio, Modality::Text];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Audio => "audio",
            Modality::Text => "text",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    Concat,
    Average,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionMode::Concat),
            "average" => Ok(FusionMode::Average),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature dims in (visual, audio, text) order.
    pub feature_dims: [usize; 3],
    pub hidden_dim: usize,
    pub align_len: usize,
    pub dropout: f64,
    pub fusion: FusionMode,
    pub activation: Activation,
    pub use_vad: bool,
    pub output_sigmoid: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dims.contains(&0) {
            return Err(Error::Config(format!(
                "feature dims must be positive, got {:?}",
                self.feature_dims
            )));
        }
        if self.hidden_dim == 0 || self.align_len == 0 {
            return Err(Error::Config("hidden_dim and align_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn fused_dim(&self) -> usize {
        match self.fusion {
            FusionMode::Concat => 3 * self.hidden_dim,
            FusionMode::Average => self.hidden_dim,
        }
    }

    /// Closed-form count of learnable scalars.
    pub fn parameter_count(&self) -> usize {
        let h = self.hidden_dim;
        let branches: usize = self.feature_dims.iter().map(|d| d * h + h).sum();
        let aux = 3 * (h * NUM_TARGETS + NUM_TARGETS);
        let vad = if self.use_vad {
            (h * VAD_DIM + VAD_DIM) + VAD_DIM * h
        } else {
            0
        };
        let head = self.fused_dim() * h + h + h * NUM_TARGETS + NUM_TARGETS;
        branches + aux + vad + head
    }
}

#[derive(Clone, Debug)]
struct Branch<T> {
    proj: LinearLayer<T>,
    dropout: DropoutLayer<T>,
    aux: LinearLayer<T>,
    cache: Option<BranchCache<T>>,
}

#[derive(Clone, Debug)]
struct BranchCache<T> {
    batch: usize,
    pre: Tensor<T>,
    /// Activation output, kept only when its gradient needs it.
    act: Vec<T>,
}

#[derive(Clone, Debug)]
struct VadPath<T> {
    head: LinearLayer<T>,
    inject: LinearLayer<T>,
}

#[derive(Clone, Debug)]
struct Head<T> {
    fc1: LinearLayer<T>,
    dropout: DropoutLayer<T>,
    fc2: LinearLayer<T>,
    cache: Option<(Tensor<T>, Tensor<T>)>,
}

/// Everything the losses need from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs<T = f64> {
    /// Main prediction `ŷ`, `[batch × 6]`.
    pub pred: Tensor<T>,
    /// Pre-sigmoid main-head output.
    pub logits: Tensor<T>,
    /// Auxiliary predictions in (visual, audio, text) order.
    pub aux: [Tensor<T>; 3],
    /// `v̂`, `[batch × 3]`; absent when the VAD pathway is disabled.
    pub vad: Option<Tensor<T>>,
    /// Branch embeddings after VAD injection, `[batch × H]` each.
    pub embeddings: [Tensor<T>; 3],
}

/// Loss gradients with respect to the model outputs.
#[derive(Clone, Debug)]
pub struct OutputGrads<T = f64> {
    pub pred: Tensor<T>,
    pub aux: [Tensor<T>; 3],
    pub vad: Option<Tensor<T>>,
}

impl<T: Scalar> OutputGrads<T> {
    pub fn zeros_like(out: &ForwardOutputs<T>) -> Self {
        OutputGrads {
            pred: Tensor::zeros(out.pred.shape()),
            aux: out.aux.clone().map(|a| Tensor::zeros(a.shape())),
            vad: out.vad.as_ref().map(|v| Tensor::zeros(v.shape())),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model<T = f64> {
    config: ModelConfig,
    branches: [Branch<T>; 3],
    vad: Option<VadPath<T>>,
    head: Head<T>,
    rng: ChaCha8Rng,
    last_outputs: Option<ForwardOutputs<T>>,
    last_vad_mean: Option<Tensor<T>>,
}

/// Concatenates `[B × H]` embeddings row-wise in modality order.
pub fn fuse<T: Scalar>(embeddings: &[Tensor<T>; 3], mode: FusionMode) -> Result<Tensor<T>> {
    let shape = embeddings[0].shape();
    if shape.len() != 2 {
        return Err(Error::InvalidArgument(format!("fuse needs [B × H], got {shape:?}")));
    }
    for z in &embeddings[1..] {
        if z.shape() != shape {
            return Err(Error::shape("fuse", shape, z.shape()));
        }
    }
    let (b, h) = (shape[0], shape[1]);
    match mode {
        FusionMode::Concat => {
            let mut out = Vec::with_capacity(b * 3 * h);
            for r in 0..b {
                for z in embeddings {
                    out.extend_from_slice(z.row(r));
                }
            }
            Tensor::new(vec![b, 3 * h], out)
        }
        FusionMode::Average => {
            let third = T::one() / T::lit(3.0);
            embeddings[0]
                .add(&embeddings[1])?
                .add(&embeddings[2])?
                .scale(third)
        }
    }
}

fn unfuse<T: Scalar>(grad: &Tensor<T>, hidden: usize, mode: FusionMode) -> Result<[Tensor<T>; 3]> {
    let b = grad.rows();
    match mode {
        FusionMode::Concat => {
            let mut parts = [vec![], vec![], vec![]];
            for r in 0..b {
                for (m, part) in parts.iter_mut().enumerate() {
                    part.extend_from_slice(&grad.row(r)[m * hidden..(m + 1) * hidden]);
                }
            }
            let [v, a, t] = parts;
            Ok([
                Tensor::new(vec![b, hidden], v)?,
                Tensor::new(vec![b, hidden], a)?,
                Tensor::new(vec![b, hidden], t)?,
            ])
        }
        FusionMode::Average => {
            let g = grad.scale(T::one() / T::lit(3.0))?;
            Ok([g.clone(), g.clone(), g])
        }
    }
}

impl<T: Scalar> Branch<T> {
    /// `x: [B × T × d]` → `z: [B × H]`, plus, if asked for, the temporal
    /// mean of the projected rows before activation `[B × H]`.
    fn forward(
        &mut self,
        x: &Tensor<T>,
        activation: Activation,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        want_pre_mean: bool,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let (b, steps, dim) = match *x.shape() {
            [b, steps, dim] => (b, steps, dim),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "branch input must be [batch × steps × dim], got {:?}",
                    x.shape()
                )))
            }
        };
        if dim != self.proj.in_dim() {
            return Err(Error::Config(format!(
                "feature dim {dim} does not match configured dim {}",
                self.proj.in_dim()
            )));
        }
        let h = self.proj.out_dim();
        let flat = x.clone().reshape(&[b * steps, dim])?;
        let pre = self.proj.forward(&flat)?;

        // Activation, dropout, and the temporal mean in one pass over the
        // rows, with the same per-element arithmetic as the separate layers.
        self.dropout.sample_mask(pre.len(), mode, rng);
        let mask = self.dropout.mask();
        let keep_act = activation.grad_needs_output();
        let mut act = Vec::with_capacity(if keep_act { pre.len() } else { 0 });
        let mut z = vec![T::zero(); b * h];
        let mut y = vec![T::zero(); h];
        for (r, row) in pre.data().chunks_exact(h).enumerate() {
            for (y, &p) in y.iter_mut().zip(row) {
                *y = activation.apply(p);
            }
            if keep_act {
                act.extend_from_slice(&y);
            }
            if let Some(m) = mask {
                for (y, &kept) in y.iter_mut().zip(&m[r * h..(r + 1) * h]) {
                    *y = *y * self.dropout.factor(kept);
                }
            }
            for (a, &v) in z[(r / steps) * h..(r / steps + 1) * h].iter_mut().zip(&y) {
                *a = *a + v;
            }
        }
        let inv = T::one() / T::from_usize_lossy(steps);
        let mut z = Tensor::new(vec![b, h], z)?;
        z.scale_in_place(inv);

        let pre = pre.reshape(&[b, steps, h])?;
        let pre_mean = want_pre_mean.then(|| tensor::reduce_mean(&pre, 1)).transpose()?;
        let pre = pre.reshape(&[b * steps, h])?;
        self.cache = Some(BranchCache { batch: b, pre, act });
        Ok((z, pre_mean))
    }

    /// `grad_z: [B × H]`; `grad_pre_mean: [B × H]` is an additional gradient
    /// on the temporal mean of the projected rows.
    fn backward(
        &mut self,
        grad_z: &Tensor<T>,
        grad_pre_mean: Option<&Tensor<T>>,
        activation: Activation,
    ) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("branch backward without forward".into()))?;
        let h = self.proj.out_dim();
        let rows = cache.pre.rows();
        let steps = rows / cache.batch;
        for g in std::iter::once(grad_z).chain(grad_pre_mean) {
            if g.shape() != [cache.batch, h] {
                return Err(Error::shape("branch_backward", g.shape(), &[cache.batch, h]));
            }
        }
        let inv = T::one() / T::from_usize_lossy(steps);
        let mask = self.dropout.mask();
        let mut g = vec![T::zero(); rows * h];
        for (r, (g, pre)) in g.chunks_exact_mut(h).zip(cache.pre.data().chunks_exact(h)).enumerate() {
            let bi = r / steps;
            for (g, &u) in g.iter_mut().zip(&grad_z.data()[bi * h..(bi + 1) * h]) {
                *g = u * inv;
            }
            if let Some(m) = mask {
                for (g, &kept) in g.iter_mut().zip(&m[r * h..(r + 1) * h]) {
                    *g = *g * self.dropout.factor(kept);
                }
            }
            match activation {
                Activation::Relu | Activation::Identity => {
                    for (g, &p) in g.iter_mut().zip(pre) {
                        *g = activation.grad(p, p, *g);
                    }
                }
                Activation::Sigmoid => {
                    for ((g, &p), &y) in g.iter_mut().zip(pre).zip(&cache.act[r * h..(r + 1) * h]) {
                        *g = activation.grad(p, y, *g);
                    }
                }
            }
            if let Some(extra) = grad_pre_mean {
                for (g, &e) in g.iter_mut().zip(&extra.data()[bi * h..(bi + 1) * h]) {
                    *g = *g + e * inv;
                }
            }
        }
        let g = Tensor::new(vec![rows, h], g)?;
        g.ensure_finite("branch_backward")?;
        self.proj.backward(&g, false)?;
        Ok(())
    }
}

fn output_activation<T: Scalar>(logits: &Tensor<T>, sigmoid: bool) -> Result<Tensor<T>> {
    if sigmoid {
        logits.sigmoid()
    } else {
        Ok(logits.clone())
    }
}

fn output_backward<T: Scalar>(out: &Tensor<T>, grad: &Tensor<T>, sigmoid: bool) -> Result<Tensor<T>> {
    if sigmoid {
        tensor::sigmoid_backward(out, grad)
    } else {
        Ok(grad.clone())
    }
}

impl<T: Scalar> Model<T> {
    /// Builds a model with seeded Xavier-uniform weights and zero biases.
    ///
    /// VAD layers are drawn last, so a VAD-free model and a VAD model built
    /// from the same seed share every other parameter.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_dim;
        let mut make_branch = |dim: usize| -> Result<Branch<T>> {
            Ok(Branch {
                proj: LinearLayer::xavier(dim, h, true, &mut rng),
                dropout: DropoutLayer::new(config.dropout)?,
                aux: LinearLayer::xavier(h, NUM_TARGETS, true, &mut rng),
                cache: None,
            })
        };
        let branches = [
            make_branch(config.feature_dims[0])?,
            make_branch(config.feature_dims[1])?,
            make_branch(config.feature_dims[2])?,
        ];
        let head = Head {
            fc1: LinearLayer::xavier(config.fused_dim(), h, true, &mut rng),
            dropout: DropoutLayer::new(config.dropout)?,
            fc2: LinearLayer::xavier(h, NUM_TARGETS, true, &mut rng),
            cache: None,
        };
        let vad = config.use_vad.then(|| VadPath {
            head: LinearLayer::xavier(h, VAD_DIM, true, &mut rng),
            inject: LinearLayer::xavier(VAD_DIM, h, false, &mut rng),
        });
        let dropout_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66_D1CE_5EED);
        Ok(Model {
            config,
            branches,
            vad,
            head,
            rng: dropout_rng,
            last_outputs: None,
            last_vad_mean: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameters with stable names, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (m, branch) in Modality::ALL.iter().zip(&self.branches) {
            push_linear(&mut out, &format!("{}.proj", m.name()), &branch.proj);
            push_linear(&mut out, &format!("{}.aux", m.name()), &branch.aux);
        }
        push_linear(&mut out, "head.fc1", &self.head.fc1);
        push_linear(&mut out, "head.fc2", &self.head.fc2);
        if let Some(vad) = &self.vad {
            push_linear(&mut out, "vad.head", &vad.head);
            push_linear(&mut out, "vad.inject", &vad.inject);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for branch in &mut self.branches {
            out.extend(branch.proj.params_mut());
            out.extend(branch.aux.params_mut());
        }
        out.extend(self.head.fc1.params_mut());
        out.extend(self.head.fc2.params_mut());
        if let Some(vad) = &mut self.vad {
            out.extend(vad.head.params_mut());
            out.extend(vad.inject.params_mut());
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.named_params().into_iter().map(|(n, _)| n).collect()
    }

    pub fn param_values(&self) -> Vec<Tensor<T>> {
        self.named_params().into_iter().map(|(_, p)| p.value.clone()).collect()
    }

    /// Replaces every parameter value, in `named_params` order.
    pub fn set_param_values(&mut self, values: &[Tensor<T>]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != values.len() {
            return Err(Error::State(format!(
                "expected {} parameter tensors, got {}",
                params.len(),
                values.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::shape("set_param_values", p.value.shape(), v.shape()));
            }
            p.value = v.clone();
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Mutable access to the bias-free injection map, if the VAD path exists.
    pub fn vad_inject_mut(&mut self) -> Option<&mut Param<T>> {
        self.vad.as_mut().map(|v| &mut v.inject.weight)
    }

    pub fn vad_head_mut(&mut self) -> Option<&mut LinearLayer<T>> {
        self.vad.as_mut().map(|v| &mut v.head)
    }

    pub fn head_output_mut(&mut self) -> &mut LinearLayer<T> {
        &mut self.head.fc2
    }

    pub fn aux_head_mut(&mut self, m: Modality) -> &mut LinearLayer<T> {
        &mut self.branches[m.index()].aux
    }

    /// Runs the network on aligned inputs `[batch × T × d_m]` in
    /// (visual, audio, text) order.
    pub fn forward(&mut self, inputs: &[Tensor<T>; 3], mode: Mode) -> Result<ForwardOutputs<T>> {
        let batch = inputs[0].shape()[0];
        if batch == 0 || inputs.iter().any(|x| x.shape()[0] != batch) {
            return Err(Error::InvalidArgument("modality batches must be equal and non-empty".into()));
        }
        let activation = self.config.activation;
        let sig = self.config.output_sigmoid;

        let mut embeddings = Vec::with_capacity(3);
        let mut audio_mean = None;
        for (i, (branch, x)) in self.branches.iter_mut().zip(inputs).enumerate() {
            let want = self.vad.is_some() && i == Modality::Audio.index();
            let (z, pre_mean) = branch.forward(x, activation, mode, &mut self.rng, want)?;
            embeddings.push(z);
            audio_mean = audio_mean.or(pre_mean);
        }
        let [z_v, mut z_a, z_t]: [Tensor<T>; 3] =
            embeddings.try_into().map_err(|_| Error::State("branch count".into()))?;

        let mut vad_out = None;
        self.last_vad_mean = None;
        if let Some(vad) = &mut self.vad {
            let a_mean = audio_mean.expect("audio branch ran");
            let v_hat = vad.head.forward(&a_mean)?.sigmoid()?;
            let injected = vad.inject.forward(&v_hat)?;
            z_a = z_a.add(&injected)?;
            vad_out = Some(v_hat);
            self.last_vad_mean = Some(a_mean);
        }
        let embeddings = [z_v, z_a, z_t];

        let mut aux = Vec::with_capacity(3);
        for (branch, z) in self.branches.iter_mut().zip(&embeddings) {
            aux.push(output_activation(&branch.aux.forward(z)?, sig)?);
        }
        let aux: [Tensor<T>; 3] = aux.try_into().map_err(|_| Error::State("aux count".into()))?;

        let fused = fuse(&embeddings, self.config.fusion)?;
        let hidden_pre = self.head.fc1.forward(&fused)?;
        let hidden = activation.forward(&hidden_pre)?;
        let dropped = self.head.dropout.forward(&hidden, mode, &mut self.rng);
        let logits = self.head.fc2.forward(&dropped)?;
        let pred = output_activation(&logits, sig)?;
        self.head.cache = Some((hidden_pre, hidden));

        let out = ForwardOutputs {
            pred,
            logits,
            aux,
            vad: vad_out,
            embeddings,
        };
        self.last_outputs = Some(out.clone());
        Ok(out)
    }

    /// Reverse pass for the most recent forward. Parameter gradients are
    /// accumulated, so call [`Model::zero_grad`] between steps.
    pub fn backward(&mut self, grads: &OutputGrads<T>) -> Result<()> {
        let out = self
            .last_outputs
            .take()
            .ok_or_else(|| Error::State("model backward without a pending forward".into()))?;
        if grads.pred.shape() != out.pred.shape() {
            return Err(Error::shape("model_backward", grads.pred.shape(), out.pred.shape()));
        }
        let activation = self.config.activation;
        let sig = self.config.output_sigmoid;
        let h = self.config.hidden_dim;

        // Shared head.
        let (hidden_pre, hidden) = self
            .head
            .cache
            .take()
            .ok_or_else(|| Error::State("head cache missing".into()))?;
        let g_logits = output_backward(&out.pred, &grads.pred, sig)?;
        let g = self.head.fc2.backward(&g_logits, true)?.expect("input grad");
        let mut g = g;
        self.head.dropout.backward_in_place(&mut g)?;
        activation.backward_in_place(&hidden_pre, &hidden, &mut g)?;
        let g_fused = self.head.fc1.backward(&g, true)?.expect("input grad");
        let mut g_z = unfuse(&g_fused, h, self.config.fusion)?;

        // Auxiliary heads read the same embeddings.
        for ((branch, aux_out), (aux_grad, gz)) in self
            .branches
            .iter_mut()
            .zip(&out.aux)
            .zip(grads.aux.iter().zip(g_z.iter_mut()))
        {
            let g_aux = output_backward(aux_out, aux_grad, sig)?;
            let g = branch.aux.backward(&g_aux, true)?.expect("input grad");
            gz.add_assign(&g)?;
        }

        // VAD pathway: z_a = z_a_main + W_inj·v̂, v̂ = σ(f_vad(a_mean)).
        let mut audio_extra = None;
        if let Some(vad) = &mut self.vad {
            let v_hat = out
                .vad
                .as_ref()
                .ok_or_else(|| Error::State("missing v̂ in cached outputs".into()))?;
            let mut g_v = vad.inject.backward(&g_z[Modality::Audio.index()], true)?.expect("input grad");
            if let Some(extra) = &grads.vad {
                g_v.add_assign(extra)?;
            }
            let g_logit = tensor::sigmoid_backward(v_hat, &g_v)?;
            let g_mean = vad.head.backward(&g_logit, true)?.expect("input grad");
            self.last_vad_mean
                .take()
                .ok_or_else(|| Error::State("missing a_mean cache".into()))?;
            audio_extra = Some(g_mean);
        }

        for (i, branch) in self.branches.iter_mut().enumerate() {
            let extra = if i == Modality::Audio.index() {
                audio_extra.as_ref()
            } else {
                None
            };
            branch.backward(&g_z[i], extra, activation)?;
        }
        Ok(())
    }
}

fn push_linear<'a, T: Scalar>(out: &mut Vec<(String, &'a Param<T>)>, prefix: &str, layer: &'a LinearLayer<T>) {
    out.push((format!("{prefix}.weight"), &layer.weight));
    if let Some(b) = &layer.bias {
        out.push((format!("{prefix}.bias"), b));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            feature_dims: [3, 2, 4],
            hidden_dim: 4,
            align_len: 5,
            dropout: 0.0,
            fusion: FusionMode::Concat,
            activation: Activation::Relu,
            use_vad: true,
            output_sigmoid: true,
        }
    }

    fn random_inputs(cfg: &ModelConfig, batch: usize, seed: u64) -> [Tensor; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cfg.feature_dims.map(|d| {
            let len = batch * cfg.align_len * d;
            Tensor::new(
                vec![batch, cfg.align_len, d],
                (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        })
    }

    /// The branch's single-pass forward and backward against the separate
    /// layers composed one after another.
    #[test]
    fn fused_branch_matches_layer_composition_bitwise() {
        for activation in [Activation::Relu, Activation::Sigmoid, Activation::Identity] {
            for mode in [Mode::Train, Mode::Eval] {
                let mut rng = ChaCha8Rng::seed_from_u64(4);
                let (b, steps, d, h) = (3, 7, 5, 6);
                let mut fused = Branch {
                    proj: LinearLayer::<f64>::xavier(d, h, true, &mut rng),
                    dropout: DropoutLayer::new(0.3).unwrap(),
                    aux: LinearLayer::new(h, NUM_TARGETS, true),
                    cache: None,
                };
                let mut proj = fused.proj.clone();
                let mut dropout = DropoutLayer::new(0.3).unwrap();
                let random = |shape: &[usize], rng: &mut ChaCha8Rng| {
                    let len = shape.iter().product();
                    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
                };
                let x = random(&[b, steps, d], &mut rng);
                let gz = random(&[b, h], &mut rng);
                let gm = random(&[b, h], &mut rng);

                let mut drop_rng = ChaCha8Rng::seed_from_u64(8);
                let (z, mean) = fused.forward(&x, activation, mode, &mut drop_rng.clone(), true).unwrap();
                fused.backward(&gz, Some(&gm), activation).unwrap();

                let pre = proj.forward(&x.clone().reshape(&[b * steps, d]).unwrap()).unwrap();
                let act = activation.forward(&pre).unwrap();
                let dropped = dropout.forward(&act, mode, &mut drop_rng);
                let z_ref = tensor::reduce_mean(&dropped.reshape(&[b, steps, h]).unwrap(), 1).unwrap();
                let mean_ref = tensor::reduce_mean(&pre.clone().reshape(&[b, steps, h]).unwrap(), 1).unwrap();
                let g = tensor::reduce_mean_backward(&gz, &[b, steps, h], 1).unwrap().reshape(&[b * steps, h]).unwrap();
                let g = dropout.backward(&g).unwrap();
                let mut g = activation.backward(&pre, &act, &g).unwrap();
                let extra = tensor::reduce_mean_backward(&gm, &[b, steps, h], 1).unwrap().reshape(&[b * steps, h]).unwrap();
                g.add_assign(&extra).unwrap();
                proj.backward(&g, false).unwrap();

                assert_eq!(z, z_ref);
                assert_eq!(mean.unwrap(), mean_ref);
                assert_eq!(fused.proj.weight.grad, proj.weight.grad);
                assert_eq!(fused.proj.bias.as_ref().unwrap().grad, proj.bias.as_ref().unwrap().grad);
            }
        }
    }

    #[test]
    fn fuse_concat_and_average() {
        let z = [
            Tensor::from_rows(&[[1.0, 2.0]]).unwrap(),
            Tensor::from_rows(&[[3.0, 4.0]]).unwrap(),
            Tensor::from_rows(&[[5.0, 6.0]]).unwrap(),
        ];
        assert_eq!(fuse(&z, FusionMode::Concat).unwrap().data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(fuse(&z, FusionMode::Average).unwrap().data(), &[3.0, 4.0]);
        assert!("sum".parse::<FusionMode>().is_err());
    }

    #[test]
    fn concat_of_three_256_wide_embeddings_is_768_and_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z: [Tensor; 3] = std::array::from_fn(|_| {
            Tensor::new(vec![2, 256], (0..512).map(|_| rng.random::<f64>()).collect()).unwrap()
        });
        let fused = fuse(&z, FusionMode::Concat).unwrap();
        assert_eq!(fused.shape(), &[2, 768]);
        let parts = unfuse(&fused, 256, FusionMode::Concat).unwrap();
        assert_eq!(parts, z);
    }

    #[test]
    fn zero_heads_give_half_everywhere() {
        let cfg = small_config();
        let mut model = Model::<f64>::new(cfg.clone(), 1).unwrap();
        let zero = model.param_values().iter().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        model.set_param_values(&zero).unwrap();
        let inputs = cfg.feature_dims.map(|d| Tensor::zeros(&[1, cfg.align_len, d]));
        let out = model.forward(&inputs, Mode::Eval).unwrap();
        assert!(out.pred.data().iter().all(|&v| v == 0.5));
        assert!(out.vad.unwrap().data().iter().all(|&v| v == 0.5));
        for z in &out.embeddings {
            assert!(z.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn branch_matches_step_by_step_composition() {
        let cfg = small_config();
        let mut model = Model::<f64>::new(cfg.clone(), 2).unwrap();
        let inputs = random_inputs(&cfg, 2, 3);
        let out = model.forward(&inputs, Mode::Eval).unwrap();

        let proj = &model.branches[0].proj;
        let w = &proj.weight.value;
        let b = proj.bias.as_ref().unwrap().value.data();
        for s in 0..2 {
            let mut want = vec![0.0; cfg.hidden_dim];
            for t in 0..cfg.align_len {
                for (o, acc) in want.iter_mut().enumerate() {
                    let mut v = b[o];
                    for k in 0..cfg.feature_dims[0] {
                        v += w.get(&[o, k]) * inputs[0].get(&[s, t, k]);
                    }
                    *acc += v.max(0.0);
                }
            }
            for (o, acc) in want.iter().enumerate() {
                let got = out.embeddings[0].get(&[s, o]);
                assert!((got - acc / cfg.align_len as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vad_pathway_matches_composition() {
        let cfg = small_config();
        let mut model = Model::<f64>::new(cfg.clone(), 4).unwrap();
        let inputs = random_inputs(&cfg, 3, 5);
        let out = model.forward(&inputs, Mode::Eval).unwrap();

        let mut no_inject = model.clone();
        no_inject.vad_inject_mut().unwrap().value.fill(0.0);
        let base = no_inject.forward(&inputs, Mode::Eval).unwrap();

        let vad = model.vad.as_ref().unwrap();
        let proj = &model.branches[1].proj;
        for s in 0..3 {
            // a_mean = W·mean(x) + b since projection is affine
            let mut mean_x = vec![0.0; 2];
            for t in 0..cfg.align_len {
                for k in 0..2 {
                    mean_x[k] += inputs[1].get(&[s, t, k]) / cfg.align_len as f64;
                }
            }
            let a_mean: Vec<f64> = (0..4)
                .map(|o| {
                    proj.bias.as_ref().unwrap().value.data()[o]
                        + (0..2).map(|k| proj.weight.value.get(&[o, k]) * mean_x[k]).sum::<f64>()
                })
                .collect();
            let v_hat: Vec<f64> = (0..3)
                .map(|j| {
                    let l = vad.head.bias.as_ref().unwrap().value.data()[j]
                        + (0..4).map(|o| vad.head.weight.value.get(&[j, o]) * a_mean[o]).sum::<f64>();
                    1.0 / (1.0 + (-l).exp())
                })
                .collect();
            for j in 0..3 {
                assert!((out.vad.as_ref().unwrap().get(&[s, j]) - v_hat[j]).abs() < 1e-12);
            }
            for o in 0..4 {
                let inj: f64 = (0..3).map(|j| vad.inject.weight.value.get(&[o, j]) * v_hat[j]).sum();
                let want = base.embeddings[1].get(&[s, o]) + inj;
                assert!((out.embeddings[1].get(&[s, o]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_injection_matches_vad_free_model() {
        let cfg = small_config();
        let mut with_vad = Model::<f64>::new(cfg.clone(), 7).unwrap();
        with_vad.vad_inject_mut().unwrap().value.fill(0.0);
        let mut without = Model::<f64>::new(ModelConfig { use_vad: false, ..cfg.clone() }, 7).unwrap();
        let inputs = random_inputs(&cfg, 4, 8);
        let a = with_vad.forward(&inputs, Mode::Eval).unwrap();
        let b = without.forward(&inputs, Mode::Eval).unwrap();
        assert_eq!(a.pred, b.pred);
        assert_eq!(a.aux, b.aux);
        assert_eq!(a.embeddings, b.embeddings);
    }

    #[test]
    fn eval_forward_is_deterministic_and_bounded() {
        let cfg = ModelConfig { dropout: 0.2, ..small_config() };
        let mut model = Model::<f64>::new(cfg.clone(), 9).unwrap();
        let inputs = random_inputs(&cfg, 32, 10);
        let a = model.forward(&inputs, Mode::Eval).unwrap();
        let b = model.forward(&inputs, Mode::Eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pred.shape(), &[32, 6]);
        assert_eq!(a.vad.as_ref().unwrap().shape(), &[32, 3]);
        assert!(a.pred.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let c = model.forward(&inputs, Mode::Train).unwrap();
        assert_ne!(a.pred, c.pred);
    }

    #[test]
    fn feature_dim_mismatch_is_config_error() {
        let cfg = small_config();
        let mut model = Model::<f64>::new(cfg.clone(), 0).unwrap();
        let mut inputs = random_inputs(&cfg, 1, 0);
        inputs[2] = Tensor::zeros(&[1, cfg.align_len, 7]);
        assert!(matches!(model.forward(&inputs, Mode::Eval), Err(Error::Config(_))));
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for fusion in [FusionMode::Concat, FusionMode::Average] {
            for use_vad in [true, false] {
                let cfg = ModelConfig { fusion, use_vad, ..small_config() };
                let model = Model::<f64>::new(cfg.clone(), 0).unwrap();
                assert_eq!(model.parameter_count(), cfg.parameter_count());
            }
        }
    }

    #[test]
    fn backward_requires_forward_and_zero_upstream_gives_zero_grads() {
        let cfg = small_config();
        let mut model = Model::<f64>::new(cfg.clone(), 3).unwrap();
        let inputs = random_inputs(&cfg, 2, 1);
        let out = model.forward(&inputs, Mode::Train).unwrap();
        model.backward(&OutputGrads::zeros_like(&out)).unwrap();
        for (name, p) in model.named_params() {
            assert_eq!(p.grad.sum_squares(), 0.0, "{name}");
        }
        assert!(matches!(model.backward(&OutputGrads::zeros_like(&out)), Err(Error::State(_))));
    }

    #[test]
    fn generic_model_runs_in_f32() {
        let cfg = small_config();
        let mut model = Model::<f32>::new(cfg.clone(), 3).unwrap();
        let inputs = cfg.feature_dims.map(|d| Tensor::<f32>::full(&[2, cfg.align_len, d], 0.25));
        let out = model.forward(&inputs, Mode::Eval).unwrap();
        assert!(out.pred.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

//! The retrieval encoder: backbone → latent layer (the retrieval space) →
//! task head, plus an optional classifier used only for pretraining.

mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::rng::Rng;
use crate::tensor::{kernels, Gradients, Tape, Tensor, Var};

/// Dense layer `y = x · weight + bias` with `weight: in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Self> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.range(-bound, bound)).collect();
        Ok(Self {
            weight: Tensor::matrix(fan_in, fan_out, data)?,
            bias: Tensor::zeros(vec![fan_out])?,
        })
    }

    /// All-zero weights and bias.
    pub fn zeros(fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            weight: Tensor::zeros(vec![fan_in, fan_out])?,
            bias: Tensor::zeros(vec![fan_out])?,
        })
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(&self.weight)?;
        kernels::add_bias(y.data_mut(), self.bias.data());
        Ok(y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Flattened input size `h·w·3`.
    pub input_dim: usize,
    pub hidden: usize,
    /// Dimension `m` of the retrieval space.
    pub latent: usize,
    /// Width `k` of the task head.
    pub head_k: usize,
    /// Pretraining classes; `None` leaves the classifier out.
    pub classes: Option<usize>,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            input_dim: 36 * 36 * 3,
            hidden: 256,
            latent: 64,
            head_k: 4,
            classes: None,
        }
    }
}

impl ModelDims {
    pub fn for_image(size: usize) -> Self {
        Self {
            input_dim: size * size * 3,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Rotnet,
    Jigsaw,
    Barlow,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Rotnet, TaskKind::Jigsaw, TaskKind::Barlow];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Rotnet => "rotnet",
            TaskKind::Jigsaw => "jigsaw",
            TaskKind::Barlow => "barlow",
        }
    }
}

/// A self-supervised task: its kind, label count and Barlow weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// 4 for rotnet, the permutation-set size for jigsaw, 0 for barlow.
    pub k: usize,
    /// Off-diagonal weight of the Barlow objective.
    pub lambda: f64,
}

pub const DEFAULT_BARLOW_LAMBDA: f64 = 0.005;
pub const ROTNET_CLASSES: usize = 4;
pub const JIGSAW_CLASSES: usize = 31;

impl TaskSpec {
    pub fn rotnet() -> Self {
        Self {
            kind: TaskKind::Rotnet,
            k: ROTNET_CLASSES,
            lambda: DEFAULT_BARLOW_LAMBDA,
        }
    }

    pub fn jigsaw(permutations: usize) -> Self {
        Self {
            kind: TaskKind::Jigsaw,
            k: permutations,
            lambda: DEFAULT_BARLOW_LAMBDA,
        }
    }

    pub fn barlow(lambda: f64) -> Self {
        Self {
            kind: TaskKind::Barlow,
            k: 0,
            lambda,
        }
    }

    pub fn for_kind(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Rotnet => Self::rotnet(),
            TaskKind::Jigsaw => Self::jigsaw(JIGSAW_CLASSES),
            TaskKind::Barlow => Self::barlow(DEFAULT_BARLOW_LAMBDA),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TaskKind::Rotnet if self.k != ROTNET_CLASSES => {
                Err(Error::contract(format!("rotnet needs k = 4, got {}", self.k)))
            }
            TaskKind::Jigsaw if self.k < 2 => {
                Err(Error::contract(format!("jigsaw needs at least 2 permutations, got {}", self.k)))
            }
            TaskKind::Barlow if !(self.lambda >= 0.0 && self.lambda.is_finite()) => {
                Err(Error::contract(format!("barlow lambda {} must be finite and >= 0", self.lambda)))
            }
            _ => Ok(()),
        }
    }
}

/// Which learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Backbone,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// Backbone layers, each followed by a relu.
    pub backbone: Vec<Linear>,
    /// Linear map into the retrieval space.
    pub latent: Linear,
    /// Task head over the retrieval space.
    pub head: Linear,
    pub classifier: Option<Linear>,
}

/// Tape handles for one bound copy of the parameters.
#[derive(Clone, Debug)]
pub struct BoundParams {
    backbone: Vec<(Var, Var)>,
    latent: (Var, Var),
    head: (Var, Var),
    classifier: Option<(Var, Var)>,
}

impl BoundParams {
    /// Rebuilds the handles from variables listed in
    /// [`ModelParams::named_tensors`] order: weight and bias of each of the
    /// `backbone_layers` backbone layers, the latent layer, the head and
    /// optionally the classifier.
    pub fn from_vars(vars: &[Var], backbone_layers: usize) -> Result<Self> {
        let fixed = 2 * backbone_layers + 4;
        if vars.len() != fixed && vars.len() != fixed + 2 {
            return Err(Error::contract(format!(
                "{} variables do not describe {backbone_layers} backbone layers",
                vars.len()
            )));
        }
        let pair = |i: usize| (vars[2 * i], vars[2 * i + 1]);
        Ok(Self {
            backbone: (0..backbone_layers).map(pair).collect(),
            latent: pair(backbone_layers),
            head: pair(backbone_layers + 1),
            classifier: (vars.len() > fixed).then(|| pair(backbone_layers + 2)),
        })
    }
}

pub fn init_params(seed: u64, dims: &ModelDims) -> Result<ModelParams> {
    if dims.input_dim == 0 || dims.hidden == 0 || dims.latent == 0 || dims.head_k == 0 {
        return Err(Error::contract(format!("model dimensions must be positive: {dims:?}")));
    }
    let root = Rng::new(seed);
    let backbone = vec![
        Linear::glorot(dims.input_dim, dims.hidden, &mut root.fork(0))?,
        Linear::glorot(dims.hidden, dims.hidden, &mut root.fork(1))?,
    ];
    let latent = Linear::glorot(dims.hidden, dims.latent, &mut root.fork(2))?;
    let head = Linear::zeros(dims.latent, dims.head_k)?;
    let classifier = match dims.classes {
        Some(c) => Some(Linear::glorot(dims.latent, c, &mut root.fork(4))?),
        None => None,
    };
    Ok(ModelParams {
        backbone,
        latent,
        head,
        classifier,
    })
}

/// Flattens images into an `n × (h·w·3)` input matrix, pixels mapped to `[-1, 1]`.
pub fn images_to_input<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut width = None;
    for img in images {
        if *width.get_or_insert(img.len()) != img.len() {
            return Err(Error::Shape {
                op: "images_to_input",
                left: vec![width.unwrap_or(0)],
                right: vec![img.len()],
            });
        }
        data.extend(img.pixels().iter().map(|p| 2.0 * p - 1.0));
        rows += 1;
    }
    match width {
        Some(w) => Tensor::matrix(rows, w, data),
        None => Err(Error::contract("no images to flatten")),
    }
}

impl ModelParams {
    pub fn input_dim(&self) -> usize {
        self.backbone[0].fan_in()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent.fan_out()
    }

    pub fn head_k(&self) -> usize {
        self.head.fan_out()
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input_dim: self.input_dim(),
            hidden: self.backbone[0].fan_out(),
            latent: self.latent_dim(),
            head_k: self.head_k(),
            classes: self.classifier.as_ref().map(Linear::fan_out),
        }
    }

    /// Replaces the task head with a zero `latent × k` layer unless it already
    /// has width `k`. A zero head starts every pretext task at loss `ln k`.
    pub fn ensure_head(&mut self, k: usize) -> Result<()> {
        if k > 0 && self.head_k() != k {
            self.head = Linear::zeros(self.latent_dim(), k)?;
        }
        Ok(())
    }

    /// Every tensor with its checkpoint name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.iter().enumerate() {
            out.push((format!("bb.{i}.weight"), &l.weight));
            out.push((format!("bb.{i}.bias"), &l.bias));
        }
        out.push(("sn.weight".into(), &self.latent.weight));
        out.push(("sn.bias".into(), &self.latent.bias));
        out.push(("a.weight".into(), &self.head.weight));
        out.push(("a.bias".into(), &self.head.bias));
        if let Some(c) = &self.classifier {
            out.push(("cls.weight".into(), &c.weight));
            out.push(("cls.bias".into(), &c.bias));
        }
        out
    }

    /// Trainable tensors with their learning-rate group. The classifier is
    /// included only when `with_classifier` is set (pretraining).
    pub fn trainable_mut(&mut self, with_classifier: bool) -> Vec<(Group, &mut Tensor)> {
        let mut out = Vec::new();
        for l in &mut self.backbone {
            out.push((Group::Backbone, &mut l.weight));
            out.push((Group::Backbone, &mut l.bias));
        }
        out.push((Group::Head, &mut self.latent.weight));
        out.push((Group::Head, &mut self.latent.bias));
        out.push((Group::Head, &mut self.head.weight));
        out.push((Group::Head, &mut self.head.bias));
        if with_classifier {
            if let Some(c) = &mut self.classifier {
                out.push((Group::Head, &mut c.weight));
                out.push((Group::Head, &mut c.bias));
            }
        }
        out
    }

    /// Names of the backbone group and the head group.
    pub fn parameter_groups(&self, with_classifier: bool) -> (Vec<String>, Vec<String>) {
        let mut backbone = Vec::new();
        let mut head = Vec::new();
        for (name, _) in self.named_tensors() {
            if name.starts_with("bb.") {
                backbone.push(name);
            } else if with_classifier || !name.starts_with("cls.") {
                head.push(name);
            }
        }
        (backbone, head)
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Bit-for-bit equality of every tensor.
    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        let a = self.named_tensors();
        let b = other.named_tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }

    /// Records the parameters on `tape` as gradient-requiring leaves.
    pub fn bind(&self, tape: &mut Tape, with_classifier: bool) -> BoundParams {
        let mut pair = |l: &Linear| (tape.param(&l.weight), tape.param(&l.bias));
        let backbone = self.backbone.iter().map(&mut pair).collect();
        let latent = pair(&self.latent);
        let head = pair(&self.head);
        let classifier = if with_classifier {
            self.classifier.as_ref().map(&mut pair)
        } else {
            None
        };
        BoundParams {
            backbone,
            latent,
            head,
            classifier,
        }
    }

    /// Moves gradients from a finished backward pass into the tensors'
    /// `grad` fields.
    pub fn store_grads(&mut self, bound: &BoundParams, grads: &mut Gradients) -> Result<()> {
        let mut store = |l: &mut Linear, (w, b): (Var, Var)| -> Result<()> {
            grads.write_into(w, &mut l.weight)?;
            grads.write_into(b, &mut l.bias)
        };
        for (l, vars) in self.backbone.iter_mut().zip(&bound.backbone) {
            store(l, *vars)?;
        }
        store(&mut self.latent, bound.latent)?;
        store(&mut self.head, bound.head)?;
        if let (Some(c), Some(vars)) = (self.classifier.as_mut(), bound.classifier) {
            store(c, vars)?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for (_, t) in self.trainable_mut(true) {
            t.clear_grad();
        }
    }

    /// Backbone features without a tape.
    pub fn backbone_features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let mut h = x.clone();
        for layer in &self.backbone {
            h = layer.apply(&h)?;
            kernels::relu(h.data_mut());
        }
        Ok(h)
    }

    /// Retrieval-space embeddings without a tape; identical to the taped
    /// forward pass bit for bit.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.backbone_features(x)?;
        self.latent.apply(&g)
    }

    /// Classifier logits without a tape.
    pub fn classify(&self, x: &Tensor) -> Result<Tensor> {
        let c = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::contract("model has no classifier"))?;
        c.apply(&self.embed(x)?)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 || shape[1] != self.input_dim() {
            return Err(Error::Shape {
                op: "forward_backbone",
                left: shape.to_vec(),
                right: vec![self.input_dim()],
            });
        }
        Ok(())
    }
}

fn linear(tape: &mut Tape, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// `g = relu(relu(x·W1 + b1)·W2 + b2)`
pub fn forward_backbone(tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
    let expected = tape.shape(p.backbone[0].0)[0];
    let xs = tape.shape(x);
    if xs.len() != 2 || xs[1] != expected {
        return Err(Error::Shape {
            op: "forward_backbone",
            left: xs.to_vec(),
            right: vec![expected],
        });
    }
    let mut h = x;
    for layer in &p.backbone {
        let z = linear(tape, h, *layer)?;
        h = tape.relu(z);
    }
    Ok(h)
}

/// `f = g·W_sn + b_sn`, the retrieval-space embedding.
pub fn forward_latent(tape: &mut Tape, p: &BoundParams, g: Var) -> Result<Var> {
    linear(tape, g, p.latent)
}

/// `h = f·W_a + b_a`; `k` must match the head width.
pub fn forward_head(tape: &mut Tape, p: &BoundParams, f: Var, k: usize) -> Result<Var> {
    let width = tape.shape(p.head.1)[0];
    if width != k {
        return Err(Error::contract(format!("task expects {k} logits but the head has {width}")));
    }
    linear(tape, f, p.head)
}

pub fn forward_classifier(tape: &mut Tape, p: &BoundParams, f: Var) -> Result<Var> {
    let c = p
        .classifier
        .ok_or_else(|| Error::contract("classifier not bound on this tape"))?;
    linear(tape, f, c)
}

use super::{kernels, matmul_dims, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Transpose(Var),
    Sum(Var),
    Standardize {
        input: Var,
        mean: Vec<f64>,
        std: Vec<f64>,
        eps: f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

/// Records operations in execution order so they can be replayed backwards.
///
/// Nodes only ever reference earlier nodes, so the node list is already a
/// topological order. A tape supports exactly one [`Tape::backward`] call.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`; `None` for values that do not
    /// require a gradient.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Moves the gradient for `var` into `tensor.grad`.
    pub fn write_into(&mut self, var: Var, tensor: &mut Tensor) -> Result<()> {
        let g = self
            .grads
            .get_mut(var.0)
            .and_then(Option::take)
            .ok_or_else(|| Error::contract(format!("no gradient recorded for node {}", var.0)))?;
        tensor.set_grad(g)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).requires_grad)
    }

    /// Records a copy of `t`, honouring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), t.requires_grad)
    }

    /// Records a copy of `t` that always participates in backward.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), true)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; m * n];
        kernels::matmul(m, k, n, self.value(a), self.value(b), &mut out);
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), vec![m, n], out, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.grad_of(&[a, b]);
        self.push(op, shape, data, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut data = self.value(a).to_vec();
        kernels::relu(&mut data);
        let shape = self.shape(a).to_vec();
        let rg = self.grad_of(&[a]);
        self.push(Op::Relu(a), shape, data, rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let data = self.value(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.grad_of(&[a]);
        self.push(Op::Scale(a, factor), shape, data, rg)
    }

    /// Adds a length-q bias vector to every row of an n×q matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(bias);
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(Error::Shape {
                op: "add_bias",
                left: xs.to_vec(),
                right: bs.to_vec(),
            });
        }
        let mut data = self.value(x).to_vec();
        kernels::add_bias(&mut data, self.value(bias));
        let shape = xs.to_vec();
        let rg = self.grad_of(&[x, bias]);
        Ok(self.push(Op::AddBias(x, bias), shape, data, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                left: s.to_vec(),
                right: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.grad_of(&[a]);
        Ok(self.push(Op::Transpose(a), vec![c, r], data, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().sum();
        let rg = self.grad_of(&[a]);
        self.push(Op::Sum(a), vec![1], vec![total], rg)
    }

    /// Per-column `(z - mean) / (std + eps)` with the population standard
    /// deviation.
    pub fn standardize_columns(&mut self, z: Var, eps: f64) -> Result<Var> {
        let s = self.shape(z);
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "standardize_columns",
                left: s.to_vec(),
                right: vec![],
            });
        }
        let (n, m) = (s[0], s[1]);
        if n < 2 {
            return Err(Error::DegenerateBatch {
                op: "standardize_columns",
                rows: n,
            });
        }
        let src = self.value(z);
        let nf = n as f64;
        let mut mean = vec![0.0; m];
        for row in src.chunks_exact(m) {
            for (acc, v) in mean.iter_mut().zip(row) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= nf);
        let mut var = vec![0.0; m];
        for row in src.chunks_exact(m) {
            for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - mu;
                *acc += d * d;
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / nf).sqrt()).collect();
        let mut data = vec![0.0; n * m];
        for (out, row) in data.chunks_exact_mut(m).zip(src.chunks_exact(m)) {
            for j in 0..m {
                out[j] = (row[j] - mean[j]) / (std[j] + eps);
            }
        }
        let rg = self.grad_of(&[z]);
        Ok(self.push(
            Op::Standardize {
                input: z,
                mean,
                std,
                eps,
            },
            vec![n, m],
            data,
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: s.to_vec(),
                right: vec![labels.len()],
            });
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label {
                label: bad,
                classes: k,
            });
        }
        let src = self.value(logits);
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for ((row, p), &label) in src.chunks_exact(k).zip(probs.chunks_exact_mut(k)).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (pj, x) in p.iter_mut().zip(row) {
                *pj = (x - max).exp();
                denom += *pj;
            }
            p.iter_mut().for_each(|v| *v /= denom);
            total += denom.ln() + (max - row[label]);
        }
        let loss = total / n as f64;
        let rg = self.grad_of(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            vec![1],
            vec![loss],
            rg,
        ))
    }

    /// Back-propagates from a scalar `loss`, consuming the tape.
    ///
    /// Every node that requires a gradient gets one in the result, zero if
    /// the loss does not depend on it.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract("loss was not recorded on this tape"));
        }
        if self.node(loss).data.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.node(loss).requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if node.requires_grad && g.is_none() {
                *g = Some(vec![0.0; node.data.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.node(*a).requires_grad {
                    let da = slot(grads, *a, m * k);
                    kernels::matmul_a_bt_acc(m, n, k, g, self.value(*b), da);
                }
                if self.node(*b).requires_grad {
                    let db = slot(grads, *b, k * n);
                    kernels::matmul_at_b_acc(k, m, n, self.value(*a), g, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.iter().copied());
                self.accumulate(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.iter().copied());
                self.accumulate(grads, *b, g.iter().map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.iter().zip(bv).map(|(g, y)| g * y));
                self.accumulate(grads, *b, g.iter().zip(av).map(|(g, x)| g * x));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                self.accumulate(
                    grads,
                    *a,
                    g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }),
                );
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, g.iter().map(|v| v * s));
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.iter().copied());
                if self.node(*bias).requires_grad {
                    let q = self.shape(*bias)[0];
                    let db = slot(grads, *bias, q);
                    for row in g.chunks_exact(q) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                // g is c×r
                let t = (0..r * c).map(|idx| {
                    let (i, j) = (idx / c, idx % c);
                    g[j * r + i]
                });
                self.accumulate(grads, *a, t);
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                self.accumulate(grads, *a, std::iter::repeat_n(g[0], len));
            }
            Op::Standardize {
                input,
                mean,
                std,
                eps,
            } => {
                if !self.node(*input).requires_grad {
                    return;
                }
                let (n, m) = (self.shape(*input)[0], self.shape(*input)[1]);
                let z = self.value(*input);
                let nf = n as f64;
                let mut dz = vec![0.0; n * m];
                for j in 0..m {
                    let s = std[j] + eps;
                    let mut sum_g = 0.0;
                    let mut sum_gd = 0.0;
                    for i in 0..n {
                        let gi = g[i * m + j];
                        sum_g += gi;
                        sum_gd += gi * (z[i * m + j] - mean[j]);
                    }
                    for i in 0..n {
                        let d = z[i * m + j] - mean[j];
                        let mut v = (g[i * m + j] - sum_g / nf) / s;
                        if std[j] > 0.0 {
                            v -= sum_gd / (s * s) * d / (nf * std[j]);
                        }
                        dz[i * m + j] = v;
                    }
                }
                self.accumulate(grads, *input, dz.into_iter());
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let n = labels.len() as f64;
                let scale = g[0] / n;
                let d = probs.iter().enumerate().map(|(idx, p)| {
                    let onehot = if labels[idx / k] == idx % k { 1.0 } else { 0.0 };
                    (p - onehot) * scale
                });
                self.accumulate(grads, *logits, d);
            }
        }
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: Var,
        contrib: impl Iterator<Item = f64>,
    ) {
        if !self.node(target).requires_grad {
            return;
        }
        let len = self.node(target).data.len();
        for (acc, v) in slot(grads, target, len).iter_mut().zip(contrib) {
            *acc += v;
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

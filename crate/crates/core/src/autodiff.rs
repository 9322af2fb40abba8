//! Reverse-mode differentiation over batched matrix operations.
//!
//! A [`Tape`] records every primitive as it is evaluated. Leaves are either
//! parameters (which receive gradients) or constants (which never do). Values
//! are row-major [`Tensor`]s, rows indexing samples and columns features.

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softplus, Real, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Sin(Var),
    Cos(Var),
    ConcatCols(Vec<Var>),
    RepeatRows(Var, usize),
    Sum(Var),
    /// Per-ray `Σ_i w_i h_i` with `w_i = T_i (1 - exp(-σ_i δ_i))`.
    /// `sigma` is `(rays·samples) x 1`, `h` is `(rays·samples) x C`.
    VolumeIntegrate {
        sigma: Var,
        h: Var,
        delta: Tensor<T>,
        samples: usize,
    },
    /// `Σ weight ⊙ (pred - target)² / denom`, weight and target constant.
    WeightedSquaredError {
        pred: Var,
        target: Tensor<T>,
        weight: Tensor<T>,
        denom: T,
    },
    /// Mean of squares over the listed flat element indices (0 if none).
    MeanSquareSelected { x: Var, index: Vec<usize> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::Exp(_) => "exp",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::ConcatCols(_) => "concat_cols",
            Op::RepeatRows(..) => "repeat_rows",
            Op::Sum(_) => "sum",
            Op::VolumeIntegrate { .. } => "volume_integrate",
            Op::WeightedSquaredError { .. } => "weighted_squared_error",
            Op::MeanSquareSelected { .. } => "mean_square_selected",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a computation, differentiable with [`Tape::backward`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<T>) -> Var {
        let value = compute(&op, &self.nodes);
        self.push_value(op, value)
    }

    fn push_value(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Param(_) => true,
            other => inputs(other).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_value(Op::Constant, value)
    }

    /// A trainable leaf; its gradient lands in slot `index` of [`Gradients`].
    pub fn param(&mut self, index: usize, value: Tensor<T>) -> Var {
        self.push_value(Op::Param(index), value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).cols, self.value(b).rows, "matmul shapes");
        self.push(Op::MatMul(a, b))
    }

    /// `x + b` with `b` a `1 x cols` row broadcast over the rows of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        assert_eq!(self.value(b).rows, 1, "bias must be a row vector");
        assert_eq!(self.value(x).cols, self.value(b).cols, "bias width");
        self.push(Op::AddBias(x, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        self.push(Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.push(Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.push(Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.push(Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.push(Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.push(Op::Cos(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        assert!(
            parts.iter().all(|p| self.value(*p).rows == rows),
            "concat row counts"
        );
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    /// Repeats every row `times` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        self.push(Op::RepeatRows(a, times))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a))
    }

    /// Volume integration along rays. `delta` is a constant `rays x samples`
    /// tensor of segment lengths; gradients flow into `sigma` and `h` only.
    pub fn volume_integrate(&mut self, sigma: Var, h: Var, delta: Tensor<T>) -> Result<Var> {
        let samples = delta.cols;
        let n = delta.rows * samples;
        if self.value(sigma).shape() != (n, 1) || self.value(h).rows != n {
            return Err(Error::shape(format!(
                "volume_integrate: sigma {:?}, h {:?}, delta {:?}",
                self.value(sigma).shape(),
                self.value(h).shape(),
                delta.shape()
            )));
        }
        if delta.data.iter().any(|d| *d <= T::zero()) {
            return Err(Error::invalid("volume_integrate: non-positive segment length"));
        }
        Ok(self.push(Op::VolumeIntegrate {
            sigma,
            h,
            delta,
            samples,
        }))
    }

    /// Squared error weighted elementwise by a constant, divided by `denom`.
    pub fn weighted_squared_error(
        &mut self,
        pred: Var,
        target: Tensor<T>,
        weight: Tensor<T>,
        denom: T,
    ) -> Result<Var> {
        let shape = self.value(pred).shape();
        if target.shape() != shape || weight.shape() != shape {
            return Err(Error::shape(format!(
                "weighted_squared_error: pred {:?}, target {:?}, weight {:?}",
                shape,
                target.shape(),
                weight.shape()
            )));
        }
        Ok(self.push(Op::WeightedSquaredError {
            pred,
            target,
            weight,
            denom,
        }))
    }

    pub fn mean_square_selected(&mut self, x: Var, index: Vec<usize>) -> Var {
        let len = self.value(x).len();
        assert!(index.iter().all(|&i| i < len), "selection out of range");
        self.push(Op::MeanSquareSelected { x, index })
    }

    /// Recomputes every non-leaf value from the leaves and reports whether the
    /// result matches the recorded values bit for bit.
    pub fn replay_matches(&self) -> bool {
        let mut fresh: Vec<Node<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Constant | Op::Param(_) => node.value.clone(),
                _ => compute(&node.op, &fresh),
            };
            if value.data.iter().map(|v| v.f64().to_bits()).ne(node
                .value
                .data
                .iter()
                .map(|v| v.f64().to_bits()))
            {
                return false;
            }
            fresh.push(Node {
                value,
                op: node.op.clone(),
                requires_grad: node.requires_grad,
            });
        }
        true
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    /// `param_shapes` sizes the output; parameters absent from the tape get
    /// zero gradients.
    pub fn backward(&self, loss: Var, param_shapes: &[(usize, usize)]) -> Result<Gradients<T>> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads = Gradients::zeros(param_shapes);
        if !self.nodes[loss.0].requires_grad {
            return Ok(grads);
        }
        let mut adj: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Param(slot) = node.op {
                let dst = grads
                    .tensors
                    .get_mut(slot)
                    .ok_or_else(|| Error::shape(format!("parameter slot {slot} out of range")))?;
                if dst.shape() != g.shape() {
                    return Err(Error::shape(format!(
                        "parameter slot {slot}: gradient {:?} vs declared {:?}",
                        g.shape(),
                        dst.shape()
                    )));
                }
                dst.add_assign(&g);
                continue;
            }
            for (input, contribution) in self.local_backward(i, &g) {
                if !contribution.all_finite() {
                    return Err(Error::non_finite(format!(
                        "gradient through {} (node {i})",
                        node.op.name()
                    )));
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(grads)
    }

    /// Vector-Jacobian products of node `i` for each input that needs one.
    fn local_backward(&self, i: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    let mut da = Tensor::zeros(av.rows, av.cols);
                    Tensor::gemm_into(T::one(), g, false, bv, true, T::zero(), &mut da);
                    out.push((*a, da));
                }
                if needs(*b) {
                    let mut db = Tensor::zeros(bv.rows, bv.cols);
                    Tensor::gemm_into(T::one(), av, true, g, false, T::zero(), &mut db);
                    out.push((*b, db));
                }
            }
            Op::AddBias(x, b) => {
                if needs(*b) {
                    let mut db = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (acc, &v) in db.data.iter_mut().zip(g.row(r)) {
                            *acc = *acc + v;
                        }
                    }
                    out.push((*b, db));
                }
                if needs(*x) {
                    out.push((*x, g.clone()));
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    out.push((*a, g.clone()));
                }
                if needs(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.map(|v| v * *s))),
            Op::Relu(a) => out.push((*a, zip_map(g, &node.value, |g, y| {
                if y > T::zero() {
                    g
                } else {
                    T::zero()
                }
            }))),
            Op::Softplus(a) => out.push((*a, zip_map(g, val(*a), |g, x| g * sigmoid(x)))),
            Op::Exp(a) => out.push((*a, zip_map(g, &node.value, |g, y| g * y))),
            Op::Sin(a) => out.push((*a, zip_map(g, val(*a), |g, x| g * x.cos()))),
            Op::Cos(a) => out.push((*a, zip_map(g, val(*a), |g, x| -g * x.sin()))),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let width = val(*p).cols;
                    if needs(*p) {
                        let mut d = Tensor::zeros(g.rows, width);
                        for r in 0..g.rows {
                            d.data[r * width..(r + 1) * width]
                                .copy_from_slice(&g.row(r)[offset..offset + width]);
                        }
                        out.push((*p, d));
                    }
                    offset += width;
                }
            }
            Op::RepeatRows(a, times) => {
                let av = val(*a);
                let mut d = Tensor::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    for k in 0..*times {
                        let src = g.row(r * times + k);
                        for (acc, &v) in d.data[r * av.cols..(r + 1) * av.cols].iter_mut().zip(src) {
                            *acc = *acc + v;
                        }
                    }
                }
                out.push((*a, d));
            }
            Op::Sum(a) => {
                let av = val(*a);
                out.push((*a, Tensor::filled(av.rows, av.cols, g.data[0])));
            }
            Op::VolumeIntegrate {
                sigma,
                h,
                delta,
                samples,
            } => {
                let (sv, hv) = (val(*sigma), val(*h));
                let (ds, dh) = volume_integrate_backward(sv, hv, delta, *samples, g);
                if needs(*sigma) {
                    out.push((*sigma, ds));
                }
                if needs(*h) {
                    out.push((*h, dh));
                }
            }
            Op::WeightedSquaredError {
                pred,
                target,
                weight,
                denom,
            } => {
                let pv = val(*pred);
                let scale = g.data[0] * T::of(2.0) / *denom;
                let mut d = Tensor::zeros(pv.rows, pv.cols);
                for (k, dv) in d.data.iter_mut().enumerate() {
                    *dv = scale * weight.data[k] * (pv.data[k] - target.data[k]);
                }
                out.push((*pred, d));
            }
            Op::MeanSquareSelected { x, index } => {
                let xv = val(*x);
                let mut d = Tensor::zeros(xv.rows, xv.cols);
                if !index.is_empty() {
                    let scale = g.data[0] * T::of(2.0) / T::of(index.len() as f64);
                    for &k in index {
                        d.data[k] = d.data[k] + scale * xv.data[k];
                    }
                }
                out.push((*x, d));
            }
        }
        out
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Constant | Op::Param(_) => vec![],
        Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Relu(a)
        | Op::Softplus(a)
        | Op::Exp(a)
        | Op::Sin(a)
        | Op::Cos(a)
        | Op::RepeatRows(a, _)
        | Op::Sum(a) => vec![*a],
        Op::ConcatCols(parts) => parts.clone(),
        Op::VolumeIntegrate { sigma, h, .. } => vec![*sigma, *h],
        Op::WeightedSquaredError { pred, .. } => vec![*pred],
        Op::MeanSquareSelected { x, .. } => vec![*x],
    }
}

fn compute<T: Real>(op: &Op<T>, nodes: &[Node<T>]) -> Tensor<T> {
    let val = |v: &Var| &nodes[v.0].value;
    match op {
        Op::Constant | Op::Param(_) => unreachable!("leaves carry their own values"),
        Op::MatMul(a, b) => val(a).matmul(val(b)),
        Op::AddBias(x, b) => {
            let (xv, bv) = (val(x), val(b));
            let mut out = xv.clone();
            for r in 0..out.rows {
                for (o, &bb) in out.data[r * out.cols..(r + 1) * out.cols]
                    .iter_mut()
                    .zip(&bv.data)
                {
                    *o = *o + bb;
                }
            }
            out
        }
        Op::Add(a, b) => zip_map(val(a), val(b), |x, y| x + y),
        Op::Scale(a, s) => val(a).map(|x| x * *s),
        Op::Relu(a) => val(a).map(|x| if x > T::zero() { x } else { T::zero() }),
        Op::Softplus(a) => val(a).map(softplus),
        Op::Exp(a) => val(a).map(|x| x.exp()),
        Op::Sin(a) => val(a).map(|x| x.sin()),
        Op::Cos(a) => val(a).map(|x| x.cos()),
        Op::ConcatCols(parts) => {
            let rows = val(&parts[0]).rows;
            let cols: usize = parts.iter().map(|p| val(p).cols).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(val(p).row(r));
                }
            }
            Tensor::from_vec(rows, cols, data)
        }
        Op::RepeatRows(a, times) => {
            let av = val(a);
            let mut data = Vec::with_capacity(av.len() * times);
            for r in 0..av.rows {
                for _ in 0..*times {
                    data.extend_from_slice(av.row(r));
                }
            }
            Tensor::from_vec(av.rows * times, av.cols, data)
        }
        Op::Sum(a) => Tensor::scalar(val(a).data.iter().copied().sum()),
        Op::VolumeIntegrate {
            sigma,
            h,
            delta,
            samples,
        } => volume_integrate_forward(val(sigma), val(h), delta, *samples),
        Op::WeightedSquaredError {
            pred,
            target,
            weight,
            denom,
        } => {
            let pv = val(pred);
            let mut acc = T::zero();
            for k in 0..pv.len() {
                let d = pv.data[k] - target.data[k];
                acc = acc + weight.data[k] * d * d;
            }
            Tensor::scalar(acc / *denom)
        }
        Op::MeanSquareSelected { x, index } => {
            let xv = val(x);
            if index.is_empty() {
                return Tensor::scalar(T::zero());
            }
            let acc: T = index.iter().map(|&k| xv.data[k] * xv.data[k]).sum();
            Tensor::scalar(acc / T::of(index.len() as f64))
        }
    }
}

fn volume_integrate_forward<T: Real>(
    sigma: &Tensor<T>,
    h: &Tensor<T>,
    delta: &Tensor<T>,
    samples: usize,
) -> Tensor<T> {
    let rays = delta.rows;
    let c = h.cols;
    let mut out = Tensor::zeros(rays, c);
    for r in 0..rays {
        let mut trans = T::one();
        for i in 0..samples {
            let k = r * samples + i;
            let att = (-sigma.data[k] * delta.data[k]).exp();
            let w = trans * (T::one() - att);
            for ch in 0..c {
                let o = out.at_mut(r, ch);
                *o = *o + w * h.at(k, ch);
            }
            trans = trans * att;
        }
    }
    out
}

/// With `τ_i = σ_i δ_i` and `T_{i+1} = T_i e^{-τ_i}`:
/// `∂w_i/∂σ_i = δ_i T_{i+1}` and `∂w_k/∂σ_i = -δ_i w_k` for `k > i`.
fn volume_integrate_backward<T: Real>(
    sigma: &Tensor<T>,
    h: &Tensor<T>,
    delta: &Tensor<T>,
    samples: usize,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let rays = delta.rows;
    let c = h.cols;
    let mut dsigma = Tensor::zeros(sigma.rows, 1);
    let mut dh = Tensor::zeros(h.rows, c);
    let mut w = vec![T::zero(); samples];
    let mut t_next = vec![T::zero(); samples];
    let mut gh = vec![T::zero(); samples];
    for r in 0..rays {
        let gr = g.row(r);
        let mut trans = T::one();
        for i in 0..samples {
            let k = r * samples + i;
            let att = (-sigma.data[k] * delta.data[k]).exp();
            w[i] = trans * (T::one() - att);
            trans = trans * att;
            t_next[i] = trans;
            gh[i] = (0..c).map(|ch| gr[ch] * h.at(k, ch)).sum();
            for ch in 0..c {
                *dh.at_mut(k, ch) = gr[ch] * w[i];
            }
        }
        let mut suffix = T::zero();
        for i in (0..samples).rev() {
            let k = r * samples + i;
            dsigma.data[k] = delta.data[k] * (t_next[i] * gh[i] - suffix);
            suffix = suffix + w[i] * gh[i];
        }
    }
    (dsigma, dh)
}

/// Per-parameter gradients, in the same order as the parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros(shapes: &[(usize, usize)]) -> Self {
        Gradients {
            tensors: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
        }
    }

    /// Adds `other` scaled by `s`, in a fixed element order.
    pub fn accumulate(&mut self, other: &Gradients<T>, s: T) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x = *x + s * y;
            }
        }
    }

    pub fn norm(&self, range: std::ops::Range<usize>) -> f64 {
        self.tensors[range]
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}

use super::tensor::{matmul_a_bt, matmul_at_b};
use super::{NumericsError, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// BatchNorm behaviour: batch statistics in training, running statistics at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running mean/variance of a BatchNorm layer. Initialized to mean 0, variance 1.
#[derive(Clone, Debug, PartialEq)]
pub struct BnRunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnRunningStats<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![T::zero(); dim],
            var: vec![T::one(); dim],
        }
    }

    /// Exponential moving average update with the batch's mean and unbiased variance.
    pub fn update(&mut self, batch: &BnBatchStats<T>, momentum: T) {
        let keep = T::one() - momentum;
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + momentum * *b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var_unbiased) {
            *r = keep * *r + momentum * *b;
        }
    }
}

/// Statistics of one train-mode BatchNorm call, to be folded into running stats.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

type CustomBackward<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &[T]) -> Vec<Vec<T>> + Send + Sync>;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    Relu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        mode: BnMode,
    },
    ConcatCols(Vec<Var>),
    ScaleRows(Var, Vec<T>),
    Transpose(Var),
    Cosine {
        x: Var,
        y: Var,
        x_norm: Vec<T>,
        y_norm: Vec<T>,
    },
    InvTemperature(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Custom(Vec<Var>, CustomBackward<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode recording of a forward computation.
///
/// Values are appended in evaluation order; [`Tape::backward`] replays the
/// records in reverse and leaves each node's gradient in its tensor's grad slot.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> NumericsError {
    NumericsError::Shape(format!("{what}: incompatible shapes {a:?} and {b:?}"))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: receives a gradient on backward.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let mut value = value;
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input leaf: no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        let mut value = value;
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient left by the last [`Tape::backward`]. Trainable leaves that the
    /// loss does not depend on report zeros; untouched interior nodes report `None`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.clear_grad();
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av
            .matmul(bv)
            .map_err(|_| shape_err("matmul", av.shape(), bv.shape()))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a length-`m` bias to every row of an `n×m` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.shape().len() != 2 || bv.len() != xv.cols() {
            return Err(shape_err("add_bias", xv.shape(), bv.shape()));
        }
        let m = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(m) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| *x + *y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| *v * c).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.max(T::zero())).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Relu(x), &[x])
    }

    /// Batch normalization over the rows of a `batch×dim` matrix.
    ///
    /// Train mode normalizes by the biased batch variance and returns the batch
    /// statistics; the caller folds them into `stats` with [`BnRunningStats::update`].
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &BnRunningStats<T>,
        mode: BnMode,
    ) -> Result<(Var, Option<BnBatchStats<T>>), NumericsError> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(NumericsError::Shape(format!(
                "batchnorm expects a matrix, got {:?}",
                xv.shape()
            )));
        }
        let (n, d) = (xv.rows(), xv.cols());
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != d || bv.len() != d || stats.mean.len() != d || stats.var.len() != d {
            return Err(shape_err("batchnorm", xv.shape(), gv.shape()));
        }
        let eps = T::lit(BN_EPS);
        let (mean, var) = match mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(NumericsError::Config(
                        "batchnorm in train mode needs a batch of at least 2 rows".into(),
                    ));
                }
                let nf = T::lit(n as f64);
                let mut mean = vec![T::zero(); d];
                for row in xv.data().chunks(d) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m = *m + *v;
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / nf);
                let mut var = vec![T::zero(); d];
                for row in xv.data().chunks(d) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        let c = *v - *m;
                        *s = *s + c * c;
                    }
                }
                var.iter_mut().for_each(|s| *s = *s / nf);
                (mean, var)
            }
            BnMode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); n * d];
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            for j in 0..d {
                let h = (xv.data()[i * d + j] - mean[j]) * inv_std[j];
                xhat[i * d + j] = h;
                out[i * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let batch_stats = match mode {
            BnMode::Train => {
                let corr = T::lit(n as f64 / (n as f64 - 1.0));
                Some(BnBatchStats {
                    mean,
                    var_unbiased: var.iter().map(|v| *v * corr).collect(),
                })
            }
            BnMode::Eval => None,
        };
        let out = Tensor::matrix(n, d, out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            mode,
        };
        Ok((self.push(out, op, &[x, gamma, beta]), batch_stats))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::Shape("concat of zero tensors".into()))?;
        let n = self.value(*first).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        for p in parts {
            let v = self.value(*p);
            if v.shape().len() != 2 || v.rows() != n {
                return Err(shape_err(
                    "concat_cols",
                    self.value(*first).shape(),
                    v.shape(),
                ));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let out = Tensor::matrix(n, total, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Multiplies row `i` by the constant `weights[i]`.
    pub fn scale_rows(&mut self, x: Var, weights: &[T]) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || xv.rows() != weights.len() {
            return Err(shape_err("scale_rows", xv.shape(), &[weights.len()]));
        }
        let d = xv.cols();
        let mut data = xv.data().to_vec();
        for (row, w) in data.chunks_mut(d).zip(weights) {
            row.iter_mut().for_each(|v| *v = *v * *w);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::ScaleRows(x, weights.to_vec()), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(NumericsError::Shape(format!(
                "transpose expects a matrix, got {:?}",
                xv.shape()
            )));
        }
        let out = xv.transpose();
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    /// Pairwise cosine similarities between the rows of `x` (n×d) and `y` (m×d).
    ///
    /// Two vectors give a scalar. Zero-norm rows are rejected.
    pub fn cosine(&mut self, x: Var, y: Var) -> Result<Var, NumericsError> {
        let (xv, yv) = (self.value(x), self.value(y));
        if xv.shape().len() > 2 || yv.shape().len() > 2 || xv.cols() != yv.cols() {
            return Err(shape_err("cosine", xv.shape(), yv.shape()));
        }
        let (n, m, d) = (xv.rows(), yv.rows(), xv.cols());
        let norms = |t: &Tensor<T>, which: &str| -> Result<Vec<T>, NumericsError> {
            t.data()
                .chunks(d)
                .enumerate()
                .map(|(i, r)| {
                    let s = r.iter().map(|v| *v * *v).sum::<T>().sqrt();
                    if s > T::zero() {
                        Ok(s)
                    } else {
                        Err(NumericsError::ZeroNorm(format!("{which} row {i}")))
                    }
                })
                .collect()
        };
        let x_norm = norms(xv, "left")?;
        let y_norm = norms(yv, "right")?;
        let mut s = vec![T::zero(); n * m];
        matmul_a_bt(xv.data(), yv.data(), &mut s, n, d, m);
        for i in 0..n {
            for j in 0..m {
                s[i * m + j] = s[i * m + j] / (x_norm[i] * y_norm[j]);
            }
        }
        let shape = if xv.shape().len() < 2 && yv.shape().len() < 2 {
            Vec::new()
        } else {
            vec![n, m]
        };
        let out = Tensor::new(shape, s)?;
        let op = Op::Cosine {
            x,
            y,
            x_norm,
            y_norm,
        };
        Ok(self.push(out, op, &[x, y]))
    }

    /// `s · exp(-log_tau)`: divides similarities by a temperature held in log space.
    pub fn inv_temperature(&mut self, s: Var, log_tau: Var) -> Result<Var, NumericsError> {
        let (sv, lv) = (self.value(s), self.value(log_tau));
        if lv.len() != 1 {
            return Err(NumericsError::Shape(format!(
                "temperature must be a scalar, got {:?}",
                lv.shape()
            )));
        }
        let k = (-lv.item()).exp();
        let data = sv.data().iter().map(|v| *v * k).collect();
        let out = Tensor::new(sv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::InvTemperature(s, log_tau), &[s, log_tau]))
    }

    /// Mean softmax cross-entropy of `logits` (batch×C) against class indices.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
    ) -> Result<Var, NumericsError> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.rows() != labels.len() {
            return Err(shape_err(
                "softmax_cross_entropy",
                lv.shape(),
                &[labels.len()],
            ));
        }
        let (b, c) = (lv.rows(), lv.cols());
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(NumericsError::Index(format!(
                "label {l} at row {i} outside [0, {c})"
            )));
        }
        let mut probs = vec![T::zero(); b * c];
        let mut total = T::zero();
        for (i, row) in lv.data().chunks(c).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (*v - max).exp();
                z = z + *p;
            }
            probs[i * c..(i + 1) * c]
                .iter_mut()
                .for_each(|p| *p = *p / z);
            let lse = max + z.ln();
            total = total + (lse - row[labels[i]]);
        }
        let out = Tensor::scalar(total / T::lit(b as f64));
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(out, op, &[logits]))
    }

    /// Records an operation with a caller-supplied backward rule.
    ///
    /// `backward(inputs, output, grad_output)` returns one gradient per input.
    pub fn custom<F>(&mut self, inputs: &[Var], value: Tensor<T>, backward: F) -> Var
    where
        F: Fn(&[&Tensor<T>], &Tensor<T>, &[T]) -> Vec<Vec<T>> + Send + Sync + 'static,
    {
        self.push(
            value,
            Op::Custom(inputs.to_vec(), Box::new(backward)),
            inputs,
        )
    }

    /// Activation pattern of every ReLU on the tape, in recording order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(x) = n.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|v| *v > T::zero()));
            }
        }
        out
    }

    /// Reverse sweep from a scalar `loss`. Gradients land in each node's grad slot.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let count = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; count];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..count).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backward_node(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }

        for (idx, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[idx];
            match g {
                Some(g) => node.value.set_grad(g)?,
                None if node.requires_grad && matches!(node.op, Op::Leaf) => {
                    let n = node.value.len();
                    node.value.set_grad(vec![T::zero(); n])?
                }
                None => node.value.clear_grad(),
            }
        }
        for node in &mut self.nodes[count..] {
            node.value.clear_grad();
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if wants(*a) {
                    let da = slot(grads, *a, n * k);
                    matmul_a_bt(g, bv.data(), da, n, m, k);
                }
                if wants(*b) {
                    let db = slot(grads, *b, k * m);
                    matmul_at_b(av.data(), g, db, n, k, m);
                }
            }
            Op::AddBias(x, b) => {
                if wants(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if wants(*b) {
                    let m = self.value(*b).len();
                    let db = slot(grads, *b, m);
                    for row in g.chunks(m) {
                        add_into(db, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if wants(*b) {
                    add_into(slot(grads, *b, g.len()), g);
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    for (d, v) in slot(grads, *x, g.len()).iter_mut().zip(g) {
                        *d = *d + *v * *c;
                    }
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let xv = self.value(*x).data();
                    for ((d, v), xi) in slot(grads, *x, g.len()).iter_mut().zip(g).zip(xv) {
                        if *xi > T::zero() {
                            *d = *d + *v;
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let dim = inv_std.len();
                let n = g.len() / dim;
                let gv = self.value(*gamma).data();
                if wants(*beta) {
                    let db = slot(grads, *beta, dim);
                    for row in g.chunks(dim) {
                        add_into(db, row);
                    }
                }
                if wants(*gamma) {
                    let dg = slot(grads, *gamma, dim);
                    for (grow, hrow) in g.chunks(dim).zip(xhat.chunks(dim)) {
                        for ((d, gi), hi) in dg.iter_mut().zip(grow).zip(hrow) {
                            *d = *d + *gi * *hi;
                        }
                    }
                }
                if wants(*x) {
                    let dx = slot(grads, *x, n * dim);
                    match mode {
                        BnMode::Eval => {
                            for (i, (d, gi)) in dx.iter_mut().zip(g).enumerate() {
                                let j = i % dim;
                                *d = *d + *gi * gv[j] * inv_std[j];
                            }
                        }
                        BnMode::Train => {
                            let nf = T::lit(n as f64);
                            let mut sum_dh = vec![T::zero(); dim];
                            let mut sum_dh_h = vec![T::zero(); dim];
                            for i in 0..n {
                                for j in 0..dim {
                                    let dh = g[i * dim + j] * gv[j];
                                    sum_dh[j] = sum_dh[j] + dh;
                                    sum_dh_h[j] = sum_dh_h[j] + dh * xhat[i * dim + j];
                                }
                            }
                            for i in 0..n {
                                for j in 0..dim {
                                    let dh = g[i * dim + j] * gv[j];
                                    let v = inv_std[j] / nf
                                        * (nf * dh - sum_dh[j] - xhat[i * dim + j] * sum_dh_h[j]);
                                    dx[i * dim + j] = dx[i * dim + j] + v;
                                }
                            }
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if wants(*p) {
                        let n = self.value(*p).rows();
                        let dp = slot(grads, *p, n * w);
                        for i in 0..n {
                            add_into(
                                &mut dp[i * w..(i + 1) * w],
                                &g[i * total + offset..i * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::ScaleRows(x, weights) => {
                if wants(*x) {
                    let d = node.value.cols();
                    let dx = slot(grads, *x, g.len());
                    for ((drow, grow), w) in dx.chunks_mut(d).zip(g.chunks(d)).zip(weights) {
                        for (a, b) in drow.iter_mut().zip(grow) {
                            *a = *a + *b * *w;
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                    let dx = slot(grads, *x, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = dx[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            Op::Cosine {
                x,
                y,
                x_norm,
                y_norm,
            } => {
                let (xv, yv) = (self.value(*x).data(), self.value(*y).data());
                let s = node.value.data();
                let (n, m) = (x_norm.len(), y_norm.len());
                let d = xv.len() / n;
                // d s_ij / d x_i = (y_j/|y_j| - s_ij x_i/|x_i|) / |x_i|
                if wants(*x) {
                    let dx = slot(grads, *x, n * d);
                    for i in 0..n {
                        let xi = &xv[i * d..(i + 1) * d];
                        let mut coef_x = T::zero();
                        for j in 0..m {
                            let gij = g[i * m + j];
                            if gij == T::zero() {
                                continue;
                            }
                            coef_x = coef_x + gij * s[i * m + j];
                            let a = gij / (x_norm[i] * y_norm[j]);
                            let yj = &yv[j * d..(j + 1) * d];
                            for (o, yk) in dx[i * d..(i + 1) * d].iter_mut().zip(yj) {
                                *o = *o + a * *yk;
                            }
                        }
                        let b = coef_x / (x_norm[i] * x_norm[i]);
                        for (o, xk) in dx[i * d..(i + 1) * d].iter_mut().zip(xi) {
                            *o = *o - b * *xk;
                        }
                    }
                }
                if wants(*y) {
                    let dy = slot(grads, *y, m * d);
                    for j in 0..m {
                        let yj = &yv[j * d..(j + 1) * d];
                        let mut coef_y = T::zero();
                        for i in 0..n {
                            let gij = g[i * m + j];
                            if gij == T::zero() {
                                continue;
                            }
                            coef_y = coef_y + gij * s[i * m + j];
                            let a = gij / (x_norm[i] * y_norm[j]);
                            let xi = &xv[i * d..(i + 1) * d];
                            for (o, xk) in dy[j * d..(j + 1) * d].iter_mut().zip(xi) {
                                *o = *o + a * *xk;
                            }
                        }
                        let b = coef_y / (y_norm[j] * y_norm[j]);
                        for (o, yk) in dy[j * d..(j + 1) * d].iter_mut().zip(yj) {
                            *o = *o - b * *yk;
                        }
                    }
                }
            }
            Op::InvTemperature(s, log_tau) => {
                let k = (-self.value(*log_tau).item()).exp();
                if wants(*s) {
                    for (d, v) in slot(grads, *s, g.len()).iter_mut().zip(g) {
                        *d = *d + *v * k;
                    }
                }
                if wants(*log_tau) {
                    let out = node.value.data();
                    let acc: T = g.iter().zip(out).map(|(a, b)| *a * *b).sum();
                    let dl = slot(grads, *log_tau, 1);
                    dl[0] = dl[0] - acc;
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if wants(*logits) {
                    let b = labels.len();
                    let c = probs.len() / b;
                    let scale = g[0] / T::lit(b as f64);
                    let dl = slot(grads, *logits, b * c);
                    for i in 0..b {
                        for j in 0..c {
                            let onehot = if labels[i] == j { T::one() } else { T::zero() };
                            dl[i * c + j] = dl[i * c + j] + (probs[i * c + j] - onehot) * scale;
                        }
                    }
                }
            }
            Op::Custom(inputs, backward) => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let local = backward(&values, &node.value, g);
                for (v, lg) in inputs.iter().zip(local) {
                    if wants(*v) {
                        let n = self.value(*v).len();
                        add_into(slot(grads, *v, n), &lg);
                    }
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

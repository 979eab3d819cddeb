//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records primitive operations during the forward pass; nodes are
//! appended in execution order, so the tape is already topologically sorted.
//! [`Tape::backward`] sweeps the nodes once in reverse, accumulating the
//! gradient of a scalar loss with respect to every node it reaches.
//!
//! Trainable state lives outside the tape in [`Parameter`] values. A forward
//! pass registers each parameter's tensor as a leaf and remembers the
//! resulting [`NodeId`]; after `backward`, the caller pulls the leaf gradients
//! out of [`Gradients`] and accumulates them into the parameters it intends to
//! update. [`sgd_step`] then applies `tensor -= lr * grad` and zeroes the
//! consumed gradients.

use crate::tensor::{cross_entropy_value, softmax_temperature, Tensor};
use rand::Rng;

/// Floor applied to arguments of [`Tape::ln_clamped`].
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// [p,q] x [q,r] -> [p,r]
    MatMul { a: NodeId, b: NodeId },
    /// [p,q] x [q] -> [p]
    MatVec { m: NodeId, v: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    /// Elementwise product.
    Mul { a: NodeId, b: NodeId },
    /// Elementwise `mul * x + add`; only the slope matters going backward.
    Affine { x: NodeId, mul: f64 },
    /// Scalar node times tensor; gradients flow to both.
    ScaleBy { s: NodeId, x: NodeId },
    /// 1-D concatenation.
    Concat { a: NodeId, b: NodeId },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    /// Temperature softmax over a 1-D tensor.
    SoftmaxTau { x: NodeId, tau: f64 },
    /// `-log softmax(logits)[label]` as a scalar.
    CrossEntropy { logits: NodeId, label: usize },
    /// Elementwise `ln(max(x, LOG_CLAMP))`.
    LnClamped { x: NodeId },
    /// Single element of a 1-D tensor, as a scalar.
    Pick { x: NodeId, index: usize },
    /// Row of a 2-D tensor (embedding lookup).
    Row { m: NodeId, row: usize },
    /// Sum of scalar nodes.
    SumList { xs: Vec<NodeId> },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of a scalar loss with respect to every tape node it reaches.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient w.r.t. `node`, or `None` when the loss does not reach it.
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor> {
        self.grads.get(node.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[node.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Register an input tensor (parameter snapshot or constant) as a leaf.
    pub fn leaf(&mut self, value: &Tensor) -> NodeId {
        self.push(Op::Leaf, value.clone())
    }

    pub fn leaf_scalar(&mut self, v: f64) -> NodeId {
        self.push(Op::Leaf, Tensor::scalar(v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (p, q) = self.value(a).dims2();
        let (q2, r) = self.value(b).dims2();
        assert_eq!(q, q2, "matmul inner dimensions {q} vs {q2}");
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            for k in 0..q {
                let aik = av[i * q + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[k * r..(k + 1) * r];
                let orow = &mut out[i * r..(i + 1) * r];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += aik * b;
                }
            }
        }
        let t = Tensor::from_parts(vec![p, r], out);
        self.push(Op::MatMul { a, b }, t)
    }

    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> NodeId {
        let (p, q) = self.value(m).dims2();
        assert_eq!(
            self.value(v).shape(),
            &[q],
            "matvec expects vector of length {q}, got {:?}",
            self.value(v).shape()
        );
        let mv = self.value(m).data();
        let vv = self.value(v).data();
        let mut out = vec![0.0; p];
        for i in 0..p {
            let row = &mv[i * q..(i + 1) * q];
            out[i] = row.iter().zip(vv).map(|(a, b)| a * b).sum();
        }
        let t = Tensor::from_parts(vec![p], out);
        self.push(Op::MatVec { m, v }, t)
    }

    fn elementwise2(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> NodeId {
        assert!(
            self.value(a).same_shape(self.value(b)),
            "elementwise shape mismatch {:?} vs {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_parts(self.value(a).shape().to_vec(), out);
        self.push(op, t)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.elementwise2(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.elementwise2(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.elementwise2(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| mul * v + add).collect();
        let t = Tensor::from_parts(self.value(x).shape().to_vec(), out);
        self.push(Op::Affine { x, mul }, t)
    }

    pub fn scale_by(&mut self, s: NodeId, x: NodeId) -> NodeId {
        assert!(self.value(s).is_scalar(), "scale_by expects a scalar node");
        let sv = self.value(s).as_scalar();
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| sv * v).collect();
        let t = Tensor::from_parts(self.value(x).shape().to_vec(), out);
        self.push(Op::ScaleBy { s, x }, t)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape().len(), 1, "concat expects 1-D tensors");
        assert_eq!(self.value(b).shape().len(), 1, "concat expects 1-D tensors");
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        let n = out.len();
        let t = Tensor::from_parts(vec![n], out);
        self.push(Op::Concat { a, b }, t)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let t = Tensor::from_parts(self.value(x).shape().to_vec(), out);
        self.push(Op::Sigmoid { x }, t)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| v.tanh()).collect();
        let t = Tensor::from_parts(self.value(x).shape().to_vec(), out);
        self.push(Op::Tanh { x }, t)
    }

    /// Temperature softmax; panics on `tau <= 0`.
    pub fn softmax_tau(&mut self, x: NodeId, tau: f64) -> NodeId {
        assert_eq!(self.value(x).shape().len(), 1, "softmax expects a 1-D tensor");
        let out = softmax_temperature(self.value(x).data(), tau);
        let t = Tensor::from_parts(self.value(x).shape().to_vec(), out);
        self.push(Op::SoftmaxTau { x, tau }, t)
    }

    /// `-log softmax(logits)[label]` as a scalar node; panics if the label is
    /// out of range.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> NodeId {
        assert_eq!(self.value(logits).shape().len(), 1);
        let loss = cross_entropy_value(self.value(logits).data(), label);
        self.push(Op::CrossEntropy { logits, label }, Tensor::scalar(loss))
    }

    pub fn ln_clamped(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v.max(LOG_CLAMP).ln())
            .collect();
        let t = Tensor::from_parts(self.value(x).shape().to_vec(), out);
        self.push(Op::LnClamped { x }, t)
    }

    pub fn pick(&mut self, x: NodeId, index: usize) -> NodeId {
        assert!(index < self.value(x).len(), "pick index out of range");
        let v = self.value(x).data()[index];
        self.push(Op::Pick { x, index }, Tensor::scalar(v))
    }

    pub fn row(&mut self, m: NodeId, row: usize) -> NodeId {
        let (rows, cols) = self.value(m).dims2();
        assert!(row < rows, "row {row} out of range for {rows} rows");
        let data = self.value(m).data()[row * cols..(row + 1) * cols].to_vec();
        self.push(Op::Row { m, row }, Tensor::from_parts(vec![cols], data))
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "sum over empty node list");
        let total: f64 = xs.iter().map(|&n| self.value(n).as_scalar()).sum();
        self.push(Op::SumList { xs: xs.to_vec() }, Tensor::scalar(total))
    }

    /// Reverse sweep from a scalar loss. Each node is visited exactly once;
    /// nodes the loss does not reach keep no gradient.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert!(
            self.value(loss).is_scalar(),
            "backward requires a scalar root, got shape {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(grads: &mut [Option<Tensor>], node: NodeId, delta: Tensor) {
        match &mut grads[node.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (p, q) = self.value(*a).dims2();
                let (_, r) = self.value(*b).dims2();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // dA = G B^T
                let mut da = vec![0.0; p * q];
                for i in 0..p {
                    for k in 0..q {
                        let mut acc = 0.0;
                        for j in 0..r {
                            acc += gd[i * r + j] * bv[k * r + j];
                        }
                        da[i * q + k] = acc;
                    }
                }
                // dB = A^T G
                let mut db = vec![0.0; q * r];
                for k in 0..q {
                    for i in 0..p {
                        let aik = av[i * q + k];
                        if aik == 0.0 {
                            continue;
                        }
                        for j in 0..r {
                            db[k * r + j] += aik * gd[i * r + j];
                        }
                    }
                }
                Self::accumulate(grads, *a, Tensor::from_parts(vec![p, q], da));
                Self::accumulate(grads, *b, Tensor::from_parts(vec![q, r], db));
            }
            Op::MatVec { m, v } => {
                let (p, q) = self.value(*m).dims2();
                let mv = self.value(*m).data();
                let vv = self.value(*v).data();
                // dM = g (outer) v
                let mut dm = vec![0.0; p * q];
                for i in 0..p {
                    let gi = gd[i];
                    for k in 0..q {
                        dm[i * q + k] = gi * vv[k];
                    }
                }
                // dv = M^T g
                let mut dv = vec![0.0; q];
                for i in 0..p {
                    let gi = gd[i];
                    let row = &mv[i * q..(i + 1) * q];
                    for (d, &w) in dv.iter_mut().zip(row) {
                        *d += gi * w;
                    }
                }
                Self::accumulate(grads, *m, Tensor::from_parts(vec![p, q], dm));
                Self::accumulate(grads, *v, Tensor::from_parts(vec![q], dv));
            }
            Op::Add { a, b } => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                Self::accumulate(grads, *a, g.clone());
                let neg: Vec<f64> = gd.iter().map(|&x| -x).collect();
                Self::accumulate(grads, *b, Tensor::from_parts(g.shape().to_vec(), neg));
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let da: Vec<f64> = gd.iter().zip(bv).map(|(&g, &b)| g * b).collect();
                let db: Vec<f64> = gd.iter().zip(av).map(|(&g, &a)| g * a).collect();
                Self::accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), da));
                Self::accumulate(grads, *b, Tensor::from_parts(g.shape().to_vec(), db));
            }
            Op::Affine { x, mul } => {
                let dx: Vec<f64> = gd.iter().map(|&g| mul * g).collect();
                Self::accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::ScaleBy { s, x } => {
                let sv = self.value(*s).as_scalar();
                let xv = self.value(*x).data();
                let ds: f64 = gd.iter().zip(xv).map(|(&g, &x)| g * x).sum();
                let dx: Vec<f64> = gd.iter().map(|&g| sv * g).collect();
                Self::accumulate(grads, *s, Tensor::scalar(ds));
                Self::accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::Concat { a, b } => {
                let na = self.value(*a).len();
                let da = gd[..na].to_vec();
                let db = gd[na..].to_vec();
                let nb = db.len();
                Self::accumulate(grads, *a, Tensor::from_parts(vec![na], da));
                Self::accumulate(grads, *b, Tensor::from_parts(vec![nb], db));
            }
            Op::Sigmoid { x } => {
                let y = self.nodes[i].value.data();
                let dx: Vec<f64> = gd.iter().zip(y).map(|(&g, &y)| g * y * (1.0 - y)).collect();
                Self::accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::Tanh { x } => {
                let y = self.nodes[i].value.data();
                let dx: Vec<f64> = gd.iter().zip(y).map(|(&g, &y)| g * (1.0 - y * y)).collect();
                Self::accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::SoftmaxTau { x, tau } => {
                let y = self.nodes[i].value.data();
                let dot: f64 = gd.iter().zip(y).map(|(&g, &y)| g * y).sum();
                let dx: Vec<f64> = gd
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| y * (g - dot) / tau)
                    .collect();
                Self::accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::CrossEntropy { logits, label } => {
                let g0 = g.as_scalar();
                let p = softmax_temperature(self.value(*logits).data(), 1.0);
                let mut dl: Vec<f64> = p.iter().map(|&p| g0 * p).collect();
                dl[*label] -= g0;
                let n = dl.len();
                Self::accumulate(grads, *logits, Tensor::from_parts(vec![n], dl));
            }
            Op::LnClamped { x } => {
                let xv = self.value(*x).data();
                let dx: Vec<f64> = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &x)| if x > LOG_CLAMP { g / x } else { 0.0 })
                    .collect();
                Self::accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::Pick { x, index } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                dx[*index] = g.as_scalar();
                let n = dx.len();
                Self::accumulate(grads, *x, Tensor::from_parts(vec![n], dx));
            }
            Op::Row { m, row } => {
                let (rows, cols) = self.value(*m).dims2();
                let mut dm = vec![0.0; rows * cols];
                dm[row * cols..(row + 1) * cols].copy_from_slice(gd);
                Self::accumulate(grads, *m, Tensor::from_parts(vec![rows, cols], dm));
            }
            Op::SumList { xs } => {
                for &x in xs {
                    Self::accumulate(grads, x, g.clone());
                }
            }
        }
    }
}

/// A named trainable tensor with a persistent gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        let grad = Tensor::zeros(tensor.shape().to_vec());
        Self {
            name: name.into(),
            tensor,
            grad,
        }
    }

    /// Uniform init in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
    pub fn uniform_init(
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(fan_in > 0);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Self::new(name, Tensor::from_parts(shape, data))
    }

    /// Accumulate the tape gradient for this parameter's leaf node, if any.
    pub fn accumulate(&mut self, node: NodeId, grads: &Gradients) {
        if let Some(g) = grads.wrt(node) {
            self.grad.add_assign(g);
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Apply `tensor -= lr * grad` to every parameter, then zero the grads.
/// An optional clip bounds the global gradient norm before the step.
/// Panics on `lr <= 0`.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Parameter>, lr: f64) {
    sgd_step_clipped(params, lr, None)
}

pub fn sgd_step_clipped<'a>(
    params: impl IntoIterator<Item = &'a mut Parameter>,
    lr: f64,
    clip_norm: Option<f64>,
) {
    assert!(lr > 0.0, "learning rate must be positive, got {lr}");
    let params: Vec<&'a mut Parameter> = params.into_iter().collect();
    let mut scale = 1.0;
    if let Some(max_norm) = clip_norm {
        assert!(max_norm > 0.0, "clip norm must be positive");
        let sq: f64 = params
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|g| g * g)
            .sum();
        let norm = sq.sqrt();
        if norm > max_norm {
            scale = max_norm / norm;
        }
    }
    for p in params {
        let step = lr * scale;
        let grad = p.grad.data().to_vec();
        for (t, g) in p.tensor.data_mut().iter_mut().zip(grad) {
            *t -= step * g;
        }
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn vec_leaf(tape: &mut Tape, v: &[f64]) -> NodeId {
        let t = Tensor::vector(v.to_vec()).unwrap();
        tape.leaf(&t)
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut tape = Tape::new();
        let eye = tape.leaf(&Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = tape.leaf(&Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let out = tape.matmul(eye, m);
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let proj = tape.leaf(&Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let n = tape.leaf(&Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let out = tape.matmul(proj, n);
        assert_eq!(tape.value(out).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // fixed-seed random 3x4 by 4x2, checked exactly against a scalar loop
        let mut rng = crate::rng::stream(99, &[1]);
        use rand::Rng;
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut expect = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a[i * 4 + k] * b[k * 2 + j];
                }
                expect[i * 2 + j] = acc;
            }
        }
        let mut tape = Tape::new();
        let na = tape.leaf(&Tensor::matrix(3, 4, a).unwrap());
        let nb = tape.leaf(&Tensor::matrix(4, 2, b).unwrap());
        let out = tape.matmul(na, nb);
        for (got, want) in tape.value(out).data().iter().zip(&expect) {
            assert_eq!(got, want);
        }
    }

    #[test]
    #[should_panic(expected = "matmul inner dimensions")]
    fn matmul_rejects_mismatched_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.leaf(&Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        tape.matmul(a, b);
    }

    #[test]
    fn linear_map_gradient_is_broadcast_of_input() {
        // loss = sum(W x): dW = 1 (outer) x
        let mut tape = Tape::new();
        let w = Parameter::new("w", Tensor::matrix(2, 3, vec![0.5; 6]).unwrap());
        let wn = tape.leaf(&w.tensor);
        let x = vec_leaf(&mut tape, &[1.0, -2.0, 3.0]);
        let y = tape.matvec(wn, x);
        let y0 = tape.pick(y, 0);
        let y1 = tape.pick(y, 1);
        let loss = tape.sum(&[y0, y1]);
        let grads = tape.backward(loss);
        let gw = grads.wrt(wn).unwrap();
        assert_eq!(gw.data(), &[1.0, -2.0, 3.0, 1.0, -2.0, 3.0]);
    }

    #[test]
    fn unreached_parameter_gets_no_gradient() {
        let mut tape = Tape::new();
        let a = vec_leaf(&mut tape, &[1.0]);
        let b = vec_leaf(&mut tape, &[2.0]);
        let loss = tape.affine(a, 3.0, 0.0);
        let grads = tape.backward(loss);
        assert!(grads.wrt(a).is_some());
        assert!(grads.wrt(b).is_none());

        let mut p = Parameter::new("p", Tensor::scalar(5.0));
        p.accumulate(b, &grads);
        assert_eq!(p.grad.data(), &[0.0]);
    }

    #[test]
    #[should_panic(expected = "scalar root")]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let a = vec_leaf(&mut tape, &[1.0, 2.0]);
        tape.backward(a);
    }

    #[test]
    fn sgd_step_arithmetic_and_linearity() {
        let mut p = Parameter::new("p", Tensor::scalar(1.0));
        p.grad = Tensor::scalar(2.0);
        sgd_step([&mut p], 0.3);
        assert!((p.tensor.as_scalar() - 0.4).abs() < 1e-15);
        assert_eq!(p.grad.data(), &[0.0]);

        // zero grad leaves the parameter unchanged
        sgd_step([&mut p], 0.3);
        assert!((p.tensor.as_scalar() - 0.4).abs() < 1e-15);

        // two steps with grad g == one step with grad 2g
        let mut a = Parameter::new("a", Tensor::scalar(1.0));
        a.grad = Tensor::scalar(0.7);
        sgd_step([&mut a], 0.1);
        a.grad = Tensor::scalar(0.7);
        sgd_step([&mut a], 0.1);
        let mut b = Parameter::new("b", Tensor::scalar(1.0));
        b.grad = Tensor::scalar(1.4);
        sgd_step([&mut b], 0.1);
        assert!((a.tensor.as_scalar() - b.tensor.as_scalar()).abs() < 1e-15);
    }

    #[test]
    #[should_panic(expected = "learning rate must be positive")]
    fn sgd_rejects_nonpositive_lr() {
        let mut p = Parameter::new("p", Tensor::scalar(1.0));
        sgd_step([&mut p], 0.0);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let logits = vec_leaf(&mut tape, &[0.2, -0.4, 1.1]);
        let loss = tape.cross_entropy(logits, 2);
        let grads = tape.backward(loss);
        let p = softmax_temperature(&[0.2, -0.4, 1.1], 1.0);
        let g = grads.wrt(logits).unwrap().data();
        assert!((g[0] - p[0]).abs() < 1e-15);
        assert!((g[1] - p[1]).abs() < 1e-15);
        assert!((g[2] - (p[2] - 1.0)).abs() < 1e-15);
    }

    /// Central-difference check of every primitive through a composite scalar
    /// function touching matvec, concat, sigmoid, tanh, softmax, pick, mul,
    /// scale_by, ln_clamped, cross-entropy and sum.
    #[test]
    fn finite_difference_check_over_all_primitives() {
        let dim_in = 3;
        let dim_h = 4;
        let build = |w: &[f64], b: &[f64], x: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let wn = tape.leaf(&Tensor::matrix(dim_h, dim_in + dim_h, w.to_vec()).unwrap());
            let bn = tape.leaf(&Tensor::vector(b.to_vec()).unwrap());
            let xn = tape.leaf(&Tensor::vector(x.to_vec()).unwrap());
            let h0 = tape.leaf(&Tensor::vector(vec![0.1, -0.2, 0.3, 0.05]).unwrap());
            let joint = tape.concat(xn, h0);
            let lin = tape.matvec(wn, joint);
            let pre = tape.add(lin, bn);
            let s = tape.sigmoid(pre);
            let t = tape.tanh(pre);
            let prod = tape.mul(s, t);
            let soft = tape.softmax_tau(prod, 0.7);
            let p0 = tape.pick(soft, 0);
            let scaled = tape.scale_by(p0, t);
            let lg = tape.ln_clamped(soft);
            let l0 = tape.pick(lg, 1);
            let ce = tape.cross_entropy(scaled, 2);
            let neg = tape.affine(l0, -0.01, 0.0);
            let loss = tape.sum(&[ce, neg]);
            tape.value(loss).as_scalar()
        };

        let mut rng = crate::rng::stream(5, &[2]);
        use rand::Rng;
        let w: Vec<f64> = (0..dim_h * (dim_in + dim_h))
            .map(|_| rng.gen_range(-0.8..0.8))
            .collect();
        let b: Vec<f64> = (0..dim_h).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let x: Vec<f64> = (0..dim_in).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // analytic gradients
        let mut tape = Tape::new();
        let wn = tape.leaf(&Tensor::matrix(dim_h, dim_in + dim_h, w.clone()).unwrap());
        let bn = tape.leaf(&Tensor::vector(b.clone()).unwrap());
        let xn = tape.leaf(&Tensor::vector(x.clone()).unwrap());
        let h0 = tape.leaf(&Tensor::vector(vec![0.1, -0.2, 0.3, 0.05]).unwrap());
        let joint = tape.concat(xn, h0);
        let lin = tape.matvec(wn, joint);
        let pre = tape.add(lin, bn);
        let s = tape.sigmoid(pre);
        let t = tape.tanh(pre);
        let prod = tape.mul(s, t);
        let soft = tape.softmax_tau(prod, 0.7);
        let p0 = tape.pick(soft, 0);
        let scaled = tape.scale_by(p0, t);
        let lg = tape.ln_clamped(soft);
        let l0 = tape.pick(lg, 1);
        let ce = tape.cross_entropy(scaled, 2);
        let neg = tape.affine(l0, -0.01, 0.0);
        let loss = tape.sum(&[ce, neg]);
        let grads = tape.backward(loss);

        let eps = 1e-5;
        let check = |analytic: &[f64], base: &[f64], kind: usize| {
            for i in 0..base.len() {
                let mut plus = base.to_vec();
                let mut minus = base.to_vec();
                plus[i] += eps;
                minus[i] -= eps;
                let (fp, fm) = match kind {
                    0 => (build(&plus, &b, &x), build(&minus, &b, &x)),
                    1 => (build(&w, &plus, &x), build(&w, &minus, &x)),
                    _ => (build(&w, &b, &plus), build(&w, &b, &minus)),
                };
                let numeric = (fp - fm) / (2.0 * eps);
                let denom = (analytic[i].abs() + numeric.abs()).max(1e-3);
                assert!(
                    (analytic[i] - numeric).abs() / denom < 1e-6,
                    "kind {kind} idx {i}: analytic {} vs numeric {}",
                    analytic[i],
                    numeric
                );
            }
        };
        check(grads.wrt(wn).unwrap().data(), &w, 0);
        check(grads.wrt(bn).unwrap().data(), &b, 1);
        check(grads.wrt(xn).unwrap().data(), &x, 2);
    }
}

//! Dense tensors and a reverse-mode differentiation tape.
//!
//! The tape is define-by-run: each training example builds a fresh graph,
//! which keeps variable-length recurrences simple. Nodes are addressed by
//! [`TensorId`] handles into the tape's arena. Broadcasting is restricted to
//! scalar-with-tensor and same-shape operands; anything else needs an
//! explicit [`Tape::reshape`], which rules out silent shape bugs inside the
//! recurrences.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A dense multi-dimensional array in row-major order.
#[derive(Clone, Debug)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    /// Gradient accumulator, same shape as `data` when present.
    pub grad: Option<Vec<F>>,
    pub requires_grad: bool,
}

impl<F: Scalar> Tensor<F> {
    /// Builds a tensor, validating that every dimension is positive and that
    /// `data` has exactly `product(shape)` entries.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} implies {numel} entries but data has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "zeros: invalid shape {shape:?}"
        );
        Tensor {
            shape,
            data: vec![F::zero(); numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(x: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // positive dimensions are enforced at construction
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// 2-D matrix product in the promoted `[m,k] x [k,n]` space; rank-1
    /// operands are promoted (lhs to a row, rhs to a column) and the
    /// promoted dimensions are dropped from the output shape.
    Matmul {
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Neg(TensorId),
    Sigmoid(TensorId),
    Tanh(TensorId),
    Exp(TensorId),
    Log(TensorId),
    Softmax(TensorId),
    Concat {
        parts: Vec<TensorId>,
    },
    Sum(TensorId),
    /// Scalar pick `a[i]` from a rank-1 tensor.
    Index {
        a: TensorId,
        i: usize,
    },
    /// Row pick from a rank-2 tensor (embedding lookup).
    Row {
        a: TensorId,
        row: usize,
    },
    Reshape(TensorId),
}

/// Reverse-mode tape. One tape per forward/backward pass; tapes and their
/// tensors are confined to a single thread.
pub struct Tape<F> {
    nodes: Vec<Tensor<F>>,
    ops: Vec<Op>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor<F>) -> TensorId {
        self.push_node(t, Op::Leaf)
    }

    /// Records a non-differentiable input (dropout masks, zero states).
    pub fn constant(&mut self, mut t: Tensor<F>) -> TensorId {
        t.requires_grad = false;
        self.push_node(t, Op::Leaf)
    }

    pub fn scalar(&mut self, x: F) -> TensorId {
        self.constant(Tensor::scalar(x))
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[F] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push_node(&mut self, t: Tensor<F>, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(t);
        self.ops.push(op);
        id
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, op: Op) -> TensorId {
        self.push_node(
            Tensor {
                shape,
                data,
                grad: None,
                requires_grad: false,
            },
            op,
        )
    }

    /// Matrix product. Accepts rank-2 operands `[m,k] x [k,n] -> [m,n]`;
    /// a rank-1 lhs is treated as a `1 x k` row and a rank-1 rhs as a
    /// `k x 1` column, with the promoted dimension dropped from the result
    /// (so two vectors yield their scalar dot product).
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        let shape_err = || Error::Shape {
            op: "matmul",
            lhs: ashape.clone(),
            rhs: bshape.clone(),
        };
        let (m, ka, a_vec) = match ashape[..] {
            [k] => (1, k, true),
            [m, k] => (m, k, false),
            _ => return Err(shape_err()),
        };
        let (kb, n, b_vec) = match bshape[..] {
            [k] => (k, 1, true),
            [k, n] => (k, n, false),
            _ => return Err(shape_err()),
        };
        if ka != kb {
            return Err(shape_err());
        }
        let k = ka;
        let data = matmul_raw(self.value(a), self.value(b), m, k, n);
        let shape = match (a_vec, b_vec) {
            (true, true) => vec![1],
            (true, false) => vec![n],
            (false, true) => vec![m],
            (false, false) => vec![m, n],
        };
        Ok(self.push(shape, data, Op::Matmul { a, b, m, k, n }))
    }

    /// Elementwise sum; operands must share a shape or one must be scalar.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.elementwise_shape("add", a, b)?;
        let data = self.zip(a, b, &shape, |x, y| x + y);
        Ok(self.push(shape, data, Op::Add { a, b }))
    }

    /// Elementwise product; operands must share a shape or one must be scalar.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.elementwise_shape("mul", a, b)?;
        let data = self.zip(a, b, &shape, |x, y| x * y);
        Ok(self.push(shape, data, Op::Mul { a, b }))
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        let data = self.value(a).iter().map(|&x| -x).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Neg(a))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let data = self
            .value(a)
            .iter()
            .map(|&x| F::one() / (F::one() + (-x).exp()))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let data = self.value(a).iter().map(|&x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let data = self.value(a).iter().map(|&x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Exp(a))
    }

    pub fn log(&mut self, a: TensorId) -> TensorId {
        let data = self.value(a).iter().map(|&x| x.ln()).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Log(a))
    }

    /// Numerically stable softmax over a rank-1 tensor.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 1 {
            return Err(Error::Shape {
                op: "softmax",
                lhs: shape,
                rhs: vec![],
            });
        }
        let x = self.value(a);
        if x.iter().any(|v| v.is_nan() || (v.is_infinite() && v.is_sign_positive())) {
            return Err(Error::numeric("softmax input", format!("{:?}", x)));
        }
        let max = x.iter().cloned().fold(F::neg_infinity(), F::max);
        if !max.is_finite() {
            return Err(Error::numeric("softmax input", "all logits are -inf"));
        }
        let exps: Vec<F> = x.iter().map(|&v| (v - max).exp()).collect();
        let total = exps.iter().fold(F::zero(), |acc, &e| acc + e);
        let data: Vec<F> = exps.iter().map(|&e| e / total).collect();
        Ok(self.push(shape, data, Op::Softmax(a)))
    }

    /// Joins rank-1 tensors end to end, first operand's entries first.
    pub fn concat(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.concat_n(&[a, b])
    }

    pub fn concat_n(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 1 {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            data.extend_from_slice(self.value(p));
        }
        let shape = vec![data.len()];
        Ok(self.push(
            shape,
            data,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let total = self.value(a).iter().fold(F::zero(), |acc, &x| acc + x);
        self.push(vec![1], vec![total], Op::Sum(a))
    }

    /// Scalar entry `a[i]` of a rank-1 tensor.
    pub fn index(&mut self, a: TensorId, i: usize) -> Result<TensorId> {
        let s = self.shape(a);
        if s.len() != 1 || i >= s[0] {
            return Err(Error::contract(format!(
                "index {i} out of range for shape {s:?}"
            )));
        }
        let v = self.value(a)[i];
        Ok(self.push(vec![1], vec![v], Op::Index { a, i }))
    }

    /// Row `row` of a rank-2 tensor, as rank-1 (embedding lookup).
    pub fn row(&mut self, a: TensorId, row: usize) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || row >= s[0] {
            return Err(Error::contract(format!(
                "row {row} out of range for shape {s:?}"
            )));
        }
        let cols = s[1];
        let data = self.value(a)[row * cols..(row + 1) * cols].to_vec();
        Ok(self.push(vec![cols], data, Op::Row { a, row }))
    }

    /// Reinterprets the row-major data under a new shape of equal size.
    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) || numel != self.value(a).len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let data = self.value(a).to_vec();
        Ok(self.push(shape, data, Op::Reshape(a)))
    }

    fn elementwise_shape(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok(sa.to_vec())
        } else if sa == [1] {
            Ok(sb.to_vec())
        } else if sb == [1] {
            Ok(sa.to_vec())
        } else {
            Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn zip(&self, a: TensorId, b: TensorId, out_shape: &[usize], f: impl Fn(F, F) -> F) -> Vec<F> {
        let va = self.value(a);
        let vb = self.value(b);
        let n: usize = out_shape.iter().product();
        (0..n)
            .map(|i| {
                let x = if va.len() == 1 { va[0] } else { va[i] };
                let y = if vb.len() == 1 { vb[0] } else { vb[i] };
                f(x, y)
            })
            .collect()
    }

    /// Runs the adjoint sweep from a finite scalar `loss`. Afterwards every
    /// node carries a gradient; multiple uses of a tensor accumulate
    /// additively, and tensors not reachable from the loss hold zeros.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.shape(loss) != [1] {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let loss_value = self.value(loss)[0];
        if !loss_value.is_finite() {
            return Err(Error::numeric("loss", format!("{loss_value}")));
        }
        for node in &mut self.nodes {
            match &mut node.grad {
                Some(g) => g.iter_mut().for_each(|v| *v = F::zero()),
                None => node.grad = Some(vec![F::zero(); node.data.len()]),
            }
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = F::one();

        for i in (0..self.nodes.len()).rev() {
            let op = self.ops[i].clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let g = self.nodes[i].grad.clone().unwrap();
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b, m, k, n } => {
                    // dA = g . B^T, dB = A^T . g
                    let bt = transpose_raw(self.value(b), k, n);
                    let da = matmul_raw(&g, &bt, m, n, k);
                    let at = transpose_raw(self.value(a), m, k);
                    let db = matmul_raw(&at, &g, k, m, n);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Add { a, b } => {
                    self.accumulate_reduced(a, &g);
                    self.accumulate_reduced(b, &g);
                }
                Op::Mul { a, b } => {
                    let da = self.scaled_by_operand(&g, b);
                    let db = self.scaled_by_operand(&g, a);
                    self.accumulate_reduced(a, &da);
                    self.accumulate_reduced(b, &db);
                }
                Op::Neg(a) => {
                    let da: Vec<F> = g.iter().map(|&x| -x).collect();
                    self.accumulate(a, &da);
                }
                Op::Sigmoid(a) => {
                    let out = &self.nodes[i].data;
                    let da: Vec<F> = g
                        .iter()
                        .zip(out)
                        .map(|(&gv, &s)| gv * s * (F::one() - s))
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Tanh(a) => {
                    let out = &self.nodes[i].data;
                    let da: Vec<F> = g
                        .iter()
                        .zip(out)
                        .map(|(&gv, &t)| gv * (F::one() - t * t))
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Exp(a) => {
                    let out = &self.nodes[i].data;
                    let da: Vec<F> = g.iter().zip(out).map(|(&gv, &e)| gv * e).collect();
                    self.accumulate(a, &da);
                }
                Op::Log(a) => {
                    let input = self.value(a);
                    let da: Vec<F> = g.iter().zip(input).map(|(&gv, &x)| gv / x).collect();
                    self.accumulate(a, &da);
                }
                Op::Softmax(a) => {
                    let s = &self.nodes[i].data;
                    let dot = g
                        .iter()
                        .zip(s)
                        .fold(F::zero(), |acc, (&gv, &sv)| acc + gv * sv);
                    let da: Vec<F> = g
                        .iter()
                        .zip(s)
                        .map(|(&gv, &sv)| sv * (gv - dot))
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p.0].data.len();
                        let slice = g[offset..offset + len].to_vec();
                        self.accumulate(p, &slice);
                        offset += len;
                    }
                }
                Op::Sum(a) => {
                    let da = vec![g[0]; self.nodes[a.0].data.len()];
                    self.accumulate(a, &da);
                }
                Op::Index { a, i: idx } => {
                    let grad = self.nodes[a.0].grad.as_mut().unwrap();
                    grad[idx] = grad[idx] + g[0];
                }
                Op::Row { a, row } => {
                    let cols = self.nodes[a.0].shape[1];
                    let grad = self.nodes[a.0].grad.as_mut().unwrap();
                    for (j, &gv) in g.iter().enumerate() {
                        grad[row * cols + j] = grad[row * cols + j] + gv;
                    }
                }
                Op::Reshape(a) => {
                    self.accumulate(a, &g);
                }
            }
        }
        Ok(())
    }

    /// g scaled elementwise by the (possibly scalar) value of `operand`.
    fn scaled_by_operand(&self, g: &[F], operand: TensorId) -> Vec<F> {
        let v = self.value(operand);
        g.iter()
            .enumerate()
            .map(|(i, &gv)| gv * if v.len() == 1 { v[0] } else { v[i] })
            .collect()
    }

    fn accumulate(&mut self, id: TensorId, contrib: &[F]) {
        let grad = self.nodes[id.0].grad.as_mut().unwrap();
        for (g, &c) in grad.iter_mut().zip(contrib) {
            *g = *g + c;
        }
    }

    /// Accumulate with scalar-broadcast handling: a scalar operand of a
    /// wider elementwise op receives the sum of the output gradient.
    fn accumulate_reduced(&mut self, id: TensorId, contrib: &[F]) {
        let target_len = self.nodes[id.0].data.len();
        if target_len == contrib.len() {
            self.accumulate(id, contrib);
        } else {
            debug_assert_eq!(target_len, 1);
            let total = contrib.iter().fold(F::zero(), |acc, &x| acc + x);
            let grad = self.nodes[id.0].grad.as_mut().unwrap();
            grad[0] = grad[0] + total;
        }
    }
}

fn matmul_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn transpose_raw<F: Scalar>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    type T64 = Tape<f64>;

    fn leaf(tape: &mut T64, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        tape.leaf(Tensor::new(shape, data).unwrap().with_requires_grad())
    }

    /// Central finite differences for a scalar-valued builder over flat
    /// parameter vectors; independent of the tape's adjoint rules.
    fn numerical_grad(
        build: &dyn Fn(&mut T64, &[Vec<f64>]) -> (TensorId, Vec<TensorId>),
        inputs: &[Vec<f64>],
        step: f64,
    ) -> Vec<Vec<f64>> {
        let mut grads = Vec::new();
        for p in 0..inputs.len() {
            let mut g = vec![0.0; inputs[p].len()];
            for i in 0..inputs[p].len() {
                let mut plus = inputs.to_vec();
                plus[p][i] += step;
                let mut tape = T64::new();
                let (loss, _) = build(&mut tape, &plus);
                let lp = tape.value(loss)[0];

                let mut minus = inputs.to_vec();
                minus[p][i] -= step;
                let mut tape = T64::new();
                let (loss, _) = build(&mut tape, &minus);
                let lm = tape.value(loss)[0];

                g[i] = (lp - lm) / (2.0 * step);
            }
            grads.push(g);
        }
        grads
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
    }

    fn check_grads(
        build: &dyn Fn(&mut T64, &[Vec<f64>]) -> (TensorId, Vec<TensorId>),
        inputs: &[Vec<f64>],
    ) {
        let mut tape = T64::new();
        let (loss, params) = build(&mut tape, inputs);
        tape.backward(loss).unwrap();
        let numeric = numerical_grad(build, inputs, 1e-5);
        for (p, id) in params.iter().enumerate() {
            let analytic = tape.grad(*id).unwrap();
            for (i, (&a, &n)) in analytic.iter().zip(&numeric[p]).enumerate() {
                assert!(
                    rel_err(a, n) < 1e-4,
                    "param {p} entry {i}: analytic {a} vs numeric {n}"
                );
            }
        }
    }

    fn seeded_values(n: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = crate::rng::Prng::new(seed).stream("tensor-test");
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = T64::new();
        let i2 = leaf(&mut tape, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let m = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let c = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_projector_selects_row() {
        let mut tape = T64::new();
        let p = leaf(&mut tape, vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]);
        let m = leaf(&mut tape, vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let c = tape.matmul(p, m).unwrap();
        assert_eq!(tape.value(c), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = T64::new();
        let a = leaf(&mut tape, vec![2, 3], vec![0.0; 6]);
        let b = leaf(&mut tape, vec![2, 2], vec![0.0; 4]);
        match tape.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
       }
    }

    #[test]
    fn matmul_gradient_of_sum_is_ones_times_bt() {
        // gradient of sum(a.b) w.r.t. a equals ones(m x n) . b^T
        let a_data = seeded_values(12, 1);
        let b_data = seeded_values(8, 2);
        let build = |tape: &mut T64, inputs: &[Vec<f64>]| {
            let a = leaf(tape, vec![3, 4], inputs[0].clone());
            let b = leaf(tape, vec![4, 2], inputs[1].clone());
            let c = tape.matmul(a, b).unwrap();
            let loss = tape.sum(c);
            (loss, vec![a, b])
        };
        check_grads(&build, &[a_data.clone(), b_data.clone()]);

        // and the closed form for dA
        let mut tape = T64::new();
        let (loss, params) = build(&mut tape, &[a_data, b_data.clone()]);
        tape.backward(loss).unwrap();
        let da = tape.grad(params[0]).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let expected: f64 = (0..2).map(|c| b_data[j * 2 + c]).sum();
                assert!((da[i * 4 + j] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vector_promotions() {
        let mut tape = T64::new();
        let w = leaf(&mut tape, vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = leaf(&mut tape, vec![3], vec![1.0, 1.0, 1.0]);
        let y = tape.matmul(w, x).unwrap();
        assert_eq!(tape.shape(y), &[2]);
        assert_eq!(tape.value(y), &[6.0, 15.0]);

        let v = leaf(&mut tape, vec![2], vec![1.0, -1.0]);
        let z = tape.matmul(v, w).unwrap();
        assert_eq!(tape.shape(z), &[3]);
        assert_eq!(tape.value(z), &[-3.0, -3.0, -3.0]);

        let dot = tape.matmul(v, y).unwrap();
        assert_eq!(tape.shape(dot), &[1]);
        assert_eq!(tape.value(dot), &[-9.0]);
    }

    #[test]
    fn sigmoid_and_tanh_at_zero() {
        let mut tape = T64::new();
        let z = leaf(&mut tape, vec![4], vec![0.0; 4]);
        let s = tape.sigmoid(z);
        assert!(tape.value(s).iter().all(|&v| v == 0.5));
        let t = tape.tanh(z);
        assert!(tape.value(t).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        let mut tape = T64::new();
        let z = leaf(&mut tape, vec![1], vec![0.0]);
        let s = tape.sigmoid(z);
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        assert!((tape.grad(z).unwrap()[0] - 0.25).abs() < 1e-12);

        let build = |tape: &mut T64, inputs: &[Vec<f64>]| {
            let z = leaf(tape, vec![1], inputs[0].clone());
            let s = tape.sigmoid(z);
            let loss = tape.sum(s);
            (loss, vec![z])
        };
        check_grads(&build, &[vec![0.0]]);
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let x = seeded_values(5, 3).iter().map(|v| v.abs() + 0.5).collect::<Vec<_>>();
        let y = seeded_values(5, 4);
        let build = |tape: &mut T64, inputs: &[Vec<f64>]| {
            let a = leaf(tape, vec![5], inputs[0].clone());
            let b = leaf(tape, vec![5], inputs[1].clone());
            let prod = tape.mul(a, b).unwrap();
            let t = tape.tanh(prod);
            let e = tape.exp(t);
            let lg = tape.log(a);
            let s = tape.sigmoid(b);
            let mix = tape.add(e, lg).unwrap();
            let mix = tape.add(mix, s).unwrap();
            let n = tape.neg(mix);
            let loss = tape.sum(n);
            (loss, vec![a, b])
        };
        check_grads(&build, &[x, y]);
    }

    #[test]
    fn scalar_broadcast_and_its_gradient() {
        let build = |tape: &mut T64, inputs: &[Vec<f64>]| {
            let v = leaf(tape, vec![3], inputs[0].clone());
            let c = leaf(tape, vec![1], inputs[1].clone());
            let scaled = tape.mul(v, c).unwrap();
            let shifted = tape.add(scaled, c).unwrap();
            let loss = tape.sum(shifted);
            (loss, vec![v, c])
        };
        check_grads(&build, &[vec![1.0, -2.0, 0.5], vec![0.7]]);
    }

    #[test]
    fn incompatible_elementwise_shapes_rejected() {
        let mut tape = T64::new();
        let a = leaf(&mut tape, vec![3], vec![0.0; 3]);
        let b = leaf(&mut tape, vec![4], vec![0.0; 4]);
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
        let m = leaf(&mut tape, vec![2, 2], vec![0.0; 4]);
        assert!(matches!(tape.mul(a, m), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_uniform_and_single() {
        let mut tape = T64::new();
        let z = leaf(&mut tape, vec![2], vec![0.0, 0.0]);
        let s = tape.softmax(z).unwrap();
        assert_eq!(tape.value(s), &[0.5, 0.5]);

        let one = leaf(&mut tape, vec![1], vec![123.456]);
        let s1 = tape.softmax(one).unwrap();
        assert_eq!(tape.value(s1), &[1.0]);
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let mut tape = T64::new();
        let z = leaf(&mut tape, vec![2], vec![1000.0, 1000.5]);
        let s = tape.softmax(z).unwrap();
        let v = tape.value(s);
        assert!(v.iter().all(|x| x.is_finite() && *x > 0.0));
        let total: f64 = v.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        // shift invariance: equals softmax([0.0, 0.5])
        let expected1 = 1.0 / (1.0 + 0.5_f64.exp());
        assert!((v[0] - expected1).abs() < 1e-15);
        assert!((v[1] - (1.0 - expected1)).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = T64::new();
        let z = leaf(&mut tape, vec![2], vec![f64::NAN, 0.0]);
        assert!(matches!(tape.softmax(z), Err(Error::Numeric { .. })));
        let z = leaf(&mut tape, vec![2], vec![f64::INFINITY, 0.0]);
        assert!(matches!(tape.softmax(z), Err(Error::Numeric { .. })));
    }

    #[test]
    fn softmax_gradient() {
        let build = |tape: &mut T64, inputs: &[Vec<f64>]| {
            let z = leaf(tape, vec![4], inputs[0].clone());
            let s = tape.softmax(z).unwrap();
            // weight the entries so the gradient is not identically zero
            let w = tape.constant(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
            let ws = tape.mul(s, w).unwrap();
            let loss = tape.sum(ws);
            (loss, vec![z])
        };
        check_grads(&build, &[seeded_values(4, 5)]);
    }

    #[test]
    fn concat_order_and_gradient() {
        let mut tape = T64::new();
        let a = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let b = leaf(&mut tape, vec![1], vec![3.0]);
        let c = tape.concat(a, b).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0]);
        let loss = tape.sum(c);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0]);
    }

    #[test]
    fn zero_length_tensors_rejected() {
        assert!(Tensor::<f64>::new(vec![0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![2], vec![1.0]).is_err());
    }

    #[test]
    fn concat_rejects_matrices() {
        let mut tape = T64::new();
        let a = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let m = leaf(&mut tape, vec![2, 1], vec![1.0, 2.0]);
        assert!(matches!(tape.concat(a, m), Err(Error::Shape { .. })));
    }

    #[test]
    fn backward_of_sum_gives_ones() {
        let mut tape = T64::new();
        let w = leaf(&mut tape, vec![3], vec![5.0, -1.0, 2.0]);
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_sum() {
        let mut tape = T64::new();
        let w = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn reuse_accumulates_adjoints() {
        let mut tape = T64::new();
        let x = leaf(&mut tape, vec![1], vec![3.0]);
        let doubled = tape.add(x, x).unwrap();
        let loss = tape.sum(doubled);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn non_participating_tensor_gets_zero_grad() {
        let mut tape = T64::new();
        let used = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let unused = leaf(&mut tape, vec![3], vec![4.0, 5.0, 6.0]);
        let loss = tape.sum(used);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_non_finite_loss() {
        let mut tape = T64::new();
        let v = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        assert!(matches!(tape.backward(v), Err(Error::Contract(_))));

        let mut tape = T64::new();
        let bad = leaf(&mut tape, vec![1], vec![f64::NAN]);
        assert!(matches!(tape.backward(bad), Err(Error::Numeric { .. })));
    }

    #[test]
    fn index_and_row_gradients() {
        let build = |tape: &mut T64, inputs: &[Vec<f64>]| {
            let m = leaf(tape, vec![3, 2], inputs[0].clone());
            let r = tape.row(m, 1).unwrap();
            let v = leaf(tape, vec![4], inputs[1].clone());
            let picked = tape.index(v, 2).unwrap();
            let scaled = tape.mul(r, picked).unwrap();
            let loss = tape.sum(scaled);
            (loss, vec![m, v])
        };
        check_grads(&build, &[seeded_values(6, 6), seeded_values(4, 7)]);
    }

    #[test]
    fn reshape_round_trips_gradient() {
        let build = |tape: &mut T64, inputs: &[Vec<f64>]| {
            let v = leaf(tape, vec![6], inputs[0].clone());
            let m = tape.reshape(v, vec![2, 3]).unwrap();
            let w = leaf(tape, vec![3], inputs[1].clone());
            let y = tape.matmul(m, w).unwrap();
            let loss = tape.sum(y);
            (loss, vec![v, w])
        };
        check_grads(&build, &[seeded_values(6, 8), seeded_values(3, 9)]);
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let run = || {
            let data = seeded_values(12, 10);
            let mut tape = T64::new();
            let a = leaf(&mut tape, vec![3, 4], data[..12].to_vec());
            let x = leaf(&mut tape, vec![4], seeded_values(4, 11));
            let y = tape.matmul(a, x).unwrap();
            let t = tape.tanh(y);
            let loss = tape.sum(t);
            tape.backward(loss).unwrap();
            (
                tape.value(loss).to_vec(),
                tape.grad(a).unwrap().to_vec(),
                tape.grad(x).unwrap().to_vec(),
            )
        };
        let (l1, ga1, gx1) = run();
        let (l2, ga2, gx2) = run();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&l1), bits(&l2));
        assert_eq!(bits(&ga1), bits(&ga2));
        assert_eq!(bits(&gx1), bits(&gx2));
    }

    #[test]
    fn f32_tape_runs() {
        let mut tape: Tape<f32> = Tape::new();
        let v = tape.leaf(
            Tensor::new(vec![3], vec![0.5f32, -0.25, 1.0])
                .unwrap()
                .with_requires_grad(),
        );
        let s = tape.sigmoid(v);
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(v).unwrap().len(), 3);
    }
}

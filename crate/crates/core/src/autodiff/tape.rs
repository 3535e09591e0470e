//! Define-by-run reverse-mode tape.
//!
//! Every primitive appends one node holding its forward value. `backward`
//! walks the node list in reverse, so insertion order is the topological order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{axis_blocks, broadcast_index, broadcast_shape, strides, Tensor};
use super::TensorError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const BN_EPS: f64 = 1e-5;
const LN_EPS: f64 = 1e-5;
const BCE_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    AddScalar { a: Var },
    Relu { a: Var },
    Sigmoid { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Sum { a: Var, axis: usize },
    SumAll { a: Var },
    Mean { a: Var, axis: usize },
    Max { a: Var, argmax: Vec<usize> },
    Softmax { a: Var, axis: usize },
    LogSoftmax { a: Var, axis: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    L2Normalize { a: Var, axis: usize, norms: Vec<f64> },
    Dropout { a: Var, mask: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Embedding { table: Var, indices: Vec<usize> },
    Bce { p: Var, labels: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Running-statistic buffers a training-mode batch norm refreshes.
#[derive(Clone, Copy, Debug)]
pub struct BnBuffers {
    pub mean: ParamId,
    pub var: ParamId,
    pub momentum: f64,
}

/// Recorded computation for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    training: bool,
    rng: ChaCha8Rng,
    buffer_updates: Vec<(ParamId, Tensor)>,
    warnings: usize,
}

impl Tape {
    /// `seed` drives dropout masks; a fixed seed gives bit-identical passes.
    pub fn new(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            buffer_updates: Vec::new(),
            warnings: 0,
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of degenerate-input warnings raised (zero-norm normalization).
    pub fn warnings(&self) -> usize {
        self.warnings
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Running-stat values produced by training-mode batch norms on this tape.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn out(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, rg: bool) -> Result<Var, TensorError> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                name: format!("output of {op_name}"),
            });
        }
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, op, rg))
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor, name: &str) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { name: name.into() });
        }
        Ok(self.push(value, Op::Leaf, false))
    }

    /// Differentiable input that is not a stored parameter (gradient checks, probes).
    pub fn input(&mut self, value: Tensor, name: &str) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { name: name.into() });
        }
        Ok(self.push(value, Op::Leaf, true))
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var, TensorError> {
        let p = store.get(id);
        if !p.value.all_finite() {
            return Err(TensorError::NonFinite {
                name: p.name.clone(),
            });
        }
        Ok(self.push(p.value.clone(), Op::Param(id), p.trainable))
    }

    // ----- linear algebra -------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), (k, 1), self.data(b), (n, 1), &mut c, 0.0);
        let rg = self.rg(a) || self.rg(b);
        self.out("matmul", vec![m, n], c, Op::MatMul { a, b }, rg)
    }

    /// `[B, m, k] x [B, k, n]` (or `[B, n, k]` transposed) `-> [B, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "batch_matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let bstride = if transpose_b { (1, k) } else { (n, 1) };
        let mut c = vec![0.0; bs * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                (k, 1),
                &db[i * k * n..(i + 1) * k * n],
                bstride,
                &mut c[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        self.out(
            "batch_matmul",
            vec![bs, m, n],
            c,
            Op::BatchMatMul { a, b, transpose_b },
            rg,
        )
    }

    // ----- elementwise ----------------------------------------------------

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = broadcast_shape(&sa, &sb).ok_or_else(|| TensorError::ShapeMismatch {
            op: op_name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let (da, db) = (self.data(a), self.data(b));
        let data = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index(&shape, &sa);
            let ib = broadcast_index(&shape, &sb);
            ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        self.out(op_name, shape, data, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div { a, b })
    }

    fn unary(&mut self, op_name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.out(op_name, shape, data, op, rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        self.unary("scale", a, |x| x * factor, Op::Scale { a, factor })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar { a })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid { a })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("exp", a, f64::exp, Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("log", a, f64::ln, Op::Log { a })
    }

    // ----- reductions -----------------------------------------------------

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<(), TensorError> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op,
                axis,
                shape: shape.to_vec(),
            });
        }
        Ok(())
    }

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s: Vec<usize> = shape.to_vec();
        s.remove(axis);
        if s.is_empty() {
            s.push(1);
        }
        s
    }

    fn axis_sum(&self, a: Var, axis: usize) -> (Vec<usize>, Vec<f64>) {
        let shape = self.shape(a);
        let (outer, n, inner) = axis_blocks(shape, axis);
        let src = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *dst += v;
                }
            }
        }
        (Self::reduced_shape(shape, axis), out)
    }

    /// Sums over `axis`, removing it.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("sum", a, axis)?;
        let (shape, out) = self.axis_sum(a, axis);
        let rg = self.rg(a);
        self.out("sum", shape, out, Op::Sum { a, axis }, rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let s: f64 = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.out("sum_all", vec![1], vec![s], Op::SumAll { a }, rg)
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("mean", a, axis)?;
        let n = self.shape(a)[axis] as f64;
        let (shape, mut out) = self.axis_sum(a, axis);
        out.iter_mut().for_each(|v| *v /= n);
        let rg = self.rg(a);
        self.out("mean", shape, out, Op::Mean { a, axis }, rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.data(a).len() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Max over `axis`; the gradient flows to the first maximizing entry.
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("max", a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, n, inner) = axis_blocks(&shape, axis);
        let src = self.data(a);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    let idx = (o * n + k) * inner + i;
                    let j = o * inner + i;
                    if src[idx] > out[j] {
                        out[j] = src[idx];
                        argmax[j] = idx;
                    }
                }
            }
        }
        let rg = self.rg(a);
        self.out("max", Self::reduced_shape(&shape, axis), out, Op::Max { a, argmax }, rg)
    }

    /// Row-max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("softmax", a, axis)?;
        let shape = self.shape(a).to_vec();
        let out = softmax_along(self.data(a), &shape, axis, false);
        let rg = self.rg(a);
        self.out("softmax", shape, out, Op::Softmax { a, axis }, rg)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("log_softmax", a, axis)?;
        let shape = self.shape(a).to_vec();
        let out = softmax_along(self.data(a), &shape, axis, true);
        let rg = self.rg(a);
        self.out("log_softmax", shape, out, Op::LogSoftmax { a, axis }, rg)
    }

    // ----- structural -----------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = inputs.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        self.check_axis("concat", *first, axis)?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_blocks(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.data(v)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.out(
            "concat",
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        self.check_axis("slice", a, axis)?;
        let shape = self.shape(a).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{} outside extent {}", start + len, shape[axis]),
            });
        }
        let (outer, n, inner) = axis_blocks(&shape, axis);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.rg(a);
        self.out("slice", oshape, out, Op::Slice { a, axis, start }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.data(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(a).to_vec();
        let rg = self.rg(a);
        self.out("reshape", shape.to_vec(), data, Op::Reshape { a }, rg)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {}", shape.len()),
            });
        }
        let map = permute_index(&shape, perm);
        let src = self.data(a);
        let out = map.iter().map(|&i| src[i]).collect();
        let oshape = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(a);
        self.out(
            "permute",
            oshape,
            out,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        self.permute(a, &[1, 0])
    }

    // ----- normalization and regularization ------------------------------

    /// Unit-norm rescaling along `axis`. A zero vector maps to zero and bumps
    /// the warning counter.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("l2_normalize", a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, n, inner) = axis_blocks(&shape, axis);
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        let mut norms = vec![0.0; outer * inner];
        let mut zero = 0;
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let norm = (0..n).map(|k| src[idx(k)] * src[idx(k)]).sum::<f64>().sqrt();
                norms[o * inner + i] = norm;
                if norm > 0.0 {
                    for k in 0..n {
                        out[idx(k)] = src[idx(k)] / norm;
                    }
                } else {
                    zero += 1;
                }
            }
        }
        if zero > 0 {
            log::warn!("l2_normalize: {zero} zero vector(s) left unnormalized");
            self.warnings += zero;
        }
        let rg = self.rg(a);
        self.out("l2_normalize", shape, out, Op::L2Normalize { a, axis, norms }, rg)
    }

    /// Inverted dropout: scales survivors by `1/(1-rate)` in training, identity otherwise.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("rate {rate} outside [0, 1)"),
            });
        }
        if !self.training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.data(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let shape = self.shape(a).to_vec();
        let out = self.data(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let rg = self.rg(a);
        self.out("dropout", shape, out, Op::Dropout { a, mask }, rg)
    }

    /// Batch normalization of `[N, D]` over the batch axis. In training mode
    /// batch statistics are used and new running statistics are queued for
    /// the caller; in eval mode the stored running statistics are used.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, buffers: BnBuffers, store: &ParamStore) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || self.shape(gamma) != [shape[1]] || self.shape(beta) != [shape[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let (n, d) = (shape[0], shape[1]);
        if !self.training {
            let rm = store.get(buffers.mean).value.data();
            let rv = store.get(buffers.var).value.data();
            let inv: Vec<f64> = rv.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let shift: Vec<f64> = rm.iter().zip(&inv).map(|(m, s)| -m * s).collect();
            let inv = self.constant(Tensor::new(vec![d], inv)?, "bn.inv_std")?;
            let shift = self.constant(Tensor::new(vec![d], shift)?, "bn.shift")?;
            let y = self.mul(x, inv)?;
            let y = self.add(y, shift)?;
            let y = self.mul(y, gamma)?;
            return self.add(y, beta);
        }
        if n < 2 {
            return Err(TensorError::Invalid {
                op: "batch_norm",
                msg: "training batch norm needs at least 2 rows".into(),
            });
        }
        let src = self.data(x);
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for c in 0..d {
                mean[c] += src[r * d + c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for c in 0..d {
                let e = src[r * d + c] - mean[c];
                var[c] += e * e;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xhat: Vec<f64> = (0..n * d).map(|i| (src[i] - mean[i % d]) * inv_std[i % d]).collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let out = (0..n * d).map(|i| xhat[i] * g[i % d] + b[i % d]).collect();

        let mom = buffers.momentum;
        let unbias = n as f64 / (n as f64 - 1.0);
        let rm = store.get(buffers.mean).value.data();
        let rv = store.get(buffers.var).value.data();
        let new_rm = rm.iter().zip(&mean).map(|(r, m)| mom * r + (1.0 - mom) * m).collect();
        let new_rv = rv.iter().zip(&var).map(|(r, v)| mom * r + (1.0 - mom) * v * unbias).collect();
        self.buffer_updates.push((buffers.mean, Tensor::new(vec![d], new_rm)?));
        self.buffer_updates.push((buffers.var, Tensor::new(vec![d], new_rv)?));

        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.out(
            "batch_norm",
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("non-empty shape");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let src = self.data(x);
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                xhat[r * d + c] = (row[c] - mean) * inv;
            }
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let out = xhat.iter().enumerate().map(|(i, v)| v * g[i % d] + b[i % d]).collect();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.out(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Row gather from a `[V, d]` table: `[indices.len(), d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embedding",
                lhs: shape,
                rhs: vec![indices.len()],
            });
        }
        let (rows, d) = (shape[0], shape[1]);
        if indices.is_empty() {
            return Err(TensorError::Invalid {
                op: "embedding",
                msg: "empty index list".into(),
            });
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange { index: i, rows });
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        self.out(
            "embedding",
            vec![indices.len(), d],
            out,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    /// Mean binary cross-entropy of probabilities `p` against `labels`, with
    /// `1e-12` clamping inside the logs.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var, TensorError> {
        let probs = self.data(p);
        if probs.len() != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bce",
                lhs: self.shape(p).to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(bad) = probs.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(TensorError::Invalid {
                op: "bce",
                msg: format!("prediction {bad} outside [0, 1]"),
            });
        }
        let loss = bce_value(probs, labels);
        let rg = self.rg(p);
        self.out(
            "bce",
            vec![1],
            vec![loss],
            Op::Bce {
                p,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    // ----- reverse pass ---------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: "empty tape".into(),
            });
        }
        let ls = self.shape(loss);
        if self.data(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let da = self.acc(grads, *a);
                    gemm(m, n, k, g, (n, 1), self.data(*b), (1, n), da, 1.0);
                }
                if self.rg(*b) {
                    let db = self.acc(grads, *b);
                    gemm(k, m, n, self.data(*a), (1, k), g, (n, 1), db, 1.0);
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *transpose_b { sb[1] } else { sb[2] };
                let (xa, xb) = (self.data(*a), self.data(*b));
                if self.rg(*a) {
                    let da = self.acc(grads, *a);
                    // dA = dC B^T, or dC B when B was used transposed.
                    let bs_stride = if *transpose_b { (k, 1) } else { (1, n) };
                    for t in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..(t + 1) * m * n],
                            (n, 1),
                            &xb[t * k * n..(t + 1) * k * n],
                            bs_stride,
                            &mut da[t * m * k..(t + 1) * m * k],
                            1.0,
                        );
                    }
                }
                if self.rg(*b) {
                    let db = self.acc(grads, *b);
                    for t in 0..bs {
                        let ga = &g[t * m * n..(t + 1) * m * n];
                        let aa = &xa[t * m * k..(t + 1) * m * k];
                        let dbt = &mut db[t * k * n..(t + 1) * k * n];
                        if *transpose_b {
                            // B is [n, k]: dB = dC^T A.
                            gemm(n, m, k, ga, (1, n), aa, (k, 1), dbt, 1.0);
                        } else {
                            gemm(k, m, n, aa, (1, k), ga, (n, 1), dbt, 1.0);
                        }
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                let out_shape = node.value.shape().to_vec();
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if self.rg(v) {
                        let vs = self.shape(v).to_vec();
                        let dv = self.acc(grads, v);
                        scatter(&out_shape, &vs, g, dv, |_, gi| s * gi);
                    }
                }
            }
            Op::Mul { a, b } => {
                let out_shape = node.value.shape().to_vec();
                let ia = broadcast_index(&out_shape, self.shape(*a));
                let ib = broadcast_index(&out_shape, self.shape(*b));
                let (xa, xb) = (self.data(*a), self.data(*b));
                if self.rg(*a) {
                    let da = self.acc(grads, *a);
                    for j in 0..g.len() {
                        da[ia[j]] += g[j] * xb[ib[j]];
                    }
                }
                if self.rg(*b) {
                    let db = self.acc(grads, *b);
                    for j in 0..g.len() {
                        db[ib[j]] += g[j] * xa[ia[j]];
                    }
                }
            }
            Op::Div { a, b } => {
                let out_shape = node.value.shape().to_vec();
                let ia = broadcast_index(&out_shape, self.shape(*a));
                let ib = broadcast_index(&out_shape, self.shape(*b));
                let xb = self.data(*b);
                if self.rg(*a) {
                    let da = self.acc(grads, *a);
                    for j in 0..g.len() {
                        da[ia[j]] += g[j] / xb[ib[j]];
                    }
                }
                if self.rg(*b) {
                    let db = self.acc(grads, *b);
                    for j in 0..g.len() {
                        db[ib[j]] -= g[j] * y[j] / xb[ib[j]];
                    }
                }
            }
            Op::Scale { a, factor } => {
                let da = self.acc(grads, *a);
                da.iter_mut().zip(g).for_each(|(d, gi)| *d += factor * gi);
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                let da = self.acc(grads, *a);
                da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
            }
            Op::Relu { a } => {
                let x = self.data(*a);
                let da = self.acc(grads, *a);
                for j in 0..g.len() {
                    if x[j] > 0.0 {
                        da[j] += g[j];
                    }
                }
            }
            Op::Sigmoid { a } => {
                let da = self.acc(grads, *a);
                for j in 0..g.len() {
                    da[j] += g[j] * y[j] * (1.0 - y[j]);
                }
            }
            Op::Exp { a } => {
                let da = self.acc(grads, *a);
                for j in 0..g.len() {
                    da[j] += g[j] * y[j];
                }
            }
            Op::Log { a } => {
                let x = self.data(*a);
                let da = self.acc(grads, *a);
                for j in 0..g.len() {
                    da[j] += g[j] / x[j];
                }
            }
            Op::Sum { a, axis } | Op::Mean { a, axis } => {
                let shape = self.shape(*a).to_vec();
                let (outer, n, inner) = axis_blocks(&shape, *axis);
                let f = if matches!(node.op, Op::Mean { .. }) { 1.0 / n as f64 } else { 1.0 };
                let da = self.acc(grads, *a);
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            da[(o * n + k) * inner + i] += f * g[o * inner + i];
                        }
                    }
                }
            }
            Op::SumAll { a } => {
                let da = self.acc(grads, *a);
                da.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Max { a, argmax } => {
                let da = self.acc(grads, *a);
                for (j, &src) in argmax.iter().enumerate() {
                    da[src] += g[j];
                }
            }
            Op::Softmax { a, axis } | Op::LogSoftmax { a, axis } => {
                let log = matches!(node.op, Op::LogSoftmax { .. });
                let shape = self.shape(*a).to_vec();
                let (outer, n, inner) = axis_blocks(&shape, *axis);
                let da = self.acc(grads, *a);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        if log {
                            let gs: f64 = (0..n).map(|k| g[idx(k)]).sum();
                            for k in 0..n {
                                da[idx(k)] += g[idx(k)] - y[idx(k)].exp() * gs;
                            }
                        } else {
                            let dot: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..n {
                                da[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape().to_vec();
                let (outer, total, inner) = axis_blocks(&shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = self.shape(v)[*axis];
                    if self.rg(v) {
                        let dv = self.acc(grads, v);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            for (d, s) in dv[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice { a, axis, start } => {
                let shape = self.shape(*a).to_vec();
                let (outer, n, inner) = axis_blocks(&shape, *axis);
                let len = node.value.shape()[*axis];
                let da = self.acc(grads, *a);
                for o in 0..outer {
                    let dst = &mut da[(o * n + start) * inner..(o * n + start + len) * inner];
                    for (d, s) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                        *d += s;
                    }
                }
            }
            Op::Permute { a, perm } => {
                let map = permute_index(self.shape(*a), perm);
                let da = self.acc(grads, *a);
                for (j, &src) in map.iter().enumerate() {
                    da[src] += g[j];
                }
            }
            Op::L2Normalize { a, axis, norms } => {
                let shape = self.shape(*a).to_vec();
                let (outer, n, inner) = axis_blocks(&shape, *axis);
                let da = self.acc(grads, *a);
                for o in 0..outer {
                    for i in 0..inner {
                        let norm = norms[o * inner + i];
                        if norm == 0.0 {
                            continue;
                        }
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| y[idx(k)] * g[idx(k)]).sum();
                        for k in 0..n {
                            da[idx(k)] += (g[idx(k)] - y[idx(k)] * dot) / norm;
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                let da = self.acc(grads, *a);
                for j in 0..g.len() {
                    da[j] += g[j] * mask[j];
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = inv_std.len();
                let n = g.len() / d;
                let gam = self.data(*gamma).to_vec();
                let mut sum_g = vec![0.0; d];
                let mut sum_gx = vec![0.0; d];
                for j in 0..g.len() {
                    sum_g[j % d] += g[j];
                    sum_gx[j % d] += g[j] * xhat[j];
                }
                if self.rg(*x) {
                    let dx = self.acc(grads, *x);
                    let nf = n as f64;
                    for j in 0..g.len() {
                        let c = j % d;
                        dx[j] += gam[c] * inv_std[c] / nf * (nf * g[j] - sum_g[c] - xhat[j] * sum_gx[c]);
                    }
                }
                if self.rg(*gamma) {
                    add_into(self.acc(grads, *gamma), &sum_gx);
                }
                if self.rg(*beta) {
                    add_into(self.acc(grads, *beta), &sum_g);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gamma)[0];
                let rows = inv_std.len();
                let gam = self.data(*gamma).to_vec();
                if self.rg(*x) {
                    let dx = self.acc(grads, *x);
                    let df = d as f64;
                    for r in 0..rows {
                        let base = r * d;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..d {
                            let gh = g[base + c] * gam[c];
                            s1 += gh;
                            s2 += gh * xhat[base + c];
                        }
                        for c in 0..d {
                            let gh = g[base + c] * gam[c];
                            dx[base + c] += inv_std[r] / df * (df * gh - s1 - xhat[base + c] * s2);
                        }
                    }
                }
                if self.rg(*gamma) {
                    let dg = self.acc(grads, *gamma);
                    for j in 0..g.len() {
                        dg[j % d] += g[j] * xhat[j];
                    }
                }
                if self.rg(*beta) {
                    let db = self.acc(grads, *beta);
                    for j in 0..g.len() {
                        db[j % d] += g[j];
                    }
                }
            }
            Op::Embedding { table, indices } => {
                let d = self.shape(*table)[1];
                let dt = self.acc(grads, *table);
                for (r, &idx) in indices.iter().enumerate() {
                    for c in 0..d {
                        dt[idx * d + c] += g[r * d + c];
                    }
                }
            }
            Op::Bce { p, labels } => {
                let probs = self.data(*p);
                let n = probs.len() as f64;
                let dp = self.acc(grads, *p);
                for j in 0..probs.len() {
                    let (pj, yj) = (probs[j], labels[j]);
                    let mut d = 0.0;
                    if pj > BCE_EPS {
                        d -= yj / pj;
                    }
                    if 1.0 - pj > BCE_EPS {
                        d += (1.0 - yj) / (1.0 - pj);
                    }
                    dp[j] += g[0] * d / n;
                }
            }
        }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()])
    }

    fn param_of(&self, i: usize) -> Option<ParamId> {
        match self.nodes[i].op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf or input; `None` when it was unreachable.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Per-parameter gradients. Every trainable parameter that appears on the
    /// tape gets an entry (zeros when unreachable from the loss); repeated
    /// leaves of one parameter are summed.
    pub fn params(&self, tape: &Tape) -> ParamGrads {
        let mut out: Vec<Option<Vec<f64>>> = Vec::new();
        for i in 0..tape.nodes.len() {
            let Some(id) = tape.param_of(i) else { continue };
            if !tape.nodes[i].requires_grad {
                continue;
            }
            if out.len() <= id.index() {
                out.resize(id.index() + 1, None);
            }
            let numel = tape.nodes[i].value.len();
            let slot = out[id.index()].get_or_insert_with(|| vec![0.0; numel]);
            if let Some(g) = self.grads.get(i).and_then(|g| g.as_ref()) {
                add_into(slot, g);
            }
        }
        ParamGrads { grads: out }
    }
}

/// Gradients indexed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.index()).and_then(|g| g.as_deref())
    }

    pub fn norm(&self, id: ParamId) -> f64 {
        self.get(id).map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt()).unwrap_or(0.0)
    }

    /// Adds `other * factor` into `self`.
    pub fn accumulate(&mut self, other: &ParamGrads, factor: f64) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(src) = src {
                let d = dst.get_or_insert_with(|| vec![0.0; src.len()]);
                d.iter_mut().zip(src).for_each(|(a, b)| *a += factor * b);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn scatter(out_shape: &[usize], in_shape: &[usize], g: &[f64], dst: &mut [f64], f: impl Fn(usize, f64) -> f64) {
    if out_shape == in_shape {
        for j in 0..g.len() {
            dst[j] += f(j, g[j]);
        }
    } else {
        let map = broadcast_index(out_shape, in_shape);
        for j in 0..g.len() {
            dst[map[j]] += f(j, g[j]);
        }
    }
}

/// For each output position of `permute(shape, perm)`, its source flat index.
fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel: usize = shape.iter().product();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    let mut out = Vec::with_capacity(numel);
    for _ in 0..numel {
        out.push(pos);
        for d in (0..rank).rev() {
            idx[d] += 1;
            pos += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            pos -= eff[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn softmax_along(src: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, n, inner) = axis_blocks(shape, axis);
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..n).map(|k| (src[idx(k)] - max).exp()).sum();
            let log_denom = denom.ln();
            for k in 0..n {
                let z = src[idx(k)] - max;
                out[idx(k)] = if log { z - log_denom } else { z.exp() / denom };
            }
        }
    }
    out
}

pub(crate) fn bce_value(probs: &[f64], labels: &[f64]) -> f64 {
    let n = probs.len() as f64;
    -probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| y * p.max(BCE_EPS).ln() + (1.0 - y) * (1.0 - p).max(BCE_EPS).ln())
        .sum::<f64>()
        / n
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c = a * b + beta * c` for row-major `c` of shape `[m, n]`; `a` and `b`
/// are read through (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64], beta: f64) {
    debug_assert!(c.len() >= m * n);
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * sa.0 + (k - 1) * sa.1);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * sb.0 + (n - 1) * sb.1);
    // SAFETY: the asserts above bound every strided read inside `a` and `b`,
    // and `c` holds the dense `[m, n]` output.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

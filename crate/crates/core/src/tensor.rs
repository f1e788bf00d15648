//! Dense f64 tensors and a tape-based reverse-mode autodiff graph.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes. Ops
//! return [`NodeId`]s; [`Tape::backward`] walks the list in reverse and
//! accumulates exact analytic gradients, summing contributions when a node
//! feeds multiple consumers. Parameter leaves read their values from a
//! borrowed [`ParameterStore`](crate::param::ParameterStore), so many tapes
//! (one per batch sample) can run against the same weights concurrently; the
//! per-tape gradients are reduced in sample order afterwards, which keeps
//! training bit-deterministic regardless of thread count.
//!
//! Shape violations are programming errors and panic with both shapes in the
//! message. All arithmetic is 64-bit.

use crate::param::{ParamId, ParameterStore};

/// Epsilon used by every layer norm in the crate.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Dense n-dimensional array, row-major, with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {shape:?} does not match data length {}",
            data.len()
        );
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    /// Trainable tensor (grad slot filled lazily by the first backward).
    pub fn with_grad_slot(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let mut t = Tensor::new(shape, data);
        t.requires_grad = true;
        t
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Index of a node on a [`Tape`].
pub type NodeId = usize;

#[derive(Debug)]
enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

#[derive(Debug)]
enum Op {
    Const,
    Param,
    /// a[m,k] · b[k,n]
    Matmul { a: NodeId, b: NodeId },
    /// a[m,k] · b[n,k]ᵀ
    MatmulNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// [r,c] + [c], broadcast over rows
    AddRow { a: NodeId, row: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    Gelu { a: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    Softmax { x: NodeId, axis: usize },
    CrossEntropy { logits: NodeId, targets: Vec<usize> },
    Mse { a: NodeId, b: NodeId },
    GatherRows { src: NodeId, indices: Vec<usize> },
    ConcatRows { parts: Vec<NodeId> },
    SliceRows { src: NodeId, start: usize },
    SliceCols { src: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId> },
    RepeatRow { src: NodeId, n: usize },
    Detach,
    /// Fused multi-head self-attention over projected q/k/v.
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize },
    SumAll { a: NodeId },
    /// Σ cᵢ·xᵢ over scalar nodes
    WeightedSum { terms: Vec<(f64, NodeId)> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Value,
    grad: Option<Vec<f64>>,
    /// Cached intermediates for fused ops (attention keeps its per-head
    /// softmax matrices here for the backward pass).
    aux: Vec<f64>,
}

/// One recorded forward computation over a borrowed parameter store.
pub struct Tape<'s> {
    store: &'s ParameterStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

// ── gemm helpers (C may accumulate: beta = 1) ───────────────────────────

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() == m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Strided gemm over sub-blocks (the fused attention kernel): operands may
/// be column ranges of larger row-major matrices, addressed by a base
/// pointer offset plus explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_off: usize,
    (rsa, csa): (isize, isize),
    b: &[f64],
    b_off: usize,
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    c_off: usize,
    (rsc, csc): (isize, isize),
) {
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha,
            a.as_ptr().add(a_off), rsa, csa,
            b.as_ptr().add(b_off), rsb, csb,
            beta,
            c.as_mut_ptr().add(c_off), rsc, csc,
        );
    }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value: Value::Owned(value),
            grad: None,
            aux: Vec::new(),
        });
        self.nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        match &self.nodes[id].value {
            Value::Owned(v) => v,
            Value::Param(pid) => &self.store.get(*pid).tensor.data,
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    /// Gradient of the last `backward` with respect to node `id`, if any
    /// contribution reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    fn rows_cols(&self, id: NodeId) -> (usize, usize) {
        let s = self.shape(id);
        assert!(s.len() == 2, "expected a matrix, got shape {s:?}");
        (s[0], s[1])
    }

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "constant shape {shape:?} does not match data length {}",
            data.len()
        );
        self.push(Op::Const, shape, data)
    }

    pub fn scalar_const(&mut self, x: f64) -> NodeId {
        self.push(Op::Const, vec![1], vec![x])
    }

    /// Leaf bound to a store parameter. Repeated calls for the same id
    /// return the same node, so gradients from every use point accumulate.
    pub fn param(&mut self, pid: ParamId) -> NodeId {
        if let Some(id) = self.param_nodes[pid] {
            return id;
        }
        let shape = self.store.get(pid).tensor.shape.clone();
        self.nodes.push(Node {
            op: Op::Param,
            shape,
            value: Value::Param(pid),
            grad: None,
            aux: Vec::new(),
        });
        let id = self.nodes.len() - 1;
        self.param_nodes[pid] = Some(id);
        id
    }

    // ── algebra ─────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.rows_cols(a);
        let (kb, n) = self.rows_cols(b);
        assert_eq!(
            k,
            kb,
            "matmul shape mismatch: {:?} x {:?}",
            self.shape(a),
            self.shape(b)
        );
        let mut out = vec![0.0; m * n];
        gemm(
            m, k, n,
            self.value(a), (k as isize, 1),
            self.value(b), (n as isize, 1),
            0.0,
            &mut out,
        );
        self.push(Op::Matmul { a, b }, vec![m, n], out)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.rows_cols(a);
        let (n, kb) = self.rows_cols(b);
        assert_eq!(
            k,
            kb,
            "matmul_nt shape mismatch: {:?} x {:?}ᵀ",
            self.shape(a),
            self.shape(b)
        );
        let mut out = vec![0.0; m * n];
        gemm(
            m, k, n,
            self.value(a), (k as isize, 1),
            self.value(b), (1, k as isize),
            0.0,
            &mut out,
        );
        self.push(Op::MatmulNt { a, b }, vec![m, n], out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "add shape mismatch: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Add { a, b }, shape, out)
    }

    /// `[r,c] + [c]` with the row vector broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (r, c) = self.rows_cols(a);
        assert_eq!(
            self.shape(row),
            &[c],
            "add_row shape mismatch: {:?} + {:?}",
            self.shape(a),
            self.shape(row)
        );
        let rowv = self.value(row);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let av = &self.value(a)[i * c..(i + 1) * c];
            out.extend(av.iter().zip(rowv).map(|(x, y)| x + y));
        }
        self.push(Op::AddRow { a, row }, vec![r, c], out)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "sub shape mismatch: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Sub { a, b }, shape, out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "mul shape mismatch: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Mul { a, b }, shape, out)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale { a, c }, shape, out)
    }

    /// Exact-erf GELU: `0.5·x·(1 + erf(x/√2))`. The gaussian CDF factor
    /// is cached for the backward pass (erf is the expensive part).
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len();
        let mut cdf = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for &x in self.value(a) {
            let phi = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
            cdf.push(phi);
            out.push(x * phi);
        }
        let shape = self.shape(a).to_vec();
        let id = self.push(Op::Gelu { a }, shape, out);
        self.nodes[id].aux = cdf;
        id
    }

    /// Layer norm over the last dimension with affine scale/shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("layer_norm on empty shape");
        assert_eq!(
            self.shape(gamma),
            &[d],
            "layer_norm scale shape mismatch: input {:?}, scale {:?}",
            shape,
            self.shape(gamma)
        );
        assert_eq!(
            self.shape(beta),
            &[d],
            "layer_norm shift shape mismatch: input {:?}, shift {:?}",
            shape,
            self.shape(beta)
        );
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut out = vec![0.0; xv.len()];
        for (row, orow) in xv.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let (mean, inv_std) = norm_stats(row);
            for j in 0..d {
                orow[j] = (row[j] - mean) * inv_std * gv[j] + bv[j];
            }
        }
        self.push(Op::LayerNorm { x, gamma, beta }, shape, out)
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> NodeId {
        let shape = self.shape(x).to_vec();
        assert!(
            axis < shape.len(),
            "softmax axis {axis} out of range for shape {shape:?}"
        );
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(xv[at(j)]);
                }
                let mut sum = CompensatedSum::default();
                for j in 0..len {
                    let e = (xv[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum.add(e);
                }
                let denom = sum.value();
                for j in 0..len {
                    out[at(j)] /= denom;
                }
            }
        }
        self.push(Op::Softmax { x, axis }, shape, out)
    }

    /// Mean over rows of `−log softmax(row)[target]`. Scalar output.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let (r, m) = self.rows_cols(logits);
        assert!(r > 0, "cross_entropy over zero rows");
        assert_eq!(
            targets.len(),
            r,
            "cross_entropy: {} targets for {} logit rows",
            targets.len(),
            r
        );
        let lv = self.value(logits);
        let mut total = CompensatedSum::default();
        for (row, &t) in lv.chunks_exact(m).zip(targets) {
            assert!(t < m, "target index {t} out of range for {m} classes");
            total.add(log_sum_exp(row) - row[t]);
        }
        let loss = total.value() / r as f64;
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            vec![1],
            vec![loss],
        )
    }

    /// Mean squared element difference. Scalar output.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "mse shape mismatch: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let n = self.value(a).len();
        assert!(n > 0, "mse over zero elements");
        let total = compensated_sum(
            self.value(a)
                .iter()
                .zip(self.value(b))
                .map(|(x, y)| (x - y) * (x - y)),
        );
        self.push(Op::Mse { a, b }, vec![1], vec![total / n as f64])
    }

    // ── structure ───────────────────────────────────────────────────────

    /// `out[i] = src[indices[i]]`; indices may repeat.
    pub fn gather_rows(&mut self, src: NodeId, indices: &[usize]) -> NodeId {
        let (r, c) = self.rows_cols(src);
        let sv = self.value(src);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &ix in indices {
            assert!(ix < r, "gather_rows index {ix} out of range for {r} rows");
            out.extend_from_slice(&sv[ix * c..(ix + 1) * c]);
        }
        self.push(
            Op::GatherRows {
                src,
                indices: indices.to_vec(),
            },
            vec![indices.len(), c],
            out,
        )
    }

    /// Vertical stack; all parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let (_, c) = self.rows_cols(parts[0]);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (rp, cp) = self.rows_cols(p);
            assert_eq!(
                cp,
                c,
                "concat_rows column mismatch: {:?} vs {:?}",
                self.shape(parts[0]),
                self.shape(p)
            );
            rows += rp;
            out.extend_from_slice(self.value(p));
        }
        self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            vec![rows, c],
            out,
        )
    }

    /// Contiguous row range `[start, start+len)`.
    pub fn slice_rows(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.rows_cols(src);
        assert!(
            start + len <= r,
            "slice_rows [{start}, {}) out of range for {:?}",
            start + len,
            self.shape(src)
        );
        let out = self.value(src)[start * c..(start + len) * c].to_vec();
        self.push(Op::SliceRows { src, start }, vec![len, c], out)
    }

    /// Contiguous column range `[start, start+len)`.
    pub fn slice_cols(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.rows_cols(src);
        assert!(
            start + len <= c,
            "slice_cols [{start}, {}) out of range for {:?}",
            start + len,
            self.shape(src)
        );
        let sv = self.value(src);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&sv[i * c + start..i * c + start + len]);
        }
        self.push(Op::SliceCols { src, start }, vec![r, len], out)
    }

    /// Horizontal stack; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let (r, _) = self.rows_cols(parts[0]);
        let cols: usize = parts
            .iter()
            .map(|&p| {
                let (rp, cp) = self.rows_cols(p);
                assert_eq!(
                    rp,
                    r,
                    "concat_cols row mismatch: {:?} vs {:?}",
                    self.shape(parts[0]),
                    self.shape(p)
                );
                cp
            })
            .sum();
        let mut out = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                let (_, cp) = self.rows_cols(p);
                out.extend_from_slice(&self.value(p)[i * cp..(i + 1) * cp]);
            }
        }
        self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            vec![r, cols],
            out,
        )
    }

    /// Broadcast a `[1,c]` row to `[n,c]`.
    pub fn repeat_row(&mut self, src: NodeId, n: usize) -> NodeId {
        let (r, c) = self.rows_cols(src);
        assert_eq!(r, 1, "repeat_row needs a [1,c] source, got {:?}", self.shape(src));
        let row = self.value(src).to_vec();
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(&row);
        }
        self.push(Op::RepeatRow { src, n }, vec![n, c], out)
    }

    /// Fused multi-head self-attention.
    ///
    /// `q`, `k`, `v` are `[T, D]` with `D` divisible by `heads`; per head
    /// the output columns are `softmax(q_h·k_hᵀ/√dh)·v_h`. Equivalent to
    /// composing column slices, scaled matmuls, and softmax, but runs on
    /// strided gemm without intermediate nodes; the per-head attention
    /// matrices are cached for the backward pass.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> NodeId {
        let (t, d) = self.rows_cols(q);
        assert_eq!(
            self.shape(k),
            &[t, d],
            "attention shape mismatch: q {:?} vs k {:?}",
            self.shape(q),
            self.shape(k)
        );
        assert_eq!(
            self.shape(v),
            &[t, d],
            "attention shape mismatch: q {:?} vs v {:?}",
            self.shape(q),
            self.shape(v)
        );
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
        let dh = d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        let mut attn = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * d];
        {
            let qv = self.value(q);
            let kv = self.value(k);
            let vv = self.value(v);
            for h in 0..heads {
                let scores = &mut attn[h * t * t..(h + 1) * t * t];
                // scores = q_h · k_hᵀ / √dh
                gemm_strided(
                    t, dh, t, inv_sqrt,
                    qv, h * dh, (d as isize, 1),
                    kv, h * dh, (1, d as isize),
                    0.0,
                    scores, 0, (t as isize, 1),
                );
                for row in scores.chunks_exact_mut(t) {
                    softmax_row(row);
                }
                // out_h = attn · v_h, written straight into the merged columns
                gemm_strided(
                    t, t, dh, 1.0,
                    scores, 0, (t as isize, 1),
                    vv, h * dh, (d as isize, 1),
                    0.0,
                    &mut out, h * dh, (d as isize, 1),
                );
            }
        }
        let id = self.push(Op::Attention { q, k, v, heads }, vec![t, d], out);
        self.nodes[id].aux = attn;
        id
    }

    /// Identity value, zero gradient: blocks backward propagation.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        let out = self.value(a).to_vec();
        let _ = a;
        self.push(Op::Detach, shape, out)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total = compensated_sum(self.value(a).iter().copied());
        self.push(Op::SumAll { a }, vec![1], vec![total])
    }

    /// Σ cᵢ·xᵢ over scalar nodes, evaluated in the given order.
    pub fn weighted_sum(&mut self, terms: &[(f64, NodeId)]) -> NodeId {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let mut total = CompensatedSum::default();
        for &(c, id) in terms {
            assert_eq!(
                self.shape(id),
                &[1],
                "weighted_sum input must be scalar, got {:?}",
                self.shape(id)
            );
            total.add(c * self.value(id)[0]);
        }
        self.push(
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            vec![1],
            vec![total.value()],
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    fn take_grad(&mut self, id: NodeId) -> Vec<f64> {
        let n = self.shape(id).iter().product();
        self.nodes[id].grad.take().unwrap_or_else(|| vec![0.0; n])
    }

    fn add_grad(&mut self, id: NodeId, contribution: &[f64]) {
        let mut g = self.take_grad(id);
        debug_assert_eq!(g.len(), contribution.len());
        for (a, b) in g.iter_mut().zip(contribution) {
            *a += b;
        }
        self.nodes[id].grad = Some(g);
    }

    /// Reverse pass from a scalar `loss` node. Every node reachable from the
    /// loss receives dLoss/dNode, with contributions from multiple paths
    /// summed; call [`Tape::into_param_grads`] (or read
    /// [`Tape::grad`]) afterwards.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(
            self.shape(loss),
            &[1],
            "backward contract violation: loss must be scalar, got shape {:?}",
            self.shape(loss)
        );
        self.nodes[loss].grad = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            if self.nodes[id].grad.is_none() {
                continue;
            }
            self.propagate(id);
        }
    }

    fn propagate(&mut self, id: NodeId) {
        let g = self.nodes[id].grad.take().expect("grad present");
        // Borrow-friendly: grab cheap op metadata first, then dispatch.
        match &self.nodes[id].op {
            Op::Const | Op::Param | Op::Detach => {}
            &Op::Matmul { a, b } => {
                let (m, k) = self.rows_cols(a);
                let n = self.shape(b)[1];
                // dA += g · Bᵀ
                let mut da = self.take_grad(a);
                gemm(m, n, k, &g, (n as isize, 1), self.value(b), (1, n as isize), 1.0, &mut da);
                self.nodes[a].grad = Some(da);
                // dB += Aᵀ · g
                let mut db = self.take_grad(b);
                gemm(k, m, n, self.value(a), (1, k as isize), &g, (n as isize, 1), 1.0, &mut db);
                self.nodes[b].grad = Some(db);
            }
            &Op::MatmulNt { a, b } => {
                let (m, k) = self.rows_cols(a);
                let n = self.shape(b)[0];
                // out = A·Bᵀ ⇒ dA += g·B, dB += gᵀ·A
                let mut da = self.take_grad(a);
                gemm(m, n, k, &g, (n as isize, 1), self.value(b), (k as isize, 1), 1.0, &mut da);
                self.nodes[a].grad = Some(da);
                let mut db = self.take_grad(b);
                gemm(n, m, k, &g, (1, n as isize), self.value(a), (k as isize, 1), 1.0, &mut db);
                self.nodes[b].grad = Some(db);
            }
            &Op::Add { a, b } => {
                self.add_grad(a, &g);
                self.add_grad(b, &g);
            }
            &Op::AddRow { a, row } => {
                self.add_grad(a, &g);
                let c = self.shape(row)[0];
                let mut rg = vec![0.0; c];
                for chunk in g.chunks_exact(c) {
                    for (r, x) in rg.iter_mut().zip(chunk) {
                        *r += x;
                    }
                }
                self.add_grad(row, &rg);
            }
            &Op::Sub { a, b } => {
                self.add_grad(a, &g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.add_grad(b, &neg);
            }
            &Op::Mul { a, b } => {
                let da: Vec<f64> = g.iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.iter().zip(self.value(a)).map(|(x, y)| x * y).collect();
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            &Op::Scale { a, c } => {
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                self.add_grad(a, &da);
            }
            &Op::Gelu { a } => {
                let cdf = std::mem::take(&mut self.nodes[id].aux);
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).iter().zip(&cdf))
                    .map(|(gx, (&x, &phi))| {
                        gx * (phi + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp())
                    })
                    .collect();
                self.nodes[id].aux = cdf;
                self.add_grad(a, &da);
            }
            &Op::LayerNorm { x, gamma, beta } => {
                let d = *self.shape(x).last().unwrap();
                let xv = self.value(x);
                let gv = self.value(gamma);
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (r, (row, grow)) in xv.chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
                    let (mean, inv_std) = norm_stats(row);
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                    let mut dxhat_sum = 0.0;
                    let mut dxhat_dot = 0.0;
                    for j in 0..d {
                        let dxh = grow[j] * gv[j];
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                        dxhat_sum += dxh;
                        dxhat_dot += dxh * xhat[j];
                    }
                    let df = d as f64;
                    for j in 0..d {
                        let dxh = grow[j] * gv[j];
                        dx[r * d + j] = inv_std / df * (df * dxh - dxhat_sum - xhat[j] * dxhat_dot);
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(gamma, &dgamma);
                self.add_grad(beta, &dbeta);
            }
            &Op::Softmax { x, axis } => {
                let shape = self.shape(id).to_vec();
                let (outer, len, inner) = axis_split(&shape, axis);
                let s = match &self.nodes[id].value {
                    Value::Owned(v) => v,
                    Value::Param(_) => unreachable!("softmax output is owned"),
                };
                let mut dx = vec![0.0; s.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let mut dot = 0.0;
                        for j in 0..len {
                            dot += g[at(j)] * s[at(j)];
                        }
                        for j in 0..len {
                            dx[at(j)] = s[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::CrossEntropy { logits, targets } => {
                let (logits, targets) = (*logits, targets.clone());
                let (r, m) = self.rows_cols(logits);
                let lv = self.value(logits);
                let scale = g[0] / r as f64;
                let mut dl = vec![0.0; r * m];
                for (i, (row, &t)) in lv.chunks_exact(m).zip(&targets).enumerate() {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for j in 0..m {
                        let p = exps[j] / sum;
                        dl[i * m + j] = scale * (p - if j == t { 1.0 } else { 0.0 });
                    }
                }
                self.add_grad(logits, &dl);
            }
            &Op::Mse { a, b } => {
                let n = self.value(a).len() as f64;
                let scale = 2.0 * g[0] / n;
                let diff: Vec<f64> = self
                    .value(a)
                    .iter()
                    .zip(self.value(b))
                    .map(|(x, y)| scale * (x - y))
                    .collect();
                self.add_grad(a, &diff);
                let neg: Vec<f64> = diff.iter().map(|x| -x).collect();
                self.add_grad(b, &neg);
            }
            Op::GatherRows { src, indices } => {
                let (src, indices) = (*src, indices.clone());
                let (r, c) = self.rows_cols(src);
                let mut ds = vec![0.0; r * c];
                for (orow, &ix) in g.chunks_exact(c).zip(&indices) {
                    for (d, x) in ds[ix * c..(ix + 1) * c].iter_mut().zip(orow) {
                        *d += x;
                    }
                }
                self.add_grad(src, &ds);
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let (rp, cp) = self.rows_cols(p);
                    self.add_grad(p, &g[offset..offset + rp * cp]);
                    offset += rp * cp;
                }
            }
            &Op::SliceRows { src, start } => {
                let (_, c) = self.rows_cols(src);
                let len = self.shape(id)[0];
                let (r, _) = self.rows_cols(src);
                let mut ds = vec![0.0; r * c];
                ds[start * c..(start + len) * c].copy_from_slice(&g);
                self.add_grad(src, &ds);
            }
            &Op::SliceCols { src, start } => {
                let (r, c) = self.rows_cols(src);
                let len = self.shape(id)[1];
                let mut ds = vec![0.0; r * c];
                for i in 0..r {
                    ds[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.add_grad(src, &ds);
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let r = self.shape(id)[0];
                let total = self.shape(id)[1];
                let mut offset = 0;
                for p in parts {
                    let (_, cp) = self.rows_cols(p);
                    let mut dp = vec![0.0; r * cp];
                    for i in 0..r {
                        dp[i * cp..(i + 1) * cp]
                            .copy_from_slice(&g[i * total + offset..i * total + offset + cp]);
                    }
                    self.add_grad(p, &dp);
                    offset += cp;
                }
            }
            &Op::RepeatRow { src, n } => {
                let c = self.shape(src)[1];
                let mut ds = vec![0.0; c];
                for i in 0..n {
                    for (d, x) in ds.iter_mut().zip(&g[i * c..(i + 1) * c]) {
                        *d += x;
                    }
                }
                self.add_grad(src, &ds);
            }
            &Op::Attention { q, k, v, heads } => {
                let (t, d) = self.rows_cols(q);
                let dh = d / heads;
                let inv_sqrt = 1.0 / (dh as f64).sqrt();
                let attn = std::mem::take(&mut self.nodes[id].aux);
                let mut dq = vec![0.0; t * d];
                let mut dk = vec![0.0; t * d];
                let mut dv = vec![0.0; t * d];
                {
                    let qv = self.value(q);
                    let kv = self.value(k);
                    let vv = self.value(v);
                    let mut dattn = vec![0.0; t * t];
                    for h in 0..heads {
                        let a_h = &attn[h * t * t..(h + 1) * t * t];
                        // dV_h += attnᵀ · g_h
                        gemm_strided(
                            t, t, dh, 1.0,
                            a_h, 0, (1, t as isize),
                            &g, h * dh, (d as isize, 1),
                            1.0,
                            &mut dv, h * dh, (d as isize, 1),
                        );
                        // dAttn = g_h · v_hᵀ
                        gemm_strided(
                            t, dh, t, 1.0,
                            &g, h * dh, (d as isize, 1),
                            vv, h * dh, (1, d as isize),
                            0.0,
                            &mut dattn, 0, (t as isize, 1),
                        );
                        // dScores = attn ⊙ (dAttn − rowdot), in place
                        for (arow, drow) in
                            a_h.chunks_exact(t).zip(dattn.chunks_exact_mut(t))
                        {
                            let mut dot = 0.0;
                            for j in 0..t {
                                dot += arow[j] * drow[j];
                            }
                            for j in 0..t {
                                drow[j] = arow[j] * (drow[j] - dot);
                            }
                        }
                        // dQ_h += dScores · k_h / √dh
                        gemm_strided(
                            t, t, dh, inv_sqrt,
                            &dattn, 0, (t as isize, 1),
                            kv, h * dh, (d as isize, 1),
                            1.0,
                            &mut dq, h * dh, (d as isize, 1),
                        );
                        // dK_h += dScoresᵀ · q_h / √dh
                        gemm_strided(
                            t, t, dh, inv_sqrt,
                            &dattn, 0, (1, t as isize),
                            qv, h * dh, (d as isize, 1),
                            1.0,
                            &mut dk, h * dh, (d as isize, 1),
                        );
                    }
                }
                self.nodes[id].aux = attn;
                self.add_grad(q, &dq);
                self.add_grad(k, &dk);
                self.add_grad(v, &dv);
            }
            &Op::SumAll { a } => {
                let n = self.value(a).len();
                let da = vec![g[0]; n];
                self.add_grad(a, &da);
            }
            Op::WeightedSum { terms } => {
                let terms = terms.clone();
                for (c, t) in terms {
                    self.add_grad(t, &[c * g[0]]);
                }
            }
        }
        self.nodes[id].grad = Some(g);
    }

    /// Consume the tape, returning per-parameter gradients indexed by
    /// [`ParamId`]. Entries are `None` for parameters the loss never reached.
    pub fn into_param_grads(mut self) -> Vec<Option<Vec<f64>>> {
        let mut out = vec![None; self.param_nodes.len()];
        for (pid, node) in self.param_nodes.iter().enumerate() {
            if let Some(&id) = node.as_ref() {
                out[pid] = self.nodes[id].grad.take();
            }
        }
        out
    }
}

// ── scalar math ─────────────────────────────────────────────────────────

const FRAC_1_SQRT_2PI: f64 = 0.3989422804014327;

/// Neumaier compensated sum. Loss reductions use this so the forward value
/// is accurate enough for finite-difference verification at h = 1e-5.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = CompensatedSum::default();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

pub fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_derivative(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
        + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

fn softmax_row(row: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum = compensated_sum(row.iter().map(|&v| (v - max).exp()));
    max + sum.ln()
}

fn norm_stats(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{LayerGroup, ParamKind, ParameterStore};

    fn store_with(data: &[(&str, Vec<usize>, Vec<f64>)]) -> ParameterStore {
        let mut store = ParameterStore::new();
        for (name, shape, values) in data {
            store.add(
                *name,
                ParamKind::Matrix,
                LayerGroup::Head,
                shape.clone(),
                values.clone(),
            );
        }
        store
    }

    /// Central-difference oracle over every parameter element.
    fn finite_diff_check(
        shapes: &[Vec<usize>],
        data: &[Vec<f64>],
        build: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
        tol: f64,
    ) {
        let named: Vec<(String, Vec<usize>, Vec<f64>)> = data
            .iter()
            .enumerate()
            .map(|(i, d)| (format!("p{i}"), shapes[i].clone(), d.clone()))
            .collect();
        let borrowed: Vec<(&str, Vec<usize>, Vec<f64>)> = named
            .iter()
            .map(|(n, s, d)| (n.as_str(), s.clone(), d.clone()))
            .collect();
        let mut store = store_with(&borrowed);

        let analytic: Vec<Vec<f64>> = {
            let mut tape = Tape::new(&store);
            let ids: Vec<NodeId> = (0..data.len()).map(|p| tape.param(p)).collect();
            let loss = build(&mut tape, &ids);
            tape.backward(loss);
            let grads = tape.into_param_grads();
            grads.into_iter().map(|g| g.unwrap()).collect()
        };

        let h = 1e-5;
        for p in 0..data.len() {
            for i in 0..data[p].len() {
                let orig = store.get(p).tensor.data[i];
                let eval = |store: &ParameterStore| {
                    let mut tape = Tape::new(store);
                    let ids: Vec<NodeId> = (0..data.len()).map(|p| tape.param(p)).collect();
                    let loss = build(&mut tape, &ids);
                    tape.value(loss)[0]
                };
                store.get_mut(p).tensor.data[i] = orig + h;
                let plus = eval(&store);
                store.get_mut(p).tensor.data[i] = orig - h;
                let minus = eval(&store);
                store.get_mut(p).tensor.data[i] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let rel = (analytic[p][i] - numeric).abs() / numeric.abs().max(1e-8);
                assert!(
                    rel <= tol,
                    "param {p} elem {i}: analytic {} vs numeric {} (rel {rel:.3e})",
                    analytic[p][i],
                    numeric
                );
            }
        }
    }

    #[test]
    fn matmul_identity() {
        let store = ParameterStore::new();
        let mut tape = Tape::new(&store);
        let eye = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let v = tape.constant(vec![2, 1], vec![3.0, 4.0]);
        let out = tape.matmul(eye, v);
        assert_eq!(tape.value(out), &[3.0, 4.0]);
    }

    #[test]
    #[should_panic(expected = "matmul shape mismatch: [2, 3] x [2, 2]")]
    fn matmul_shape_mismatch_names_both_shapes() {
        let store = ParameterStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.constant(vec![2, 3], vec![0.0; 6]);
        let b = tape.constant(vec![2, 2], vec![0.0; 4]);
        tape.matmul(a, b);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let store = ParameterStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.constant(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = tape.constant(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5]);
        let out = tape.matmul_nt(a, b);
        // rows of a dotted with rows of b
        assert_eq!(tape.value(out), &[4.5, 0.0, 9.0, 3.0]);
    }

    #[test]
    fn layer_norm_constant_row_is_shift_only() {
        // Zero variance: normalized values are 0 before affine, so the
        // output equals beta.
        let store = ParameterStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(vec![1, 4], vec![3.0; 4]);
        let gamma = tape.constant(vec![4], vec![1.0; 4]);
        let beta = tape.constant(vec![4], vec![0.0; 4]);
        let out = tape.layer_norm(x, gamma, beta);
        for &v in tape.value(out) {
            assert!(v.abs() < 1e-12, "expected ~0, got {v}");
        }
    }

    #[test]
    fn gelu_at_zero() {
        assert_eq!(gelu_value(0.0), 0.0);
        // Closed-form derivative at 0 is exactly 1/2.
        assert_eq!(gelu_derivative(0.0), 0.5);
    }

    #[test]
    fn softmax_uniform_logits() {
        let store = ParameterStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(vec![1, 4], vec![0.0; 4]);
        let s = tape.softmax(x, 1);
        for &v in tape.value(s) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariance_is_exact() {
        // With exactly representable logits and shift, max subtraction makes
        // the shifted row bit-identical to the unshifted one.
        let store = ParameterStore::new();
        let logits = [0.0, 1.25, -2.5, 3.0];
        let shifted: Vec<f64> = logits.iter().map(|x| x + 17.5).collect();
        let mut tape = Tape::new(&store);
        let a = tape.constant(vec![1, 4], logits.to_vec());
        let b = tape.constant(vec![1, 4], shifted);
        let sa = tape.softmax(a, 1);
        let sb = tape.softmax(b, 1);
        assert_eq!(tape.value(sa), tape.value(sb));
    }

    #[test]
    fn softmax_matches_direct_formula() {
        // Oracle: e^x / Σe^x evaluated directly.
        let store = ParameterStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(vec![1, 3], vec![1.0, 2.0, 3.0]);
        let s = tape.softmax(x, 1);
        let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (j, &v) in tape.value(s).iter().enumerate() {
            let expect = ((j + 1) as f64).exp() / denom;
            assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
        }
    }

    #[test]
    fn softmax_axis_zero() {
        let store = ParameterStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(vec![2, 2], vec![1.0, 5.0, 3.0, 5.0]);
        let s = tape.softmax(x, 0);
        let v = tape.value(s);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
        assert!((v[1] + v[3] - 1.0).abs() < 1e-12);
        assert!(v[0] < v[2]);
        assert!((v[1] - v[3]).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_confident_and_uniform() {
        let store = ParameterStore::new();
        let mut tape = Tape::new(&store);
        let mut confident = vec![0.0; 5];
        confident[2] = 30.0;
        let a = tape.constant(vec![1, 5], confident);
        let la = tape.cross_entropy(a, &[2]);
        assert!(tape.value(la)[0] < 1e-9);

        let b = tape.constant(vec![1, 37], vec![0.0; 37]);
        let lb = tape.cross_entropy(b, &[5]);
        assert!((tape.value(lb)[0] - (37.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_hand_computed() {
        // Oracle: −log softmax([1,2,3])[0] = ln(e¹+e²+e³) − 1.
        let expect = (1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp()).ln() - 1.0;
        let store = ParameterStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(vec![1, 3], vec![1.0, 2.0, 3.0]);
        let l = tape.cross_entropy(x, &[0]);
        assert!((tape.value(l)[0] - expect).abs() < 1e-14);
        // The spec's headline value.
        assert!((tape.value(l)[0] - 2.4076).abs() < 1e-4);
    }

    #[test]
    #[should_panic(expected = "target index 3 out of range for 3 classes")]
    fn cross_entropy_target_out_of_range() {
        let store = ParameterStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(vec![1, 3], vec![0.0; 3]);
        tape.cross_entropy(x, &[3]);
    }

    #[test]
    fn mse_cases() {
        let store = ParameterStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.constant(vec![2], vec![0.0, 1.0]);
        let b = tape.constant(vec![2], vec![1.0, 0.0]);
        let l = tape.mse(a, b);
        assert_eq!(tape.value(l)[0], 1.0);

        let c = tape.constant(vec![3], vec![1.0, 2.0, 3.0]);
        let d = tape.constant(vec![3], vec![2.0, 3.0, 4.0]);
        let l2 = tape.mse(c, d);
        assert_eq!(tape.value(l2)[0], 1.0);

        let same = tape.mse(c, c);
        assert_eq!(tape.value(same)[0], 0.0);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let store = store_with(&[("x", vec![2, 3], vec![0.5; 6])]);
        let mut tape = Tape::new(&store);
        let x = tape.param(0);
        let loss = tape.sum_all(x);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_scalar_mse_is_two_v() {
        let v = 1.7;
        let store = store_with(&[("x", vec![1], vec![v])]);
        let mut tape = Tape::new(&store);
        let x = tape.param(0);
        let zero = tape.constant(vec![1], vec![0.0]);
        let loss = tape.mse(x, zero);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap(), &[2.0 * v]);
    }

    #[test]
    #[should_panic(expected = "backward contract violation")]
    fn backward_rejects_non_scalar() {
        let store = ParameterStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(vec![2], vec![1.0, 2.0]);
        tape.backward(x);
    }

    #[test]
    fn shared_param_node_accumulates_both_paths() {
        // loss = sum(x) + sum(x·x) ⇒ dloss/dx = 1 + 2x.
        let store = store_with(&[("x", vec![3], vec![1.0, -2.0, 0.5])]);
        let mut tape = Tape::new(&store);
        let x = tape.param(0);
        let x2 = tape.mul(x, x);
        let s1 = tape.sum_all(x);
        let s2 = tape.sum_all(x2);
        let loss = tape.weighted_sum(&[(1.0, s1), (1.0, s2)]);
        tape.backward(loss);
        let g = tape.grad(x).unwrap();
        for (gi, xi) in g.iter().zip([1.0, -2.0, 0.5]) {
            assert!((gi - (1.0 + 2.0 * xi)).abs() < 1e-14);
        }
    }

    #[test]
    fn gradient_accumulation_linearity() {
        // backward(l1 + l2) vs two separate passes summed, within 1e-12.
        let data = vec![0.3, -0.7, 1.1, 0.2];
        let store = store_with(&[("x", vec![2, 2], data)]);

        let combined: Vec<f64> = {
            let mut tape = Tape::new(&store);
            let x = tape.param(0);
            let sq = tape.mul(x, x);
            let l1 = tape.sum_all(sq);
            let ge = tape.gelu(x);
            let l2 = tape.sum_all(ge);
            let loss = tape.weighted_sum(&[(1.0, l1), (1.0, l2)]);
            tape.backward(loss);
            tape.grad(x).unwrap().to_vec()
        };

        let separate: Vec<f64> = {
            let run = |which: usize| {
                let mut tape = Tape::new(&store);
                let x = tape.param(0);
                let loss = if which == 0 {
                    let sq = tape.mul(x, x);
                    tape.sum_all(sq)
                } else {
                    let ge = tape.gelu(x);
                    tape.sum_all(ge)
                };
                tape.backward(loss);
                tape.grad(x).unwrap().to_vec()
            };
            let a = run(0);
            let b = run(1);
            a.iter().zip(&b).map(|(x, y)| x + y).collect()
        };

        for (c, s) in combined.iter().zip(&separate) {
            assert!(
                (c - s).abs() <= 1e-12 * s.abs().max(1.0),
                "combined {c} vs separate {s}"
            );
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let store = store_with(&[("x", vec![2], vec![1.0, 2.0])]);
        let mut tape = Tape::new(&store);
        let x = tape.param(0);
        let d = tape.detach(x);
        let sq = tape.mul(d, d);
        let loss = tape.sum_all(sq);
        tape.backward(loss);
        assert!(tape.grad(x).is_none());
        assert!(tape.grad(d).is_some());
    }

    #[test]
    fn structural_ops_roundtrip_values() {
        let store = ParameterStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.constant(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let top = tape.slice_rows(a, 0, 1);
        let bottom = tape.slice_rows(a, 1, 1);
        let back = tape.concat_rows(&[top, bottom]);
        assert_eq!(tape.value(back), tape.value(a));

        let left = tape.slice_cols(a, 0, 2);
        let right = tape.slice_cols(a, 2, 1);
        let back2 = tape.concat_cols(&[left, right]);
        assert_eq!(tape.value(back2), tape.value(a));

        let gathered = tape.gather_rows(a, &[1, 0, 1]);
        assert_eq!(tape.value(gathered), &[4.0, 5.0, 6.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        let row = tape.constant(vec![1, 2], vec![7.0, 8.0]);
        let rep = tape.repeat_row(row, 3);
        assert_eq!(tape.value(rep), &[7.0, 8.0, 7.0, 8.0, 7.0, 8.0]);
    }

    #[test]
    fn finite_difference_all_ops() {
        // One composite graph touching every differentiable op.
        finite_diff_check(
            &[vec![2, 3], vec![3, 2], vec![2], vec![2], vec![1, 2]],
            &[
                vec![0.4, -0.3, 0.8, 0.1, 0.5, -0.6],
                vec![0.2, -0.1, 0.7, 0.3, -0.5, 0.9],
                vec![1.2, 0.8],
                vec![0.1, -0.2],
                vec![0.3, -0.4],
            ],
            |tape, p| {
                let x = tape.matmul(p[0], p[1]); // [2,2]
                let x = tape.add_row(x, p[3]);
                let x = tape.layer_norm(x, p[2], p[3]);
                let x = tape.gelu(x);
                let nt = tape.matmul_nt(x, p[4]); // [2,1]... p4 is [1,2] → [2,1]
                let sm = tape.softmax(x, 1);
                let ce = tape.cross_entropy(sm, &[1, 0]);
                let rep = tape.repeat_row(p[4], 2);
                let diff = tape.sub(x, rep);
                let prod = tape.mul(diff, x);
                let msel = tape.mse(prod, rep);
                let sliced = tape.slice_cols(x, 0, 1);
                let joined = tape.concat_cols(&[sliced, nt]);
                let gathered = tape.gather_rows(joined, &[0, 1, 1]);
                let s = tape.sum_all(gathered);
                let sc = tape.scale(s, 0.3);
                tape.weighted_sum(&[(0.7, ce), (1.3, msel), (1.0, sc)])
            },
            1e-4,
        );
    }

    #[test]
    fn finite_difference_attention_shape_graph() {
        // Miniature single-head attention: the exact structure the model uses.
        finite_diff_check(
            &[vec![3, 4], vec![4, 4], vec![4, 4], vec![4, 4]],
            &[
                (0..12).map(|i| (i as f64) * 0.1 - 0.5).collect(),
                (0..16).map(|i| ((i * 7 % 11) as f64) * 0.05 - 0.2).collect(),
                (0..16).map(|i| ((i * 5 % 13) as f64) * 0.04 - 0.2).collect(),
                (0..16).map(|i| ((i * 3 % 7) as f64) * 0.06 - 0.15).collect(),
            ],
            |tape, p| {
                let q = tape.matmul(p[0], p[1]);
                let k = tape.matmul(p[0], p[2]);
                let v = tape.matmul(p[0], p[3]);
                let scores = tape.matmul_nt(q, k);
                let scaled = tape.scale(scores, 0.5);
                let attn = tape.softmax(scaled, 1);
                let out = tape.matmul(attn, v);
                tape.sum_all(out)
            },
            1e-4,
        );
    }

    #[test]
    fn fused_attention_matches_composed_ops() {
        // Oracle: the same computation spelled out with slices, scaled
        // matmuls, and row softmax.
        let store = ParameterStore::new();
        let mut tape = Tape::new(&store);
        let (t, d, heads) = (5, 6, 2);
        let dh = d / heads;
        let data = |seed: usize| -> Vec<f64> {
            (0..t * d).map(|i| (((i * 31 + seed * 17) % 23) as f64) / 23.0 - 0.5).collect()
        };
        let q = tape.constant(vec![t, d], data(1));
        let k = tape.constant(vec![t, d], data(2));
        let v = tape.constant(vec![t, d], data(3));
        let fused = tape.attention(q, k, v, heads);

        let mut parts = Vec::new();
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_nt(qh, kh);
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = tape.softmax(scaled, 1);
            parts.push(tape.matmul(attn, vh));
        }
        let composed = tape.concat_cols(&parts);
        for (a, b) in tape.value(fused).iter().zip(tape.value(composed)) {
            assert!((a - b).abs() < 1e-13, "{a} vs {b}");
        }
    }

    #[test]
    fn finite_difference_fused_attention() {
        finite_diff_check(
            &[vec![4, 4], vec![4, 4], vec![4, 4]],
            &[
                (0..16).map(|i| ((i * 7 % 11) as f64) * 0.1 - 0.4).collect(),
                (0..16).map(|i| ((i * 5 % 13) as f64) * 0.08 - 0.3).collect(),
                (0..16).map(|i| ((i * 3 % 7) as f64) * 0.12 - 0.2).collect(),
            ],
            |tape, p| {
                let out = tape.attention(p[0], p[1], p[2], 2);
                let sq = tape.mul(out, out);
                tape.sum_all(sq)
            },
            1e-4,
        );
    }

    #[test]
    fn masked_row_targets_get_zero_gradient() {
        // Rows never gathered into the loss receive no gradient.
        let store = store_with(&[("x", vec![4, 2], vec![0.5; 8])]);
        let mut tape = Tape::new(&store);
        let x = tape.param(0);
        let picked = tape.gather_rows(x, &[1, 3]);
        let target = tape.constant(vec![2, 2], vec![0.0; 4]);
        let loss = tape.mse(picked, target);
        tape.backward(loss);
        let g = tape.grad(x).unwrap();
        assert_eq!(&g[0..2], &[0.0, 0.0]);
        assert_eq!(&g[4..6], &[0.0, 0.0]);
        assert!(g[2] != 0.0 && g[6] != 0.0);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_are_distributions(
                rows in proptest::collection::vec(
                    proptest::collection::vec(-50.0f64..50.0, 5), 1..6)
            ) {
                let store = ParameterStore::new();
                let mut tape = Tape::new(&store);
                let r = rows.len();
                let flat: Vec<f64> = rows.concat();
                let x = tape.constant(vec![r, 5], flat);
                let s = tape.softmax(x, 1);
                for row in tape.value(s).chunks_exact(5) {
                    let sum: f64 = row.iter().sum();
                    prop_assert!((sum - 1.0).abs() < 1e-9);
                    for &v in row {
                        prop_assert!((0.0..=1.0).contains(&v));
                    }
                }
            }

            #[test]
            fn gelu_gradient_matches_finite_difference(x in -4.0f64..4.0) {
                let h = 1e-6;
                let numeric = (gelu_value(x + h) - gelu_value(x - h)) / (2.0 * h);
                let analytic = gelu_derivative(x);
                prop_assert!((analytic - numeric).abs() < 1e-8);
            }
        }
    }
}

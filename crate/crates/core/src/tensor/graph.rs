use super::gemm::{gemm, MatRef};
use super::{numel, Float, Tensor};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Stabilizer added to the variance inside layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

struct Node<F> {
    value: Tensor<F>,
    grad: Option<Vec<F>>,
    op: Op<F>,
}

enum Op<F> {
    Leaf,
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: F },
    MatMul { a: Var, b: Var, trans_b: bool },
    Gather { table: Var, ids: Vec<usize> },
    LayerNorm {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu { x: Var },
    Softmax { x: Var },
    CausalMask { x: Var },
    Dropout { x: Var, mask: Vec<F> },
    SplitHeads {
        x: Var,
        chunk: usize,
        chunks: usize,
        heads: usize,
    },
    MergeHeads { x: Var },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    Sum { x: Var },
}

/// Operation tape.
///
/// A graph built with [`Graph::new`] or [`Graph::training`] records every
/// operation so that [`Graph::backward`] can run; [`Graph::no_grad`] only
/// computes values. Dropout is active only on training graphs.
pub struct Graph<F: Float> {
    nodes: Vec<Node<F>>,
    record: bool,
    dropout_rng: Option<Stream>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Graph<F> {
    /// Recording graph in evaluation mode (dropout disabled).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            dropout_rng: None,
        }
    }

    /// Value-only graph in evaluation mode.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
            dropout_rng: None,
        }
    }

    /// Recording graph in training mode; dropout masks come from `rng`.
    pub fn training(rng: Stream) -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            dropout_rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient, or `None` if `v` was never reached by a
    /// backward pass (equivalently, a zero gradient).
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as an owned buffer, zero-filled if never reached.
    pub fn take_grad(&mut self, v: Var) -> Vec<F> {
        let len = self.nodes[v.0].value.len();
        self.nodes[v.0]
            .grad
            .take()
            .unwrap_or_else(|| vec![F::zero(); len])
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        let op = if self.record { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    /// Elementwise sum; `b` may broadcast over the leading dimensions of `a`
    /// when its shape is a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    fn broadcast_binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
    ) -> Result<Tensor<F>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            return Err(Error::shape(op, &[sa, sb]));
        }
        let bd = self.data(b);
        let data = self
            .data(a)
            .chunks(bd.len())
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(sa, data)
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| x * factor).collect(),
        };
        self.push(out, Op::Scale { a, factor })
    }

    /// `[.., M, K] x [K, N]` (weight broadcast over the batch) or
    /// `[.., M, K] x [.., K, N]` with identical leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Like [`Graph::matmul`] with the last two dimensions of `b` transposed:
    /// `[.., M, K] x [N, K]^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let name = if trans_b { "matmul_t" } else { "matmul" };
        let dims = matmul_dims(name, self.shape(a), self.shape(b), trans_b)?;
        let mut out = vec![F::zero(); dims.batch * dims.m * dims.n];
        let (ad, bd) = (self.data(a), self.data(b));
        if dims.broadcast {
            gemm(
                MatRef::row_major(ad, dims.batch * dims.m, dims.k),
                b_view(bd, dims.k, dims.n, trans_b),
                &mut out,
                false,
            );
        } else {
            let (sa, sb, sc) = (dims.m * dims.k, dims.k * dims.n, dims.m * dims.n);
            for i in 0..dims.batch {
                gemm(
                    MatRef::row_major(&ad[i * sa..(i + 1) * sa], dims.m, dims.k),
                    b_view(&bd[i * sb..(i + 1) * sb], dims.k, dims.n, trans_b),
                    &mut out[i * sc..(i + 1) * sc],
                    false,
                );
            }
        }
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = dims.n;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }))
    }

    /// Row lookup: `table` is `[V, D]`, `ids` is laid out as `shape`, and the
    /// result has shape `shape ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 || numel(shape) != ids.len() {
            return Err(Error::shape("embedding_gather", &[ts, shape]));
        }
        let (rows, width) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(Error::OutOfRange {
                op: "embedding_gather",
                index: bad,
                bound: rows,
            });
        }
        let td = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            data.extend_from_slice(&td[id * width..(id + 1) * width]);
        }
        let mut out_shape = shape.to_vec();
        out_shape.push(width);
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Normalizes the last dimension, then applies `weight` (and `bias`).
    pub fn layernorm(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let d = *xs.last().ok_or_else(|| Error::shape("layernorm", &[xs]))?;
        let ws = self.shape(weight);
        if ws != [d] {
            return Err(Error::shape("layernorm", &[xs, ws]));
        }
        if let Some(b) = bias {
            if self.shape(b) != [d] {
                return Err(Error::shape("layernorm", &[xs, self.shape(b)]));
            }
        }
        let eps = F::from_f64(LAYERNORM_EPS);
        let df = F::from_f64(d as f64);
        let (xd, wd) = (self.data(x), self.data(weight));
        let bd = bias.map(|b| self.data(b));
        let rows = xd.len() / d;
        let mut out = Vec::with_capacity(xd.len());
        let mut xhat_all = Vec::with_capacity(if self.record { xd.len() } else { 0 });
        let mut rstd_all = Vec::with_capacity(if self.record { rows } else { 0 });
        for row in xd.chunks(d) {
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let rstd = F::one() / (var + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * rstd;
                let mut y = xh * wd[j];
                if let Some(bd) = bd {
                    y += bd[j];
                }
                out.push(y);
                if self.record {
                    xhat_all.push(xh);
                }
            }
            if self.record {
                rstd_all.push(rstd);
            }
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                weight,
                bias,
                xhat: xhat_all,
                rstd: rstd_all,
            },
        ))
    }

    /// Exact GELU: `x * Phi(x)` with the Gaussian CDF.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let half = F::from_f64(0.5);
        let inv_sqrt2 = F::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t
                .data
                .iter()
                .map(|&v| half * v * (F::one() + (v * inv_sqrt2).erf()))
                .collect(),
        };
        self.push(out, Op::Gelu { x })
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape.last().ok_or_else(|| Error::shape("softmax", &[&t.shape]))?;
        let mut out = Vec::with_capacity(t.len());
        for row in t.data.chunks(d) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let start = out.len();
            let mut total = F::zero();
            for &v in row {
                let e = (v - max).exp();
                total += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e = *e / total;
            }
        }
        let value = Tensor {
            shape: t.shape.clone(),
            data: out,
        };
        Ok(self.push(value, Op::Softmax { x }))
    }

    /// Fills the strictly-upper triangle of each trailing `[T, T]` block with
    /// the most negative finite value.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let r = t.rank();
        if r < 2 || t.shape[r - 1] != t.shape[r - 2] {
            return Err(Error::shape("causal_mask_fill", &[&t.shape]));
        }
        let n = t.shape[r - 1];
        let fill = F::min_value();
        let mut data = t.data.clone();
        for block in data.chunks_mut(n * n) {
            for i in 0..n {
                for v in &mut block[i * n + i + 1..(i + 1) * n] {
                    *v = fill;
                }
            }
        }
        let value = Tensor {
            shape: t.shape.clone(),
            data,
        };
        Ok(self.push(value, Op::CausalMask { x }))
    }

    /// Inverted dropout. Returns `x` unchanged in evaluation mode or when
    /// `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Invalid(format!("dropout: rate {rate} not in [0, 1)")));
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = F::from_f64(1.0 / (1.0 - rate));
        let t = &self.nodes[x.0].value;
        let mask: Vec<F> = (0..t.len())
            .map(|_| if rng.uniform() < rate { F::zero() } else { keep })
            .collect();
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        };
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    /// Takes chunk `chunk` of `chunks` equal slices of the last dimension of
    /// `x: [B, T, chunks * C]` and splits it into heads: `[B, H, T, C / H]`.
    pub fn split_heads(&mut self, x: Var, chunk: usize, chunks: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3
            || chunks == 0
            || chunk >= chunks
            || heads == 0
            || !s[2].is_multiple_of(chunks)
            || !(s[2] / chunks).is_multiple_of(heads)
        {
            return Err(Error::shape("reshape_split_heads", &[s]));
        }
        let (b, t, width) = (s[0], s[1], s[2]);
        let c = width / chunks;
        let hd = c / heads;
        let xd = self.data(x);
        let mut out = Vec::with_capacity(b * t * c);
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let base = (bi * t + ti) * width + chunk * c + h * hd;
                    out.extend_from_slice(&xd[base..base + hd]);
                }
            }
        }
        let value = Tensor::new(&[b, heads, t, hd], out)?;
        Ok(self.push(
            value,
            Op::SplitHeads {
                x,
                chunk,
                chunks,
                heads,
            },
        ))
    }

    /// Inverse of head splitting: `[B, H, T, D] -> [B, T, H * D]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::shape("merge_heads", &[s]));
        }
        let (b, h, t, d) = (s[0], s[1], s[2], s[3]);
        let xd = self.data(x);
        let mut out = vec![F::zero(); xd.len()];
        for bi in 0..b {
            for hi in 0..h {
                for ti in 0..t {
                    let src = ((bi * h + hi) * t + ti) * d;
                    let dst = (bi * t + ti) * h * d + hi * d;
                    out[dst..dst + d].copy_from_slice(&xd[src..src + d]);
                }
            }
        }
        let value = Tensor::new(&[b, t, h * d], out)?;
        Ok(self.push(value, Op::MergeHeads { x }))
    }

    /// Mean token-level cross-entropy. `logits` is `[.., V]` and `targets`
    /// holds one class id per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let v = *t.shape.last().ok_or_else(|| Error::shape("cross_entropy", &[&t.shape]))?;
        let rows = t.len() / v;
        if rows != targets.len() {
            return Err(Error::shape("cross_entropy", &[&t.shape, &[targets.len()]]));
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= v) {
            return Err(Error::OutOfRange {
                op: "cross_entropy",
                index: bad,
                bound: v,
            });
        }
        let mut probs = Vec::with_capacity(if self.record { t.len() } else { 0 });
        let mut total = 0.0f64;
        for (row, &target) in t.data.chunks(v).zip(targets) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let sum: F = row.iter().map(|&x| (x - max).exp()).sum();
            let log_z = max + sum.ln();
            total += (log_z - row[target]).as_f64();
            if self.record {
                probs.extend(row.iter().map(|&x| (x - max).exp() / sum));
            }
        }
        let value = Tensor::scalar(F::from_f64(total / rows as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum { x })
    }

    /// Reverse-mode pass from the scalar `loss`. Gradients accumulate into
    /// whatever previous passes left behind.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.record {
            return Err(Error::NotRecorded);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape.clone()));
        }
        let mut pass: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        pass[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pass[i].take() else { continue };
            self.propagate(i, &g, &mut pass);
            match &mut self.nodes[i].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[F], pass: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let value = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                slot(pass, nodes, *a).iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                let gb = slot(pass, nodes, *b);
                for chunk in g.chunks(gb.len()) {
                    gb.iter_mut().zip(chunk).for_each(|(x, &y)| *x += y);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (value(*a), value(*b));
                let lb = bv.len();
                let ga = slot(pass, nodes, *a);
                for (j, (x, &gy)) in ga.iter_mut().zip(g).enumerate() {
                    *x += gy * bv[j % lb];
                }
                let gb = slot(pass, nodes, *b);
                for (j, (&gy, &x)) in g.iter().zip(av).enumerate() {
                    gb[j % lb] += gy * x;
                }
            }
            Op::Scale { a, factor } => {
                slot(pass, nodes, *a)
                    .iter_mut()
                    .zip(g)
                    .for_each(|(x, &y)| *x += y * *factor);
            }
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let dims = matmul_dims("matmul", sa, sb, *trans_b).expect("validated in forward");
                let (av, bv) = (value(*a), value(*b));
                let (m, k, n) = (dims.m, dims.k, dims.n);
                if dims.broadcast {
                    let rows = dims.batch * m;
                    gemm(
                        MatRef::row_major(g, rows, n),
                        b_view(bv, k, n, *trans_b).t(),
                        slot(pass, nodes, *a),
                        true,
                    );
                    if *trans_b {
                        gemm(
                            MatRef::row_major(g, rows, n).t(),
                            MatRef::row_major(av, rows, k),
                            slot(pass, nodes, *b),
                            true,
                        );
                    } else {
                        gemm(
                            MatRef::row_major(av, rows, k).t(),
                            MatRef::row_major(g, rows, n),
                            slot(pass, nodes, *b),
                            true,
                        );
                    }
                } else {
                    let (sa, sb, sc) = (m * k, k * n, m * n);
                    for bi in 0..dims.batch {
                        let gc = &g[bi * sc..(bi + 1) * sc];
                        let a_i = &av[bi * sa..(bi + 1) * sa];
                        let b_i = &bv[bi * sb..(bi + 1) * sb];
                        gemm(
                            MatRef::row_major(gc, m, n),
                            b_view(b_i, k, n, *trans_b).t(),
                            &mut slot(pass, nodes, *a)[bi * sa..(bi + 1) * sa],
                            true,
                        );
                        let gb = &mut slot(pass, nodes, *b)[bi * sb..(bi + 1) * sb];
                        if *trans_b {
                            gemm(
                                MatRef::row_major(gc, m, n).t(),
                                MatRef::row_major(a_i, m, k),
                                gb,
                                true,
                            );
                        } else {
                            gemm(
                                MatRef::row_major(a_i, m, k).t(),
                                MatRef::row_major(gc, m, n),
                                gb,
                                true,
                            );
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let width = nodes[table.0].value.shape()[1];
                let gt = slot(pass, nodes, *table);
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * width..(id + 1) * width];
                    dst.iter_mut()
                        .zip(&g[r * width..(r + 1) * width])
                        .for_each(|(x, &y)| *x += y);
                }
            }
            Op::LayerNorm {
                x,
                weight,
                bias,
                xhat,
                rstd,
            } => {
                let wv = value(*weight);
                let d = wv.len();
                let df = F::from_f64(d as f64);
                let gx = slot(pass, nodes, *x);
                for (r, (gy, xh)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut sum_dxh = F::zero();
                    let mut sum_dxh_xh = F::zero();
                    for j in 0..d {
                        let dxh = gy[j] * wv[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[j];
                    }
                    let mean_dxh = sum_dxh / df;
                    let mean_dxh_xh = sum_dxh_xh / df;
                    let row = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        let dxh = gy[j] * wv[j];
                        row[j] += rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                let gw = slot(pass, nodes, *weight);
                for (gy, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gw[j] += gy[j] * xh[j];
                    }
                }
                if let Some(b) = bias {
                    let gb = slot(pass, nodes, *b);
                    for gy in g.chunks(d) {
                        gb.iter_mut().zip(gy).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = value(*x);
                let half = F::from_f64(0.5);
                let inv_sqrt2 = F::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = F::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let gx = slot(pass, nodes, *x);
                for ((dst, &gy), &v) in gx.iter_mut().zip(g).zip(xv) {
                    let cdf = half * (F::one() + (v * inv_sqrt2).erf());
                    let pdf = (-half * v * v).exp() * inv_sqrt_2pi;
                    *dst += gy * (cdf + v * pdf);
                }
            }
            Op::Softmax { x } => {
                let y = nodes[i].value.data();
                let d = *nodes[i].value.shape().last().unwrap();
                let gx = slot(pass, nodes, *x);
                for ((dst, gy), yr) in gx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                    let dot: F = gy.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dst[j] += yr[j] * (gy[j] - dot);
                    }
                }
            }
            Op::CausalMask { x } => {
                let n = *nodes[i].value.shape().last().unwrap();
                let gx = slot(pass, nodes, *x);
                for (dst, src) in gx.chunks_mut(n * n).zip(g.chunks(n * n)) {
                    for r in 0..n {
                        for c in 0..=r {
                            dst[r * n + c] += src[r * n + c];
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                slot(pass, nodes, *x)
                    .iter_mut()
                    .zip(g.iter().zip(mask))
                    .for_each(|(dst, (&gy, &m))| *dst += gy * m);
            }
            Op::SplitHeads {
                x,
                chunk,
                chunks,
                heads,
            } => {
                let s = nodes[x.0].value.shape();
                let (b, t, width) = (s[0], s[1], s[2]);
                let c = width / chunks;
                let hd = c / heads;
                let gx = slot(pass, nodes, *x);
                let mut src = 0;
                for bi in 0..b {
                    for h in 0..*heads {
                        for ti in 0..t {
                            let base = (bi * t + ti) * width + chunk * c + h * hd;
                            gx[base..base + hd]
                                .iter_mut()
                                .zip(&g[src..src + hd])
                                .for_each(|(a, &v)| *a += v);
                            src += hd;
                        }
                    }
                }
            }
            Op::MergeHeads { x } => {
                let s = nodes[x.0].value.shape();
                let (b, h, t, d) = (s[0], s[1], s[2], s[3]);
                let gx = slot(pass, nodes, *x);
                for bi in 0..b {
                    for hi in 0..h {
                        for ti in 0..t {
                            let dst = ((bi * h + hi) * t + ti) * d;
                            let src = (bi * t + ti) * h * d + hi * d;
                            gx[dst..dst + d]
                                .iter_mut()
                                .zip(&g[src..src + d])
                                .for_each(|(a, &v)| *a += v);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = *nodes[logits.0].value.shape().last().unwrap();
                let scale = g[0] / F::from_f64(targets.len() as f64);
                let gl = slot(pass, nodes, *logits);
                for (r, &target) in targets.iter().enumerate() {
                    let row = &mut gl[r * v..(r + 1) * v];
                    for (j, dst) in row.iter_mut().enumerate() {
                        let onehot = if j == target { F::one() } else { F::zero() };
                        *dst += scale * (probs[r * v + j] - onehot);
                    }
                }
            }
            Op::Sum { x } => {
                slot(pass, nodes, *x).iter_mut().for_each(|v| *v += g[0]);
            }
        }
    }
}

fn slot<'p, F: Float>(pass: &'p mut [Option<Vec<F>>], nodes: &[Node<F>], v: Var) -> &'p mut [F] {
    pass[v.0].get_or_insert_with(|| vec![F::zero(); nodes[v.0].value.len()])
}

fn is_suffix(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    broadcast: bool,
}

fn matmul_dims(op: &'static str, sa: &[usize], sb: &[usize], trans_b: bool) -> Result<MatmulDims> {
    let (ra, rb) = (sa.len(), sb.len());
    if ra < 2 || rb < 2 {
        return Err(Error::shape(op, &[sa, sb]));
    }
    let (m, k) = (sa[ra - 2], sa[ra - 1]);
    let (bk, n) = if trans_b {
        (sb[rb - 1], sb[rb - 2])
    } else {
        (sb[rb - 2], sb[rb - 1])
    };
    let broadcast = rb == 2;
    if bk != k || (!broadcast && (ra != rb || sa[..ra - 2] != sb[..rb - 2])) {
        return Err(Error::shape(op, &[sa, sb]));
    }
    Ok(MatmulDims {
        batch: numel(&sa[..ra - 2]),
        m,
        k,
        n,
        broadcast,
    })
}

/// View of a right-hand operand as a logical `k x n` matrix.
fn b_view<F: Float>(data: &[F], k: usize, n: usize, trans: bool) -> MatRef<'_, F> {
    if trans {
        MatRef::row_major(data, n, k).t()
    } else {
        MatRef::row_major(data, k, n)
    }
}

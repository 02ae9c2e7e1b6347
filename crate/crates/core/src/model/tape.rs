//! Reverse-mode autodiff over a linear tape.
//!
//! Each operation evaluates eagerly, records its inputs, and stores its
//! result; [`Tape::backward`] replays the tape in reverse, accumulating
//! gradients. The same forward code therefore serves training, greedy
//! decoding (no backward call), and finite-difference verification.
//!
//! The operation set is exactly what the decoder needs — dense matmuls,
//! row softmax, layer norm, GELU, gathers, and two bespoke ops: a masked
//! prefix sum (attention-history accumulation) and an affine coverage
//! filter (small conv + channel mix) whose gradient is hand-derived.
//! Reductions always run in index order, so results are bit-reproducible.

use crate::model::tensor::Tensor;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// Elementwise sum of equal shapes.
    Add(Var, Var),
    /// Matrix plus a broadcast row vector.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `[m,k] · [k,n]`.
    Matmul(Var, Var),
    /// `[m,k] · [n,k]ᵀ`: rows of both operands are dotted.
    MatmulTransB(Var, Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    /// Row-wise layer norm with learnable gain and shift.
    LayerNorm(Var, Var, Var),
    Gelu(Var),
    /// Rows of a table selected by index, duplicates allowed.
    GatherRows(Var, Vec<usize>),
    /// `out[r] = m[r, cols[r]]`.
    PickEntries(Var, Vec<usize>),
    Log(Var),
    MeanAll(Var),
    Reshape(Var),
    /// `out[t, :] = Σ_{i<t} mask[i] · m[i, :]`; the mask is a constant.
    MaskedPrefixSum(Var, Vec<f64>),
    /// Affine coverage filter over per-row maps: a `channels`-filter 2D
    /// convolution with bias, mixed back to one channel by a weighted sum
    /// plus bias. Purely affine, so zero parameters give an exactly zero
    /// output.
    CoverageFilter {
        input: Var,
        kernel: Var,
        conv_bias: Var,
        mix: Var,
        mix_bias: Var,
        height: usize,
        width: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`, if `v`
    /// contributed to it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        self.push(value, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        let width = va.row_width();
        assert_eq!(vr.numel(), width, "add_row: row width mismatch");
        let mut data = va.data().to_vec();
        for r in 0..va.rows() {
            for c in 0..width {
                data[r * width + c] += vr.data()[c];
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = matmul_values(self.value(a), self.value(b));
        self.push(value, Op::Matmul(a, b))
    }

    pub fn matmul_trans_b(&mut self, a: Var, b: Var) -> Var {
        let value = matmul_tb_values(self.value(a), self.value(b));
        self.push(value, Op::MatmulTransB(a, b))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let va = self.value(a);
        let (rows, cols) = (va.rows(), va.row_width());
        assert!(start + width <= cols, "slice_cols: out of range");
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&va.row(r)[start..start + width]);
        }
        let value = Tensor::new(vec![rows, width], data);
        self.push(value, Op::SliceCols(a, start, width))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).row_width()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let vp = self.value(p);
                assert_eq!(vp.rows(), rows, "concat_cols: row count mismatch");
                data.extend_from_slice(vp.row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data);
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows_values(self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, a: Var, gain: Var, shift: Var) -> Var {
        let (va, vg, vs) = (self.value(a), self.value(gain), self.value(shift));
        let width = va.row_width();
        assert_eq!(vg.numel(), width, "layer_norm: gain width mismatch");
        assert_eq!(vs.numel(), width, "layer_norm: shift width mismatch");
        let mut data = Vec::with_capacity(va.numel());
        for r in 0..va.rows() {
            let row = va.row(r);
            let (mean, inv_sd) = row_moments(row);
            for (c, &x) in row.iter().enumerate() {
                data.push((x - mean) * inv_sd * vg.data()[c] + vs.data()[c]);
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data);
        self.push(value, Op::LayerNorm(a, gain, shift))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| gelu(x)).collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        self.push(value, Op::Gelu(a))
    }

    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let vt = self.value(table);
        let width = vt.row_width();
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(vt.row(i));
        }
        let value = Tensor::new(vec![indices.len(), width], data);
        self.push(value, Op::GatherRows(table, indices.to_vec()))
    }

    pub fn pick_entries(&mut self, a: Var, cols: &[usize]) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows(), cols.len(), "pick_entries: one column per row");
        let data = cols
            .iter()
            .enumerate()
            .map(|(r, &c)| va.at2(r, c))
            .collect();
        let value = Tensor::new(vec![cols.len()], data);
        self.push(value, Op::PickEntries(a, cols.to_vec()))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x.ln()).collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        self.push(value, Op::Log(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mean = va.data().iter().sum::<f64>() / va.numel() as f64;
        self.push(Tensor::scalar(mean), Op::MeanAll(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let value = self.value(a).clone().reshaped(shape);
        self.push(value, Op::Reshape(a))
    }

    /// `out[t, :] = Σ_{i<t} mask[i] · a[i, :]`; see
    /// [`masked_prefix_sum_values`].
    pub fn masked_prefix_sum(&mut self, a: Var, mask: &[f64]) -> Var {
        let value = masked_prefix_sum_values(self.value(a), mask);
        self.push(value, Op::MaskedPrefixSum(a, mask.to_vec()))
    }

    /// Affine coverage filter; see [`coverage_filter_values`].
    pub fn coverage_filter(
        &mut self,
        input: Var,
        kernel: Var,
        conv_bias: Var,
        mix: Var,
        mix_bias: Var,
        height: usize,
        width: usize,
    ) -> Var {
        let value = coverage_filter_values(
            self.value(input),
            self.value(kernel),
            self.value(conv_bias),
            self.value(mix),
            self.value(mix_bias),
            height,
            width,
        );
        self.push(
            value,
            Op::CoverageFilter {
                input,
                kernel,
                conv_bias,
                mix,
                mix_bias,
                height,
                width,
            },
        )
    }

    /// Gradients of the scalar at `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.value(root).numel(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(
            self.value(root).shape().to_vec(),
            vec![1.0],
        ));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.clone());
            }
            Op::AddRow(a, row) => {
                accumulate(&mut grads[a.0], g.clone());
                let width = g.row_width();
                let mut gr = vec![0.0; width];
                for r in 0..g.rows() {
                    for (acc, &v) in gr.iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                accumulate(
                    &mut grads[row.0],
                    Tensor::new(self.value(*row).shape().to_vec(), gr),
                );
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                let neg = g.data().iter().map(|x| -x).collect();
                accumulate(&mut grads[b.0], Tensor::new(g.shape().to_vec(), neg));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = g
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(x, y)| x * y)
                    .collect();
                let gb = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(x, y)| x * y)
                    .collect();
                accumulate(&mut grads[a.0], Tensor::new(g.shape().to_vec(), ga));
                accumulate(&mut grads[b.0], Tensor::new(g.shape().to_vec(), gb));
            }
            Op::Scale(a, factor) => {
                let ga = g.data().iter().map(|x| x * factor).collect();
                accumulate(&mut grads[a.0], Tensor::new(g.shape().to_vec(), ga));
            }
            Op::Matmul(a, b) => {
                // out = A·B, gA = G·Bᵀ, gB = Aᵀ·G.
                let (va, vb) = (self.value(*a), self.value(*b));
                accumulate(&mut grads[a.0], matmul_tb_values(g, vb));
                accumulate(&mut grads[b.0], matmul_at_values(va, g));
            }
            Op::MatmulTransB(a, b) => {
                // out = A·Bᵀ, gA = G·B, gB = Gᵀ·A.
                let (va, vb) = (self.value(*a), self.value(*b));
                accumulate(&mut grads[a.0], matmul_values(g, vb));
                accumulate(&mut grads[b.0], matmul_at_values(g, va));
            }
            Op::SliceCols(a, start, width) => {
                let va = self.value(*a);
                let mut ga = Tensor::zeros(va.shape().to_vec());
                let cols = va.row_width();
                for r in 0..va.rows() {
                    let dst = &mut ga.data_mut()[r * cols + start..r * cols + start + width];
                    for (d, &v) in dst.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let width = vp.row_width();
                    let mut gp = Tensor::zeros(vp.shape().to_vec());
                    for r in 0..vp.rows() {
                        let src = &g.row(r)[offset..offset + width];
                        gp.data_mut()[r * width..(r + 1) * width].copy_from_slice(src);
                    }
                    accumulate(&mut grads[p.0], gp);
                    offset += width;
                }
            }
            Op::SoftmaxRows(a) => {
                let p = &self.nodes[i].value;
                let mut ga = Tensor::zeros(p.shape().to_vec());
                let width = p.row_width();
                for r in 0..p.rows() {
                    let pr = p.row(r);
                    let gr = g.row(r);
                    let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    let dst = &mut ga.data_mut()[r * width..(r + 1) * width];
                    for ((d, &pv), &gv) in dst.iter_mut().zip(pr).zip(gr) {
                        *d = pv * (gv - dot);
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::LayerNorm(a, gain, shift) => {
                let (va, vg) = (self.value(*a), self.value(*gain));
                let width = va.row_width();
                let n = width as f64;
                let mut ga = Tensor::zeros(va.shape().to_vec());
                let mut ggain = vec![0.0; width];
                let mut gshift = vec![0.0; width];
                for r in 0..va.rows() {
                    let row = va.row(r);
                    let gr = g.row(r);
                    let (mean, inv_sd) = row_moments(row);
                    // gx = inv_sd · (gx̂ − mean(gx̂) − x̂ · mean(gx̂ ⊙ x̂))
                    let mut mean_gh = 0.0;
                    let mut mean_gh_h = 0.0;
                    for (c, (&x, &gv)) in row.iter().zip(gr).enumerate() {
                        let hat = (x - mean) * inv_sd;
                        let gh = gv * vg.data()[c];
                        mean_gh += gh;
                        mean_gh_h += gh * hat;
                        ggain[c] += gv * hat;
                        gshift[c] += gv;
                    }
                    mean_gh /= n;
                    mean_gh_h /= n;
                    let dst = &mut ga.data_mut()[r * width..(r + 1) * width];
                    for (c, (&x, &gv)) in row.iter().zip(gr).enumerate() {
                        let hat = (x - mean) * inv_sd;
                        let gh = gv * vg.data()[c];
                        dst[c] = inv_sd * (gh - mean_gh - hat * mean_gh_h);
                    }
                }
                accumulate(&mut grads[a.0], ga);
                accumulate(
                    &mut grads[gain.0],
                    Tensor::new(self.value(*gain).shape().to_vec(), ggain),
                );
                accumulate(
                    &mut grads[shift.0],
                    Tensor::new(self.value(*shift).shape().to_vec(), gshift),
                );
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let ga = va
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| gv * gelu_grad(x))
                    .collect();
                accumulate(&mut grads[a.0], Tensor::new(va.shape().to_vec(), ga));
            }
            Op::GatherRows(table, indices) => {
                let vt = self.value(*table);
                let width = vt.row_width();
                let mut gt = Tensor::zeros(vt.shape().to_vec());
                for (r, &idx) in indices.iter().enumerate() {
                    let dst = &mut gt.data_mut()[idx * width..(idx + 1) * width];
                    for (d, &v) in dst.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                accumulate(&mut grads[table.0], gt);
            }
            Op::PickEntries(a, cols) => {
                let va = self.value(*a);
                let mut ga = Tensor::zeros(va.shape().to_vec());
                let width = va.row_width();
                for (r, &c) in cols.iter().enumerate() {
                    ga.data_mut()[r * width + c] += g.data()[r];
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::Log(a) => {
                let va = self.value(*a);
                let ga = va
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| gv / x)
                    .collect();
                accumulate(&mut grads[a.0], Tensor::new(va.shape().to_vec(), ga));
            }
            Op::MeanAll(a) => {
                let va = self.value(*a);
                let per = g.data()[0] / va.numel() as f64;
                accumulate(
                    &mut grads[a.0],
                    Tensor::new(va.shape().to_vec(), vec![per; va.numel()]),
                );
            }
            Op::Reshape(a) => {
                let va = self.value(*a);
                accumulate(
                    &mut grads[a.0],
                    Tensor::new(va.shape().to_vec(), g.data().to_vec()),
                );
            }
            Op::MaskedPrefixSum(a, mask) => {
                // g_in[i, :] = mask[i] · Σ_{t>i} g[t, :]: a masked suffix sum.
                let va = self.value(*a);
                let (rows, width) = (va.rows(), va.row_width());
                let mut ga = Tensor::zeros(va.shape().to_vec());
                let mut suffix = vec![0.0; width];
                for t in (0..rows).rev() {
                    if mask[t] != 0.0 {
                        let dst = &mut ga.data_mut()[t * width..(t + 1) * width];
                        for (d, &s) in dst.iter_mut().zip(&suffix) {
                            *d = mask[t] * s;
                        }
                    }
                    for (s, &v) in suffix.iter_mut().zip(g.row(t)) {
                        *s += v;
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::CoverageFilter {
                input,
                kernel,
                conv_bias,
                mix,
                mix_bias,
                height,
                width,
            } => {
                let out = coverage_filter_backward(
                    self.value(*input),
                    self.value(*kernel),
                    self.value(*conv_bias),
                    self.value(*mix),
                    g,
                    *height,
                    *width,
                );
                accumulate(&mut grads[input.0], out.input);
                accumulate(&mut grads[kernel.0], out.kernel);
                accumulate(&mut grads[conv_bias.0], out.conv_bias);
                accumulate(&mut grads[mix.0], out.mix);
                accumulate(&mut grads[mix_bias.0], out.mix_bias);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        None => *slot = Some(delta),
        Some(acc) => {
            debug_assert_eq!(acc.shape(), delta.shape());
            for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
    }
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    const EPS: f64 = 1e-5;
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + EPS).sqrt())
}

/// GELU with the tanh approximation; smooth everywhere, which keeps
/// finite-difference checks clean.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

fn matmul_values(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.row_width());
    let (kb, n) = (b.rows(), b.row_width());
    assert_eq!(k, kb, "matmul: inner dimensions differ");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = a.row(i);
        let dst = &mut out[i * n..(i + 1) * n];
        for (t, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = b.row(t);
            for (d, &bv) in dst.iter_mut().zip(br) {
                *d += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `A · Bᵀ` for row-major `A: [m,k]`, `B: [n,k]`.
fn matmul_tb_values(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.row_width());
    let (n, kb) = (b.rows(), b.row_width());
    assert_eq!(k, kb, "matmul_trans_b: row widths differ");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            let br = b.row(j);
            let mut acc = 0.0;
            for (x, y) in ar.iter().zip(br) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `Aᵀ · G` for row-major `A: [m,k]`, `G: [m,n]`.
fn matmul_at_values(a: &Tensor, g: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.row_width());
    let (mg, n) = (g.rows(), g.row_width());
    assert_eq!(m, mg, "matmul_at: row counts differ");
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let ar = a.row(i);
        let gr = g.row(i);
        for (t, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let dst = &mut out[t * n..(t + 1) * n];
            for (d, &gv) in dst.iter_mut().zip(gr) {
                *d += av * gv;
            }
        }
    }
    Tensor::new(vec![k, n], out)
}

/// Each output row is the mask-weighted sum of all earlier input rows:
/// `out[t, :] = Σ_{i<t} mask[i] · a[i, :]`.
///
/// Rows with a zero mask are skipped rather than multiplied, so a fully
/// masked prefix yields exact zeros.
pub fn masked_prefix_sum_values(a: &Tensor, mask: &[f64]) -> Tensor {
    let (rows, width) = (a.rows(), a.row_width());
    assert_eq!(rows, mask.len(), "masked_prefix_sum: one mask entry per row");
    let mut data = vec![0.0; a.numel()];
    let mut running = vec![0.0; width];
    for t in 0..rows {
        data[t * width..(t + 1) * width].copy_from_slice(&running);
        if mask[t] != 0.0 {
            for (acc, &x) in running.iter_mut().zip(a.row(t)) {
                *acc += mask[t] * x;
            }
        }
    }
    Tensor::new(a.shape().to_vec(), data)
}

/// Numerically stable row softmax over the trailing dimensions.
pub fn softmax_rows_values(a: &Tensor) -> Tensor {
    let mut data = Vec::with_capacity(a.numel());
    for r in 0..a.rows() {
        let row = a.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        let exps: Vec<f64> = row
            .iter()
            .map(|&x| {
                let e = (x - max).exp();
                denom += e;
                e
            })
            .collect();
        data.extend(exps.into_iter().map(|e| e / denom));
    }
    Tensor::new(a.shape().to_vec(), data)
}

/// Forward pass of the affine coverage filter.
///
/// `input: [rows, height·width]` is treated as `rows` separate maps. Each
/// map runs through a same-padded 2D convolution with `kernel:
/// [channels, kh, kw]` and `conv_bias: [channels]`, and the channels are
/// combined by `mix: [channels]` plus `mix_bias: [1]`. Because the filter
/// is affine with no activation, the channel mix folds into a single
/// effective kernel, which both passes exploit.
pub fn coverage_filter_values(
    input: &Tensor,
    kernel: &Tensor,
    conv_bias: &Tensor,
    mix: &Tensor,
    mix_bias: &Tensor,
    height: usize,
    width: usize,
) -> Tensor {
    let rows = input.rows();
    assert_eq!(input.row_width(), height * width, "coverage: map size mismatch");
    let (channels, kh, kw) = kernel_dims(kernel);
    assert_eq!(conv_bias.numel(), channels);
    assert_eq!(mix.numel(), channels);
    assert_eq!(mix_bias.numel(), 1);

    let effective = effective_kernel(kernel, mix, channels, kh, kw);
    let mut bias = mix_bias.data()[0];
    for f in 0..channels {
        bias += mix.data()[f] * conv_bias.data()[f];
    }

    let mut out = vec![0.0; input.numel()];
    for r in 0..rows {
        let map = input.row(r);
        let dst = &mut out[r * height * width..(r + 1) * height * width];
        correlate_into(map, &effective, height, width, kh, kw, dst);
        for d in dst.iter_mut() {
            *d += bias;
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

fn kernel_dims(kernel: &Tensor) -> (usize, usize, usize) {
    let s = kernel.shape();
    assert_eq!(s.len(), 3, "kernel must be [channels, kh, kw]");
    (s[0], s[1], s[2])
}

/// Σ_f mix[f] · kernel[f]; one kernel because the filter is affine.
fn effective_kernel(kernel: &Tensor, mix: &Tensor, channels: usize, kh: usize, kw: usize) -> Vec<f64> {
    let mut eff = vec![0.0; kh * kw];
    for f in 0..channels {
        let m = mix.data()[f];
        if m == 0.0 {
            continue;
        }
        let base = f * kh * kw;
        for (e, &k) in eff.iter_mut().zip(&kernel.data()[base..base + kh * kw]) {
            *e += m * k;
        }
    }
    eff
}

/// Same-padded correlation of one map with one kernel, accumulated into `dst`.
fn correlate_into(
    map: &[f64],
    kernel: &[f64],
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    dst: &mut [f64],
) {
    let (ry, rx) = (kh / 2, kw / 2);
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for dy in 0..kh {
                let sy = y + dy;
                if sy < ry || sy - ry >= height {
                    continue;
                }
                let sy = sy - ry;
                for dx in 0..kw {
                    let sx = x + dx;
                    if sx < rx || sx - rx >= width {
                        continue;
                    }
                    let k = kernel[dy * kw + dx];
                    if k == 0.0 {
                        continue;
                    }
                    acc += k * map[sy * width + sx - rx];
                }
            }
            dst[y * width + x] += acc;
        }
    }
}

struct CoverageGrads {
    input: Tensor,
    kernel: Tensor,
    conv_bias: Tensor,
    mix: Tensor,
    mix_bias: Tensor,
}

fn coverage_filter_backward(
    input: &Tensor,
    kernel: &Tensor,
    conv_bias: &Tensor,
    mix: &Tensor,
    g: &Tensor,
    height: usize,
    width: usize,
) -> CoverageGrads {
    let rows = input.rows();
    let (channels, kh, kw) = kernel_dims(kernel);
    let (ry, rx) = (kh / 2, kw / 2);

    let g_sum: f64 = g.data().iter().sum();

    // corr[dy,dx] = Σ_{r,y,x} g[r,y,x] · padded(input)[r, y+dy−ry, x+dx−rx];
    // shared by the kernel gradient (scaled per channel) and the mix
    // gradient (dotted with each channel's kernel).
    let mut corr = vec![0.0; kh * kw];
    for r in 0..rows {
        let map = input.row(r);
        let gr = g.row(r);
        for y in 0..height {
            for x in 0..width {
                let gv = gr[y * width + x];
                if gv == 0.0 {
                    continue;
                }
                for dy in 0..kh {
                    let sy = y + dy;
                    if sy < ry || sy - ry >= height {
                        continue;
                    }
                    let sy = sy - ry;
                    for dx in 0..kw {
                        let sx = x + dx;
                        if sx < rx || sx - rx >= width {
                            continue;
                        }
                        corr[dy * kw + dx] += gv * map[sy * width + sx - rx];
                    }
                }
            }
        }
    }

    let mut g_kernel = Tensor::zeros(kernel.shape().to_vec());
    let mut g_mix = Tensor::zeros(mix.shape().to_vec());
    let mut g_conv_bias = Tensor::zeros(conv_bias.shape().to_vec());
    for f in 0..channels {
        let base = f * kh * kw;
        let m = mix.data()[f];
        let mut dot = 0.0;
        for (i, &c) in corr.iter().enumerate() {
            g_kernel.data_mut()[base + i] = m * c;
            dot += kernel.data()[base + i] * c;
        }
        g_mix.data_mut()[f] = dot + conv_bias.data()[f] * g_sum;
        g_conv_bias.data_mut()[f] = m * g_sum;
    }
    let g_mix_bias = Tensor::new(vec![1], vec![g_sum]);

    // g_input is the transposed correlation with the effective kernel.
    let effective = effective_kernel(kernel, mix, channels, kh, kw);
    let mut flipped = vec![0.0; kh * kw];
    for dy in 0..kh {
        for dx in 0..kw {
            flipped[(kh - 1 - dy) * kw + (kw - 1 - dx)] = effective[dy * kw + dx];
        }
    }
    let mut g_input = Tensor::zeros(input.shape().to_vec());
    for r in 0..rows {
        let gr = g.row(r);
        let dst = &mut g_input.data_mut()[r * height * width..(r + 1) * height * width];
        correlate_into(gr, &flipped, height, width, kh, kw, dst);
    }

    CoverageGrads {
        input: g_input,
        kernel: g_kernel,
        conv_bias: g_conv_bias,
        mix: g_mix,
        mix_bias: g_mix_bias,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    /// Central finite difference of a scalar-valued graph with respect to
    /// every input tensor, compared entrywise against the tape gradients.
    fn check_op(
        build: impl Fn(&mut Tape, &[Var]) -> Var,
        inputs: &[Tensor],
        eps: f64,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        assert_eq!(tape.value(out).numel(), 1, "check_op wants scalar outputs");
        let grads = tape.backward(out);

        let eval = |perturbed: &[Tensor]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
            let o = build(&mut t, &vs);
            t.value(o).data()[0]
        };

        for (which, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[which])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
            for e in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[e] += eps;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[e] -= eps;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let ga = analytic.data()[e];
                let rel = (ga - fd).abs() / f64::max(1e-8, ga.abs() + fd.abs());
                assert!(
                    rel <= tol,
                    "input {which} entry {e}: analytic {ga} vs fd {fd} (rel {rel:.3e})"
                );
            }
        }
    }

    fn rand_tensor(shape: Vec<usize>, rng: &mut SplitMix64) -> Tensor {
        Tensor::uniform(shape, 0.8, rng)
    }

    #[test]
    fn add_sub_mul_scale_grads() {
        let mut rng = SplitMix64::new(1);
        let a = rand_tensor(vec![3, 4], &mut rng);
        let b = rand_tensor(vec![3, 4], &mut rng);
        check_op(
            |t, v| {
                let s = t.add(v[0], v[1]);
                let d = t.sub(s, v[1]);
                let m = t.mul(d, v[1]);
                let sc = t.scale(m, -1.7);
                t.mean_all(sc)
            },
            &[a, b],
            1e-5,
            1e-7,
        );
    }

    #[test]
    fn add_row_grads() {
        let mut rng = SplitMix64::new(2);
        let a = rand_tensor(vec![4, 3], &mut rng);
        let row = rand_tensor(vec![3], &mut rng);
        check_op(
            |t, v| {
                let s = t.add_row(v[0], v[1]);
                let m = t.mul(s, s);
                t.mean_all(m)
            },
            &[a, row],
            1e-5,
            1e-7,
        );
    }

    #[test]
    fn matmul_grads() {
        let mut rng = SplitMix64::new(3);
        let a = rand_tensor(vec![3, 5], &mut rng);
        let b = rand_tensor(vec![5, 2], &mut rng);
        check_op(
            |t, v| {
                let p = t.matmul(v[0], v[1]);
                let q = t.mul(p, p);
                t.mean_all(q)
            },
            &[a, b],
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn matmul_trans_b_grads() {
        let mut rng = SplitMix64::new(4);
        let a = rand_tensor(vec![3, 5], &mut rng);
        let b = rand_tensor(vec![4, 5], &mut rng);
        check_op(
            |t, v| {
                let p = t.matmul_trans_b(v[0], v[1]);
                let q = t.mul(p, p);
                t.mean_all(q)
            },
            &[a, b],
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn slice_concat_reshape_grads() {
        let mut rng = SplitMix64::new(5);
        let a = rand_tensor(vec![3, 6], &mut rng);
        check_op(
            |t, v| {
                let left = t.slice_cols(v[0], 0, 2);
                let mid = t.slice_cols(v[0], 2, 3);
                let back = t.concat_cols(&[mid, left]);
                let shaped = t.reshape(back, vec![5, 3]);
                let sq = t.mul(shaped, shaped);
                t.mean_all(sq)
            },
            &[a],
            1e-5,
            1e-7,
        );
    }

    #[test]
    fn softmax_log_pick_grads() {
        let mut rng = SplitMix64::new(6);
        let a = rand_tensor(vec![4, 5], &mut rng);
        check_op(
            |t, v| {
                let p = t.softmax_rows(v[0]);
                let picked = t.pick_entries(p, &[1, 0, 4, 2]);
                let lp = t.log(picked);
                let m = t.mean_all(lp);
                t.scale(m, -1.0)
            },
            &[a],
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn layer_norm_grads() {
        let mut rng = SplitMix64::new(7);
        let a = rand_tensor(vec![3, 6], &mut rng);
        let gain = rand_tensor(vec![6], &mut rng);
        let shift = rand_tensor(vec![6], &mut rng);
        check_op(
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2]);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            &[a, gain, shift],
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn gelu_grads() {
        let mut rng = SplitMix64::new(8);
        let a = rand_tensor(vec![4, 4], &mut rng);
        check_op(
            |t, v| {
                let y = t.gelu(v[0]);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            &[a],
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn gather_rows_grads_with_duplicates() {
        let mut rng = SplitMix64::new(9);
        let table = rand_tensor(vec![5, 3], &mut rng);
        check_op(
            |t, v| {
                let rows = t.gather_rows(v[0], &[0, 2, 2, 4, 0]);
                let sq = t.mul(rows, rows);
                t.mean_all(sq)
            },
            &[table],
            1e-5,
            1e-7,
        );
    }

    #[test]
    fn masked_prefix_sum_grads() {
        let mut rng = SplitMix64::new(10);
        let a = rand_tensor(vec![5, 4], &mut rng);
        let mask = [1.0, 0.0, 1.0, 1.0, 0.0];
        check_op(
            |t, v| {
                let acc = t.masked_prefix_sum(v[0], &mask);
                let sq = t.mul(acc, acc);
                t.mean_all(sq)
            },
            &[a],
            1e-5,
            1e-7,
        );
    }

    #[test]
    fn masked_prefix_sum_values() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(
            vec![3, 2],
            vec![1.0, 2.0, 10.0, 20.0, 100.0, 200.0],
        ));
        let out = tape.masked_prefix_sum(a, &[1.0, 0.0, 1.0]);
        assert_eq!(
            tape.value(out).data(),
            [0.0, 0.0, 1.0, 2.0, 1.0, 2.0]
        );
    }

    #[test]
    fn coverage_filter_grads() {
        let mut rng = SplitMix64::new(11);
        let input = rand_tensor(vec![2, 12], &mut rng); // two 3×4 maps
        let kernel = rand_tensor(vec![3, 3, 3], &mut rng);
        let conv_bias = rand_tensor(vec![3], &mut rng);
        let mix = rand_tensor(vec![3], &mut rng);
        let mix_bias = rand_tensor(vec![1], &mut rng);
        check_op(
            |t, v| {
                let y = t.coverage_filter(v[0], v[1], v[2], v[3], v[4], 3, 4);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            &[input, kernel, conv_bias, mix, mix_bias],
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn coverage_filter_zero_parameters_give_exact_zero() {
        let mut rng = SplitMix64::new(12);
        let input = rand_tensor(vec![3, 20], &mut rng);
        let out = coverage_filter_values(
            &input,
            &Tensor::zeros(vec![8, 5, 5]),
            &Tensor::zeros(vec![8]),
            &Tensor::zeros(vec![8]),
            &Tensor::zeros(vec![1]),
            4,
            5,
        );
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn coverage_filter_matches_naive_convolution() {
        // Cross-check the folded effective-kernel path against a direct
        // per-channel evaluation.
        let mut rng = SplitMix64::new(13);
        let (h, w, channels, kh, kw) = (4, 5, 2, 3, 3);
        let input = rand_tensor(vec![2, h * w], &mut rng);
        let kernel = rand_tensor(vec![channels, kh, kw], &mut rng);
        let conv_bias = rand_tensor(vec![channels], &mut rng);
        let mix = rand_tensor(vec![channels], &mut rng);
        let mix_bias = rand_tensor(vec![1], &mut rng);
        let fast = coverage_filter_values(&input, &kernel, &conv_bias, &mix, &mix_bias, h, w);

        let at = |map: &[f64], y: isize, x: isize| -> f64 {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                map[y as usize * w + x as usize]
            }
        };
        for r in 0..2 {
            let map = input.row(r);
            for y in 0..h {
                for x in 0..w {
                    let mut expected = mix_bias.data()[0];
                    for f in 0..channels {
                        let mut conv = conv_bias.data()[f];
                        for dy in 0..kh {
                            for dx in 0..kw {
                                conv += kernel.data()[(f * kh + dy) * kw + dx]
                                    * at(
                                        map,
                                        y as isize + dy as isize - 1,
                                        x as isize + dx as isize - 1,
                                    );
                            }
                        }
                        expected += mix.data()[f] * conv;
                    }
                    let got = fast.at2(r, y * w + x);
                    assert!(
                        (got - expected).abs() < 1e-12,
                        "({r},{y},{x}): {got} vs {expected}"
                    );
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = SplitMix64::new(14);
        let a = Tensor::uniform(vec![6, 9], 30.0, &mut rng);
        let p = softmax_rows_values(&a);
        for r in 0..6 {
            let s: f64 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_accumulates_shared_subgraphs() {
        // f(x) = mean(x·x + x·x) uses x twice via the same intermediate.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![3.0, -1.0]));
        let sq = tape.mul(x, x);
        let s = tape.add(sq, sq);
        let out = tape.mean_all(s);
        let grads = tape.backward(out);
        // d/dx mean(2x²) = 2x per entry / 2 entries.
        assert_eq!(grads.get(x).unwrap().data(), [6.0, -2.0]);
    }
}

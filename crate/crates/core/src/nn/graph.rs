//! Reverse-mode automatic differentiation over dynamically shaped `f64`
//! arrays.
//!
//! Every training step builds a fresh [`Graph`], records the forward pass as
//! a flat tape of nodes, and calls [`Graph::backward`] once on a scalar loss.
//! Nodes are processed strictly in reverse creation order, so gradient
//! accumulation is deterministic: the same forward pass always produces the
//! same gradients bit for bit.
//!
//! Convolutional values use the `(channels, time)` layout; attention values
//! use `(time, width)`. Both are plain 2-D arrays, the ops below just differ
//! in which axis a bias broadcasts over.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    /// Bias per row: `b[i]` added to every element of row `i`.
    AddBiasRows(Var, Var),
    /// Bias per column: `b[j]` added to every element of column `j`.
    AddBiasCols(Var, Var),
    /// 1-D convolution over the column (time) axis via im2col.
    Conv1d {
        input: Var,
        weight: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// Nearest-neighbour upsampling by 2 along the column axis.
    Upsample2(Var),
    SliceCols {
        input: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanAll(Var),
    SumAll(Var),
    /// Mean over the column axis, keeping a `(rows, 1)` shape.
    MeanCols(Var),
    /// Row-wise softmax.
    SoftmaxRows(Var),
    /// Mean cross-entropy of row-wise softmax against integer targets.
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    /// Row gather: output row `i` is `table[ids[i]]`.
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    /// Row-wise layer normalization with learned gain and bias.
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    /// Identity on the backward pass: the forward value is replaced by an
    /// externally computed array (the quantized latents) while gradients
    /// flow through to the parent unchanged.
    StraightThrough(Var),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// A forward tape plus the machinery to run one backward pass over it.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    fn val2(&self, v: Var) -> ndarray::ArrayView2<'_, f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("expected 2-D value")
    }

    fn val1(&self, v: Var) -> ndarray::ArrayView1<'_, f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("expected 1-D value")
    }

    /// Gradient of the last `backward` root with respect to `v`.
    ///
    /// Zero-filled if `v` did not influence the root.
    pub fn grad(&self, v: Var) -> ArrayD<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(self.nodes[v.0].value.raw_dim()),
        }
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf2(&mut self, value: Array2<f64>) -> Var {
        self.push(value.into_dyn(), Op::Leaf)
    }

    pub fn leaf1(&mut self, value: Array1<f64>) -> Var {
        self.push(value.into_dyn(), Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.val2(a).dot(&self.val2(b));
        self.push(v.into_dyn(), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.val2(a).t().to_owned();
        self.push(v.into_dyn(), Op::Transpose(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn add_bias_rows(&mut self, a: Var, b: Var) -> Var {
        let x = self.val2(a);
        let bias = self.val1(b);
        let mut v = x.to_owned();
        for (mut row, &bi) in v.rows_mut().into_iter().zip(bias.iter()) {
            row += bi;
        }
        self.push(v.into_dyn(), Op::AddBiasRows(a, b))
    }

    pub fn add_bias_cols(&mut self, a: Var, b: Var) -> Var {
        let x = self.val2(a);
        let bias = self.val1(b);
        let mut v = x.to_owned();
        for mut row in v.rows_mut() {
            row += &bias;
        }
        self.push(v.into_dyn(), Op::AddBiasCols(a, b))
    }

    /// `input` is `(c_in, t)`, `weight` is `(c_out, c_in * kernel)`; output is
    /// `(c_out, t_out)` with `t_out = (t + 2*pad - kernel) / stride + 1`.
    pub fn conv1d(&mut self, input: Var, weight: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let x = self.val2(input);
        let w = self.val2(weight);
        let cols = im2col(&x.to_owned(), kernel, stride, pad);
        let v = w.dot(&cols);
        self.push(
            v.into_dyn(),
            Op::Conv1d {
                input,
                weight,
                kernel,
                stride,
                pad,
            },
        )
    }

    pub fn upsample2(&mut self, a: Var) -> Var {
        let x = self.val2(a);
        let (c, t) = x.dim();
        let mut v = Array2::zeros((c, 2 * t));
        for i in 0..c {
            for j in 0..t {
                v[[i, 2 * j]] = x[[i, j]];
                v[[i, 2 * j + 1]] = x[[i, j]];
            }
        }
        self.push(v.into_dyn(), Op::Upsample2(a))
    }

    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Var {
        let x = self.val2(input);
        let v = x.slice(ndarray::s![.., start..start + len]).to_owned();
        self.push(v.into_dyn(), Op::SliceCols { input, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.val2(*p)).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(v.into_dyn(), Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.val2(*p)).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(v.into_dyn(), Op::ConcatRows(parts.to_vec()))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.nodes[a.0].value.mean().unwrap_or(0.0);
        self.push(ndarray::arr1(&[m]).into_dyn(), Op::MeanAll(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(ndarray::arr1(&[s]).into_dyn(), Op::SumAll(a))
    }

    pub fn mean_cols(&mut self, a: Var) -> Var {
        let x = self.val2(a);
        let t = x.ncols() as f64;
        let v = (x.sum_axis(Axis(1)) / t).insert_axis(Axis(1));
        self.push(v.into_dyn(), Op::MeanCols(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.val2(a);
        let mut v = x.to_owned();
        for mut row in v.rows_mut() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|e| (e - mx).exp());
            let s = row.sum();
            row /= s;
        }
        self.push(v.into_dyn(), Op::SoftmaxRows(a))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Targets are not differentiated.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = self.val2(logits);
        assert_eq!(x.nrows(), targets.len(), "one target per logit row");
        let mut total = 0.0;
        for (row, &t) in x.rows().into_iter().zip(targets.iter()) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&e| (e - mx).exp()).sum::<f64>().ln() + mx;
            total += lse - row[t];
        }
        let v = ndarray::arr1(&[total / targets.len() as f64]).into_dyn();
        self.push(
            v,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tbl = self.val2(table);
        let mut v = Array2::zeros((ids.len(), tbl.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).assign(&tbl.row(id));
        }
        self.push(
            v.into_dyn(),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let x = self.val2(input);
        let g = self.val1(gain);
        let b = self.val1(bias);
        let mut v = x.to_owned();
        for mut row in v.rows_mut() {
            let n = row.len() as f64;
            let mu = row.sum() / n;
            let var = row.iter().map(|&e| (e - mu) * (e - mu)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (e, (&gi, &bi)) in row.iter_mut().zip(g.iter().zip(b.iter())) {
                *e = (*e - mu) * inv * gi + bi;
            }
        }
        self.push(
            v.into_dyn(),
            Op::LayerNorm {
                input,
                gain,
                bias,
                eps,
            },
        )
    }

    /// Replace the forward value with `quantized` while passing gradients
    /// straight through to `latent`.
    pub fn straight_through(&mut self, latent: Var, quantized: Array2<f64>) -> Var {
        assert_eq!(
            self.val2(latent).dim(),
            quantized.dim(),
            "straight_through: shape mismatch"
        );
        self.push(quantized.into_dyn(), Op::StraightThrough(latent))
    }

    fn accumulate(&mut self, v: Var, g: ArrayD<f64>) {
        match &mut self.grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Run one backward pass from the scalar node `root`.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));

        for idx in (0..self.nodes.len()).rev() {
            let gout = match self.grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.step_back(idx, &gout);
            self.grads[idx] = Some(gout);
        }
    }

    fn step_back(&mut self, idx: usize, gout: &ArrayD<f64>) {
        // Ops that read parent values clone what they need before mutating
        // the grad table.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, gout.clone());
                self.accumulate(b, gout.clone());
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, gout.clone());
                self.accumulate(b, -gout.clone());
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ga = gout * &self.nodes[b.0].value;
                let gb = gout * &self.nodes[a.0].value;
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                self.accumulate(a, gout * c);
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                let ga = g.dot(&self.val2(b).t());
                let gb = self.val2(a).t().dot(&g);
                self.accumulate(a, ga.into_dyn());
                self.accumulate(b, gb.into_dyn());
            }
            Op::Transpose(a) => {
                let a = *a;
                let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                self.accumulate(a, g.t().to_owned().into_dyn());
            }
            Op::Relu(a) => {
                let a = *a;
                let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(a, gout * &mask);
            }
            Op::AddBiasRows(a, b) => {
                let (a, b) = (*a, *b);
                let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                let gb = g.sum_axis(Axis(1));
                self.accumulate(a, gout.clone());
                self.accumulate(b, gb.into_dyn());
            }
            Op::AddBiasCols(a, b) => {
                let (a, b) = (*a, *b);
                let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                let gb = g.sum_axis(Axis(0));
                self.accumulate(a, gout.clone());
                self.accumulate(b, gb.into_dyn());
            }
            Op::Conv1d {
                input,
                weight,
                kernel,
                stride,
                pad,
            } => {
                let (input, weight) = (*input, *weight);
                let (kernel, stride, pad) = (*kernel, *stride, *pad);
                let g = gout
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap()
                    .to_owned();
                let x = self.val2(input).to_owned();
                let w = self.val2(weight).to_owned();
                let cols = im2col(&x, kernel, stride, pad);
                let gw = g.dot(&cols.t());
                let gcols = w.t().dot(&g);
                let gx = col2im(&gcols, x.dim(), kernel, stride, pad);
                self.accumulate(input, gx.into_dyn());
                self.accumulate(weight, gw.into_dyn());
            }
            Op::Upsample2(a) => {
                let a = *a;
                let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                let (c, t2) = g.dim();
                let t = t2 / 2;
                let mut gx = Array2::zeros((c, t));
                for i in 0..c {
                    for j in 0..t {
                        gx[[i, j]] = g[[i, 2 * j]] + g[[i, 2 * j + 1]];
                    }
                }
                self.accumulate(a, gx.into_dyn());
            }
            Op::SliceCols { input, start, len } => {
                let (input, start, len) = (*input, *start, *len);
                let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                let dim = self.val2(input).dim();
                let mut gx = Array2::zeros(dim);
                gx.slice_mut(ndarray::s![.., start..start + len]).assign(&g);
                self.accumulate(input, gx.into_dyn());
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                let mut offset = 0;
                for p in parts {
                    let w = self.val2(p).ncols();
                    let gp = g.slice(ndarray::s![.., offset..offset + w]).to_owned();
                    offset += w;
                    self.accumulate(p, gp.into_dyn());
                }
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                let mut offset = 0;
                for p in parts {
                    let h = self.val2(p).nrows();
                    let gp = g.slice(ndarray::s![offset..offset + h, ..]).to_owned();
                    offset += h;
                    self.accumulate(p, gp.into_dyn());
                }
            }
            Op::MeanAll(a) => {
                let a = *a;
                let n = self.nodes[a.0].value.len() as f64;
                let shape = self.nodes[a.0].value.raw_dim();
                let g = ArrayD::from_elem(shape, gout[[0]] / n);
                self.accumulate(a, g);
            }
            Op::SumAll(a) => {
                let a = *a;
                let shape = self.nodes[a.0].value.raw_dim();
                let g = ArrayD::from_elem(shape, gout[[0]]);
                self.accumulate(a, g);
            }
            Op::MeanCols(a) => {
                let a = *a;
                let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                let (c, t) = self.val2(a).dim();
                let mut gx = Array2::zeros((c, t));
                for i in 0..c {
                    let gi = g[[i, 0]] / t as f64;
                    gx.row_mut(i).fill(gi);
                }
                self.accumulate(a, gx.into_dyn());
            }
            Op::SoftmaxRows(a) => {
                let a = *a;
                let y = self.nodes[idx].value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
                let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                let mut gx = Array2::zeros(y.dim());
                for ((mut gxr, yr), gr) in gx
                    .rows_mut()
                    .into_iter()
                    .zip(y.rows())
                    .zip(g.rows())
                {
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(&yi, &gi)| yi * gi).sum();
                    for ((gxe, &ye), &ge) in gxr.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                        *gxe = ye * (ge - dot);
                    }
                }
                self.accumulate(a, gx.into_dyn());
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let logits = *logits;
                let targets = targets.clone();
                let x = self.val2(logits).to_owned();
                let n = targets.len() as f64;
                let scale = gout[[0]] / n;
                let mut gx = Array2::zeros(x.dim());
                for ((mut grow, xrow), &t) in
                    gx.rows_mut().into_iter().zip(x.rows()).zip(targets.iter())
                {
                    let mx = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = xrow.iter().map(|&e| (e - mx).exp()).collect();
                    let s: f64 = exps.iter().sum();
                    for (j, ge) in grow.iter_mut().enumerate() {
                        let p = exps[j] / s;
                        *ge = scale * (p - if j == t { 1.0 } else { 0.0 });
                    }
                }
                self.accumulate(logits, gx.into_dyn());
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                let mut gt = Array2::zeros(self.val2(table).dim());
                for (i, &id) in ids.iter().enumerate() {
                    let mut row = gt.row_mut(id);
                    row += &g.row(i);
                }
                self.accumulate(table, gt.into_dyn());
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                eps,
            } => {
                let (input, gain, bias, eps) = (*input, *gain, *bias, *eps);
                let x = self.val2(input).to_owned();
                let gvec = self.val1(gain).to_owned();
                let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                let (rows, w) = x.dim();
                let n = w as f64;
                let mut gx = Array2::zeros((rows, w));
                let mut gg = Array1::zeros(w);
                let mut gb = Array1::zeros(w);
                for r in 0..rows {
                    let xrow = x.row(r);
                    let grow = g.row(r);
                    let mu = xrow.sum() / n;
                    let var = xrow.iter().map(|&e| (e - mu) * (e - mu)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    // dxhat and the two reduction terms of the layer-norm backward
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    let xhat: Vec<f64> = xrow.iter().map(|&e| (e - mu) * inv).collect();
                    let dxhat: Vec<f64> = grow
                        .iter()
                        .zip(gvec.iter())
                        .map(|(&ge, &gi)| ge * gi)
                        .collect();
                    for j in 0..w {
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat[j];
                        gg[j] += grow[j] * xhat[j];
                        gb[j] += grow[j];
                    }
                    for j in 0..w {
                        gx[[r, j]] =
                            inv * (dxhat[j] - sum_dxhat / n - xhat[j] * sum_dxhat_xhat / n);
                    }
                }
                self.accumulate(input, gx.into_dyn());
                self.accumulate(gain, gg.into_dyn());
                self.accumulate(bias, gb.into_dyn());
            }
            Op::StraightThrough(a) => {
                let a = *a;
                self.accumulate(a, gout.clone());
            }
        }
    }
}

fn im2col(x: &Array2<f64>, kernel: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, t) = x.dim();
    let t_out = (t + 2 * pad - kernel) / stride + 1;
    let mut cols = Array2::zeros((c * kernel, t_out));
    for ci in 0..c {
        for k in 0..kernel {
            for o in 0..t_out {
                let src = o * stride + k;
                if src >= pad && src - pad < t {
                    cols[[ci * kernel + k, o]] = x[[ci, src - pad]];
                }
            }
        }
    }
    cols
}

fn col2im(
    gcols: &Array2<f64>,
    (c, t): (usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let t_out = gcols.ncols();
    let mut gx = Array2::zeros((c, t));
    for ci in 0..c {
        for k in 0..kernel {
            for o in 0..t_out {
                let src = o * stride + k;
                if src >= pad && src - pad < t {
                    gx[[ci, src - pad]] += gcols[[ci * kernel + k, o]];
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences on one leaf of a scalar-valued graph.
    fn check_grad<F>(build: F, leaf_val: ArrayD<f64>, tol: f64)
    where
        F: Fn(&mut Graph, Var) -> Var,
    {
        let mut g = Graph::new();
        let x = g.leaf(leaf_val.clone());
        let loss = build(&mut g, x);
        g.backward(loss);
        let analytic = g.grad(x);

        let h = 1e-5;
        for (i, _) in leaf_val.iter().enumerate() {
            let mut plus = leaf_val.clone();
            let mut minus = leaf_val.clone();
            *plus.iter_mut().nth(i).unwrap() += h;
            *minus.iter_mut().nth(i).unwrap() -= h;

            let mut gp = Graph::new();
            let xp = gp.leaf(plus);
            let lp = build(&mut gp, xp);
            let mut gm = Graph::new();
            let xm = gm.leaf(minus);
            let lm = build(&mut gm, xm);

            let fd = (gp.value(lp)[[0]] - gm.value(lm)[[0]]) / (2.0 * h);
            let an = *analytic.iter().nth(i).unwrap();
            assert!(
                (fd - an).abs() <= tol * (1.0 + fd.abs().max(an.abs())),
                "coord {i}: fd={fd} analytic={an}"
            );
        }
    }

    #[test]
    fn matmul_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_mat(&mut rng, 4, 3).into_dyn();
        let other = rand_mat(&mut rng, 3, 5);
        check_grad(
            move |g, x| {
                let o = g.leaf2(other.clone());
                let y = g.matmul(x, o);
                let sq = g.mul(y, y);
                g.mean_all(sq)
            },
            w,
            1e-6,
        );
    }

    #[test]
    fn conv1d_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_mat(&mut rng, 3, 8).into_dyn();
        let w = rand_mat(&mut rng, 5, 3 * 4);
        // input gradient
        check_grad(
            {
                let w = w.clone();
                move |g, x| {
                    let wv = g.leaf2(w.clone());
                    let y = g.conv1d(x, wv, 4, 2, 1);
                    let sq = g.mul(y, y);
                    g.mean_all(sq)
                }
            },
            x.clone(),
            1e-6,
        );
        // weight gradient
        let xc = x.clone();
        check_grad(
            move |g, wv| {
                let xv = g.leaf(xc.clone());
                let y = g.conv1d(xv, wv, 4, 2, 1);
                let sq = g.mul(y, y);
                g.mean_all(sq)
            },
            w.into_dyn(),
            1e-6,
        );
    }

    #[test]
    fn layer_norm_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_mat(&mut rng, 3, 6).into_dyn();
        let gain = Array1::from_shape_fn(6, |_| rng.gen_range(0.5..1.5));
        let bias = Array1::from_shape_fn(6, |_| rng.gen_range(-0.5..0.5));
        check_grad(
            move |g, x| {
                let gv = g.leaf1(gain.clone());
                let bv = g.leaf1(bias.clone());
                let y = g.layer_norm(x, gv, bv, 1e-5);
                let sq = g.mul(y, y);
                g.mean_all(sq)
            },
            x,
            1e-5,
        );
    }

    #[test]
    fn softmax_cross_entropy_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_mat(&mut rng, 4, 7).into_dyn();
        let targets = vec![2usize, 0, 6, 3];
        check_grad(
            move |g, x| g.softmax_cross_entropy(x, &targets),
            x,
            1e-6,
        );
    }

    #[test]
    fn softmax_rows_and_misc_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_mat(&mut rng, 3, 5).into_dyn();
        check_grad(
            move |g, x| {
                let s = g.softmax_rows(x);
                let up = g.upsample2(s);
                let sl = g.slice_cols(up, 1, 6);
                let r = g.relu(sl);
                let m = g.mean_cols(r);
                let sq = g.mul(m, m);
                g.mean_all(sq)
            },
            x,
            1e-6,
        );
    }

    #[test]
    fn embedding_grad_accumulates_repeated_ids() {
        let table = arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let mut g = Graph::new();
        let t = g.leaf2(table);
        let e = g.embedding(t, &[1, 1, 0]);
        let s = g.sum_all(e);
        g.backward(s);
        let gt = g.grad(t);
        let gt = gt.into_dimensionality::<Ix2>().unwrap();
        assert_eq!(gt[[1, 0]], 2.0);
        assert_eq!(gt[[0, 0]], 1.0);
        assert_eq!(gt[[2, 0]], 0.0);
    }

    #[test]
    fn straight_through_passes_grad_unchanged() {
        let mut g = Graph::new();
        let lat = g.leaf2(arr2(&[[0.3, 0.7], [0.1, 0.9]]));
        let q = g.straight_through(lat, arr2(&[[0.0, 1.0], [0.0, 1.0]]));
        let w = g.leaf2(arr2(&[[2.0, -1.0], [0.5, 3.0]]));
        let y = g.mul(q, w);
        let loss = g.mean_all(y);
        g.backward(loss);
        assert_eq!(g.grad(lat), g.grad(q));
    }

    #[test]
    fn concat_and_transpose_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_mat(&mut rng, 4, 3).into_dyn();
        let other = rand_mat(&mut rng, 4, 2);
        check_grad(
            move |g, x| {
                let o = g.leaf2(other.clone());
                let c = g.concat_cols(&[x, o]);
                let t = g.transpose(c);
                let sq = g.mul(t, t);
                g.mean_all(sq)
            },
            x,
            1e-6,
        );

        let x = rand_mat(&mut rng, 2, 3).into_dyn();
        let below = rand_mat(&mut rng, 3, 3);
        check_grad(
            move |g, x| {
                let b = g.leaf2(below.clone());
                let c = g.concat_rows(&[x, b]);
                let sq = g.mul(c, c);
                g.mean_all(sq)
            },
            x,
            1e-6,
        );
    }
}

use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use super::gemm::{gemm, Mat};
use super::{Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    out_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }
}

enum Op {
    Leaf {
        key: Option<usize>,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    Dense {
        input: usize,
        weight: usize,
        bias: usize,
        batch: usize,
    },
    Relu {
        input: usize,
    },
    LstmStep {
        x: usize,
        h: usize,
        c: usize,
        wx: usize,
        wh: usize,
        bias: usize,
        batch: usize,
        hidden: usize,
        // activated gates per row, laid out [i | f | g | o]
        gates: Vec<f32>,
        tanh_c: Vec<f32>,
    },
    SliceCols {
        input: usize,
        start: usize,
        width: usize,
        len: usize,
    },
    Gather {
        input: usize,
        index: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
    },
    Reshape {
        input: usize,
    },
    SquaredError {
        pred: usize,
        target: Vec<f32>,
    },
}

struct Node<'w> {
    value: Cow<'w, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Parameters are borrowed, not copied; gradients come back from
/// [`Tape::backward`] and are written into parameter slots with
/// [`Gradients::accumulate_into`] once the tape is dropped.
pub struct Tape<'w> {
    id: u64,
    nodes: Vec<Node<'w>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn dim_err(op: &'static str, axis: &'static str, expected: usize, got: usize) -> TensorError {
    TensorError::Dim {
        op,
        axis,
        expected,
        got,
    }
}

impl<'w> Tape<'w> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'w, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::Usage(
                "variable is not attached to this tape".into(),
            ));
        }
        Ok(v.index)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn req(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Trainable leaf; `key` identifies the slot its gradient belongs to.
    pub fn param(&mut self, key: usize, value: &'w Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf { key: Some(key) }, true)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf { key: None }, false)
    }

    /// Owned leaf that still receives a gradient (used for input sensitivities).
    pub fn input_with_grad(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf { key: None }, true)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(self.val(self.idx(v)?))
    }

    /// Valid (unpadded) 2-D convolution over `[C,H,W]` or `[B,C,H,W]` input.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let (ii, ki, bi) = (self.idx(input)?, self.idx(kernel)?, self.idx(bias)?);
        if stride == 0 {
            return Err(TensorError::Usage("conv2d stride must be positive".into()));
        }
        let xs = self.val(ii).shape();
        let (batch, batched) = match xs.len() {
            3 => (1, false),
            4 => (xs[0], true),
            _ => {
                return Err(TensorError::Rank {
                    op: OP,
                    shape: xs.to_vec(),
                })
            }
        };
        let (channels, height, width) = (xs[xs.len() - 3], xs[xs.len() - 2], xs[xs.len() - 1]);
        let ks = self.val(ki).shape();
        if ks.len() != 4 {
            return Err(TensorError::Rank {
                op: OP,
                shape: ks.to_vec(),
            });
        }
        let (out_channels, kernel_c, kernel_h, kernel_w) = (ks[0], ks[1], ks[2], ks[3]);
        if kernel_c != channels {
            return Err(dim_err(OP, "in_channels", kernel_c, channels));
        }
        if kernel_h > height {
            return Err(dim_err(OP, "height", kernel_h, height));
        }
        if kernel_w > width {
            return Err(dim_err(OP, "width", kernel_w, width));
        }
        let bs = self.val(bi).shape();
        if bs != [out_channels] {
            return Err(dim_err(OP, "bias", out_channels, bs.iter().product()));
        }
        let geom = ConvGeom {
            batch,
            channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            out_h: (height - kernel_h) / stride + 1,
            out_w: (width - kernel_w) / stride + 1,
        };
        let (patch, area) = (geom.patch(), geom.out_area());
        let x = self.val(ii).data();
        let mut cols = vec![0.0f32; batch * patch * area];
        for b in 0..batch {
            let xb = &x[b * channels * height * width..(b + 1) * channels * height * width];
            let cb = &mut cols[b * patch * area..(b + 1) * patch * area];
            im2col(xb, &geom, cb);
        }
        let kdata = self.val(ki).data();
        let bias_data = self.val(bi).data();
        let mut out = vec![0.0f32; batch * out_channels * area];
        for b in 0..batch {
            let ob = &mut out[b * out_channels * area..(b + 1) * out_channels * area];
            for (c, row) in ob.chunks_mut(area).enumerate() {
                row.fill(bias_data[c]);
            }
            gemm(
                Mat::new(kdata, out_channels, patch),
                Mat::new(&cols[b * patch * area..(b + 1) * patch * area], patch, area),
                1.0,
                ob,
            );
        }
        let shape: Vec<usize> = if batched {
            vec![batch, out_channels, geom.out_h, geom.out_w]
        } else {
            vec![out_channels, geom.out_h, geom.out_w]
        };
        let requires = self.req(ii) || self.req(ki) || self.req(bi);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            Cow::Owned(value),
            Op::Conv2d {
                input: ii,
                kernel: ki,
                bias: bi,
                geom,
                cols,
            },
            requires,
        ))
    }

    /// `weights · input + bias` for `[N]` or `[B,N]` input and `[M,N]` weights.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "dense";
        let (ii, wi, bi) = (self.idx(input)?, self.idx(weight)?, self.idx(bias)?);
        let xs = self.val(ii).shape();
        let (batch, n, batched) = match xs.len() {
            1 => (1, xs[0], false),
            2 => (xs[0], xs[1], true),
            _ => {
                return Err(TensorError::Rank {
                    op: OP,
                    shape: xs.to_vec(),
                })
            }
        };
        let ws = self.val(wi).shape();
        if ws.len() != 2 {
            return Err(TensorError::Rank {
                op: OP,
                shape: ws.to_vec(),
            });
        }
        let m = ws[0];
        if ws[1] != n {
            return Err(dim_err(OP, "inner", ws[1], n));
        }
        if self.val(bi).shape() != [m] {
            return Err(dim_err(OP, "bias", m, self.val(bi).numel()));
        }
        let bias_data = self.val(bi).data();
        let mut out = vec![0.0f32; batch * m];
        for row in out.chunks_mut(m) {
            row.copy_from_slice(bias_data);
        }
        gemm(
            Mat::new(self.val(ii).data(), batch, n),
            Mat::new(self.val(wi).data(), m, n).t(),
            1.0,
            &mut out,
        );
        let shape: Vec<usize> = if batched { vec![batch, m] } else { vec![m] };
        let requires = self.req(ii) || self.req(wi) || self.req(bi);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            Cow::Owned(value),
            Op::Dense {
                input: ii,
                weight: wi,
                bias: bi,
                batch,
            },
            requires,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let ii = self.idx(input)?;
        let x = self.val(ii);
        let data: Vec<f32> = x.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(x.shape(), data)?;
        let requires = self.req(ii);
        Ok(self.push(Cow::Owned(value), Op::Relu { input: ii }, requires))
    }

    /// One LSTM cell step with gate order input, forget, candidate, output.
    ///
    /// `wx` is `[4H, N_in]`, `wh` is `[4H, H]`, `bias` is `[4H]`; `x`, `h`
    /// and `c` are unbatched vectors or `[B, ·]` matrices. Returns `(h, c)`.
    pub fn lstm_step(
        &mut self,
        x: Var,
        h: Var,
        c: Var,
        wx: Var,
        wh: Var,
        bias: Var,
    ) -> Result<(Var, Var)> {
        const OP: &str = "lstm_step";
        let (xi, hi, ci) = (self.idx(x)?, self.idx(h)?, self.idx(c)?);
        let (wxi, whi, bi) = (self.idx(wx)?, self.idx(wh)?, self.idx(bias)?);
        let xs = self.val(xi).shape();
        let (batch, n_in, batched) = match xs.len() {
            1 => (1, xs[0], false),
            2 => (xs[0], xs[1], true),
            _ => {
                return Err(TensorError::Rank {
                    op: OP,
                    shape: xs.to_vec(),
                })
            }
        };
        let whs = self.val(whi).shape();
        if whs.len() != 2 || whs[0] != 4 * whs[1] {
            return Err(TensorError::Rank {
                op: OP,
                shape: whs.to_vec(),
            });
        }
        let hidden = whs[1];
        let wxs = self.val(wxi).shape();
        if wxs.len() != 2 || wxs[0] != 4 * hidden {
            return Err(dim_err(
                OP,
                "gates",
                4 * hidden,
                wxs.first().copied().unwrap_or(0),
            ));
        }
        if wxs[1] != n_in {
            return Err(dim_err(OP, "input", wxs[1], n_in));
        }
        if self.val(bi).shape() != [4 * hidden] {
            return Err(dim_err(OP, "bias", 4 * hidden, self.val(bi).numel()));
        }
        let state_shape: Vec<usize> = if batched {
            vec![batch, hidden]
        } else {
            vec![hidden]
        };
        if self.val(hi).shape() != state_shape.as_slice() {
            return Err(dim_err(OP, "hidden", hidden, self.val(hi).numel()));
        }
        if self.val(ci).shape() != state_shape.as_slice() {
            return Err(dim_err(OP, "cell", hidden, self.val(ci).numel()));
        }

        let g4 = 4 * hidden;
        let mut gates = vec![0.0f32; batch * g4];
        let bias_data = self.val(bi).data();
        for row in gates.chunks_mut(g4) {
            row.copy_from_slice(bias_data);
        }
        gemm(
            Mat::new(self.val(xi).data(), batch, n_in),
            Mat::new(self.val(wxi).data(), g4, n_in).t(),
            1.0,
            &mut gates,
        );
        gemm(
            Mat::new(self.val(hi).data(), batch, hidden),
            Mat::new(self.val(whi).data(), g4, hidden).t(),
            1.0,
            &mut gates,
        );
        let c_prev = self.val(ci).data();
        let mut out = vec![0.0f32; batch * 2 * hidden];
        let mut tanh_c = vec![0.0f32; batch * hidden];
        for b in 0..batch {
            let z = &mut gates[b * g4..(b + 1) * g4];
            for j in 0..hidden {
                let i_g = sigmoid(z[j]);
                let f_g = sigmoid(z[hidden + j]);
                let g_g = z[2 * hidden + j].tanh();
                let o_g = sigmoid(z[3 * hidden + j]);
                z[j] = i_g;
                z[hidden + j] = f_g;
                z[2 * hidden + j] = g_g;
                z[3 * hidden + j] = o_g;
                let c_new = f_g * c_prev[b * hidden + j] + i_g * g_g;
                let tc = c_new.tanh();
                tanh_c[b * hidden + j] = tc;
                out[b * 2 * hidden + j] = o_g * tc;
                out[b * 2 * hidden + hidden + j] = c_new;
            }
        }
        let fused_shape: Vec<usize> = if batched {
            vec![batch, 2 * hidden]
        } else {
            vec![2 * hidden]
        };
        let requires = [xi, hi, ci, wxi, whi, bi].iter().any(|&i| self.req(i));
        let value = Tensor::new(&fused_shape, out)?;
        let fused = self.push(
            Cow::Owned(value),
            Op::LstmStep {
                x: xi,
                h: hi,
                c: ci,
                wx: wxi,
                wh: whi,
                bias: bi,
                batch,
                hidden,
                gates,
                tanh_c,
            },
            requires,
        );
        let h_out = self.slice_cols(fused, 0, hidden)?;
        let c_out = self.slice_cols(fused, hidden, hidden)?;
        Ok((h_out, c_out))
    }

    /// Columns `start..start + len` of the last axis of a vector or matrix.
    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let ii = self.idx(input)?;
        let xs = self.val(ii).shape().to_vec();
        let (rows, width) = match xs.len() {
            1 => (1, xs[0]),
            2 => (xs[0], xs[1]),
            _ => {
                return Err(TensorError::Rank {
                    op: "slice_cols",
                    shape: xs,
                })
            }
        };
        if len == 0 || start + len > width {
            return Err(dim_err("slice_cols", "columns", width, start + len));
        }
        let x = self.val(ii).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&x[r * width + start..r * width + start + len]);
        }
        let shape: Vec<usize> = if xs.len() == 1 {
            vec![len]
        } else {
            vec![rows, len]
        };
        let requires = self.req(ii);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            Cow::Owned(value),
            Op::SliceCols {
                input: ii,
                start,
                width,
                len,
            },
            requires,
        ))
    }

    /// Picks `input[b, index[b]]` from a `[B, A]` matrix, giving `[B]`.
    pub fn gather(&mut self, input: Var, index: &[usize]) -> Result<Var> {
        let ii = self.idx(input)?;
        let xs = self.val(ii).shape().to_vec();
        if xs.len() != 2 {
            return Err(TensorError::Rank {
                op: "gather",
                shape: xs,
            });
        }
        if index.len() != xs[0] {
            return Err(dim_err("gather", "batch", xs[0], index.len()));
        }
        if let Some(&bad) = index.iter().find(|&&a| a >= xs[1]) {
            return Err(dim_err("gather", "index", xs[1], bad));
        }
        let x = self.val(ii).data();
        let out: Vec<f32> = index
            .iter()
            .enumerate()
            .map(|(b, &a)| x[b * xs[1] + a])
            .collect();
        let requires = self.req(ii);
        Ok(self.push(
            Cow::Owned(Tensor::vector(out)),
            Op::Gather {
                input: ii,
                index: index.to_vec(),
            },
            requires,
        ))
    }

    /// Concatenates tensors end to end into one vector.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(TensorError::Usage("concat of zero tensors".into()));
        }
        let idx = inputs
            .iter()
            .map(|&v| self.idx(v))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::new();
        for &i in &idx {
            out.extend_from_slice(self.val(i).data());
        }
        let requires = idx.iter().any(|&i| self.req(i));
        Ok(self.push(
            Cow::Owned(Tensor::vector(out)),
            Op::Concat { inputs: idx },
            requires,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let ii = self.idx(input)?;
        let value = self.val(ii).clone().reshape(shape)?;
        let requires = self.req(ii);
        Ok(self.push(Cow::Owned(value), Op::Reshape { input: ii }, requires))
    }

    /// Flattens everything into one vector.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input)?.numel();
        self.reshape(input, &[n])
    }

    /// Flattens all but the leading (batch) axis, row-major.
    pub fn flatten_batch(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input)?;
        let b = t.shape()[0];
        let rest = t.numel() / b;
        self.reshape(input, &[b, rest])
    }

    /// Mean over the batch of `(target - predicted)^2`; the target is a constant.
    pub fn squared_error(&mut self, predicted: Var, target: &Tensor) -> Result<Var> {
        let pi = self.idx(predicted)?;
        let p = self.val(pi);
        if p.shape() != target.shape() {
            return Err(dim_err("squared_error", "batch", p.numel(), target.numel()));
        }
        let n = p.numel() as f32;
        let sum: f32 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&q, &y)| (y - q) * (y - q))
            .sum();
        let requires = self.req(pi);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(sum / n)),
            Op::SquaredError {
                pred: pi,
                target: target.data().to_vec(),
            },
            requires,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        if self.val(li).numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(li).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
        if self.req(li) {
            grads[li] = Some(vec![1.0]);
        }
        for i in (0..=li).rev() {
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| match node.op {
                Op::Leaf { key: Some(k) } => Some((k, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            leaves,
            sizes: self.nodes.iter().map(|n| n.value.numel()).collect(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let sizes = |j: usize| self.nodes[j].value.numel();
        // Two inputs of one op may be the same node; gradients are accumulated
        // one input at a time so that is harmless.
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Relu { input } => {
                if self.req(*input) {
                    let x = self.val(*input).data();
                    let gi = grads[*input].get_or_insert_with(|| vec![0.0; x.len()]);
                    for ((gi, &gv), &xv) in gi.iter_mut().zip(g).zip(x) {
                        if xv > 0.0 {
                            *gi += gv;
                        }
                    }
                }
            }
            Op::Reshape { input } => {
                if self.req(*input) {
                    add_into(grads, *input, g);
                }
            }
            Op::SliceCols {
                input,
                start,
                width,
                len,
            } => {
                if self.req(*input) {
                    let total = sizes(*input);
                    let gi = grads[*input].get_or_insert_with(|| vec![0.0; total]);
                    for (r, grow) in g.chunks(*len).enumerate() {
                        for (k, &gv) in grow.iter().enumerate() {
                            gi[r * width + start + k] += gv;
                        }
                    }
                }
            }
            Op::Gather { input, index } => {
                if self.req(*input) {
                    let cols = self.val(*input).shape()[1];
                    let total = sizes(*input);
                    let gi = grads[*input].get_or_insert_with(|| vec![0.0; total]);
                    for (b, (&a, &gv)) in index.iter().zip(g).enumerate() {
                        gi[b * cols + a] += gv;
                    }
                }
            }
            Op::Concat { inputs } => {
                let mut offset = 0;
                for &j in inputs {
                    let len = sizes(j);
                    if self.req(j) {
                        add_into(grads, j, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SquaredError { pred, target } => {
                if self.req(*pred) {
                    let p = self.val(*pred).data();
                    let n = p.len() as f32;
                    let gi = grads[*pred].get_or_insert_with(|| vec![0.0; p.len()]);
                    for ((gi, &q), &y) in gi.iter_mut().zip(p).zip(target) {
                        *gi += g[0] * 2.0 * (q - y) / n;
                    }
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
                batch,
            } => {
                let (m, n) = {
                    let ws = self.val(*weight).shape();
                    (ws[0], ws[1])
                };
                let x = self.val(*input).data();
                let w = self.val(*weight).data();
                if self.req(*weight) {
                    let gw = slot(grads, *weight, sizes(*weight));
                    gemm(Mat::new(g, *batch, m).t(), Mat::new(x, *batch, n), 1.0, gw);
                }
                if self.req(*bias) {
                    let gb = grads[*bias].get_or_insert_with(|| vec![0.0; m]);
                    for grow in g.chunks(m) {
                        for (gb, &gv) in gb.iter_mut().zip(grow) {
                            *gb += gv;
                        }
                    }
                }
                if self.req(*input) {
                    let gx = slot(grads, *input, sizes(*input));
                    gemm(Mat::new(g, *batch, m), Mat::new(w, m, n), 1.0, gx);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let (patch, area, co) = (geom.patch(), geom.out_area(), geom.out_channels);
                let per_out = co * area;
                if self.req(*kernel) {
                    let gk = slot(grads, *kernel, sizes(*kernel));
                    for b in 0..geom.batch {
                        gemm(
                            Mat::new(&g[b * per_out..(b + 1) * per_out], co, area),
                            Mat::new(&cols[b * patch * area..(b + 1) * patch * area], patch, area)
                                .t(),
                            1.0,
                            gk,
                        );
                    }
                }
                if self.req(*bias) {
                    let gb = grads[*bias].get_or_insert_with(|| vec![0.0; co]);
                    for b in 0..geom.batch {
                        for (c, gb) in gb.iter_mut().enumerate() {
                            let start = b * per_out + c * area;
                            *gb += g[start..start + area].iter().sum::<f32>();
                        }
                    }
                }
                if self.req(*input) {
                    let k = self.val(*kernel).data();
                    let gx = slot(grads, *input, sizes(*input));
                    let mut dcols = vec![0.0f32; patch * area];
                    let in_size = geom.channels * geom.height * geom.width;
                    for b in 0..geom.batch {
                        gemm(
                            Mat::new(k, co, patch).t(),
                            Mat::new(&g[b * per_out..(b + 1) * per_out], co, area),
                            0.0,
                            &mut dcols,
                        );
                        col2im_add(&dcols, geom, &mut gx[b * in_size..(b + 1) * in_size]);
                    }
                }
            }
            Op::LstmStep {
                x,
                h,
                c,
                wx,
                wh,
                bias,
                batch,
                hidden,
                gates,
                tanh_c,
            } => {
                let (bsz, hd) = (*batch, *hidden);
                let g4 = 4 * hd;
                let c_prev = self.val(*c).data();
                let mut dz = vec![0.0f32; bsz * g4];
                let mut dc_prev = vec![0.0f32; bsz * hd];
                for b in 0..bsz {
                    let act = &gates[b * g4..(b + 1) * g4];
                    let grow = &g[b * 2 * hd..(b + 1) * 2 * hd];
                    for j in 0..hd {
                        let (ig, fg, gg, og) =
                            (act[j], act[hd + j], act[2 * hd + j], act[3 * hd + j]);
                        let tc = tanh_c[b * hd + j];
                        let dh = grow[j];
                        let dc = grow[hd + j] + dh * og * (1.0 - tc * tc);
                        let d_o = dh * tc;
                        let d_i = dc * gg;
                        let d_g = dc * ig;
                        let d_f = dc * c_prev[b * hd + j];
                        dc_prev[b * hd + j] = dc * fg;
                        let z = &mut dz[b * g4..(b + 1) * g4];
                        z[j] = d_i * ig * (1.0 - ig);
                        z[hd + j] = d_f * fg * (1.0 - fg);
                        z[2 * hd + j] = d_g * (1.0 - gg * gg);
                        z[3 * hd + j] = d_o * og * (1.0 - og);
                    }
                }
                let n_in = self.val(*wx).shape()[1];
                let xd = self.val(*x).data();
                let hdv = self.val(*h).data();
                if self.req(*wx) {
                    let gw = slot(grads, *wx, sizes(*wx));
                    gemm(Mat::new(&dz, bsz, g4).t(), Mat::new(xd, bsz, n_in), 1.0, gw);
                }
                if self.req(*wh) {
                    let gw = slot(grads, *wh, sizes(*wh));
                    gemm(Mat::new(&dz, bsz, g4).t(), Mat::new(hdv, bsz, hd), 1.0, gw);
                }
                if self.req(*bias) {
                    let gb = grads[*bias].get_or_insert_with(|| vec![0.0; g4]);
                    for zrow in dz.chunks(g4) {
                        for (gb, &zv) in gb.iter_mut().zip(zrow) {
                            *gb += zv;
                        }
                    }
                }
                if self.req(*x) {
                    let gx = slot(grads, *x, sizes(*x));
                    gemm(
                        Mat::new(&dz, bsz, g4),
                        Mat::new(self.val(*wx).data(), g4, n_in),
                        1.0,
                        gx,
                    );
                }
                if self.req(*h) {
                    let gh = slot(grads, *h, sizes(*h));
                    gemm(
                        Mat::new(&dz, bsz, g4),
                        Mat::new(self.val(*wh).data(), g4, hd),
                        1.0,
                        gh,
                    );
                }
                if self.req(*c) {
                    add_into(grads, *c, &dc_prev);
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f32>>], j: usize, len: usize) -> &mut Vec<f32> {
    grads[j].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(grads: &mut [Option<Vec<f32>>], j: usize, delta: &[f32]) {
    match &mut grads[j] {
        Some(gj) => {
            for (a, &d) in gj.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => grads[j] = Some(delta.to_vec()),
    }
}

fn im2col(x: &[f32], geom: &ConvGeom, cols: &mut [f32]) {
    let area = geom.out_area();
    let mut row = 0;
    for ch in 0..geom.channels {
        let plane = &x[ch * geom.height * geom.width..(ch + 1) * geom.height * geom.width];
        for ki in 0..geom.kernel_h {
            for kj in 0..geom.kernel_w {
                let dst = &mut cols[row * area..(row + 1) * area];
                for oi in 0..geom.out_h {
                    let src = &plane[(oi * geom.stride + ki) * geom.width..];
                    let d = &mut dst[oi * geom.out_w..(oi + 1) * geom.out_w];
                    for (oj, v) in d.iter_mut().enumerate() {
                        *v = src[oj * geom.stride + kj];
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add(cols: &[f32], geom: &ConvGeom, gx: &mut [f32]) {
    let area = geom.out_area();
    let mut row = 0;
    for ch in 0..geom.channels {
        let plane_off = ch * geom.height * geom.width;
        for ki in 0..geom.kernel_h {
            for kj in 0..geom.kernel_w {
                let src = &cols[row * area..(row + 1) * area];
                for oi in 0..geom.out_h {
                    let base = plane_off + (oi * geom.stride + ki) * geom.width + kj;
                    for oj in 0..geom.out_w {
                        gx[base + oj * geom.stride] += src[oi * geom.out_w + oj];
                    }
                }
                row += 1;
            }
        }
    }
}

/// Result of [`Tape::backward`]: one gradient per recorded leaf.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f32>>>,
    leaves: Vec<(usize, usize)>,
    sizes: Vec<usize>,
}

impl Gradients {
    /// Gradient with respect to a leaf of the originating tape; zeros when the
    /// leaf is disconnected from the loss.
    pub fn wrt(&self, v: Var) -> Result<Vec<f32>> {
        if v.tape != self.tape || v.index >= self.grads.len() {
            return Err(TensorError::Usage(
                "variable is not attached to this tape".into(),
            ));
        }
        Ok(self.grads[v.index]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.sizes[v.index]]))
    }

    /// Adds every parameter-leaf gradient into `params[key]`'s gradient slot.
    /// Parameters that never appeared on the tape still get a zeroed slot.
    pub fn accumulate_into(&self, params: &mut [Tensor]) -> Result<()> {
        for p in params.iter_mut() {
            if p.grad().is_none() {
                p.zero_grad();
            }
        }
        for &(key, node) in &self.leaves {
            let Some(p) = params.get_mut(key) else {
                return Err(TensorError::Usage(format!(
                    "gradient key {key} has no parameter slot"
                )));
            };
            if let Some(g) = &self.grads[node] {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

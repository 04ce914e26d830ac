//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every forward op appends one node holding its output value plus whatever
//! the backward rule needs. Nodes only ever reference earlier nodes, so the
//! tape is topologically ordered by construction and `backward` is a single
//! reverse sweep. Gradients accumulate additively across fan-out.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Forward-pass mode. Train mode uses batch statistics in normalization
/// layers; eval mode uses running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Op identity, used for diagnostics and for the gradcheck negative control.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Matmul,
    Add,
    AddRow,
    Scale,
    Conv2d,
    AvgPool2d,
    GlobalAvgPool,
    BatchNorm,
    LeakyRelu,
    MaxPoolRows,
    SoftmaxCrossEntropy,
    RowSoftmax,
    ConcatCols,
    GatherRows,
    SegmentSum,
    Reshape,
    Sum,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::AddRow => "add_row",
            OpKind::Scale => "scale",
            OpKind::Conv2d => "conv2d",
            OpKind::AvgPool2d => "avg_pool2d",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::BatchNorm => "batch_norm",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::MaxPoolRows => "max_pool_rows",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::RowSoftmax => "row_softmax",
            OpKind::ConcatCols => "concat_cols",
            OpKind::GatherRows => "gather_rows",
            OpKind::SegmentSum => "segment_sum",
            OpKind::Reshape => "reshape",
            OpKind::Sum => "sum",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
    /// Whether the input was rank 3 (single frame) and the batch dim implied.
    pub squeezed: bool,
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        bias: Var,
        rows: usize,
        cols: usize,
    },
    Scale {
        a: Var,
        c: T,
    },
    Conv2d {
        input: Var,
        kernels: Var,
        dims: ConvDims,
    },
    AvgPool2d {
        a: Var,
        batch: usize,
        ch: usize,
        h: usize,
        w: usize,
        k: usize,
    },
    GlobalAvgPool {
        a: Var,
        batch: usize,
        ch: usize,
        hw: usize,
    },
    /// Covers both the per-feature (rows x cols) and per-channel 2d variant,
    /// which reduce over "rows" groups of `inner` contiguous elements.
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        ch: usize,
        inner: usize,
        mean: Vec<T>,
        inv_std: Vec<T>,
        /// false in eval mode: the normalization constants do not depend on x.
        batch_stats: bool,
    },
    LeakyRelu {
        a: Var,
        slope: T,
    },
    MaxPoolRows {
        a: Var,
        cols: usize,
        argmax: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
        rows: usize,
        cols: usize,
    },
    RowSoftmax {
        a: Var,
        rows: usize,
        cols: usize,
    },
    ConcatCols {
        a: Var,
        b: Var,
        rows: usize,
        ca: usize,
        cb: usize,
    },
    GatherRows {
        a: Var,
        idx: Vec<usize>,
        cols: usize,
    },
    SegmentSum {
        a: Var,
        seg: Vec<usize>,
        cols: usize,
    },
    Reshape {
        a: Var,
    },
    Sum {
        a: Var,
    },
}

impl<T: Scalar> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Add { .. } => OpKind::Add,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::Scale { .. } => OpKind::Scale,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::AvgPool2d { .. } => OpKind::AvgPool2d,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::LeakyRelu { .. } => OpKind::LeakyRelu,
            Op::MaxPoolRows { .. } => OpKind::MaxPoolRows,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::RowSoftmax { .. } => OpKind::RowSoftmax,
            Op::ConcatCols { .. } => OpKind::ConcatCols,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::SegmentSum { .. } => OpKind::SegmentSum,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Sum { .. } => OpKind::Sum,
        }
    }
}

struct Node<T: Scalar> {
    value: Vec<T>,
    shape: Vec<usize>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    /// Maps parameter uid to its leaf, so binding the same parameter twice
    /// reuses one node and fan-out accumulates correctly.
    param_slots: Vec<(u64, Var)>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_slots: Vec::new(),
            fault: None,
        }
    }

    /// Corrupts the backward rule of every op of the given kind by a factor
    /// of 1.5. Exists solely so the gradient checker can be validated against
    /// a known-bad tape.
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn injected_fault(&self) -> Option<OpKind> {
        self.fault
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, needs_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            value,
            shape,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient accumulated on a bound parameter, by tensor uid.
    pub fn param_grad(&self, uid: u64) -> Option<&[T]> {
        let var = self.param_slots.iter().find(|(u, _)| *u == uid)?.1;
        self.grad(var)
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Records an input value. `needs_grad` requests a gradient at this leaf.
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<T>, needs_grad: bool) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "input",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "input" });
        }
        Ok(self.push(data, shape, needs_grad, Op::Leaf))
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        self.input(shape, data, false)
    }

    /// Binds a tensor as a leaf. Re-binding the same tensor returns the
    /// existing leaf.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        if let Some((_, var)) = self.param_slots.iter().find(|(u, _)| *u == t.uid()) {
            return *var;
        }
        let var = self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            t.is_param(),
            Op::Leaf,
        );
        self.param_slots.push((t.uid(), var));
        var
    }

    // ── forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = matmul_raw(self.value(a), self.value(b), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, vec![m, n], needs, Op::Matmul { a, b, m, k, n }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let value: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, shape, needs, Op::Add { a, b }))
    }

    /// Broadcasts a length-D bias over the rows of an [N x D] matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(bias).to_vec();
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: sa,
                rhs: sb,
            });
        }
        let (rows, cols) = (sa[0], sa[1]);
        let bv = self.value(bias).to_vec();
        let value: Vec<T> = self
            .value(a)
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(&bv).map(|(x, y)| *x + *y))
            .collect();
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(
            value,
            vec![rows, cols],
            needs,
            Op::AddRow {
                a,
                bias,
                rows,
                cols,
            },
        ))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value: Vec<T> = self.value(a).iter().map(|x| *x * c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(value, shape, needs, Op::Scale { a, c })
    }

    /// Cross-correlation with zero padding. Input is [C,H,W] or [B,C,H,W],
    /// kernels are [C_out, C_in, kh, kw]. Output spatial size must divide
    /// exactly; a fractional size is a configuration error.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernels).to_vec();
        if sk.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: si,
                rhs: sk,
            });
        }
        let (squeezed, batch, c_in, h, w) = match si.len() {
            3 => (true, 1, si[0], si[1], si[2]),
            4 => (false, si[0], si[1], si[2], si[3]),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: si,
                    rhs: sk,
                })
            }
        };
        let (c_out, kc, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if kc != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: si,
                rhs: sk,
            });
        }
        if stride == 0 {
            return Err(Error::config("conv2d", "stride must be >= 1"));
        }
        let h_span = h + 2 * padding;
        let w_span = w + 2 * padding;
        if h_span < kh || w_span < kw {
            return Err(Error::config(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h_span}x{w_span}"),
            ));
        }
        if !(h_span - kh).is_multiple_of(stride) || !(w_span - kw).is_multiple_of(stride) {
            return Err(Error::config(
                "conv2d",
                format!(
                    "output size not integral: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"
                ),
            ));
        }
        let h_out = (h_span - kh) / stride + 1;
        let w_out = (w_span - kw) / stride + 1;
        let dims = ConvDims {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            h_out,
            w_out,
            squeezed,
        };

        let cols = im2col(self.value(input), &dims);
        let w2 = kernels_to_cols(self.value(kernels), &dims);
        let rows = batch * h_out * w_out;
        let kdim = c_in * kh * kw;
        let out_rows = matmul_raw(&cols, &w2, rows, kdim, c_out);

        // out[b, co, y, x] = out_rows[(b*H'+y)*W'+x, co]
        let mut value = vec![T::ZERO; batch * c_out * h_out * w_out];
        for b in 0..batch {
            for co in 0..c_out {
                let dst = &mut value
                    [(b * c_out + co) * h_out * w_out..(b * c_out + co + 1) * h_out * w_out];
                for (p, d) in dst.iter_mut().enumerate() {
                    *d = out_rows[(b * h_out * w_out + p) * c_out + co];
                }
            }
        }

        let shape = if squeezed {
            vec![c_out, h_out, w_out]
        } else {
            vec![batch, c_out, h_out, w_out]
        };
        let needs = self.needs(input) || self.needs(kernels);
        Ok(self.push(
            value,
            shape,
            needs,
            Op::Conv2d {
                input,
                kernels,
                dims,
            },
        ))
    }

    /// Non-overlapping average pooling with window k (stride k).
    pub fn avg_pool2d(&mut self, a: Var, k: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "avg_pool2d",
                lhs: s,
                rhs: vec![k],
            });
        }
        let (batch, ch, h, w) = (s[0], s[1], s[2], s[3]);
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::config(
                "avg_pool2d",
                format!("window {k} does not divide {h}x{w}"),
            ));
        }
        let (ho, wo) = (h / k, w / k);
        let norm = T::from_usize(k * k);
        let x = self.value(a);
        let mut value = vec![T::ZERO; batch * ch * ho * wo];
        for bc in 0..batch * ch {
            let src = &x[bc * h * w..(bc + 1) * h * w];
            let dst = &mut value[bc * ho * wo..(bc + 1) * ho * wo];
            for y in 0..ho {
                for xo in 0..wo {
                    let mut s = T::ZERO;
                    for dy in 0..k {
                        for dx in 0..k {
                            s += src[(y * k + dy) * w + (xo * k + dx)];
                        }
                    }
                    dst[y * wo + xo] = s / norm;
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            value,
            vec![batch, ch, ho, wo],
            needs,
            Op::AvgPool2d {
                a,
                batch,
                ch,
                h,
                w,
                k,
            },
        ))
    }

    /// [B,C,H,W] -> [B,C], mean over the spatial map.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "global_avg_pool",
                lhs: s,
                rhs: vec![],
            });
        }
        let (batch, ch, hw) = (s[0], s[1], s[2] * s[3]);
        let norm = T::from_usize(hw);
        let x = self.value(a);
        let value: Vec<T> = (0..batch * ch)
            .map(|bc| {
                let mut s = T::ZERO;
                for v in &x[bc * hw..(bc + 1) * hw] {
                    s += *v;
                }
                s / norm
            })
            .collect();
        let needs = self.needs(a);
        Ok(self.push(
            value,
            vec![batch, ch],
            needs,
            Op::GlobalAvgPool { a, batch, ch, hw },
        ))
    }

    /// Batch normalization over the rows of an [B x D] matrix.
    /// Train mode normalizes with batch statistics and returns them so the
    /// owning layer can update its running averages; eval mode normalizes
    /// with the provided running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
        mode: Mode,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: s,
                rhs: vec![],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        self.batch_norm_grouped(x, gamma, beta, running_mean, running_var, eps, mode, rows, cols, 1, vec![rows, cols])
    }

    /// Per-channel batch normalization of a [B,C,H,W] map, statistics taken
    /// over B*H*W.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
        mode: Mode,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "batch_norm2d",
                lhs: s,
                rhs: vec![],
            });
        }
        let (batch, ch, hw) = (s[0], s[1], s[2] * s[3]);
        self.batch_norm_grouped(x, gamma, beta, running_mean, running_var, eps, mode, batch, ch, hw, s)
    }

    /// Shared batchnorm core: the input is viewed as `groups` x `ch` x `inner`
    /// and statistics are per channel over groups*inner elements.
    #[allow(clippy::too_many_arguments)]
    fn batch_norm_grouped(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
        mode: Mode,
        groups: usize,
        ch: usize,
        inner: usize,
        shape: Vec<usize>,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: vec![ch],
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let count = groups * inner;
        if mode == Mode::Train && count < 2 {
            return Err(Error::config(
                "batch_norm",
                "train mode requires at least 2 elements per channel (batch of 1 has undefined variance)",
            ));
        }
        let xv = self.value(x);
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![T::ZERO; ch];
                let mut var = vec![T::ZERO; ch];
                let norm = T::from_usize(count);
                for g in 0..groups {
                    for (c, m) in mean.iter_mut().enumerate() {
                        let base = (g * ch + c) * inner;
                        for v in &xv[base..base + inner] {
                            *m += *v;
                        }
                    }
                }
                for m in mean.iter_mut() {
                    *m /= norm;
                }
                for g in 0..groups {
                    for c in 0..ch {
                        let base = (g * ch + c) * inner;
                        for v in &xv[base..base + inner] {
                            let d = *v - mean[c];
                            var[c] += d * d;
                        }
                    }
                }
                for v in var.iter_mut() {
                    *v /= norm;
                }
                (mean, var)
            }
            Mode::Eval => {
                if running_mean.len() != ch || running_var.len() != ch {
                    return Err(Error::ShapeMismatch {
                        op: "batch_norm",
                        lhs: vec![ch],
                        rhs: vec![running_mean.len()],
                    });
                }
                (running_mean.to_vec(), running_var.to_vec())
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::ONE / (*v + eps).sqrt()).collect();
        let gv = self.value(gamma).to_vec();
        let bv = self.value(beta).to_vec();
        let mut value = vec![T::ZERO; xv.len()];
        for g in 0..groups {
            for c in 0..ch {
                let base = (g * ch + c) * inner;
                let (m, is, ga, be) = (mean[c], inv_std[c], gv[c], bv[c]);
                for (dst, v) in value[base..base + inner].iter_mut().zip(&xv[base..base + inner]) {
                    *dst = (*v - m) * is * ga + be;
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let batch_mean = mean.clone();
        let batch_var = var.clone();
        let out = self.push(
            value,
            shape,
            needs,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                ch,
                inner,
                mean,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
        );
        Ok((out, batch_mean, batch_var))
    }

    /// Elementwise max(x, slope*x). At exactly zero the backward rule takes
    /// the slope branch.
    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let value: Vec<T> = self
            .value(a)
            .iter()
            .map(|x| if *x > T::ZERO { *x } else { slope * *x })
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(value, shape, needs, Op::LeakyRelu { a, slope })
    }

    /// Columnwise maximum of an [N x D] matrix, producing a length-D vector.
    /// Gradient routes to the first row attaining each column maximum.
    pub fn max_pool_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "max_pool_rows",
                lhs: s,
                rhs: vec![],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        if rows == 0 {
            return Err(Error::config("max_pool_rows", "empty input (0 rows)"));
        }
        let x = self.value(a);
        let mut value = x[..cols].to_vec();
        let mut argmax = vec![0usize; cols];
        for r in 1..rows {
            for c in 0..cols {
                let v = x[r * cols + c];
                if v > value[c] {
                    value[c] = v;
                    argmax[c] = r;
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(value, vec![cols], needs, Op::MaxPoolRows { a, cols, argmax }))
    }

    /// Mean over the batch of -log softmax(logits)[label], stabilized by
    /// row-max subtraction. Output is a scalar (shape [1]).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        if rows == 0 {
            return Err(Error::config("softmax_cross_entropy", "empty batch"));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= cols) {
            return Err(Error::config(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {cols} classes"),
            ));
        }
        let x = self.value(logits);
        let mut probs = vec![T::ZERO; rows * cols];
        let mut loss = T::ZERO;
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mut mx = row[0];
            for v in row {
                mx = mx.maximum(*v);
            }
            let mut denom = T::ZERO;
            for (p, v) in probs[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *p = (*v - mx).exp();
                denom += *p;
            }
            for p in probs[r * cols..(r + 1) * cols].iter_mut() {
                *p /= denom;
            }
            loss += denom.ln() - (row[labels[r]] - mx);
        }
        loss /= T::from_usize(rows);
        let needs = self.needs(logits);
        Ok(self.push(
            vec![loss],
            vec![1],
            needs,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                rows,
                cols,
            },
        ))
    }

    /// Row-wise softmax over the retained entries of an [N x M] matrix;
    /// entries where `retained` is false get probability zero. Each row must
    /// retain at least one entry.
    pub fn row_softmax_masked(&mut self, a: Var, retained: &[bool]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || retained.len() != s[0] * s[1] {
            return Err(Error::ShapeMismatch {
                op: "row_softmax",
                lhs: s,
                rhs: vec![retained.len()],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let x = self.value(a);
        let mut value = vec![T::ZERO; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let keep = &retained[r * cols..(r + 1) * cols];
            let mut mx: Option<T> = None;
            for (v, k) in row.iter().zip(keep) {
                if *k {
                    mx = Some(match mx {
                        Some(m) => m.maximum(*v),
                        None => *v,
                    });
                }
            }
            let mx = mx.ok_or_else(|| {
                Error::config("row_softmax", format!("row {r} retains no entries"))
            })?;
            let mut denom = T::ZERO;
            let out = &mut value[r * cols..(r + 1) * cols];
            for c in 0..cols {
                if keep[c] {
                    out[c] = (row[c] - mx).exp();
                    denom += out[c];
                }
            }
            for v in out.iter_mut() {
                *v /= denom;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(value, vec![rows, cols], needs, Op::RowSoftmax { a, rows, cols }))
    }

    /// Plain row softmax (all entries retained).
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        self.row_softmax_masked(a, &vec![true; n])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: sa,
                rhs: sb,
            });
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut value = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            value.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            value.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            value,
            vec![rows, ca + cb],
            needs,
            Op::ConcatCols { a, b, rows, ca, cb },
        ))
    }

    /// Selects rows by index; duplicate indices are allowed and their
    /// gradients accumulate.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                lhs: s,
                rhs: vec![],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(bad) = idx.iter().find(|i| **i >= rows) {
            return Err(Error::config(
                "gather_rows",
                format!("row index {bad} out of range for {rows} rows"),
            ));
        }
        let x = self.value(a);
        let mut value = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            value.extend_from_slice(&x[i * cols..(i + 1) * cols]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            value,
            vec![idx.len(), cols],
            needs,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
                cols,
            },
        ))
    }

    /// Sums rows into segments: out[s] = sum of rows r with seg[r] == s.
    pub fn segment_sum(&mut self, a: Var, seg: &[usize], num_segments: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || seg.len() != s[0] {
            return Err(Error::ShapeMismatch {
                op: "segment_sum",
                lhs: s,
                rhs: vec![seg.len()],
            });
        }
        let cols = s[1];
        if let Some(bad) = seg.iter().find(|i| **i >= num_segments) {
            return Err(Error::config(
                "segment_sum",
                format!("segment id {bad} out of range for {num_segments} segments"),
            ));
        }
        let x = self.value(a);
        let mut value = vec![T::ZERO; num_segments * cols];
        for (r, &sid) in seg.iter().enumerate() {
            let dst = &mut value[sid * cols..(sid + 1) * cols];
            for (d, v) in dst.iter_mut().zip(&x[r * cols..(r + 1) * cols]) {
                *d += *v;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            value,
            vec![num_segments, cols],
            needs,
            Op::SegmentSum {
                a,
                seg: seg.to_vec(),
                cols,
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let value = self.value(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(value, shape, needs, Op::Reshape { a }))
    }

    /// Sum of all elements, producing a scalar (shape [1]).
    pub fn sum(&mut self, a: Var) -> Var {
        let mut s = T::ZERO;
        for v in self.value(a) {
            s += *v;
        }
        let needs = self.needs(a);
        self.push(vec![s], vec![1], needs, Op::Sum { a })
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients land on every leaf
    /// recorded with `needs_grad` and are reachable through `grad` /
    /// `param_grad`. Fails if the loss is not scalar or any backward rule
    /// emits a non-finite gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::config(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        if !self.value(loss)[0].is_finite() {
            return Err(Error::NonFiniteGradient { op: "loss" });
        }
        self.nodes[loss.0].grad = Some(vec![T::ONE]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let fault = self.fault;
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let g = node.grad.as_deref().expect("checked above");
            let kind = node.op.kind();
            let fscale = if fault == Some(kind) {
                T::from_f64(1.5)
            } else {
                T::ONE
            };

            match &node.op {
                Op::Leaf => {}

                Op::Matmul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    if before[a.0].needs_grad {
                        // dA = dC * B^T
                        let da = matmul_bt(g, &before[b.0].value, m, n, k);
                        acc(&mut before[a.0], &da, fscale, kind)?;
                    }
                    if before[b.0].needs_grad {
                        // dB = A^T * dC
                        let db = matmul_at(&before[a.0].value, g, m, k, n);
                        acc(&mut before[b.0], &db, fscale, kind)?;
                    }
                }

                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    if before[a.0].needs_grad {
                        acc(&mut before[a.0], g, fscale, kind)?;
                    }
                    if before[b.0].needs_grad {
                        acc(&mut before[b.0], g, fscale, kind)?;
                    }
                }

                Op::AddRow { a, bias, rows, cols } => {
                    let (a, bias, rows, cols) = (*a, *bias, *rows, *cols);
                    if before[a.0].needs_grad {
                        acc(&mut before[a.0], g, fscale, kind)?;
                    }
                    if before[bias.0].needs_grad {
                        let mut db = vec![T::ZERO; cols];
                        for r in 0..rows {
                            for (d, v) in db.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                                *d += *v;
                            }
                        }
                        acc(&mut before[bias.0], &db, fscale, kind)?;
                    }
                }

                Op::Scale { a, c } => {
                    let (a, c) = (*a, *c);
                    if before[a.0].needs_grad {
                        let da: Vec<T> = g.iter().map(|v| *v * c).collect();
                        acc(&mut before[a.0], &da, fscale, kind)?;
                    }
                }

                Op::Conv2d {
                    input,
                    kernels,
                    dims,
                } => {
                    let (input, kernels, dims) = (*input, *kernels, *dims);
                    let rows = dims.batch * dims.h_out * dims.w_out;
                    let kdim = dims.c_in * dims.kh * dims.kw;
                    // d_out_rows[(b*H'+y)*W'+x, co] = g[b, co, y, x]
                    let mut d_rows = vec![T::ZERO; rows * dims.c_out];
                    for b in 0..dims.batch {
                        for co in 0..dims.c_out {
                            let src = &g[(b * dims.c_out + co) * dims.h_out * dims.w_out
                                ..(b * dims.c_out + co + 1) * dims.h_out * dims.w_out];
                            for (p, v) in src.iter().enumerate() {
                                d_rows[(b * dims.h_out * dims.w_out + p) * dims.c_out + co] = *v;
                            }
                        }
                    }
                    if before[kernels.0].needs_grad {
                        let cols = im2col(&before[input.0].value, &dims);
                        // dW2 = cols^T * d_rows, then back to kernel layout
                        let dw2 = matmul_at(&cols, &d_rows, rows, kdim, dims.c_out);
                        let mut dk = vec![T::ZERO; dims.c_out * kdim];
                        for p in 0..kdim {
                            for co in 0..dims.c_out {
                                dk[co * kdim + p] = dw2[p * dims.c_out + co];
                            }
                        }
                        acc(&mut before[kernels.0], &dk, fscale, kind)?;
                    }
                    if before[input.0].needs_grad {
                        let w2 = kernels_to_cols(&before[kernels.0].value, &dims);
                        // dCols = d_rows * W2^T
                        let dcols = matmul_bt(&d_rows, &w2, rows, dims.c_out, kdim);
                        let dx = col2im(&dcols, &dims);
                        acc(&mut before[input.0], &dx, fscale, kind)?;
                    }
                }

                Op::AvgPool2d {
                    a,
                    batch,
                    ch,
                    h,
                    w,
                    k,
                } => {
                    let (a, batch, ch, h, w, k) = (*a, *batch, *ch, *h, *w, *k);
                    if before[a.0].needs_grad {
                        let (ho, wo) = (h / k, w / k);
                        let norm = T::ONE / T::from_usize(k * k);
                        let mut dx = vec![T::ZERO; batch * ch * h * w];
                        for bc in 0..batch * ch {
                            let src = &g[bc * ho * wo..(bc + 1) * ho * wo];
                            let dst = &mut dx[bc * h * w..(bc + 1) * h * w];
                            for y in 0..ho {
                                for x in 0..wo {
                                    let gv = src[y * wo + x] * norm;
                                    for dy in 0..k {
                                        for dxx in 0..k {
                                            dst[(y * k + dy) * w + (x * k + dxx)] = gv;
                                        }
                                    }
                                }
                            }
                        }
                        acc(&mut before[a.0], &dx, fscale, kind)?;
                    }
                }

                Op::GlobalAvgPool { a, batch, ch, hw } => {
                    let (a, batch, ch, hw) = (*a, *batch, *ch, *hw);
                    if before[a.0].needs_grad {
                        let norm = T::ONE / T::from_usize(hw);
                        let mut dx = vec![T::ZERO; batch * ch * hw];
                        for bc in 0..batch * ch {
                            let gv = g[bc] * norm;
                            for d in dx[bc * hw..(bc + 1) * hw].iter_mut() {
                                *d = gv;
                            }
                        }
                        acc(&mut before[a.0], &dx, fscale, kind)?;
                    }
                }

                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    ch,
                    inner,
                    mean,
                    inv_std,
                    batch_stats,
                } => {
                    let (x, gamma, beta, ch, inner, batch_stats) =
                        (*x, *gamma, *beta, *ch, *inner, *batch_stats);
                    let n = g.len();
                    let groups = n / (ch * inner);
                    let count = groups * inner;
                    let gv: Vec<T> = before[gamma.0].value.clone();

                    // Per-channel reductions over the batch.
                    let mut sum_g = vec![T::ZERO; ch];
                    let mut sum_gx = vec![T::ZERO; ch];
                    {
                        let xv = &before[x.0].value;
                        for grp in 0..groups {
                            for c in 0..ch {
                                let base = (grp * ch + c) * inner;
                                for off in 0..inner {
                                    let gg = g[base + off];
                                    let xhat = (xv[base + off] - mean[c]) * inv_std[c];
                                    sum_g[c] += gg;
                                    sum_gx[c] += gg * xhat;
                                }
                            }
                        }
                    }
                    if before[beta.0].needs_grad {
                        acc(&mut before[beta.0], &sum_g, fscale, kind)?;
                    }
                    if before[gamma.0].needs_grad {
                        acc(&mut before[gamma.0], &sum_gx, fscale, kind)?;
                    }
                    if before[x.0].needs_grad {
                        let norm = T::ONE / T::from_usize(count);
                        let mut dx = vec![T::ZERO; n];
                        {
                            let xv = &before[x.0].value;
                            for grp in 0..groups {
                                for c in 0..ch {
                                    let base = (grp * ch + c) * inner;
                                    let coeff = gv[c] * inv_std[c];
                                    for off in 0..inner {
                                        let gg = g[base + off];
                                        dx[base + off] = if batch_stats {
                                            let xhat = (xv[base + off] - mean[c]) * inv_std[c];
                                            coeff * (gg - sum_g[c] * norm - xhat * sum_gx[c] * norm)
                                        } else {
                                            coeff * gg
                                        };
                                    }
                                }
                            }
                        }
                        acc(&mut before[x.0], &dx, fscale, kind)?;
                    }
                }

                Op::LeakyRelu { a, slope } => {
                    let (a, slope) = (*a, *slope);
                    if before[a.0].needs_grad {
                        let xv = &before[a.0].value;
                        let da: Vec<T> = g
                            .iter()
                            .zip(xv)
                            .map(|(gg, x)| if *x > T::ZERO { *gg } else { *gg * slope })
                            .collect();
                        acc(&mut before[a.0], &da, fscale, kind)?;
                    }
                }

                Op::MaxPoolRows { a, cols, argmax } => {
                    let (a, cols) = (*a, *cols);
                    if before[a.0].needs_grad {
                        let rows = before[a.0].value.len() / cols;
                        let mut dx = vec![T::ZERO; rows * cols];
                        for c in 0..cols {
                            dx[argmax[c] * cols + c] = g[c];
                        }
                        acc(&mut before[a.0], &dx, fscale, kind)?;
                    }
                }

                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                    rows,
                    cols,
                } => {
                    let (logits, rows, cols) = (*logits, *rows, *cols);
                    if before[logits.0].needs_grad {
                        let norm = g[0] / T::from_usize(rows);
                        let mut dl = probs.clone();
                        for (r, &lab) in labels.iter().enumerate() {
                            dl[r * cols + lab] -= T::ONE;
                        }
                        for v in dl.iter_mut() {
                            *v *= norm;
                        }
                        acc(&mut before[logits.0], &dl, fscale, kind)?;
                    }
                }

                Op::RowSoftmax { a, rows, cols } => {
                    let (a, rows, cols) = (*a, *rows, *cols);
                    if before[a.0].needs_grad {
                        // Masked-out entries have probability 0, which zeroes
                        // their gradient automatically.
                        let p = &node.value;
                        let mut dx = vec![T::ZERO; rows * cols];
                        for r in 0..rows {
                            let pr = &p[r * cols..(r + 1) * cols];
                            let gr = &g[r * cols..(r + 1) * cols];
                            let mut dot = T::ZERO;
                            for (pp, gg) in pr.iter().zip(gr) {
                                dot += *pp * *gg;
                            }
                            for c in 0..cols {
                                dx[r * cols + c] = pr[c] * (gr[c] - dot);
                            }
                        }
                        acc(&mut before[a.0], &dx, fscale, kind)?;
                    }
                }

                Op::ConcatCols { a, b, rows, ca, cb } => {
                    let (a, b, rows, ca, cb) = (*a, *b, *rows, *ca, *cb);
                    if before[a.0].needs_grad {
                        let mut da = vec![T::ZERO; rows * ca];
                        for r in 0..rows {
                            da[r * ca..(r + 1) * ca]
                                .copy_from_slice(&g[r * (ca + cb)..r * (ca + cb) + ca]);
                        }
                        acc(&mut before[a.0], &da, fscale, kind)?;
                    }
                    if before[b.0].needs_grad {
                        let mut db = vec![T::ZERO; rows * cb];
                        for r in 0..rows {
                            db[r * cb..(r + 1) * cb]
                                .copy_from_slice(&g[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                        }
                        acc(&mut before[b.0], &db, fscale, kind)?;
                    }
                }

                Op::GatherRows { a, idx, cols } => {
                    let (a, cols) = (*a, *cols);
                    if before[a.0].needs_grad {
                        let rows = before[a.0].value.len() / cols;
                        let mut dx = vec![T::ZERO; rows * cols];
                        for (r, &i) in idx.iter().enumerate() {
                            let dst = &mut dx[i * cols..(i + 1) * cols];
                            for (d, v) in dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                                *d += *v;
                            }
                        }
                        acc(&mut before[a.0], &dx, fscale, kind)?;
                    }
                }

                Op::SegmentSum { a, seg, cols } => {
                    let (a, cols) = (*a, *cols);
                    if before[a.0].needs_grad {
                        let mut dx = vec![T::ZERO; seg.len() * cols];
                        for (r, &sid) in seg.iter().enumerate() {
                            dx[r * cols..(r + 1) * cols]
                                .copy_from_slice(&g[sid * cols..(sid + 1) * cols]);
                        }
                        acc(&mut before[a.0], &dx, fscale, kind)?;
                    }
                }

                Op::Reshape { a } => {
                    let a = *a;
                    if before[a.0].needs_grad {
                        acc(&mut before[a.0], g, fscale, kind)?;
                    }
                }

                Op::Sum { a } => {
                    let a = *a;
                    if before[a.0].needs_grad {
                        let da = vec![g[0]; before[a.0].value.len()];
                        acc(&mut before[a.0], &da, fscale, kind)?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Adds `scale * src` into the node's gradient, erroring on non-finite
/// contributions so NaNs are caught at the op that produced them.
fn acc<T: Scalar>(node: &mut Node<T>, src: &[T], scale: T, kind: OpKind) -> Result<()> {
    debug_assert_eq!(src.len(), node.value.len());
    let grad = node
        .grad
        .get_or_insert_with(|| vec![T::ZERO; node.value.len()]);
    for (d, s) in grad.iter_mut().zip(src) {
        if !s.is_finite() {
            return Err(Error::NonFiniteGradient { op: kind.name() });
        }
        *d += scale * *s;
    }
    Ok(())
}

// ── raw kernels ─────────────────────────────────────────────────────────

/// C[m,n] = A[m,k] * B[k,n]
pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, ap) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += *ap * *bv;
            }
        }
    }
    c
}

/// C[m,k] = A[m,n] * B[k,n]^T   (rows of A dotted with rows of B)
fn matmul_bt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::ZERO;
            for (av, bv) in arow.iter().zip(brow) {
                s += *av * *bv;
            }
            c[i * k + p] = s;
        }
    }
    c
}

/// C[k,n] = A[r,k]^T * B[r,n]
fn matmul_at<T: Scalar>(a: &[T], b: &[T], r: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; k * n];
    for row in 0..r {
        let arow = &a[row * k..(row + 1) * k];
        let brow = &b[row * n..(row + 1) * n];
        for (p, ap) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += *ap * *bv;
            }
        }
    }
    c
}

/// Unrolls conv input patches into a [B*H'*W' x C_in*kh*kw] matrix.
fn im2col<T: Scalar>(x: &[T], d: &ConvDims) -> Vec<T> {
    let kdim = d.c_in * d.kh * d.kw;
    let mut cols = vec![T::ZERO; d.batch * d.h_out * d.w_out * kdim];
    for b in 0..d.batch {
        for y in 0..d.h_out {
            for xo in 0..d.w_out {
                let row = (b * d.h_out + y) * d.w_out + xo;
                let dst = &mut cols[row * kdim..(row + 1) * kdim];
                for ci in 0..d.c_in {
                    let plane = &x[(b * d.c_in + ci) * d.h * d.w..(b * d.c_in + ci + 1) * d.h * d.w];
                    for r in 0..d.kh {
                        let iy = (y * d.stride + r) as isize - d.padding as isize;
                        let base = (ci * d.kh + r) * d.kw;
                        if iy < 0 || iy >= d.h as isize {
                            continue; // stays zero
                        }
                        let iy = iy as usize;
                        for s in 0..d.kw {
                            let ix = (xo * d.stride + s) as isize - d.padding as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            dst[base + s] = plane[iy * d.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds column gradients back to input layout.
fn col2im<T: Scalar>(dcols: &[T], d: &ConvDims) -> Vec<T> {
    let kdim = d.c_in * d.kh * d.kw;
    let mut dx = vec![T::ZERO; d.batch * d.c_in * d.h * d.w];
    for b in 0..d.batch {
        for y in 0..d.h_out {
            for xo in 0..d.w_out {
                let row = (b * d.h_out + y) * d.w_out + xo;
                let src = &dcols[row * kdim..(row + 1) * kdim];
                for ci in 0..d.c_in {
                    let plane_base = (b * d.c_in + ci) * d.h * d.w;
                    for r in 0..d.kh {
                        let iy = (y * d.stride + r) as isize - d.padding as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let base = (ci * d.kh + r) * d.kw;
                        for s in 0..d.kw {
                            let ix = (xo * d.stride + s) as isize - d.padding as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            dx[plane_base + iy * d.w + ix as usize] += src[base + s];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Reorders kernels [C_out, C_in, kh, kw] into a [C_in*kh*kw x C_out] matrix.
fn kernels_to_cols<T: Scalar>(k: &[T], d: &ConvDims) -> Vec<T> {
    let kdim = d.c_in * d.kh * d.kw;
    let mut w2 = vec![T::ZERO; kdim * d.c_out];
    for co in 0..d.c_out {
        for p in 0..kdim {
            w2[p * d.c_out + co] = k[co * kdim + p];
        }
    }
    w2
}

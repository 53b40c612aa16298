use std::sync::Arc;

use indexmap::IndexMap;
use rayon::prelude::*;

use super::{Element, ParamStore, Tensor};
use crate::error::{Error, Result};

/// SELU scale (λ) and negative-branch coefficient (α) of the self-normalizing
/// activation.
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Border handling for convolutions. `Zeros` and `Reflect` pad by
/// `dilation * (k - 1) / 2` on every side so stride-1 convolutions keep the
/// spatial size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaddingMode {
    Valid,
    Zeros,
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleMode {
    Nearest,
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Selu,
    Relu,
    Sigmoid,
}

/// Precomputed im2col gather table for one convolution geometry.
///
/// `src[k * positions + p]` is the offset inside one input sample feeding
/// column `k` (flattened `c, ky, kx`) of output position `p`, or `NO_TAP` for
/// zero padding.
struct ConvPlan {
    in_channels: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    taps: usize,
    src: Vec<u32>,
}

const NO_TAP: u32 = u32::MAX;

/// Mirror an out-of-range index back into `0..n` without repeating the edge
/// sample. Works for any overshoot by folding with period `2(n-1)`.
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

impl ConvPlan {
    #[allow(clippy::too_many_arguments)]
    fn new(
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        dilation: usize,
        padding: PaddingMode,
    ) -> Result<Self> {
        let (pad_h, pad_w) = match padding {
            PaddingMode::Valid => (0, 0),
            PaddingMode::Zeros | PaddingMode::Reflect => {
                (dilation * (kh - 1) / 2, dilation * (kw - 1) / 2)
            }
        };
        let span_h = dilation * (kh - 1) + 1;
        let span_w = dilation * (kw - 1) + 1;
        if in_h + 2 * pad_h < span_h || in_w + 2 * pad_w < span_w {
            return Err(Error::shape(
                "conv2d",
                format!("input {in_h}x{in_w} smaller than dilated kernel {span_h}x{span_w}"),
            ));
        }
        let out_h = (in_h + 2 * pad_h - span_h) / stride + 1;
        let out_w = (in_w + 2 * pad_w - span_w) / stride + 1;
        let taps = in_channels * kh * kw;
        let positions = out_h * out_w;
        if in_channels * in_h * in_w >= NO_TAP as usize {
            return Err(Error::shape("conv2d", "input sample too large"));
        }
        let mut src = vec![NO_TAP; taps * positions];
        for c in 0..in_channels {
            for ky in 0..kh {
                for kx in 0..kw {
                    let k = (c * kh + ky) * kw + kx;
                    let row = &mut src[k * positions..(k + 1) * positions];
                    for oy in 0..out_h {
                        let iy = (oy * stride + ky * dilation) as isize - pad_h as isize;
                        let iy = match padding {
                            PaddingMode::Reflect => Some(reflect_index(iy, in_h)),
                            _ if iy < 0 || iy >= in_h as isize => None,
                            _ => Some(iy as usize),
                        };
                        for ox in 0..out_w {
                            let ix = (ox * stride + kx * dilation) as isize - pad_w as isize;
                            let ix = match padding {
                                PaddingMode::Reflect => Some(reflect_index(ix, in_w)),
                                _ if ix < 0 || ix >= in_w as isize => None,
                                _ => Some(ix as usize),
                            };
                            if let (Some(iy), Some(ix)) = (iy, ix) {
                                row[oy * out_w + ox] = ((c * in_h + iy) * in_w + ix) as u32;
                            }
                        }
                    }
                }
            }
        }
        Ok(Self {
            in_channels,
            in_h,
            in_w,
            out_h,
            out_w,
            taps,
            src,
        })
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn gather<T: Element>(&self, sample: &[T]) -> Vec<T> {
        self.src
            .iter()
            .map(|&s| if s == NO_TAP { T::zero() } else { sample[s as usize] })
            .collect()
    }
}

/// Per-axis linear interpolation taps: output index → (lo, hi, weight_lo, weight_hi).
fn resample_axis(input: usize, output: usize, mode: ResampleMode) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| match mode {
            ResampleMode::Nearest => {
                let i = (((o as f64 + 0.5) * scale).floor() as usize).min(input - 1);
                (i, i, 1.0, 0.0)
            }
            ResampleMode::Bilinear => {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(input - 1);
                let i1 = (i0 + 1).min(input - 1);
                let frac = src - i0 as f64;
                (i0, i1, 1.0 - frac, frac)
            }
        })
        .collect()
}

enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        plan: Arc<ConvPlan>,
        cols: Vec<Vec<T>>,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Act {
        input: Var,
        kind: Activation,
    },
    Add {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Sub {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Mul {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Scale {
        a: Var,
        factor: T,
    },
    Abs {
        a: Var,
    },
    Square {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Slice {
        a: Var,
        start: usize,
    },
    Resample {
        a: Var,
        rows: Vec<(usize, usize, f64, f64)>,
        cols: Vec<(usize, usize, f64, f64)>,
    },
    Pad {
        a: Var,
        top: usize,
        left: usize,
    },
    Crop {
        a: Var,
        top: usize,
        left: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Define-by-run computation graph.
///
/// Nodes are appended in execution order, which is already a topological
/// order, so backward is a single reverse sweep. A graph supports exactly one
/// backward pass; build a fresh graph for every forward.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
    grad_enabled: bool,
    backward_done: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients from one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: IndexMap<String, Var>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a node, `None` when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|&v| self.wrt(v))
    }

    /// Named parameter gradients in binding order; unreachable parameters are
    /// omitted.
    pub fn into_named(mut self) -> IndexMap<String, Tensor<T>> {
        let mut out = IndexMap::new();
        for (name, var) in &self.params {
            if let Some(g) = self.grads[var.0].take() {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<bool> {
    if a == b {
        return Ok(false);
    }
    if let ([n, _, h, w], [bn, 1, bh, bw]) = (a, b) {
        if n == bn && h == bh && w == bw {
            return Ok(true);
        }
        let (axis, expected, got) = if n != bn {
            ("N", *n, *bn)
        } else if h != bh {
            ("H", *h, *bh)
        } else {
            ("W", *w, *bw)
        };
        return Err(Error::Dim {
            op,
            axis,
            expected,
            got,
        });
    }
    Err(Error::shape(
        op,
        format!("shapes {a:?} and {b:?} are neither equal nor a one-channel broadcast"),
    ))
}

/// Index into `b` for flat index `i` of `a` under the one-channel broadcast.
#[inline]
fn bcast_index(i: usize, channels: usize, plane: usize) -> usize {
    let n = i / (channels * plane);
    n * plane + i % plane
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: IndexMap::new(),
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// A graph that never records what backward would need; every leaf is
    /// treated as constant.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let needs = requires_grad && self.grad_enabled;
        self.push(value, Op::Leaf, needs)
    }

    /// Constant input, never differentiated.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Named trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Var {
        let v = self.leaf(value, true);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Register every tensor of a parameter store as a named leaf.
    pub fn bind(&mut self, store: &ParamStore<T>) {
        for (name, t) in store.iter() {
            self.param(name, t.clone());
        }
    }

    pub fn param_var(&self, name: &str) -> Result<Var> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter `{name}` is not bound")))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        dilation: usize,
        padding: PaddingMode,
    ) -> Result<Var> {
        if stride == 0 || dilation == 0 {
            return Err(Error::shape("conv2d", "stride and dilation must be >= 1"));
        }
        let [n, c, h, w] = self.value(input).dims4("conv2d")?;
        let [o, wc, kh, kw] = self.value(weight).dims4("conv2d")?;
        if wc != c {
            return Err(Error::Dim {
                op: "conv2d",
                axis: "C",
                expected: wc,
                got: c,
            });
        }
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [o] {
                return Err(Error::Dim {
                    op: "conv2d",
                    axis: "bias",
                    expected: o,
                    got: bs.iter().product(),
                });
            }
        }
        let plan = Arc::new(ConvPlan::new(c, h, w, kh, kw, stride, dilation, padding)?);
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        let positions = plan.positions();
        let sample_in = c * h * w;
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let bias_vals = bias.map(|b| self.value(b).data());
        let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..n)
            .into_par_iter()
            .map(|s| {
                let cols = plan.gather(&x[s * sample_in..(s + 1) * sample_in]);
                let mut out = vec![T::zero(); o * positions];
                if let Some(bv) = bias_vals {
                    for (row, &b) in out.chunks_mut(positions).zip(bv) {
                        row.fill(b);
                    }
                }
                T::gemm(
                    o,
                    plan.taps,
                    positions,
                    wt,
                    (plan.taps, 1),
                    &cols,
                    (positions, 1),
                    T::one(),
                    &mut out,
                    (positions, 1),
                );
                (if needs { cols } else { Vec::new() }, out)
            })
            .collect();
        let mut data = Vec::with_capacity(n * o * positions);
        let mut saved = Vec::with_capacity(if needs { n } else { 0 });
        for (cols, out) in per_sample {
            data.extend_from_slice(&out);
            if needs {
                saved.push(cols);
            }
        }
        let value = Tensor::from_vec([n, o, plan.out_h, plan.out_w], data)?;
        Ok(self.push(
            value,
            Op::Conv {
                input,
                weight,
                bias,
                plan,
                cols: saved,
            },
            needs,
        ))
    }

    pub fn group_norm(&mut self, input: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        for v in [gamma, beta] {
            let s = self.value(v).shape();
            if s != [c] {
                return Err(Error::Dim {
                    op: "group_norm",
                    axis: "C",
                    expected: c,
                    got: s.iter().product(),
                });
            }
        }
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let cpg = c / groups;
        let plane = h * w;
        let m = cpg * plane;
        let eps = T::from_f64(eps);
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); n * groups];
        let mf = T::from_f64(m as f64);
        for s in 0..n {
            for grp in 0..groups {
                let start = (s * c + grp * cpg) * plane;
                let xs = &x[start..start + m];
                let mean = xs.iter().fold(T::zero(), |acc, &v| acc + v) / mf;
                let var = xs.iter().fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / mf;
                let istd = T::one() / (var + eps).sqrt();
                inv_std[s * groups + grp] = istd;
                for (j, &v) in xs.iter().enumerate() {
                    let ch = grp * cpg + j / plane;
                    let xh = (v - mean) * istd;
                    xhat[start + j] = xh;
                    y[start + j] = g[ch] * xh + b[ch];
                }
            }
        }
        let value = Tensor::from_vec([n, c, h, w], y)?;
        let (xhat, inv_std) = if needs { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            value,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let lambda = T::from_f64(SELU_LAMBDA);
        let la = T::from_f64(SELU_LAMBDA * SELU_ALPHA);
        let value = self.value(input).map(|x| match kind {
            Activation::Selu => {
                if x > T::zero() {
                    lambda * x
                } else {
                    la * x.exp_m1()
                }
            }
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            }
        });
        let needs = self.needs(input);
        self.push(value, Op::Act { input, kind }, needs)
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let broadcast = broadcast_kind(op, ta.shape(), tb.shape())?;
        let (ad, bd) = (ta.data(), tb.data());
        let data = if broadcast {
            let s = ta.shape();
            let plane = s[2] * s[3];
            ad.iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[bcast_index(i, s[1], plane)]))
                .collect()
        } else {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        };
        Ok((Tensor::from_vec(ta.shape().to_vec(), data)?, broadcast))
    }

    /// `a + b`; `b` may be a one-channel map broadcast over the channels of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, broadcast) = self.binary("add", a, b, |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b, broadcast }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, broadcast) = self.binary("sub", a, b, |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub { a, b, broadcast }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, broadcast) = self.binary("mul", a, b, |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul { a, b, broadcast }, needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let factor = T::from_f64(factor);
        let value = self.value(a).map(|x| x * factor);
        let needs = self.needs(a);
        self.push(value, Op::Scale { a, factor }, needs)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.abs());
        let needs = self.needs(a);
        self.push(value, Op::Abs { a }, needs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let needs = self.needs(a);
        self.push(value, Op::Square { a }, needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().fold(T::zero(), |acc, &v| acc + v) / T::from_f64(t.numel() as f64);
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean { a }, needs)
    }

    /// Stack channels of `a` then `b`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, c1, h, w] = self.value(a).dims4("concat")?;
        let [bn, c2, bh, bw] = self.value(b).dims4("concat")?;
        for (axis, expected, got) in [("N", n, bn), ("H", h, bh), ("W", w, bw)] {
            if expected != got {
                return Err(Error::Dim {
                    op: "concat",
                    axis,
                    expected,
                    got,
                });
            }
        }
        let plane = h * w;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ad.len() + bd.len());
        for s in 0..n {
            data.extend_from_slice(&ad[s * c1 * plane..(s + 1) * c1 * plane]);
            data.extend_from_slice(&bd[s * c2 * plane..(s + 1) * c2 * plane]);
        }
        let value = Tensor::from_vec([n, c1 + c2, h, w], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Concat { a, b }, needs))
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(a).dims4("slice")?;
        if start + len > c {
            return Err(Error::Dim {
                op: "slice",
                axis: "C",
                expected: c,
                got: start + len,
            });
        }
        let plane = h * w;
        let ad = self.value(a).data();
        let mut data = Vec::with_capacity(n * len * plane);
        for s in 0..n {
            let base = (s * c + start) * plane;
            data.extend_from_slice(&ad[base..base + len * plane]);
        }
        let value = Tensor::from_vec([n, len, h, w], data)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Slice { a, start }, needs))
    }

    /// Resize the spatial axes with half-pixel centres (align-corners = false).
    pub fn resample(&mut self, a: Var, out_h: usize, out_w: usize, mode: ResampleMode) -> Result<Var> {
        let [n, c, h, w] = self.value(a).dims4("resample")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("resample", "output size must be >= 1"));
        }
        let rows = resample_axis(h, out_h, mode);
        let cols = resample_axis(w, out_w, mode);
        let x = self.value(a).data();
        let mut data = vec![T::zero(); n * c * out_h * out_w];
        for (plane_idx, out_plane) in data.chunks_mut(out_h * out_w).enumerate() {
            let src = &x[plane_idx * h * w..(plane_idx + 1) * h * w];
            for (oy, &(y0, y1, wy0, wy1)) in rows.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in cols.iter().enumerate() {
                    let v = wy0 * (wx0 * src[y0 * w + x0].as_f64() + wx1 * src[y0 * w + x1].as_f64())
                        + wy1 * (wx0 * src[y1 * w + x0].as_f64() + wx1 * src[y1 * w + x1].as_f64());
                    out_plane[oy * out_w + ox] = T::from_f64(v);
                }
            }
        }
        let value = Tensor::from_vec([n, c, out_h, out_w], data)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Resample { a, rows, cols }, needs))
    }

    /// Edge-replicate padding.
    pub fn pad_replicate(&mut self, a: Var, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(a).dims4("pad")?;
        let (oh, ow) = (h + top + bottom, w + left + right);
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let src = &x[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                let sy = y.saturating_sub(top).min(h - 1);
                for xx in 0..ow {
                    let sx = xx.saturating_sub(left).min(w - 1);
                    data.push(src[sy * w + sx]);
                }
            }
        }
        let value = Tensor::from_vec([n, c, oh, ow], data)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Pad { a, top, left }, needs))
    }

    pub fn crop(&mut self, a: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(a).dims4("crop")?;
        if top + height > h {
            return Err(Error::Dim {
                op: "crop",
                axis: "H",
                expected: h,
                got: top + height,
            });
        }
        if left + width > w {
            return Err(Error::Dim {
                op: "crop",
                axis: "W",
                expected: w,
                got: left + width,
            });
        }
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(n * c * height * width);
        for p in 0..n * c {
            for y in top..top + height {
                let row = p * h * w + y * w;
                data.extend_from_slice(&x[row + left..row + left + width]);
            }
        }
        let value = Tensor::from_vec([n, c, height, width], data)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Crop { a, top, left }, needs))
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// Each graph may be differentiated once; a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this graph; build a new graph per forward pass".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].needs_grad)
                    .map(|g| Tensor::from_vec(self.nodes[i].value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.needs(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn backprop_node(&self, idx: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                input,
                weight,
                bias,
                plan,
                cols,
            } => self.backprop_conv(*input, *weight, *bias, plan, cols, gout, grads),
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let [n, c, h, w] = node.value.dims4("group_norm").expect("NCHW");
                let plane = h * w;
                let cpg = c / groups;
                let m = cpg * plane;
                let g = self.value(*gamma).data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for (i, (&dy, &xh)) in gout.iter().zip(xhat).enumerate() {
                        let ch = (i / plane) % c;
                        dgamma[ch] = dgamma[ch] + dy * xh;
                        dbeta[ch] = dbeta[ch] + dy;
                    }
                    self.accumulate(grads, *gamma, |s| add_into(s, &dgamma));
                    self.accumulate(grads, *beta, |s| add_into(s, &dbeta));
                }
                if self.needs(*input) {
                    let mf = T::from_f64(m as f64);
                    let mut dx = vec![T::zero(); gout.len()];
                    for s in 0..n {
                        for grp in 0..*groups {
                            let start = (s * c + grp * cpg) * plane;
                            let istd = inv_std[s * groups + grp];
                            let mut sum_d = T::zero();
                            let mut sum_dx = T::zero();
                            for j in 0..m {
                                let d = gout[start + j] * g[grp * cpg + j / plane];
                                sum_d = sum_d + d;
                                sum_dx = sum_dx + d * xhat[start + j];
                            }
                            for j in 0..m {
                                let d = gout[start + j] * g[grp * cpg + j / plane];
                                dx[start + j] = istd / mf * (mf * d - sum_d - xhat[start + j] * sum_dx);
                            }
                        }
                    }
                    self.accumulate(grads, *input, |s| add_into(s, &dx));
                }
            }
            Op::Act { input, kind } => {
                let x = self.value(*input).data();
                let y = node.value.data();
                let lambda = T::from_f64(SELU_LAMBDA);
                let la = T::from_f64(SELU_LAMBDA * SELU_ALPHA);
                let kind = *kind;
                self.accumulate(grads, *input, |s| {
                    for (i, slot) in s.iter_mut().enumerate() {
                        let d = match kind {
                            Activation::Selu => {
                                if x[i] > T::zero() {
                                    lambda
                                } else {
                                    la * x[i].exp()
                                }
                            }
                            Activation::Relu => {
                                if x[i] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Activation::Sigmoid => y[i] * (T::one() - y[i]),
                        };
                        *slot = *slot + gout[i] * d;
                    }
                });
            }
            Op::Add { a, b, broadcast } | Op::Sub { a, b, broadcast } => {
                let sign = if matches!(node.op, Op::Sub { .. }) {
                    -T::one()
                } else {
                    T::one()
                };
                self.accumulate(grads, *a, |s| add_into(s, gout));
                let shape = node.value.shape();
                self.accumulate(grads, *b, |s| {
                    if *broadcast {
                        let plane = shape[2] * shape[3];
                        for (i, &g) in gout.iter().enumerate() {
                            let j = bcast_index(i, shape[1], plane);
                            s[j] = s[j] + sign * g;
                        }
                    } else {
                        for (slot, &g) in s.iter_mut().zip(gout) {
                            *slot = *slot + sign * g;
                        }
                    }
                });
            }
            Op::Mul { a, b, broadcast } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let shape = node.value.shape();
                let plane = if *broadcast { shape[2] * shape[3] } else { 0 };
                let bi = |i: usize| if *broadcast { bcast_index(i, shape[1], plane) } else { i };
                self.accumulate(grads, *a, |s| {
                    for (i, slot) in s.iter_mut().enumerate() {
                        *slot = *slot + gout[i] * bd[bi(i)];
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for (i, &g) in gout.iter().enumerate() {
                        let j = bi(i);
                        s[j] = s[j] + g * ad[i];
                    }
                });
            }
            Op::Scale { a, factor } => {
                self.accumulate(grads, *a, |s| {
                    for (slot, &g) in s.iter_mut().zip(gout) {
                        *slot = *slot + g * *factor;
                    }
                });
            }
            Op::Abs { a } => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |s| {
                    for (i, slot) in s.iter_mut().enumerate() {
                        let sign = if x[i] > T::zero() {
                            T::one()
                        } else if x[i] < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        *slot = *slot + gout[i] * sign;
                    }
                });
            }
            Op::Square { a } => {
                let x = self.value(*a).data();
                let two = T::from_f64(2.0);
                self.accumulate(grads, *a, |s| {
                    for (i, slot) in s.iter_mut().enumerate() {
                        *slot = *slot + two * x[i] * gout[i];
                    }
                });
            }
            Op::Sum { a } | Op::Mean { a } => {
                let numel = self.value(*a).numel();
                let g = if matches!(node.op, Op::Mean { .. }) {
                    gout[0] / T::from_f64(numel as f64)
                } else {
                    gout[0]
                };
                self.accumulate(grads, *a, |s| {
                    for slot in s.iter_mut() {
                        *slot = *slot + g;
                    }
                });
            }
            Op::Concat { a, b } => {
                let [n, c, h, w] = node.value.dims4("concat").expect("NCHW");
                let plane = h * w;
                let c1 = self.value(*a).shape()[1];
                let c2 = c - c1;
                self.accumulate(grads, *a, |s| {
                    for sm in 0..n {
                        let src = &gout[sm * c * plane..(sm * c + c1) * plane];
                        add_into(&mut s[sm * c1 * plane..(sm + 1) * c1 * plane], src);
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for sm in 0..n {
                        let src = &gout[(sm * c + c1) * plane..(sm + 1) * c * plane];
                        add_into(&mut s[sm * c2 * plane..(sm + 1) * c2 * plane], src);
                    }
                });
            }
            Op::Slice { a, start } => {
                let [n, len, h, w] = node.value.dims4("slice").expect("NCHW");
                let plane = h * w;
                let c = self.value(*a).shape()[1];
                self.accumulate(grads, *a, |s| {
                    for sm in 0..n {
                        let base = (sm * c + start) * plane;
                        add_into(
                            &mut s[base..base + len * plane],
                            &gout[sm * len * plane..(sm + 1) * len * plane],
                        );
                    }
                });
            }
            Op::Resample { a, rows, cols } => {
                let [_, _, h, w] = self.value(*a).dims4("resample").expect("NCHW");
                let (oh, ow) = (rows.len(), cols.len());
                self.accumulate(grads, *a, |s| {
                    for (p, gplane) in gout.chunks(oh * ow).enumerate() {
                        let dst = &mut s[p * h * w..(p + 1) * h * w];
                        for (oy, &(y0, y1, wy0, wy1)) in rows.iter().enumerate() {
                            for (ox, &(x0, x1, wx0, wx1)) in cols.iter().enumerate() {
                                let g = gplane[oy * ow + ox].as_f64();
                                for (iy, wy) in [(y0, wy0), (y1, wy1)] {
                                    for (ix, wx) in [(x0, wx0), (x1, wx1)] {
                                        let wgt = wy * wx;
                                        if wgt != 0.0 {
                                            let d = &mut dst[iy * w + ix];
                                            *d = *d + T::from_f64(g * wgt);
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Pad { a, top, left } => {
                let [_, _, h, w] = self.value(*a).dims4("pad").expect("NCHW");
                let [_, _, oh, ow] = node.value.dims4("pad").expect("NCHW");
                self.accumulate(grads, *a, |s| {
                    for (p, gplane) in gout.chunks(oh * ow).enumerate() {
                        let dst = &mut s[p * h * w..(p + 1) * h * w];
                        for y in 0..oh {
                            let sy = y.saturating_sub(*top).min(h - 1);
                            for x in 0..ow {
                                let sx = x.saturating_sub(*left).min(w - 1);
                                dst[sy * w + sx] = dst[sy * w + sx] + gplane[y * ow + x];
                            }
                        }
                    }
                });
            }
            Op::Crop { a, top, left } => {
                let [_, _, h, w] = self.value(*a).dims4("crop").expect("NCHW");
                let [_, _, ch, cw] = node.value.dims4("crop").expect("NCHW");
                self.accumulate(grads, *a, |s| {
                    for (p, gplane) in gout.chunks(ch * cw).enumerate() {
                        for y in 0..ch {
                            let row = p * h * w + (y + top) * w + left;
                            add_into(&mut s[row..row + cw], &gplane[y * cw..(y + 1) * cw]);
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        plan: &ConvPlan,
        cols: &[Vec<T>],
        gout: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let wt = self.value(weight);
        let o = wt.shape()[0];
        let positions = plan.positions();
        let taps = plan.taps;
        let sample_in = plan.in_channels * plan.in_h * plan.in_w;
        let want_w = self.needs(weight);
        let want_x = self.needs(input);
        let want_b = bias.is_some_and(|b| self.needs(b));
        let wdata = wt.data();

        let per_sample: Vec<(Vec<T>, Vec<T>)> = cols
            .par_iter()
            .enumerate()
            .map(|(s, col)| {
                let gy = &gout[s * o * positions..(s + 1) * o * positions];
                let mut dw = Vec::new();
                if want_w {
                    dw = vec![T::zero(); o * taps];
                    T::gemm(o, positions, taps, gy, (positions, 1), col, (1, positions), T::zero(), &mut dw, (taps, 1));
                }
                let mut dx = Vec::new();
                if want_x {
                    let mut dcols = vec![T::zero(); taps * positions];
                    T::gemm(taps, o, positions, wdata, (1, taps), gy, (positions, 1), T::zero(), &mut dcols, (positions, 1));
                    dx = vec![T::zero(); sample_in];
                    for (&src, &d) in plan.src.iter().zip(&dcols) {
                        if src != NO_TAP {
                            dx[src as usize] = dx[src as usize] + d;
                        }
                    }
                }
                (dw, dx)
            })
            .collect();

        if want_b {
            let mut db = vec![T::zero(); o];
            for sample in gout.chunks(o * positions) {
                for (slot, row) in db.iter_mut().zip(sample.chunks(positions)) {
                    *slot = row.iter().fold(*slot, |acc, &g| acc + g);
                }
            }
            self.accumulate(grads, bias.expect("bias"), |s| add_into(s, &db));
        }
        if want_w {
            self.accumulate(grads, weight, |s| {
                for (dw, _) in &per_sample {
                    add_into(s, dw);
                }
            });
        }
        if want_x {
            self.accumulate(grads, input, |s| {
                for (i, (_, dx)) in per_sample.iter().enumerate() {
                    add_into(&mut s[i * sample_in..(i + 1) * sample_in], dx);
                }
            });
        }
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

//! Minimal dense n-dimensional arrays with reverse-mode automatic
//! differentiation.
//!
//! The engine is a Wengert list: a [`Tape`] owns every node created during a
//! forward pass, appended in topological order, and [`Tape::backward`] walks
//! the list in reverse accumulating exact analytic gradients. Only the
//! primitives needed by the segmentation model and its losses exist; there is
//! no broadcasting. A tape is single-threaded; independent tapes may run in
//! parallel over shared read-only parameter values.
//!
//! Values are generic over [`Scalar`] so the same graph can run in `f32`
//! (production) or `f64` (reference path for gradient checks).

pub mod gradcheck;

use std::fs;
use std::io::Write as _;
use std::path::Path;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::{Error, Result};

/// Element type of a tape: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + std::fmt::Debug + Send + Sync + 'static
{
    #[inline]
    fn fromf(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to scalar")
    }

    #[inline]
    fn tof(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Tensor {
    id: usize,
}

enum Op<T> {
    Leaf {
        tracked: bool,
    },
    Add(usize, usize),
    Mul(usize, usize),
    Affine {
        x: usize,
        mul: T,
    },
    MatMul(usize, usize),
    Transpose2d(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<u32>,
    },
    Upsample2x(usize),
    ConcatChannels(usize, usize),
    Relu(usize),
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        inv_std: Vec<T>,
        /// Train mode normalizes with batch statistics, so the gradient flows
        /// through the mean/variance; eval mode is a frozen affine map.
        train: bool,
    },
    SoftmaxChannels(usize),
    Log(usize),
    Abs(usize),
    Clamp {
        x: usize,
        lo: T,
        hi: T,
    },
    Det2x2(usize),
    Mean(usize),
    SliceChannels {
        x: usize,
        from: usize,
        to: usize,
    },
    FlattenSpatial(usize),
}

struct Node<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    /// Persistent gradient accumulator; allocated on tracked leaves only.
    grad: Option<Vec<T>>,
    /// Whether a tracked leaf is reachable from this node.
    live: bool,
    op: Op<T>,
}

/// Reverse-mode computation tape.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::Shape(format!(
            "shape {shape:?} holds {numel} values, got {len}"
        )));
    }
    Ok(())
}

fn dims4(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape {
        &[a, b, c, d] => Ok((a, b, c, d)),
        other => Err(Error::Shape(format!(
            "expected rank-4 tensor, got {other:?}"
        ))),
    }
}

/// Axis-1 view of a rank >= 2 shape as (outer, channels, inner).
fn channel_view(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Shape(format!(
            "channel ops need rank >= 2, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<T>, live: bool, op: Op<T>) -> Tensor {
        let grad = match op {
            Op::Leaf { tracked: true } => Some(vec![T::zero(); values.len()]),
            _ => None,
        };
        self.nodes.push(Node {
            shape,
            values,
            grad,
            live,
            op,
        });
        Tensor {
            id: self.nodes.len() - 1,
        }
    }

    fn node(&self, t: Tensor) -> Result<&Node<T>> {
        self.nodes
            .get(t.id)
            .ok_or_else(|| Error::InvalidArgument(format!("tensor id {} not on this tape", t.id)))
    }

    /// Untracked input: gradients never flow into it.
    pub fn constant(&mut self, shape: &[usize], values: Vec<T>) -> Result<Tensor> {
        check_shape(shape, values.len())?;
        Ok(self.push(shape.to_vec(), values, false, Op::Leaf { tracked: false }))
    }

    /// Tracked input: [`Tape::backward`] accumulates its gradient.
    pub fn leaf(&mut self, shape: &[usize], values: Vec<T>) -> Result<Tensor> {
        check_shape(shape, values.len())?;
        Ok(self.push(shape.to_vec(), values, true, Op::Leaf { tracked: true }))
    }

    pub fn scalar(&mut self, value: T) -> Tensor {
        self.push(vec![], vec![value], false, Op::Leaf { tracked: false })
    }

    pub fn shape(&self, t: Tensor) -> Result<&[usize]> {
        Ok(&self.node(t)?.shape)
    }

    pub fn values(&self, t: Tensor) -> Result<&[T]> {
        Ok(&self.node(t)?.values)
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, t: Tensor) -> Result<T> {
        let node = self.node(t)?;
        if node.values.len() != 1 {
            return Err(Error::Shape(format!(
                "expected a scalar, got shape {:?}",
                node.shape
            )));
        }
        Ok(node.values[0])
    }

    /// Accumulated gradient of a tracked leaf; `None` for untracked nodes.
    pub fn grad(&self, t: Tensor) -> Result<Option<&[T]>> {
        Ok(self.node(t)?.grad.as_deref())
    }

    pub fn zero_grad(&mut self, t: Tensor) -> Result<()> {
        let node = self
            .nodes
            .get_mut(t.id)
            .ok_or_else(|| Error::InvalidArgument("tensor not on this tape".into()))?;
        if let Some(g) = node.grad.as_mut() {
            g.fill(T::zero());
        }
        Ok(())
    }

    fn binary_same_shape(&self, a: Tensor, b: Tensor) -> Result<(Vec<usize>, bool)> {
        let na = self.node(a)?;
        let nb = self.node(b)?;
        if na.shape != nb.shape {
            return Err(Error::Shape(format!(
                "operand shapes differ: {:?} vs {:?}",
                na.shape, nb.shape
            )));
        }
        Ok((na.shape.clone(), na.live || nb.live))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (shape, live) = self.binary_same_shape(a, b)?;
        let va = &self.nodes[a.id].values;
        let vb = &self.nodes[b.id].values;
        let out: Vec<T> = va.iter().zip(vb).map(|(&x, &y)| x + y).collect();
        Ok(self.push(shape, out, live, Op::Add(a.id, b.id)))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (shape, live) = self.binary_same_shape(a, b)?;
        let va = &self.nodes[a.id].values;
        let vb = &self.nodes[b.id].values;
        let out: Vec<T> = va.iter().zip(vb).map(|(&x, &y)| x * y).collect();
        Ok(self.push(shape, out, live, Op::Mul(a.id, b.id)))
    }

    /// Elementwise `x * mul + add`.
    pub fn affine(&mut self, x: Tensor, mul: T, add: T) -> Result<Tensor> {
        let node = self.node(x)?;
        let (shape, live) = (node.shape.clone(), node.live);
        let out: Vec<T> = node.values.iter().map(|&v| v * mul + add).collect();
        Ok(self.push(shape, out, live, Op::Affine { x: x.id, mul }))
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let na = self.node(a)?;
        let nb = self.node(b)?;
        let (m, k) = match na.shape[..] {
            [m, k] => (m, k),
            _ => return Err(Error::Shape("matmul lhs must be rank 2".into())),
        };
        let (k2, n) = match nb.shape[..] {
            [k2, n] => (k2, n),
            _ => return Err(Error::Shape("matmul rhs must be rank 2".into())),
        };
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let live = na.live || nb.live;
        let out = matmul_f64(&na.values, &nb.values, m, k, n);
        Ok(self.push(vec![m, n], out, live, Op::MatMul(a.id, b.id)))
    }

    pub fn transpose2d(&mut self, x: Tensor) -> Result<Tensor> {
        let node = self.node(x)?;
        let (m, n) = match node.shape[..] {
            [m, n] => (m, n),
            _ => return Err(Error::Shape("transpose needs rank 2".into())),
        };
        let live = node.live;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = node.values[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, live, Op::Transpose2d(x.id)))
    }

    /// 2-D convolution, stride 1, zero "same" padding, square odd kernel.
    /// `x`: [B, C, H, W], `w`: [O, C, k, k], optional bias [O].
    pub fn conv2d(&mut self, x: Tensor, w: Tensor, b: Option<Tensor>) -> Result<Tensor> {
        let nx = self.node(x)?;
        let nw = self.node(w)?;
        let (bsz, cin, h, wid) = dims4(&nx.shape)?;
        let (cout, cin2, kh, kw) = dims4(&nw.shape)?;
        if cin2 != cin {
            return Err(Error::Shape(format!(
                "conv input has {cin} channels, kernel expects {cin2}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv kernel must be square with odd size, got {kh}x{kw}"
            )));
        }
        let mut live = nx.live || nw.live;
        let bias = match b {
            Some(bt) => {
                let nb = self.node(bt)?;
                if nb.shape != [cout] {
                    return Err(Error::Shape(format!(
                        "conv bias must be [{cout}], got {:?}",
                        nb.shape
                    )));
                }
                live = live || nb.live;
                Some(bt.id)
            }
            None => None,
        };

        let xv = &self.nodes[x.id].values;
        let wv = &self.nodes[w.id].values;
        let bv = bias.map(|id| self.nodes[id].values.as_slice());
        let out = conv2d_forward(xv, wv, bv, bsz, cin, cout, h, wid, kh);
        Ok(self.push(
            vec![bsz, cout, h, wid],
            out,
            live,
            Op::Conv2d {
                x: x.id,
                w: w.id,
                b: bias,
            },
        ))
    }

    /// 2x2 max pooling with stride 2; spatial dims must be even.
    pub fn maxpool2d(&mut self, x: Tensor) -> Result<Tensor> {
        let node = self.node(x)?;
        let (bsz, c, h, w) = dims4(&node.shape)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "maxpool2d needs even dims, got {h}x{w}"
            )));
        }
        let live = node.live;
        let (h2, w2) = (h / 2, w / 2);
        let xv = &node.values;
        let mut out = vec![T::zero(); bsz * c * h2 * w2];
        let mut argmax = vec![0u32; out.len()];
        for p in 0..bsz * c {
            let plane = p * h * w;
            for oy in 0..h2 {
                for ox in 0..w2 {
                    let base = plane + (2 * oy) * w + 2 * ox;
                    // First maximum in scan order wins, deterministically.
                    let mut best_idx = base;
                    let mut best = xv[base];
                    for &cand in &[base + 1, base + w, base + w + 1] {
                        if xv[cand] > best {
                            best = xv[cand];
                            best_idx = cand;
                        }
                    }
                    let o = (p * h2 + oy) * w2 + ox;
                    out[o] = best;
                    argmax[o] = best_idx as u32;
                }
            }
        }
        Ok(self.push(
            vec![bsz, c, h2, w2],
            out,
            live,
            Op::MaxPool2d { x: x.id, argmax },
        ))
    }

    /// Nearest-neighbor 2x upsampling of the spatial dims.
    pub fn upsample_nearest2x(&mut self, x: Tensor) -> Result<Tensor> {
        let node = self.node(x)?;
        let (bsz, c, h, w) = dims4(&node.shape)?;
        let live = node.live;
        let xv = &node.values;
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); bsz * c * h2 * w2];
        for p in 0..bsz * c {
            for y in 0..h {
                let src = &xv[p * h * w + y * w..][..w];
                for dy in 0..2 {
                    let dst = &mut out[p * h2 * w2 + (2 * y + dy) * w2..][..w2];
                    for x_ in 0..w {
                        dst[2 * x_] = src[x_];
                        dst[2 * x_ + 1] = src[x_];
                    }
                }
            }
        }
        Ok(self.push(vec![bsz, c, h2, w2], out, live, Op::Upsample2x(x.id)))
    }

    /// Concatenation along the channel axis (axis 1).
    pub fn concat_channels(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let na = self.node(a)?;
        let nb = self.node(b)?;
        let (oa, ca, ia) = channel_view(&na.shape)?;
        let (ob, cb, ib) = channel_view(&nb.shape)?;
        if oa != ob
            || ia != ib
            || na.shape.len() != nb.shape.len()
            || na.shape[2..] != nb.shape[2..]
        {
            return Err(Error::Shape(format!(
                "concat operands disagree outside the channel axis: {:?} vs {:?}",
                na.shape, nb.shape
            )));
        }
        let live = na.live || nb.live;
        let mut shape = na.shape.clone();
        shape[1] = ca + cb;
        let mut out = vec![T::zero(); oa * (ca + cb) * ia];
        for o in 0..oa {
            let dst = &mut out[o * (ca + cb) * ia..][..(ca + cb) * ia];
            dst[..ca * ia].copy_from_slice(&na.values[o * ca * ia..][..ca * ia]);
            dst[ca * ia..].copy_from_slice(&nb.values[o * cb * ia..][..cb * ia]);
        }
        Ok(self.push(shape, out, live, Op::ConcatChannels(a.id, b.id)))
    }

    pub fn relu(&mut self, x: Tensor) -> Result<Tensor> {
        let node = self.node(x)?;
        let (shape, live) = (node.shape.clone(), node.live);
        let out: Vec<T> = node
            .values
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        Ok(self.push(shape, out, live, Op::Relu(x.id)))
    }

    /// Batch normalization over (B, H, W) per channel, train mode.
    /// Returns the output plus the biased batch mean and variance so the
    /// caller can update running statistics.
    pub fn batchnorm2d_train(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        eps: f64,
    ) -> Result<(Tensor, Vec<T>, Vec<T>)> {
        let (bsz, c, h, w) = dims4(&self.node(x)?.shape)?;
        self.check_bn_params(gamma, beta, c)?;
        let m = bsz * h * w;
        let xv = &self.nodes[x.id].values;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let mut sum = 0.0f64;
            for b in 0..bsz {
                let plane = &xv[(b * c + ch) * h * w..][..h * w];
                for &v in plane {
                    sum += v.tof();
                }
            }
            let mu = sum / m as f64;
            let mut sq = 0.0f64;
            for b in 0..bsz {
                let plane = &xv[(b * c + ch) * h * w..][..h * w];
                for &v in plane {
                    let d = v.tof() - mu;
                    sq += d * d;
                }
            }
            let v = sq / m as f64;
            mean[ch] = T::fromf(mu);
            var[ch] = T::fromf(v);
            inv_std[ch] = T::fromf(1.0 / (v + eps).sqrt());
        }
        let out = self.bn_apply(x, gamma, beta, &mean, &inv_std, true)?;
        Ok((out, mean, var))
    }

    /// Batch normalization with frozen running statistics (eval mode): a
    /// deterministic per-channel affine map.
    pub fn batchnorm2d_eval(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Tensor> {
        let (_, c, _, _) = dims4(&self.node(x)?.shape)?;
        self.check_bn_params(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape(format!("running stats must have {c} channels")));
        }
        let mean = running_mean.to_vec();
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::fromf(1.0 / (v.tof() + eps).sqrt()))
            .collect();
        self.bn_apply(x, gamma, beta, &mean, &inv_std, false)
    }

    fn check_bn_params(&self, gamma: Tensor, beta: Tensor, c: usize) -> Result<()> {
        if self.node(gamma)?.shape != [c] || self.node(beta)?.shape != [c] {
            return Err(Error::Shape(format!("batchnorm gamma/beta must be [{c}]")));
        }
        Ok(())
    }

    fn bn_apply(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        mean: &[T],
        inv_std: &[T],
        train: bool,
    ) -> Result<Tensor> {
        let node = self.node(x)?;
        let (bsz, c, h, w) = dims4(&node.shape)?;
        let live = node.live || self.nodes[gamma.id].live || self.nodes[beta.id].live;
        let xv = &self.nodes[x.id].values;
        let gv = &self.nodes[gamma.id].values;
        let bv = &self.nodes[beta.id].values;
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..bsz {
            for ch in 0..c {
                let scale = gv[ch] * inv_std[ch];
                let shift = bv[ch] - mean[ch] * scale;
                let off = (b * c + ch) * h * w;
                for i in 0..h * w {
                    out[off + i] = xv[off + i] * scale + shift;
                }
            }
        }
        let shape = vec![bsz, c, h, w];
        Ok(self.push(
            shape,
            out,
            live,
            Op::BatchNorm {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                mean: mean.to_vec(),
                inv_std: inv_std.to_vec(),
                train,
            },
        ))
    }

    /// Softmax along the channel axis (axis 1).
    pub fn softmax_channels(&mut self, x: Tensor) -> Result<Tensor> {
        let node = self.node(x)?;
        let (outer, c, inner) = channel_view(&node.shape)?;
        let (shape, live) = (node.shape.clone(), node.live);
        let xv = &node.values;
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |ch: usize| (o * c + ch) * inner + i;
                let mut max = xv[at(0)];
                for ch in 1..c {
                    if xv[at(ch)] > max {
                        max = xv[at(ch)];
                    }
                }
                let mut sum = T::zero();
                for ch in 0..c {
                    let e = (xv[at(ch)] - max).exp();
                    out[at(ch)] = e;
                    sum = sum + e;
                }
                for ch in 0..c {
                    out[at(ch)] = out[at(ch)] / sum;
                }
            }
        }
        Ok(self.push(shape, out, live, Op::SoftmaxChannels(x.id)))
    }

    pub fn log(&mut self, x: Tensor) -> Result<Tensor> {
        let node = self.node(x)?;
        let (shape, live) = (node.shape.clone(), node.live);
        let out: Vec<T> = node.values.iter().map(|&v| v.ln()).collect();
        Ok(self.push(shape, out, live, Op::Log(x.id)))
    }

    pub fn abs(&mut self, x: Tensor) -> Result<Tensor> {
        let node = self.node(x)?;
        let (shape, live) = (node.shape.clone(), node.live);
        let out: Vec<T> = node.values.iter().map(|&v| v.abs()).collect();
        Ok(self.push(shape, out, live, Op::Abs(x.id)))
    }

    /// Clamp to [lo, hi]; the gradient passes inside the open interval and is
    /// zero at or beyond the bounds.
    pub fn clamp(&mut self, x: Tensor, lo: T, hi: T) -> Result<Tensor> {
        if !(lo < hi) {
            return Err(Error::InvalidArgument("clamp needs lo < hi".into()));
        }
        let node = self.node(x)?;
        let (shape, live) = (node.shape.clone(), node.live);
        let out: Vec<T> = node
            .values
            .iter()
            .map(|&v| {
                if v < lo {
                    lo
                } else if v > hi {
                    hi
                } else {
                    v
                }
            })
            .collect();
        Ok(self.push(shape, out, live, Op::Clamp { x: x.id, lo, hi }))
    }

    /// Determinant of a 2x2 matrix; returns a scalar.
    pub fn det2x2(&mut self, x: Tensor) -> Result<Tensor> {
        let node = self.node(x)?;
        if node.shape != [2, 2] {
            return Err(Error::Shape(format!(
                "det2x2 needs shape [2, 2], got {:?}",
                node.shape
            )));
        }
        let live = node.live;
        let v = &node.values;
        let det = v[0].tof() * v[3].tof() - v[1].tof() * v[2].tof();
        Ok(self.push(vec![], vec![T::fromf(det)], live, Op::Det2x2(x.id)))
    }

    /// Mean over all elements; returns a scalar.
    pub fn mean(&mut self, x: Tensor) -> Result<Tensor> {
        let node = self.node(x)?;
        let live = node.live;
        let mut sum = 0.0f64;
        for &v in &node.values {
            sum += v.tof();
        }
        let out = T::fromf(sum / node.values.len() as f64);
        Ok(self.push(vec![], vec![out], live, Op::Mean(x.id)))
    }

    /// Slice of the channel axis (axis 1): channels `from..to`.
    pub fn slice_channels(&mut self, x: Tensor, from: usize, to: usize) -> Result<Tensor> {
        let node = self.node(x)?;
        let (outer, c, inner) = channel_view(&node.shape)?;
        if from >= to || to > c {
            return Err(Error::Shape(format!(
                "channel slice {from}..{to} out of range for {c} channels"
            )));
        }
        let live = node.live;
        let nc = to - from;
        let mut shape = node.shape.clone();
        shape[1] = nc;
        let mut out = vec![T::zero(); outer * nc * inner];
        for o in 0..outer {
            let src = &node.values[(o * c + from) * inner..][..nc * inner];
            out[o * nc * inner..][..nc * inner].copy_from_slice(src);
        }
        Ok(self.push(shape, out, live, Op::SliceChannels { x: x.id, from, to }))
    }

    /// Rearranges [B, C, H, W] into [B*H*W, C] rows of per-pixel channel
    /// vectors, the layout the losses consume.
    pub fn flatten_spatial(&mut self, x: Tensor) -> Result<Tensor> {
        let node = self.node(x)?;
        let (bsz, c, h, w) = dims4(&node.shape)?;
        let live = node.live;
        let inner = h * w;
        let mut out = vec![T::zero(); bsz * c * inner];
        for b in 0..bsz {
            for ch in 0..c {
                let src = &node.values[(b * c + ch) * inner..][..inner];
                for (i, &v) in src.iter().enumerate() {
                    out[(b * inner + i) * c + ch] = v;
                }
            }
        }
        Ok(self.push(vec![bsz * inner, c], out, live, Op::FlattenSpatial(x.id)))
    }

    /// Reverse pass from a scalar root. Gradients of tracked leaves are
    /// accumulated (not overwritten), so two backward calls double them.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        let root = self.node(loss)?;
        if root.values.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar root, got shape {:?}",
                root.shape
            )));
        }
        let mut scratch: Vec<Option<Vec<T>>> = (0..=loss.id).map(|_| None).collect();
        scratch[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            if scratch[id].is_none() || !self.nodes[id].live {
                scratch[id] = None;
                continue;
            }
            if let Op::Leaf { tracked } = self.nodes[id].op {
                if tracked {
                    let g = scratch[id].take().expect("checked above");
                    let node = &mut self.nodes[id];
                    let acc = node.grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
                    for (a, gi) in acc.iter_mut().zip(&g) {
                        *a = *a + *gi;
                    }
                }
                scratch[id] = None;
                continue;
            }
            let g = scratch[id].take().expect("checked above");
            self.propagate(id, &g, &mut scratch);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], scratch: &mut [Option<Vec<T>>]) {
        let live = |i: usize| self.nodes[i].live;
        macro_rules! acc {
            ($target:expr) => {
                scratch[$target]
                    .get_or_insert_with(|| vec![T::zero(); self.nodes[$target].values.len()])
            };
        }
        match &self.nodes[id].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                for &t in &[*a, *b] {
                    if live(t) {
                        let dst = acc!(t);
                        for (d, &gi) in dst.iter_mut().zip(g) {
                            *d = *d + gi;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if live(*a) {
                    let other = &self.nodes[*b].values;
                    let dst = acc!(*a);
                    for ((d, &gi), &o) in dst.iter_mut().zip(g).zip(other) {
                        *d = *d + gi * o;
                    }
                }
                if live(*b) {
                    let other = &self.nodes[*a].values;
                    let dst = acc!(*b);
                    for ((d, &gi), &o) in dst.iter_mut().zip(g).zip(other) {
                        *d = *d + gi * o;
                    }
                }
            }
            Op::Affine { x, mul } => {
                if live(*x) {
                    let mul = *mul;
                    let dst = acc!(*x);
                    for (d, &gi) in dst.iter_mut().zip(g) {
                        *d = *d + gi * mul;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if live(*a) {
                    // dA = g . B^T
                    let bv = &self.nodes[*b].values;
                    let mut da = vec![0.0f64; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j].tof();
                            for l in 0..k {
                                da[i * k + l] += gij * bv[l * n + j].tof();
                            }
                        }
                    }
                    let dst = acc!(*a);
                    for (d, v) in dst.iter_mut().zip(&da) {
                        *d = *d + T::fromf(*v);
                    }
                }
                if live(*b) {
                    // dB = A^T . g
                    let av = &self.nodes[*a].values;
                    let mut db = vec![0.0f64; k * n];
                    for i in 0..m {
                        for l in 0..k {
                            let ail = av[i * k + l].tof();
                            for j in 0..n {
                                db[l * n + j] += ail * g[i * n + j].tof();
                            }
                        }
                    }
                    let dst = acc!(*b);
                    for (d, v) in dst.iter_mut().zip(&db) {
                        *d = *d + T::fromf(*v);
                    }
                }
            }
            Op::Transpose2d(x) => {
                if live(*x) {
                    let (m, n) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                    let dst = acc!(*x);
                    for i in 0..m {
                        for j in 0..n {
                            dst[i * n + j] = dst[i * n + j] + g[j * m + i];
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b } => {
                let (bsz, cin, h, wid) = dims4(&self.nodes[*x].shape).expect("validated");
                let k = self.nodes[*w].shape[2];
                let cout = self.nodes[*w].shape[0];
                if live(*w) {
                    let xv = &self.nodes[*x].values;
                    let dst = acc!(*w);
                    conv2d_grad_weight(g, xv, dst, bsz, cin, cout, h, wid, k);
                }
                if live(*x) {
                    let wv = &self.nodes[*w].values;
                    let dst = acc!(*x);
                    conv2d_grad_input(g, wv, dst, bsz, cin, cout, h, wid, k);
                }
                if let Some(bid) = b {
                    if live(*bid) {
                        let dst = acc!(*bid);
                        let plane = h * wid;
                        for bi in 0..bsz {
                            for o in 0..cout {
                                let mut sum = T::zero();
                                for &gi in &g[(bi * cout + o) * plane..][..plane] {
                                    sum = sum + gi;
                                }
                                dst[o] = dst[o] + sum;
                            }
                        }
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if live(*x) {
                    let dst = acc!(*x);
                    for (o, &src_idx) in argmax.iter().enumerate() {
                        let i = src_idx as usize;
                        dst[i] = dst[i] + g[o];
                    }
                }
            }
            Op::Upsample2x(x) => {
                if live(*x) {
                    let (bsz, c, h, w) = dims4(&self.nodes[*x].shape).expect("validated");
                    let (h2, w2) = (2 * h, 2 * w);
                    let dst = acc!(*x);
                    for p in 0..bsz * c {
                        for y in 0..h {
                            for x_ in 0..w {
                                let mut sum = T::zero();
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        sum =
                                            sum + g[p * h2 * w2 + (2 * y + dy) * w2 + 2 * x_ + dx];
                                    }
                                }
                                let i = p * h * w + y * w + x_;
                                dst[i] = dst[i] + sum;
                            }
                        }
                    }
                }
            }
            Op::ConcatChannels(a, b) => {
                let (oa, ca, ia) = channel_view(&self.nodes[*a].shape).expect("validated");
                let cb = self.nodes[*b].shape[1];
                if live(*a) {
                    let dst = acc!(*a);
                    for o in 0..oa {
                        let src = &g[o * (ca + cb) * ia..][..ca * ia];
                        let d = &mut dst[o * ca * ia..][..ca * ia];
                        for (di, &si) in d.iter_mut().zip(src) {
                            *di = *di + si;
                        }
                    }
                }
                if live(*b) {
                    let dst = acc!(*b);
                    for o in 0..oa {
                        let src = &g[o * (ca + cb) * ia + ca * ia..][..cb * ia];
                        let d = &mut dst[o * cb * ia..][..cb * ia];
                        for (di, &si) in d.iter_mut().zip(src) {
                            *di = *di + si;
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if live(*x) {
                    let xv = &self.nodes[*x].values;
                    let dst = acc!(*x);
                    for ((d, &gi), &v) in dst.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d = *d + gi;
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let (bsz, c, h, w) = dims4(&self.nodes[*x].shape).expect("validated");
                let plane = h * w;
                let m = (bsz * plane) as f64;
                let xv = &self.nodes[*x].values;
                let gv = &self.nodes[*gamma].values;
                // Per-channel reductions shared by all three gradients.
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for bi in 0..bsz {
                    for ch in 0..c {
                        let off = (bi * c + ch) * plane;
                        let mu = mean[ch].tof();
                        let is = inv_std[ch].tof();
                        let mut sg = 0.0;
                        let mut sgx = 0.0;
                        for i in 0..plane {
                            let gi = g[off + i].tof();
                            let xh = (xv[off + i].tof() - mu) * is;
                            sg += gi;
                            sgx += gi * xh;
                        }
                        sum_g[ch] += sg;
                        sum_gx[ch] += sgx;
                    }
                }
                if live(*beta) {
                    let dst = acc!(*beta);
                    for ch in 0..c {
                        dst[ch] = dst[ch] + T::fromf(sum_g[ch]);
                    }
                }
                if live(*gamma) {
                    let dst = acc!(*gamma);
                    for ch in 0..c {
                        dst[ch] = dst[ch] + T::fromf(sum_gx[ch]);
                    }
                }
                if live(*x) {
                    let dst = acc!(*x);
                    for bi in 0..bsz {
                        for ch in 0..c {
                            let off = (bi * c + ch) * plane;
                            let mu = mean[ch].tof();
                            let is = inv_std[ch].tof();
                            let ga = gv[ch].tof();
                            if *train {
                                let mg = sum_g[ch] / m;
                                let mgx = sum_gx[ch] / m;
                                for i in 0..plane {
                                    let gi = g[off + i].tof();
                                    let xh = (xv[off + i].tof() - mu) * is;
                                    let d = ga * is * (gi - mg - xh * mgx);
                                    dst[off + i] = dst[off + i] + T::fromf(d);
                                }
                            } else {
                                let scale = T::fromf(ga * is);
                                for i in 0..plane {
                                    dst[off + i] = dst[off + i] + g[off + i] * scale;
                                }
                            }
                        }
                    }
                }
            }
            Op::SoftmaxChannels(x) => {
                if live(*x) {
                    let (outer, c, inner) =
                        channel_view(&self.nodes[*x].shape).expect("validated");
                    let s = &self.nodes[id].values;
                    let dst = acc!(*x);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |ch: usize| (o * c + ch) * inner + i;
                            let mut dot = 0.0f64;
                            for ch in 0..c {
                                dot += g[at(ch)].tof() * s[at(ch)].tof();
                            }
                            for ch in 0..c {
                                let d = s[at(ch)].tof() * (g[at(ch)].tof() - dot);
                                dst[at(ch)] = dst[at(ch)] + T::fromf(d);
                            }
                        }
                    }
                }
            }
            Op::Log(x) => {
                if live(*x) {
                    let xv = &self.nodes[*x].values;
                    let dst = acc!(*x);
                    for ((d, &gi), &v) in dst.iter_mut().zip(g).zip(xv) {
                        *d = *d + gi / v;
                    }
                }
            }
            Op::Abs(x) => {
                if live(*x) {
                    let xv = &self.nodes[*x].values;
                    let dst = acc!(*x);
                    for ((d, &gi), &v) in dst.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d = *d + gi;
                        } else if v < T::zero() {
                            *d = *d - gi;
                        }
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                if live(*x) {
                    let (lo, hi) = (*lo, *hi);
                    let xv = &self.nodes[*x].values;
                    let dst = acc!(*x);
                    for ((d, &gi), &v) in dst.iter_mut().zip(g).zip(xv) {
                        if v > lo && v < hi {
                            *d = *d + gi;
                        }
                    }
                }
            }
            Op::Det2x2(x) => {
                if live(*x) {
                    let v = &self.nodes[*x].values;
                    let (a, b, c_, d) = (v[0], v[1], v[2], v[3]);
                    let gs = g[0];
                    let dst = acc!(*x);
                    dst[0] = dst[0] + gs * d;
                    dst[1] = dst[1] - gs * c_;
                    dst[2] = dst[2] - gs * b;
                    dst[3] = dst[3] + gs * a;
                }
            }
            Op::Mean(x) => {
                if live(*x) {
                    let n = self.nodes[*x].values.len();
                    let gi = g[0] * T::fromf(1.0 / n as f64);
                    let dst = acc!(*x);
                    for d in dst.iter_mut() {
                        *d = *d + gi;
                    }
                }
            }
            Op::SliceChannels { x, from, to } => {
                if live(*x) {
                    let (outer, c, inner) =
                        channel_view(&self.nodes[*x].shape).expect("validated");
                    let nc = to - from;
                    let dst = acc!(*x);
                    for o in 0..outer {
                        let d = &mut dst[(o * c + from) * inner..][..nc * inner];
                        let src = &g[o * nc * inner..][..nc * inner];
                        for (di, &si) in d.iter_mut().zip(src) {
                            *di = *di + si;
                        }
                    }
                }
            }
            Op::FlattenSpatial(x) => {
                if live(*x) {
                    let (bsz, c, h, w) = dims4(&self.nodes[*x].shape).expect("validated");
                    let inner = h * w;
                    let dst = acc!(*x);
                    for b in 0..bsz {
                        for ch in 0..c {
                            let off = (b * c + ch) * inner;
                            for i in 0..inner {
                                dst[off + i] = dst[off + i] + g[(b * inner + i) * c + ch];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn matmul_f64<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for l in 0..k {
                acc += a[i * k + l].tof() * b[l * n + j].tof();
            }
            out[i * n + j] = T::fromf(acc);
        }
    }
    out
}

/// Valid output-row/col ranges for a kernel offset `(du, dv)` relative to the
/// padded origin: out[y][x] pairs with in[y+du][x+dv].
#[inline]
fn shift_ranges(h: usize, w: usize, du: isize, dv: isize) -> (usize, usize, usize, usize) {
    let y0 = (-du).max(0) as usize;
    let y1 = ((h as isize - du).min(h as isize)).max(0) as usize;
    let x0 = (-dv).max(0) as usize;
    let x1 = ((w as isize - dv).min(w as isize)).max(0) as usize;
    (y0, y1, x0, x1)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<T: Scalar>(
    xv: &[T],
    wv: &[T],
    bias: Option<&[T]>,
    bsz: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<T> {
    let pad = (k / 2) as isize;
    let plane = h * w;
    let mut out = vec![T::zero(); bsz * cout * plane];
    for b in 0..bsz {
        for o in 0..cout {
            let out_plane = &mut out[(b * cout + o) * plane..][..plane];
            if let Some(bv) = bias {
                out_plane.fill(bv[o]);
            }
            for c in 0..cin {
                let in_plane = &xv[(b * cin + c) * plane..][..plane];
                for ku in 0..k {
                    for kv in 0..k {
                        let wgt = wv[((o * cin + c) * k + ku) * k + kv];
                        if wgt == T::zero() {
                            continue;
                        }
                        let du = ku as isize - pad;
                        let dv = kv as isize - pad;
                        let (y0, y1, x0, x1) = shift_ranges(h, w, du, dv);
                        for y in y0..y1 {
                            let src_row = (y as isize + du) as usize;
                            let s0 = (x0 as isize + dv) as usize;
                            let src = &in_plane[src_row * w + s0..][..x1 - x0];
                            let dst = &mut out_plane[y * w + x0..][..x1 - x0];
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d = *d + wgt * v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_grad_weight<T: Scalar>(
    g: &[T],
    xv: &[T],
    dw: &mut [T],
    bsz: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    for b in 0..bsz {
        for o in 0..cout {
            let g_plane = &g[(b * cout + o) * plane..][..plane];
            for c in 0..cin {
                let in_plane = &xv[(b * cin + c) * plane..][..plane];
                for ku in 0..k {
                    for kv in 0..k {
                        let du = ku as isize - pad;
                        let dv = kv as isize - pad;
                        let (y0, y1, x0, x1) = shift_ranges(h, w, du, dv);
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let src_row = (y as isize + du) as usize;
                            let s0 = (x0 as isize + dv) as usize;
                            let src = &in_plane[src_row * w + s0..][..x1 - x0];
                            let gr = &g_plane[y * w + x0..][..x1 - x0];
                            for (&gi, &vi) in gr.iter().zip(src) {
                                acc = acc + gi * vi;
                            }
                        }
                        let idx = ((o * cin + c) * k + ku) * k + kv;
                        dw[idx] = dw[idx] + acc;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_grad_input<T: Scalar>(
    g: &[T],
    wv: &[T],
    dx: &mut [T],
    bsz: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    for b in 0..bsz {
        for o in 0..cout {
            let g_plane = &g[(b * cout + o) * plane..][..plane];
            for c in 0..cin {
                let dx_plane = &mut dx[(b * cin + c) * plane..][..plane];
                for ku in 0..k {
                    for kv in 0..k {
                        let wgt = wv[((o * cin + c) * k + ku) * k + kv];
                        if wgt == T::zero() {
                            continue;
                        }
                        let du = ku as isize - pad;
                        let dv = kv as isize - pad;
                        let (y0, y1, x0, x1) = shift_ranges(h, w, du, dv);
                        for y in y0..y1 {
                            let dst_row = (y as isize + du) as usize;
                            let d0 = (x0 as isize + dv) as usize;
                            let gr = &g_plane[y * w + x0..][..x1 - x0];
                            let dst = &mut dx_plane[dst_row * w + d0..][..x1 - x0];
                            for (d, &gi) in dst.iter_mut().zip(gr) {
                                *d = *d + wgt * gi;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Trainable weight buffer with its momentum state, living outside any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub grad: Vec<T>,
    pub velocity: Vec<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        check_shape(&shape, values.len())?;
        let n = values.len();
        Ok(Parameter {
            name: name.into(),
            shape,
            values,
            grad: vec![T::zero(); n],
            velocity: vec![T::zero(); n],
        })
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// Leases the parameter onto a tape as a tracked leaf.
    pub fn lease(&self, tape: &mut Tape<T>) -> Result<Tensor> {
        tape.leaf(&self.shape, self.values.clone())
    }

    /// Leases the parameter as an untracked constant (inference).
    pub fn lease_frozen(&self, tape: &mut Tape<T>) -> Result<Tensor> {
        tape.constant(&self.shape, self.values.clone())
    }

    /// Adds a tape leaf's accumulated gradient into this parameter's grad.
    pub fn absorb_grad(&mut self, tape: &Tape<T>, leaf: Tensor) -> Result<()> {
        let g = tape
            .grad(leaf)?
            .ok_or_else(|| Error::InvalidArgument("leaf has no gradient".into()))?;
        if g.len() != self.grad.len() {
            return Err(Error::Shape("gradient length mismatch".into()));
        }
        for (a, &gi) in self.grad.iter_mut().zip(g) {
            *a = *a + gi;
        }
        Ok(())
    }
}

/// Classic momentum SGD: `v <- momentum * v + grad; p <- p - lr * v`.
pub fn sgd_step<T: Scalar>(params: &mut [Parameter<T>], lr: f64, momentum: f64) {
    let lr = T::fromf(lr);
    let mom = T::fromf(momentum);
    for p in params {
        for i in 0..p.values.len() {
            p.velocity[i] = mom * p.velocity[i] + p.grad[i];
            p.values[i] = p.values[i] - lr * p.velocity[i];
        }
    }
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NNW1";

/// Writes parameters as an NNW1 checkpoint: magic, then per-parameter
/// records of name length (u32), UTF-8 name, rank (u32), dims (u64 each) and
/// the f32 payload, all little-endian.
pub fn save_checkpoint<T: Scalar>(params: &[Parameter<T>], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    for p in params {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &p.values {
            out.extend_from_slice(&(v.tof() as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads an NNW1 checkpoint; records are read until end of file.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<Parameter<T>>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("missing NNW1 magic".into()));
    }
    let mut pos = 4usize;
    let mut params = Vec::new();
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Corruption("checkpoint truncated".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    while pos < bytes.len() {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| Error::Corruption("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 4)?;
        let values: Vec<T> = raw
            .chunks_exact(4)
            .map(|c| T::fromf(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        params.push(Parameter::new(name, shape, values)?);
    }
    Ok(params)
}

//! Gradient tape: every primitive records its inputs and saved activations so
//! that [`Tape::backward`] can replay the graph in reverse.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

enum Op<T> {
    Leaf,
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Div {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: T,
    },
    AddScalar {
        x: usize,
    },
    Abs {
        x: usize,
    },
    LeakyRelu {
        x: usize,
        slope: T,
    },
    Gelu {
        x: usize,
    },
    Sum {
        x: usize,
    },
    SumLast {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Conv3d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Softmax {
        x: usize,
        axis: usize,
        log: bool,
    },
    LayerNorm {
        x: usize,
        g: usize,
        b: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    InstanceNorm {
        x: usize,
        g: usize,
        b: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Resize {
        x: usize,
        axis: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Div { .. } => "div",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Abs { .. } => "abs",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Gelu { .. } => "gelu",
            Op::Sum { .. } => "sum",
            Op::SumLast { .. } => "sum_last",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::MatMul { .. } => "matmul",
            Op::Conv3d { .. } => "conv3d",
            Op::Softmax { log: false, .. } => "softmax",
            Op::Softmax { log: true, .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Resize { .. } => "resize_linear",
        }
    }
}

/// Names of every differentiable primitive a tape can record.
pub const PRIMITIVES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_scalar",
    "abs",
    "leaky_relu",
    "gelu",
    "sum",
    "sum_last",
    "reshape",
    "permute",
    "concat",
    "narrow",
    "matmul",
    "conv3d",
    "softmax",
    "log_softmax",
    "layer_norm",
    "instance_norm",
    "resize_linear",
];

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// A tape is single-use: one successful [`Tape::backward`] consumes it.
pub struct Tape<T: Scalar> {
    id: u32,
    nodes: Vec<Node<T>>,
    consumed: bool,
    fault: Option<&'static str>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn is_suffix(shape: &[usize], of: &[usize]) -> bool {
    shape.len() <= of.len() && of[of.len() - shape.len()..] == *shape
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test fixture: scales the input gradients produced by every op named
    /// `op` so gradient checks can demonstrate they catch a bad derivative.
    #[doc(hidden)]
    pub fn corrupt_gradient_of(&mut self, op: Option<&'static str>) {
        self.fault = op;
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx as usize >= self.nodes.len() {
            return Err(TensorError::DetachedTensor);
        }
        Ok(v.idx as usize)
    }

    fn var(&self, idx: usize) -> Var {
        Var {
            tape: self.id,
            idx: idx as u32,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        // Saved activations are only needed on the differentiable path.
        let op = if requires_grad { op } else { strip_saved(op) };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(self.var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        self.var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` that is cut from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let i = self.index(v)?;
        let value = self.nodes[i].value.clone();
        Ok(self.constant(value))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let i = self.index(v).expect("var from another tape");
        &self.nodes[i].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        let i = self.index(v).expect("var from another tape");
        self.nodes[i].requires_grad
    }

    /// Gradient of the last backward pass, for leaves that require one.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        let i = self.index(v).ok()?;
        self.nodes[i].grad.as_ref()
    }

    // ---- elementwise ------------------------------------------------------

    fn binary_shapes(&self, op: &'static str, a: usize, b: usize, allow_bcast: bool) -> Result<()> {
        let sa = self.nodes[a].value.shape();
        let sb = self.nodes[b].value.shape();
        if sa == sb || (allow_bcast && is_suffix(sb, sa)) {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn zip_bcast(&self, a: usize, b: usize, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = &self.nodes[a].value;
        let bv = self.nodes[b].value.data();
        let n = bv.len();
        let data = av
            .data()
            .chunks_exact(n)
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(av.shape(), data).expect("shape preserved")
    }

    /// Elementwise sum. `b` may have a shape equal to a trailing suffix of
    /// `a`'s shape, in which case it repeats over the leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.index(a)?, self.index(b)?);
        self.binary_shapes("add", a, b, true)?;
        let value = self.zip_bcast(a, b, |x, y| x + y);
        self.push(value, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.index(a)?, self.index(b)?);
        self.binary_shapes("sub", a, b, false)?;
        let value = self.zip_bcast(a, b, |x, y| x - y);
        self.push(value, Op::Sub { a, b }, &[a, b])
    }

    /// Elementwise product with the same suffix broadcasting as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.index(a)?, self.index(b)?);
        self.binary_shapes("mul", a, b, true)?;
        let value = self.zip_bcast(a, b, |x, y| x * y);
        self.push(value, Op::Mul { a, b }, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.index(a)?, self.index(b)?);
        self.binary_shapes("div", a, b, false)?;
        let value = self.zip_bcast(a, b, |x, y| x / y);
        self.push(value, Op::Div { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let x = self.index(x)?;
        let c = T::from_f64(c);
        let value = self.nodes[x].value.map(|v| v * c);
        self.push(value, Op::Scale { x, c }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let x = self.index(x)?;
        let c = T::from_f64(c);
        let value = self.nodes[x].value.map(|v| v + c);
        self.push(value, Op::AddScalar { x }, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let x = self.index(x)?;
        let value = self.nodes[x].value.map(|v| v.abs());
        self.push(value, Op::Abs { x }, &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let x = self.index(x)?;
        let slope = T::from_f64(slope);
        let value = self.nodes[x].value.map(|v| if v > T::zero() { v } else { v * slope });
        self.push(value, Op::LeakyRelu { x, slope }, &[x])
    }

    /// GELU in its exact Gaussian-CDF form, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let x = self.index(x)?;
        let value = self.nodes[x].value.map(gelu);
        self.push(value, Op::Gelu { x }, &[x])
    }

    // ---- reductions and layout --------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let x = self.index(x)?;
        let value = Tensor::scalar(self.nodes[x].value.sum());
        self.push(value, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums over the last axis, dropping it (a rank-1 input yields shape `[1]`).
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let x = self.index(x)?;
        let v = &self.nodes[x].value;
        let n = *v.shape().last().expect("non-empty shape");
        let data: Vec<T> = v.data().chunks_exact(n).map(|c| c.iter().copied().sum()).collect();
        let shape = if v.rank() == 1 {
            vec![1]
        } else {
            v.shape()[..v.rank() - 1].to_vec()
        };
        let value = Tensor::new(&shape, data)?;
        self.push(value, Op::SumLast { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let x = self.index(x)?;
        let value = self.nodes[x].value.clone().reshaped(shape)?;
        self.push(value, Op::Reshape { x }, &[x])
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let x = self.index(x)?;
        let v = &self.nodes[x].value;
        let mut seen = vec![false; v.rank()];
        if perm.len() != v.rank()
            || perm
                .iter()
                .any(|&p| p >= v.rank() || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                reason: format!("{perm:?} is not a permutation of rank {}", v.rank()),
            });
        }
        let shape: Vec<usize> = perm.iter().map(|&p| v.shape()[p]).collect();
        let value = Tensor::new(&shape, kernels::permute(v.data(), v.shape(), perm))?;
        self.push(value, Op::Permute { x, perm: perm.to_vec() }, &[x])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::AxisOutOfRange { axis: 1, rank: r });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let idx: Vec<usize> = xs.iter().map(|&v| self.index(v)).collect::<Result<_>>()?;
        let first = self.nodes[*idx.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?]
        .value
        .shape()
        .to_vec();
        if axis >= first.len() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(ax, (a, b))| ax == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idx {
                let v = &self.nodes[i].value;
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(&shape, data)?;
        self.push(value, Op::Concat { xs: idx.clone(), axis }, &idx)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.index(x)?;
        let v = &self.nodes[x].value;
        if axis >= v.rank() {
            return Err(TensorError::AxisOutOfRange { axis, rank: v.rank() });
        }
        if len == 0 || start + len > v.shape()[axis] {
            return Err(TensorError::InvalidArgument {
                op: "narrow",
                reason: format!("range {start}..{} exceeds axis length {}", start + len, v.shape()[axis]),
            });
        }
        let (outer, n, inner) = kernels::split_axis(v.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(&shape, data)?;
        self.push(value, Op::Narrow { x, axis, start }, &[x])
    }

    // ---- linear algebra ---------------------------------------------------

    /// Batched matrix product `[.., M, K] x [.., K, N] -> [.., M, N]`.
    ///
    /// Batch dimensions must be equal, or one operand may be a plain matrix
    /// that is shared across the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let sa = self.nodes[ai].value.shape().to_vec();
        let sb = self.nodes[bi].value.shape().to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let dims = MatDims::new(&sa, &sb).ok_or_else(mismatch)?;
        let mut out = vec![T::zero(); dims.batch * dims.m * dims.n];
        let (av, bv) = (self.nodes[ai].value.data(), self.nodes[bi].value.data());
        for i in 0..dims.batch {
            let (ao, bo, co) = dims.offsets(i);
            T::gemm(
                dims.m,
                dims.k,
                dims.n,
                T::one(),
                &av[ao..],
                dims.k as isize,
                1,
                &bv[bo..],
                dims.n as isize,
                1,
                T::zero(),
                &mut out[co..],
                dims.n as isize,
                1,
            );
        }
        let mut shape = if sa.len() >= sb.len() {
            sa[..sa.len() - 2].to_vec()
        } else {
            sb[..sb.len() - 2].to_vec()
        };
        shape.extend([dims.m, dims.n]);
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::MatMul { a: ai, b: bi }, &[ai, bi])
    }

    /// Tokenwise affine map `x [.., Cin] . w [Cin, Cout] + b [Cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// 3D cross-correlation of `x [Cin, D, H, W]` with `w [Cout, Cin, k, k, k]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xi, wi) = (self.index(x)?, self.index(w)?);
        let bi = b.map(|b| self.index(b)).transpose()?;
        let sx = self.nodes[xi].value.shape().to_vec();
        let sw = self.nodes[wi].value.shape().to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv3d",
            lhs: sx.clone(),
            rhs: sw.clone(),
        };
        if sx.len() != 4 || sw.len() != 5 || sw[1] != sx[0] || sw[2] != sw[3] || sw[3] != sw[4] {
            return Err(mismatch());
        }
        let k = sw[2];
        if k % 2 == 0 || stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv3d",
                reason: format!("kernel {k} must be odd and stride {stride} positive"),
            });
        }
        if let Some(bi) = bi {
            if self.nodes[bi].value.shape() != [sw[0]] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv3d",
                    lhs: vec![sw[0]],
                    rhs: self.nodes[bi].value.shape().to_vec(),
                });
            }
        }
        let mut out_dims = [0; 3];
        for (o, &n) in out_dims.iter_mut().zip(&sx[1..]) {
            *o = ConvGeom::out_len(n, k, stride, pad).ok_or(TensorError::EmptyOutput {
                op: "conv3d",
                shape: sx.clone(),
            })?;
        }
        let geom = ConvGeom {
            cin: sx[0],
            cout: sw[0],
            k,
            stride,
            pad,
            in_dims: [sx[1], sx[2], sx[3]],
            out_dims,
        };
        let data = kernels::conv3d_forward(
            self.nodes[xi].value.data(),
            self.nodes[wi].value.data(),
            bi.map(|bi| self.nodes[bi].value.data()),
            &geom,
        );
        let value = Tensor::new(&[geom.cout, out_dims[0], out_dims[1], out_dims[2]], data)?;
        let mut inputs = vec![xi, wi];
        inputs.extend(bi);
        self.push(
            value,
            Op::Conv3d {
                x: xi,
                w: wi,
                b: bi,
                geom,
            },
            &inputs,
        )
    }

    // ---- normalization and attention helpers ------------------------------

    fn check_axis(&self, x: usize, axis: usize) -> Result<()> {
        let rank = self.nodes[x].value.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { axis, rank });
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let x = self.index(x)?;
        self.check_axis(x, axis)?;
        let v = &self.nodes[x].value;
        let data = kernels::softmax_forward(v.data(), v.shape(), axis, None, false);
        let value = Tensor::new(v.shape(), data)?;
        self.push(value, Op::Softmax { x, axis, log: false }, &[x])
    }

    /// Softmax over the last axis where positions with `mask[i] == false`
    /// receive exactly zero probability.
    pub fn softmax_masked(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let x = self.index(x)?;
        let v = &self.nodes[x].value;
        let axis = v.rank() - 1;
        if mask.len() != v.shape()[axis] {
            return Err(TensorError::ShapeMismatch {
                op: "softmax",
                lhs: v.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(TensorError::AllKeysMasked);
        }
        let data = kernels::softmax_forward(v.data(), v.shape(), axis, Some(mask), false);
        let value = Tensor::new(v.shape(), data)?;
        self.push(value, Op::Softmax { x, axis, log: false }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let x = self.index(x)?;
        self.check_axis(x, axis)?;
        let v = &self.nodes[x].value;
        let data = kernels::softmax_forward(v.data(), v.shape(), axis, None, true);
        let value = Tensor::new(v.shape(), data)?;
        self.push(value, Op::Softmax { x, axis, log: true }, &[x])
    }

    /// Normalizes over the last axis, then applies per-channel `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (x, g, b) = (self.index(x)?, self.index(gamma)?, self.index(beta)?);
        let v = &self.nodes[x].value;
        let c = *v.shape().last().expect("non-empty shape");
        for p in [g, b] {
            if self.nodes[p].value.shape() != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: v.shape().to_vec(),
                    rhs: self.nodes[p].value.shape().to_vec(),
                });
            }
        }
        let (xhat, inv_std) = kernels::normalize_groups(v.data(), c, eps);
        let (gv, bv) = (self.nodes[g].value.data(), self.nodes[b].value.data());
        let data = xhat
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(gv).zip(bv).map(|((&xh, &gg), &bb)| xh * gg + bb))
            .collect();
        let value = Tensor::new(v.shape(), data)?;
        self.push(value, Op::LayerNorm { x, g, b, xhat, inv_std }, &[x, g, b])
    }

    /// Per-channel normalization over all spatial positions of `x [C, ...]`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (x, g, b) = (self.index(x)?, self.index(gamma)?, self.index(beta)?);
        let v = &self.nodes[x].value;
        let c = v.shape()[0];
        for p in [g, b] {
            if self.nodes[p].value.shape() != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "instance_norm",
                    lhs: v.shape().to_vec(),
                    rhs: self.nodes[p].value.shape().to_vec(),
                });
            }
        }
        let spatial = v.numel() / c;
        let (xhat, inv_std) = kernels::normalize_groups(v.data(), spatial, eps);
        let (gv, bv) = (self.nodes[g].value.data(), self.nodes[b].value.data());
        let data = xhat
            .chunks_exact(spatial)
            .zip(gv.iter().zip(bv))
            .flat_map(|(ch, (&gg, &bb))| ch.iter().map(move |&xh| xh * gg + bb))
            .collect();
        let value = Tensor::new(v.shape(), data)?;
        self.push(value, Op::InstanceNorm { x, g, b, xhat, inv_std }, &[x, g, b])
    }

    /// Linear resampling along `axis` to `len` samples (half-pixel centers,
    /// edge-clamped). Resizing `n -> 2n` is trilinear upsampling when applied
    /// to each spatial axis in turn.
    pub fn resize_linear(&mut self, x: Var, axis: usize, len: usize) -> Result<Var> {
        let x = self.index(x)?;
        self.check_axis(x, axis)?;
        if len == 0 {
            return Err(TensorError::EmptyOutput {
                op: "resize_linear",
                shape: self.nodes[x].value.shape().to_vec(),
            });
        }
        let v = &self.nodes[x].value;
        let data = kernels::resize_forward(v.data(), v.shape(), axis, len);
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(&shape, data)?;
        self.push(value, Op::Resize { x, axis }, &[x])
    }

    // ---- backward ---------------------------------------------------------

    /// Populates `grad` on every requires-grad leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let li = self.index(loss)?;
        if !self.nodes[li].value.is_scalar() {
            return Err(TensorError::NonScalarLoss(self.nodes[li].value.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![T::one()]);
        for i in (0..=li).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let shape = self.nodes[i].value.shape().to_vec();
                self.nodes[i].grad = Some(Tensor::new(&shape, gy)?);
                continue;
            }
            let contributions = self.input_grads(i, &gy);
            let factor = (self.fault == Some(self.nodes[i].op.name())).then(|| T::from_f64(1.5));
            for (j, mut g) in contributions {
                if !self.nodes[j].requires_grad {
                    continue;
                }
                if let Some(f) = factor {
                    g.iter_mut().for_each(|v| *v *= f);
                }
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, gy: &[T]) -> Vec<(usize, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |j: usize| self.nodes[j].value.data();
        let rg = |j: usize| self.nodes[j].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add { a, b } => {
                let nb = val(*b).len();
                let mut out = vec![(*a, gy.to_vec())];
                if rg(*b) {
                    out.push((*b, fold_repeats(gy, nb)));
                }
                out
            }
            Op::Sub { a, b } => vec![(*a, gy.to_vec()), (*b, gy.iter().map(|&g| -g).collect())],
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let nb = bv.len();
                let mut out = Vec::new();
                if rg(*a) {
                    out.push((*a, gy.iter().enumerate().map(|(k, &g)| g * bv[k % nb]).collect()));
                }
                if rg(*b) {
                    let prod: Vec<T> = gy.iter().zip(av).map(|(&g, &x)| g * x).collect();
                    out.push((*b, fold_repeats(&prod, nb)));
                }
                out
            }
            Op::Div { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                vec![
                    (*a, gy.iter().zip(bv).map(|(&g, &y)| g / y).collect()),
                    (
                        *b,
                        gy.iter()
                            .zip(av)
                            .zip(bv)
                            .map(|((&g, &x), &y)| -g * x / (y * y))
                            .collect(),
                    ),
                ]
            }
            Op::Scale { x, c } => vec![(*x, gy.iter().map(|&g| g * *c).collect())],
            Op::AddScalar { x } | Op::Reshape { x } => vec![(*x, gy.to_vec())],
            Op::Abs { x } => vec![(
                *x,
                gy.iter()
                    .zip(val(*x))
                    .map(|(&g, &v)| {
                        if v > T::zero() {
                            g
                        } else if v < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect(),
            )],
            Op::LeakyRelu { x, slope } => vec![(
                *x,
                gy.iter()
                    .zip(val(*x))
                    .map(|(&g, &v)| if v > T::zero() { g } else { g * *slope })
                    .collect(),
            )],
            Op::Gelu { x } => vec![(*x, gy.iter().zip(val(*x)).map(|(&g, &v)| g * gelu_grad(v)).collect())],
            Op::Sum { x } => vec![(*x, vec![gy[0]; val(*x).len()])],
            Op::SumLast { x } => {
                let n = *self.nodes[*x].value.shape().last().expect("rank >= 1");
                vec![(*x, (0..val(*x).len()).map(|k| gy[k / n]).collect())]
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (o, &p) in perm.iter().enumerate() {
                    inverse[p] = o;
                }
                vec![(*x, kernels::permute(gy, node.value.shape(), &inverse))]
            }
            Op::Concat { xs, axis } => {
                let (outer, _, inner) = kernels::split_axis(node.value.shape(), *axis);
                let total = node.value.shape()[*axis];
                let mut out: Vec<(usize, Vec<T>)> = xs.iter().map(|&j| (j, Vec::with_capacity(val(j).len()))).collect();
                for o in 0..outer {
                    let mut at = o * total * inner;
                    for (j, buf) in out.iter_mut() {
                        let chunk = self.nodes[*j].value.shape()[*axis] * inner;
                        buf.extend_from_slice(&gy[at..at + chunk]);
                        at += chunk;
                    }
                }
                out
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = self.nodes[*x].value.shape();
                let (outer, n, inner) = kernels::split_axis(in_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    dx[base..base + len * inner].copy_from_slice(&gy[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, dx)]
            }
            Op::MatMul { a, b } => {
                let sa = self.nodes[*a].value.shape();
                let sb = self.nodes[*b].value.shape();
                let dims = MatDims::new(sa, sb).expect("validated in forward");
                let (av, bv) = (val(*a), val(*b));
                let mut out = Vec::new();
                if rg(*a) {
                    let mut ga = vec![T::zero(); av.len()];
                    for i in 0..dims.batch {
                        let (ao, bo, co) = dims.offsets(i);
                        T::gemm(
                            dims.m,
                            dims.n,
                            dims.k,
                            T::one(),
                            &gy[co..],
                            dims.n as isize,
                            1,
                            &bv[bo..],
                            1,
                            dims.n as isize,
                            T::one(),
                            &mut ga[ao..],
                            dims.k as isize,
                            1,
                        );
                    }
                    out.push((*a, ga));
                }
                if rg(*b) {
                    let mut gb = vec![T::zero(); bv.len()];
                    for i in 0..dims.batch {
                        let (ao, bo, co) = dims.offsets(i);
                        T::gemm(
                            dims.k,
                            dims.m,
                            dims.n,
                            T::one(),
                            &av[ao..],
                            1,
                            dims.k as isize,
                            &gy[co..],
                            dims.n as isize,
                            1,
                            T::one(),
                            &mut gb[bo..],
                            dims.n as isize,
                            1,
                        );
                    }
                    out.push((*b, gb));
                }
                out
            }
            Op::Conv3d { x, w, b, geom } => {
                let need = [rg(*x), rg(*w), b.is_some_and(rg)];
                let grads = kernels::conv3d_backward(val(*x), val(*w), gy, geom, need);
                let mut out = Vec::new();
                out.extend(grads.dx.map(|g| (*x, g)));
                out.extend(grads.dw.map(|g| (*w, g)));
                if let (Some(b), Some(g)) = (b, grads.db) {
                    out.push((*b, g));
                }
                out
            }
            Op::Softmax { x, axis, log } => vec![(
                *x,
                kernels::softmax_backward(node.value.data(), gy, node.value.shape(), *axis, *log),
            )],
            Op::LayerNorm { x, g, b, xhat, inv_std } => {
                let gv = val(*g);
                let c = gv.len();
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for (grow, xrow) in gy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for k in 0..c {
                        dg[k] += grow[k] * xrow[k];
                        db[k] += grow[k];
                    }
                }
                let dxhat: Vec<T> = gy.iter().enumerate().map(|(k, &d)| d * gv[k % c]).collect();
                let dx = kernels::normalize_groups_backward(&dxhat, xhat, inv_std, c);
                vec![(*x, dx), (*g, dg), (*b, db)]
            }
            Op::InstanceNorm { x, g, b, xhat, inv_std } => {
                let gv = val(*g);
                let spatial = gy.len() / gv.len();
                let mut dg = Vec::with_capacity(gv.len());
                let mut db = Vec::with_capacity(gv.len());
                let mut dxhat = Vec::with_capacity(gy.len());
                for ((grow, xrow), &gamma) in gy.chunks_exact(spatial).zip(xhat.chunks_exact(spatial)).zip(gv) {
                    dg.push(grow.iter().zip(xrow).map(|(&d, &xh)| d * xh).sum());
                    db.push(grow.iter().copied().sum());
                    dxhat.extend(grow.iter().map(|&d| d * gamma));
                }
                let dx = kernels::normalize_groups_backward(&dxhat, xhat, inv_std, spatial);
                vec![(*x, dx), (*g, dg), (*b, db)]
            }
            Op::Resize { x, axis } => {
                let len = node.value.shape()[*axis];
                vec![(
                    *x,
                    kernels::resize_backward(gy, self.nodes[*x].value.shape(), *axis, len),
                )]
            }
        }
    }
}

fn strip_saved<T>(op: Op<T>) -> Op<T> {
    match op {
        Op::LayerNorm { x, g, b, .. } => Op::LayerNorm {
            x,
            g,
            b,
            xhat: Vec::new(),
            inv_std: Vec::new(),
        },
        Op::InstanceNorm { x, g, b, .. } => Op::InstanceNorm {
            x,
            g,
            b,
            xhat: Vec::new(),
            inv_std: Vec::new(),
        },
        other => other,
    }
}

/// Sums `g` over consecutive chunks of length `n` (the inverse of suffix
/// broadcasting).
fn fold_repeats<T: Scalar>(g: &[T], n: usize) -> Vec<T> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); n];
    for chunk in g.chunks_exact(n) {
        out.iter_mut().zip(chunk).for_each(|(o, &v)| *o += v);
    }
    out
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = T::from_f64(FRAC_1_SQRT_2PI) * (-half * x * x).exp();
    cdf + x * pdf
}

#[derive(Clone, Copy)]
struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
}

impl MatDims {
    fn new(sa: &[usize], sb: &[usize]) -> Option<Self> {
        let (ra, rb) = (sa.len(), sb.len());
        let (m, k) = (sa[ra - 2], sa[ra - 1]);
        let (k2, n) = (sb[rb - 2], sb[rb - 1]);
        if k != k2 {
            return None;
        }
        let (ba, bb) = (&sa[..ra - 2], &sb[..rb - 2]);
        let (a_batched, b_batched) = (!ba.is_empty(), !bb.is_empty());
        if a_batched && b_batched && ba != bb {
            return None;
        }
        let batch = if a_batched { numel(ba) } else { numel(bb) };
        Some(Self {
            batch,
            m,
            k,
            n,
            a_batched,
            b_batched,
        })
    }

    fn offsets(&self, i: usize) -> (usize, usize, usize) {
        let ao = if self.a_batched { i * self.m * self.k } else { 0 };
        let bo = if self.b_batched { i * self.k * self.n } else { 0 };
        (ao, bo, i * self.m * self.n)
    }
}

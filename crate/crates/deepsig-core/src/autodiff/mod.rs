//! Reverse-mode autodiff over [N, C, H, W] tensors.
//!
//! A `Tape` records each operation in insertion order; `backward` walks the
//! tape in reverse, accumulating gradients only along paths that reach a
//! gradient-requiring leaf. Every value is an `Array4`, scalars included
//! (shape [1,1,1,1]), which keeps the op set small and the bookkeeping flat.

mod kernels;

use ndarray::Array4;

use crate::num::Scalar;

pub use kernels::has_non_finite;

/// Index of a node on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op<F: Scalar> {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Div(VarId, VarId),
    Neg(VarId),
    AddScalar(VarId, F),
    MulScalar(VarId, F),
    Ln(VarId),
    Sigmoid(VarId),
    LeakyRelu(VarId, F),
    /// Clamp to [lo, hi]; straight_through passes gradients unchanged,
    /// otherwise they vanish outside the range.
    Clamp { x: VarId, lo: F, hi: F, straight_through: bool },
    /// x - sin(2 pi x) / (2 pi): a smooth surrogate for rounding.
    SoftRound(VarId),
    Conv2d { x: VarId, w: VarId, b: VarId, stride: usize, pad: usize },
    /// Per-channel valid correlation with a [C,1,kh,kw] kernel.
    DepthwiseValid { x: VarId, w: VarId },
    UpsampleNearest { x: VarId, factor: usize },
    /// Channel-axis concatenation.
    Concat(VarId, VarId),
    MeanAll(VarId),
    SumAll(VarId),
    /// Orthonormal 8x8 blockwise DCT over H, W (dims must be multiples of 8).
    Dct8 { x: VarId, inverse: bool },
    /// Per-pixel channel mix: y_o = sum_i mat[o][i] x_i + bias[o].
    PixelLinear { x: VarId, mat: [[F; 3]; 3] },
    /// Numerically stable mean BCE of logits against fixed targets.
    BceWithLogits { logits: VarId, target: VarId },
}

struct Node<F: Scalar> {
    value: Array4<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Array4<F> {
        &self.nodes[id.0].value
    }

    /// Scalar view of a [1,1,1,1] node.
    pub fn scalar(&self, id: VarId) -> F {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.len(), 1, "node is not scalar-shaped");
        v[[0, 0, 0, 0]]
    }

    pub fn leaf(&mut self, value: Array4<F>, requires_grad: bool) -> VarId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Re-enters a computed value as a fresh constant: a detach.
    pub fn constant(&mut self, value: Array4<F>) -> VarId {
        self.leaf(value, false)
    }

    // Non-finite forward values are deliberately not asserted here: they are
    // legitimate runtime data during training and handled by divergence
    // guards at the loss level.
    fn push(&mut self, value: Array4<F>, op: Op<F>, requires_grad: bool) -> VarId {
        self.nodes.push(Node { value, op, requires_grad });
        VarId(self.nodes.len() - 1)
    }

    fn requires(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    fn binary_same_shape(&mut self, a: VarId, b: VarId, op: Op<F>, f: impl Fn(F, F) -> F) -> VarId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.dim(), vb.dim(), "shape mismatch");
        let mut out = va.clone();
        ndarray::Zip::from(&mut out).and(vb).for_each(|o, &y| *o = f(*o, y));
        let req = self.requires(&[a, b]);
        self.push(out, op, req)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary_same_shape(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary_same_shape(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary_same_shape(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> VarId {
        self.binary_same_shape(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn neg(&mut self, a: VarId) -> VarId {
        let out = self.nodes[a.0].value.mapv(|x| -x);
        let req = self.requires(&[a]);
        self.push(out, Op::Neg(a), req)
    }

    pub fn add_scalar(&mut self, a: VarId, s: F) -> VarId {
        let out = self.nodes[a.0].value.mapv(|x| x + s);
        let req = self.requires(&[a]);
        self.push(out, Op::AddScalar(a, s), req)
    }

    pub fn mul_scalar(&mut self, a: VarId, s: F) -> VarId {
        let out = self.nodes[a.0].value.mapv(|x| x * s);
        let req = self.requires(&[a]);
        self.push(out, Op::MulScalar(a, s), req)
    }

    pub fn ln(&mut self, a: VarId) -> VarId {
        let out = self.nodes[a.0].value.mapv(|x| x.ln());
        let req = self.requires(&[a]);
        self.push(out, Op::Ln(a), req)
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let out = self.nodes[a.0].value.mapv(kernels::sigmoid);
        let req = self.requires(&[a]);
        self.push(out, Op::Sigmoid(a), req)
    }

    pub fn leaky_relu(&mut self, a: VarId, slope: F) -> VarId {
        let out = self.nodes[a.0].value.mapv(|x| if x > F::zero() { x } else { x * slope });
        let req = self.requires(&[a]);
        self.push(out, Op::LeakyRelu(a, slope), req)
    }

    pub fn clamp(&mut self, x: VarId, lo: F, hi: F, straight_through: bool) -> VarId {
        let out = self.nodes[x.0].value.mapv(|v| v.max(lo).min(hi));
        let req = self.requires(&[x]);
        self.push(out, Op::Clamp { x, lo, hi, straight_through }, req)
    }

    pub fn soft_round(&mut self, a: VarId) -> VarId {
        let two_pi = F::from_f64_c(std::f64::consts::TAU);
        let out = self.nodes[a.0].value.mapv(|x| x - (x * two_pi).sin() / two_pi);
        let req = self.requires(&[a]);
        self.push(out, Op::SoftRound(a), req)
    }

    pub fn conv2d(&mut self, x: VarId, w: VarId, b: VarId, stride: usize, pad: usize) -> VarId {
        let out = kernels::conv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            stride,
            pad,
        );
        let req = self.requires(&[x, w, b]);
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, req)
    }

    pub fn depthwise_valid(&mut self, x: VarId, w: VarId) -> VarId {
        let out = kernels::depthwise_valid_forward(&self.nodes[x.0].value, &self.nodes[w.0].value);
        let req = self.requires(&[x, w]);
        self.push(out, Op::DepthwiseValid { x, w }, req)
    }

    pub fn upsample_nearest(&mut self, x: VarId, factor: usize) -> VarId {
        let out = kernels::upsample_nearest(&self.nodes[x.0].value, factor);
        let req = self.requires(&[x]);
        self.push(out, Op::UpsampleNearest { x, factor }, req)
    }

    pub fn concat(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n1, c1, h1, w1) = va.dim();
        let (n2, c2, h2, w2) = vb.dim();
        assert_eq!((n1, h1, w1), (n2, h2, w2), "concat: non-channel dims differ");
        // Assembled by hand: ndarray's concatenate may return a non-standard
        // layout, which the conv kernels reject.
        let mut out = Array4::zeros((n1, c1 + c2, h1, w1));
        out.slice_mut(ndarray::s![.., ..c1, .., ..]).assign(va);
        out.slice_mut(ndarray::s![.., c1.., .., ..]).assign(vb);
        let req = self.requires(&[a, b]);
        self.push(out, Op::Concat(a, b), req)
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let v = &self.nodes[a.0].value;
        let m = v.sum() / F::from_usize_c(v.len());
        let req = self.requires(&[a]);
        self.push(Array4::from_elem((1, 1, 1, 1), m), Op::MeanAll(a), req)
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let s = self.nodes[a.0].value.sum();
        let req = self.requires(&[a]);
        self.push(Array4::from_elem((1, 1, 1, 1), s), Op::SumAll(a), req)
    }

    pub fn dct8(&mut self, x: VarId, inverse: bool) -> VarId {
        let out = kernels::dct8_apply(&self.nodes[x.0].value, inverse);
        let req = self.requires(&[x]);
        self.push(out, Op::Dct8 { x, inverse }, req)
    }

    pub fn pixel_linear(&mut self, x: VarId, mat: [[F; 3]; 3], bias: [F; 3]) -> VarId {
        let out = kernels::pixel_linear_forward(&self.nodes[x.0].value, &mat, &bias);
        let req = self.requires(&[x]);
        self.push(out, Op::PixelLinear { x, mat }, req)
    }

    pub fn bce_with_logits(&mut self, logits: VarId, target: VarId) -> VarId {
        let (vl, vt) = (&self.nodes[logits.0].value, &self.nodes[target.0].value);
        assert_eq!(vl.dim(), vt.dim(), "bce: shape mismatch");
        // mean over elements of max(z,0) - z t + ln(1 + exp(-|z|))
        let mut acc = F::zero();
        ndarray::Zip::from(vl).and(vt).for_each(|&z, &t| {
            acc = acc + z.max(F::zero()) - z * t + (F::one() + (-z.abs()).exp()).ln();
        });
        let m = acc / F::from_usize_c(vl.len());
        let req = self.requires(&[logits]);
        self.push(Array4::from_elem((1, 1, 1, 1), m), Op::BceWithLogits { logits, target }, req)
    }

    /// Mean squared error between two same-shape nodes.
    pub fn mse(&mut self, a: VarId, b: VarId) -> VarId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Gradients of a scalar root with respect to every gradient-requiring
    /// node; indexable by VarId.
    pub fn backward(&self, root: VarId) -> Gradients<F> {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Array4<F>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array4::from_elem((1, 1, 1, 1), F::one()));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn add_grad(&self, grads: &mut [Option<Array4<F>>], id: VarId, delta: Array4<F>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.zip_mut_with(&delta, |a, &b| *a = *a + b),
            slot => *slot = Some(delta),
        }
    }

    fn accumulate(&self, i: usize, g: &Array4<F>, grads: &mut [Option<Array4<F>>]) {
        let val = |id: VarId| &self.nodes[id.0].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                self.add_grad(grads, *a, g * val(*b));
                self.add_grad(grads, *b, g * val(*a));
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                self.add_grad(grads, *a, g / vb);
                let mut d = g * val(*a);
                ndarray::Zip::from(&mut d).and(vb).for_each(|x, &y| *x = -*x / (y * y));
                self.add_grad(grads, *b, d);
            }
            Op::Neg(a) => self.add_grad(grads, *a, g.mapv(|x| -x)),
            Op::AddScalar(a, _) => self.add_grad(grads, *a, g.clone()),
            Op::MulScalar(a, s) => {
                let s = *s;
                self.add_grad(grads, *a, g.mapv(|x| x * s));
            }
            Op::Ln(a) => self.add_grad(grads, *a, g / val(*a)),
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(y).for_each(|x, &s| *x = *x * s * (F::one() - s));
                self.add_grad(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let mut d = g.clone();
                ndarray::Zip::from(&mut d)
                    .and(val(*a))
                    .for_each(|x, &v| *x = if v > F::zero() { *x } else { *x * slope });
                self.add_grad(grads, *a, d);
            }
            Op::Clamp { x, lo, hi, straight_through } => {
                if *straight_through {
                    self.add_grad(grads, *x, g.clone());
                } else {
                    let (lo, hi) = (*lo, *hi);
                    let mut d = g.clone();
                    ndarray::Zip::from(&mut d).and(val(*x)).for_each(|gx, &v| {
                        if v < lo || v > hi {
                            *gx = F::zero();
                        }
                    });
                    self.add_grad(grads, *x, d);
                }
            }
            Op::SoftRound(a) => {
                let two_pi = F::from_f64_c(std::f64::consts::TAU);
                let mut d = g.clone();
                ndarray::Zip::from(&mut d)
                    .and(val(*a))
                    .for_each(|x, &v| *x = *x * (F::one() - (v * two_pi).cos()));
                self.add_grad(grads, *a, d);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(val(*x), val(*w), g, *stride, *pad);
                self.add_grad(grads, *x, dx);
                self.add_grad(grads, *w, dw);
                self.add_grad(grads, *b, db);
            }
            Op::DepthwiseValid { x, w } => {
                let (dx, dw) = kernels::depthwise_valid_backward(val(*x), val(*w), g);
                self.add_grad(grads, *x, dx);
                self.add_grad(grads, *w, dw);
            }
            Op::UpsampleNearest { x, factor } => {
                self.add_grad(grads, *x, kernels::upsample_nearest_backward(g, *factor));
            }
            Op::Concat(a, b) => {
                let ca = val(*a).dim().1;
                let ga = g.slice(ndarray::s![.., ..ca, .., ..]).to_owned();
                let gb = g.slice(ndarray::s![.., ca.., .., ..]).to_owned();
                self.add_grad(grads, *a, ga);
                self.add_grad(grads, *b, gb);
            }
            Op::MeanAll(a) => {
                let v = val(*a);
                let s = g[[0, 0, 0, 0]] / F::from_usize_c(v.len());
                self.add_grad(grads, *a, Array4::from_elem(v.dim(), s));
            }
            Op::SumAll(a) => {
                let s = g[[0, 0, 0, 0]];
                self.add_grad(grads, *a, Array4::from_elem(val(*a).dim(), s));
            }
            Op::Dct8 { x, inverse } => {
                // Orthonormal transform: adjoint = the opposite direction.
                self.add_grad(grads, *x, kernels::dct8_apply(g, !inverse));
            }
            Op::PixelLinear { x, mat } => {
                self.add_grad(grads, *x, kernels::pixel_linear_backward(g, mat));
            }
            Op::BceWithLogits { logits, target } => {
                let (vl, vt) = (val(*logits), val(*target));
                let scale = g[[0, 0, 0, 0]] / F::from_usize_c(vl.len());
                let mut d = vl.clone();
                ndarray::Zip::from(&mut d)
                    .and(vt)
                    .for_each(|z, &t| *z = (kernels::sigmoid(*z) - t) * scale);
                self.add_grad(grads, *logits, d);
            }
        }
    }
}

pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Array4<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient for a node; zero-shaped None means the node did not
    /// contribute to the root (or did not require gradients).
    pub fn get(&self, id: VarId) -> Option<&Array4<F>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: VarId) -> Option<Array4<F>> {
        self.grads[id.0].take()
    }
}

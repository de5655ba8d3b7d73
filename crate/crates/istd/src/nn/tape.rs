//! Reverse-mode automatic differentiation over dense 4-D arrays.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes; every value is
//! an `Array4` with layout `(batch, channels, height, width)`. Vectors ride
//! along with singleton axes (`(1, C, 1, 1)` biases, `(B, C, 1, 1)` pooled
//! descriptors) and scalars as `(1, 1, 1, 1)`, so a single node type covers
//! the whole network including its loss. [`Tape::backward`] walks the list in
//! reverse and accumulates gradients; gradients of bound parameters are copied
//! back into the [`ParamStore`] with [`Tape::accumulate_param_grads`].
//!
//! The operation set is deliberately minimal: exactly what the unfolded
//! decomposition network and its training loss need.

use ndarray::{Array2, Array4, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::param::ParamStore;
use crate::nn::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Batch statistics produced by a train-mode batchnorm node; the caller folds
/// them into the running buffers.
#[derive(Debug, Clone)]
pub struct BatchStats<F> {
    pub mean: Array4<F>,
    pub var: Array4<F>,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddConst(Var),
    ScaleConst(Var, F),
    /// Broadcast-multiply by a `(1,1,1,1)` scalar variable.
    ScaleBy {
        x: Var,
        s: Var,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Array4<F>,
        inv_std: Array4<F>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        inv_std: Array4<F>,
        running_mean: Array4<F>,
    },
    Relu(Var),
    Sigmoid(Var),
    GlobalAvgPool(Var),
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    /// `(B,C,H,W) * (B,C,1,1)` per-channel scaling.
    ChannelScale {
        features: Var,
        scales: Var,
    },
    SumPerImage(Var),
    MeanAll(Var),
}

#[derive(Debug)]
struct Node<F> {
    value: Array4<F>,
    op: Op<F>,
}

/// One recorded forward pass.
#[derive(Debug)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    bindings: Vec<(usize, usize)>,
    grads: Vec<Option<Array4<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bindings: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Array4<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array4<F> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Array4<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Record a constant input.
    pub fn leaf(&mut self, value: Array4<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Record a parameter value as a leaf and remember the binding so its
    /// gradient can be written back after `backward`.
    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> Result<Var> {
        let idx = store.position(name)?;
        let v = self.push(store.by_index(idx).value.clone(), Op::Leaf);
        self.bindings.push((v.0, idx));
        Ok(v)
    }

    fn require_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.value(a).raw_dim();
        let sb = self.value(b).raw_dim();
        if sa != sb {
            for (axis, name) in ["batch", "channel", "height", "width"].iter().enumerate() {
                if sa[axis] != sb[axis] {
                    return Err(Error::ShapeMismatch {
                        op,
                        axis: name,
                        expected: sa[axis],
                        actual: sb[axis],
                    });
                }
            }
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_same_shape("add", a, b)?;
        let value = &self.value(a).clone() + self.value(b);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_same_shape("sub", a, b)?;
        let value = &self.value(a).clone() - self.value(b);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_same_shape("mul", a, b)?;
        let value = &self.value(a).clone() * self.value(b);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_same_shape("div", a, b)?;
        let value = &self.value(a).clone() / self.value(b);
        Ok(self.push(value, Op::Div(a, b)))
    }

    pub fn add_const(&mut self, a: Var, c: F) -> Var {
        let value = self.value(a).mapv(|x| x + c);
        self.push(value, Op::AddConst(a))
    }

    pub fn scale_const(&mut self, a: Var, c: F) -> Var {
        let value = self.value(a).mapv(|x| x * c);
        self.push(value, Op::ScaleConst(a, c))
    }

    /// Multiply a tensor by a `(1,1,1,1)` scalar variable (a learnable step
    /// size such as the per-stage correction weights).
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "scale_by",
                axis: "channel",
                expected: 1,
                actual: self.value(s).len(),
            });
        }
        let sv = self.value(s)[(0, 0, 0, 0)];
        let value = self.value(x).mapv(|v| v * sv);
        Ok(self.push(value, Op::ScaleBy { x, s }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| if x > F::zero() { x } else { F::zero() });
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = F::one();
        let value = self.value(a).mapv(|x| one / (one + (-x).exp()));
        self.push(value, Op::Sigmoid(a))
    }

    /// 3x3 same-padding stride-1 convolution.
    ///
    /// `kernel` is `(out_c, in_c, 3, 3)`, `bias` is `(1, out_c, 1, 1)`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        let b = self.value(bias);
        let (out_c, in_c, kh, kw) = k.dim();
        if kh != 3 || kw != 3 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                axis: "height",
                expected: 3,
                actual: kh.max(kw),
            });
        }
        if x.dim().1 != in_c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                axis: "channel",
                expected: in_c,
                actual: x.dim().1,
            });
        }
        if b.dim() != (1, out_c, 1, 1) {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                axis: "channel",
                expected: out_c,
                actual: b.dim().1,
            });
        }
        let value = conv2d_forward(x, k, b);
        Ok(self.push(value, Op::Conv2d { input, kernel, bias }))
    }

    /// Train-mode batch normalization over the `(batch, height, width)` axes
    /// of each channel, using biased batch variance. Returns the batch
    /// statistics so the caller can update running buffers.
    pub fn batchnorm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: F,
    ) -> Result<(Var, BatchStats<F>)> {
        if eps <= F::zero() {
            return Err(Error::InvalidArgument(format!(
                "batchnorm eps must be positive, got {eps}"
            )));
        }
        let x = self.value(input);
        let (bsz, c, h, w) = x.dim();
        self.check_per_channel("batchnorm", gamma, c)?;
        self.check_per_channel("batchnorm", beta, c)?;
        let n = F::from_usize(bsz * h * w);
        let mut mean = Array4::<F>::zeros((1, c, 1, 1));
        let mut var = Array4::<F>::zeros((1, c, 1, 1));
        for ch in 0..c {
            let plane = x.index_axis(Axis(1), ch);
            let m = plane.iter().copied().sum::<F>() / n;
            let v = plane.iter().map(|&x| (x - m) * (x - m)).sum::<F>() / n;
            mean[(0, ch, 0, 0)] = m;
            var[(0, ch, 0, 0)] = v;
        }
        let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut value = x.clone();
        for ch in 0..c {
            let m = mean[(0, ch, 0, 0)];
            let is = inv_std[(0, ch, 0, 0)];
            let gc = g[(0, ch, 0, 0)];
            let bc = b[(0, ch, 0, 0)];
            value
                .index_axis_mut(Axis(1), ch)
                .mapv_inplace(|x| (x - m) * is * gc + bc);
        }
        let stats = BatchStats {
            mean: mean.clone(),
            var,
        };
        let v = self.push(
            value,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            },
        );
        Ok((v, stats))
    }

    /// Eval-mode batch normalization: a deterministic per-channel affine map
    /// built from the running statistics.
    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Array4<F>,
        running_var: &Array4<F>,
        eps: F,
    ) -> Result<Var> {
        if eps <= F::zero() {
            return Err(Error::InvalidArgument(format!(
                "batchnorm eps must be positive, got {eps}"
            )));
        }
        let x = self.value(input);
        let c = x.dim().1;
        self.check_per_channel("batchnorm", gamma, c)?;
        self.check_per_channel("batchnorm", beta, c)?;
        if running_mean.dim() != (1, c, 1, 1) || running_var.dim() != (1, c, 1, 1) {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                axis: "channel",
                expected: c,
                actual: running_mean.dim().1,
            });
        }
        let inv_std = running_var.mapv(|v| F::one() / (v + eps).sqrt());
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut value = x.clone();
        for ch in 0..c {
            let m = running_mean[(0, ch, 0, 0)];
            let is = inv_std[(0, ch, 0, 0)];
            let gc = g[(0, ch, 0, 0)];
            let bc = b[(0, ch, 0, 0)];
            value
                .index_axis_mut(Axis(1), ch)
                .mapv_inplace(|x| (x - m) * is * gc + bc);
        }
        Ok(self.push(
            value,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                inv_std,
                running_mean: running_mean.clone(),
            },
        ))
    }

    fn check_per_channel(&self, op: &'static str, v: Var, channels: usize) -> Result<()> {
        if self.value(v).dim() != (1, channels, 1, 1) {
            return Err(Error::ShapeMismatch {
                op,
                axis: "channel",
                expected: channels,
                actual: self.value(v).dim().1,
            });
        }
        Ok(())
    }

    /// Mean over each `(height, width)` plane: `(B,C,H,W) -> (B,C,1,1)`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (b, c, h, w) = x.dim();
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument(
                "global_avg_pool needs a non-empty spatial extent".into(),
            ));
        }
        let n = F::from_usize(h * w);
        let mut value = Array4::<F>::zeros((b, c, 1, 1));
        for bi in 0..b {
            for ci in 0..c {
                let plane_sum = x
                    .index_axis(Axis(0), bi)
                    .index_axis(Axis(0), ci)
                    .iter()
                    .copied()
                    .sum::<F>();
                value[(bi, ci, 0, 0)] = plane_sum / n;
            }
        }
        Ok(self.push(value, Op::GlobalAvgPool(a)))
    }

    /// Affine map on pooled descriptors: input `(B, CI, 1, 1)`, weight
    /// `(CO, CI, 1, 1)`, bias `(1, CO, 1, 1)` giving `(B, CO, 1, 1)`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (bsz, ci, xh, xw) = x.dim();
        let (co, wi, _, _) = w.dim();
        if xh != 1 || xw != 1 {
            return Err(Error::ShapeMismatch {
                op: "dense",
                axis: "height",
                expected: 1,
                actual: xh.max(xw),
            });
        }
        if wi != ci {
            return Err(Error::ShapeMismatch {
                op: "dense",
                axis: "channel",
                expected: wi,
                actual: ci,
            });
        }
        if b.dim() != (1, co, 1, 1) {
            return Err(Error::ShapeMismatch {
                op: "dense",
                axis: "channel",
                expected: co,
                actual: b.dim().1,
            });
        }
        let x2 = as_matrix(x, bsz, ci);
        let w2 = as_matrix(w, co, ci);
        let mut out2 = x2.dot(&w2.t());
        for mut row in out2.rows_mut() {
            for (o, out) in row.iter_mut().enumerate() {
                *out = *out + b[(0, o, 0, 0)];
            }
        }
        let value = out2
            .into_shape_with_order((bsz, co, 1, 1))
            .expect("matmul result is contiguous");
        Ok(self.push(value, Op::Dense { input, weight, bias }))
    }

    /// Scale each channel plane by a per-(batch, channel) factor:
    /// `(B,C,H,W) * (B,C,1,1)`.
    pub fn channel_scale(&mut self, features: Var, scales: Var) -> Result<Var> {
        let f = self.value(features);
        let s = self.value(scales);
        let (b, c, _, _) = f.dim();
        if s.dim() != (b, c, 1, 1) {
            return Err(Error::ShapeMismatch {
                op: "channel_scale",
                axis: "channel",
                expected: c,
                actual: s.dim().1,
            });
        }
        let mut value = f.clone();
        for bi in 0..b {
            for ci in 0..c {
                let sv = s[(bi, ci, 0, 0)];
                value
                    .index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), ci)
                    .mapv_inplace(|x| x * sv);
            }
        }
        Ok(self.push(value, Op::ChannelScale { features, scales }))
    }

    /// Sum over `(channel, height, width)` per batch item: `-> (B,1,1,1)`.
    pub fn sum_per_image(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let b = x.dim().0;
        let mut value = Array4::<F>::zeros((b, 1, 1, 1));
        for bi in 0..b {
            value[(bi, 0, 0, 0)] = x.index_axis(Axis(0), bi).iter().copied().sum::<F>();
        }
        self.push(value, Op::SumPerImage(a))
    }

    /// Mean over every element: `-> (1,1,1,1)`.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = F::from_usize(x.len());
        let total = x.iter().copied().sum::<F>() / n;
        let value = Array4::from_elem((1, 1, 1, 1), total);
        self.push(value, Op::MeanAll(a))
    }

    /// Reverse pass from a scalar value. Gradients of every reached node are
    /// retained and can be read with [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward target must be a scalar, got {} elements",
                self.value(loss).len()
            )));
        }
        let mut grads: Vec<Option<Array4<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array4::from_elem((1, 1, 1, 1), F::one()));

        for i in (0..=loss.0).rev() {
            let (before, at) = grads.split_at_mut(i);
            let Some(g) = at[0].as_ref() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut before[a.0], g.clone());
                    acc(&mut before[b.0], g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut before[a.0], g.clone());
                    acc(&mut before[b.0], g.mapv(|x| -x));
                }
                Op::Mul(a, b) => {
                    let da = g * &self.nodes[b.0].value;
                    let db = g * &self.nodes[a.0].value;
                    acc(&mut before[a.0], da);
                    acc(&mut before[b.0], db);
                }
                Op::Div(a, b) => {
                    let bv = &self.nodes[b.0].value;
                    let da = g / bv;
                    let db = Zip::from(g)
                        .and(&self.nodes[a.0].value)
                        .and(bv)
                        .map_collect(|&g, &a, &b| -g * a / (b * b));
                    acc(&mut before[a.0], da);
                    acc(&mut before[b.0], db);
                }
                Op::AddConst(a) => acc(&mut before[a.0], g.clone()),
                Op::ScaleConst(a, c) => acc(&mut before[a.0], g.mapv(|x| x * *c)),
                Op::ScaleBy { x, s } => {
                    let sv = self.nodes[s.0].value[(0, 0, 0, 0)];
                    let dx = g.mapv(|v| v * sv);
                    let ds = Zip::from(g)
                        .and(&self.nodes[x.0].value)
                        .fold(F::zero(), |acc, &g, &x| acc + g * x);
                    acc(&mut before[x.0], dx);
                    acc(&mut before[s.0], Array4::from_elem((1, 1, 1, 1), ds));
                }
                Op::Relu(a) => {
                    let dx = Zip::from(g)
                        .and(&self.nodes[a.0].value)
                        .map_collect(|&g, &x| if x > F::zero() { g } else { F::zero() });
                    acc(&mut before[a.0], dx);
                }
                Op::Sigmoid(a) => {
                    let dx = Zip::from(g)
                        .and(&node.value)
                        .map_collect(|&g, &y| g * y * (F::one() - y));
                    acc(&mut before[a.0], dx);
                }
                Op::Conv2d { input, kernel, bias } => {
                    let (dx, dk, db) = conv2d_backward(
                        &self.nodes[input.0].value,
                        &self.nodes[kernel.0].value,
                        g,
                    );
                    acc(&mut before[input.0], dx);
                    acc(&mut before[kernel.0], dk);
                    acc(&mut before[bias.0], db);
                }
                Op::BatchNormTrain {
                    input,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let x = &self.nodes[input.0].value;
                    let gv = &self.nodes[gamma.0].value;
                    let (bsz, c, h, w) = x.dim();
                    let n = F::from_usize(bsz * h * w);
                    let mut dx = Array4::<F>::zeros(x.raw_dim());
                    let mut dgamma = Array4::<F>::zeros((1, c, 1, 1));
                    let mut dbeta = Array4::<F>::zeros((1, c, 1, 1));
                    for ch in 0..c {
                        let m = mean[(0, ch, 0, 0)];
                        let is = inv_std[(0, ch, 0, 0)];
                        let gc = gv[(0, ch, 0, 0)];
                        let mut sum_g = F::zero();
                        let mut sum_gx = F::zero();
                        for bi in 0..bsz {
                            for yi in 0..h {
                                for xi in 0..w {
                                    let gi = g[(bi, ch, yi, xi)];
                                    let xh = (x[(bi, ch, yi, xi)] - m) * is;
                                    sum_g = sum_g + gi;
                                    sum_gx = sum_gx + gi * xh;
                                }
                            }
                        }
                        dgamma[(0, ch, 0, 0)] = sum_gx;
                        dbeta[(0, ch, 0, 0)] = sum_g;
                        let mean_g = sum_g / n;
                        let mean_gx = sum_gx / n;
                        for bi in 0..bsz {
                            for yi in 0..h {
                                for xi in 0..w {
                                    let gi = g[(bi, ch, yi, xi)];
                                    let xh = (x[(bi, ch, yi, xi)] - m) * is;
                                    dx[(bi, ch, yi, xi)] = gc * is * (gi - mean_g - xh * mean_gx);
                                }
                            }
                        }
                    }
                    acc(&mut before[input.0], dx);
                    acc(&mut before[gamma.0], dgamma);
                    acc(&mut before[beta.0], dbeta);
                }
                Op::BatchNormEval {
                    input,
                    gamma,
                    beta,
                    inv_std,
                    running_mean,
                } => {
                    let x = &self.nodes[input.0].value;
                    let gv = &self.nodes[gamma.0].value;
                    let (bsz, c, h, w) = x.dim();
                    let mut dx = Array4::<F>::zeros(x.raw_dim());
                    let mut dgamma = Array4::<F>::zeros((1, c, 1, 1));
                    let mut dbeta = Array4::<F>::zeros((1, c, 1, 1));
                    for ch in 0..c {
                        let m = running_mean[(0, ch, 0, 0)];
                        let is = inv_std[(0, ch, 0, 0)];
                        let gc = gv[(0, ch, 0, 0)];
                        let mut sum_g = F::zero();
                        let mut sum_gx = F::zero();
                        for bi in 0..bsz {
                            for yi in 0..h {
                                for xi in 0..w {
                                    let gi = g[(bi, ch, yi, xi)];
                                    sum_g = sum_g + gi;
                                    sum_gx = sum_gx + gi * (x[(bi, ch, yi, xi)] - m) * is;
                                    dx[(bi, ch, yi, xi)] = gi * gc * is;
                                }
                            }
                        }
                        dgamma[(0, ch, 0, 0)] = sum_gx;
                        dbeta[(0, ch, 0, 0)] = sum_g;
                    }
                    acc(&mut before[input.0], dx);
                    acc(&mut before[gamma.0], dgamma);
                    acc(&mut before[beta.0], dbeta);
                }
                Op::GlobalAvgPool(a) => {
                    let (bsz, c, h, w) = self.nodes[a.0].value.dim();
                    let n = F::from_usize(h * w);
                    let mut dx = Array4::<F>::zeros((bsz, c, h, w));
                    for bi in 0..bsz {
                        for ci in 0..c {
                            let gv = g[(bi, ci, 0, 0)] / n;
                            dx.index_axis_mut(Axis(0), bi)
                                .index_axis_mut(Axis(0), ci)
                                .fill(gv);
                        }
                    }
                    acc(&mut before[a.0], dx);
                }
                Op::Dense { input, weight, bias } => {
                    let x = &self.nodes[input.0].value;
                    let w = &self.nodes[weight.0].value;
                    let (bsz, ci, _, _) = x.dim();
                    let (co, _, _, _) = w.dim();
                    let g2 = as_matrix(g, bsz, co);
                    let x2 = as_matrix(x, bsz, ci);
                    let w2 = as_matrix(w, co, ci);
                    let dx = g2
                        .dot(&w2)
                        .into_shape_with_order((bsz, ci, 1, 1))
                        .expect("contiguous");
                    let dw = g2
                        .t()
                        .dot(&x2)
                        .into_shape_with_order((co, ci, 1, 1))
                        .expect("contiguous");
                    let mut db = Array4::<F>::zeros((1, co, 1, 1));
                    for o in 0..co {
                        db[(0, o, 0, 0)] = g2.column(o).iter().copied().sum::<F>();
                    }
                    acc(&mut before[input.0], dx);
                    acc(&mut before[weight.0], dw);
                    acc(&mut before[bias.0], db);
                }
                Op::ChannelScale { features, scales } => {
                    let f = &self.nodes[features.0].value;
                    let s = &self.nodes[scales.0].value;
                    let (bsz, c, _, _) = f.dim();
                    let mut df = g.clone();
                    let mut ds = Array4::<F>::zeros((bsz, c, 1, 1));
                    for bi in 0..bsz {
                        for ci in 0..c {
                            let sv = s[(bi, ci, 0, 0)];
                            let mut dsum = F::zero();
                            let gp = g.index_axis(Axis(0), bi);
                            let gp = gp.index_axis(Axis(0), ci);
                            let fp = f.index_axis(Axis(0), bi);
                            let fp = fp.index_axis(Axis(0), ci);
                            for (gv, fv) in gp.iter().zip(fp.iter()) {
                                dsum = dsum + *gv * *fv;
                            }
                            ds[(bi, ci, 0, 0)] = dsum;
                            df.index_axis_mut(Axis(0), bi)
                                .index_axis_mut(Axis(0), ci)
                                .mapv_inplace(|x| x * sv);
                        }
                    }
                    acc(&mut before[features.0], df);
                    acc(&mut before[scales.0], ds);
                }
                Op::SumPerImage(a) => {
                    let (bsz, c, h, w) = self.nodes[a.0].value.dim();
                    let mut dx = Array4::<F>::zeros((bsz, c, h, w));
                    for bi in 0..bsz {
                        dx.index_axis_mut(Axis(0), bi).fill(g[(bi, 0, 0, 0)]);
                    }
                    acc(&mut before[a.0], dx);
                }
                Op::MeanAll(a) => {
                    let src = &self.nodes[a.0].value;
                    let gv = g[(0, 0, 0, 0)] / F::from_usize(src.len());
                    acc(&mut before[a.0], Array4::from_elem(src.raw_dim(), gv));
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Add the gradients of bound parameters into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<F>) {
        for &(node, pidx) in &self.bindings {
            if let Some(g) = self.grads.get(node).and_then(|g| g.as_ref()) {
                let p = store.by_index_mut(pidx);
                p.grad = &p.grad + g;
            }
        }
    }
}

fn acc<F: Scalar>(slot: &mut Option<Array4<F>>, delta: Array4<F>) {
    match slot {
        Some(g) => *g = &*g + &delta,
        None => *slot = Some(delta),
    }
}

fn as_matrix<F: Scalar>(x: &Array4<F>, rows: usize, cols: usize) -> ArrayView2<'_, F> {
    x.view()
        .into_shape_with_order((rows, cols))
        .expect("standard layout")
}

/// Write the 3x3/pad-1 im2col of one `(C, H, W)` sample into `cols`,
/// laid out `(C*9, H*W)` row-major.
fn im2col<F: Scalar>(sample: &[F], c: usize, h: usize, w: usize, cols: &mut [F]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &sample[ci * hw..(ci + 1) * hw];
        for ky in 0..3usize {
            let dy = ky as isize - 1;
            for kx in 0..3usize {
                let dx = kx as isize - 1;
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                row.iter_mut().for_each(|v| *v = F::zero());
                let y_lo = (-dy).max(0) as usize;
                let y_hi = (h as isize - dy).min(h as isize) as usize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in y_lo..y_hi {
                    let sy = (y as isize + dy) as usize;
                    let sx = (x_lo as isize + dx) as usize;
                    let len = x_hi - x_lo;
                    row[y * w + x_lo..y * w + x_lo + len]
                        .copy_from_slice(&plane[sy * w + sx..sy * w + sx + len]);
                }
            }
        }
    }
}

/// Scatter-add the `(C*9, H*W)` column gradient back onto a `(C, H, W)` plane.
fn col2im<F: Scalar>(cols: &[F], c: usize, h: usize, w: usize, out: &mut [F]) {
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..3usize {
            let dy = ky as isize - 1;
            for kx in 0..3usize {
                let dx = kx as isize - 1;
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                let y_lo = (-dy).max(0) as usize;
                let y_hi = (h as isize - dy).min(h as isize) as usize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in y_lo..y_hi {
                    let sy = (y as isize + dy) as usize;
                    let sx = (x_lo as isize + dx) as usize;
                    let len = x_hi - x_lo;
                    let dst = &mut out[ci * hw + sy * w + sx..ci * hw + sy * w + sx + len];
                    let src = &row[y * w + x_lo..y * w + x_lo + len];
                    for (d, s) in dst.iter_mut().zip(src.iter()) {
                        *d = *d + *s;
                    }
                }
            }
        }
    }
}

fn conv2d_forward<F: Scalar>(x: &Array4<F>, k: &Array4<F>, bias: &Array4<F>) -> Array4<F> {
    let (bsz, in_c, h, w) = x.dim();
    let out_c = k.dim().0;
    let hw = h * w;
    let wmat = as_matrix(k, out_c, in_c * 9);
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array4::<F>::zeros((bsz, out_c, h, w));
    let bias_vec: Vec<F> = (0..out_c).map(|o| bias[(0, o, 0, 0)]).collect();
    {
        let out_slice = out.as_slice_mut().expect("standard layout");
        // Samples are independent: parallelize over the batch; each worker
        // writes a disjoint output slice, so results are deterministic.
        out_slice
            .par_chunks_mut(out_c * hw)
            .zip(xs.par_chunks(in_c * hw))
            .for_each(|(out_b, x_b)| {
                let mut cols = vec![F::zero(); in_c * 9 * hw];
                im2col(x_b, in_c, h, w, &mut cols);
                let cols_m = ndarray::ArrayView2::from_shape((in_c * 9, hw), &cols)
                    .expect("cols layout");
                let y = wmat.dot(&cols_m);
                let ys = y.as_slice().expect("contiguous");
                for o in 0..out_c {
                    let b = bias_vec[o];
                    for (dst, src) in out_b[o * hw..(o + 1) * hw].iter_mut().zip(&ys[o * hw..]) {
                        *dst = *src + b;
                    }
                }
            });
    }
    out
}

fn conv2d_backward<F: Scalar>(
    x: &Array4<F>,
    k: &Array4<F>,
    g: &Array4<F>,
) -> (Array4<F>, Array4<F>, Array4<F>) {
    let (bsz, in_c, h, w) = x.dim();
    let out_c = k.dim().0;
    let hw = h * w;
    let wmat = as_matrix(k, out_c, in_c * 9);
    let xs = x.as_slice().expect("standard layout");
    let gs = g.as_slice().expect("standard layout");

    let mut dx = Array4::<F>::zeros((bsz, in_c, h, w));
    let per_sample: Vec<(Array2<F>, Vec<F>)> = {
        let dx_slice = dx.as_slice_mut().expect("standard layout");
        dx_slice
            .par_chunks_mut(in_c * hw)
            .zip(xs.par_chunks(in_c * hw))
            .zip(gs.par_chunks(out_c * hw))
            .map(|((dx_b, x_b), g_b)| {
                let g_m = ndarray::ArrayView2::from_shape((out_c, hw), g_b).expect("layout");
                // input gradient: scatter the column gradient back
                let cols_grad = wmat.t().dot(&g_m);
                col2im(
                    cols_grad.as_slice().expect("contiguous"),
                    in_c,
                    h,
                    w,
                    dx_b,
                );
                // weight gradient contribution of this sample
                let mut cols = vec![F::zero(); in_c * 9 * hw];
                im2col(x_b, in_c, h, w, &mut cols);
                let cols_m =
                    ndarray::ArrayView2::from_shape((in_c * 9, hw), &cols).expect("layout");
                let dw_b = g_m.dot(&cols_m.t());
                let db_b: Vec<F> = (0..out_c)
                    .map(|o| g_b[o * hw..(o + 1) * hw].iter().copied().sum::<F>())
                    .collect();
                (dw_b, db_b)
            })
            .collect()
    };

    // Fixed-order reduction keeps float accumulation deterministic.
    let mut dk2 = Array2::<F>::zeros((out_c, in_c * 9));
    let mut db = Array4::<F>::zeros((1, out_c, 1, 1));
    for (dw_b, db_b) in per_sample {
        dk2 = dk2 + dw_b;
        for (o, v) in db_b.into_iter().enumerate() {
            db[(0, o, 0, 0)] = db[(0, o, 0, 0)] + v;
        }
    }
    let dk = dk2
        .into_shape_with_order((out_c, in_c, 3, 3))
        .expect("contiguous");
    (dx, dk, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    /// Direct nested-loop convolution, the independent oracle for conv2d.
    pub(crate) fn conv2d_reference(
        x: &Array4<f64>,
        k: &Array4<f64>,
        bias: &Array4<f64>,
    ) -> Array4<f64> {
        let (bsz, in_c, h, w) = x.dim();
        let out_c = k.dim().0;
        let mut out = Array4::<f64>::zeros((bsz, out_c, h, w));
        for b in 0..bsz {
            for o in 0..out_c {
                for y in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut acc = bias[(0, o, 0, 0)];
                        for c in 0..in_c {
                            for ky in -1..=1isize {
                                for kx in -1..=1isize {
                                    let sy = y + ky;
                                    let sx = xx + kx;
                                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                        acc += x[(b, c, sy as usize, sx as usize)]
                                            * k[(o, c, (ky + 1) as usize, (kx + 1) as usize)];
                                    }
                                }
                            }
                        }
                        out[(b, o, y as usize, xx as usize)] = acc;
                    }
                }
            }
        }
        out
    }

    fn rand_array(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        use rand::Rng;
        let mut rng = crate::nn::rng::rng_for(seed, "tape-test", 0);
        Array4::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv_zero_kernel_gives_zero_map() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(rand_array((1, 2, 5, 5), 1));
        let k = tape.leaf(Array4::zeros((3, 2, 3, 3)));
        let b = tape.leaf(Array4::zeros((1, 3, 1, 1)));
        let y = tape.conv2d(x, k, b).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut tape = Tape::<f64>::new();
        let input = rand_array((2, 1, 6, 7), 2);
        let x = tape.leaf(input.clone());
        let mut kernel = Array4::zeros((1, 1, 3, 3));
        kernel[(0, 0, 1, 1)] = 1.0;
        let k = tape.leaf(kernel);
        let b = tape.leaf(Array4::zeros((1, 1, 1, 1)));
        let y = tape.conv2d(x, k, b).unwrap();
        assert_eq!(tape.value(y), &input);
    }

    #[test]
    fn conv_all_ones_kernel_matches_hand_example() {
        // 2x2 input [[1,2],[3,4]] under an all-ones 3x3 kernel with padding 1:
        // every output pixel sees the full input once.
        let mut tape = Tape::<f64>::new();
        let input = array![[[[1.0, 2.0], [3.0, 4.0]]]];
        let x = tape.leaf(input);
        let k = tape.leaf(Array4::ones((1, 1, 3, 3)));
        let b = tape.leaf(Array4::zeros((1, 1, 1, 1)));
        let y = tape.conv2d(x, k, b).unwrap();
        let expected = array![[[[10.0, 10.0], [10.0, 10.0]]]];
        assert_eq!(tape.value(y), &expected);
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let x_v = rand_array((2, 3, 8, 6), 3);
        let k_v = rand_array((4, 3, 3, 3), 4);
        let b_v = rand_array((1, 4, 1, 1), 5);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(x_v.clone());
        let k = tape.leaf(k_v.clone());
        let b = tape.leaf(b_v.clone());
        let y = tape.conv2d(x, k, b).unwrap();
        let oracle = conv2d_reference(&x_v, &k_v, &b_v);
        for (a, o) in tape.value(y).iter().zip(oracle.iter()) {
            assert_relative_eq!(a, o, max_relative = 1e-12);
        }
    }

    #[test]
    fn conv_is_linear_in_input() {
        let xa = rand_array((1, 2, 6, 6), 10);
        let xb = rand_array((1, 2, 6, 6), 11);
        let k_v = rand_array((3, 2, 3, 3), 12);
        let b0 = Array4::zeros((1, 3, 1, 1));
        let run = |x_v: Array4<f64>| {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(x_v);
            let k = tape.leaf(k_v.clone());
            let b = tape.leaf(b0.clone());
            let y = tape.conv2d(x, k, b).unwrap();
            tape.value(y).clone()
        };
        let lhs = run(&xa * 2.0 + &xb * 0.5);
        let rhs = run(xa) * 2.0 + run(xb) * 0.5;
        for (l, r) in lhs.iter().zip(rhs.iter()) {
            assert_relative_eq!(l, r, max_relative = 1e-12);
        }
    }

    #[test]
    fn conv_shape_error_names_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Array4::zeros((1, 2, 4, 4)));
        let k = tape.leaf(Array4::zeros((3, 5, 3, 3)));
        let b = tape.leaf(Array4::zeros((1, 3, 1, 1)));
        let err = tape.conv2d(x, k, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("channel"), "unexpected message: {msg}");
    }

    #[test]
    fn batchnorm_constant_input_maps_to_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Array4::from_elem((2, 1, 3, 3), 4.2));
        let g = tape.leaf(Array4::ones((1, 1, 1, 1)));
        let b = tape.leaf(Array4::zeros((1, 1, 1, 1)));
        let (y, _) = tape.batchnorm_train(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn batchnorm_two_scalar_batch_normalizes_to_unit() {
        // batch {0, 2}: mean 1, biased variance 1
        let mut tape = Tape::<f64>::new();
        let mut input = Array4::zeros((2, 1, 1, 1));
        input[(1, 0, 0, 0)] = 2.0;
        let x = tape.leaf(input);
        let g = tape.leaf(Array4::ones((1, 1, 1, 1)));
        let b = tape.leaf(Array4::zeros((1, 1, 1, 1)));
        let (y, stats) = tape.batchnorm_train(x, g, b, 1e-5).unwrap();
        assert_relative_eq!(tape.value(y)[(0, 0, 0, 0)], -1.0, epsilon = 1e-4);
        assert_relative_eq!(tape.value(y)[(1, 0, 0, 0)], 1.0, epsilon = 1e-4);
        assert_relative_eq!(stats.mean[(0, 0, 0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(stats.var[(0, 0, 0, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn batchnorm_eval_identity_stats_is_identity() {
        let input = rand_array((2, 2, 3, 3), 20);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(input.clone());
        let g = tape.leaf(Array4::ones((1, 2, 1, 1)));
        let b = tape.leaf(Array4::zeros((1, 2, 1, 1)));
        let rm = Array4::zeros((1, 2, 1, 1));
        let rv = Array4::ones((1, 2, 1, 1));
        let y = tape.batchnorm_eval(x, g, b, &rm, &rv, 1e-5).unwrap();
        for (a, e) in tape.value(y).iter().zip(input.iter()) {
            assert_relative_eq!(a, e, epsilon = 1e-4);
        }
    }

    #[test]
    fn batchnorm_eval_is_bit_deterministic() {
        let input = rand_array((2, 2, 4, 4), 21);
        let run = || {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(input.clone());
            let g = tape.leaf(Array4::from_elem((1, 2, 1, 1), 1.3));
            let b = tape.leaf(Array4::from_elem((1, 2, 1, 1), -0.2));
            let rm = Array4::from_elem((1, 2, 1, 1), 0.1);
            let rv = Array4::from_elem((1, 2, 1, 1), 0.9);
            let y = tape.batchnorm_eval(x, g, b, &rm, &rv, 1e-5).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn batchnorm_rejects_bad_eps_and_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Array4::zeros((1, 2, 3, 3)));
        let g = tape.leaf(Array4::ones((1, 2, 1, 1)));
        let b = tape.leaf(Array4::zeros((1, 2, 1, 1)));
        assert!(tape.batchnorm_train(x, g, b, 0.0).is_err());
        let g3 = tape.leaf(Array4::ones((1, 3, 1, 1)));
        assert!(tape.batchnorm_train(x, g3, b, 1e-5).is_err());
    }

    #[test]
    fn relu_and_sigmoid_pointwise_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(array![[[[-1.0, 0.0, 2.0]]]]);
        let r = tape.relu(x);
        assert_eq!(tape.value(r), &array![[[[0.0, 0.0, 2.0]]]]);
        let z = tape.leaf(Array4::zeros((1, 1, 1, 1)));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s)[(0, 0, 0, 0)], 0.5);
        assert!(tape.value(r).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn sigmoid_derivative_at_zero_is_quarter() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Array4::zeros((1, 1, 1, 1)));
        let s = tape.sigmoid(x);
        let loss = tape.mean_all(s);
        tape.backward(loss).unwrap();
        assert_relative_eq!(tape.grad(x).unwrap()[(0, 0, 0, 0)], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn global_avg_pool_examples() {
        let mut tape = Tape::<f64>::new();
        let c = tape.leaf(Array4::from_elem((1, 1, 4, 4), 3.25));
        let p = tape.global_avg_pool(c).unwrap();
        assert_eq!(tape.value(p)[(0, 0, 0, 0)], 3.25);

        let x = tape.leaf(array![[[[1.0, 3.0], [5.0, 7.0]]]]);
        let p = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(p)[(0, 0, 0, 0)], 4.0);

        let z = tape.leaf(Array4::zeros((1, 1, 2, 2)));
        let p = tape.global_avg_pool(z).unwrap();
        assert_eq!(tape.value(p)[(0, 0, 0, 0)], 0.0);
    }

    #[test]
    fn dense_examples() {
        let mut tape = Tape::<f64>::new();
        // identity weights, zero bias
        let x = tape.leaf(array![[[[2.0]], [[5.0]]]]);
        let mut eye = Array4::zeros((2, 2, 1, 1));
        eye[(0, 0, 0, 0)] = 1.0;
        eye[(1, 1, 0, 0)] = 1.0;
        let w = tape.leaf(eye);
        let b = tape.leaf(Array4::zeros((1, 2, 1, 1)));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y), &array![[[[2.0]], [[5.0]]]]);

        // zero weights, bias b
        let w0 = tape.leaf(Array4::zeros((2, 2, 1, 1)));
        let bb = tape.leaf(array![[[[0.7]], [[-0.3]]]].into_shape_with_order((1, 2, 1, 1)).unwrap());
        let y = tape.dense(x, w0, bb).unwrap();
        assert_eq!(tape.value(y)[(0, 0, 0, 0)], 0.7);
        assert_eq!(tape.value(y)[(0, 1, 0, 0)], -0.3);

        // w=[[1,2]], x=[3,4] -> 11
        let x2 = tape.leaf(array![[[[3.0]], [[4.0]]]]);
        let w12 = tape.leaf(array![[[[1.0]], [[2.0]]]].into_shape_with_order((1, 2, 1, 1)).unwrap());
        let b1 = tape.leaf(Array4::zeros((1, 1, 1, 1)));
        let y = tape.dense(x2, w12, b1).unwrap();
        assert_eq!(tape.value(y)[(0, 0, 0, 0)], 11.0);
    }

    #[test]
    fn dense_dimension_mismatch_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Array4::zeros((1, 3, 1, 1)));
        let w = tape.leaf(Array4::zeros((2, 4, 1, 1)));
        let b = tape.leaf(Array4::zeros((1, 2, 1, 1)));
        assert!(tape.dense(x, w, b).is_err());
    }

    #[test]
    fn backward_requires_scalar_target() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Array4::zeros((1, 1, 2, 2)));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn channel_scale_backward_matches_product_rule() {
        let f_v = rand_array((2, 3, 4, 4), 30);
        let s_v = rand_array((2, 3, 1, 1), 31);
        let mut tape = Tape::<f64>::new();
        let f = tape.leaf(f_v.clone());
        let s = tape.leaf(s_v.clone());
        let y = tape.channel_scale(f, s).unwrap();
        let sum = tape.sum_per_image(y);
        let loss = tape.mean_all(sum);
        tape.backward(loss).unwrap();
        // d loss / d s[b,c] = sum_plane(f) / B
        let ds = tape.grad(s).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                let plane_sum: f64 = f_v
                    .index_axis(Axis(0), b)
                    .index_axis(Axis(0), c)
                    .iter()
                    .sum();
                assert_relative_eq!(ds[(b, c, 0, 0)], plane_sum / 2.0, epsilon = 1e-12);
            }
        }
    }
}

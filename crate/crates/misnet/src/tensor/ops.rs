//! Differentiable tensor operations.
//!
//! Every op pushes one node whose backward closure maps the output gradient
//! to parent gradients. Binary ops broadcast with numpy trailing-axis rules;
//! their backwards sum the gradient back down to each parent's shape.

use super::{broadcast_shapes, reduce_to_shape, ArrayD, Shared, Var};
use ndarray::linalg::general_mat_mul;
use ndarray::{Axis, Dimension, Ix2, Ix3, IxDyn, Slice};

fn bview<'a>(a: &'a Shared, shape: &[usize]) -> ndarray::ArrayViewD<'a, f64> {
    a.broadcast(IxDyn(shape))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", a.shape(), shape))
}

impl<'t> Var<'t> {
    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        // (x, y, g) -> gx
        df: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let y = x.mapv(f);
        self.tape.push(
            y,
            vec![self],
            Box::new(move |ctx| {
                let x = &ctx.parents[0];
                let mut gx = ctx.grad.clone();
                ndarray::Zip::from(&mut gx)
                    .and(&**x)
                    .and(&**ctx.value)
                    .for_each(|g, &xv, &yv| *g = df(xv, yv, *g));
                vec![gx]
            }),
        )
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _, g| if x > 0.0 { g } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid_scalar, |_, y, g| g * y * (1.0 - y))
    }

    /// ln(1 + e^x), computed in overflow-safe form.
    pub fn softplus(self) -> Var<'t> {
        self.unary(softplus_scalar, |x, _, g| g * sigmoid_scalar(x))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y, g| g * y)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x, _, g| g * x.signum() * if x == 0.0 { 0.0 } else { 1.0 })
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(move |x| c * x, move |_, _, g| c * g)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, |_, _, g| g)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _, g| 2.0 * x * g)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shapes(a.shape(), b.shape());
        let y = &bview(&a, &shape) + &bview(&b, &shape);
        self.tape.push(
            y,
            vec![self, other],
            Box::new(|ctx| {
                vec![
                    reduce_to_shape(ctx.grad.clone(), ctx.parents[0].shape()),
                    reduce_to_shape(ctx.grad.clone(), ctx.parents[1].shape()),
                ]
            }),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shapes(a.shape(), b.shape());
        let y = &bview(&a, &shape) - &bview(&b, &shape);
        self.tape.push(
            y,
            vec![self, other],
            Box::new(|ctx| {
                vec![
                    reduce_to_shape(ctx.grad.clone(), ctx.parents[0].shape()),
                    reduce_to_shape(-ctx.grad.clone(), ctx.parents[1].shape()),
                ]
            }),
        )
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shapes(a.shape(), b.shape());
        let y = &bview(&a, &shape) * &bview(&b, &shape);
        self.tape.push(
            y,
            vec![self, other],
            Box::new(move |ctx| {
                let (a, b) = (&ctx.parents[0], &ctx.parents[1]);
                let shape = ctx.grad.shape().to_vec();
                let ga = ctx.grad * &bview(b, &shape);
                let gb = ctx.grad * &bview(a, &shape);
                vec![
                    reduce_to_shape(ga, a.shape()),
                    reduce_to_shape(gb, b.shape()),
                ]
            }),
        )
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shapes(a.shape(), b.shape());
        let y = &bview(&a, &shape) / &bview(&b, &shape);
        self.tape.push(
            y,
            vec![self, other],
            Box::new(move |ctx| {
                let (a, b) = (&ctx.parents[0], &ctx.parents[1]);
                let shape = ctx.grad.shape().to_vec();
                let bv = bview(b, &shape);
                let ga = ctx.grad / &bv;
                let av = bview(a, &shape);
                let mut gb = ctx.grad * &av;
                ndarray::Zip::from(&mut gb).and(&bv).for_each(|g, &bb| *g = -*g / (bb * bb));
                vec![
                    reduce_to_shape(ga, a.shape()),
                    reduce_to_shape(gb, b.shape()),
                ]
            }),
        )
    }

    /// Elementwise max; gradient routes to the left operand on ties.
    pub fn maximum(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shapes(a.shape(), b.shape());
        let av = bview(&a, &shape);
        let bv = bview(&b, &shape);
        let mut y = av.to_owned();
        ndarray::Zip::from(&mut y).and(&bv).for_each(|yv, &bb| *yv = yv.max(bb));
        self.tape.push(
            y,
            vec![self, other],
            Box::new(move |ctx| {
                let (a, b) = (&ctx.parents[0], &ctx.parents[1]);
                let shape = ctx.grad.shape().to_vec();
                let av = bview(a, &shape);
                let bv = bview(b, &shape);
                let mut ga = ctx.grad.clone();
                let mut gb = ctx.grad.clone();
                ndarray::Zip::from(&mut ga)
                    .and(&mut gb)
                    .and(&av)
                    .and(&bv)
                    .for_each(|ga, gb, &aa, &bb| {
                        if aa >= bb {
                            *gb = 0.0;
                        } else {
                            *ga = 0.0;
                        }
                    });
                vec![
                    reduce_to_shape(ga, a.shape()),
                    reduce_to_shape(gb, b.shape()),
                ]
            }),
        )
    }

    /// Sum of all elements, as a 0-d value.
    pub fn sum_all(self) -> Var<'t> {
        let x = self.value();
        let s = x.sum();
        let y = ArrayD::from_elem(IxDyn(&[]), s);
        self.tape.push(
            y,
            vec![self],
            Box::new(|ctx| {
                let g = ctx.grad[IxDyn(&[])];
                vec![ArrayD::from_elem(ctx.parents[0].raw_dim(), g)]
            }),
        )
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn sum_axes(self, axes: &[usize], keepdims: bool) -> Var<'t> {
        self.reduce_axes(axes, keepdims, false)
    }

    pub fn mean_axes(self, axes: &[usize], keepdims: bool) -> Var<'t> {
        self.reduce_axes(axes, keepdims, true)
    }

    fn reduce_axes(self, axes: &[usize], keepdims: bool, mean: bool) -> Var<'t> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let mut sorted: Vec<usize> = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let count: usize = sorted.iter().map(|&a| in_shape[a]).product();
        let mut y = x.to_owned();
        for &ax in sorted.iter().rev() {
            y = y.sum_axis(Axis(ax));
        }
        if keepdims {
            for &ax in sorted.iter() {
                y = y.insert_axis(Axis(ax));
            }
        }
        if mean {
            y /= count as f64;
        }
        let keep_shape: Vec<usize> = {
            let mut s = in_shape.clone();
            for &ax in &sorted {
                s[ax] = 1;
            }
            s
        };
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        self.tape.push(
            y,
            vec![self],
            Box::new(move |ctx| {
                let g = ctx
                    .grad
                    .to_shape(IxDyn(&keep_shape))
                    .expect("reduce grad reshape")
                    .to_owned();
                let full = g
                    .broadcast(IxDyn(&in_shape))
                    .expect("reduce grad broadcast")
                    .to_owned();
                vec![full * scale]
            }),
        )
    }

    /// Max along one axis (kept as size 1); ties choose the first index.
    pub fn max_axis(self, axis: usize) -> Var<'t> {
        let x = self.value();
        let mut out_shape = x.shape().to_vec();
        out_shape[axis] = 1;
        let mut y = ArrayD::from_elem(IxDyn(&out_shape), f64::NEG_INFINITY);
        let mut arg: ndarray::ArrayD<usize> = ndarray::ArrayD::zeros(IxDyn(&out_shape));
        for (idx, &v) in x.indexed_iter() {
            let mut o = idx.slice().to_vec();
            o[axis] = 0;
            let cur = &mut y[IxDyn(&o)];
            if v > *cur {
                *cur = v;
                arg[IxDyn(&o)] = idx.slice()[axis];
            }
        }
        self.tape.push(
            y,
            vec![self],
            Box::new(move |ctx| {
                let mut gx = ArrayD::zeros(ctx.parents[0].raw_dim());
                for (idx, &g) in ctx.grad.indexed_iter() {
                    let mut src = idx.slice().to_vec();
                    src[axis] = arg[idx.slice()];
                    gx[IxDyn(&src)] += g;
                }
                vec![gx]
            }),
        )
    }

    /// Softmax along the last axis.
    pub fn softmax_last(self) -> Var<'t> {
        let x = self.value();
        let mut y = x.to_owned();
        let last = y.ndim() - 1;
        for mut row in y.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let _ = last;
        self.tape.push(
            y,
            vec![self],
            Box::new(|ctx| {
                let y = &ctx.value;
                let mut gx = ctx.grad.clone();
                for (mut grow, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = grow.iter().zip(yrow.iter()).map(|(g, y)| g * y).sum();
                    ndarray::Zip::from(&mut grow)
                        .and(&yrow)
                        .for_each(|g, &yv| *g = yv * (*g - dot));
                }
                vec![gx]
            }),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        assert_eq!(
            x.len(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {:?}",
            in_shape,
            shape
        );
        let y = reshape_owned(x.to_owned(), shape);
        self.tape.push(
            y,
            vec![self],
            Box::new(move |ctx| vec![reshape_owned(ctx.grad.clone(), &in_shape)]),
        )
    }

    pub fn permute(self, axes: &[usize]) -> Var<'t> {
        let x = self.value();
        assert_eq!(axes.len(), x.ndim());
        let axes_owned = axes.to_vec();
        let y = x
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes_owned.len()];
        for (i, &a) in axes_owned.iter().enumerate() {
            inverse[a] = i;
        }
        self.tape.push(
            y,
            vec![self],
            Box::new(move |ctx| {
                vec![ctx
                    .grad
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned()]
            }),
        )
    }

    /// Contiguous slice along one axis.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let x = self.value();
        let y = x
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.tape.push(
            y,
            vec![self],
            Box::new(move |ctx| {
                let mut gx = ArrayD::zeros(ctx.parents[0].raw_dim());
                gx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(ctx.grad);
                vec![gx]
            }),
        )
    }

    /// 2-D matrix product; `transpose_b` multiplies by Bᵀ without copying.
    pub fn matmul2(self, other: Var<'t>, transpose_b: bool) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let a2 = a.view().into_dimensionality::<Ix2>().expect("matmul lhs 2-d");
        let b2 = b.view().into_dimensionality::<Ix2>().expect("matmul rhs 2-d");
        let (m, k) = a2.dim();
        let (bn, bk) = if transpose_b {
            (b2.dim().0, b2.dim().1)
        } else {
            (b2.dim().1, b2.dim().0)
        };
        assert_eq!(k, bk, "matmul inner dims {k} vs {bk}");
        let mut y = ndarray::Array2::<f64>::zeros((m, bn));
        if transpose_b {
            general_mat_mul(1.0, &a2, &b2.t(), 0.0, &mut y.view_mut());
        } else {
            general_mat_mul(1.0, &a2, &b2, 0.0, &mut y.view_mut());
        }
        self.tape.push(
            y.into_dyn(),
            vec![self, other],
            Box::new(move |ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = ctx.parents[0].view().into_dimensionality::<Ix2>().unwrap();
                let b2 = ctx.parents[1].view().into_dimensionality::<Ix2>().unwrap();
                let mut ga = ndarray::Array2::<f64>::zeros(a2.dim());
                let mut gb = ndarray::Array2::<f64>::zeros(b2.dim());
                if transpose_b {
                    // y = a bᵀ: ga = g b ; gb = gᵀ a
                    general_mat_mul(1.0, &g, &b2, 0.0, &mut ga.view_mut());
                    general_mat_mul(1.0, &g.t(), &a2, 0.0, &mut gb.view_mut());
                } else {
                    // y = a b: ga = g bᵀ ; gb = aᵀ g
                    general_mat_mul(1.0, &g, &b2.t(), 0.0, &mut ga.view_mut());
                    general_mat_mul(1.0, &a2.t(), &g, 0.0, &mut gb.view_mut());
                }
                vec![ga.into_dyn(), gb.into_dyn()]
            }),
        )
    }

    /// Batched 3-d matmul over the leading axis.
    pub fn bmm(self, other: Var<'t>, transpose_b: bool) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let a3 = a.view().into_dimensionality::<Ix3>().expect("bmm lhs 3-d");
        let b3 = b.view().into_dimensionality::<Ix3>().expect("bmm rhs 3-d");
        let (n, m, k) = a3.dim();
        assert_eq!(n, b3.dim().0, "bmm batch dims");
        let (bn, bk) = if transpose_b {
            (b3.dim().1, b3.dim().2)
        } else {
            (b3.dim().2, b3.dim().1)
        };
        assert_eq!(k, bk, "bmm inner dims");
        let mut y = ndarray::Array3::<f64>::zeros((n, m, bn));
        for i in 0..n {
            let ai = a3.index_axis(Axis(0), i);
            let bi = b3.index_axis(Axis(0), i);
            let mut yi = y.index_axis_mut(Axis(0), i);
            if transpose_b {
                general_mat_mul(1.0, &ai, &bi.t(), 0.0, &mut yi);
            } else {
                general_mat_mul(1.0, &ai, &bi, 0.0, &mut yi);
            }
        }
        self.tape.push(
            y.into_dyn(),
            vec![self, other],
            Box::new(move |ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix3>().unwrap();
                let a3 = ctx.parents[0].view().into_dimensionality::<Ix3>().unwrap();
                let b3 = ctx.parents[1].view().into_dimensionality::<Ix3>().unwrap();
                let mut ga = ndarray::Array3::<f64>::zeros(a3.dim());
                let mut gb = ndarray::Array3::<f64>::zeros(b3.dim());
                for i in 0..a3.dim().0 {
                    let gi = g.index_axis(Axis(0), i);
                    let ai = a3.index_axis(Axis(0), i);
                    let bi = b3.index_axis(Axis(0), i);
                    let mut gai = ga.index_axis_mut(Axis(0), i);
                    let mut gbi = gb.index_axis_mut(Axis(0), i);
                    if transpose_b {
                        general_mat_mul(1.0, &gi, &bi, 0.0, &mut gai);
                        general_mat_mul(1.0, &gi.t(), &ai, 0.0, &mut gbi);
                    } else {
                        general_mat_mul(1.0, &gi, &bi.t(), 0.0, &mut gai);
                        general_mat_mul(1.0, &ai.t(), &gi, 0.0, &mut gbi);
                    }
                }
                vec![ga.into_dyn(), gb.into_dyn()]
            }),
        )
    }
}

/// Concatenation along `axis`.
pub fn concat<'t>(axis: usize, parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape;
    let values: Vec<Shared> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let y = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
    let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    tape.push(
        y,
        parts.to_vec(),
        Box::new(move |ctx| {
            let mut out = Vec::with_capacity(widths.len());
            let mut start = 0;
            for &w in &widths {
                out.push(
                    ctx.grad
                        .slice_axis(Axis(axis), Slice::from(start..start + w))
                        .to_owned(),
                );
                start += w;
            }
            out
        }),
    )
}

/// Batch normalization over all axes except axis 1; returns the normalized
/// output plus the biased batch mean/variance per channel (for running-stat
/// upkeep by the caller).
pub fn batch_norm<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    eps: f64,
) -> (Var<'t>, ndarray::Array1<f64>, ndarray::Array1<f64>) {
    let xv = x.value();
    let shape = xv.shape().to_vec();
    assert!(shape.len() >= 2, "batch_norm input must have a channel axis");
    let c = shape[1];
    let m = (xv.len() / c) as f64;
    let reduce_axes: Vec<usize> = (0..shape.len()).filter(|&a| a != 1).collect();

    let mut mean = ndarray::Array1::<f64>::zeros(c);
    let mut var = ndarray::Array1::<f64>::zeros(c);
    for ch in 0..c {
        let lane = xv.index_axis(Axis(1), ch);
        let mu = lane.sum() / m;
        let v = lane.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / m;
        mean[ch] = mu;
        var[ch] = v;
    }

    let chan_shape: Vec<usize> = (0..shape.len()).map(|i| if i == 1 { c } else { 1 }).collect();
    let ivar = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let mean_b = mean
        .clone()
        .into_dyn()
        .into_shape_with_order(IxDyn(&chan_shape))
        .unwrap();
    let ivar_b = ivar
        .clone()
        .into_dyn()
        .into_shape_with_order(IxDyn(&chan_shape))
        .unwrap();

    let gv = gamma.value();
    let bv = beta.value();
    let gamma_b = gv.to_shape(IxDyn(&chan_shape)).unwrap().to_owned();
    let beta_b = bv.to_shape(IxDyn(&chan_shape)).unwrap().to_owned();

    let xhat = (&xv.view() - &mean_b.broadcast(IxDyn(&shape)).unwrap())
        * &ivar_b.broadcast(IxDyn(&shape)).unwrap();
    let y = &xhat * &gamma_b.broadcast(IxDyn(&shape)).unwrap()
        + &beta_b.broadcast(IxDyn(&shape)).unwrap();

    let mean_ret = mean.clone();
    let var_ret = var.clone();
    let out = x.tape().push(
        y,
        vec![x, gamma, beta],
        Box::new(move |ctx| {
            let xv = &ctx.parents[0];
            let g = ctx.grad;
            let shape = xv.shape().to_vec();
            // recompute xhat from saved channel stats
            let mean_b = mean
                .clone()
                .into_dyn()
                .into_shape_with_order(IxDyn(&chan_shape))
                .unwrap();
            let ivar_b = ivar
                .clone()
                .into_dyn()
                .into_shape_with_order(IxDyn(&chan_shape))
                .unwrap();
            let xhat = (&xv.view() - &mean_b.broadcast(IxDyn(&shape)).unwrap())
                * &ivar_b.broadcast(IxDyn(&shape)).unwrap();

            let gxhat_sum = {
                let mut s = (g * &xhat).to_owned();
                for &ax in reduce_axes.iter().rev() {
                    s = s.sum_axis(Axis(ax));
                }
                s
            };
            let g_sum = {
                let mut s = g.clone();
                for &ax in reduce_axes.iter().rev() {
                    s = s.sum_axis(Axis(ax));
                }
                s
            };
            let dgamma = gxhat_sum.clone();
            let dbeta = g_sum.clone();

            let gamma_v = ctx.parents[1].to_shape(IxDyn(&chan_shape)).unwrap().to_owned();
            let coef = (&gamma_v.view().into_dimensionality::<ndarray::IxDyn>().unwrap()
                * &ivar_b.view())
                .to_owned();
            let mean_g = g_sum.mapv(|v| v / m).into_shape_with_order(IxDyn(&chan_shape)).unwrap();
            let mean_gxhat = gxhat_sum
                .mapv(|v| v / m)
                .into_shape_with_order(IxDyn(&chan_shape))
                .unwrap();
            let centered = g - &mean_g.broadcast(IxDyn(&shape)).unwrap()
                - &(&xhat * &mean_gxhat.broadcast(IxDyn(&shape)).unwrap());
            let dx = &centered * &coef.broadcast(IxDyn(&shape)).unwrap();

            let gshape = ctx.parents[1].shape().to_vec();
            let bshape = ctx.parents[2].shape().to_vec();
            vec![
                dx.to_owned(),
                dgamma.into_dyn().into_shape_with_order(IxDyn(&gshape)).unwrap(),
                dbeta.into_dyn().into_shape_with_order(IxDyn(&bshape)).unwrap(),
            ]
        }),
    );
    (out, mean_ret, var_ret)
}

pub(crate) fn reshape_owned(a: ArrayD, shape: &[usize]) -> ArrayD {
    let a = if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    };
    a.into_shape_with_order(IxDyn(shape)).expect("reshape")
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use ndarray::IxDyn;

    fn a2(rows: usize, cols: usize, v: &[f64]) -> ArrayD {
        ArrayD::from_shape_vec(IxDyn(&[rows, cols]), v.to_vec()).unwrap()
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let t = Tape::new();
        let x = t.constant(a2(2, 3, &[1., 2., 3., 4., 5., 6.]));
        let b = t.constant(ArrayD::from_shape_vec(IxDyn(&[1, 3]), vec![10., 20., 30.]).unwrap());
        let y = x.add(b).sum_all();
        assert!((y.scalar() - 141.0).abs() < 1e-12);
        let g = t.backward(y);
        assert_eq!(g.wrt(b).unwrap().shape(), &[1, 3]);
        assert_eq!(g.wrt(b).unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_backward_is_centered() {
        let t = Tape::new();
        let x = t.constant(a2(2, 3, &[1., 2., 3., -1., 0., 1.]));
        let y = x.softmax_last();
        let v = y.value();
        for r in 0..2 {
            let s: f64 = (0..3).map(|c| v[[r, c]]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // uniform upstream gradient → zero input gradient (softmax is shift-invariant)
        let loss = y.sum_all();
        let g = t.backward(loss);
        for gv in g.wrt(x).unwrap().iter() {
            assert!(gv.abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_matches_hand_value() {
        let t = Tape::new();
        let a = t.constant(a2(2, 2, &[1., 2., 3., 4.]));
        let b = t.constant(a2(2, 2, &[5., 6., 7., 8.]));
        let y = a.matmul2(b, false);
        let v = y.value();
        assert_eq!(v[[0, 0]], 19.0);
        assert_eq!(v[[1, 1]], 50.0);
        let yt = a.matmul2(b, true);
        let vt = yt.value();
        // a · bᵀ: row0 = [1*5+2*6, 1*7+2*8]
        assert_eq!(vt[[0, 0]], 17.0);
        assert_eq!(vt[[0, 1]], 23.0);
    }

    #[test]
    fn concat_and_narrow_roundtrip_gradients() {
        let t = Tape::new();
        let a = t.constant(a2(1, 2, &[1., 2.]));
        let b = t.constant(a2(1, 3, &[3., 4., 5.]));
        let y = concat(1, &[a, b]);
        assert_eq!(y.shape(), vec![1, 5]);
        let sliced = y.narrow(1, 1, 3); // [2,3,4]
        assert_eq!(sliced.value().as_slice().unwrap(), &[2., 3., 4.]);
        let g = t.backward(sliced.sum_all());
        assert_eq!(g.wrt(a).unwrap().as_slice().unwrap(), &[0., 1.]);
        assert_eq!(g.wrt(b).unwrap().as_slice().unwrap(), &[1., 1., 0.]);
    }

    #[test]
    fn max_axis_takes_first_on_ties() {
        let t = Tape::new();
        let x = t.constant(a2(1, 4, &[2., 7., 7., 1.]));
        let y = x.max_axis(1);
        assert_eq!(y.value()[[0, 0]], 7.0);
        let g = t.backward(y.sum_all());
        assert_eq!(g.wrt(x).unwrap().as_slice().unwrap(), &[0., 1., 0., 0.]);
    }

    #[test]
    fn batch_norm_normalizes_per_channel() {
        let t = Tape::new();
        let x = t.constant(
            ArrayD::from_shape_vec(IxDyn(&[2, 1, 1, 2]), vec![1., 2., 3., 4.]).unwrap(),
        );
        let gamma = t.constant(ArrayD::ones(IxDyn(&[1])));
        let beta = t.constant(ArrayD::zeros(IxDyn(&[1])));
        let (y, mean, var) = batch_norm(x, gamma, beta, 1e-5);
        assert!((mean[0] - 2.5).abs() < 1e-12);
        assert!((var[0] - 1.25).abs() < 1e-12);
        let v = y.value();
        let mu: f64 = v.iter().sum::<f64>() / 4.0;
        assert!(mu.abs() < 1e-12);
    }

    #[test]
    fn stable_scalar_helpers() {
        assert!((sigmoid_scalar(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid_scalar(-800.0) >= 0.0);
        assert!(sigmoid_scalar(800.0) <= 1.0);
        assert!((softplus_scalar(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus_scalar(800.0).is_finite());
        assert!(softplus_scalar(-800.0) >= 0.0);
    }
}

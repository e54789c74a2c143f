//! 2-d convolution (im2col + GEMM) and average pooling, with backward passes.

use super::{ArrayD, Var};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView4, Axis, Ix4, IxDyn};

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    dilation: usize,
    oh: usize,
    ow: usize,
}

fn out_dim(input: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> usize {
    let eff = dilation * (k - 1) + 1;
    assert!(
        input + 2 * pad >= eff,
        "conv window {eff} exceeds padded input {}",
        input + 2 * pad
    );
    (input + 2 * pad - eff) / stride + 1
}

fn im2col(x: &ArrayView4<f64>, b: usize, g: ConvGeom, cols: &mut Array2<f64>) {
    let (_, _, h, w) = x.dim();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.ph as isize;
                    let base = oy * g.ow;
                    if iy < 0 || iy >= h as isize {
                        for ox in 0..g.ow {
                            cols[[row, base + ox]] = 0.0;
                        }
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.pw as isize;
                        cols[[row, base + ox]] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            x[[b, c, iy as usize, ix as usize]]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &Array2<f64>, g: ConvGeom, h: usize, w: usize, out: &mut ndarray::ArrayViewMut3<f64>) {
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = oy * g.ow;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.pw as isize;
                        if ix >= 0 && ix < w as isize {
                            out[[c, iy as usize, ix as usize]] += cols[[row, base + ox]];
                        }
                    }
                }
            }
        }
    }
}

/// 2-d convolution of NCHW input with OIHW weights. Bias is applied by the
/// caller as a broadcast add so its gradient falls out of the add op.
pub fn conv2d<'t>(
    x: Var<'t>,
    w: Var<'t>,
    stride: usize,
    pad: (usize, usize),
    dilation: usize,
) -> Var<'t> {
    let xv = x.value();
    let wv = w.value();
    let x4 = xv.view().into_dimensionality::<Ix4>().expect("conv input 4-d");
    let w4 = wv.view().into_dimensionality::<Ix4>().expect("conv weight 4-d");
    let (bsz, cin, h, wd) = x4.dim();
    let (o, wcin, kh, kw) = w4.dim();
    assert_eq!(cin, wcin, "conv channels: input {cin} vs weight {wcin}");
    let g = ConvGeom {
        cin,
        kh,
        kw,
        stride,
        ph: pad.0,
        pw: pad.1,
        dilation,
        oh: out_dim(h, kh, stride, pad.0, dilation),
        ow: out_dim(wd, kw, stride, pad.1, dilation),
    };
    let ckk = cin * kh * kw;
    let ohw = g.oh * g.ow;

    let wmat = wv.to_shape((o, ckk)).expect("weight reshape");
    let mut y = Array4::<f64>::zeros((bsz, o, g.oh, g.ow));
    let mut cols = Array2::<f64>::zeros((ckk, ohw));
    for bi in 0..bsz {
        im2col(&x4, bi, g, &mut cols);
        let mut yb = Array2::<f64>::zeros((o, ohw));
        general_mat_mul(1.0, &wmat.view(), &cols.view(), 0.0, &mut yb.view_mut());
        let yb3 = yb.into_shape_with_order((o, g.oh, g.ow)).unwrap();
        y.index_axis_mut(Axis(0), bi).assign(&yb3);
    }

    x.tape().push(
        y.into_dyn(),
        vec![x, w],
        Box::new(move |ctx| {
            let xv = &ctx.parents[0];
            let wv = &ctx.parents[1];
            let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
            let (bsz, _, h, wd) = x4.dim();
            let wmat = wv.to_shape((o, ckk)).unwrap();
            let gy = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();

            let mut dw = Array2::<f64>::zeros((o, ckk));
            let mut dx = Array4::<f64>::zeros(x4.dim());
            let mut cols = Array2::<f64>::zeros((ckk, ohw));
            let mut colgrad = Array2::<f64>::zeros((ckk, ohw));
            for bi in 0..bsz {
                im2col(&x4, bi, g, &mut cols);
                let gyb = gy
                    .index_axis(Axis(0), bi)
                    .to_shape((o, ohw))
                    .unwrap()
                    .to_owned();
                // dW += gy_b · colsᵀ
                general_mat_mul(1.0, &gyb.view(), &cols.t(), 1.0, &mut dw.view_mut());
                // dcols = Wᵀ · gy_b, scattered back to input positions
                general_mat_mul(1.0, &wmat.t(), &gyb.view(), 0.0, &mut colgrad.view_mut());
                let mut dxb = dx.index_axis_mut(Axis(0), bi);
                col2im(&colgrad, g, h, wd, &mut dxb);
            }
            let dw4 = dw
                .into_shape_with_order((o, cin, kh, kw))
                .unwrap()
                .into_dyn();
            vec![dx.into_dyn(), dw4]
        }),
    )
}

/// Average pooling. With `count_include_pad`, zero padding counts toward the
/// denominator (always k²); otherwise only the in-bounds window does.
pub fn avg_pool2d<'t>(
    x: Var<'t>,
    k: usize,
    stride: usize,
    pad: usize,
    count_include_pad: bool,
) -> Var<'t> {
    let xv = x.value();
    let x4 = xv.view().into_dimensionality::<Ix4>().expect("pool input 4-d");
    let (bsz, c, h, w) = x4.dim();
    let oh = out_dim(h, k, stride, pad, 1);
    let ow = out_dim(w, k, stride, pad, 1);
    let mut y = Array4::<f64>::zeros((bsz, c, oh, ow));
    for bi in 0..bsz {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut sum = 0.0;
                    let mut cnt = 0usize;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            sum += x4[[bi, ci, iy as usize, ix as usize]];
                            cnt += 1;
                        }
                    }
                    let denom = if count_include_pad { k * k } else { cnt.max(1) };
                    y[[bi, ci, oy, ox]] = sum / denom as f64;
                }
            }
        }
    }
    x.tape().push(
        y.into_dyn(),
        vec![x],
        Box::new(move |ctx| {
            let xshape = ctx.parents[0].shape().to_vec();
            let (h, w) = (xshape[2], xshape[3]);
            let g4 = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
            let mut dx = ArrayD::zeros(IxDyn(&xshape));
            for bi in 0..xshape[0] {
                for ci in 0..xshape[1] {
                    for oy in 0..g4.dim().2 {
                        for ox in 0..g4.dim().3 {
                            let denom = if count_include_pad {
                                (k * k) as f64
                            } else {
                                let mut cnt = 0usize;
                                for ky in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix >= 0 && ix < w as isize {
                                            cnt += 1;
                                        }
                                    }
                                }
                                cnt.max(1) as f64
                            };
                            let share = g4[[bi, ci, oy, ox]] / denom;
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix >= 0 && ix < w as isize {
                                        dx[[bi, ci, iy as usize, ix as usize]] += share;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![dx]
        }),
    )
}

/// Plain stride-1 box mean with zero padding and constant k² denominator,
/// via an integral image. Non-differentiable helper for mask weighting.
pub fn box_mean_same(x: &ndarray::Array2<f64>, k: usize) -> ndarray::Array2<f64> {
    assert!(k % 2 == 1, "box_mean_same expects odd k");
    let (h, w) = x.dim();
    let r = (k / 2) as isize;
    // integral[i][j] = sum of x[0..i, 0..j]
    let mut integral = ndarray::Array2::<f64>::zeros((h + 1, w + 1));
    for i in 0..h {
        let mut rowsum = 0.0;
        for j in 0..w {
            rowsum += x[[i, j]];
            integral[[i + 1, j + 1]] = integral[[i, j + 1]] + rowsum;
        }
    }
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize) as usize;
    let mut out = ndarray::Array2::<f64>::zeros((h, w));
    let denom = (k * k) as f64;
    for i in 0..h {
        let y0 = clamp(i as isize - r, h);
        let y1 = clamp(i as isize + r + 1, h);
        for j in 0..w {
            let x0 = clamp(j as isize - r, w);
            let x1 = clamp(j as isize + r + 1, w);
            let s = integral[[y1, x1]] - integral[[y0, x1]] - integral[[y1, x0]]
                + integral[[y0, x0]];
            out[[i, j]] = s / denom;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use ndarray::IxDyn;

    #[test]
    fn conv_identity_kernel() {
        let t = Tape::new();
        let x = t.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1., 2., 3., 4.]).unwrap(),
        );
        let w = t.constant(ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 1]), vec![2.0]).unwrap());
        let y = conv2d(x, w, 1, (0, 0), 1);
        assert_eq!(y.value().as_slice().unwrap(), &[2., 4., 6., 8.]);
        let g = t.backward(y.sum_all());
        assert_eq!(g.wrt(w).unwrap()[[0, 0, 0, 0]], 10.0);
        assert_eq!(g.wrt(x).unwrap()[[0, 0, 0, 0]], 2.0);
    }

    #[test]
    fn conv_3x3_hand_value() {
        let t = Tape::new();
        let x = t.constant(ArrayD::from_shape_vec(
            IxDyn(&[1, 1, 3, 3]),
            (1..=9).map(|v| v as f64).collect(),
        )
        .unwrap());
        let w = t.constant(ArrayD::ones(IxDyn(&[1, 1, 3, 3])));
        let y = conv2d(x, w, 1, (1, 1), 1);
        // center output = sum 1..9 = 45; corner (0,0) covers {1,2,4,5} = 12
        let v = y.value();
        assert_eq!(v[[0, 0, 1, 1]], 45.0);
        assert_eq!(v[[0, 0, 0, 0]], 12.0);
        assert_eq!(v.shape(), &[1, 1, 3, 3]);
    }

    #[test]
    fn dilated_conv_output_dims() {
        let t = Tape::new();
        let x = t.constant(ArrayD::zeros(IxDyn(&[1, 2, 11, 11])));
        let w = t.constant(ArrayD::zeros(IxDyn(&[4, 2, 3, 3])));
        for d in [1usize, 3, 5, 7] {
            let y = conv2d(x, w, 1, (d, d), d);
            assert_eq!(y.shape(), vec![1, 4, 11, 11], "dilation {d}");
        }
    }

    #[test]
    fn strided_conv_dims() {
        let t = Tape::new();
        let x = t.constant(ArrayD::zeros(IxDyn(&[2, 3, 32, 32])));
        let w = t.constant(ArrayD::zeros(IxDyn(&[8, 3, 7, 7])));
        let y = conv2d(x, w, 2, (3, 3), 1);
        assert_eq!(y.shape(), vec![2, 8, 16, 16]);
    }

    #[test]
    fn avg_pool_downsample() {
        let t = Tape::new();
        let x = t.constant(ArrayD::from_shape_vec(
            IxDyn(&[1, 1, 2, 2]),
            vec![1., 2., 3., 4.],
        )
        .unwrap());
        let y = avg_pool2d(x, 2, 2, 0, true);
        assert_eq!(y.value()[[0, 0, 0, 0]], 2.5);
        let g = t.backward(y.sum_all());
        assert_eq!(g.wrt(x).unwrap()[[0, 0, 0, 0]], 0.25);
    }

    #[test]
    fn box_mean_matches_isolated_pixel_case() {
        let mut m = ndarray::Array2::<f64>::zeros((31, 31));
        m[[15, 15]] = 1.0;
        let pooled = box_mean_same(&m, 31);
        assert!((pooled[[15, 15]] - 1.0 / 961.0).abs() < 1e-15);
        // uniform field pools to itself away from edges only when padded by
        // zeros; the all-ones center of a large field is exactly 1
        let ones = ndarray::Array2::<f64>::ones((65, 65));
        let pooled = box_mean_same(&ones, 31);
        assert!((pooled[[32, 32]] - 1.0).abs() < 1e-12);
        assert!(pooled[[0, 0]] < 1.0);
    }

    #[test]
    fn box_mean_matches_brute_force() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (h, w, k) = (9, 7, 5);
        let x = ndarray::Array2::from_shape_fn((h, w), |_| rng.random::<f64>());
        let fast = box_mean_same(&x, k);
        let r = (k / 2) as isize;
        for i in 0..h {
            for j in 0..w {
                let mut s = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (y, x2) = (i as isize + dy, j as isize + dx);
                        if y >= 0 && y < h as isize && x2 >= 0 && x2 < w as isize {
                            s += x[[y as usize, x2 as usize]];
                        }
                    }
                }
                assert!((fast[[i, j]] - s / (k * k) as f64).abs() < 1e-12);
            }
        }
    }
}

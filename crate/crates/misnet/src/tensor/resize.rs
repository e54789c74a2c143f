//! Bilinear resizing: a differentiable NCHW op plus plain-array helpers
//! shared with the data pipeline. Half-pixel centers, no corner alignment.

use super::{ArrayD, Var};
use ndarray::{Array2, Array4, Ix4, IxDyn};

/// Per-axis sample table: indices of the two source taps and their weights.
fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = (d as f64 + 0.5) * scale - 0.5;
            let clamped = pos.max(0.0);
            let i0 = (clamped.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let t = (clamped - i0 as f64).clamp(0.0, 1.0);
            (i0, i1, 1.0 - t, t)
        })
        .collect()
}

/// Differentiable bilinear resize of a (B,C,H,W) value to (out_h, out_w).
pub fn resize_bilinear<'t>(x: Var<'t>, out_h: usize, out_w: usize) -> Var<'t> {
    let xv = x.value();
    let x4 = xv.view().into_dimensionality::<Ix4>().expect("resize input 4-d");
    let (b, c, h, w) = x4.dim();
    if h == out_h && w == out_w {
        // still record a pass-through node so gradients flow
        return x.scale(1.0);
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut y = Array4::<f64>::zeros((b, c, out_h, out_w));
    for bi in 0..b {
        for ci in 0..c {
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    y[[bi, ci, oy, ox]] = wy0 * wx0 * x4[[bi, ci, y0, x0]]
                        + wy0 * wx1 * x4[[bi, ci, y0, x1]]
                        + wy1 * wx0 * x4[[bi, ci, y1, x0]]
                        + wy1 * wx1 * x4[[bi, ci, y1, x1]];
                }
            }
        }
    }
    x.tape().push(
        y.into_dyn(),
        vec![x],
        Box::new(move |ctx| {
            let xshape = ctx.parents[0].shape().to_vec();
            let g4 = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
            let mut dx = ArrayD::zeros(IxDyn(&xshape));
            for bi in 0..xshape[0] {
                for ci in 0..xshape[1] {
                    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                            let g = g4[[bi, ci, oy, ox]];
                            dx[[bi, ci, y0, x0]] += wy0 * wx0 * g;
                            dx[[bi, ci, y0, x1]] += wy0 * wx1 * g;
                            dx[[bi, ci, y1, x0]] += wy1 * wx0 * g;
                            dx[[bi, ci, y1, x1]] += wy1 * wx1 * g;
                        }
                    }
                }
            }
            vec![dx]
        }),
    )
}

/// Plain bilinear resize of one 2-d plane.
pub fn resize_bilinear_plane(x: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = x.dim();
    if h == out_h && w == out_w {
        return x.clone();
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let (y0, y1, wy0, wy1) = ty[oy];
        let (x0, x1, wx0, wx1) = tx[ox];
        wy0 * wx0 * x[[y0, x0]] + wy0 * wx1 * x[[y0, x1]] + wy1 * wx0 * x[[y1, x0]]
            + wy1 * wx1 * x[[y1, x1]]
    })
}

/// Plain nearest-neighbor resize of one 2-d plane (half-pixel mapping).
pub fn resize_nearest_plane(x: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = x.dim();
    if h == out_h && w == out_w {
        return x.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let iy = (((oy as f64 + 0.5) * sy).floor() as usize).min(h - 1);
        let ix = (((ox as f64 + 0.5) * sx).floor() as usize).min(w - 1);
        x[[iy, ix]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn upsample_constant_stays_constant() {
        let t = Tape::new();
        let x = t.constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 3.5));
        let y = resize_bilinear(x, 5, 7);
        assert_eq!(y.shape(), vec![1, 1, 5, 7]);
        for &v in y.value().iter() {
            assert!((v - 3.5).abs() < 1e-12);
        }
    }

    #[test]
    fn doubling_preserves_samples_under_half_pixel_rule() {
        let t = Tape::new();
        let x = t.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![0., 1., 2., 3.]).unwrap(),
        );
        let y = resize_bilinear(x, 4, 4);
        let v = y.value();
        // corners replicate the source corners exactly (taps clamp)
        assert!((v[[0, 0, 0, 0]] - 0.0).abs() < 1e-12);
        assert!((v[[0, 0, 3, 3]] - 3.0).abs() < 1e-12);
        // center interpolates the mean
        let mid = 0.25 * (v[[0, 0, 1, 1]] + v[[0, 0, 1, 2]] + v[[0, 0, 2, 1]] + v[[0, 0, 2, 2]]);
        assert!((mid - 1.5).abs() < 1e-12);
    }

    #[test]
    fn resize_gradient_is_adjoint() {
        // <resize(x), g> == <x, resize_backward(g)> for random pairs
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let t = Tape::new();
        let xv = ArrayD::from_shape_fn(IxDyn(&[1, 1, 3, 5]), |_| rng.random::<f64>());
        let gv = ArrayD::from_shape_fn(IxDyn(&[1, 1, 7, 4]), |_| rng.random::<f64>());
        let x = t.constant(xv.clone());
        let y = resize_bilinear(x, 7, 4);
        let weighted = y.mul(t.constant(gv.clone())).sum_all();
        let lhs = weighted.scalar();
        let grads = t.backward(weighted);
        let gx = grads.wrt(x).unwrap();
        let rhs: f64 = (gx * &xv).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn nearest_plane_picks_expected_cells() {
        let x = Array2::from_shape_vec((2, 2), vec![1., 2., 3., 4.]).unwrap();
        let y = resize_nearest_plane(&x, 4, 4);
        assert_eq!(y[[0, 0]], 1.0);
        assert_eq!(y[[0, 3]], 2.0);
        assert_eq!(y[[3, 0]], 3.0);
        assert_eq!(y[[3, 3]], 4.0);
    }
}

//! Training objective: border-emphasizing pixel weights, weighted BCE and
//! IoU parts, the deep-supervision total, and the polynomial lr schedule.

use crate::decoder::SideOutputs;
use crate::error::{Error, Result};
use crate::tensor::{box_mean_same, resize_bilinear, Var};
use crate::types::BinaryMask;
use ndarray::{Array2, ArrayD};

/// Box window used for the pixel weight map.
pub const WEIGHT_WINDOW: usize = 31;
/// Multiplier on the local contrast term of the pixel weight.
pub const WEIGHT_MULTIPLIER: f64 = 5.0;

/// Per-pixel emphasis 1 + mult*|box_mean_k(G) - G|: pixels that disagree
/// with their neighborhood average (i.e. boundaries) weigh up to 1 + mult.
pub fn pixel_weight(mask: &BinaryMask, k: usize, multiplier: f64) -> Array2<f64> {
    let g = mask.data();
    let pooled = box_mean_same(g, k);
    let mut w = pooled - g;
    w.mapv_inplace(|v| 1.0 + multiplier * v.abs());
    w
}

/// Weight-averaged binary cross entropy on logits, in the stable softplus
/// form: sum(w * (softplus(x) - x*G)) / sum(w).
pub fn weighted_bce<'t>(logits: Var<'t>, g: &ArrayD<f64>, omega: &ArrayD<f64>) -> Var<'t> {
    let t = logits.tape();
    let gv = t.constant(g.clone());
    let ov = t.constant(omega.clone());
    let ell = logits.softplus().sub(logits.mul(gv));
    ov.mul(ell).sum_all().div(ov.sum_all())
}

/// Weighted soft IoU loss 1 - (sum(w*p*G)+1)/(sum(w*(p+G-p*G))+1). The
/// weights are normalized to unit mean first so a uniform rescaling of
/// omega cannot move the loss (doubling is exactly invariant in floats).
pub fn weighted_iou<'t>(logits: Var<'t>, g: &ArrayD<f64>, omega: &ArrayD<f64>) -> Var<'t> {
    let t = logits.tape();
    let scale = omega.len() as f64 / omega.sum();
    let om_hat = t.constant(omega.mapv(|v| v * scale));
    let gv = t.constant(g.clone());
    let p = logits.sigmoid();
    let pg = p.mul(gv);
    let inter = om_hat.mul(pg).sum_all();
    let union = om_hat.mul(p.add(gv).sub(pg)).sum_all();
    inter
        .add_scalar(1.0)
        .div(union.add_scalar(1.0))
        .neg()
        .add_scalar(1.0)
}

/// Loss breakdown for one step. `total` always equals fuse+l5+l4+l3 exactly
/// (same summation order as the differentiable total).
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub total: f64,
    pub fuse: f64,
    pub l5: f64,
    pub l4: f64,
    pub l3: f64,
    pub bce_part: f64,
    pub iou_part: f64,
}

/// Deep-supervision loss: every side map is resized to the mask resolution
/// and scored with weighted BCE + IoU per sample; per-map losses are batch
/// means and the total is their sum. Returns the differentiable total and
/// the numeric breakdown.
pub fn total_loss<'t>(
    outputs: &SideOutputs<'t>,
    targets: &[BinaryMask],
) -> Result<(Var<'t>, LossReport)> {
    if targets.is_empty() {
        return Err(Error::shape("loss needs at least one target mask".to_string()));
    }
    let (gh, gw) = targets[0].data().dim();
    for m in targets {
        if m.data().dim() != (gh, gw) {
            return Err(Error::shape("target masks must share one resolution".to_string()));
        }
    }
    let bsz = targets.len();
    let prepared: Vec<(ArrayD<f64>, ArrayD<f64>)> = targets
        .iter()
        .map(|m| {
            let g = m.data().clone().into_dyn();
            let w = pixel_weight(m, WEIGHT_WINDOW, WEIGHT_MULTIPLIER).into_dyn();
            (g, w)
        })
        .collect();

    let mut map_vars: Vec<Var<'t>> = Vec::with_capacity(4);
    let mut bce_part = 0.0;
    let mut iou_part = 0.0;
    for (_, logits) in outputs.supervised() {
        let up = resize_bilinear(logits, gh, gw);
        let mut acc: Option<Var<'t>> = None;
        for (b, (g, w)) in prepared.iter().enumerate() {
            if !up.value().iter().all(|v| v.is_finite()) {
                return Err(Error::shape("non-finite logits in supervised map".to_string()));
            }
            let lb = up.narrow(0, b, 1).reshape(&[gh, gw]);
            let bce = weighted_bce(lb, g, w);
            let iou = weighted_iou(lb, g, w);
            bce_part += bce.scalar();
            iou_part += iou.scalar();
            let s = bce.add(iou);
            acc = Some(match acc {
                Some(a) => a.add(s),
                None => s,
            });
        }
        map_vars.push(acc.unwrap().scale(1.0 / bsz as f64));
    }
    let total_var = map_vars[1..]
        .iter()
        .fold(map_vars[0], |a, b| a.add(*b));
    let report = LossReport {
        total: total_var.scalar(),
        fuse: map_vars[0].scalar(),
        l5: map_vars[1].scalar(),
        l4: map_vars[2].scalar(),
        l3: map_vars[3].scalar(),
        bce_part: bce_part / bsz as f64,
        iou_part: iou_part / bsz as f64,
    };
    Ok((total_var, report))
}

/// Polynomial decay lr = base * (1 - epoch/total)^power.
pub fn poly_lr(epoch: usize, total_epochs: usize, base_lr: f64, power: f64) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(Error::config(format!(
            "epoch {epoch} out of range for {total_epochs} total epochs"
        )));
    }
    Ok(base_lr * (1.0 - epoch as f64 / total_epochs as f64).powf(power))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pixel_weight_uniform_masks() {
        let m = BinaryMask::new(Array2::zeros((9, 9))).unwrap();
        let w = pixel_weight(&m, 31, 5.0);
        assert!(w.iter().all(|&v| v == 1.0));
        // interior of a large all-ones mask sees a full window of ones
        let m = BinaryMask::new(Array2::ones((65, 65))).unwrap();
        let w = pixel_weight(&m, 31, 5.0);
        assert!((w[[32, 32]] - 1.0).abs() < 1e-12);
        // while its corner is dominated by the zero padding
        assert!(w[[0, 0]] > 1.0);
    }

    #[test]
    fn pixel_weight_isolated_pixel() {
        let mut g = Array2::zeros((31, 31));
        g[[15, 15]] = 1.0;
        let m = BinaryMask::new(g).unwrap();
        let w = pixel_weight(&m, 31, 5.0);
        let want = 1.0 + 5.0 * (1.0 - 1.0 / 961.0);
        assert!((w[[15, 15]] - want).abs() < 1e-12);
        assert!((want - 5.994797086368366).abs() < 1e-12);
    }

    #[test]
    fn pixel_weight_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let g = Array2::from_shape_fn((8, 8), |_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 });
            let m = BinaryMask::new(g).unwrap();
            let w = pixel_weight(&m, 31, 5.0);
            assert!(w.iter().all(|&v| (1.0..=6.0).contains(&v)));
        }
    }

    #[test]
    fn bce_known_values() {
        let t = Tape::eval();
        let g = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1., 0., 1., 0.]).unwrap();
        let ones = ArrayD::ones(IxDyn(&[2, 2]));

        let perfect = t.constant(g.mapv(|v| if v > 0.5 { 100.0 } else { -100.0 }));
        assert!(weighted_bce(perfect, &g, &ones).scalar() < 1e-6);

        let zero = t.constant(ArrayD::zeros(IxDyn(&[2, 2])));
        let l = weighted_bce(zero, &g, &ones).scalar();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_matches_pixel_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let g = ArrayD::from_shape_fn(IxDyn(&[4, 4]), |_| {
                if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 }
            });
            let w = ArrayD::from_shape_fn(IxDyn(&[4, 4]), |_| 1.0 + 5.0 * rng.random::<f64>());
            let x = ArrayD::from_shape_fn(IxDyn(&[4, 4]), |_| rng.random::<f64>() * 8.0 - 4.0);
            let t = Tape::eval();
            let got = weighted_bce(t.constant(x.clone()), &g, &w).scalar();
            let mut num = 0.0;
            let mut den = 0.0;
            for ((xv, gv), wv) in x.iter().zip(g.iter()).zip(w.iter()) {
                let p = 1.0 / (1.0 + (-xv).exp());
                let ell = -(gv * p.ln() + (1.0 - gv) * (1.0 - p).ln());
                num += wv * ell;
                den += wv;
            }
            assert!((got - num / den).abs() < 1e-9, "got {got} want {}", num / den);
        }
    }

    #[test]
    fn iou_known_values_and_oracle() {
        let t = Tape::eval();
        let g = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1., 0., 1., 1.]).unwrap();
        let ones = ArrayD::ones(IxDyn(&[2, 2]));
        let perfect = t.constant(g.mapv(|v| if v > 0.5 { 100.0 } else { -100.0 }));
        assert!(weighted_iou(perfect, &g, &ones).scalar() < 1e-4);

        // vanishing prediction on a nonempty mask: loss = sum(wG)/(sum(wG)+1)
        let empty = t.constant(ArrayD::from_elem(IxDyn(&[2, 2]), -100.0));
        let l = weighted_iou(empty, &g, &ones).scalar();
        assert!((l - 3.0 / 4.0).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let g = ArrayD::from_shape_fn(IxDyn(&[4, 4]), |_| {
                if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 }
            });
            let w = ArrayD::from_shape_fn(IxDyn(&[4, 4]), |_| 1.0 + 5.0 * rng.random::<f64>());
            let x = ArrayD::from_shape_fn(IxDyn(&[4, 4]), |_| rng.random::<f64>() * 8.0 - 4.0);
            let got = weighted_iou(t.constant(x.clone()), &g, &w).scalar();
            let scale = 16.0 / w.sum();
            let mut inter = 0.0;
            let mut union = 0.0;
            for ((xv, gv), wv) in x.iter().zip(g.iter()).zip(w.iter()) {
                let p = 1.0 / (1.0 + (-xv).exp());
                let wh = wv * scale;
                inter += wh * p * gv;
                union += wh * (p + gv - p * gv);
            }
            let want = 1.0 - (inter + 1.0) / (union + 1.0);
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn doubling_weights_is_exactly_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let g = ArrayD::from_shape_fn(IxDyn(&[5, 5]), |_| {
                if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 }
            });
            let w = ArrayD::from_shape_fn(IxDyn(&[5, 5]), |_| 1.0 + 5.0 * rng.random::<f64>());
            let w2 = w.mapv(|v| 2.0 * v);
            let x = ArrayD::from_shape_fn(IxDyn(&[5, 5]), |_| rng.random::<f64>() * 6.0 - 3.0);
            let t = Tape::eval();
            let xv = t.constant(x.clone());
            assert_eq!(
                weighted_bce(xv, &g, &w).scalar(),
                weighted_bce(xv, &g, &w2).scalar(),
                "bce must be bitwise invariant under weight doubling"
            );
            assert_eq!(
                weighted_iou(xv, &g, &w).scalar(),
                weighted_iou(xv, &g, &w2).scalar(),
                "iou must be bitwise invariant under weight doubling"
            );
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        use crate::tensor::gradcheck::check_input_grads;
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let g = ArrayD::from_shape_fn(IxDyn(&[4, 4]), |_| {
            if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 }
        });
        let w = ArrayD::from_shape_fn(IxDyn(&[4, 4]), |_| 1.0 + 5.0 * rng.random::<f64>());
        let x = ArrayD::from_shape_fn(IxDyn(&[4, 4]), |_| rng.random::<f64>() * 4.0 - 2.0);
        let worst = check_input_grads(
            &[x],
            &|_, vars| weighted_bce(vars[0], &g, &w).add(weighted_iou(vars[0], &g, &w)),
            0,
            23,
        );
        assert!(worst < 1e-4, "worst rel err {worst}");
    }

    #[test]
    fn total_loss_sums_parts_and_respects_floor() {
        use crate::config::ModelConfig;
        use crate::decoder::MisNet;
        use crate::types::ImageBatch;
        use ndarray::Array4;
        let cfg = ModelConfig { backbone_id: "toy".to_string(), ..ModelConfig::default() };
        let net = MisNet::new(&cfg, 3).unwrap();
        let batch = ImageBatch::new(Array4::from_shape_fn((2, 3, 32, 32), |(b, c, y, x)| {
            ((b + c * 3 + y * 5 + x * 7) % 13) as f64 / 13.0
        }))
        .unwrap();
        let t = Tape::eval();
        let x = t.constant(net.descriptor().normalize(&batch));
        let out = net.forward(&t, x, false);
        let masks: Vec<BinaryMask> = (0..2)
            .map(|i| {
                BinaryMask::new(Array2::from_shape_fn((32, 32), |(y, xx)| {
                    if (y + xx + i) % 3 == 0 { 1.0 } else { 0.0 }
                }))
                .unwrap()
            })
            .collect();
        let (var, rep) = total_loss(&out, &masks).unwrap();
        assert_eq!(var.scalar(), rep.total);
        assert_eq!(rep.total, rep.fuse + rep.l5 + rep.l4 + rep.l3);
        assert!(rep.total >= 0.0);
        assert!(rep.bce_part >= 0.0 && rep.iou_part >= 0.0);
    }

    #[test]
    fn saturated_logits_drive_total_loss_to_zero() {
        // synthetic side outputs: all four maps already at mask resolution
        let g = Array2::from_shape_fn((8, 8), |(y, x)| if y >= 4 && x >= 2 { 1.0 } else { 0.0 });
        let mask = BinaryMask::new(g.clone()).unwrap();
        let t = Tape::eval();
        let logits = t.constant(
            g.mapv(|v| if v > 0.5 { 60.0 } else { -60.0 })
                .into_dyn()
                .into_shape_with_order(IxDyn(&[1, 1, 8, 8]))
                .unwrap(),
        );
        let outputs = SideOutputs {
            m_fuse: logits,
            m5: logits,
            m4: logits,
            m3: logits,
            final_prob: logits.sigmoid(),
            selection: None,
        };
        let (_, rep) = total_loss(&outputs, &[mask]).unwrap();
        assert!(rep.total < 1e-3, "saturated loss {}", rep.total);
    }

    #[test]
    fn poly_lr_schedule_values() {
        assert_eq!(poly_lr(0, 300, 1e-5, 0.9).unwrap(), 1e-5);
        let mid = poly_lr(150, 300, 1e-5, 0.9).unwrap();
        assert!((mid - 5.358867312681466e-6).abs() < 1e-18);
        let last = poly_lr(299, 300, 1e-5, 0.9).unwrap();
        assert!((last - 5.8965e-8).abs() < 1e-12);
        assert!(poly_lr(300, 300, 1e-5, 0.9).is_err());
        let mut prev = f64::INFINITY;
        for e in 0..300 {
            let lr = poly_lr(e, 300, 1e-5, 0.9).unwrap();
            assert!(lr < prev);
            prev = lr;
        }
    }
}

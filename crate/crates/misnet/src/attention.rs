//! Axial attention plus the parallel reverse / boundary attention module
//! applied to the three deep feature levels.

use crate::nn::{Conv2d, ConvBn, ParamRegistry};
use crate::tensor::{concat, resize_bilinear, Tape, Var};

/// Single-head attention along image rows and columns with shared 1x1
/// query/key/value projections. The two axis passes are summed.
pub struct AxialAttention {
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    channels: usize,
}

impl AxialAttention {
    pub fn new(reg: &ParamRegistry, name: &str, c: usize) -> AxialAttention {
        let proj = |n: &str| Conv2d::new(reg, &format!("{name}.{n}"), c, c, (1, 1), 1, (0, 0), 1, false);
        AxialAttention { q: proj("q"), k: proj("k"), v: proj("v"), channels: c }
    }

    /// Scaled dot-product attention over one axis. `seq_layout` carries
    /// (B,*,len,C) where * is the non-attended spatial axis.
    fn attend<'t>(&self, qm: Var<'t>, km: Var<'t>, vm: Var<'t>) -> Var<'t> {
        let shape = qm.shape();
        let (b, o, len, c) = (shape[0], shape[1], shape[2], shape[3]);
        let flat = |v: Var<'t>| v.reshape(&[b * o, len, c]);
        let scale = 1.0 / (self.channels as f64).sqrt();
        let scores = flat(qm).bmm(flat(km), true).scale(scale).softmax_last();
        scores.bmm(flat(vm), false).reshape(&[b, o, len, c])
    }

    /// Attention along rows (keys range over the width axis).
    pub fn horizontal<'t>(&self, t: &'t Tape, x: Var<'t>) -> Var<'t> {
        let to_rows = |v: Var<'t>| v.permute(&[0, 2, 3, 1]); // (B,H,W,C)
        let qm = to_rows(self.q.forward(t, x));
        let km = to_rows(self.k.forward(t, x));
        let vm = to_rows(self.v.forward(t, x));
        self.attend(qm, km, vm).permute(&[0, 3, 1, 2])
    }

    /// Attention along columns (keys range over the height axis).
    pub fn vertical<'t>(&self, t: &'t Tape, x: Var<'t>) -> Var<'t> {
        let to_cols = |v: Var<'t>| v.permute(&[0, 3, 2, 1]); // (B,W,H,C)
        let qm = to_cols(self.q.forward(t, x));
        let km = to_cols(self.k.forward(t, x));
        let vm = to_cols(self.v.forward(t, x));
        self.attend(qm, km, vm).permute(&[0, 3, 2, 1])
    }

    pub fn forward<'t>(&self, t: &'t Tape, x: Var<'t>) -> Var<'t> {
        self.horizontal(t, x).add(self.vertical(t, x))
    }
}

/// r = 1 - sigmoid(resized logits): large where the prior misses.
pub fn reverse_weight<'t>(m_next: Var<'t>, target_hw: (usize, usize)) -> Var<'t> {
    resize_bilinear(m_next, target_hw.0, target_hw.1)
        .sigmoid()
        .neg()
        .add_scalar(1.0)
}

/// b = 1 - |sigmoid(resized logits) - 0.5| / 0.5: peaks where the prior is
/// least certain, zero where it is saturated.
pub fn boundary_weight<'t>(m_next: Var<'t>, target_hw: (usize, usize)) -> Var<'t> {
    resize_bilinear(m_next, target_hw.0, target_hw.1)
        .sigmoid()
        .add_scalar(-0.5)
        .abs()
        .scale(-2.0)
        .add_scalar(1.0)
}

/// Attention products for one level: the weight maps actually applied and
/// the fused branch feature.
pub struct AttentionBundle<'t> {
    pub r: Option<Var<'t>>,
    pub b: Option<Var<'t>>,
    pub f_rb: Var<'t>,
}

/// Parallel attention over one level: a shared axial pass feeds a
/// reverse-weighted branch and a boundary-weighted branch (each residual
/// against the input), which are compressed and concatenated. Single-branch
/// configurations compress straight to the full channel count.
pub struct Pam {
    pub(crate) axial: AxialAttention,
    comp_r: Option<ConvBn>,
    comp_b: Option<ConvBn>,
}

impl Pam {
    /// `use_ra` / `use_ba` select the branches; at least one must be on and
    /// dual-branch use requires even `c` (enforced by config validation).
    pub fn new(reg: &ParamRegistry, name: &str, c: usize, use_ra: bool, use_ba: bool) -> Pam {
        assert!(use_ra || use_ba, "attention module needs at least one branch");
        let dual = use_ra && use_ba;
        if dual {
            assert!(c % 2 == 0, "dual-branch attention needs even channels, got {c}");
        }
        let cout = if dual { c / 2 } else { c };
        let comp = |n: &str| ConvBn::new(reg, &format!("{name}.{n}"), c, cout, (3, 3), 1, (1, 1), 1, true);
        Pam {
            axial: AxialAttention::new(reg, &format!("{name}.axial"), c),
            comp_r: use_ra.then(|| comp("comp_r")),
            comp_b: use_ba.then(|| comp("comp_b")),
        }
    }

    pub fn forward<'t>(&self, t: &'t Tape, f: Var<'t>, m_next: Var<'t>, train: bool) -> AttentionBundle<'t> {
        let hw = (f.shape()[2], f.shape()[3]);
        let ff = self.axial.forward(t, f);
        let mut r_out = None;
        let mut b_out = None;
        let mut parts = Vec::with_capacity(2);
        if let Some(comp) = &self.comp_r {
            let r = reverse_weight(m_next, hw);
            parts.push(comp.forward(t, ff.mul(r).add(f), train));
            r_out = Some(r);
        }
        if let Some(comp) = &self.comp_b {
            let b = boundary_weight(m_next, hw);
            parts.push(comp.forward(t, ff.mul(b).add(f), train));
            b_out = Some(b);
        }
        let f_rb = if parts.len() == 2 { concat(1, &parts) } else { parts[0] };
        AttentionBundle { r: r_out, b: b_out, f_rb }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_param_grads;
    use ndarray::{ArrayD, IxDyn};

    fn seq_array(shape: &[usize], scale: f64, offset: f64) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|i| ((i * 2654435761) % 97) as f64 / 97.0 * scale + offset).collect();
        ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
    }

    #[test]
    fn singleton_spatial_attention_doubles_value_projection() {
        let reg = ParamRegistry::new(1);
        let ax = AxialAttention::new(&reg, "ax", 4);
        let t = Tape::eval();
        let x = t.constant(seq_array(&[2, 4, 1, 1], 1.0, -0.5));
        let ff = ax.forward(&t, x);
        let v = ax.v.forward(&t, x);
        let want = v.value().to_owned() * 2.0;
        for (a, b) in ff.value().iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn row_constant_input_keeps_horizontal_output_row_constant() {
        let reg = ParamRegistry::new(2);
        let ax = AxialAttention::new(&reg, "ax", 3);
        let t = Tape::eval();
        // every row holds one value per channel; columns differ
        let x = t.constant(ArrayD::from_shape_fn(IxDyn(&[1, 3, 4, 5]), |ix| {
            (ix[1] * 3 + ix[2]) as f64 * 0.25 - 0.7
        }));
        let hor = ax.horizontal(&t, x);
        let hv = hor.value();
        for c in 0..3 {
            for y in 0..4 {
                let first = hv[[0, c, y, 0]];
                for xw in 1..5 {
                    assert!((hv[[0, c, y, xw]] - first).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn axial_output_matches_input_shape() {
        let reg = ParamRegistry::new(3);
        let ax = AxialAttention::new(&reg, "ax", 6);
        let t = Tape::eval();
        let x = t.constant(seq_array(&[2, 6, 3, 7], 1.0, 0.0));
        assert_eq!(ax.forward(&t, x).shape(), vec![2, 6, 3, 7]);
    }

    #[test]
    fn reverse_weight_identities() {
        let t = Tape::eval();
        let zero = t.constant(ArrayD::zeros(IxDyn(&[1, 1, 2, 2])));
        let r = reverse_weight(zero, (2, 2));
        assert!(r.value().iter().all(|&v| (v - 0.5).abs() < 1e-15));

        let m3 = t.constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), -3.0));
        let r = reverse_weight(m3, (2, 2));
        let want = 1.0 - 1.0 / (1.0 + 3.0f64.exp());
        assert!(r.value().iter().all(|&v| (v - want).abs() < 1e-12));
        assert!((want - 0.9525741268224334).abs() < 1e-12);

        let big = t.constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 100.0));
        let r = reverse_weight(big, (2, 2));
        assert!(r.value().iter().all(|&v| v.abs() < 1e-30));

        // algebraic identity r + sigmoid(u) = 1
        let m = t.constant(seq_array(&[1, 1, 3, 3], 6.0, -3.0));
        let r = reverse_weight(m, (3, 3));
        let s = crate::tensor::resize_bilinear(m, 3, 3).sigmoid();
        for (a, b) in r.value().iter().zip(s.value().iter()) {
            assert_eq!(a + b, 1.0);
        }
    }

    #[test]
    fn boundary_weight_identities() {
        let t = Tape::eval();
        let zero = t.constant(ArrayD::zeros(IxDyn(&[1, 1, 2, 2])));
        let b = boundary_weight(zero, (2, 2));
        assert!(b.value().iter().all(|&v| (v - 1.0).abs() < 1e-15));

        // sigmoid(ln 3) = 0.75 exactly up to rounding
        let l = t.constant(ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 3.0f64.ln()));
        let b = boundary_weight(l, (1, 1));
        assert!((b.value()[[0, 0, 0, 0]] - 0.5).abs() < 1e-12);

        let big = t.constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 100.0));
        let b = boundary_weight(big, (2, 2));
        assert!(b.value().iter().all(|&v| v.abs() < 1e-12));
        let bigneg = t.constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), -100.0));
        let b = boundary_weight(bigneg, (2, 2));
        assert!(b.value().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn saturated_prior_passes_branch_features_through() {
        let reg = ParamRegistry::new(4);
        let pam = Pam::new(&reg, "pam", 4, true, true);
        let t = Tape::eval();
        let f = t.constant(seq_array(&[1, 4, 3, 3], 1.0, -0.2));
        let prior = t.constant(ArrayD::from_elem(IxDyn(&[1, 1, 3, 3]), 100.0));
        let bundle = pam.forward(&t, f, prior, false);
        assert!(bundle.r.unwrap().value().iter().all(|&v| v == 0.0));
        assert!(bundle.b.unwrap().value().iter().all(|&v| v == 0.0));
        // with both weights exactly zero the branch inputs equal f exactly
        let ff = pam.axial.forward(&t, f);
        let r = reverse_weight(prior, (3, 3));
        let branch_in = ff.mul(r).add(f);
        assert_eq!(branch_in.value().to_owned(), f.value().to_owned());
    }

    #[test]
    fn pam_output_shapes_across_branch_configs() {
        let t = Tape::eval();
        let f = |reg: &ParamRegistry| -> ArrayD<f64> {
            let _ = reg;
            seq_array(&[2, 8, 4, 4], 1.0, 0.0)
        };
        for (ra, ba) in [(true, true), (true, false), (false, true)] {
            let reg = ParamRegistry::new(5);
            let pam = Pam::new(&reg, "pam", 8, ra, ba);
            let x = t.constant(f(&reg));
            let prior = t.constant(seq_array(&[2, 1, 2, 2], 2.0, -1.0));
            let bundle = pam.forward(&t, x, prior, false);
            assert_eq!(bundle.f_rb.shape(), vec![2, 8, 4, 4], "ra={ra} ba={ba}");
            assert_eq!(bundle.r.is_some(), ra);
            assert_eq!(bundle.b.is_some(), ba);
        }
    }

    #[test]
    fn pam_gradients() {
        let reg = ParamRegistry::new(6);
        let pam = Pam::new(&reg, "pam", 4, true, true);
        let fv = seq_array(&[2, 4, 3, 3], 1.0, -0.4);
        let pv = seq_array(&[2, 1, 2, 2], 2.0, -1.0);
        let params = reg.params();
        let worst = check_param_grads(
            &params,
            &|t: &Tape| {
                let f = t.constant(fv.clone());
                let p = t.constant(pv.clone());
                pam.forward(t, f, p, true).f_rb.square().mean_all()
            },
            2,
            7,
        );
        assert!(worst < 1e-3, "worst rel err {worst}");
    }
}

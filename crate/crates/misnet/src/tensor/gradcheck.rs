//! Central finite-difference verification of tape gradients.
//!
//! Each probed coordinate is perturbed by ±h (h scaled to the coordinate's
//! magnitude) and the scalar objective is re-evaluated on fresh tapes; the
//! two-sided quotient is compared against the analytic gradient. Relative
//! error uses a small absolute floor so coordinates whose true gradient is
//! below finite-difference resolution do not register as spurious failures.

use super::{ArrayD, Parameter, Tape, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(FLOOR)
}

fn probe_positions(len: usize, probes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if probes == 0 || probes >= len {
        (0..len).collect()
    } else {
        let mut picks: Vec<usize> = (0..probes).map(|_| rng.random_range(0..len)).collect();
        picks.sort_unstable();
        picks.dedup();
        picks
    }
}

/// Checks d(scalar f)/d(inputs). Returns the worst relative error.
/// `probes` limits coordinates checked per input (0 = all).
pub fn check_input_grads(
    inputs: &[ArrayD],
    f: &dyn for<'a> Fn(&'a Tape, &[Var<'a>]) -> Var<'a>,
    probes: usize,
    seed: u64,
) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let loss = f(&tape, &vars);
    assert_eq!(loss.value().len(), 1, "objective must be scalar");
    let grads = tape.backward(loss);
    let analytic: Vec<ArrayD> = vars
        .iter()
        .map(|v| {
            grads
                .wrt(*v)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(v.value().raw_dim()))
        })
        .collect();

    let eval = |xs: &[ArrayD]| -> f64 {
        let t = Tape::eval();
        let vars: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        f(&t, &vars).scalar()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut work: Vec<ArrayD> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let flat = input.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| input.iter().cloned().collect());
        for pos in probe_positions(flat.len(), probes, &mut rng) {
            let x0 = flat[pos];
            let h = STEP * x0.abs().max(1.0);
            set_flat(&mut work[i], pos, x0 + h);
            let fp = eval(&work);
            set_flat(&mut work[i], pos, x0 - h);
            let fm = eval(&work);
            set_flat(&mut work[i], pos, x0);
            let fd = (fp - fm) / (2.0 * h);
            let an = flat_get(&analytic[i], pos);
            worst = worst.max(rel_err(an, fd));
        }
    }
    worst
}

/// Checks d(scalar f)/d(params) for parameters used inside `f` via
/// `tape.param(..)`. Returns the worst relative error.
pub fn check_param_grads(
    params: &[Rc<Parameter>],
    f: &dyn for<'a> Fn(&'a Tape) -> Var<'a>,
    probes: usize,
    seed: u64,
) -> f64 {
    for p in params {
        p.zero_grad();
    }
    let tape = Tape::new();
    let loss = f(&tape);
    assert_eq!(loss.value().len(), 1, "objective must be scalar");
    tape.backward(loss);
    let analytic: Vec<ArrayD> = params
        .iter()
        .map(|p| {
            p.grad()
                .unwrap_or_else(|| ArrayD::zeros(ndarray::IxDyn(&p.shape())))
        })
        .collect();

    let eval = || -> f64 {
        let t = Tape::eval();
        f(&t).scalar()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (i, p) in params.iter().enumerate() {
        let original = p.value().to_owned();
        let flat: Vec<f64> = original.iter().cloned().collect();
        for pos in probe_positions(flat.len(), probes, &mut rng) {
            let x0 = flat[pos];
            let h = STEP * x0.abs().max(1.0);
            let mut bumped = original.clone();
            set_flat(&mut bumped, pos, x0 + h);
            p.set_value(bumped.clone());
            let fp = eval();
            set_flat(&mut bumped, pos, x0 - h);
            p.set_value(bumped);
            let fm = eval();
            p.set_value(original.clone());
            let fd = (fp - fm) / (2.0 * h);
            let an = flat_get(&analytic[i], pos);
            worst = worst.max(rel_err(an, fd));
        }
        p.zero_grad();
    }
    worst
}

fn set_flat(a: &mut ArrayD, pos: usize, v: f64) {
    *a.iter_mut().nth(pos).expect("probe position in range") = v;
}

fn flat_get(a: &ArrayD, pos: usize) -> f64 {
    *a.iter().nth(pos).expect("probe position in range")
}

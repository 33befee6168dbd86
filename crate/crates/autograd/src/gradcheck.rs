//! Central finite-difference verification of tape gradients.

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::Data;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Outcome of a finite-difference sweep.
#[derive(Debug)]
pub struct CheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(param index, flat coordinate, analytic, numeric)` of the worst case.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl CheckReport {
    pub fn passes(&self, rtol: f64) -> bool {
        self.max_rel_err <= rtol
    }
}

/// Compares tape gradients of `build(params...)` against central finite
/// differences on up to `samples_per_param` coordinates of each parameter
/// (all coordinates when the parameter is small enough).
///
/// Relative error uses `|a - n| / max(|a|, |n|, floor)` so near-zero
/// gradients are compared on an absolute scale of `floor`.
pub fn check<T, F>(
    params: &[Data<T>],
    build: F,
    eps: f64,
    floor: f64,
    samples_per_param: usize,
    seed: u64,
) -> CheckReport
where
    T: Scalar,
    F: Fn(&Tape<T>, &[Var]) -> Var,
{
    let eval = |ps: &[Data<T>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = build(&tape, &vars);
        tape.scalar(loss).to_f64()
    };

    // Analytic gradients from one tape.
    let analytic: Vec<Data<T>> = {
        let tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = build(&tape, &vars);
        let grads = tape.backward(loss, &vars);
        vars.iter()
            .zip(params)
            .map(|(&v, p)| match grads.var(v) {
                Some(gv) => (*tape.value(gv)).clone(),
                None => Data::zeros(p.raw_dim()),
            })
            .collect()
    };

    let mut rng = StdRng::seed_from_u64(seed);
    let mut work = params.to_vec();
    let mut report = CheckReport { checked: 0, max_rel_err: 0.0, worst: None };
    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = if p.len() <= samples_per_param {
            (0..p.len()).collect()
        } else {
            (0..samples_per_param).map(|_| rng.random_range(0..p.len())).collect()
        };
        for ci in coords {
            let orig = work[pi].as_slice().unwrap()[ci];
            let h = T::from_f64(eps);
            work[pi].as_slice_mut().unwrap()[ci] = orig + h;
            let f_plus = eval(&work);
            work[pi].as_slice_mut().unwrap()[ci] = orig - h;
            let f_minus = eval(&work);
            work[pi].as_slice_mut().unwrap()[ci] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[pi].as_slice().unwrap()[ci].to_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((pi, ci, a, numeric));
            }
        }
    }
    report
}

//! Central finite-difference checks for tape gradients.
//!
//! Used by unit tests and by the acceptance suite; kept in the library so
//! downstream model code can be checked the same way.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is numerically zero do not blow up the ratio.
pub const REL_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.coords.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Compares analytic parameter gradients of a scalar loss against central
/// differences on `n_coords` coordinates drawn uniformly from `params`.
///
/// `loss` must be a pure function of the store (fixed dropout masks, fixed
/// batch composition).
pub fn check_params<F>(
    store: &ParamStore,
    params: &[ParamId],
    n_coords: usize,
    step: f64,
    seed: u64,
    loss: F,
) -> GradCheckReport
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let out = loss(&mut tape, store);
    let grads = tape.backward_scalar(out);
    let analytic: Vec<(ParamId, Mat)> = grads.param_grads(&tape);
    let lookup = |id: ParamId| -> Option<&Mat> {
        analytic.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    };

    let total: usize = params.iter().map(|&p| store.value(p).len()).sum();
    assert!(total > 0, "no coordinates to check");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for _ in 0..n_coords {
        let mut k = rng.random_range(0..total);
        let mut which = params[0];
        for &p in params {
            let n = store.value(p).len();
            if k < n {
                which = p;
                break;
            }
            k -= n;
        }
        let orig = store.value(which).data[k];
        work.value_mut(which).data[k] = orig + step;
        let plus = eval(&work, &loss);
        work.value_mut(which).data[k] = orig - step;
        let minus = eval(&work, &loss);
        work.value_mut(which).data[k] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = lookup(which).map_or(0.0, |g| g.data[k]);
        report.coords.push(CoordCheck {
            param: store.name(which).to_string(),
            index: k,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    report
}

fn eval<F>(store: &ParamStore, loss: &F) -> f64
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let mut t = Tape::new();
    let v = loss(&mut t, store);
    t.value(v).item()
}

/// Checks every coordinate of a single input matrix; panics past `1e-5`.
pub fn check_input_grad<F>(x: &Mat, f: F)
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let mut t = Tape::new();
    let xv = t.input(x.clone());
    let out = f(&mut t, xv);
    let g = t.backward_scalar(out).get_or_zeros(&t, xv);
    let step = 1e-6;
    for k in 0..x.len() {
        let mut xp = x.clone();
        xp.data[k] += step;
        let mut xm = x.clone();
        xm.data[k] -= step;
        let fp = {
            let mut t = Tape::new();
            let v = t.input(xp);
            let o = f(&mut t, v);
            t.value(o).item()
        };
        let fm = {
            let mut t = Tape::new();
            let v = t.input(xm);
            let o = f(&mut t, v);
            t.value(o).item()
        };
        let numeric = (fp - fm) / (2.0 * step);
        let err = (g.data[k] - numeric).abs() / g.data[k].abs().max(numeric.abs()).max(1e-6);
        assert!(
            err < 1e-5,
            "coordinate {k}: analytic {} vs numeric {numeric} (rel {err})",
            g.data[k]
        );
    }
}

pub fn random_mat(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-scale..scale))
            .collect(),
    )
}

//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward pass; it never looks at the
//! backward closures it is validating.
//!
//! A coordinate whose step window contains a kink (ReLU, hinge) makes the
//! central difference meaningless there. Each candidate is therefore probed
//! with a second, ten times smaller step first; when the two differences
//! disagree by more than [`SMOOTHNESS_TOL`] the coordinate is skipped and
//! another one is drawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Result, Tape, Tensor, Var};

/// Default step for central differences in 64-bit mode.
pub const FD_STEP: f64 = 1e-4;
/// Denominator floor for relative error, so exact zeros compare sanely.
pub const REL_FLOOR: f64 = 1e-6;
/// Largest relative gap between the two step sizes for a smooth window.
pub const SMOOTHNESS_TOL: f64 = 1e-4;
/// Random draws allowed per requested coordinate.
const DRAWS_PER_COORD: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    /// Coordinates that had to be compared.
    pub requested: usize,
    pub checked: usize,
    /// Coordinates skipped because their step window was not smooth.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.checked == self.requested && self.max_rel_error < tol
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.requested += other.requested;
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.worst.is_some() && (self.worst.is_none() || other.max_rel_error > self.max_rel_error) {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of a scalar function against central
/// differences at `max_coords` smooth coordinates drawn with `seed`, or at
/// every smooth coordinate when the inputs have no more than `max_coords`.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    max_coords: usize,
    step: f64,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|v| grads.wrt(*v)).collect()
    };

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars)?.value().item()
    };

    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let exhaustive = total <= max_coords;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> (usize, usize) {
        let mut flat = if exhaustive { n } else { rng.random_range(0..total) };
        let mut which = 0;
        while flat >= inputs[which].numel() {
            flat -= inputs[which].numel();
            which += 1;
        }
        (which, flat)
    };
    let budget = if exhaustive {
        total
    } else {
        max_coords * DRAWS_PER_COORD
    };

    let mut report = GradCheckReport {
        requested: max_coords.min(total),
        ..Default::default()
    };
    let mut probe = inputs.to_vec();
    let mut central = |i: usize, c: usize, h: f64| -> Result<f64> {
        let orig = probe[i].data()[c];
        probe[i].data_mut()[c] = orig + h;
        let up = eval(&probe)?;
        probe[i].data_mut()[c] = orig - h;
        let down = eval(&probe)?;
        probe[i].data_mut()[c] = orig;
        Ok((up - down) / (2.0 * h))
    };
    for n in 0..budget {
        if report.checked == max_coords {
            break;
        }
        let (i, c) = draw(n);
        let numeric = central(i, c, step)?;
        let fine = central(i, c, step / 10.0)?;
        if relative_error(numeric, fine) > SMOOTHNESS_TOL {
            report.skipped += 1;
            continue;
        }
        let a = analytic[i].data()[c];
        let rel = relative_error(a, numeric);
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(Mismatch {
                input: i,
                coord: c,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    if exhaustive {
        report.requested = total - report.skipped;
    }
    Ok(report)
}

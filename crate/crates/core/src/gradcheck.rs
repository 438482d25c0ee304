// SPDX-License-Identifier: Apache-2.0

//! Central finite-difference check of the composed encoder and objective
//! gradients on small random problems.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::Encoder;
use crate::error::Result;
use crate::objective::{self, LossParams, TermWeights, Triplet, TripletBatch};
use crate::seed::{self, streams};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Floor of the relative-error denominator.
pub const ABS_FLOOR: f64 = 1e-6;

/// Relative error `|a - b| / max(|a|, |b|, ABS_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(ABS_FLOOR)
}

/// One random problem: two encoders, inputs, fixed codes `B` and a batch.
#[derive(Debug, Clone)]
pub struct Problem {
    pub encoder_x: Encoder,
    pub encoder_y: Encoder,
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub b: Array2<f64>,
    pub batch: TripletBatch,
    pub params: LossParams,
}

impl Problem {
    /// 2 or 3 layer encoders, `c` in {8, 16}, at most 32 triplets.
    pub fn random(rng: &mut ChaCha8Rng) -> Result<Problem> {
        let c = if rng.random::<bool>() { 8 } else { 16 };
        let depth = rng.random_range(2..=3);
        let dims = |input: usize, rng: &mut ChaCha8Rng| {
            let mut d = vec![input];
            for _ in 1..depth {
                d.push(rng.random_range(4..=12));
            }
            d.push(c);
            d
        };
        let (dx, dy) = (rng.random_range(4..=10), rng.random_range(4..=10));
        let lx = dims(dx, rng);
        let ly = dims(dy, rng);
        let encoder_x = Encoder::init(&lx, rng.random())?;
        let encoder_y = Encoder::init(&ly, rng.random())?;
        let n = rng.random_range(6..=16);
        let x = Array2::from_shape_fn((n, dx), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((n, dy), |_| rng.random_range(-1.0..1.0));
        let b = Array2::from_shape_fn((n, c), |_| if rng.random::<bool>() { 1.0 } else { -1.0 });
        let count = rng.random_range(1..=32);
        let mut triplets = Vec::with_capacity(count);
        let mut weights = Vec::with_capacity(count);
        for _ in 0..count {
            let ids = rand::seq::index::sample(rng, n, 3).into_vec();
            triplets.push(Triplet {
                query: ids[0],
                pos: ids[1],
                neg: ids[2],
            });
            let w = |rng: &mut ChaCha8Rng| rng.random_range(0.0..1.0);
            let xy = w(rng);
            weights.push(TermWeights {
                xx: w(rng),
                yy: w(rng),
                xy,
                yx: xy,
            });
        }
        Ok(Problem {
            encoder_x,
            encoder_y,
            x,
            y,
            b,
            batch: TripletBatch { triplets, weights },
            params: LossParams::new(rng.random_range(0.1..2.0)),
        })
    }

    pub fn loss(&self, ex: &Encoder, ey: &Encoder) -> Result<f64> {
        let f = ex.predict(self.x.view())?;
        let g = ey.predict(self.y.view())?;
        Ok(
            objective::total_loss(f.view(), g.view(), self.b.view(), &self.batch, self.params)?
                .total,
        )
    }

    /// Signs of every ReLU input, code entry and hinge argument.
    pub fn pattern(&self, ex: &Encoder, ey: &Encoder) -> Result<Vec<bool>> {
        let (f, tx) = ex.forward(self.x.view())?;
        let (g, ty) = ey.forward(self.y.view())?;
        let mut out = Vec::new();
        for trace in [&tx, &ty] {
            let pre = trace.pre_activations();
            for z in &pre[..pre.len() - 1] {
                out.extend(z.iter().map(|&v| v > 0.0));
            }
        }
        out.extend(f.iter().chain(g.iter()).map(|&v| v >= 0.0));
        for t in &self.batch.triplets {
            let m = objective::triplet_margins(f.view(), g.view(), t)?;
            out.extend(m.as_array().iter().map(|&v| v + self.params.margin > 0.0));
        }
        Ok(out)
    }

    /// Analytic gradients of both encoders, flattened.
    pub fn analytic(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let (f, tx) = self.encoder_x.forward(self.x.view())?;
        let (g, ty) = self.encoder_y.forward(self.y.view())?;
        let (df, dg) =
            objective::grad_wrt_codes(f.view(), g.view(), self.b.view(), &self.batch, self.params)?;
        Ok((
            self.encoder_x.backward(&tx, df.view())?.flat(),
            self.encoder_y.backward(&ty, dg.view())?.flat(),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub configurations: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

/// Checks every parameter of both encoders; parameters whose perturbation
/// flips a ReLU, sign or hinge state are skipped.
pub fn check_problem(problem: &Problem) -> Result<(f64, usize, usize)> {
    let (ax, ay) = problem.analytic()?;
    let base = problem.pattern(&problem.encoder_x, &problem.encoder_y)?;
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0usize, 0usize);
    for (side, analytic) in [(0, &ax), (1, &ay)] {
        for (k, &a) in analytic.iter().enumerate() {
            let perturbed = |delta: f64| -> Result<(f64, bool)> {
                let mut ex = problem.encoder_x.clone();
                let mut ey = problem.encoder_y.clone();
                let e = if side == 0 { &mut ex } else { &mut ey };
                e.set_param(k, e.param(k) + delta);
                Ok((problem.loss(&ex, &ey)?, problem.pattern(&ex, &ey)? == base))
            };
            let (plus, same_plus) = perturbed(STEP)?;
            let (minus, same_minus) = perturbed(-STEP)?;
            if !(same_plus && same_minus) {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(a, numeric));
            checked += 1;
        }
    }
    Ok((worst, checked, skipped))
}

/// Runs `configurations` random problems derived from `seed`.
pub fn run(seed: u64, configurations: usize) -> Result<GradCheckReport> {
    let mut rng = seed::stream(seed, streams::GRADCHECK);
    let mut report = GradCheckReport {
        seed,
        configurations,
        checked: 0,
        skipped: 0,
        max_relative_error: 0.0,
        passed: true,
    };
    for _ in 0..configurations {
        let problem = Problem::random(&mut rng)?;
        let (worst, checked, skipped) = check_problem(&problem)?;
        report.max_relative_error = report.max_relative_error.max(worst);
        report.checked += checked;
        report.skipped += skipped;
    }
    report.passed = report.checked > 0 && report.max_relative_error < TOLERANCE;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn random_problems_pass() {
        let report = run(3, 3).unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.checked > report.skipped);
    }
}

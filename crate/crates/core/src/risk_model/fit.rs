//! Logistic-regression maximum likelihood by Newton-Raphson.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::design::{ColumnLabel, RegressionDesign};
use crate::error::{Error, Result};
use crate::resample::Z_95;
use crate::special::normal_two_sided_p;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
    /// Coefficient magnitude treated as divergence.
    pub separation_bound: f64,
    /// L2 penalty on non-intercept coefficients; 0 disables it.
    pub ridge: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            gradient_tolerance: 1e-10,
            step_tolerance: 1e-10,
            separation_bound: 15.0,
            ridge: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta: Vec<f64>,
    /// Inverse observed information at `beta`.
    pub covariance: DMatrix<f64>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Max-norm of the score vector at `beta`.
    pub gradient_norm: f64,
    pub columns: Vec<ColumnLabel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldStat {
    pub beta: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(eta)) without overflow.
fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

struct Evaluation {
    log_likelihood: f64,
    gradient: DVector<f64>,
    information: DMatrix<f64>,
}

fn evaluate(design: &RegressionDesign, beta: &DVector<f64>, ridge: f64) -> Evaluation {
    let k = beta.len();
    let eta = &design.x * beta;
    let mut ll = 0.0;
    let mut gradient = DVector::zeros(k);
    let mut information = DMatrix::zeros(k, k);
    for (i, (&y, &e)) in design.y.iter().zip(eta.iter()).enumerate() {
        ll += y * e - softplus(e);
        let p = sigmoid(e);
        let resid = y - p;
        let w = p * (1.0 - p);
        for a in 0..k {
            let xa = design.x[(i, a)];
            if xa == 0.0 {
                continue;
            }
            gradient[a] += xa * resid;
            for b in a..k {
                let xb = design.x[(i, b)];
                if xb != 0.0 {
                    information[(a, b)] += w * xa * xb;
                }
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            information[(a, b)] = information[(b, a)];
        }
    }
    if ridge > 0.0 {
        for j in 1..k {
            ll -= 0.5 * ridge * beta[j] * beta[j];
            gradient[j] -= ridge * beta[j];
            information[(j, j)] += ridge;
        }
    }
    Evaluation {
        log_likelihood: ll,
        gradient,
        information,
    }
}

/// Quasi-complete separation on a single indicator: every row carrying the
/// indicator has the same outcome, so its coefficient has no finite MLE.
fn check_indicator_separation(design: &RegressionDesign) -> Result<()> {
    let all_same = |rows: &mut dyn Iterator<Item = f64>| {
        let mut first = None;
        for y in rows {
            match first {
                None => first = Some(y),
                Some(f) if f != y => return false,
                _ => {}
            }
        }
        true
    };
    if all_same(&mut design.y.iter().copied()) {
        return Err(Error::Separation {
            column: ColumnLabel::intercept().name(),
        });
    }
    for (j, label) in design.columns.iter().enumerate().skip(1) {
        let mut with = (0..design.rows())
            .filter(|&i| design.x[(i, j)] != 0.0)
            .map(|i| design.y[i]);
        if all_same(&mut with) {
            return Err(Error::Separation { column: label.name() });
        }
    }
    Ok(())
}

pub fn fit_mle(design: &RegressionDesign) -> Result<FitResult> {
    fit_mle_with(design, &FitOptions::default())
}

pub fn fit_mle_with(design: &RegressionDesign, options: &FitOptions) -> Result<FitResult> {
    let k = design.columns.len();
    if design.rows() == 0 || k == 0 {
        return Err(Error::Design("empty design".into()));
    }
    if options.ridge == 0.0 {
        check_indicator_separation(design)?;
    }

    let mut beta = DVector::zeros(k);
    let ybar = design.y.iter().sum::<f64>() / design.rows() as f64;
    if ybar > 0.0 && ybar < 1.0 {
        beta[0] = (ybar / (1.0 - ybar)).ln();
    }

    let mut eval = evaluate(design, &beta, options.ridge);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iterations {
        if eval.gradient.amax() <= options.gradient_tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let chol = eval
            .information
            .clone()
            .cholesky()
            .ok_or(Error::SingularInformation)?;
        let step = chol.solve(&eval.gradient);

        // Step halving keeps the likelihood monotone.
        let mut scale = 1.0;
        let mut candidate = &beta + &step;
        let mut next = evaluate(design, &candidate, options.ridge);
        while next.log_likelihood < eval.log_likelihood - 1e-12 * eval.log_likelihood.abs()
            && scale > 1e-6
        {
            scale *= 0.5;
            candidate = &beta + &step * scale;
            next = evaluate(design, &candidate, options.ridge);
        }
        let improving = next.log_likelihood > eval.log_likelihood;
        let step_norm = (step * scale).amax();
        beta = candidate;
        eval = next;

        if options.ridge == 0.0 && improving {
            if let Some(j) = beta.iter().position(|b| b.abs() > options.separation_bound) {
                return Err(Error::Separation {
                    column: design.columns[j].name(),
                });
            }
        }
        if step_norm <= options.step_tolerance {
            converged = true;
            break;
        }
    }
    if !converged && eval.gradient.amax() <= options.gradient_tolerance {
        converged = true;
    }
    if !converged {
        return Err(Error::NonConvergence { iterations });
    }

    let covariance = eval
        .information
        .clone()
        .cholesky()
        .ok_or(Error::SingularInformation)?
        .inverse();
    Ok(FitResult {
        beta: beta.iter().copied().collect(),
        covariance,
        log_likelihood: eval.log_likelihood,
        iterations,
        converged,
        gradient_norm: eval.gradient.amax(),
        columns: design.columns.clone(),
    })
}

/// Wald z, two-sided normal p and 95% interval for every coefficient.
pub fn wald(fit: &FitResult) -> Result<Vec<WaldStat>> {
    if !fit.converged {
        return Err(Error::NonConvergence {
            iterations: fit.iterations,
        });
    }
    Ok(fit
        .beta
        .iter()
        .enumerate()
        .map(|(j, &b)| {
            let se = fit.covariance[(j, j)].sqrt();
            let z = if b == 0.0 { 0.0 } else { b / se };
            WaldStat {
                beta: b,
                se,
                z,
                p: normal_two_sided_p(z),
                ci_low: b - Z_95 * se,
                ci_high: b + Z_95 * se,
            }
        })
        .collect())
}

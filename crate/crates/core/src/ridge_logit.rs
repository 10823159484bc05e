//! L2-penalized logistic regression for propensity scores.
//!
//! Minimizes
//!
//! ```text
//! Σᵢ wᵢ [log(1 + exp(ηᵢ)) − yᵢ ηᵢ] + (λ/2) ‖β‖²,    ηᵢ = b + xᵢᵀβ
//! ```
//!
//! with the intercept `b` unpenalized, by damped Newton steps. The Newton
//! system is solved by a dense Cholesky factorization assembled from the
//! sparse rows when the model is small, and by preconditioned conjugate
//! gradients on Hessian-vector products otherwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::{DesignMatrix, ScalingRecord};

/// How `λ` relates to the sample size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyScale {
    /// `λ` multiplies the summed log-likelihood directly.
    #[default]
    Total,
    /// `λ` applies to the mean log-likelihood (effective penalty `λ · Σw`).
    PerObservation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub lambda: f64,
    pub penalty_scale: PenaltyScale,
    /// Convergence when `‖∇‖₂ ≤ tolerance · Σw`.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Largest parameter count solved with a dense factorization.
    pub dense_limit: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            lambda: 0.5,
            penalty_scale: PenaltyScale::Total,
            tolerance: 1e-8,
            max_iterations: 100,
            dense_limit: 600,
        }
    }
}

impl FitOptions {
    pub fn with_lambda(lambda: f64) -> Self {
        FitOptions { lambda, ..Self::default() }
    }
}

pub const FIT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityFit {
    pub format_version: u32,
    pub domain_id: String,
    pub spec: String,
    pub lambda: f64,
    pub penalty_scale: PenaltyScale,
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub columns: Vec<String>,
    pub scaling: Option<ScalingRecord>,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    /// Penalized objective after each accepted step (first entry: starting point).
    pub objective_trace: Vec<f64>,
}

impl PropensityFit {
    /// Artifact key `(domain, spec, λ)`.
    pub fn key(&self) -> (String, String, f64) {
        (self.domain_id.clone(), self.spec.clone(), self.lambda)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let fit: PropensityFit = serde_json::from_str(text)?;
        if fit.format_version != FIT_FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported fit format version {}", fit.format_version)));
        }
        Ok(fit)
    }
}

/// Estimated propensity per design row, strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
}

pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

/// Penalized negative log-likelihood over a design, exposed so that the
/// gradient can be checked against finite differences.
pub struct Objective<'a> {
    design: &'a DesignMatrix,
    labels: &'a [bool],
    weights: &'a [f64],
    penalty: f64,
}

impl<'a> Objective<'a> {
    pub fn new(design: &'a DesignMatrix, labels: &'a [bool], weights: &'a [f64], options: &FitOptions) -> Self {
        assert_eq!(labels.len(), design.n_rows());
        assert_eq!(weights.len(), design.n_rows());
        let total: f64 = weights.iter().sum();
        let penalty = match options.penalty_scale {
            PenaltyScale::Total => options.lambda,
            PenaltyScale::PerObservation => options.lambda * total,
        };
        Objective { design, labels, weights, penalty }
    }

    fn linear_predictor(&self, intercept: f64, beta: &[f64]) -> Vec<f64> {
        let mut eta = self.design.mul_vec(beta);
        for e in &mut eta {
            *e += intercept;
        }
        eta
    }

    fn value_at(&self, eta: &[f64], beta: &[f64]) -> f64 {
        let mut nll = 0.0;
        for ((&e, &y), &w) in eta.iter().zip(self.labels).zip(self.weights) {
            if w == 0.0 {
                continue;
            }
            nll += w * (softplus(e) - if y { e } else { 0.0 });
        }
        nll + 0.5 * self.penalty * beta.iter().map(|b| b * b).sum::<f64>()
    }

    pub fn value(&self, intercept: f64, beta: &[f64]) -> f64 {
        self.value_at(&self.linear_predictor(intercept, beta), beta)
    }

    /// Returns `(∂/∂b, ∂/∂β)`.
    pub fn gradient(&self, intercept: f64, beta: &[f64]) -> (f64, Vec<f64>) {
        let eta = self.linear_predictor(intercept, beta);
        let resid = self.residuals(&eta);
        self.gradient_from_residuals(&resid, beta)
    }

    fn residuals(&self, eta: &[f64]) -> Vec<f64> {
        eta.iter()
            .zip(self.labels)
            .zip(self.weights)
            .map(|((&e, &y), &w)| w * (logistic(e) - f64::from(u8::from(y))))
            .collect()
    }

    fn gradient_from_residuals(&self, resid: &[f64], beta: &[f64]) -> (f64, Vec<f64>) {
        let g0 = resid.iter().sum();
        let mut g = self.design.tmul_vec(resid);
        for (gk, bk) in g.iter_mut().zip(beta) {
            *gk += self.penalty * bk;
        }
        (g0, g)
    }

    /// Hessian-vector product with curvature weights `h`, parameters ordered
    /// `[b, β…]`.
    fn hess_vec(&self, h: &[f64], v: &[f64]) -> Vec<f64> {
        let mut u = self.design.mul_vec(&v[1..]);
        for (ui, hi) in u.iter_mut().zip(h) {
            *ui = (*ui + v[0]) * hi;
        }
        let mut out = Vec::with_capacity(v.len());
        out.push(u.iter().sum());
        let xt = self.design.tmul_vec(&u);
        out.extend(xt.iter().zip(&v[1..]).map(|(x, vk)| x + self.penalty * vk));
        out
    }

    /// Dense Hessian, parameters ordered `[b, β…]`, row-major.
    fn dense_hessian(&self, h: &[f64]) -> Vec<f64> {
        let d = self.design;
        let p = d.n_cols();
        let n = p + 1;
        let mut xtx = vec![0.0; p * p];
        let mut s = vec![0.0; p];
        let mut total = 0.0;
        for (r, &hr) in h.iter().enumerate() {
            if hr == 0.0 {
                continue;
            }
            total += hr;
            let (idx, val) = d.raw_row(r);
            for (a, (&ca, &xa)) in idx.iter().zip(val).enumerate() {
                let wa = hr * xa;
                s[ca as usize] += wa;
                for (&cb, &xb) in idx[a..].iter().zip(&val[a..]) {
                    let (lo, hi) = if ca <= cb { (ca, cb) } else { (cb, ca) };
                    xtx[lo as usize * p + hi as usize] += wa * xb;
                }
            }
        }
        let (means, scales): (Vec<f64>, Vec<f64>) = match d.scaling() {
            Some(sc) => (sc.means.clone(), sc.scales.clone()),
            None => (vec![0.0; p], vec![1.0; p]),
        };
        let mut hess = vec![0.0; n * n];
        hess[0] = total;
        for j in 0..p {
            let hj = (s[j] - means[j] * total) / scales[j];
            hess[j + 1] = hj;
            hess[(j + 1) * n] = hj;
            for k in j..p {
                let raw = xtx[j * p + k];
                let centered = raw - means[j] * s[k] - s[j] * means[k] + total * means[j] * means[k];
                let mut v = centered / (scales[j] * scales[k]);
                if j == k {
                    v += self.penalty;
                }
                hess[(j + 1) * n + (k + 1)] = v;
                hess[(k + 1) * n + (j + 1)] = v;
            }
        }
        hess
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place Cholesky; returns false if the matrix is not positive definite.
fn cholesky(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    y
}

/// Jacobi-preconditioned conjugate gradients for `H x = b`.
fn conjugate_gradient(apply: impl Fn(&[f64]) -> Vec<f64>, diag: &[f64], b: &[f64], max_iter: usize) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let precond = |r: &[f64]| -> Vec<f64> {
        r.iter().zip(diag).map(|(ri, di)| if *di > 0.0 { ri / di } else { *ri }).collect()
    };
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let target = 1e-10 * norm(b);
    for _ in 0..max_iter {
        if norm(&r) <= target {
            break;
        }
        let hp = apply(&p);
        let php = dot(&p, &hp);
        if !(php > 0.0) {
            break;
        }
        let alpha = rz / php;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * hp[i];
        }
        z = precond(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    x
}

/// Fits the penalized logistic model. `labels` are exposure indicators
/// aligned with the design rows; `weights` are nonnegative row weights.
pub fn fit(design: &DesignMatrix, labels: &[bool], weights: &[f64], options: &FitOptions) -> Result<PropensityFit> {
    if labels.len() != design.n_rows() || weights.len() != design.n_rows() {
        return Err(Error::DimensionMismatch(format!(
            "design has {} rows, labels {}, weights {}",
            design.n_rows(),
            labels.len(),
            weights.len()
        )));
    }
    if !(options.lambda >= 0.0) || !options.lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("penalty must be finite and nonnegative, got {}", options.lambda)));
    }
    let mut n_pos = 0.0;
    let mut n_tot = 0.0;
    for (&y, &w) in labels.iter().zip(weights) {
        if w > 0.0 {
            n_tot += w;
            if y {
                n_pos += w;
            }
        }
    }
    if n_tot == 0.0 || n_pos == 0.0 {
        return Err(Error::DegenerateLabels("0"));
    }
    if n_pos == n_tot {
        return Err(Error::DegenerateLabels("1"));
    }
    for r in 0..design.n_rows() {
        let (idx, val) = design.raw_row(r);
        if let Some(k) = val.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: r, column: idx[k] as usize });
        }
    }

    let objective = Objective::new(design, labels, weights, options);
    let p = design.n_cols();
    let mut intercept = logit(n_pos / n_tot);
    let mut beta = vec![0.0; p];
    let mut eta = objective.linear_predictor(intercept, &beta);
    let mut value = objective.value_at(&eta, &beta);
    let mut trace = vec![value];
    let threshold = options.tolerance * n_tot.max(1.0);
    let mut iterations = 0;
    let mut converged = false;
    let mut grad_norm;

    loop {
        let resid = objective.residuals(&eta);
        let (g0, g) = objective.gradient_from_residuals(&resid, &beta);
        let mut grad = Vec::with_capacity(p + 1);
        grad.push(g0);
        grad.extend_from_slice(&g);
        grad_norm = norm(&grad);
        if grad_norm <= threshold {
            converged = true;
            break;
        }
        if iterations >= options.max_iterations {
            break;
        }
        iterations += 1;

        let curvature: Vec<f64> = eta
            .iter()
            .zip(weights)
            .map(|(&e, &w)| {
                let mu = logistic(e);
                w * mu * (1.0 - mu)
            })
            .collect();
        let neg_grad: Vec<f64> = grad.iter().map(|x| -x).collect();
        let mut direction = None;
        if p < options.dense_limit {
            let mut h = objective.dense_hessian(&curvature);
            if cholesky(&mut h, p + 1) {
                direction = Some(cholesky_solve(&h, p + 1, &neg_grad));
            }
        }
        let mut direction = direction.unwrap_or_else(|| {
            let diag = {
                let mut e = vec![0.0; p + 1];
                let mut d = vec![0.0; p + 1];
                for k in 0..=p {
                    e[k] = 1.0;
                    d[k] = objective.hess_vec(&curvature, &e)[k];
                    e[k] = 0.0;
                    if p > 64 {
                        // Diagonal probing is quadratic; fall back to identity scaling.
                        d.iter_mut().for_each(|x| *x = 1.0);
                        break;
                    }
                }
                d
            };
            conjugate_gradient(|v| objective.hess_vec(&curvature, v), &diag, &neg_grad, 2 * (p + 1) + 50)
        });
        let mut slope = dot(&grad, &direction);
        if !(slope < 0.0) {
            direction = neg_grad.clone();
            slope = -dot(&grad, &grad);
        }

        // Armijo backtracking keeps the objective trace non-increasing.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand_b = intercept + step * direction[0];
            let cand_beta: Vec<f64> = beta.iter().zip(&direction[1..]).map(|(b, d)| b + step * d).collect();
            let cand_eta = objective.linear_predictor(cand_b, &cand_beta);
            let cand_value = objective.value_at(&cand_eta, &cand_beta);
            if cand_value <= value + 1e-4 * step * slope {
                intercept = cand_b;
                beta = cand_beta;
                eta = cand_eta;
                value = cand_value;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No representable decrease: we are at the floating-point floor.
            let resid = objective.residuals(&eta);
            let (g0, g) = objective.gradient_from_residuals(&resid, &beta);
            grad_norm = (g0 * g0 + g.iter().map(|x| x * x).sum::<f64>()).sqrt();
            converged = grad_norm <= threshold * 1e3;
            break;
        }
        trace.push(value);
    }

    if !converged {
        log::warn!(
            "propensity fit did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})"
        );
    }
    Ok(PropensityFit {
        format_version: FIT_FORMAT_VERSION,
        domain_id: String::new(),
        spec: String::new(),
        lambda: options.lambda,
        penalty_scale: options.penalty_scale,
        intercept,
        coefficients: beta,
        columns: design.columns().to_vec(),
        scaling: design.scaling().cloned(),
        iterations,
        converged,
        gradient_norm: grad_norm,
        objective_trace: trace,
    })
}

/// Scores `design` with a fitted model. The design must have the same columns
/// and scaling as the one the model was fit on.
pub fn predict_scores(fit: &PropensityFit, design: &DesignMatrix) -> Result<ScoreVector> {
    if fit.columns != design.columns() {
        return Err(Error::DimensionMismatch(format!(
            "fit has {} columns, design has {}",
            fit.columns.len(),
            design.n_cols()
        )));
    }
    if fit.scaling.as_ref() != design.scaling() {
        return Err(Error::DimensionMismatch("scaling record differs from the fitted model".into()));
    }
    let eta = design.mul_vec(&fit.coefficients);
    let lo = f64::MIN_POSITIVE;
    let hi = 1.0 - f64::EPSILON / 2.0;
    Ok(ScoreVector { scores: eta.iter().map(|&e| logistic(e + fit.intercept).clamp(lo, hi)).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::standardize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(seed: u64, n: usize, p: usize) -> (DesignMatrix, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut dense = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let row: Vec<f64> = (0..p)
                .map(|_| if rng.random_bool(0.6) { rng.random_range(-2.0..2.0) } else { 0.0 })
                .collect();
            let eta: f64 = row.iter().zip(&truth).map(|(x, b)| x * b).sum::<f64>() - 0.3;
            labels.push(rng.random_bool(logistic(eta)));
            dense.push(row);
        }
        let cols = (0..p).map(|j| format!("x{j}")).collect();
        (DesignMatrix::from_dense(cols, labels.clone(), &dense), labels)
    }

    #[test]
    fn huge_penalty_recovers_null_model() {
        let (d, y) = random_problem(1, 80, 4);
        let w = vec![1.0; 80];
        let fit = fit(&d, &y, &w, &FitOptions::with_lambda(1e12)).unwrap();
        let mean = y.iter().filter(|&&b| b).count() as f64 / 80.0;
        assert!((fit.intercept - logit(mean)).abs() < 1e-6);
        assert!(fit.coefficients.iter().all(|b| b.abs() < 1e-6));
    }

    #[test]
    fn objective_trace_non_increasing_and_better_than_null() {
        let (d, y) = random_problem(2, 150, 6);
        let (d, _) = standardize(&d);
        let w = vec![1.0; 150];
        let opts = FitOptions::with_lambda(0.5);
        let f = fit(&d, &y, &w, &opts).unwrap();
        assert!(f.converged);
        for pair in f.objective_trace.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
        let obj = Objective::new(&d, &y, &w, &opts);
        assert!(obj.value(f.intercept, &f.coefficients) <= obj.value(0.0, &[0.0; 6]));
    }

    #[test]
    fn dense_and_cg_paths_agree() {
        let (d, y) = random_problem(3, 200, 10);
        let w = vec![1.0; 200];
        let dense = fit(&d, &y, &w, &FitOptions::with_lambda(0.5)).unwrap();
        let cg = fit(&d, &y, &w, &FitOptions { dense_limit: 0, ..FitOptions::with_lambda(0.5) }).unwrap();
        assert!(cg.converged);
        for (a, b) in dense.coefficients.iter().zip(&cg.coefficients) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn degenerate_labels() {
        let (d, _) = random_problem(4, 10, 2);
        let w = vec![1.0; 10];
        assert!(matches!(fit(&d, &[true; 10], &w, &FitOptions::default()), Err(Error::DegenerateLabels("1"))));
        assert!(matches!(fit(&d, &[false; 10], &w, &FitOptions::default()), Err(Error::DegenerateLabels("0"))));
    }

    #[test]
    fn zero_model_scores_one_half() {
        let (d, _) = random_problem(5, 12, 3);
        let f = PropensityFit {
            format_version: 1,
            domain_id: "d".into(),
            spec: "D".into(),
            lambda: 0.5,
            penalty_scale: PenaltyScale::Total,
            intercept: 0.0,
            coefficients: vec![0.0; 3],
            columns: d.columns().to_vec(),
            scaling: None,
            iterations: 0,
            converged: true,
            gradient_norm: 0.0,
            objective_trace: vec![],
        };
        let s = predict_scores(&f, &d).unwrap();
        assert!(s.scores.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn scoring_rejects_mismatched_columns() {
        let (d, y) = random_problem(6, 40, 3);
        let f = fit(&d, &y, &vec![1.0; 40], &FitOptions::default()).unwrap();
        let (other, _) = random_problem(6, 40, 4);
        assert!(matches!(predict_scores(&f, &other), Err(Error::DimensionMismatch(_))));
        let (std, _) = standardize(&d);
        assert!(matches!(predict_scores(&f, &std), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn fit_json_round_trip() {
        let (d, y) = random_problem(7, 50, 3);
        let (d, _) = standardize(&d);
        let mut f = fit(&d, &y, &vec![1.0; 50], &FitOptions::default()).unwrap();
        f.domain_id = "news.example".into();
        f.spec = "AMs".into();
        let back = PropensityFit::from_json(&f.to_json().unwrap()).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.key(), ("news.example".to_string(), "AMs".to_string(), 0.5));
    }

    #[test]
    fn zero_weight_rows_are_ignored() {
        let (d, y) = random_problem(8, 60, 3);
        let mut w = vec![1.0; 60];
        let full = fit(&d, &y, &w, &FitOptions::default()).unwrap();
        // Doubling a row's weight equals duplicating it; zeroing removes it.
        w[0] = 0.0;
        let dropped = fit(&d, &y, &w, &FitOptions::default()).unwrap();
        assert_ne!(full.coefficients, dropped.coefficients);
        let keep: Vec<usize> = (1..60).collect();
        let dense = d.to_dense();
        let sub = DesignMatrix::from_dense(
            d.columns().to_vec(),
            keep.iter().map(|&i| y[i]).collect(),
            &keep.iter().map(|&i| dense[i].clone()).collect::<Vec<_>>(),
        );
        let sub_fit =
            fit(&sub, &keep.iter().map(|&i| y[i]).collect::<Vec<_>>(), &vec![1.0; 59], &FitOptions::default())
                .unwrap();
        for (a, b) in sub_fit.coefficients.iter().zip(&dropped.coefficients) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

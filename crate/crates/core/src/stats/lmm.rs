//! Linear mixed-effects model with one random intercept per group, fit by REML.
//!
//! Model: `y = Xβ + Zu + ε`, `u ~ N(0, σ_u² I)`, `ε ~ N(0, σ_e² I)`, where `Z`
//! maps each observation to its group. With `γ = σ_u²/σ_e²` and
//! `H = I + γZZᵀ`, the REML criterion profiles out both `β` and `σ_e²`:
//!
//! ```text
//! ℓ(γ) = -½ [ (n-p)(ln(Q/(n-p)) + 1 + ln 2π) + ln|H| + ln|XᵀH⁻¹X| ]
//! Q(γ) = min_β (y - Xβ)ᵀ H⁻¹ (y - Xβ)
//! ```
//!
//! `H` is block diagonal with blocks `I + γ11ᵀ`, whose inverse is
//! `I - γ/(1+n_gγ) 11ᵀ`, so everything reduces to per-group sufficient
//! statistics and each evaluation costs O(groups · p²).
//!
//! `γ` is found by a bounded search: a log-spaced grid locates the best
//! bracket, then the analytic score is solved with Brent's root finder. The
//! boundary `γ = 0` (no between-group variance) is a legal optimum.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::design::Arm;
use crate::error::{Error, Result};

const LOG_RATIO_MIN: f64 = -25.0;
const LOG_RATIO_MAX: f64 = 20.0;
const GRID_POINTS: usize = 91;
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone)]
struct GroupStats {
    n: f64,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    /// Column sums of the group's rows, Xᵀ1.
    xs: DVector<f64>,
    ysum: f64,
    yty: f64,
}

/// Precomputed sufficient statistics of a random-intercept problem.
#[derive(Debug, Clone)]
pub struct RandomInterceptModel {
    names: Vec<String>,
    n: usize,
    p: usize,
    groups: Vec<GroupStats>,
}

struct Evaluation {
    loglik: f64,
    /// dℓ/dγ
    score: f64,
    beta: DVector<f64>,
    a_inv: DMatrix<f64>,
    q: f64,
}

impl RandomInterceptModel {
    /// `x` is row-major (one row per observation); `groups` labels each row.
    pub fn new(x: &[Vec<f64>], y: &[f64], groups: &[String], names: Vec<String>) -> Result<Self> {
        let n = y.len();
        if x.len() != n || groups.len() != n {
            return Err(Error::Argument(format!(
                "design has {} rows, response {n}, groups {}",
                x.len(),
                groups.len()
            )));
        }
        let p = names.len();
        if p == 0 {
            return Err(Error::Argument("model needs at least one fixed effect".into()));
        }
        if n <= p {
            return Err(Error::Argument(format!(
                "{n} observations cannot identify {p} fixed effects"
            )));
        }
        let mut index: Vec<(&str, usize)> = groups.iter().map(String::as_str).zip(0..).collect();
        index.sort();
        let mut stats: Vec<GroupStats> = Vec::new();
        let mut last: Option<&str> = None;
        for (label, row) in index {
            if x[row].len() != p {
                return Err(Error::Argument(format!(
                    "row {row} has {} columns, expected {p}",
                    x[row].len()
                )));
            }
            if !y[row].is_finite() || x[row].iter().any(|v| !v.is_finite()) {
                return Err(Error::Argument(format!("row {row} contains a non-finite value")));
            }
            if last != Some(label) {
                stats.push(GroupStats {
                    n: 0.0,
                    xtx: DMatrix::zeros(p, p),
                    xty: DVector::zeros(p),
                    xs: DVector::zeros(p),
                    ysum: 0.0,
                    yty: 0.0,
                });
                last = Some(label);
            }
            let g = stats.last_mut().expect("pushed above");
            let xr = DVector::from_column_slice(&x[row]);
            g.n += 1.0;
            g.xtx += &xr * xr.transpose();
            g.xty += &xr * y[row];
            g.xs += &xr;
            g.ysum += y[row];
            g.yty += y[row] * y[row];
        }
        Ok(RandomInterceptModel {
            names,
            n,
            p,
            groups: stats,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.n
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    fn evaluate(&self, ratio: f64) -> Result<Evaluation> {
        let p = self.p;
        let mut a = DMatrix::zeros(p, p);
        let mut b = DVector::zeros(p);
        let mut yhy = 0.0;
        let mut logdet_h = 0.0;
        for g in &self.groups {
            let c = ratio / (1.0 + g.n * ratio);
            a += &g.xtx - (&g.xs * g.xs.transpose()) * c;
            b += &g.xty - &g.xs * (c * g.ysum);
            yhy += g.yty - c * g.ysum * g.ysum;
            logdet_h += (g.n * ratio).ln_1p();
        }
        let chol = a.clone().cholesky().ok_or_else(|| {
            Error::Argument("fixed-effect design is rank deficient (XᵀH⁻¹X not positive definite)".into())
        })?;
        let beta = chol.solve(&b);
        let a_inv = chol.inverse();
        let logdet_a: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let q = yhy - b.dot(&beta);
        if !(q > 0.0) {
            return Err(Error::Argument(
                "residual sum of squares is zero; the data are fit exactly".into(),
            ));
        }
        let dof = (self.n - self.p) as f64;
        let loglik = -0.5
            * (dof * ((q / dof).ln() + 1.0 + (2.0 * std::f64::consts::PI).ln()) + logdet_h + logdet_a);

        let mut resid_term = 0.0;
        let mut trace_h = 0.0;
        let mut trace_a = 0.0;
        for g in &self.groups {
            let d = 1.0 / (1.0 + g.n * ratio);
            let r_sum = g.ysum - g.xs.dot(&beta);
            resid_term += d * d * r_sum * r_sum;
            trace_h += g.n * d;
            trace_a += d * d * (g.xs.transpose() * &a_inv * &g.xs)[(0, 0)];
        }
        let score = 0.5 * (dof * resid_term / q - trace_h + trace_a);
        Ok(Evaluation {
            loglik,
            score,
            beta,
            a_inv,
            q,
        })
    }

    /// Profiled REML log-likelihood at variance ratio `σ_u²/σ_e²`.
    pub fn profiled_reml(&self, ratio: f64) -> Result<f64> {
        if !(ratio >= 0.0) {
            return Err(Error::Argument(format!("variance ratio {ratio} must be >= 0")));
        }
        Ok(self.evaluate(ratio)?.loglik)
    }

    /// Analytic derivative of [`Self::profiled_reml`] with respect to the ratio.
    pub fn reml_score(&self, ratio: f64) -> Result<f64> {
        Ok(self.evaluate(ratio)?.score)
    }

    /// REML fit with the variance ratio optimized over `[0, e^20]`.
    pub fn fit(&self) -> Result<LmmFit> {
        let grid: Vec<f64> = (0..GRID_POINTS)
            .map(|i| {
                let t = i as f64 / (GRID_POINTS - 1) as f64;
                (LOG_RATIO_MIN + t * (LOG_RATIO_MAX - LOG_RATIO_MIN)).exp()
            })
            .collect();
        let mut ratios = Vec::with_capacity(GRID_POINTS + 1);
        ratios.push(0.0);
        ratios.extend(grid);
        let values: Vec<f64> = ratios
            .iter()
            .map(|&r| self.profiled_reml(r))
            .collect::<Result<_>>()?;
        let best = values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("grid is nonempty");

        if best == 0 {
            let score0 = self.reml_score(0.0)?;
            if score0 <= 0.0 {
                return self.fit_at_ratio_with(0.0, true, format!(
                    "boundary optimum: REML score at zero variance ratio is {score0:.3e}"
                ));
            }
        }
        if best == ratios.len() - 1 {
            return self.fit_at_ratio_with(ratios[best], false, format!(
                "variance ratio reached the search bound {:.3e}; between-group variance is not identified",
                ratios[best]
            ));
        }

        let lo = ratios[best.saturating_sub(1)];
        let hi = ratios[(best + 1).min(ratios.len() - 1)];
        let f = |r: f64| self.reml_score(r).unwrap_or(f64::NAN);
        let (f_lo, f_hi) = (f(lo), f(hi));
        let (ratio, note) = if f_lo > 0.0 && f_hi < 0.0 {
            let root = brent_root(f, lo, hi, f_lo, f_hi, 1e-14, 200);
            (root, "interior optimum: REML score solved by Brent's method".to_string())
        } else {
            let g = |r: f64| self.profiled_reml(r).unwrap_or(f64::NEG_INFINITY);
            let m = golden_max(g, lo, hi, 1e-12, 300);
            (m, "interior optimum: golden-section search (score bracket not found)".to_string())
        };
        let at_root = self.profiled_reml(ratio)?;
        if values[0] > at_root {
            return self.fit_at_ratio_with(0.0, true, "boundary optimum beats interior stationary point".into());
        }
        self.fit_at_ratio_with(ratio, true, note)
    }

    /// Fit with the variance ratio held fixed (0 gives ordinary least squares).
    pub fn fit_at_ratio(&self, ratio: f64) -> Result<LmmFit> {
        self.fit_at_ratio_with(ratio, true, format!("variance ratio fixed at {ratio}"))
    }

    fn fit_at_ratio_with(&self, ratio: f64, converged: bool, diagnostics: String) -> Result<LmmFit> {
        if !(ratio >= 0.0) {
            return Err(Error::Argument(format!("variance ratio {ratio} must be >= 0")));
        }
        let e = self.evaluate(ratio)?;
        let dof = (self.n - self.p) as f64;
        let sigma_e2 = e.q / dof;
        let sigma_u2 = ratio * sigma_e2;
        let covariance = &e.a_inv * sigma_e2;
        let std_normal = Normal::standard();
        let coefficients = self
            .names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let estimate = e.beta[i];
                let std_error = covariance[(i, i)].sqrt();
                let z = estimate / std_error;
                Coefficient {
                    name: name.clone(),
                    estimate,
                    std_error,
                    z,
                    p: (2.0 * std_normal.sf(z.abs())).min(1.0),
                    ci_low: estimate - Z_95 * std_error,
                    ci_high: estimate + Z_95 * std_error,
                }
            })
            .collect();
        Ok(LmmFit {
            coefficients,
            covariance: (0..self.p)
                .map(|i| (0..self.p).map(|j| covariance[(i, j)]).collect())
                .collect(),
            sigma_u2,
            sigma_e2,
            variance_ratio: ratio,
            reml_loglik: e.loglik,
            converged,
            boundary: ratio == 0.0,
            n_obs: self.n,
            n_groups: self.groups.len(),
            coding: None,
            diagnostics,
        })
    }
}

/// Brent–Dekker root finder on a bracket with `f(a)` and `f(b)` of opposite sign.
fn brent_root<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, fa: f64, fb: f64, tol: f64, max_iter: usize) -> f64 {
    let (mut a, mut b, mut fa, mut fb) = (a, b, fa, fb);
    if fa.abs() < fb.abs() {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut fa, &mut fb);
    }
    let mut c = a;
    let mut fc = fa;
    let mut d = b - a;
    let mut mflag = true;
    for _ in 0..max_iter {
        if fb == 0.0 || (b - a).abs() <= tol * b.abs().max(f64::MIN_POSITIVE) {
            break;
        }
        let mut s = if fa != fc && fb != fc {
            a * fb * fc / ((fa - fb) * (fa - fc))
                + b * fa * fc / ((fb - fa) * (fb - fc))
                + c * fa * fb / ((fc - fa) * (fc - fb))
        } else {
            b - fb * (b - a) / (fb - fa)
        };
        let lo = (3.0 * a + b) / 4.0;
        let between = (s > lo.min(b)) && (s < lo.max(b));
        if !between
            || (mflag && (s - b).abs() >= (b - c).abs() / 2.0)
            || (!mflag && (s - b).abs() >= (c - d).abs() / 2.0)
        {
            s = (a + b) / 2.0;
            mflag = true;
        } else {
            mflag = false;
        }
        let fs = f(s);
        d = c;
        c = b;
        fc = fb;
        if fa * fs < 0.0 {
            b = s;
            fb = fs;
        } else {
            a = s;
            fa = fs;
        }
        if fa.abs() < fb.abs() {
            std::mem::swap(&mut a, &mut b);
            std::mem::swap(&mut fa, &mut fb);
        }
    }
    b
}

fn golden_max<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64, max_iter: usize) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..max_iter {
        if (b - a).abs() <= tol * (a.abs() + b.abs()).max(f64::MIN_POSITIVE) {
            break;
        }
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    /// Seconds for the timing model.
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coding {
    pub round_reference: u8,
    pub method_reference: Arm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmFit {
    pub coefficients: Vec<Coefficient>,
    pub covariance: Vec<Vec<f64>>,
    pub sigma_u2: f64,
    pub sigma_e2: f64,
    pub variance_ratio: f64,
    pub reml_loglik: f64,
    pub converged: bool,
    pub boundary: bool,
    pub n_obs: usize,
    pub n_groups: usize,
    pub coding: Option<Coding>,
    pub diagnostics: String,
}

impl LmmFit {
    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }

    fn index(&self, name: &str) -> Option<usize> {
        self.coefficients.iter().position(|c| c.name == name)
    }
}

/// One observation of the timing model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub clinician_id: String,
    pub round: u8,
    pub method: Arm,
    pub seconds: f64,
}

pub const INTERCEPT: &str = "Intercept";
pub const METHOD_AI: &str = "method[ManualPlusAI]";

pub fn round_term(round: u8) -> String {
    format!("round[{round}]")
}

pub fn interaction_term(round: u8) -> String {
    format!("round[{round}]:method[ManualPlusAI]")
}

/// Treatment-coded fixed-effect names: round 1 and Manual are the references.
pub fn timing_terms() -> Vec<String> {
    let mut names = vec![INTERCEPT.to_string()];
    names.extend((2..=4).map(round_term));
    names.push(METHOD_AI.to_string());
    names.extend((2..=4).map(interaction_term));
    names
}

fn timing_design_row(round: u8, method: Arm) -> Vec<f64> {
    let ai = f64::from(u8::from(method == Arm::ManualPlusAI));
    let mut row = vec![1.0];
    row.extend((2..=4).map(|r| f64::from(u8::from(round == r))));
    row.push(ai);
    row.extend((2..=4).map(|r| ai * f64::from(u8::from(round == r))));
    row
}

fn timing_model(rows: &[TimingRow]) -> Result<RandomInterceptModel> {
    let mut per_clinician: std::collections::BTreeMap<&str, usize> = Default::default();
    let mut rounds = [false; 4];
    let mut methods = [false; 2];
    for r in rows {
        if !(1..=4).contains(&r.round) {
            return Err(Error::Argument(format!("round {} outside 1..=4", r.round)));
        }
        if !r.seconds.is_finite() {
            return Err(Error::Argument(format!(
                "clinician {} round {}: seconds {} is not finite",
                r.clinician_id, r.round, r.seconds
            )));
        }
        *per_clinician.entry(&r.clinician_id).or_default() += 1;
        rounds[(r.round - 1) as usize] = true;
        methods[usize::from(r.method == Arm::ManualPlusAI)] = true;
    }
    if per_clinician.len() < 2 {
        return Err(Error::Argument("timing model needs at least 2 clinicians".into()));
    }
    if let Some((c, n)) = per_clinician.iter().find(|(_, &n)| n < 2) {
        return Err(Error::Argument(format!("clinician {c} has only {n} observation(s)")));
    }
    if rounds.iter().any(|&r| !r) || methods.iter().any(|&m| !m) {
        return Err(Error::Argument(
            "timing model needs all four rounds and both methods".into(),
        ));
    }
    let x: Vec<Vec<f64>> = rows.iter().map(|r| timing_design_row(r.round, r.method)).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.seconds).collect();
    let g: Vec<String> = rows.iter().map(|r| r.clinician_id.clone()).collect();
    RandomInterceptModel::new(&x, &y, &g, timing_terms())
}

/// Round × method timing model with a random intercept per clinician.
pub fn fit_lmm(rows: &[TimingRow]) -> Result<LmmFit> {
    let mut fit = timing_model(rows)?.fit()?;
    fit.coding = Some(Coding {
        round_reference: 1,
        method_reference: Arm::Manual,
    });
    Ok(fit)
}

/// The timing model with the random intercept switched off.
pub fn fit_lmm_without_random_intercept(rows: &[TimingRow]) -> Result<LmmFit> {
    let mut fit = timing_model(rows)?.fit_at_ratio(0.0)?;
    fit.coding = Some(Coding {
        round_reference: 1,
        method_reference: Arm::Manual,
    });
    Ok(fit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundEffect {
    pub round: u8,
    /// ManualPlusAI minus Manual, seconds.
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p: f64,
}

/// AI effect in each round: the method coefficient plus that round's interaction.
pub fn lmm_round_effects(fit: &LmmFit) -> Result<Vec<RoundEffect>> {
    let m = fit
        .index(METHOD_AI)
        .ok_or_else(|| Error::Argument(format!("fit has no {METHOD_AI} term")))?;
    let std_normal = Normal::standard();
    let mut out = Vec::with_capacity(4);
    for round in 1..=4u8 {
        let (estimate, var) = if round == 1 {
            (fit.coefficients[m].estimate, fit.covariance[m][m])
        } else {
            let name = interaction_term(round);
            let k = fit
                .index(&name)
                .ok_or_else(|| Error::Argument(format!("fit has no {name} term")))?;
            (
                fit.coefficients[m].estimate + fit.coefficients[k].estimate,
                fit.covariance[m][m] + fit.covariance[k][k] + 2.0 * fit.covariance[m][k],
            )
        };
        let std_error = var.sqrt();
        let z = estimate / std_error;
        out.push(RoundEffect {
            round,
            estimate,
            std_error,
            z,
            p: (2.0 * std_normal.sf(z.abs())).min(1.0),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn one_way(groups: &[&[f64]]) -> RandomInterceptModel {
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut g = Vec::new();
        for (i, vals) in groups.iter().enumerate() {
            for v in *vals {
                x.push(vec![1.0]);
                y.push(*v);
                g.push(format!("g{i}"));
            }
        }
        RandomInterceptModel::new(&x, &y, &g, vec![INTERCEPT.into()]).unwrap()
    }

    #[test]
    fn score_matches_finite_difference() {
        let m = one_way(&[&[1.0, 2.0, 4.0], &[5.0, 7.0, 6.5], &[2.0, 3.0, 2.5], &[9.0, 8.0, 7.0]]);
        for ratio in [0.05, 0.7, 3.0] {
            let h = 1e-6 * ratio;
            let fd = (m.profiled_reml(ratio + h).unwrap() - m.profiled_reml(ratio - h).unwrap()) / (2.0 * h);
            assert_abs_diff_eq!(m.reml_score(ratio).unwrap(), fd, epsilon = 1e-5);
        }
    }

    #[test]
    fn boundary_when_groups_identical() {
        let m = one_way(&[&[1.0, 3.0], &[1.0, 3.0], &[1.0, 3.0]]);
        let fit = m.fit().unwrap();
        assert!(fit.boundary);
        assert_eq!(fit.sigma_u2, 0.0);
        assert_abs_diff_eq!(fit.coefficients[0].estimate, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn brent_finds_cubic_root() {
        let r = brent_root(|x| x * x * x - 2.0, 0.0, 2.0, -2.0, 6.0, 1e-15, 200);
        assert_abs_diff_eq!(r, 2f64.cbrt(), epsilon = 1e-12);
    }

    #[test]
    fn golden_finds_parabola_peak() {
        let m = golden_max(|x| -(x - 0.3).powi(2), -1.0, 2.0, 1e-12, 300);
        assert_abs_diff_eq!(m, 0.3, epsilon = 1e-8);
    }

    #[test]
    fn timing_preconditions() {
        let row = |c: &str, round, method, seconds| TimingRow {
            clinician_id: c.into(),
            round,
            method,
            seconds,
        };
        let one = vec![row("a", 1, Arm::Manual, 3.0), row("a", 2, Arm::ManualPlusAI, 4.0)];
        assert!(fit_lmm(&one).is_err());
        let missing_round = vec![
            row("a", 1, Arm::Manual, 3.0),
            row("a", 2, Arm::ManualPlusAI, 4.0),
            row("b", 1, Arm::Manual, 3.0),
            row("b", 2, Arm::ManualPlusAI, 4.0),
        ];
        assert!(matches!(fit_lmm(&missing_round), Err(Error::Argument(_))));
    }

    #[test]
    fn missing_interaction_rejected() {
        let m = one_way(&[&[1.0, 2.0], &[3.0, 5.0]]);
        assert!(lmm_round_effects(&m.fit().unwrap()).is_err());
    }
}

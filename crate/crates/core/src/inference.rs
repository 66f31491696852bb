//! Likelihoods over disk shapes, maximum likelihood, modified BIC with
//! evidence grades, and the likelihood-ratio test for equal mean shape.
//!
//! The disk density depends on (μ, σ²) only through the singular values
//! ν of μ/σ, so the optimizer works on ν directly. σ² is recovered from
//! the figure sizes by moments.

use crate::densities::{Dims, DiskKernel, IsotropicModel, ShapePoint};
use crate::error::{Error, Result};
use crate::generators::KotzParams;
use crate::polyalg::SeriesControl;
use crate::shape::ShapeSample;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;
use std::fmt;
use std::str::FromStr;

/// Generator family of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Family {
    Gaussian,
    KotzT2,
    KotzT3,
    KotzGeneric { t: u32, rate: f64 },
}

impl Family {
    pub fn generator(&self, big_m: usize) -> Result<KotzParams> {
        match *self {
            Family::Gaussian => KotzParams::gaussian(big_m),
            Family::KotzT2 => KotzParams::new(2, 0.5, big_m),
            Family::KotzT3 => KotzParams::new(3, 0.5, big_m),
            Family::KotzGeneric { t, rate } => KotzParams::new(t, rate, big_m),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Gaussian => write!(f, "gaussian"),
            Family::KotzT2 => write!(f, "kotz-t2"),
            Family::KotzT3 => write!(f, "kotz-t3"),
            Family::KotzGeneric { t, rate } => write!(f, "kotz:{t}:{rate}"),
        }
    }
}

impl FromStr for Family {
    type Err = Error;

    /// `gaussian`, `kotz-t2`, `kotz-t3` or `kotz:T:R`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "gaussian" => Ok(Family::Gaussian),
            "kotz-t2" => Ok(Family::KotzT2),
            "kotz-t3" => Ok(Family::KotzT3),
            other => {
                let parts: Vec<&str> = other.split(':').collect();
                if let ["kotz", t, r] = parts.as_slice() {
                    let t: u32 = t
                        .parse()
                        .map_err(|_| Error::Config(format!("bad Kotz T in '{s}'")))?;
                    let rate: f64 = r
                        .parse()
                        .map_err(|_| Error::Config(format!("bad Kotz R in '{s}'")))?;
                    if t < 1 || !(rate > 0.0) {
                        return Err(Error::Config(format!("Kotz family needs T >= 1, R > 0: '{s}'")));
                    }
                    return Ok(Family::KotzGeneric { t, rate });
                }
                Err(Error::Config(format!(
                    "unknown family '{s}' (expected gaussian, kotz-t2, kotz-t3 or kotz:T:R)"
                )))
            }
        }
    }
}

impl TryFrom<String> for Family {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Family> for String {
    fn from(f: Family) -> String {
        f.to_string()
    }
}

/// Family plus dimensions; the parameter layout is μ ((N-1)×K) and σ².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub family: Family,
    pub dims: Dims,
}

impl ModelSpec {
    pub fn new(family: Family, n_landmarks: usize, dim: usize) -> Result<Self> {
        let dims = Dims::new(n_landmarks, dim)?;
        family.generator(dims.big_m)?;
        Ok(ModelSpec { family, dims })
    }

    pub fn for_sample(family: Family, sample: &ShapeSample) -> Result<Self> {
        let (n_land, k) = sample.dims();
        Self::new(family, n_land, k)
    }

    /// (N-1)K + 1.
    pub fn n_params(&self) -> usize {
        (self.dims.n_landmarks - 1) * self.dims.dim + 1
    }

    pub fn generator(&self) -> KotzParams {
        self.family
            .generator(self.dims.big_m)
            .expect("validated at construction")
    }

    /// E‖Y - μ‖²/σ² = (T - 1 + M/2)/R.
    fn radial_second_moment(&self) -> f64 {
        let g = self.generator();
        (g.t() as f64 - 1.0 + self.dims.p()) / g.rate()
    }

    /// Model with μ = diag(ν) and σ² = 1.
    fn reduced_model(&self, nu: &[f64]) -> Result<IsotropicModel> {
        let mut mu = DMatrix::zeros(self.dims.n_landmarks - 1, self.dims.dim);
        for (i, v) in nu.iter().enumerate() {
            mu[(i, i)] = *v;
        }
        IsotropicModel::new(self.dims, mu, 1.0, self.generator())
    }
}

/// A sample with its per-specimen shape points tabulated once.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    points: Vec<ShapePoint>,
    labels: Vec<String>,
    mean_size2: f64,
    mean_w: Vec<f64>,
    dims: Dims,
}

impl PreparedSample {
    pub fn new(sample: &ShapeSample, ctl: &SeriesControl) -> Result<Self> {
        if sample.is_empty() {
            return Err(Error::Contract("sample is empty".into()));
        }
        let (n_land, k) = sample.dims();
        let dims = Dims::new(n_land, k)?;
        let labels: Vec<String> = sample
            .labels()
            .iter()
            .enumerate()
            .map(|(i, l)| l.clone().unwrap_or_else(|| format!("#{}", i + 1)))
            .collect();
        let points = sample
            .shapes()
            .par_iter()
            .zip(labels.par_iter())
            .map(|(s, label)| {
                ShapePoint::new(&s.u, dims, ctl).map_err(|e| e.for_specimen(label.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let count = sample.len() as f64;
        let mean_size2 = sample.shapes().iter().map(|s| s.r * s.r).sum::<f64>() / count;
        let mut mean_w = vec![0.0; dims.n];
        for s in sample.shapes() {
            for (m, w) in mean_w.iter_mut().zip(&s.w) {
                *m += w / count;
            }
        }
        Ok(PreparedSample {
            points,
            labels,
            mean_size2,
            mean_w,
            dims,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Σ_i ln f(u_i). Terms are computed in parallel and summed in
    /// specimen order.
    pub fn log_likelihood(&self, model: &IsotropicModel, ctl: &SeriesControl) -> Result<f64> {
        if model.dims != self.dims {
            return Err(Error::InvalidDimension(format!(
                "model dims {:?} differ from sample dims {:?}",
                model.dims, self.dims
            )));
        }
        let kernel = DiskKernel::preferred(model, ctl)?;
        let terms = self
            .points
            .par_iter()
            .zip(self.labels.par_iter())
            .map(|(p, label)| {
                let v = kernel
                    .evaluate(p, ctl)
                    .map_err(|e| e.for_specimen(label.clone()))?;
                if v.ln_value.is_finite() {
                    Ok(v.ln_value)
                } else {
                    Err(Error::Domain(format!("density is {} at this shape", v.value))
                        .for_specimen(label.clone()))
                }
            })
            .collect::<Vec<Result<f64>>>();
        let mut total = 0.0;
        for t in terms {
            total += t?;
        }
        Ok(total)
    }
}

/// Σ over specimens of ln disk_density(u_i; μ, σ²). The explicit formula is
/// used when the family has one.
pub fn log_likelihood(
    sample: &ShapeSample,
    spec: &ModelSpec,
    mu: &DMatrix<f64>,
    sigma2: f64,
    ctl: &SeriesControl,
) -> Result<f64> {
    let model = IsotropicModel::new(spec.dims, mu.clone(), sigma2, spec.generator())?;
    PreparedSample::new(sample, ctl)?.log_likelihood(&model, ctl)
}

/// Derivative-free simplex settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Fresh simplices started from the incumbent after convergence.
    pub restarts: usize,
    pub max_evaluations: usize,
    /// Simplex diameter at convergence.
    pub x_tol: f64,
    /// Objective spread across the simplex at convergence.
    pub f_tol: f64,
    pub initial_step: f64,
    /// Relative tail tolerance of the coarse stage.
    pub coarse_tail_rel_tol: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            restarts: 3,
            max_evaluations: 4000,
            x_tol: 1e-6,
            f_tol: 1e-8,
            initial_step: 0.5,
            coarse_tail_rel_tol: 1e-6,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.x_tol > 0.0 && self.f_tol > 0.0 && self.initial_step > 0.0) {
            return Err(Error::Config(
                "optimizer tolerances and step must be positive".into(),
            ));
        }
        if !(self.coarse_tail_rel_tol > 0.0) {
            return Err(Error::Config("coarse_tail_rel_tol must be positive".into()));
        }
        if self.max_evaluations == 0 {
            return Err(Error::Config("max_evaluations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Nelder–Mead minimisation with restarts. Non-finite objective values
/// count as +∞.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    cfg: &OptimizerConfig,
) -> SimplexOutcome {
    let mut eval = |x: &[f64]| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut best = x0.to_vec();
    let mut best_f = eval(&best);
    let mut evaluations = 1;
    let mut iterations = 0;
    let mut converged = false;
    for round in 0..=cfg.restarts {
        let run = simplex_run(&mut eval, &best, best_f, cfg, &mut evaluations, &mut iterations);
        let improved = run.1 < best_f - cfg.f_tol;
        if run.1 <= best_f {
            best = run.0;
            best_f = run.1;
        }
        converged = run.2;
        if round > 0 && !improved && converged {
            break;
        }
        if evaluations >= cfg.max_evaluations {
            break;
        }
    }
    SimplexOutcome {
        x: best,
        f: best_f,
        iterations,
        evaluations,
        converged,
    }
}

fn simplex_run<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    x0: &[f64],
    f0: f64,
    cfg: &OptimizerConfig,
    evaluations: &mut usize,
    iterations: &mut usize,
) -> (Vec<f64>, f64, bool) {
    let dim = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = vec![(x0.to_vec(), f0)];
    for i in 0..dim {
        let mut x = x0.to_vec();
        x[i] += cfg.initial_step;
        let v = f(&x);
        *evaluations += 1;
        simplex.push((x, v));
    }
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (lo, hi) = (simplex[0].1, simplex[dim].1);
        let diameter = simplex[1..]
            .iter()
            .map(|(x, _)| {
                x.iter()
                    .zip(&simplex[0].0)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if diameter < cfg.x_tol && hi - lo < cfg.f_tol {
            return (simplex[0].0.clone(), lo, true);
        }
        if *evaluations >= cfg.max_evaluations {
            return (simplex[0].0.clone(), lo, false);
        }
        *iterations += 1;
        let centroid: Vec<f64> = (0..dim)
            .map(|j| simplex[..dim].iter().map(|(x, _)| x[j]).sum::<f64>() / dim as f64)
            .collect();
        let along = |coef: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[dim].0)
                .map(|(c, w)| c + coef * (w - c))
                .collect()
        };
        let xr = along(-1.0);
        let fr = f(&xr);
        *evaluations += 1;
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = f(&xe);
            *evaluations += 1;
            simplex[dim] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[dim - 1].1 {
            simplex[dim] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < simplex[dim].1 {
            let x = along(-0.5);
            let v = f(&x);
            (x, v)
        } else {
            let x = along(0.5);
            let v = f(&x);
            (x, v)
        };
        *evaluations += 1;
        if fc < simplex[dim].1.min(fr) {
            simplex[dim] = (xc, fc);
            continue;
        }
        // shrink toward the best vertex
        let best = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let x: Vec<f64> = best
                .iter()
                .zip(&vertex.0)
                .map(|(b, v)| b + 0.5 * (v - b))
                .collect();
            let v = f(&x);
            *evaluations += 1;
            *vertex = (x, v);
        }
    }
}

/// A user-supplied starting value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialValue {
    /// (N-1) rows of K entries.
    pub mu: Vec<Vec<f64>>,
    pub sigma2: f64,
}

/// Outcome of a maximum-likelihood fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub family: Family,
    /// Orbit representative σ̂·diag(ν̂), (N-1) rows of K entries.
    pub mu_hat: Vec<Vec<f64>>,
    pub sigma2_hat: f64,
    /// Eigenvalues of μ̂'μ̂/σ̂², non-increasing.
    pub noncentrality: Vec<f64>,
    pub loglik: f64,
    pub bic_star: f64,
    pub n: usize,
    pub n_p: usize,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
}

impl FitReport {
    pub fn mu_matrix(&self) -> DMatrix<f64> {
        matrix_from_rows(&self.mu_hat)
    }
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let ncols = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j])
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn reduced_start(spec: &ModelSpec, init: &InitialValue) -> Result<Vec<f64>> {
    let mu = matrix_from_rows(&init.mu);
    if mu.nrows() != spec.dims.n_landmarks - 1
        || mu.ncols() != spec.dims.dim
        || init.mu.iter().any(|r| r.len() != spec.dims.dim)
    {
        return Err(Error::Config(format!(
            "initial μ must be {}×{}",
            spec.dims.n_landmarks - 1,
            spec.dims.dim
        )));
    }
    if !(init.sigma2 > 0.0) {
        return Err(Error::Config("initial σ² must be positive".into()));
    }
    let mut s: Vec<f64> = mu
        .svd(false, false)
        .singular_values
        .iter()
        .map(|x| x / init.sigma2.sqrt())
        .collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s.truncate(spec.dims.n);
    Ok(s)
}

/// Maximum likelihood over ν with starts from (a) the mean shape vector
/// scaled by a line search, (b) ν = 0 and (c) any user values. Each start
/// runs a coarse stage (looser tail tolerance) and a refinement at `ctl`;
/// the reported log-likelihood is recomputed at `ctl`.
pub fn fit_mle(
    sample: &ShapeSample,
    spec: &ModelSpec,
    ctl: &SeriesControl,
    opt: &OptimizerConfig,
    inits: &[InitialValue],
) -> Result<FitReport> {
    let prepared = PreparedSample::new(sample, ctl)?;
    let starts = inits
        .iter()
        .map(|i| reduced_start(spec, i))
        .collect::<Result<Vec<_>>>()?;
    fit_prepared(&prepared, spec, ctl, opt, &starts)
}

fn fit_prepared(
    prepared: &PreparedSample,
    spec: &ModelSpec,
    ctl: &SeriesControl,
    opt: &OptimizerConfig,
    user_starts: &[Vec<f64>],
) -> Result<FitReport> {
    ctl.validate()?;
    opt.validate()?;
    if prepared.dims != spec.dims {
        return Err(Error::InvalidDimension(format!(
            "sample dims {:?} differ from model dims {:?}",
            prepared.dims, spec.dims
        )));
    }
    let coarse = ctl.with_tail_rel_tol(opt.coarse_tail_rel_tol.max(ctl.tail_rel_tol));
    let objective = |nu: &[f64], c: &SeriesControl| -> f64 {
        spec.reduced_model(nu)
            .and_then(|m| prepared.log_likelihood(&m, c))
            .map_or(f64::INFINITY, |ll| -ll)
    };

    let mut starts: Vec<Vec<f64>> = Vec::new();
    let norm = prepared.mean_w.iter().map(|x| x * x).sum::<f64>().sqrt();
    let direction: Vec<f64> = prepared.mean_w.iter().map(|x| x / norm).collect();
    let heuristic = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0]
        .iter()
        .map(|k| direction.iter().map(|d| d * k).collect::<Vec<f64>>())
        .map(|x| (objective(&x, &coarse), x))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, x)| x)
        .expect("non-empty grid");
    starts.push(heuristic);
    starts.push(vec![0.0; spec.dims.n]);
    starts.extend(user_starts.iter().cloned());

    let mut best: Option<(f64, Vec<f64>, bool)> = None;
    let mut iterations = 0;
    let mut evaluations = 0;
    let mut consider = |f: f64, x: Vec<f64>, conv: bool| {
        let better = match &best {
            None => true,
            Some((bf, _, _)) => f < *bf,
        };
        if better && f.is_finite() {
            best = Some((f, x, conv));
        }
    };
    for x0 in &starts {
        // the start itself is a candidate so nested fits never lose ground
        consider(objective(x0, ctl), x0.clone(), false);
        let stage1 = nelder_mead(|x| objective(x, &coarse), x0, opt);
        let fine_cfg = OptimizerConfig {
            initial_step: (opt.initial_step * 0.1).max(opt.x_tol * 10.0),
            ..*opt
        };
        let stage2 = nelder_mead(|x| objective(x, ctl), &stage1.x, &fine_cfg);
        iterations += stage1.iterations + stage2.iterations;
        evaluations += stage1.evaluations + stage2.evaluations;
        consider(stage2.f, stage2.x, stage2.converged);
    }
    let Some((neg_ll, nu, converged)) = best else {
        return Err(Error::NonConvergence {
            best_loglik: f64::NEG_INFINITY,
        });
    };
    let loglik = -neg_ll;
    let mut noncentrality: Vec<f64> = nu.iter().map(|x| x * x).collect();
    noncentrality.sort_by(|a, b| b.total_cmp(a));
    let nu_norm2: f64 = noncentrality.iter().sum();
    let sigma2_hat = prepared.mean_size2 / (nu_norm2 + spec.radial_second_moment());
    let mu_hat = spec.reduced_model(&nu)?.mu * sigma2_hat.sqrt();
    let n_p = spec.n_params();
    let n = prepared.len();
    Ok(FitReport {
        family: spec.family,
        mu_hat: rows_of(&mu_hat),
        sigma2_hat,
        noncentrality,
        loglik,
        bic_star: bic_star(loglik, n_p, n),
        n,
        n_p,
        converged,
        iterations,
        evaluations,
    })
}

/// BIC* = -2 loglik + n_p (ln(n + 2) - ln 24).
pub fn bic_star(loglik: f64, n_p: usize, n: usize) -> f64 {
    -2.0 * loglik + n_p as f64 * (((n + 2) as f64).ln() - 24f64.ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grade {
    Weak,
    Positive,
    Strong,
    VeryStrong,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvidenceGrade {
    pub delta: f64,
    pub grade: Grade,
}

/// Grade of |bic_a - bic_b|: [0,2) weak, [2,6) positive, [6,10) strong,
/// 10 and above very strong.
pub fn grade_evidence(bic_a: f64, bic_b: f64) -> EvidenceGrade {
    let delta = (bic_a - bic_b).abs();
    let grade = if delta < 2.0 {
        Grade::Weak
    } else if delta < 6.0 {
        Grade::Positive
    } else if delta < 10.0 {
        Grade::Strong
    } else {
        Grade::VeryStrong
    };
    EvidenceGrade { delta, grade }
}

/// Pairwise comparison inside a model selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub preferred: Family,
    pub other: Family,
    pub evidence: EvidenceGrade,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub fits: Vec<FitReport>,
    /// Families by increasing BIC*.
    pub ranking: Vec<Family>,
    pub comparisons: Vec<Comparison>,
}

impl Selection {
    pub fn best(&self) -> Family {
        self.ranking[0]
    }
}

/// Fits every family, ranks by BIC* and grades every pair.
pub fn select_models(
    sample: &ShapeSample,
    families: &[Family],
    ctl: &SeriesControl,
    opt: &OptimizerConfig,
) -> Result<Selection> {
    if families.is_empty() {
        return Err(Error::Config("no families requested".into()));
    }
    let prepared = PreparedSample::new(sample, ctl)?;
    let (n_land, k) = sample.dims();
    let fits = families
        .par_iter()
        .map(|f| {
            let spec = ModelSpec::new(*f, n_land, k)?;
            fit_prepared(&prepared, &spec, ctl, opt, &[])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rank_fits(fits))
}

/// Ranking and pairwise grades for already computed fits.
pub fn rank_fits(fits: Vec<FitReport>) -> Selection {
    let mut order: Vec<usize> = (0..fits.len()).collect();
    order.sort_by(|&a, &b| fits[a].bic_star.total_cmp(&fits[b].bic_star));
    let ranking = order.iter().map(|&i| fits[i].family).collect();
    let mut comparisons = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        for &j in &order[pos + 1..] {
            comparisons.push(Comparison {
                preferred: fits[i].family,
                other: fits[j].family,
                evidence: grade_evidence(fits[i].bic_star, fits[j].bic_star),
            });
        }
    }
    Selection {
        fits,
        ranking,
        comparisons,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrtResult {
    pub family: Family,
    /// -2 ln Λ, clipped at 0.
    pub stat: f64,
    pub df: usize,
    pub p_value: f64,
    pub loglik_null: f64,
    pub loglik_alt: f64,
}

/// Likelihood-ratio test of H₀: μ₁ = μ₂ (common σ², so only means
/// differ). The alternative fits start from the pooled estimate, which
/// keeps the fits nested.
pub fn lrt_equal_mean_shape(
    group1: &ShapeSample,
    group2: &ShapeSample,
    spec: &ModelSpec,
    ctl: &SeriesControl,
    opt: &OptimizerConfig,
) -> Result<LrtResult> {
    if group1.dims() != group2.dims() {
        return Err(Error::InvalidDimension(format!(
            "groups have dims {:?} and {:?}",
            group1.dims(),
            group2.dims()
        )));
    }
    let pooled = group1.concat(group2)?;
    let p0 = PreparedSample::new(&pooled, ctl)?;
    let null = fit_prepared(&p0, spec, ctl, opt, &[])?;
    let nu0: Vec<f64> = {
        let mut v: Vec<f64> = null.noncentrality.iter().map(|x| x.sqrt()).collect();
        v.truncate(spec.dims.n);
        v
    };
    let mut loglik_alt = 0.0;
    for g in [group1, group2] {
        let p = PreparedSample::new(g, ctl)?;
        loglik_alt += fit_prepared(&p, spec, ctl, opt, std::slice::from_ref(&nu0))?.loglik;
    }
    let diff = loglik_alt - null.loglik;
    if diff < -1e-6 * null.loglik.abs().max(1.0) {
        return Err(Error::Contract(format!(
            "nested fit anomaly: null loglik {} exceeds alternative {}",
            null.loglik, loglik_alt
        )));
    }
    let stat = (2.0 * diff).max(0.0);
    let df = (spec.dims.n_landmarks - 1) * spec.dims.dim;
    Ok(LrtResult {
        family: spec.family,
        stat,
        df,
        p_value: chisq_sf(stat, df),
        loglik_null: null.loglik,
        loglik_alt,
    })
}

/// Upper tail of the chi-square distribution, Q(df/2, x/2).
pub fn chisq_sf(x: f64, df: usize) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    gamma_ur(df as f64 / 2.0, x / 2.0).clamp(0.0, 1.0)
}

//! Cone (singular values) and disk (shape angles) densities under
//! isotropic elliptical models, explicit Gaussian and Kotz disk formulas,
//! central densities with a general row covariance Σ, and an exact sampler
//! for isotropic figures.
//!
//! Every series is summed degree by degree in log space. Zonal arguments
//! are rescaled to unit trace and the scale is carried as `t·ln(trace)`.

use crate::error::{Error, Result};
use crate::generators::{ln_kotz_h_deriv, ln_radial_integral, KotzParams};
use crate::numeric::{ln_factorial, ln_multivariate_gamma, LogAccumulator, SignedLog};
use crate::polyalg::{
    ln_gen_pochhammer, ln_zonal_identity, partition_index, PartitionIndex, SeriesControl,
    ZonalTable,
};
use crate::shape::{angles_in_region, jacobian_j, w_from_angles};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use std::collections::HashMap;
use std::f64::consts::{LN_2, PI};
use std::sync::{Arc, Mutex, OnceLock};

/// (N, K) and the derived n = min(N-1, K), m = n-1, M = K(N-1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub n_landmarks: usize,
    pub dim: usize,
    pub n: usize,
    pub m: usize,
    pub big_m: usize,
}

impl Dims {
    pub fn new(n_landmarks: usize, dim: usize) -> Result<Self> {
        if n_landmarks < 3 || dim < 2 {
            return Err(Error::InvalidDimension(format!(
                "need N >= 3 landmarks and K >= 2 dimensions, got N = {n_landmarks}, K = {dim}"
            )));
        }
        let n = (n_landmarks - 1).min(dim);
        Ok(Dims {
            n_landmarks,
            dim,
            n,
            m: n - 1,
            big_m: dim * (n_landmarks - 1),
        })
    }

    /// M/2.
    pub fn p(&self) -> f64 {
        self.big_m as f64 / 2.0
    }

    fn rows(&self) -> usize {
        self.n_landmarks - 1
    }
}

/// Mean μ ((N-1)×K, whitened coordinates), scale σ² and generator.
#[derive(Debug, Clone, PartialEq)]
pub struct IsotropicModel {
    pub mu: DMatrix<f64>,
    pub sigma2: f64,
    pub gen: KotzParams,
    pub dims: Dims,
}

impl IsotropicModel {
    pub fn new(dims: Dims, mu: DMatrix<f64>, sigma2: f64, gen: KotzParams) -> Result<Self> {
        if mu.nrows() != dims.rows() || mu.ncols() != dims.dim {
            return Err(Error::InvalidDimension(format!(
                "μ must be {}×{}, got {}×{}",
                dims.rows(),
                dims.dim,
                mu.nrows(),
                mu.ncols()
            )));
        }
        if mu.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("μ has non-finite entries".into()));
        }
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::Domain(format!("σ² must be positive, got {sigma2}")));
        }
        if gen.m() != dims.big_m {
            return Err(Error::Contract(format!(
                "generator built for M = {} but the model has M = {}",
                gen.m(),
                dims.big_m
            )));
        }
        Ok(IsotropicModel {
            mu,
            sigma2,
            gen,
            dims,
        })
    }

    /// Model with μ = 0.
    pub fn central(dims: Dims, sigma2: f64, gen: KotzParams) -> Result<Self> {
        Self::new(dims, DMatrix::zeros(dims.rows(), dims.dim), sigma2, gen)
    }

    /// Nonzero spectrum of Ω = μμ'/σ² as n values, non-increasing.
    pub fn omega_eigenvalues(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self
            .mu
            .clone()
            .svd(false, false)
            .singular_values
            .iter()
            .map(|x| x * x / self.sigma2)
            .collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s.truncate(self.dims.n);
        s
    }
}

/// Central model with a general SPD row covariance Σ ((N-1)×(N-1)).
#[derive(Debug, Clone, PartialEq)]
pub struct CentralModel {
    pub sigma_full: DMatrix<f64>,
    pub gen: KotzParams,
    pub dims: Dims,
}

impl CentralModel {
    pub fn new(dims: Dims, sigma_full: DMatrix<f64>, gen: KotzParams) -> Result<Self> {
        let r = dims.rows();
        if sigma_full.nrows() != r || sigma_full.ncols() != r {
            return Err(Error::InvalidDimension(format!(
                "Σ must be {r}×{r}, got {}×{}",
                sigma_full.nrows(),
                sigma_full.ncols()
            )));
        }
        let asym = (&sigma_full - sigma_full.transpose()).amax();
        if asym > 1e-10 * sigma_full.amax().max(1.0) {
            return Err(Error::Domain(format!("Σ is not symmetric (asymmetry {asym:e})")));
        }
        if sigma_full.clone().cholesky().is_none() {
            return Err(Error::Domain("Σ is not positive definite".into()));
        }
        if gen.m() != dims.big_m {
            return Err(Error::Contract(format!(
                "generator built for M = {} but the model has M = {}",
                gen.m(),
                dims.big_m
            )));
        }
        Ok(CentralModel {
            sigma_full,
            gen,
            dims,
        })
    }

    pub fn isotropic(dims: Dims, sigma2: f64, gen: KotzParams) -> Result<Self> {
        Self::new(dims, DMatrix::identity(dims.rows(), dims.rows()) * sigma2, gen)
    }

    /// σ² when Σ = σ²I up to roundoff.
    fn isotropic_scale(&self) -> Option<f64> {
        let r = self.dims.rows();
        let s2 = self.sigma_full.trace() / r as f64;
        let diff = (&self.sigma_full - DMatrix::identity(r, r) * s2).amax();
        (diff <= 1e-13 * s2).then_some(s2)
    }

    fn eigenvalues(&self) -> Vec<f64> {
        self.sigma_full
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .collect()
    }
}

/// A density value with its truncation diagnostics. `tail_estimate` is in
/// density units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityValue {
    pub value: f64,
    pub ln_value: f64,
    pub truncation_degree_used: usize,
    pub tail_estimate: f64,
    pub mc_stderr: Option<f64>,
}

impl DensityValue {
    fn exact(ln_value: f64) -> Self {
        DensityValue {
            value: ln_value.exp(),
            ln_value,
            truncation_degree_used: 0,
            tail_estimate: 0.0,
            mc_stderr: None,
        }
    }
}

struct SeriesOutcome {
    sum: SignedLog,
    degree: usize,
    ln_tail: f64,
}

/// Sums `term(0), term(1), …`. `term` returns `None` once every remaining
/// term is exactly zero. Stops when the last `consecutive_tail_terms`
/// terms are all below `tail_rel_tol·|S|` and the geometric tail
/// `|a_t| ρ/(1-ρ)`, ρ = |a_t/a_{t-1}|, is too.
fn sum_series<F>(ctl: &SeriesControl, ln_prefactor: f64, mut term: F) -> Result<SeriesOutcome>
where
    F: FnMut(usize) -> Result<Option<SignedLog>>,
{
    ctl.validate()?;
    let ln_tol = ctl.tail_rel_tol.ln();
    let mut acc = LogAccumulator::new();
    let mut ln_abs: Vec<f64> = Vec::with_capacity(ctl.max_degree + 1);
    let mut ln_tail = f64::INFINITY;
    for t in 0..=ctl.max_degree {
        let a = match term(t)? {
            Some(a) => a,
            None => {
                return Ok(SeriesOutcome {
                    sum: acc.total(),
                    degree: t.saturating_sub(1),
                    ln_tail: f64::NEG_INFINITY,
                })
            }
        };
        acc.add(a);
        ln_abs.push(if a.is_zero() { f64::NEG_INFINITY } else { a.ln_abs });
        let s = acc.total();
        let c = ctl.consecutive_tail_terms;
        if ln_abs.len() < c.max(2) {
            continue;
        }
        let last = ln_abs[t];
        let prev = ln_abs[t - 1];
        ln_tail = if last == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else if last < prev {
            // |a_t| ρ/(1-ρ)
            let ln_rho = last - prev;
            last + ln_rho - (-ln_rho.exp()).ln_1p()
        } else {
            f64::INFINITY
        };
        if s.is_zero() {
            if ln_abs.iter().all(|x| *x == f64::NEG_INFINITY) {
                return Ok(SeriesOutcome {
                    sum: s,
                    degree: t,
                    ln_tail: f64::NEG_INFINITY,
                });
            }
            continue;
        }
        let bound = ln_tol + s.ln_abs;
        if ln_abs[t + 1 - c..=t].iter().all(|x| *x <= bound) && ln_tail <= bound {
            return Ok(SeriesOutcome {
                sum: s,
                degree: t,
                ln_tail,
            });
        }
    }
    let s = acc.total();
    Err(Error::Truncation {
        degree: ctl.max_degree,
        partial: s.scale_ln(ln_prefactor).value(),
        tail: (ln_tail + ln_prefactor).exp(),
    })
}

fn finish(ln_prefactor: f64, out: SeriesOutcome) -> Result<DensityValue> {
    if out.sum.sign < 0.0 {
        return Err(Error::Domain(format!(
            "series summed to a negative value ({:e}) at degree {}",
            out.sum.scale_ln(ln_prefactor).value(),
            out.degree
        )));
    }
    let ln_value = out.sum.ln_abs + ln_prefactor;
    Ok(DensityValue {
        value: ln_value.exp(),
        ln_value,
        truncation_degree_used: out.degree,
        tail_estimate: (out.ln_tail + ln_prefactor).exp(),
        mc_stderr: None,
    })
}

/// ln (K/2)_κ and ln C_κ(I_{N-1}) aligned with the partition index.
struct Coefficients {
    index: Arc<PartitionIndex>,
    ln_poch: Vec<f64>,
    ln_identity: Vec<f64>,
}

fn coefficients(dims: &Dims, max_degree: usize) -> Arc<Coefficients> {
    type Key = (usize, usize, usize, usize);
    static CACHE: OnceLock<Mutex<HashMap<Key, Arc<Coefficients>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (dims.n, dims.dim, dims.rows(), max_degree);
    if let Some(c) = cache.lock().unwrap().get(&key) {
        return c.clone();
    }
    let index = partition_index(dims.n, max_degree);
    let a = dims.dim as f64 / 2.0;
    let ln_poch = index
        .partitions()
        .iter()
        .map(|k| ln_gen_pochhammer(a, k).ln_abs)
        .collect();
    let ln_identity = index
        .partitions()
        .iter()
        .map(|k| ln_zonal_identity(k, dims.rows()))
        .collect();
    let c = Arc::new(Coefficients {
        index,
        ln_poch,
        ln_identity,
    });
    cache.lock().unwrap().entry(key).or_insert(c).clone()
}

fn unit_trace(eigs: &[f64]) -> (Vec<f64>, f64) {
    let tr: f64 = eigs.iter().sum();
    if tr > 0.0 {
        (eigs.iter().map(|x| x / tr).collect(), tr)
    } else {
        (vec![0.0; eigs.len()], 0.0)
    }
}

fn table(eigs: &[f64], dims: &Dims, ctl: &SeriesControl) -> Result<ZonalTable> {
    ZonalTable::with_limits(eigs, ctl.max_degree, dims.n, ctl.degree_cap)
}

/// ln Σ_{κ⊢t} A_κ B_κ / ((K/2)_κ C_κ(I)) for unit-trace tables.
fn pair_sum(t: usize, a: &ZonalTable, b: &ZonalTable, coef: &Coefficients, poch: bool) -> f64 {
    let mut acc = LogAccumulator::new();
    let (va, vb) = (a.values(), b.values());
    for i in coef.index.degree_range(t) {
        if va[i] <= 0.0 || vb[i] <= 0.0 {
            continue;
        }
        let mut ln = va[i].ln() + vb[i].ln() - coef.ln_identity[i];
        if poch {
            ln -= coef.ln_poch[i];
        }
        acc.add(SignedLog::from_ln(ln));
    }
    let s = acc.total();
    if s.is_zero() {
        f64::NEG_INFINITY
    } else {
        s.ln_abs
    }
}

/// A point of the shape disk with the parts of the density that do not
/// depend on the model parameters.
#[derive(Debug, Clone)]
pub struct ShapePoint {
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    /// ln(Π w_i^{N-1+K-2n} Π_{i<j}(w_i² - w_j²) J(u)).
    pub ln_shape_factor: f64,
    w2_table: ZonalTable,
    dims: Dims,
}

impl ShapePoint {
    pub fn new(u: &[f64], dims: Dims, ctl: &SeriesControl) -> Result<Self> {
        if u.len() != dims.m {
            return Err(Error::InvalidDimension(format!(
                "expected {} shape angles, got {}",
                dims.m,
                u.len()
            )));
        }
        if !angles_in_region(u) {
            return Err(Error::Domain(format!("shape angles {u:?} lie outside the region")));
        }
        let w = w_from_angles(u);
        let ln_shape_factor = ln_vandermonde_factor(&w, &dims) + jacobian_j(u).ln();
        let w2: Vec<f64> = w.iter().map(|x| x * x).collect();
        let (w2, _) = unit_trace(&w2);
        let w2_table = table(&w2, &dims, ctl)?;
        Ok(ShapePoint {
            u: u.to_vec(),
            w,
            ln_shape_factor,
            w2_table,
            dims,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    fn check(&self, dims: &Dims, ctl: &SeriesControl) -> Result<()> {
        if self.dims != *dims {
            return Err(Error::Contract("shape point built for other dimensions".into()));
        }
        if self.w2_table.max_degree() < ctl.max_degree {
            return Err(Error::Contract(format!(
                "shape point tabulated to degree {} but the series needs {}",
                self.w2_table.max_degree(),
                ctl.max_degree
            )));
        }
        Ok(())
    }
}

/// ln(Π x_i^{N-1+K-2n} Π_{i<j}(x_i² - x_j²)).
fn ln_vandermonde_factor(x: &[f64], dims: &Dims) -> f64 {
    let power = (dims.rows() + dims.dim - 2 * dims.n) as f64;
    let mut ln = 0.0;
    for (i, &xi) in x.iter().enumerate() {
        if power > 0.0 {
            ln += power * xi.ln();
        }
        for &xj in &x[i + 1..] {
            ln += (xi * xi - xj * xj).max(0.0).ln();
        }
    }
    ln
}

fn ln_gamma_pair(dims: &Dims) -> f64 {
    ln_multivariate_gamma(dims.n, dims.dim as f64 / 2.0)
        + ln_multivariate_gamma(dims.n, dims.rows() as f64 / 2.0)
}

fn check_singular_values(d: &[f64], dims: &Dims) -> Result<()> {
    if d.len() != dims.n {
        return Err(Error::InvalidDimension(format!(
            "expected {} singular values, got {}",
            dims.n,
            d.len()
        )));
    }
    if d.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(Error::Domain(format!("singular values must be >= 0: {d:?}")));
    }
    if d.windows(2).any(|p| p[1] > p[0]) {
        return Err(Error::Domain(format!("singular values must be non-increasing: {d:?}")));
    }
    Ok(())
}

/// Isotropic non-central cone density of the ordered singular values D.
pub fn cone_density_isotropic(
    d: &[f64],
    model: &IsotropicModel,
    ctl: &SeriesControl,
) -> Result<DensityValue> {
    let dims = model.dims;
    check_singular_values(d, &dims)?;
    let ln_pre = dims.n as f64 * LN_2
        + dims.n as f64 * (dims.rows() + dims.dim) as f64 / 2.0 * PI.ln()
        + ln_vandermonde_factor(d, &dims)
        - ln_gamma_pair(&dims)
        - dims.p() * model.sigma2.ln();
    if ln_pre == f64::NEG_INFINITY {
        return Ok(DensityValue::exact(f64::NEG_INFINITY));
    }
    let coef = coefficients(&dims, ctl.max_degree);
    let d2: Vec<f64> = d.iter().map(|x| x * x / model.sigma2).collect();
    let (d2_hat, tr_d2) = unit_trace(&d2);
    let (om_hat, tr_om) = unit_trace(&model.omega_eigenvalues());
    let d_table = table(&d2_hat, &dims, ctl)?;
    let o_table = table(&om_hat, &dims, ctl)?;
    let y = tr_om + tr_d2;
    let out = sum_series(ctl, ln_pre, |t| {
        if t > 0 && tr_om == 0.0 {
            return Ok(None);
        }
        let h = ln_kotz_h_deriv(y, 2 * t, &model.gen)?;
        let inner = pair_sum(t, &d_table, &o_table, &coef, true);
        let ln_scale = if t == 0 {
            0.0
        } else {
            t as f64 * (tr_d2.ln() + tr_om.ln())
        };
        Ok(Some(h.scale_ln(inner + ln_scale - ln_factorial(t))))
    })?;
    finish(ln_pre, out)
}

/// Isotropic non-central disk density over the shape angles u (J(u)
/// included), for any supported generator.
pub fn disk_density_isotropic(
    u: &[f64],
    model: &IsotropicModel,
    ctl: &SeriesControl,
) -> Result<DensityValue> {
    let point = ShapePoint::new(u, model.dims, ctl)?;
    disk_density_isotropic_at(&point, model, ctl)
}

/// [`disk_density_isotropic`] on a precomputed shape point.
pub fn disk_density_isotropic_at(
    point: &ShapePoint,
    model: &IsotropicModel,
    ctl: &SeriesControl,
) -> Result<DensityValue> {
    DiskKernel::generic(model, ctl)?.evaluate(point, ctl)
}

/// The model-dependent half of a disk density: per-degree factors and
/// per-partition weights shared by every shape point.
#[derive(Debug, Clone)]
pub struct DiskKernel {
    dims: Dims,
    max_degree: usize,
    ln_pre: f64,
    /// Terms past the end of this vector are exactly zero.
    degree_factor: Vec<SignedLog>,
    /// ln(C_κ(A) / ((K/2)_κ C_κ(I_{N-1}))) for the unit-trace noncentrality A.
    weights: Vec<f64>,
    index: Arc<PartitionIndex>,
}

impl DiskKernel {
    /// Generic series closed by radial integrals of h^{(2t)}.
    pub fn generic(model: &IsotropicModel, ctl: &SeriesControl) -> Result<Self> {
        ctl.validate()?;
        let dims = model.dims;
        let ln_pre = dims.n as f64 * LN_2
            + dims.n as f64 * (dims.rows() + dims.dim) as f64 / 2.0 * PI.ln()
            - ln_gamma_pair(&dims)
            - dims.p() * model.sigma2.ln();
        let (om_hat, tr_om) = unit_trace(&model.omega_eigenvalues());
        let last = if tr_om == 0.0 { 0 } else { ctl.max_degree };
        let big_m = dims.big_m as f64;
        let degree_factor = (0..=last)
            .map(|t| {
                let radial =
                    ln_radial_integral(t, big_m + 2.0 * t as f64, tr_om, model.sigma2, &model.gen)?;
                // C_κ(W²/σ²) C_κ(Ω) = σ^{-2t} (tr Ω)^t C_κ(W²) C_κ(Ω/tr Ω)
                let ln_scale = if t == 0 {
                    0.0
                } else {
                    t as f64 * (tr_om.ln() - model.sigma2.ln())
                };
                Ok(radial.scale_ln(ln_scale - ln_factorial(t)))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(dims, ctl, ln_pre, degree_factor, &om_hat)
    }

    /// Explicit formulas for the Gaussian and Kotz T = 2, 3 (R = 1/2):
    /// `c · e^{-τ} Σ_t B_t(τ)/t! Σ_κ C_κ(W²) C_κ(μ'μ/2σ²) / ((K/2)_κ C_κ(I))`,
    /// τ = tr μ'μ/(2σ²), with B_t the gamma bracket of each family.
    pub fn explicit(model: &IsotropicModel, ctl: &SeriesControl) -> Result<Self> {
        ctl.validate()?;
        let t_shape = model.gen.t();
        if model.gen.rate() != 0.5 || t_shape > 3 {
            return Err(Error::Contract(format!(
                "no explicit formula for T = {t_shape}, R = {}",
                model.gen.rate()
            )));
        }
        let dims = model.dims;
        let n = dims.n as f64;
        let big_m = dims.big_m as f64;
        let p = dims.p();
        let (g_hat, tau) = unit_trace(&half_gram_eigenvalues(model));
        let ln_const = match t_shape {
            1 => (n - 1.0) * LN_2,
            2 => n * LN_2 - big_m.ln(),
            _ => (n - 1.0) * LN_2 - big_m.ln() - (big_m + 2.0).ln(),
        };
        let ln_pre = ln_const + n * n / 2.0 * PI.ln() - ln_gamma_pair(&dims) - tau;
        let last = if tau == 0.0 { 0 } else { ctl.max_degree };
        let degree_factor = (0..=last)
            .map(|t| {
                let tf = t as f64;
                // bracket in units of Γ(p+t)
                let bracket = match t_shape {
                    1 => 1.0,
                    // (τ-2t)Γ(p+t) + Γ(p+t+1)
                    2 => (tau - 2.0 * tf) + (p + tf),
                    // (4τ² - 16tτ + 16t² - 8t)Γ(p+t) + 8(τ-2t)Γ(p+t+1) + 4Γ(p+t+2)
                    _ => {
                        (4.0 * tau * tau - 16.0 * tf * tau + 16.0 * tf * tf - 8.0 * tf)
                            + 8.0 * (tau - 2.0 * tf) * (p + tf)
                            + 4.0 * (p + tf) * (p + tf + 1.0)
                    }
                };
                let ln_scale = if t == 0 { 0.0 } else { tf * tau.ln() };
                SignedLog::from_value(bracket).scale_ln(ln_gamma(p + tf) + ln_scale - ln_factorial(t))
            })
            .collect();
        Self::assemble(dims, ctl, ln_pre, degree_factor, &g_hat)
    }

    /// Explicit kernel where one exists, generic otherwise.
    pub fn preferred(model: &IsotropicModel, ctl: &SeriesControl) -> Result<Self> {
        if model.gen.rate() == 0.5 && model.gen.t() <= 3 {
            Self::explicit(model, ctl)
        } else {
            Self::generic(model, ctl)
        }
    }

    fn assemble(
        dims: Dims,
        ctl: &SeriesControl,
        ln_pre: f64,
        degree_factor: Vec<SignedLog>,
        a_hat: &[f64],
    ) -> Result<Self> {
        let coef = coefficients(&dims, ctl.max_degree);
        let a_table = table(a_hat, &dims, ctl)?;
        let weights = a_table
            .values()
            .iter()
            .zip(coef.ln_poch.iter().zip(&coef.ln_identity))
            .map(|(v, (poch, id))| {
                if *v > 0.0 {
                    v.ln() - poch - id
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        Ok(DiskKernel {
            dims,
            max_degree: ctl.max_degree,
            ln_pre,
            degree_factor,
            weights,
            index: coef.index.clone(),
        })
    }

    pub fn evaluate(&self, point: &ShapePoint, ctl: &SeriesControl) -> Result<DensityValue> {
        point.check(&self.dims, ctl)?;
        if ctl.max_degree > self.max_degree {
            return Err(Error::Contract(format!(
                "kernel built to degree {} but the series needs {}",
                self.max_degree, ctl.max_degree
            )));
        }
        let ln_pre = self.ln_pre + point.ln_shape_factor;
        if ln_pre == f64::NEG_INFINITY {
            return Ok(DensityValue::exact(f64::NEG_INFINITY));
        }
        let w2 = point.w2_table.values();
        let out = sum_series(ctl, ln_pre, |t| {
            let Some(factor) = self.degree_factor.get(t) else {
                return Ok(None);
            };
            let mut acc = LogAccumulator::new();
            for i in self.index.degree_range(t) {
                if w2[i] > 0.0 && self.weights[i] > f64::NEG_INFINITY {
                    acc.add(SignedLog::from_ln(w2[i].ln() + self.weights[i]));
                }
            }
            let inner = acc.total();
            Ok(Some(factor.mul(inner)))
        })?;
        finish(ln_pre, out)
    }
}

/// Spectrum of the K×K matrix μ'μ/(2σ²), top n values.
fn half_gram_eigenvalues(model: &IsotropicModel) -> Vec<f64> {
    let g = model.mu.transpose() * &model.mu / (2.0 * model.sigma2);
    let mut e: Vec<f64> = g
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|x| x.max(0.0))
        .collect();
    e.sort_by(|a, b| b.total_cmp(a));
    e.truncate(model.dims.n);
    e
}

/// Explicit Gaussian disk density: B_t = Γ(p+t) and
/// c = 2^{n-1} π^{n²/2} Π… J(u) / (Γ_n[K/2] Γ_n[(N-1)/2]).
pub fn disk_density_gaussian_explicit(
    u: &[f64],
    model: &IsotropicModel,
    ctl: &SeriesControl,
) -> Result<DensityValue> {
    if !model.gen.is_gaussian() {
        return Err(Error::Contract(
            "the explicit Gaussian formula needs the Gaussian generator".into(),
        ));
    }
    let point = ShapePoint::new(u, model.dims, ctl)?;
    DiskKernel::explicit(model, ctl)?.evaluate(&point, ctl)
}

/// Explicit Kotz disk density for T = 2 or 3 (R = 1/2).
pub fn disk_density_kotz_explicit(
    u: &[f64],
    model: &IsotropicModel,
    ctl: &SeriesControl,
    t_shape: u32,
) -> Result<DensityValue> {
    if !(t_shape == 2 || t_shape == 3) {
        return Err(Error::Contract(format!(
            "explicit Kotz formulas exist for T = 2 and 3 only, got {t_shape}"
        )));
    }
    if model.gen.t() != t_shape || model.gen.rate() != 0.5 {
        return Err(Error::Contract(format!(
            "model generator (T = {}, R = {}) does not match Kotz T = {t_shape}, R = 1/2",
            model.gen.t(),
            model.gen.rate()
        )));
    }
    let point = ShapePoint::new(u, model.dims, ctl)?;
    DiskKernel::explicit(model, ctl)?.evaluate(&point, ctl)
}

/// Central cone density with general Σ:
/// `Σ_l h^{(l)}(0)/l! Σ_θ C_θ(Σ^{-1}) C_θ(D²) / C_θ(I_{N-1})`.
pub fn central_cone_density(
    d: &[f64],
    model: &CentralModel,
    ctl: &SeriesControl,
) -> Result<DensityValue> {
    let dims = model.dims;
    check_singular_values(d, &dims)?;
    let eig = model.eigenvalues();
    let ln_det: f64 = eig.iter().map(|x| x.ln()).sum();
    let ln_pre = dims.n as f64 * LN_2
        + dims.n as f64 * (dims.rows() + dims.dim) as f64 / 2.0 * PI.ln()
        + ln_vandermonde_factor(d, &dims)
        - ln_gamma_pair(&dims)
        - dims.dim as f64 / 2.0 * ln_det;
    if ln_pre == f64::NEG_INFINITY {
        return Ok(DensityValue::exact(f64::NEG_INFINITY));
    }
    let coef = coefficients(&dims, ctl.max_degree);
    let inv: Vec<f64> = eig.iter().map(|x| 1.0 / x).collect();
    let (inv_hat, tr_inv) = unit_trace(&inv);
    let d2: Vec<f64> = d.iter().map(|x| x * x).collect();
    let (d2_hat, tr_d2) = unit_trace(&d2);
    let inv_table =
        ZonalTable::with_limits(&inv_hat, ctl.max_degree, dims.n, ctl.degree_cap)?;
    let d_table = table(&d2_hat, &dims, ctl)?;
    let out = sum_series(ctl, ln_pre, |l| {
        if l > 0 && tr_d2 == 0.0 {
            return Ok(None);
        }
        let h = ln_kotz_h_deriv(0.0, l, &model.gen)?;
        if !h.ln_abs.is_finite() && !h.is_zero() {
            return Err(Error::Domain(format!("h^({l})(0) is singular")));
        }
        let inner = pair_sum(l, &inv_table, &d_table, &coef, false);
        let ln_scale = if l == 0 {
            0.0
        } else {
            l as f64 * (tr_inv.ln() + tr_d2.ln())
        };
        Ok(Some(h.scale_ln(inner + ln_scale - ln_factorial(l))))
    })?;
    finish(ln_pre, out)
}

/// Monte Carlo budget for the Stiefel integral of the central disk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub samples: usize,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            samples: 100_000,
            seed: 0,
        }
    }
}

const MC_CHUNKS: usize = 64;

/// ln Vol(V_{n,m}) = ln(2^n π^{nm/2} / Γ_n[m/2]).
pub fn ln_stiefel_volume(n: usize, m: usize) -> f64 {
    n as f64 * LN_2 + (n * m) as f64 / 2.0 * PI.ln() - ln_multivariate_gamma(n, m as f64 / 2.0)
}

/// Uniform n×m matrix with orthonormal rows: QR of an m×n standard
/// Gaussian matrix with the signs of diag(R) made positive.
pub fn sample_stiefel<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(m, n, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q.transpose()
}

/// Central disk density with general Σ:
/// `Γ(p) Π… J(u) / (2 π^{n(N-n-1)/2} Γ_n[K/2] |Σ|^{K/2}) ∫_V (tr Σ^{-1}V'W²V)^{-p} (VdV')`,
/// p = M/2 a positive integer. Closed form for Σ = σ²I, Monte Carlo
/// otherwise. The generator never enters.
pub fn central_disk_density(
    u: &[f64],
    model: &CentralModel,
    mc: McConfig,
) -> Result<DensityValue> {
    let dims = model.dims;
    if dims.big_m % 2 != 0 {
        return Err(Error::Contract(format!(
            "n(N+K-n-1)/2 = {}/2 must be a positive integer",
            dims.big_m
        )));
    }
    if u.len() != dims.m {
        return Err(Error::InvalidDimension(format!(
            "expected {} shape angles, got {}",
            dims.m,
            u.len()
        )));
    }
    if !angles_in_region(u) {
        return Err(Error::Domain(format!("shape angles {u:?} lie outside the region")));
    }
    let p = dims.p();
    let w = w_from_angles(u);
    let eig = model.eigenvalues();
    let ln_det: f64 = eig.iter().map(|x| x.ln()).sum();
    let ln_pre = ln_gamma(p) + ln_vandermonde_factor(&w, &dims) + jacobian_j(u).ln()
        - LN_2
        - (dims.n * (dims.rows() - dims.n)) as f64 / 2.0 * PI.ln()
        - ln_multivariate_gamma(dims.n, dims.dim as f64 / 2.0)
        - dims.dim as f64 / 2.0 * ln_det;
    let ln_vol = ln_stiefel_volume(dims.n, dims.rows());
    if let Some(s2) = model.isotropic_scale() {
        // tr Σ^{-1}V'W²V = tr W²/σ² = 1/σ² for every V
        return Ok(DensityValue::exact(ln_pre + ln_vol + p * s2.ln()));
    }
    if mc.samples < 2 {
        return Err(Error::Config("Monte Carlo needs at least 2 samples".into()));
    }
    let inv = model
        .sigma_full
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Domain("Σ is not positive definite".into()))?
        .inverse();
    let w2: Vec<f64> = w.iter().map(|x| x * x).collect();
    let chunks = MC_CHUNKS.min(mc.samples);
    let partials: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let count = mc.samples / chunks + usize::from(c < mc.samples % chunks);
            let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
            rng.set_stream(c as u64);
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..count {
                let v = sample_stiefel(dims.n, dims.rows(), &mut rng);
                let mut q = 0.0;
                for (i, wi) in w2.iter().enumerate() {
                    let row = v.row(i);
                    q += wi * (row * &inv * row.transpose())[(0, 0)];
                }
                let x = q.powf(-p);
                s += x;
                s2 += x * x;
            }
            (s, s2)
        })
        .collect();
    let (sum, sum2) = partials
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let count = mc.samples as f64;
    let mean = sum / count;
    let var = ((sum2 / count - mean * mean) * count / (count - 1.0)).max(0.0);
    let scale = (ln_pre + ln_vol).exp();
    let ln_value = ln_pre + ln_vol + mean.ln();
    Ok(DensityValue {
        value: ln_value.exp(),
        ln_value,
        truncation_degree_used: 0,
        tail_estimate: 0.0,
        mc_stderr: Some(scale * (var / count).sqrt()),
    })
}

/// A draw from the isotropic model.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledFigure {
    /// (N-1)×K Helmert-reduced figure.
    pub y: DMatrix<f64>,
    /// Always 1: the radius is drawn exactly.
    pub acceptance_rate: f64,
}

/// Draws Y = μ + σ ρ U with U uniform on the unit sphere of R^M and
/// ρ² ~ Gamma(T - 1 + M/2, rate R), which has density ∝ h(‖Y-μ‖²/σ²).
pub fn sample_isotropic_with<R: Rng + ?Sized>(
    model: &IsotropicModel,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let (rows, cols) = (model.mu.nrows(), model.mu.ncols());
    let shape = model.gen.t() as f64 - 1.0 + model.dims.p();
    let radius2 = Gamma::new(shape, 1.0 / model.gen.rate())
        .map_err(|e| Error::Config(format!("radial law: {e}")))?;
    let mut z = DMatrix::<f64>::from_fn(rows, cols, |_, _| StandardNormal.sample(rng));
    let norm = z.norm();
    let rho = radius2.sample(rng).sqrt();
    z *= model.sigma2.sqrt() * rho / norm;
    Ok(&model.mu + z)
}

pub fn sample_isotropic_figure(model: &IsotropicModel, seed: u64) -> Result<SampledFigure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(SampledFigure {
        y: sample_isotropic_with(model, &mut rng)?,
        acceptance_rate: 1.0,
    })
}

/// `count` draws from one seeded stream.
pub fn sample_isotropic_figures(
    model: &IsotropicModel,
    count: usize,
    seed: u64,
) -> Result<Vec<DMatrix<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| sample_isotropic_with(model, &mut rng)).collect()
}

/// Midpoint grid over [0, upper]^m, keeping only points inside the angle
/// region. Returns the points and the number skipped.
pub fn angle_grid(m: usize, steps: usize, upper: f64) -> (Vec<Vec<f64>>, usize) {
    let step = upper / steps as f64;
    let mut points = Vec::new();
    let mut skipped = 0;
    let total = steps.pow(m as u32);
    for flat in 0..total {
        let mut rest = flat;
        let mut u = vec![0.0; m];
        for slot in u.iter_mut().rev() {
            *slot = (rest % steps) as f64 * step + 0.5 * step;
            rest /= steps;
        }
        if angles_in_region(&u) {
            points.push(u);
        } else {
            skipped += 1;
        }
    }
    (points, skipped)
}

/// One evaluated point of a density grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub family: Option<String>,
    pub theta: Vec<f64>,
    pub value: DensityValue,
}

/// `theta_1,…,theta_m,density,trunc_degree,tail`, with a leading `family`
/// column when any row carries one.
pub fn density_grid_csv(rows: &[GridRow]) -> String {
    let m = rows.first().map_or(0, |r| r.theta.len());
    let with_family = rows.iter().any(|r| r.family.is_some());
    let mut out = String::new();
    let mut header: Vec<String> = Vec::new();
    if with_family {
        header.push("family".into());
    }
    header.extend((1..=m).map(|i| format!("theta_{i}")));
    header.extend(["density", "trunc_degree", "tail"].map(String::from));
    out.push_str(&header.join(","));
    out.push('\n');
    for r in rows {
        let mut fields: Vec<String> = Vec::new();
        if with_family {
            fields.push(r.family.clone().unwrap_or_default());
        }
        fields.extend(r.theta.iter().map(|x| format!("{x:.12e}")));
        fields.push(format!("{:.12e}", r.value.value));
        fields.push(r.value.truncation_degree_used.to_string());
        fields.push(format!("{:.6e}", r.value.tail_estimate));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss(n_land: usize, k: usize) -> (Dims, KotzParams) {
        let dims = Dims::new(n_land, k).unwrap();
        (dims, KotzParams::gaussian(dims.big_m).unwrap())
    }

    #[test]
    fn dims_examples() {
        let d = Dims::new(6, 2).unwrap();
        assert_eq!((d.n, d.m, d.big_m), (2, 1, 10));
        let d = Dims::new(3, 3).unwrap();
        assert_eq!((d.n, d.m, d.big_m), (2, 1, 6));
        assert_eq!(d.n * (d.n_landmarks + d.dim - d.n - 1), d.big_m);
        assert!(Dims::new(2, 2).is_err());
    }

    #[test]
    fn rayleigh_cone() {
        // N = 2 has no shape, but with N = 3, K = 2, μ = 0 the cone density
        // equals the Gaussian central cone at Σ = I.
        let (dims, g) = gauss(3, 2);
        let iso = IsotropicModel::central(dims, 1.0, g).unwrap();
        let cen = CentralModel::isotropic(dims, 1.0, g).unwrap();
        let ctl = SeriesControl::default();
        for d in [[1.2, 0.4], [2.0, 1.9], [0.7, 0.1]] {
            let a = cone_density_isotropic(&d, &iso, &ctl).unwrap().value;
            let b = central_cone_density(&d, &cen, &ctl).unwrap().value;
            assert!((a - b).abs() <= 1e-10 * a, "{a} vs {b}");
        }
    }

    #[test]
    fn gaussian_explicit_matches_generic_at_origin() {
        let (dims, g) = gauss(4, 2);
        let model = IsotropicModel::central(dims, 0.7, g).unwrap();
        let ctl = SeriesControl::default();
        let a = disk_density_isotropic(&[0.3], &model, &ctl).unwrap();
        let b = disk_density_gaussian_explicit(&[0.3], &model, &ctl).unwrap();
        assert!((a.value - b.value).abs() <= 1e-12 * a.value);
        assert_eq!(a.truncation_degree_used, 0);
    }

    #[test]
    fn noncentral_gaussian_paths_agree() {
        let (dims, g) = gauss(5, 2);
        let mu = DMatrix::from_row_slice(4, 2, &[1.0, 0.2, -0.3, 0.8, 0.5, 0.1, 0.0, -0.4]);
        let model = IsotropicModel::new(dims, mu, 0.6, g).unwrap();
        let ctl = SeriesControl::default();
        let a = disk_density_isotropic(&[0.5], &model, &ctl).unwrap();
        let b = disk_density_gaussian_explicit(&[0.5], &model, &ctl).unwrap();
        assert!((a.value - b.value).abs() <= 1e-10 * a.value, "{a:?} {b:?}");
    }

    #[test]
    fn kotz_explicit_paths_agree() {
        let dims = Dims::new(4, 2).unwrap();
        let mu = DMatrix::from_row_slice(3, 2, &[0.9, 0.1, -0.2, 0.6, 0.3, 0.3]);
        let ctl = SeriesControl::default();
        for t in [2, 3] {
            let gen = KotzParams::new(t, 0.5, dims.big_m).unwrap();
            let model = IsotropicModel::new(dims, mu.clone(), 0.8, gen).unwrap();
            let a = disk_density_isotropic(&[0.2], &model, &ctl).unwrap();
            let b = disk_density_kotz_explicit(&[0.2], &model, &ctl, t).unwrap();
            assert!((a.value - b.value).abs() <= 1e-10 * a.value, "T={t}: {a:?} {b:?}");
        }
        let gen = KotzParams::new(2, 0.5, dims.big_m).unwrap();
        let model = IsotropicModel::new(dims, mu, 0.8, gen).unwrap();
        assert!(disk_density_kotz_explicit(&[0.2], &model, &ctl, 3).is_err());
        assert!(disk_density_kotz_explicit(&[0.2], &model, &ctl, 4).is_err());
    }

    #[test]
    fn central_disk_closed_form_matches_isotropic_disk() {
        let (dims, g) = gauss(4, 2);
        let k2 = KotzParams::new(2, 0.5, dims.big_m).unwrap();
        let ctl = SeriesControl::default();
        let iso = IsotropicModel::central(dims, 2.0, k2).unwrap();
        let cen = CentralModel::isotropic(dims, 2.0, g).unwrap();
        let a = disk_density_isotropic(&[0.4], &iso, &ctl).unwrap().value;
        let b = central_disk_density(&[0.4], &cen, McConfig::default()).unwrap();
        assert!(b.mc_stderr.is_none());
        assert!((a - b.value).abs() <= 1e-12 * a, "{a} vs {}", b.value);
    }

    #[test]
    fn central_disk_requires_integer_half_m() {
        let dims = Dims::new(4, 3).unwrap();
        let g = KotzParams::gaussian(dims.big_m).unwrap();
        let cen = CentralModel::isotropic(dims, 1.0, g).unwrap();
        assert!(central_disk_density(&[0.3, 0.3], &cen, McConfig::default()).is_err());
    }

    #[test]
    fn stiefel_rows_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = sample_stiefel(2, 5, &mut rng);
        assert!((&v * v.transpose() - DMatrix::<f64>::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn sampler_is_deterministic_and_centred() {
        let (dims, g) = gauss(4, 2);
        let mu = DMatrix::from_element(3, 2, 0.5);
        let model = IsotropicModel::new(dims, mu, 1.0, g).unwrap();
        let a = sample_isotropic_figure(&model, 11).unwrap();
        let b = sample_isotropic_figure(&model, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.acceptance_rate, 1.0);
        let draws = sample_isotropic_figures(&model, 4000, 3).unwrap();
        let mean = draws.iter().fold(DMatrix::zeros(3, 2), |acc, y| acc + y) / 4000.0;
        assert!((mean - DMatrix::from_element(3, 2, 0.5)).amax() < 0.08);
    }

    #[test]
    fn truncation_is_reported() {
        let (dims, g) = gauss(4, 2);
        let mu = DMatrix::from_element(3, 2, 4.0);
        let model = IsotropicModel::new(dims, mu, 0.5, g).unwrap();
        let ctl = SeriesControl::default().with_max_degree(3);
        match disk_density_isotropic(&[0.3], &model, &ctl) {
            Err(Error::Truncation { degree, partial, tail }) => {
                assert_eq!(degree, 3);
                assert!(partial > 0.0 && tail > 0.0);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn grid_csv_layout() {
        let v = DensityValue::exact(0.0);
        let rows = vec![GridRow {
            family: None,
            theta: vec![0.1],
            value: v,
        }];
        let csv = density_grid_csv(&rows);
        assert!(csv.starts_with("theta_1,density,trunc_degree,tail\n"));
        let (pts, skipped) = angle_grid(2, 10, std::f64::consts::FRAC_PI_2);
        assert_eq!(pts.len() + skipped, 100);
        assert!(skipped > 0 && !pts.is_empty());
    }
}

//! The extract / density / fit / select / test / simulate workflows. Each
//! returns the text to write; the caller owns the single output writer.

use crate::config::{RunConfig, ThetaSource};
use crate::io::{self, ShapesFile, Specimen, SCHEMA_VERSION};
use lkshape::densities::{
    angle_grid, density_grid_csv, sample_isotropic_figures, Dims, DiskKernel, GridRow,
    IsotropicModel, ShapePoint,
};
use lkshape::inference::{
    lrt_equal_mean_shape, select_models, Family, FitReport, LrtResult, ModelSpec,
    OptimizerConfig, Selection,
};
use lkshape::polyalg::SeriesControl;
use lkshape::shape::{helmert_submatrix, sqrt_spd, LandmarkMatrix};
use lkshape::{Error, Result};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
use std::path::{Path, PathBuf};

/// Run settings echoed into every report. No clock or host data, so
/// identical runs give identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub input: Option<String>,
    pub theta: String,
    pub families: Vec<Family>,
    pub series: SeriesControl,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Metadata {
    fn new(command: &str, cfg: &RunConfig, families: &[Family]) -> Self {
        Metadata {
            tool: "lkshape".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            input: cfg.input.as_ref().map(|p| p.display().to_string()),
            theta: String::from(cfg.theta.clone()),
            families: families.to_vec(),
            series: cfg.series,
            optimizer: cfg.optimizer,
            seed: cfg.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutput {
    pub schema_version: u32,
    pub metadata: Metadata,
    pub n_landmarks: usize,
    pub dim: usize,
    pub group: Option<String>,
    pub n: usize,
    /// Specimens without a usable shape.
    pub skipped: Vec<String>,
    pub fits: Vec<FitReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectOutput {
    pub schema_version: u32,
    pub metadata: Metadata,
    pub n_landmarks: usize,
    pub dim: usize,
    pub group: Option<String>,
    pub n: usize,
    pub skipped: Vec<String>,
    pub selection: Selection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutput {
    pub schema_version: u32,
    pub metadata: Metadata,
    pub n_landmarks: usize,
    pub dim: usize,
    pub groups: [String; 2],
    pub sizes: [usize; 2],
    pub skipped: Vec<String>,
    /// Present when the family was picked by BIC* on the pooled sample.
    pub selection: Option<Selection>,
    pub family: Family,
    pub lrt: LrtResult,
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn theta_matrix(cfg: &RunConfig) -> Result<Option<DMatrix<f64>>> {
    match &cfg.theta {
        ThetaSource::Identity => Ok(None),
        ThetaSource::File(p) => io::parse_theta(p).map(Some),
    }
}

fn load(cfg: &RunConfig) -> Result<ShapesFile> {
    cfg.validate()?;
    let theta = theta_matrix(cfg)?;
    io::load_shapes(cfg.input()?, theta.as_ref())
}

pub fn extract(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let theta = theta_matrix(cfg)?;
    let ds = io::parse_dataset(cfg.input()?)?;
    Ok(ShapesFile::extract(&ds, theta.as_ref())?.to_json())
}

fn selection_for(
    shapes: &ShapesFile,
    group: Option<&str>,
    cfg: &RunConfig,
    families: &[Family],
) -> Result<(Selection, usize, Vec<String>)> {
    let (sample, skipped) = shapes.sample(group)?;
    let sel = select_models(&sample, families, &cfg.series, &cfg.optimizer)?;
    Ok((sel, sample.len(), skipped))
}

pub fn fit(cfg: &RunConfig, group: Option<&str>) -> Result<String> {
    let shapes = load(cfg)?;
    let families = cfg.families_or_default();
    let (sel, n, skipped) = selection_for(&shapes, group, cfg, &families)?;
    Ok(to_json(&FitOutput {
        schema_version: SCHEMA_VERSION,
        metadata: Metadata::new("fit", cfg, &families),
        n_landmarks: shapes.n_landmarks,
        dim: shapes.dim,
        group: group.map(String::from),
        n,
        skipped,
        fits: sel.fits,
    }))
}

pub fn select(cfg: &RunConfig, group: Option<&str>) -> Result<String> {
    let shapes = load(cfg)?;
    let families = cfg.families_or_default();
    let (selection, n, skipped) = selection_for(&shapes, group, cfg, &families)?;
    Ok(to_json(&SelectOutput {
        schema_version: SCHEMA_VERSION,
        metadata: Metadata::new("select", cfg, &families),
        n_landmarks: shapes.n_landmarks,
        dim: shapes.dim,
        group: group.map(String::from),
        n,
        skipped,
        selection,
    }))
}

/// Equal-mean-shape test between two groups. With exactly one requested
/// family that family is used; otherwise the BIC*-best family on the
/// pooled sample.
pub fn test(cfg: &RunConfig, groups: Option<(&str, &str)>) -> Result<String> {
    let shapes = load(cfg)?;
    let (g1, g2) = match groups {
        Some((a, b)) => (a.to_string(), b.to_string()),
        None => match shapes.groups().as_slice() {
            [a, b] => (a.clone(), b.clone()),
            other => {
                return Err(Error::Config(format!(
                    "the input has groups {other:?}; name two with --groups A,B"
                )))
            }
        },
    };
    if g1 == g2 {
        return Err(Error::Config(format!("both groups are '{g1}'")));
    }
    let known = shapes.groups();
    for g in [&g1, &g2] {
        if !known.contains(g) {
            return Err(Error::Config(format!("unknown group '{g}' (have {known:?})")));
        }
    }
    let (s1, mut skipped) = shapes.sample(Some(&g1))?;
    let (s2, skipped2) = shapes.sample(Some(&g2))?;
    skipped.extend(skipped2);

    let families = cfg.families_or_default();
    let (family, selection) = if families.len() == 1 {
        (families[0], None)
    } else {
        let pooled = s1.concat(&s2)?;
        let sel = select_models(&pooled, &families, &cfg.series, &cfg.optimizer)?;
        (sel.best(), Some(sel))
    };
    let spec = ModelSpec::for_sample(family, &s1)?;
    let lrt = lrt_equal_mean_shape(&s1, &s2, &spec, &cfg.series, &cfg.optimizer)?;
    Ok(to_json(&TestOutput {
        schema_version: SCHEMA_VERSION,
        metadata: Metadata::new("test", cfg, &families),
        n_landmarks: shapes.n_landmarks,
        dim: shapes.dim,
        groups: [g1, g2],
        sizes: [s1.len(), s2.len()],
        skipped,
        selection,
        family,
        lrt,
    }))
}

/// Where density parameters come from.
#[derive(Debug, Clone)]
pub enum DensityParams {
    /// A `fit` or `select` report; every fit in it (filtered by the
    /// requested families, if any) becomes a column group.
    Report(PathBuf),
    /// Singular values of μ/σ, applied to every requested family.
    Nu {
        nu: Vec<f64>,
        n_landmarks: usize,
        dim: usize,
    },
}

#[derive(Debug, Clone)]
pub struct DensityRequest {
    pub params: DensityParams,
    /// Grid points per angle.
    pub steps: usize,
    /// Upper end of each angle axis; defaults to π/4 for one angle and
    /// π/2 otherwise.
    pub upper: Option<f64>,
}

/// Density grid as CSV plus the number of grid points outside the angle
/// region.
pub fn density(cfg: &RunConfig, req: &DensityRequest) -> Result<(String, usize)> {
    cfg.validate()?;
    if req.steps == 0 {
        return Err(Error::Config("--steps must be positive".into()));
    }
    let models = density_models(cfg, &req.params)?;
    let dims = models[0].1.dims;
    let upper = req
        .upper
        .unwrap_or(if dims.m == 1 { FRAC_PI_4 } else { FRAC_PI_2 });
    if !(upper > 0.0 && upper <= FRAC_PI_2) {
        return Err(Error::Config(format!("--upper must lie in (0, π/2], got {upper}")));
    }
    let (grid, skipped) = angle_grid(dims.m, req.steps, upper);
    let points = grid
        .par_iter()
        .map(|u| ShapePoint::new(u, dims, &cfg.series))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (family, model) in &models {
        let kernel = DiskKernel::preferred(model, &cfg.series)?;
        let values = points
            .par_iter()
            .zip(&grid)
            .map(|(p, u)| {
                kernel
                    .evaluate(p, &cfg.series)
                    .map_err(|e| with_context(e, &format!("{family} at θ = {u:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.extend(grid.iter().zip(values).map(|(u, value)| GridRow {
            family: Some(family.to_string()),
            theta: u.clone(),
            value,
        }));
    }
    Ok((density_grid_csv(&rows), skipped))
}

/// Adds context while keeping the input/numerical classification.
fn with_context(e: Error, context: &str) -> Error {
    if e.is_input_error() {
        Error::Config(format!("{context}: {e}"))
    } else {
        Error::Domain(format!("{context}: {e}"))
    }
}

fn density_models(cfg: &RunConfig, params: &DensityParams) -> Result<Vec<(Family, IsotropicModel)>> {
    match params {
        DensityParams::Nu {
            nu,
            n_landmarks,
            dim,
        } => {
            let dims = Dims::new(*n_landmarks, *dim).map_err(|e| Error::Config(e.to_string()))?;
            if nu.len() > dims.n || nu.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!(
                    "--nu takes at most {} finite values for N = {n_landmarks}, K = {dim}",
                    dims.n
                )));
            }
            let mut mu = DMatrix::zeros(n_landmarks - 1, *dim);
            for (i, v) in nu.iter().enumerate() {
                mu[(i, i)] = *v;
            }
            let families = if cfg.families.is_empty() {
                vec![Family::Gaussian]
            } else {
                cfg.families.clone()
            };
            families
                .into_iter()
                .map(|f| {
                    let spec = ModelSpec::new(f, *n_landmarks, *dim)?;
                    Ok((f, IsotropicModel::new(dims, mu.clone(), 1.0, spec.generator())?))
                })
                .collect()
        }
        DensityParams::Report(path) => {
            let fits = read_fits(path)?;
            let (n_landmarks, dim) = fits.0;
            let models = fits
                .1
                .into_iter()
                .filter(|f| cfg.families.is_empty() || cfg.families.contains(&f.family))
                .map(|f| {
                    let spec = ModelSpec::new(f.family, n_landmarks, dim)?;
                    let model =
                        IsotropicModel::new(spec.dims, f.mu_matrix(), f.sigma2_hat, spec.generator())?;
                    Ok((f.family, model))
                })
                .collect::<Result<Vec<_>>>()?;
            if models.is_empty() {
                return Err(Error::Config(format!(
                    "{} has no fits for the requested families",
                    path.display()
                )));
            }
            Ok(models)
        }
    }
}

/// Fits from a `fit` or `select` report.
fn read_fits(path: &Path) -> Result<((usize, usize), Vec<FitReport>)> {
    let text = std::fs::read_to_string(path)?;
    let parse_err = |e: serde_json::Error| Error::Parse {
        line: e.line(),
        message: format!("{}: not a fit or select report: {e}", path.display()),
    };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(parse_err)?;
    if value.get("fits").is_some() {
        let out: FitOutput = serde_json::from_value(value).map_err(parse_err)?;
        Ok(((out.n_landmarks, out.dim), out.fits))
    } else {
        let out: SelectOutput = serde_json::from_value(value).map_err(parse_err)?;
        Ok(((out.n_landmarks, out.dim), out.selection.fits))
    }
}

/// One simulated group: `count` figures at ν.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSpec {
    pub name: String,
    pub count: usize,
    pub nu: Vec<f64>,
}

impl std::str::FromStr for GroupSpec {
    type Err = String;

    /// `name:count:nu1,nu2,...`
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.splitn(3, ':').collect();
        let [name, count, nu] = parts.as_slice() else {
            return Err(format!("expected name:count:nu1,nu2,..., got '{s}'"));
        };
        if name.is_empty() || name.contains(',') {
            return Err(format!("bad group name '{name}'"));
        }
        let count: usize = count
            .parse()
            .map_err(|_| format!("bad specimen count '{count}'"))?;
        let nu = nu
            .split(',')
            .filter(|x| !x.trim().is_empty())
            .map(|x| x.trim().parse::<f64>().map_err(|_| format!("bad ν value '{x}'")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(GroupSpec {
            name: name.to_string(),
            count,
            nu,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SimulateRequest {
    pub n_landmarks: usize,
    pub dim: usize,
    pub family: Family,
    pub sigma2: f64,
    pub groups: Vec<GroupSpec>,
}

/// Synthetic landmark CSV. Each figure is X = L'Y Θ^{1/2} + c with Y drawn
/// from the isotropic model (μ = σ·diag(ν)), so extraction with the same Θ
/// recovers Y up to the orbit.
pub fn simulate(cfg: &RunConfig, req: &SimulateRequest) -> Result<String> {
    cfg.validate()?;
    let spec = ModelSpec::new(req.family, req.n_landmarks, req.dim)
        .map_err(|e| Error::Config(e.to_string()))?;
    if !(req.sigma2 > 0.0 && req.sigma2.is_finite()) {
        return Err(Error::Config(format!("σ² must be positive, got {}", req.sigma2)));
    }
    if req.groups.is_empty() {
        return Err(Error::Config("no groups to simulate".into()));
    }
    let theta_half = theta_matrix(cfg)?.map(|t| sqrt_spd(&t)).transpose()?;
    if let Some(t) = &theta_half {
        if t.nrows() != req.dim {
            return Err(Error::Config(format!("Θ must be {0}x{0}", req.dim)));
        }
    }
    let lt = helmert_submatrix(req.n_landmarks)?.transpose();
    let mut specimens = Vec::new();
    for (gi, g) in req.groups.iter().enumerate() {
        if g.nu.len() > spec.dims.n {
            return Err(Error::Config(format!(
                "group '{}' has {} ν values but n = {}",
                g.name,
                g.nu.len(),
                spec.dims.n
            )));
        }
        let mut mu = DMatrix::zeros(req.n_landmarks - 1, req.dim);
        for (i, v) in g.nu.iter().enumerate() {
            mu[(i, i)] = v * req.sigma2.sqrt();
        }
        let model = IsotropicModel::new(spec.dims, mu, req.sigma2, spec.generator())?;
        let seed = cfg.seed.wrapping_add((gi as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let width = g.count.to_string().len();
        for (k, y) in sample_isotropic_figures(&model, g.count, seed)?
            .into_iter()
            .enumerate()
        {
            let mut x = &lt * y;
            if let Some(t) = &theta_half {
                x = x * t;
            }
            for j in 0..req.dim {
                x.column_mut(j).add_scalar_mut(10.0 * (j + 1) as f64);
            }
            specimens.push(Specimen {
                id: format!("{}-{:0width$}", g.name, k + 1),
                group: g.name.clone(),
                landmarks: LandmarkMatrix::new(x)?,
            });
        }
    }
    Ok(io::write_dataset(&specimens))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_spec_parsing() {
        let g: GroupSpec = "small:30:4,2".parse().unwrap();
        assert_eq!(g.nu, vec![4.0, 2.0]);
        assert_eq!(g.count, 30);
        assert!("small:x:1".parse::<GroupSpec>().is_err());
        assert!("small".parse::<GroupSpec>().is_err());
        let g: GroupSpec = "c:5:".parse().unwrap();
        assert!(g.nu.is_empty());
    }
}

//! Shape coordinates from raw landmarks:
//! `L X Θ^{-1/2} = Y = V' D H = r V' W(u) H`.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

/// Relative gap below which two singular values are treated as tied.
pub const TIE_REL_TOL: f64 = 1e-6;

/// N×K landmark coordinates of one figure.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkMatrix {
    data: DMatrix<f64>,
}

impl LandmarkMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() < 3 || data.ncols() < 2 {
            return Err(Error::InvalidDimension(format!(
                "landmark matrix must have N >= 3 landmarks and K >= 2 coordinates, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("landmark coordinates must be finite".into()));
        }
        Ok(LandmarkMatrix { data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidDimension("ragged landmark rows".into()));
        }
        Self::new(DMatrix::from_fn(n, k, |i, j| rows[i][j]))
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn n_landmarks(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

/// Θ for the whitening step; identity when absent.
#[derive(Debug, Clone, Default)]
pub struct WhitenConfig {
    theta: Option<DMatrix<f64>>,
}

impl WhitenConfig {
    pub fn identity() -> Self {
        WhitenConfig { theta: None }
    }

    /// Validates that Θ is square, symmetric and positive definite.
    pub fn with_theta(theta: DMatrix<f64>) -> Result<Self> {
        inverse_sqrt_spd(&theta)?;
        Ok(WhitenConfig { theta: Some(theta) })
    }

    pub fn theta(&self) -> Option<&DMatrix<f64>> {
        self.theta.as_ref()
    }
}

/// Θ^{-1/2} through the symmetric eigendecomposition.
pub fn inverse_sqrt_spd(theta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spd_power(theta, -0.5)
}

/// Θ^{1/2} through the symmetric eigendecomposition.
pub fn sqrt_spd(theta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spd_power(theta, 0.5)
}

fn spd_power(theta: &DMatrix<f64>, power: f64) -> Result<DMatrix<f64>> {
    if !theta.is_square() {
        return Err(Error::Decomposition(format!(
            "matrix must be square, got {}x{}",
            theta.nrows(),
            theta.ncols()
        )));
    }
    let scale = theta.amax().max(f64::MIN_POSITIVE);
    if (theta - theta.transpose()).amax() > 1e-10 * scale {
        return Err(Error::Decomposition("matrix is not symmetric".into()));
    }
    let eig = SymmetricEigen::new(theta.clone());
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if !(lambda > 1e-14 * scale) {
            return Err(Error::Decomposition(format!(
                "matrix is not positive definite: eigenvalue #{i} = {lambda:e}"
            )));
        }
    }
    let d = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|l| l.powf(power)),
    );
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose())
}

/// (N-1)×N Helmert submatrix: row i is (1,…,1,-i,0,…,0)/√(i(i+1)).
pub fn helmert_submatrix(n: usize) -> Result<DMatrix<f64>> {
    if n < 2 {
        return Err(Error::InvalidDimension(format!(
            "Helmert submatrix needs N >= 2, got {n}"
        )));
    }
    Ok(DMatrix::from_fn(n - 1, n, |r, c| {
        let i = (r + 1) as f64;
        let norm = (i * (i + 1.0)).sqrt();
        if c <= r {
            1.0 / norm
        } else if c == r + 1 {
            -i / norm
        } else {
            0.0
        }
    }))
}

/// Z = X Θ^{-1/2}.
pub fn whiten(x: &LandmarkMatrix, cfg: &WhitenConfig) -> Result<DMatrix<f64>> {
    match cfg.theta() {
        None => Ok(x.data().clone()),
        Some(theta) => {
            if theta.nrows() != x.dim() {
                return Err(Error::InvalidDimension(format!(
                    "Θ is {}x{} but figures have K = {}",
                    theta.nrows(),
                    theta.ncols(),
                    x.dim()
                )));
            }
            Ok(x.data() * inverse_sqrt_spd(theta)?)
        }
    }
}

/// The SVD shape objects of one figure.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeDecomposition {
    /// n×(N-1), orthonormal rows.
    pub v: DMatrix<f64>,
    /// n×K, orthonormal rows.
    pub h: DMatrix<f64>,
    /// Singular values, non-increasing.
    pub d: Vec<f64>,
    /// Size r = ‖D‖ = ‖Y‖_F.
    pub r: f64,
    /// Unit-scaled singular values l*_i = D_i / r.
    pub w: Vec<f64>,
    /// Hyperspherical shape angles θ_1..θ_m, m = n - 1.
    pub u: Vec<f64>,
    /// Set when two singular values are within [`TIE_REL_TOL`]·r, in which
    /// case V and H are not unique.
    pub near_tie: bool,
}

impl ShapeDecomposition {
    pub fn n(&self) -> usize {
        self.d.len()
    }

    /// V' diag(D) H.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.v.transpose() * DMatrix::from_diagonal(&DVector::from_column_slice(&self.d)) * &self.h
    }
}

/// Shape extraction with the Helmert submatrix as L.
pub fn svd_shape(x: &LandmarkMatrix, cfg: &WhitenConfig) -> Result<ShapeDecomposition> {
    let l = helmert_submatrix(x.n_landmarks())?;
    svd_shape_with_basis(x, cfg, &l)
}

/// Shape extraction with a caller-supplied L ((N-1)×N, L L' = I, L 1 = 0).
pub fn svd_shape_with_basis(
    x: &LandmarkMatrix,
    cfg: &WhitenConfig,
    l: &DMatrix<f64>,
) -> Result<ShapeDecomposition> {
    let n_land = x.n_landmarks();
    if l.nrows() != n_land - 1 || l.ncols() != n_land {
        return Err(Error::InvalidDimension(format!(
            "L must be {}x{}, got {}x{}",
            n_land - 1,
            n_land,
            l.nrows(),
            l.ncols()
        )));
    }
    let gram_err = (l * l.transpose() - DMatrix::identity(n_land - 1, n_land - 1)).amax();
    let ones_err = (l * DVector::from_element(n_land, 1.0)).amax();
    if gram_err > 1e-10 || ones_err > 1e-10 {
        return Err(Error::Contract(
            "L must have orthonormal rows orthogonal to the ones vector".into(),
        ));
    }
    let z = whiten(x, cfg)?;
    let y = l * &z;
    // coincident landmarks leave only rounding noise after centring
    if y.norm() <= 1e-12 * z.norm() {
        return Err(Error::DegenerateFigure);
    }
    decompose_reduced(&y)
}

/// SVD shape objects of an already reduced (N-1)×K matrix Y.
pub fn decompose_reduced(y: &DMatrix<f64>) -> Result<ShapeDecomposition> {
    let r = y.norm();
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::DegenerateFigure);
    }
    let n = y.nrows().min(y.ncols());
    let svd = y.clone().svd(true, true);
    let u_mat = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let mut v = DMatrix::zeros(n, y.nrows());
    let mut h = DMatrix::zeros(n, y.ncols());
    let mut d = Vec::with_capacity(n);
    for (row, &k) in order.iter().enumerate() {
        let mut h_row = vt.row(k).clone_owned();
        let mut v_row = u_mat.column(k).transpose();
        // first entry of largest magnitude made positive
        let mut pivot = 0;
        for j in 1..h_row.len() {
            if h_row[j].abs() > h_row[pivot].abs() * (1.0 + 1e-12) {
                pivot = j;
            }
        }
        if h_row[pivot] < 0.0 {
            h_row.neg_mut();
            v_row.neg_mut();
        }
        h.set_row(row, &h_row);
        v.set_row(row, &v_row);
        d.push(svd.singular_values[k].max(0.0));
    }

    let norm_d = d.iter().map(|x| x * x).sum::<f64>().sqrt();
    let w: Vec<f64> = d.iter().map(|x| x / norm_d).collect();
    let near_tie = d.windows(2).any(|p| (p[0] - p[1]).abs() < TIE_REL_TOL * r);
    let u = angles_from_w(&w)?;
    Ok(ShapeDecomposition {
        v,
        h,
        d,
        r,
        w,
        u,
        near_tie,
    })
}

/// Hyperspherical angles of an ordered unit vector:
/// l*_1 = cos θ_1, l*_i = cos θ_i Π_{j<i} sin θ_j, l*_n = Π sin θ_j.
pub fn angles_from_w(w: &[f64]) -> Result<Vec<f64>> {
    check_unit_ordered(w)?;
    let n = w.len();
    let mut tail = vec![0.0; n + 1];
    for i in (0..n).rev() {
        tail[i] = tail[i + 1] + w[i] * w[i];
    }
    Ok((0..n.saturating_sub(1))
        .map(|i| tail[i + 1].sqrt().atan2(w[i]))
        .collect())
}

/// Inverse of [`angles_from_w`].
pub fn w_from_angles(u: &[f64]) -> Vec<f64> {
    let n = u.len() + 1;
    let mut w = Vec::with_capacity(n);
    let mut sin_prod = 1.0;
    for &theta in u {
        w.push(sin_prod * theta.cos());
        sin_prod *= theta.sin();
    }
    w.push(sin_prod);
    w
}

/// J(u) = Π_{i=1}^m sin^{m-i} θ_i.
pub fn jacobian_j(u: &[f64]) -> f64 {
    let m = u.len();
    u.iter()
        .enumerate()
        .map(|(i, theta)| theta.sin().powi((m - 1 - i) as i32))
        .product()
}

/// Whether the angles lie in [0, π/2]^m and map to an ordered,
/// nonnegative W.
pub fn angles_in_region(u: &[f64]) -> bool {
    if u.iter().any(|t| !(0.0..=FRAC_PI_2).contains(t)) {
        return false;
    }
    let w = w_from_angles(u);
    w.windows(2).all(|p| p[0] >= p[1] - 1e-14) && w.iter().all(|&x| x >= -1e-14)
}

fn check_unit_ordered(w: &[f64]) -> Result<()> {
    if w.is_empty() {
        return Err(Error::Contract("shape vector is empty".into()));
    }
    let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("W must have unit norm, got {norm}")));
    }
    if w.iter().any(|&x| x < -1e-12) {
        return Err(Error::Contract("W must be nonnegative".into()));
    }
    if w.windows(2).any(|p| p[1] > p[0] + 1e-12) {
        return Err(Error::Contract("W must be non-increasing".into()));
    }
    Ok(())
}

/// A dataset of shapes sharing (N, K).
#[derive(Debug, Clone)]
pub struct ShapeSample {
    shapes: Vec<ShapeDecomposition>,
    labels: Vec<Option<String>>,
    n_landmarks: usize,
    dim: usize,
}

impl ShapeSample {
    pub fn new(n_landmarks: usize, dim: usize) -> Self {
        ShapeSample {
            shapes: Vec::new(),
            labels: Vec::new(),
            n_landmarks,
            dim,
        }
    }

    pub fn from_shapes(
        n_landmarks: usize,
        dim: usize,
        shapes: Vec<ShapeDecomposition>,
    ) -> Result<Self> {
        let mut s = Self::new(n_landmarks, dim);
        for shape in shapes {
            s.push(shape, None)?;
        }
        Ok(s)
    }

    pub fn push(&mut self, shape: ShapeDecomposition, label: Option<String>) -> Result<()> {
        let n = (self.n_landmarks - 1).min(self.dim);
        if shape.n() != n {
            return Err(Error::InvalidDimension(format!(
                "shape has {} singular values but (N, K) = ({}, {}) needs {n}",
                shape.n(),
                self.n_landmarks,
                self.dim
            )));
        }
        self.shapes.push(shape);
        self.labels.push(label);
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n_landmarks, self.dim)
    }

    pub fn shapes(&self) -> &[ShapeDecomposition] {
        &self.shapes
    }

    pub fn labels(&self) -> &[Option<String>] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    /// Concatenation of two samples with the same dimensions.
    pub fn concat(&self, other: &ShapeSample) -> Result<ShapeSample> {
        if self.dims() != other.dims() {
            return Err(Error::InvalidDimension(format!(
                "cannot pool samples with dims {:?} and {:?}",
                self.dims(),
                other.dims()
            )));
        }
        let mut out = self.clone();
        out.shapes.extend(other.shapes.iter().cloned());
        out.labels.extend(other.labels.iter().cloned());
        Ok(out)
    }
}

/// Serializable per-specimen summary used by the extract/fit file contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeRecord {
    pub r: f64,
    pub d: Vec<f64>,
    pub w: Vec<f64>,
    pub u: Vec<f64>,
}

impl From<&ShapeDecomposition> for ShapeRecord {
    fn from(s: &ShapeDecomposition) -> Self {
        ShapeRecord {
            r: s.r,
            d: s.d.clone(),
            w: s.w.clone(),
            u: s.u.clone(),
        }
    }
}

impl ShapeRecord {
    /// Rebuilds the size-and-shape part of a decomposition. V and H are not
    /// stored, so they come back empty; densities only use D, W and u.
    pub fn to_decomposition(&self) -> Result<ShapeDecomposition> {
        let w = if self.w.is_empty() {
            w_from_angles(&self.u)
        } else {
            self.w.clone()
        };
        let u = angles_from_w(&w)?;
        let d = if self.d.is_empty() {
            w.iter().map(|x| x * self.r).collect()
        } else {
            self.d.clone()
        };
        let near_tie = w.windows(2).any(|p| (p[0] - p[1]).abs() < TIE_REL_TOL);
        Ok(ShapeDecomposition {
            v: DMatrix::zeros(0, 0),
            h: DMatrix::zeros(0, 0),
            d,
            r: self.r,
            w,
            u,
            near_tie,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_3, FRAC_PI_4, FRAC_PI_6};

    #[test]
    fn helmert_examples() {
        let l2 = helmert_submatrix(2).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!((l2[(0, 0)] - s).abs() < 1e-15 && (l2[(0, 1)] + s).abs() < 1e-15);

        let l3 = helmert_submatrix(3).unwrap();
        let expected = [
            [s, -s, 0.0],
            [1.0 / 6f64.sqrt(), 1.0 / 6f64.sqrt(), -2.0 / 6f64.sqrt()],
        ];
        for r in 0..2 {
            for c in 0..3 {
                assert!((l3[(r, c)] - expected[r][c]).abs() < 1e-15);
            }
        }
        for n in 2..12 {
            let l = helmert_submatrix(n).unwrap();
            let g = &l * l.transpose();
            assert!((g - DMatrix::identity(n - 1, n - 1)).amax() < 1e-14);
            assert!((&l * DVector::from_element(n, 1.0)).amax() < 1e-14);
        }
        assert!(matches!(helmert_submatrix(1), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn whitening_scalar_theta() {
        let x = LandmarkMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.0]])
            .unwrap();
        assert_eq!(whiten(&x, &WhitenConfig::identity()).unwrap(), *x.data());
        let cfg = WhitenConfig::with_theta(DMatrix::identity(2, 2) * 4.0).unwrap();
        let z = whiten(&x, &cfg).unwrap();
        assert!((z - x.data() / 2.0).amax() < 1e-14);
    }

    #[test]
    fn non_spd_theta_is_rejected() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = WhitenConfig::with_theta(bad).unwrap_err();
        assert!(err.to_string().contains("eigenvalue"), "{err}");
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(WhitenConfig::with_theta(asym).is_err());
    }

    #[test]
    fn diagonal_reduced_matrix() {
        // N = 3, K = 2 with Y = diag(4, 3)
        let y = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 3.0]);
        let s = decompose_reduced(&y).unwrap();
        assert!((s.d[0] - 4.0).abs() < 1e-12 && (s.d[1] - 3.0).abs() < 1e-12);
        assert!((s.r - 5.0).abs() < 1e-12);
        assert!((s.w[0] - 0.8).abs() < 1e-12 && (s.w[1] - 0.6).abs() < 1e-12);
        assert!((s.reconstruct() - y).amax() < 1e-12);
    }

    #[test]
    fn zero_figure_is_degenerate() {
        let x = LandmarkMatrix::from_rows(&vec![vec![1.0, 1.0]; 4]).unwrap();
        assert!(matches!(
            svd_shape(&x, &WhitenConfig::identity()),
            Err(Error::DegenerateFigure)
        ));
    }

    #[test]
    fn angle_examples() {
        assert_eq!(angles_from_w(&[1.0, 0.0]).unwrap(), vec![0.0]);
        let h = 2f64.sqrt() / 2.0;
        let u = angles_from_w(&[h, h]).unwrap();
        assert!((u[0] - FRAC_PI_4).abs() < 1e-15);
        assert!(angles_from_w(&[0.6, 0.8]).is_err());
        assert!(angles_from_w(&[0.5, 0.5]).is_err());
    }

    #[test]
    fn jacobian_examples() {
        assert_eq!(jacobian_j(&[0.3]), 1.0);
        assert!((jacobian_j(&[FRAC_PI_2, 0.7]) - 1.0).abs() < 1e-15);
        let v = jacobian_j(&[FRAC_PI_3, FRAC_PI_4, FRAC_PI_6]);
        assert!((v - 0.75 * std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-14);
        assert!((v - 0.53033).abs() < 1e-5);
    }

    #[test]
    fn shape_record_round_trip() {
        let y = DMatrix::from_row_slice(3, 2, &[4.0, 1.0, 0.0, 3.0, 1.0, -2.0]);
        let s = decompose_reduced(&y).unwrap();
        let rec = ShapeRecord::from(&s);
        let back = rec.to_decomposition().unwrap();
        assert_eq!(back.w, s.w);
        assert_eq!(back.d, s.d);
        assert_eq!(back.r, s.r);
        for (a, b) in back.u.iter().zip(&s.u) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn sample_rejects_mismatched_shapes() {
        let y = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 3.0]);
        let s = decompose_reduced(&y).unwrap();
        let mut sample = ShapeSample::new(5, 3);
        assert!(sample.push(s.clone(), None).is_err());
        let mut ok = ShapeSample::new(3, 2);
        ok.push(s, Some("a".into())).unwrap();
        assert_eq!(ok.concat(&ok).unwrap().len(), 2);
    }
}

//! Integer partitions, generalised hypergeometric coefficients and zonal
//! polynomials of a symmetric matrix argument.
//!
//! Zonal polynomials are evaluated from the eigenvalues of their argument
//! through the Jack-function recurrence over variables (Jack parameter
//! α = 2), rewritten directly in the zonal normalisation
//! `Σ_{κ ⊢ f} C_κ(X) = (tr X)^f`:
//!
//! ```text
//! C_κ(x_1..x_i) = Σ_{μ} γ_{κμ} C_μ(x_1..x_{i-1}) x_i^{|κ|-|μ|}
//! ```
//!
//! where μ runs over partitions with κ/μ a horizontal strip. The
//! coefficients γ only depend on (κ, μ), so they are computed once per
//! `(max_parts, max_degree)` and cached process-wide.

use crate::error::{Error, Result};
use crate::numeric::{ln_factorial, SignedLog};
use statrs::function::gamma::ln_gamma;
use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};

/// Default hard cap on zonal degrees.
pub const DEFAULT_DEGREE_CAP: usize = 120;

const JACK_ALPHA: usize = 2;

/// A partition κ = (f₁ ≥ f₂ ≥ … > 0) of its weight |κ|.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Partition(Vec<usize>);

impl Partition {
    pub fn new(parts: Vec<usize>) -> Result<Self> {
        if parts.iter().any(|&p| p == 0) {
            return Err(Error::Contract(format!(
                "partition parts must be positive: {parts:?}"
            )));
        }
        if parts.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Contract(format!(
                "partition parts must be non-increasing: {parts:?}"
            )));
        }
        Ok(Partition(parts))
    }

    pub fn empty() -> Self {
        Partition(Vec::new())
    }

    pub fn parts(&self) -> &[usize] {
        &self.0
    }

    pub fn weight(&self) -> usize {
        self.0.iter().sum()
    }

    /// Number of nonzero parts, ℓ(κ).
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Part `i` (0-based), zero past the end.
    pub fn part(&self, i: usize) -> usize {
        self.0.get(i).copied().unwrap_or(0)
    }

    /// Column lengths κ'_j.
    pub fn conjugate(&self) -> Vec<usize> {
        let width = self.part(0);
        (0..width)
            .map(|c| self.0.iter().take_while(|&&p| p > c).count())
            .collect()
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, p) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{p}")?;
        }
        write!(f, ")")
    }
}

/// Truncation rule for the infinite zonal series.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesControl {
    pub max_degree: usize,
    pub tail_rel_tol: f64,
    pub consecutive_tail_terms: usize,
    #[serde(default = "default_cap")]
    pub degree_cap: usize,
}

fn default_cap() -> usize {
    DEFAULT_DEGREE_CAP
}

impl Default for SeriesControl {
    fn default() -> Self {
        SeriesControl {
            max_degree: 60,
            tail_rel_tol: 1e-12,
            consecutive_tail_terms: 3,
            degree_cap: DEFAULT_DEGREE_CAP,
        }
    }
}

impl SeriesControl {
    pub fn with_max_degree(mut self, max_degree: usize) -> Self {
        self.max_degree = max_degree;
        self
    }

    pub fn with_tail_rel_tol(mut self, tol: f64) -> Self {
        self.tail_rel_tol = tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tail_rel_tol > 0.0) {
            return Err(Error::Config(format!(
                "tail_rel_tol must be positive, got {}",
                self.tail_rel_tol
            )));
        }
        if self.consecutive_tail_terms == 0 {
            return Err(Error::Config(
                "consecutive_tail_terms must be at least 1".into(),
            ));
        }
        if self.max_degree > self.degree_cap {
            return Err(Error::Capacity {
                degree: self.max_degree,
                cap: self.degree_cap,
            });
        }
        Ok(())
    }
}

/// All partitions of `f` into at most `max_parts` parts, lexicographically
/// descending. `f = 0` yields the empty partition.
pub fn enumerate_partitions(f: usize, max_parts: usize) -> Vec<Partition> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    fill_partitions(f, f, max_parts, &mut current, &mut out);
    out
}

fn fill_partitions(
    remaining: usize,
    largest: usize,
    slots: usize,
    current: &mut Vec<usize>,
    out: &mut Vec<Partition>,
) {
    if remaining == 0 {
        out.push(Partition(current.clone()));
        return;
    }
    if slots == 0 {
        return;
    }
    for p in (1..=largest.min(remaining)).rev() {
        // the remaining slots must be able to hold what is left
        if p * slots < remaining {
            break;
        }
        current.push(p);
        fill_partitions(remaining - p, p, slots - 1, current, out);
        current.pop();
    }
}

/// Generalised hypergeometric coefficient (a)_κ = Π_j (a - (j-1)/2)_{f_j}.
pub fn gen_pochhammer(a: f64, kappa: &Partition) -> f64 {
    kappa
        .parts()
        .iter()
        .enumerate()
        .map(|(j, &f)| {
            let base = a - j as f64 / 2.0;
            (0..f).map(|i| base + i as f64).product::<f64>()
        })
        .product()
}

/// (a)_κ in log space. Exact zeros come back as [`SignedLog::ZERO`].
pub fn ln_gen_pochhammer(a: f64, kappa: &Partition) -> SignedLog {
    let mut sign = 1.0;
    let mut ln_abs = 0.0;
    for (j, &f) in kappa.parts().iter().enumerate() {
        let base = a - j as f64 / 2.0;
        if base > 0.0 {
            ln_abs += ln_gamma(base + f as f64) - ln_gamma(base);
        } else {
            for i in 0..f {
                let x = base + i as f64;
                if x == 0.0 {
                    return SignedLog::ZERO;
                }
                sign *= x.signum();
                ln_abs += x.abs().ln();
            }
        }
    }
    SignedLog { sign, ln_abs }
}

/// ln C_κ(I_m) from the closed form
/// `2^{2k} k! (m/2)_κ Π_{i<j}(2f_i - 2f_j - i + j) / Π_i (2f_i + ℓ - i)!`.
/// Returns `-inf` when κ has more than `m` parts.
pub fn ln_zonal_identity(kappa: &Partition, m: usize) -> f64 {
    let l = kappa.len();
    if l > m {
        return f64::NEG_INFINITY;
    }
    let k = kappa.weight();
    let parts = kappa.parts();
    let mut ln = 2.0 * k as f64 * std::f64::consts::LN_2 + ln_factorial(k);
    ln += ln_gen_pochhammer(m as f64 / 2.0, kappa).ln_abs;
    for i in 0..l {
        for j in (i + 1)..l {
            let v = 2 * parts[i] as i64 - 2 * parts[j] as i64 - i as i64 + j as i64;
            ln += (v as f64).ln();
        }
        ln -= ln_factorial(2 * parts[i] + l - i - 1);
    }
    ln
}

/// Partitions with bounded length up to a maximal degree, indexed
/// degree-major in lexicographically descending order within a degree.
#[derive(Debug)]
pub struct PartitionIndex {
    max_parts: usize,
    max_degree: usize,
    partitions: Vec<Partition>,
    degree_start: Vec<usize>,
    lookup: HashMap<Partition, usize>,
}

impl PartitionIndex {
    fn new(max_parts: usize, max_degree: usize) -> Self {
        let mut partitions = Vec::new();
        let mut degree_start = Vec::with_capacity(max_degree + 2);
        for f in 0..=max_degree {
            degree_start.push(partitions.len());
            partitions.extend(enumerate_partitions(f, max_parts));
        }
        degree_start.push(partitions.len());
        let lookup = partitions
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        PartitionIndex {
            max_parts,
            max_degree,
            partitions,
            degree_start,
            lookup,
        }
    }

    pub fn max_parts(&self) -> usize {
        self.max_parts
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    pub fn len(&self) -> usize {
        self.partitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partitions.is_empty()
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    /// Index range of the partitions of weight `f`.
    pub fn degree_range(&self, f: usize) -> std::ops::Range<usize> {
        self.degree_start[f]..self.degree_start[f + 1]
    }

    pub fn position(&self, kappa: &Partition) -> Option<usize> {
        self.lookup.get(kappa).copied()
    }
}

#[derive(Debug, Clone, Copy)]
struct StripPair {
    kappa: u32,
    mu: u32,
    drop: u32,
    kappa_len: u8,
    mu_len: u8,
    gamma: f64,
}

#[derive(Debug)]
struct ZonalPlan {
    index: Arc<PartitionIndex>,
    pairs: Vec<StripPair>,
}

impl ZonalPlan {
    fn build(max_parts: usize, max_degree: usize) -> Self {
        let index = Arc::new(PartitionIndex::new(max_parts, max_degree));
        let max_hook = max_parts + JACK_ALPHA * (max_degree + 1) + 1;
        let ln_int: Vec<f64> = (0..=max_hook).map(|h| (h as f64).ln()).collect();
        let conj: Vec<Vec<usize>> = index.partitions.iter().map(|p| p.conjugate()).collect();
        let ln_j: Vec<f64> = index
            .partitions
            .iter()
            .zip(&conj)
            .map(|(p, c)| ln_hook_product(p, c, &ln_int))
            .collect();

        let mut pairs = Vec::new();
        for (ki, kappa) in index.partitions.iter().enumerate() {
            let k = kappa.weight();
            for mu in horizontal_strips(kappa) {
                let mi = index.lookup[&mu];
                let m = mu.weight();
                let ln_beta = ln_strip_beta(kappa, &conj[ki], &mu, &conj[mi], &ln_int);
                let ln_gamma_coef = ln_beta + ln_j[mi] - ln_j[ki]
                    + (k - m) as f64 * (JACK_ALPHA as f64).ln()
                    + ln_factorial(k)
                    - ln_factorial(m);
                pairs.push(StripPair {
                    kappa: ki as u32,
                    mu: mi as u32,
                    drop: (k - m) as u32,
                    kappa_len: kappa.len() as u8,
                    mu_len: mu.len() as u8,
                    gamma: ln_gamma_coef.exp(),
                });
            }
        }
        ZonalPlan { index, pairs }
    }

    fn cached(max_parts: usize, max_degree: usize) -> Arc<ZonalPlan> {
        static PLANS: OnceLock<Mutex<HashMap<(usize, usize), Arc<ZonalPlan>>>> = OnceLock::new();
        let plans = PLANS.get_or_init(|| Mutex::new(HashMap::new()));
        if let Some(plan) = plans.lock().unwrap().get(&(max_parts, max_degree)) {
            return plan.clone();
        }
        // built outside the lock so independent plans do not serialise
        let plan = Arc::new(ZonalPlan::build(max_parts, max_degree));
        plans
            .lock()
            .unwrap()
            .entry((max_parts, max_degree))
            .or_insert(plan)
            .clone()
    }

    fn evaluate(&self, eigenvalues: &[f64]) -> Vec<f64> {
        let len = self.index.len();
        let max_parts = self.index.max_parts;
        let mut current = vec![0.0; len];
        current[0] = 1.0;
        let mut powers = vec![1.0; self.index.max_degree + 1];
        for (step, &x) in eigenvalues.iter().enumerate() {
            let vars = step + 1;
            for d in 1..powers.len() {
                powers[d] = powers[d - 1] * x;
            }
            let mut next = vec![0.0; len];
            let kappa_limit = vars.min(max_parts);
            for pair in &self.pairs {
                if pair.kappa_len as usize > kappa_limit || pair.mu_len as usize > vars - 1 {
                    continue;
                }
                next[pair.kappa as usize] +=
                    pair.gamma * current[pair.mu as usize] * powers[pair.drop as usize];
            }
            current = next;
        }
        current
    }
}

/// All μ ⊆ κ with κ/μ a horizontal strip: κ_{i+1} ≤ μ_i ≤ κ_i.
fn horizontal_strips(kappa: &Partition) -> Vec<Partition> {
    let l = kappa.len();
    let mut out = Vec::new();
    let mut current = vec![0; l];
    fn rec(kappa: &Partition, i: usize, current: &mut Vec<usize>, out: &mut Vec<Partition>) {
        if i == current.len() {
            let parts: Vec<usize> = current.iter().copied().filter(|&p| p > 0).collect();
            out.push(Partition(parts));
            return;
        }
        for v in kappa.part(i + 1)..=kappa.part(i) {
            current[i] = v;
            rec(kappa, i + 1, current, out);
        }
    }
    rec(kappa, 0, &mut current, &mut out);
    out
}

// Upper hook: ν'_j - i + α(ν_i - j + 1); lower hook: ν'_j - i + 1 + α(ν_i - j)
// (1-based cells). With 0-based row r and column c these become
// conj[c] - r - 1 + α(ν_r - c) and conj[c] - r + α(ν_r - c - 1).
fn upper_hook(nu: &Partition, conj: &[usize], r: usize, c: usize) -> usize {
    conj[c] - r - 1 + JACK_ALPHA * (nu.part(r) - c)
}

fn lower_hook(nu: &Partition, conj: &[usize], r: usize, c: usize) -> usize {
    conj[c] - r + JACK_ALPHA * (nu.part(r) - c - 1)
}

/// ln j_κ = Σ_cells ln(h^*) + ln(h_*).
fn ln_hook_product(nu: &Partition, conj: &[usize], ln_int: &[f64]) -> f64 {
    let mut s = 0.0;
    for (r, &row) in nu.parts().iter().enumerate() {
        for c in 0..row {
            s += ln_int[upper_hook(nu, conj, r, c)] + ln_int[lower_hook(nu, conj, r, c)];
        }
    }
    s
}

fn ln_strip_beta(
    kappa: &Partition,
    kappa_conj: &[usize],
    mu: &Partition,
    mu_conj: &[usize],
    ln_int: &[f64],
) -> f64 {
    let same_column = |c: usize| kappa_conj[c] == mu_conj.get(c).copied().unwrap_or(0);
    let mut s = 0.0;
    for (r, &row) in kappa.parts().iter().enumerate() {
        for c in 0..row {
            let h = if same_column(c) {
                upper_hook(kappa, kappa_conj, r, c)
            } else {
                lower_hook(kappa, kappa_conj, r, c)
            };
            s += ln_int[h];
        }
    }
    for (r, &row) in mu.parts().iter().enumerate() {
        for c in 0..row {
            let h = if same_column(c) {
                upper_hook(mu, mu_conj, r, c)
            } else {
                lower_hook(mu, mu_conj, r, c)
            };
            s -= ln_int[h];
        }
    }
    s
}

/// Zonal polynomial values C_κ for every κ with |κ| ≤ `max_degree` and at
/// most `max_parts` parts, evaluated at a fixed spectrum.
#[derive(Debug, Clone)]
pub struct ZonalTable {
    eigenvalues: Vec<f64>,
    index: Arc<PartitionIndex>,
    values: Vec<f64>,
}

impl ZonalTable {
    /// Table over all partitions with at most `eigenvalues.len()` parts.
    pub fn new(eigenvalues: &[f64], max_degree: usize) -> Result<Self> {
        Self::with_limits(eigenvalues, max_degree, eigenvalues.len(), DEFAULT_DEGREE_CAP)
    }

    /// Table restricted to partitions with at most `max_parts` parts; `cap`
    /// bounds `max_degree`.
    pub fn with_limits(
        eigenvalues: &[f64],
        max_degree: usize,
        max_parts: usize,
        cap: usize,
    ) -> Result<Self> {
        if max_degree > cap {
            return Err(Error::Capacity {
                degree: max_degree,
                cap,
            });
        }
        if let Some(bad) = eigenvalues.iter().find(|x| !x.is_finite()) {
            return Err(Error::Domain(format!("non-finite eigenvalue {bad}")));
        }
        let plan = ZonalPlan::cached(max_parts, max_degree);
        let values = plan.evaluate(eigenvalues);
        Ok(ZonalTable {
            eigenvalues: eigenvalues.to_vec(),
            index: plan.index.clone(),
            values,
        })
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn max_degree(&self) -> usize {
        self.index.max_degree
    }

    pub fn index(&self) -> &PartitionIndex {
        &self.index
    }

    /// Values aligned with [`PartitionIndex::partitions`].
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// C_κ, or `None` when κ is outside the table (too long or too heavy).
    pub fn get(&self, kappa: &Partition) -> Option<f64> {
        self.index.position(kappa).map(|i| self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Partition, f64)> {
        self.index.partitions.iter().zip(self.values.iter().copied())
    }

    /// Σ_{κ ⊢ f} C_κ over the tabulated partitions.
    pub fn degree_sum(&self, f: usize) -> f64 {
        self.values[self.index.degree_range(f)].iter().sum()
    }

    /// Debug dump: one `degree,partition,value` row per entry.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("degree,partition,value\n");
        for (p, v) in self.iter() {
            out.push_str(&format!("{},{},{:e}\n", p.weight(), p, v));
        }
        out
    }
}

/// Zonal polynomial C_κ at the diagonal matrix with the given eigenvalues.
pub fn zonal(kappa: &Partition, eigenvalues: &[f64]) -> Result<f64> {
    zonal_with_cap(kappa, eigenvalues, DEFAULT_DEGREE_CAP)
}

pub fn zonal_with_cap(kappa: &Partition, eigenvalues: &[f64], cap: usize) -> Result<f64> {
    let degree = kappa.weight();
    if degree > cap {
        return Err(Error::Capacity { degree, cap });
    }
    if kappa.len() > eigenvalues.len() {
        return Ok(0.0);
    }
    let table = ZonalTable::with_limits(eigenvalues, degree, kappa.len(), cap)?;
    Ok(table.get(kappa).unwrap_or(0.0))
}

/// The shared index behind every [`ZonalTable`] with these limits.
pub fn partition_index(max_parts: usize, max_degree: usize) -> Arc<PartitionIndex> {
    ZonalPlan::cached(max_parts, max_degree).index.clone()
}

/// Convenience wrapper for [`ZonalTable::new`].
pub fn zonal_table(eigenvalues: &[f64], max_degree: usize) -> Result<ZonalTable> {
    ZonalTable::new(eigenvalues, max_degree)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(parts: &[usize]) -> Partition {
        Partition::new(parts.to_vec()).unwrap()
    }

    #[test]
    fn enumeration_examples() {
        assert_eq!(enumerate_partitions(0, 3), vec![Partition::empty()]);
        assert_eq!(enumerate_partitions(3, 2), vec![p(&[3]), p(&[2, 1])]);
        assert_eq!(
            enumerate_partitions(4, 4),
            vec![p(&[4]), p(&[3, 1]), p(&[2, 2]), p(&[2, 1, 1]), p(&[1, 1, 1, 1])]
        );
    }

    #[test]
    fn enumeration_counts_match_partition_numbers() {
        let counts: Vec<usize> = (0..=10).map(|f| enumerate_partitions(f, f.max(1)).len()).collect();
        assert_eq!(counts, vec![1, 1, 2, 3, 5, 7, 11, 15, 22, 30, 42]);
    }

    #[test]
    fn partition_validation() {
        assert!(Partition::new(vec![1, 2]).is_err());
        assert!(Partition::new(vec![2, 0]).is_err());
        assert_eq!(p(&[3, 1, 1]).conjugate(), vec![3, 1, 1]);
        assert_eq!(p(&[4, 2]).conjugate(), vec![2, 2, 1, 1]);
    }

    #[test]
    fn pochhammer_examples() {
        assert_eq!(gen_pochhammer(2.7, &p(&[1])), 2.7);
        assert_eq!(gen_pochhammer(1.0, &p(&[2])), 2.0);
        assert_eq!(gen_pochhammer(1.0, &p(&[1, 1])), 0.5);
        assert_eq!(gen_pochhammer(0.3, &Partition::empty()), 1.0);
        let lp = ln_gen_pochhammer(1.0, &p(&[3, 2]));
        assert!((lp.value() - gen_pochhammer(1.0, &p(&[3, 2]))).abs() < 1e-12);
        assert!(ln_gen_pochhammer(0.5, &p(&[1, 1])).is_zero());
    }

    #[test]
    fn zonal_small_examples() {
        assert!((zonal(&p(&[1]), &[0.3, 1.2]).unwrap() - 1.5).abs() < 1e-15);
        assert!((zonal(&p(&[2]), &[1.0, 1.0]).unwrap() - 8.0 / 3.0).abs() < 1e-14);
        assert!((zonal(&p(&[1, 1]), &[1.0, 1.0]).unwrap() - 4.0 / 3.0).abs() < 1e-14);
        assert_eq!(zonal(&p(&[1, 1, 1]), &[1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn table_examples() {
        let t = zonal_table(&[2.0], 2).unwrap();
        assert_eq!(t.index().len(), 3);
        assert!((t.get(&Partition::empty()).unwrap() - 1.0).abs() < 1e-15);
        assert!((t.get(&p(&[1])).unwrap() - 2.0).abs() < 1e-15);
        assert!((t.get(&p(&[2])).unwrap() - 4.0).abs() < 1e-13);
        assert_eq!(t.get(&p(&[1, 1])), None);

        let t = zonal_table(&[1.0, 1.0], 2).unwrap();
        assert!((t.get(&p(&[2])).unwrap() - 8.0 / 3.0).abs() < 1e-14);
        assert!((t.get(&p(&[1, 1])).unwrap() - 4.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn identity_closed_form_matches_table() {
        for m in 1..=5 {
            let ones = vec![1.0; m];
            let t = zonal_table(&ones, 8).unwrap();
            for (kappa, v) in t.iter() {
                let closed = ln_zonal_identity(kappa, m).exp();
                assert!(
                    (v - closed).abs() <= 1e-11 * closed,
                    "m={m} {kappa}: {v} vs {closed}"
                );
            }
        }
    }

    #[test]
    fn capacity_error() {
        let err = zonal(&p(&[121]), &[1.0]).unwrap_err();
        assert!(matches!(err, Error::Capacity { degree: 121, cap: 120 }));
        assert!(zonal_table(&[1.0], 121).is_err());
        assert!(zonal_with_cap(&p(&[11]), &[1.0], 10).is_err());
    }

    #[test]
    fn empty_spectrum_has_only_the_unit_term() {
        let t = zonal_table(&[], 3).unwrap();
        assert_eq!(t.index().len(), 1);
        let t2 = ZonalTable::with_limits(&[], 3, 2, 60).unwrap();
        assert_eq!(t2.get(&Partition::empty()), Some(1.0));
        assert_eq!(t2.get(&p(&[2, 1])), Some(0.0));
    }

    #[test]
    fn csv_dump_lists_every_entry() {
        let t = zonal_table(&[1.0, 0.5], 2).unwrap();
        let csv = t.to_csv();
        assert!(csv.starts_with("degree,partition,value\n"));
        assert_eq!(csv.lines().count(), 1 + t.index().len());
        assert!(csv.contains("2,(1 1),"));
    }
}

//! Gradient matching: the regularized matching objective, its feature-aware
//! extension, orthogonal matching pursuit, an exhaustive oracle, and the
//! weak-submodularity constants that bound OMP's approximation.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Budget, Dataset, SampleId};
use crate::error::{Error, Result};
use crate::featsim::DistanceMatrix;
use crate::model::{per_sample_gradient, ProxyModel};

/// Per-sample gradients of one data owner's samples, one row each.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    rows: Vec<Vec<f64>>,
    ids: Vec<SampleId>,
    grad_max: f64,
}

impl GradientSet {
    pub fn new(ids: Vec<SampleId>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} ids for {} gradient rows",
                ids.len(),
                rows.len()
            )));
        }
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::DimensionMismatch("ragged gradient rows".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Malformed("non-finite gradient entry".into()));
        }
        let grad_max = rows.iter().map(|r| norm(r)).fold(0.0, f64::max);
        Ok(Self { rows, ids, grad_max })
    }

    /// Gradients of `m`'s loss at every sample of `d`, in dataset order.
    pub fn from_model(m: &ProxyModel, d: &Dataset) -> Result<Self> {
        d.require_labeled()?;
        let rows = d
            .samples()
            .par_iter()
            .map(|z| per_sample_gradient(m, z))
            .collect::<Result<Vec<_>>>()?;
        Self::new(d.ids(), rows)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn ids(&self) -> &[SampleId] {
        &self.ids
    }

    pub fn grad_max(&self) -> f64 {
        self.grad_max
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Parameter dimension `p`.
    pub fn width(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmpConfig {
    pub k: Budget,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epsilon: f64,
    /// Upper cap on the objective; `None` means `e'(0) + 1`.
    #[serde(default)]
    pub loss_max: Option<f64>,
}

impl OmpConfig {
    pub const DEFAULT_LAMBDA1: f64 = 0.5;
    pub const DEFAULT_LAMBDA2: f64 = 0.5;
    pub const DEFAULT_EPSILON: f64 = 1e-6;

    pub fn new(k: Budget) -> Self {
        Self {
            k,
            lambda1: Self::DEFAULT_LAMBDA1,
            lambda2: Self::DEFAULT_LAMBDA2,
            epsilon: Self::DEFAULT_EPSILON,
            loss_max: None,
        }
    }

    pub fn with_lambdas(mut self, lambda1: f64, lambda2: f64) -> Self {
        self.lambda1 = lambda1;
        self.lambda2 = lambda2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda1) || !ok(self.lambda2) {
            return Err(Error::Config(
                "lambda1 and lambda2 must be finite and non-negative".into(),
            ));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if let Some(l) = self.loss_max {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::Config("loss_max must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub selected: Vec<SampleId>,
    pub weights: Vec<f64>,
    pub residual_norm: f64,
    pub objective: f64,
    pub iterations: usize,
    /// Objective after each greedy step.
    #[serde(skip)]
    pub objective_trace: Vec<f64>,
}

impl SelectionResult {
    /// Weights scattered into a dense vector aligned with `g`'s rows.
    pub fn dense_weights(&self, g: &GradientSet) -> Vec<f64> {
        let mut w = vec![0.0; g.len()];
        for (id, &v) in self.selected.iter().zip(&self.weights) {
            if let Some(j) = g.ids.iter().position(|x| x == id) {
                w[j] = v;
            }
        }
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubmodularityBound {
    pub gamma_prime: f64,
    pub rsc_m: f64,
    pub rsm_m: f64,
    pub psi_norm: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_instance(w: &[f64], g: &GradientSet, target: &[f64]) -> Result<()> {
    if w.len() != g.len() {
        return Err(Error::DimensionMismatch(format!(
            "weight vector has {} entries for {} samples",
            w.len(),
            g.len()
        )));
    }
    check_target(g, target)
}

fn check_target(g: &GradientSet, target: &[f64]) -> Result<()> {
    if !g.is_empty() && target.len() != g.width() {
        return Err(Error::DimensionMismatch(format!(
            "target has {} entries, gradients have {}",
            target.len(),
            g.width()
        )));
    }
    Ok(())
}

fn check_psi(psi: &DistanceMatrix, g: &GradientSet) -> Result<()> {
    if psi.col_ids != g.ids {
        return Err(Error::DimensionMismatch(format!(
            "distance matrix columns ({}) do not match the gradient samples ({})",
            psi.cols(),
            g.len()
        )));
    }
    Ok(())
}

/// `sum_j w_j g_j - target`.
fn residual(w: &[f64], g: &GradientSet, target: &[f64]) -> Vec<f64> {
    let mut r: Vec<f64> = target.iter().map(|t| -t).collect();
    for (wj, row) in w.iter().zip(&g.rows) {
        if *wj != 0.0 {
            for (ri, gi) in r.iter_mut().zip(row) {
                *ri += wj * gi;
            }
        }
    }
    r
}

fn psi_times(psi: &DistanceMatrix, w: &[f64]) -> Vec<f64> {
    psi.entries.iter().map(|row| dot(row, w)).collect()
}

/// `|sum_j w_j g_j - target| + lambda1 |w|^2`.
pub fn objective_e(w: &[f64], g: &GradientSet, target: &[f64], lambda1: f64) -> Result<f64> {
    check_instance(w, g, target)?;
    Ok(norm(&residual(w, g, target)) + lambda1 * dot(w, w))
}

/// [`objective_e`] plus `lambda2 |psi w|^2`.
pub fn objective_funcfeat(
    w: &[f64],
    g: &GradientSet,
    target: &[f64],
    psi: &DistanceMatrix,
    lambda1: f64,
    lambda2: f64,
) -> Result<f64> {
    check_psi(psi, g)?;
    let e = objective_e(w, g, target, lambda1)?;
    let pw = psi_times(psi, w);
    Ok(e + lambda2 * dot(&pw, &pw))
}

fn objective(w: &[f64], g: &GradientSet, target: &[f64], psi: Option<&DistanceMatrix>, cfg: &OmpConfig) -> Result<f64> {
    match psi {
        Some(p) => objective_funcfeat(w, g, target, p, cfg.lambda1, cfg.lambda2),
        None => objective_e(w, g, target, cfg.lambda1),
    }
}

/// Gradient of the configured objective at dense `w`. The first term is not
/// differentiable where the residual vanishes; its zero subgradient is used.
pub fn objective_gradient(
    w: &[f64],
    g: &GradientSet,
    target: &[f64],
    psi: Option<&DistanceMatrix>,
    lambda1: f64,
    lambda2: f64,
) -> Result<Vec<f64>> {
    check_instance(w, g, target)?;
    let r = residual(w, g, target);
    let rn = norm(&r);
    let mut grad: Vec<f64> = g
        .rows
        .iter()
        .zip(w)
        .map(|(row, wj)| {
            let fit = if rn > 0.0 { dot(row, &r) / rn } else { 0.0 };
            fit + 2.0 * lambda1 * wj
        })
        .collect();
    if let Some(p) = psi {
        check_psi(p, g)?;
        let pw = psi_times(p, w);
        for (j, gj) in grad.iter_mut().enumerate() {
            let col: f64 = p.entries.iter().zip(&pw).map(|(row, v)| row[j] * v).sum();
            *gj += 2.0 * lambda2 * col;
        }
    }
    Ok(grad)
}

/// Minimizer of `|G_S w - t|^2 + l1 |w|^2 + l2 |Psi_S w|^2` over the support.
/// Uses LU on the normal equations, falling back to the minimum-norm
/// least-squares solution of the stacked system when they are singular.
fn solve_support(
    g: &GradientSet,
    target: &[f64],
    psi: Option<&DistanceMatrix>,
    lambda1: f64,
    lambda2: f64,
    support: &[usize],
) -> Vec<f64> {
    let s = support.len();
    if s == 0 {
        return Vec::new();
    }
    let p = g.width();
    let gs = DMatrix::from_fn(p, s, |i, j| g.rows[support[j]][i]);
    let t = DVector::from_column_slice(target);
    let mut a = gs.transpose() * &gs;
    for i in 0..s {
        a[(i, i)] += lambda1;
    }
    let ps = psi
        .filter(|_| lambda2 > 0.0)
        .map(|m| DMatrix::from_fn(m.rows(), s, |i, j| m.entries[i][support[j]]));
    if let Some(ps) = &ps {
        a += (ps.transpose() * ps) * lambda2;
    }
    let b = gs.transpose() * &t;

    let lu = a.clone().lu();
    let diag = lu.u().diagonal();
    let max_pivot = diag.amax();
    let min_pivot = diag.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if max_pivot > 0.0 && min_pivot > 1e-12 * max_pivot {
        if let Some(w) = lu.solve(&b) {
            if w.iter().all(|v| v.is_finite()) {
                return w.iter().copied().collect();
            }
        }
    }

    let extra_psi = ps.as_ref().map_or(0, |m| m.nrows());
    let rows = p + s + extra_psi;
    let mut stacked = DMatrix::zeros(rows, s);
    let mut rhs = DVector::zeros(rows);
    stacked.view_mut((0, 0), (p, s)).copy_from(&gs);
    rhs.rows_mut(0, p).copy_from(&t);
    for i in 0..s {
        stacked[(p + i, i)] = lambda1.sqrt();
    }
    if let Some(ps) = &ps {
        stacked
            .view_mut((p + s, 0), (extra_psi, s))
            .copy_from(&(ps * lambda2.sqrt()));
    }
    let svd = stacked.svd(true, true);
    let tol = 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE);
    svd.solve(&rhs, tol)
        .map(|w| w.iter().copied().collect())
        .unwrap_or_else(|_| vec![0.0; s])
}

fn scatter(n: usize, support: &[usize], ws: &[f64]) -> Vec<f64> {
    let mut w = vec![0.0; n];
    for (&j, &v) in support.iter().zip(ws) {
        w[j] = v;
    }
    w
}

fn effective_lambda2(psi: Option<&DistanceMatrix>, lambda2: f64) -> f64 {
    if psi.is_some() {
        lambda2
    } else {
        0.0
    }
}

/// Greedy orthogonal matching pursuit under budget `cfg.k`.
pub fn omp_select(
    g: &GradientSet,
    target: &[f64],
    psi: Option<&DistanceMatrix>,
    cfg: &OmpConfig,
) -> Result<SelectionResult> {
    cfg.validate()?;
    cfg.k.check_pool(g.len())?;
    check_target(g, target)?;
    if let Some(p) = psi {
        check_psi(p, g)?;
    }
    let lambda2 = effective_lambda2(psi, cfg.lambda2);
    let n = g.len();
    let k = cfg.k.get();

    let mut r: Vec<f64> = target.to_vec();
    if norm(&r) > cfg.epsilon && g.grad_max == 0.0 {
        return Err(Error::ZeroGradients);
    }
    let mut support: Vec<usize> = Vec::with_capacity(k);
    let mut chosen = vec![false; n];
    let mut ws: Vec<f64> = Vec::new();
    let mut trace = Vec::with_capacity(k);
    let mut iterations = 0;

    while support.len() < k && norm(&r) > cfg.epsilon {
        // ties go to the lowest sample id
        let mut best: Option<(f64, usize)> = None;
        for j in (0..n).filter(|&j| !chosen[j]) {
            let score = dot(&g.rows[j], &r).abs();
            let better = match best {
                None => true,
                Some((s, b)) => score > s || (score == s && g.ids[j] < g.ids[b]),
            };
            if better {
                best = Some((score, j));
            }
        }
        let Some((_, j)) = best else { break };
        chosen[j] = true;
        support.push(j);
        let prev_obj = match trace.last() {
            Some(&o) => o,
            None => objective(&vec![0.0; n], g, target, psi, cfg)?,
        };
        let fresh = solve_support(g, target, psi, cfg.lambda1, lambda2, &support);
        let fresh_obj = objective(&scatter(n, &support, &fresh), g, target, psi, cfg)?;
        // The ridge solve minimizes the squared fit; keep the previous weights
        // (new atom at zero) if they score better on the unsquared objective.
        let obj = if fresh_obj <= prev_obj {
            ws = fresh;
            fresh_obj
        } else {
            ws.push(0.0);
            prev_obj
        };
        let w = scatter(n, &support, &ws);
        r = residual(&w, g, target).iter().map(|v| -v).collect();
        trace.push(obj);
        iterations += 1;
    }

    let w = scatter(n, &support, &ws);
    Ok(SelectionResult {
        selected: support.iter().map(|&j| g.ids[j]).collect(),
        weights: ws,
        residual_norm: norm(&r),
        objective: objective(&w, g, target, psi, cfg)?,
        iterations,
        objective_trace: trace,
    })
}

/// `C(n, k)`, saturating.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    c
}

/// Largest `C(N, k)` the exhaustive oracle accepts.
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

/// Exhaustive search over every support of size at most `k`, each solved
/// with the same ridge system as [`omp_select`]. Ties keep the smaller,
/// then lexicographically first, support.
pub fn brute_force_select(
    g: &GradientSet,
    target: &[f64],
    psi: Option<&DistanceMatrix>,
    cfg: &OmpConfig,
) -> Result<SelectionResult> {
    cfg.validate()?;
    check_target(g, target)?;
    if let Some(p) = psi {
        check_psi(p, g)?;
    }
    let n = g.len();
    let k = cfg.k.get().min(n);
    let c = binomial(n, k);
    if c > BRUTE_FORCE_LIMIT {
        return Err(Error::InstanceTooLarge(c));
    }
    let lambda2 = effective_lambda2(psi, cfg.lambda2);

    let mut best_support: Vec<usize> = Vec::new();
    let mut best_ws: Vec<f64> = Vec::new();
    let mut best_obj = objective(&vec![0.0; n], g, target, psi, cfg)?;
    for size in 1..=k {
        let mut comb: Vec<usize> = (0..size).collect();
        loop {
            let ws = solve_support(g, target, psi, cfg.lambda1, lambda2, &comb);
            let obj = objective(&scatter(n, &comb, &ws), g, target, psi, cfg)?;
            if obj < best_obj {
                best_obj = obj;
                best_support = comb.clone();
                best_ws = ws;
            }
            if !next_combination(&mut comb, n) {
                break;
            }
        }
    }
    let w = scatter(n, &best_support, &best_ws);
    Ok(SelectionResult {
        selected: best_support.iter().map(|&j| g.ids[j]).collect(),
        weights: best_ws,
        residual_norm: norm(&residual(&w, g, target)),
        objective: best_obj,
        iterations: best_support.len(),
        objective_trace: Vec::new(),
    })
}

/// Advances `comb` to the next ascending `comb.len()`-subset of `0..n`.
fn next_combination(comb: &mut [usize], n: usize) -> bool {
    let k = comb.len();
    let Some(i) = (0..k).rev().find(|&i| comb[i] < n - k + i) else {
        return false;
    };
    comb[i] += 1;
    for j in i + 1..k {
        comb[j] = comb[j - 1] + 1;
    }
    true
}

pub const POWER_ITERATION_TOL: f64 = 1e-10;
pub const POWER_ITERATION_MAX: usize = 10_000;

/// Largest singular value of `psi`, by power iteration on `psi^T psi`.
pub fn spectral_norm(psi: &DistanceMatrix) -> f64 {
    spectral_norm_of(&psi.entries)
}

pub fn spectral_norm_of(m: &[Vec<f64>]) -> f64 {
    let cols = m.first().map_or(0, Vec::len);
    if cols == 0 {
        return 0.0;
    }
    // fixed, non-symmetric start so it is unlikely to be orthogonal to the top vector
    let mut v: Vec<f64> = (0..cols).map(|i| 1.0 + (i as f64 + 1.0).sqrt() / cols as f64).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut sigma = 0.0;
    for _ in 0..POWER_ITERATION_MAX {
        let mv: Vec<f64> = m.iter().map(|row| dot(row, &v)).collect();
        let next_sigma = norm(&mv);
        if next_sigma == 0.0 {
            return 0.0;
        }
        let mut w = vec![0.0; cols];
        for (row, a) in m.iter().zip(&mv) {
            for (wj, rj) in w.iter_mut().zip(row) {
                *wj += rj * a;
            }
        }
        let wn = norm(&w);
        if wn == 0.0 {
            return next_sigma;
        }
        w.iter_mut().for_each(|x| *x /= wn);
        let converged = (next_sigma - sigma).abs() <= POWER_ITERATION_TOL * next_sigma;
        sigma = next_sigma;
        v = w;
        if converged {
            break;
        }
    }
    sigma
}

/// Weak-submodularity constants of the negated objective on `k`-sparse supports.
pub fn submodularity_bound(
    cfg: &OmpConfig,
    psi: Option<&DistanceMatrix>,
    g: &GradientSet,
) -> Result<SubmodularityBound> {
    let psi_norm = psi.map_or(0.0, spectral_norm);
    bound_from_parts(cfg.lambda1, cfg.lambda2, psi_norm, cfg.k.get(), g.grad_max)
}

/// The same constants from scalar ingredients.
pub fn bound_from_parts(
    lambda1: f64,
    lambda2: f64,
    psi_norm: f64,
    k: usize,
    grad_max: f64,
) -> Result<SubmodularityBound> {
    let base = lambda1 + lambda2 * psi_norm * psi_norm;
    if base.is_nan() || base <= 0.0 {
        return Err(Error::DegenerateDenominator);
    }
    let spread = k as f64 * grad_max * grad_max;
    Ok(SubmodularityBound {
        gamma_prime: base / (base + spread),
        rsc_m: 2.0 * base,
        rsm_m: 2.0 * (base + spread),
        psi_norm,
    })
}

/// OMP against exhaustive search on one instance, in terms of
/// `f = loss_max - e'` and the `1 - e^{-gamma'}` guarantee.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuaranteeCheck {
    pub loss_max: f64,
    pub f_omp: f64,
    pub f_best: f64,
    pub gamma_prime: f64,
    /// `(1 - e^{-gamma'}) * f_best`.
    pub bound: f64,
    /// `f_best - f_omp`; zero when OMP is optimal.
    pub margin: f64,
    pub satisfied: bool,
}

pub fn check_guarantee(
    g: &GradientSet,
    target: &[f64],
    psi: Option<&DistanceMatrix>,
    cfg: &OmpConfig,
) -> Result<GuaranteeCheck> {
    let best = brute_force_select(g, target, psi, cfg)?;
    let omp = omp_select(g, target, psi, cfg)?;
    let bound = submodularity_bound(cfg, psi, g)?;
    let loss_max = match cfg.loss_max {
        Some(l) => l,
        None => objective(&vec![0.0; g.len()], g, target, psi, cfg)? + 1.0,
    };
    let f_omp = loss_max - omp.objective;
    let f_best = loss_max - best.objective;
    let guaranteed = (1.0 - (-bound.gamma_prime).exp()) * f_best;
    Ok(GuaranteeCheck {
        loss_max,
        f_omp,
        f_best,
        gamma_prime: bound.gamma_prime,
        bound: guaranteed,
        margin: f_best - f_omp,
        satisfied: f_omp >= guaranteed - 1e-12 * loss_max.abs().max(1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Sample, SeededRng};
    use crate::featsim::Metric;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn guarantee_check_on_planted_atom_has_zero_margin() {
        let g = gs(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]);
        let cfg = OmpConfig::new(Budget::new(1).unwrap()).with_lambdas(0.5, 0.0);
        let c = check_guarantee(&g, &[0.6, 0.8], None, &cfg).unwrap();
        assert_eq!(c.margin, 0.0);
        assert!(c.satisfied);
        // gamma' = 0.5 / (0.5 + 1)
        assert!((c.gamma_prime - 1.0 / 3.0).abs() < 1e-15);
    }

    fn gs(rows: Vec<Vec<f64>>) -> GradientSet {
        GradientSet::new((0..rows.len()).collect(), rows).unwrap()
    }

    fn psi_for(entries: Vec<Vec<f64>>) -> DistanceMatrix {
        DistanceMatrix {
            row_ids: (0..entries.len()).collect(),
            col_ids: (0..entries[0].len()).collect(),
            entries,
            metric: Metric::L2,
        }
    }

    fn gauss(rng: &mut impl Rng, r: usize, c: usize) -> Vec<Vec<f64>> {
        (0..r)
            .map(|_| (0..c).map(|_| StandardNormal.sample(rng)).collect())
            .collect()
    }

    fn cfg(k: usize, l1: f64, l2: f64) -> OmpConfig {
        OmpConfig::new(Budget::new(k).unwrap()).with_lambdas(l1, l2)
    }

    #[test]
    fn grad_max_is_max_row_norm() {
        let g = gs(vec![vec![3.0, 4.0], vec![1.0, 0.0]]);
        assert_eq!(g.grad_max(), 5.0);
        assert!(GradientSet::new(vec![0], vec![vec![f64::NAN]]).is_err());
    }

    #[test]
    fn from_model_matches_per_sample() {
        let d = Dataset::new(
            "d",
            2,
            vec![
                Sample::new(4, vec![1.0, -1.0], Some(0)),
                Sample::new(9, vec![0.5, 2.0], Some(1)),
            ],
        )
        .unwrap();
        let m = ProxyModel::zeros(&[0, 1], 2);
        let g = GradientSet::from_model(&m, &d).unwrap();
        assert_eq!(g.ids(), &[4, 9]);
        assert_eq!(g.rows()[1], per_sample_gradient(&m, &d.samples()[1]).unwrap());
    }

    #[test]
    fn objective_trivial_cases() {
        let g = gs(vec![vec![1.0, 2.0], vec![0.0, 1.0]]);
        let t = [1.0, 2.0];
        assert_eq!(objective_e(&[0.0, 0.0], &g, &t, 0.7).unwrap(), 5f64.sqrt());
        assert_eq!(objective_e(&[1.0, 0.0], &g, &t, 0.0).unwrap(), 0.0);
        let p = psi_for(vec![vec![2.0, 1.0]]);
        assert_eq!(
            objective_funcfeat(&[0.0, 0.0], &g, &t, &p, 0.3, 9.0).unwrap(),
            5f64.sqrt()
        );
        assert_eq!(
            objective_funcfeat(&[0.4, -0.2], &g, &t, &p, 0.3, 0.0).unwrap(),
            objective_e(&[0.4, -0.2], &g, &t, 0.3).unwrap()
        );
        assert!(matches!(
            objective_e(&[0.0], &g, &t, 0.0),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn objectives_match_naive_loops() {
        let mut rng = SeededRng::new(21).rng();
        for _ in 0..10 {
            let rows = gauss(&mut rng, 4, 3);
            let t: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let pe = gauss(&mut rng, 2, 4);
            let (l1, l2) = (0.3, 0.7);
            let mut fit = 0.0;
            for i in 0..3 {
                let mut s = -t[i];
                for j in 0..4 {
                    s += w[j] * rows[j][i];
                }
                fit += s * s;
            }
            let mut reg = 0.0;
            for j in 0..4 {
                reg += w[j] * w[j];
            }
            let mut feat = 0.0;
            for a in 0..2 {
                let mut s = 0.0;
                for j in 0..4 {
                    s += pe[a][j] * w[j];
                }
                feat += s * s;
            }
            let g = gs(rows);
            let e = objective_e(&w, &g, &t, l1).unwrap();
            assert!((e - (fit.sqrt() + l1 * reg)).abs() < 1e-12);
            let ef = objective_funcfeat(&w, &g, &t, &psi_for(pe), l1, l2).unwrap();
            assert!((ef - (fit.sqrt() + l1 * reg + l2 * feat)).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(8).rng();
        let g = gs(gauss(&mut rng, 5, 4));
        let t: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = psi_for(gauss(&mut rng, 3, 5));
        let w: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grad = objective_gradient(&w, &g, &t, Some(&p), 0.4, 0.6).unwrap();
        let h = 1e-6;
        for j in 0..5 {
            let mut up = w.clone();
            up[j] += h;
            let mut dn = w.clone();
            dn[j] -= h;
            let fd = (objective_funcfeat(&up, &g, &t, &p, 0.4, 0.6).unwrap()
                - objective_funcfeat(&dn, &g, &t, &p, 0.4, 0.6).unwrap())
                / (2.0 * h);
            assert!((fd - grad[j]).abs() < 1e-6, "{fd} vs {}", grad[j]);
        }
    }

    #[test]
    fn planted_atom() {
        let mut rng = SeededRng::new(2).rng();
        let rows = gauss(&mut rng, 6, 5);
        let t = rows[3].clone();
        let g = gs(rows);
        let c = cfg(1, 0.0, 0.0);
        let r = omp_select(&g, &t, None, &c).unwrap();
        assert_eq!(r.selected, vec![3]);
        assert!((r.weights[0] - 1.0).abs() < 1e-9);
        assert!(r.residual_norm <= 1e-9);
        let b = brute_force_select(&g, &t, None, &c).unwrap();
        assert_eq!(b.selected, r.selected);
        assert!((b.weights[0] - r.weights[0]).abs() < 1e-12);
    }

    #[test]
    fn orthonormal_recovery() {
        let rows = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.6, 0.8],
            vec![0.0, 0.8, -0.6],
            vec![0.5, 0.5, 0.0],
        ];
        let t: Vec<f64> = (0..3).map(|i| 2.0 * rows[0][i] + 3.0 * rows[1][i]).collect();
        let g = gs(rows);
        let r = omp_select(&g, &t, None, &cfg(2, 0.0, 0.0)).unwrap();
        let mut pairs: Vec<(usize, f64)> = r.selected.iter().copied().zip(r.weights.iter().copied()).collect();
        pairs.sort_by_key(|p| p.0);
        assert_eq!(pairs[0].0, 0);
        assert_eq!(pairs[1].0, 1);
        assert!((pairs[0].1 - 2.0).abs() < 1e-9 && (pairs[1].1 - 3.0).abs() < 1e-9);
        assert!(r.residual_norm <= 1e-9);
    }

    #[test]
    fn omp_errors() {
        let g = gs(vec![vec![1.0], vec![2.0]]);
        assert!(matches!(
            omp_select(&g, &[1.0], None, &cfg(2, 0.5, 0.0)),
            Err(Error::BudgetTooLarge { k: 2, n: 2 })
        ));
        let z = gs(vec![vec![0.0], vec![0.0]]);
        assert!(matches!(
            omp_select(&z, &[1.0], None, &cfg(1, 0.5, 0.0)),
            Err(Error::ZeroGradients)
        ));
        assert!(omp_select(&z, &[0.0], None, &cfg(1, 0.5, 0.0))
            .unwrap()
            .selected
            .is_empty());
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let g = GradientSet::new(vec![7, 3, 5], vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 0.1]]).unwrap();
        let r = omp_select(&g, &[1.0, 0.0], None, &cfg(1, 0.0, 0.0)).unwrap();
        assert_eq!(r.selected, vec![3]);
    }

    #[test]
    fn duplicate_rows_use_min_norm_solution() {
        // rank-deficient support with no regularization
        let g = gs(vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let ws = solve_support(&g, &[2.0, 0.0], None, 0.0, 0.0, &[0, 1]);
        assert!((ws[0] - 1.0).abs() < 1e-12 && (ws[1] - 1.0).abs() < 1e-12);
    }

    /// Ridge re-solve agrees with an SVD solution of the stacked system.
    #[test]
    fn ridge_solve_matches_svd_oracle() {
        let mut rng = SeededRng::new(77).rng();
        for _ in 0..20 {
            let rows = gauss(&mut rng, 6, 4);
            let pe: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..6).map(|_| rng.random_range(0.0..3.0)).collect())
                .collect();
            let t: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
            let support = [1usize, 4, 5];
            let (l1, l2) = (0.3, 0.2);
            let g = gs(rows.clone());
            let p = psi_for(pe.clone());
            let ws = solve_support(&g, &t, Some(&p), l1, l2, &support);

            let rows_total = 4 + 3 + 3;
            let mut a = DMatrix::<f64>::zeros(rows_total, 3);
            let mut b = DVector::<f64>::zeros(rows_total);
            for (j, &s) in support.iter().enumerate() {
                for i in 0..4 {
                    a[(i, j)] = rows[s][i];
                }
                a[(4 + j, j)] = l1.sqrt();
                for i in 0..3 {
                    a[(7 + i, j)] = l2.sqrt() * pe[i][s];
                }
            }
            for i in 0..4 {
                b[i] = t[i];
            }
            let oracle = a.svd(true, true).solve(&b, 1e-14).unwrap();
            for j in 0..3 {
                assert!((ws[j] - oracle[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn brute_force_hand_enumeration() {
        // N=3, k=2, lambda=0: supports {0,1} and {0,2} fit exactly, pick the first found
        let g = gs(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let t = [1.0, 2.0];
        let c = cfg(2, 0.0, 0.0);
        let b = brute_force_select(&g, &t, None, &c).unwrap();
        assert_eq!(b.selected, vec![0, 1]);
        assert!(b.objective < 1e-12);
        // with lambda1 = 0.5 enumerate all six non-empty supports by hand
        let c = cfg(2, 0.5, 0.0);
        let b = brute_force_select(&g, &t, None, &c).unwrap();
        let supports: [&[usize]; 6] = [&[0], &[1], &[2], &[0, 1], &[0, 2], &[1, 2]];
        let mut best = (objective_e(&[0.0; 3], &g, &t, 0.5).unwrap(), Vec::new());
        for s in supports {
            let ws = solve_support(&g, &t, None, 0.5, 0.0, s);
            let obj = objective_e(&scatter(3, s, &ws), &g, &t, 0.5).unwrap();
            if obj < best.0 {
                best = (obj, s.to_vec());
            }
        }
        assert_eq!(b.selected, best.1);
        assert!((b.objective - best.0).abs() < 1e-12);
    }

    #[test]
    fn brute_force_guard() {
        assert_eq!(binomial(5, 2), 10);
        assert_eq!(binomial(40, 20), 137_846_528_820);
        let g = gs(vec![vec![1.0]; 40]);
        assert!(matches!(
            brute_force_select(&g, &[1.0], None, &cfg(20, 0.5, 0.0)),
            Err(Error::InstanceTooLarge(137_846_528_820))
        ));
    }

    #[test]
    fn combinations_enumerate_all() {
        let mut c = vec![0, 1];
        let mut seen = vec![c.clone()];
        while next_combination(&mut c, 4) {
            seen.push(c.clone());
        }
        assert_eq!(
            seen,
            vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]
        );
    }

    #[test]
    fn bound_arithmetic() {
        let b = bound_from_parts(1.0, 0.0, 0.0, 1, 1.0).unwrap();
        assert_eq!(b.gamma_prime, 0.5);
        assert_eq!(bound_from_parts(1.0, 0.0, 0.0, 3, 0.0).unwrap().gamma_prime, 1.0);
        let b = bound_from_parts(2.0, 3.0, 2.0, 5, 2f64.sqrt()).unwrap();
        assert!((b.gamma_prime - 14.0 / 24.0).abs() < 1e-12);
        assert!((b.rsc_m - 28.0).abs() < 1e-12);
        assert!((b.rsm_m - 48.0).abs() < 1e-12);
        assert!(matches!(
            bound_from_parts(0.0, 0.0, 1.0, 1, 1.0),
            Err(Error::DegenerateDenominator)
        ));
        assert!(matches!(
            bound_from_parts(0.0, 1.0, 0.0, 1, 1.0),
            Err(Error::DegenerateDenominator)
        ));
    }

    #[test]
    fn submodularity_bound_uses_psi_norm() {
        let g = gs(vec![vec![3.0, 4.0], vec![0.0, 1.0]]);
        let p = psi_for(vec![vec![3.0, 0.0], vec![0.0, 1.0]]);
        let b = submodularity_bound(&cfg(1, 1.0, 1.0), Some(&p), &g).unwrap();
        assert!((b.psi_norm - 3.0).abs() < 1e-9);
        assert!((b.gamma_prime - 10.0 / 35.0).abs() < 1e-9);
        assert_eq!(submodularity_bound(&cfg(1, 1.0, 1.0), None, &g).unwrap().psi_norm, 0.0);
    }

    #[test]
    fn spectral_norm_cases() {
        assert!((spectral_norm_of(&[vec![3.0, 0.0], vec![0.0, 1.0]]) - 3.0).abs() < 1e-9);
        let u = [1.0, -2.0, 0.5];
        let v = [0.3, 0.4, 1.2, -0.7];
        let outer: Vec<Vec<f64>> = u.iter().map(|a| v.iter().map(|b| a * b).collect()).collect();
        assert!((spectral_norm_of(&outer) - norm(&u) * norm(&v)).abs() < 1e-9);
        assert_eq!(spectral_norm_of(&[vec![0.0, 0.0]]), 0.0);
    }

    #[test]
    fn spectral_norm_matches_svd() {
        let mut rng = SeededRng::new(55).rng();
        for _ in 0..20 {
            let m = gauss(&mut rng, 5, 7);
            let oracle = DMatrix::from_fn(5, 7, |i, j| m[i][j]).singular_values().max();
            let est = spectral_norm_of(&m);
            assert!((est - oracle).abs() <= 1e-8 * oracle, "{est} vs {oracle}");
        }
    }

    fn random_instance(seed: u64, with_psi: bool) -> (GradientSet, Vec<f64>, Option<DistanceMatrix>) {
        let mut rng = SeededRng::new(seed).rng();
        let n = rng.random_range(4..=10);
        let p = rng.random_range(2..=8);
        let g = gs(gauss(&mut rng, n, p));
        let t: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
        let psi = with_psi.then(|| {
            psi_for(
                (0..3)
                    .map(|_| (0..n).map(|_| rng.random_range(0.0..1.0)).collect())
                    .collect(),
            )
        });
        (g, t, psi)
    }

    proptest::proptest! {
        #[test]
        fn objective_non_increasing(seed in 0u64..400, with_psi in proptest::bool::ANY, l1 in 0.0f64..1.0) {
            let (g, t, psi) = random_instance(seed, with_psi);
            let k = 3.min(g.len() - 1);
            let c = cfg(k, l1, 0.5);
            let r = omp_select(&g, &t, psi.as_ref(), &c).unwrap();
            let mut prev = objective(&vec![0.0; g.len()], &g, &t, psi.as_ref(), &c).unwrap();
            for &o in &r.objective_trace {
                proptest::prop_assert!(o <= prev + 1e-12, "{o} > {prev}");
                prev = o;
            }
        }

        #[test]
        fn residual_non_increasing_unregularized(seed in 0u64..400) {
            let (g, t, _) = random_instance(seed, false);
            let k = 4.min(g.len() - 1);
            let c = cfg(k, 0.0, 0.0);
            let r = omp_select(&g, &t, None, &c).unwrap();
            let mut prev = norm(&t);
            for &o in &r.objective_trace {
                proptest::prop_assert!(o <= prev + 1e-12);
                prev = o;
            }
        }

        #[test]
        fn objective_is_reported_faithfully(seed in 0u64..400, with_psi in proptest::bool::ANY) {
            let (g, t, psi) = random_instance(seed, with_psi);
            let c = cfg(2, 0.5, 0.5);
            let r = omp_select(&g, &t, psi.as_ref(), &c).unwrap();
            proptest::prop_assert!(r.selected.len() <= 2);
            let w = r.dense_weights(&g);
            let indep = objective(&w, &g, &t, psi.as_ref(), &c).unwrap();
            proptest::prop_assert!((indep - r.objective).abs() < 1e-9);
            let b = brute_force_select(&g, &t, psi.as_ref(), &c).unwrap();
            proptest::prop_assert!(b.objective <= r.objective + 1e-12);
        }

        #[test]
        fn scale_invariant_support(seed in 0u64..300, scale in 0.01f64..100.0) {
            let (g, t, _) = random_instance(seed, false);
            let k = 3.min(g.len() - 1);
            let c = cfg(k, 0.0, 0.0);
            let a = omp_select(&g, &t, None, &c).unwrap();
            let scaled = GradientSet::new(
                g.ids().to_vec(),
                g.rows().iter().map(|r| r.iter().map(|v| v * scale).collect()).collect(),
            ).unwrap();
            let ts: Vec<f64> = t.iter().map(|v| v * scale).collect();
            let b = omp_select(&scaled, &ts, None, &c).unwrap();
            proptest::prop_assert_eq!(a.selected, b.selected);
        }

        #[test]
        fn deterministic(seed in 0u64..200) {
            let (g, t, psi) = random_instance(seed, true);
            let c = cfg(3, 0.5, 0.5);
            proptest::prop_assert_eq!(
                omp_select(&g, &t, psi.as_ref(), &c).unwrap(),
                omp_select(&g, &t, psi.as_ref(), &c).unwrap()
            );
        }
    }

    #[test]
    fn result_json_shape() {
        let r = SelectionResult {
            selected: vec![2],
            weights: vec![0.5],
            residual_norm: 0.25,
            objective: 1.0,
            iterations: 1,
            objective_trace: vec![1.0],
        };
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"selected":[2],"weights":[0.5],"residual_norm":0.25,"objective":1.0,"iterations":1}"#
        );
    }
}

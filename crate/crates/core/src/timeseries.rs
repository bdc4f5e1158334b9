//! Hard-EM fusion of time-series annotations.
//!
//! Each annotator is a bank of causal FIR filters: annotation dimension `d`
//! is the sum over ground-truth dimensions `d'` of a width-W causal
//! convolution of ground-truth column `d'`, plus noise. The E-step replaces
//! the conditional expectation with the conditional mode, the solution of a
//! ridge-free quadratic whose normal matrix is banded once coordinates are
//! ordered frame-major, so instances with tens of thousands of frames stay
//! tractable.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ridged_cholesky, SymBanded};
use crate::num::Real;
use crate::types::{TimeSeriesDataset, TimeSeriesInstance};

/// Per-annotator filter coefficients. The vector for (annotator `k`, output
/// dimension `d`) has length `W * D` and concatenates D causal sub-filters:
/// entry `d' * W + w` is the tap applied to ground-truth dimension `d'` at
/// lag `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank<T: Real> {
    k: usize,
    d: usize,
    w: usize,
    coeffs: Vec<DVector<T>>,
}

impl<T: Real> FilterBank<T> {
    pub fn new(k: usize, d: usize, w: usize, coeffs: Vec<DVector<T>>) -> Result<Self> {
        if w == 0 {
            return Err(Error::validation("filter width must be at least 1"));
        }
        if coeffs.len() != k * d {
            return Err(Error::validation(format!(
                "filter bank needs {} coefficient vectors, got {}",
                k * d,
                coeffs.len()
            )));
        }
        for (i, c) in coeffs.iter().enumerate() {
            if c.len() != w * d {
                return Err(Error::validation(format!(
                    "coefficient vector {} has length {} (expected {})",
                    i,
                    c.len(),
                    w * d
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!(
                    "coefficient vector {} contains a non-finite value",
                    i
                )));
            }
        }
        Ok(FilterBank { k, d, w, coeffs })
    }

    /// Unit-gain identity bank: each output dimension copies its own
    /// ground-truth dimension with zero lag.
    pub fn identity(k: usize, d: usize, w: usize) -> Self {
        let mut coeffs = Vec::with_capacity(k * d);
        for _ in 0..k {
            for dd in 0..d {
                let mut c = DVector::zeros(w * d);
                c[dd * w] = T::one();
                coeffs.push(c);
            }
        }
        FilterBank { k, d, w, coeffs }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn coefficients(&self, k: usize, d: usize) -> &DVector<T> {
        &self.coeffs[k * self.d + d]
    }

    pub fn set_coefficients(&mut self, k: usize, d: usize, c: DVector<T>) {
        assert_eq!(c.len(), self.w * self.d);
        self.coeffs[k * self.d + d] = c;
    }
}

/// Parameters of the time-series model.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesModelParams<T: Real> {
    pub theta: DMatrix<T>,
    pub bank: FilterBank<T>,
    pub sigma2: T,
    pub tau2: Vec<T>,
}

impl<T: Real> TimeSeriesModelParams<T> {
    pub fn new(theta: DMatrix<T>, bank: FilterBank<T>, sigma2: T, tau2: Vec<T>) -> Result<Self> {
        if theta.ncols() != bank.d() {
            return Err(Error::validation(
                "theta column count does not match the filter bank dimension",
            ));
        }
        if tau2.len() != bank.k() {
            return Err(Error::validation(
                "one tau2 per annotator in the pool is required",
            ));
        }
        if !(sigma2 > T::zero()) || !sigma2.is_finite() {
            return Err(Error::validation("sigma2 must be positive and finite"));
        }
        for (k, t2) in tau2.iter().enumerate() {
            if !(*t2 > T::zero()) || !t2.is_finite() {
                return Err(Error::validation(format!(
                    "annotator {k}: tau2 must be positive and finite"
                )));
            }
        }
        Ok(TimeSeriesModelParams {
            theta,
            bank,
            sigma2,
            tau2,
        })
    }

    pub fn p(&self) -> usize {
        self.theta.nrows()
    }

    pub fn d(&self) -> usize {
        self.bank.d()
    }

    pub fn k(&self) -> usize {
        self.bank.k()
    }

    pub fn w(&self) -> usize {
        self.bank.w()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TimeSeriesFitConfig {
    /// Filter width (taps per causal sub-filter).
    pub w: usize,
    pub max_iters: usize,
    /// Relative complete-data objective change below which a restart stops.
    pub rel_obj_tol: f64,
    /// Number of random initializations.
    pub restarts: usize,
    /// Relative residual tolerance for the E-step linear solve.
    pub solver_tol: f64,
    pub ridge: f64,
    pub sigma2_floor: f64,
    pub tau2_floor: f64,
    pub rng_seed: u64,
}

impl Default for TimeSeriesFitConfig {
    fn default() -> Self {
        TimeSeriesFitConfig {
            w: 5,
            max_iters: 100,
            rel_obj_tol: 5e-3,
            restarts: 20,
            solver_tol: 1e-8,
            ridge: 1e-8,
            sigma2_floor: 1e-8,
            tau2_floor: 1e-8,
            rng_seed: 0,
        }
    }
}

impl TimeSeriesFitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w == 0 {
            return Err(Error::validation("filter width must be at least 1"));
        }
        if self.restarts == 0 {
            return Err(Error::validation("at least one restart is required"));
        }
        if self.max_iters == 0 {
            return Err(Error::validation("max_iters must be at least 1"));
        }
        if !(self.rel_obj_tol > 0.0) || !(self.solver_tol > 0.0) {
            return Err(Error::validation("tolerances must be positive"));
        }
        if self.ridge < 0.0 {
            return Err(Error::validation("ridge must be nonnegative"));
        }
        if !(self.sigma2_floor > 0.0) || !(self.tau2_floor > 0.0) {
            return Err(Error::validation("variance floors must be positive"));
        }
        Ok(())
    }
}

/// The outcome of one random initialization.
#[derive(Debug, Clone)]
pub struct RestartFit<T: Real> {
    pub restart: usize,
    pub params: TimeSeriesModelParams<T>,
    /// Final ground-truth modes, aligned with the dataset instances.
    pub modes: Vec<DMatrix<T>>,
    /// Complete-data objective after initialization and after each iteration.
    pub objective: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
}

/// All restarts of one fit; selection across restarts (and widths) is the
/// evaluation layer's job, but the highest final objective is recorded.
#[derive(Debug, Clone)]
pub struct TimeSeriesFitOutcome<T: Real> {
    pub restarts: Vec<RestartFit<T>>,
    pub best: usize,
}

impl<T: Real> TimeSeriesFitOutcome<T> {
    pub fn best(&self) -> &RestartFit<T> {
        &self.restarts[self.best]
    }
}

// ---------------------------------------------------------------------------
// Filtering
// ---------------------------------------------------------------------------

/// Apply annotator `k`'s filter for output dimension `d` to a T x D
/// ground-truth matrix: the sum over ground-truth dimensions of causal
/// convolutions, zero-padded before the first frame.
pub fn apply_filter<T: Real>(
    bank: &FilterBank<T>,
    k: usize,
    d: usize,
    ground_truth: &DMatrix<T>,
) -> Result<DVector<T>> {
    if k >= bank.k() || d >= bank.d() {
        return Err(Error::shape(format!(
            "filter index (k={k}, d={d}) outside bank ({}, {})",
            bank.k(),
            bank.d()
        )));
    }
    if ground_truth.ncols() != bank.d() {
        return Err(Error::shape(format!(
            "ground truth has {} columns, bank expects {}",
            ground_truth.ncols(),
            bank.d()
        )));
    }
    let t = ground_truth.nrows();
    let w = bank.w();
    if t < w {
        return Err(Error::shape(format!(
            "series length {t} shorter than filter width {w}"
        )));
    }
    let coeffs = bank.coefficients(k, d);
    let mut out = DVector::zeros(t);
    for dp in 0..bank.d() {
        for r in 0..t {
            let mut acc = out[r];
            for wi in 0..w.min(r + 1) {
                acc += coeffs[dp * w + wi] * ground_truth[(r - wi, dp)];
            }
            out[r] = acc;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// E-step: conditional mode via a banded normal system
// ---------------------------------------------------------------------------

/// Conditional mode of the ground truth for one instance: the minimizer of
/// the filter residuals plus the prior residual. The TD x TD normal matrix is
/// assembled directly in banded storage with frame-major ordering (bandwidth
/// at most W*D) and factored with a banded Cholesky; the solution is refined
/// until the relative residual is below `solver_tol`.
pub fn e_step_mode<T: Real>(
    params: &TimeSeriesModelParams<T>,
    instance: &TimeSeriesInstance<T>,
    solver_tol: f64,
) -> Result<DMatrix<T>> {
    let d = params.d();
    let w = params.w();
    let t = instance.t();
    if t < w {
        return Err(Error::shape(format!(
            "instance {}: series length {t} shorter than filter width {w}",
            instance.id
        )));
    }
    if instance.annotations.is_empty() {
        return Err(Error::validation(format!(
            "instance {} has no annotations",
            instance.id
        )));
    }
    if instance.features.ncols() != params.p() {
        return Err(Error::shape(format!(
            "instance {}: feature width {} does not match P={}",
            instance.id,
            instance.features.ncols(),
            params.p()
        )));
    }

    let n = t * d;
    let bw = (w * d - 1).min(n - 1);
    let mut normal = SymBanded::<T>::zeros(n, bw);
    for j in 0..n {
        normal.add(j, j, T::one());
    }

    // prior pull toward the predictor output
    let prior = &instance.features * &params.theta;
    let mut rhs = DVector::<T>::zeros(n);
    for tt in 0..t {
        for dd in 0..d {
            rhs[tt * d + dd] = prior[(tt, dd)];
        }
    }

    let mut entries: Vec<(usize, T)> = Vec::with_capacity(w * d);
    for (k, ann) in &instance.annotations {
        if *k >= params.k() {
            return Err(Error::validation(format!(
                "instance {}: unknown annotator id {}",
                instance.id, k
            )));
        }
        for dd in 0..d {
            let coeffs = params.bank.coefficients(*k, dd);
            for r in 0..t {
                entries.clear();
                for dp in 0..d {
                    for wi in 0..w.min(r + 1) {
                        let c = coeffs[dp * w + wi];
                        if c != T::zero() {
                            entries.push(((r - wi) * d + dp, c));
                        }
                    }
                }
                let a_r = ann[(r, dd)];
                for (i1, &(j1, c1)) in entries.iter().enumerate() {
                    rhs[j1] += c1 * a_r;
                    for &(j2, c2) in &entries[..=i1] {
                        normal.add(j1, j2, c1 * c2);
                    }
                }
            }
        }
    }

    let chol = normal.clone().cholesky()?;
    let mut v = chol.solve(&rhs);
    let rhs_norm = rhs.norm();
    let tol = T::from_f64_approx(solver_tol) * rhs_norm;
    for _ in 0..4 {
        let resid = normal.matvec(&v) - &rhs;
        if resid.norm() <= tol {
            let mode = DMatrix::from_fn(t, d, |tt, dd| v[tt * d + dd]);
            return Ok(mode);
        }
        v -= chol.solve(&resid);
    }
    let resid = normal.matvec(&v) - &rhs;
    if resid.norm() <= tol {
        return Ok(DMatrix::from_fn(t, d, |tt, dd| v[tt * d + dd]));
    }
    Err(Error::numeric(format!(
        "instance {}: mode solve stalled at relative residual {:e}",
        instance.id,
        (resid.norm() / rhs_norm.max(T::one())).to_f64_approx()
    )))
}

// ---------------------------------------------------------------------------
// M-step
// ---------------------------------------------------------------------------

/// T x (W*D) regression design built from a ground-truth mode so that
/// `A * f` equals the filtered series for any coefficient vector `f`.
pub fn design_matrix<T: Real>(mode: &DMatrix<T>, w: usize) -> DMatrix<T> {
    let t = mode.nrows();
    let d = mode.ncols();
    let mut a = DMatrix::zeros(t, w * d);
    for dp in 0..d {
        for wi in 0..w {
            for r in wi..t {
                a[(r, dp * w + wi)] = mode[(r - wi, dp)];
            }
        }
    }
    a
}

/// One maximization step given the current modes. `theta` and the filters are
/// ridge-regularized least squares; the noise variances are the matching mean
/// squared residuals clamped to their floors. Annotators absent from the
/// dataset keep their previous parameters.
pub fn m_step<T: Real>(
    dataset: &TimeSeriesDataset<T>,
    modes: &[DMatrix<T>],
    prev: &TimeSeriesModelParams<T>,
    w: usize,
    config: &TimeSeriesFitConfig,
) -> Result<TimeSeriesModelParams<T>> {
    let ridge = T::from_f64_approx(config.ridge);
    let mut xtx = DMatrix::<T>::zeros(dataset.p, dataset.p);
    for inst in &dataset.instances {
        xtx += inst.features.transpose() * &inst.features;
    }
    let chol = ridged_cholesky(xtx, ridge)
        .map_err(|_| Error::numeric("sum of X^T X singular after ridge"))?;
    m_step_inner(dataset, modes, Some(prev), w, config, &chol)
}

fn m_step_inner<T: Real>(
    dataset: &TimeSeriesDataset<T>,
    modes: &[DMatrix<T>],
    prev: Option<&TimeSeriesModelParams<T>>,
    w: usize,
    config: &TimeSeriesFitConfig,
    xtx_chol: &Cholesky<T, Dyn>,
) -> Result<TimeSeriesModelParams<T>> {
    let m = dataset.m();
    let d = dataset.d;
    let kk = dataset.k;
    if modes.len() != m {
        return Err(Error::shape("mode list not aligned with dataset instances"));
    }
    for (inst, mode) in dataset.instances.iter().zip(modes) {
        if mode.nrows() != inst.t() || mode.ncols() != d {
            return Err(Error::shape(format!(
                "instance {}: mode is {}x{} (expected {}x{})",
                inst.id,
                mode.nrows(),
                mode.ncols(),
                inst.t(),
                d
            )));
        }
    }
    let ridge = T::from_f64_approx(config.ridge);

    // theta from the pooled normal equations
    let mut xta = DMatrix::<T>::zeros(dataset.p, d);
    for (inst, mode) in dataset.instances.iter().zip(modes) {
        xta += inst.features.transpose() * mode;
    }
    let theta = xtx_chol.solve(&xta);

    // filter regression per annotator and output dimension
    let designs: Vec<DMatrix<T>> = modes
        .par_iter()
        .map(|mode| design_matrix(mode, w))
        .collect();
    let grams: Vec<DMatrix<T>> = designs
        .par_iter()
        .map(|a| a.transpose() * a)
        .collect();
    let per_annotator = dataset.instances_per_annotator();

    let mut bank = FilterBank::identity(kk, d, w);
    let mut tau2 = Vec::with_capacity(kk);
    for k in 0..kk {
        let insts = &per_annotator[k];
        if insts.is_empty() {
            if let Some(p) = prev {
                for dd in 0..d {
                    bank.set_coefficients(k, dd, p.bank.coefficients(k, dd).clone());
                }
                tau2.push(p.tau2[k]);
            } else {
                tau2.push(T::one());
            }
            continue;
        }
        let mut gram = DMatrix::<T>::zeros(w * d, w * d);
        for &i in insts {
            gram += &grams[i];
        }
        let chol = ridged_cholesky(gram, ridge).map_err(|_| {
            Error::numeric(format!("annotator {k}: filter design singular after ridge"))
        })?;
        let mut resid_sum = T::zero();
        let mut frames = 0usize;
        for dd in 0..d {
            let mut b = DVector::<T>::zeros(w * d);
            for &i in insts {
                let ann = annotation_of(&dataset.instances[i], k);
                b += designs[i].transpose() * ann.column(dd);
            }
            let f = chol.solve(&b);
            for &i in insts {
                let ann = annotation_of(&dataset.instances[i], k);
                let fitted = &designs[i] * &f;
                resid_sum += (ann.column(dd) - fitted).norm_squared();
            }
            bank.set_coefficients(k, dd, f);
        }
        for &i in insts {
            frames += dataset.instances[i].t();
        }
        let denom = T::from_usize_approx(frames * d);
        tau2.push((resid_sum / denom).max(T::from_f64_approx(config.tau2_floor)));
    }

    // sigma2: mean squared prior residual over all frames and dimensions
    let mut sigma2 = T::zero();
    let mut total_frames = 0usize;
    for (inst, mode) in dataset.instances.iter().zip(modes) {
        let pred = &inst.features * &theta;
        sigma2 += (mode - pred).norm_squared();
        total_frames += inst.t();
    }
    sigma2 /= T::from_usize_approx(total_frames * d);
    sigma2 = sigma2.max(T::from_f64_approx(config.sigma2_floor));

    TimeSeriesModelParams::new(theta, bank, sigma2, tau2)
}

fn annotation_of<'a, T: Real>(
    instance: &'a TimeSeriesInstance<T>,
    k: usize,
) -> &'a DMatrix<T> {
    let idx = instance
        .annotations
        .binary_search_by_key(&k, |(a, _)| *a)
        .expect("annotator present on instance");
    &instance.annotations[idx].1
}

// ---------------------------------------------------------------------------
// Objective and fit
// ---------------------------------------------------------------------------

/// Complete-data log-likelihood at the given modes: Gaussian annotation terms
/// plus the Gaussian prior term, under the current variances. This is the
/// quantity the termination test watches.
pub fn joint_objective<T: Real>(
    params: &TimeSeriesModelParams<T>,
    dataset: &TimeSeriesDataset<T>,
    modes: &[DMatrix<T>],
) -> Result<T> {
    if modes.len() != dataset.m() {
        return Err(Error::shape("mode list not aligned with dataset instances"));
    }
    let d = dataset.d;
    let half = T::from_f64_approx(0.5);
    let terms: Vec<T> = dataset
        .instances
        .par_iter()
        .zip(modes.par_iter())
        .map(|(inst, mode)| {
            let t = T::from_usize_approx(inst.t());
            let prior = &inst.features * &params.theta;
            let prior_resid = (mode - prior).norm_squared();
            let mut obj = -half
                * (t * T::from_usize_approx(d) * (T::two_pi() * params.sigma2).ln()
                    + prior_resid / params.sigma2);
            for (k, ann) in &inst.annotations {
                let tau2 = params.tau2[*k];
                for dd in 0..d {
                    let fitted = apply_filter(&params.bank, *k, dd, mode)?;
                    let resid = (ann.column(dd) - fitted).norm_squared();
                    obj -= half * (t * (T::two_pi() * tau2).ln() + resid / tau2);
                }
            }
            Ok(obj)
        })
        .collect::<Result<_>>()?;
    Ok(terms.into_iter().fold(T::zero(), |a, b| a + b))
}

/// Hard-EM fit with `restarts` random initializations. Each restart draws its
/// starting modes from an independent stream of the seeded generator, so a
/// given (seed, restart index) pair is reproducible regardless of how many
/// restarts run or in what order.
pub fn fit<T>(
    dataset: &TimeSeriesDataset<T>,
    config: &TimeSeriesFitConfig,
) -> Result<TimeSeriesFitOutcome<T>>
where
    T: Real,
    StandardNormal: Distribution<T>,
{
    config.validate()?;
    if config.w > dataset.min_t() {
        return Err(Error::validation(format!(
            "filter width {} exceeds the shortest series length {}",
            config.w,
            dataset.min_t()
        )));
    }
    let ridge = T::from_f64_approx(config.ridge);
    let mut xtx = DMatrix::<T>::zeros(dataset.p, dataset.p);
    for inst in &dataset.instances {
        xtx += inst.features.transpose() * &inst.features;
    }
    let xtx_chol = ridged_cholesky(xtx, ridge)
        .map_err(|_| Error::numeric("sum of X^T X singular after ridge"))?;

    let restarts: Vec<RestartFit<T>> = (0..config.restarts)
        .into_par_iter()
        .map(|r| run_restart(dataset, config, &xtx_chol, r))
        .collect::<Result<_>>()?;

    let best = restarts
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| {
            let fa = a.objective.last().copied().unwrap_or_else(T::zero);
            let fb = b.objective.last().copied().unwrap_or_else(T::zero);
            fa.partial_cmp(&fb).unwrap_or(std::cmp::Ordering::Equal)
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(TimeSeriesFitOutcome { restarts, best })
}

fn run_restart<T>(
    dataset: &TimeSeriesDataset<T>,
    config: &TimeSeriesFitConfig,
    xtx_chol: &Cholesky<T, Dyn>,
    restart: usize,
) -> Result<RestartFit<T>>
where
    T: Real,
    StandardNormal: Distribution<T>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    rng.set_stream(restart as u64 + 1);
    let d = dataset.d;
    let mut modes: Vec<DMatrix<T>> = dataset
        .instances
        .iter()
        .map(|inst| {
            DMatrix::from_fn(inst.t(), d, |_, _| rng.sample::<T, _>(StandardNormal))
        })
        .collect();

    let mut params = m_step_inner(dataset, &modes, None, config.w, config, xtx_chol)?;
    let mut obj_prev = joint_objective(&params, dataset, &modes)?;
    let mut objective = vec![obj_prev];
    let mut iterations = 0usize;
    let mut converged = false;

    for _ in 0..config.max_iters {
        modes = dataset
            .instances
            .par_iter()
            .map(|inst| e_step_mode(&params, inst, config.solver_tol))
            .collect::<Result<_>>()?;
        params = m_step_inner(dataset, &modes, Some(&params), config.w, config, xtx_chol)?;
        let obj = joint_objective(&params, dataset, &modes)?;
        iterations += 1;
        objective.push(obj);
        let rel = (obj - obj_prev).abs().to_f64_approx()
            / obj_prev.abs().to_f64_approx().max(f64::MIN_POSITIVE);
        obj_prev = obj;
        if rel < config.rel_obj_tol {
            converged = true;
            break;
        }
    }

    Ok(RestartFit {
        restart,
        params,
        modes,
        objective,
        iterations,
        converged,
    })
}

//! Joint fusion of global (per-instance vector) annotations.
//!
//! The latent ground truth of each instance is a linear map of its features
//! plus isotropic Gaussian noise; every annotator distorts the ground truth
//! through a personal D x D weight matrix plus annotator noise. Everything is
//! jointly Gaussian, so the E-step conditions in closed form and the M-step
//! updates are ridge-regularized least squares.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_log_density, ridged_cholesky};
use crate::num::Real;
use crate::types::{GlobalDataset, PosteriorEstimate};

/// Parameters of the global joint model: predictor weights `theta` (P x D),
/// one distortion matrix and noise variance per annotator in the pool, and
/// the ground-truth noise variance `sigma2`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModelParams<T: Real> {
    pub theta: DMatrix<T>,
    pub f: Vec<DMatrix<T>>,
    pub sigma2: T,
    pub tau2: Vec<T>,
}

impl<T: Real> GlobalModelParams<T> {
    pub fn new(theta: DMatrix<T>, f: Vec<DMatrix<T>>, sigma2: T, tau2: Vec<T>) -> Result<Self> {
        let d = theta.ncols();
        if f.is_empty() || f.len() != tau2.len() {
            return Err(Error::validation(
                "annotator pool needs one F matrix and one tau2 each",
            ));
        }
        for (k, fk) in f.iter().enumerate() {
            if fk.nrows() != d || fk.ncols() != d {
                return Err(Error::validation(format!(
                    "annotator {k}: F is {}x{} (expected {d}x{d})",
                    fk.nrows(),
                    fk.ncols()
                )));
            }
            if fk.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!(
                    "annotator {k}: F contains a non-finite value"
                )));
            }
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
        Ok(GlobalModelParams {
            theta,
            f,
            sigma2,
            tau2,
        })
    }

    pub fn p(&self) -> usize {
        self.theta.nrows()
    }

    pub fn d(&self) -> usize {
        self.theta.ncols()
    }

    pub fn k(&self) -> usize {
        self.f.len()
    }

    /// Prior mean of the ground truth for one feature vector.
    pub fn prior_mean(&self, x: &DVector<T>) -> DVector<T> {
        self.theta.transpose() * x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    SampleMoment,
    Provided,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GlobalFitConfig {
    pub max_iters: usize,
    /// Relative log-likelihood change below which the fit stops.
    pub rel_ll_tol: f64,
    pub sigma2_floor: f64,
    pub tau2_floor: f64,
    /// Added to the diagonal of every matrix being inverted.
    pub ridge: f64,
    pub init: InitStrategy,
    /// Keep a parameter snapshot per iteration (validation-based selection).
    pub record_snapshots: bool,
}

impl Default for GlobalFitConfig {
    fn default() -> Self {
        GlobalFitConfig {
            max_iters: 200,
            rel_ll_tol: 1e-5,
            sigma2_floor: 1e-8,
            tau2_floor: 1e-8,
            ridge: 1e-8,
            init: InitStrategy::SampleMoment,
            record_snapshots: false,
        }
    }
}

impl GlobalFitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::validation("max_iters must be at least 1"));
        }
        if !(self.rel_ll_tol > 0.0) {
            return Err(Error::validation("rel_ll_tol must be positive"));
        }
        if !(self.sigma2_floor > 0.0) || !(self.tau2_floor > 0.0) {
            return Err(Error::validation("variance floors must be positive"));
        }
        if self.ridge < 0.0 {
            return Err(Error::validation("ridge must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIters,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Termination::Converged => write!(f, "converged"),
            Termination::MaxIters => write!(f, "max_iters"),
        }
    }
}

/// Per-iteration record of a fit. `ll[0]` is the likelihood of the
/// initialization parameters; entry `i` follows EM iteration `i`.
#[derive(Debug, Clone)]
pub struct GlobalFitTrace<T: Real> {
    pub ll: Vec<T>,
    pub snapshots: Option<Vec<GlobalModelParams<T>>>,
    pub iterations: usize,
    pub termination: Termination,
}

// ---------------------------------------------------------------------------
// Joint moments and E-step
// ---------------------------------------------------------------------------

/// Mean and covariance of the joint Gaussian over `(a*, a_k1, a_k2, ...)` for
/// one instance, blocks ordered ground truth first, then annotators in the
/// given order.
pub fn joint_moments<T: Real>(
    params: &GlobalModelParams<T>,
    x: &DVector<T>,
    annotators: &[usize],
) -> Result<(DVector<T>, DMatrix<T>)> {
    if annotators.is_empty() {
        return Err(Error::shape("joint moments need at least one annotator"));
    }
    for &k in annotators {
        if k >= params.k() {
            return Err(Error::validation(format!(
                "unknown annotator id {k} (pool size {})",
                params.k()
            )));
        }
    }
    let d = params.d();
    let n = d * (1 + annotators.len());
    let prior = params.prior_mean(x);

    let mut mean = DVector::zeros(n);
    mean.rows_mut(0, d).copy_from(&prior);
    for (i, &k) in annotators.iter().enumerate() {
        mean.rows_mut(d * (i + 1), d).copy_from(&(&params.f[k] * &prior));
    }

    let s2 = params.sigma2;
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..d {
        cov[(i, i)] = s2;
    }
    for (i, &ki) in annotators.iter().enumerate() {
        let fi = &params.f[ki];
        let row = d * (i + 1);
        // cross with the ground truth
        let cross = fi * s2;
        cov.view_mut((row, 0), (d, d)).copy_from(&cross);
        cov.view_mut((0, row), (d, d)).copy_from(&cross.transpose());
        for (j, &kj) in annotators.iter().enumerate().skip(i) {
            let col = d * (j + 1);
            let mut block = (fi * params.f[kj].transpose()) * s2;
            if i == j {
                for q in 0..d {
                    block[(q, q)] += params.tau2[ki];
                }
            }
            cov.view_mut((row, col), (d, d)).copy_from(&block);
            if i != j {
                cov.view_mut((col, row), (d, d)).copy_from(&block.transpose());
            }
        }
    }
    Ok((mean, cov))
}

/// Covariance of the stacked annotations of one instance (the annotation
/// block of the joint), plus the cross covariance `Cov(annotations, a*)`.
fn annotation_blocks<T: Real>(
    params: &GlobalModelParams<T>,
    annotators: &[usize],
) -> (DMatrix<T>, DMatrix<T>) {
    let d = params.d();
    let n = d * annotators.len();
    let s2 = params.sigma2;
    let mut sigma_aa = DMatrix::zeros(n, n);
    let mut cross = DMatrix::zeros(n, d);
    for (i, &ki) in annotators.iter().enumerate() {
        let fi = &params.f[ki];
        cross.view_mut((d * i, 0), (d, d)).copy_from(&(fi * s2));
        for (j, &kj) in annotators.iter().enumerate().skip(i) {
            let mut block = (fi * params.f[kj].transpose()) * s2;
            if i == j {
                for q in 0..d {
                    block[(q, q)] += params.tau2[ki];
                }
            }
            sigma_aa
                .view_mut((d * i, d * j), (d, d))
                .copy_from(&block);
            if i != j {
                sigma_aa
                    .view_mut((d * j, d * i), (d, d))
                    .copy_from(&block.transpose());
            }
        }
    }
    (sigma_aa, cross)
}

fn stacked_annotations<T: Real>(annotations: &[(usize, DVector<T>)], d: usize) -> DVector<T> {
    let mut a = DVector::zeros(d * annotations.len());
    for (i, (_, v)) in annotations.iter().enumerate() {
        a.rows_mut(d * i, d).copy_from(v);
    }
    a
}

fn e_step_instance<T: Real>(
    params: &GlobalModelParams<T>,
    instance: &crate::types::GlobalInstance<T>,
    ridge: T,
) -> Result<PosteriorEstimate<T>> {
    let d = params.d();
    let ids: Vec<usize> = instance.annotations.iter().map(|(a, _)| *a).collect();
    let (sigma_aa, cross) = annotation_blocks(params, &ids);
    let chol = ridged_cholesky(sigma_aa, ridge).map_err(|_| {
        Error::numeric(format!(
            "instance {}: annotation covariance solve failed (degenerate parameters)",
            instance.id
        ))
    })?;

    let prior = params.prior_mean(&instance.features);
    let mut mu_a = DVector::zeros(d * ids.len());
    for (i, &k) in ids.iter().enumerate() {
        mu_a.rows_mut(d * i, d).copy_from(&(&params.f[k] * &prior));
    }
    let a = stacked_annotations(&instance.annotations, d);
    let centered = &a - &mu_a;

    let mean = &prior + cross.transpose() * chol.solve(&centered);
    let mut cov = DMatrix::<T>::identity(d, d) * params.sigma2
        - cross.transpose() * chol.solve(&cross);
    // symmetrize away solver round-off
    let half = T::from_f64_approx(0.5);
    let covt = cov.transpose();
    cov = (cov + covt) * half;

    Ok(PosteriorEstimate::global(
        instance.id.clone(),
        mean,
        Some(cov),
    ))
}

/// Conditional mean and covariance of the ground truth given each instance's
/// annotations, under the given parameters.
pub fn e_step<T: Real>(
    params: &GlobalModelParams<T>,
    dataset: &GlobalDataset<T>,
    ridge: f64,
) -> Result<Vec<PosteriorEstimate<T>>> {
    check_shapes(params, dataset)?;
    let ridge = T::from_f64_approx(ridge);
    dataset
        .instances
        .par_iter()
        .map(|inst| e_step_instance(params, inst, ridge))
        .collect()
}

fn check_shapes<T: Real>(params: &GlobalModelParams<T>, dataset: &GlobalDataset<T>) -> Result<()> {
    if params.p() != dataset.p || params.d() != dataset.d || params.k() < dataset.k {
        return Err(Error::shape(format!(
            "parameters are (P={}, D={}, K={}) but dataset needs (P={}, D={}, K={})",
            params.p(),
            params.d(),
            params.k(),
            dataset.p,
            dataset.d,
            dataset.k
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// M-step
// ---------------------------------------------------------------------------

/// One maximization step. `theta` and each `F_k` are refit against the given
/// posteriors; the noise variances use the previous iteration's `theta` and
/// `F_k` and are clamped to their floors.
pub fn m_step<T: Real>(
    dataset: &GlobalDataset<T>,
    posteriors: &[PosteriorEstimate<T>],
    prev: &GlobalModelParams<T>,
    config: &GlobalFitConfig,
) -> Result<GlobalModelParams<T>> {
    let x = dataset.feature_matrix();
    let ridge = T::from_f64_approx(config.ridge);
    let xtx_chol = ridged_cholesky(x.transpose() * &x, ridge)
        .map_err(|_| Error::numeric("X^T X singular after ridge (rank-deficient features)"))?;
    m_step_inner(dataset, &x, posteriors, Some(prev), config, &xtx_chol)
}

fn m_step_inner<T: Real>(
    dataset: &GlobalDataset<T>,
    x: &DMatrix<T>,
    posteriors: &[PosteriorEstimate<T>],
    prev: Option<&GlobalModelParams<T>>,
    config: &GlobalFitConfig,
    xtx_chol: &Cholesky<T, Dyn>,
) -> Result<GlobalModelParams<T>> {
    let m = dataset.m();
    let d = dataset.d;
    let kk = dataset.k;
    if posteriors.len() != m {
        return Err(Error::shape(
            "posterior list not aligned with dataset instances",
        ));
    }
    let ridge = T::from_f64_approx(config.ridge);

    let means: Vec<DVector<T>> = posteriors.iter().map(|p| p.mean_vector()).collect();
    let covs: Vec<&DMatrix<T>> = posteriors
        .iter()
        .map(|p| {
            p.cov
                .as_ref()
                .ok_or_else(|| Error::shape("m_step needs posteriors with covariances"))
        })
        .collect::<Result<_>>()?;

    // theta: ridge-regularized normal equations against the posterior means
    let e_mat = DMatrix::from_fn(m, d, |i, j| means[i][j]);
    let theta = xtx_chol.solve(&(x.transpose() * &e_mat));

    // F_k over each annotator's own instances
    let per_annotator = dataset.instances_per_annotator();
    let mut f = Vec::with_capacity(kk);
    for k in 0..kk {
        let insts = &per_annotator[k];
        if insts.is_empty() {
            f.push(match prev {
                Some(p) => p.f[k].clone(),
                None => DMatrix::identity(d, d),
            });
            continue;
        }
        let mut num = DMatrix::<T>::zeros(d, d);
        let mut den = DMatrix::<T>::zeros(d, d);
        for &i in insts {
            let a = annotation_of(&dataset.instances[i], k);
            num += a * means[i].transpose();
            den += covs[i] + &means[i] * means[i].transpose();
        }
        let den_chol = ridged_cholesky(den, ridge)
            .map_err(|_| Error::numeric(format!("annotator {k}: moment matrix singular")))?;
        // F = num * den^{-1}; den is symmetric
        f.push(den_chol.solve(&num.transpose()).transpose());
    }

    // sigma2 and tau2 from the previous iteration's theta / F
    let theta_ref = prev.map(|p| &p.theta).unwrap_or(&theta);
    let mut sigma2 = T::zero();
    for i in 0..m {
        let pred = theta_ref.transpose() * &dataset.instances[i].features;
        let resid = &means[i] - &pred;
        sigma2 += covs[i].trace() + resid.norm_squared();
    }
    sigma2 /= T::from_usize_approx(m * d);
    sigma2 = sigma2.max(T::from_f64_approx(config.sigma2_floor));

    let mut tau2 = Vec::with_capacity(kk);
    for k in 0..kk {
        let insts = &per_annotator[k];
        if insts.is_empty() {
            tau2.push(match prev {
                Some(p) => p.tau2[k],
                None => T::one(),
            });
            continue;
        }
        let f_ref = match prev {
            Some(p) => &p.f[k],
            None => &f[k],
        };
        let ftf = f_ref.transpose() * f_ref;
        let mut acc = T::zero();
        for &i in insts {
            let a = annotation_of(&dataset.instances[i], k);
            let resid = a - f_ref * &means[i];
            acc += resid.norm_squared() + (&ftf * covs[i]).trace();
        }
        acc /= T::from_usize_approx(d * insts.len());
        tau2.push(acc.max(T::from_f64_approx(config.tau2_floor)));
    }

    GlobalModelParams::new(theta, f, sigma2, tau2)
}

fn annotation_of<'a, T: Real>(
    instance: &'a crate::types::GlobalInstance<T>,
    k: usize,
) -> &'a DVector<T> {
    let idx = instance
        .annotations
        .binary_search_by_key(&k, |(a, _)| *a)
        .expect("annotator present on instance");
    &instance.annotations[idx].1
}

// ---------------------------------------------------------------------------
// Likelihood, fit, predict
// ---------------------------------------------------------------------------

/// Marginal log-likelihood of the observed annotations, with the ground truth
/// integrated out analytically.
pub fn log_likelihood<T: Real>(
    params: &GlobalModelParams<T>,
    dataset: &GlobalDataset<T>,
    ridge: f64,
) -> Result<T> {
    check_shapes(params, dataset)?;
    let ridge = T::from_f64_approx(ridge);
    let d = params.d();
    let terms: Vec<T> = dataset
        .instances
        .par_iter()
        .map(|inst| {
            let ids: Vec<usize> = inst.annotations.iter().map(|(a, _)| *a).collect();
            let (sigma_aa, _) = annotation_blocks(params, &ids);
            let chol = ridged_cholesky(sigma_aa, ridge).map_err(|_| {
                Error::numeric(format!(
                    "instance {}: annotation covariance not positive definite",
                    inst.id
                ))
            })?;
            let prior = params.prior_mean(&inst.features);
            let mut mu_a = DVector::zeros(d * ids.len());
            for (i, &k) in ids.iter().enumerate() {
                mu_a.rows_mut(d * i, d).copy_from(&(&params.f[k] * &prior));
            }
            let centered = stacked_annotations(&inst.annotations, d) - mu_a;
            Ok(gaussian_log_density(&chol, &centered))
        })
        .collect::<Result<_>>()?;
    Ok(terms.into_iter().fold(T::zero(), |a, b| a + b))
}

/// Sample-moment pseudo-posteriors used to bootstrap the first M-step:
/// the mean and sample covariance of each instance's annotations, with a unit
/// identity covariance when only one annotation exists.
fn initial_posteriors<T: Real>(dataset: &GlobalDataset<T>) -> Vec<PosteriorEstimate<T>> {
    let d = dataset.d;
    dataset
        .instances
        .iter()
        .map(|inst| {
            let n = inst.annotations.len();
            let mut mean = DVector::<T>::zeros(d);
            for (_, v) in &inst.annotations {
                mean += v;
            }
            mean /= T::from_usize_approx(n);
            let cov = if n >= 2 {
                let mut c = DMatrix::<T>::zeros(d, d);
                for (_, v) in &inst.annotations {
                    let r = v - &mean;
                    c += &r * r.transpose();
                }
                c / T::from_usize_approx(n - 1)
            } else {
                DMatrix::identity(d, d)
            };
            PosteriorEstimate::global(inst.id.clone(), mean, Some(cov))
        })
        .collect()
}

/// Fit by expectation-maximization. Starts from sample-moment initialization
/// unless `init` parameters are provided, and stops once the relative change
/// in marginal log-likelihood drops below `rel_ll_tol` (or at `max_iters`,
/// which is recorded in the trace rather than treated as an error).
pub fn fit<T: Real>(
    dataset: &GlobalDataset<T>,
    config: &GlobalFitConfig,
    init: Option<&GlobalModelParams<T>>,
) -> Result<(GlobalModelParams<T>, GlobalFitTrace<T>)> {
    config.validate()?;
    if config.init == InitStrategy::Provided && init.is_none() {
        return Err(Error::validation(
            "init strategy 'provided' needs initial parameters",
        ));
    }
    let x = dataset.feature_matrix();
    let ridge = T::from_f64_approx(config.ridge);
    let xtx_chol = ridged_cholesky(x.transpose() * &x, ridge)
        .map_err(|_| Error::numeric("X^T X singular after ridge (rank-deficient features)"))?;

    let mut params = match init {
        Some(p) => {
            check_shapes(p, dataset)?;
            p.clone()
        }
        None => {
            let posts = initial_posteriors(dataset);
            m_step_inner(dataset, &x, &posts, None, config, &xtx_chol)?
        }
    };

    let mut ll_prev = log_likelihood(&params, dataset, config.ridge)?;
    let mut trace = GlobalFitTrace {
        ll: vec![ll_prev],
        snapshots: config.record_snapshots.then(|| vec![params.clone()]),
        iterations: 0,
        termination: Termination::MaxIters,
    };

    for _ in 0..config.max_iters {
        let posts = e_step(&params, dataset, config.ridge)?;
        params = m_step_inner(dataset, &x, &posts, Some(&params), config, &xtx_chol)?;
        let ll = log_likelihood(&params, dataset, config.ridge)?;
        trace.iterations += 1;
        trace.ll.push(ll);
        if let Some(snaps) = trace.snapshots.as_mut() {
            snaps.push(params.clone());
        }
        let rel = (ll - ll_prev).abs().to_f64_approx()
            / ll_prev.abs().to_f64_approx().max(f64::MIN_POSITIVE);
        ll_prev = ll;
        if rel < config.rel_ll_tol {
            trace.termination = Termination::Converged;
            break;
        }
    }
    Ok((params, trace))
}

/// Predict ground truth from features alone: the prior mean `theta^T x` per row.
pub fn predict<T: Real>(
    params: &GlobalModelParams<T>,
    features: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    if features.ncols() != params.p() {
        return Err(Error::shape(format!(
            "feature width {} does not match P={}",
            features.ncols(),
            params.p()
        )));
    }
    Ok(features * &params.theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::GlobalInstance;
    use approx::assert_relative_eq;

    fn scalar_params(f: f64, sigma2: f64, tau2: f64) -> GlobalModelParams<f64> {
        GlobalModelParams::new(
            DMatrix::from_element(1, 1, 0.0),
            vec![DMatrix::from_element(1, 1, f)],
            sigma2,
            vec![tau2],
        )
        .unwrap()
    }

    fn one_instance(features: Vec<f64>, ann: Vec<(usize, Vec<f64>)>) -> GlobalDataset<f64> {
        let d = ann[0].1.len();
        GlobalDataset::new(
            features.len(),
            d,
            ann.iter().map(|(a, _)| a + 1).max().unwrap(),
            vec![GlobalInstance {
                id: "0".into(),
                features: DVector::from_vec(features),
                annotations: ann
                    .into_iter()
                    .map(|(a, v)| (a, DVector::from_vec(v)))
                    .collect(),
            }],
        )
        .unwrap()
    }

    #[test]
    fn joint_moments_scalar_example() {
        let p = scalar_params(1.0, 1.0, 1.0);
        let (mean, cov) = joint_moments(&p, &DVector::from_vec(vec![0.0]), &[0]).unwrap();
        assert_eq!(mean, DVector::from_vec(vec![0.0, 0.0]));
        assert_eq!(cov[(0, 0)], 1.0);
        assert_eq!(cov[(0, 1)], 1.0);
        assert_eq!(cov[(1, 0)], 1.0);
        assert_eq!(cov[(1, 1)], 2.0);
    }

    #[test]
    fn joint_moments_zero_f_kills_cross_blocks() {
        let params = GlobalModelParams::new(
            DMatrix::from_element(1, 2, 0.5),
            vec![DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)],
            0.7,
            vec![0.3, 0.4],
        )
        .unwrap();
        let (_, cov) = joint_moments(&params, &DVector::from_vec(vec![1.0]), &[0, 1]).unwrap();
        for i in 0..2 {
            for j in 2..6 {
                assert_eq!(cov[(i, j)], 0.0);
                assert_eq!(cov[(j, i)], 0.0);
            }
        }
        for (block, tau2) in [(2, 0.3), (4, 0.4)] {
            for q in 0..2 {
                assert_eq!(cov[(block + q, block + q)], tau2);
            }
            assert_eq!(cov[(block, block + 1)], 0.0);
        }
    }

    #[test]
    fn joint_moments_identity_pair_cross_block() {
        let params = GlobalModelParams::new(
            DMatrix::zeros(1, 2),
            vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2)],
            0.9,
            vec![0.1, 0.2],
        )
        .unwrap();
        let (_, cov) = joint_moments(&params, &DVector::from_vec(vec![0.0]), &[0, 1]).unwrap();
        // block between the two annotators is sigma2 * I
        for q in 0..2 {
            for r in 0..2 {
                let expected = if q == r { 0.9 } else { 0.0 };
                assert_eq!(cov[(2 + q, 4 + r)], expected);
            }
        }
    }

    #[test]
    fn joint_moments_rejects_unknown_annotator() {
        let p = scalar_params(1.0, 1.0, 1.0);
        assert!(joint_moments(&p, &DVector::from_vec(vec![0.0]), &[1]).is_err());
    }

    #[test]
    fn e_step_scalar_conditional() {
        // prior N(0,1), annotation 2 through identity channel with tau2=1:
        // posterior N(1, 0.5)
        let ds = one_instance(vec![0.0], vec![(0, vec![2.0])]);
        let p = scalar_params(1.0, 1.0, 1.0);
        let posts = e_step(&p, &ds, 0.0).unwrap();
        assert_relative_eq!(posts[0].mean[(0, 0)], 1.0, max_relative = 1e-12);
        assert_relative_eq!(posts[0].cov.as_ref().unwrap()[(0, 0)], 0.5, max_relative = 1e-12);
    }

    #[test]
    fn e_step_uninformative_annotations_revert_to_prior() {
        let theta = DMatrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let params = GlobalModelParams::<f64>::new(
            theta,
            vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2)],
            1.0,
            vec![1e12, 1e12],
        )
        .unwrap();
        let ds = GlobalDataset::new(
            2,
            2,
            2,
            vec![GlobalInstance {
                id: "0".into(),
                features: DVector::from_vec(vec![0.3, -0.7]),
                annotations: vec![
                    (0, DVector::from_vec(vec![5.0, -4.0])),
                    (1, DVector::from_vec(vec![-2.0, 8.0])),
                ],
            }],
        )
        .unwrap();
        let posts = e_step(&params, &ds, 1e-8).unwrap();
        let prior = params.prior_mean(&ds.instances[0].features);
        for j in 0..2 {
            assert!((posts[0].mean[(0, j)] - prior[j]).abs() < 1e-4);
        }
    }

    #[test]
    fn posterior_covariance_never_exceeds_prior() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let d = rng.random_range(1..4usize);
            let k = rng.random_range(1..4usize);
            let params = GlobalModelParams::new(
                DMatrix::from_fn(2, d, |_, _| rng.random_range(-1.0..1.0)),
                (0..k)
                    .map(|_| DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0)))
                    .collect(),
                rng.random_range(0.2..2.0),
                (0..k).map(|_| rng.random_range(0.2..2.0)).collect(),
            )
            .unwrap();
            let ds = GlobalDataset::new(
                2,
                d,
                k,
                vec![GlobalInstance {
                    id: "0".into(),
                    features: DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)),
                    annotations: (0..k)
                        .map(|a| (a, DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0))))
                        .collect(),
                }],
            )
            .unwrap();
            let posts = e_step(&params, &ds, 1e-10).unwrap();
            let gap = DMatrix::<f64>::identity(d, d) * params.sigma2
                - posts[0].cov.clone().unwrap();
            let eig = nalgebra::SymmetricEigen::new(gap);
            assert!(
                eig.eigenvalues.iter().all(|&l| l > -1e-9),
                "posterior covariance exceeds prior"
            );
        }
    }

    #[test]
    fn m_step_identity_design_returns_posterior_means() {
        // X = I (M = P = 2), ridge 0: theta = stacked posterior means
        let ds = GlobalDataset::new(
            2,
            1,
            1,
            vec![
                GlobalInstance {
                    id: "0".into(),
                    features: DVector::from_vec(vec![1.0, 0.0]),
                    annotations: vec![(0, DVector::from_vec(vec![0.5]))],
                },
                GlobalInstance {
                    id: "1".into(),
                    features: DVector::from_vec(vec![0.0, 1.0]),
                    annotations: vec![(0, DVector::from_vec(vec![-0.25]))],
                },
            ],
        )
        .unwrap();
        let posts = vec![
            PosteriorEstimate::global("0", DVector::from_vec(vec![0.3]), Some(DMatrix::from_element(1, 1, 0.1))),
            PosteriorEstimate::global("1", DVector::from_vec(vec![-0.6]), Some(DMatrix::from_element(1, 1, 0.1))),
        ];
        let prev = GlobalModelParams::new(
            DMatrix::zeros(2, 1),
            vec![DMatrix::identity(1, 1)],
            1.0,
            vec![1.0],
        )
        .unwrap();
        let cfg = GlobalFitConfig {
            ridge: 0.0,
            ..GlobalFitConfig::default()
        };
        let new = m_step(&ds, &posts, &prev, &cfg).unwrap();
        assert_relative_eq!(new.theta[(0, 0)], 0.3, max_relative = 1e-12);
        assert_relative_eq!(new.theta[(1, 0)], -0.6, max_relative = 1e-12);
    }

    #[test]
    fn m_step_unit_second_moment_recovers_outer_product() {
        // single instance with E[a a^T] = I: F_k = a_k E[a*^T]
        let ds = one_instance(vec![1.0], vec![(0, vec![2.0, -1.0])]);
        let mu = DVector::from_vec(vec![0.6, 0.3]);
        let cov = DMatrix::identity(2, 2) - &mu * mu.transpose();
        let posts = vec![PosteriorEstimate::global("0", mu.clone(), Some(cov))];
        let prev = GlobalModelParams::new(
            DMatrix::zeros(1, 2),
            vec![DMatrix::identity(2, 2)],
            1.0,
            vec![1.0],
        )
        .unwrap();
        let cfg = GlobalFitConfig {
            ridge: 0.0,
            ..GlobalFitConfig::default()
        };
        let new = m_step(&ds, &posts, &prev, &cfg).unwrap();
        let a = DVector::from_vec(vec![2.0, -1.0]);
        let expected = &a * mu.transpose();
        assert_relative_eq!(new.f[0], expected, max_relative = 1e-10);
    }

    #[test]
    fn m_step_respects_variance_floors() {
        // exact annotations and exact prior: both variances land on the floor
        let ds = one_instance(vec![1.0], vec![(0, vec![0.0])]);
        let posts = vec![PosteriorEstimate::global(
            "0",
            DVector::from_vec(vec![0.0]),
            Some(DMatrix::from_element(1, 1, 0.0)),
        )];
        let prev = scalar_params(1.0, 1.0, 1.0);
        let cfg = GlobalFitConfig::default();
        let new = m_step(&ds, &posts, &prev, &cfg).unwrap();
        assert_eq!(new.sigma2, cfg.sigma2_floor);
        assert_eq!(new.tau2[0], cfg.tau2_floor);
    }

    #[test]
    fn log_likelihood_scalar_density() {
        // annotation at the prior mean, total variance 2: log N(0 | 0, 2)
        let ds = one_instance(vec![0.0], vec![(0, vec![0.0])]);
        let p = scalar_params(1.0, 1.0, 1.0);
        let ll = log_likelihood(&p, &ds, 0.0).unwrap();
        assert_relative_eq!(
            ll,
            -0.5 * (4.0 * std::f64::consts::PI).ln(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn widening_tau_helps_far_annotations() {
        let ds = one_instance(vec![0.0], vec![(0, vec![10.0])]);
        let ll_narrow = log_likelihood(&scalar_params(1.0, 1.0, 1.0), &ds, 0.0).unwrap();
        let ll_wide = log_likelihood(&scalar_params(1.0, 1.0, 2.0), &ds, 0.0).unwrap();
        assert!(ll_wide > ll_narrow);
    }

    #[test]
    fn log_likelihood_invariant_to_instance_order() {
        let spec = crate::synthetic::GlobalSynthSpec {
            m: 8,
            p: 3,
            d: 2,
            k: 3,
            coverage: crate::synthetic::Coverage::Full,
            sigma2: 0.1,
            tau2: 0.1,
            fk_mode: crate::synthetic::FkMode::UniformRandom,
            seed: 5,
        };
        let synth = crate::synthetic::gen_global::<f64>(&spec).unwrap();
        let ll = log_likelihood(&synth.params, &synth.dataset, 1e-8).unwrap();
        let reversed = synth
            .dataset
            .subset(&(0..synth.dataset.m()).rev().collect::<Vec<_>>());
        let ll_rev = log_likelihood(&synth.params, &reversed, 1e-8).unwrap();
        assert_relative_eq!(ll, ll_rev, max_relative = 1e-12);
    }

    #[test]
    fn fit_noiseless_identity_channel_recovers_annotations() {
        let ds = GlobalDataset::new(
            2,
            2,
            1,
            (0..6)
                .map(|i| {
                    let x = DVector::from_vec(vec![(i as f64) * 0.2 - 0.5, 1.0]);
                    let a = DVector::from_vec(vec![0.4 * x[0] + 0.1, -0.3 * x[0] + 0.2]);
                    GlobalInstance {
                        id: i.to_string(),
                        features: x,
                        annotations: vec![(0, a)],
                    }
                })
                .collect(),
        )
        .unwrap();
        let cfg = GlobalFitConfig {
            max_iters: 100,
            ..GlobalFitConfig::default()
        };
        let (params, _) = fit(&ds, &cfg, None).unwrap();
        let posts = e_step(&params, &ds, cfg.ridge).unwrap();
        for (inst, post) in ds.instances.iter().zip(&posts) {
            for j in 0..2 {
                assert!(
                    (post.mean[(0, j)] - inst.annotations[0].1[j]).abs() < 1e-6,
                    "fused estimate should match the noiseless annotation"
                );
            }
        }
    }

    #[test]
    fn fit_trace_is_monotone_on_random_data() {
        for seed in 0..5u64 {
            let spec = crate::synthetic::GlobalSynthSpec {
                m: 12,
                p: 4,
                d: 2,
                k: 3,
                coverage: crate::synthetic::Coverage::Full,
                sigma2: 0.1,
                tau2: 0.2,
                fk_mode: crate::synthetic::FkMode::UniformRandom,
                seed,
            };
            let synth = crate::synthetic::gen_global::<f64>(&spec).unwrap();
            let cfg = GlobalFitConfig {
                max_iters: 30,
                ..GlobalFitConfig::default()
            };
            let (_, trace) = fit(&synth.dataset, &cfg, None).unwrap();
            for w in trace.ll.windows(2) {
                assert!(
                    w[1] >= w[0] - 1e-8 * (1.0 + w[0].abs()),
                    "seed {seed}: log-likelihood decreased: {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn fit_is_permutation_equivariant() {
        let spec = crate::synthetic::GlobalSynthSpec {
            m: 10,
            p: 3,
            d: 2,
            k: 3,
            coverage: crate::synthetic::Coverage::Full,
            sigma2: 0.1,
            tau2: 0.2,
            fk_mode: crate::synthetic::FkMode::UniformRandom,
            seed: 3,
        };
        let synth = crate::synthetic::gen_global::<f64>(&spec).unwrap();
        let cfg = GlobalFitConfig {
            max_iters: 20,
            ..GlobalFitConfig::default()
        };
        let (params_a, _) = fit(&synth.dataset, &cfg, None).unwrap();
        let permuted = synth
            .dataset
            .subset(&[7, 2, 9, 0, 4, 1, 8, 3, 6, 5]);
        let (params_b, _) = fit(&permuted, &cfg, None).unwrap();
        assert_relative_eq!(params_a.theta, params_b.theta, epsilon = 1e-9);
        assert_relative_eq!(params_a.sigma2, params_b.sigma2, epsilon = 1e-9);
        for k in 0..3 {
            assert_relative_eq!(params_a.f[k], params_b.f[k], epsilon = 1e-9);
            assert_relative_eq!(params_a.tau2[k], params_b.tau2[k], epsilon = 1e-9);
        }
    }

    #[test]
    fn predict_matches_prior_mean_and_checks_shape() {
        let params = GlobalModelParams::new(
            DMatrix::from_vec(2, 1, vec![0.5, -1.0]),
            vec![DMatrix::identity(1, 1)],
            1.0,
            vec![1.0],
        )
        .unwrap();
        let x = DMatrix::from_vec(1, 2, vec![2.0, 3.0]);
        let pred = predict(&params, &x).unwrap();
        assert_relative_eq!(pred[(0, 0)], 2.0 * 0.5 + 3.0 * -1.0);
        assert!(predict(&params, &DMatrix::zeros(1, 3)).is_err());

        let zero = GlobalModelParams::new(
            DMatrix::zeros(2, 1),
            vec![DMatrix::identity(1, 1)],
            1.0,
            vec![1.0],
        )
        .unwrap();
        assert_eq!(predict(&zero, &x).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn fit_single_iteration_records_one_step() {
        let ds = one_instance(vec![1.0], vec![(0, vec![0.5])]);
        let cfg = GlobalFitConfig {
            max_iters: 1,
            rel_ll_tol: 1e-30,
            ..GlobalFitConfig::default()
        };
        let (_, trace) = fit(&ds, &cfg, None).unwrap();
        assert_eq!(trace.iterations, 1);
        assert_eq!(trace.ll.len(), 2);
    }
}

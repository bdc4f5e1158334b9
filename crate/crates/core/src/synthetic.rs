//! Seeded synthetic-data generators for both annotation settings, plus the
//! cross-dimension dependency sweep. Pure functions of (spec, seed): the same
//! spec always yields a bitwise-identical dataset.

use nalgebra::{DMatrix, DVector};
use rand::distr::uniform::SampleUniform;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::global::GlobalModelParams;
use crate::linalg::ridged_cholesky;
use crate::num::Real;
use crate::timeseries::{apply_filter, FilterBank, TimeSeriesModelParams};
use crate::types::{
    GlobalDataset, GlobalInstance, TimeSeriesDataset, TimeSeriesInstance,
};

/// Which annotators rate which instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coverage {
    /// Every annotator rates every instance.
    Full,
    /// Each instance is rated by a random subset of this size.
    PerInstance(usize),
}

/// How annotator distortion matrices are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FkMode {
    /// Entries i.i.d. uniform on [0, 1), unique per annotator.
    UniformRandom,
    /// Shared across annotators: unit diagonal, this value off-diagonal.
    FixedOffDiag(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalSynthSpec {
    pub m: usize,
    pub p: usize,
    pub d: usize,
    pub k: usize,
    pub coverage: Coverage,
    pub sigma2: f64,
    pub tau2: f64,
    pub fk_mode: FkMode,
    pub seed: u64,
}

/// Generated dataset plus the ground truth and generating parameters.
#[derive(Debug, Clone)]
pub struct GlobalSynthetic<T: Real> {
    pub dataset: GlobalDataset<T>,
    /// M x D ground-truth matrix, row per instance.
    pub truth: DMatrix<T>,
    pub params: GlobalModelParams<T>,
}

impl GlobalSynthSpec {
    fn validate(&self) -> Result<()> {
        if self.m == 0 || self.p == 0 || self.d == 0 || self.k == 0 {
            return Err(Error::validation("all counts must be positive"));
        }
        if let Coverage::PerInstance(n) = self.coverage {
            if n == 0 || n > self.k {
                return Err(Error::validation(format!(
                    "per-instance annotator count {} must lie in 1..={}",
                    n, self.k
                )));
            }
        }
        if let FkMode::FixedOffDiag(step) = self.fk_mode {
            if !(0.0..=1.0).contains(&step) {
                return Err(Error::validation("off-diagonal step must lie in [0, 1]"));
            }
        }
        if self.sigma2 < 0.0 || self.tau2 < 0.0 {
            return Err(Error::validation("noise levels must be nonnegative"));
        }
        Ok(())
    }
}

/// Generate a global dataset: standard-normal features, ground truth uniform
/// on [-1, 1), per-annotator distortion matrices, annotations
/// `F_k a* + N(0, tau2 I)`, and a predictor matrix fit to (features, truth)
/// by least squares.
pub fn gen_global<T>(spec: &GlobalSynthSpec) -> Result<GlobalSynthetic<T>>
where
    T: Real + SampleUniform,
    StandardNormal: Distribution<T>,
{
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (m, p, d, k) = (spec.m, spec.p, spec.d, spec.k);

    let features = DMatrix::<T>::from_fn(m, p, |_, _| rng.sample(StandardNormal));
    // sampled row-major so instance order matches draw order
    let mut truth = DMatrix::<T>::zeros(m, d);
    let lo = T::from_f64_approx(-1.0);
    let hi = T::one();
    for i in 0..m {
        for j in 0..d {
            truth[(i, j)] = rng.random_range(lo..hi);
        }
    }

    let f: Vec<DMatrix<T>> = match spec.fk_mode {
        FkMode::UniformRandom => (0..k)
            .map(|_| {
                let mut fk = DMatrix::zeros(d, d);
                for i in 0..d {
                    for j in 0..d {
                        fk[(i, j)] = rng.random_range(T::zero()..T::one());
                    }
                }
                fk
            })
            .collect(),
        FkMode::FixedOffDiag(step) => {
            let step = T::from_f64_approx(step);
            let fk = DMatrix::from_fn(d, d, |i, j| if i == j { T::one() } else { step });
            vec![fk; k]
        }
    };

    let subsets: Vec<Vec<usize>> = (0..m)
        .map(|_| match spec.coverage {
            Coverage::Full => (0..k).collect(),
            Coverage::PerInstance(n) => {
                let mut ids: Vec<usize> = (0..k).collect();
                ids.shuffle(&mut rng);
                let mut chosen: Vec<usize> = ids.into_iter().take(n).collect();
                chosen.sort_unstable();
                chosen
            }
        })
        .collect();

    let tau = T::from_f64_approx(spec.tau2.sqrt());
    let instances: Vec<GlobalInstance<T>> = (0..m)
        .map(|i| {
            let a_star = truth.row(i).transpose();
            let annotations = subsets[i]
                .iter()
                .map(|&kk| {
                    let mut a = &f[kk] * &a_star;
                    for q in 0..d {
                        a[q] += tau * rng.sample::<T, _>(StandardNormal);
                    }
                    (kk, a)
                })
                .collect();
            GlobalInstance {
                id: i.to_string(),
                features: features.row(i).transpose(),
                annotations,
            }
        })
        .collect();

    let theta = fit_theta(&features, &truth)?;
    let params = GlobalModelParams::new(
        theta,
        f,
        T::from_f64_approx(spec.sigma2.max(1e-12)),
        vec![T::from_f64_approx(spec.tau2.max(1e-12)); k],
    )?;
    let dataset = GlobalDataset::new(p, d, k, instances)?;
    Ok(GlobalSynthetic {
        dataset,
        truth,
        params,
    })
}

fn fit_theta<T: Real>(x: &DMatrix<T>, truth: &DMatrix<T>) -> Result<DMatrix<T>> {
    let chol = ridged_cholesky(x.transpose() * x, T::from_f64_approx(1e-8))?;
    Ok(chol.solve(&(x.transpose() * truth)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimeSeriesSynthSpec {
    pub m: usize,
    pub p: usize,
    pub t: usize,
    pub d: usize,
    pub k: usize,
    /// Width of the generating annotator filters.
    pub w_true: usize,
    pub sigma2: f64,
    pub tau2: f64,
    /// Inclusive range of frames each feature value is held before moving.
    pub lag_range: (usize, usize),
    pub seed: u64,
}

impl TimeSeriesSynthSpec {
    fn validate(&self) -> Result<()> {
        if self.m == 0 || self.p == 0 || self.t == 0 || self.d == 0 || self.k == 0 {
            return Err(Error::validation("all counts must be positive"));
        }
        if self.w_true == 0 || self.w_true > self.t {
            return Err(Error::validation(format!(
                "true filter width {} must lie in 1..={}",
                self.w_true, self.t
            )));
        }
        if self.lag_range.0 < 1 || self.lag_range.0 > self.lag_range.1 {
            return Err(Error::validation("lag range must satisfy 1 <= low <= high"));
        }
        if self.sigma2 < 0.0 || self.tau2 < 0.0 {
            return Err(Error::validation("noise levels must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TimeSeriesSynthetic<T: Real> {
    pub dataset: TimeSeriesDataset<T>,
    /// Per-instance T x D ground-truth matrices.
    pub truth: Vec<DMatrix<T>>,
    pub params: TimeSeriesModelParams<T>,
}

/// Feature series from a driftless random walk with lag: each P-vector value
/// is held for a uniformly drawn number of frames, and segment changes are
/// softened by a one-frame linear blend. Returns the series and the drawn
/// hold lengths.
fn lagged_random_walk<T, R>(
    rng: &mut R,
    t: usize,
    p: usize,
    lag_range: (usize, usize),
) -> (DMatrix<T>, Vec<usize>)
where
    T: Real,
    StandardNormal: Distribution<T>,
    R: Rng,
{
    let mut x = DMatrix::<T>::zeros(t, p);
    let mut value = DVector::<T>::from_fn(p, |_, _| rng.sample::<T, _>(StandardNormal));
    let mut holds = Vec::new();
    let mut row = 0usize;
    let mut first_segment = true;
    while row < t {
        let hold = rng.random_range(lag_range.0..=lag_range.1);
        holds.push(hold);
        for s in 0..hold.min(t - row) {
            if s == 0 && !first_segment {
                // one-frame blend between the previous and the new value
                for q in 0..p {
                    let prev = x[(row - 1, q)];
                    x[(row, q)] = (prev + value[q]) * T::from_f64_approx(0.5);
                }
            } else {
                for q in 0..p {
                    x[(row + s, q)] = value[q];
                }
            }
        }
        row += hold.min(t - row);
        for q in 0..p {
            value[q] += rng.sample::<T, _>(StandardNormal);
        }
        first_segment = false;
    }
    (x, holds)
}

/// Generate a time-series dataset: lagged random-walk features, ground truth
/// uniform on [0, 1), per-annotator causal filter banks with uniform
/// coefficients, and annotations filtered from the truth plus noise.
pub fn gen_timeseries<T>(spec: &TimeSeriesSynthSpec) -> Result<TimeSeriesSynthetic<T>>
where
    T: Real + SampleUniform,
    StandardNormal: Distribution<T>,
{
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (m, p, t, d, k, w) = (spec.m, spec.p, spec.t, spec.d, spec.k, spec.w_true);

    let mut features = Vec::with_capacity(m);
    for _ in 0..m {
        let (x, _) = lagged_random_walk::<T, _>(&mut rng, t, p, spec.lag_range);
        features.push(x);
    }

    let mut truth = Vec::with_capacity(m);
    for _ in 0..m {
        let mut g = DMatrix::<T>::zeros(t, d);
        for i in 0..t {
            for j in 0..d {
                g[(i, j)] = rng.random_range(T::zero()..T::one());
            }
        }
        truth.push(g);
    }

    let coeffs: Vec<DVector<T>> = (0..k * d)
        .map(|_| DVector::from_fn(w * d, |_, _| rng.random_range(T::zero()..T::one())))
        .collect();
    let bank = FilterBank::new(k, d, w, coeffs)?;

    let tau = T::from_f64_approx(spec.tau2.sqrt());
    let mut instances = Vec::with_capacity(m);
    for i in 0..m {
        let mut annotations = Vec::with_capacity(k);
        for kk in 0..k {
            let mut a = DMatrix::<T>::zeros(t, d);
            for dd in 0..d {
                let filtered = apply_filter(&bank, kk, dd, &truth[i])?;
                for r in 0..t {
                    a[(r, dd)] = filtered[r] + tau * rng.sample::<T, _>(StandardNormal);
                }
            }
            annotations.push((kk, a));
        }
        instances.push(TimeSeriesInstance {
            id: i.to_string(),
            features: features[i].clone(),
            annotations,
        });
    }

    // predictor fit to (features, truth) across all instances
    let mut xtx = DMatrix::<T>::zeros(p, p);
    let mut xta = DMatrix::<T>::zeros(p, d);
    for i in 0..m {
        xtx += features[i].transpose() * &features[i];
        xta += features[i].transpose() * &truth[i];
    }
    let theta = ridged_cholesky(xtx, T::from_f64_approx(1e-8))?.solve(&xta);

    let params = TimeSeriesModelParams::new(
        theta,
        bank,
        T::from_f64_approx(spec.sigma2.max(1e-12)),
        vec![T::from_f64_approx(spec.tau2.max(1e-12)); k],
    )?;
    let dataset = TimeSeriesDataset::new(p, d, k, instances)?;
    Ok(TimeSeriesSynthetic {
        dataset,
        truth,
        params,
    })
}

/// One dataset per off-diagonal step, each with the same fixed distortion
/// matrix shared by every annotator. Per-step seeds are derived from the base
/// seed so steps are independent yet reproducible.
pub fn gen_dependency_sweep<T>(
    base: &GlobalSynthSpec,
    steps: &[f64],
) -> Result<Vec<(f64, GlobalSynthetic<T>)>>
where
    T: Real + SampleUniform,
    StandardNormal: Distribution<T>,
{
    if steps.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::validation("sweep steps must lie in [0, 1]"));
    }
    steps
        .iter()
        .enumerate()
        .map(|(i, &step)| {
            let mut spec = base.clone();
            spec.fk_mode = FkMode::FixedOffDiag(step);
            spec.seed = base
                .seed
                .wrapping_add((i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            Ok((step, gen_global(&spec)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_spec() -> GlobalSynthSpec {
        GlobalSynthSpec {
            m: 20,
            p: 6,
            d: 2,
            k: 4,
            coverage: Coverage::Full,
            sigma2: 0.1,
            tau2: 0.1,
            fk_mode: FkMode::UniformRandom,
            seed: 7,
        }
    }

    #[test]
    fn global_shapes_match_spec() {
        let spec = GlobalSynthSpec {
            m: 100,
            p: 500,
            d: 2,
            k: 10,
            ..base_spec()
        };
        let s = gen_global::<f64>(&spec).unwrap();
        assert_eq!(s.dataset.m(), 100);
        assert_eq!(s.dataset.p, 500);
        assert_eq!(s.dataset.d, 2);
        assert_eq!(s.dataset.k, 10);
        assert_eq!(s.truth.nrows(), 100);
        assert_eq!(s.params.theta.nrows(), 500);
        assert!(s
            .dataset
            .instances
            .iter()
            .all(|i| i.annotations.len() == 10));
    }

    #[test]
    fn noiseless_identity_annotations_equal_truth() {
        let spec = GlobalSynthSpec {
            tau2: 0.0,
            fk_mode: FkMode::FixedOffDiag(0.0),
            ..base_spec()
        };
        let s = gen_global::<f64>(&spec).unwrap();
        for (i, inst) in s.dataset.instances.iter().enumerate() {
            for (_, a) in &inst.annotations {
                for j in 0..2 {
                    assert_eq!(a[j], s.truth[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let spec = base_spec();
        let a = gen_global::<f64>(&spec).unwrap();
        let b = gen_global::<f64>(&spec).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn per_instance_coverage_draws_exact_subsets() {
        let spec = GlobalSynthSpec {
            k: 10,
            coverage: Coverage::PerInstance(3),
            ..base_spec()
        };
        let s = gen_global::<f64>(&spec).unwrap();
        for inst in &s.dataset.instances {
            assert_eq!(inst.annotations.len(), 3);
        }
    }

    #[test]
    fn annotation_noise_has_requested_variance() {
        // M*D residual samples >= 1e4: empirical variance within 10% of tau2
        let spec = GlobalSynthSpec {
            m: 2000,
            p: 3,
            d: 2,
            k: 3,
            tau2: 0.25,
            ..base_spec()
        };
        let s = gen_global::<f64>(&spec).unwrap();
        let mut sq = 0.0;
        let mut n = 0usize;
        for (i, inst) in s.dataset.instances.iter().enumerate() {
            let a_star = s.truth.row(i).transpose();
            for (k, a) in &inst.annotations {
                let resid = a - &s.params.f[*k] * &a_star;
                sq += resid.norm_squared();
                n += resid.len();
            }
        }
        let var = sq / n as f64;
        assert!(n >= 10_000);
        assert!(
            (var - 0.25).abs() < 0.025,
            "empirical variance {var} too far from 0.25"
        );
    }

    fn ts_spec() -> TimeSeriesSynthSpec {
        TimeSeriesSynthSpec {
            m: 3,
            p: 4,
            t: 40,
            d: 2,
            k: 2,
            w_true: 3,
            sigma2: 0.1,
            tau2: 0.05,
            lag_range: (2, 4),
            seed: 11,
        }
    }

    #[test]
    fn timeseries_shapes_match_spec() {
        let spec = TimeSeriesSynthSpec {
            m: 18,
            p: 500,
            t: 350,
            d: 2,
            k: 6,
            ..ts_spec()
        };
        let s = gen_timeseries::<f64>(&spec).unwrap();
        assert_eq!(s.dataset.m(), 18);
        assert_eq!(s.dataset.instances[0].features.nrows(), 350);
        assert_eq!(s.dataset.instances[0].features.ncols(), 500);
        assert_eq!(s.dataset.instances[0].annotations.len(), 6);
        assert_eq!(s.truth[0].nrows(), 350);
        assert_eq!(s.params.w(), spec.w_true);
    }

    #[test]
    fn hold_periods_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, holds) = lagged_random_walk::<f64, _>(&mut rng, 64, 2, (2, 4));
        assert!(!holds.is_empty());
        assert!(holds.iter().all(|&h| (2..=4).contains(&h)));
    }

    #[test]
    fn timeseries_same_seed_identical() {
        let spec = ts_spec();
        let a = gen_timeseries::<f64>(&spec).unwrap();
        let b = gen_timeseries::<f64>(&spec).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn sweep_covers_all_steps() {
        let steps: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let spec = GlobalSynthSpec {
            m: 10,
            p: 3,
            k: 5,
            coverage: Coverage::PerInstance(2),
            ..base_spec()
        };
        let sweep = gen_dependency_sweep::<f64>(&spec, &steps).unwrap();
        assert_eq!(sweep.len(), 10);
        for (step, s) in &sweep {
            let f0 = &s.params.f[0];
            for i in 0..2 {
                for j in 0..2 {
                    let expected = if i == j { 1.0 } else { *step };
                    assert_eq!(f0[(i, j)], expected);
                }
            }
            // identical F across annotators, but distinct annotations
            assert!(s.params.f.iter().all(|f| f == f0));
        }
        assert!(gen_dependency_sweep::<f64>(&spec, &[1.5]).is_err());
    }

    #[test]
    fn sweep_step_zero_is_identity() {
        let spec = base_spec();
        let sweep = gen_dependency_sweep::<f64>(&spec, &[0.0]).unwrap();
        let f = &sweep[0].1.params.f[0];
        assert_eq!(*f, DMatrix::identity(2, 2));
    }

    #[test]
    fn identical_fk_still_gives_distinct_annotations() {
        let spec = GlobalSynthSpec {
            fk_mode: FkMode::FixedOffDiag(0.5),
            ..base_spec()
        };
        let s = gen_global::<f64>(&spec).unwrap();
        let inst = &s.dataset.instances[0];
        assert!(inst.annotations[0].1 != inst.annotations[1].1);
    }
}

//! Reference fusers the joint models are compared against: unweighted
//! averaging, majority voting for integer labels, and independent
//! per-dimension fits that reuse the joint code paths with D = 1.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::global::{self, GlobalFitConfig, GlobalFitTrace, GlobalModelParams};
use crate::num::Real;
use crate::timeseries::{self, TimeSeriesFitConfig, TimeSeriesFitOutcome};
use crate::types::{Dataset, GlobalDataset, PosteriorEstimate, TimeSeriesDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    MeanFusion,
    MajorityVote,
    IndependentGlobal,
    IndependentTimeseries,
}

/// Unweighted per-dimension mean across the annotators present on each
/// instance (and frame, in the time-series case).
pub fn mean_fuse<T: Real>(dataset: &Dataset<T>) -> Vec<PosteriorEstimate<T>> {
    match dataset {
        Dataset::Global(ds) => mean_fuse_global(ds),
        Dataset::TimeSeries(ds) => mean_fuse_timeseries(ds),
    }
}

pub fn mean_fuse_global<T: Real>(dataset: &GlobalDataset<T>) -> Vec<PosteriorEstimate<T>> {
    dataset
        .instances
        .iter()
        .map(|inst| {
            let mut mean = DVector::<T>::zeros(dataset.d);
            for (_, v) in &inst.annotations {
                mean += v;
            }
            mean /= T::from_usize_approx(inst.annotations.len());
            PosteriorEstimate::global(inst.id.clone(), mean, None)
        })
        .collect()
}

pub fn mean_fuse_timeseries<T: Real>(dataset: &TimeSeriesDataset<T>) -> Vec<PosteriorEstimate<T>> {
    dataset
        .instances
        .iter()
        .map(|inst| {
            let mut mean = DMatrix::<T>::zeros(inst.t(), dataset.d);
            for (_, v) in &inst.annotations {
                mean += v;
            }
            mean /= T::from_usize_approx(inst.annotations.len());
            PosteriorEstimate::timeseries(inst.id.clone(), mean)
        })
        .collect()
}

/// Modal label per instance and dimension; ties break toward the smallest
/// label value. All annotation values must be integers.
pub fn majority_vote<T: Real>(dataset: &GlobalDataset<T>) -> Result<Vec<PosteriorEstimate<T>>> {
    dataset
        .instances
        .iter()
        .map(|inst| {
            let mut mode = DVector::<T>::zeros(dataset.d);
            for d in 0..dataset.d {
                let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
                for (a, v) in &inst.annotations {
                    let val = v[d];
                    let rounded = val.round();
                    if (val - rounded).abs() != T::zero() {
                        return Err(Error::validation(format!(
                            "instance {}: annotator {} gave non-integer label {} on dimension {}",
                            inst.id, a, val, d
                        )));
                    }
                    *counts
                        .entry(rounded.to_f64_approx() as i64)
                        .or_insert(0) += 1;
                }
                // ascending key order: strict > keeps the smallest label on ties
                let mut best = (i64::MIN, 0usize);
                for (label, count) in counts {
                    if count > best.1 {
                        best = (label, count);
                    }
                }
                mode[d] = T::from_f64_approx(best.0 as f64);
            }
            Ok(PosteriorEstimate::global(inst.id.clone(), mode, None))
        })
        .collect()
}

/// The joint global model run once per annotation dimension with D = 1.
#[derive(Debug, Clone)]
pub struct IndependentGlobalFit<T: Real> {
    pub models: Vec<(GlobalModelParams<T>, GlobalFitTrace<T>)>,
    /// Column-concatenated per-dimension posterior means; the covariance is
    /// diagonal because dimensions are fit separately.
    pub estimates: Vec<PosteriorEstimate<T>>,
}

pub fn independent_fit_global<T: Real>(
    dataset: &GlobalDataset<T>,
    config: &GlobalFitConfig,
) -> Result<IndependentGlobalFit<T>> {
    let d = dataset.d;
    let mut models = Vec::with_capacity(d);
    let mut columns: Vec<Vec<PosteriorEstimate<T>>> = Vec::with_capacity(d);
    for dim in 0..d {
        let slice = dataset.slice_dim(dim)?;
        let (params, trace) = global::fit(&slice, config, None)?;
        let posts = global::e_step(&params, &slice, config.ridge)?;
        models.push((params, trace));
        columns.push(posts);
    }
    let estimates = dataset
        .instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let mean = DVector::from_fn(d, |dim, _| columns[dim][i].mean[(0, 0)]);
            let cov = DMatrix::from_fn(d, d, |r, c| {
                if r == c {
                    columns[r][i].cov.as_ref().map(|m| m[(0, 0)]).unwrap_or_else(T::zero)
                } else {
                    T::zero()
                }
            });
            PosteriorEstimate::global(inst.id.clone(), mean, Some(cov))
        })
        .collect();
    Ok(IndependentGlobalFit { models, estimates })
}

/// The joint time-series model run once per annotation dimension with D = 1.
/// Each dimension keeps its own restart set; the estimates stitch together
/// the best-objective restart of every dimension.
#[derive(Debug, Clone)]
pub struct IndependentTimeSeriesFit<T: Real> {
    pub models: Vec<TimeSeriesFitOutcome<T>>,
    pub estimates: Vec<PosteriorEstimate<T>>,
}

pub fn independent_fit_timeseries<T>(
    dataset: &TimeSeriesDataset<T>,
    config: &TimeSeriesFitConfig,
) -> Result<IndependentTimeSeriesFit<T>>
where
    T: Real,
    StandardNormal: Distribution<T>,
{
    let d = dataset.d;
    let mut models = Vec::with_capacity(d);
    for dim in 0..d {
        let slice = dataset.slice_dim(dim)?;
        models.push(timeseries::fit(&slice, config)?);
    }
    let estimates = dataset
        .instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let mean = DMatrix::from_fn(inst.t(), d, |t, dim| {
                models[dim].best().modes[i][(t, 0)]
            });
            PosteriorEstimate::timeseries(inst.id.clone(), mean)
        })
        .collect();
    Ok(IndependentTimeSeriesFit { models, estimates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::GlobalInstance;

    fn scalar_ds(ann: Vec<(usize, f64)>) -> GlobalDataset<f64> {
        GlobalDataset::new(
            1,
            1,
            ann.iter().map(|(a, _)| a + 1).max().unwrap(),
            vec![GlobalInstance {
                id: "0".into(),
                features: DVector::from_vec(vec![1.0]),
                annotations: ann
                    .into_iter()
                    .map(|(a, v)| (a, DVector::from_vec(vec![v])))
                    .collect(),
            }],
        )
        .unwrap()
    }

    #[test]
    fn mean_of_two_scalars() {
        let est = mean_fuse_global(&scalar_ds(vec![(0, 1.0), (1, 3.0)]));
        assert_eq!(est[0].mean[(0, 0)], 2.0);
    }

    #[test]
    fn single_annotation_passes_through() {
        let est = mean_fuse_global(&scalar_ds(vec![(2, 0.7)]));
        assert_eq!(est[0].mean[(0, 0)], 0.7);
    }

    #[test]
    fn mean_ignores_annotator_order() {
        let a = mean_fuse_global(&scalar_ds(vec![(0, 1.0), (1, 2.0), (2, 4.0)]));
        let b = mean_fuse_global(&scalar_ds(vec![(2, 4.0), (0, 1.0), (1, 2.0)]));
        assert_eq!(a[0].mean, b[0].mean);
    }

    #[test]
    fn majority_picks_modal_label() {
        let est = majority_vote(&scalar_ds(vec![(0, 1.0), (1, 1.0), (2, 2.0)])).unwrap();
        assert_eq!(est[0].mean[(0, 0)], 1.0);
        let est = majority_vote(&scalar_ds(vec![(0, 2.0), (1, 2.0), (2, 2.0)])).unwrap();
        assert_eq!(est[0].mean[(0, 0)], 2.0);
    }

    #[test]
    fn majority_tie_breaks_to_smallest() {
        let est = majority_vote(&scalar_ds(vec![(0, 1.0), (1, 2.0)])).unwrap();
        assert_eq!(est[0].mean[(0, 0)], 1.0);
    }

    #[test]
    fn majority_rejects_non_integer() {
        let err = majority_vote(&scalar_ds(vec![(0, 1.5)])).unwrap_err();
        assert!(err.to_string().contains("non-integer"));
    }

    #[test]
    fn independent_on_single_dimension_matches_joint_bitwise() {
        let spec = crate::synthetic::GlobalSynthSpec {
            m: 15,
            p: 4,
            d: 1,
            k: 3,
            coverage: crate::synthetic::Coverage::Full,
            sigma2: 0.1,
            tau2: 0.2,
            fk_mode: crate::synthetic::FkMode::UniformRandom,
            seed: 21,
        };
        let synth = crate::synthetic::gen_global::<f64>(&spec).unwrap();
        let cfg = GlobalFitConfig {
            max_iters: 25,
            ..GlobalFitConfig::default()
        };
        let ind = independent_fit_global(&synth.dataset, &cfg).unwrap();
        let (params, trace) = global::fit(&synth.dataset, &cfg, None).unwrap();
        assert_eq!(ind.models[0].0.theta, params.theta);
        assert_eq!(ind.models[0].0.sigma2, params.sigma2);
        assert_eq!(ind.models[0].1.ll, trace.ll);
    }

    #[test]
    fn independent_columns_follow_input_dimension_order() {
        // dimension 0 annotations near +1, dimension 1 near -1
        let ds = GlobalDataset::new(
            1,
            2,
            2,
            (0..8)
                .map(|i| GlobalInstance {
                    id: i.to_string(),
                    features: DVector::from_vec(vec![1.0]),
                    annotations: vec![
                        (0, DVector::from_vec(vec![1.0 + 0.01 * i as f64, -1.0])),
                        (1, DVector::from_vec(vec![1.0, -1.0 - 0.01 * i as f64])),
                    ],
                })
                .collect(),
        )
        .unwrap();
        let cfg = GlobalFitConfig {
            max_iters: 10,
            ..GlobalFitConfig::default()
        };
        let ind = independent_fit_global(&ds, &cfg).unwrap();
        for est in &ind.estimates {
            assert!(est.mean[(0, 0)] > 0.5, "column 0 should stay positive");
            assert!(est.mean[(0, 1)] < -0.5, "column 1 should stay negative");
        }
    }

    #[test]
    fn mean_fusion_is_the_flat_prior_limit_of_the_joint_model() {
        // F_k = I, theta = 0, equal tau2, sigma2 huge: posterior mean -> average
        let spec = crate::synthetic::GlobalSynthSpec {
            m: 6,
            p: 2,
            d: 2,
            k: 3,
            coverage: crate::synthetic::Coverage::Full,
            sigma2: 0.1,
            tau2: 0.2,
            fk_mode: crate::synthetic::FkMode::UniformRandom,
            seed: 33,
        };
        let synth = crate::synthetic::gen_global::<f64>(&spec).unwrap();
        let params = GlobalModelParams::new(
            DMatrix::zeros(2, 2),
            vec![DMatrix::identity(2, 2); 3],
            1e12,
            vec![0.5; 3],
        )
        .unwrap();
        let posts = global::e_step(&params, &synth.dataset, 0.0).unwrap();
        let means = mean_fuse_global(&synth.dataset);
        for (p, m) in posts.iter().zip(&means) {
            for j in 0..2 {
                let rel = (p.mean[(0, j)] - m.mean[(0, j)]).abs()
                    / m.mean[(0, j)].abs().max(1e-9);
                assert!(rel < 1e-4, "posterior {} vs mean {}", p.mean[(0, j)], m.mean[(0, j)]);
            }
        }
    }
}

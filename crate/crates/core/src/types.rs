//! Domain types shared by all models: datasets, posterior estimates, and the
//! validation that guards their invariants.
//!
//! Annotations are stored sparsely: each instance carries the list of
//! (annotator id, values) pairs that actually exist, sorted by annotator id.
//! A dense instance-by-annotator tensor is never materialized.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Global,
    Timeseries,
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatasetKind::Global => write!(f, "global"),
            DatasetKind::Timeseries => write!(f, "timeseries"),
        }
    }
}

/// One globally-annotated instance: a feature vector and a sparse set of
/// per-annotator annotation vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalInstance<T: Real> {
    pub id: String,
    /// P-dimensional feature vector.
    pub features: DVector<T>,
    /// (annotator id, D-dimensional annotation), sorted by annotator id.
    pub annotations: Vec<(usize, DVector<T>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDataset<T: Real> {
    pub p: usize,
    pub d: usize,
    /// Size of the annotator pool; annotator ids are `0..k`.
    pub k: usize,
    pub instances: Vec<GlobalInstance<T>>,
}

impl<T: Real> GlobalDataset<T> {
    pub fn new(
        p: usize,
        d: usize,
        k: usize,
        mut instances: Vec<GlobalInstance<T>>,
    ) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::validation("dataset has no instances"));
        }
        if p == 0 || d == 0 || k == 0 {
            return Err(Error::validation("P, D and K must all be positive"));
        }
        for inst in &mut instances {
            validate_vector_row(&inst.features, p, "feature", &inst.id)?;
            if inst.annotations.is_empty() {
                return Err(Error::validation(format!(
                    "instance {} has no annotations",
                    inst.id
                )));
            }
            inst.annotations.sort_by_key(|(a, _)| *a);
            let mut prev: Option<usize> = None;
            for (a, values) in &inst.annotations {
                if *a >= k {
                    return Err(Error::validation(format!(
                        "instance {}: annotator {} is outside the pool of size {}",
                        inst.id, a, k
                    )));
                }
                if prev == Some(*a) {
                    return Err(Error::validation(format!(
                        "instance {}: annotator {} appears more than once",
                        inst.id, a
                    )));
                }
                prev = Some(*a);
                if values.len() != d {
                    return Err(Error::validation(format!(
                        "instance {}: annotation from annotator {} has length {} (expected {})",
                        inst.id,
                        a,
                        values.len(),
                        d
                    )));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::validation(format!(
                        "instance {}: annotation from annotator {} contains a non-finite value",
                        inst.id, a
                    )));
                }
            }
        }
        Ok(GlobalDataset { p, d, k, instances })
    }

    pub fn m(&self) -> usize {
        self.instances.len()
    }

    /// Row-stacked M x P feature matrix.
    pub fn feature_matrix(&self) -> DMatrix<T> {
        let m = self.m();
        DMatrix::from_fn(m, self.p, |i, j| self.instances[i].features[j])
    }

    /// New dataset containing the selected instances, in the given order.
    /// The annotator pool is unchanged.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let instances = idx.iter().map(|&i| self.instances[i].clone()).collect();
        GlobalDataset {
            p: self.p,
            d: self.d,
            k: self.k,
            instances,
        }
    }

    /// Single-dimension view used by the independent baseline: annotation
    /// values of dimension `dim` only, features unchanged.
    pub fn slice_dim(&self, dim: usize) -> Result<Self> {
        if dim >= self.d {
            return Err(Error::shape(format!(
                "dimension {} out of range for D={}",
                dim, self.d
            )));
        }
        let instances = self
            .instances
            .iter()
            .map(|inst| GlobalInstance {
                id: inst.id.clone(),
                features: inst.features.clone(),
                annotations: inst
                    .annotations
                    .iter()
                    .map(|(a, v)| (*a, DVector::from_element(1, v[dim])))
                    .collect(),
            })
            .collect();
        Ok(GlobalDataset {
            p: self.p,
            d: 1,
            k: self.k,
            instances,
        })
    }

    /// For each annotator, the indices of the instances they annotated.
    pub fn instances_per_annotator(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, inst) in self.instances.iter().enumerate() {
            for (a, _) in &inst.annotations {
                out[*a].push(i);
            }
        }
        out
    }
}

/// One time-series instance: a T x P feature matrix and sparse per-annotator
/// T x D annotation matrices. T may differ across instances.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesInstance<T: Real> {
    pub id: String,
    pub features: DMatrix<T>,
    pub annotations: Vec<(usize, DMatrix<T>)>,
}

impl<T: Real> TimeSeriesInstance<T> {
    pub fn t(&self) -> usize {
        self.features.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset<T: Real> {
    pub p: usize,
    pub d: usize,
    pub k: usize,
    pub instances: Vec<TimeSeriesInstance<T>>,
}

impl<T: Real> TimeSeriesDataset<T> {
    pub fn new(
        p: usize,
        d: usize,
        k: usize,
        mut instances: Vec<TimeSeriesInstance<T>>,
    ) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::validation("dataset has no instances"));
        }
        if p == 0 || d == 0 || k == 0 {
            return Err(Error::validation("P, D and K must all be positive"));
        }
        for inst in &mut instances {
            let t = inst.features.nrows();
            if t == 0 {
                return Err(Error::validation(format!(
                    "instance {} has an empty feature series",
                    inst.id
                )));
            }
            if inst.features.ncols() != p {
                return Err(Error::validation(format!(
                    "instance {}: feature rows have length {} (expected {})",
                    inst.id,
                    inst.features.ncols(),
                    p
                )));
            }
            if inst.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!(
                    "instance {}: features contain a non-finite value",
                    inst.id
                )));
            }
            if inst.annotations.is_empty() {
                return Err(Error::validation(format!(
                    "instance {} has no annotations",
                    inst.id
                )));
            }
            inst.annotations.sort_by_key(|(a, _)| *a);
            let mut prev: Option<usize> = None;
            for (a, values) in &inst.annotations {
                if *a >= k {
                    return Err(Error::validation(format!(
                        "instance {}: annotator {} is outside the pool of size {}",
                        inst.id, a, k
                    )));
                }
                if prev == Some(*a) {
                    return Err(Error::validation(format!(
                        "instance {}: annotator {} appears more than once",
                        inst.id, a
                    )));
                }
                prev = Some(*a);
                if values.nrows() != t || values.ncols() != d {
                    return Err(Error::validation(format!(
                        "instance {}: annotation from annotator {} is {}x{} (expected {}x{})",
                        inst.id,
                        a,
                        values.nrows(),
                        values.ncols(),
                        t,
                        d
                    )));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::validation(format!(
                        "instance {}: annotation from annotator {} contains a non-finite value",
                        inst.id, a
                    )));
                }
            }
        }
        Ok(TimeSeriesDataset { p, d, k, instances })
    }

    pub fn m(&self) -> usize {
        self.instances.len()
    }

    /// Shortest series length; fits require the filter width to stay below it.
    pub fn min_t(&self) -> usize {
        self.instances.iter().map(|i| i.t()).min().unwrap_or(0)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let instances = idx.iter().map(|&i| self.instances[i].clone()).collect();
        TimeSeriesDataset {
            p: self.p,
            d: self.d,
            k: self.k,
            instances,
        }
    }

    pub fn slice_dim(&self, dim: usize) -> Result<Self> {
        if dim >= self.d {
            return Err(Error::shape(format!(
                "dimension {} out of range for D={}",
                dim, self.d
            )));
        }
        let instances = self
            .instances
            .iter()
            .map(|inst| TimeSeriesInstance {
                id: inst.id.clone(),
                features: inst.features.clone(),
                annotations: inst
                    .annotations
                    .iter()
                    .map(|(a, v)| (*a, DMatrix::from_fn(v.nrows(), 1, |t, _| v[(t, dim)])))
                    .collect(),
            })
            .collect();
        Ok(TimeSeriesDataset {
            p: self.p,
            d: 1,
            k: self.k,
            instances,
        })
    }

    pub fn instances_per_annotator(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, inst) in self.instances.iter().enumerate() {
            for (a, _) in &inst.annotations {
                out[*a].push(i);
            }
        }
        out
    }
}

/// Either dataset kind, as produced by the loader.
#[derive(Debug, Clone)]
pub enum Dataset<T: Real> {
    Global(GlobalDataset<T>),
    TimeSeries(TimeSeriesDataset<T>),
}

impl<T: Real> Dataset<T> {
    pub fn kind(&self) -> DatasetKind {
        match self {
            Dataset::Global(_) => DatasetKind::Global,
            Dataset::TimeSeries(_) => DatasetKind::Timeseries,
        }
    }
}

/// Ground-truth estimate for one instance: the conditional mean (a 1 x D row
/// for global instances, T x D for time series) plus, for the global model,
/// the D x D conditional covariance. Hard-EM point estimates carry no
/// covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEstimate<T: Real> {
    pub id: String,
    pub kind: DatasetKind,
    pub mean: DMatrix<T>,
    pub cov: Option<DMatrix<T>>,
}

impl<T: Real> PosteriorEstimate<T> {
    pub fn global(id: impl Into<String>, mean: DVector<T>, cov: Option<DMatrix<T>>) -> Self {
        let row = DMatrix::from_fn(1, mean.len(), |_, j| mean[j]);
        PosteriorEstimate {
            id: id.into(),
            kind: DatasetKind::Global,
            mean: row,
            cov,
        }
    }

    pub fn timeseries(id: impl Into<String>, mean: DMatrix<T>) -> Self {
        PosteriorEstimate {
            id: id.into(),
            kind: DatasetKind::Timeseries,
            mean,
            cov: None,
        }
    }

    /// Conditional mean as a column vector (global estimates only).
    pub fn mean_vector(&self) -> DVector<T> {
        DVector::from_fn(self.mean.ncols(), |j, _| self.mean[(0, j)])
    }

    /// E[a a^T] = cov + mean mean^T for global estimates carrying a covariance.
    pub fn second_moment(&self) -> Option<DMatrix<T>> {
        let cov = self.cov.as_ref()?;
        let mu = self.mean_vector();
        Some(cov + &mu * mu.transpose())
    }
}

fn validate_vector_row<T: Real>(v: &DVector<T>, p: usize, what: &str, id: &str) -> Result<()> {
    if v.len() != p {
        return Err(Error::validation(format!(
            "instance {}: {} vector has length {} (expected {})",
            id,
            what,
            v.len(),
            p
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::validation(format!(
            "instance {}: {} vector contains a non-finite value",
            id, what
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(id: &str, features: Vec<f64>, ann: Vec<(usize, Vec<f64>)>) -> GlobalInstance<f64> {
        GlobalInstance {
            id: id.to_string(),
            features: DVector::from_vec(features),
            annotations: ann
                .into_iter()
                .map(|(a, v)| (a, DVector::from_vec(v)))
                .collect(),
        }
    }

    #[test]
    fn valid_dataset_passes() {
        let ds = GlobalDataset::new(
            2,
            2,
            3,
            vec![
                inst("a", vec![1.0, 2.0], vec![(0, vec![0.5, 0.5])]),
                inst(
                    "b",
                    vec![0.0, 1.0],
                    vec![(2, vec![1.0, 0.0]), (1, vec![0.0, 1.0])],
                ),
            ],
        )
        .unwrap();
        assert_eq!(ds.m(), 2);
        // annotations get sorted by annotator id
        assert_eq!(ds.instances[1].annotations[0].0, 1);
    }

    #[test]
    fn wrong_annotation_length_names_instance() {
        let err = GlobalDataset::new(
            2,
            2,
            3,
            vec![inst("bad-one", vec![1.0, 2.0], vec![(0, vec![0.5])])],
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad-one"), "{msg}");
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn nan_feature_is_rejected() {
        let err = GlobalDataset::new(
            2,
            1,
            1,
            vec![inst("n", vec![1.0, f64::NAN], vec![(0, vec![0.5])])],
        )
        .unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }

    #[test]
    fn duplicate_annotator_is_rejected() {
        let err = GlobalDataset::new(
            1,
            1,
            2,
            vec![inst(
                "dup",
                vec![1.0],
                vec![(1, vec![0.5]), (1, vec![0.6])],
            )],
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("dup") && msg.contains("annotator 1"), "{msg}");
    }

    #[test]
    fn annotator_outside_pool_is_rejected() {
        let err = GlobalDataset::new(1, 1, 2, vec![inst("x", vec![1.0], vec![(2, vec![0.5])])])
            .unwrap_err();
        assert!(err.to_string().contains("outside the pool"));
    }

    #[test]
    fn timeseries_annotation_shape_checked() {
        let err = TimeSeriesDataset::new(
            1,
            2,
            1,
            vec![TimeSeriesInstance {
                id: "ts0".into(),
                features: DMatrix::from_element(4, 1, 0.0),
                annotations: vec![(0, DMatrix::from_element(3, 2, 0.0))],
            }],
        )
        .unwrap_err();
        assert!(err.to_string().contains("ts0"));
    }

    #[test]
    fn slice_dim_keeps_values() {
        let ds = GlobalDataset::new(
            1,
            2,
            1,
            vec![inst("a", vec![1.0], vec![(0, vec![0.25, 0.75])])],
        )
        .unwrap();
        let s = ds.slice_dim(1).unwrap();
        assert_eq!(s.d, 1);
        assert_eq!(s.instances[0].annotations[0].1[0], 0.75);
        assert!(ds.slice_dim(2).is_err());
    }

    #[test]
    fn second_moment_combines_mean_and_cov() {
        let est = PosteriorEstimate::global(
            "e",
            DVector::from_vec(vec![1.0, 2.0]),
            Some(DMatrix::identity(2, 2)),
        );
        let s2 = est.second_moment().unwrap();
        assert_eq!(s2[(0, 0)], 2.0);
        assert_eq!(s2[(0, 1)], 2.0);
        assert_eq!(s2[(1, 1)], 5.0);
    }
}

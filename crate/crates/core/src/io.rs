//! File formats: dataset and estimate JSON schemas, the long-format CSV
//! ingestion path, and fitted-parameter serialization.
//!
//! All numeric I/O is 64-bit floating point. JSON floats are written in the
//! shortest representation that parses back to the identical bits, so
//! load-after-save round-trips exactly.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::global::{GlobalFitConfig, GlobalFitTrace, GlobalModelParams};
use crate::num::Real;
use crate::timeseries::{RestartFit, TimeSeriesFitConfig, TimeSeriesModelParams};
use crate::types::{
    Dataset, DatasetKind, GlobalDataset, GlobalInstance, PosteriorEstimate, TimeSeriesDataset,
    TimeSeriesInstance,
};

// ---------------------------------------------------------------------------
// Dataset JSON schema
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    kind: DatasetKind,
    d: usize,
    p: usize,
    k: usize,
    instances: Vec<InstanceFile>,
}

#[derive(Serialize, Deserialize)]
struct InstanceFile {
    id: String,
    features: Rows,
    annotations: Vec<AnnotationFile>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    annotator: usize,
    values: Rows,
}

/// A vector (global) or a row-major matrix (time series).
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Rows {
    Vector(Vec<f64>),
    Matrix(Vec<Vec<f64>>),
}

impl Rows {
    fn as_vector<T: Real>(&self, what: &str, id: &str) -> Result<DVector<T>> {
        match self {
            Rows::Vector(v) => Ok(DVector::from_iterator(
                v.len(),
                v.iter().map(|&x| T::from_f64_approx(x)),
            )),
            Rows::Matrix(_) => Err(Error::Parse(format!(
                "instance {id}: expected a flat {what} vector, found nested rows"
            ))),
        }
    }

    fn as_matrix<T: Real>(&self, what: &str, id: &str) -> Result<DMatrix<T>> {
        match self {
            Rows::Matrix(rows) => {
                let nrows = rows.len();
                let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
                if rows.iter().any(|r| r.len() != ncols) {
                    return Err(Error::Parse(format!(
                        "instance {id}: ragged {what} rows"
                    )));
                }
                Ok(DMatrix::from_fn(nrows, ncols, |i, j| {
                    T::from_f64_approx(rows[i][j])
                }))
            }
            Rows::Vector(_) => Err(Error::Parse(format!(
                "instance {id}: expected {what} rows, found a flat vector"
            ))),
        }
    }
}

fn vector_rows<T: Real>(v: &DVector<T>) -> Rows {
    Rows::Vector(v.iter().map(|x| x.to_f64_approx()).collect())
}

fn matrix_rows<T: Real>(m: &DMatrix<T>) -> Rows {
    Rows::Matrix(
        (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)].to_f64_approx()).collect())
            .collect(),
    )
}

pub fn matrix_to_rows<T: Real>(m: &DMatrix<T>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)].to_f64_approx()).collect())
        .collect()
}

pub fn rows_to_matrix<T: Real>(rows: &[Vec<f64>]) -> Result<DMatrix<T>> {
    let nrows = rows.len();
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Parse("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| {
        T::from_f64_approx(rows[i][j])
    }))
}

/// Load a dataset file, checking it against the requested kind and running
/// full validation.
pub fn load_dataset<T: Real>(path: impl AsRef<Path>, kind: DatasetKind) -> Result<Dataset<T>> {
    let text = std::fs::read_to_string(path)?;
    let file: DatasetFile = serde_json::from_str(&text)?;
    if file.kind != kind {
        return Err(Error::validation(format!(
            "file holds a {} dataset but {} was requested",
            file.kind, kind
        )));
    }
    dataset_from_file(file)
}

fn dataset_from_file<T: Real>(file: DatasetFile) -> Result<Dataset<T>> {
    match file.kind {
        DatasetKind::Global => {
            let mut instances = Vec::with_capacity(file.instances.len());
            for inst in file.instances {
                let features = inst.features.as_vector("feature", &inst.id)?;
                let mut annotations = Vec::with_capacity(inst.annotations.len());
                for ann in inst.annotations {
                    let values = ann.values.as_vector("annotation", &inst.id)?;
                    annotations.push((ann.annotator, values));
                }
                instances.push(GlobalInstance {
                    id: inst.id,
                    features,
                    annotations,
                });
            }
            Ok(Dataset::Global(GlobalDataset::new(
                file.p, file.d, file.k, instances,
            )?))
        }
        DatasetKind::Timeseries => {
            let mut instances = Vec::with_capacity(file.instances.len());
            for inst in file.instances {
                let features = inst.features.as_matrix("feature", &inst.id)?;
                let mut annotations = Vec::with_capacity(inst.annotations.len());
                for ann in inst.annotations {
                    let values = ann.values.as_matrix("annotation", &inst.id)?;
                    annotations.push((ann.annotator, values));
                }
                instances.push(TimeSeriesInstance {
                    id: inst.id,
                    features,
                    annotations,
                });
            }
            Ok(Dataset::TimeSeries(TimeSeriesDataset::new(
                file.p, file.d, file.k, instances,
            )?))
        }
    }
}

pub fn save_dataset<T: Real>(dataset: &Dataset<T>, path: impl AsRef<Path>) -> Result<()> {
    let file = match dataset {
        Dataset::Global(ds) => DatasetFile {
            kind: DatasetKind::Global,
            d: ds.d,
            p: ds.p,
            k: ds.k,
            instances: ds
                .instances
                .iter()
                .map(|inst| InstanceFile {
                    id: inst.id.clone(),
                    features: vector_rows(&inst.features),
                    annotations: inst
                        .annotations
                        .iter()
                        .map(|(a, v)| AnnotationFile {
                            annotator: *a,
                            values: vector_rows(v),
                        })
                        .collect(),
                })
                .collect(),
        },
        Dataset::TimeSeries(ds) => DatasetFile {
            kind: DatasetKind::Timeseries,
            d: ds.d,
            p: ds.p,
            k: ds.k,
            instances: ds
                .instances
                .iter()
                .map(|inst| InstanceFile {
                    id: inst.id.clone(),
                    features: matrix_rows(&inst.features),
                    annotations: inst
                        .annotations
                        .iter()
                        .map(|(a, v)| AnnotationFile {
                            annotator: *a,
                            values: matrix_rows(v),
                        })
                        .collect(),
                })
                .collect(),
        },
    };
    write_json(path, &file)
}

// ---------------------------------------------------------------------------
// CSV ingestion (long format)
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct AnnotationRow {
    instance: String,
    annotator: usize,
    frame: usize,
    dim: usize,
    value: f64,
}

#[derive(Deserialize)]
struct FeatureRow {
    instance: String,
    frame: usize,
    dim: usize,
    value: f64,
}

/// Load a dataset from two long-format CSV files: annotations as
/// `instance,annotator,frame,dim,value` and features as
/// `instance,frame,dim,value`. Global data uses frame 0 throughout.
/// Instance order follows first appearance in the features file.
pub fn load_dataset_csv<T: Real>(
    annotations_path: impl AsRef<Path>,
    features_path: impl AsRef<Path>,
    kind: DatasetKind,
) -> Result<Dataset<T>> {
    let mut order: Vec<String> = Vec::new();
    let mut feat_cells: BTreeMap<String, Vec<(usize, usize, f64)>> = BTreeMap::new();
    let mut rdr = csv::Reader::from_path(&features_path)?;
    for row in rdr.deserialize::<FeatureRow>() {
        let row = row?;
        if !feat_cells.contains_key(&row.instance) {
            order.push(row.instance.clone());
        }
        feat_cells
            .entry(row.instance)
            .or_default()
            .push((row.frame, row.dim, row.value));
    }
    if order.is_empty() {
        return Err(Error::Parse("features CSV contains no rows".into()));
    }

    let mut ann_cells: BTreeMap<(String, usize), Vec<(usize, usize, f64)>> = BTreeMap::new();
    let mut rdr = csv::Reader::from_path(&annotations_path)?;
    let mut max_dim = 0usize;
    let mut max_annotator = 0usize;
    for row in rdr.deserialize::<AnnotationRow>() {
        let row = row?;
        if !feat_cells.contains_key(&row.instance) {
            return Err(Error::validation(format!(
                "annotation references instance {} with no features",
                row.instance
            )));
        }
        max_dim = max_dim.max(row.dim);
        max_annotator = max_annotator.max(row.annotator);
        ann_cells
            .entry((row.instance, row.annotator))
            .or_default()
            .push((row.frame, row.dim, row.value));
    }
    let d = max_dim + 1;
    let k = max_annotator + 1;
    let p = 1 + feat_cells
        .values()
        .flat_map(|cells| cells.iter().map(|c| c.1))
        .max()
        .unwrap_or(0);

    let cells_to_matrix = |cells: &[(usize, usize, f64)],
                           nrows: usize,
                           ncols: usize,
                           what: &str,
                           id: &str|
     -> Result<DMatrix<T>> {
        let mut filled = vec![false; nrows * ncols];
        let mut m = DMatrix::<T>::zeros(nrows, ncols);
        for &(r, c, v) in cells {
            if r >= nrows || c >= ncols {
                return Err(Error::validation(format!(
                    "instance {id}: {what} cell ({r},{c}) outside {nrows}x{ncols}"
                )));
            }
            if filled[r * ncols + c] {
                return Err(Error::validation(format!(
                    "instance {id}: duplicate {what} cell ({r},{c})"
                )));
            }
            filled[r * ncols + c] = true;
            m[(r, c)] = T::from_f64_approx(v);
        }
        if let Some(pos) = filled.iter().position(|f| !f) {
            return Err(Error::validation(format!(
                "instance {id}: missing {what} cell ({},{})",
                pos / ncols,
                pos % ncols
            )));
        }
        Ok(m)
    };

    match kind {
        DatasetKind::Global => {
            let mut instances = Vec::new();
            for id in &order {
                let cells = &feat_cells[id];
                let feats = cells_to_matrix(cells, 1, p, "feature", id)?;
                let features = DVector::from_fn(p, |j, _| feats[(0, j)]);
                let mut annotations = Vec::new();
                for ((inst_id, annotator), cells) in &ann_cells {
                    if inst_id == id {
                        let v = cells_to_matrix(cells, 1, d, "annotation", id)?;
                        annotations.push((*annotator, DVector::from_fn(d, |j, _| v[(0, j)])));
                    }
                }
                instances.push(GlobalInstance {
                    id: id.clone(),
                    features,
                    annotations,
                });
            }
            Ok(Dataset::Global(GlobalDataset::new(p, d, k, instances)?))
        }
        DatasetKind::Timeseries => {
            let mut instances = Vec::new();
            for id in &order {
                let cells = &feat_cells[id];
                let t = 1 + cells.iter().map(|c| c.0).max().unwrap_or(0);
                let features = cells_to_matrix(cells, t, p, "feature", id)?;
                let mut annotations = Vec::new();
                for ((inst_id, annotator), cells) in &ann_cells {
                    if inst_id == id {
                        annotations
                            .push((*annotator, cells_to_matrix(cells, t, d, "annotation", id)?));
                    }
                }
                instances.push(TimeSeriesInstance {
                    id: id.clone(),
                    features,
                    annotations,
                });
            }
            Ok(Dataset::TimeSeries(TimeSeriesDataset::new(
                p, d, k, instances,
            )?))
        }
    }
}

// ---------------------------------------------------------------------------
// Estimates
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct EstimatesFile {
    instances: Vec<EstimateFile>,
}

#[derive(Serialize, Deserialize)]
struct EstimateFile {
    id: String,
    mean: Rows,
    #[serde(skip_serializing_if = "Option::is_none")]
    cov: Option<Vec<Vec<f64>>>,
}

pub fn save_estimates<T: Real>(
    estimates: &[PosteriorEstimate<T>],
    path: impl AsRef<Path>,
) -> Result<()> {
    if estimates.is_empty() {
        return Err(Error::validation("no estimates to save"));
    }
    let kind = estimates[0].kind;
    if estimates.iter().any(|e| e.kind != kind) {
        return Err(Error::validation(
            "estimates mix global and timeseries shapes",
        ));
    }
    let instances = estimates
        .iter()
        .map(|e| EstimateFile {
            id: e.id.clone(),
            mean: match kind {
                DatasetKind::Global => {
                    Rows::Vector((0..e.mean.ncols()).map(|j| e.mean[(0, j)].to_f64_approx()).collect())
                }
                DatasetKind::Timeseries => matrix_rows(&e.mean),
            },
            cov: e.cov.as_ref().map(|c| matrix_to_rows(c)),
        })
        .collect();
    write_json(path, &EstimatesFile { instances })
}

pub fn load_estimates<T: Real>(path: impl AsRef<Path>) -> Result<Vec<PosteriorEstimate<T>>> {
    let text = std::fs::read_to_string(path)?;
    let file: EstimatesFile = serde_json::from_str(&text)?;
    if file.instances.is_empty() {
        return Err(Error::validation("estimates file holds no instances"));
    }
    let mut out = Vec::with_capacity(file.instances.len());
    let mut kind: Option<DatasetKind> = None;
    for e in file.instances {
        let (mean, this_kind) = match &e.mean {
            Rows::Vector(_) => {
                let v: DVector<T> = e.mean.as_vector("mean", &e.id)?;
                let row = DMatrix::from_fn(1, v.len(), |_, j| v[j]);
                (row, DatasetKind::Global)
            }
            Rows::Matrix(_) => (e.mean.as_matrix("mean", &e.id)?, DatasetKind::Timeseries),
        };
        match kind {
            None => kind = Some(this_kind),
            Some(k) if k != this_kind => {
                return Err(Error::validation(
                    "estimates mix global and timeseries shapes",
                ))
            }
            _ => {}
        }
        let cov = match e.cov {
            Some(rows) => Some(rows_to_matrix(&rows)?),
            None => None,
        };
        out.push(PosteriorEstimate {
            id: e.id,
            kind: this_kind,
            mean,
            cov,
        });
    }
    Ok(out)
}

/// Write estimates in long CSV format: `instance,frame,dim,value` (means
/// only; global estimates use frame 0).
pub fn save_estimates_csv<T: Real>(
    estimates: &[PosteriorEstimate<T>],
    path: impl AsRef<Path>,
) -> Result<()> {
    if estimates.is_empty() {
        return Err(Error::validation("no estimates to save"));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["instance", "frame", "dim", "value"])?;
    for e in estimates {
        for t in 0..e.mean.nrows() {
            for d in 0..e.mean.ncols() {
                w.write_record([
                    e.id.as_str(),
                    &t.to_string(),
                    &d.to_string(),
                    &format!("{}", e.mean[(t, d)].to_f64_approx()),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Fitted parameters
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct GlobalParamsFile<'a> {
    kind: &'static str,
    p: usize,
    d: usize,
    sigma2: f64,
    theta: Vec<Vec<f64>>,
    annotators: Vec<GlobalAnnotatorFile>,
    config: &'a GlobalFitConfig,
    trace: GlobalTraceFile,
}

#[derive(Serialize)]
struct GlobalAnnotatorFile {
    id: usize,
    f: Vec<Vec<f64>>,
    tau2: f64,
}

#[derive(Serialize)]
struct GlobalTraceFile {
    ll: Vec<f64>,
    iterations: usize,
    termination: String,
}

pub fn save_global_params<T: Real>(
    params: &GlobalModelParams<T>,
    config: &GlobalFitConfig,
    trace: &GlobalFitTrace<T>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let file = GlobalParamsFile {
        kind: "global",
        p: params.p(),
        d: params.d(),
        sigma2: params.sigma2.to_f64_approx(),
        theta: matrix_to_rows(&params.theta),
        annotators: (0..params.k())
            .map(|k| GlobalAnnotatorFile {
                id: k,
                f: matrix_to_rows(&params.f[k]),
                tau2: params.tau2[k].to_f64_approx(),
            })
            .collect(),
        config,
        trace: GlobalTraceFile {
            ll: trace.ll.iter().map(|v| v.to_f64_approx()).collect(),
            iterations: trace.iterations,
            termination: trace.termination.to_string(),
        },
    };
    write_json(path, &file)
}

#[derive(Serialize)]
struct TimeSeriesParamsFile<'a> {
    kind: &'static str,
    p: usize,
    d: usize,
    w: usize,
    sigma2: f64,
    theta: Vec<Vec<f64>>,
    annotators: Vec<TsAnnotatorFile>,
    config: &'a TimeSeriesFitConfig,
    restarts: Vec<RestartFile>,
}

#[derive(Serialize)]
struct TsAnnotatorFile {
    id: usize,
    filters: Vec<FilterFile>,
    tau2: f64,
}

#[derive(Serialize)]
struct FilterFile {
    d: usize,
    coeffs: Vec<f64>,
}

#[derive(Serialize)]
struct RestartFile {
    restart: usize,
    objective_trace: Vec<f64>,
    iterations: usize,
    converged: bool,
}

pub fn save_timeseries_params<T: Real>(
    params: &TimeSeriesModelParams<T>,
    config: &TimeSeriesFitConfig,
    restarts: &[RestartFit<T>],
    path: impl AsRef<Path>,
) -> Result<()> {
    let file = TimeSeriesParamsFile {
        kind: "timeseries",
        p: params.p(),
        d: params.d(),
        w: params.w(),
        sigma2: params.sigma2.to_f64_approx(),
        theta: matrix_to_rows(&params.theta),
        annotators: (0..params.k())
            .map(|k| TsAnnotatorFile {
                id: k,
                filters: (0..params.d())
                    .map(|d| FilterFile {
                        d,
                        coeffs: params
                            .bank
                            .coefficients(k, d)
                            .iter()
                            .map(|v| v.to_f64_approx())
                            .collect(),
                    })
                    .collect(),
                tau2: params.tau2[k].to_f64_approx(),
            })
            .collect(),
        config,
        restarts: restarts
            .iter()
            .map(|r| RestartFile {
                restart: r.restart,
                objective_trace: r.objective.iter().map(|v| v.to_f64_approx()).collect(),
                iterations: r.iterations,
                converged: r.converged,
            })
            .collect(),
    };
    write_json(path, &file)
}

/// Per-dimension parameter array written by the independent baselines.
pub fn save_independent_params(models: &[serde_json::Value], path: impl AsRef<Path>) -> Result<()> {
    let file = serde_json::json!({
        "kind": "independent",
        "models": models,
    });
    write_json(path, &file)
}

pub fn global_params_value<T: Real>(
    params: &GlobalModelParams<T>,
    config: &GlobalFitConfig,
    trace: &GlobalFitTrace<T>,
) -> serde_json::Value {
    serde_json::json!({
        "kind": "global",
        "p": params.p(),
        "d": params.d(),
        "sigma2": params.sigma2.to_f64_approx(),
        "theta": matrix_to_rows(&params.theta),
        "annotators": (0..params.k()).map(|k| serde_json::json!({
            "id": k,
            "f": matrix_to_rows(&params.f[k]),
            "tau2": params.tau2[k].to_f64_approx(),
        })).collect::<Vec<_>>(),
        "config": config,
        "trace": {
            "ll": trace.ll.iter().map(|v| v.to_f64_approx()).collect::<Vec<_>>(),
            "iterations": trace.iterations,
            "termination": trace.termination.to_string(),
        },
    })
}

pub fn timeseries_params_value<T: Real>(
    params: &TimeSeriesModelParams<T>,
    config: &TimeSeriesFitConfig,
    restarts: &[RestartFit<T>],
) -> serde_json::Value {
    serde_json::json!({
        "kind": "timeseries",
        "p": params.p(),
        "d": params.d(),
        "w": params.w(),
        "sigma2": params.sigma2.to_f64_approx(),
        "theta": matrix_to_rows(&params.theta),
        "annotators": (0..params.k()).map(|k| serde_json::json!({
            "id": k,
            "filters": (0..params.d()).map(|d| serde_json::json!({
                "d": d,
                "coeffs": params.bank.coefficients(k, d).iter().map(|v| v.to_f64_approx()).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
            "tau2": params.tau2[k].to_f64_approx(),
        })).collect::<Vec<_>>(),
        "config": config,
        "restarts": restarts.iter().map(|r| serde_json::json!({
            "restart": r.restart,
            "objective_trace": r.objective.iter().map(|v| v.to_f64_approx()).collect::<Vec<_>>(),
            "iterations": r.iterations,
            "converged": r.converged,
        })).collect::<Vec<_>>(),
    })
}

pub fn write_json<S: Serialize>(path: impl AsRef<Path>, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

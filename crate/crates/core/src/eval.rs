//! Metrics, the cross-validation protocol with validation-based model
//! selection, label-switching alignment, and significance testing.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::baselines;
use crate::error::{Error, Result};
use crate::global::{self, GlobalFitConfig, GlobalModelParams};
use crate::num::Real;
use crate::timeseries::{self, FilterBank, TimeSeriesFitConfig, TimeSeriesModelParams};
use crate::types::{GlobalDataset, TimeSeriesDataset};

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Concordance correlation with population (1/n) moment estimators:
/// `2 s_xy / (s_x^2 + s_y^2 + (mean_x - mean_y)^2)`. A pair of identical
/// constant inputs scores 1; any other zero-denominator input scores 0.
pub fn ccc<T: Real>(x: &[T], y: &[T]) -> Result<T> {
    check_pair(x, y)?;
    let n = T::from_usize_approx(x.len());
    let mean = |v: &[T]| v.iter().copied().fold(T::zero(), |a, b| a + b) / n;
    let mx = mean(x);
    let my = mean(y);
    let mut sxx = T::zero();
    let mut syy = T::zero();
    let mut sxy = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    sxx /= n;
    syy /= n;
    sxy /= n;
    let dm = mx - my;
    let denom = sxx + syy + dm * dm;
    if denom == T::zero() {
        // both inputs constant with equal means; identical vectors concord
        let identical = x.iter().zip(y).all(|(a, b)| a == b);
        return Ok(if identical { T::one() } else { T::zero() });
    }
    Ok(sxy * T::from_f64_approx(2.0) / denom)
}

/// Pearson correlation. Errors on constant input.
pub fn pearson<T: Real>(x: &[T], y: &[T]) -> Result<T> {
    check_pair(x, y)?;
    let n = T::from_usize_approx(x.len());
    let mean = |v: &[T]| v.iter().copied().fold(T::zero(), |a, b| a + b) / n;
    let mx = mean(x);
    let my = mean(y);
    let mut sxx = T::zero();
    let mut syy = T::zero();
    let mut sxy = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let denom = (sxx * syy).sqrt();
    if denom == T::zero() {
        return Err(Error::numeric("pearson undefined for constant input"));
    }
    Ok(sxy / denom)
}

fn check_pair<T: Real>(x: &[T], y: &[T]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::shape(format!(
            "metric inputs have lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::shape("metric inputs need at least 2 samples"));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::validation("metric input contains a non-finite value"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Ccc,
    Pearson,
}

impl MetricKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::Ccc => "ccc",
            MetricKind::Pearson => "pearson",
        }
    }

    fn eval<T: Real>(&self, x: &[T], y: &[T]) -> Result<T> {
        match self {
            MetricKind::Ccc => ccc(x, y),
            MetricKind::Pearson => pearson(x, y),
        }
    }
}

// ---------------------------------------------------------------------------
// Label-switching alignment
// ---------------------------------------------------------------------------

/// Find the column permutation of `estimates` that maximizes the summed
/// Pearson correlation against the reference columns, exhaustively over all
/// permutations (D <= 8). Ties break toward the permutation closest to the
/// identity (fewest displaced columns, then lexicographic order). Returns the
/// permutation and the permuted estimates: output column `d` is estimate
/// column `perm[d]`.
pub fn align_dimensions<T: Real>(
    estimates: &DMatrix<T>,
    reference: &DMatrix<T>,
) -> Result<(Vec<usize>, DMatrix<T>)> {
    if estimates.shape() != reference.shape() {
        return Err(Error::shape(format!(
            "estimates are {}x{} but reference is {}x{}",
            estimates.nrows(),
            estimates.ncols(),
            reference.nrows(),
            reference.ncols()
        )));
    }
    let d = estimates.ncols();
    if d > 8 {
        return Err(Error::shape("alignment supports at most 8 dimensions"));
    }
    if d == 0 {
        return Err(Error::shape("alignment needs at least one dimension"));
    }

    // pairwise correlations; constant columns contribute nothing
    let mut corr = vec![vec![0.0f64; d]; d];
    for i in 0..d {
        let est_col: Vec<T> = estimates.column(i).iter().copied().collect();
        for j in 0..d {
            let ref_col: Vec<T> = reference.column(j).iter().copied().collect();
            corr[i][j] = pearson(&est_col, &ref_col)
                .map(|v| v.to_f64_approx())
                .unwrap_or(0.0);
        }
    }

    let perms = permutations(d);
    let score = |perm: &[usize]| -> f64 { (0..d).map(|j| corr[perm[j]][j]).sum() };
    let best_score = perms
        .iter()
        .map(|p| score(p))
        .fold(f64::NEG_INFINITY, f64::max);
    let displaced = |perm: &[usize]| perm.iter().enumerate().filter(|(i, &p)| *i != p).count();
    let chosen = perms
        .iter()
        .filter(|p| score(p) >= best_score - 1e-12)
        .min_by(|a, b| displaced(a).cmp(&displaced(b)).then_with(|| a.cmp(b)))
        .expect("at least one permutation")
        .clone();

    let aligned = permute_columns(estimates, &chosen);
    Ok((chosen, aligned))
}

pub fn permute_columns<T: Real>(m: &DMatrix<T>, perm: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, perm[j])])
}

fn permutations(d: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut items: Vec<usize> = (0..d).collect();
    permute_rec(&mut items, 0, &mut out);
    out.sort();
    out
}

fn permute_rec(items: &mut Vec<usize>, start: usize, out: &mut Vec<Vec<usize>>) {
    if start == items.len() {
        out.push(items.clone());
        return;
    }
    for i in start..items.len() {
        items.swap(start, i);
        permute_rec(items, start + 1, out);
        items.swap(start, i);
    }
}

// ---------------------------------------------------------------------------
// Cross-validation plan and report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CvPlan {
    pub folds: usize,
    /// Share of the training portion held out for iteration / restart selection.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for CvPlan {
    fn default() -> Self {
        CvPlan {
            folds: 5,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

impl CvPlan {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::validation("at least 2 folds are required"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::validation("validation fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvModel {
    Joint,
    Independent,
    Mean,
}

impl CvModel {
    pub fn as_str(&self) -> &'static str {
        match self {
            CvModel::Joint => "joint",
            CvModel::Independent => "independent",
            CvModel::Mean => "mean",
        }
    }
}

impl std::str::FromStr for CvModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(CvModel::Joint),
            "independent" => Ok(CvModel::Independent),
            "mean" => Ok(CvModel::Mean),
            other => Err(Error::validation(format!("unknown model '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub fold: usize,
    pub dim: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRow {
    pub model: String,
    pub dim: usize,
    pub metric: String,
    pub mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignificanceRow {
    pub model_a: String,
    pub model_b: String,
    pub dim: usize,
    pub metric: String,
    pub method: String,
    pub significant: bool,
    /// Which model the verdict favors, when significant.
    pub favored: Option<String>,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionRow {
    pub fold: usize,
    pub model: String,
    /// Selected iteration (global) or width/restart pair (time series).
    pub choice: String,
    /// Column permutation applied to the test estimates before metrics.
    pub alignment: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: String,
    pub folds: usize,
    pub dims: usize,
    pub models: Vec<String>,
    pub rows: Vec<MetricRow>,
    pub aggregates: Vec<AggregateRow>,
    pub significance: Vec<SignificanceRow>,
    pub selection: Vec<SelectionRow>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    /// Flat CSV: `model,fold,dim,metric,value`.
    pub fn csv_string(&self) -> String {
        let mut s = String::from("model,fold,dim,metric,value\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.model, r.fold, r.dim, r.metric, r.value
            ));
        }
        s
    }

    pub fn aggregate(&self, model: &str, dim: usize, metric: &str) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|a| a.model == model && a.dim == dim && a.metric == metric)
            .map(|a| a.mean)
    }
}

/// Disjoint test folds plus the train/validation split of each remainder.
#[derive(Debug, Clone)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffle instances with the plan seed and carve `folds` contiguous test
/// chunks; the last `validation_fraction` of each remaining pool becomes the
/// validation set.
pub fn cv_split(m: usize, plan: &CvPlan) -> Result<Vec<FoldSplit>> {
    plan.validate()?;
    if m < 2 * plan.folds {
        return Err(Error::validation(format!(
            "{m} instances cannot fill {} folds with at least 2 test instances each",
            plan.folds
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);

    let c = plan.folds;
    let mut splits = Vec::with_capacity(c);
    for fold in 0..c {
        let lo = fold * m / c;
        let hi = (fold + 1) * m / c;
        let test: Vec<usize> = order[lo..hi].to_vec();
        let pool: Vec<usize> = order[..lo].iter().chain(order[hi..].iter()).copied().collect();
        let n_val = ((pool.len() as f64) * plan.validation_fraction).round() as usize;
        let n_val = n_val.clamp(1, pool.len().saturating_sub(1));
        let train = pool[..pool.len() - n_val].to_vec();
        let val = pool[pool.len() - n_val..].to_vec();
        if train.is_empty() || val.is_empty() || test.len() < 2 {
            return Err(Error::validation(format!(
                "fold {fold} split degenerate: train {}, val {}, test {}",
                train.len(),
                val.len(),
                test.len()
            )));
        }
        splits.push(FoldSplit { train, val, test });
    }
    Ok(splits)
}

// ---------------------------------------------------------------------------
// Unseen-annotator fallback
// ---------------------------------------------------------------------------

/// Annotators absent from the training split get a pool-mean stand-in:
/// a scaled identity distortion (global) or an identity filter (time series)
/// and the pool-mean noise variance. Returns the filled-in parameters and the
/// affected annotator ids.
pub fn complete_global_annotators<T: Real>(
    params: &GlobalModelParams<T>,
    train: &GlobalDataset<T>,
) -> (GlobalModelParams<T>, Vec<usize>) {
    let per = train.instances_per_annotator();
    let missing: Vec<usize> = (0..train.k).filter(|&k| per[k].is_empty()).collect();
    if missing.is_empty() {
        return (params.clone(), missing);
    }
    let trained: Vec<usize> = (0..train.k).filter(|&k| !per[k].is_empty()).collect();
    let d = params.d();
    let mean_diag = trained
        .iter()
        .map(|&k| params.f[k].trace().to_f64_approx())
        .sum::<f64>()
        / (trained.len() * d) as f64;
    let mean_tau = trained
        .iter()
        .map(|&k| params.tau2[k].to_f64_approx())
        .sum::<f64>()
        / trained.len() as f64;
    let mut out = params.clone();
    for &k in &missing {
        out.f[k] = DMatrix::identity(d, d) * T::from_f64_approx(mean_diag);
        out.tau2[k] = T::from_f64_approx(mean_tau);
    }
    (out, missing)
}

pub fn complete_timeseries_annotators<T: Real>(
    params: &TimeSeriesModelParams<T>,
    train: &TimeSeriesDataset<T>,
) -> (TimeSeriesModelParams<T>, Vec<usize>) {
    let per = train.instances_per_annotator();
    let missing: Vec<usize> = (0..train.k).filter(|&k| per[k].is_empty()).collect();
    if missing.is_empty() {
        return (params.clone(), missing);
    }
    let trained: Vec<usize> = (0..train.k).filter(|&k| !per[k].is_empty()).collect();
    let mean_tau = trained
        .iter()
        .map(|&k| params.tau2[k].to_f64_approx())
        .sum::<f64>()
        / trained.len() as f64;
    let mut out = params.clone();
    let identity = FilterBank::<T>::identity(params.k(), params.d(), params.w());
    for &k in &missing {
        for dd in 0..params.d() {
            out.bank
                .set_coefficients(k, dd, identity.coefficients(k, dd).clone());
        }
        out.tau2[k] = T::from_f64_approx(mean_tau);
    }
    (out, missing)
}

// ---------------------------------------------------------------------------
// Global cross-validation
// ---------------------------------------------------------------------------

struct FoldEval<T: Real> {
    /// Aligned test estimates.
    est: DMatrix<T>,
    /// Aligned feature-only predictions (models with a predictor).
    pred: Option<DMatrix<T>>,
    choice: String,
    alignment: Vec<usize>,
}

fn gather_rows<T: Real>(truth: &DMatrix<T>, idx: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(idx.len(), truth.ncols(), |i, j| truth[(idx[i], j)])
}

fn estimates_to_matrix<T: Real>(
    posts: &[crate::types::PosteriorEstimate<T>],
    d: usize,
) -> DMatrix<T> {
    DMatrix::from_fn(posts.len(), d, |i, j| posts[i].mean[(0, j)])
}

fn mean_ccc_over_dims<T: Real>(est: &DMatrix<T>, truth: &DMatrix<T>) -> f64 {
    let d = truth.ncols();
    let mut acc = 0.0;
    for j in 0..d {
        let e: Vec<T> = est.column(j).iter().copied().collect();
        let t: Vec<T> = truth.column(j).iter().copied().collect();
        acc += ccc(&e, &t).map(|v| v.to_f64_approx()).unwrap_or(f64::NEG_INFINITY);
    }
    acc / d as f64
}

fn validation_score_global<T: Real>(
    params: &GlobalModelParams<T>,
    val_ds: &GlobalDataset<T>,
    val_truth: &DMatrix<T>,
    ridge: f64,
) -> Result<f64> {
    let posts = global::e_step(params, val_ds, ridge)?;
    let est = estimates_to_matrix(&posts, val_ds.d);
    let (_, aligned) = align_dimensions(&est, val_truth)?;
    Ok(mean_ccc_over_dims(&aligned, val_truth))
}

fn eval_global_fold<T: Real>(
    model: CvModel,
    dataset: &GlobalDataset<T>,
    truth: &DMatrix<T>,
    split: &FoldSplit,
    fit_cfg: &GlobalFitConfig,
    warnings: &mut Vec<String>,
    fold: usize,
) -> Result<FoldEval<T>> {
    let train_ds = dataset.subset(&split.train);
    let val_ds = dataset.subset(&split.val);
    let test_ds = dataset.subset(&split.test);
    let val_truth = gather_rows(truth, &split.val);
    let test_truth = gather_rows(truth, &split.test);
    let d = dataset.d;

    match model {
        CvModel::Mean => {
            let est = estimates_to_matrix(&baselines::mean_fuse_global(&test_ds), d);
            let (perm, aligned) = align_dimensions(&est, &test_truth)?;
            Ok(FoldEval {
                est: aligned,
                pred: None,
                choice: "mean".into(),
                alignment: perm,
            })
        }
        CvModel::Joint => {
            let mut cfg = fit_cfg.clone();
            cfg.record_snapshots = true;
            let (_, trace) = global::fit(&train_ds, &cfg, None)?;
            let snaps = trace.snapshots.expect("snapshots recorded");
            let mut best = (0usize, f64::NEG_INFINITY);
            for (i, snap) in snaps.iter().enumerate() {
                let (completed, _) = complete_global_annotators(snap, &train_ds);
                let score =
                    validation_score_global(&completed, &val_ds, &val_truth, cfg.ridge)?;
                if score > best.1 {
                    best = (i, score);
                }
            }
            let (params, missing) = complete_global_annotators(&snaps[best.0], &train_ds);
            if !missing.is_empty() {
                warnings.push(format!(
                    "fold {fold} joint: annotators {missing:?} unseen in training, pool-mean fallback used"
                ));
            }
            let posts = global::e_step(&params, &test_ds, cfg.ridge)?;
            let est = estimates_to_matrix(&posts, d);
            let (perm, aligned) = align_dimensions(&est, &test_truth)?;
            let pred = global::predict(&params, &test_ds.feature_matrix())?;
            let pred = permute_columns(&pred, &perm);
            Ok(FoldEval {
                est: aligned,
                pred: Some(pred),
                choice: format!("iteration={}", best.0),
                alignment: perm,
            })
        }
        CvModel::Independent => {
            let mut cfg = fit_cfg.clone();
            cfg.record_snapshots = true;
            let mut est = DMatrix::<T>::zeros(split.test.len(), d);
            let mut pred = DMatrix::<T>::zeros(split.test.len(), d);
            let mut picks = Vec::with_capacity(d);
            for dim in 0..d {
                let train_slice = train_ds.slice_dim(dim)?;
                let val_slice = val_ds.slice_dim(dim)?;
                let test_slice = test_ds.slice_dim(dim)?;
                let val_truth_d = DMatrix::from_fn(split.val.len(), 1, |i, _| val_truth[(i, dim)]);
                let (_, trace) = global::fit(&train_slice, &cfg, None)?;
                let snaps = trace.snapshots.expect("snapshots recorded");
                let mut best = (0usize, f64::NEG_INFINITY);
                for (i, snap) in snaps.iter().enumerate() {
                    let (completed, _) = complete_global_annotators(snap, &train_slice);
                    let score =
                        validation_score_global(&completed, &val_slice, &val_truth_d, cfg.ridge)?;
                    if score > best.1 {
                        best = (i, score);
                    }
                }
                let (params, missing) = complete_global_annotators(&snaps[best.0], &train_slice);
                if !missing.is_empty() {
                    warnings.push(format!(
                        "fold {fold} independent dim {dim}: annotators {missing:?} unseen in training, pool-mean fallback used"
                    ));
                }
                let posts = global::e_step(&params, &test_slice, cfg.ridge)?;
                for (i, post) in posts.iter().enumerate() {
                    est[(i, dim)] = post.mean[(0, 0)];
                }
                let p = global::predict(&params, &test_slice.feature_matrix())?;
                for i in 0..split.test.len() {
                    pred[(i, dim)] = p[(i, 0)];
                }
                picks.push(best.0.to_string());
            }
            let (perm, aligned) = align_dimensions(&est, &test_truth)?;
            let pred = permute_columns(&pred, &perm);
            Ok(FoldEval {
                est: aligned,
                pred: Some(pred),
                choice: format!("iterations=[{}]", picks.join(",")),
                alignment: perm,
            })
        }
    }
}

fn metric_value<T: Real>(
    kind: MetricKind,
    est: &DMatrix<T>,
    truth: &DMatrix<T>,
    dim: usize,
    context: &str,
    warnings: &mut Vec<String>,
) -> f64 {
    let e: Vec<T> = est.column(dim).iter().copied().collect();
    let t: Vec<T> = truth.column(dim).iter().copied().collect();
    match kind.eval(&e, &t) {
        Ok(v) => v.to_f64_approx(),
        Err(err) => {
            warnings.push(format!("{context}: {} flagged: {err}", kind.as_str()));
            0.0
        }
    }
}

/// C-fold cross-validation of the global models against known ground truth.
/// Within each fold the EM iteration with the best validation concordance is
/// selected per model; test estimates are fused from the test instances'
/// annotations under the selected parameters, and feature-only predictions
/// are reported separately. Significance between model pairs comes from
/// bootstrap resampling of the pooled test estimates.
pub fn run_cv_global<T: Real>(
    dataset: &GlobalDataset<T>,
    truth: &DMatrix<T>,
    models: &[CvModel],
    plan: &CvPlan,
    fit_cfg: &GlobalFitConfig,
    n_boot: usize,
    alpha: f64,
) -> Result<EvalReport> {
    if truth.nrows() != dataset.m() || truth.ncols() != dataset.d {
        return Err(Error::shape(format!(
            "truth is {}x{} but dataset needs {}x{}",
            truth.nrows(),
            truth.ncols(),
            dataset.m(),
            dataset.d
        )));
    }
    if models.is_empty() {
        return Err(Error::validation("no models to evaluate"));
    }
    let splits = cv_split(dataset.m(), plan)?;
    let d = dataset.d;

    let mut rows = Vec::new();
    let mut selection = Vec::new();
    let mut warnings = Vec::new();
    let mut pooled: BTreeMap<String, DMatrix<T>> = models
        .iter()
        .map(|m| (m.as_str().to_string(), DMatrix::zeros(dataset.m(), d)))
        .collect();

    for (fold, split) in splits.iter().enumerate() {
        let test_truth = gather_rows(truth, &split.test);
        for &model in models {
            let eval =
                eval_global_fold(model, dataset, truth, split, fit_cfg, &mut warnings, fold)?;
            let name = model.as_str().to_string();
            for dim in 0..d {
                for kind in [MetricKind::Ccc, MetricKind::Pearson] {
                    let ctx = format!("fold {fold} model {name} dim {dim}");
                    let value = metric_value(kind, &eval.est, &test_truth, dim, &ctx, &mut warnings);
                    rows.push(MetricRow {
                        model: name.clone(),
                        fold,
                        dim,
                        metric: kind.as_str().to_string(),
                        value,
                    });
                }
            }
            if let Some(pred) = &eval.pred {
                for dim in 0..d {
                    for kind in [MetricKind::Ccc, MetricKind::Pearson] {
                        let ctx = format!("fold {fold} model {name} dim {dim} predictor");
                        let value =
                            metric_value(kind, pred, &test_truth, dim, &ctx, &mut warnings);
                        rows.push(MetricRow {
                            model: name.clone(),
                            fold,
                            dim,
                            metric: format!("{}_predictor", kind.as_str()),
                            value,
                        });
                    }
                }
            }
            let slot = pooled.get_mut(&name).expect("model registered");
            for (i, &inst) in split.test.iter().enumerate() {
                for j in 0..d {
                    slot[(inst, j)] = eval.est[(i, j)];
                }
            }
            selection.push(SelectionRow {
                fold,
                model: name,
                choice: eval.choice,
                alignment: eval.alignment,
            });
        }
    }

    let aggregates = aggregate_rows(&rows);

    let mut significance = Vec::new();
    for i in 0..models.len() {
        for j in (i + 1)..models.len() {
            let a = models[i].as_str();
            let b = models[j].as_str();
            for kind in [MetricKind::Ccc, MetricKind::Pearson] {
                let outcomes = bootstrap_significance(
                    &pooled[a],
                    &pooled[b],
                    truth,
                    kind,
                    n_boot,
                    alpha,
                    plan.seed,
                )?;
                for o in outcomes {
                    significance.push(SignificanceRow {
                        model_a: a.to_string(),
                        model_b: b.to_string(),
                        dim: o.dim,
                        metric: kind.as_str().to_string(),
                        method: "bootstrap".to_string(),
                        significant: o.significant.is_some(),
                        favored: o.significant.map(|w| {
                            match w {
                                Winner::A => a.to_string(),
                                Winner::B => b.to_string(),
                            }
                        }),
                        detail: format!(
                            "wins_a={} wins_b={} resamples={} skipped={}",
                            o.wins_a, o.wins_b, o.resamples, o.skipped
                        ),
                    });
                }
            }
        }
    }

    Ok(EvalReport {
        setting: "global".into(),
        folds: plan.folds,
        dims: d,
        models: models.iter().map(|m| m.as_str().to_string()).collect(),
        rows,
        aggregates,
        significance,
        selection,
        warnings,
    })
}

fn aggregate_rows(rows: &[MetricRow]) -> Vec<AggregateRow> {
    let mut sums: BTreeMap<(String, usize, String), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = sums
            .entry((r.model.clone(), r.dim, r.metric.clone()))
            .or_insert((0.0, 0));
        e.0 += r.value;
        e.1 += 1;
    }
    sums.into_iter()
        .map(|((model, dim, metric), (sum, n))| AggregateRow {
            model,
            dim,
            metric,
            mean: sum / n as f64,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Time-series cross-validation
// ---------------------------------------------------------------------------

fn concat_frames<T: Real>(mats: &[DMatrix<T>]) -> DMatrix<T> {
    let rows: usize = mats.iter().map(|m| m.nrows()).sum();
    let d = mats.first().map(|m| m.ncols()).unwrap_or(0);
    let mut out = DMatrix::zeros(rows, d);
    let mut at = 0;
    for m in mats {
        out.rows_mut(at, m.nrows()).copy_from(m);
        at += m.nrows();
    }
    out
}

fn ts_modes_concat<T: Real>(
    params: &TimeSeriesModelParams<T>,
    ds: &TimeSeriesDataset<T>,
    solver_tol: f64,
) -> Result<DMatrix<T>> {
    let modes: Vec<DMatrix<T>> = ds
        .instances
        .iter()
        .map(|inst| timeseries::e_step_mode(params, inst, solver_tol))
        .collect::<Result<_>>()?;
    Ok(concat_frames(&modes))
}

fn eval_timeseries_fold<T>(
    model: CvModel,
    dataset: &TimeSeriesDataset<T>,
    truth: &[DMatrix<T>],
    split: &FoldSplit,
    w_grid: &[usize],
    fit_cfg: &TimeSeriesFitConfig,
    warnings: &mut Vec<String>,
    fold: usize,
) -> Result<FoldEval<T>>
where
    T: Real,
    StandardNormal: Distribution<T>,
{
    let train_ds = dataset.subset(&split.train);
    let val_ds = dataset.subset(&split.val);
    let test_ds = dataset.subset(&split.test);
    let val_truth = concat_frames(&split.val.iter().map(|&i| truth[i].clone()).collect::<Vec<_>>());
    let test_truth =
        concat_frames(&split.test.iter().map(|&i| truth[i].clone()).collect::<Vec<_>>());
    let d = dataset.d;

    match model {
        CvModel::Mean => {
            let fused = baselines::mean_fuse_timeseries(&test_ds);
            let est = concat_frames(&fused.iter().map(|e| e.mean.clone()).collect::<Vec<_>>());
            let (perm, aligned) = align_dimensions(&est, &test_truth)?;
            Ok(FoldEval {
                est: aligned,
                pred: None,
                choice: "mean".into(),
                alignment: perm,
            })
        }
        CvModel::Joint => {
            let per = train_ds.instances_per_annotator();
            let missing: Vec<usize> = (0..train_ds.k).filter(|&k| per[k].is_empty()).collect();
            if !missing.is_empty() {
                warnings.push(format!(
                    "fold {fold} joint: annotators {missing:?} unseen in training, pool-mean fallback used"
                ));
            }
            let mut best: Option<(usize, usize, f64, TimeSeriesModelParams<T>)> = None;
            for &w in w_grid {
                let mut cfg = fit_cfg.clone();
                cfg.w = w;
                let outcome = timeseries::fit(&train_ds, &cfg)?;
                for restart in &outcome.restarts {
                    let (params, _) =
                        complete_timeseries_annotators(&restart.params, &train_ds);
                    let val_est = ts_modes_concat(&params, &val_ds, cfg.solver_tol)?;
                    let (_, aligned) = align_dimensions(&val_est, &val_truth)?;
                    let score = mean_ccc_over_dims(&aligned, &val_truth);
                    if best.as_ref().map(|b| score > b.2).unwrap_or(true) {
                        best = Some((w, restart.restart, score, params));
                    }
                }
            }
            let (w, restart, _, params) = best.expect("at least one restart");
            let est = ts_modes_concat(&params, &test_ds, fit_cfg.solver_tol)?;
            let (perm, aligned) = align_dimensions(&est, &test_truth)?;
            Ok(FoldEval {
                est: aligned,
                pred: None,
                choice: format!("w={w} restart={restart}"),
                alignment: perm,
            })
        }
        CvModel::Independent => {
            let frames: usize = split.test.iter().map(|&i| truth[i].nrows()).sum();
            let mut est = DMatrix::<T>::zeros(frames, d);
            let mut picks = Vec::with_capacity(d);
            for dim in 0..d {
                let train_slice = train_ds.slice_dim(dim)?;
                let val_slice = val_ds.slice_dim(dim)?;
                let test_slice = test_ds.slice_dim(dim)?;
                let val_truth_d =
                    DMatrix::from_fn(val_truth.nrows(), 1, |i, _| val_truth[(i, dim)]);
                let mut best: Option<(usize, usize, f64, TimeSeriesModelParams<T>)> = None;
                for &w in w_grid {
                    let mut cfg = fit_cfg.clone();
                    cfg.w = w;
                    let outcome = timeseries::fit(&train_slice, &cfg)?;
                    for restart in &outcome.restarts {
                        let (params, _) =
                            complete_timeseries_annotators(&restart.params, &train_slice);
                        let val_est = ts_modes_concat(&params, &val_slice, cfg.solver_tol)?;
                        let score = mean_ccc_over_dims(&val_est, &val_truth_d);
                        if best.as_ref().map(|b| score > b.2).unwrap_or(true) {
                            best = Some((w, restart.restart, score, params.clone()));
                        }
                    }
                }
                let (w, restart, _, params) = best.expect("at least one restart");
                let col = ts_modes_concat(&params, &test_slice, fit_cfg.solver_tol)?;
                for i in 0..frames {
                    est[(i, dim)] = col[(i, 0)];
                }
                picks.push(format!("w={w} restart={restart}"));
            }
            let (perm, aligned) = align_dimensions(&est, &test_truth)?;
            Ok(FoldEval {
                est: aligned,
                pred: None,
                choice: format!("[{}]", picks.join("; ")),
                alignment: perm,
            })
        }
    }
}

/// C-fold cross-validation of the time-series models. Per fold, every width
/// in the grid is fit with the configured restarts and the (width, restart)
/// pair with the best validation concordance is selected; test metrics are
/// computed on the concatenated test series. Model pairs are compared with a
/// paired t-test over the per-fold metrics.
pub fn run_cv_timeseries<T>(
    dataset: &TimeSeriesDataset<T>,
    truth: &[DMatrix<T>],
    models: &[CvModel],
    plan: &CvPlan,
    w_grid: &[usize],
    fit_cfg: &TimeSeriesFitConfig,
    alpha: f64,
) -> Result<EvalReport>
where
    T: Real,
    StandardNormal: Distribution<T>,
{
    if truth.len() != dataset.m() {
        return Err(Error::shape("truth list not aligned with dataset instances"));
    }
    for (inst, tr) in dataset.instances.iter().zip(truth) {
        if tr.nrows() != inst.t() || tr.ncols() != dataset.d {
            return Err(Error::shape(format!(
                "instance {}: truth is {}x{} (expected {}x{})",
                inst.id,
                tr.nrows(),
                tr.ncols(),
                inst.t(),
                dataset.d
            )));
        }
    }
    if w_grid.is_empty() {
        return Err(Error::validation("width grid must not be empty"));
    }
    if w_grid.iter().any(|&w| w == 0 || w > dataset.min_t()) {
        return Err(Error::validation(format!(
            "width grid entries must lie in 1..={}",
            dataset.min_t()
        )));
    }
    if models.is_empty() {
        return Err(Error::validation("no models to evaluate"));
    }
    let splits = cv_split(dataset.m(), plan)?;
    let d = dataset.d;

    let mut rows = Vec::new();
    let mut selection = Vec::new();
    let mut warnings = Vec::new();
    // per (model, metric, dim): one value per fold, for the paired t-test
    let mut fold_vals: BTreeMap<(String, String, usize), Vec<f64>> = BTreeMap::new();

    for (fold, split) in splits.iter().enumerate() {
        let test_truth =
            concat_frames(&split.test.iter().map(|&i| truth[i].clone()).collect::<Vec<_>>());
        for &model in models {
            let eval = eval_timeseries_fold(
                model,
                dataset,
                truth,
                split,
                w_grid,
                fit_cfg,
                &mut warnings,
                fold,
            )?;
            let name = model.as_str().to_string();
            for dim in 0..d {
                for kind in [MetricKind::Ccc, MetricKind::Pearson] {
                    let ctx = format!("fold {fold} model {name} dim {dim}");
                    let value = metric_value(kind, &eval.est, &test_truth, dim, &ctx, &mut warnings);
                    rows.push(MetricRow {
                        model: name.clone(),
                        fold,
                        dim,
                        metric: kind.as_str().to_string(),
                        value,
                    });
                    fold_vals
                        .entry((name.clone(), kind.as_str().to_string(), dim))
                        .or_default()
                        .push(value);
                }
            }
            selection.push(SelectionRow {
                fold,
                model: name,
                choice: eval.choice,
                alignment: eval.alignment,
            });
        }
    }

    let aggregates = aggregate_rows(&rows);

    let mut significance = Vec::new();
    for i in 0..models.len() {
        for j in (i + 1)..models.len() {
            let a = models[i].as_str();
            let b = models[j].as_str();
            for kind in [MetricKind::Ccc, MetricKind::Pearson] {
                for dim in 0..d {
                    let va = &fold_vals[&(a.to_string(), kind.as_str().to_string(), dim)];
                    let vb = &fold_vals[&(b.to_string(), kind.as_str().to_string(), dim)];
                    let t = paired_t_test(va, vb, alpha)?;
                    significance.push(SignificanceRow {
                        model_a: a.to_string(),
                        model_b: b.to_string(),
                        dim,
                        metric: kind.as_str().to_string(),
                        method: "paired_t".to_string(),
                        significant: t.significant,
                        favored: t.favored.map(|w| match w {
                            Winner::A => a.to_string(),
                            Winner::B => b.to_string(),
                        }),
                        detail: format!("t={:.6} p={:.6}", t.t, t.p),
                    });
                }
            }
        }
    }

    Ok(EvalReport {
        setting: "timeseries".into(),
        folds: plan.folds,
        dims: d,
        models: models.iter().map(|m| m.as_str().to_string()).collect(),
        rows,
        aggregates,
        significance,
        selection,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Significance tests
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Winner {
    A,
    B,
}

#[derive(Debug, Clone)]
pub struct BootstrapOutcome {
    pub dim: usize,
    pub wins_a: usize,
    pub wins_b: usize,
    pub resamples: usize,
    pub skipped: usize,
    pub significant: Option<Winner>,
}

/// Resample the test predictions with replacement and declare significance
/// when one model's metric is higher in at least `1 - alpha` of the
/// resamples. Degenerate (constant) resamples are redrawn up to 10 times,
/// then skipped and counted.
pub fn bootstrap_significance<T: Real>(
    pred_a: &DMatrix<T>,
    pred_b: &DMatrix<T>,
    truth: &DMatrix<T>,
    metric: MetricKind,
    n_boot: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<BootstrapOutcome>> {
    if pred_a.shape() != truth.shape() || pred_b.shape() != truth.shape() {
        return Err(Error::shape("prediction and truth shapes disagree"));
    }
    let n = truth.nrows();
    if n < 2 {
        return Err(Error::shape("bootstrap needs at least 2 samples"));
    }
    let d = truth.ncols();
    let mut out = Vec::with_capacity(d);
    for dim in 0..d {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(dim as u64 + 1);
        let a_col: Vec<T> = pred_a.column(dim).iter().copied().collect();
        let b_col: Vec<T> = pred_b.column(dim).iter().copied().collect();
        let t_col: Vec<T> = truth.column(dim).iter().copied().collect();
        let mut wins_a = 0usize;
        let mut wins_b = 0usize;
        let mut skipped = 0usize;
        let mut done = 0usize;
        for _ in 0..n_boot {
            let mut success = false;
            for _attempt in 0..10 {
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let ra: Vec<T> = idx.iter().map(|&i| a_col[i]).collect();
                let rb: Vec<T> = idx.iter().map(|&i| b_col[i]).collect();
                let rt: Vec<T> = idx.iter().map(|&i| t_col[i]).collect();
                let (ma, mb) = match (metric.eval(&ra, &rt), metric.eval(&rb, &rt)) {
                    (Ok(a), Ok(b)) => (a, b),
                    _ => continue,
                };
                if ma > mb {
                    wins_a += 1;
                } else if mb > ma {
                    wins_b += 1;
                }
                success = true;
                break;
            }
            if success {
                done += 1;
            } else {
                skipped += 1;
            }
        }
        let threshold = (1.0 - alpha) * done as f64;
        let significant = if done == 0 {
            None
        } else if wins_a as f64 >= threshold {
            Some(Winner::A)
        } else if wins_b as f64 >= threshold {
            Some(Winner::B)
        } else {
            None
        };
        out.push(BootstrapOutcome {
            dim,
            wins_a,
            wins_b,
            resamples: done,
            skipped,
            significant,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct TTestOutcome {
    pub t: f64,
    pub p: f64,
    pub significant: bool,
    pub favored: Option<Winner>,
}

/// Two-sided paired t-test on per-fold metric values. With zero variance of
/// the differences the verdict falls back to the sign: significant with p = 0
/// when every difference shares one nonzero sign, not significant otherwise.
pub fn paired_t_test(per_fold_a: &[f64], per_fold_b: &[f64], alpha: f64) -> Result<TTestOutcome> {
    if per_fold_a.len() != per_fold_b.len() {
        return Err(Error::shape("per-fold samples have different lengths"));
    }
    let c = per_fold_a.len();
    if c < 2 {
        return Err(Error::shape("paired t-test needs at least 2 folds"));
    }
    let diffs: Vec<f64> = per_fold_a
        .iter()
        .zip(per_fold_b)
        .map(|(a, b)| a - b)
        .collect();
    let mean = diffs.iter().sum::<f64>() / c as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (c - 1) as f64;

    if var < 1e-24 {
        let all_pos = diffs.iter().all(|&d| d > 0.0);
        let all_neg = diffs.iter().all(|&d| d < 0.0);
        if all_pos || all_neg {
            return Ok(TTestOutcome {
                t: if all_pos { f64::INFINITY } else { f64::NEG_INFINITY },
                p: 0.0,
                significant: true,
                favored: Some(if all_pos { Winner::A } else { Winner::B }),
            });
        }
        return Ok(TTestOutcome {
            t: 0.0,
            p: 1.0,
            significant: false,
            favored: None,
        });
    }

    let t = mean / (var.sqrt() / (c as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (c - 1) as f64)
        .map_err(|e| Error::numeric(format!("t-distribution: {e}")))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    let significant = p < alpha;
    Ok(TTestOutcome {
        t,
        p,
        significant,
        favored: if significant {
            Some(if mean > 0.0 { Winner::A } else { Winner::B })
        } else {
            None
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ccc_tabulated_examples() {
        let x = [1.0, 2.0, 3.0];
        assert_relative_eq!(ccc(&x, &[1.0, 2.0, 3.0]).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(ccc(&x, &[3.0, 2.0, 1.0]).unwrap(), -1.0, epsilon = 1e-12);
        assert_relative_eq!(
            ccc(&x, &[2.0, 3.0, 4.0]).unwrap(),
            4.0 / 7.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn ccc_edge_cases() {
        assert_eq!(ccc(&[2.0, 2.0], &[2.0, 2.0]).unwrap(), 1.0);
        assert!(ccc(&[1.0, 2.0], &[1.0]).is_err());
        assert!(ccc(&[1.0], &[1.0]).is_err());
        // shift invariance
        let x = [0.3, -1.0, 0.5, 2.0];
        let y = [0.1, -0.6, 0.9, 1.4];
        let shifted: Vec<f64> = x.iter().map(|v| v + 10.0).collect();
        let yshifted: Vec<f64> = y.iter().map(|v| v + 10.0).collect();
        assert_relative_eq!(
            ccc(&x, &y).unwrap(),
            ccc(&shifted, &yshifted).unwrap(),
            epsilon = 1e-12
        );
        // symmetry
        assert_relative_eq!(ccc(&x, &y).unwrap(), ccc(&y, &x).unwrap(), epsilon = 1e-14);
    }

    #[test]
    fn pearson_tabulated_examples() {
        let x = [1.0, 2.0, 3.0];
        assert_relative_eq!(pearson(&x, &[2.0, 4.0, 6.0]).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(
            pearson(&x, &[-1.0, -2.0, -3.0]).unwrap(),
            -1.0,
            epsilon = 1e-12
        );
        assert!(pearson(&x, &[5.0, 5.0, 5.0]).is_err());
    }

    #[test]
    fn ccc_bounded_by_pearson_magnitude() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let n = rng.random_range(3..30usize);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            if let (Ok(c), Ok(r)) = (ccc(&x, &y), pearson(&x, &y)) {
                assert!(
                    c.abs() <= r.abs() + 1e-12,
                    "|ccc| = {} exceeded |pearson| = {}",
                    c.abs(),
                    r.abs()
                );
                assert!(c <= r.abs() + 1e-12);
            }
        }
    }

    #[test]
    fn alignment_swaps_crossed_columns() {
        // est column 0 tracks ref column 1 and vice versa
        let n = 40;
        let r0: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let r1: Vec<f64> = (0..n).map(|i| (i as f64 * 0.61).cos()).collect();
        let reference = DMatrix::from_fn(n, 2, |i, j| if j == 0 { r0[i] } else { r1[i] });
        let estimates = DMatrix::from_fn(n, 2, |i, j| {
            if j == 0 {
                r1[i] * 0.9 + 0.01 * (i as f64 * 1.7).sin()
            } else {
                r0[i] * 1.1 + 0.01 * (i as f64 * 2.3).cos()
            }
        });
        let (perm, aligned) = align_dimensions(&estimates, &reference).unwrap();
        assert_eq!(perm, vec![1, 0]);
        assert_eq!(aligned.column(0), estimates.column(1));
    }

    #[test]
    fn alignment_identity_for_matching_columns() {
        let n = 25;
        let reference = DMatrix::from_fn(n, 3, |i, j| ((i * (j + 2)) as f64 * 0.31).sin());
        let (perm, aligned) = align_dimensions(&reference, &reference).unwrap();
        assert_eq!(perm, vec![0, 1, 2]);
        assert_eq!(aligned, reference);
    }

    #[test]
    fn alignment_composes_to_identity() {
        let n = 30;
        let reference = DMatrix::from_fn(n, 3, |i, j| ((i + 1) as f64 * (j as f64 + 0.5)).sin());
        let shuffled = permute_columns(&reference, &[2, 0, 1]);
        let (perm, aligned) = align_dimensions(&shuffled, &reference).unwrap();
        // applying the found permutation recovers the reference ordering
        assert_eq!(aligned, reference);
        let mut composed: Vec<usize> = vec![0; 3];
        for (j, &p) in perm.iter().enumerate() {
            composed[j] = [2usize, 0, 1][p];
        }
        assert_eq!(composed, vec![0, 1, 2]);
    }

    #[test]
    fn alignment_never_hurts_summed_pearson() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = 30;
            let d = rng.random_range(2..4usize);
            let est = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
            let reference = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
            let (_, aligned) = align_dimensions(&est, &reference).unwrap();
            let sum = |m: &DMatrix<f64>| -> f64 {
                (0..d)
                    .map(|j| {
                        let a: Vec<f64> = m.column(j).iter().copied().collect();
                        let b: Vec<f64> = reference.column(j).iter().copied().collect();
                        pearson(&a, &b).unwrap_or(0.0)
                    })
                    .sum()
            };
            assert!(sum(&aligned) >= sum(&est) - 1e-12);
        }
    }

    #[test]
    fn cv_split_partitions_instances() {
        let plan = CvPlan {
            folds: 4,
            validation_fraction: 0.2,
            seed: 3,
        };
        let splits = cv_split(23, &plan).unwrap();
        let mut seen = vec![false; 23];
        for s in &splits {
            for &i in &s.test {
                assert!(!seen[i], "instance {i} in two test folds");
                seen[i] = true;
            }
            let mut all: Vec<usize> = s
                .train
                .iter()
                .chain(s.val.iter())
                .chain(s.test.iter())
                .copied()
                .collect();
            all.sort_unstable();
            all.dedup();
            assert_eq!(all.len(), 23, "train/val/test overlap within a fold");
        }
        assert!(seen.iter().all(|&b| b), "some instance never tested");
    }

    #[test]
    fn paired_t_matches_hand_computation() {
        let out = paired_t_test(&[0.5, 0.7, 0.9], &[0.4, 0.5, 0.6], 0.05).unwrap();
        assert_relative_eq!(out.t, 0.2 / (0.1 / 3.0_f64.sqrt()), epsilon = 1e-9);
    }

    #[test]
    fn paired_t_zero_variance_rules() {
        let same = paired_t_test(&[0.5, 0.6], &[0.5, 0.6], 0.05).unwrap();
        assert!(!same.significant);
        let shifted = paired_t_test(&[0.6, 0.7, 0.8, 0.9, 1.0], &[0.5, 0.6, 0.7, 0.8, 0.9], 0.05)
            .unwrap();
        assert!(shifted.significant);
        assert_eq!(shifted.p, 0.0);
        assert_eq!(shifted.favored, Some(Winner::A));
    }

    #[test]
    fn bootstrap_identical_predictions_never_significant() {
        let truth = DMatrix::from_fn(30, 1, |i, _| (i as f64 * 0.3).sin());
        let pred = truth.clone();
        let out =
            bootstrap_significance(&pred, &pred, &truth, MetricKind::Ccc, 200, 0.05, 1).unwrap();
        assert!(out[0].significant.is_none());
    }

    #[test]
    fn bootstrap_separates_good_from_noisy() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 60;
        let truth = DMatrix::from_fn(n, 1, |i, _| (i as f64 * 0.21).sin());
        let good = truth.clone();
        let noisy = DMatrix::from_fn(n, 1, |i, _| {
            truth[(i, 0)] + rng.random_range(-2.0..2.0)
        });
        let out =
            bootstrap_significance(&good, &noisy, &truth, MetricKind::Ccc, 500, 0.05, 2).unwrap();
        assert_eq!(out[0].significant, Some(Winner::A));
    }

    #[test]
    fn bootstrap_deterministic_given_seed() {
        let truth = DMatrix::from_fn(25, 2, |i, j| ((i + j) as f64 * 0.4).cos());
        let a = DMatrix::from_fn(25, 2, |i, j| truth[(i, j)] + 0.1 * ((i * 3 + j) as f64).sin());
        let b = DMatrix::from_fn(25, 2, |i, j| truth[(i, j)] - 0.2 * ((i * 5 + j) as f64).cos());
        let r1 = bootstrap_significance(&a, &b, &truth, MetricKind::Pearson, 300, 0.05, 7).unwrap();
        let r2 = bootstrap_significance(&a, &b, &truth, MetricKind::Pearson, 300, 0.05, 7).unwrap();
        for (x, y) in r1.iter().zip(&r2) {
            assert_eq!(x.wins_a, y.wins_a);
            assert_eq!(x.wins_b, y.wins_b);
        }
    }

    #[test]
    fn global_cv_report_is_complete_and_reproducible() {
        let spec = crate::synthetic::GlobalSynthSpec {
            m: 24,
            p: 4,
            d: 2,
            k: 4,
            coverage: crate::synthetic::Coverage::Full,
            sigma2: 0.1,
            tau2: 0.1,
            fk_mode: crate::synthetic::FkMode::UniformRandom,
            seed: 17,
        };
        let synth = crate::synthetic::gen_global::<f64>(&spec).unwrap();
        let plan = CvPlan {
            folds: 2,
            validation_fraction: 0.2,
            seed: 1,
        };
        let cfg = GlobalFitConfig {
            max_iters: 8,
            ..GlobalFitConfig::default()
        };
        let models = [CvModel::Joint, CvModel::Mean];
        let r1 = run_cv_global(&synth.dataset, &synth.truth, &models, &plan, &cfg, 100, 0.05)
            .unwrap();
        let r2 = run_cv_global(&synth.dataset, &synth.truth, &models, &plan, &cfg, 100, 0.05)
            .unwrap();
        assert_eq!(
            serde_json::to_string(&r1).unwrap(),
            serde_json::to_string(&r2).unwrap()
        );
        let ccc_rows = r1.rows.iter().filter(|r| r.metric == "ccc").count();
        assert_eq!(ccc_rows, 2 * 2 * 2, "folds x dims x models");
        assert!(r1.rows.iter().all(|r| (-1.0..=1.0).contains(&r.value) || r.metric.ends_with("_predictor")));
    }
}

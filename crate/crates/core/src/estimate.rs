//! Plug-in, one-step and cross-fit one-step estimators.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::catalog::{Bundle, CatalogEntry, Features, IfValue, NuisanceKind, NuisanceSpec, Target};
use crate::data::{Dataset, Matrix};
use crate::error::{Error, Result};
use crate::nuisance::{clamp_fn, fit_density_spec, fit_regression, ClampCounter, LearnerSpec, Tuning};
use crate::population::Population;

/// Smallest admissible `|denominator|` for ratio functionals.
pub const DENOMINATOR_FLOOR: f64 = 0.05;
pub const DEFAULT_FOLDS: usize = 5;

/// Random partition of `0..n` into `k` folds whose sizes differ by at most one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FoldPlan {
    k: usize,
    seed: u64,
    assignment: Vec<usize>,
}

impl FoldPlan {
    /// Shuffle the rows with a seeded generator and deal them round-robin.
    pub fn new(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
        if k < 2 || k > n {
            return Err(Error::KOutOfRange { k, n });
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut assignment = vec![0; n];
        for (pos, &row) in order.iter().enumerate() {
            assignment[row] = pos % k;
        }
        Ok(FoldPlan { k, seed, assignment })
    }

    /// Use an explicit assignment (e.g. a permuted copy of another plan).
    pub fn from_assignment(k: usize, assignment: Vec<usize>) -> Result<FoldPlan> {
        let n = assignment.len();
        if k < 2 || k > n || assignment.iter().any(|&f| f >= k) {
            return Err(Error::KOutOfRange { k, n });
        }
        Ok(FoldPlan { k, seed: 0, assignment })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// `(training rows, evaluation rows)` for fold `f`, each ascending.
    pub fn split(&self, f: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.n()).partition(|&i| self.assignment[i] != f)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.assignment {
            s[f] += 1;
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Plugin,
    Onestep,
    Crossfit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub n_k: usize,
    pub psi_k: f64,
    /// Tuning actually used for each nuisance in this fold.
    pub chosen: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimate {
    pub method: EstimatorKind,
    pub psi_hat: f64,
    pub if_variance: Option<f64>,
    pub se: Option<f64>,
    pub n: usize,
    pub ci: Option<(f64, f64)>,
    pub level: f64,
    pub per_fold: Vec<FoldSummary>,
    pub clamp_events: usize,
    /// Centered influence-function values, in row order.
    #[serde(skip)]
    pub if_values: Vec<f64>,
}

/// Two-sided standard normal quantile for a confidence level.
pub fn z_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfig(format!("confidence level {level} outside (0, 1)")));
    }
    Ok(Normal::standard().inverse_cdf(1.0 - (1.0 - level) / 2.0))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn finish(
    method: EstimatorKind,
    psi_hat: f64,
    centered: Vec<f64>,
    level: f64,
    per_fold: Vec<FoldSummary>,
    clamp_events: usize,
) -> Result<Estimate> {
    let n = centered.len();
    let var = centered.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let se = (var / n as f64).sqrt();
    let z = z_quantile(level)?;
    Ok(Estimate {
        method,
        psi_hat,
        if_variance: Some(var),
        se: Some(se),
        n,
        ci: Some((psi_hat - z * se, psi_hat + z * se)),
        level,
        per_fold,
        clamp_events,
        if_values: centered,
    })
}

/// Uncentered IF values (or numerator/denominator pairs) on the given rows.
fn if_rows(entry: &CatalogEntry, bundle: &Bundle, data: &Dataset, rows: &[usize]) -> Result<Vec<IfValue>> {
    rows.iter().map(|&i| entry.eval_uncentered_if(bundle, &data.obs(i))).collect()
}

fn check_denominator(den: f64) -> Result<()> {
    if den.abs() <= DENOMINATOR_FLOOR || den.is_nan() {
        return Err(Error::WeakDenominator {
            value: den,
            floor: DENOMINATOR_FLOOR,
        });
    }
    Ok(())
}

fn split_pairs(values: &[IfValue]) -> (Vec<f64>, Vec<f64>) {
    values
        .iter()
        .map(|v| match *v {
            IfValue::Linear(x) => (x, f64::NAN),
            IfValue::Ratio { num, den } => (num, den),
        })
        .unzip()
}

/// `psi(P_hat)`: the empirical mean of the outcome-model term, `int p_hat^2`
/// for the density entry, and the ratio of plug-ins for ratio entries.
pub fn plugin_estimate(entry: &CatalogEntry, bundle: &Bundle, data: &Dataset) -> Result<Estimate> {
    data.validate()?;
    let n = data.n();
    let avg = |e: &CatalogEntry| -> Result<f64> {
        let terms = (0..n).map(|i| e.plugin_term(bundle, &data.obs(i))).collect::<Result<Vec<_>>>()?;
        Ok(mean(&terms))
    };
    let psi_hat = match (entry.components(), entry.functional) {
        (Some((num, den)), _) => {
            let d = avg(&den)?;
            check_denominator(d)?;
            avg(&num)? / d
        }
        (None, crate::catalog::Functional::ExpectedDensity) => bundle.scalar("int_p2")?,
        _ => avg(entry)?,
    };
    Ok(Estimate {
        method: EstimatorKind::Plugin,
        psi_hat,
        if_variance: None,
        se: None,
        n,
        ci: None,
        level: f64::NAN,
        per_fold: Vec::new(),
        clamp_events: 0,
        if_values: Vec::new(),
    })
}

/// Mean of the uncentered IF over all rows with fixed nuisances.
pub fn onestep_estimate(entry: &CatalogEntry, bundle: &Bundle, data: &Dataset, level: f64) -> Result<Estimate> {
    data.validate()?;
    let rows: Vec<usize> = (0..data.n()).collect();
    let values = if_rows(entry, bundle, data, &rows)?;
    let (num, den) = split_pairs(&values);
    if entry.is_ratio() {
        let (nh, dh) = (mean(&num), mean(&den));
        check_denominator(dh)?;
        let psi = nh / dh;
        let centered = num.iter().zip(&den).map(|(a, b)| (a - nh - psi * (b - dh)) / dh).collect();
        finish(EstimatorKind::Onestep, psi, centered, level, Vec::new(), 0)
    } else {
        let psi = mean(&num);
        let centered = num.iter().map(|v| v - psi).collect();
        finish(EstimatorKind::Onestep, psi, centered, level, Vec::new(), 0)
    }
}

/// Learner assignment for the nuisances of an entry.
#[derive(Debug, Clone)]
pub struct LearnerSet {
    pub default_regression: LearnerSpec,
    pub default_density: LearnerSpec,
    pub per_name: BTreeMap<String, LearnerSpec>,
    /// True nuisances for `oracle` learners.
    pub oracle: Option<Bundle>,
}

impl Default for LearnerSet {
    fn default() -> Self {
        LearnerSet {
            default_regression: LearnerSpec::Knn(Tuning::Cv {
                folds: 5,
                grid: vec![5.0, 10.0, 25.0, 50.0, 100.0],
            }),
            default_density: LearnerSpec::Kde(Tuning::Silverman),
            per_name: BTreeMap::new(),
            oracle: None,
        }
    }
}

impl LearnerSet {
    pub fn uniform(spec: LearnerSpec) -> LearnerSet {
        LearnerSet {
            default_regression: spec,
            ..Default::default()
        }
    }

    pub fn with(mut self, name: &str, spec: LearnerSpec) -> LearnerSet {
        self.per_name.insert(name.into(), spec);
        self
    }

    pub fn with_oracle(mut self, truth: Bundle) -> LearnerSet {
        self.oracle = Some(truth);
        self
    }

    pub fn spec_for(&self, n: &NuisanceSpec) -> &LearnerSpec {
        self.per_name.get(n.name).unwrap_or(match n.kind {
            NuisanceKind::Density => &self.default_density,
            _ => &self.default_regression,
        })
    }

    /// Learner text per manifest entry.
    pub fn describe(&self, entry: &CatalogEntry) -> BTreeMap<String, String> {
        entry.manifest.iter().map(|n| (n.name.to_string(), self.spec_for(n).to_string())).collect()
    }
}

fn features(data: &Dataset, f: Features) -> Result<Matrix> {
    match f {
        Features::X => Ok(data.x.clone()),
        Features::XX2 => {
            let x2 = data.x2.as_ref().ok_or_else(|| Error::MissingColumn("x2".into()))?;
            data.x.hstack(x2)
        }
    }
}

/// Fit every nuisance of `entry` on `train`, in manifest order.
pub fn fit_bundle(
    entry: &CatalogEntry,
    learners: &LearnerSet,
    train: &Dataset,
    seed: u64,
    counter: &ClampCounter,
) -> Result<(Bundle, BTreeMap<String, String>)> {
    let mut bundle = Bundle::new();
    let mut chosen = BTreeMap::new();
    for spec in &entry.manifest {
        let learner = learners.spec_for(spec);
        if *learner == LearnerSpec::Oracle {
            let truth = learners
                .oracle
                .as_ref()
                .ok_or_else(|| Error::InvalidLearner(format!("no oracle available for `{}`", spec.name)))?;
            bundle.insert(spec.name, truth.get(spec.name)?.clone());
            if spec.kind == NuisanceKind::Density {
                bundle.insert_scalar("int_p2", truth.scalar("int_p2")?);
            }
            chosen.insert(spec.name.to_string(), "oracle".into());
            continue;
        }
        let rows: Vec<usize> = (0..train.n())
            .filter(|&i| spec.subset.iter().all(|&(c, v)| train.column(c).map(|col| col[i] == v).unwrap_or(false)))
            .collect();
        for &(c, _) in spec.subset {
            train.column(c)?;
        }
        if rows.is_empty() {
            return Err(Error::EmptyData);
        }
        if spec.kind == NuisanceKind::Density {
            let z: Vec<f64> = rows.iter().map(|&i| train.x.row(i)[0]).collect();
            let fit = Arc::new(fit_density_spec(learner, &z, seed)?);
            bundle.insert_scalar("int_p2", fit.integral_sq());
            chosen.insert(spec.name.to_string(), format!("kde(h={})", fit.bandwidth()));
            bundle.insert(spec.name, Arc::new(move |x: &[f64]| fit.predict(x[0])));
            continue;
        }
        let x = features(train, spec.features)?.select(&rows);
        let y: Vec<f64> = match spec.target {
            Target::Column(c) => {
                let col = train.column(c)?;
                rows.iter().map(|&i| col[i]).collect()
            }
            Target::Fitted(name) => {
                let f = bundle.get(name)?.clone();
                let full = features(train, Features::XX2)?;
                rows.iter().map(|&i| f(full.row(i))).collect()
            }
            Target::Density => unreachable!("density handled above"),
        };
        let fitted = fit_regression(learner, &x, &y, seed)?;
        chosen.insert(spec.name.to_string(), fitted.chosen);
        let f = match spec.kind {
            NuisanceKind::ConditionalProbability => clamp_fn(fitted.f, spec.range.0, spec.range.1, counter.clone()),
            _ => fitted.f,
        };
        bundle.insert(spec.name, f);
    }
    Ok((bundle, chosen))
}

/// Fit nuisances on all rows and take the one-step on the same rows.
/// Diagnostics only: without sample splitting the usual guarantees need
/// Donsker-type conditions.
pub fn insample_estimate(
    entry: &CatalogEntry,
    learners: &LearnerSet,
    data: &Dataset,
    seed: u64,
    level: f64,
) -> Result<(Estimate, Bundle)> {
    data.validate()?;
    let counter = ClampCounter::default();
    let (bundle, chosen) = fit_bundle(entry, learners, data, seed, &counter).map_err(|e| wrap_fold(0, e))?;
    let mut est = onestep_estimate(entry, &bundle, data, level)?;
    est.clamp_events = counter.get();
    est.per_fold = vec![FoldSummary {
        fold: 0,
        n_k: data.n(),
        psi_k: est.psi_hat,
        chosen,
    }];
    Ok((est, bundle))
}

fn wrap_fold(fold: usize, e: Error) -> Error {
    match e {
        Error::KTooLarge { .. } => Error::FoldTooSmallForLearner {
            fold,
            source: Box::new(e),
        },
        other => other,
    }
}

struct FoldOutput {
    rows: Vec<usize>,
    values: Vec<IfValue>,
    bundle: Bundle,
    chosen: BTreeMap<String, String>,
    clamps: usize,
}

fn run_fold(entry: &CatalogEntry, learners: &LearnerSet, data: &Dataset, plan: &FoldPlan, fold: usize) -> Result<FoldOutput> {
    let (train, test) = plan.split(fold);
    let counter = ClampCounter::default();
    let (bundle, chosen) = fit_bundle(entry, learners, &data.subset(&train), plan.seed() ^ fold as u64, &counter)
        .map_err(|e| wrap_fold(fold, e))?;
    let values = if_rows(entry, &bundle, data, &test)?;
    Ok(FoldOutput {
        rows: test,
        values,
        bundle,
        chosen,
        clamps: counter.get(),
    })
}

/// Full cross-fit output: the estimate, the fitted bundle of every fold and
/// the fold plan that was used.
#[derive(Debug, Clone)]
pub struct CrossFit {
    pub estimate: Estimate,
    pub bundles: Vec<Bundle>,
    pub plan: FoldPlan,
}

/// Cross-fit one-step estimate with `k` folds.
pub fn crossfit_estimate(
    entry: &CatalogEntry,
    learners: &LearnerSet,
    data: &Dataset,
    k: usize,
    seed: u64,
    level: f64,
) -> Result<Estimate> {
    Ok(crossfit_detailed(entry, learners, data, k, seed, level)?.estimate)
}

pub fn crossfit_detailed(
    entry: &CatalogEntry,
    learners: &LearnerSet,
    data: &Dataset,
    k: usize,
    seed: u64,
    level: f64,
) -> Result<CrossFit> {
    data.validate()?;
    z_quantile(level)?;
    let plan = FoldPlan::new(data.n(), k, seed)?;
    crossfit_with_plan(entry, learners, data, plan, level)
}

/// Cross-fit with an explicit fold plan.
pub fn crossfit_with_plan(
    entry: &CatalogEntry,
    learners: &LearnerSet,
    data: &Dataset,
    plan: FoldPlan,
    level: f64,
) -> Result<CrossFit> {
    if plan.n() != data.n() {
        return Err(Error::InvalidConfig("fold plan does not match the data".into()));
    }
    #[cfg(feature = "parallel")]
    let outputs: Vec<Result<FoldOutput>> = {
        use rayon::prelude::*;
        (0..plan.k()).into_par_iter().map(|f| run_fold(entry, learners, data, &plan, f)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let outputs: Vec<Result<FoldOutput>> = (0..plan.k()).map(|f| run_fold(entry, learners, data, &plan, f)).collect();
    let outputs = outputs.into_iter().collect::<Result<Vec<_>>>()?;

    let n = data.n();
    let weight = |o: &FoldOutput| o.rows.len() as f64 / n as f64;
    let clamps = outputs.iter().map(|o| o.clamps).sum();
    let mut per_fold = Vec::with_capacity(outputs.len());
    let mut centered = vec![0.0; n];
    let estimate = if entry.is_ratio() {
        let (mut nh, mut dh) = (0.0, 0.0);
        let mut fold_means = Vec::new();
        for o in &outputs {
            let (num, den) = split_pairs(&o.values);
            let (nk, dk) = (mean(&num), mean(&den));
            nh += weight(o) * nk;
            dh += weight(o) * dk;
            fold_means.push((nk, dk));
        }
        check_denominator(dh)?;
        let psi = nh / dh;
        for (o, (nk, dk)) in outputs.iter().zip(fold_means) {
            let (num, den) = split_pairs(&o.values);
            for (j, &i) in o.rows.iter().enumerate() {
                centered[i] = (num[j] - nh - psi * (den[j] - dh)) / dh;
            }
            per_fold.push(FoldSummary {
                fold: per_fold.len(),
                n_k: o.rows.len(),
                psi_k: nk / dk,
                chosen: o.chosen.clone(),
            });
        }
        finish(EstimatorKind::Crossfit, psi, centered, level, per_fold, clamps)?
    } else {
        let mut psi = 0.0;
        let mut fold_vals = Vec::new();
        for o in &outputs {
            let (v, _) = split_pairs(&o.values);
            let psi_k = mean(&v);
            psi += weight(o) * psi_k;
            per_fold.push(FoldSummary {
                fold: per_fold.len(),
                n_k: o.rows.len(),
                psi_k,
                chosen: o.chosen.clone(),
            });
            fold_vals.push(v);
        }
        for (o, v) in outputs.iter().zip(&fold_vals) {
            for (j, &i) in o.rows.iter().enumerate() {
                centered[i] = v[j] - psi;
            }
        }
        finish(EstimatorKind::Crossfit, psi, centered, level, per_fold, clamps)?
    };
    Ok(CrossFit {
        estimate,
        bundles: outputs.into_iter().map(|o| o.bundle).collect(),
        plan,
    })
}

/// Error decomposition `psi_hat - psi = S* + T1 + T2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Decomposition {
    pub error: f64,
    /// `(P_n - P) phi(.; P)` with exact nuisances.
    pub s_star: f64,
    /// Empirical-process term, the residual of the other two.
    pub t1: f64,
    /// Fold-weighted remainder.
    pub t2: f64,
}

/// Split the error of a (cross-fit) one-step into its three terms. `bundles`
/// and `weights` are per fold (a single bundle with weight 1 for a plain
/// one-step).
pub fn decompose_error(
    entry: &CatalogEntry,
    est: &Estimate,
    bundles: &[Bundle],
    weights: &[f64],
    data: &Dataset,
    pop: &dyn Population,
    truth: &Bundle,
) -> Result<Decomposition> {
    if entry.is_ratio() {
        return Err(Error::TruthUnavailable(format!(
            "`{}` is a ratio; decomposition is defined for linear entries",
            entry.id
        )));
    }
    let psi = entry.truth(pop, truth)?;
    let n = data.n();
    let exact = (0..n).map(|i| entry.uncentered(truth, &data.obs(i))).collect::<Result<Vec<_>>>()?;
    let s_star = mean(&exact) - psi;
    let mut t2 = 0.0;
    for (b, w) in bundles.iter().zip(weights) {
        t2 += w * entry.remainder(b, truth, pop)?;
    }
    let error = est.psi_hat - psi;
    Ok(Decomposition {
        error,
        s_star,
        t1: error - s_star - t2,
        t2,
    })
}

/// Fold weights `N_k / n` of a plan.
pub fn fold_weights(plan: &FoldPlan) -> Vec<f64> {
    let n = plan.n() as f64;
    plan.sizes().into_iter().map(|s| s as f64 / n).collect()
}

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::dgp::{get_dgp, Dgp};
use super::{ks_normal, KsResult};
use crate::catalog::{get_entry_with_policy, Bundle, CatalogEntry, Functional, NuisanceKind, Target, DEFAULT_POLICY_Q};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimate::{crossfit_detailed, decompose_error, fold_weights, CrossFit, LearnerSet, DEFAULT_FOLDS};
use crate::nuisance::{parse_learner, LearnerSpec};
use crate::population::Population;

/// Which nuisances a study deliberately misspecifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Broken {
    #[default]
    None,
    /// Outcome regressions replaced by the constant 0.
    Mu,
    /// Propensities replaced by the constant 0.5.
    Pi,
    Both,
}

impl std::str::FromStr for Broken {
    type Err = Error;

    fn from_str(s: &str) -> Result<Broken> {
        match s {
            "none" => Ok(Broken::None),
            "mu" => Ok(Broken::Mu),
            "pi" => Ok(Broken::Pi),
            "both" => Ok(Broken::Both),
            other => Err(Error::InvalidConfig(format!("unknown misspecification `{other}`"))),
        }
    }
}

fn default_folds() -> usize {
    DEFAULT_FOLDS
}

fn default_level() -> f64 {
    0.95
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub dgp: String,
    pub functional: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_q: Option<f64>,
    /// Learner text per nuisance name; `default` and `density` set the
    /// fallbacks and `oracle` injects the true nuisance.
    #[serde(default)]
    pub learners: BTreeMap<String, String>,
    pub n: Vec<usize>,
    pub replications: usize,
    /// Per-`n` overrides of `replications`, keyed by `n` as a string.
    #[serde(default)]
    pub replications_by_n: BTreeMap<String, usize>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    pub seed: u64,
    #[serde(default)]
    pub broken: Broken,
    #[serde(default = "default_level")]
    pub level: f64,
    /// Also record the cross-fit plug-in estimate.
    #[serde(default)]
    pub plugin: bool,
    /// Record the `S* + T1 + T2` decomposition when the truth allows it.
    #[serde(default = "yes")]
    pub decompose: bool,
}

impl StudyConfig {
    pub fn new(dgp: &str, functional: &str, n: Vec<usize>, replications: usize, seed: u64) -> StudyConfig {
        StudyConfig {
            dgp: dgp.into(),
            functional: functional.into(),
            policy_q: None,
            learners: BTreeMap::new(),
            n,
            replications,
            replications_by_n: BTreeMap::new(),
            folds: DEFAULT_FOLDS,
            seed,
            broken: Broken::None,
            level: 0.95,
            plugin: false,
            decompose: true,
        }
    }

    pub fn with_learner(mut self, name: &str, spec: &str) -> StudyConfig {
        self.learners.insert(name.into(), spec.into());
        self
    }

    pub fn replications_for(&self, n: usize) -> usize {
        self.replications_by_n.get(&n.to_string()).copied().unwrap_or(self.replications)
    }

    pub fn entry(&self) -> Result<CatalogEntry> {
        get_entry_with_policy(&self.functional, self.policy_q.unwrap_or(DEFAULT_POLICY_Q))
    }

    pub fn validate(&self) -> Result<(Dgp, CatalogEntry)> {
        let dgp = get_dgp(&self.dgp)?;
        let entry = self.entry()?;
        if !dgp.supports(&entry) {
            return Err(Error::InvalidConfig(format!("process `{}` does not support `{}`", self.dgp, self.functional)));
        }
        if self.n.is_empty() {
            return Err(Error::InvalidConfig("empty n list".into()));
        }
        if self.folds < 2 {
            return Err(Error::InvalidConfig(format!("folds = {} (need at least 2)", self.folds)));
        }
        for &n in &self.n {
            if n < 10 * self.folds {
                return Err(Error::InvalidConfig(format!("n = {n} is below 10 x folds")));
            }
            if self.replications_for(n) == 0 {
                return Err(Error::InvalidConfig(format!("no replications for n = {n}")));
            }
        }
        for key in self.replications_by_n.keys() {
            if !self.n.iter().any(|n| n.to_string() == *key) {
                return Err(Error::InvalidConfig(format!("replications_by_n key `{key}` is not in n")));
            }
        }
        crate::estimate::z_quantile(self.level)?;
        self.learner_set(&dgp, &entry)?;
        Ok((dgp, entry))
    }

    /// Learners after applying the misspecification switch.
    pub fn learner_set(&self, dgp: &Dgp, entry: &CatalogEntry) -> Result<LearnerSet> {
        let mut set = LearnerSet::default().with_oracle(dgp.truth_bundle(entry)?);
        for (name, text) in &self.learners {
            let spec = parse_learner(text)?;
            match name.as_str() {
                "default" => set.default_regression = spec,
                "density" => set.default_density = spec,
                other if entry.manifest.iter().any(|m| m.name == other) => {
                    set.per_name.insert(other.into(), spec);
                }
                other => return Err(Error::InvalidConfig(format!("`{other}` is not a nuisance of `{}`", entry.id))),
            }
        }
        for m in &entry.manifest {
            let outcome = m.kind == NuisanceKind::ConditionalMean && matches!(m.target, Target::Column("y") | Target::Fitted(_));
            let propensity = m.kind == NuisanceKind::ConditionalProbability;
            let replacement = match self.broken {
                Broken::Mu | Broken::Both if outcome => Some(LearnerSpec::Const(0.0)),
                Broken::Pi | Broken::Both if propensity => Some(LearnerSpec::Const(0.5)),
                _ => None,
            };
            if let Some(r) = replacement {
                set.per_name.insert(m.name.into(), r);
            }
        }
        Ok(set)
    }
}

/// Per-replication seed: a splitmix64 mix of (master seed, n, replication).
pub fn replication_seed(master: u64, n: usize, r: usize) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(splitmix(splitmix(master) ^ n as u64) ^ r as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationRecord {
    pub n: usize,
    pub replication: usize,
    pub seed: u64,
    pub psi_hat: Option<f64>,
    pub se: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub covered: Option<bool>,
    pub plugin: Option<f64>,
    pub s_star: Option<f64>,
    pub t1: Option<f64>,
    pub t2: Option<f64>,
    pub clamp_events: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub n: usize,
    pub replications: usize,
    pub failures: usize,
    pub failure_rate: f64,
    pub mean_psi_hat: Option<f64>,
    pub bias: Option<f64>,
    /// Standard deviation with divisor R; absent for a single replication.
    pub sd: Option<f64>,
    pub rmse: Option<f64>,
    pub rmse_sqrt_n: Option<f64>,
    pub coverage: Option<f64>,
    pub coverage_se: Option<f64>,
    pub mean_ci_width: Option<f64>,
    pub plugin_bias: Option<f64>,
    pub mean_abs_t1_sqrt_n: Option<f64>,
    pub mean_abs_t2_sqrt_n: Option<f64>,
    pub median_abs_t1_sqrt_n: Option<f64>,
    pub median_abs_t2_sqrt_n: Option<f64>,
    /// Clamp events per evaluated row.
    pub clamp_rate: Option<f64>,
    /// `n var(psi_hat) / var phi`.
    pub variance_ratio: Option<f64>,
    /// Normality of `sqrt(n) (psi_hat - psi) / sd(phi)`.
    pub ks: Option<KsResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyResult {
    pub config: StudyConfig,
    pub truth: f64,
    pub truth_provenance: String,
    pub efficient_variance: Option<f64>,
    pub learners: BTreeMap<String, String>,
    pub cells: Vec<CellSummary>,
    pub records: Vec<ReplicationRecord>,
}

impl StudyResult {
    pub fn cell(&self, n: usize) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.n == n)
    }

    /// Per-replication records as CSV.
    pub fn write_records_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Cross-fit plug-in from the fold bundles of a cross-fit run.
pub fn crossfit_plugin(entry: &CatalogEntry, cf: &CrossFit, data: &Dataset) -> Result<f64> {
    let n = data.n() as f64;
    if entry.functional == Functional::ExpectedDensity {
        let w = fold_weights(&cf.plan);
        return cf.bundles.iter().zip(w).map(|(b, w)| Ok(w * b.scalar("int_p2")?)).sum();
    }
    let sum = |e: &CatalogEntry| -> Result<f64> {
        let mut total = 0.0;
        for (k, b) in cf.bundles.iter().enumerate() {
            let (_, test) = cf.plan.split(k);
            for i in test {
                total += e.plugin_term(b, &data.obs(i))?;
            }
        }
        Ok(total / n)
    };
    match entry.components() {
        Some((num, den)) => Ok(sum(&num)? / sum(&den)?),
        None => sum(entry),
    }
}

struct Context<'a> {
    cfg: &'a StudyConfig,
    dgp: &'a Dgp,
    entry: &'a CatalogEntry,
    learners: &'a LearnerSet,
    truth: f64,
    truth_bundle: &'a Bundle,
}

fn replicate(ctx: &Context, n: usize, r: usize) -> ReplicationRecord {
    let seed = replication_seed(ctx.cfg.seed, n, r);
    let mut rec = ReplicationRecord {
        n,
        replication: r,
        seed,
        psi_hat: None,
        se: None,
        ci_lo: None,
        ci_hi: None,
        covered: None,
        plugin: None,
        s_star: None,
        t1: None,
        t2: None,
        clamp_events: 0,
        error: None,
    };
    let run = |rec: &mut ReplicationRecord| -> Result<()> {
        let data = ctx.dgp.sample(n, seed)?;
        let cf = crossfit_detailed(ctx.entry, ctx.learners, &data, ctx.cfg.folds, seed, ctx.cfg.level)?;
        let est = &cf.estimate;
        rec.psi_hat = Some(est.psi_hat);
        rec.se = est.se;
        rec.clamp_events = est.clamp_events;
        if let Some((lo, hi)) = est.ci {
            rec.ci_lo = Some(lo);
            rec.ci_hi = Some(hi);
            rec.covered = Some(lo <= ctx.truth && ctx.truth <= hi);
        }
        if ctx.cfg.plugin {
            rec.plugin = crossfit_plugin(ctx.entry, &cf, &data).ok();
        }
        if ctx.cfg.decompose && !ctx.entry.is_ratio() {
            let pop: &dyn Population = ctx.dgp;
            let d = decompose_error(ctx.entry, est, &cf.bundles, &fold_weights(&cf.plan), &data, pop, ctx.truth_bundle)?;
            rec.s_star = Some(d.s_star);
            rec.t1 = Some(d.t1);
            rec.t2 = Some(d.t2);
        }
        Ok(())
    };
    if let Err(e) = run(&mut rec) {
        rec.error = Some(e.to_string());
    }
    rec
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Some(if s.len() % 2 == 1 { s[m] } else { 0.5 * (s[m - 1] + s[m]) })
}

fn summarize(n: usize, records: &[ReplicationRecord], truth: f64, eff_var: Option<f64>) -> CellSummary {
    let ok: Vec<&ReplicationRecord> = records.iter().filter(|r| r.psi_hat.is_some()).collect();
    let root = (n as f64).sqrt();
    let psi: Vec<f64> = ok.iter().filter_map(|r| r.psi_hat).collect();
    let m = mean(&psi);
    let bias = m.map(|m| m - truth);
    let sd = (psi.len() > 1).then(|| {
        let m = m.unwrap_or(0.0);
        (psi.iter().map(|v| (v - m).powi(2)).sum::<f64>() / psi.len() as f64).sqrt()
    });
    let rmse = match (bias, sd) {
        (Some(b), Some(s)) => Some((b * b + s * s).sqrt()),
        (Some(b), None) => Some(b.abs()),
        _ => None,
    };
    let covered: Vec<f64> = ok.iter().filter_map(|r| r.covered.map(|c| c as u8 as f64)).collect();
    let coverage = mean(&covered);
    let widths: Vec<f64> = ok.iter().filter_map(|r| Some(r.ci_hi? - r.ci_lo?)).collect();
    let plugins: Vec<f64> = ok.iter().filter_map(|r| r.plugin).collect();
    let t1: Vec<f64> = ok.iter().filter_map(|r| r.t1.map(|t| t.abs() * root)).collect();
    let t2: Vec<f64> = ok.iter().filter_map(|r| r.t2.map(|t| t.abs() * root)).collect();
    let clamps = ok.iter().map(|r| r.clamp_events).sum::<usize>() as f64;
    let (variance_ratio, ks) = match (eff_var, sd) {
        (Some(v), Some(s)) if v > 0.0 => {
            let z: Vec<f64> = psi.iter().map(|p| root * (p - truth) / v.sqrt()).collect();
            (Some(n as f64 * s * s / v), Some(ks_normal(&z)))
        }
        _ => (None, None),
    };
    let failures = records.len() - ok.len();
    CellSummary {
        n,
        replications: records.len(),
        failures,
        failure_rate: failures as f64 / records.len() as f64,
        mean_psi_hat: m,
        bias,
        sd,
        rmse,
        rmse_sqrt_n: rmse.map(|r| r * root),
        coverage,
        coverage_se: coverage.map(|c| (c * (1.0 - c) / covered.len() as f64).sqrt()),
        mean_ci_width: mean(&widths),
        plugin_bias: mean(&plugins).map(|p| p - truth),
        mean_abs_t1_sqrt_n: mean(&t1),
        mean_abs_t2_sqrt_n: mean(&t2),
        median_abs_t1_sqrt_n: median(&t1),
        median_abs_t2_sqrt_n: median(&t2),
        clamp_rate: (!ok.is_empty()).then(|| clamps / (ok.len() * n) as f64),
        variance_ratio,
        ks,
    }
}

/// Run every replication of every `n`; failed replications are recorded
/// rather than aborting the study.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyResult> {
    let (dgp, entry) = cfg.validate()?;
    let learners = cfg.learner_set(&dgp, &entry)?;
    let truth_bundle = dgp.truth_bundle(&entry)?;
    let truth = dgp.truth(&entry)?;
    let eff_var = dgp.efficient_variance(&entry).ok();
    let ctx = Context {
        cfg,
        dgp: &dgp,
        entry: &entry,
        learners: &learners,
        truth,
        truth_bundle: &truth_bundle,
    };
    let jobs: Vec<(usize, usize)> = cfg.n.iter().flat_map(|&n| (0..cfg.replications_for(n)).map(move |r| (n, r))).collect();
    #[cfg(feature = "parallel")]
    let records: Vec<ReplicationRecord> = {
        use rayon::prelude::*;
        jobs.par_iter().map(|&(n, r)| replicate(&ctx, n, r)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let records: Vec<ReplicationRecord> = jobs.iter().map(|&(n, r)| replicate(&ctx, n, r)).collect();
    let cells = cfg
        .n
        .iter()
        .map(|&n| {
            let rs: Vec<ReplicationRecord> = records.iter().filter(|r| r.n == n).cloned().collect();
            summarize(n, &rs, truth, eff_var)
        })
        .collect();
    Ok(StudyResult {
        config: cfg.clone(),
        truth,
        truth_provenance: dgp.provenance.into(),
        efficient_variance: eff_var,
        learners: learners.describe(&entry),
        cells,
        records,
    })
}

/// Bias of the cross-fit one-step and plug-in under one misspecification.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DrRecord {
    pub dgp: String,
    pub functional: String,
    pub broken: Broken,
    pub n: usize,
    pub replications: usize,
    pub failures: usize,
    pub truth: f64,
    pub onestep_bias: Option<f64>,
    pub onestep_sd: Option<f64>,
    pub onestep_coverage: Option<f64>,
    pub plugin_bias: Option<f64>,
}

/// `learners` uses the same keys as [`StudyConfig::learners`].
pub fn dr_experiment(
    dgp: &str,
    functional: &str,
    broken: Broken,
    n: usize,
    replications: usize,
    seed: u64,
    learners: &BTreeMap<String, String>,
) -> Result<DrRecord> {
    let mut cfg = StudyConfig::new(dgp, functional, vec![n], replications, seed);
    cfg.broken = broken;
    cfg.plugin = true;
    cfg.decompose = false;
    cfg.learners = learners.clone();
    let res = run_study(&cfg)?;
    let c = &res.cells[0];
    Ok(DrRecord {
        dgp: dgp.into(),
        functional: functional.into(),
        broken,
        n,
        replications,
        failures: c.failures,
        truth: res.truth,
        onestep_bias: c.bias,
        onestep_sd: c.sd,
        onestep_coverage: c.coverage,
        plugin_bias: c.plugin_bias,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRecord {
    pub functional: String,
    pub ts: Vec<f64>,
    pub remainders: Vec<f64>,
    /// `R(t_i) / R(t_{i+1})`; absent when the remainder is exactly zero.
    pub ratios: Vec<Option<f64>>,
    pub exact_zero: bool,
}

/// Constant 0.2 for propensities, constant 1 for regressions and a small
/// odd bump for densities.
pub fn default_direction(entry: &CatalogEntry) -> Bundle {
    let mut b = Bundle::new();
    for m in &entry.manifest {
        let h: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync> = match m.kind {
            NuisanceKind::ConditionalProbability => Arc::new(|_: &[f64]| 0.2),
            NuisanceKind::ConditionalMean => Arc::new(|_: &[f64]| 1.0),
            NuisanceKind::Density => Arc::new(|x: &[f64]| 0.1 * x[0] * (-x[0] * x[0] / 2.0).exp()),
        };
        b.insert(m.name, h);
    }
    b
}

/// Remainder along `eta + t h` for each `t`, with successive ratios.
pub fn remainder_scaling(entry: &CatalogEntry, dgp: &Dgp, direction: &Bundle, ts: &[f64]) -> Result<ScalingRecord> {
    let truth = dgp.truth_bundle(entry)?;
    let remainders = ts
        .iter()
        .map(|&t| entry.remainder(&truth.perturbed(direction, t), &truth, dgp))
        .collect::<Result<Vec<_>>>()?;
    let exact_zero = remainders.iter().all(|&r| r == 0.0);
    let ratios = remainders
        .windows(2)
        .map(|w| (!exact_zero && w[1] != 0.0).then(|| w[0] / w[1]))
        .collect();
    Ok(ScalingRecord {
        functional: entry.id.clone(),
        ts: ts.to_vec(),
        remainders,
        ratios,
        exact_zero,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::get_entry;

    #[test]
    fn seeds_differ_and_repeat() {
        assert_eq!(replication_seed(1, 500, 3), replication_seed(1, 500, 3));
        assert_ne!(replication_seed(1, 500, 3), replication_seed(1, 500, 4));
        assert_ne!(replication_seed(1, 500, 3), replication_seed(1, 2000, 3));
    }

    #[test]
    fn single_replication_has_no_sd() {
        let cfg = StudyConfig::new("ate-smooth-1d", "mean_treated", vec![100], 1, 7).with_learner("default", "knn(k=10)");
        let res = run_study(&cfg).unwrap();
        let c = &res.cells[0];
        assert!(c.sd.is_none());
        let psi = res.records[0].psi_hat.unwrap();
        assert!((c.bias.unwrap() - (psi - 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn rmse_identity_and_determinism() {
        let cfg = StudyConfig::new("ate-smooth-1d", "mean_treated", vec![100], 6, 2).with_learner("default", "knn(k=10)");
        let a = run_study(&cfg).unwrap();
        let c = &a.cells[0];
        let (b, s, r) = (c.bias.unwrap(), c.sd.unwrap(), c.rmse.unwrap());
        assert!((r * r - b * b - s * s).abs() < 1e-15);
        let direct = (a.records.iter().map(|r| (r.psi_hat.unwrap() - a.truth).powi(2)).sum::<f64>() / 6.0).sqrt();
        assert!((direct - r).abs() < 1e-12);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&run_study(&cfg).unwrap()).unwrap());
    }

    #[test]
    fn failures_are_recorded() {
        let cfg = StudyConfig::new("ate-smooth-1d", "mean_treated", vec![50], 2, 2).with_learner("default", "knn(k=45)");
        let res = run_study(&cfg).unwrap();
        assert_eq!(res.cells[0].failures, 2);
        assert!(res.records[0].error.as_deref().unwrap().contains("fold"));
    }

    #[test]
    fn config_validation() {
        let mut cfg = StudyConfig::new("ate-smooth-1d", "expected_density", vec![100], 1, 1);
        assert!(cfg.validate().is_err());
        cfg.functional = "mean_treated".into();
        cfg.n = vec![20];
        assert!(cfg.validate().is_err());
        cfg.n = vec![100];
        cfg.learners.insert("nope".into(), "knn(k=3)".into());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ecc_mu_only_direction_is_exactly_zero() {
        let e = get_entry("expected_cond_cov").unwrap();
        let d = get_dgp("ate-smooth-1d").unwrap();
        let h = Bundle::new().with("mu", |x| x[0]);
        let r = remainder_scaling(&e, &d, &h, &[0.2, 0.1, 0.05]).unwrap();
        assert!(r.exact_zero);
        assert!(r.ratios.iter().all(Option::is_none));
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use ifkit::catalog::{get_entry_with_policy, list_entries, CatalogEntry, DEFAULT_POLICY_Q};
use ifkit::data::Dataset;
use ifkit::dist::{DiscreteDist, DistJson, Schema};
use ifkit::dsl::{check_if, derive_if, parse_functional};
use ifkit::estimate::{crossfit_detailed, insample_estimate, plugin_estimate, Estimate, LearnerSet, DEFAULT_FOLDS};
use ifkit::nuisance::parse_learner;
use ifkit::simlab::{get_dgp, run_study, StudyConfig, DGP_IDS};
use ifkit::Error;

#[derive(Parser, Debug)]
#[command(name = "ifkit", version, about = "Influence functions: derive, check, estimate, simulate")]
struct Cli {
    /// Seed for fold plans and learners (estimate) or the master seed (simulate).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    threads: Option<u64>,
    /// Write structured JSON here instead of the human summary.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress the human summary.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Derive the influence function of a DSL functional.
    Derive(DeriveArgs),
    /// Compare the derived influence function with the numerical oracle.
    Check(CheckArgs),
    /// Estimate a catalog functional from a CSV file.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo study.
    Simulate(SimulateArgs),
    /// List functionals, data-generating processes and learner grammar.
    List,
}

#[derive(Args, Debug)]
struct DeriveArgs {
    /// Schema as `{"x":2,"a":2,"y":2}`.
    #[arg(long)]
    schema: String,
    #[arg(long)]
    expr: String,
    /// Write the derivation trace JSON here.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[arg(long)]
    expr: String,
    /// Distribution JSON file.
    #[arg(long)]
    dist: PathBuf,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long, required_unless_present = "list_functionals")]
    functional: Option<String>,
    #[arg(long, required_unless_present = "list_functionals")]
    data: Option<PathBuf>,
    /// `name=spec`; also accepted as `--learner-<name> spec`.
    #[arg(long = "learner", value_name = "NAME=SPEC")]
    learners: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    folds: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Treatment probability of the stochastic intervention.
    #[arg(long)]
    policy_q: Option<f64>,
    /// Fit and evaluate on the same rows (diagnostics only).
    #[arg(long)]
    no_crossfit: bool,
    /// Also report the plug-in estimate.
    #[arg(long)]
    plugin: bool,
    /// Print the catalog as JSON and exit.
    #[arg(long)]
    list_functionals: bool,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Per-replication records as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write every replication's data set into this directory.
    #[arg(long)]
    emit_data: Option<PathBuf>,
}

const DEFAULT_SEED: u64 = 7;

/// Rewrite `--learner-mu spec` and `--learner-mu=spec` into `--learner mu=spec`.
fn normalize_args(args: Vec<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        match a.strip_prefix("--learner-") {
            Some(rest) if !rest.is_empty() => {
                out.push("--learner".into());
                match rest.split_once('=') {
                    Some((name, spec)) => out.push(format!("{name}={spec}")),
                    None => out.push(format!("{rest}={}", it.next().unwrap_or_default())),
                }
            }
            _ => out.push(a),
        }
    }
    out
}

enum Failure {
    /// The run completed and the verdict is negative.
    Verdict(String),
    Estimator(Error),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        match e {
            Error::PositivityViolation { .. }
            | Error::WeakDenominator { .. }
            | Error::FoldTooSmallForLearner { .. }
            | Error::KTooLarge { .. }
            | Error::QuadratureFailure(_)
            | Error::EvalFailure(_)
            | Error::ZeroConditioningMass(_)
            | Error::DivideByZero(_)
            | Error::AtAtom { .. } => Failure::Estimator(e),
            other => Failure::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Failure {
        Failure::Usage(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Failure {
        Failure::Usage(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

struct Output {
    out: Option<PathBuf>,
    quiet: bool,
}

impl Output {
    /// JSON to `--out` if given; the human text otherwise.
    fn emit(&self, doc: &Value, human: impl FnOnce() -> String) -> Outcome {
        match &self.out {
            Some(path) => write_json(path, doc)?,
            None if !self.quiet => say(&human()),
            None => {}
        }
        Ok(())
    }
}

/// Print to stdout; a closed pipe is not an error.
fn say(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn write_json(path: &Path, doc: &Value) -> Outcome {
    let mut text = serde_json::to_string_pretty(doc)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn parse_schema(text: &str) -> Result<Schema, Failure> {
    let v: Value = serde_json::from_str(text).map_err(|e| Failure::Usage(format!("--schema: {e}")))?;
    let pairs: Vec<(String, usize)> = match v {
        Value::Object(map) => map
            .into_iter()
            .map(|(k, v)| v.as_u64().map(|l| (k.clone(), l as usize)).ok_or_else(|| Failure::Usage(format!("--schema: levels of `{k}` must be an integer"))))
            .collect::<Result<_, _>>()?,
        Value::Array(_) => serde_json::from_value(v)?,
        _ => return Err(Failure::Usage("--schema must be a JSON object of level counts".into())),
    };
    Ok(Schema::new(pairs)?)
}

fn derive(args: &DeriveArgs, o: &Output) -> Outcome {
    let schema = parse_schema(&args.schema)?;
    let expr = parse_functional(&args.expr)?;
    let (phi, trace) = derive_if(&expr, &schema)?;
    let trace_json = trace.to_json();
    if let Some(path) = &args.trace {
        write_json(path, &trace_json)?;
    }
    let doc = json!({
        "functional": expr.to_string(),
        "influence_function": phi.to_string(),
        "trace": trace_json,
    });
    o.emit(&doc, || {
        let mut s = format!("phi = {phi}");
        if args.trace.is_none() {
            s.push('\n');
            s.push_str(&serde_json::to_string_pretty(&trace_json).expect("trace serializes"));
        }
        s
    })
}

fn check(args: &CheckArgs, o: &Output) -> Outcome {
    let text = fs::read_to_string(&args.dist)?;
    let doc: DistJson = serde_json::from_str(&text)?;
    let p = DiscreteDist::from_json(&doc)?;
    let expr = parse_functional(&args.expr)?;
    let report = check_if(&expr, &p, args.tol)?;
    o.emit(&serde_json::to_value(&report)?, || {
        format!(
            "phi = {}\npsi = {}\nmax gap = {:.3e}  mean-zero residual = {:.3e}  tol = {:e}\n{}",
            report.influence_function,
            report.psi,
            report.max_gap,
            report.mean_zero_residual,
            report.tol,
            if report.pass { "PASS" } else { "FAIL" }
        )
    })?;
    if report.pass {
        Ok(())
    } else {
        Err(Failure::Verdict(format!("max gap {:.3e} exceeds tolerance {:e}", report.max_gap, args.tol)))
    }
}

fn catalog_json() -> Value {
    Value::Array(
        list_entries()
            .iter()
            .map(|e| {
                json!({
                    "id": e.id,
                    "dsl": e.dsl(),
                    "ratio": e.is_ratio(),
                    "required_columns": e.required_columns(),
                    "manifest": e.manifest,
                })
            })
            .collect(),
    )
}

fn learner_set(entry: &CatalogEntry, specs: &[String]) -> Result<LearnerSet, Failure> {
    let mut set = LearnerSet::default();
    for s in specs {
        let (name, text) = s
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--learner expects NAME=SPEC, got `{s}`")))?;
        let spec = parse_learner(text)?;
        match name {
            "default" => set.default_regression = spec,
            "density" => set.default_density = spec,
            n if entry.manifest.iter().any(|m| m.name == n) => {
                set.per_name.insert(n.to_string(), spec);
            }
            n => {
                let names: Vec<_> = entry.manifest.iter().map(|m| m.name).collect();
                return Err(Failure::Usage(format!("`{n}` is not a nuisance of `{}` (expected one of {names:?})", entry.id)));
            }
        }
    }
    Ok(set)
}

fn estimate_json(entry: &CatalogEntry, est: &Estimate, k: usize, seed: u64, learners: &BTreeMap<String, String>) -> Value {
    json!({
        "functional": entry.id,
        "method": est.method,
        "n": est.n,
        "K": k,
        "seed": seed,
        "level": est.level,
        "psi_hat": est.psi_hat,
        "se": est.se,
        "if_variance": est.if_variance,
        "ci": est.ci.map(|(lo, hi)| [lo, hi]),
        "per_fold": est.per_fold,
        "clamp_events": est.clamp_events,
        "learners": learners,
    })
}

fn estimate(args: &EstimateArgs, seed: u64, o: &Output) -> Outcome {
    if args.list_functionals {
        say(&serde_json::to_string_pretty(&catalog_json())?);
        return Ok(());
    }
    let (Some(id), Some(path)) = (&args.functional, &args.data) else {
        return Err(Failure::Usage("--functional and --data are required".into()));
    };
    let entry = get_entry_with_policy(id, args.policy_q.unwrap_or(DEFAULT_POLICY_Q))?;
    let data = Dataset::read_csv(fs::File::open(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?)?;
    for c in entry.required_columns() {
        data.column(c)?;
    }
    let learners = learner_set(&entry, &args.learners)?;
    let described = learners.describe(&entry);
    let (est, plugin, k) = if args.no_crossfit {
        let (est, bundle) = insample_estimate(&entry, &learners, &data, seed, args.level)?;
        let plugin = args.plugin.then(|| plugin_estimate(&entry, &bundle, &data).map(|p| p.psi_hat)).transpose()?;
        (est, plugin, 1)
    } else {
        let cf = crossfit_detailed(&entry, &learners, &data, args.folds, seed, args.level)?;
        let plugin = args.plugin.then(|| ifkit::simlab::crossfit_plugin(&entry, &cf, &data)).transpose()?;
        (cf.estimate, plugin, args.folds)
    };
    let mut doc = estimate_json(&entry, &est, k, seed, &described);
    if let Some(p) = plugin {
        doc["plugin_psi_hat"] = json!(p);
    }
    o.emit(&doc, || {
        let (lo, hi) = est.ci.unwrap_or((f64::NAN, f64::NAN));
        let mut s = format!(
            "functional   {}\nmethod       {:?}\npsi_hat      {}\nse           {}\n{}% CI       [{}, {}]\nn            {}\nK            {}\nseed         {}\nclamp events {}",
            entry.id,
            est.method,
            est.psi_hat,
            est.se.unwrap_or(f64::NAN),
            est.level * 100.0,
            lo,
            hi,
            est.n,
            k,
            seed,
            est.clamp_events
        );
        if let Some(p) = plugin {
            s.push_str(&format!("\nplug-in      {p}"));
        }
        for (name, spec) in &described {
            s.push_str(&format!("\nlearner {name:<5}{spec}"));
        }
        s
    })
}

fn simulate(args: &SimulateArgs, seed: Option<u64>, o: &Output) -> Outcome {
    let text = fs::read_to_string(&args.config)?;
    let mut cfg: StudyConfig = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", args.config.display())))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let result = run_study(&cfg)?;
    if let Some(path) = &args.csv {
        result.write_records_csv(fs::File::create(path)?)?;
    }
    if let Some(dir) = &args.emit_data {
        fs::create_dir_all(dir)?;
        let dgp = get_dgp(&cfg.dgp)?;
        for r in &result.records {
            let data = dgp.sample(r.n, r.seed)?;
            let file = dir.join(format!("n{}_r{}_seed{}.csv", r.n, r.replication, r.seed));
            data.write_csv(fs::File::create(file)?)?;
        }
    }
    o.emit(&serde_json::to_value(&result)?, || {
        let mut s = format!(
            "dgp {}  functional {}  truth {}  K {}  seed {}  broken {:?}\n",
            cfg.dgp, cfg.functional, result.truth, cfg.folds, cfg.seed, cfg.broken
        );
        s.push_str("      n     R  fail      bias        sd   rmse*sqrt(n)  coverage\n");
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        for c in &result.cells {
            s.push_str(&format!(
                "{:>7} {:>5} {:>5} {:>9} {:>9} {:>14} {:>9}\n",
                c.n,
                c.replications,
                c.failures,
                f(c.bias),
                f(c.sd),
                f(c.rmse_sqrt_n),
                f(c.coverage)
            ));
        }
        s
    })
}

fn list(o: &Output) -> Outcome {
    let dgps: Vec<Value> = DGP_IDS
        .iter()
        .map(|id| {
            let d = get_dgp(id).expect("registered");
            json!({"id": d.id, "default_functional": d.default_functional, "truth": d.provenance})
        })
        .collect();
    let doc = json!({
        "functionals": catalog_json(),
        "dgps": dgps,
        "learners": [
            "knn(k=INT)", "knn(cv=INT, grid=[INT,...])",
            "nw(h=REAL)", "nw(cv=INT, grid=[REAL,...])",
            "hist(w=REAL)",
            "kde(h=REAL)", "kde(h=silverman)", "kde(cv=INT, grid=[REAL,...])",
            "const(c=REAL)", "oracle"
        ],
    });
    match &o.out {
        Some(path) => write_json(path, &doc),
        None => {
            say(&serde_json::to_string_pretty(&doc)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse_from(normalize_args(std::env::args().collect()));
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t as usize).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    let o = Output {
        out: cli.out.clone(),
        quiet: cli.quiet,
    };
    let seed = cli.seed.unwrap_or(DEFAULT_SEED);
    let result = match &cli.command {
        Command::Derive(a) => derive(a, &o),
        Command::Check(a) => check(a, &o),
        Command::Estimate(a) => estimate(a, seed, &o),
        Command::Simulate(a) => simulate(a, cli.seed, &o),
        Command::List => list(&o),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verdict(msg)) => {
            eprintln!("fail: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Estimator(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

//! Nonparametric nuisance learners.
//!
//! Regression learners work on standardized features (training mean removed,
//! divided by the training standard deviation; constant features pass
//! through unscaled). Learners are described by a small text grammar:
//!
//! ```text
//! knn(k=25)   knn(cv=5, grid=[5,10,25,50,100])
//! nw(h=0.1)   nw(cv=5, grid=[0.05,0.1,0.2])
//! hist(w=0.25)
//! kde(h=silverman)   kde(h=0.3)   kde(cv=5, grid=[0.1,0.2,0.4])
//! const(c=0.5)   oracle
//! ```

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Arc;

use crate::data::Matrix;
use crate::error::{Error, Result};
use crate::estimate::FoldPlan;

/// A fitted nuisance as a plain function of the feature vector.
pub type NuisanceFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

const GAUSS_NORM: f64 = 0.398_942_280_401_432_7; // 1 / sqrt(2 pi)
pub const DENSITY_GRID: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &Matrix) -> Standardizer {
        let (n, d) = (x.rows() as f64, x.cols());
        let mut mean = vec![0.0; d];
        for i in 0..x.rows() {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for i in 0..x.rows() {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Knn { k: usize },
    Kernel { h: f64 },
    Histogram { width: f64 },
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Knn { k } => write!(f, "knn(k={k})"),
            Method::Kernel { h } => write!(f, "nw(h={h})"),
            Method::Histogram { width } => write!(f, "hist(w={width})"),
        }
    }
}

/// Shared counter of predictions moved by a clamp.
#[derive(Debug, Clone, Default)]
pub struct ClampCounter(Arc<AtomicUsize>);

impl ClampCounter {
    pub fn get(&self) -> usize {
        self.0.load(AtomicOrdering::Relaxed)
    }

    fn bump(&self) {
        self.0.fetch_add(1, AtomicOrdering::Relaxed);
    }
}

/// Truncate `v` to `[lo, hi]`, counting moves.
pub fn clamp_value(v: f64, lo: f64, hi: f64, counter: &ClampCounter) -> f64 {
    if v < lo {
        counter.bump();
        lo
    } else if v > hi {
        counter.bump();
        hi
    } else {
        v
    }
}

/// Wrap a nuisance function in a counted clamp.
pub fn clamp_fn(f: NuisanceFn, lo: f64, hi: f64, counter: ClampCounter) -> NuisanceFn {
    Arc::new(move |x: &[f64]| clamp_value(f(x), lo, hi, &counter))
}

#[derive(Debug, Clone)]
struct Sorted1d {
    x: Vec<f64>,
    id: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RegressionFit {
    method: Method,
    std: Standardizer,
    x: Matrix,
    y: Vec<f64>,
    sorted: Option<Sorted1d>,
    bins: HashMap<Vec<i64>, (f64, usize)>,
    mean_y: f64,
    clamp: Option<(f64, f64, ClampCounter)>,
}

fn check_training(x: &Matrix, y: &[f64]) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::EmptyData);
    }
    if x.rows() != y.len() {
        return Err(Error::InvalidData(format!("{} feature rows but {} targets", x.rows(), y.len())));
    }
    Ok(())
}

impl RegressionFit {
    fn build(x: &Matrix, y: &[f64], method: Method) -> Result<RegressionFit> {
        check_training(x, y)?;
        let std = Standardizer::fit(x);
        let rows: Vec<f64> = (0..x.rows()).flat_map(|i| std.apply(x.row(i))).collect();
        let xs = Matrix::new(x.rows(), x.cols(), rows)?;
        let sorted = (xs.cols() == 1).then(|| {
            let mut id: Vec<usize> = (0..xs.rows()).collect();
            id.sort_by(|&i, &j| xs.row(i)[0].total_cmp(&xs.row(j)[0]).then(i.cmp(&j)));
            Sorted1d {
                x: id.iter().map(|&i| xs.row(i)[0]).collect(),
                id,
            }
        });
        let mut bins = HashMap::new();
        if let Method::Histogram { width } = method {
            for i in 0..xs.rows() {
                let e = bins.entry(bin_key(xs.row(i), width)).or_insert((0.0, 0));
                e.0 += y[i];
                e.1 += 1;
            }
        }
        let mean_y = y.iter().sum::<f64>() / y.len() as f64;
        Ok(RegressionFit {
            method,
            std,
            x: xs,
            y: y.to_vec(),
            sorted,
            bins,
            mean_y,
            clamp: None,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn n_train(&self) -> usize {
        self.y.len()
    }

    pub fn clamp_events(&self) -> usize {
        self.clamp.as_ref().map_or(0, |c| c.2.get())
    }

    /// Positions `lo..hi` in the sorted 1-d index holding the `kmax` nearest
    /// rows plus any rows tied with the farthest of them.
    fn window_1d(s: &Sorted1d, q: f64, kmax: usize) -> (usize, usize) {
        let n = s.x.len();
        let pos = s.x.partition_point(|&v| v < q);
        let (mut lo, mut hi) = (pos, pos);
        while hi - lo < kmax {
            let left = (lo > 0).then(|| q - s.x[lo - 1]);
            let right = (hi < n).then(|| s.x[hi] - q);
            match (left, right) {
                (Some(l), Some(r)) if l <= r => lo -= 1,
                (Some(_), None) => lo -= 1,
                _ => hi += 1,
            }
        }
        let dk = (q - s.x[lo]).abs().max((s.x[hi - 1] - q).abs());
        while lo > 0 && q - s.x[lo - 1] <= dk {
            lo -= 1;
        }
        while hi < n && s.x[hi] - q <= dk {
            hi += 1;
        }
        (lo, hi)
    }

    /// Indices of the `kmax` nearest training rows, ordered by (distance, row).
    fn neighbors(&self, q: &[f64], kmax: usize) -> Vec<usize> {
        let n = self.y.len();
        let kmax = kmax.min(n);
        if let Some(s) = &self.sorted {
            let q = q[0];
            let (lo, hi) = Self::window_1d(s, q, kmax);
            let mut cand: Vec<(f64, usize)> = (lo..hi).map(|j| ((s.x[j] - q).abs(), s.id[j])).collect();
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            return cand.into_iter().take(kmax).map(|(_, i)| i).collect();
        }
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        let mut d: Vec<(f64, usize)> = (0..n)
            .map(|i| {
                let d2 = self.x.row(i).iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2, i)
            })
            .collect();
        if kmax < n {
            d.select_nth_unstable_by(kmax - 1, cmp);
            d.truncate(kmax);
        }
        d.sort_by(cmp);
        d.into_iter().map(|(_, i)| i).collect()
    }

    fn knn_mean(&self, q: &[f64], k: usize) -> f64 {
        if let Some(s) = &self.sorted {
            let k = k.min(self.y.len());
            let (lo, hi) = Self::window_1d(s, q[0], k);
            if hi - lo == k {
                return s.id[lo..hi].iter().map(|&i| self.y[i]).sum::<f64>() / k as f64;
            }
        }
        let nb = self.neighbors(q, k);
        nb.iter().map(|&i| self.y[i]).sum::<f64>() / nb.len() as f64
    }

    fn nw(&self, q: &[f64], h: f64) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..self.y.len() {
            let d2: f64 = self.x.row(i).iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            let w = (-0.5 * d2 / (h * h)).exp();
            num += w * self.y[i];
            den += w;
        }
        if den < 1e-300 {
            self.knn_mean(q, 1)
        } else {
            num / den
        }
    }

    fn raw_predict(&self, x: &[f64]) -> f64 {
        let q = self.std.apply(x);
        match self.method {
            Method::Knn { k } => self.knn_mean(&q, k),
            Method::Kernel { h } => self.nw(&q, h),
            Method::Histogram { width } => match self.bins.get(&bin_key(&q, width)) {
                Some(&(s, c)) => s / c as f64,
                None => self.mean_y,
            },
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let v = self.raw_predict(x);
        match &self.clamp {
            Some((lo, hi, c)) => clamp_value(v, *lo, *hi, c),
            None => v,
        }
    }

    pub fn into_fn(self) -> NuisanceFn {
        let fit = Arc::new(self);
        Arc::new(move |x: &[f64]| fit.predict(x))
    }
}

fn bin_key(q: &[f64], width: f64) -> Vec<i64> {
    q.iter().map(|v| (v / width).floor() as i64).collect()
}

pub fn fit_knn(x: &Matrix, y: &[f64], k: usize) -> Result<RegressionFit> {
    check_training(x, y)?;
    if k == 0 || k > x.rows() {
        return Err(Error::KTooLarge { k, n: x.rows() });
    }
    RegressionFit::build(x, y, Method::Knn { k })
}

pub fn fit_kernel_regression(x: &Matrix, y: &[f64], bandwidth: f64) -> Result<RegressionFit> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidLearner(format!("nw(h={bandwidth})")));
    }
    RegressionFit::build(x, y, Method::Kernel { h: bandwidth })
}

pub fn fit_histogram(x: &Matrix, y: &[f64], width: f64) -> Result<RegressionFit> {
    if !(width > 0.0 && width.is_finite()) {
        return Err(Error::InvalidLearner(format!("hist(w={width})")));
    }
    RegressionFit::build(x, y, Method::Histogram { width })
}

/// Truncate predictions to `[lo, hi]`; moves are counted in [`RegressionFit::clamp_events`].
pub fn clamp(mut fit: RegressionFit, lo: f64, hi: f64) -> RegressionFit {
    assert!(lo < hi, "clamp needs lo < hi");
    fit.clamp = Some((lo, hi, ClampCounter::default()));
    fit
}

/// Univariate Gaussian kernel density estimate.
#[derive(Debug, Clone)]
pub struct DensityFit {
    points: Vec<f64>,
    h: f64,
    lo: f64,
    hi: f64,
}

pub fn fit_density(z: &[f64], bandwidth: f64) -> Result<DensityFit> {
    if z.is_empty() {
        return Err(Error::EmptyData);
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidLearner(format!("kde(h={bandwidth})")));
    }
    let mut points = z.to_vec();
    points.sort_by(f64::total_cmp);
    Ok(DensityFit {
        lo: points[0] - 4.0 * bandwidth,
        hi: points[points.len() - 1] + 4.0 * bandwidth,
        points,
        h: bandwidth,
    })
}

impl DensityFit {
    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    pub fn support(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn predict(&self, t: f64) -> f64 {
        let s: f64 = self
            .points
            .iter()
            .map(|x| {
                let u = (t - x) / self.h;
                (-0.5 * u * u).exp()
            })
            .sum();
        s * GAUSS_NORM / (self.points.len() as f64 * self.h)
    }

    fn trapezoid(&self, f: impl Fn(f64) -> f64) -> f64 {
        let step = (self.hi - self.lo) / (DENSITY_GRID - 1) as f64;
        let mut total = 0.0;
        for i in 0..DENSITY_GRID {
            let w = if i == 0 || i == DENSITY_GRID - 1 { 0.5 } else { 1.0 };
            total += w * f(self.lo + i as f64 * step);
        }
        total * step
    }

    /// Trapezoid integral of the estimate over its support grid.
    pub fn integral(&self) -> f64 {
        self.trapezoid(|t| self.predict(t))
    }

    /// Trapezoid integral of the squared estimate over its support grid.
    pub fn integral_sq(&self) -> f64 {
        self.trapezoid(|t| self.predict(t).powi(2))
    }
}

/// Silverman's rule of thumb `1.06 sd n^(-1/5)`.
pub fn silverman(z: &[f64]) -> Result<f64> {
    if z.len() < 2 {
        return Err(Error::EmptyData);
    }
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if sd <= 0.0 {
        return Err(Error::InvalidData("constant sample has no Silverman bandwidth".into()));
    }
    Ok(1.06 * sd * n.powf(-0.2))
}

/// Which regression family a tuning grid belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Knn,
    Kernel,
    Density,
}

/// Pick the grid value with the lowest cross-validated loss, breaking ties
/// toward the smoother setting (larger k or h). Squared prediction error for
/// regression; the least-squares criterion `int p^2 - 2 mean p(Z_test)` for
/// densities (`y` is ignored then, `x` must have one column).
pub fn select_tuning_cv(x: &Matrix, y: &[f64], family: Family, grid: &[f64], folds: usize, seed: u64) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::GridEmpty);
    }
    let mut order: Vec<f64> = grid.to_vec();
    order.sort_by(|a, b| b.total_cmp(a));
    order.dedup();
    if order.len() == 1 {
        return Ok(order[0]);
    }
    if folds < 2 {
        return Err(Error::InvalidLearner(format!("cv={folds}")));
    }
    let plan = FoldPlan::new(x.rows(), folds, seed)?;
    let mut loss = vec![0.0; order.len()];
    for k in 0..folds {
        let (train, test) = plan.split(k);
        let xt = x.select(&train);
        match family {
            Family::Knn => {
                let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
                let fit = RegressionFit::build(&xt, &yt, Method::Knn { k: 1 })?;
                let kmax = order[0] as usize;
                for &i in &test {
                    let nb = fit.neighbors(&fit.std.apply(x.row(i)), kmax);
                    let mut prefix = Vec::with_capacity(nb.len() + 1);
                    prefix.push(0.0);
                    for &j in &nb {
                        prefix.push(prefix.last().unwrap() + fit.y[j]);
                    }
                    for (l, &kv) in loss.iter_mut().zip(&order) {
                        let kk = kv as usize;
                        if kk == 0 || kk > nb.len() {
                            *l = f64::INFINITY;
                        } else {
                            *l += (prefix[kk] / kk as f64 - y[i]).powi(2);
                        }
                    }
                }
            }
            Family::Kernel => {
                let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
                for (l, &h) in loss.iter_mut().zip(&order) {
                    let fit = fit_kernel_regression(&xt, &yt, h)?;
                    *l += test.iter().map(|&i| (fit.predict(x.row(i)) - y[i]).powi(2)).sum::<f64>();
                }
            }
            Family::Density => {
                let zt: Vec<f64> = train.iter().map(|&i| x.row(i)[0]).collect();
                for (l, &h) in loss.iter_mut().zip(&order) {
                    let fit = fit_density(&zt, h)?;
                    let m = test.iter().map(|&i| fit.predict(x.row(i)[0])).sum::<f64>() / test.len() as f64;
                    *l += fit.integral_sq() - 2.0 * m;
                }
            }
        }
    }
    let mut best = 0;
    for i in 1..order.len() {
        let tol = 1e-12 * loss[best].abs().max(1.0);
        if (!loss[best].is_finite() && loss[i].is_finite()) || loss[i] < loss[best] - tol {
            best = i;
        }
    }
    if !loss[best].is_finite() {
        return Err(Error::KTooLarge {
            k: order[order.len() - 1] as usize,
            n: x.rows(),
        });
    }
    Ok(order[best])
}

/// How a tuning parameter is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum Tuning {
    Fixed(f64),
    Silverman,
    Cv { folds: usize, grid: Vec<f64> },
}

/// Parsed learner specification.
#[derive(Debug, Clone, PartialEq)]
pub enum LearnerSpec {
    Knn(Tuning),
    Nw(Tuning),
    Hist(f64),
    Kde(Tuning),
    Const(f64),
    /// Use the simulation's true nuisance (only meaningful inside simlab).
    Oracle,
}

const DEFAULT_KNN_GRID: [f64; 5] = [5.0, 10.0, 25.0, 50.0, 100.0];
const DEFAULT_H_GRID: [f64; 5] = [0.05, 0.1, 0.2, 0.4, 0.8];

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

impl fmt::Display for Tuning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tuning::Fixed(v) => write!(f, "{}", fmt_num(*v)),
            Tuning::Silverman => write!(f, "silverman"),
            Tuning::Cv { folds, grid } => {
                let g: Vec<String> = grid.iter().map(|v| fmt_num(*v)).collect();
                write!(f, "cv={folds}, grid=[{}]", g.join(","))
            }
        }
    }
}

impl fmt::Display for LearnerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tuned = |f: &mut fmt::Formatter<'_>, name: &str, key: &str, t: &Tuning| match t {
            Tuning::Cv { .. } => write!(f, "{name}({t})"),
            _ => write!(f, "{name}({key}={t})"),
        };
        match self {
            LearnerSpec::Knn(t) => tuned(f, "knn", "k", t),
            LearnerSpec::Nw(t) => tuned(f, "nw", "h", t),
            LearnerSpec::Kde(t) => tuned(f, "kde", "h", t),
            LearnerSpec::Hist(w) => write!(f, "hist(w={})", fmt_num(*w)),
            LearnerSpec::Const(c) => write!(f, "const(c={})", fmt_num(*c)),
            LearnerSpec::Oracle => write!(f, "oracle"),
        }
    }
}

impl std::str::FromStr for LearnerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<LearnerSpec> {
        parse_learner(s)
    }
}

enum Arg {
    Num(f64),
    Word(String),
    List(Vec<f64>),
}

fn parse_args(body: &str, whole: &str) -> Result<Vec<(String, Arg)>> {
    let bad = || Error::InvalidLearner(whole.to_string());
    let mut out = Vec::new();
    let mut rest = body.trim();
    while !rest.is_empty() {
        let eq = rest.find('=').ok_or_else(bad)?;
        let key = rest[..eq].trim().to_string();
        rest = rest[eq + 1..].trim_start();
        let (value, tail) = if let Some(inner) = rest.strip_prefix('[') {
            let close = inner.find(']').ok_or_else(bad)?;
            let items = inner[..close]
                .split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            (Arg::List(items), &inner[close + 1..])
        } else {
            let end = rest.find(',').unwrap_or(rest.len());
            let tok = rest[..end].trim();
            let v = match tok.parse::<f64>() {
                Ok(x) => Arg::Num(x),
                Err(_) if !tok.is_empty() && tok.chars().all(|c| c.is_ascii_alphabetic()) => Arg::Word(tok.to_string()),
                Err(_) => return Err(bad()),
            };
            (v, &rest[end..])
        };
        out.push((key, value));
        rest = tail.trim_start();
        if let Some(t) = rest.strip_prefix(',') {
            rest = t.trim_start();
            if rest.is_empty() {
                return Err(bad());
            }
        } else if !rest.is_empty() {
            return Err(bad());
        }
    }
    Ok(out)
}

/// Parse a learner specification such as `knn(cv=5, grid=[5,10,25])`.
pub fn parse_learner(text: &str) -> Result<LearnerSpec> {
    let s = text.trim();
    let bad = || Error::InvalidLearner(text.to_string());
    if s == "oracle" {
        return Ok(LearnerSpec::Oracle);
    }
    let open = s.find('(').ok_or_else(bad)?;
    let body = s[open + 1..].strip_suffix(')').ok_or_else(bad)?;
    let name = s[..open].trim();
    let args = parse_args(body, text)?;
    let tuning = |key: &str, default_grid: &[f64], integer: bool| -> Result<Tuning> {
        let mut fixed = None;
        let mut folds = None;
        let mut grid = None;
        for (k, v) in &args {
            match (k.as_str(), v) {
                (k2, Arg::Num(x)) if k2 == key && fixed.is_none() => fixed = Some(Tuning::Fixed(*x)),
                (k2, Arg::Word(w)) if k2 == key && w == "silverman" && name == "kde" => fixed = Some(Tuning::Silverman),
                ("cv", Arg::Num(x)) if folds.is_none() && *x >= 2.0 && x.fract() == 0.0 => folds = Some(*x as usize),
                ("grid", Arg::List(g)) if grid.is_none() && !g.is_empty() => grid = Some(g.clone()),
                _ => return Err(bad()),
            }
        }
        let t = match (fixed, folds, grid) {
            (Some(t), None, None) => t,
            (None, Some(f), g) => Tuning::Cv {
                folds: f,
                grid: g.unwrap_or_else(|| default_grid.to_vec()),
            },
            _ => return Err(bad()),
        };
        let valid = |v: f64| v > 0.0 && v.is_finite() && (!integer || v.fract() == 0.0);
        match &t {
            Tuning::Fixed(v) if !valid(*v) => Err(bad()),
            Tuning::Cv { grid, .. } if !grid.iter().all(|v| valid(*v)) => Err(bad()),
            _ => Ok(t),
        }
    };
    let single = |key: &str| -> Result<f64> {
        match args.as_slice() {
            [(k, Arg::Num(v))] if k == key => Ok(*v),
            _ => Err(bad()),
        }
    };
    match name {
        "knn" => Ok(LearnerSpec::Knn(tuning("k", &DEFAULT_KNN_GRID, true)?)),
        "nw" => Ok(LearnerSpec::Nw(tuning("h", &DEFAULT_H_GRID, false)?)),
        "kde" => Ok(LearnerSpec::Kde(tuning("h", &DEFAULT_H_GRID, false)?)),
        "hist" => {
            let w = single("w")?;
            if w > 0.0 && w.is_finite() {
                Ok(LearnerSpec::Hist(w))
            } else {
                Err(bad())
            }
        }
        "const" => Ok(LearnerSpec::Const(single("c")?)),
        _ => Err(bad()),
    }
}

/// A fitted regression nuisance plus the tuning that was used.
#[derive(Clone)]
pub struct Fitted {
    pub f: NuisanceFn,
    pub chosen: String,
}

impl fmt::Debug for Fitted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fitted({})", self.chosen)
    }
}

/// Fit a regression learner described by `spec`.
pub fn fit_regression(spec: &LearnerSpec, x: &Matrix, y: &[f64], seed: u64) -> Result<Fitted> {
    check_training(x, y)?;
    let fit = match spec {
        LearnerSpec::Const(c) => {
            let c = *c;
            return Ok(Fitted {
                f: Arc::new(move |_: &[f64]| c),
                chosen: spec.to_string(),
            });
        }
        LearnerSpec::Knn(Tuning::Fixed(k)) => fit_knn(x, y, *k as usize)?,
        LearnerSpec::Knn(Tuning::Cv { folds, grid }) => {
            let usable: Vec<f64> = grid.iter().copied().filter(|&k| k as usize * folds <= x.rows() * (folds - 1)).collect();
            let grid = if usable.is_empty() { grid.clone() } else { usable };
            let k = select_tuning_cv(x, y, Family::Knn, &grid, *folds, seed)?;
            fit_knn(x, y, k as usize)?
        }
        LearnerSpec::Nw(Tuning::Fixed(h)) => fit_kernel_regression(x, y, *h)?,
        LearnerSpec::Nw(Tuning::Cv { folds, grid }) => {
            let h = select_tuning_cv(x, y, Family::Kernel, grid, *folds, seed)?;
            fit_kernel_regression(x, y, h)?
        }
        LearnerSpec::Hist(w) => fit_histogram(x, y, *w)?,
        other => {
            return Err(Error::InvalidLearner(format!("`{other}` is not a regression learner here")));
        }
    };
    Ok(Fitted {
        chosen: fit.method().to_string(),
        f: fit.into_fn(),
    })
}

/// Fit a density learner (`kde(..)`) to a univariate sample.
pub fn fit_density_spec(spec: &LearnerSpec, z: &[f64], seed: u64) -> Result<DensityFit> {
    let h = match spec {
        LearnerSpec::Kde(Tuning::Fixed(h)) => *h,
        LearnerSpec::Kde(Tuning::Silverman) => silverman(z)?,
        LearnerSpec::Kde(Tuning::Cv { folds, grid }) => {
            select_tuning_cv(&Matrix::column(z.to_vec()), &[], Family::Density, grid, *folds, seed)?
        }
        other => return Err(Error::InvalidLearner(format!("`{other}` is not a density learner"))),
    };
    fit_density(z, h)
}

/// Root mean squared gap between two functions over the rows of `points`,
/// a Monte Carlo estimate of the L2 distance when the rows are fresh draws.
pub fn l2_error(fitted: &dyn Fn(&[f64]) -> f64, truth: &dyn Fn(&[f64]) -> f64, points: &Matrix) -> Result<f64> {
    if points.rows() == 0 {
        return Err(Error::EmptyData);
    }
    let ss: f64 = (0..points.rows())
        .map(|i| {
            let x = points.row(i);
            (fitted(x) - truth(x)).powi(2)
        })
        .sum();
    Ok((ss / points.rows() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize) -> (Matrix, Vec<f64>) {
        let x: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        (Matrix::column(x.clone()), x)
    }

    #[test]
    fn knn_examples() {
        let x = Matrix::column(vec![0.0, 1.0, 2.0]);
        let fit = fit_knn(&x, &[0.0, 1.0, 1.0], 3).unwrap();
        assert!((fit.predict(&[5.0]) - 2.0 / 3.0).abs() < 1e-15);
        let fit = fit_knn(&x, &[0.3, 0.7, 0.9], 1).unwrap();
        assert_eq!(fit.predict(&[1.0]), 0.7);
        assert!(matches!(fit_knn(&x, &[0.0; 3], 4), Err(Error::KTooLarge { k: 4, n: 3 })));
        assert!(matches!(fit_knn(&Matrix::column(vec![]), &[], 1), Err(Error::EmptyData)));
    }

    #[test]
    fn knn_ties_prefer_lowest_row() {
        // query 1.0 is equidistant from rows 0 and 2; row 0 wins
        let x = Matrix::column(vec![0.0, 5.0, 2.0]);
        let fit = fit_knn(&x, &[10.0, 20.0, 30.0], 1).unwrap();
        assert_eq!(fit.predict(&[1.0]), 10.0);
        // duplicates: rows 1 and 3 share a location
        let x = Matrix::column(vec![0.0, 1.0, 9.0, 1.0]);
        let fit = fit_knn(&x, &[0.0, 1.0, 2.0, 3.0], 1).unwrap();
        assert_eq!(fit.predict(&[1.0]), 1.0);
        // same rule in two dimensions
        let x = Matrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        let fit = fit_knn(&x, &[1.0, 2.0, 3.0, 4.0], 1).unwrap();
        assert_eq!(fit.predict(&[1.0, 0.0]), 1.0);
    }

    #[test]
    fn sorted_path_matches_brute_force() {
        let xs = [0.5, 0.1, 0.9, 0.5, 0.3, 0.7, 0.5, 0.2];
        let x = Matrix::column(xs.to_vec());
        let y: Vec<f64> = (0..xs.len()).map(|i| i as f64).collect();
        let fit = fit_knn(&x, &y, 1).unwrap();
        let q = fit.std.apply(&[0.45]);
        for k in 1..=xs.len() {
            let got = fit.neighbors(&q, k);
            let mut all: Vec<(f64, usize)> = (0..xs.len()).map(|i| ((fit.x.row(i)[0] - q[0]).abs(), i)).collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let want: Vec<usize> = all.iter().take(k).map(|p| p.1).collect();
            assert_eq!(got, want, "k={k}");
        }
    }

    #[test]
    fn kernel_regression_examples() {
        let (x, _) = line(20);
        let fit = fit_kernel_regression(&x, &[4.0; 20], 0.3).unwrap();
        assert!((fit.predict(&[0.37]) - 4.0).abs() < 1e-12);
        let y: Vec<f64> = (0..20).map(|i| (i * i) as f64).collect();
        let mean = y.iter().sum::<f64>() / 20.0;
        let fit = fit_kernel_regression(&x, &y, 1e6).unwrap();
        assert!((fit.predict(&[0.1]) - mean).abs() < 1e-6);
        let one = fit_kernel_regression(&Matrix::column(vec![2.0]), &[7.0], 0.5).unwrap();
        assert_eq!(one.predict(&[-100.0]), 7.0);
        // far outside the data the weights underflow and 1-NN takes over
        let fit = fit_kernel_regression(&x, &y, 0.01).unwrap();
        assert_eq!(fit.predict(&[1e6]), y[19]);
    }

    #[test]
    fn density_examples() {
        let d = fit_density(&[0.0], 1.0).unwrap();
        assert!((d.predict(0.0) - 0.398_942_280_401_432_7).abs() < 1e-15);
        assert!((d.integral() - 1.0).abs() < 1e-3);
        let d = fit_density(&[-1.0, 1.0], 1.0).unwrap();
        for t in [0.1, 0.7, 2.5] {
            assert!((d.predict(t) - d.predict(-t)).abs() < 1e-12);
        }
        assert!((d.integral() - 1.0).abs() < 0.02);
    }

    #[test]
    fn silverman_rule() {
        let z = [1.0, 2.0, 3.0, 4.0];
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((silverman(&z).unwrap() - 1.06 * sd * 4f64.powf(-0.2)).abs() < 1e-15);
    }

    #[test]
    fn cv_examples() {
        let (x, y) = line(200);
        let k = select_tuning_cv(&x, &y, Family::Knn, &[1.0, 200.0], 5, 3).unwrap();
        assert_eq!(k, 1.0);
        let c = vec![2.5; 200];
        assert_eq!(select_tuning_cv(&x, &c, Family::Knn, &[1.0, 5.0, 25.0], 5, 3).unwrap(), 25.0);
        assert_eq!(select_tuning_cv(&x, &c, Family::Kernel, &[0.1, 0.4], 5, 3).unwrap(), 0.4);
        assert_eq!(select_tuning_cv(&x, &y, Family::Knn, &[7.0], 5, 3).unwrap(), 7.0);
        assert!(matches!(select_tuning_cv(&x, &y, Family::Knn, &[], 5, 3), Err(Error::GridEmpty)));
    }

    #[test]
    fn clamp_examples() {
        let x = Matrix::column(vec![0.0, 1.0, 2.0]);
        let fit = clamp(fit_knn(&x, &[0.001, 0.5, 1.2], 1).unwrap(), 0.01, 0.99);
        assert_eq!(fit.predict(&[0.0]), 0.01);
        assert_eq!(fit.predict(&[1.0]), 0.5);
        assert_eq!(fit.predict(&[2.0]), 0.99);
        assert_eq!(fit.clamp_events(), 2);
    }

    #[test]
    fn learner_grammar() {
        for text in [
            "knn(k=25)",
            "knn(cv=5, grid=[5,10,25,50,100])",
            "nw(h=0.1)",
            "kde(h=silverman)",
            "kde(h=0.3)",
            "hist(w=0.25)",
            "const(c=0)",
            "oracle",
        ] {
            let spec = parse_learner(text).unwrap();
            assert_eq!(parse_learner(&spec.to_string()).unwrap(), spec, "{text}");
        }
        assert_eq!(
            parse_learner("knn(cv=3)").unwrap(),
            LearnerSpec::Knn(Tuning::Cv {
                folds: 3,
                grid: DEFAULT_KNN_GRID.to_vec()
            })
        );
        for bad in ["knn", "knn(k=2.5)", "knn(k=0)", "nw(h=silverman)", "knn(k=3,)", "foo(k=1)", "knn(k=3, cv=5)", "kde(h=-1)"] {
            assert!(parse_learner(bad).is_err(), "{bad}");
        }
    }
}

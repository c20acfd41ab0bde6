//! One-dimensional hyperparameter sweeps over training keys.

use std::fmt::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;

use crate::data::format_sig9;
use crate::error::{Error, Result};
use crate::eval::{mean_std, EvalResult};
use crate::training::Regime;

use super::config::ExperimentConfig;
use super::pipeline::{eval_run, train_run, Layout, Workspace};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    /// Full config key, e.g. `train.tau`.
    pub key: String,
    /// Name as written on the command line, used for directories.
    pub name: String,
    pub values: Vec<String>,
}

/// `tau=0.5,1,2,5` or `eta=0.1..0.9`. A range steps by one unit of the
/// finest decimal place written in its endpoints.
pub fn parse_grid(spec: &str) -> Result<Grid> {
    let bad = |why: &str| Error::Config(format!("malformed grid `{spec}`: {why}"));
    let (name, values) = spec.split_once('=').ok_or_else(|| bad("expected key=values"))?;
    let name = name.trim();
    if values.contains('=') {
        return Err(bad("a grid sweeps exactly one key"));
    }
    let key = if name.contains('.') {
        name.to_string()
    } else {
        format!("train.{name}")
    };
    if !key.starts_with("train.") {
        return Err(bad("only train.* keys can be swept"));
    }
    let values = values.trim();
    let values: Vec<String> = if let Some((a, b)) = values.split_once("..") {
        expand_range(a.trim(), b.trim()).ok_or_else(|| bad("bad range"))?
    } else {
        values.split(',').map(|v| v.trim().to_string()).collect()
    };
    if values.is_empty() || values.iter().any(|v| v.is_empty()) {
        return Err(bad("empty value"));
    }
    let mut seen = values.clone();
    seen.sort();
    seen.dedup();
    if seen.len() != values.len() {
        return Err(bad("repeated value"));
    }
    Ok(Grid {
        key,
        name: name.to_string(),
        values,
    })
}

fn decimals(s: &str) -> usize {
    s.split_once('.').map_or(0, |(_, f)| f.len())
}

fn expand_range(a: &str, b: &str) -> Option<Vec<String>> {
    let d = decimals(a).max(decimals(b));
    if d > 9 {
        return None;
    }
    let scale = 10f64.powi(d as i32);
    let (lo, hi): (f64, f64) = (a.parse().ok()?, b.parse().ok()?);
    if !lo.is_finite() || !hi.is_finite() {
        return None;
    }
    let (lo, hi) = ((lo * scale).round() as i64, (hi * scale).round() as i64);
    if lo > hi || hi - lo > 10_000 {
        return None;
    }
    Some((lo..=hi).map(|i| format!("{:.*}", d, i as f64 / scale)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: String,
    /// Per seed, the evaluation results in config metric order.
    pub results: Vec<(u64, Vec<EvalResult>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub grid: Grid,
    pub regime: &'static str,
    pub points: Vec<SweepPoint>,
    pub csv: String,
    pub csv_path: PathBuf,
}

impl SweepOutcome {
    /// Per-point seed means of one metric, in grid order.
    pub fn point_means(&self, metric: &str) -> Vec<f64> {
        self.points
            .iter()
            .map(|p| {
                let v: Vec<f64> = p
                    .results
                    .iter()
                    .filter_map(|(_, rs)| rs.iter().find(|r| metric_name(r) == metric).map(|r| r.macro_avg))
                    .collect();
                mean_std(&v).0
            })
            .collect()
    }

    /// Sample std of the point means.
    pub fn cross_grid_std(&self, metric: &str) -> f64 {
        mean_std(&self.point_means(metric)).1
    }
}

fn metric_name(r: &EvalResult) -> String {
    format!("{}@{}", r.metric.name(), r.k)
}

/// Trains and evaluates every grid point for every configured seed, in
/// parallel. Runs go to `sweep/<name>/<regime>/<value>/seed-<s>/`.
pub fn sweep(cfg: &ExperimentConfig, layout: &Layout, grid: &Grid) -> Result<SweepOutcome> {
    let configs = grid
        .values
        .iter()
        .map(|v| cfg.with_override(&grid.key, v))
        .collect::<Result<Vec<_>>>()?;
    let regime = cfg.train.regime;
    match (grid.key.as_str(), regime) {
        ("train.eta", r) if !matches!(r, Regime::Denoise { .. }) => {
            return Err(Error::Config("sweeping eta needs train.regime = denoise".into()))
        }
        ("train.tau", r) if r != Regime::Cet => {
            return Err(Error::Config("sweeping tau needs train.regime = cet".into()))
        }
        ("train.regime", _) => return Err(Error::Config("train.regime cannot be swept".into())),
        _ => {}
    }
    let ws = Workspace::load(cfg, layout)?;
    let base = layout.root.join("sweep").join(&grid.name).join(regime.name());
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|i| cfg.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let value = &grid.values[i];
            let dir = base.join(value).join(format!("seed-{seed}"));
            let label = format!("{}[{}={}]", regime.name(), grid.name, value);
            train_run(&ws, &configs[i], seed, &dir, &label)?;
            eval_run(&ws, &configs[i], &dir)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut points: Vec<SweepPoint> = grid
        .values
        .iter()
        .map(|v| SweepPoint {
            value: v.clone(),
            results: Vec::new(),
        })
        .collect();
    for (&(i, seed), res) in jobs.iter().zip(results) {
        points[i].results.push((seed, res));
    }
    let mut outcome = SweepOutcome {
        grid: grid.clone(),
        regime: regime.name(),
        points,
        csv: String::new(),
        csv_path: base.join("sweep.csv"),
    };

    let mut csv = String::from("key,value,regime,metric,n,mean,std\n");
    for &(m, k) in &cfg.metrics {
        let name = format!("{}@{k}", m.name());
        for p in &outcome.points {
            let v: Vec<f64> = p
                .results
                .iter()
                .filter_map(|(_, rs)| rs.iter().find(|r| metric_name(r) == name).map(|r| r.macro_avg))
                .collect();
            let (mean, std) = mean_std(&v);
            let _ = writeln!(
                csv,
                "{},{},{},{name},{},{},{}",
                grid.key,
                p.value,
                regime.name(),
                v.len(),
                format_sig9(mean),
                format_sig9(std)
            );
        }
    }
    for &(m, k) in &cfg.metrics {
        let name = format!("{}@{k}", m.name());
        let _ = writeln!(
            csv,
            "{},cross_grid_std,{},{name},{},,{}",
            grid.key,
            regime.name(),
            outcome.points.len(),
            format_sig9(outcome.cross_grid_std(&name))
        );
    }
    crate::io::write_text(&outcome.csv_path, &csv)?;
    outcome.csv = csv;
    Ok(outcome)
}

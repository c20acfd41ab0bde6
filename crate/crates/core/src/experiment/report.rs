//! Aggregation of finished runs into a regime × metric table with paired
//! sign tests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::format_sig9;
use crate::error::{Error, Result};
use crate::eval::{mean_std, sign_test, SignTest};
use crate::io;

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub label: String,
    pub seed: u64,
    pub fingerprint: String,
    /// Macro averages keyed by `name@k`.
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub n: usize,
    /// `(mean, std)` per metric.
    pub stats: BTreeMap<String, (f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairTest {
    pub a: String,
    pub b: String,
    pub metric: String,
    pub test: SignTest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub metrics: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub tests: Vec<PairTest>,
}

/// Metric compared by the sign tests when present.
pub const TEST_METRIC: &str = "mrr@10";

fn parse_meta(text: &str, file: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::schema(file, i + 1, "expected key=value"))?;
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

fn parse_metrics(text: &str, file: &str) -> Result<BTreeMap<String, f64>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if format!("{h}\n") == crate::eval::CSV_HEADER => {}
        _ => return Err(Error::schema(file, 1, "missing metric,k,query_id,value header")),
    }
    let mut out = BTreeMap::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::schema(file, i + 1, "expected 4 comma-separated fields"));
        }
        let v: f64 = f[3]
            .parse()
            .map_err(|_| Error::schema(file, i + 1, format!("bad value `{}`", f[3])))?;
        if f[2] == "macro" {
            out.insert(format!("{}@{}", f[0], f[1]), v);
        }
    }
    Ok(out)
}

fn walk(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == "run.meta") {
            found.push(p);
        }
    }
    Ok(())
}

/// Every evaluated run (a `run.meta` with a sibling `metrics.csv`) under
/// `dir`, in path order.
pub fn collect_runs(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut metas = Vec::new();
    walk(dir, &mut metas)?;
    let mut runs = Vec::new();
    for meta_path in metas {
        let run_dir = meta_path.parent().expect("file has a parent").to_path_buf();
        let metrics_path = run_dir.join("metrics.csv");
        if !metrics_path.exists() {
            continue;
        }
        let meta = io::load(&meta_path, parse_meta)?;
        let file = meta_path.display().to_string();
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::schema(&file, 0, format!("missing `{k}`")))
        };
        let seed: u64 = field("seed")?
            .parse()
            .map_err(|_| Error::schema(&file, 0, "bad seed"))?;
        runs.push(RunRecord {
            label: field("label")?,
            seed,
            fingerprint: field("world_fingerprint")?,
            metrics: io::load(&metrics_path, parse_metrics)?,
            dir: run_dir,
        });
    }
    Ok(runs)
}

pub fn report(dir: &Path) -> Result<Report> {
    let runs = collect_runs(dir)?;
    let Some(first) = runs.first() else {
        return Err(Error::Config(format!("no evaluated runs under {}", dir.display())));
    };
    if let Some(other) = runs.iter().find(|r| r.fingerprint != first.fingerprint) {
        return Err(Error::Incompatible(format!(
            "runs {} and {} come from different worlds",
            first.dir.display(),
            other.dir.display()
        )));
    }
    let mut by_label: BTreeMap<&str, BTreeMap<u64, &RunRecord>> = BTreeMap::new();
    for r in &runs {
        if by_label.entry(&r.label).or_default().insert(r.seed, r).is_some() {
            return Err(Error::Incompatible(format!("label {} has seed {} twice", r.label, r.seed)));
        }
    }
    let metrics: Vec<String> = first.metrics.keys().cloned().collect();
    let rows = by_label
        .iter()
        .map(|(label, seeds)| {
            let stats = metrics
                .iter()
                .map(|m| {
                    let v: Vec<f64> = seeds.values().filter_map(|r| r.metrics.get(m).copied()).collect();
                    (m.clone(), mean_std(&v))
                })
                .collect();
            ReportRow {
                label: label.to_string(),
                n: seeds.len(),
                stats,
            }
        })
        .collect();
    let metric = if metrics.iter().any(|m| m == TEST_METRIC) {
        TEST_METRIC.to_string()
    } else {
        metrics.first().cloned().unwrap_or_default()
    };
    let labels: Vec<&&str> = by_label.keys().collect();
    let mut tests = Vec::new();
    for (i, a) in labels.iter().enumerate() {
        for b in &labels[i + 1..] {
            let pairs: Vec<(f64, f64)> = by_label[**a]
                .iter()
                .filter_map(|(seed, ra)| {
                    let rb = by_label[**b].get(seed)?;
                    Some((*ra.metrics.get(&metric)?, *rb.metrics.get(&metric)?))
                })
                .collect();
            tests.push(PairTest {
                a: a.to_string(),
                b: b.to_string(),
                metric: metric.clone(),
                test: sign_test(&pairs),
            });
        }
    }
    Ok(Report { metrics, rows, tests })
}

pub fn format_p(p: Option<f64>) -> String {
    p.map_or_else(|| "no difference".to_string(), format_sig9)
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,n,metric,mean,std\n");
        for r in &self.rows {
            for (m, (mean, std)) in &r.stats {
                let _ = writeln!(s, "{},{},{m},{},{}", r.label, r.n, format_sig9(*mean), format_sig9(*std));
            }
        }
        s
    }

    pub fn sign_tests_csv(&self) -> String {
        let mut s = String::from("a,b,metric,wins,losses,ties,p_value\n");
        for t in &self.tests {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                t.a,
                t.b,
                t.metric,
                t.test.wins,
                t.test.losses,
                t.test.ties,
                format_p(t.test.p_value)
            );
        }
        s
    }
}

impl std::fmt::Display for Report {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
        write!(f, "{:<width$}  {:>3}", "label", "n")?;
        for m in &self.metrics {
            write!(f, "  {m:>17}")?;
        }
        writeln!(f)?;
        for r in &self.rows {
            write!(f, "{:<width$}  {:>3}", r.label, r.n)?;
            for m in &self.metrics {
                let (mean, std) = r.stats[m];
                write!(f, "  {:>17}", format!("{mean:.4} ± {std:.4}"))?;
            }
            writeln!(f)?;
        }
        for t in &self.tests {
            writeln!(
                f,
                "sign test {} vs {} on {}: {} wins, {} losses, {} ties, p = {}",
                t.a,
                t.b,
                t.metric,
                t.test.wins,
                t.test.losses,
                t.test.ties,
                format_p(t.test.p_value)
            )?;
        }
        Ok(())
    }
}

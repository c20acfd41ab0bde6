//! Pipeline stages. Each stage reads the files written by the stages before
//! it and writes only documented formats under the output root.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::{format_sig9, GroundTruth, LabeledDataset, Run};
use crate::error::{Error, Result};
use crate::eval::{self, EvalResult};
use crate::io;
use crate::retriever::Retriever;
use crate::scorer::DifferentiableScorer;
use crate::training::{self, log_to_csv, DevSet, FeatureStore, Regime};
use crate::world::{self, LatentSpace, Split, World};

use super::config::{ExperimentConfig, PoolerSpec};

/// File locations under one output root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn world_dir(&self) -> PathBuf {
        self.root.join("world")
    }
    pub fn corpus(&self) -> PathBuf {
        self.world_dir().join("corpus.tsv")
    }
    pub fn queries(&self, split: Split) -> PathBuf {
        self.world_dir().join(format!("queries.{}.tsv", split.name()))
    }
    pub fn qrels(&self) -> PathBuf {
        self.world_dir().join("qrels.tsv")
    }
    pub fn latent_docs(&self) -> PathBuf {
        self.world_dir().join("latent_docs.tsv")
    }
    pub fn latent_queries(&self) -> PathBuf {
        self.world_dir().join("latent_queries.tsv")
    }
    pub fn world_summary(&self) -> PathBuf {
        self.world_dir().join("summary.tsv")
    }
    pub fn labels(&self) -> PathBuf {
        self.root.join("pool").join("labels.qrels")
    }
    pub fn selection(&self) -> PathBuf {
        self.root.join("pool").join("selection.tsv")
    }
    pub fn dropped(&self) -> PathBuf {
        self.root.join("pool").join("dropped.txt")
    }
    pub fn strong_run(&self) -> PathBuf {
        self.root.join("retrieval").join("strong.run")
    }
    pub fn pooler_run(&self) -> PathBuf {
        self.root.join("retrieval").join("pooler.run")
    }
    pub fn retrieval_summary(&self) -> PathBuf {
        self.root.join("retrieval").join("summary.csv")
    }
    pub fn runs_dir(&self) -> PathBuf {
        self.root.join("runs")
    }
    pub fn run_dir(&self, regime: Regime, seed: u64) -> PathBuf {
        self.runs_dir().join(regime.name()).join(format!("seed-{seed}"))
    }

    fn world_files(&self) -> Vec<PathBuf> {
        let mut files = vec![self.corpus()];
        files.extend([Split::Train, Split::Dev, Split::Test].map(|s| self.queries(s)));
        files.extend([self.qrels(), self.latent_docs(), self.latent_queries()]);
        files
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSummary {
    pub n_docs: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub positives: BTreeMap<String, usize>,
}

impl std::fmt::Display for WorldSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let counts: Vec<usize> = self.positives.values().copied().collect();
        let mean = counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64;
        write!(
            f,
            "docs {}  queries train/dev/test {}/{}/{}  positives per query min {} mean {} max {}",
            self.n_docs,
            self.n_train,
            self.n_dev,
            self.n_test,
            counts.iter().min().unwrap_or(&0),
            format_sig9(mean),
            counts.iter().max().unwrap_or(&0)
        )
    }
}

pub fn gen_world(cfg: &ExperimentConfig, layout: &Layout) -> Result<WorldSummary> {
    let world = world::generate_world(&cfg.world)?;
    io::write_text(&layout.corpus(), &io::write_corpus(&world.corpus))?;
    for split in [Split::Train, Split::Dev, Split::Test] {
        io::write_text(&layout.queries(split), &io::write_queries(world.split(split)))?;
    }
    io::write_text(&layout.qrels(), &io::write_qrels(world.truth.as_map()))?;
    let latent_docs: Vec<(&str, &[f64])> = world
        .corpus
        .iter()
        .map(|d| (d.doc_id.as_str(), world.latent.doc(&d.doc_id).expect("latent for every doc")))
        .collect();
    io::write_text(&layout.latent_docs(), &io::write_vectors(latent_docs))?;
    let latent_queries: Vec<(&str, &[f64])> = world
        .all_queries()
        .map(|q| (q.query_id.as_str(), world.latent.query(&q.query_id).expect("latent for every query")))
        .collect();
    io::write_text(&layout.latent_queries(), &io::write_vectors(latent_queries))?;

    let positives: BTreeMap<String, usize> = world
        .truth
        .as_map()
        .iter()
        .map(|(q, d)| (q.clone(), d.len()))
        .collect();
    let mut table = String::from("query_id\tpositives\n");
    for (q, n) in &positives {
        let _ = writeln!(table, "{q}\t{n}");
    }
    io::write_text(&layout.world_summary(), &table)?;
    Ok(WorldSummary {
        n_docs: world.corpus.len(),
        n_train: world.train.len(),
        n_dev: world.dev.len(),
        n_test: world.test.len(),
        positives,
    })
}

/// Reads the world files back.
pub fn load_world(cfg: &ExperimentConfig, layout: &Layout) -> Result<World> {
    let dim = Some(cfg.world.feature_dim);
    let corpus = io::load(&layout.corpus(), |t, f| io::parse_corpus(t, f, dim))?;
    let [train, dev, test] = [Split::Train, Split::Dev, Split::Test]
        .map(|s| io::load(&layout.queries(s), |t, f| io::parse_queries(t, f, dim)));
    let (train, dev, test) = (train?, dev?, test?);
    let truth = io::load(&layout.qrels(), io::parse_truth)?;
    let latent_dim = Some(cfg.world.latent_dim);
    let latent_docs = io::load(&layout.latent_docs(), |t, f| io::parse_vectors(t, f, latent_dim))?;
    let latent_queries = io::load(&layout.latent_queries(), |t, f| io::parse_vectors(t, f, latent_dim))?;
    if corpus.len() != cfg.world.n_docs
        || train.len() != cfg.world.n_train
        || dev.len() != cfg.world.n_dev
        || test.len() != cfg.world.n_test
    {
        return Err(Error::Incompatible(format!(
            "world files under {} do not match the configured world sizes",
            layout.world_dir().display()
        )));
    }
    let latent = LatentSpace::new(latent_docs.into_iter().collect(), latent_queries.into_iter().collect());
    let world = World::from_parts(cfg.world.clone(), corpus, train, dev, test, truth, latent)?;
    for q in world.truth.queries() {
        if world.query(q).is_none() {
            return Err(Error::UnknownId {
                kind: "query",
                id: q.to_string(),
            });
        }
    }
    Ok(world)
}

/// SHA-256 over the world files, hex encoded.
pub fn world_fingerprint(layout: &Layout) -> Result<String> {
    let mut h = Sha256::new();
    for path in layout.world_files() {
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn pooler(cfg: &ExperimentConfig, world: &World) -> Result<Retriever> {
    match cfg.pooler {
        PoolerSpec::FeatureSubset { dims } => Retriever::feature_subset(dims, cfg.world.feature_dim),
        PoolerSpec::OracleNoisy { sigma, seed } => Retriever::oracle_noisy(world, sigma, seed),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolSummary {
    pub labeled_queries: usize,
    pub labels: usize,
    pub dropped: Vec<String>,
}

pub fn pool(cfg: &ExperimentConfig, layout: &Layout) -> Result<PoolSummary> {
    let mut world = load_world(cfg, layout)?;
    let pooler = pooler(cfg, &world)?;
    let out = world::simulate_pooling(&mut world, &pooler, cfg.pooling)?;
    io::write_text(&layout.labels(), &io::write_qrels(out.dataset.as_map()))?;
    io::write_text(&layout.selection(), &io::write_selection(&out.selection))?;
    let dropped: String = out.dropped.iter().map(|q| format!("{q}\n")).collect();
    io::write_text(&layout.dropped(), &dropped)?;
    Ok(PoolSummary {
        labeled_queries: out.dataset.len(),
        labels: out.dataset.total_positives(),
        dropped: out.dropped,
    })
}

/// One `retriever,split,metric,value` row per line.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalSummary {
    pub rows: Vec<(String, String, String, f64)>,
}

impl RetrievalSummary {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("retriever,split,metric,value\n");
        for (r, split, m, v) in &self.rows {
            let _ = writeln!(s, "{r},{split},{m},{}", format_sig9(*v));
        }
        s
    }

    pub fn get(&self, retriever: &str, split: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|(r, s, m, _)| r == retriever && s == split && m == metric)
            .map(|r| r.3)
    }
}

fn split_run(world: &World, run: &Run, split: Split) -> Run {
    world
        .split(split)
        .iter()
        .filter_map(|q| run.get(&q.query_id).map(|l| (q.query_id.clone(), l.clone())))
        .collect()
}

/// Retrieves candidates for every query with the strong retriever and the
/// pooler, and summarizes both.
pub fn retrieve(cfg: &ExperimentConfig, layout: &Layout) -> Result<RetrievalSummary> {
    let world = load_world(cfg, layout)?;
    let labels = io::load(&layout.labels(), io::parse_labels)?;
    let strong = Retriever::oracle_noisy(&world, cfg.sampler_sigma, cfg.sampler_seed)?;
    let weak = pooler(cfg, &world)?;
    let mut rows = Vec::new();
    for (name, retriever, path) in [
        ("strong", &strong, layout.strong_run()),
        ("pooler", &weak, layout.pooler_run()),
    ] {
        let run: Run = world
            .all_queries()
            .map(|q| Ok((q.query_id.clone(), retriever.retrieve(q, &world.corpus, cfg.retrieve_depth)?)))
            .collect::<Result<_>>()?;
        io::write_text(&path, &io::write_run(&run, name))?;
        let mut splits = vec![("all", run.clone())];
        for s in [Split::Train, Split::Dev, Split::Test] {
            splits.push((s.name(), split_run(&world, &run, s)));
        }
        for (split, sub) in &splits {
            for &(metric, k) in &cfg.metrics {
                let r = eval::evaluate(metric, sub, &world.truth, k)?;
                rows.push((name.to_string(), split.to_string(), format!("{}@{k}", metric.name()), r.macro_avg));
            }
        }
        let top_n = cfg.train.top_n;
        let fn_rate = world::mean_false_negative_rate(&world, &labels, &run, top_n)?;
        rows.push((name.to_string(), "train".into(), format!("fn_rate@{top_n}"), fn_rate));
    }
    let summary = RetrievalSummary { rows };
    io::write_text(&layout.retrieval_summary(), &summary.to_csv())?;
    Ok(summary)
}

/// Everything a training or evaluation run reads, loaded once.
pub struct Workspace {
    pub layout: Layout,
    pub world: World,
    pub labels: LabeledDataset,
    pub strong: Run,
    pub pooler: Run,
    pub fingerprint: String,
}

impl Workspace {
    pub fn load(cfg: &ExperimentConfig, layout: &Layout) -> Result<Self> {
        let world = load_world(cfg, layout)?;
        let labels = io::load(&layout.labels(), io::parse_labels)?;
        let strong = io::load(&layout.strong_run(), io::parse_run)?;
        let pooler = io::load(&layout.pooler_run(), io::parse_run)?;
        for (qid, docs) in labels.as_map() {
            if world.split_of(qid) != Some(Split::Train) {
                return Err(Error::Incompatible(format!("labels name non-training query `{qid}`")));
            }
            if let Some(d) = docs.iter().find(|d| world.document(d).is_none()) {
                return Err(Error::UnknownId {
                    kind: "document",
                    id: d.clone(),
                });
            }
        }
        for run in [&strong, &pooler] {
            check_run(&world, run)?;
        }
        Ok(Workspace {
            fingerprint: world_fingerprint(layout)?,
            layout: layout.clone(),
            world,
            labels,
            strong,
            pooler,
        })
    }

    pub fn features(&self) -> FeatureStore<'_> {
        FeatureStore::from_world(&self.world)
    }

    pub fn split(&self, run: &Run, split: Split) -> Run {
        split_run(&self.world, run, split)
    }
}

fn check_run(world: &World, run: &Run) -> Result<()> {
    for (qid, list) in run {
        if world.query(qid).is_none() {
            return Err(Error::UnknownId {
                kind: "query",
                id: qid.clone(),
            });
        }
        if let Some(d) = list.doc_ids().find(|d| world.document(d).is_none()) {
            return Err(Error::UnknownId {
                kind: "document",
                id: d.to_string(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub dir: PathBuf,
    pub final_loss: Option<f64>,
    pub skipped_queries: usize,
    pub fallback_queries: usize,
}

/// Trains one regime/seed and writes its checkpoints, log and metadata to
/// `dir`. `label` names the run in reports.
pub fn train_run(ws: &Workspace, cfg: &ExperimentConfig, seed: u64, dir: &Path, label: &str) -> Result<TrainSummary> {
    let tc = cfg.train_config(seed);
    let features = ws.features();
    let (r, s) = training::init_models(cfg.arch, features.pair_dim(), seed)?;
    let source = if tc.regime == Regime::Mismatch { &ws.pooler } else { &ws.strong };
    let candidates = ws.split(source, Split::Train);
    let dev_candidates = ws.split(&ws.strong, Split::Dev);
    let dev = (tc.eval_every > 0).then_some(DevSet {
        candidates: &dev_candidates,
        truth: &ws.world.truth,
        depth: cfg.eval_depth,
    });
    let out = training::train(&features, &ws.labels, &candidates, r, s, &tc, dev)?;

    io::write_text(&dir.join("model.ckpt"), &out.relevance.to_checkpoint())?;
    if let Some(sel) = &out.selection {
        io::write_text(&dir.join("selection.ckpt"), &sel.to_checkpoint())?;
    }
    io::write_text(&dir.join("train_log.csv"), &log_to_csv(&out.log))?;
    let mut meta = format!(
        "label={label}\nregime={}\nseed={seed}\nworld_fingerprint={}\n",
        tc.regime.name(),
        ws.fingerprint
    );
    meta.push_str(&cfg.train_echo());
    let _ = writeln!(meta, "skipped_queries={}", out.skipped_queries.join(","));
    let _ = writeln!(meta, "fallback_queries={}", out.fallback_queries.join(","));
    io::write_text(&dir.join("run.meta"), &meta)?;
    Ok(TrainSummary {
        dir: dir.to_path_buf(),
        final_loss: out.log.last().map(|l| l.loss_r),
        skipped_queries: out.skipped_queries.len(),
        fallback_queries: out.fallback_queries.len(),
    })
}

pub fn metrics_csv(results: &[EvalResult]) -> String {
    let mut s = String::from(eval::CSV_HEADER);
    for r in results {
        r.to_csv_rows(&mut s);
    }
    s
}

/// Evaluates `run` against the full truth with every configured metric.
pub fn evaluate_run(cfg: &ExperimentConfig, truth: &GroundTruth, run: &Run) -> Result<Vec<EvalResult>> {
    cfg.metrics
        .iter()
        .map(|&(m, k)| eval::evaluate(m, run, truth, k))
        .collect()
}

/// Reranks the strong retriever's test candidates with the trained model in
/// `dir` and writes `test.run` and `metrics.csv` next to it.
pub fn eval_run(ws: &Workspace, cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<EvalResult>> {
    let ckpt = dir.join("model.ckpt");
    let model = io::load(&ckpt, DifferentiableScorer::from_checkpoint)?;
    let features = ws.features();
    if model.input_dim() != features.pair_dim() {
        return Err(Error::Incompatible(format!(
            "{} expects {} pair features, the world has {}",
            ckpt.display(),
            model.input_dim(),
            features.pair_dim()
        )));
    }
    let test = ws.split(&ws.strong, Split::Test);
    let reranked = eval::rerank_run(&features, &model, &test, cfg.eval_depth)?;
    let tag = dir
        .file_name()
        .map_or_else(|| "model".to_string(), |n| n.to_string_lossy().into_owned());
    io::write_text(&dir.join("test.run"), &io::write_run(&reranked, &tag))?;
    let results = evaluate_run(cfg, &ws.world.truth, &reranked)?;
    io::write_text(&dir.join("metrics.csv"), &metrics_csv(&results))?;
    Ok(results)
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "\
seeds = 1..2
world.seed = 3
world.n_docs = 300
world.n_train = 30
world.n_dev = 5
world.n_test = 6
world.feature_dim = 6
world.latent_dim = 4
world.top_m = 8
pool.subset_dims = 2
pool.depth = 10
retrieve.depth = 50
train.top_n = 30
train.steps = 40
train.batch_size = 8
train.tau = 3
train.clamp = 2
eval.depth = 50
eval.metrics = mrr@10,recall@50
";

struct Env {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
    cfg: PathBuf,
    out: PathBuf,
}

fn env_with(cfg_text: &str) -> Env {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    let cfg = dir.join("exp.cfg");
    fs::write(&cfg, cfg_text).unwrap();
    let out = dir.join("out");
    Env { _tmp: tmp, dir, cfg, out }
}

fn env() -> Env {
    env_with(SMALL)
}

impl Env {
    fn run(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_poolbias"));
        cmd.current_dir(&self.dir).env_remove("POOLBIAS_OUT");
        cmd.arg("--config").arg(&self.cfg).arg("--out").arg(&self.out).args(args);
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.run(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }

    fn prepare(&self) {
        for stage in ["gen-world", "pool", "retrieve"] {
            self.ok(&[stage]);
        }
    }
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn missing_required_key_exits_2_naming_it() {
    let e = env_with(&SMALL.replace("world.n_docs = 300\n", ""));
    let o = e.run(&["gen-world"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("world.n_docs"));
}

#[test]
fn unknown_key_and_missing_config_file() {
    let e = env_with(&format!("{SMALL}train.gamma = 1\n"));
    assert_eq!(e.run(&["gen-world"]).status.code(), Some(2));
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_poolbias"));
    let o = cmd.args(["--config", "/nonexistent/x.cfg", "gen-world"]).output().unwrap();
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn gen_world_is_byte_identical_and_summary_matches_qrels() {
    let e = env();
    let stdout = e.ok(&["gen-world"]);
    assert!(stdout.contains("docs 300"));
    let first = files_under(&e.out.join("world"));
    e.ok(&["gen-world"]);
    assert_eq!(first, files_under(&e.out.join("world")));

    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for line in fs::read_to_string(e.out.join("world/qrels.tsv")).unwrap().lines() {
        *counts.entry(line.split('\t').next().unwrap().to_string()).or_default() += 1;
    }
    let summary = fs::read_to_string(e.out.join("world/summary.tsv")).unwrap();
    let listed: BTreeMap<String, usize> = summary
        .lines()
        .skip(1)
        .map(|l| {
            let (q, n) = l.split_once('\t').unwrap();
            (q.to_string(), n.parse().unwrap())
        })
        .collect();
    assert_eq!(listed, counts);
    assert_eq!(listed.len(), 41);
}

#[test]
fn output_root_precedence() {
    let e = env_with(&format!("{SMALL}output.dir = from-config\n"));
    let bin = env!("CARGO_BIN_EXE_poolbias");
    let run = |env_out: Option<&str>, flag: Option<&str>| {
        let mut cmd = Command::new(bin);
        cmd.current_dir(&e.dir).env_remove("POOLBIAS_OUT");
        if let Some(v) = env_out {
            cmd.env("POOLBIAS_OUT", v);
        }
        cmd.arg("--config").arg(&e.cfg);
        if let Some(f) = flag {
            cmd.args(["--out", f]);
        }
        assert!(cmd.args(["-q", "gen-world"]).status().unwrap().success());
    };
    run(None, None);
    assert!(e.dir.join("from-config/world/corpus.tsv").exists());
    run(Some("from-env"), None);
    assert!(e.dir.join("from-env/world/corpus.tsv").exists());
    run(Some("from-env-2"), Some("from-flag"));
    assert!(e.dir.join("from-flag/world/corpus.tsv").exists());
    assert!(!e.dir.join("from-env-2").exists());
}

#[test]
fn schema_violation_exits_4_with_line_number() {
    let e = env();
    e.prepare();
    let path = e.out.join("retrieval/strong.run");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[2] = "q01\tQ0\td1\tthree\t1.0\tstrong";
    fs::write(&path, lines.join("\n")).unwrap();
    let o = e.run(&["train"]);
    assert_eq!(o.status.code(), Some(4));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3"), "{err}");

    fs::write(e.out.join("world/qrels.tsv"), "q01\t0\td001\n").unwrap();
    let o = e.run(&["pool"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
}

#[test]
fn eval_of_untouched_retriever_run_reproduces_summary() {
    let e = env();
    e.prepare();
    let strong = e.out.join("retrieval/strong.run");
    e.ok(&["eval", "--run", strong.to_str().unwrap()]);
    let metrics = fs::read_to_string(e.out.join("eval/strong/metrics.csv")).unwrap();
    let recomputed = metrics
        .lines()
        .find(|l| l.starts_with("recall,50,macro,"))
        .unwrap()
        .rsplit(',')
        .next()
        .unwrap()
        .to_string();
    let summary = fs::read_to_string(e.out.join("retrieval/summary.csv")).unwrap();
    let listed = summary
        .lines()
        .find(|l| l.starts_with("strong,all,recall@50,"))
        .unwrap()
        .rsplit(',')
        .next()
        .unwrap()
        .to_string();
    assert_eq!(recomputed, listed);
}

#[test]
fn train_eval_report_and_single_point_sweep() {
    let e = env();
    e.prepare();
    for regime in ["naive", "cet"] {
        e.ok(&["train", "--regime", regime]);
        e.ok(&["eval", "--regime", regime]);
    }
    for f in ["model.ckpt", "selection.ckpt", "train_log.csv", "run.meta", "metrics.csv", "test.run"] {
        assert!(e.out.join("runs/cet/seed-1").join(f).exists(), "{f}");
    }
    assert!(!e.out.join("runs/naive/seed-1/selection.ckpt").exists());
    let log = fs::read_to_string(e.out.join("runs/cet/seed-2/train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "step,loss_R,loss_S,mean_w_r,mean_w_s,dev_mrr");
    assert_eq!(log.lines().count(), 41);

    e.ok(&["sweep", "--grid", "tau=3", "--regime", "cet"]);
    for seed in [1, 2] {
        let plain = e.out.join(format!("runs/cet/seed-{seed}"));
        let swept = e.out.join(format!("sweep/tau/cet/3/seed-{seed}"));
        for f in ["metrics.csv", "model.ckpt", "selection.ckpt", "train_log.csv", "test.run"] {
            assert_eq!(fs::read(plain.join(f)).unwrap(), fs::read(swept.join(f)).unwrap(), "{f}");
        }
    }

    let stdout = e.ok(&["report"]);
    assert!(stdout.contains("sign test cet vs naive on mrr@10"));
    let report = fs::read_to_string(e.out.join("report.csv")).unwrap();
    assert!(report.lines().any(|l| l.starts_with("cet,2,mrr@10,")));
}

#[test]
fn tau_grid_emits_one_run_per_point_and_seed() {
    let e = env();
    e.prepare();
    let stdout = e.ok(&["sweep", "--grid", "tau=0.5,1,2,5", "--regime", "cet", "--seeds", "1..3"]);
    assert!(stdout.contains("cross_grid_std"));
    let runs = files_under(&e.out.join("sweep/tau/cet"))
        .keys()
        .filter(|p| p.ends_with("metrics.csv"))
        .count();
    assert_eq!(runs, 4 * 3);
    let csv = fs::read_to_string(e.out.join("sweep/tau/cet/sweep.csv")).unwrap();
    assert!(csv.lines().last().unwrap().starts_with("train.tau,cross_grid_std,cet,recall@50,4,,"));
}

#[test]
fn malformed_grid_exits_2() {
    let e = env();
    for grid in ["tau", "tau=1..", "world.seed=1,2"] {
        assert_eq!(e.run(&["sweep", "--grid", grid, "--regime", "cet"]).status.code(), Some(2), "{grid}");
    }
    assert_eq!(e.run(&["sweep", "--grid", "eta=0.1,0.2", "--regime", "cet"]).status.code(), Some(2));
}

fn fake_run(root: &Path, label: &str, seed: u64, fingerprint: &str, mrr: f64) {
    let dir = root.join(label).join(format!("seed-{seed}"));
    fs::create_dir_all(&dir).unwrap();
    fs::write(
        dir.join("run.meta"),
        format!("label={label}\nregime={label}\nseed={seed}\nworld_fingerprint={fingerprint}\n"),
    )
    .unwrap();
    fs::write(
        dir.join("metrics.csv"),
        format!("metric,k,query_id,value\nmrr,10,q1,{mrr}\nmrr,10,macro,{mrr}\n"),
    )
    .unwrap();
}

fn report(root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poolbias"))
        .env_remove("POOLBIAS_OUT")
        .args(["report", "--runs"])
        .arg(root)
        .output()
        .unwrap()
}

#[test]
fn report_with_one_run_has_one_row_and_no_p_value() {
    let tmp = tempfile::tempdir().unwrap();
    fake_run(tmp.path(), "naive", 1, "abc", 0.5);
    let o = report(tmp.path());
    assert!(o.status.success());
    let csv = fs::read_to_string(tmp.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    let tests = fs::read_to_string(tmp.path().join("sign_tests.csv")).unwrap();
    assert_eq!(tests.lines().count(), 1);
    assert!(!String::from_utf8_lossy(&o.stdout).contains("p ="));
}

#[test]
fn report_of_identical_runs_says_no_difference() {
    let tmp = tempfile::tempdir().unwrap();
    fake_run(tmp.path(), "a", 1, "abc", 0.5);
    fake_run(tmp.path(), "b", 1, "abc", 0.5);
    let o = report(tmp.path());
    assert!(o.status.success());
    let tests = fs::read_to_string(tmp.path().join("sign_tests.csv")).unwrap();
    assert_eq!(tests.lines().nth(1).unwrap(), "a,b,mrr@10,0,0,1,no difference");
}

#[test]
fn report_sign_test_on_ten_wins() {
    let tmp = tempfile::tempdir().unwrap();
    for seed in 1..=10 {
        fake_run(tmp.path(), "cet", seed, "abc", 0.6 + seed as f64 / 100.0);
        fake_run(tmp.path(), "naive", seed, "abc", 0.5);
    }
    let o = report(tmp.path());
    assert!(o.status.success());
    let tests = fs::read_to_string(tmp.path().join("sign_tests.csv")).unwrap();
    assert_eq!(tests.lines().nth(1).unwrap(), "cet,naive,mrr@10,10,0,0,0.001953125");
}

#[test]
fn report_on_mixed_worlds_exits_5() {
    let tmp = tempfile::tempdir().unwrap();
    fake_run(tmp.path(), "cet", 1, "abc", 0.6);
    fake_run(tmp.path(), "naive", 1, "def", 0.5);
    assert_eq!(report(tmp.path()).status.code(), Some(5));
}

#[test]
fn report_without_runs_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(report(tmp.path()).status.code(), Some(2));
    assert_eq!(report(&tmp.path().join("missing")).status.code(), Some(3));
}

"""End-to-end smoke test for the Python bindings.

Build and install first:

    pip install maturin
    pip install --no-build-isolation ./crates/python
    python python/smoke_test.py
"""

import math
import pathlib
import sys
import tempfile

import poolbias

CONFIG = """\
seeds = 1..2
world.seed = 3
world.n_docs = 300
world.n_train = 30
world.n_dev = 5
world.n_test = 6
world.feature_dim = 6
world.latent_dim = 4
world.top_m = 8
retrieve.depth = 50
train.top_n = 30
train.steps = 40
train.batch_size = 8
train.tau = 3
train.clamp = 2
eval.depth = 50
eval.metrics = mrr@10,recall@50
"""


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def check_math():
    assert close(poolbias.pairwise_ce_loss(0.0, 0.0), math.log(2.0))
    assert close(poolbias.bias_weight_wr(0.0, 2 * math.log(3.0), tau=2.0), 3.0)
    assert close(poolbias.bias_weight_ws(1.0, 1.0), 1.0)
    assert close(poolbias.bias_weight_wr(0.0, 1e6, clamp=2.0), math.exp(2.0))
    ranking = ["a", "b", "c", "d"]
    assert close(poolbias.reciprocal_rank(ranking, {"c"}, 10), 1 / 3)
    assert close(poolbias.ndcg(ranking, {"b"}, 2), 1 / math.log2(3))
    assert close(poolbias.recall(ranking, {"a", "c", "x", "y", "z"}, 4), 0.4)
    assert poolbias.spearman([1.0, 1.0], [0.0, 1.0]) is None
    t = poolbias.sign_test([(1.0, 0.0)] * 10)
    assert t["wins"] == 10 and close(t["p_value"], 0.001953125)
    assert poolbias.sign_test([(0.5, 0.5)])["p_value"] is None


def check_world():
    w = poolbias.World(100, 5, 1, 2, 6, 4, top_m=7, seed=9)
    assert w.n_docs == 100
    qs = w.query_ids("train")
    assert len(qs) == 5
    assert len(w.relevant(qs[0])) == 7
    assert len(w.doc_features(w.relevant(qs[0])[0])) == 6
    try:
        w.query_ids("holdout")
    except ValueError:
        pass
    else:
        raise AssertionError("bad split accepted")


def check_pipeline():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        cfg = tmp / "exp.cfg"
        cfg.write_text(CONFIG)
        out = tmp / "out"
        positives = poolbias.gen_world(str(cfg), str(out))
        assert len(positives) == 41 and all(n == 8 for _, n in positives)
        poolbias.pool(str(cfg), str(out))
        rows = poolbias.retrieve(str(cfg), str(out))
        assert any(r[2].startswith("fn_rate") for r in rows)
        naive = poolbias.train_and_eval(str(cfg), str(out), regime="naive")
        cet = poolbias.train_and_eval(str(cfg), str(out), regime="cet")
        assert set(naive) == {1, 2} and set(cet) == {1, 2}
        for m in (naive[1]["mrr@10"], cet[2]["mrr@10"]):
            assert 0.0 <= m <= 1.0
        table = poolbias.report_table(str(out / "runs"))
        assert "cet" in table and "naive" in table
        csv = poolbias.run_sweep(str(cfg), str(out), "tau=2,3", regime="cet")
        assert "cross_grid_std" in csv
        try:
            poolbias.gen_world(str(tmp / "missing.cfg"), str(out))
        except OSError:
            pass
        else:
            raise AssertionError("missing config accepted")


def main():
    check_math()
    check_world()
    check_pipeline()
    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())

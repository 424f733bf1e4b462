"""Smoke test for the lranker Python module.

Build and install the extension first:

    pip install maturin
    maturin develop --release -m crates/py/Cargo.toml

then run ``python python/smoke_test.py``.
"""

import json
import math
import os
import sys
import tempfile

import lranker


def check(cond, msg):
    if not cond:
        print(f"FAIL {msg}")
        sys.exit(1)
    print(f"ok   {msg}")


def main():
    with tempfile.TemporaryDirectory() as tmp:
        rows = [[1.0, 0.0], [0.0, 1.0], [0.7, 0.7], [-1.0, 0.0]]
        store = lranker.Store.from_rows(rows, ids=["a", "b", "c", "d"])
        path = os.path.join(tmp, "s.lrke")
        store.write(path)
        back = lranker.Store.read(path)
        check(back.count == 4 and back.dim == 2 and back.ids == ["a", "b", "c", "d"], "store round-trip")
        check(back.to_list() == store.to_list(), "store rows identical")

        scores = lranker.score_all([1.0, 0.5], back)
        ids, ordered = lranker.rank(scores, list(range(4)))
        check(ids == [2, 0, 1, 3], f"ranking {ids}")
        check(lranker.mrr(ids, 0) == 0.5, "reciprocal rank")
        check(abs(lranker.ndcg(ids, [0]) - 1 / math.log2(3)) < 1e-12, "ndcg@10")
        check(abs(lranker.random_baseline(100) - 0.05187) < 1e-5, "random baseline")

        loss, probs = lranker.infonce([1.0, 0.0], [1.0, 0.0], [[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]], 1.0)
        check(abs(loss - math.log(1 + 3 / math.e)) < 1e-12, f"infonce loss {loss}")
        check(abs(sum(probs) - 1) < 1e-12, "infonce probabilities sum to one")

        parts = lranker.partition(10, 3, 7)
        check(sorted(i for p in parts for i in p) == list(range(10)), "partition covers")

        km = lranker.kmeans(back, 2, seed=1)
        check(sorted(km["sizes"]) == [1, 3] or sorted(km["sizes"]) == [2, 2], f"kmeans sizes {km['sizes']}")
        g = lranker.aggregate_subset(back, [0, 1, 2], 2)
        check(len(g) == 4, "aggregate length k*dim")
        check(len(lranker.featurize("hello world", 16)) == 16, "featurizer width")

        sp = os.path.join(tmp, "p.lrke")
        dp = os.path.join(tmp, "p.jsonl")
        n = lranker.gen_planted_linear(sp, dp, n_candidates=200, n_queries=40, dim=8, negatives=20, seed=3)
        check(n == 40, "planted dataset size")
        out = os.path.join(tmp, "run")
        config = f"""
seed = 5
[paths]
store = {json.dumps(sp)}
dataset = {json.dumps(dp)}
output = {json.dumps(out)}
[model]
clusters = 2
projector_hidden = 8
[train]
epochs = 1
[tts]
widths = [0, 2]
depths = [0, 1]
"""
        report = lranker.run_experiment(config)
        check(0.0 <= report["mrr"] <= 1.0, f"pipeline mrr {report['mrr']:.4f}")
        check(os.path.isfile(os.path.join(out, "metrics.csv")), "metrics.csv written")

        ranker = lranker.Ranker(os.path.join(out, "checkpoint"), sp)
        first = json.loads(open(dp).readline())
        ids, scores, calls = ranker.rank(features=first["features"], width=2, depth=1)
        check(len(ids) == 200 and calls == 3, f"ranker covers the store with {calls} encoder calls")
        check(all(a >= b for a, b in zip(scores, scores[1:])), "ranker scores sorted")

        try:
            lranker.run_experiment(None, ["train.bogus=1"])
            check(False, "unknown key rejected")
        except lranker.ConfigError:
            check(True, "unknown key raises ConfigError")
        try:
            lranker.Store.read(os.path.join(tmp, "missing.lrke"))
            check(False, "missing store rejected")
        except lranker.DataError:
            check(True, "missing store raises DataError")
    print("smoke test passed")


if __name__ == "__main__":
    main()

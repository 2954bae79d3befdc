"""Smoke test for the segmentor Python extension.

Build the module first, e.g. `maturin develop -m crates/py/Cargo.toml`, or
copy target/release/libsegmentor_py.so to segmentor.so on PYTHONPATH.
"""

import math
from pathlib import Path

import segmentor

DATA = Path(__file__).resolve().parent.parent / "data"


def close(a, b, tol=1e-12):
    return all(math.isclose(x, y, abs_tol=tol) for x, y in zip(a, b))


def main():
    iris = segmentor.load_csv(str(DATA / "iris.csv"))
    assert (iris.n_points, iris.n_features) == (150, 4), iris

    z = segmentor.standardize(iris)
    col = [row[0] for row in z.to_list()]
    assert abs(sum(col) / len(col)) < 1e-12

    seg = segmentor.segment(iris, seed=0, n_trees=50)
    non_singleton = [s for s in seg.cluster_sizes if s > 1]
    assert len(non_singleton) == 2, seg.cluster_sizes
    assert len(seg.labels) == len(seg.embedding) == 150
    assert seg.importances()[0][0] == "petal length (cm)", seg.importances()
    agree = sum(p == l for p, l in zip(seg.predict(iris), seg.labels))
    assert agree >= 148, agree

    labels = segmentor.cluster(seg.embedding, epsilon_constant=0.1)
    assert sorted(set(labels)) == list(range(len(seg.cluster_sizes)))

    m = segmentor.weighted_metrics([0, 0, 1], [0, 1, 1])
    assert close(m, (2 / 3, 5 / 6, 2 / 3, 2 / 3)), m

    assert segmentor.match_clusters([[3, 4], [0, 1, 2]], [[0, 1, 2], [3, 4]]) == [1, 0]
    assert segmentor.match_clusters([[0], [5]], [[0, 1]]) == [0, None]

    small = segmentor.Dataset([[float(i), float(i % 3)] for i in range(12)])
    coords = segmentor.embed(small, perplexity=3.0, n_iterations=200, seed=1)
    assert len(coords) == 12

    report = segmentor.generalization_run(iris, k=5, grid=[0.1], seed=0)
    assert report["fixed_epsilon"] is True
    assert len(report["per_fold"]) == 5
    print("weighted metrics:", report["summary_row"])

    try:
        segmentor.load_csv(str(DATA / "missing.csv"))
    except OSError:
        pass
    else:
        raise AssertionError("missing file should raise")

    print("python smoke test passed")


if __name__ == "__main__":
    main()

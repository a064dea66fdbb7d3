import itertools

import numpy as np
import pytest

from sgdd.condense import CondenseConfig
from sgdd.errors import InputError
from sgdd.evaluate import (
    METRICS_COLUMNS,
    CrossArchTable,
    EvalResult,
    LeakError,
    LeakGuard,
    append_metrics_csv,
    baseline_feature_similarity,
    baseline_herding,
    baseline_kcenter,
    baseline_random,
    cross_architecture,
    feature_similarity_config,
    format_metrics,
    herding_select,
    kcenter_select,
    metrics_rows,
    read_metrics_csv,
    train_eval,
    whole_graph_eval,
)
from sgdd.graph import CondensedGraph, SbmSpec, build_graph, check_condensed_adjacency, sbm_generate


def as_condensed(g, labels=None):
    labels = g.labels if labels is None else labels
    return CondensedGraph(g.dense_adjacency(), np.array(g.features), np.array(labels), g.num_classes, 1.0)


def test_identity_condensate_gcn_accuracy(sbm7):
    res = train_eval("gcn", as_condensed(sbm7), sbm7, seeds=range(3))
    assert res.mean > 0.9


def test_single_class_condensate_predicts_that_class(sbm7):
    s = as_condensed(sbm7, np.zeros(100, dtype=np.int64))
    res = train_eval("gcn", s, sbm7, epochs=200, lr=0.01, seeds=[0])
    share = np.mean(sbm7.labels[sbm7.test_mask] == 0)
    assert res.mean == pytest.approx(share)


def test_zero_epochs_is_chance_level(sbm7):
    s = baseline_random(sbm7, 0.1, seed=0)
    res = train_eval("gcn", s, sbm7, epochs=0, seeds=range(40))
    noise = 3 * np.sqrt(0.2 * 0.8 / 20)
    assert abs(res.mean - 0.2) < noise


def test_unknown_architecture_rejected(sbm7):
    with pytest.raises(InputError):
        train_eval("gat", baseline_random(sbm7, 0.1, 0), sbm7, epochs=1, seeds=[0])


def test_train_eval_deterministic_per_seed_and_order_free(sbm7):
    s = baseline_random(sbm7, 0.1, seed=1)
    a = train_eval("sgc", s, sbm7, epochs=30, seeds=[0, 1, 2])
    b = train_eval("sgc", s, sbm7, epochs=30, seeds=[2, 0])
    assert a.accuracies[2] == b.accuracies[0] and a.accuracies[0] == b.accuracies[1]
    assert all(0 <= v <= 1 for v in a.accuracies)


def test_eval_result_statistics():
    r = EvalResult("gcn", (0, 1, 2), (0.5, 0.7, 0.9), 10, 0.1)
    assert r.mean == pytest.approx(0.7) and r.std == pytest.approx(np.std([0.5, 0.7, 0.9]))


def test_no_leak_of_original_graph_during_fitting(sbm7):
    guard = LeakGuard(sbm7)
    s = baseline_random(sbm7, 0.1, seed=0)
    res = train_eval("gcn", s, guard, epochs=5, seeds=[0, 1])
    assert res.mean >= 0
    assert guard.accesses and all(phase == "eval" for phase, _ in guard.accesses)
    with guard.fitting(), pytest.raises(LeakError):
        guard.train_mask


def test_cross_architecture_table(sbm7):
    s = baseline_herding(sbm7, 0.1)
    table = cross_architecture(s, sbm7, seeds=[0, 1], epochs=200, lr=0.01)
    row = table.row("gcn")
    assert set(row) == {"gcn", "sgc", "mlp", "cheby"}
    means = [r.mean for r in row.values()]
    assert table.avg("gcn") == pytest.approx(np.mean(means))
    assert table.std("gcn") == pytest.approx(np.std(means))
    assert all(m > 1 / 5 for m in means)
    doc = table.to_dict()["gcn"]
    assert doc["avg"] == table.avg("gcn") and "implemented" in doc["note"]


def test_mlp_cell_invariant_to_structure(sbm7):
    s = baseline_random(sbm7, 0.1, seed=2)
    a = np.array(s.adjacency)
    flipped = np.where(a > 0, 0.0, 1.0) - np.eye(a.shape[0])
    s2 = CondensedGraph(flipped, np.array(s.features), np.array(s.labels), 5, 0.1)
    one = cross_architecture(s, sbm7, ["mlp"], seeds=[0, 1], epochs=20)
    two = cross_architecture(s2, sbm7, ["mlp"], seeds=[0, 1], epochs=20)
    assert one.row("gcn")["mlp"] == two.row("gcn")["mlp"]


def all_training_graph(seed=0):
    g = sbm_generate(SbmSpec(40, 4, 0.7, 0.1, seed=seed))
    masks = [np.ones(40, bool), np.zeros(40, bool), np.zeros(40, bool)]
    return build_graph(g.edge_list(), g.features, g.labels, masks, num_classes=4)


def test_random_with_full_ratio_is_original_up_to_order():
    g = all_training_graph()
    s = baseline_random(g, 1.0, seed=0)
    order = np.lexsort(s.features.T[::-1])
    ref = np.lexsort(g.features.T[::-1])
    assert np.array_equal(s.features[order], g.features[ref])
    assert np.array_equal(np.array(s.adjacency)[np.ix_(order, order)], g.dense_adjacency()[np.ix_(ref, ref)])


@pytest.mark.parametrize("make", [
    lambda g: baseline_random(g, 0.1, 3),
    lambda g: baseline_herding(g, 0.1),
    lambda g: baseline_kcenter(g, 0.1, 3),
])
def test_coresets_satisfy_invariants(make, sbm7):
    s = make(sbm7)
    check_condensed_adjacency(np.array(s.adjacency))
    assert s.n == 10 and np.array_equal(np.bincount(s.labels), [2] * 5)
    train = sbm7.features[sbm7.train_mask]
    assert all((train == row).all(axis=1).any() for row in s.features)


def test_herding_first_pick_is_nearest_to_mean(rng):
    x = rng.standard_normal((30, 4))
    first = herding_select(x, 3)[0]
    assert first == int(np.argmin(np.linalg.norm(x - x.mean(axis=0), axis=1)))
    assert len(set(herding_select(x, 30))) == 30


def test_kcenter_collinear_extremes():
    x = np.array([[0.0], [1.0], [2.0], [10.0]])
    picked = kcenter_select(x, 2)
    # brute force: the pair with the largest separation
    best = max(itertools.combinations(range(4), 2), key=lambda p: abs(x[p[0], 0] - x[p[1], 0]))
    assert sorted(picked) == sorted(best) == [0, 3]


def test_kcenter_tie_break_is_seeded():
    x = np.array([[-1.0], [1.0], [0.0]])
    a = kcenter_select(x, 1, np.random.default_rng(0))
    b = kcenter_select(x, 1, np.random.default_rng(0))
    assert a == b and a[0] in (0, 1)


def test_coreset_ratio_errors(sbm7):
    with pytest.raises(InputError):
        baseline_random(sbm7, 0.0, 0)
    with pytest.raises(InputError):
        baseline_herding(sbm7, 0.9)


def test_feature_similarity_config_disables_structure_terms():
    cfg = feature_similarity_config(CondenseConfig(alpha=0.3, beta=0.2))
    assert (cfg.structure, cfg.alpha, cfg.beta) == ("cosine", 0.0, 0.0)


def test_feature_similarity_baseline_runs(sbm7):
    s, report = baseline_feature_similarity(sbm7, CondenseConfig(epochs=6, restarts=1, hidden=8, seed=2))
    check_condensed_adjacency(np.array(s.adjacency))
    assert report.epochs == 6 and s.n == 10


def test_whole_graph_reference(sbm7):
    res = whole_graph_eval("gcn", sbm7, seeds=[0, 1])
    assert res.mean > 0.9


def test_metrics_csv_round_trip(tmp_path):
    res = EvalResult("gcn", (0, 1), (0.5, 0.25), 10, 0.1)
    rows = metrics_rows("sgdd", "gcn", 0.1, 0.1, 1.5, [res])
    path = tmp_path / "m.csv"
    append_metrics_csv(path, rows)
    append_metrics_csv(path, rows)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(METRICS_COLUMNS) and len(lines) == 5
    back = read_metrics_csv(path)
    assert back[1]["seed"] == "1" and back[0]["ratio"] == "0.10000000000000001"
    assert format_metrics(rows, header=False).count("\n") == 2


def test_metrics_csv_rejects_foreign_file(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(InputError):
        append_metrics_csv(path, [])

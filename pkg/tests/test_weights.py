import math

import numpy as np
import pytest

from tripletree import (
    EstimationFailure,
    ExpectationOracle,
    OracleState,
    aggregate_anchor_probs,
    anchor_estimate,
    classify_heavy,
    compute_light_tree,
    final_correction,
    from_newick,
    height_from_prob,
    invert_F,
    reconstruct_left_heavy,
    reconstruct_right_path,
    reconstruct_weights,
    tree_from_topology,
)
from tripletree.noise_oracle import _splitmix64
from tripletree.weights import WeightConfig, response_curve

from conftest import random_tree


def balanced_tree(n, prefix="t"):
    def nest(labels):
        if len(labels) == 1:
            return labels[0]
        m = len(labels) // 2
        return (nest(labels[:m]), nest(labels[m:]))

    return tree_from_topology(nest([f"{prefix}{i:03d}" for i in range(n)]))


# ---------------------------------------------------------------------- #
# Heavy classification                                                    #
# ---------------------------------------------------------------------- #


def test_classify_heavy_balanced_16():
    t = balanced_tree(16)
    info = classify_heavy(t)
    nl = t.leaf_counts()
    # alpha n + 1 = 16/6 + 1 = 3.67: every node with >= 4 leaves is heavy
    heavy_counts = sorted(int(nl[v]) for v in range(t.n_nodes) if info.heavy[v])
    assert heavy_counts == [4, 4, 4, 4, 8, 8, 16]
    assert info.path[0] == t.root
    assert info.f == 2  # root, a half, a quarter


def test_classify_heavy_two_leaves():
    t = tree_from_topology(("a", "b"))
    info = classify_heavy(t)
    assert info.f == 0
    assert len(info.path) == 2  # root then a leaf


def test_classify_heavy_caterpillar_spine():
    shape = "a0"
    for i in range(1, 12):
        shape = (f"a{i}", shape)
    t = tree_from_topology(shape)
    info = classify_heavy(t)
    nl = t.leaf_counts()
    # spine leaf counts 12, 11, ...: f is the last index with NL >= 3
    want_f = max(
        i for i, v in enumerate(info.path) if nl[v] >= 12 / 6 + 1 - 1e-9
    )
    assert info.f == want_f
    # anchors: spine vertices whose left subtree (a single leaf) passes the
    # n/(4(f+1)) cutoff; with n=12, f=9 the cutoff is 0.3, so all qualify
    assert all(size == 1 for size in info.anchor_sizes)


def test_heavy_path_follows_big_child():
    t = random_tree(48, seed=2)
    info = classify_heavy(t)
    nl = t.leaf_counts()
    for parent, child in zip(info.path, info.path[1:]):
        c1, c2 = t.children(parent)
        assert nl[child] == max(nl[c1], nl[c2])


# ---------------------------------------------------------------------- #
# Primitive estimators                                                    #
# ---------------------------------------------------------------------- #


def test_height_from_prob_values():
    assert height_from_prob(1.0 / 3.0) == pytest.approx(1.0)
    assert height_from_prob(0.5) == pytest.approx(0.0)
    assert height_from_prob(0.4) == pytest.approx(0.5)


def test_height_from_prob_rejects_out_of_range():
    with pytest.raises(EstimationFailure):
        height_from_prob(0.0)
    with pytest.raises(EstimationFailure):
        height_from_prob(0.6)


def test_reconstruct_left_heavy_values():
    assert reconstruct_left_heavy(1.0 / 3.0, 0.7) == pytest.approx(0.7)
    assert reconstruct_left_heavy(0.5, 0.7) == pytest.approx(0.0)
    with pytest.raises(EstimationFailure):
        reconstruct_left_heavy(0.2, 0.7)
    with pytest.raises(EstimationFailure):
        reconstruct_left_heavy(0.4, 0.0)


def test_aggregate_anchor_probs():
    assert aggregate_anchor_probs([0.42], [17]) == pytest.approx(0.42)
    assert aggregate_anchor_probs([0.4, 0.5], [3, 3]) == pytest.approx(0.45)
    assert aggregate_anchor_probs([0.4, 0.5], [1, 3]) == pytest.approx(0.475)
    with pytest.raises(EstimationFailure):
        aggregate_anchor_probs([], [])


def test_invert_F_single_anchor():
    h, resid = invert_F(0.4, [0.5], [1.0])
    assert h == pytest.approx(0.25, abs=1e-10)
    assert resid <= 1e-12
    h, _ = invert_F(1.0 / 3.0, [0.37], [2.0])
    assert h == pytest.approx(0.37, abs=1e-10)


def test_invert_F_curve_monotone():
    b = [0.3, 0.5, 0.9]
    w = [2, 5, 1]
    assert response_curve(0.0, b, w) == pytest.approx(0.5)
    xs = np.linspace(0.0, 1.2, 25)
    vals = [response_curve(x, b, w) for x in xs]
    assert all(a > bb for a, bb in zip(vals, vals[1:]))


def test_invert_F_clamps_out_of_range_targets():
    h, _ = invert_F(0.6, [0.5], [1.0])  # above F(0) = 1/2
    assert h == 0.0
    h, _ = invert_F(0.05, [0.5], [1.0])  # below F(a_max)
    assert h == pytest.approx(2.0)  # 4 * min anchor


def test_invert_F_residual_on_random_anchor_sets():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        k = int(rng.integers(1, 6))
        b = rng.uniform(0.05, 1.0, size=k)
        w = rng.integers(1, 50, size=k).astype(float)
        a_true = float(rng.uniform(0.0, 3.9 * b.min()))
        q = response_curve(a_true, b, w)
        h, resid = invert_F(q, b, w)
        assert resid <= 1e-12
        assert h == pytest.approx(a_true, abs=1e-9)


def test_final_correction():
    assert final_correction(0.2, [0.5, 0.4]) == 0.2
    assert final_correction(0.7, [0.5, 0.4]) == 0.4


# ---------------------------------------------------------------------- #
# Anchoring                                                               #
# ---------------------------------------------------------------------- #


@pytest.fixture()
def eight_leaf():
    nwk = (
        "(((a:0.25,b:0.25):0.25,(c:0.25,d:0.25):0.25):0.5,"
        "((e:0.25,f:0.25):0.25,(g:0.25,h:0.25):0.25):0.5);"
    )
    return from_newick(nwk)


def test_anchor_estimate_expectation_closed_form(eight_leaf):
    t = eight_leaf
    eo = ExpectationOracle(t, "homogeneous")
    v = next(
        u for u in range(t.n_nodes)
        if not t.is_leaf(u) and set(t.subtree_leaf_labels(u)) == {"a", "b"}
    )
    anchor = next(
        u for u in range(t.n_nodes)
        if set(t.subtree_leaf_labels(u)) == {"a", "b", "c", "d"}
    )
    p, k = anchor_estimate(eo, t, v, anchor)
    assert p == pytest.approx(0.5 / (2 * 0.5 + 0.25), abs=1e-15)  # = 0.4
    assert k == 2


def test_anchor_estimate_range_and_limit():
    for seed in range(4):
        t = random_tree(32, seed=seed)
        eo = ExpectationOracle(t, "homogeneous")
        nl = t.leaf_counts()
        anchor = next(
            v for v in t.topo_order()
            if not t.is_leaf(v) and v != t.root and nl[v] >= 6
        )
        c1, c2 = t.children(anchor)
        side = c1 if not t.is_leaf(c1) else c2
        if t.is_leaf(side):
            continue
        p, _ = anchor_estimate(eo, t, side, anchor)
        assert 1.0 / 3.0 - 1e-12 <= p <= 0.5 + 1e-12
    # h_v -> h_anchor makes the response approach 1/3
    t = from_newick("(((a:0.49,b:0.49):0.01,(c:0.49,d:0.49):0.01):0.5,"
                    "(e:0.75,f:0.75):0.25);")
    eo = ExpectationOracle(t, "homogeneous")
    v = next(u for u in range(t.n_nodes)
             if set(t.subtree_leaf_labels(u)) == {"a", "b"})
    anchor = next(u for u in range(t.n_nodes)
                  if set(t.subtree_leaf_labels(u)) == {"a", "b", "c", "d"})
    p, _ = anchor_estimate(eo, t, v, anchor)
    assert abs(p - 1.0 / 3.0) < 0.01


def test_anchor_unbiasedness_monte_carlo():
    # the anchored response over fresh-seed oracles averages to the exact
    # probability (the estimator is a plain mean of permanent indicators)
    t = balanced_tree(16)
    eo = ExpectationOracle(t, "homogeneous")
    v = next(u for u in range(t.n_nodes)
             if not t.is_leaf(u) and int(t.leaf_counts()[u]) == 4)
    anchor = t.root
    p_true, k = anchor_estimate(eo, t, v, anchor)
    trials = 10_000
    means = np.empty(trials)
    base_tree = t
    D = None
    for s in range(trials):
        o = OracleState(base_tree, "homogeneous", seed=s)
        if D is None:
            D = o.distances
        else:
            o._D = D  # reuse the metric; answers still depend on the seed
        p_hat, _ = anchor_estimate(o, base_tree, v, anchor)
        means[s] = p_hat
    sigma_mean = math.sqrt(p_true * (1 - p_true) / (k * trials))
    assert abs(float(means.mean()) - p_true) <= 3 * sigma_mean


# ---------------------------------------------------------------------- #
# Pipeline pieces                                                         #
# ---------------------------------------------------------------------- #


def test_compute_light_tree_expectation_exact():
    for seed in range(5):
        t = random_tree(32, w=0.03, seed=seed)
        eo = ExpectationOracle(t, "homogeneous")
        out = compute_light_tree(eo, t)
        light, _ = t.ordered_children(t.root)
        for v, est in out.items():
            assert est.value == pytest.approx(float(t.height[v]), abs=1e-12)
        # every internal vertex of the light side is covered, leaves skipped
        want = {
            u for u in range(t.n_nodes)
            if not t.is_leaf(u)
            and set(t.subtree_leaf_labels(u)) <= set(t.subtree_leaf_labels(light))
        }
        assert set(out) == want


def test_compute_light_tree_sampled_accuracy():
    n = 2048
    t = random_tree(n, w=0.004, seed=3)
    o = OracleState(t, "homogeneous", seed=3)
    out = compute_light_tree(o, t)
    if not out:
        pytest.skip("light side of this draw has no internal vertex")
    alpha = 1.0 / 6.0
    bound = 12 * 4 * math.sqrt(math.log(n) / (alpha * n))
    errors = np.array(
        [abs(est.value - float(t.height[v])) for v, est in out.items()]
    )
    assert float(np.mean(errors <= bound)) >= 0.99
    assert float(np.median(errors)) <= 0.1


def test_reconstruct_right_path_expectation_exact():
    for seed in (0, 5, 9):
        t = random_tree(48, w=0.02, seed=seed)
        eo = ExpectationOracle(t, "homogeneous")
        out = reconstruct_right_path(eo, t)
        assert out[t.root].value == 1.0
        for v, est in out.items():
            assert est.value == pytest.approx(float(t.height[v]), abs=1e-12)


def test_cross_pair_enumeration_covers_alpha_n():
    t = balanced_tree(64)
    info = classify_heavy(t)
    cfg = WeightConfig()
    nl = t.leaf_counts()
    n = 64
    for idx in range(1, info.f + 1):
        v = info.path[idx]
        c1, c2 = t.children(v)
        pairs = min(int(nl[c1]) * int(nl[c2]), cfg.pair_cap or 4 * n)
        assert pairs >= math.floor(1.0 / 6.0 * int(nl[v]))


# ---------------------------------------------------------------------- #
# Full weight reconstruction                                              #
# ---------------------------------------------------------------------- #


@pytest.mark.parametrize("n,seed", [(16, 0), (32, 3), (64, 6), (64, 11)])
def test_reconstruct_weights_expectation_exact(n, seed):
    t = random_tree(n, w=0.05, seed=seed)
    eo = ExpectationOracle(t, "homogeneous")
    he = reconstruct_weights(eo, t)
    assert he.max_abs_weight_error(t) <= 1e-9


def test_reconstruct_weights_two_leaves():
    t = random_tree(2, w=0.5, seed=0)
    o = OracleState(t, "homogeneous", seed=0)
    he = reconstruct_weights(o, t)
    assert he.max_abs_weight_error(t) == 0.0
    assert o.query_count == 0


def test_reconstruct_weights_balanced_is_all_fine_class():
    t = balanced_tree(32)
    eo = ExpectationOracle(t, "homogeneous")
    he = reconstruct_weights(eo, t)
    classes = {e.error_class for v, e in he.by_node.items()
               if not t.is_leaf(v) and v != t.root}
    assert classes == {"fine"}


def test_reconstruct_weights_coarse_class_when_path_ends_light():
    # a shape whose heavy path dives into a small subtree: vertices below
    # the last heavy vertex must carry the coarse error class
    found = False
    for seed in range(30):
        t = random_tree(64, w=0.01, seed=seed)
        info = classify_heavy(t)
        if info.f + 1 < len(info.path) and not t.is_leaf(info.path[info.f + 1]):
            eo = ExpectationOracle(t, "homogeneous")
            he = reconstruct_weights(eo, t)
            classes = [e.error_class for e in he.by_node.values()]
            if "coarse" in classes:
                found = True
                assert he.max_abs_weight_error(t) <= 1e-9
                break
    assert found


def test_reconstruct_weights_monotone_heights():
    for seed in range(4):
        t = random_tree(48, w=0.02, seed=seed)
        o = OracleState(t, "homogeneous", seed=seed)
        he = reconstruct_weights(o, t)
        for v in range(t.n_nodes):
            p = int(t.parent[v])
            if p >= 0:
                assert he.by_node[v].value <= he.by_node[p].value + 1e-15
                assert he.edge_weights[v] >= -1e-15
        leaves = [v for v in range(t.n_nodes) if t.is_leaf(v)]
        assert all(he.by_node[v].value == 0.0 for v in leaves)
        assert he.by_node[t.root].value == 1.0


def test_reconstruct_weights_sampled_error_report():
    # seed 0 at this size yields a heavy path that ends in a light subtree
    # with dozens of aggregated-anchor (coarse) vertices.  At desk scale
    # the asymptotic fine-vs-coarse ordering is not observable (coarse
    # vertices sit deep, with tiny heights and the anchor clamp), so this
    # checks the per-class empirical residuals are reported and bounded
    # rather than asserting the constant-regime ordering.
    n = 512
    t = random_tree(n, w=0.01, seed=0)
    o = OracleState(t, "homogeneous", seed=0)
    he = reconstruct_weights(o, t)
    fine = [abs(e.value - float(t.height[v]))
            for v, e in he.by_node.items() if e.error_class == "fine"]
    coarse = [abs(e.value - float(t.height[v]))
              for v, e in he.by_node.items() if e.error_class == "coarse"]
    assert len(coarse) >= 10 and len(fine) >= 100
    fine_bound = 12 * 4 * math.sqrt(math.log(n) / (n / 6.0))
    coarse_bound = 4 * math.log(n) / math.sqrt(n)
    assert float(np.quantile(fine, 0.95)) <= fine_bound
    assert float(np.quantile(coarse, 0.95)) <= coarse_bound


def test_estimated_tree_round_trip():
    t = random_tree(24, w=0.05, seed=2)
    eo = ExpectationOracle(t, "homogeneous")
    he = reconstruct_weights(eo, t)
    est = he.estimated_tree()
    from tripletree import topology_equal

    assert topology_equal(est, t)
    assert est.height[est.root] == pytest.approx(1.0)

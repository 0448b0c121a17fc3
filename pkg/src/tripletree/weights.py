"""
Edge-weight estimation under the homogeneous noise model.

Given the (reconstructed or known) topology, every internal vertex gets a
height estimate from query probabilities:

* vertices in the light subtree of the root: the fraction of experiments
  (a, b, c_i) answering (a, b), with a and b spanning the vertex and c_i
  running over the heavy side, equals 1/(2 + h); invert it;
* vertices on the rightmost (heavy) path: the same inversion over pairs
  that span the vertex, against one far-side witness leaf;
* vertices hanging left of the heavy path: anchor to the path vertex
  above, whose answer probability is h_anchor / (2 h_anchor + h), and
  invert with the anchor's estimated height;
* vertices below the last heavy path vertex: aggregate anchored estimates
  over all big left subtrees of the path (weighted by their leaf counts),
  then invert the aggregate response curve by bisection and clamp by the
  smallest anchor height.

Heights are finally clamped to be monotone along root-leaf paths and edge
weights read off as height differences.  Leaves sit at height 0 and the
root at 1 exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tree_core import NO_NODE, Tree, _Builder


class EstimationFailure(Exception):
    """An estimator received an input outside its valid range."""


@dataclass
class WeightConfig:
    alpha: float = 1.0 / 6.0
    pair_cap: int | None = None  # None: 4n cross pairs per path vertex
    bisect_tol: float = 1e-12
    bisect_max_iter: int = 200
    p_clamp_eps: float = 1e-6
    anchor_k_min: int = 100


@dataclass
class HeavyPath:
    """
    The rightmost path (following heavy children) of a topology.

    ``path`` runs from the root to the rightmost leaf; ``f`` is the index
    of its last heavy vertex (leaf count above alpha * n).  ``anchors``
    lists the path indices whose left subtrees are big enough to anchor
    against, with ``anchor_sizes`` their leaf counts.
    """

    path: list
    f: int
    heavy: np.ndarray
    nl: np.ndarray
    alpha: float
    anchors: list
    anchor_sizes: list
    left_child: list  # off-path child per path index (NO_NODE for the leaf)


@dataclass
class VertexEstimate:
    value: float
    error_class: str  # "exact" | "fine" | "coarse"
    method: str
    warnings: list = field(default_factory=list)
    residual: float = 0.0


@dataclass
class HeightEstimates:
    """Per-vertex height estimates plus derived edge weights."""

    topology: Tree
    by_node: dict  # node id -> VertexEstimate
    edge_weights: dict  # node id -> estimated weight of edge to parent

    def max_abs_weight_error(self, truth):
        worst = 0.0
        true_w = {}
        for v in range(truth.n_nodes):
            if truth.parent[v] != NO_NODE:
                key = tuple(truth.subtree_leaf_labels(v))
                true_w[key] = float(truth.weight[v])
        for v, w in self.edge_weights.items():
            key = tuple(self.topology.subtree_leaf_labels(v))
            if key not in true_w:
                raise ValueError("topologies differ; weight errors undefined")
            worst = max(worst, abs(w - true_w[key]))
        return worst

    def estimated_tree(self):
        """The topology re-embedded with the estimated heights."""
        b = _Builder()
        done = {}
        for v in self.topology.topo_order()[::-1]:
            v = int(v)
            if self.topology.is_leaf(v):
                done[v] = b.add_leaf(self.topology.labels[v])
            else:
                c1, c2 = self.topology.children(v)
                done[v] = b.add_internal(done[c1], done[c2],
                                         self.by_node[v].value)
        return b.finish()


def classify_heavy(topology, alpha=1.0 / 6.0):
    """Heavy flags, the rightmost path, its last heavy index and anchors."""
    n = topology.n_leaves
    nl = topology.leaf_counts()
    heavy = nl >= alpha * n + 1 - 1e-9
    path = [topology.root]
    left_child = []
    while not topology.is_leaf(path[-1]):
        light, heavy_child = topology.ordered_children(path[-1])
        path.append(heavy_child)
        left_child.append(light)
    left_child.append(NO_NODE)
    f = max(i for i, v in enumerate(path) if heavy[v])
    cutoff = n / (4.0 * (1 + f))
    anchors, sizes = [], []
    for i in range(f + 1):
        c = left_child[i]
        if c != NO_NODE and nl[c] >= cutoff:
            anchors.append(i)
            sizes.append(int(nl[c]))
    return HeavyPath(path=path, f=f, heavy=heavy, nl=nl, alpha=alpha,
                     anchors=anchors, anchor_sizes=sizes, left_child=left_child)


def height_from_prob(A):
    """Invert A = 1/(2 + h): h = 1/A - 2.  A must lie in (0, 1/2]."""
    if A <= 0.0 or A > 0.5 + 1e-9:
        raise EstimationFailure(f"response mean {A!r} outside (0, 1/2]")
    return 1.0 / min(A, 0.5) - 2.0


def reconstruct_left_heavy(p_hat, h_anchor):
    """Height from an anchored response: h = h_anchor * (1 - 2 p) / p."""
    if p_hat < 0.25:
        raise EstimationFailure(f"anchored response {p_hat!r} below 1/4")
    if h_anchor <= 0:
        raise EstimationFailure("anchor height must be positive")
    return h_anchor * (1.0 - 2.0 * p_hat) / p_hat


def aggregate_anchor_probs(p_hats, weights):
    """Leaf-count-weighted mean of the anchored responses."""
    p = np.asarray(p_hats, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if len(p) == 0 or len(p) != len(w):
        raise EstimationFailure("need matching, nonempty responses and weights")
    return float(np.dot(p, w) / np.sum(w))


def response_curve(a, anchor_heights, weights):
    """F(a): weighted mean of b_i / (2 b_i + a) over the anchors."""
    b = np.asarray(anchor_heights, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    return float(np.dot(w, b / (2.0 * b + a)) / np.sum(w))


def invert_F(q_hat, anchor_heights, weights, tol=1e-12, max_iter=200):
    """
    The unique a >= 0 with F(a) = q_hat, by bisection on the strictly
    decreasing response curve.  Out-of-range targets clamp to the nearest
    bracket endpoint.  Returns (a, residual).
    """
    b = np.asarray(anchor_heights, dtype=np.float64)
    if len(b) == 0 or np.any(b <= 0):
        raise EstimationFailure("anchor heights must be positive")
    lo, hi = 0.0, 4.0 * float(np.min(b))
    f_lo = response_curve(lo, anchor_heights, weights)  # = 1/2
    f_hi = response_curve(hi, anchor_heights, weights)
    if q_hat >= f_lo:
        return lo, abs(f_lo - q_hat)
    if q_hat <= f_hi:
        return hi, abs(f_hi - q_hat)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f_mid = response_curve(mid, anchor_heights, weights)
        if abs(f_mid - q_hat) <= tol:
            return mid, abs(f_mid - q_hat)
        if f_mid > q_hat:
            lo = mid
        else:
            hi = mid
    mid = 0.5 * (lo + hi)
    return mid, abs(response_curve(mid, anchor_heights, weights) - q_hat)


def final_correction(h_v, anchor_heights):
    """Clamp the estimate below every anchor height."""
    return min(h_v, min(anchor_heights))


# ---------------------------------------------------------------------- #
# Estimation driver                                                       #
# ---------------------------------------------------------------------- #


class _WeightDriver:
    def __init__(self, oracle, topology, cfg):
        self.oracle = oracle
        self.topo = topology
        self.cfg = cfg
        self.n = topology.n_leaves
        if set(topology.leaf_labels) != set(oracle.labels):
            raise ValueError("topology and oracle leaf sets differ")
        # oracle leaf indices under each topology node
        self.leafset = [None] * topology.n_nodes
        for v in topology.topo_order()[::-1]:
            v = int(v)
            if topology.is_leaf(v):
                self.leafset[v] = np.array(
                    [oracle.index_of[topology.labels[v]]], dtype=np.int64
                )
            else:
                c1, c2 = topology.children(v)
                self.leafset[v] = np.sort(
                    np.concatenate([self.leafset[c1], self.leafset[c2]])
                )

    # -- primitive estimators ------------------------------------------- #

    def _rep_pair(self, v):
        """Smallest-label leaf in each child subtree of internal v."""
        c1, c2 = self.topo.children(v)
        return int(self.leafset[c1][0]), int(self.leafset[c2][0])

    def _mean_response(self, a, b, witnesses):
        w = self.oracle.wins(
            np.full(len(witnesses), a, dtype=np.int64),
            np.full(len(witnesses), b, dtype=np.int64),
            np.asarray(witnesses, dtype=np.int64),
        )
        return float(np.mean(w))

    def anchored_response(self, v, far_leaves, warnings):
        if len(far_leaves) < self.cfg.anchor_k_min:
            warnings.append(f"anchor-witnesses-below-{self.cfg.anchor_k_min}")
        a, b = self._rep_pair(v)
        return self._mean_response(a, b, far_leaves)

    def _safe_height_from_prob(self, p, warnings):
        eps = self.cfg.p_clamp_eps
        if p <= 0 or p > 0.5:
            warnings.append(f"response-clamped({p:.4g})")
            p = min(max(p, eps), 0.5)
        return height_from_prob(p)

    def cross_pair_response(self, v, witness):
        """Mean answer over pairs spanning v's children vs one witness."""
        c1, c2 = self.topo.children(v)
        L, R = self.leafset[c1], self.leafset[c2]
        cap = self.cfg.pair_cap or max(4 * self.n, 64)
        total = len(L) * len(R)
        take = min(total, cap)
        t = np.arange(take, dtype=np.int64)
        A = L[t // len(R)]
        B = R[t % len(R)]
        w = self.oracle.wins(A, B, np.full(take, witness, dtype=np.int64))
        return float(np.mean(w))

    # -- the pipeline ---------------------------------------------------- #

    def run(self):
        topo = self.topo
        est = {}
        for v in range(topo.n_nodes):
            if topo.is_leaf(v):
                est[v] = VertexEstimate(0.0, "exact", "leaf")
        est[topo.root] = VertexEstimate(1.0, "exact", "root-normalization")
        if self.n == 2:
            return self._finish(est)

        info = classify_heavy(topo, self.cfg.alpha)
        light_r, heavy_r = topo.ordered_children(topo.root)

        if info.heavy[light_r]:
            # two heavy children at the root: every vertex inverts directly
            # against the opposite side's witnesses
            for side, far in ((light_r, heavy_r), (heavy_r, light_r)):
                wits = self.leafset[far]
                for v in self._internal_under(side):
                    warns = []
                    p = self.anchored_response(v, wits, warns)
                    h = self._safe_height_from_prob(p, warns)
                    est[v] = VertexEstimate(h, "fine", "light-tree", warns)
            return self._finish(est)

        # 1) light subtree of the root
        wits = self.leafset[heavy_r]
        for v in self._internal_under(light_r):
            warns = []
            p = self.anchored_response(v, wits, warns)
            h = self._safe_height_from_prob(p, warns)
            est[v] = VertexEstimate(h, "fine", "light-tree", warns)

        # 2) the heavy path v_1..v_f, plus the first vertex below it
        path, f = info.path, info.f
        witness = int(self.leafset[light_r][0])
        for idx in range(1, f + 2):
            v = path[idx] if idx < len(path) else None
            if v is None or topo.is_leaf(v) or v in est:
                continue
            warns = []
            p = self.cross_pair_response(v, witness)
            h = self._safe_height_from_prob(p, warns)
            est[v] = VertexEstimate(h, "fine", "right-path", warns)

        # 3) left subtrees hanging off the heavy path above v_f
        for idx in range(1, f + 1):
            anchor = path[idx]
            far = self.leafset[path[idx + 1]]
            h_anchor = est[anchor].value
            for v in self._internal_under(info.left_child[idx]):
                warns = []
                p = self.anchored_response(v, far, warns)
                if p < 0.25:
                    warns.append(f"anchored-response-below-quarter({p:.4g})")
                    p = 0.25
                p = min(max(p, self.cfg.p_clamp_eps), 0.5)
                h = reconstruct_left_heavy(p, max(h_anchor, 1e-12))
                est[v] = VertexEstimate(h, "fine", "anchored-left", warns)

        # 4) vertices strictly below v_{f+1}: aggregate anchored estimates
        if f + 1 < len(path):
            below = [
                v for v in self._internal_under(path[f + 1]) if v != path[f + 1]
            ]
            if below:
                a_heights = []
                a_weights = info.anchor_sizes
                far_sets = []
                for i in info.anchors:
                    a_heights.append(est[path[i]].value)
                    far_sets.append(self.leafset[info.left_child[i]])
                for v in below:
                    warns = []
                    p_hats = [
                        self.anchored_response(v, far, warns) for far in far_sets
                    ]
                    q_hat = aggregate_anchor_probs(p_hats, a_weights)
                    h, resid = invert_F(
                        q_hat, a_heights, a_weights,
                        tol=self.cfg.bisect_tol,
                        max_iter=self.cfg.bisect_max_iter,
                    )
                    h = final_correction(h, a_heights)
                    est[v] = VertexEstimate(h, "coarse", "aggregated-anchors",
                                            warns, residual=resid)
        return self._finish(est)

    def _internal_under(self, top):
        out = []
        stack = [int(top)]
        while stack:
            u = stack.pop()
            if not self.topo.is_leaf(u):
                out.append(u)
                stack.extend(self.topo.children(u))
        return sorted(out)

    def _finish(self, est):
        # top-down monotonicity clamp, then edge weights as differences
        for v in self.topo.topo_order():
            v = int(v)
            p = self.topo.parent[v]
            if p == NO_NODE:
                continue
            if est[v].value > est[p].value:
                est[v].value = est[p].value
                est[v].warnings.append("clamped-to-parent")
        edges = {}
        for v in range(self.topo.n_nodes):
            p = self.topo.parent[v]
            if p != NO_NODE:
                edges[v] = est[p].value - est[v].value
        return HeightEstimates(topology=self.topo, by_node=est,
                               edge_weights=edges)


def compute_light_tree(oracle, topology, cfg=None):
    """Height estimates for all internal vertices on the root's light side."""
    cfg = cfg or WeightConfig()
    drv = _WeightDriver(oracle, topology, cfg)
    light_r, heavy_r = topology.ordered_children(topology.root)
    wits = drv.leafset[heavy_r]
    out = {}
    for v in drv._internal_under(light_r):
        warns = []
        p = drv.anchored_response(v, wits, warns)
        out[v] = VertexEstimate(drv._safe_height_from_prob(p, warns),
                                "fine", "light-tree", warns)
    return out


def reconstruct_right_path(oracle, topology, cfg=None):
    """Height estimates for the heavy-path vertices v_1..v_f (+ v_{f+1})."""
    cfg = cfg or WeightConfig()
    drv = _WeightDriver(oracle, topology, cfg)
    info = classify_heavy(topology, cfg.alpha)
    light_r, _ = topology.ordered_children(topology.root)
    witness = int(drv.leafset[light_r][0])
    out = {topology.root: VertexEstimate(1.0, "exact", "root-normalization")}
    for idx in range(1, info.f + 2):
        if idx >= len(info.path):
            break
        v = info.path[idx]
        if topology.is_leaf(v):
            continue
        warns = []
        p = drv.cross_pair_response(v, witness)
        out[v] = VertexEstimate(drv._safe_height_from_prob(p, warns),
                                "fine", "right-path", warns)
    return out


def anchor_estimate(oracle, topology, v, anchor, cfg=None):
    """
    Anchored response of internal vertex ``v`` against the path vertex
    ``anchor`` (an ancestor): the fraction of experiments (a, b, c_i)
    answering (a, b) with c_i in the anchor's subtree away from v.
    Returns (p_hat, k).
    """
    cfg = cfg or WeightConfig()
    drv = _WeightDriver(oracle, topology, cfg)
    c1, c2 = topology.children(anchor)
    in1 = np.isin(drv.leafset[v], drv.leafset[c1]).any()
    far = c2 if in1 else c1
    if np.isin(drv.leafset[v], drv.leafset[far]).any():
        raise ValueError("anchor must separate v from its witness side")
    warns = []
    p = drv.anchored_response(v, drv.leafset[far], warns)
    return p, int(len(drv.leafset[far]))


def reconstruct_weights(oracle, topology, cfg=None):
    """
    Estimate every vertex height and edge weight of ``topology`` from the
    oracle's experiments.  Returns HeightEstimates; leaves are exactly 0,
    the root exactly 1, and heights are monotone along root-leaf paths.
    """
    cfg = cfg or WeightConfig()
    return _WeightDriver(oracle, topology, cfg).run()

"""
Weighted ultrametric full binary trees.

A tree is stored as parallel arrays indexed by node id: parent links, child
pairs, per-node height (total weight of any path from the node down to a leaf
in its subtree) and the weight of the edge to the parent.  Heights are the
source of truth; edge weights are kept in sync so that
``weight[v] == height[parent[v]] - height[v]`` at construction time and the
validator can cross-check both.

Leaf labels are nonempty strings without any of ``"():,;"``.  The canonical
leaf order used throughout (distance matrices, oracles) is sorted label
order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

NO_NODE = -1

_FORBIDDEN_LABEL_CHARS = set('():,; \t\n')


class TreeError(Exception):
    """Base class for tree construction / query errors."""


class InfeasibleTreeError(TreeError):
    """No ultrametric topology can satisfy the requested constraints."""


class CorruptTreeError(TreeError):
    """The tree violates an invariant required by an operation."""


class NewickParseError(TreeError):
    """Malformed Newick input; carries the byte offset of the failure."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class Tree:
    """
    Rooted weighted full binary tree whose leaf metric is an ultrametric.

    Attributes
    ----------
    parent : int32[n_nodes]    Parent id, NO_NODE for the root.
    child1, child2 : int32[n_nodes]   Children ids, NO_NODE for leaves.
    height : float64[n_nodes]  Distance from the node down to any leaf below.
    weight : float64[n_nodes]  Weight of the edge to the parent; 0 for root.
    labels : list[str|None]    Leaf label per node, None for internal nodes.
    root : int
    """

    def __init__(self, parent, child1, child2, height, weight, labels):
        self.parent = np.asarray(parent, dtype=np.int32)
        self.child1 = np.asarray(child1, dtype=np.int32)
        self.child2 = np.asarray(child2, dtype=np.int32)
        self.height = np.asarray(height, dtype=np.float64)
        self.weight = np.asarray(weight, dtype=np.float64)
        self.labels = list(labels)
        roots = np.nonzero(self.parent == NO_NODE)[0]
        if len(roots) != 1:
            raise CorruptTreeError(f"expected exactly one root, found {len(roots)}")
        self.root = int(roots[0])
        self._leaf_nodes = {}
        for v, lab in enumerate(self.labels):
            if lab is not None:
                if lab in self._leaf_nodes:
                    raise CorruptTreeError(f"duplicate leaf label {lab!r}")
                self._leaf_nodes[lab] = v
        self.leaf_labels = sorted(self._leaf_nodes)
        self.leaf_nodes = np.asarray(
            [self._leaf_nodes[lab] for lab in self.leaf_labels], dtype=np.int32
        )
        self._depth = None
        self._nl = None

    # ------------------------------------------------------------------ #
    # Basic structure                                                     #
    # ------------------------------------------------------------------ #

    @property
    def n_nodes(self):
        return len(self.labels)

    @property
    def n_leaves(self):
        return len(self.leaf_labels)

    def is_leaf(self, v):
        return self.child1[v] == NO_NODE

    def node_of(self, label):
        try:
            return self._leaf_nodes[label]
        except KeyError:
            raise KeyError(f"unknown leaf {label!r}") from None

    def children(self, v):
        return int(self.child1[v]), int(self.child2[v])

    def depths(self):
        """Edge depth of every node from the root (computed once, cached)."""
        if self._depth is None:
            d = np.zeros(self.n_nodes, dtype=np.int32)
            for v in self.topo_order():
                if v != self.root:
                    d[v] = d[self.parent[v]] + 1
            self._depth = d
        return self._depth

    def topo_order(self):
        """Node ids ordered root-first (every parent before its children)."""
        order = np.empty(self.n_nodes, dtype=np.int32)
        order[0] = self.root
        k, m = 0, 1
        while k < m:
            v = order[k]
            k += 1
            if self.child1[v] != NO_NODE:
                order[m] = self.child1[v]
                order[m + 1] = self.child2[v]
                m += 2
        if m != self.n_nodes:
            raise CorruptTreeError("disconnected nodes present")
        return order

    def leaf_counts(self):
        """NL(v): number of leaves in the subtree of every node (cached)."""
        if self._nl is None:
            nl = np.zeros(self.n_nodes, dtype=np.int64)
            for v in self.topo_order()[::-1]:
                if self.is_leaf(v):
                    nl[v] = 1
                else:
                    nl[v] = nl[self.child1[v]] + nl[self.child2[v]]
            self._nl = nl
        return self._nl

    def subtree_leaf_labels(self, v):
        """Sorted labels of the leaves under node v (inclusive)."""
        out = []
        stack = [int(v)]
        while stack:
            u = stack.pop()
            if self.is_leaf(u):
                out.append(self.labels[u])
            else:
                stack.append(int(self.child1[u]))
                stack.append(int(self.child2[u]))
        return sorted(out)

    def ordered_children(self, v):
        """
        (light, heavy) children of v: the heavy child has at least as many
        leaves as the light one.  Equal counts are broken deterministically
        so that the child containing the smallest leaf label goes left.
        """
        a, b = self.children(v)
        nl = self.leaf_counts()
        if nl[a] != nl[b]:
            return (a, b) if nl[a] < nl[b] else (b, a)
        if min(self.subtree_leaf_labels(a)) < min(self.subtree_leaf_labels(b)):
            return a, b
        return b, a

    # ------------------------------------------------------------------ #
    # Distances                                                           #
    # ------------------------------------------------------------------ #

    def lca(self, u, v):
        d = self.depths()
        u, v = int(u), int(v)
        while d[u] > d[v]:
            u = self.parent[u]
        while d[v] > d[u]:
            v = self.parent[v]
        while u != v:
            u = self.parent[u]
            v = self.parent[v]
        return u

    def leaf_distance(self, a, b):
        """Ultrametric distance between leaves a and b: 2 * h(LCA(a, b))."""
        if a == b:
            raise ValueError("leaf_distance requires two distinct leaves")
        va, vb = self.node_of(a), self.node_of(b)
        return 2.0 * float(self.height[self.lca(va, vb)])

    def distance_matrix(self):
        """
        Dense leaf-distance matrix in canonical (sorted label) leaf order.
        D[i, j] = 2 * h(LCA) with zeros on the diagonal.
        """
        n = self.n_leaves
        pos = np.full(self.n_nodes, -1, dtype=np.int64)
        pos[self.leaf_nodes] = np.arange(n)
        D = np.zeros((n, n), dtype=np.float64)
        sets = [None] * self.n_nodes
        for v in self.topo_order()[::-1]:
            v = int(v)
            if self.is_leaf(v):
                sets[v] = np.array([pos[v]], dtype=np.int64)
            else:
                a, b = self.children(v)
                sa, sb = sets[a], sets[b]
                D[np.ix_(sa, sb)] = 2.0 * self.height[v]
                D[np.ix_(sb, sa)] = 2.0 * self.height[v]
                sets[v] = np.concatenate([sa, sb])
                sets[a] = sets[b] = None
        return D

    def path_length_to_root(self, v):
        total = 0.0
        while self.parent[v] != NO_NODE:
            total += float(self.weight[v])
            v = self.parent[v]
        return total


def closest_pair(tree, a, b, c):
    """
    The unique closest pair among three distinct leaves, as a sorted tuple.

    In a valid full binary ultrametric tree the two largest of the three
    pairwise distances are equal and the smallest is strictly smaller; a
    three-way tie means the tree is corrupt.
    """
    if len({a, b, c}) != 3:
        raise ValueError("closest_pair requires three distinct leaves")
    pairs = [(a, b), (b, c), (c, a)]
    dists = [tree.leaf_distance(x, y) for x, y in pairs]
    i = int(np.argmin(dists))
    others = [dists[j] for j in range(3) if j != i]
    if not (dists[i] < min(others)):
        raise CorruptTreeError(
            f"no strictly closest pair among {(a, b, c)}: distances {dists}"
        )
    x, y = pairs[i]
    return tuple(sorted((x, y)))


# ---------------------------------------------------------------------- #
# Construction helpers                                                    #
# ---------------------------------------------------------------------- #


class _Builder:
    """Accumulates nodes; finish() emits a Tree."""

    def __init__(self):
        self.parent = []
        self.child1 = []
        self.child2 = []
        self.height = []
        self.weight = []
        self.labels = []

    def add_leaf(self, label):
        self.parent.append(NO_NODE)
        self.child1.append(NO_NODE)
        self.child2.append(NO_NODE)
        self.height.append(0.0)
        self.weight.append(0.0)
        self.labels.append(label)
        return len(self.labels) - 1

    def add_internal(self, left, right, height):
        v = len(self.labels)
        self.parent.append(NO_NODE)
        self.child1.append(left)
        self.child2.append(right)
        self.height.append(float(height))
        self.weight.append(0.0)
        self.labels.append(None)
        for c in (left, right):
            self.parent[c] = v
            self.weight[c] = float(height) - self.height[c]
        return v

    def finish(self):
        return Tree(self.parent, self.child1, self.child2,
                    self.height, self.weight, self.labels)


def tree_from_topology(shape, height=1.0):
    """
    Build a Tree from a nested-pair topology, e.g. ``(("a", "b"), "c")``.

    Heights are assigned so every node sits at ``height * levels_below /
    levels_below_root`` where levels counts edges on the longest downward
    path; the result is a valid ultrametric of the requested height whose
    topology equals the given shape.  Useful for tests and for giving a
    reconstructed topology a concrete ultrametric embedding.
    """

    def levels(s):
        if isinstance(s, str):
            return 0
        return 1 + max(levels(s[0]), levels(s[1]))

    total = levels(shape)
    if total == 0:
        raise ValueError("topology must contain at least two leaves")
    b = _Builder()

    def build(s):
        if isinstance(s, str):
            return b.add_leaf(s)
        left = build(s[0])
        right = build(s[1])
        h = height * levels(s) / total
        return b.add_internal(left, right, h)

    build(shape)
    return b.finish()


def generate_random_ultrametric(n, min_edge_weight, seed):
    """
    Random ultrametric full binary tree with ``n`` leaves, height exactly 1,
    and every edge weight at least ``min_edge_weight``.

    Topology comes from recursive uniform splits; internal heights are then
    drawn top-down uniformly inside the feasible interval left by the
    min-weight constraint.  Infeasible topology draws are rejected and
    retried up to 1000 times.  Deterministic per seed.
    """
    if n < 2:
        raise ValueError("need at least 2 leaves")
    w = float(min_edge_weight)
    if w <= 0:
        raise ValueError("min_edge_weight must be positive")
    min_depth = int(np.ceil(np.log2(n)))
    if w * min_depth > 1.0 + 1e-12:
        raise InfeasibleTreeError(
            f"min_edge_weight={w} impossible for n={n}: any topology has a "
            f"root-leaf path of >= {min_depth} edges"
        )
    rng = np.random.default_rng(seed)
    width = max(2, len(str(n - 1)))
    leaf_names = [f"L{i:0{width}d}" for i in range(n)]
    budget = int(math.floor(1.0 / w + 1e-9))  # max affordable edge depth

    for _ in range(1000):
        # random topology: split sizes drawn uniformly inside the window
        # that keeps every side within its remaining depth budget (the
        # window is the full 1..k-1 whenever the budget is slack)
        splits = {}

        def split(lo, hi, b):  # leaves lo..hi-1 under one node
            k = hi - lo
            if k == 1:
                return
            cap = 1 << (b - 1)
            j_lo, j_hi = max(1, k - cap), min(k - 1, cap)
            j = int(rng.integers(j_lo, j_hi + 1))
            splits[(lo, hi)] = j
            split(lo, lo + j, b - 1)
            split(lo + j, hi, b - 1)

        split(0, n, budget)

        depth_req = {}

        def depth(lo, hi):
            if hi - lo == 1:
                depth_req[(lo, hi)] = 0
                return 0
            j = splits[(lo, hi)]
            d = 1 + max(depth(lo, lo + j), depth(lo + j, hi))
            depth_req[(lo, hi)] = d
            return d

        if w * depth(0, n) > 1.0 + 1e-12:
            continue

        b = _Builder()

        def build(lo, hi, h):
            if hi - lo == 1:
                return b.add_leaf(leaf_names[lo])
            j = splits[(lo, hi)]
            kids = []
            for clo, chi in ((lo, lo + j), (lo + j, hi)):
                if chi - clo == 1:
                    kids.append(build(clo, chi, 0.0))
                else:
                    lo_h = w * depth_req[(clo, chi)]
                    hi_h = h - w
                    hc = float(rng.uniform(lo_h, hi_h)) if hi_h > lo_h else lo_h
                    kids.append(build(clo, chi, hc))
            return b.add_internal(kids[0], kids[1], h)

        build(0, n, 1.0)
        return b.finish()

    raise InfeasibleTreeError(
        f"no feasible topology found for n={n}, min_edge_weight={w} "
        f"after 1000 attempts"
    )


# ---------------------------------------------------------------------- #
# Buckets, induced topology, quotient                                     #
# ---------------------------------------------------------------------- #


@dataclass
class BucketPartition:
    """
    Partition of the leaves outside a base subtree into buckets ordered
    along the path from the base root to the tree root (bucket 1 nearest).
    """

    base_root: int
    buckets: list = field(default_factory=list)  # list of sorted label lists
    index_of: dict = field(default_factory=dict)  # leaf label -> bucket index (1-based)


def bucket_partition(tree, subtree_root):
    """Bucket the leaves outside the subtree at ``subtree_root``."""
    v = int(subtree_root)
    if v == tree.root:
        raise ValueError("bucket_partition is undefined for the whole tree")
    part = BucketPartition(base_root=v)
    while tree.parent[v] != NO_NODE:
        p = int(tree.parent[v])
        sib = int(tree.child1[p]) if int(tree.child2[p]) == v else int(tree.child2[p])
        labels = tree.subtree_leaf_labels(sib)
        part.buckets.append(labels)
        idx = len(part.buckets)
        for lab in labels:
            part.index_of[lab] = idx
        v = p
    return part


def induced_topology(tree, leaf_subset):
    """
    The topology induced on a subset of leaves: leaves outside are removed
    and one-child internal nodes are suppressed, merging their two incident
    edges.  Leaf distances within the subset are preserved exactly.
    """
    keep = set(leaf_subset)
    if len(keep) < 2:
        raise ValueError("induced topology needs at least 2 leaves")
    unknown = keep - set(tree.leaf_labels)
    if unknown:
        raise KeyError(f"unknown leaves {sorted(unknown)!r}")

    b = _Builder()

    def build(v):  # returns new node id for the pruned subtree at v, or None
        stack = [(int(v), False)]
        done = {}
        while stack:
            u, ready = stack.pop()
            if tree.is_leaf(u):
                lab = tree.labels[u]
                done[u] = b.add_leaf(lab) if lab in keep else None
                continue
            c1, c2 = tree.children(u)
            if not ready:
                stack.append((u, True))
                stack.append((c1, False))
                stack.append((c2, False))
                continue
            k1, k2 = done[c1], done[c2]
            if k1 is not None and k2 is not None:
                done[u] = b.add_internal(k1, k2, float(tree.height[u]))
            else:
                done[u] = k1 if k1 is not None else k2
        return done[int(v)]

    top = build(tree.root)
    if top is None:
        raise ValueError("no leaves kept")
    return b.finish()


def quotient(tree, subtree_root):
    """
    Collapse the subtree at ``subtree_root`` into a single representative
    leaf (the lexicographically smallest collapsed label).  Returns
    ``(quotient_tree, rep_map)`` where ``rep_map`` maps the representative
    label to the sorted list of collapsed labels.

    Distances among surviving leaves are unchanged; the representative sits
    at depth equal to the collapsed root's former position plus its height,
    so its distances to all outside leaves are also unchanged.
    """
    v = int(subtree_root)
    if v == tree.root:
        raise ValueError("cannot take the quotient by the whole tree")
    collapsed = tree.subtree_leaf_labels(v)
    rep = collapsed[0]
    if tree.is_leaf(v):
        keep = set(tree.leaf_labels)
    else:
        keep = (set(tree.leaf_labels) - set(collapsed)) | {rep}

    b = _Builder()

    def build(u):
        if u == v:
            return b.add_leaf(rep)
        if tree.is_leaf(u):
            lab = tree.labels[u]
            return b.add_leaf(lab) if lab in keep else None
        c1, c2 = tree.children(u)
        k1, k2 = build(c1), build(c2)
        if k1 is not None and k2 is not None:
            return b.add_internal(k1, k2, float(tree.height[u]))
        return k1 if k1 is not None else k2

    build(tree.root)
    return b.finish(), {rep: collapsed}


def topology_equal(t1, t2):
    """
    True iff the two trees have the same leaf-labeled rooted topology
    (edge weights ignored, child order ignored).
    """
    if set(t1.leaf_labels) != set(t2.leaf_labels):
        raise ValueError("topology_equal requires identical leaf-label sets")
    return _canonical_shape(t1) == _canonical_shape(t2)


def _canonical_shape(tree):
    shapes = [None] * tree.n_nodes
    for v in tree.topo_order()[::-1]:
        v = int(v)
        if tree.is_leaf(v):
            shapes[v] = tree.labels[v]
        else:
            a, b = tree.children(v)
            sa, sb = shapes[a], shapes[b]
            shapes[v] = (sa, sb) if str(sa) <= str(sb) else (sb, sa)
            shapes[a] = shapes[b] = None
    return shapes[tree.root]


# ---------------------------------------------------------------------- #
# Newick serialization                                                    #
# ---------------------------------------------------------------------- #


def to_newick(tree):
    """Serialize topology + branch lengths; lossless for float64 weights."""
    parts = {}
    for v in tree.topo_order()[::-1]:
        v = int(v)
        if tree.is_leaf(v):
            s = tree.labels[v]
        else:
            a, b = tree.children(v)
            s = f"({parts.pop(a)},{parts.pop(b)})"
        if tree.parent[v] != NO_NODE:
            s += f":{float(tree.weight[v])!r}"
        parts[v] = s
    return parts[tree.root] + ";"


def from_newick(text):
    """Parse a Newick string with branch lengths into a Tree."""
    s = text.strip()
    pos = 0

    def error(msg):
        raise NewickParseError(msg, pos)

    def peek():
        return s[pos] if pos < len(s) else ""

    def parse_label():
        nonlocal pos
        start = pos
        while pos < len(s) and s[pos] not in '():,;':
            pos += 1
        label = s[start:pos].strip()
        if not label:
            error("expected a leaf label")
        if set(label) & _FORBIDDEN_LABEL_CHARS:
            error(f"invalid characters in label {label!r}")
        return label

    def parse_length():
        nonlocal pos
        if peek() != ":":
            error("expected ':' before branch length")
        pos += 1
        start = pos
        while pos < len(s) and s[pos] not in '(),;':
            pos += 1
        try:
            return float(s[start:pos])
        except ValueError:
            error(f"bad branch length {s[start:pos]!r}")

    def parse_clade():
        # returns (list of (subtree, edge weight) pairs resolved later)
        nonlocal pos
        if peek() == "(":
            pos += 1
            first = parse_subtree()
            if peek() != ",":
                error("expected ',' in clade")
            pos += 1
            second = parse_subtree()
            if peek() != ")":
                error("expected ')'")
            pos += 1
            return ("clade", first, second)
        return ("leaf", parse_label())

    def parse_subtree():
        node = parse_clade()
        length = parse_length()
        return (node, length)

    top = parse_clade()
    if peek() == ":":
        error("root must not carry a branch length")
    if peek() != ";":
        error("expected trailing ';'")
    pos += 1
    if pos != len(s):
        error("trailing characters after ';'")
    if top[0] == "leaf":
        error("a tree needs at least two leaves")

    b = _Builder()

    def depth_below(node):
        if node[0] == "leaf":
            return 0.0
        (c1, w1), (c2, w2) = node[1], node[2]
        d1 = w1 + depth_below(c1)
        d2 = w2 + depth_below(c2)
        return max(d1, d2)

    def build(node):
        if node[0] == "leaf":
            return b.add_leaf(node[1]), 0.0
        (c1, w1), (c2, w2) = node[1], node[2]
        k1, h1 = build(c1)
        k2, h2 = build(c2)
        h = max(h1 + w1, h2 + w2)
        k = b.add_internal(k1, k2, h)
        # keep the given branch lengths verbatim so serialization round
        # trips bit-exactly; heights absorb any last-place disagreement
        b.weight[k1] = w1
        b.weight[k2] = w2
        return k, h

    build(top)
    return b.finish()


# ---------------------------------------------------------------------- #
# Validation                                                              #
# ---------------------------------------------------------------------- #


@dataclass
class ValidationReport:
    ok: bool
    violations: list

    def __bool__(self):
        return self.ok


def validate_ultrametric(tree, tol=1e-9, expected_height=1.0, triangle_samples=500):
    """
    Check the ultrametric invariants and return a ValidationReport.

    Checks: full-binariness, strictly positive edge weights, leaf heights
    exactly 0, height/weight consistency, root-leaf path-weight sums within
    ``[expected_height - tol, expected_height + tol]``, and the strong
    triangle inequality on a deterministic sample of leaf triples.
    """
    bad = []
    for v in range(tree.n_nodes):
        kids = [c for c in tree.children(v) if c != NO_NODE]
        if len(kids) == 1:
            bad.append(f"node {v} has exactly one child")
        if v != tree.root and tree.weight[v] <= 0:
            bad.append(f"edge to node {v} has non-positive weight {tree.weight[v]}")
        for c in kids:
            drift = abs(tree.height[v] - tree.height[c] - tree.weight[c])
            if drift > tol:
                bad.append(
                    f"height inconsistency at node {v}->{c}: drift {drift:.3g}"
                )
    for lab in tree.leaf_labels:
        v = tree.node_of(lab)
        if tree.height[v] != 0.0:
            bad.append(f"leaf {lab} has nonzero height")
        total = tree.path_length_to_root(v)
        if abs(total - expected_height) > tol:
            bad.append(
                f"root path to leaf {lab} sums to {total!r}, "
                f"expected {expected_height}"
            )
    n = tree.n_leaves
    if n >= 3 and not bad:
        rng = np.random.default_rng(0)
        n_samples = min(triangle_samples, n * (n - 1) * (n - 2) // 6)
        for _ in range(n_samples):
            i, j, k = rng.choice(n, size=3, replace=False)
            a, b, c = (tree.leaf_labels[int(x)] for x in (i, j, k))
            dab = tree.leaf_distance(a, b)
            dbc = tree.leaf_distance(b, c)
            dca = tree.leaf_distance(c, a)
            if dca > max(dab, dbc) + tol:
                bad.append(
                    f"strong triangle violated on ({a},{b},{c}): "
                    f"{dca:.6g} > max({dab:.6g},{dbc:.6g})"
                )
                break
    return ValidationReport(ok=not bad, violations=bad)

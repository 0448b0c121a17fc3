"""
Topology reconstruction from the results of noisy closest-pair experiments.

The pipeline resolves small subtrees first and stitches them together:

1. build a "base" subtree of about sqrt(n) leaves bottom-up by repeatedly
   merging the highest-scoring pair of current subtrees;
2. build a "pivot" subtree among the remaining leaves the same way;
3. split the remaining leaves into the buckets below the pivot, the
   pivot's own bucket, and the buckets above, using paired counting tests;
4. resolve every small part directly from score tests against leaves
   outside it (or inside the resolved part, for the quotient direction)
   and recurse on the single part that may stay unresolved, collapsing the
   pivot to a representative leaf when the recursion descends into its
   bucket.

All count comparisons use the threshold c_thr * sqrt(n * ln n).  With the
noiseless model every informative margin is exact, so noiseless runs use
c_thr = 0; score ties (which are systematic in that model) fall back to
the direct answer of the triple in question.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .noise_oracle import ExpectationOracle
from .tree_core import _Builder

_CHUNK = 1 << 21


class ReconstructionFailure(Exception):
    """A reconstruction step could not produce a consistent answer."""

    def __init__(self, stage, detail, witness=None):
        super().__init__(f"[{stage}] {detail}")
        self.stage = stage
        self.detail = detail
        self.witness = witness


@dataclass
class ScoreVerdict:
    outcome: str  # "left" | "right" | "tie"
    margin: float
    threshold: float


@dataclass
class ReconstructionConfig:
    """
    Tunables of the reconstruction pipeline.  Defaults follow the analysis
    constants; noiseless or expectation-mode runs should use c_thr = 0
    since their score margins are exact.
    """

    c_thr: float = 24.0
    sample_floor_fraction: float = 1.0 / 16.0
    subtree_band: tuple | None = None  # explicit (lo, hi) leaf-count band
    large_fraction: float = 11.0 / 12.0
    small_fraction: float = 1.0 / 12.0
    n0: int = 8

    def threshold(self, n):
        return self.c_thr * math.sqrt(n * math.log(n)) if n > 1 else 0.0

    def band(self, n):
        if self.subtree_band is not None:
            return self.subtree_band
        lo = math.ceil(math.sqrt(n))
        return lo, 2 * lo

    @classmethod
    def for_oracle(cls, oracle, **overrides):
        """
        Config with c_thr zeroed for noise-free answer sources (the
        noiseless model, or an expectation oracle whose score margins are
        exact): with no noise, any positive margin is decisive.
        """
        cfg = cls(**overrides)
        if "c_thr" not in overrides and (
            isinstance(oracle, ExpectationOracle)
            or oracle.model.kind == "noiseless"
        ):
            cfg.c_thr = 0.0
        return cfg


def compare_sums(x, y, n, cfg=None):
    """Verdict on two indicator sums at threshold c_thr * sqrt(n ln n)."""
    cfg = cfg or ReconstructionConfig()
    thr = cfg.threshold(n)
    margin = float(x) - float(y)
    if margin > thr:
        outcome = "left"
    elif -margin > thr:
        outcome = "right"
    else:
        outcome = "tie"
    return ScoreVerdict(outcome=outcome, margin=margin, threshold=thr)


@dataclass
class RunStats:
    """Bookkeeping of one reconstruction run, for tests and diagnostics."""

    n: int = 0
    band: tuple = (0, 0)  # subtree size band in force during the run
    bases: list = field(default_factory=list)  # leaf counts of built subtrees
    collapses: list = field(default_factory=list)  # leaf counts of collapsed pivots
    events: list = field(default_factory=list)  # ordered ("base"|"collapse", size)
    floor_violations: int = 0
    stages: list = field(default_factory=list)

    def check_accounting(self, n=None):
        """
        Every pivot collapse must stay within the size band's top and be
        followed either by a fresh base of at least the band's bottom or
        by a direct completion of the collapsed bucket against leaves
        outside it (whose existence the completion call itself enforces).
        """
        lo, hi = self.band
        pending = 0
        for kind, size in self.events:
            if kind == "collapse":
                if size > hi:
                    return False
                pending += 1
            elif kind == "base" and pending:
                if size < lo:
                    return False
                pending -= 1
            elif kind == "direct" and pending:
                pending -= 1
        return pending == 0


# ---------------------------------------------------------------------- #
# Batched score helpers (leaf indices throughout)                         #
# ---------------------------------------------------------------------- #


def _wins_sum_pairs(oracle, A, B, xs, forbid_part=None, part_of=None,
                    pa=None, pb=None):
    """
    For each pair (A[p], B[p]): sum of oracle.wins(A[p], B[p], x) over all
    x in ``xs`` that do not belong to the pair's own parts (membership via
    ``part_of``; skipped when forbid_part is None).
    """
    P = len(A)
    m = len(xs)
    out = np.zeros(P, dtype=np.float64)
    if m == 0 or P == 0:
        return out
    rows_per = max(1, _CHUNK // m)
    xs = np.asarray(xs, dtype=np.int64)
    for lo in range(0, P, rows_per):
        hi = min(P, lo + rows_per)
        Ab = np.repeat(A[lo:hi], m)
        Bb = np.repeat(B[lo:hi], m)
        Xb = np.tile(xs, hi - lo)
        if forbid_part is not None:
            mask = (part_of[Xb] != np.repeat(pa[lo:hi], m)) & (
                part_of[Xb] != np.repeat(pb[lo:hi], m)
            )
        else:
            mask = (Xb != Ab) & (Xb != Bb)
        w = oracle.wins(Ab[mask], Bb[mask], Xb[mask])
        rows = np.repeat(np.arange(lo, hi), m)[mask]
        out += np.bincount(rows, weights=w, minlength=P)
    return out


def sibling_scores(oracle, forest, ambient, n=None, cfg=None):
    """
    Score matrix over a leaf-disjoint forest: s[i][j] counts, over ambient
    leaves x outside parts i and j, the experiments (rep_i, rep_j, x) that
    answered (rep_i, rep_j).  Representatives are each part's
    lexicographically smallest leaf.  Returns (reps, matrix).
    """
    parts = [sorted(oracle.index_of[lab] for lab in p) for p in forest]
    amb = np.array(sorted(oracle.index_of[lab] for lab in ambient), dtype=np.int64)
    n = n or oracle.n_leaves
    cfg = cfg or ReconstructionConfig()
    if len(amb) < n * cfg.small_fraction:
        raise ValueError(
            f"ambient set too small: {len(amb)} < n/12 = {n * cfg.small_fraction:.1f}"
        )
    part_of = np.full(oracle.n_leaves, -1, dtype=np.int64)
    for pid, members in enumerate(parts):
        part_of[members] = pid
    reps = np.array([p[0] for p in parts], dtype=np.int64)
    l = len(parts)
    ii, jj = np.triu_indices(l, k=1)
    scores = _wins_sum_pairs(
        oracle, reps[ii], reps[jj], amb,
        forbid_part=True, part_of=part_of, pa=ii.astype(np.int64),
        pb=jj.astype(np.int64),
    )
    M = np.zeros((l, l), dtype=np.float64)
    M[ii, jj] = scores
    M[jj, ii] = scores
    rep_labels = [oracle.labels[int(r)] for r in reps]
    return rep_labels, M


# ---------------------------------------------------------------------- #
# Assembly engine: repeated sibling-pair merging                          #
# ---------------------------------------------------------------------- #


class _ScoreProvider:
    """
    Closest-pair provider backed by a pairwise score matrix, with a
    fallback to the direct experiment answer when all candidate scores tie
    exactly (systematic under the noiseless model, where within-subtree
    scores carry no signal).
    """

    def __init__(self, oracle, ids, matrix):
        self.oracle = oracle
        self.pos = {int(v): i for i, v in enumerate(ids)}
        self.M = matrix

    def _direct(self, A, B, C):
        wab = self.oracle.wins(A, B, C)
        wbc = self.oracle.wins(B, C, A)
        wca = self.oracle.wins(C, A, B)
        return np.argmax(np.stack([wab, wca, wbc]), axis=0)  # 0:(a,b) 1:(a,c) 2:(b,c)

    def closest_batch(self, a, b, C):
        """Codes per row: 0 keep (a,b); 1 -> (a,C); 2 -> (b,C)."""
        C = np.asarray(C, dtype=np.int64)
        ia, ib = self.pos[int(a)], self.pos[int(b)]
        ic = np.array([self.pos[int(c)] for c in C], dtype=np.int64)
        sab = self.M[ia, ib]
        sac = self.M[ia, ic]
        sbc = self.M[ib, ic]
        stacked = np.stack([np.full(len(C), sab), sac, sbc])
        best = np.argmax(stacked, axis=0)
        top = stacked[best, np.arange(len(C))]
        tied = (np.sum(stacked == top, axis=0) > 1)
        if np.any(tied):
            idx = np.nonzero(tied)[0]
            A = np.full(len(idx), a, dtype=np.int64)
            B = np.full(len(idx), b, dtype=np.int64)
            best[idx] = self._direct(A, B, C[idx])
        return best


class _CallableProvider:
    """Adapter for a scalar closest-pair function over leaf labels."""

    def __init__(self, fn, labels_of):
        self.fn = fn
        self.labels_of = labels_of

    def closest_batch(self, a, b, C):
        la, lb = self.labels_of(a), self.labels_of(b)
        out = np.empty(len(C), dtype=np.int64)
        for i, c in enumerate(C):
            lc = self.labels_of(int(c))
            win = set(self.fn(la, lb, lc))
            if win == {la, lb}:
                out[i] = 0
            elif win == {la, lc}:
                out[i] = 1
            elif win == {lb, lc}:
                out[i] = 2
            else:
                raise ReconstructionFailure(
                    "triple-assembly",
                    f"closest-pair function returned {win} for ({la},{lb},{lc})",
                    witness=(la, lb, lc),
                )
        return out


def _find_sibling_pair(a, b, reps, provider, stage):
    """
    Starting from the candidate pair (a, b), let closest-pair answers
    displace it until no representative does; raises with a witness when
    the answers cycle instead of settling (they admit no tree).
    """
    guard = 0
    c = None
    while True:
        others = np.array([r for r in reps if r not in (a, b)], dtype=np.int64)
        if len(others) == 0:
            return a, b
        codes = provider.closest_batch(a, b, others)
        moved = np.nonzero(codes != 0)[0]
        if len(moved) == 0:
            return a, b
        i = int(moved[0])
        c = int(others[i])
        a, b = (a, c) if codes[i] == 1 else (b, c)
        guard += 1
        if guard > 2 * len(reps) + 4:
            raise ReconstructionFailure(
                stage,
                "closest-pair answers do not stabilize to a sibling pair",
                witness=(a, b, c),
            )


def _assemble_engine(ids, plans, provider, stage="triple-assembly"):
    """
    Build a topology over the given cluster representatives by repeatedly
    locating a sibling pair (a pair that no third representative displaces)
    and merging it.
    """
    reps = [int(v) for v in ids]
    plans = dict(zip(reps, plans))
    while len(reps) > 1:
        reps.sort()
        a, b = _find_sibling_pair(reps[0], reps[1], reps, provider, stage)
        lo, hi = min(a, b), max(a, b)
        plans[lo] = (plans[lo], plans.pop(hi))
        reps.remove(hi)
    return plans[reps[0]]


def _assemble_by_scores(ids, plans, M, provider, stage):
    """
    Agglomerate by merging the pair of representatives with the highest
    pairwise score: the expected score is strictly decreasing in the pair
    distance against an equidistant witness set, so the best-supported
    pair is a sibling pair.  Exact score ties (systematic without noise,
    where scores carry no signal) are settled by the displacement walk on
    the direct answers.
    """
    ids = [int(v) for v in ids]
    pos = {v: i for i, v in enumerate(ids)}
    plans = dict(zip(ids, plans))
    M = np.array(M, dtype=np.float64)
    np.fill_diagonal(M, -np.inf)
    reps = sorted(ids)
    while len(reps) > 1:
        live = np.array([pos[r] for r in reps], dtype=np.int64)
        sub = M[np.ix_(live, live)]
        iu = np.triu_indices(len(reps), k=1)
        vals = sub[iu]
        best = float(np.max(vals))
        tied = np.nonzero(vals == best)[0]
        if len(tied) == 1:
            a = reps[int(iu[0][tied[0]])]
            b = reps[int(iu[1][tied[0]])]
        else:
            pair0 = min(
                (reps[int(iu[0][t])], reps[int(iu[1][t])]) for t in tied
            )
            a, b = _find_sibling_pair(pair0[0], pair0[1], reps, provider, stage)
        lo, hi = min(a, b), max(a, b)
        plans[lo] = (plans[lo], plans.pop(hi))
        reps.remove(hi)
    return plans[reps[0]]


def assemble_from_triples(closest_pair_fn, leaves, verify=True):
    """
    Build the unique tree consistent with a total closest-pair function on
    triples of the given leaf labels.  With ``verify`` (default), every
    triple of the finished tree is checked against the function and the
    first disagreement raises ReconstructionFailure with that witness.
    """
    leaves = sorted(leaves)
    if len(leaves) < 2:
        raise ValueError("need at least two leaves")
    if len(leaves) == 2:
        return tree_from_plan((leaves[0], leaves[1]))
    idx = {lab: i for i, lab in enumerate(leaves)}
    provider = _CallableProvider(closest_pair_fn, lambda i: leaves[i])
    plan = _assemble_engine(
        list(range(len(leaves))), [leaves[i] for i in range(len(leaves))], provider
    )
    tree = tree_from_plan(plan)
    if verify:
        depth = _pair_lca_depths(plan, idx)

        for a, b, c in itertools.combinations(leaves, 3):
            want = _plan_closest(depth, idx[a], idx[b], idx[c])
            got = tuple(sorted(closest_pair_fn(a, b, c)))
            want_pair = tuple(sorted((leaves[want[0]], leaves[want[1]])))
            if got != want_pair:
                raise ReconstructionFailure(
                    "triple-assembly",
                    f"answers admit no tree: triple ({a},{b},{c}) wants {got}, "
                    f"assembled tree implies {want_pair}",
                    witness=(a, b, c),
                )
    return tree


def _pair_lca_depths(plan, idx):
    """Matrix of LCA depths between leaf positions of a nested plan."""
    m = len(idx)
    depth = np.zeros((m, m), dtype=np.int64)

    def walk(node, d):
        if not isinstance(node, tuple):
            return [idx[node]]
        left = walk(node[0], d + 1)
        right = walk(node[1], d + 1)
        li = np.array(left, dtype=np.int64)
        ri = np.array(right, dtype=np.int64)
        depth[np.ix_(li, ri)] = d
        depth[np.ix_(ri, li)] = d
        return left + right

    walk(plan, 0)
    return depth


def _plan_closest(depth, i, j, k):
    pairs = ((i, j), (j, k), (i, k))
    ds = [depth[p] for p in pairs]
    return pairs[int(np.argmax(ds))]


# ---------------------------------------------------------------------- #
# Plans (nested index tuples) and conversion to trees                     #
# ---------------------------------------------------------------------- #


def graft_plan(plan, target, subplan):
    """Replace the leaf ``target`` in ``plan`` with ``subplan`` (iterative)."""
    if not isinstance(plan, tuple):
        return subplan if plan == target else plan
    # postorder rebuild with an explicit stack
    done = {}
    stack = [(plan, False)]
    while stack:
        node, ready = stack.pop()
        if not isinstance(node, tuple):
            continue
        if not ready:
            stack.append((node, True))
            stack.append((node[0], False))
            stack.append((node[1], False))
            continue
        kids = []
        for ch in node:
            if isinstance(ch, tuple):
                kids.append(done[id(ch)])
            else:
                kids.append(subplan if ch == target else ch)
        done[id(node)] = (kids[0], kids[1])
    return done[id(plan)]


def tree_from_plan(plan, height=1.0):
    """Tree with the plan's topology; heights proportional to level depth."""
    levels = {}
    stack = [(plan, False)]
    while stack:
        node, ready = stack.pop()
        if not isinstance(node, tuple):
            continue
        if not ready:
            stack.append((node, True))
            stack.append((node[0], False))
            stack.append((node[1], False))
        else:
            levels[id(node)] = 1 + max(
                levels.get(id(node[0]), 0), levels.get(id(node[1]), 0)
            )
    if not isinstance(plan, tuple):
        raise ValueError("plan must contain at least two leaves")
    total = levels[id(plan)]
    b = _Builder()
    done = {}
    stack = [(plan, False)]
    while stack:
        node, ready = stack.pop()
        if not isinstance(node, tuple):
            continue
        if not ready:
            stack.append((node, True))
            stack.append((node[0], False))
            stack.append((node[1], False))
            continue
        kids = []
        for ch in node:
            if isinstance(ch, tuple):
                kids.append(done[id(ch)])
            else:
                kids.append(b.add_leaf(str(ch)))
        done[id(node)] = b.add_internal(
            kids[0], kids[1], height * levels[id(node)] / total
        )
    return b.finish()


def _plan_ids_to_labels(plan, labels):
    if not isinstance(plan, tuple):
        return labels[int(plan)]
    done = {}
    stack = [(plan, False)]
    while stack:
        node, ready = stack.pop()
        if not isinstance(node, tuple):
            continue
        if not ready:
            stack.append((node, True))
            stack.append((node[0], False))
            stack.append((node[1], False))
            continue
        kids = [
            done[id(ch)] if isinstance(ch, tuple) else labels[int(ch)]
            for ch in node
        ]
        done[id(node)] = (kids[0], kids[1])
    return done[id(plan)]


# ---------------------------------------------------------------------- #
# The reconstruction driver                                               #
# ---------------------------------------------------------------------- #


class _Driver:
    def __init__(self, oracle, cfg):
        self.oracle = oracle
        self.n = oracle.n_leaves
        self.cfg = cfg
        self.expansion = {}  # virtual id -> np.array of physical ids
        self.stats = RunStats(n=self.n, band=cfg.band(self.n))
        self._all = np.arange(self.n, dtype=np.int64)

    # -- expansion bookkeeping ------------------------------------------ #

    def exp_ids(self, members):
        chunks = []
        for v in members:
            arr = self.expansion.get(int(v))
            chunks.append(arr if arr is not None else np.array([v], dtype=np.int64))
        return np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)

    def exp_size(self, members):
        return sum(
            len(self.expansion[int(v)]) if int(v) in self.expansion else 1
            for v in members
        )

    def outside(self, members):
        mask = np.ones(self.n, dtype=bool)
        mask[self.exp_ids(members)] = False
        return self._all[mask]

    def collapse(self, members, rep):
        self.expansion[int(rep)] = self.exp_ids(members)
        self.stats.collapses.append(self.exp_size([rep]))
        self.stats.events.append(("collapse", self.exp_size([rep])))

    def _note_floor(self, count):
        if count < self.n * self.cfg.sample_floor_fraction:
            self.stats.floor_violations += 1

    # -- build-subtree --------------------------------------------------- #

    def build_subtree(self, members):
        """
        Bottom-up sibling merging inside ``members`` until the largest
        cluster enters the size band; returns (leaf ids, plan).
        """
        lo_band, _ = self.cfg.band(self.n)
        members = sorted(int(v) for v in members)
        S = np.array(members, dtype=np.int64)
        part_of = np.full(self.oracle.n_leaves, -1, dtype=np.int64)
        part_of[S] = np.arange(len(S))
        reps = list(members)
        plans = [v for v in members]
        sizes = [1] * len(S)
        alive = [True] * len(S)
        l = len(S)
        self._note_floor(len(S))

        M = np.full((l, l), -np.inf, dtype=np.float64)
        ii, jj = np.triu_indices(l, k=1)
        vals = _wins_sum_pairs(
            self.oracle,
            np.array([reps[i] for i in ii], dtype=np.int64),
            np.array([reps[j] for j in jj], dtype=np.int64),
            S,
            forbid_part=True,
            part_of=part_of,
            pa=ii.astype(np.int64),
            pb=jj.astype(np.int64),
        )
        M[ii, jj] = vals

        n_alive = l
        while n_alive > 1 and max(
            sz for sz, a in zip(sizes, alive) if a
        ) < lo_band:
            flat = int(np.argmax(M))
            p, q = divmod(flat, l)
            best = M[p, q]
            if not np.isfinite(best):
                raise ReconstructionFailure("build-subtree", "no scorable pair left")
            tied = np.argwhere(M == best)
            if len(tied) > 1:
                key = min(
                    (min(reps[i], reps[j]), max(reps[i], reps[j]), i, j)
                    for i, j in tied
                )
                p, q = key[2], key[3]
            # merge q into p
            plans[p] = (plans[min(p, q)], plans[max(p, q)])
            reps[p] = min(reps[p], reps[q])
            sizes[p] += sizes[q]
            alive[q] = False
            part_of[part_of == q] = p
            M[q, :] = -np.inf
            M[:, q] = -np.inf
            n_alive -= 1
            if n_alive == 1 or sizes[p] >= lo_band:
                break
            others = [t for t in range(l) if alive[t] and t != p]
            ot = np.array(others, dtype=np.int64)
            vals = _wins_sum_pairs(
                self.oracle,
                np.full(len(ot), reps[p], dtype=np.int64),
                np.array([reps[t] for t in others], dtype=np.int64),
                S,
                forbid_part=True,
                part_of=part_of,
                pa=np.full(len(ot), p, dtype=np.int64),
                pb=ot,
            )
            M[p, :] = -np.inf
            M[:, p] = -np.inf
            for t, v in zip(others, vals):
                a, bb = (p, t) if p < t else (t, p)
                M[a, bb] = v

        winner = max(
            (sizes[t], -reps[t], t) for t in range(l) if alive[t]
        )[2]
        leaf_ids = [int(v) for v in S[part_of[S] == winner]]
        self.stats.bases.append(len(leaf_ids))
        self.stats.events.append(("base", len(leaf_ids)))
        return leaf_ids, plans[winner]

    # -- partition -------------------------------------------------------- #

    def partition(self, base, pivot, candidates):
        """Split candidates into below / same bucket / above the pivot."""
        base = np.asarray(sorted(base), dtype=np.int64)
        pivot = np.asarray(sorted(pivot), dtype=np.int64)
        cands = sorted(int(x) for x in candidates)
        if not cands:
            return [], [], []
        A = np.repeat(base, len(pivot))
        B = np.tile(pivot, len(base))
        thr = self.cfg.threshold(self.n)
        P1, P2, P3 = [], [], []
        self._note_floor(len(A))
        for x in cands:
            X = np.full(len(A), x, dtype=np.int64)
            xv = float(np.sum(self.oracle.wins(A, X, B)))
            yv = float(np.sum(self.oracle.wins(A, B, X)))
            if xv - yv > thr:
                P1.append(x)
            elif yv - xv > thr:
                P3.append(x)
            else:
                P2.append(x)
        return P1, P2, P3

    # -- completions ------------------------------------------------------ #

    def _score_matrix(self, members, xs):
        ids = np.asarray(members, dtype=np.int64)
        m = len(ids)
        M = np.zeros((m, m), dtype=np.float64)
        if m < 2 or len(xs) == 0:
            return M
        ii, jj = np.triu_indices(m, k=1)
        vals = _wins_sum_pairs(self.oracle, ids[ii], ids[jj], np.asarray(xs))
        M[ii, jj] = vals
        M[jj, ii] = vals
        return M

    def completion_induced(self, members, stage="completion-induced"):
        """Resolve the induced topology on ``members`` from outside scores."""
        members = sorted(int(v) for v in members)
        if len(members) == 1:
            return members[0]
        if len(members) == 2:
            return (members[0], members[1])
        xs = self.outside(members)
        if len(xs) == 0:
            raise ReconstructionFailure(stage, "no leaves outside the target set")
        self._note_floor(len(xs))
        M = self._score_matrix(members, xs)
        provider = _ScoreProvider(self.oracle, members, M)
        return _assemble_by_scores(members, list(members), M, provider, stage)

    def completion_quotient(self, inside, candidates):
        """
        Resolve the quotient structure above the subtree on ``inside``:
        order the candidates' buckets, resolve each bucket's interior, and
        return (plan over candidates plus the inside representative, rep).
        """
        inside = sorted(int(v) for v in inside)
        anchors = np.asarray(inside, dtype=np.int64)
        rep = inside[0]
        cands = sorted(int(x) for x in candidates)
        self._note_floor(len(anchors))
        m = len(cands)
        if m == 0:
            return rep, rep
        if m == 1:
            return (rep, cands[0]), rep

        # pairwise bucket comparison: below / same / above.
        # for anchors a: X_a = [Q(a,x,y) = (a,x)] -> wins(a, x, y)
        ii, jj = np.triu_indices(m, k=1)
        ci = np.array(cands, dtype=np.int64)
        Xv = np.zeros(len(ii))
        Yv = np.zeros(len(ii))
        rows_per = max(1, _CHUNK // max(1, len(anchors)))
        for lo in range(0, len(ii), rows_per):
            hi = min(len(ii), lo + rows_per)
            cnt = hi - lo
            Ab = np.tile(anchors, cnt)
            Xb = np.repeat(ci[ii[lo:hi]], len(anchors))
            Yb = np.repeat(ci[jj[lo:hi]], len(anchors))
            rows = np.repeat(np.arange(cnt), len(anchors))
            wx = self.oracle.wins(Ab, Xb, Yb)
            wy = self.oracle.wins(Ab, Yb, Xb)
            Xv[lo:hi] = np.bincount(rows, weights=wx, minlength=cnt)
            Yv[lo:hi] = np.bincount(rows, weights=wy, minlength=cnt)

        thr = self.cfg.threshold(self.n)
        below = Xv - Yv > thr  # cands[ii] in a lower bucket than cands[jj]
        above = Yv - Xv > thr
        same = ~(below | above)

        # components of "same" (ties), then a strict order across components
        parent = list(range(m))

        def find(v):
            while parent[v] != v:
                parent[v] = parent[parent[v]]
                v = parent[v]
            return v

        for e in np.nonzero(same)[0]:
            a, b = find(int(ii[e])), find(int(jj[e]))
            if a != b:
                parent[a] = b
        comp = [find(v) for v in range(m)]
        comp_ids = sorted(set(comp))
        cidx = {c: i for i, c in enumerate(comp_ids)}
        k = len(comp_ids)
        lower = np.zeros((k, k), dtype=np.int64)  # counts of strict "below" votes
        for e in range(len(ii)):
            a, b = cidx[comp[ii[e]]], cidx[comp[jj[e]]]
            if a == b:
                if not same[e]:
                    raise ReconstructionFailure(
                        "bucket-order",
                        "strict comparison inside a tied bucket group",
                        witness=(cands[ii[e]], cands[jj[e]]),
                    )
                continue
            if below[e]:
                lower[a, b] += 1
            elif above[e]:
                lower[b, a] += 1
            else:
                raise ReconstructionFailure(
                    "bucket-order",
                    "tie between members of different bucket groups",
                    witness=(cands[ii[e]], cands[jj[e]]),
                )
        if np.any((lower > 0) & (lower.T > 0)):
            a, b = np.argwhere((lower > 0) & (lower.T > 0))[0]
            raise ReconstructionFailure(
                "bucket-order", "cyclic bucket comparisons",
                witness=(comp_ids[a], comp_ids[b]),
            )
        wins_ct = (lower > 0).sum(axis=1)
        order = np.argsort(-wins_ct, kind="stable")
        expect = np.arange(k - 1, -1, -1)
        if not np.array_equal(np.sort(wins_ct), np.sort(expect)):
            raise ReconstructionFailure(
                "bucket-order", "bucket comparisons admit no total order"
            )

        buckets = []
        for o in order:
            cid = comp_ids[int(o)]
            buckets.append([cands[v] for v in range(m) if comp[v] == cid])

        plan = rep
        for bucket in buckets:
            if len(bucket) == 1:
                bplan = bucket[0]
            else:
                M = self._score_matrix(bucket, anchors)
                provider = _ScoreProvider(self.oracle, bucket, M)
                bplan = _assemble_by_scores(
                    bucket, list(bucket), M, provider, "within-bucket"
                )
            plan = (plan, bplan)
        return plan, rep

    # -- small-n exhaustive ------------------------------------------------ #

    def small_exhaustive(self, members):
        """
        Maximum-consistency search over all topologies on a handful of
        leaves, scored against the direct answers of their triples.  The
        direct answers are tried first: when they are mutually consistent
        the assembled tree agrees with every triple and no enumeration can
        beat it.
        """
        members = sorted(int(v) for v in members)
        m = len(members)
        trips = np.array(
            list(itertools.combinations(range(m), 3)), dtype=np.int64
        )
        ids = np.array(members, dtype=np.int64)
        A, B, C = ids[trips[:, 0]], ids[trips[:, 1]], ids[trips[:, 2]]
        stacked = np.stack(
            [self.oracle.wins(A, B, C), self.oracle.wins(A, C, B),
             self.oracle.wins(B, C, A)]
        )
        answers = np.argmax(stacked, axis=0)

        provider = _ScoreProvider(
            self.oracle, members, np.zeros((m, m))
        )  # all-tie scores: every answer comes from the direct experiment
        try:
            plan = _assemble_by_scores(members, list(members),
                                       np.zeros((m, m)), provider,
                                       "small-direct")
            if self._plan_agreement(plan, members, trips, answers) == len(trips):
                return plan
        except ReconstructionFailure:
            pass
        plans, codes = _topology_tables(m)
        scores = np.sum(codes == answers.astype(np.int8), axis=1)
        best = int(np.argmax(scores))  # enumeration order is deterministic
        return _substitute_positions(plans[best], members)

    def _plan_agreement(self, plan, members, trips, answers):
        idx = {v: i for i, v in enumerate(members)}
        depth = _pair_lca_depths(plan, idx)
        i, j, k = trips[:, 0], trips[:, 1], trips[:, 2]
        want = np.argmax(
            np.stack([depth[i, j], depth[i, k], depth[j, k]]), axis=0
        )
        return int(np.sum(want == answers))

    # -- the recursion ------------------------------------------------------ #

    def resolve(self, universe):
        V = sorted(int(v) for v in universe)
        if len(V) == 1:
            self.stats.events.append(("direct", 1))
            return V[0]
        if len(V) == 2:
            self.stats.events.append(("direct", 2))
            return (V[0], V[1])
        xs = self.outside(V)
        large_cap = self.n * self.cfg.large_fraction
        if len(xs) == 0 and len(V) <= self.cfg.n0:
            self.stats.stages.append("small-exhaustive")
            self.stats.events.append(("direct", len(V)))
            return self.small_exhaustive(V)
        if len(xs) > 0 and self.exp_size(V) <= large_cap:
            self.stats.stages.append("completion-induced")
            self.stats.events.append(("direct", len(V)))
            return self.completion_induced(V)

        self.stats.stages.append("peel")
        base_set, base_plan = self.build_subtree(V)
        W = list(base_set)
        W_plan = base_plan
        base0 = list(base_set)
        R = sorted(set(V) - set(W))
        pending = []

        result = None
        while True:
            if not R:
                result = W_plan
                break
            if self.exp_size(R) <= large_cap:
                qplan, rep = self.completion_quotient(W, R)
                result = graft_plan(qplan, rep, W_plan)
                break
            P_set, P_plan = self.build_subtree(R)
            P1, P2, P3 = self.partition(base0, P_set, sorted(set(R) - set(P_set)))
            assert sorted(P1 + P2 + P3) == sorted(set(R) - set(P_set))
            e1, e2, e3 = (self.exp_size(p) for p in (P1, P2, P3))
            n_large = sum(e > large_cap for e in (e1, e2, e3))
            if n_large >= 2:
                raise ReconstructionFailure(
                    "partition", f"two large parts ({e1}, {e2}, {e3})"
                )
            if not P1 and not P2:
                # pivot swallowed an initial interval of buckets
                W = sorted(set(W) | set(P_set))
                W_plan = self.completion_induced(W, stage="grow-lower")
                R = P3
                continue
            if e3 > large_cap:
                W = sorted(set(W) | set(P1) | set(P2) | set(P_set))
                W_plan = self.completion_induced(W, stage="grow-lower")
                R = P3
                continue
            if e1 > large_cap:
                upper_cands = sorted(set(P2) | set(P_set) | set(P3))
                inside = sorted(set(W) | set(P1))
                qplan, rep = self.completion_quotient(inside, upper_cands)
                pending.append((qplan, rep))
                R = P1
                continue
            # pivot bucket resolution (P2 large, or nothing large)
            low_set = sorted(set(W) | set(P1))
            low_plan = (
                W_plan if not P1
                else self.completion_induced(low_set, stage="lower-interval")
            )
            if P2:
                rep_p = min(P_set)
                self.collapse(P_set, rep_p)
                sub_universe = sorted(set(P2) | {rep_p})
                sub_plan = self.resolve(sub_universe)
                bucket_plan = graft_plan(sub_plan, rep_p, P_plan)
            else:
                bucket_plan = P_plan
            mid_plan = (low_plan, bucket_plan)
            if P3:
                inside = sorted(set(low_set) | set(P2) | set(P_set))
                qplan, rep = self.completion_quotient(inside, P3)
                result = graft_plan(qplan, rep, mid_plan)
            else:
                result = mid_plan
            break

        for qplan, rep in reversed(pending):
            result = graft_plan(qplan, rep, result)
        return result


# ---------------------------------------------------------------------- #
# Public entry points                                                     #
# ---------------------------------------------------------------------- #


def build_subtree(oracle, leaves, n=None, cfg=None):
    """
    Find a subtree of the topology induced on ``leaves`` (labels) whose
    size lies in the configured band; returns a Tree carrying its merge
    topology.
    """
    cfg = cfg or ReconstructionConfig.for_oracle(oracle)
    drv = _Driver(oracle, cfg)
    if n is not None:
        drv.n = n
    ids = [oracle.index_of[lab] for lab in leaves]
    leaf_ids, plan = drv.build_subtree(ids)
    return tree_from_plan(_plan_ids_to_labels(plan, oracle.labels))


def partition(oracle, base_leaves, pivot_leaves, candidates, n=None, cfg=None):
    """Split candidate labels into (below, same-bucket, above) the pivot."""
    cfg = cfg or ReconstructionConfig.for_oracle(oracle)
    drv = _Driver(oracle, cfg)
    if n is not None:
        drv.n = n
    conv = lambda ls: [oracle.index_of[x] for x in ls]
    P1, P2, P3 = drv.partition(conv(base_leaves), conv(pivot_leaves),
                               conv(candidates))
    back = lambda ids: [oracle.labels[i] for i in ids]
    return back(P1), back(P2), back(P3)


def completion_induced(oracle, leaves, n=None, cfg=None):
    """Resolve the induced topology on ``leaves`` from outside scores."""
    cfg = cfg or ReconstructionConfig.for_oracle(oracle)
    drv = _Driver(oracle, cfg)
    if n is not None:
        drv.n = n
    plan = drv.completion_induced([oracle.index_of[x] for x in leaves])
    return tree_from_plan(_plan_ids_to_labels(plan, oracle.labels))


def completion_quotient(oracle, subtree_leaves, n=None, cfg=None):
    """
    Resolve the quotient of the whole tree with respect to the subtree on
    ``subtree_leaves``: the collapsed part appears as its representative
    (smallest) leaf label.
    """
    cfg = cfg or ReconstructionConfig.for_oracle(oracle)
    drv = _Driver(oracle, cfg)
    if n is not None:
        drv.n = n
    inside = [oracle.index_of[x] for x in subtree_leaves]
    cands = sorted(set(range(oracle.n_leaves)) - set(inside))
    plan, _rep = drv.completion_quotient(inside, cands)
    return tree_from_plan(_plan_ids_to_labels(plan, oracle.labels))


def reconstruct_topology(oracle, cfg=None, return_stats=False):
    """
    Reconstruct the full leaf-labeled topology behind ``oracle``.

    Returns a Tree (heights set proportionally to level depth; only the
    topology is meaningful).  Raises ReconstructionFailure when the
    experiment answers are too inconsistent to admit a tree at the
    configured thresholds.
    """
    cfg = cfg or ReconstructionConfig.for_oracle(oracle)
    if oracle.n_leaves < 2:
        raise ValueError("need at least two leaves")
    drv = _Driver(oracle, cfg)
    plan = drv.resolve(range(oracle.n_leaves))
    tree = tree_from_plan(_plan_ids_to_labels(plan, oracle.labels))
    if return_stats:
        return tree, drv.stats
    return tree


@functools.lru_cache(maxsize=4)
def _topology_tables(m):
    """
    All leaf-labeled rooted binary topologies over positions 0..m-1, plus
    the C(m,3) x 1 closest-pair code table per topology (0:(i,j), 1:(i,k),
    2:(j,k) for each position triple i<j<k).  Cached per size; feasible up
    to the small-n cutoff (m = 8 gives 135135 topologies).
    """
    plans = list(_all_plans(list(range(m))))
    pair_pos = {p: t for t, p in enumerate(itertools.combinations(range(m), 2))}
    depths = np.zeros((len(plans), len(pair_pos)), dtype=np.int16)

    def fill(row, node, d=0):
        if not isinstance(node, tuple):
            return [node]
        left = fill(row, node[0], d + 1)
        right = fill(row, node[1], d + 1)
        for a in left:
            for b in right:
                key = (a, b) if a < b else (b, a)
                depths[row, pair_pos[key]] = d
        return left + right

    for row, plan in enumerate(plans):
        fill(row, plan)

    trips = list(itertools.combinations(range(m), 3))
    codes = np.zeros((len(plans), len(trips)), dtype=np.int8)
    for t, (i, j, k) in enumerate(trips):
        cols = np.stack([
            depths[:, pair_pos[(i, j)]],
            depths[:, pair_pos[(i, k)]],
            depths[:, pair_pos[(j, k)]],
        ])
        codes[:, t] = np.argmax(cols, axis=0)
    return plans, codes


def _substitute_positions(plan, members):
    """Rewrite a position-labeled plan with the actual member ids."""
    if not isinstance(plan, tuple):
        return members[plan]
    done = {}
    stack = [(plan, False)]
    while stack:
        node, ready = stack.pop()
        if not isinstance(node, tuple):
            continue
        if not ready:
            stack.append((node, True))
            stack.append((node[0], False))
            stack.append((node[1], False))
            continue
        kids = [
            done[id(ch)] if isinstance(ch, tuple) else members[ch]
            for ch in node
        ]
        done[id(node)] = (kids[0], kids[1])
    return done[id(plan)]


def _all_plans(members):
    """Every leaf-labeled rooted binary topology over ``members``."""
    if len(members) == 1:
        yield members[0]
        return
    first, rest = members[0], members[1:]

    def insert_everywhere(plan, leaf):
        yield (plan, leaf)
        if isinstance(plan, tuple):
            for i in (0, 1):
                for sub in insert_everywhere(plan[i], leaf):
                    yield (sub, plan[1]) if i == 0 else (plan[0], sub)

    def rec(built, remaining):
        if not remaining:
            yield built
            return
        leaf, rest2 = remaining[0], remaining[1:]
        for p in insert_everywhere(built, leaf):
            yield from rec(p, rest2)

    yield from rec(first, rest)

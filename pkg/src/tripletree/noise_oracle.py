"""
Distance-based noise models and the permanent-noise experiment source.

An experiment on a leaf triple returns one of the three pairs.  The chance
of each pair depends only on the pairwise distances; the two pairs that are
not closest have equal probability.  Answers are *permanent*: the first
draw for a triple is fixed and every later query (in any argument order)
returns the same pair.

Permanence is realized without storing every answer: the uniform variate
behind a triple's draw comes from an integer hash of (oracle seed,
canonical triple), so the answer is a pure function of those inputs and is
reproducible across runs and platforms.  A memo is still kept by
``query()`` for cheap re-query, and a global counter tracks how many
distinct triples have been touched.
"""

from __future__ import annotations

import numpy as np

from .tree_core import CorruptTreeError

_U64 = np.uint64
_MIX1 = _U64(0x9E3779B97F4A7C15)
_MIX2 = _U64(0xBF58476D1CE4E5B9)
_MIX3 = _U64(0x94D049BB133111EB)
_INV_2_53 = float(2.0 ** -53)


def _splitmix64(x):
    """Vectorized splitmix64 finalizer over uint64 arrays (wrapping)."""
    with np.errstate(over="ignore"):
        z = x + _MIX1
        z = (z ^ (z >> _U64(30))) * _MIX2
        z = (z ^ (z >> _U64(27))) * _MIX3
        return z ^ (z >> _U64(31))


def keyed_uniform(seed, triple_ids):
    """Deterministic uniforms in [0, 1) keyed by (seed, canonical triple id)."""
    base = _splitmix64(np.asarray(seed, dtype=np.uint64))
    h = _splitmix64(np.asarray(triple_ids, dtype=np.uint64) ^ base)
    return (h >> _U64(11)).astype(np.float64) * _INV_2_53


# ---------------------------------------------------------------------- #
# Noise models                                                            #
# ---------------------------------------------------------------------- #


def p_correct_homogeneous(d1, d2):
    """
    Probability that the closest pair is returned under the homogeneous
    model, with d1 the closest-pair distance and d2 the common distance of
    the two other pairs: d2 / (d1 + 2 d2).  Lies in [1/3, 1/2].
    """
    if d2 <= 0:
        raise ValueError("d2 must be positive")
    if d1 < 0 or d1 > d2:
        raise ValueError("need 0 <= d1 <= d2")
    return d2 / (d1 + 2.0 * d2)


class NoiseModel:
    """
    A distance-based noise model.  Subclasses implement ``slot_probs``:
    given the three pairwise distances of a canonical triple (i < j < k),
    return the probabilities of answering (i,j), (i,k), (j,k).
    """

    kind = "abstract"
    sampled = True  # noiseless overrides: no random draw needed

    def slot_probs(self, d01, d02, d12):
        raise NotImplementedError


class HomogeneousModel(NoiseModel):
    """
    Each pair is returned with probability (sum of the two other distances)
    over twice the total.  Scale-invariant; the closest pair's probability
    is d2/(d1 + 2 d2) in [1/3, 1/2].  Distance sensitivity constant 1/6.
    """

    kind = "homogeneous"
    epsilon = 1.0 / 6.0

    def slot_probs(self, d01, d02, d12):
        s = 2.0 * (d01 + d02 + d12)
        return (d02 + d12) / s, (d01 + d12) / s, (d01 + d02) / s


class NoiselessModel(NoiseModel):
    """Always returns the true closest pair."""

    kind = "noiseless"
    sampled = False

    def slot_probs(self, d01, d02, d12):
        p0 = ((d01 < d02) & (d01 < d12)).astype(np.float64)
        p1 = ((d02 < d01) & (d02 < d12)).astype(np.float64)
        return p0, p1, 1.0 - p0 - p1


class CustomModel(NoiseModel):
    """
    User-supplied p_correct(d1, d2) with a declared distance-sensitivity
    constant.  Registration validates, on a 20x20 grid with central
    differences, that p_correct stays in [1/3, 1] and that its slope in d1
    is at most -epsilon.
    """

    kind = "custom"

    def __init__(self, p_correct, epsilon, d_max=2.0, validate=True):
        self.p_correct = np.vectorize(p_correct, otypes=[np.float64])
        self.epsilon = float(epsilon)
        if validate:
            self._validate(d_max)

    def _validate(self, d_max):
        eps = self.epsilon
        for d2 in np.linspace(d_max / 20.0, d_max, 20):
            d1 = np.linspace(d2 / 40.0, d2 * 0.975, 20)
            step = d1[1] - d1[0]
            p = self.p_correct(d1, np.full_like(d1, d2))
            if np.any(p < 1.0 / 3.0 - 1e-12) or np.any(p > 1.0 + 1e-12):
                raise ValueError(
                    f"custom model out of range at d2={d2:.4g}: "
                    f"p_correct must lie in [1/3, 1]"
                )
            slope = (p[2:] - p[:-2]) / (2.0 * step)
            if np.any(slope > -eps + 1e-9):
                raise ValueError(
                    f"custom model violates the declared sensitivity "
                    f"{eps} at d2={d2:.4g} (max slope {slope.max():.4g})"
                )

    def slot_probs(self, d01, d02, d12):
        d01 = np.asarray(d01, dtype=np.float64)
        dmin = np.minimum(np.minimum(d01, d02), d12)
        dmax = np.maximum(np.maximum(d01, d02), d12)
        pc = self.p_correct(dmin, dmax)
        pi = (1.0 - pc) / 2.0
        p0 = np.where((d01 <= d02) & (d01 <= d12), pc, pi)
        p1 = np.where((d02 < d01) & (d02 <= d12), pc, pi)
        p2 = np.where((d12 < d01) & (d12 < d02), pc, pi)
        return p0, p1, p2


def make_model(spec):
    """'homogeneous' | 'noiseless' | a NoiseModel instance."""
    if isinstance(spec, NoiseModel):
        return spec
    if spec == "homogeneous":
        return HomogeneousModel()
    if spec == "noiseless":
        return NoiselessModel()
    raise ValueError(f"unknown noise model {spec!r}")


# ---------------------------------------------------------------------- #
# Distribution of a single experiment                                     #
# ---------------------------------------------------------------------- #


def triple_distribution(tree, model, a, b, c):
    """
    Exact probabilities (p_ab, p_bc, p_ca) of the three possible answers to
    an experiment on distinct leaves (a, b, c).
    """
    if len({a, b, c}) != 3:
        raise ValueError("triple_distribution requires three distinct leaves")
    model = make_model(model)
    dab = tree.leaf_distance(a, b)
    dbc = tree.leaf_distance(b, c)
    dca = tree.leaf_distance(c, a)
    p_ab, p_bc, p_ca = model.slot_probs(
        np.float64(dab), np.float64(dbc), np.float64(dca)
    )
    return float(p_ab), float(p_bc), float(p_ca)


def expectation_query(tree, model, a, b, c):
    """
    Infinite-sample stand-in for a noisy experiment: the exact answer
    distribution, identical to ``triple_distribution``.
    """
    return triple_distribution(tree, model, a, b, c)


# ---------------------------------------------------------------------- #
# Oracles                                                                 #
# ---------------------------------------------------------------------- #


class _OracleBase:
    """Shared leaf indexing / distance plumbing for both oracle flavours."""

    def __init__(self, tree, model):
        self.tree = tree
        self.model = make_model(model)
        self.labels = tree.leaf_labels
        self.n_leaves = len(self.labels)
        self.index_of = {lab: i for i, lab in enumerate(self.labels)}
        self._D = None

    @property
    def distances(self):
        if self._D is None:
            self._D = self.tree.distance_matrix()
        return self._D

    def _dist(self, I, J):
        return self.distances[I, J]

    def _canonical(self, A, B, C):
        i = np.minimum(np.minimum(A, B), C)
        k = np.maximum(np.maximum(A, B), C)
        j = A + B + C - i - k
        return i, j, k

    def _target_slot(self, A, B, i, j):
        m1 = np.minimum(A, B)
        m2 = np.maximum(A, B)
        return np.where(m2 == j, 0, np.where(m1 == i, 1, 2))


class OracleState(_OracleBase):
    """
    Seeded permanent-noise query source over one tree.

    ``query(a, b, c)`` returns the (memoized) answer pair for three leaf
    labels; ``wins(A, B, C)`` is the vectorized indicator that the answer
    to each row's triple is the pair (A, B).  ``query_count`` is the number
    of distinct triples touched so far.

    Not safe for concurrent mutation; run one reconstruction per instance.
    """

    def __init__(self, tree, model, seed):
        super().__init__(tree, model)
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._memo = {}
        n = self.n_leaves
        self._n2 = n * n
        if n ** 3 <= 1 << 25:
            self._seen_mask = np.zeros(n ** 3, dtype=bool)
            self._seen_ids = None
        else:
            self._seen_mask = None
            self._seen_ids = np.empty(0, dtype=np.int64)
        self._count = 0

    # -- counting ------------------------------------------------------ #

    def _touch(self, ids):
        ids = np.unique(ids)
        if self._seen_mask is not None:
            fresh = ids[~self._seen_mask[ids]]
            self._seen_mask[fresh] = True
            self._count += len(fresh)
        else:
            merged = np.union1d(self._seen_ids, ids)
            self._count = len(merged)
            self._seen_ids = merged

    @property
    def query_count(self):
        return self._count

    # -- answers ------------------------------------------------------- #

    def _draw_slots(self, i, j, k):
        d01 = self._dist(i, j)
        d02 = self._dist(i, k)
        d12 = self._dist(j, k)
        ids = (i * self._n2 + j * self.n_leaves + k).astype(np.int64)
        self._touch(ids)
        if not self.model.sampled:
            p0, p1, _ = self.model.slot_probs(d01, d02, d12)
            return np.where(p0 == 1.0, 0, np.where(p1 == 1.0, 1, 2))
        p0, p1, _ = self.model.slot_probs(d01, d02, d12)
        u = keyed_uniform(self.seed, ids.astype(np.uint64))
        return (u >= p0).astype(np.int64) + (u >= p0 + p1)

    def wins(self, A, B, C):
        """
        Float indicator per row: 1.0 iff the experiment on (A, B, C)
        answered with the pair (A, B).  Arguments are canonical leaf
        indices (arrays or scalars).
        """
        A = np.atleast_1d(np.asarray(A, dtype=np.int64))
        B = np.atleast_1d(np.asarray(B, dtype=np.int64))
        C = np.atleast_1d(np.asarray(C, dtype=np.int64))
        A, B, C = np.broadcast_arrays(A, B, C)
        i, j, k = self._canonical(A, B, C)
        slots = self._draw_slots(i, j, k)
        return (slots == self._target_slot(A, B, i, j)).astype(np.float64)

    def query(self, a, b, c):
        """
        The permanent answer to the experiment on leaf labels (a, b, c),
        as a sorted label pair.  Repeats (in any order) return the same
        answer without counting again.
        """
        if len({a, b, c}) != 3:
            raise ValueError("query requires three distinct leaves")
        key = tuple(sorted((a, b, c)))
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        idx = np.array([self.index_of[x] for x in key], dtype=np.int64)
        i, j, k = int(idx[0]), int(idx[1]), int(idx[2])
        slot = int(
            self._draw_slots(
                np.array([i], dtype=np.int64),
                np.array([j], dtype=np.int64),
                np.array([k], dtype=np.int64),
            )[0]
        )
        pair = ((key[0], key[1]), (key[0], key[2]), (key[1], key[2]))[slot]
        self._memo[key] = pair
        return pair

    def distribution(self, a, b, c):
        return triple_distribution(self.tree, self.model, a, b, c)


class ExpectationOracle(_OracleBase):
    """
    Drop-in oracle whose ``wins`` returns the exact probability of each
    target pair instead of a sampled indicator.  Score sums computed
    against it equal their expectations, which makes every estimator in
    the reconstruction pipeline exact up to float round-off.
    """

    def __init__(self, tree, model):
        super().__init__(tree, model)
        self._count = 0

    @property
    def query_count(self):
        return self._count

    def wins(self, A, B, C):
        A = np.atleast_1d(np.asarray(A, dtype=np.int64))
        B = np.atleast_1d(np.asarray(B, dtype=np.int64))
        C = np.atleast_1d(np.asarray(C, dtype=np.int64))
        A, B, C = np.broadcast_arrays(A, B, C)
        i, j, k = self._canonical(A, B, C)
        p0, p1, p2 = self.model.slot_probs(
            self._dist(i, j), self._dist(i, k), self._dist(j, k)
        )
        t = self._target_slot(A, B, i, j)
        return np.where(t == 0, p0, np.where(t == 1, p1, p2))

    def query(self, a, b, c):
        """Expectation mode has no single answer; exposes the distribution."""
        return self.distribution(a, b, c)

    def distribution(self, a, b, c):
        return triple_distribution(self.tree, self.model, a, b, c)


def query(oracle, a, b, c):
    """Module-level convenience wrapper around ``oracle.query``."""
    return oracle.query(a, b, c)

"""Latent causal model over joint angles.

Joint angles follow either independent truncated normals or a linear SEM over
a DAG.  Hard interventions replace one joint's mechanism with a
parent-independent truncated normal; descendants are recomputed through the
SEM while non-descendants keep the observational law.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

_Z_LIMIT = 38.0  # beyond this, Phi underflows at float64


class CycleError(ValueError):
    """The edge list does not admit a topological order."""


class OutOfSupportError(ValueError):
    """Evaluation point outside a mechanism's open support."""


class NumericalOverflowError(ArithmeticError):
    """Truncation bounds too many sigmas from the mean for float64."""


@dataclass(frozen=True)
class TruncatedNormalSpec:
    """Normal(mu, sigma2) truncated to [lo, hi]; sigma2 == 0 is a point mass."""

    mu: float
    sigma2: float
    lo: float
    hi: float

    def __post_init__(self):
        if not np.isfinite(self.mu):
            raise ValueError("mu must be finite")
        if self.sigma2 < 0:
            raise ValueError(f"sigma2 must be >= 0, got {self.sigma2}")
        if not self.lo < self.hi:
            raise ValueError(f"need lo < hi, got [{self.lo}, {self.hi}]")
        if self.sigma2 == 0 and not (self.lo <= self.mu <= self.hi):
            raise ValueError("degenerate spec needs mu inside [lo, hi]")

    @property
    def sigma(self):
        return float(np.sqrt(self.sigma2))

    def log_pdf(self, z):
        a = (self.lo - self.mu) / self.sigma
        b = (self.hi - self.mu) / self.sigma
        u = (np.asarray(z) - self.mu) / self.sigma
        return (
            -0.5 * u**2
            - 0.5 * np.log(2 * np.pi * self.sigma2)
            - np.log(ndtr(b) - ndtr(a))
        )


@dataclass(frozen=True)
class DagSpec:
    """Weighted DAG; edges are (parent, child, weight)."""

    num_nodes: int
    edges: tuple = ()

    def __post_init__(self):
        if self.num_nodes <= 0:
            raise ValueError("num_nodes must be positive")
        object.__setattr__(self, "edges", tuple(tuple(e) for e in self.edges))
        seen = set()
        for p, c, _w in self.edges:
            if not (0 <= p < self.num_nodes and 0 <= c < self.num_nodes):
                raise ValueError(f"edge ({p}, {c}) out of range")
            if (p, c) in seen:
                raise ValueError(f"duplicate edge ({p}, {c})")
            seen.add((p, c))
        self.topological_order()

    def parents(self, i):
        return [(p, w) for p, c, w in self.edges if c == i]

    def topological_order(self):
        indeg = [0] * self.num_nodes
        children = {i: [] for i in range(self.num_nodes)}
        for p, c, _w in self.edges:
            indeg[c] += 1
            children[p].append(c)
        ready = sorted(i for i in range(self.num_nodes) if indeg[i] == 0)
        order = []
        while ready:
            n = ready.pop(0)
            order.append(n)
            for c in sorted(children[n]):
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
        if len(order) != self.num_nodes:
            raise CycleError("edge list contains a cycle")
        return order

    def descendants(self, i):
        children = {n: [] for n in range(self.num_nodes)}
        for p, c, _w in self.edges:
            children[p].append(c)
        out, stack = set(), [i]
        while stack:
            for c in children[stack.pop()]:
                if c not in out:
                    out.add(c)
                    stack.append(c)
        return out


@dataclass(frozen=True)
class LatentScm:
    """Ground-truth generative model over d joint angles."""

    dag: DagSpec
    root_dists: dict
    noise_dists: dict = field(default_factory=dict)
    mode: str = "independent"
    ranges: tuple = None  # per-node (lo, hi); derived from root dists if None

    def __post_init__(self):
        d = self.dag.num_nodes
        if self.mode not in ("independent", "linear-sem"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "independent":
            if self.dag.edges:
                raise ValueError("independent mode requires an empty edge list")
            missing = [i for i in range(d) if i not in self.root_dists]
            if missing:
                raise ValueError(f"independent mode: nodes {missing} lack a root distribution")
        else:
            roots = self.root_nodes()
            for i in range(d):
                if i in roots:
                    continue
                if not self.dag.parents(i):
                    raise ValueError(f"non-root node {i} has no incoming edge")
                if i not in self.noise_dists:
                    raise ValueError(f"non-root node {i} lacks a noise distribution")
        if self.ranges is None:
            rngs = []
            for i in range(d):
                if i in self.root_dists:
                    dist = self.root_dists[i]
                    rngs.append((dist.lo, dist.hi))
                else:
                    raise ValueError(
                        f"node {i} has no root distribution; pass explicit ranges"
                    )
            object.__setattr__(self, "ranges", tuple(rngs))
        else:
            object.__setattr__(self, "ranges", tuple(tuple(r) for r in self.ranges))
            if len(self.ranges) != d:
                raise ValueError("ranges must cover every node")

    @property
    def num_joints(self):
        return self.dag.num_nodes

    def root_nodes(self):
        return {i for i in range(self.dag.num_nodes) if not self.dag.parents(i)}


@dataclass(frozen=True)
class InterventionPair:
    """The two post-intervention mechanisms for one joint."""

    target: int
    q: TruncatedNormalSpec
    q_bar: TruncatedNormalSpec

    def __post_init__(self):
        if self.target < 0:
            raise ValueError("target must be a node index")


def truncnorm_sample(dist: TruncatedNormalSpec, rng, n=None):
    """Inverse-CDF draw(s) from a truncated normal; always inside [lo, hi]."""
    if dist.sigma2 == 0:
        val = np.full(n, dist.mu) if n is not None else dist.mu
        return val
    s = dist.sigma
    a = (dist.lo - dist.mu) / s
    b = (dist.hi - dist.mu) / s
    fa, fb = ndtr(a), ndtr(b)
    if fb - fa <= 0:
        raise NumericalOverflowError(
            f"degenerate truncation: [{dist.lo}, {dist.hi}] around mu={dist.mu}"
        )
    u = rng.random(n)
    x = dist.mu + s * ndtri(fa + u * (fb - fa))
    return np.clip(x, dist.lo, dist.hi)


def truncnorm_moments(dist: TruncatedNormalSpec):
    """Analytic (mean, variance) of the truncated normal."""
    if dist.sigma2 == 0:
        return dist.mu, 0.0
    s = dist.sigma
    a = (dist.lo - dist.mu) / s
    b = (dist.hi - dist.mu) / s
    if abs(a) > _Z_LIMIT or abs(b) > _Z_LIMIT:
        raise NumericalOverflowError(
            f"standardized bounds ({a:.1f}, {b:.1f}) exceed +/-{_Z_LIMIT}"
        )
    phi = lambda t: np.exp(-0.5 * t * t) / np.sqrt(2 * np.pi)
    z = ndtr(b) - ndtr(a)
    mean = dist.mu + s * (phi(a) - phi(b)) / z
    var = dist.sigma2 * (
        1.0 + (a * phi(a) - b * phi(b)) / z - ((phi(a) - phi(b)) / z) ** 2
    )
    return float(mean), float(var)


def _noise_draw(scm, i, rng, n):
    dist = scm.noise_dists.get(i)
    if dist is None:
        return np.zeros(n)
    return truncnorm_sample(dist, rng, n)


def sample_observational(scm: LatentScm, n: int, rng) -> np.ndarray:
    """(n, d) array of joint angles drawn from the observational law."""
    d = scm.num_joints
    z = np.zeros((n, d))
    if scm.mode == "independent":
        for i in range(d):
            z[:, i] = truncnorm_sample(scm.root_dists[i], rng, n)
        return z
    for i in scm.dag.topological_order():
        parents = scm.dag.parents(i)
        if i in scm.root_dists and not parents:
            val = truncnorm_sample(scm.root_dists[i], rng, n) + _noise_draw(scm, i, rng, n)
        else:
            val = _noise_draw(scm, i, rng, n)
            for p, w in parents:
                val = val + w * z[:, p]
        lo, hi = scm.ranges[i]
        z[:, i] = np.clip(val, lo, hi)
    return z


def sample_interventional(scm: LatentScm, pair: InterventionPair, arm: str,
                          n: int, rng) -> np.ndarray:
    """Samples with pair.target forced to its intervention mechanism.

    The target ignores its parents; descendants are recomputed through the
    SEM with the intervened value; non-descendants follow the observational
    law unchanged.
    """
    d = scm.num_joints
    if not 0 <= pair.target < d:
        raise ValueError(f"target {pair.target} out of range for d={d}")
    if arm not in ("q", "q_bar"):
        raise ValueError(f"arm must be 'q' or 'q_bar', got {arm!r}")
    mech = pair.q if arm == "q" else pair.q_bar
    z = np.zeros((n, d))
    if scm.mode == "independent":
        for i in range(d):
            dist = mech if i == pair.target else scm.root_dists[i]
            z[:, i] = truncnorm_sample(dist, rng, n)
        return z
    for i in scm.dag.topological_order():
        if i == pair.target:
            z[:, i] = truncnorm_sample(mech, rng, n)
            continue
        parents = scm.dag.parents(i)
        if i in scm.root_dists and not parents:
            val = truncnorm_sample(scm.root_dists[i], rng, n) + _noise_draw(scm, i, rng, n)
        else:
            val = _noise_draw(scm, i, rng, n)
            for p, w in parents:
                val = val + w * z[:, p]
        lo, hi = scm.ranges[i]
        z[:, i] = np.clip(val, lo, hi)
    return z


def pair_score_diff_oracle(pair: InterventionPair, z: float) -> float:
    """Analytic d/dz log(q/q_bar) on the common interior of the supports."""
    for dist in (pair.q, pair.q_bar):
        if not dist.lo < z < dist.hi:
            raise OutOfSupportError(
                f"z={z} outside open support ({dist.lo}, {dist.hi})"
            )
    return (z - pair.q_bar.mu) / pair.q_bar.sigma2 - (z - pair.q.mu) / pair.q.sigma2


def check_discrepancy(pair: InterventionPair) -> bool:
    """True iff the two mechanisms differ in mean or variance.

    For truncated normals the score difference is affine in z, so it vanishes
    almost everywhere only when both parameters coincide.
    """
    return pair.q.mu != pair.q_bar.mu or pair.q.sigma2 != pair.q_bar.sigma2

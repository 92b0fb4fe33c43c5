"""Thickness-driven semantic segmentation.

Shape diameter per face -> smoothing and log normalization -> 1-D Gaussian
mixture -> alpha-expansion graph cuts -> connected relabeling -> cleanup.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import networkx as nx
import numpy as np
from networkx.algorithms.flow import boykov_kolmogorov

from .mesh import Labeling, Mesh, connected_components
from .spatial import FieldConfig, shape_diameter

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
UNARY_EPS = 1e-12
SMOOTH_FLOOR = 1e-4
CONVEX_FACTOR = 0.1


class SegmentationError(RuntimeError):
    pass


# --- field preparation --------------------------------------------------------

def _shared_edge_lengths(mesh: Mesh) -> np.ndarray:
    adj = mesh.adjacency
    e = adj.edges
    return np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)


def smooth_field(mesh: Mesh, values: np.ndarray, iterations: int = 2) -> np.ndarray:
    """Area-weighted averaging of each face with its edge neighbours."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    x = np.asarray(values, dtype=np.float64).copy()
    adj = mesh.adjacency
    a = mesh.face_areas
    fa, fb = adj.face_a, adj.face_b
    for _ in range(iterations):
        num = a * x
        den = a.copy()
        np.add.at(num, fa, a[fb] * x[fb])
        np.add.at(den, fa, a[fb])
        np.add.at(num, fb, a[fa] * x[fa])
        np.add.at(den, fb, a[fa])
        x = num / den
    return x


def log_normalize(values: np.ndarray) -> np.ndarray:
    """``(log(1 + x) - min) / (max - min)``; a constant field maps to zeros."""
    y = np.log1p(np.asarray(values, dtype=np.float64))
    lo, hi = y.min(), y.max()
    # smoothing a constant field leaves rounding-level ripples; treat those as constant
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        log.warning("field is constant; normalized values are all zero")
        return np.zeros_like(y)
    return (y - lo) / (hi - lo)


def smooth_and_normalize_shdf(mesh: Mesh, shdf: np.ndarray, iterations: int = 2) -> np.ndarray:
    return log_normalize(smooth_field(mesh, shdf, iterations))


# --- mixture model ------------------------------------------------------------

@dataclass
class Gmm1d:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    trace: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.means)

    def _log_joint(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)[:, None]
        return (np.log(self.weights) - 0.5 * np.log(2 * np.pi * self.variances)
                - 0.5 * (x - self.means) ** 2 / self.variances)

    def log_likelihood(self, x: np.ndarray) -> float:
        lj = self._log_joint(x)
        m = lj.max(axis=1, keepdims=True)
        return float(np.sum(m[:, 0] + np.log(np.exp(lj - m).sum(axis=1))))

    def posteriors(self, x: np.ndarray) -> np.ndarray:
        lj = self._log_joint(x)
        lj -= lj.max(axis=1, keepdims=True)
        p = np.exp(lj)
        return p / p.sum(axis=1, keepdims=True)


def fit_gmm_1d(values, k: int, max_iter: int = 200, tol: float = 1e-8, seed: int = 0) -> Gmm1d:
    """EM for a 1-D mixture with means initialized at evenly spaced quantiles.

    ``seed`` is accepted for interface symmetry; the quantile start is
    deterministic, so no randomness is drawn.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if k < 1:
        raise ValueError("K must be >= 1")
    if len(x) < k:
        raise SegmentationError(f"need at least K={k} values, got {len(x)}")
    if len(np.unique(x)) < k:
        raise SegmentationError(f"K={k} exceeds the number of distinct values ({len(np.unique(x))}); mixture would collapse")
    means = np.quantile(x, (np.arange(k) + 0.5) / k)
    var0 = max(float(x.var()), VARIANCE_FLOOR)
    gmm = Gmm1d(np.full(k, 1.0 / k), means, np.full(k, var0))
    prev = gmm.log_likelihood(x)
    gmm.trace.append(prev)
    for _ in range(max_iter):
        r = gmm.posteriors(x)
        nk = r.sum(axis=0)
        nk = np.maximum(nk, 1e-300)
        means = (r * x[:, None]).sum(axis=0) / nk
        var = (r * (x[:, None] - means) ** 2).sum(axis=0) / nk
        gmm = Gmm1d(nk / nk.sum(), means, np.maximum(var, VARIANCE_FLOOR), gmm.trace)
        cur = gmm.log_likelihood(x)
        gmm.trace.append(cur)
        if cur - prev < tol:
            break
        prev = cur
    return gmm


def unary_costs(gmm: Gmm1d, values: np.ndarray) -> np.ndarray:
    """Per-face, per-label data cost ``-log(posterior + 1e-12)``."""
    # posteriors of exactly 1 would give -1e-12; clamp so costs stay >= 0
    return np.maximum(-np.log(gmm.posteriors(values) + UNARY_EPS), 0.0)


# --- pairwise terms -------------------------------------------------------------

def dihedral_penalty(theta: np.ndarray) -> np.ndarray:
    """Unscaled smoothness cost per dihedral angle (pi = flat, < pi = convex)."""
    theta = np.asarray(theta, dtype=np.float64)
    sharp = np.minimum(theta, 2 * np.pi - theta) / np.pi
    g = -np.log(sharp + 1e-8)
    g = np.where(theta < np.pi, CONVEX_FACTOR * g, g)
    return np.maximum(g, SMOOTH_FLOOR)


def smoothness_costs(mesh: Mesh, lambda_smooth: float = 0.3) -> np.ndarray:
    """``lambda_smooth * edge length * dihedral_penalty`` per adjacent face pair,
    aligned with ``mesh.adjacency.face_a`` / ``face_b``."""
    return lambda_smooth * _shared_edge_lengths(mesh) * dihedral_penalty(mesh.adjacency.dihedral)


@dataclass
class GraphCutProblem:
    unary: np.ndarray  # (F, K)
    pair_a: np.ndarray
    pair_b: np.ndarray
    pair_w: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.unary)) and np.all(self.unary >= 0)):
            raise SegmentationError("unary costs must be finite and >= 0")
        if not (np.all(np.isfinite(self.pair_w)) and np.all(self.pair_w >= 0)):
            raise SegmentationError("pairwise costs must be finite and >= 0 (Potts weights keep the problem submodular)")

    @property
    def n_labels(self) -> int:
        return self.unary.shape[1]

    def energy(self, labels: np.ndarray) -> float:
        labels = np.asarray(labels)
        data = self.unary[np.arange(len(labels)), labels].sum()
        smooth = self.pair_w[labels[self.pair_a] != labels[self.pair_b]].sum()
        return float(data + smooth)


def _expansion_move(problem: GraphCutProblem, labels: np.ndarray, alpha: int) -> np.ndarray:
    """Optimal labeling within one alpha-expansion of ``labels`` via s-t min cut.

    Binary variable x_p = 1 means face p switches to alpha. A node on the sink
    side of the cut takes x = 1.
    """
    n = len(labels)
    d_keep = problem.unary[np.arange(n), labels].astype(np.float64)
    d_alpha = problem.unary[:, alpha].astype(np.float64)
    is_alpha = labels == alpha
    cost0 = np.where(is_alpha, d_alpha, d_keep)  # cost if x = 0
    cost1 = d_alpha.copy()
    g = nx.DiGraph()
    g.add_nodes_from(range(n))
    g.add_nodes_from(("s", "t"))
    pa, pb, w = problem.pair_a, problem.pair_b, problem.pair_w
    la, lb = labels[pa], labels[pb]
    e00 = w * (la != lb)
    e01 = w * (la != alpha)
    e10 = w * (alpha != lb)
    # E(x_a, x_b) = e00 + (e10 - e00) x_a + (e11 - e10) x_b + (e01 + e10 - e00 - e11) (1 - x_a) x_b
    cost1_add = np.zeros(n)
    np.add.at(cost1_add, pa, e10 - e00)
    np.add.at(cost1_add, pb, -e10)
    cost1 = cost1 + cost1_add
    pair_cap = e01 + e10 - e00
    for p, q, c in zip(pa, pb, pair_cap):
        if c > 0:
            if g.has_edge(int(p), int(q)):
                g[int(p)][int(q)]["capacity"] += float(c)
            else:
                g.add_edge(int(p), int(q), capacity=float(c))
    base = np.minimum(cost0, cost1)
    for p in range(n):
        c1 = cost1[p] - base[p]
        c0 = cost0[p] - base[p]
        if c1 > 0:
            g.add_edge("s", p, capacity=float(c1))  # paid when p is on the sink side (x=1)
        if c0 > 0:
            g.add_edge(p, "t", capacity=float(c0))  # paid when p stays with the source (x=0)
    residual = boykov_kolmogorov(g, "s", "t", capacity="capacity")
    source_side = _reachable(residual, "s")
    new = labels.copy()
    for p in range(n):
        if p not in source_side:
            new[p] = alpha
    return new


def _reachable(residual: nx.DiGraph, src) -> set:
    seen = {src}
    stack = [src]
    while stack:
        u = stack.pop()
        for v, attr in residual[u].items():
            if v not in seen and attr["capacity"] - attr["flow"] > 1e-12:
                seen.add(v)
                stack.append(v)
    return seen


@dataclass
class ExpansionResult:
    labels: np.ndarray
    energy_trace: list[float]
    accepted: int


def alpha_expansion(problem: GraphCutProblem, init_labels: np.ndarray, sweeps: int = 3) -> ExpansionResult:
    """Sweep labels in ascending order, keeping a move only if it lowers the energy."""
    labels = np.asarray(init_labels, dtype=np.int64).copy()
    energy = problem.energy(labels)
    trace = [energy]
    accepted = 0
    for _ in range(sweeps):
        changed = False
        for alpha in range(problem.n_labels):
            cand = _expansion_move(problem, labels, alpha)
            e = problem.energy(cand)
            if e < energy:
                labels, energy = cand, e
                accepted += 1
                changed = True
                trace.append(energy)
        if not changed:
            break
    return ExpansionResult(labels, trace, accepted)


# --- cleanup ------------------------------------------------------------------

def relabel_components(mesh: Mesh, labeling) -> Labeling:
    """One fresh label per edge-connected monochrome region."""
    return Labeling.from_array(connected_components(mesh, labeling))


def _merge_tiny(mesh: Mesh, labels: np.ndarray, min_faces: int, lengths: np.ndarray) -> np.ndarray:
    """Fold components below ``min_faces`` into the neighbour label sharing the
    longest boundary, smallest component first."""
    adj = mesh.adjacency
    labels = connected_components(mesh, labels)
    stuck = np.zeros(len(labels), dtype=bool)  # faces of pieces with no neighbour at all
    while True:
        ids, counts = np.unique(labels, return_counts=True)
        if len(ids) <= 1:
            return labels
        movable = np.array([counts[i] < min_faces and not stuck[labels == ids[i]].any() for i in range(len(ids))])
        if not movable.any():
            return labels
        k = ids[movable][np.argmin(counts[movable])]
        la, lb = labels[adj.face_a], labels[adj.face_b]
        border = (la == k) ^ (lb == k)
        if not border.any():
            stuck[labels == k] = True
            continue
        other = np.where(la[border] == k, lb[border], la[border])
        totals = np.zeros(int(labels.max()) + 1)
        np.add.at(totals, other, lengths[border])
        target = int(np.argmax(totals))
        labels = connected_components(mesh, np.where(labels == k, target, labels))


def majority_vote(mesh: Mesh, labels: np.ndarray, rounds: int = 1) -> np.ndarray:
    """Synchronous vote over edge-adjacent faces; a face switches only to a
    strict winner, so ties keep the current label."""
    adj = mesh.adjacency
    labels = np.asarray(labels, dtype=np.int64).copy()
    nf = len(labels)
    for _ in range(rounds):
        k = int(labels.max()) + 1
        votes = np.zeros((nf, k), dtype=np.int64)
        np.add.at(votes, (adj.face_a, labels[adj.face_b]), 1)
        np.add.at(votes, (adj.face_b, labels[adj.face_a]), 1)
        best = votes.max(axis=1)
        n_best = (votes == best[:, None]).sum(axis=1)
        winner = votes.argmax(axis=1)
        current = votes[np.arange(nf), labels]
        switch = (n_best == 1) & (best > current) & (best > 0)
        labels = np.where(switch, winner, labels)
    return labels


def default_min_faces(n_faces: int) -> int:
    return max(20, int(math.ceil(0.005 * n_faces)))


def postprocess_labels(mesh: Mesh, labeling, min_faces: int | None = None, majority_rounds: int = 1) -> Labeling:
    """Merge tiny components, smooth by majority vote, relabel.

    The merge runs once more after the vote so the vote cannot leave a region
    below ``min_faces``.
    """
    labels = np.asarray(labeling.labels if isinstance(labeling, Labeling) else labeling, dtype=np.int64)
    min_faces = default_min_faces(mesh.n_faces) if min_faces is None else int(min_faces)
    if min_faces < 1:
        raise ValueError("min_faces must be >= 1")
    if mesh.n_faces < min_faces:
        log.warning("mesh has %d faces, fewer than min_faces=%d; labels left unchanged", mesh.n_faces, min_faces)
        return Labeling.from_array(labels)
    lengths = _shared_edge_lengths(mesh)
    labels = _merge_tiny(mesh, labels, min_faces, lengths)
    labels = majority_vote(mesh, labels, majority_rounds)
    labels = _merge_tiny(mesh, labels, min_faces, lengths)
    return relabel_components(mesh, labels)


# --- pipeline -----------------------------------------------------------------

@dataclass(frozen=True)
class SegmentConfig:
    fields: FieldConfig = FieldConfig()
    smooth_iterations: int = 2
    lambda_smooth: float = 0.3
    sweeps: int = 3
    gmm_max_iter: int = 200
    gmm_tol: float = 1e-8
    seed: int = 0
    min_faces: int | None = None
    majority_rounds: int = 1


@dataclass
class SegmentationResult:
    labeling: Labeling
    shdf: np.ndarray
    normalized: np.ndarray
    gmm: Gmm1d
    init_labels: np.ndarray
    expansion: ExpansionResult
    problem: GraphCutProblem


def build_problem(mesh: Mesh, normalized: np.ndarray, gmm: Gmm1d, lambda_smooth: float) -> GraphCutProblem:
    """Unary from the mixture; pairwise scaled by the mean unary and by edge
    lengths relative to their mean, so the balance is scale free."""
    unary = unary_costs(gmm, normalized)
    lengths = _shared_edge_lengths(mesh)
    mean_len = lengths.mean() if len(lengths) else 1.0
    scale = lambda_smooth * float(unary.mean()) / mean_len
    w = smoothness_costs(mesh, scale)
    adj = mesh.adjacency
    return GraphCutProblem(unary, adj.face_a, adj.face_b, w)


def segment_mesh_detailed(mesh: Mesh, k: int, config: SegmentConfig = SegmentConfig(),
                          shdf: np.ndarray | None = None) -> SegmentationResult:
    if k < 1:
        raise ValueError("K must be >= 1")
    if shdf is None:
        shdf = shape_diameter(mesh, config=config.fields)
    # dividing by the bbox diagonal makes the log compression scale free
    norm = smooth_and_normalize_shdf(mesh, np.asarray(shdf) / mesh.bbox_diagonal, config.smooth_iterations)
    gmm = fit_gmm_1d(norm, k, config.gmm_max_iter, config.gmm_tol, config.seed)
    problem = build_problem(mesh, norm, gmm, config.lambda_smooth)
    init = problem.unary.argmin(axis=1)
    exp = alpha_expansion(problem, init, config.sweeps)
    lab = relabel_components(mesh, exp.labels)
    lab = postprocess_labels(mesh, lab, config.min_faces, config.majority_rounds)
    return SegmentationResult(lab, np.asarray(shdf), norm, gmm, init, exp, problem)


def segment_mesh(mesh: Mesh, k: int, config: SegmentConfig = SegmentConfig(), shdf: np.ndarray | None = None) -> Labeling:
    return segment_mesh_detailed(mesh, k, config, shdf).labeling

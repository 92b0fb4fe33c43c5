"""Evaluation metrics for UV maps and segmentations."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .mesh import Mesh

HIST_BINS = 20
DEGENERATE_UV_AREA = 1e-12


def uv_side(uv: np.ndarray) -> float:
    """Side of the UV bounding square, ``L(Q)``."""
    uv = np.asarray(uv, dtype=np.float64)
    return float((uv.max(axis=0) - uv.min(axis=0)).max())


def colocated_groups(vertices: np.ndarray, decimals: int = 9) -> np.ndarray:
    """Group id per vertex; vertices at the same position share a group."""
    key = np.round(np.asarray(vertices, dtype=np.float64), decimals)
    _, inv = np.unique(key, axis=0, return_inverse=True)
    return inv.reshape(-1)


def max_ring_uv_distance(mesh: Mesh, uv: np.ndarray, weld: bool = True) -> np.ndarray:
    """Largest UV distance from each vertex to a 1-ring neighbour.

    With ``weld``, copies of one 3D position (a mesh already split along its
    seams) also count as neighbours of each other.
    """
    uv = np.asarray(uv, dtype=np.float64)
    idx, mask = mesh.adjacency.ring_matrix()
    d = np.linalg.norm(uv[idx] - uv[:, None, :], axis=2)
    d = np.where(mask, d, 0.0).max(axis=1) if idx.shape[1] else np.zeros(len(uv))
    if weld:
        groups = colocated_groups(mesh.vertices)
        if len(np.unique(groups)) < len(groups):
            order = np.argsort(groups, kind="stable")
            g_sorted = groups[order]
            starts = np.flatnonzero(np.r_[True, g_sorted[1:] != g_sorted[:-1]])
            for s, e in zip(starts, np.r_[starts[1:], len(order)]):
                if e - s < 2:
                    continue
                members = order[s:e]
                pu = uv[members]
                jump = np.linalg.norm(pu[:, None] - pu[None], axis=2).max(axis=1)
                d[members] = np.maximum(d[members], jump)
    return d


def seam_vertices_hard(mesh: Mesh, uv: np.ndarray, tau_scale: float = 0.1, weld: bool = True) -> np.ndarray:
    """Vertices whose largest 1-ring UV distance exceeds ``tau_scale * L(Q)``."""
    return max_ring_uv_distance(mesh, uv, weld) > tau_scale * uv_side(uv)


def mean_seam_ao(mask: np.ndarray, ao: np.ndarray) -> float | None:
    """Mean exposure over seam vertices; ``None`` when there are no seams."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return None
    return float(np.mean(np.asarray(ao, dtype=np.float64)[mask]))


def _corner_angles(p: np.ndarray) -> np.ndarray:
    """(F, 3) interior angles of triangles given as (F, 3, D) corner arrays."""
    out = np.empty(p.shape[:2])
    for k in range(3):
        a = p[:, (k + 1) % 3] - p[:, k]
        b = p[:, (k + 2) % 3] - p[:, k]
        na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
        cos = np.einsum("ij,ij->i", a, b) / np.maximum(na * nb, 1e-300)
        out[:, k] = np.arccos(np.clip(cos, -1.0, 1.0))
    return out


def _uv_areas(mesh: Mesh, uv: np.ndarray) -> np.ndarray:
    t = np.asarray(uv, dtype=np.float64)[mesh.faces]
    e1, e2 = t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]
    return 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def _degenerate_uv(mesh: Mesh, uv: np.ndarray, areas: np.ndarray) -> np.ndarray:
    side = uv_side(uv)
    return areas < DEGENERATE_UV_AREA * max(side * side, 1e-300)


def conformality(mesh: Mesh, uv: np.ndarray) -> float:
    """Area-weighted mean over faces of the mean corner ratio
    ``min(angle_uv / angle_3d, angle_3d / angle_uv)``; collapsed UV faces score 0."""
    uv = np.asarray(uv, dtype=np.float64)
    a3 = _corner_angles(mesh.vertices[mesh.faces])
    au = _corner_angles(uv[mesh.faces])
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.minimum(au / a3, a3 / au)
    r = np.nan_to_num(r, nan=0.0, posinf=0.0)
    score = r.mean(axis=1)
    score[_degenerate_uv(mesh, uv, _uv_areas(mesh, uv))] = 0.0
    w = mesh.face_areas
    return float(np.sum(w * score) / np.sum(w))


def equiareality(mesh: Mesh, uv: np.ndarray) -> float:
    """Area-weighted mean of ``min(a_uv / a_3d, a_3d / a_uv)`` on normalized areas."""
    ua = _uv_areas(mesh, uv)
    w = mesh.face_areas
    tot_u = ua.sum()
    if tot_u <= 0:
        return 0.0
    ahat = ua / tot_u
    a = w / w.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.minimum(ahat / a, a / ahat)
    r = np.nan_to_num(r, nan=0.0, posinf=0.0)
    r[_degenerate_uv(mesh, np.asarray(uv, dtype=np.float64), ua)] = 0.0
    return float(np.sum(w * r) / np.sum(w))


def contingency(labels_a, labels_b) -> np.ndarray:
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise ValueError("labelings must have the same number of elements")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1 if len(ia) else 0, ib.max() + 1 if len(ib) else 0), dtype=np.int64)
    np.add.at(table, (ia.ravel(), ib.ravel()), 1)
    return table


def hamming_matched(labels_a, labels_b) -> float:
    """Fraction of elements that disagree under the best one-to-one label matching."""
    table = contingency(labels_a, labels_b)
    n = int(table.sum())
    if n == 0:
        return 0.0
    rows, cols = linear_sum_assignment(table, maximize=True)
    return 1.0 - int(table[rows, cols].sum()) / n


def rand_index(labels_a, labels_b) -> float:
    table = contingency(labels_a, labels_b)
    n = int(table.sum())
    if n < 2:
        raise ValueError("rand index needs at least two elements")

    def c2(x):
        x = np.asarray(x, dtype=np.int64)
        return int(np.sum(x * (x - 1) // 2))

    total = n * (n - 1) // 2
    same_both = c2(table)
    agree = total + 2 * same_both - c2(table.sum(axis=1)) - c2(table.sum(axis=0))
    return agree / total


def histogram(values: np.ndarray, bins: int = HIST_BINS) -> np.ndarray:
    """Fraction of values per uniform bin over [0, 1] (sums to 1)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    counts, _ = np.histogram(v, bins=bins, range=(0.0, 1.0))
    if counts.sum() == 0:
        return np.zeros(bins)
    return counts / counts.sum()


@dataclass
class MetricReport:
    conformality: float
    equiareality: float
    mean_seam_ao: float | None
    seam_vertex_count: int
    histogram_seam: list[float] = field(default_factory=list)
    histogram_all: list[float] = field(default_factory=list)
    hamming: float | None = None
    rand_index: float | None = None
    tau_scale: float = 0.1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["histogram"] = {"bins": HIST_BINS, "seam": d.pop("histogram_seam"), "all": d.pop("histogram_all")}
        return d

    def histogram_rows(self) -> list[tuple[float, float, float, float]]:
        edges = np.linspace(0.0, 1.0, HIST_BINS + 1)
        seam = self.histogram_seam or [math.nan] * HIST_BINS
        return [(float(edges[i]), float(edges[i + 1]), float(seam[i]), float(self.histogram_all[i]) if self.histogram_all else math.nan)
                for i in range(HIST_BINS)]


def evaluate(mesh: Mesh, uv: np.ndarray, ao: np.ndarray | None = None, tau_scale: float = 0.1,
             labels=None, ref_labels=None) -> MetricReport:
    mask = seam_vertices_hard(mesh, uv, tau_scale)
    rep = MetricReport(
        conformality=conformality(mesh, uv),
        equiareality=equiareality(mesh, uv),
        mean_seam_ao=None,
        seam_vertex_count=int(mask.sum()),
        tau_scale=tau_scale,
    )
    if ao is not None:
        ao = np.asarray(ao, dtype=np.float64)
        rep.mean_seam_ao = mean_seam_ao(mask, ao)
        rep.histogram_all = histogram(ao).tolist()
        rep.histogram_seam = histogram(ao[mask]).tolist() if mask.any() else [0.0] * HIST_BINS
    if labels is not None and ref_labels is not None:
        rep.hamming = hamming_matched(labels, ref_labels)
        rep.rand_index = rand_index(labels, ref_labels)
    return rep

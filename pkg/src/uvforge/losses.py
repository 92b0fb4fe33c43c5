"""Differentiable objectives for UV learning.

Every loss takes and returns :class:`~uvforge.autodiff.Tensor` values so the
training loop can back-propagate through them. Nearest-neighbour *selection*
(Chamfer pairs, repulsion partners) is done on plain arrays with a k-d tree;
only the distances of the selected pairs live on the tape.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .mesh import Adjacency, Mesh
from .nn import CycleOutputs, ParamNet, wrap_jacobian

log = logging.getLogger(__name__)

TERM_NAMES = ("wrap", "repel", "cycle_p", "cycle_n", "ddl", "tdl")


@dataclass(frozen=True)
class LossWeights:
    w_wrap: float = 1.0
    w_repel: float = 0.01
    w_cycle_p: float = 0.01
    w_cycle_n: float = 0.005
    w_ddl: float = 0.01
    w_tdl: float = 1e-5
    lambda_vis: float = 0.004
    kappa_norm: float = 0.1
    epsilon: float = 1e-8

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")

    def term_weight(self, term: str) -> float:
        return getattr(self, f"w_{term}")


@dataclass(frozen=True)
class SeamConfig:
    neighbor_count: int = 8
    gamma: float = 100.0
    beta: float = 50.0
    tau_scale: float = 0.1

    def __post_init__(self):
        if self.gamma <= 0 or self.beta <= 0:
            raise ValueError("gamma and beta must be > 0")
        if not 0 < self.tau_scale < 1:
            raise ValueError("tau_scale must lie in (0, 1)")
        if self.neighbor_count < 1:
            raise ValueError("neighbor_count must be >= 1")


@dataclass
class SeamScores:
    eta: Tensor
    s: Tensor
    uv_side: Tensor
    tau: Tensor


def _t(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _cos_rows(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    num = ad.dot(a, b, axis=1)
    den = (ad.norm(a, axis=1) + eps) * (ad.norm(b, axis=1) + eps)
    return num / den


def nearest(src: np.ndarray, dst: np.ndarray, tree: cKDTree | None = None) -> np.ndarray:
    tree = tree if tree is not None else cKDTree(dst)
    _, idx = tree.query(src, k=1)
    return np.asarray(idx, dtype=np.int64)


def chamfer(a, b, return_index: bool = False, tree_b: cKDTree | None = None):
    """Mean squared distance from each point of ``a`` to ``b`` plus the reverse."""
    a, b = _t(a), _t(b, dtype=a.dtype if isinstance(a, Tensor) else None)
    ab = nearest(a.data, b.data, tree_b)
    ba = nearest(b.data, a.data)
    d_ab = ad.tsum(ad.square(a - ad.gather(b, ab)), axis=1).mean()
    d_ba = ad.tsum(ad.square(b - ad.gather(a, ba)), axis=1).mean()
    out = d_ab + d_ba
    if return_index:
        return out, ab, ba
    return out


def wrap_loss(p_hat, n_hat, P, N, kappa_norm: float = 0.1, tree_p: cKDTree | None = None) -> Tensor:
    """Chamfer to the mesh vertices plus a normal term against each point's
    nearest mesh vertex."""
    p_hat, n_hat = _t(p_hat), _t(n_hat)
    P = _t(P, p_hat.dtype)
    N = _t(N, p_hat.dtype)
    cd, ab, _ = chamfer(p_hat, P, return_index=True, tree_b=tree_p)
    if kappa_norm == 0:
        return cd
    cos = _cos_rows(n_hat, ad.gather(N, ab))
    return cd + kappa_norm * (1.0 - cos.mean())


def cycle_loss(q_hat, q_hat_cycle, P, p_tilde, n_source, n_tilde) -> tuple[Tensor, Tensor]:
    q_hat, q_hat_cycle, p_tilde, n_tilde = _t(q_hat), _t(q_hat_cycle), _t(p_tilde), _t(n_tilde)
    P = _t(P, p_tilde.dtype)
    n_source = _t(n_source, n_tilde.dtype)
    pos = ad.tsum(ad.square(q_hat - q_hat_cycle), axis=1).mean() + ad.tsum(ad.square(P - p_tilde), axis=1).mean()
    normal = 1.0 - _cos_rows(n_source, n_tilde).mean()
    return pos, normal


def normalize_uv(q) -> Tensor:
    """Uniform min-max scaling into the unit square (aspect preserved)."""
    q = _t(q)
    lo = ad.amin(q, axis=0)
    side = ad.amax(ad.amax(q, axis=0) - lo)
    return (q - lo) / (side + 1e-12)


def repulsion_candidates(n: int, pair_budget: int, rng: np.random.Generator) -> np.ndarray:
    """(n, c) candidate partner indices, never the point itself."""
    if pair_budget >= n - 1:
        idx = np.arange(n)
        return np.array([np.delete(idx, i) for i in range(n)], dtype=np.int64).reshape(n, max(n - 1, 0))
    c = rng.integers(0, n - 1, size=(n, pair_budget))
    c += c >= np.arange(n)[:, None]  # skip self
    return c


def repulsion_loss(q_n, margin: float | None = None, pair_budget: int = 64,
                   rng: np.random.Generator | None = None, candidates: np.ndarray | None = None) -> Tensor:
    """Hinge repulsion ``max(0, m - d)^2`` between each point and its nearest
    partner among ``pair_budget`` random candidates (all points when the budget
    covers them)."""
    q_n = _t(q_n)
    n = len(q_n.data)
    if margin is None:
        margin = 0.5 / np.sqrt(n)
    if candidates is None:
        candidates = repulsion_candidates(n, pair_budget, rng if rng is not None else np.random.default_rng(0))
    diff = q_n.data[:, None, :] - q_n.data[candidates]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    partner = candidates[np.arange(n), np.argmin(d2, axis=1)]
    d = ad.norm(q_n - ad.gather(q_n, partner), axis=1)
    return ad.hinge_sq(margin - d).mean()


def differential_frame(params: ParamNet, q) -> tuple[Tensor, Tensor]:
    """Tangent vectors d(WrapNet position)/du and /dv at each UV point."""
    return wrap_jacobian(params, _t(q))


def ddl(e1, e2) -> Tensor:
    """Conformality of the wrap Jacobian: orthogonality plus equal column norms."""
    e1, e2 = _t(e1), _t(e2)
    ortho = ad.square(ad.dot(e1, e2, axis=1))
    aniso = ad.square(ad.norm(e1, axis=1) - ad.norm(e2, axis=1))
    return (ortho + aniso).mean()


@dataclass(frozen=True)
class TriangleReference:
    """Per-face 3D quantities TDL compares against."""

    faces: np.ndarray
    cos3d: np.ndarray  # (F, 3)
    area_frac: np.ndarray  # (F,)

    @classmethod
    def from_mesh(cls, mesh: Mesh) -> "TriangleReference":
        v = mesh.vertices[mesh.faces]
        cos = np.empty((mesh.n_faces, 3))
        for k in range(3):
            a = v[:, (k + 1) % 3] - v[:, k]
            b = v[:, (k + 2) % 3] - v[:, k]
            cos[:, k] = np.einsum("ij,ij->i", a, b) / np.maximum(
                np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), 1e-300)
        area = mesh.face_areas
        return cls(mesh.faces, cos, area / max(area.sum(), 1e-300))


DEGENERATE_UV_AREA = 1e-12
DEGENERATE_PENALTY = 1.0


def tdl(q, mesh: Mesh | TriangleReference) -> Tensor:
    """Per-face angle-cosine and normalized-area discrepancy between UV and 3D,
    averaged over faces; collapsed UV triangles cost a flat penalty."""
    q = _t(q)
    ref = mesh if isinstance(mesh, TriangleReference) else TriangleReference.from_mesh(mesh)
    f = ref.faces
    dt = q.dtype
    corners = [ad.gather(q, f[:, k]) for k in range(3)]
    e01 = corners[1] - corners[0]
    e02 = corners[2] - corners[0]
    cross = e01[:, 0:1] * e02[:, 1:2] - e01[:, 1:2] * e02[:, 0:1]
    area = 0.5 * ad.norm(cross, axis=1)
    degenerate = area.data < DEGENERATE_UV_AREA
    good = (~degenerate).astype(dt)
    ang = None
    for k in range(3):
        a = corners[(k + 1) % 3] - corners[k]
        b = corners[(k + 2) % 3] - corners[k]
        na = ad.norm(a, axis=1)
        nb = ad.norm(b, axis=1)
        den_data = np.where(degenerate, 1.0, na.data * nb.data)
        # degenerate faces are masked out below; keep their denominators finite
        den = na * nb + Tensor((den_data - na.data * nb.data).astype(dt))
        cos_uv = ad.dot(a, b, axis=1) / den
        term = ad.square(cos_uv - Tensor(ref.cos3d[:, k].astype(dt)))
        ang = term if ang is None else ang + term
    frac = area / (ad.tsum(area) + 1e-300)
    area_term = ad.square(frac - Tensor(ref.area_frac.astype(dt)))
    per_face = ad.scale_by(ang + area_term, good) + Tensor((DEGENERATE_PENALTY * degenerate).astype(dt))
    return per_face.mean()


def soft_seam_scores(adjacency: Adjacency | Mesh, q, config: SeamConfig = SeamConfig(),
                     vertices: np.ndarray | None = None,
                     neighborhood: tuple[np.ndarray, np.ndarray] | None = None) -> SeamScores:
    """Soft maximum UV distance to 1-ring neighbours and a sigmoid seam membership.

    ``eta_i = log(sum_j exp(gamma * |q_i - q_j|)) / gamma`` over at most
    ``neighbor_count`` ring neighbours (closest in 3D first), and
    ``s_i = sigmoid(beta * (eta_i - tau_scale * L))`` with ``L`` the side of
    the UV bounding square.
    """
    q = _t(q)
    if neighborhood is None:
        neighborhood = seam_neighborhood(adjacency, config.neighbor_count, vertices)
    idx, mask = neighborhood
    d = ad.norm(ad.gather(q, idx) - ad.reshape(q, (len(q.data), 1, q.data.shape[1])), axis=2)
    eta = ad.masked_logsumexp(config.gamma * d, mask, axis=1) * (1.0 / config.gamma)
    lo = ad.amin(q, axis=0)
    side = ad.amax(ad.amax(q, axis=0) - lo)
    tau = config.tau_scale * side
    s = ad.sigmoid(config.beta * (eta - tau))
    isolated = ~mask.any(axis=1)
    if isolated.any():
        log.warning("%d isolated vertices get seam score 0", int(isolated.sum()))
        s = ad.scale_by(s, (~isolated).astype(q.dtype))
    return SeamScores(eta, s, side, tau)


def seam_neighborhood(adjacency: Adjacency | Mesh, neighbor_count: int | None = None,
                      vertices: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Padded 1-ring index/mask arrays, trimmed to the ``neighbor_count`` ring
    members nearest in 3D when vertex positions are available."""
    if isinstance(adjacency, Mesh):
        vertices = adjacency.vertices if vertices is None else vertices
        adjacency = adjacency.adjacency
    idx, mask = adjacency.ring_matrix()
    if neighbor_count is not None and idx.shape[1] > neighbor_count:
        if vertices is not None:
            d = np.linalg.norm(vertices[idx] - vertices[:, None, :], axis=2)
            d = np.where(mask, d, np.inf)
            order = np.argsort(d, axis=1, kind="stable")[:, :neighbor_count]
            idx = np.take_along_axis(idx, order, axis=1)
            mask = np.take_along_axis(mask, order, axis=1)
        else:
            idx, mask = idx[:, :neighbor_count], mask[:, :neighbor_count]
    return idx, mask


def ao_seam_loss(s, ao, epsilon: float = 1e-8) -> Tensor:
    """Seam-weighted mean of the exposure field."""
    s = s.s if isinstance(s, SeamScores) else _t(s)
    ao = np.asarray(ao, dtype=s.dtype)
    if ao.shape != s.data.shape:
        raise ValueError("seam scores and AO field must have one value per vertex")
    return ad.tsum(ad.scale_by(s, ao)) / (ad.tsum(s) + epsilon)


def weighted_total(terms: dict[str, Tensor | float], weights: LossWeights) -> Tensor | float:
    total = 0.0
    for name in TERM_NAMES:
        if name in terms:
            total = total + weights.term_weight(name) * terms[name]
    return total


@dataclass
class LossContext:
    """Mesh-derived constants reused every step."""

    mesh: Mesh
    P: np.ndarray
    N: np.ndarray
    tree: cKDTree
    tri_ref: TriangleReference
    neighborhood: tuple[np.ndarray, np.ndarray]
    pair_budget: int = 64
    margin: float | None = None

    @classmethod
    def build(cls, mesh: Mesh, seam: SeamConfig = SeamConfig(), dtype=np.float32, pair_budget: int = 64):
        P = mesh.vertices.astype(dtype)
        return cls(
            mesh=mesh,
            P=P,
            N=mesh.normals.astype(dtype),
            tree=cKDTree(mesh.vertices),
            tri_ref=TriangleReference.from_mesh(mesh),
            neighborhood=seam_neighborhood(mesh, seam.neighbor_count),
            pair_budget=pair_budget,
            margin=0.5 / np.sqrt(mesh.n_vertices),
        )


def base_objective(out: CycleOutputs, ctx: LossContext, weights: LossWeights, params: ParamNet,
                   rng: np.random.Generator | None = None) -> tuple[Tensor, dict[str, Tensor]]:
    """Weighted backbone loss and its unweighted per-term tensors."""
    rng = rng if rng is not None else np.random.default_rng(0)
    terms: dict[str, Tensor] = {}
    terms["wrap"] = wrap_loss(out.p_hat, out.n_hat, ctx.P, ctx.N, weights.kappa_norm, ctx.tree)
    q_n = normalize_uv(out.q)
    cand = repulsion_candidates(len(ctx.P), ctx.pair_budget, rng)
    terms["repel"] = repulsion_loss(q_n, ctx.margin, candidates=cand)
    terms["cycle_p"], terms["cycle_n"] = cycle_loss(out.q_hat, out.q_hat_cycle, ctx.P, out.p_tilde, ctx.N, out.n_tilde)
    if weights.w_ddl > 0:
        e1, e2 = out.extra["frame"] if "frame" in out.extra else differential_frame(params, out.q)
        terms["ddl"] = ddl(e1, e2)
    terms["tdl"] = tdl(out.q, ctx.tri_ref)
    total = weighted_total(terms, weights)
    for name, t in terms.items():
        if not np.isfinite(t.data):
            raise FloatingPointError(f"loss term {name} is not finite")
    out.extra["q_n"] = q_n
    return total, terms


def visibility_objective(base, ao_seam, lambda_vis: float = 0.004):
    return base + lambda_vis * ao_seam

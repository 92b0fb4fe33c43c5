"""Training pipelines (base, visibility-aware, semantic) and grid atlas packing."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import nn
from .losses import (
    LossContext,
    LossWeights,
    SeamConfig,
    ao_seam_loss,
    base_objective,
    normalize_uv,
    soft_seam_scores,
    visibility_objective,
)
from .mesh import Labeling, Mesh, SubmeshMap, extract_submesh, normalize_mesh

log = logging.getLogger(__name__)

TRACE_FIELDS = ("step", "wrap", "repel", "cycle_p", "cycle_n", "ddl", "tdl", "ao", "total")


class TrainingError(RuntimeError):
    """Optimization hit a non-finite value; ``checkpoint`` names the last good parameters."""

    def __init__(self, message: str, step: int, checkpoint: Path | None = None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3000
    lr: float = 1e-3
    seed: int = 0
    weights: LossWeights = LossWeights()
    seam: SeamConfig = SeamConfig()
    log_every: int = 100
    checkpoint: str | None = None
    loss_log: str | None = None
    hidden: int = 512
    feat: int = 64
    pair_budget: int = 64
    optimizer: str = "adam"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")


@dataclass
class UVResult:
    uv: np.ndarray
    seam_soft: np.ndarray
    loss_trace: list[dict]
    params: nn.ParamNet
    uv_raw: np.ndarray | None = None


def normalize_island(uv: np.ndarray) -> np.ndarray:
    """Aspect-preserving min-max scaling into [0, 1]^2."""
    uv = np.asarray(uv, dtype=np.float64)
    lo = uv.min(axis=0)
    side = float((uv.max(axis=0) - lo).max())
    if side <= 0:
        return np.zeros_like(uv)
    return np.clip((uv - lo) / side, 0.0, 1.0)


def _trace_row(step: int, terms: dict, total) -> dict:
    row = {"step": step}
    for name in TRACE_FIELDS[1:-1]:
        t = terms.get(name)
        row[name] = None if t is None else float(t.data)
    row["total"] = float(total.data)
    return row


def _run(mesh: Mesh, config: TrainConfig, ao: np.ndarray | None) -> UVResult:
    mesh = normalize_mesh(mesh)
    dtype = np.float32
    ss = np.random.SeedSequence(config.seed)
    init_seed, loop_seed = ss.spawn(2)
    params = nn.init_params(int(init_seed.generate_state(1)[0]), config.hidden, config.feat, dtype)
    rng = np.random.default_rng(loop_seed)
    grid = nn.lattice(mesh.n_vertices, dtype)
    ctx = LossContext.build(mesh, config.seam, dtype=dtype, pair_budget=config.pair_budget)
    w = config.weights
    ao_arr = None if ao is None else np.asarray(ao, dtype=dtype)
    if ao_arr is not None and ao_arr.shape != (mesh.n_vertices,):
        raise ValueError("AO field must hold one value per vertex")
    state = nn.AdamState(lr=config.lr)
    trace: list[dict] = []
    log_fh = open(config.loss_log, "w") if config.loss_log else None

    last_good = None  # parameters before the latest update, kept only when checkpointing

    def abort(step, why):
        ckpt = None
        good = params if all(np.isfinite(t.data).all() for t in params.tensors.values()) else last_good
        if config.checkpoint and good is not None:
            ckpt = Path(config.checkpoint)
            nn.save_checkpoint(good, ckpt, {"step": step, "seed": config.seed, "aborted": True})
        raise TrainingError(f"training aborted at step {step}: {why}", step, ckpt)

    try:
        for step in range(1, config.iterations + 1):
            params.zero_grad()
            try:
                out = nn.forward(params, grid, ctx.P, with_frame=w.w_ddl > 0)
                total, terms = base_objective(out, ctx, w, params, rng)
                scores = soft_seam_scores(mesh, out.extra["q_n"], config.seam, neighborhood=ctx.neighborhood)
                if ao_arr is not None:
                    terms["ao"] = ao_seam_loss(scores.s, ao_arr, w.epsilon)
                    if w.lambda_vis != 0:
                        # a zero-weighted branch would still reorder float32 gradient sums
                        total = visibility_objective(total, terms["ao"], w.lambda_vis)
            except FloatingPointError as exc:
                abort(step, str(exc))
            if not np.isfinite(total.data):
                abort(step, "non-finite total loss")
            row = _trace_row(step, terms, total)
            trace.append(row)
            if log_fh:
                log_fh.write(json.dumps(row) + "\n")
            if config.log_every and (step % config.log_every == 0 or step == 1):
                log.info("step %d total %.6g", step, row["total"])
            if step == config.iterations:
                break  # the UV returned is the one this loss was evaluated on
            total.backward()
            grads = params.grads()
            if not all(np.isfinite(g).all() for g in grads.values()):
                abort(step, "non-finite gradient")
            if config.checkpoint:
                last_good = params.copy()
            if config.optimizer == "adam":
                nn.adam_step(params.arrays(), grads, state)
            else:
                nn.sgd_step(params.arrays(), grads, config.lr)
    finally:
        if log_fh:
            log_fh.close()

    q = out.q.data.astype(np.float64)
    if config.checkpoint:
        nn.save_checkpoint(params, config.checkpoint, {"step": config.iterations, "seed": config.seed})
    return UVResult(normalize_island(q), scores.s.data.astype(np.float64), trace, params, q)


def train_base(mesh: Mesh, config: TrainConfig = TrainConfig()) -> UVResult:
    """Adam on the backbone objective over both cycles."""
    return _run(mesh, config, None)


def train_visibility(mesh: Mesh, ao: np.ndarray, config: TrainConfig = TrainConfig()) -> UVResult:
    """Backbone objective plus the seam-weighted exposure term."""
    return _run(mesh, config, ao)


# --- packing ----------------------------------------------------------------

@dataclass(frozen=True)
class AtlasLayout:
    k: int
    pad: float = 0.05

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("need at least one part")
        if not 0 <= self.pad < 0.5:
            raise ValueError("pad must lie in [0, 0.5)")

    @property
    def grid(self) -> int:
        return math.isqrt(self.k - 1) + 1 if self.k > 1 else 1

    @property
    def scale(self) -> float:
        return (1.0 - 2.0 * self.pad) / self.grid

    def cell(self, part: int) -> tuple[int, int]:
        return divmod(part, self.grid)

    def translation(self, part: int) -> tuple[float, float]:
        r, c = self.cell(part)
        g = self.grid
        return ((c + self.pad) / g, (r + self.pad) / g)

    def cell_rect(self, part: int) -> tuple[Fraction, Fraction, Fraction, Fraction]:
        """Exact (u0, v0, u1, v1) of a part's cell."""
        r, c = self.cell(part)
        g = self.grid
        return Fraction(c, g), Fraction(r, g), Fraction(c + 1, g), Fraction(r + 1, g)


def _inward(x: float, bound: Fraction, up: bool) -> float:
    while (Fraction(x) < bound) if up else (Fraction(x) > bound):
        x = float(np.nextafter(x, np.inf if up else -np.inf))
    return x


@dataclass
class Atlas:
    layout: AtlasLayout
    islands: list[np.ndarray]
    uv: np.ndarray | None = None
    seam_soft: np.ndarray | None = None
    seam_hard: np.ndarray | None = None


def transform_island(uv: np.ndarray, layout: AtlasLayout, part: int) -> np.ndarray:
    """``s * u + t`` for one part, clamped (exactly) into its cell."""
    s = layout.scale
    tu, tv = layout.translation(part)
    out = np.asarray(uv, dtype=np.float64) * s + np.array([tu, tv])
    u0, v0, u1, v1 = layout.cell_rect(part)
    lo_u, lo_v = _inward(float(u0), u0, True), _inward(float(v0), v0, True)
    hi_u, hi_v = _inward(float(u1), u1, False), _inward(float(v1), v1, False)
    out[:, 0] = np.clip(out[:, 0], lo_u, hi_u)
    out[:, 1] = np.clip(out[:, 1], lo_v, hi_v)
    return out


def pack_atlas(islands: list[np.ndarray], pad: float = 0.05, back_maps: list[np.ndarray] | None = None,
               n_vertices: int | None = None) -> Atlas:
    """Place each part's unit-square island in its row-major grid cell.

    With vertex back maps, also returns one UV per parent vertex; a vertex on
    a part boundary takes the UV of the first part that contains it.
    """
    layout = AtlasLayout(len(islands), pad)
    placed = [transform_island(isl, layout, k) for k, isl in enumerate(islands)]
    uv = None
    if back_maps is not None:
        n = n_vertices if n_vertices is not None else int(max(int(b.max()) for b in back_maps) + 1)
        uv = np.full((n, 2), np.nan)
        for isl, back in reversed(list(zip(placed, back_maps))):
            uv[back] = isl
    return Atlas(layout, placed, uv)


# --- semantic pipeline ------------------------------------------------------

def part_seed(seed: int, part: int) -> int:
    return int(np.random.SeedSequence([seed, part]).generate_state(1)[0])


def merge_small_parts(mesh: Mesh, labeling, min_vertices: int = 10) -> Labeling:
    """Fold parts with fewer than ``min_vertices`` vertices into the adjacent
    part sharing the most edges (the largest part when none is adjacent)."""
    labels = np.array(labeling.labels if isinstance(labeling, Labeling) else labeling, dtype=np.int64)
    adj = mesh.adjacency
    while True:
        ids = np.unique(labels)
        if len(ids) <= 1:
            break
        counts = {k: len(np.unique(mesh.faces[labels == k])) for k in ids}
        small = [k for k in ids if counts[k] < min_vertices]
        if not small:
            break
        k = min(small, key=lambda x: (counts[x], x))
        la, lb = labels[adj.face_a], labels[adj.face_b]
        nb = np.concatenate([lb[la == k], la[lb == k]])
        nb = nb[nb != k]
        if len(nb):
            vals, cnt = np.unique(nb, return_counts=True)
            target = int(vals[np.argmax(cnt)])
        else:
            others = [x for x in ids if x != k]
            target = max(others, key=lambda x: (np.sum(labels == x), -x))
        labels[labels == k] = target
    return Labeling.from_array(labels)


@dataclass
class SemanticResult:
    parts: list[tuple[SubmeshMap, UVResult]]
    atlas: Atlas
    split_mesh: Mesh
    split_uv: np.ndarray
    split_back_map: np.ndarray
    split_seam_soft: np.ndarray


def train_semantic(mesh: Mesh, labeling, config: TrainConfig = TrainConfig(), pad: float = 0.05,
                   ao: np.ndarray | None = None, order: list[int] | None = None) -> SemanticResult:
    """Train one fresh backbone per semantic part and pack the islands.

    ``ao`` switches every part to visibility training with the global field
    restricted to that part. ``split_mesh`` duplicates boundary vertices so each
    part keeps its own UVs.
    """
    lab = merge_small_parts(mesh, labeling)
    ids = list(range(lab.k))
    order = ids if order is None else list(order)
    results: dict[int, tuple[SubmeshMap, UVResult]] = {}
    for k in order:
        sub = extract_submesh(mesh, lab, k)
        cfg = TrainConfig(**{**config.__dict__, "seed": part_seed(config.seed, k),
                             "loss_log": None if config.loss_log is None else f"{config.loss_log}.part{k}",
                             "checkpoint": None if config.checkpoint is None else f"{config.checkpoint}.part{k}"})
        if ao is None:
            res = train_base(sub.submesh, cfg)
        else:
            res = train_visibility(sub.submesh, np.asarray(ao)[sub.vertex_back_map], cfg)
        results[k] = (sub, res)
    parts = [results[k] for k in ids]
    atlas = pack_atlas([r.uv for _, r in parts], pad, [s.vertex_back_map for s, _ in parts], mesh.n_vertices)
    verts, faces, back, soft = [], [], [], []
    offset = 0
    for (s, r), isl in zip(parts, atlas.islands):
        verts.append(s.submesh.vertices)
        faces.append(s.submesh.faces + offset)
        back.append(s.vertex_back_map)
        soft.append(r.seam_soft)
        offset += s.submesh.n_vertices
    split = Mesh(np.concatenate(verts), np.concatenate(faces))
    atlas.seam_soft = np.concatenate(soft)
    return SemanticResult(parts, atlas, split, np.concatenate(atlas.islands), np.concatenate(back), atlas.seam_soft)

"""Ray casting over a BVH and the two ray-traced surface fields:
ambient occlusion (per vertex) and the shape diameter function (per face).

Inner loops are numba kernels. Random directions are drawn up front from a
single seeded generator, so results do not depend on the thread count.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numba
import numpy as np

from .mesh import Mesh

log = logging.getLogger(__name__)

LEAF_SIZE = 4
_DEGENERATE_DET = 1e-14


@dataclass(frozen=True)
class FieldConfig:
    ao_samples: int = 256
    shdf_rays: int = 60
    cone_full_angle: float = 2 * np.pi / 3
    offset_eps: float = 1e-4
    rng_seed: int = 0

    def __post_init__(self):
        if self.ao_samples < 1 or self.shdf_rays < 1:
            raise ValueError("ao_samples and shdf_rays must be >= 1")
        if not 0 < self.cone_full_angle < np.pi:
            raise ValueError("cone_full_angle must lie in (0, pi)")
        if self.offset_eps < 0:
            raise ValueError("offset_eps must be >= 0")


@dataclass(frozen=True)
class Bvh:
    """Flattened median-split BVH.

    Node ``i`` is a leaf when ``count[i] > 0``; its faces are
    ``face_order[start[i]:start[i] + count[i]]``. Inner nodes store children
    in ``left``/``right``.
    """

    bmin: np.ndarray
    bmax: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    face_order: np.ndarray
    tri: np.ndarray  # (F, 3, 3) triangle corners, float64

    @property
    def n_nodes(self) -> int:
        return len(self.bmin)

    @property
    def n_leaves(self) -> int:
        return int((self.count > 0).sum())


def build_bvh(mesh: Mesh, leaf_size: int = LEAF_SIZE) -> Bvh:
    tri = np.ascontiguousarray(mesh.vertices[mesh.faces], dtype=np.float64)
    if len(tri) == 0:
        raise ValueError("cannot build a BVH over zero faces")
    fmin, fmax = tri.min(axis=1), tri.max(axis=1)
    cent = 0.5 * (fmin + fmax)
    order = np.arange(len(tri), dtype=np.int64)

    bmin, bmax, left, right, start, count = [], [], [], [], [], []

    def new_node(lo, hi):
        ids = order[lo:hi]
        bmin.append(fmin[ids].min(axis=0))
        bmax.append(fmax[ids].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(lo)
        count.append(0)
        return len(bmin) - 1

    root = new_node(0, len(tri))
    stack = [(root, 0, len(tri))]
    while stack:
        node, lo, hi = stack.pop()
        n = hi - lo
        if n <= leaf_size:
            count[node] = n
            continue
        ids = order[lo:hi]
        c = cent[ids]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        mid = n // 2
        part = np.argpartition(c[:, axis], mid, kind="introselect")
        order[lo:hi] = ids[part]
        li = new_node(lo, lo + mid)
        ri = new_node(lo + mid, hi)
        left[node], right[node] = li, ri
        stack.append((li, lo, lo + mid))
        stack.append((ri, lo + mid, hi))

    return Bvh(
        np.asarray(bmin), np.asarray(bmax),
        np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64),
        np.asarray(start, dtype=np.int64), np.asarray(count, dtype=np.int64),
        order, tri,
    )


@numba.njit(cache=True, inline="always")
def _tri_hit(tri, f, ox, oy, oz, dx, dy, dz):
    """Two-sided Moller-Trumbore; returns t or -1."""
    ax, ay, az = tri[f, 0, 0], tri[f, 0, 1], tri[f, 0, 2]
    e1x, e1y, e1z = tri[f, 1, 0] - ax, tri[f, 1, 1] - ay, tri[f, 1, 2] - az
    e2x, e2y, e2z = tri[f, 2, 0] - ax, tri[f, 2, 1] - ay, tri[f, 2, 2] - az
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    # scale-aware degeneracy test: |det| relative to |e1||e2||d|
    l1 = e1x * e1x + e1y * e1y + e1z * e1z
    l2 = e2x * e2x + e2y * e2y + e2z * e2z
    ld = dx * dx + dy * dy + dz * dz
    if det * det <= (_DEGENERATE_DET * _DEGENERATE_DET) * l1 * l2 * ld:
        return -1.0
    inv = 1.0 / det
    sx, sy, sz = ox - ax, oy - ay, oz - az
    u = (sx * px + sy * py + sz * pz) * inv
    if u < 0.0 or u > 1.0:
        return -1.0
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return -1.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    return t


@numba.njit(cache=True, inline="always")
def _box_hit(bmin, bmax, n, ox, oy, oz, ix, iy, iz, tmax):
    t0 = 0.0
    t1 = tmax
    lo = (bmin[n, 0] - ox) * ix
    hi = (bmax[n, 0] - ox) * ix
    if lo > hi:
        lo, hi = hi, lo
    t0 = max(t0, lo)
    t1 = min(t1, hi)
    lo = (bmin[n, 1] - oy) * iy
    hi = (bmax[n, 1] - oy) * iy
    if lo > hi:
        lo, hi = hi, lo
    t0 = max(t0, lo)
    t1 = min(t1, hi)
    lo = (bmin[n, 2] - oz) * iz
    hi = (bmax[n, 2] - oz) * iz
    if lo > hi:
        lo, hi = hi, lo
    t0 = max(t0, lo)
    t1 = min(t1, hi)
    # inflate by a relative epsilon so boxes of flat geometry are not missed
    return t0 <= t1 * (1.0 + 1e-9) + 1e-12


@numba.njit(cache=True)
def _inv(d):
    return 1.0 / d if d != 0.0 else 1e300


@numba.njit(cache=True)
def _closest(bmin, bmax, left, right, start, count, order, tri, ox, oy, oz, dx, dy, dz, tmin):
    best_t = np.inf
    best_f = -1
    ix, iy, iz = _inv(dx), _inv(dy), _inv(dz)
    stack = np.empty(128, dtype=np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        n = stack[sp]
        if not _box_hit(bmin, bmax, n, ox, oy, oz, ix, iy, iz, best_t):
            continue
        c = count[n]
        if c > 0:
            for k in range(start[n], start[n] + c):
                f = order[k]
                t = _tri_hit(tri, f, ox, oy, oz, dx, dy, dz)
                if t > tmin and (t < best_t or (t == best_t and f < best_f)):
                    best_t = t
                    best_f = f
        else:
            stack[sp] = left[n]
            stack[sp + 1] = right[n]
            sp += 2
    return best_f, best_t


@numba.njit(cache=True)
def _occluded(bmin, bmax, left, right, start, count, order, tri, ox, oy, oz, dx, dy, dz, tmin):
    ix, iy, iz = _inv(dx), _inv(dy), _inv(dz)
    stack = np.empty(128, dtype=np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        n = stack[sp]
        if not _box_hit(bmin, bmax, n, ox, oy, oz, ix, iy, iz, np.inf):
            continue
        c = count[n]
        if c > 0:
            for k in range(start[n], start[n] + c):
                t = _tri_hit(tri, order[k], ox, oy, oz, dx, dy, dz)
                if t > tmin:
                    return True
        else:
            stack[sp] = left[n]
            stack[sp + 1] = right[n]
            sp += 2
    return False


@numba.njit(cache=True, parallel=True)
def _cast_batch(bmin, bmax, left, right, start, count, order, tri, origins, dirs, tmin):
    n = len(origins)
    faces = np.empty(n, dtype=np.int64)
    ts = np.empty(n)
    for i in numba.prange(n):
        f, t = _closest(bmin, bmax, left, right, start, count, order, tri,
                        origins[i, 0], origins[i, 1], origins[i, 2], dirs[i, 0], dirs[i, 1], dirs[i, 2], tmin)
        faces[i] = f
        ts[i] = t
    return faces, ts


@numba.njit(cache=True, parallel=True)
def _brute_batch(tri, origins, dirs, tmin):
    n = len(origins)
    faces = np.full(n, -1, dtype=np.int64)
    ts = np.full(n, np.inf)
    for i in numba.prange(n):
        for f in range(len(tri)):
            t = _tri_hit(tri, f, origins[i, 0], origins[i, 1], origins[i, 2], dirs[i, 0], dirs[i, 1], dirs[i, 2])
            if t > tmin and (t < ts[i] or (t == ts[i] and f < faces[i])):
                ts[i] = t
                faces[i] = f
    return faces, ts


def _args(bvh: Bvh):
    return bvh.bmin, bvh.bmax, bvh.left, bvh.right, bvh.start, bvh.count, bvh.face_order, bvh.tri


def ray_intersect(bvh: Bvh, origins, directions, tmin: float = 0.0):
    """Nearest hit per ray: ``(face, t)`` with ``face = -1`` / ``t = inf`` on a miss."""
    o = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
    d = np.ascontiguousarray(np.atleast_2d(directions), dtype=np.float64)
    return _cast_batch(*_args(bvh), o, d, float(tmin))


def ray_intersect_brute(mesh_or_bvh, origins, directions, tmin: float = 0.0):
    """Same contract as :func:`ray_intersect` but tests every face."""
    tri = mesh_or_bvh.tri if isinstance(mesh_or_bvh, Bvh) else np.ascontiguousarray(
        mesh_or_bvh.vertices[mesh_or_bvh.faces], dtype=np.float64)
    o = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
    d = np.ascontiguousarray(np.atleast_2d(directions), dtype=np.float64)
    return _brute_batch(tri, o, d, float(tmin))


def orthonormal_frames(normals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two unit tangents per normal (branch-free Duff et al. construction)."""
    n = normals
    sign = np.where(n[:, 2] >= 0, 1.0, -1.0)
    a = -1.0 / (sign + n[:, 2])
    b = n[:, 0] * n[:, 1] * a
    t1 = np.column_stack([1 + sign * n[:, 0] ** 2 * a, sign * b, -sign * n[:, 0]])
    t2 = np.column_stack([b, sign + n[:, 1] ** 2 * a, -n[:, 1]])
    return t1, t2


@numba.njit(cache=True, parallel=True)
def _ao_kernel(bmin, bmax, left, right, start, count, order, tri, origins, normals, t1, t2, u):
    nv, ns = u.shape[0], u.shape[1]
    out = np.empty(nv)
    for i in numba.prange(nv):
        visible = 0
        for s in range(ns):
            phi = 2.0 * np.pi * u[i, s, 0]
            r2 = u[i, s, 1]
            st = np.sqrt(r2)
            ct = np.sqrt(max(0.0, 1.0 - r2))
            a = st * np.cos(phi)
            b = st * np.sin(phi)
            dx = a * t1[i, 0] + b * t2[i, 0] + ct * normals[i, 0]
            dy = a * t1[i, 1] + b * t2[i, 1] + ct * normals[i, 1]
            dz = a * t1[i, 2] + b * t2[i, 2] + ct * normals[i, 2]
            if not _occluded(bmin, bmax, left, right, start, count, order, tri,
                             origins[i, 0], origins[i, 1], origins[i, 2], dx, dy, dz, 0.0):
                visible += 1
        out[i] = visible / ns
    return out


def _set_threads(threads: int | None):
    if threads is None:
        env = os.environ.get("UVFORGE_THREADS")
        threads = int(env) if env else None
    if threads:
        numba.set_num_threads(max(1, min(threads, numba.config.NUMBA_NUM_THREADS)))


def ambient_occlusion(mesh: Mesh, bvh: Bvh | None = None, config: FieldConfig = FieldConfig(),
                      threads: int | None = None) -> np.ndarray:
    """Per-vertex ambient occlusion in the exposure convention (1 = fully exposed).

    Monte-Carlo estimate of the cosine-weighted visible fraction of the
    hemisphere about each vertex normal, using cosine-weighted sampling so the
    estimator is the plain fraction of unoccluded rays.
    """
    bvh = bvh or build_bvh(mesh)
    _set_threads(threads)
    rng = np.random.default_rng(config.rng_seed)
    u = rng.random((mesh.n_vertices, config.ao_samples, 2))
    n = np.ascontiguousarray(mesh.normals)
    t1, t2 = orthonormal_frames(n)
    origins = mesh.vertices + (config.offset_eps * mesh.bbox_diagonal) * n
    return _ao_kernel(*_args(bvh), np.ascontiguousarray(origins), n,
                      np.ascontiguousarray(t1), np.ascontiguousarray(t2), u)


def cone_directions(axes: np.ndarray, u: np.ndarray, half_angle: float,
                    tangents: np.ndarray | None = None) -> np.ndarray:
    """Directions uniform in solid angle inside a cone about each axis.

    ``u`` has shape (N, R, 2) of uniforms; returns (N, R, 3). ``tangents``
    (unit, orthogonal to the axes) fixes the azimuth origin; by default a
    frame is derived from the axes alone.
    """
    if tangents is None:
        t1, t2 = orthonormal_frames(axes)
    else:
        t1 = tangents
        t2 = np.cross(axes, t1)
    cos_t = 1.0 - u[..., 1] * (1.0 - np.cos(half_angle))
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t ** 2))
    phi = 2 * np.pi * u[..., 0]
    a = (sin_t * np.cos(phi))[..., None]
    b = (sin_t * np.sin(phi))[..., None]
    return a * t1[:, None, :] + b * t2[:, None, :] + cos_t[..., None] * axes[:, None, :]


def shape_diameter(mesh: Mesh, bvh: Bvh | None = None, config: FieldConfig = FieldConfig(),
                   threads: int | None = None, return_samples: bool = False):
    """Per-face shape diameter: median length of inward cone rays to the first hit.

    Rays leave each face centroid inside a cone of half-angle
    ``cone_full_angle / 2`` about the inward face normal. Missed rays are
    dropped; faces whose rays all miss receive the median over the other faces.
    """
    bvh = bvh or build_bvh(mesh)
    _set_threads(threads)
    rng = np.random.default_rng(config.rng_seed)
    nf, r = mesh.n_faces, config.shdf_rays
    u = rng.random((nf, r, 2))
    inward = -mesh.face_normals
    # azimuth measured from the first face edge so the field moves with the mesh
    edge = mesh.vertices[mesh.faces[:, 1]] - mesh.vertices[mesh.faces[:, 0]]
    edge -= np.einsum("ij,ij->i", edge, inward)[:, None] * inward
    edge /= np.maximum(np.linalg.norm(edge, axis=1, keepdims=True), 1e-300)
    dirs = cone_directions(inward, u, config.cone_full_angle / 2, edge)
    offset = config.offset_eps * mesh.bbox_diagonal
    origins = mesh.face_centroids + offset * inward
    o = np.repeat(origins, r, axis=0)
    _, t = ray_intersect(bvh, o, dirs.reshape(-1, 3))
    lengths = (t + offset).reshape(nf, r)
    lengths[~np.isfinite(t.reshape(nf, r))] = np.nan
    hit_any = np.isfinite(lengths).any(axis=1)
    out = np.full(nf, np.nan)
    if hit_any.any():
        out[hit_any] = np.nanmedian(lengths[hit_any], axis=1)
        if not hit_any.all():
            log.warning("%d faces had no inward hits; using the mesh-wide median", int((~hit_any).sum()))
            out[~hit_any] = np.median(out[hit_any])
    else:
        log.warning("no inward ray hit anything; shape diameter falls back to the bbox diagonal")
        out[:] = mesh.bbox_diagonal
    if return_samples:
        return out, lengths
    return out

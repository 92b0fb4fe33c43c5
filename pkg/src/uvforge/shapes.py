"""Procedural test meshes: grids, voxel solids, surfaces of revolution.

These double as CLI demo inputs and as the fixture fleet for the test suite.
All closed shapes are outward oriented.
"""

from __future__ import annotations

import numpy as np

from .mesh import Mesh


def grid(n: int = 10, size: float = 1.0, z: float = 0.0) -> Mesh:
    """Flat ``n x n`` vertex grid in the plane ``z``, normals +z."""
    t = np.linspace(0.0, size, n)
    xx, yy = np.meshgrid(t, t, indexing="xy")
    verts = np.column_stack([xx.ravel(), yy.ravel(), np.full(n * n, z)])
    faces = []
    for r in range(n - 1):
        for c in range(n - 1):
            a = r * n + c
            faces.append((a, a + 1, a + n + 1))
            faces.append((a, a + n + 1, a + n))
    return Mesh(verts, np.asarray(faces))


def flat_quad(corners, n: int = 2, nv: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Vertices/faces of a bilinear quad given 4 corners in CCW order.

    ``n`` vertices along the first edge, ``nv`` (default ``n``) along the second.
    """
    c = np.asarray(corners, dtype=np.float64)
    nv = n if nv is None else nv
    verts = []
    for v in np.linspace(0, 1, nv):
        for u in np.linspace(0, 1, n):
            verts.append((1 - u) * (1 - v) * c[0] + u * (1 - v) * c[1] + u * v * c[2] + (1 - u) * v * c[3])
    faces = []
    for r in range(nv - 1):
        for col in range(n - 1):
            a = r * n + col
            faces.append((a, a + 1, a + n + 1))
            faces.append((a, a + n + 1, a + n))
    return np.asarray(verts), np.asarray(faces)


def combine(*parts) -> Mesh:
    verts, faces, off = [], [], 0
    for v, f in parts:
        verts.append(v)
        faces.append(np.asarray(f) + off)
        off += len(v)
    return Mesh(np.concatenate(verts), np.concatenate(faces))


def tetrahedron() -> Mesh:
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64)
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return Mesh(v, f)


_FACE_DIRS = [
    # (axis, sign, u-axis, v-axis) with u x v pointing along sign*axis
    (0, +1, 1, 2),
    (0, -1, 2, 1),
    (1, +1, 2, 0),
    (1, -1, 0, 2),
    (2, +1, 0, 1),
    (2, -1, 1, 0),
]


def voxels(occupancy: np.ndarray, voxel_size: float = 1.0, subdiv: int = 1) -> Mesh:
    """Boundary surface of a boolean voxel grid, each exposed voxel face split
    into ``subdiv x subdiv`` quads, vertices welded."""
    occ = np.pad(np.asarray(occupancy, dtype=bool), 1)
    key_to_id: dict[tuple[int, int, int], int] = {}
    verts: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    s = subdiv

    def vid(p):
        k = (int(p[0]), int(p[1]), int(p[2]))
        i = key_to_id.get(k)
        if i is None:
            i = len(verts)
            key_to_id[k] = i
            verts.append(k)
        return i

    for idx in zip(*np.nonzero(occ)):
        idx = np.array(idx)
        for axis, sign, ua, va in _FACE_DIRS:
            nb = idx.copy()
            nb[axis] += sign
            if occ[tuple(nb)]:
                continue
            base = (idx - 1) * s
            if sign > 0:
                base[axis] += s
            for i in range(s):
                for j in range(s):
                    corners = []
                    for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = base.copy()
                        p[ua] += i + du
                        p[va] += j + dv
                        corners.append(vid(p))
                    a, b, c, d = corners
                    faces.append((a, b, c))
                    faces.append((a, c, d))
    v = np.asarray(verts, dtype=np.float64) * (voxel_size / s)
    return Mesh(v, np.asarray(faces))


def cube(subdiv: int = 1, size: float = 1.0) -> Mesh:
    """Axis-aligned cube ``[0, size]^3``; ``subdiv=1`` gives 8 vertices / 12 triangles."""
    return voxels(np.ones((1, 1, 1), dtype=bool), size, subdiv)


def inverted(mesh: Mesh) -> Mesh:
    """Same surface with flipped orientation (normals point inward)."""
    return Mesh(mesh.vertices, mesh.faces[:, ::-1])


def open_box(n: int = 4, wall: int = 1, height: int = 3, subdiv: int = 1) -> Mesh:
    """Thick-walled box with an open top cavity."""
    outer = n + 2 * wall
    occ = np.ones((outer, outer, height + wall), dtype=bool)
    occ[wall : wall + n, wall : wall + n, wall:] = False
    return voxels(occ, 1.0, subdiv)


def slab(width: float = 20.0, thickness: float = 1.0, n: int = 21) -> Mesh:
    """Closed thin box: large square faces of ``n x n`` vertices, z in [0, thickness]."""
    w = width / 2
    top = flat_quad([(-w, -w, thickness), (w, -w, thickness), (w, w, thickness), (-w, w, thickness)], n)
    bottom = flat_quad([(-w, -w, 0), (-w, w, 0), (w, w, 0), (w, -w, 0)], n)
    sides = []
    corners = [(-w, -w), (w, -w), (w, w), (-w, w)]
    for i in range(4):
        (x0, y0), (x1, y1) = corners[i], corners[(i + 1) % 4]
        sides.append(flat_quad([(x0, y0, 0), (x1, y1, 0), (x1, y1, thickness), (x0, y0, thickness)], n, 2))
    m = combine(top, bottom, *sides)
    return weld(m)


def weld(mesh: Mesh, tol: float = 1e-9) -> Mesh:
    key = np.round(mesh.vertices / tol).astype(np.int64)
    _, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    faces = inv.ravel()[mesh.faces]
    ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    return Mesh(mesh.vertices[first], faces[ok])


def icosphere(level: int = 2, radius: float = 1.0) -> Mesh:
    t = (1 + 5 ** 0.5) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    faces = list(f)
    for _ in range(level):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            k = (min(a, b), max(a, b))
            if k not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[k] = len(verts) - 1
            return cache[k]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return Mesh(np.asarray(verts) * radius, np.asarray(faces))


def revolution(profile, n_around: int = 24) -> Mesh:
    """Surface of revolution about +z.

    ``profile`` is a sequence of ``(r, z)`` from the bottom pole to the top pole;
    the first and last entries must have ``r == 0``. The result is flipped
    if needed so the enclosed volume is positive (outward normals).
    """
    prof = np.asarray(profile, dtype=np.float64)
    if prof[0, 0] != 0 or prof[-1, 0] != 0:
        raise ValueError("profile must start and end on the axis")
    ring_prof = prof[1:-1]
    theta = np.linspace(0, 2 * np.pi, n_around, endpoint=False)
    verts = [(0.0, 0.0, prof[0, 1])]
    for r, z in ring_prof:
        verts.extend((r * np.cos(t), r * np.sin(t), z) for t in theta)
    verts.append((0.0, 0.0, prof[-1, 1]))
    top = len(verts) - 1
    nr = len(ring_prof)
    faces = []

    def rid(i, j):
        return 1 + i * n_around + (j % n_around)

    for j in range(n_around):
        faces.append((0, rid(0, j + 1), rid(0, j)))
    for i in range(nr - 1):
        for j in range(n_around):
            a, b = rid(i, j), rid(i, j + 1)
            c, d = rid(i + 1, j + 1), rid(i + 1, j)
            faces.append((a, b, c))
            faces.append((a, c, d))
    for j in range(n_around):
        faces.append((top, rid(nr - 1, j), rid(nr - 1, j + 1)))
    m = Mesh(np.asarray(verts), np.asarray(faces))
    if signed_volume(m) < 0:
        m = inverted(m)
    return m


def signed_volume(mesh: Mesh) -> float:
    v = mesh.vertices[mesh.faces]
    return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)


def dumbbell_profile(lobe_radius: float = 1.0, neck_radius: float = 0.25, neck_length: float = 2.0,
                     lobe_steps: int = 10, neck_steps: int = 8):
    """(r, z) profile of two spherical lobes joined by a cylindrical neck.

    Returns ``(profile, (z_lo, z_hi))`` where the z-interval is the straight
    neck section.
    """
    R, rn = lobe_radius, neck_radius
    phi = np.arcsin(rn / R)  # polar angle where a lobe meets the neck
    half = neck_length / 2
    c_lo = -half - R * np.cos(phi)
    c_hi = half + R * np.cos(phi)
    prof = [(0.0, c_lo - R)]
    for a in np.linspace(np.pi, phi, lobe_steps)[1:]:
        prof.append((R * np.sin(a), c_lo + R * np.cos(a)))
    for z in np.linspace(-half, half, neck_steps)[1:-1]:
        prof.append((rn, z))
    for a in np.linspace(np.pi - phi, 0, lobe_steps)[:-1]:
        prof.append((R * np.sin(a), c_hi + R * np.cos(a)))
    prof.append((0.0, c_hi + R))
    return np.asarray(prof), (-half, half)


def dumbbell(n_around: int = 16, **kw) -> tuple[Mesh, np.ndarray]:
    """Dumbbell mesh plus a per-face boolean mask marking the cylindrical neck."""
    prof, (z_lo, z_hi) = dumbbell_profile(**kw)
    m = revolution(prof, n_around)
    zc = m.face_centroids[:, 2]
    neck = (zc > z_lo) & (zc < z_hi)
    return m, neck


def pocket_dome(radius: float = 1.0, pocket_radius: float = 0.35, pocket_depth: float = 0.7,
                dome_steps: int = 10, pocket_steps: int = 8, base_steps: int = 5, n_around: int = 24) -> Mesh:
    """Solid hemisphere on a flat base with a cylindrical pocket drilled from the top."""
    R, pr = radius, pocket_radius
    prof = [(0.0, 0.0)]
    for r in np.linspace(0, R, base_steps)[1:]:
        prof.append((r, 0.0))
    phi_top = np.arcsin(pr / R)
    for a in np.linspace(np.pi / 2, phi_top, dome_steps)[1:]:
        prof.append((R * np.sin(a), R * np.cos(a)))
    z_rim = R * np.cos(phi_top)
    z_floor = z_rim - pocket_depth
    for z in np.linspace(z_rim, z_floor, pocket_steps)[1:]:
        prof.append((pr, z))
    for r in np.linspace(pr, 0, 4)[1:]:
        prof.append((r, z_floor))
    return revolution(prof, n_around)


def cylinder(radius: float = 1.0, height: float = 2.0, n_around: int = 24, n_along: int = 8) -> Mesh:
    """Open cylinder (no caps) of radius ``radius`` along +z."""
    theta = np.linspace(0, 2 * np.pi, n_around, endpoint=False)
    zs = np.linspace(0, height, n_along)
    verts = [(radius * np.cos(t), radius * np.sin(t), z) for z in zs for t in theta]
    faces = []
    for i in range(n_along - 1):
        for j in range(n_around):
            a = i * n_around + j
            b = i * n_around + (j + 1) % n_around
            c, d = b + n_around, a + n_around
            faces.append((a, b, c))
            faces.append((a, c, d))
    return Mesh(np.asarray(verts), np.asarray(faces))


def cylinder_with_seam(radius: float = 1.0, height: float = 2.0, n_around: int = 24, n_along: int = 8):
    """Open cylinder whose seam column is *not* welded, plus its isometric unrolling.

    Returns ``(mesh, uv)``; the vertex column at angle 0 is duplicated so the
    unrolled UV is continuous on every face.
    """
    theta = np.linspace(0, 2 * np.pi, n_around + 1)
    zs = np.linspace(0, height, n_along)
    verts, uv = [], []
    for z in zs:
        for t in theta:
            verts.append((radius * np.cos(t), radius * np.sin(t), z))
            uv.append((radius * t, z))
    w = n_around + 1
    faces = []
    for i in range(n_along - 1):
        for j in range(n_around):
            a = i * w + j
            faces.append((a, a + 1, a + 1 + w))
            faces.append((a, a + 1 + w, a + w))
    return Mesh(np.asarray(verts), np.asarray(faces)), np.asarray(uv)


def wall_foot(size: float = 1000.0, gap: float = 1e-3) -> tuple[Mesh, int]:
    """Large floor (z=0, x>gap) next to a large wall (x=0); returns mesh and the
    index of the floor vertex nearest the foot of the wall."""
    s = size
    floor = flat_quad([(gap, -s, 0), (s, -s, 0), (s, s, 0), (gap, s, 0)], 3)
    wall = flat_quad([(0, -s, 0), (0, -s, s), (0, s, s), (0, s, 0)], 3)
    m = combine(floor, wall)
    fv = floor[0]
    target = int(np.argmin(np.linalg.norm(fv - np.array([gap, 0.0, 0.0]), axis=1)))
    return m, target

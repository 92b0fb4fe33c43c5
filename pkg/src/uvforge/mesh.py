"""Triangle mesh container, Wavefront OBJ I/O and connectivity helpers."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

log = logging.getLogger(__name__)


class ObjParseError(ValueError):
    """Raised for malformed OBJ input; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class MeshError(ValueError):
    pass


def face_normals_unnormalized(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    v0 = vertices[faces[:, 0]]
    return np.cross(vertices[faces[:, 1]] - v0, vertices[faces[:, 2]] - v0)


def face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    return 0.5 * np.linalg.norm(face_normals_unnormalized(vertices, faces), axis=1)


def compute_vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals.

    The cross product of two triangle edges has length twice the triangle
    area, so summing raw cross products weights each face by its area.
    Vertices whose star has zero area get +z and a warning.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    acc = np.zeros_like(vertices)
    if len(faces):
        fn = face_normals_unnormalized(vertices, faces)
        for k in range(3):
            np.add.at(acc, faces[:, k], fn)
    norm = np.linalg.norm(acc, axis=1)
    bad = norm <= 1e-300
    if bad.any():
        log.warning("%d vertices have a zero-area star; assigning +z normals", int(bad.sum()))
        acc[bad] = (0.0, 0.0, 1.0)
        norm[bad] = 1.0
    return acc / norm[:, None]


@dataclass(frozen=True)
class Adjacency:
    """Vertex one-rings and manifold face pairs with dihedral angles.

    ``dihedral`` is the interior angle between the two face planes measured
    inside the solid: pi for coplanar faces, below pi across convex edges and
    above pi across concave edges.
    """

    vertex_one_rings: tuple[np.ndarray, ...]
    face_a: np.ndarray
    face_b: np.ndarray
    edges: np.ndarray  # (P, 2) shared edge per pair, sorted vertex ids
    dihedral: np.ndarray
    nonmanifold_edges: np.ndarray  # (E, 2)
    boundary_edges: np.ndarray  # (E, 2)

    @property
    def n_pairs(self) -> int:
        return len(self.face_a)

    def ring_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """Padded (N, D) neighbor index array and validity mask."""
        n = len(self.vertex_one_rings)
        deg = max((len(r) for r in self.vertex_one_rings), default=0)
        idx = np.zeros((n, max(deg, 1)), dtype=np.int64)
        mask = np.zeros((n, max(deg, 1)), dtype=bool)
        for i, ring in enumerate(self.vertex_one_rings):
            idx[i, : len(ring)] = ring
            mask[i, : len(ring)] = True
        return idx, mask


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(f):
            if f.min() < 0 or f.max() >= len(v):
                raise MeshError("face index out of range")
            degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if degenerate.any():
                raise MeshError(f"degenerate face {int(np.flatnonzero(degenerate)[0])}: repeated vertex index")
        n = self.normals
        if n is None:
            n = compute_vertex_normals(v, f)
        else:
            n = np.ascontiguousarray(n, dtype=np.float64).reshape(-1, 3)
            if n.shape != v.shape:
                raise MeshError("normals must have one row per vertex")
            n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        for name, arr in (("vertices", v), ("faces", f), ("normals", n)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @cached_property
    def face_areas(self) -> np.ndarray:
        return face_areas(self.vertices, self.faces)

    @cached_property
    def face_normals(self) -> np.ndarray:
        fn = face_normals_unnormalized(self.vertices, self.faces)
        return fn / np.maximum(np.linalg.norm(fn, axis=1, keepdims=True), 1e-300)

    @cached_property
    def face_centroids(self) -> np.ndarray:
        return self.vertices[self.faces].mean(axis=1)

    @cached_property
    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    @cached_property
    def adjacency(self) -> Adjacency:
        return face_adjacency(self)

    @cached_property
    def face_graph(self) -> sparse.csr_matrix:
        """Symmetric face-face graph over every shared edge (non-manifold included)."""
        return _edge_face_graph(self.faces)

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        return Mesh(vertices, self.faces)


def _edge_table(faces: np.ndarray):
    """Sorted edge keys per face corner: returns (edges (3F,2), face ids (3F,))."""
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    fid = np.tile(np.arange(len(faces)), 3)
    return np.sort(e, axis=1), fid


def _edge_face_graph(faces: np.ndarray) -> sparse.csr_matrix:
    nf = len(faces)
    if nf == 0:
        return sparse.csr_matrix((0, 0))
    e, fid = _edge_table(faces)
    _, inv = np.unique(e, axis=0, return_inverse=True)
    inc = sparse.csr_matrix((np.ones(len(fid)), (inv.ravel(), fid)), shape=(inv.max() + 1, nf))
    g = (inc.T @ inc).tocsr()
    g.setdiag(0)
    g.eliminate_zeros()
    g.data[:] = 1.0
    return g


def face_adjacency(mesh: Mesh) -> Adjacency:
    faces = mesh.faces
    nv = mesh.n_vertices
    e, fid = _edge_table(faces)
    if len(e):
        uniq, inv, counts = np.unique(e, axis=0, return_inverse=True, return_counts=True)
        inv = inv.ravel()
    else:
        uniq = np.zeros((0, 2), dtype=np.int64)
        inv = np.zeros(0, dtype=np.int64)
        counts = np.zeros(0, dtype=np.int64)

    rows = np.concatenate([uniq[:, 0], uniq[:, 1]])
    cols = np.concatenate([uniq[:, 1], uniq[:, 0]])
    ring_graph = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(nv, nv))
    ring_graph.sum_duplicates()
    ring_graph.sort_indices()
    rings = tuple(
        np.array(ring_graph.indices[ring_graph.indptr[i] : ring_graph.indptr[i + 1]], dtype=np.int64)
        for i in range(nv)
    )

    order = np.argsort(inv, kind="stable")
    interior = np.flatnonzero(counts == 2)
    starts = np.concatenate([[0], np.cumsum(counts)])[:-1]
    fa = fid[order[starts[interior]]]
    fb = fid[order[starts[interior] + 1]]
    pair_edges = uniq[interior]
    nonmanifold = uniq[counts > 2]
    if len(nonmanifold):
        log.warning("%d non-manifold edges excluded from face pairs", len(nonmanifold))

    fnorm = mesh.face_normals
    na, nb = fnorm[fa], fnorm[fb]
    cos = np.clip(np.einsum("ij,ij->i", na, nb), -1.0, 1.0)
    phi = np.arccos(cos)
    # vertex of face b that is not on the shared edge
    fb_verts = faces[fb]
    opp = np.where(
        (fb_verts != pair_edges[:, [0]]) & (fb_verts != pair_edges[:, [1]]), fb_verts, -1
    ).max(axis=1)
    side = np.einsum("ij,ij->i", mesh.vertices[opp] - mesh.vertices[pair_edges[:, 0]], na)
    dihedral = np.where(side <= 0.0, np.pi - phi, np.pi + phi)
    dihedral = np.clip(dihedral, 1e-12, 2 * np.pi - 1e-12)
    return Adjacency(
        vertex_one_rings=rings,
        face_a=fa.astype(np.int64),
        face_b=fb.astype(np.int64),
        edges=pair_edges.astype(np.int64),
        dihedral=dihedral,
        nonmanifold_edges=nonmanifold.astype(np.int64),
        boundary_edges=uniq[counts == 1].astype(np.int64),
    )


@dataclass(frozen=True)
class Labeling:
    """Per-face integer labels in ``[0, k)``."""

    labels: np.ndarray
    k: int

    @classmethod
    def from_array(cls, labels) -> "Labeling":
        lab = np.asarray(labels, dtype=np.int64)
        _, compact = np.unique(lab, return_inverse=True)
        compact = compact.reshape(lab.shape)
        return cls(compact, int(compact.max()) + 1 if len(compact) else 0)

    def __len__(self):
        return len(self.labels)


def _labels_array(labeling) -> np.ndarray:
    return np.asarray(labeling.labels if isinstance(labeling, Labeling) else labeling, dtype=np.int64)


@dataclass(frozen=True)
class SubmeshMap:
    submesh: Mesh
    vertex_back_map: np.ndarray
    face_back_map: np.ndarray


def extract_submesh(mesh: Mesh, labeling, label: int) -> SubmeshMap:
    labels = _labels_array(labeling)
    face_ids = np.flatnonzero(labels == label)
    if len(face_ids) == 0:
        raise MeshError(f"label {label} selects no faces")
    sub_faces = mesh.faces[face_ids]
    used, local = np.unique(sub_faces, return_inverse=True)
    sub = Mesh(mesh.vertices[used], local.reshape(-1, 3))
    return SubmeshMap(sub, used.astype(np.int64), face_ids.astype(np.int64))


def normalize_mesh(mesh: Mesh) -> Mesh:
    """Center the bounding box at the origin and scale its diagonal to 1."""
    v = mesh.vertices
    if len(v) == 0:
        raise MeshError("cannot normalize an empty mesh")
    lo, hi = v.min(axis=0), v.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    if diag <= 0.0:
        raise MeshError("all vertices coincide; mesh cannot be normalized")
    return Mesh((v - 0.5 * (lo + hi)) / diag, mesh.faces, mesh.normals)


def connected_components(mesh: Mesh, labeling) -> np.ndarray:
    """Component id per face; faces join only across shared edges with equal labels."""
    labels = _labels_array(labeling)
    g = mesh.face_graph.tocoo()
    keep = labels[g.row] == labels[g.col]
    same = sparse.csr_matrix((np.ones(int(keep.sum())), (g.row[keep], g.col[keep])), shape=g.shape)
    _, comp = csgraph.connected_components(same, directed=False)
    # renumber by first face so ids are stable and ordered
    _, first = np.unique(comp, return_index=True)
    remap = np.empty(len(first), dtype=np.int64)
    remap[np.argsort(first)] = np.arange(len(first))
    return remap[comp]


def vertex_labels(mesh: Mesh, labeling) -> np.ndarray:
    """Per-vertex label by majority over incident faces (ties -> smallest label)."""
    labels = _labels_array(labeling)
    k = int(labels.max()) + 1 if len(labels) else 0
    votes = np.zeros((mesh.n_vertices, max(k, 1)), dtype=np.int64)
    for c in range(3):
        np.add.at(votes, (mesh.faces[:, c], labels), 1)
    return votes.argmax(axis=1)


# ---------------------------------------------------------------------------
# OBJ


@dataclass
class ObjData:
    mesh: Mesh
    uv: np.ndarray | None
    warnings: list[str]


def _resolve(idx: int, count: int, lineno: int, path: str) -> int:
    if idx > 0:
        r = idx - 1
    elif idx < 0:
        r = count + idx
    else:
        raise ObjParseError("index 0 is invalid in OBJ", lineno, path)
    if not 0 <= r < count:
        raise ObjParseError(f"index {idx} out of range", lineno, path)
    return r


def read_obj(path, triangulate_quads: bool = True) -> ObjData:
    """Parse an OBJ subset (v/vt/vn/f) into a Mesh plus optional per-vertex UVs.

    When a vertex is referenced with several different ``vt`` indices only the
    first is kept and a warning is recorded.
    """
    path = str(path)
    try:
        text = Path(path).read_text(encoding="utf-8", errors="replace")
    except OSError as exc:
        raise FileNotFoundError(f"cannot read OBJ file {path}: {exc.strerror}") from exc

    verts, uvs, normals = [], [], []
    faces, face_vt, face_vn, face_lines = [], [], [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        try:
            if tag == "v":
                verts.append([float(x) for x in parts[1:4]])
                if len(verts[-1]) != 3:
                    raise ValueError("vertex needs 3 coordinates")
            elif tag == "vt":
                uvs.append([float(x) for x in parts[1:3]])
                if len(uvs[-1]) != 2:
                    raise ValueError("texture coordinate needs 2 values")
            elif tag == "vn":
                normals.append([float(x) for x in parts[1:4]])
            elif tag == "f":
                corners = []
                for tok in parts[1:]:
                    comps = tok.split("/")
                    vi = _resolve(int(comps[0]), len(verts), lineno, path)
                    ti = _resolve(int(comps[1]), len(uvs), lineno, path) if len(comps) > 1 and comps[1] else -1
                    ni = _resolve(int(comps[2]), len(normals), lineno, path) if len(comps) > 2 and comps[2] else -1
                    corners.append((vi, ti, ni))
                if len(corners) < 3:
                    raise ObjParseError("face needs at least 3 vertices", lineno, path)
                if len(corners) > 3 and not triangulate_quads:
                    raise ObjParseError(f"non-triangular face with {len(corners)} vertices", lineno, path)
                vids = [c[0] for c in corners]
                if len(set(vids)) != len(vids):
                    raise ObjParseError("degenerate face: repeated vertex index", lineno, path)
                for i in range(1, len(corners) - 1):
                    tri = (corners[0], corners[i], corners[i + 1])
                    faces.append([c[0] for c in tri])
                    face_vt.append([c[1] for c in tri])
                    face_vn.append([c[2] for c in tri])
                    face_lines.append(lineno)
        except ObjParseError:
            raise
        except ValueError as exc:
            raise ObjParseError(str(exc), lineno, path) from exc
    if not verts:
        raise ObjParseError("no vertices found", None, path)

    warnings: list[str] = []
    v = np.asarray(verts, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)

    uv = None
    fvt = np.asarray(face_vt, dtype=np.int64).reshape(-1, 3)
    if uvs and len(f) and (fvt >= 0).any():
        uv_arr = np.asarray(uvs, dtype=np.float64)
        # vertices no face references keep their same-index vt when counts match
        uv = uv_arr.copy() if len(uv_arr) == len(v) else np.zeros((len(v), 2))
        assigned = np.full(len(v), -1, dtype=np.int64)
        conflicts = 0
        for vid, tid in zip(f.ravel(), fvt.ravel()):
            if tid < 0:
                continue
            if assigned[vid] < 0:
                assigned[vid] = tid
                uv[vid] = uv_arr[tid]
            elif assigned[vid] != tid and not np.allclose(uv_arr[assigned[vid]], uv_arr[tid]):
                conflicts += 1
        if conflicts:
            warnings.append(f"{conflicts} face corners reference a second texture coordinate; first kept")
    elif uvs and len(uvs) == len(v):
        uv = np.asarray(uvs, dtype=np.float64)

    n = None
    fvn = np.asarray(face_vn, dtype=np.int64).reshape(-1, 3)
    if normals and len(f) and (fvn >= 0).all():
        n_arr = np.asarray(normals, dtype=np.float64)
        n = np.zeros_like(v)
        n[f.ravel()] = n_arr[fvn.ravel()]
        if (np.linalg.norm(n, axis=1) == 0).any():
            n = None

    nm = _edge_table(f)[0] if len(f) else np.zeros((0, 2))
    if len(nm):
        _, counts = np.unique(nm, axis=0, return_counts=True)
        if (counts > 2).any():
            warnings.append(f"{int((counts > 2).sum())} non-manifold edges")
    for w in warnings:
        log.warning("%s: %s", path, w)
    try:
        mesh = Mesh(v, f, n)
    except MeshError as exc:
        raise ObjParseError(str(exc), None, path) from exc
    return ObjData(mesh, uv, warnings)


def load_obj(path, triangulate_quads: bool = True) -> Mesh:
    return read_obj(path, triangulate_quads).mesh


def _fmt(x: float) -> str:
    # shortest string that round-trips exactly; 0.0 prints as "0"
    return np.format_float_positional(float(x), trim="-")


def save_obj(mesh: Mesh, path, uv: np.ndarray | None = None, mtl: str | None = None,
             material: str | None = None) -> None:
    if uv is not None:
        uv = np.asarray(uv, dtype=np.float64)
        if uv.shape != (mesh.n_vertices, 2):
            raise ValueError(f"uv must have shape ({mesh.n_vertices}, 2), got {uv.shape}")
    lines = []
    if mtl:
        lines.append(f"mtllib {mtl}")
    lines.extend("v " + " ".join(_fmt(x) for x in row) for row in mesh.vertices)
    if uv is not None:
        lines.extend("vt " + " ".join(_fmt(x) for x in row) for row in uv)
    if material:
        lines.append(f"usemtl {material}")
    f1 = mesh.faces + 1
    if uv is not None:
        lines.extend(f"f {a}/{a} {b}/{b} {c}/{c}" for a, b, c in f1)
    else:
        lines.extend(f"f {a} {b} {c}" for a, b, c in f1)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def mesh_hash(mesh: Mesh) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(mesh.vertices).tobytes())
    h.update(np.ascontiguousarray(mesh.faces).tobytes())
    return h.hexdigest()[:16]


def euler_edges(mesh: Mesh) -> int:
    e, _ = _edge_table(mesh.faces)
    return len(np.unique(e, axis=0))


def angle_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.arctan2(np.linalg.norm(np.cross(a, b), axis=-1), np.einsum("...i,...i->...", a, b))


__all__ = [
    "Adjacency", "Labeling", "Mesh", "MeshError", "ObjData", "ObjParseError", "SubmeshMap",
    "compute_vertex_normals", "connected_components", "extract_submesh", "face_adjacency",
    "face_areas", "load_obj", "normalize_mesh", "read_obj", "save_obj", "vertex_labels",
]

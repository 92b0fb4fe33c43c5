"""File outputs: colored PLY, label sidecars, SVG atlas, checkerboard texture,
CSV histograms, and matplotlib figures."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.collections import PolyCollection  # noqa: E402

from .mesh import Mesh  # noqa: E402

PNG_META = {"Software": None}


def field_colors(values: np.ndarray, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Viridis RGB (uint8) for a scalar field."""
    v = np.asarray(values, dtype=np.float64)
    lo = float(np.nanmin(v)) if lo is None else lo
    hi = float(np.nanmax(v)) if hi is None else hi
    t = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    rgba = matplotlib.colormaps["viridis"](np.clip(t, 0, 1))
    return np.round(rgba[:, :3] * 255).astype(np.uint8)


def label_colors(labels: np.ndarray) -> np.ndarray:
    """A distinct hue per label (golden-ratio hue walk)."""
    labels = np.asarray(labels, dtype=np.int64)
    hues = (labels * 0.618033988749895) % 1.0
    hsv = np.column_stack([hues, np.full(len(hues), 0.65), np.full(len(hues), 0.95)])
    return np.round(matplotlib.colors.hsv_to_rgb(hsv) * 255).astype(np.uint8)


def write_ply(mesh: Mesh, path, vertex_colors: np.ndarray | None = None,
              face_colors: np.ndarray | None = None) -> None:
    """ASCII PLY with optional per-vertex or per-face RGB."""
    lines = ["ply", "format ascii 1.0", f"element vertex {mesh.n_vertices}",
             "property float x", "property float y", "property float z"]
    if vertex_colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines += [f"element face {mesh.n_faces}", "property list uchar int vertex_indices"]
    if face_colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    for i, (x, y, z) in enumerate(mesh.vertices):
        row = f"{x:.6f} {y:.6f} {z:.6f}"
        if vertex_colors is not None:
            r, g, b = vertex_colors[i]
            row += f" {r} {g} {b}"
        lines.append(row)
    for i, (a, b, c) in enumerate(mesh.faces):
        row = f"3 {a} {b} {c}"
        if face_colors is not None:
            r, g, bb = face_colors[i]
            row += f" {r} {g} {bb}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_labels_json(labels: np.ndarray, path) -> None:
    data = {str(i): int(l) for i, l in enumerate(np.asarray(labels))}
    Path(path).write_text(json.dumps(data, indent=0, sort_keys=False) + "\n", encoding="utf-8")


def read_labels_json(path) -> np.ndarray:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, dict) and "labels" in data:
        data = data["labels"]
    if isinstance(data, list):
        return np.asarray(data, dtype=np.int64)
    out = np.empty(len(data), dtype=np.int64)
    for k, v in data.items():
        out[int(k)] = int(v)
    return out


def atlas_svg(mesh: Mesh, uv: np.ndarray, path, labels: np.ndarray | None = None, size: int = 1024) -> int:
    """Every UV triangle as a polygon in a ``size``-square viewbox (v up).
    Returns the polygon count."""
    uv = np.asarray(uv, dtype=np.float64)
    cols = label_colors(labels) if labels is not None else None
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {size} {size}" width="{size}" height="{size}">',
           f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>']
    for i, f in enumerate(mesh.faces):
        pts = " ".join(f"{u * size:.3f},{(1.0 - v) * size:.3f}" for u, v in uv[f])
        fill = "#%02x%02x%02x" % tuple(cols[i]) if cols is not None else "#9ecae1"
        out.append(f'<polygon points="{pts}" fill="{fill}" stroke="black" stroke-width="0.3"/>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")
    return mesh.n_faces


def checker_image(size: int = 512, cells: int = 8, colors=((235, 235, 235), (40, 40, 40))) -> np.ndarray:
    idx = (np.arange(size) * cells // size)
    parity = (idx[:, None] + idx[None, :]) % 2
    return np.asarray(colors, dtype=np.uint8)[parity]


def write_checker(mesh: Mesh, uv: np.ndarray, out_dir, stem: str = "checker") -> dict[str, Path]:
    """Checkerboard PNG with its MTL, plus a textured copy of the OBJ."""
    from .mesh import save_obj

    out_dir = Path(out_dir)
    png = out_dir / f"{stem}.png"
    mtl = out_dir / f"{stem}.mtl"
    obj = out_dir / f"{stem}.obj"
    plt.imsave(png, checker_image(), metadata=PNG_META)
    mtl.write_text(f"newmtl {stem}\nKa 1 1 1\nKd 1 1 1\nmap_Kd {png.name}\n", encoding="utf-8")
    save_obj(mesh, obj, uv, mtl=mtl.name, material=stem)
    return {"png": png, "mtl": mtl, "obj": obj}


def write_histogram_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "seam_density", "all_density"])
        for r in rows:
            w.writerow([f"{x:.6f}" for x in r])


def _save(fig, path) -> None:
    fig.savefig(path, dpi=100, metadata=PNG_META)
    plt.close(fig)


def plot_ao_histogram(seam: list[float], all_: list[float], path) -> None:
    edges = np.linspace(0, 1, len(all_) + 1)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    width = edges[1] - edges[0]
    ax.bar(edges[:-1], all_, width=width, align="edge", alpha=0.5, label="all vertices")
    if seam:
        ax.bar(edges[:-1], seam, width=width, align="edge", alpha=0.6, label="seam vertices")
    ax.set_xlabel("ambient occlusion (exposure)")
    ax.set_ylabel("fraction")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def plot_losses(trace: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [r["step"] for r in trace]
    for key in ("total", "wrap", "repel", "cycle_p", "cycle_n", "ddl", "tdl", "ao"):
        vals = [r.get(key) for r in trace]
        if any(v is None for v in vals):
            continue
        ax.plot(steps, np.maximum(vals, 1e-12), label=key, lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    _save(fig, path)


def plot_atlas(mesh: Mesh, uv: np.ndarray, path, values: np.ndarray | None = None) -> None:
    """UV triangles, optionally colored by a per-vertex field."""
    uv = np.asarray(uv, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5, 5))
    polys = uv[mesh.faces]
    pc = PolyCollection(polys, edgecolors="k", linewidths=0.2)
    if values is not None:
        pc.set_array(np.asarray(values)[mesh.faces].mean(axis=1))
        pc.set_cmap("viridis")
        fig.colorbar(pc, ax=ax, fraction=0.046)
    else:
        pc.set_facecolor("#9ecae1")
    ax.add_collection(pc)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_aspect("equal")
    fig.tight_layout()
    _save(fig, path)

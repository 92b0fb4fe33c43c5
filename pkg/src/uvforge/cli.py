"""uvforge command line: segment, param, eval, export, replay.

Exit codes: 0 ok, 2 bad input, 3 segmentation failure, 4 training failure,
5 evaluation failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .mesh import MeshError, ObjParseError, connected_components, mesh_hash, read_obj, save_obj, vertex_labels

log = logging.getLogger("uvforge")

EXIT_OK, EXIT_INPUT, EXIT_SEGMENT, EXIT_TRAIN, EXIT_EVAL = 0, 2, 3, 4, 5
PIPELINES = ("base", "visibility", "semantic", "semantic_visibility")

DEFAULTS = {
    "pipeline": "base",
    "K": None,
    "T": 3000,
    "lr": 1e-3,
    "seed": 0,
    "lambda_vis": 0.004,
    "tau_scale": 0.1,
    "pad": 0.05,
    "ao_samples": 256,
    "shdf_rays": 60,
    "threads": None,
    "hidden": 512,
    "feat": 64,
}

# flag dest -> config key
FLAG_KEYS = {
    "k": "K", "iters": "T", "lr": "lr", "seed": "seed", "lambda_vis": "lambda_vis",
    "tau_scale": "tau_scale", "pad": "pad", "ao_samples": "ao_samples",
    "shdf_rays": "shdf_rays", "threads": "threads", "pipeline": "pipeline",
}


class EvaluationError(RuntimeError):
    pass


class InputError(ValueError):
    pass


# --- config & environment -----------------------------------------------------

def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the JSON config file, then explicit flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            user = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise InputError(f"cannot read config {args.config}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise InputError(f"config {args.config} is not valid JSON: {exc}") from exc
        unknown = set(user) - set(cfg)
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(user)
    for dest, key in FLAG_KEYS.items():
        val = getattr(args, dest, None)
        if val is not None:
            cfg[key] = val
    if cfg["threads"] is None and os.environ.get("UVFORGE_THREADS"):
        cfg["threads"] = int(os.environ["UVFORGE_THREADS"])
    if cfg["pipeline"] not in PIPELINES:
        raise InputError(f"pipeline must be one of {PIPELINES}")
    return cfg


@contextmanager
def thread_limit(threads: int | None):
    if not threads:
        yield
        return
    from threadpoolctl import threadpool_limits

    from .spatial import _set_threads

    _set_threads(threads)
    with threadpool_limits(limits=threads):
        yield


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def _cache_dir(input_path: Path) -> Path:
    d = input_path.resolve().parent / ".uvforge-cache"
    d.mkdir(exist_ok=True)
    return d


def cached_field(kind: str, mesh, input_path: Path, cfg: dict) -> np.ndarray:
    """AO (per vertex) or ShDF (per face), cached beside the input by
    (mesh hash, field config hash)."""
    from .spatial import FieldConfig, ambient_occlusion, shape_diameter

    fc = FieldConfig(ao_samples=int(cfg["ao_samples"]), shdf_rays=int(cfg["shdf_rays"]))
    key = {"kind": kind, "ao_samples": fc.ao_samples, "shdf_rays": fc.shdf_rays,
           "cone": fc.cone_full_angle, "eps": fc.offset_eps, "seed": fc.rng_seed}
    path = _cache_dir(input_path) / f"{mesh_hash(mesh)}-{kind}-{config_hash(key)}.npy"
    if path.exists():
        return np.load(path)
    if kind == "ao":
        val = ambient_occlusion(mesh, config=fc, threads=cfg["threads"])
    else:
        val = shape_diameter(mesh, config=fc, threads=cfg["threads"])
    np.save(path, val)
    return val


class Run:
    """Collects stage timings and output paths for the manifest."""

    def __init__(self, command: str, input_path: Path, out_dir: Path, cfg: dict, options: dict):
        self.command, self.input_path, self.out_dir = command, input_path, out_dir
        self.cfg, self.options = cfg, options
        self.stages: dict[str, float] = {}
        self.outputs: list[str] = []
        out_dir.mkdir(parents=True, exist_ok=True)

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.stages[name] = round(time.perf_counter() - t0, 4)

    def out(self, name: str) -> Path:
        p = self.out_dir / name
        self.outputs.append(name)
        return p

    def write_manifest(self, extra: dict | None = None) -> Path:
        manifest = {
            "tool": "uvforge",
            "version": __version__,
            "command": self.command,
            "input": str(self.input_path.resolve()),
            "pipeline": self.cfg.get("pipeline") if self.command == "param" else None,
            "config": self.cfg,
            "seed": self.cfg.get("seed"),
            "options": self.options,
            "stages_seconds": self.stages,
            "outputs": sorted(set(self.outputs)),
        }
        if extra:
            manifest.update(extra)
        path = self.out_dir / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        return path


def _load(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    return read_obj(path)


# --- commands -------------------------------------------------------------------

def cmd_segment(input_path: Path, out_dir: Path, cfg: dict, options: dict) -> int:
    from .report import label_colors, write_labels_json, write_ply
    from .segmentation import SegmentConfig, segment_mesh
    from .spatial import FieldConfig

    if cfg["K"] is None:
        raise InputError("segment needs --k")
    run = Run("segment", input_path, out_dir, cfg, options)
    with run.stage("load"):
        mesh = _load(input_path).mesh
    with run.stage("shdf"):
        shdf = cached_field("shdf", mesh, input_path, cfg)
    with run.stage("segment"):
        sc = SegmentConfig(fields=FieldConfig(shdf_rays=int(cfg["shdf_rays"])), seed=int(cfg["seed"]))
        lab = segment_mesh(mesh, int(cfg["K"]), sc, shdf=shdf)
    with run.stage("write"):
        write_labels_json(lab.labels, run.out("labels.json"))
        write_ply(mesh, run.out("colored.ply"), face_colors=label_colors(lab.labels))
    run.write_manifest({"num_labels": lab.k})
    print(f"segment: {lab.k} parts -> {out_dir / 'labels.json'}")
    return EXIT_OK


def _train_config(cfg: dict, out_dir: Path | None, loss_log: bool = True):
    from .losses import LossWeights, SeamConfig
    from .training import TrainConfig

    return TrainConfig(
        iterations=int(cfg["T"]), lr=float(cfg["lr"]), seed=int(cfg["seed"]),
        weights=LossWeights(lambda_vis=float(cfg["lambda_vis"])),
        seam=SeamConfig(tau_scale=float(cfg["tau_scale"])),
        hidden=int(cfg["hidden"]), feat=int(cfg["feat"]),
        loss_log=str(out_dir / "losses.jsonl") if (out_dir and loss_log) else None,
        checkpoint=str(out_dir / "params") if out_dir else None,
        log_every=100,
    )


def cmd_param(input_path: Path, out_dir: Path, cfg: dict, options: dict) -> int:
    from .metrics import seam_vertices_hard
    from .report import plot_atlas, plot_losses, read_labels_json
    from .segmentation import SegmentConfig, segment_mesh
    from .spatial import FieldConfig
    from .training import train_base, train_semantic, train_visibility

    run = Run("param", input_path, out_dir, cfg, options)
    pipeline = cfg["pipeline"]
    with run.stage("load"):
        mesh = _load(input_path).mesh
    ao = None
    if pipeline in ("visibility", "semantic_visibility"):
        with run.stage("ao"):
            ao = cached_field("ao", mesh, input_path, cfg)
    if pipeline in ("base", "visibility"):
        tc = _train_config(cfg, out_dir)
        run.outputs += ["losses.jsonl", "params.bin", "params.json"]
        with run.stage("train"):
            res = train_base(mesh, tc) if ao is None else train_visibility(mesh, ao, tc)
        out_mesh, uv, soft, trace = mesh, res.uv, res.seam_soft, res.loss_trace
    else:
        if options.get("labels"):
            labels = read_labels_json(options["labels"])
            if len(labels) != mesh.n_faces:
                raise InputError(f"labels file has {len(labels)} entries, mesh has {mesh.n_faces} faces")
        else:
            if cfg["K"] is None:
                raise InputError("semantic pipelines need --k or --labels")
            with run.stage("shdf"):
                shdf = cached_field("shdf", mesh, input_path, cfg)
            with run.stage("segment"):
                sc = SegmentConfig(fields=FieldConfig(shdf_rays=int(cfg["shdf_rays"])), seed=int(cfg["seed"]))
                labels = segment_mesh(mesh, int(cfg["K"]), sc, shdf=shdf).labels
        tc = _train_config(cfg, None)
        with run.stage("train"):
            sem = train_semantic(mesh, labels, tc, pad=float(cfg["pad"]), ao=ao)
        out_mesh, uv, soft = sem.split_mesh, sem.split_uv, sem.split_seam_soft
        trace = []
        for k, (_, r) in enumerate(sem.parts):
            trace += [{"part": k, **row} for row in r.loss_trace]
        with open(run.out("losses.jsonl"), "w", encoding="utf-8") as fh:
            for row in trace:
                fh.write(json.dumps(row) + "\n")
    with run.stage("write"):
        save_obj(out_mesh, run.out("out.obj"), uv)
        hard = seam_vertices_hard(out_mesh, uv, float(cfg["tau_scale"]))
        seams = {"tau_scale": cfg["tau_scale"], "soft": [round(float(x), 8) for x in soft],
                 "hard": [int(x) for x in hard]}
        run.out("seams.json").write_text(json.dumps(seams) + "\n", encoding="utf-8")
        plot_losses([r for r in trace if r.get("part", 0) == 0], run.out("loss_curve.png"))
        plot_atlas(out_mesh, uv, run.out("atlas.png"))
    run.write_manifest({"final_total": trace[-1]["total"] if trace else None})
    print(f"param[{pipeline}]: {out_mesh.n_vertices} vertices -> {out_dir / 'out.obj'}")
    return EXIT_OK


def cmd_eval(input_path: Path, out_dir: Path, cfg: dict, options: dict) -> int:
    from .metrics import evaluate
    from .report import plot_ao_histogram, plot_atlas, read_labels_json, write_histogram_csv

    run = Run("eval", input_path, out_dir, cfg, options)
    with run.stage("load"):
        data = _load(input_path)
    if data.uv is None:
        raise EvaluationError(f"{input_path} has no vt records; nothing to evaluate")
    mesh, uv = data.mesh, data.uv
    ao = None
    if options.get("ao"):
        with run.stage("ao"):
            ao = cached_field("ao", mesh, input_path, cfg)
    labels = ref = None
    if options.get("ref_labels"):
        face_labels = (read_labels_json(options["labels"]) if options.get("labels")
                       else connected_components(mesh, np.zeros(mesh.n_faces, dtype=np.int64)))
        ref_faces = read_labels_json(options["ref_labels"])
        if len(ref_faces) != mesh.n_faces or len(face_labels) != mesh.n_faces:
            raise InputError("label files must have one entry per face")
        labels = vertex_labels(mesh, face_labels)
        ref = vertex_labels(mesh, ref_faces)
    with run.stage("metrics"):
        rep = evaluate(mesh, uv, ao, float(cfg["tau_scale"]), labels, ref)
    with run.stage("write"):
        d = rep.to_dict()
        d["n_vertices"], d["n_faces"] = mesh.n_vertices, mesh.n_faces
        run.out("report.json").write_text(json.dumps(d, indent=2) + "\n", encoding="utf-8")
        plot_atlas(mesh, uv, run.out("atlas.png"), ao)
        if ao is not None:
            write_histogram_csv(rep.histogram_rows(), run.out("histogram.csv"))
            plot_ao_histogram(rep.histogram_seam, rep.histogram_all, run.out("ao_histogram.png"))
    run.write_manifest()
    msao = "n/a" if rep.mean_seam_ao is None else f"{rep.mean_seam_ao:.4f}"
    print(f"eval: conformality {rep.conformality:.4f} equiareality {rep.equiareality:.4f} "
          f"seam AO {msao} ({rep.seam_vertex_count} seam vertices)")
    return EXIT_OK


def cmd_export(input_path: Path, out_dir: Path, cfg: dict, options: dict) -> int:
    from .report import atlas_svg, read_labels_json, write_checker

    run = Run("export", input_path, out_dir, cfg, options)
    data = _load(input_path)
    if data.uv is None:
        raise EvaluationError(f"{input_path} has no vt records; nothing to export")
    kind = options["kind"]
    with run.stage("export"):
        if kind == "atlas-svg":
            labels = read_labels_json(options["labels"]) if options.get("labels") else None
            n = atlas_svg(data.mesh, data.uv, run.out("atlas.svg"), labels)
            print(f"export: {n} triangles -> {out_dir / 'atlas.svg'}")
        else:
            paths = write_checker(data.mesh, data.uv, out_dir)
            for p in paths.values():
                run.outputs.append(p.name)
            print(f"export: checker texture -> {paths['obj']}")
    run.write_manifest()
    return EXIT_OK


COMMANDS = {"segment": cmd_segment, "param": cmd_param, "eval": cmd_eval, "export": cmd_export}


# --- argument parsing -----------------------------------------------------------

def _common(p: argparse.ArgumentParser, training: bool = False):
    p.add_argument("input", type=Path, help="input OBJ")
    p.add_argument("--out", type=Path, default=None, help="output directory (default: <input stem>_<command>)")
    p.add_argument("--config", help="JSON config; explicit flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker threads (also UVFORGE_THREADS)")
    p.add_argument("--ao-samples", dest="ao_samples", type=int)
    p.add_argument("--shdf-rays", dest="shdf_rays", type=int)
    p.add_argument("--tau-scale", dest="tau_scale", type=float)
    p.add_argument("--k", type=int, help="number of semantic parts")
    if training:
        p.add_argument("--iters", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--lambda-vis", dest="lambda_vis", type=float)
        p.add_argument("--pad", type=float)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="uvforge", description="Semantic- and visibility-aware UV parameterization.")
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--version", action="version", version=f"uvforge {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="ShDF + graph-cut segmentation")
    _common(p)

    p = sub.add_parser("param", help="learn a UV map")
    _common(p, training=True)
    p.add_argument("--pipeline", choices=PIPELINES)
    p.add_argument("--labels", help="labels.json for semantic pipelines (skips segmentation)")

    p = sub.add_parser("eval", help="metrics for an OBJ with UVs")
    _common(p)
    p.add_argument("--ao", action="store_true", help="compute AO and seam AO statistics")
    p.add_argument("--ref-labels", dest="ref_labels", help="reference per-face labels.json")
    p.add_argument("--labels", help="per-face labels.json of the evaluated mesh (default: UV charts)")

    p = sub.add_parser("export", help="visual artifacts")
    _common(p)
    p.add_argument("--kind", choices=("atlas-svg", "checker"), required=True)
    p.add_argument("--labels", help="per-face labels.json for atlas colors")

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, default=None, help="output directory (default: the manifest's directory)")
    return ap


OPTION_KEYS = ("labels", "ref_labels", "ao", "kind")


def dispatch(command: str, input_path: Path, out_dir: Path, cfg: dict, options: dict) -> int:
    with thread_limit(cfg.get("threads")):
        return COMMANDS[command](input_path, out_dir, cfg, options)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .segmentation import SegmentationError
    from .training import TrainingError

    try:
        if args.command == "replay":
            m = json.loads(args.manifest.read_text(encoding="utf-8"))
            out_dir = args.out or args.manifest.parent
            return dispatch(m["command"], Path(m["input"]), out_dir, m["config"], m["options"])
        cfg = resolve_config(args)
        options = {k: getattr(args, k) for k in OPTION_KEYS if getattr(args, k, None) not in (None, False)}
        out_dir = args.out or args.input.with_name(f"{args.input.stem}_{args.command}")
        return dispatch(args.command, args.input, out_dir, cfg, options)
    except (FileNotFoundError, ObjParseError, MeshError, InputError) as exc:
        print(f"uvforge: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SegmentationError as exc:
        print(f"uvforge: segmentation failed: {exc}", file=sys.stderr)
        return EXIT_SEGMENT
    except TrainingError as exc:
        where = f"; last good checkpoint: {exc.checkpoint}" if exc.checkpoint else ""
        print(f"uvforge: training failed: {exc}{where}", file=sys.stderr)
        return EXIT_TRAIN
    except EvaluationError as exc:
        print(f"uvforge: evaluation failed: {exc}", file=sys.stderr)
        return EXIT_EVAL


if __name__ == "__main__":
    sys.exit(main())

"""Central finite-difference check of every loss composed with both cycles."""

import numpy as np

from uvforge import losses, nn, shapes

TERMS = ("wrap", "repel", "cycle_p", "cycle_n", "ddl", "tdl", "ao_seam")


def toy_problem(hidden=8, feat=4, seed=0):
    """A 50-vertex closed-ish mesh and float64 parameters whose zero-initialized
    residual heads are perturbed so that every weight carries gradient."""
    mesh = shapes.cylinder(radius=0.3, height=0.8, n_around=10, n_along=5)
    assert mesh.n_vertices == 50
    params = nn.init_params(seed, hidden=hidden, feat=feat, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    dims = nn.layout(hidden, feat)
    for mlp in nn.ZERO_FINAL:
        last = len(dims[mlp]) - 2
        for kind in ("W", "b"):
            t = params.tensors[f"{mlp}.{last}.{kind}"]
            t.data[...] = rng.normal(0.0, 0.1, t.data.shape)
    ctx = losses.LossContext.build(mesh, dtype=np.float64, pair_budget=16)
    ao = np.linspace(0.0, 1.0, mesh.n_vertices)
    return mesh, params, ctx, ao


def all_terms_fn(mesh, ctx, ao):
    """Returns f(params) -> dict of every unweighted loss term as Tensors."""
    grid = nn.lattice(mesh.n_vertices, np.float64)
    weights = losses.LossWeights()

    def f(params):
        out = nn.forward(params, grid, mesh.vertices, with_frame=True)
        _, terms = losses.base_objective(out, ctx, weights, params, rng=np.random.default_rng(5))
        sc = losses.soft_seam_scores(mesh, out.extra["q_n"], neighborhood=ctx.neighborhood)
        terms["ao_seam"] = losses.ao_seam_loss(sc.s, ao)
        return terms

    return f


def check(f, params, terms=TERMS, indices=None, step=1e-4, floor=1e-6):
    """Relative error ``|fd - ad| / max(|fd|, |ad|, floor)`` per loss term and
    checked entry, using central differences.

    ``indices`` maps tensor name -> flat indices (all entries when None).
    Returns {term: array of errors}.
    """
    grads = {}
    for term in terms:
        params.zero_grad()
        f(params)[term].backward()
        grads[term] = {k: g.reshape(-1).copy() for k, g in params.grads().items()}
    errs = {term: [] for term in terms}
    for name, t in params.tensors.items():
        flat = t.data.reshape(-1)
        idx = range(flat.size) if indices is None else indices.get(name, ())
        for j in idx:
            old = flat[j]
            h = step * max(1.0, abs(old))
            flat[j] = old + h
            a = {k: float(v.data) for k, v in f(params).items()}
            flat[j] = old - h
            b = {k: float(v.data) for k, v in f(params).items()}
            flat[j] = old
            for term in terms:
                fd = (a[term] - b[term]) / (2 * h)
                g = grads[term][name][j]
                errs[term].append(abs(fd - g) / max(abs(fd), abs(g), floor))
    return {k: np.asarray(v) for k, v in errs.items()}

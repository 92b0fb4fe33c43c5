"""The four pointwise MLP sub-networks, the two cycle compositions, Adam, and
parameter checkpoints.

Layer widths follow the backbone's published layout::

    deform  enc [2, 512, 512, 512, 64]   dec [66, 512, 512, 512, 2]
    wrap    enc [2, 512, 512, 512, 64]   dec [66, 512, 512, 512, 6]
    cut     enc [3, 512, 512, 64]        dec [67, 512, 512, 3]
    unwrap      [3, 512, 512, 2]

Hidden layers use LeakyReLU(0.01); every final layer is linear. Deform and
cut decoders add their output to the input (residual), and their last layer
starts at zero so both maps begin as the identity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SLOPE = 0.01
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """A forward pass produced NaN or Inf."""


def layout(hidden: int = 512, feat: int = 64) -> dict[str, list[int]]:
    h, f = hidden, feat
    return {
        "deform_enc": [2, h, h, h, f],
        "deform_dec": [f + 2, h, h, h, 2],
        "wrap_enc": [2, h, h, h, f],
        "wrap_dec": [f + 2, h, h, h, 6],
        "cut_enc": [3, h, h, f],
        "cut_dec": [f + 3, h, h, 3],
        "unwrap": [3, h, h, 2],
    }


ZERO_FINAL = ("deform_dec", "cut_dec")


@dataclass
class ParamNet:
    """All learnable weights, keyed ``"<mlp>.<layer>.W"`` / ``"<mlp>.<layer>.b"``."""

    tensors: dict[str, Tensor]
    hidden: int = 512
    feat: int = 64

    def layers(self, mlp: str) -> list[tuple[Tensor, Tensor]]:
        n = len(layout(self.hidden, self.feat)[mlp]) - 1
        return [(self.tensors[f"{mlp}.{i}.W"], self.tensors[f"{mlp}.{i}.b"]) for i in range(n)]

    def names(self) -> list[str]:
        return list(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.tensors.items()}

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def n_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def astype(self, dtype) -> "ParamNet":
        return ParamNet({k: ad.param(t.data.astype(dtype)) for k, t in self.tensors.items()},
                        self.hidden, self.feat)

    def copy(self) -> "ParamNet":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).data.dtype

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.tensors.values()])


def init_params(seed: int = 0, hidden: int = 512, feat: int = 64, dtype=np.float32) -> ParamNet:
    """He-uniform hidden weights, small uniform biases, zeroed residual heads."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for mlp, dims in layout(hidden, feat).items():
        n = len(dims) - 1
        for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            final = i == n - 1
            bound = math.sqrt(6.0 / din) if not final else 1.0 / math.sqrt(din)
            w = rng.uniform(-bound, bound, size=(din, dout))
            b = rng.uniform(-1.0 / math.sqrt(din), 1.0 / math.sqrt(din), size=dout)
            if final and mlp in ZERO_FINAL:
                w[:] = 0.0
                b[:] = 0.0
            tensors[f"{mlp}.{i}.W"] = ad.param(w.astype(dtype))
            tensors[f"{mlp}.{i}.b"] = ad.param(b.astype(dtype))
    return ParamNet(tensors, hidden, feat)


def lattice(n: int, dtype=np.float32) -> np.ndarray:
    """Regular ``k x k`` grid over [0, 1]^2 with ``k = ceil(sqrt(n))``."""
    k = max(2, math.ceil(math.sqrt(n)))
    t = np.linspace(0.0, 1.0, k)
    u, v = np.meshgrid(t, t, indexing="xy")
    return np.column_stack([u.ravel(), v.ravel()]).astype(dtype)


# --- sub-networks ------------------------------------------------------------

def mlp(layers, x: Tensor) -> Tensor:
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        x = ad.linear(x, w, b)
        if i < last:
            x = ad.leaky_relu(x, SLOPE)
    return x


def mlp_jvp(layers, x: Tensor, tx: Tensor, k: int) -> tuple[Tensor, Tensor]:
    """Forward pass plus ``k`` stacked tangents (rows ``[t0; t1; ...]``).

    Tangents stay on the tape, so they can be differentiated in turn; the
    LeakyReLU slope mask is piecewise constant and contributes no gradient.
    """
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        z = ad.linear(x, w, b)
        tz = ad.matmul(tx, w)
        if i < last:
            d = ad.slope_factor(z.data, SLOPE)
            x = ad.leaky_relu(z, SLOPE)
            tx = ad.scale_by(tz, np.tile(d, (k, 1)))
        else:
            x, tx = z, tz
    return x, tx


def deform_net(params: ParamNet, g: Tensor) -> Tensor:
    feat = mlp(params.layers("deform_enc"), g)
    return g + mlp(params.layers("deform_dec"), ad.concat([feat, g], axis=1))


def wrap_net(params: ParamNet, q: Tensor) -> tuple[Tensor, Tensor]:
    feat = mlp(params.layers("wrap_enc"), q)
    out = mlp(params.layers("wrap_dec"), ad.concat([feat, q], axis=1))
    return out[:, :3], out[:, 3:6]


def cut_net(params: ParamNet, p: Tensor) -> Tensor:
    feat = mlp(params.layers("cut_enc"), p)
    return p + mlp(params.layers("cut_dec"), ad.concat([feat, p], axis=1))


def unwrap_net(params: ParamNet, p_cut: Tensor) -> Tensor:
    return mlp(params.layers("unwrap"), p_cut)


def wrap_jacobian(params: ParamNet, q: Tensor) -> tuple[Tensor, Tensor]:
    """Columns of d(WrapNet position)/d(u, v) at each UV point, on the tape."""
    _, _, e1, e2 = wrap_with_frame(params, q)
    return e1, e2


def wrap_with_frame(params: ParamNet, q: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """WrapNet position and normal plus the two position tangents, in one pass."""
    n = len(q.data)
    tq = np.zeros((2 * n, 2), dtype=q.data.dtype)
    tq[:n, 0] = 1.0
    tq[n:, 1] = 1.0
    tq = Tensor(tq)
    feat, tfeat = mlp_jvp(params.layers("wrap_enc"), q, tq, 2)
    h = ad.concat([feat, q], axis=1)
    th = ad.concat([tfeat, tq], axis=1)
    out, tout = mlp_jvp(params.layers("wrap_dec"), h, th, 2)
    e = tout[:, :3]
    return out[:, :3], out[:, 3:6], e[:n], e[n:]


# --- cycles ------------------------------------------------------------------

@dataclass
class CycleOutputs:
    q_hat: Tensor
    p_hat: Tensor
    n_hat: Tensor
    p_hat_cut: Tensor
    q_hat_cycle: Tensor
    p_cut: Tensor | None = None
    q: Tensor | None = None
    p_tilde: Tensor | None = None
    n_tilde: Tensor | None = None
    extra: dict = field(default_factory=dict)


def _check_finite(**named):
    for name, t in named.items():
        arr = t.data if isinstance(t, Tensor) else t
        if not np.all(np.isfinite(arr)):
            bad = int((~np.isfinite(arr)).sum())
            raise NonFiniteError(f"non-finite values in {name}: {bad} of {arr.size} entries")


def forward_cycle_2d(params: ParamNet, grid: np.ndarray | Tensor):
    """Lattice -> deform -> wrap -> cut -> unwrap."""
    g = grid if isinstance(grid, Tensor) else Tensor(np.asarray(grid, dtype=params.dtype))
    q_hat = deform_net(params, g)
    p_hat, n_hat = wrap_net(params, q_hat)
    p_hat_cut = cut_net(params, p_hat)
    q_hat_cycle = unwrap_net(params, p_hat_cut)
    _check_finite(q_hat=q_hat, p_hat=p_hat, n_hat=n_hat, p_hat_cut=p_hat_cut, q_hat_cycle=q_hat_cycle)
    return q_hat, p_hat, n_hat, p_hat_cut, q_hat_cycle


def forward_cycle_3d(params: ParamNet, vertices: np.ndarray | Tensor, with_frame: bool = False):
    """Mesh points -> cut -> unwrap (the UV map) -> wrap.

    ``with_frame`` also returns the WrapNet tangents at the UV points, sharing
    the wrap forward pass.
    """
    p = vertices if isinstance(vertices, Tensor) else Tensor(np.asarray(vertices, dtype=params.dtype))
    p_cut = cut_net(params, p)
    q = unwrap_net(params, p_cut)
    if with_frame:
        p_tilde, n_tilde, e1, e2 = wrap_with_frame(params, q)
    else:
        p_tilde, n_tilde = wrap_net(params, q)
    _check_finite(p_cut=p_cut, q=q, p_tilde=p_tilde, n_tilde=n_tilde)
    if with_frame:
        return p_cut, q, p_tilde, n_tilde, e1, e2
    return p_cut, q, p_tilde, n_tilde


def forward(params: ParamNet, grid: np.ndarray, vertices: np.ndarray, with_frame: bool = False) -> CycleOutputs:
    q_hat, p_hat, n_hat, p_hat_cut, q_hat_cycle = forward_cycle_2d(params, grid)
    res = forward_cycle_3d(params, vertices, with_frame)
    out = CycleOutputs(q_hat, p_hat, n_hat, p_hat_cut, q_hat_cycle, *res[:4])
    if with_frame:
        out.extra["frame"] = res[4:]
    return out


def predict_uv(params: ParamNet, vertices: np.ndarray) -> np.ndarray:
    """UV for each vertex (3D cycle only, no tape kept)."""
    p = Tensor(np.asarray(vertices, dtype=params.dtype))
    return unwrap_net(params, cut_net(params, p)).data.copy()


# --- optimizers --------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@numba.njit(cache=True, fastmath=True)
def _adam_kernel(p, g, m, v, b1, b2, a1, a2, lr_c1, inv_c2, eps):
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + a1 * gi
        vi = b2 * v[i] + a2 * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr_c1 * mi / (np.sqrt(vi * inv_c2) + eps)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> dict[str, np.ndarray]:
    """Bias-corrected Adam; updates ``params`` arrays in place and returns them."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {p.shape}")
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        f = p.dtype.type
        _adam_kernel(p.reshape(-1), np.ascontiguousarray(g, dtype=p.dtype).reshape(-1),
                     state.m[k].reshape(-1), state.v[k].reshape(-1),
                     f(b1), f(b2), f(1.0 - b1), f(1.0 - b2), f(state.lr / c1), f(1.0 / c2), f(state.eps))
    return params


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    for k, p in params.items():
        p -= lr * grads[k]
    return params


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(params: ParamNet, path, meta: dict | None = None) -> tuple[Path, Path]:
    """Raw little-endian blob plus a JSON manifest giving each tensor's shape and offset."""
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    manifest_path = path.with_suffix(".json")
    entries, offset = [], 0
    dtype = np.dtype(params.dtype).newbyteorder("<")
    with open(blob_path, "wb") as fh:
        for name, t in params.tensors.items():
            arr = np.ascontiguousarray(t.data, dtype=dtype)
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    manifest = {
        "version": CHECKPOINT_VERSION,
        "dtype": dtype.str,
        "hidden": params.hidden,
        "feat": params.feat,
        "blob": blob_path.name,
        "tensors": entries,
        "meta": meta or {},
    }
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return blob_path, manifest_path


def load_checkpoint(path) -> ParamNet:
    manifest_path = Path(path).with_suffix(".json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')!r}")
    dtype = np.dtype(manifest["dtype"])
    raw = (manifest_path.parent / manifest["blob"]).read_bytes()
    tensors = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = ad.param(arr.astype(dtype.newbyteorder("=")))
    return ParamNet(tensors, manifest["hidden"], manifest["feat"])

"""Modified MLP with exact input derivatives and hand-written backpropagation.

The network maps a standardised input ``x`` to a scalar:

    U = tanh(x W_u + b_u),  V = tanh(x W_v + b_v)
    H_0 = x
    Z_k = tanh(H_{k-1} W_k + b_k),  H_k = (1 - Z_k) U + Z_k V,   k = 1..depth
    out = H_depth w + b

Directional input derivatives are pushed forward alongside the values
(``forward``), and ``backward`` differentiates both the value and those
directional derivatives with respect to every parameter. That is what the
Eikonal loss needs: it is a function of ``d out / d x``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _kernels as _k
from .errors import IoFault, ManifoldMismatch, NumericalFault, SchemaMismatch


@dataclass
class MlpParameters:
    arrays: dict  # name -> ndarray, in declaration order
    input_dim: int
    width: int
    depth: int
    fourier: np.ndarray | None = None  # fixed (input_dim, F) frequency matrix, not trained
    activation: str = "tanh"

    @property
    def names(self) -> list:
        return list(self.arrays)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def with_flat(self, vec) -> "MlpParameters":
        out, i = {}, 0
        for name, a in self.arrays.items():
            out[name] = np.asarray(vec[i : i + a.size], dtype=float).reshape(a.shape)
            i += a.size
        return replace(self, arrays=out)

    @property
    def dtype(self):
        return self.arrays["head.w"].dtype

    def astype(self, dtype) -> "MlpParameters":
        fourier = None if self.fourier is None else self.fourier.astype(dtype)
        return replace(self, arrays={k: a.astype(dtype) for k, a in self.arrays.items()}, fourier=fourier)

    def feature_dim(self) -> int:
        return self.input_dim + (0 if self.fourier is None else 2 * self.fourier.shape[1])


def param_count(input_dim: int, width: int, depth: int, fourier_features: int = 0) -> int:
    d = input_dim + 2 * fourier_features
    return 3 * (d * width + width) + (depth - 1) * (width * width + width) + width + 1


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init(input_dim: int, width: int = 128, depth: int = 4, seed: int = 0,
         fourier_features: int = 0, fourier_scale: float = 1.0) -> MlpParameters:
    """Glorot-uniform weights and zero biases; deterministic in ``seed``."""
    if width < 1 or depth < 1 or input_dim < 1:
        raise ValueError("input_dim, width and depth must be >= 1")
    rng = np.random.default_rng(seed)
    fourier = None
    if fourier_features:
        fourier = fourier_scale * rng.standard_normal((input_dim, fourier_features))
    d = input_dim + 2 * fourier_features
    arrays = {
        "enc_u.w": _glorot(rng, d, width),
        "enc_u.b": np.zeros(width),
        "enc_v.w": _glorot(rng, d, width),
        "enc_v.b": np.zeros(width),
        "hidden0.w": _glorot(rng, d, width),
        "hidden0.b": np.zeros(width),
    }
    for k in range(1, depth):
        arrays[f"hidden{k}.w"] = _glorot(rng, width, width)
        arrays[f"hidden{k}.b"] = np.zeros(width)
    arrays["head.w"] = _glorot(rng, width, 1)
    arrays["head.b"] = np.zeros(1)
    return MlpParameters(arrays, input_dim, width, depth, fourier)


@dataclass
class _Cache:
    feat: np.ndarray
    dfeat: np.ndarray
    u: np.ndarray
    du_pre: np.ndarray
    v: np.ndarray
    dv_pre: np.ndarray
    layers: list = field(default_factory=list)  # (h_prev, dh_prev, z, dz_pre)
    h: np.ndarray | None = None
    du: np.ndarray | None = None
    dv: np.ndarray | None = None
    dh: np.ndarray | None = None


def _features(params: MlpParameters, x, dx):
    if params.fourier is None:
        return x, dx
    z = x @ params.fourier
    dz = dx @ params.fourier
    s, c = np.sin(z), np.cos(z)
    feat = np.concatenate([x, s, c], axis=-1)
    dfeat = np.concatenate([dx, c * dz, -s * dz], axis=-1)
    return feat, dfeat


def forward(params: MlpParameters, x, dx=None, keep_cache: bool = False):
    """Network value and directional input derivatives.

    x: (N, input_dim). dx: (k, N, input_dim) tangent directions, or None.
    Returns (out (N,), dout (k, N)) and, with ``keep_cache``, the cache for
    :func:`backward`.
    """
    a = params.arrays
    dtype = params.dtype
    x = np.asarray(x, dtype=dtype)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    dx = np.zeros((0,) + x.shape, dtype) if dx is None else np.asarray(dx, dtype=dtype)
    feat, dfeat = _features(params, x, dx)

    def enc(name):
        pre = feat @ a[name + ".w"] + a[name + ".b"]
        dpre = dfeat @ a[name + ".w"]
        y = np.tanh(pre)
        dy = np.empty_like(dpre)
        _k.tanh_tangent(y, dpre, dy)
        return y, dy, dpre

    u, du, du_pre = enc("enc_u")
    v, dv, dv_pre = enc("enc_v")
    cache = _Cache(feat, dfeat, u, du_pre, v, dv_pre)
    cache.du, cache.dv = du, dv
    h, dh = feat, dfeat
    for k in range(params.depth):
        w = a[f"hidden{k}.w"]
        pre = h @ w + a[f"hidden{k}.b"]
        dz_pre = dh @ w
        z = np.tanh(pre)
        h_new = np.empty_like(u)
        dh_new = np.empty_like(du)
        _k.blend_forward(z, dz_pre, u, du, v, dv, h_new, dh_new)
        if keep_cache:
            cache.layers.append((h, dh, z, dz_pre))
        h, dh = h_new, dh_new
    out = (h @ a["head.w"])[:, 0] + a["head.b"][0]
    dout = (dh @ a["head.w"])[..., 0]
    if not (np.all(np.isfinite(out)) and np.all(np.isfinite(dout))):
        raise NumericalFault("non-finite network output", np.argwhere(~np.isfinite(out)))
    if single and not keep_cache:
        return out[0], dout[:, 0]
    if keep_cache:
        cache.h, cache.dh = h, dh
        return out, dout, cache
    return out, dout


def _linear_back(inp, dinp, gpre, gdpre):
    k = dinp.shape[0]
    gw = inp.T @ gpre
    if k:
        gw = gw + dinp.reshape(-1, dinp.shape[-1]).T @ gdpre.reshape(-1, gpre.shape[-1])
    return gw, gpre.sum(axis=0)


def backward(params: MlpParameters, cache: _Cache, g_out, g_dout) -> dict:
    """Parameter gradient of sum(g_out * out) + sum(g_dout * dout)."""
    a = params.arrays
    g_out = np.asarray(g_out, dtype=params.dtype)
    g_dout = np.asarray(g_dout, dtype=params.dtype).reshape(cache.dh.shape[:2])
    head_w = a["head.w"][:, 0]
    grads = {}
    grads["head.w"] = _linear_back(cache.h, cache.dh, g_out[:, None], g_dout[..., None])[0]
    grads["head.b"] = np.array([g_out.sum()], dtype=params.dtype)
    gh = g_out[:, None] * head_w
    gdh = g_dout[..., None] * head_w

    u, v, du, dv = cache.u, cache.v, cache.du, cache.dv
    gu = np.zeros_like(u)
    gv = np.zeros_like(v)
    gdu = np.zeros_like(du)
    gdv = np.zeros_like(dv)
    for k in range(params.depth - 1, -1, -1):
        h_prev, dh_prev, z, dz_pre = cache.layers[k]
        gpre = np.empty_like(z)
        gdpre = np.empty_like(dz_pre)
        _k.blend_backward(gh, gdh, z, dz_pre, u, du, v, dv, gu, gv, gdu, gdv, gpre, gdpre)
        w = a[f"hidden{k}.w"]
        grads[f"hidden{k}.w"], grads[f"hidden{k}.b"] = _linear_back(h_prev, dh_prev, gpre, gdpre)
        if k:
            gh = gpre @ w.T
            gdh = gdpre @ w.T

    for name, y, dpre, gy, gdy in (
        ("enc_u", u, cache.du_pre, gu, gdu),
        ("enc_v", v, cache.dv_pre, gv, gdv),
    ):
        gpre = np.empty_like(y)
        gdpre = np.empty_like(dpre)
        _k.tanh_backward(y, dpre, gy, gdy, gpre, gdpre)
        grads[name + ".w"], grads[name + ".b"] = _linear_back(cache.feat, cache.dfeat, gpre, gdpre)
    return {name: grads[name] for name in params.arrays}


def flatten(grads: dict) -> np.ndarray:
    return np.concatenate([g.ravel() for g in grads.values()])


def value_and_grads(params: MlpParameters, x):
    """(value, d value/dx, d value/d params, d(d value/dx)/d params) at one input.

    Parameter derivatives are flattened in declaration order; the last entry
    has shape (input_dim, n_params).
    """
    x = np.asarray(x, dtype=float).reshape(1, -1)
    d = x.shape[1]
    eye = np.eye(d)[:, None, :]
    out, dout, cache = forward(params, x, eye, keep_cache=True)
    dval_dp = flatten(backward(params, cache, np.ones(1), np.zeros((d, 1))))
    mixed = np.empty((d, params.size))
    for i in range(d):
        sel = np.zeros((d, 1))
        sel[i, 0] = 1.0
        mixed[i] = flatten(backward(params, cache, np.zeros(1), sel))
    return float(out[0]), dout[:, 0].copy(), dval_dp, mixed


# optimiser ---------------------------------------------------------------------


@dataclass
class OptimizerState:
    step: int
    m: dict
    v: dict
    lr: float = 1e-3
    decay: float = 0.9
    interval: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: MlpParameters, lr=1e-3, decay=0.9, interval=2000) -> "OptimizerState":
        zeros = {k: np.zeros_like(a) for k, a in params.arrays.items()}
        return cls(0, zeros, {k: z.copy() for k, z in zeros.items()}, lr, decay, interval)

    @property
    def effective_lr(self) -> float:
        return self.lr * self.decay ** (self.step // self.interval)


def adam_update(step, m, v, grad, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update on a single array; ``step`` counts previous updates."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    t = step + 1
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    return -lr * mhat / (np.sqrt(vhat) + eps), m, v


def adam_step(state: OptimizerState, params: MlpParameters, grads: dict):
    """Adam with piecewise-constant exponential learning-rate decay."""
    lr = state.effective_lr
    new_arrays, new_m, new_v = {}, {}, {}
    for k, a in params.arrays.items():
        delta, new_m[k], new_v[k] = adam_update(
            state.step, state.m[k], state.v[k], grads[k], lr, state.beta1, state.beta2, state.eps
        )
        new_arrays[k] = a + delta
    new_state = replace(state, step=state.step + 1, m=new_m, v=new_v)
    return new_state, replace(params, arrays=new_arrays)


# checkpoints -------------------------------------------------------------------

MAGIC = b"GEODESICA-CKPT\n"
VERSION = 1


@dataclass
class Checkpoint:
    params: MlpParameters
    state: OptimizerState | None
    manifold_id: str
    bounds: tuple
    augmentation_kind: str
    extra: dict


def save_checkpoint(path, params: MlpParameters, state: OptimizerState | None, manifold_id: str,
                    bounds, augmentation_kind: str, extra: dict | None = None) -> None:
    low, high = (np.asarray(b, dtype=float) for b in bounds)
    blocks = [(k, a) for k, a in params.arrays.items()]
    if params.fourier is not None:
        blocks.append(("fourier", params.fourier))
    if state is not None:
        blocks += [("m." + k, a) for k, a in state.m.items()]
        blocks += [("v." + k, a) for k, a in state.v.items()]
    meta = {
        "manifold_id": manifold_id,
        "bounds": [low.tolist(), high.tolist()],
        "augmentation_kind": augmentation_kind,
        "architecture": {
            "input_dim": params.input_dim,
            "width": params.width,
            "depth": params.depth,
            "activation": params.activation,
            "fourier_features": 0 if params.fourier is None else int(params.fourier.shape[1]),
        },
        "arrays": [[k, list(a.shape)] for k, a in blocks],
        "optimizer": None if state is None else {
            "step": state.step, "lr": state.lr, "decay": state.decay, "interval": state.interval,
            "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps,
        },
        "extra": extra or {},
    }
    header = json.dumps(meta, sort_keys=True).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", VERSION, len(header)))
            fh.write(header)
            for _, a in blocks:
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    except OSError as exc:
        raise IoFault(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path, manifold=None) -> Checkpoint:
    """Read a checkpoint; with ``manifold`` given, refuse one trained elsewhere."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFault(f"cannot read checkpoint {path}: {exc}") from exc
    if not raw.startswith(MAGIC):
        raise SchemaMismatch("not a geodesica checkpoint (bad magic header)")
    pos = len(MAGIC)
    try:
        version, hlen = struct.unpack_from("<IQ", raw, pos)
        pos += struct.calcsize("<IQ")
        meta = json.loads(raw[pos : pos + hlen].decode())
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaMismatch(f"corrupt checkpoint header: {exc}") from exc
    if version != VERSION:
        raise SchemaMismatch(f"unsupported checkpoint version {version}")
    pos += hlen
    arrays = {}
    try:
        for name, shape in meta["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            nbytes = 8 * count
            if pos + nbytes > len(raw):
                raise SchemaMismatch("checkpoint truncated")
            arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).astype(float)
            pos += nbytes
        arch = meta["architecture"]
    except KeyError as exc:
        raise SchemaMismatch(f"missing checkpoint field {exc}") from exc
    if pos != len(raw):
        raise SchemaMismatch("trailing bytes in checkpoint")
    pnames = [k for k, _ in meta["arrays"] if k != "fourier" and not k.startswith(("m.", "v."))]
    params = MlpParameters(
        {k: arrays[k] for k in pnames}, arch["input_dim"], arch["width"], arch["depth"],
        arrays.get("fourier"), arch.get("activation", "tanh"),
    )
    state = None
    if meta["optimizer"] is not None:
        o = meta["optimizer"]
        state = OptimizerState(
            o["step"], {k: arrays["m." + k] for k in pnames}, {k: arrays["v." + k] for k in pnames},
            o["lr"], o["decay"], o["interval"], o["beta1"], o["beta2"], o["eps"],
        )
    bounds = (np.asarray(meta["bounds"][0]), np.asarray(meta["bounds"][1]))
    ckpt = Checkpoint(params, state, meta["manifold_id"], bounds, meta["augmentation_kind"], meta["extra"])
    if manifold is not None:
        if ckpt.manifold_id != manifold.ident:
            raise ManifoldMismatch(
                f"checkpoint trained on {ckpt.manifold_id!r}, requested {manifold.ident!r}"
            )
        if not (np.array_equal(bounds[0], manifold.bounds_low) and np.array_equal(bounds[1], manifold.bounds_high)):
            raise ManifoldMismatch("checkpoint bounds differ from the manifold's bounds")
    return ckpt

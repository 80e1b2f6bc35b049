"""Small numpy multilayer perceptrons with a hand-written reverse pass.

Every network in the package (denoisers, critics, classifiers, inverse
dynamics) is an :class:`MlpSpec` plus a parameter dictionary.  Parameters
live in a plain ``dict[str, np.ndarray]`` whose keys are kept in sorted
order; that order is also the on-disk order of the checkpoint blob.

Three layouts are supported by flags rather than separate classes:

* plain MLP (dense, activation, dense, ...),
* layernorm + residual + dropout blocks (``use_layernorm=True``),
* input skip, which re-concatenates the raw input before every layer
  after the first (``input_skip=True``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, NumericError

LN_EPS = 1e-5
ParamSet = dict  # name -> float64 array, sorted by name

_CKPT_FORMAT = "diffkit.params"


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_widths: tuple[int, ...] = (256, 256)
    output_dim: int = 1
    activation: str = "silu"
    use_layernorm: bool = False
    dropout_rate: float = 0.0
    input_skip: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1 or self.output_dim < 1 or any(w < 1 for w in self.hidden_widths):
            raise DimensionError(f"all widths must be >= 1, got {self}")
        if self.activation not in ("relu", "silu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        prev = self.input_dim
        for i, width in enumerate(self.hidden_widths):
            fan_in = prev + (self.input_dim if self.input_skip and i > 0 else 0)
            shapes[f"h{i:02d}.w"] = (fan_in, width)
            shapes[f"h{i:02d}.b"] = (width,)
            if self.use_layernorm:
                shapes[f"h{i:02d}.ln_g"] = (width,)
                shapes[f"h{i:02d}.ln_b"] = (width,)
            prev = width
        fan_in = prev + (self.input_dim if self.input_skip and self.hidden_widths else 0)
        shapes["out.w"] = (fan_in, self.output_dim)
        shapes["out.b"] = (self.output_dim,)
        return dict(sorted(shapes.items()))

    def n_params(self) -> int:
        return int(sum(np.prod(s) for s in self.shapes().values()))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "output_dim": self.output_dim,
            "activation": self.activation,
            "use_layernorm": self.use_layernorm,
            "dropout_rate": self.dropout_rate,
            "input_skip": self.input_skip,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(**{**d, "hidden_widths": tuple(d["hidden_widths"])})


def init_params(spec: MlpSpec, rng: np.random.Generator) -> ParamSet:
    """Fan-in scaled uniform initialisation; layernorm gains start at one."""
    params = {}
    for name, shape in spec.shapes().items():
        if name.endswith(".ln_g"):
            params[name] = np.ones(shape)
        elif name.endswith(".ln_b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = spec.shapes()[name[:-1] + "w"][0]
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def zeros_like(params: ParamSet) -> ParamSet:
    return {k: np.zeros_like(v) for k, v in params.items()}


def copy_params(params: ParamSet) -> ParamSet:
    return {k: v.copy() for k, v in params.items()}


def check_params(spec: MlpSpec, params: ParamSet) -> None:
    expected = spec.shapes()
    if list(expected) != sorted(params):
        raise DimensionError(f"parameter names {sorted(params)} do not match spec {list(expected)}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise DimensionError(f"{name}: expected shape {shape}, got {params[name].shape}")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form: no overflow for large |z|
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _activation(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z * _sigmoid(z)


def _activation_grad(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def _as_matrix(spec: MlpSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimensionError(f"expected input of shape (n, {spec.input_dim}), got {x.shape}")
    return x


def mlp_forward(
    spec: MlpSpec,
    params: ParamSet,
    x,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    return_cache: bool = False,
):
    """Evaluate the network on a batch ``x`` of shape ``(n, input_dim)``.

    Dropout is only active with ``train_mode`` and then needs ``rng``.  With
    ``return_cache`` the intermediate activations needed by :func:`backprop`
    are returned as a second value.
    """
    x = _as_matrix(spec, x)
    use_dropout = train_mode and spec.dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ValueError("dropout in train mode needs an rng")
    layers = []
    h = x
    for i in range(len(spec.hidden_widths)):
        key = f"h{i:02d}"
        inp = np.concatenate([h, x], axis=1) if spec.input_skip and i > 0 else h
        z = inp @ params[key + ".w"] + params[key + ".b"]
        layer = {"inp": inp}
        if spec.use_layernorm:
            mu = z.mean(axis=1, keepdims=True)
            inv = 1.0 / np.sqrt(z.var(axis=1, keepdims=True) + LN_EPS)
            zhat = (z - mu) * inv
            layer["zhat"], layer["inv"] = zhat, inv
            z = zhat * params[key + ".ln_g"] + params[key + ".ln_b"]
        layer["pre"] = z
        a = _activation(spec.activation, z)
        if use_dropout:
            keep = (rng.random(a.shape) >= spec.dropout_rate) / (1.0 - spec.dropout_rate)
            a = a * keep
            layer["keep"] = keep
        residual = spec.use_layernorm and i > 0 and a.shape == h.shape
        layer["residual"] = residual
        h = h + a if residual else a
        layers.append(layer)
    inp = np.concatenate([h, x], axis=1) if spec.input_skip and spec.hidden_widths else h
    out = inp @ params["out.w"] + params["out.b"]
    if return_cache:
        return out, {"x": x, "layers": layers, "out_inp": inp, "h_dim": h.shape[1]}
    return out


def backprop(
    spec: MlpSpec,
    params: ParamSet,
    x,
    upstream_grad,
    cache: dict | None = None,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[ParamSet, np.ndarray]:
    """Gradients of ``sum(upstream_grad * mlp_forward(x))``.

    Returns ``(param_grads, input_grad)``.  Pass the ``cache`` from a
    forward call to reuse its activations (required when dropout was on,
    so the same masks are used).
    """
    if cache is None:
        _, cache = mlp_forward(spec, params, x, train_mode=train_mode, rng=rng, return_cache=True)
    x = cache["x"]
    g = np.asarray(upstream_grad, dtype=float)
    if g.shape != (x.shape[0], spec.output_dim):
        raise DimensionError(f"upstream grad shape {g.shape} != output shape {(x.shape[0], spec.output_dim)}")
    grads = {}
    grads["out.w"] = cache["out_inp"].T @ g
    grads["out.b"] = g.sum(axis=0)
    g_inp = g @ params["out.w"].T
    g_x = np.zeros_like(x)
    h_dim = cache["h_dim"]
    if spec.input_skip and spec.hidden_widths:
        g_h, g_x = g_inp[:, :h_dim], g_x + g_inp[:, h_dim:]
    else:
        g_h = g_inp
    for i in reversed(range(len(spec.hidden_widths))):
        key = f"h{i:02d}"
        layer = cache["layers"][i]
        g_a = g_h * layer["keep"] if "keep" in layer else g_h
        g_z = g_a * _activation_grad(spec.activation, layer["pre"])
        if spec.use_layernorm:
            zhat = layer["zhat"]
            grads[key + ".ln_g"] = (g_z * zhat).sum(axis=0)
            grads[key + ".ln_b"] = g_z.sum(axis=0)
            g_zhat = g_z * params[key + ".ln_g"]
            g_z = layer["inv"] * (
                g_zhat
                - g_zhat.mean(axis=1, keepdims=True)
                - zhat * (g_zhat * zhat).mean(axis=1, keepdims=True)
            )
        grads[key + ".w"] = layer["inp"].T @ g_z
        grads[key + ".b"] = g_z.sum(axis=0)
        g_inp = g_z @ params[key + ".w"].T
        if spec.input_skip and i > 0:
            prev_dim = spec.hidden_widths[i - 1]
            g_prev, g_x = g_inp[:, :prev_dim], g_x + g_inp[:, prev_dim:]
        else:
            g_prev = g_inp
        if layer["residual"]:
            g_prev = g_prev + g_h
        g_h = g_prev
    g_x = g_x + g_h
    return dict(sorted(grads.items())), g_x


# ---------------------------------------------------------------------------
# Optimisation


@dataclass
class AdamState:
    m: ParamSet
    v: ParamSet
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: ParamSet, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        return cls(zeros_like(params), zeros_like(params), 0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, params: ParamSet, grads: ParamSet) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    if sorted(grads) != sorted(params):
        raise DimensionError("gradient names do not match parameters")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise DimensionError(f"{name}: grad shape {g.shape} != param shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**step
    corr2 = 1.0 - b2**step
    new_params, m, v = {}, {}, {}
    for name in params:
        g = grads[name]
        m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        update = (m[name] / corr1) / (np.sqrt(v[name] / corr2) + state.eps)
        new_params[name] = params[name] - state.lr * update
    return new_params, AdamState(m, v, step, state.lr, b1, b2, state.eps)


def clip_grad_norm(grads: ParamSet, max_norm: float) -> ParamSet:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


def add_grads(a: ParamSet, b: ParamSet, scale: float = 1.0) -> ParamSet:
    return {k: a[k] + scale * b[k] for k in a}


@dataclass
class EmaState:
    decay: float
    shadow: ParamSet = field(repr=False)

    @classmethod
    def from_params(cls, decay: float, params: ParamSet) -> "EmaState":
        if not 0.0 <= decay <= 1.0:
            raise ValueError("EMA decay must lie in [0, 1]")
        return cls(decay, copy_params(params))


def ema_update(ema: EmaState, params: ParamSet) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * params, elementwise."""
    d = ema.decay
    shadow = {}
    for name, s in ema.shadow.items():
        if s.shape != params[name].shape:
            raise DimensionError(f"EMA shadow {name} has shape {s.shape}, params {params[name].shape}")
        shadow[name] = d * s + (1.0 - d) * params[name]
    return EmaState(d, shadow)


def sinusoidal_time_embed(t, dim: int, max_freq: float = 100.0) -> np.ndarray:
    """Interleaved ``[sin(f0 t), cos(f0 t), sin(f1 t), ...]`` features.

    Frequencies are geometrically spaced between 1 and ``max_freq``.  A
    scalar ``t`` gives a vector of length ``dim``; an array of shape
    ``(n,)`` gives ``(n, dim)``.
    """
    if dim < 2 or dim % 2:
        raise ValueError("embedding dim must be an even number >= 2")
    half = dim // 2
    freqs = np.geomspace(1.0, max_freq, half) if half > 1 else np.ones(1)
    t_arr = np.asarray(t, dtype=float)
    angles = t_arr[..., None] * freqs
    out = np.empty(t_arr.shape + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


# ---------------------------------------------------------------------------
# Checkpoints: one JSON header line, then little-endian float32 sections.


def save_params(path, params: ParamSet, meta: dict | None = None) -> None:
    names = sorted(params)
    sections, offset = [], 0
    for name in names:
        arr = np.asarray(params[name])
        nbytes = int(arr.size) * 4
        sections.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "format": _CKPT_FORMAT,
        "version": 1,
        "dtype": "<f4",
        "sections": sections,
        "blob_bytes": offset,
        "meta": meta or {},
    }
    blob = b"".join(np.ascontiguousarray(params[n], dtype="<f4").tobytes() for n in names)
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        f.write(blob)


def load_params(path) -> tuple[ParamSet, dict]:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise FormatError(f"{path}: missing header terminator (offset {len(raw)})")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header at offset 0: {exc}") from None
    if header.get("format") != _CKPT_FORMAT:
        raise FormatError(f"{path}: not a parameter checkpoint (offset 0)")
    start = newline + 1
    blob = raw[start:]
    if len(blob) != header["blob_bytes"]:
        raise FormatError(
            f"{path}: expected {header['blob_bytes']} blob bytes at offset {start}, found {len(blob)}"
        )
    params = {}
    for sec in header["sections"]:
        count = int(np.prod(sec["shape"])) if sec["shape"] else 1
        if sec["nbytes"] != 4 * count or sec["offset"] + sec["nbytes"] > len(blob):
            raise FormatError(f"{path}: section {sec['name']} inconsistent at offset {start + sec['offset']}")
        chunk = np.frombuffer(blob, dtype="<f4", count=count, offset=sec["offset"])
        params[sec["name"]] = chunk.astype(float).reshape(sec["shape"])
    return dict(sorted(params.items())), header.get("meta", {})


def pack(groups: dict[str, ParamSet]) -> ParamSet:
    """Flatten several named parameter sets into one, prefixing ``group/``."""
    flat = {f"{g}/{k}": v for g, ps in groups.items() for k, v in ps.items()}
    return dict(sorted(flat.items()))


def unpack(flat: ParamSet) -> dict[str, ParamSet]:
    groups: dict[str, ParamSet] = {}
    for key, v in flat.items():
        g, name = key.split("/", 1)
        groups.setdefault(g, {})[name] = v
    return {g: dict(sorted(ps.items())) for g, ps in groups.items()}


@dataclass
class Mlp:
    """A spec bundled with its parameters, for networks that are not denoisers."""

    spec: MlpSpec
    params: ParamSet = field(repr=False)

    @classmethod
    def create(cls, input_dim: int, hidden_widths, output_dim: int, rng: np.random.Generator, **kw) -> "Mlp":
        spec = MlpSpec(input_dim, tuple(hidden_widths), output_dim, **kw)
        return cls(spec, init_params(spec, rng))

    def __call__(self, x, params: ParamSet | None = None) -> np.ndarray:
        return mlp_forward(self.spec, self.params if params is None else params, x)

    def forward(self, x, params: ParamSet | None = None, train_mode: bool = False, rng=None):
        return mlp_forward(
            self.spec, self.params if params is None else params, x, train_mode, rng, return_cache=True
        )

    def vjp(self, cache: dict, upstream, params: ParamSet | None = None) -> tuple[ParamSet, np.ndarray]:
        return backprop(self.spec, self.params if params is None else params, cache["x"], upstream, cache=cache)

    def copy(self) -> "Mlp":
        return Mlp(self.spec, copy_params(self.params))

"""Gated multimodal network with hand-derived gradients.

Input rows use the assembled column layout ``[static | dynamic | baseline |
trend | tslm]`` where every block except ``static`` has one column per dynamic
variable. All columns except the TSLM block are expected to be standardized;
TSLM columns are raw hours since the last measurement.

The EHR encoder sees ``[static ; dynamic * exp(-softplus(rho) * dt) ; dt ;
baseline ; trend]`` with ``dt = tslm / 24``. Fusion variants:

* ``EHR_ONLY``   head(h_e)
* ``CXR_ONLY``   head(h_c)
* ``CONCAT``     head(dense([h_e ; h_c]))
* ``ATTENTION``  head(w_e h_e + w_c h_c), ``(w_e, w_c) = softmax(a.h_e, a.h_c)``
* ``GATED``      head((1 - g) h_e + g h_c), ``g = sigmoid(W [h_e ; h_c] + b)``
"""

from __future__ import annotations

import enum
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .schema import SCHEMA_VERSION

RECENCY_SCALE_HOURS = 24.0
CHECKPOINT_MAGIC = b"VGM1"


class Variant(str, enum.Enum):
    EHR_ONLY = "ehr"
    CXR_ONLY = "cxr"
    CONCAT = "concat"
    ATTENTION = "attention"
    GATED = "gated"

    @property
    def uses_ehr(self) -> bool:
        return self is not Variant.CXR_ONLY

    @property
    def uses_cxr(self) -> bool:
        return self is not Variant.EHR_ONLY


class Activation(str, enum.Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    IDENTITY = "identity"


_ACT_CODES = {Activation.RELU: 0, Activation.SIGMOID: 1, Activation.IDENTITY: 2}


class MissingModality(ValueError):
    pass


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x):
    return np.logaddexp(0.0, x)


def softmax2(s_e, s_c):
    """Two-way softmax; returns ``(w_e, w_c)``."""
    w_c = sigmoid(np.asarray(s_c, dtype=float) - np.asarray(s_e, dtype=float))
    return 1.0 - w_c, w_c


def _act(a: np.ndarray, kind: Activation) -> np.ndarray:
    if kind is Activation.RELU:
        return np.maximum(a, 0.0)
    if kind is Activation.SIGMOID:
        return sigmoid(a)
    return a


def _act_grad(a: np.ndarray, out: np.ndarray, kind: Activation) -> np.ndarray:
    if kind is Activation.RELU:
        return (a > 0).astype(a.dtype)
    if kind is Activation.SIGMOID:
        return out * (1.0 - out)
    return np.ones_like(a)


@dataclass
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: Activation = Activation.RELU

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a = x @ self.weight.T + self.bias
        return a, _act(a, self.activation)


@dataclass
class ModelParams:
    variant: Variant
    n_static: int
    n_dynamic: int
    rho: np.ndarray
    ehr_encoder: list[Dense]
    projection: list[Dense]
    gate_weight: np.ndarray  # (2d,)
    gate_bias: np.ndarray  # (1,)
    attention_weight: np.ndarray  # (d,)
    concat: Dense
    head: Dense

    @property
    def latent_dim(self) -> int:
        return self.ehr_encoder[-1].n_out

    @property
    def input_width(self) -> int:
        return self.n_static + 4 * self.n_dynamic

    @property
    def embedding_dim(self) -> int:
        return self.projection[0].n_in

    def tensors(self) -> "OrderedDict[str, np.ndarray]":
        """Learnable tensors by name, as live views for in-place updates."""
        t: OrderedDict[str, np.ndarray] = OrderedDict()
        t["tslm.rho"] = self.rho
        for name, layers in (("ehr_encoder", self.ehr_encoder), ("projection", self.projection)):
            for i, layer in enumerate(layers):
                t[f"{name}.{i}.weight"] = layer.weight
                t[f"{name}.{i}.bias"] = layer.bias
        t["gate.weight"] = self.gate_weight
        t["gate.bias"] = self.gate_bias
        t["attention.weight"] = self.attention_weight
        t["concat.weight"] = self.concat.weight
        t["concat.bias"] = self.concat.bias
        t["head.weight"] = self.head.weight
        t["head.bias"] = self.head.bias
        return t

    def copy(self) -> "ModelParams":
        dup = lambda d: Dense(d.weight.copy(), d.bias.copy(), d.activation)  # noqa: E731
        return ModelParams(
            self.variant,
            self.n_static,
            self.n_dynamic,
            self.rho.copy(),
            [dup(d) for d in self.ehr_encoder],
            [dup(d) for d in self.projection],
            self.gate_weight.copy(),
            self.gate_bias.copy(),
            self.attention_weight.copy(),
            dup(self.concat),
            dup(self.head),
        )

    def with_variant(self, variant: Variant) -> "ModelParams":
        p = self.copy()
        p.variant = Variant(variant)
        return p


def _uniform_dense(rng, n_in, n_out, act) -> Dense:
    bound = 1.0 / np.sqrt(n_in)
    return Dense(
        rng.uniform(-bound, bound, size=(n_out, n_in)),
        rng.uniform(-bound, bound, size=n_out),
        act,
    )


def init_params(
    variant: Variant | str,
    n_static: int,
    n_dynamic: int,
    embedding_dim: int,
    hidden_dim: int = 64,
    latent_dim: int = 64,
    encoder_layers: int = 2,
    projection_layers: int = 2,
    seed: int = 0,
) -> ModelParams:
    """Fan-in scaled uniform initialization.

    ``encoder_layers``/``projection_layers`` count hidden ReLU layers; each MLP
    ends with a linear map to the shared ``latent_dim`` space.
    """
    rng = np.random.default_rng(seed)
    n_in = n_static + 4 * n_dynamic

    def mlp(first: int, depth: int) -> list[Dense]:
        dims = [first] + [hidden_dim] * depth
        layers = [_uniform_dense(rng, a, b, Activation.RELU) for a, b in zip(dims, dims[1:])]
        layers.append(_uniform_dense(rng, dims[-1], latent_dim, Activation.IDENTITY))
        return layers

    enc = mlp(n_in, encoder_layers)
    proj = mlp(embedding_dim, projection_layers)
    gbound = 1.0 / np.sqrt(2 * latent_dim)
    return ModelParams(
        variant=Variant(variant),
        n_static=n_static,
        n_dynamic=n_dynamic,
        rho=np.zeros(n_dynamic),
        ehr_encoder=enc,
        projection=proj,
        gate_weight=rng.uniform(-gbound, gbound, size=2 * latent_dim),
        gate_bias=np.zeros(1),
        attention_weight=rng.uniform(-gbound, gbound, size=latent_dim),
        concat=_uniform_dense(rng, 2 * latent_dim, latent_dim, Activation.RELU),
        head=_uniform_dense(rng, latent_dim, 1, Activation.SIGMOID),
    )


# ---------------------------------------------------------------------------
# forward


def tslm_transform(x_d: np.ndarray, delta_t: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Decay dynamic values by staleness and append normalized recency.

    ``delta_t`` is in hours; returns ``[x_d * exp(-softplus(rho) * dt) ; dt]``
    with ``dt = delta_t / 24`` along the last axis.
    """
    delta_t = np.asarray(delta_t, dtype=float)
    if np.any(delta_t < 0):
        raise ValueError("time since last measurement must be non-negative")
    dt = delta_t / RECENCY_SCALE_HOURS
    return np.concatenate([x_d * np.exp(-softplus(rho) * dt), dt], axis=-1)


@dataclass
class _MlpCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    out: list[np.ndarray] = field(default_factory=list)
    masks: list[Optional[np.ndarray]] = field(default_factory=list)


def _mlp_forward(layers, x, dropout, rng) -> tuple[np.ndarray, _MlpCache]:
    cache = _MlpCache()
    h = x
    for i, layer in enumerate(layers):
        cache.inputs.append(h)
        a, o = layer(h)
        cache.pre.append(a)
        cache.out.append(o)
        mask = None
        if dropout > 0 and rng is not None and i < len(layers) - 1:
            mask = (rng.random(o.shape) >= dropout) / (1.0 - dropout)
            o = o * mask
        cache.masks.append(mask)
        h = o
    return h, cache


def _mlp_backward(layers, cache: _MlpCache, dout, grads, prefix) -> np.ndarray:
    d = dout
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        if cache.masks[i] is not None:
            d = d * cache.masks[i]
        da = d * _act_grad(cache.pre[i], cache.out[i], layer.activation)
        grads[f"{prefix}.{i}.weight"] = da.T @ cache.inputs[i]
        grads[f"{prefix}.{i}.bias"] = da.sum(0)
        d = da @ layer.weight
    return d


@dataclass
class Forward:
    prob: np.ndarray
    logit: np.ndarray
    gate: Optional[np.ndarray]
    h: np.ndarray
    h_e: Optional[np.ndarray] = None
    h_c: Optional[np.ndarray] = None
    # backward bookkeeping
    x: Optional[np.ndarray] = None
    decay: Optional[np.ndarray] = None
    dt: Optional[np.ndarray] = None
    enc: Optional[_MlpCache] = None
    proj: Optional[_MlpCache] = None
    concat_pre: Optional[np.ndarray] = None
    forced_gate: bool = False


def ehr_input(params: ModelParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    s, n = params.n_static, params.n_dynamic
    if x.ndim != 2 or x.shape[1] != params.input_width:
        raise ValueError(f"EHR input width {x.shape[-1]}, expected {params.input_width}")
    dt = x[:, s + 3 * n :] / RECENCY_SCALE_HOURS
    if np.any(dt < 0):
        raise ValueError("time since last measurement must be non-negative")
    decay = np.exp(-softplus(params.rho) * dt)
    u = np.concatenate([x[:, :s], x[:, s : s + n] * decay, dt, x[:, s + n : s + 3 * n]], axis=1)
    return u, decay, dt


def encode_ehr(x: np.ndarray, params: ModelParams) -> np.ndarray:
    u, _, _ = ehr_input(params, np.atleast_2d(np.asarray(x, dtype=float)))
    h, _ = _mlp_forward(params.ehr_encoder, u, 0.0, None)
    return h


def project_image(z: np.ndarray, params: ModelParams) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[1] != params.embedding_dim:
        raise ValueError(f"embedding width {z.shape[1]}, expected {params.embedding_dim}")
    h, _ = _mlp_forward(params.projection, z, 0.0, None)
    return h


def gate_and_fuse(h_e, h_c, gate_weight, gate_bias) -> tuple[np.ndarray, np.ndarray]:
    """Scalar gate per row and the convex combination ``(1 - g) h_e + g h_c``."""
    h_e = np.atleast_2d(h_e)
    h_c = np.atleast_2d(h_c)
    if h_e.shape != h_c.shape or gate_weight.size != 2 * h_e.shape[1]:
        raise ValueError("gate inputs must share the latent dimension")
    g = sigmoid(np.concatenate([h_e, h_c], 1) @ gate_weight + np.asarray(gate_bias).reshape(()))
    return (1.0 - g)[:, None] * h_e + g[:, None] * h_c, g


def attention_fuse(h_e, h_c, attention_weight) -> tuple[np.ndarray, np.ndarray]:
    """Softmax over per-modality scores from a shared scoring vector; returns ``(h, w_c)``."""
    h_e = np.atleast_2d(h_e)
    h_c = np.atleast_2d(h_c)
    if h_e.shape != h_c.shape or attention_weight.size != h_e.shape[1]:
        raise ValueError("attention inputs must share the latent dimension")
    w_e, w_c = softmax2(h_e @ attention_weight, h_c @ attention_weight)
    return w_e[:, None] * h_e + w_c[:, None] * h_c, w_c


def forward(
    params: ModelParams,
    x: Optional[np.ndarray],
    z: Optional[np.ndarray],
    *,
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    force_gate: Optional[float] = None,
) -> Forward:
    v = params.variant
    if v.uses_ehr and x is None:
        raise MissingModality(f"{v.value} requires EHR input")
    if v.uses_cxr and z is None:
        raise MissingModality(f"{v.value} requires an image embedding")

    f = Forward(prob=None, logit=None, gate=None, h=None)  # type: ignore[arg-type]
    if v.uses_ehr:
        x = np.asarray(x, dtype=float)
        u, f.decay, f.dt = ehr_input(params, x)
        f.x = x
        f.h_e, f.enc = _mlp_forward(params.ehr_encoder, u, dropout, rng)
    if v.uses_cxr:
        z = np.asarray(z, dtype=float)
        if z.ndim != 2 or z.shape[1] != params.embedding_dim:
            raise ValueError(f"embedding width {z.shape[-1]}, expected {params.embedding_dim}")
        f.h_c, f.proj = _mlp_forward(params.projection, z, dropout, rng)
    if v.uses_ehr and v.uses_cxr and f.h_e.shape[0] != f.h_c.shape[0]:
        raise ValueError("EHR and image batches differ in length")

    if v is Variant.EHR_ONLY:
        f.h = f.h_e
    elif v is Variant.CXR_ONLY:
        f.h = f.h_c
    elif v is Variant.CONCAT:
        f.concat_pre, f.h = params.concat(np.concatenate([f.h_e, f.h_c], 1))
    elif v is Variant.ATTENTION:
        f.h, f.gate = attention_fuse(f.h_e, f.h_c, params.attention_weight)
    else:
        if force_gate is not None:
            f.gate = np.full(f.h_e.shape[0], float(force_gate))
            f.h = (1.0 - f.gate)[:, None] * f.h_e + f.gate[:, None] * f.h_c
            f.forced_gate = True
        else:
            f.h, f.gate = gate_and_fuse(f.h_e, f.h_c, params.gate_weight, params.gate_bias)

    f.logit = (f.h @ params.head.weight.T + params.head.bias)[:, 0]
    f.prob = sigmoid(f.logit)
    return f


def predict(
    params: ModelParams, x: Optional[np.ndarray], z: Optional[np.ndarray] = None, **kw
) -> np.ndarray:
    """Probability of ventilation within 24 h for each row."""
    if x is not None:
        x = np.atleast_2d(x)
    if z is not None:
        z = np.atleast_2d(z)
    return forward(params, x, z, **kw).prob


# ---------------------------------------------------------------------------
# loss and backward

EPS = 1e-12


def bce_loss(p, y, pos_weight: float = 1.0) -> float:
    """Mean binary cross-entropy with probabilities clamped to ``[eps, 1 - eps]``."""
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    if p.shape != y.shape:
        raise ValueError("probabilities and labels differ in length")
    p = np.clip(p, EPS, 1.0 - EPS)
    return float(np.mean(-(pos_weight * y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def l2_penalty(params: ModelParams) -> float:
    return 0.5 * sum(float(np.sum(w * w)) for k, w in params.tensors().items() if k.endswith("weight"))


def backward(
    params: ModelParams,
    f: Forward,
    y: np.ndarray,
    *,
    pos_weight: float = 1.0,
    l2: float = 0.0,
) -> "OrderedDict[str, np.ndarray]":
    """Gradients of ``bce_loss + l2 * l2_penalty`` with respect to every tensor.

    Tensors disconnected from the variant's graph get zero gradients.
    """
    v = params.variant
    y = np.asarray(y, dtype=float)
    n = y.size
    grads: OrderedDict[str, np.ndarray] = OrderedDict(
        (k, np.zeros_like(t)) for k, t in params.tensors().items()
    )

    # d loss / d logit for the weighted cross-entropy
    dlogit = (pos_weight * y * (f.prob - 1.0) + (1.0 - y) * f.prob) / n
    grads["head.weight"] = (dlogit @ f.h)[None, :]
    grads["head.bias"] = np.array([dlogit.sum()])
    dh = dlogit[:, None] * params.head.weight[0][None, :]

    dh_e = dh_c = None
    d = params.latent_dim
    if v is Variant.EHR_ONLY:
        dh_e = dh
    elif v is Variant.CXR_ONLY:
        dh_c = dh
    elif v is Variant.CONCAT:
        da = dh * _act_grad(f.concat_pre, f.h, params.concat.activation)
        cat = np.concatenate([f.h_e, f.h_c], 1)
        grads["concat.weight"] = da.T @ cat
        grads["concat.bias"] = da.sum(0)
        dcat = da @ params.concat.weight
        dh_e, dh_c = dcat[:, :d], dcat[:, d:]
    else:
        g = f.gate
        dh_e = (1.0 - g)[:, None] * dh
        dh_c = g[:, None] * dh
        if not f.forced_gate:
            dg = np.sum((f.h_c - f.h_e) * dh, axis=1)
            dlg = dg * g * (1.0 - g)
            if v is Variant.GATED:
                grads["gate.weight"] = np.concatenate([f.h_e, f.h_c], 1).T @ dlg
                grads["gate.bias"] = np.array([dlg.sum()])
                dh_e = dh_e + dlg[:, None] * params.gate_weight[None, :d]
                dh_c = dh_c + dlg[:, None] * params.gate_weight[None, d:]
            else:
                # w_c = sigmoid(a.h_c - a.h_e)
                a = params.attention_weight
                grads["attention.weight"] = f.h_c.T @ dlg - f.h_e.T @ dlg
                dh_e = dh_e - dlg[:, None] * a[None, :]
                dh_c = dh_c + dlg[:, None] * a[None, :]

    if dh_e is not None:
        du = _mlp_backward(params.ehr_encoder, f.enc, dh_e, grads, "ehr_encoder")
        s, nd = params.n_static, params.n_dynamic
        ddec = du[:, s : s + nd]
        xd = f.x[:, s : s + nd]
        # d/d rho of x * exp(-softplus(rho) dt) = -x dt exp(.) sigmoid(rho)
        grads["tslm.rho"] = -np.sum(ddec * xd * f.decay * f.dt, axis=0) * sigmoid(params.rho)
    if dh_c is not None:
        _mlp_backward(params.projection, f.proj, dh_c, grads, "projection")

    if l2:
        for k, w in params.tensors().items():
            if k.endswith("weight"):
                grads[k] = grads[k] + l2 * w
    return grads


def loss_and_grad(
    params: ModelParams,
    x,
    z,
    y,
    *,
    pos_weight: float = 1.0,
    l2: float = 0.0,
    dropout: float = 0.0,
    rng=None,
):
    f = forward(params, x, z, dropout=dropout, rng=rng)
    loss = bce_loss(f.prob, y, pos_weight) + (l2 * l2_penalty(params) if l2 else 0.0)
    return loss, backward(params, f, y, pos_weight=pos_weight, l2=l2)


# ---------------------------------------------------------------------------
# checkpoint (VGM1)


class CheckpointError(ValueError):
    pass


def _tensor_record(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return b"".join(
        [
            struct.pack("<H", len(nb)),
            nb,
            struct.pack("<B", arr.ndim),
            struct.pack(f"<{arr.ndim}I", *arr.shape),
            arr.tobytes(),
        ]
    )


def checkpoint_bytes(params: ModelParams, extras: Optional[dict[str, np.ndarray]] = None) -> bytes:
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    tensors["meta.n_static"] = np.array([params.n_static], dtype=float)
    tensors["meta.n_dynamic"] = np.array([params.n_dynamic], dtype=float)
    for name, layers in (("ehr_encoder", params.ehr_encoder), ("projection", params.projection)):
        for i, layer in enumerate(layers):
            tensors[f"{name}.{i}.activation"] = np.array([_ACT_CODES[layer.activation]], dtype=float)
    tensors["concat.activation"] = np.array([_ACT_CODES[params.concat.activation]], dtype=float)
    tensors["head.activation"] = np.array([_ACT_CODES[params.head.activation]], dtype=float)
    tensors.update(params.tensors())
    for k, arr in (extras or {}).items():
        tensors[f"extra.{k}"] = np.asarray(arr, dtype=float)
    tag = params.variant.value.encode("ascii")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<H", len(tag)),
        tag,
        struct.pack("<II", SCHEMA_VERSION, len(tensors)),
    ]
    parts += [_tensor_record(k, v) for k, v in tensors.items()]
    return b"".join(parts)


def save_checkpoint(path, params: ModelParams, extras: Optional[dict[str, np.ndarray]] = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, extras))


def load_checkpoint(path) -> tuple[ModelParams, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    try:
        (tlen,) = struct.unpack_from("<H", raw, 4)
        off = 6
        variant = Variant(raw[off : off + tlen].decode("ascii"))
        off += tlen
        version, count = struct.unpack_from("<II", raw, off)
        off += 8
        if version != SCHEMA_VERSION:
            raise CheckpointError(f"schema version {version}, expected {SCHEMA_VERSION}")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 8 * size > len(raw):
                raise CheckpointError("truncated checkpoint")
            tensors[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape).copy()
            off += 8 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if off != len(raw):
        raise CheckpointError("trailing bytes in checkpoint")

    codes = {v: k for k, v in _ACT_CODES.items()}

    def layers(prefix: str) -> list[Dense]:
        out = []
        i = 0
        while f"{prefix}.{i}.weight" in tensors:
            out.append(
                Dense(
                    tensors[f"{prefix}.{i}.weight"],
                    tensors[f"{prefix}.{i}.bias"],
                    codes[int(tensors[f"{prefix}.{i}.activation"][0])],
                )
            )
            i += 1
        return out

    params = ModelParams(
        variant=variant,
        n_static=int(tensors["meta.n_static"][0]),
        n_dynamic=int(tensors["meta.n_dynamic"][0]),
        rho=tensors["tslm.rho"],
        ehr_encoder=layers("ehr_encoder"),
        projection=layers("projection"),
        gate_weight=tensors["gate.weight"],
        gate_bias=tensors["gate.bias"],
        attention_weight=tensors["attention.weight"],
        concat=Dense(
            tensors["concat.weight"], tensors["concat.bias"], codes[int(tensors["concat.activation"][0])]
        ),
        head=Dense(tensors["head.weight"], tensors["head.bias"], codes[int(tensors["head.activation"][0])]),
    )
    extras = {k[len("extra.") :]: v for k, v in tensors.items() if k.startswith("extra.")}
    return params, extras

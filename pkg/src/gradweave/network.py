"""Two-stream toy encoder/decoder with a frozen shared backbone.

Both modalities run through the same frozen backbone; each has its own
adapter stack (``theta_R`` / ``theta_T``) inserted residually after every
backbone layer. One trainable decoder (``theta_D``) decodes the RGB feature,
the thermal feature and their sum.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from gradweave import autodiff as ad
from gradweave.adapters import (
    AdapterConfig,
    AdapterParams,
    decoupled_adapter_forward,
    init_adapter,
    vanilla_adapter_forward,
)
from gradweave.autodiff import Tensor

GROUPS = ("theta_R", "theta_T", "theta_D")
STREAMS = ("F", "R", "T")
ADAPTER_KINDS = ("vanilla", "decoupled")


@dataclass(frozen=True)
class ModelConfig:
    H: int = 32
    W: int = 32
    patch: int = 4
    d: int = 16
    n_layers: int = 2
    hidden: int = 16
    adapter_kind: str = "decoupled"
    d_hat: int = 8
    alpha_for: float = 0.45
    alpha_back: float = 0.35
    beta: float = 0.1

    def __post_init__(self):
        if self.adapter_kind not in ADAPTER_KINDS:
            raise ValueError(f"adapter_kind must be one of {ADAPTER_KINDS}")
        if self.H % self.patch or self.W % self.patch:
            raise ValueError("image size must be a multiple of the patch size")
        self.adapter  # validates the adapter constants

    @property
    def adapter(self) -> AdapterConfig:
        return AdapterConfig(self.d, self.d_hat, self.alpha_for, self.alpha_back, self.beta)

    @property
    def tokens(self) -> int:
        return (self.H // self.patch) * (self.W // self.patch)


@dataclass
class Sample:
    I_R: np.ndarray
    I_T: np.ndarray
    GT: np.ndarray

    def __post_init__(self):
        if not (self.I_R.shape == self.I_T.shape == self.GT.shape):
            raise ValueError("I_R, I_T and GT must share one H x W shape")
        if not np.all((self.GT == 0) | (self.GT == 1)):
            raise ValueError("GT must be binary")


@dataclass
class StreamOutputs:
    P_R: Tensor
    P_T: Tensor
    P_F: Tensor
    F_R: Tensor
    F_T: Tensor
    trace: list = field(default_factory=list)


@dataclass
class ModelParams:
    """Frozen backbone arrays plus the three trainable groups, keyed by path."""

    config: ModelConfig
    backbone: dict[str, np.ndarray]
    params: dict[str, np.ndarray]

    def group(self, name: str) -> list[str]:
        return [k for k in self.params if k.split(".", 1)[0] == name]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: v.copy() for k, v in self.backbone.items()},
            {k: v.copy() for k, v in self.params.items()},
        )


def adapter_fields(kind: str) -> tuple[str, ...]:
    return AdapterParams.FIELDS if kind == "decoupled" else ("W_down", "W_up")


def init_model(cfg: ModelConfig, seed: int, zero_up: bool = True) -> ModelParams:
    """Deterministic initialisation; the thermal stack mirrors the RGB stack."""
    rng = np.random.default_rng(seed)
    backbone: dict[str, np.ndarray] = {}
    fan_in = cfg.patch * cfg.patch
    for layer in range(cfg.n_layers):
        backbone[f"backbone.layer{layer}.W"] = rng.normal(0.0, math.sqrt(2.0 / fan_in), (fan_in, cfg.d))
        backbone[f"backbone.layer{layer}.b"] = rng.normal(0.0, 0.1, cfg.d)
        fan_in = cfg.d

    params: dict[str, np.ndarray] = {}
    acfg = cfg.adapter
    stack = []
    for layer in range(cfg.n_layers):
        a = init_adapter(acfg, rng, zero_up=zero_up)
        if cfg.adapter_kind == "decoupled":
            stack.append({f: getattr(a, f) for f in AdapterParams.FIELDS})
        else:
            stack.append({"W_down": a.W_down_for, "W_up": a.W_up_for})
    for stream in ("R", "T"):
        for layer, entry in enumerate(stack):
            for f, v in entry.items():
                params[f"theta_{stream}.layer{layer}.{f}"] = v.copy()
    if not zero_up:
        # random-point models (gradient checks) should not be modality-symmetric
        for k in params:
            if k.startswith("theta_T"):
                params[k] = params[k] + rng.normal(0.0, 0.1, params[k].shape)

    pp = cfg.patch * cfg.patch
    params["theta_D.W1"] = rng.normal(0.0, 1.0 / math.sqrt(cfg.d), (cfg.d, cfg.hidden))
    params["theta_D.b1"] = np.zeros(cfg.hidden) if zero_up else rng.normal(0.0, 0.1, cfg.hidden)
    params["theta_D.W2"] = rng.normal(0.0, 1.0 / math.sqrt(cfg.hidden), (cfg.hidden, pp))
    params["theta_D.b2"] = np.zeros(pp) if zero_up else rng.normal(0.0, 0.1, pp)
    return ModelParams(cfg, backbone, params)


# -------------------------------------------------------------------- forward


def encode(image: np.ndarray, backbone: Mapping, adapter_stack: list[Mapping], cfg: ModelConfig, trace=None) -> Tensor:
    """Patch tokens through the frozen layers, each followed by a residual adapter."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (cfg.H, cfg.W):
        raise ValueError(f"image must be {cfg.H}x{cfg.W}, got {image.shape}")
    if len(adapter_stack) != cfg.n_layers:
        raise ValueError(f"expected {cfg.n_layers} adapters, got {len(adapter_stack)}")
    x = Tensor(ad.patchify_array(image, cfg.patch))
    for layer, adapter in enumerate(adapter_stack):
        W = _t(backbone[f"backbone.layer{layer}.W"])
        b = _t(backbone[f"backbone.layer{layer}.b"])
        x = ad.gelu(ad.add_bias(ad.matmul(x, W), b))
        if cfg.adapter_kind == "decoupled":
            delta = decoupled_adapter_forward(x, dict(adapter), cfg.adapter, trace)
        else:
            delta = vanilla_adapter_forward(x, adapter["W_down"], adapter["W_up"])
        x = ad.add(x, delta)
    return x


def decode(feature: Tensor, theta_D: Mapping, cfg: ModelConfig) -> Tensor:
    """GeLU hidden layer then a per-token map to patch pixels, reassembled to H x W."""
    if feature.shape != (cfg.tokens, cfg.d):
        raise ValueError(f"decoder expects {(cfg.tokens, cfg.d)} features, got {feature.shape}")
    h = ad.gelu(ad.add_bias(ad.matmul(feature, _t(theta_D["W1"])), _t(theta_D["b1"])))
    out = ad.add_bias(ad.matmul(h, _t(theta_D["W2"])), _t(theta_D["b2"]))
    return ad.unpatchify(out, cfg.H, cfg.W, cfg.patch)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param_tensors(model: ModelParams, values: Mapping[str, np.ndarray] | None = None, track: bool = True) -> dict[str, Tensor]:
    values = model.params if values is None else values
    if track:
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in values.items()}
    return {k: Tensor(v) for k, v in values.items()}


def _stack(tensors: Mapping[str, Tensor], group: str, cfg: ModelConfig) -> list[dict]:
    fields = adapter_fields(cfg.adapter_kind)
    return [{f: tensors[f"{group}.layer{l}.{f}"] for f in fields} for l in range(cfg.n_layers)]


def forward_all(
    sample: Sample,
    model: ModelParams,
    values: Mapping[str, np.ndarray] | None = None,
    track: bool = True,
) -> StreamOutputs:
    """RGB, thermal and fused logits through the shared decoder.

    ``values`` substitutes the trainable arrays (finite-difference probes);
    ``track=False`` skips graph recording.
    """
    cfg = model.config
    tensors = param_tensors(model, values, track)
    trace: list = []
    F_R = encode(sample.I_R, model.backbone, _stack(tensors, "theta_R", cfg), cfg, trace)
    F_T = encode(sample.I_T, model.backbone, _stack(tensors, "theta_T", cfg), cfg, trace)
    theta_D = {k.split(".", 1)[1]: v for k, v in tensors.items() if k.startswith("theta_D.")}
    P_R = decode(F_R, theta_D, cfg)
    P_T = decode(F_T, theta_D, cfg)
    P_F = decode(ad.add(F_R, F_T), theta_D, cfg)
    return StreamOutputs(P_R, P_T, P_F, F_R, F_T, trace)


# --------------------------------------------------------------------- losses


def box_window(h: int) -> int:
    k = max(1, h // 8)
    if k % 2 == 0:
        k += 1
    return max(3, k)


def box_mean(img: np.ndarray, k: int) -> np.ndarray:
    """Mean over the in-bounds part of a k x k window centred on each pixel."""
    r = k // 2
    h, w = img.shape
    integral = np.zeros((h + 1, w + 1))
    integral[1:, 1:] = img.cumsum(0).cumsum(1)
    rows = np.arange(h)
    cols = np.arange(w)
    r0, r1 = np.clip(rows - r, 0, h), np.clip(rows + r + 1, 0, h)
    c0, c1 = np.clip(cols - r, 0, w), np.clip(cols + r + 1, 0, w)
    s = (
        integral[r1][:, c1]
        - integral[r0][:, c1]
        - integral[r1][:, c0]
        + integral[r0][:, c0]
    )
    count = np.outer(r1 - r0, c1 - c0)
    return s / count


def pixel_weights(GT: np.ndarray) -> np.ndarray:
    """1 + 5 |boxmean(GT) - GT|: boundary pixels weigh up to 6x."""
    GT = np.asarray(GT, dtype=np.float64)
    return 1.0 + 5.0 * np.abs(box_mean(GT, box_window(GT.shape[0])) - GT)


def weighted_bce(P: Tensor, GT: np.ndarray, w: np.ndarray) -> Tensor:
    w = np.asarray(w, dtype=np.float64)
    per_pixel = ad.bce_with_logits(P, GT)
    return ad.scale(ad.total(ad.mul(per_pixel, Tensor(w))), 1.0 / float(w.sum()))


def weighted_iou(P: Tensor, GT: np.ndarray, w: np.ndarray) -> Tensor:
    g = np.asarray(GT, dtype=np.float64)
    wt = Tensor(w)
    p = ad.sigmoid(P)
    inter = ad.total(ad.mul(ad.mul(p, Tensor(g)), wt))
    # p + g - p*g  ==  p * (1 - g) + g
    union = ad.total(ad.mul(ad.add(ad.mul(p, Tensor(1.0 - g)), Tensor(g)), wt))
    return 1.0 - ad.div(inter + 1.0, union + 1.0)


def stream_loss(P: Tensor, GT: np.ndarray, w: np.ndarray | None = None) -> Tensor:
    if w is None:
        w = pixel_weights(GT)
    return ad.add(weighted_iou(P, GT, w), weighted_bce(P, GT, w))


def total_loss(outputs: StreamOutputs, GT: np.ndarray) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """(L, L_F, L_R, L_T) with L = L_F + L_R + L_T under one shared weight map."""
    w = pixel_weights(GT)
    L_F = stream_loss(outputs.P_F, GT, w)
    L_R = stream_loss(outputs.P_R, GT, w)
    L_T = stream_loss(outputs.P_T, GT, w)
    return L_F + L_R + L_T, L_F, L_R, L_T


def _sig(x) -> np.ndarray:
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return ad._sigmoid(np.asarray(x, dtype=np.float64))


def final_prediction(P_R, P_T, P_F) -> np.ndarray:
    """Mean of the three stream probabilities (the summed map rescaled to [0, 1])."""
    shapes = {np.shape(getattr(p, "data", p)) for p in (P_R, P_T, P_F)}
    if len(shapes) != 1:
        raise ValueError("stream logits must share one shape")
    return (_sig(P_R) + _sig(P_T) + _sig(P_F)) / 3.0


# ----------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"GWCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: ModelParams, path) -> None:
    """Versioned header, JSON model config, then (path, shape, <f8 bytes) records."""
    records = list(model.backbone.items()) + list(model.params.items())
    cfg_blob = json.dumps(asdict(model.config), sort_keys=True).encode()
    out = bytearray()
    out += CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(cfg_blob)) + cfg_blob
    out += struct.pack("<I", len(records))
    for name, arr in records:
        key = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out += struct.pack("<H", len(key)) + key
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> ModelParams:
    buf = Path(path).read_bytes()
    if not buf.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint")
    pos = len(CKPT_MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, cfg_len = take("<II")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    cfg = ModelConfig(**json.loads(buf[pos : pos + cfg_len].decode()))
    pos += cfg_len
    (count,) = take("<I")
    backbone, params = {}, {}
    for _ in range(count):
        (klen,) = take("<H")
        name = buf[pos : pos + klen].decode()
        pos += klen
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        n = int(np.prod(shape))
        if pos + 8 * n > len(buf):
            raise CheckpointError(f"{path}: truncated payload for {name}")
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
        (backbone if name.startswith("backbone.") else params)[name] = arr
    expected = init_model(cfg, 0)
    if set(expected.params) != set(params) or set(expected.backbone) != set(backbone):
        raise CheckpointError(f"{path}: parameter set does not match its config")
    for name, arr in {**backbone, **params}.items():
        ref = expected.backbone.get(name, expected.params.get(name))
        if ref.shape != arr.shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, expected {ref.shape}")
    return ModelParams(cfg, backbone, {k: params[k] for k in expected.params})

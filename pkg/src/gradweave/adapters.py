"""Bottleneck adapters: the vanilla form and the gated foreground/background pair."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from gradweave import autodiff as ad
from gradweave.autodiff import Tensor

# Guards the floor against 0.45 + 0.05 style round-off landing just under an integer.
_FLOOR_SLACK = 1e-9


@dataclass(frozen=True)
class AdapterConfig:
    d: int
    d_hat: int = 32
    alpha_for: float = 0.45
    alpha_back: float = 0.35
    beta: float = 0.1

    def __post_init__(self):
        if not 1 <= self.d_hat <= self.d:
            raise ValueError(f"d_hat must lie in [1, d={self.d}], got {self.d_hat}")
        for label, a in (("alpha_for", self.alpha_for), ("alpha_back", self.alpha_back)):
            if not 0.0 <= a <= 1.0:
                raise ValueError(f"{label} must lie in [0, 1], got {a}")
            if a + self.beta > 1.0 + 1e-12:
                raise ValueError(f"{label} + beta exceeds 1")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


@dataclass(frozen=True)
class AdapterParams:
    """Weights of one decoupled adapter, stored row-major for tokens x d inputs."""

    W_down_for: np.ndarray  # d x d_hat
    W_down_back: np.ndarray  # d x d_hat
    W_up_for: np.ndarray  # d_hat x d
    W_up_back: np.ndarray  # d_hat x d
    gate_A: np.ndarray  # 2 x d
    gate_b: np.ndarray  # 2

    FIELDS = ("W_down_for", "W_down_back", "W_up_for", "W_up_back", "gate_A", "gate_b")

    def check(self, cfg: AdapterConfig) -> None:
        d, k = cfg.d, cfg.d_hat
        want = {
            "W_down_for": (d, k),
            "W_down_back": (d, k),
            "W_up_for": (k, d),
            "W_up_back": (k, d),
            "gate_A": (2, d),
            "gate_b": (2,),
        }
        for field, shape in want.items():
            got = np.shape(getattr(self, field))
            if got != shape:
                raise ValueError(f"{field}: expected shape {shape}, got {got}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def vanilla_adapter_forward(x, W_down, W_up) -> Tensor:
    """W_up applied to GeLU(W_down applied to each token)."""
    x, W_down, W_up = _as_tensor(x), _as_tensor(W_down), _as_tensor(W_up)
    if x.data.ndim != 2:
        raise ValueError("adapter input must be tokens x d")
    return ad.matmul(ad.gelu(ad.matmul(x, W_down)), W_up)


def topk_mask(v, k: int, largest: bool = True) -> Tensor:
    """Keep ``k`` channels per token (largest or smallest), zero the rest."""
    return ad.topk(_as_tensor(v), k, largest)


def gate_logits(x: Tensor, gate_A: Tensor, gate_b: Tensor) -> Tensor:
    x, gate_A, gate_b = _as_tensor(x), _as_tensor(gate_A), _as_tensor(gate_b)
    if gate_A.data.ndim != 2 or gate_A.shape != (2, x.shape[1]) or gate_b.shape != (2,):
        raise ValueError(
            f"gate: A{gate_A.shape}, b{gate_b.shape} incompatible with features {x.shape}"
        )
    return ad.add(ad.matmul(gate_A, ad.mean_rows(x)), gate_b)


def gate_ratios(x, gate_A, gate_b) -> tuple[float, float]:
    """Softmax gate over the token-mean feature; returns (G_for, G_back)."""
    g = ad.softmax(gate_logits(_as_tensor(x), gate_A, gate_b)).data
    return float(g[0]), float(g[1])


def activation_budget(cfg: AdapterConfig, G_for: float, G_back: float) -> tuple[int, int]:
    p_for = math.floor(cfg.d_hat * (cfg.alpha_for + cfg.beta * G_for) + _FLOOR_SLACK)
    p_back = math.floor(cfg.d_hat * (cfg.alpha_back + cfg.beta * G_back) + _FLOOR_SLACK)
    return min(p_for, cfg.d_hat), min(p_back, cfg.d_hat)


@dataclass
class AdapterTrace:
    """Discrete choices made by one decoupled forward pass."""

    P_for: int
    P_back: int
    G_for: float
    G_back: float
    mask_for: np.ndarray
    mask_back: np.ndarray
    act_for: np.ndarray
    act_back: np.ndarray


def decoupled_adapter_forward(
    x,
    params,
    cfg: AdapterConfig,
    trace: list | None = None,
) -> Tensor:
    """Foreground (top-P_for) plus background (bottom-P_back) bottleneck pathways.

    ``params`` may be an :class:`AdapterParams` or a mapping with the same
    field names holding tensors (so gradients can flow). Each pathway output is
    scaled by 0.5 + its gate ratio, which is the only route by which the gate
    weights receive gradient; the budgets themselves are piecewise constant.
    """
    x = _as_tensor(x)
    get = params.get if isinstance(params, dict) else lambda k: getattr(params, k)
    p = {k: _as_tensor(get(k)) for k in AdapterParams.FIELDS}
    if x.data.ndim != 2 or x.shape[1] != cfg.d:
        raise ValueError(f"adapter input must be tokens x {cfg.d}, got {x.shape}")

    gates = ad.softmax(gate_logits(x, p["gate_A"], p["gate_b"]))
    G_for, G_back = float(gates.data[0]), float(gates.data[1])
    P_for, P_back = activation_budget(cfg, G_for, G_back)

    h_for = ad.gelu(ad.matmul(x, p["W_down_for"]))
    h_back = ad.gelu(ad.matmul(x, p["W_down_back"]))
    m_for = ad.topk_mask_array(h_for.data, P_for, largest=True)
    m_back = ad.topk_mask_array(h_back.data, P_back, largest=False)
    if trace is not None:
        trace.append(
            AdapterTrace(P_for, P_back, G_for, G_back, m_for, m_back, h_for.data, h_back.data)
        )

    out_for = ad.matmul(ad.apply_mask(h_for, m_for), p["W_up_for"])
    out_back = ad.matmul(ad.apply_mask(h_back, m_back), p["W_up_back"])
    w_for = ad.index(gates, 0) + 0.5
    w_back = ad.index(gates, 1) + 0.5
    return ad.add(ad.mul(w_for, out_for), ad.mul(w_back, out_back))


def init_adapter(cfg: AdapterConfig, rng: np.random.Generator, zero_up: bool = True) -> AdapterParams:
    """Down-projections ~ N(0, 1/d); up-projections zero so the adapter starts silent."""
    d, k = cfg.d, cfg.d_hat
    std = 1.0 / math.sqrt(d)

    def up():
        return np.zeros((k, d)) if zero_up else rng.normal(0.0, 1.0 / math.sqrt(k), (k, d))

    return AdapterParams(
        W_down_for=rng.normal(0.0, std, (d, k)),
        W_down_back=rng.normal(0.0, std, (d, k)),
        W_up_for=up(),
        W_up_back=up(),
        gate_A=rng.normal(0.0, 0.01, (2, d)) if not zero_up else np.zeros((2, d)),
        gate_b=np.zeros(2),
    )

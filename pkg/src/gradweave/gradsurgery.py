"""Per-group gradient decomposition by loss stream and conflict projection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from gradweave import autodiff as ad
from gradweave.network import GROUPS, ModelParams, Sample, final_prediction, forward_all, total_loss

# (stream, group) pairs that exist: a unimodal loss never reaches the other encoder.
GRADIENT_KEYS = (
    ("F", "theta_R"),
    ("R", "theta_R"),
    ("F", "theta_T"),
    ("T", "theta_T"),
    ("F", "theta_D"),
    ("R", "theta_D"),
    ("T", "theta_D"),
)

GradientSet = dict[tuple[str, str], np.ndarray]


def flatten_group(model: ModelParams, grads: dict[str, np.ndarray], group: str) -> np.ndarray:
    """Concatenate a group's gradients in parameter order; untouched params count as zero."""
    parts = []
    for name in model.group(group):
        g = grads.get(name)
        parts.append(np.zeros(model.params[name].size) if g is None else g.reshape(-1))
    return np.concatenate(parts)


def unflatten_group(model: ModelParams, group: str, vec: np.ndarray) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for name in model.group(group):
        n = model.params[name].size
        out[name] = vec[pos : pos + n].reshape(model.params[name].shape)
        pos += n
    if pos != vec.size:
        raise ValueError(f"{group}: vector length {vec.size} != parameter count {pos}")
    return out


@dataclass
class StreamGradients:
    """Gradient set of one sample plus what the forward pass produced."""

    grads: GradientSet
    losses: tuple[float, float, float, float]
    prediction: np.ndarray


def sample_gradients(sample: Sample, model: ModelParams) -> StreamGradients:
    """One recorded forward pass, three backward passes (one per stream loss)."""
    out = forward_all(sample, model)
    L, L_F, L_R, L_T = total_loss(out, sample.GT)
    per_stream = {"F": ad.backward(L_F), "R": ad.backward(L_R), "T": ad.backward(L_T)}
    gs = {(s, g): flatten_group(model, per_stream[s], g) for s, g in GRADIENT_KEYS}
    pred = final_prediction(out.P_R, out.P_T, out.P_F)
    return StreamGradients(gs, (L.item(), L_F.item(), L_R.item(), L_T.item()), pred)


def grouped_gradients(sample: Sample, model: ModelParams) -> GradientSet:
    return sample_gradients(sample, model).grads


def cosine_similarity(g_i: np.ndarray, g_j: np.ndarray) -> float:
    """Cosine of the angle between two vectors; 0 if either is the zero vector."""
    ni, nj = np.linalg.norm(g_i), np.linalg.norm(g_j)
    if ni == 0.0 or nj == 0.0:
        return 0.0
    return float(np.dot(g_i, g_j) / (ni * nj))


def project_out(g: np.ndarray, onto: np.ndarray) -> np.ndarray:
    """Remove the component of ``g`` along ``onto``."""
    denom = float(np.dot(onto, onto))
    if denom == 0.0:
        raise ValueError("project_out: zero-norm direction")
    return g - (np.dot(g, onto) / denom) * onto


@dataclass
class DeconflictResult:
    combined: np.ndarray
    components: list[np.ndarray]
    projections: int


def deconflict(
    grads: Sequence[np.ndarray],
    rng: np.random.Generator | None = None,
) -> DeconflictResult:
    """Project each gradient off every conflicting original, then average.

    Partners are visited in ascending index order unless ``rng`` is given, in
    which case each gradient gets its own random partner order.
    """
    if len(grads) < 1:
        raise ValueError("grad_deconflict: need at least one gradient")
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if len({g.shape for g in grads}) != 1:
        raise ValueError("grad_deconflict: gradients differ in length")
    n = len(grads)
    components, projections = [], 0
    for i in range(n):
        cur = grads[i].copy()
        partners = [j for j in range(n) if j != i]
        if rng is not None:
            rng.shuffle(partners)
        for j in partners:
            if cosine_similarity(cur, grads[j]) < 0:
                cur = project_out(cur, grads[j])
                projections += 1
        components.append(cur)
    return DeconflictResult(sum(components) / n, components, projections)


def grad_deconflict(grads: Sequence[np.ndarray], rng: np.random.Generator | None = None) -> np.ndarray:
    return deconflict(grads, rng).combined


@dataclass
class DeconflictedGradients:
    G_R: np.ndarray
    G_T: np.ndarray
    G_D: np.ndarray
    projections: int = 0
    decoder_components: list[np.ndarray] = field(default_factory=list)


def deconflict_all(gs: GradientSet, rng: np.random.Generator | None = None) -> DeconflictedGradients:
    missing = [k for k in GRADIENT_KEYS if k not in gs]
    if missing:
        raise ValueError(f"incomplete gradient set, missing {missing}")
    r = deconflict([gs["R", "theta_R"], gs["F", "theta_R"]], rng)
    t = deconflict([gs["T", "theta_T"], gs["F", "theta_T"]], rng)
    d = deconflict([gs["R", "theta_D"], gs["T", "theta_D"], gs["F", "theta_D"]], rng)
    return DeconflictedGradients(
        r.combined, t.combined, d.combined, r.projections + t.projections + d.projections, d.components
    )


def sgd_update(model: ModelParams, G_R: np.ndarray, G_T: np.ndarray, G_D: np.ndarray, eta: float) -> ModelParams:
    """In-place descent step on the three trainable groups; the backbone is never touched."""
    if eta < 0:
        raise ValueError("eta must be non-negative")
    for group, vec in zip(GROUPS, (G_R, G_T, G_D)):
        for name, g in unflatten_group(model, group, vec).items():
            model.params[name] = model.params[name] - eta * g
    return model


class Adam:
    """Adaptive-moment alternative to plain SGD, applied to the same group gradients."""

    def __init__(self, eta: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.eta, self.b1, self.b2, self.eps = eta, b1, b2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def update(self, model: ModelParams, G_R, G_T, G_D) -> ModelParams:
        self.t += 1
        for group, vec in zip(GROUPS, (G_R, G_T, G_D)):
            for name, g in unflatten_group(model, group, vec).items():
                m = self.b1 * self.m.get(name, 0.0) + (1 - self.b1) * g
                v = self.b2 * self.v.get(name, 0.0) + (1 - self.b2) * g * g
                self.m[name], self.v[name] = m, v
                mhat = m / (1 - self.b1**self.t)
                vhat = v / (1 - self.b2**self.t)
                model.params[name] = model.params[name] - self.eta * mhat / (np.sqrt(vhat) + self.eps)
        return model


@dataclass
class StepConfig:
    unimodal: bool = True
    deconflict: bool = True
    eta: float = 1e-3
    shuffle_projections: bool = False
    optimizer: str = "sgd"


@dataclass
class StepReport:
    loss: float
    loss_F: float
    loss_R: float
    loss_T: float
    grad_ratio: float
    cos_RT: float
    cos_RF: float
    cos_TF: float
    conflicts: int
    mae: float = float("nan")
    max_f: float = float("nan")
    # smallest dot(applied decoder update, post-projection component); nan when not deconflicting
    min_update_dot: float = float("nan")


def batch_gradients(batch: Sequence[Sample], model: ModelParams) -> tuple[GradientSet, list[StreamGradients]]:
    per = [sample_gradients(s, model) for s in batch]
    gs = {k: sum(p.grads[k] for p in per) / len(per) for k in GRADIENT_KEYS}
    return gs, per


def combine(gs: GradientSet, cfg: StepConfig, rng: np.random.Generator | None = None) -> DeconflictedGradients:
    """Turn a gradient set into the three applied group updates for one ablation setting."""
    if not cfg.unimodal:
        return DeconflictedGradients(gs["F", "theta_R"], gs["F", "theta_T"], gs["F", "theta_D"])
    if cfg.deconflict:
        return deconflict_all(gs, rng if cfg.shuffle_projections else None)
    return DeconflictedGradients(
        gs["F", "theta_R"] + gs["R", "theta_R"],
        gs["F", "theta_T"] + gs["T", "theta_T"],
        gs["F", "theta_D"] + gs["R", "theta_D"] + gs["T", "theta_D"],
    )


def training_step(
    batch: Sequence[Sample],
    model: ModelParams,
    cfg: StepConfig,
    rng: np.random.Generator | None = None,
    optimizer: Adam | None = None,
) -> StepReport:
    """Forward, per-stream backward, (optional) deconfliction and one update of ``model``."""
    from gradweave.datakit import mae, max_f_measure

    if not batch:
        raise ValueError("training_step: empty batch")
    gs, per = batch_gradients(batch, model)

    if cfg.unimodal:
        G_R_total = gs["F", "theta_R"] + gs["R", "theta_R"]
        G_T_total = gs["F", "theta_T"] + gs["T", "theta_T"]
    else:
        G_R_total, G_T_total = gs["F", "theta_R"], gs["F", "theta_T"]
    nR, nT = np.linalg.norm(G_R_total), np.linalg.norm(G_T_total)
    ratio = float(nR / nT) if nT > 0 else float("nan")

    applied = combine(gs, cfg, rng)
    min_dot = float("nan")
    if applied.decoder_components:
        min_dot = min(float(np.dot(applied.G_D, c)) for c in applied.decoder_components)

    if optimizer is not None:
        optimizer.update(model, applied.G_R, applied.G_T, applied.G_D)
    else:
        sgd_update(model, applied.G_R, applied.G_T, applied.G_D, cfg.eta)

    losses = np.mean([p.losses for p in per], axis=0)
    maes, fs = [], []
    for p, s in zip(per, batch):
        maes.append(mae(p.prediction, s.GT))
        fs.append(max_f_measure(p.prediction, s.GT) if s.GT.any() else 0.0)
    return StepReport(
        loss=float(losses[0]),
        loss_F=float(losses[1]),
        loss_R=float(losses[2]),
        loss_T=float(losses[3]),
        grad_ratio=ratio,
        cos_RT=cosine_similarity(gs["R", "theta_D"], gs["T", "theta_D"]),
        cos_RF=cosine_similarity(gs["R", "theta_D"], gs["F", "theta_D"]),
        cos_TF=cosine_similarity(gs["T", "theta_D"], gs["F", "theta_D"]),
        conflicts=applied.projections,
        mae=float(np.mean(maes)),
        max_f=float(np.mean(fs)),
        min_update_dot=min_dot,
    )

"""Training runs, evaluation and the four-arm ablation."""

from __future__ import annotations

import dataclasses
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from gradweave.datakit import (
    SynthConfig,
    generate_dataset,
    mae,
    max_f_measure,
    write_diagnostics_csv,
    write_pgm,
    write_table_csv,
)
from gradweave.gradsurgery import Adam, StepConfig, StepReport, training_step
from gradweave.network import ModelConfig, ModelParams, Sample, final_prediction, forward_all, init_model, save_checkpoint
from gradweave.autodiff import _sigmoid

log = logging.getLogger(__name__)

# mode -> (unimodal supervision, gradient deconfliction, adapter kind)
MODES = {
    "baseline": (False, False, "vanilla"),
    "+unimodal": (True, False, "vanilla"),
    "+deconflict": (True, True, "vanilla"),
    "+decoupled": (False, False, "decoupled"),
    "full": (True, True, "decoupled"),
}
# Column order of the ablation table; "+deconflict" is unimodal supervision plus deconfliction.
ABLATION_ARMS = ("baseline", "+deconflict", "+decoupled", "full")
ARM_LABELS = {
    "baseline": "baseline",
    "+deconflict": "+unimodal+deconflict",
    "+decoupled": "+decoupled",
    "full": "full",
}


@dataclass
class RunConfig:
    mode: str = "full"
    eta: float = 1e-3
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    n_train: int = 48
    n_test: int = 32
    optimizer: str = "sgd"
    shuffle_projections: bool = False
    synth: SynthConfig = field(default_factory=SynthConfig)
    d_hat: int = 8
    alpha_for: float = 0.45
    alpha_back: float = 0.35
    beta: float = 0.1
    out_dir: str = "runs/out"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"--mode must be one of {sorted(MODES)}, got {self.mode!r}")
        if not self.eta > 0:
            raise ValueError(f"--eta must be positive, got {self.eta}")
        if self.epochs < 1:
            raise ValueError(f"--epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"--batch-size must be at least 1, got {self.batch_size}")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be at least 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        self.model_config()  # adapter constants

    @property
    def unimodal(self) -> bool:
        return MODES[self.mode][0]

    @property
    def deconflict(self) -> bool:
        return MODES[self.mode][1]

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            H=self.synth.H,
            W=self.synth.W,
            adapter_kind=MODES[self.mode][2],
            d_hat=self.d_hat,
            alpha_for=self.alpha_for,
            alpha_back=self.alpha_back,
            beta=self.beta,
        )

    def step_config(self) -> StepConfig:
        return StepConfig(
            unimodal=self.unimodal,
            deconflict=self.deconflict,
            eta=self.eta,
            shuffle_projections=self.shuffle_projections,
            optimizer=self.optimizer,
        )

    def with_(self, **changes) -> "RunConfig":
        synth_changes = {k: changes.pop(k) for k in list(changes) if k in _SYNTH_KEYS}
        cfg = dataclasses.replace(self, **changes)
        if synth_changes:
            cfg = dataclasses.replace(cfg, synth=dataclasses.replace(cfg.synth, **synth_changes))
        return cfg

    def dump(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            if f.name == "synth":
                for sf in dataclasses.fields(self.synth):
                    lines.append(f"synth.{sf.name} = {getattr(self.synth, sf.name)}")
            else:
                lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"


_SYNTH_KEYS = {f.name for f in dataclasses.fields(SynthConfig)} - {"seed"}


def _coerce(raw: str, like):
    if isinstance(like, bool):
        low = raw.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("true", "1", "yes")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw.strip()


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; ``synth.`` prefixes are optional."""
    defaults = RunConfig()
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key.startswith("synth."):
            key = key[len("synth."):]
        if key in _SYNTH_KEYS:
            like = getattr(defaults.synth, key)
        elif key in {f.name for f in dataclasses.fields(RunConfig)} and key != "synth":
            like = getattr(defaults, key)
        else:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(value, like)
    return out


def build_config(file_values: dict, overrides: dict) -> RunConfig:
    """Config-file values first, flag overrides second; the seed also seeds the data."""
    merged = {**file_values, **{k: v for k, v in overrides.items() if v is not None}}
    synth = {k: merged.pop(k) for k in list(merged) if k in _SYNTH_KEYS}
    cfg = RunConfig(**merged)
    return dataclasses.replace(cfg, synth=SynthConfig(**synth, seed=cfg.seed))


# ------------------------------------------------------------------- training


@dataclass
class TrainResult:
    config: RunConfig
    model: ModelParams
    reports: list[StepReport]
    test_mae: float
    test_max_f: float

    def median_ratio(self, last_half: bool = True) -> float:
        r = [x.grad_ratio for x in self.reports]
        if last_half:
            r = r[len(r) // 2 :]
        return float(np.nanmedian(r))


def predict(sample: Sample, model: ModelParams, use_streams: bool = True) -> np.ndarray:
    """Saliency map in [0, 1]: three-stream mean, or the fused stream alone."""
    out = forward_all(sample, model, track=False)
    if use_streams:
        return final_prediction(out.P_R, out.P_T, out.P_F)
    return _sigmoid(out.P_F.data)


def evaluate(model: ModelParams, samples: Sequence[Sample], use_streams: bool = True) -> list[tuple[float, float]]:
    rows = []
    for s in samples:
        pred = predict(s, model, use_streams)
        rows.append((mae(pred, s.GT), max_f_measure(pred, s.GT)))
    return rows


def train(cfg: RunConfig) -> TrainResult:
    """Train from a deterministic initialisation; every random draw derives from ``cfg.seed``."""
    synth = dataclasses.replace(cfg.synth, seed=cfg.seed)
    data = generate_dataset(synth, cfg.n_train, "train")
    test = generate_dataset(synth, cfg.n_test, "test")
    model = init_model(cfg.model_config(), cfg.seed)
    rng = np.random.default_rng([cfg.seed, 7])
    step_cfg = cfg.step_config()
    optimizer = Adam(cfg.eta) if cfg.optimizer == "adam" else None
    reports: list[StepReport] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(order), cfg.batch_size):
            batch = [data[i] for i in order[start : start + cfg.batch_size]]
            reports.append(training_step(batch, model, step_cfg, rng, optimizer))
        log.debug("epoch %d loss %.4f", epoch, reports[-1].loss)
    scores = evaluate(model, test)
    return TrainResult(
        cfg,
        model,
        reports,
        float(np.mean([s[0] for s in scores])),
        float(np.mean([s[1] for s in scores])),
    )


def write_run(result: TrainResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_diagnostics_csv(result.reports, out / "diag.csv")
    save_checkpoint(result.model, out / "model.ckpt")
    (out / "config.txt").write_text(result.config.dump())
    (out / "summary.txt").write_text(
        f"mode = {result.config.mode}\n"
        f"seed = {result.config.seed}\n"
        f"test_mae = {result.test_mae:.9g}\n"
        f"test_max_f = {result.test_max_f:.9g}\n"
        f"median_grad_ratio_last_half = {result.median_ratio():.9g}\n"
    )
    return out


def write_predictions(model: ModelParams, samples: Sequence[tuple[int, Sample]], out_dir, use_streams: bool = True) -> list[tuple[int, float, float]]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for idx, s in samples:
        pred = predict(s, model, use_streams)
        write_pgm(pred, out / f"pred_{idx:04d}.pgm")
        rows.append((idx, mae(pred, s.GT), max_f_measure(pred, s.GT) if s.GT.any() else 0.0))
    write_table_csv(("index", "mae", "max_f"), rows, out / "metrics.csv")
    return rows


# ------------------------------------------------------------------- ablation


@dataclass
class ArmSummary:
    arm: str
    median_mae: float
    median_max_f: float
    median_grad_ratio: float
    runs: list[tuple[int, float, float, float]]


def _run_one(cfg: RunConfig) -> tuple[str, int, float, float, float]:
    res = train(cfg)
    return cfg.mode, cfg.seed, res.test_mae, res.test_max_f, res.median_ratio()


def worker_count() -> int:
    raw = os.environ.get("GRADWEAVE_THREADS")
    if raw:
        return max(1, int(raw))
    return max(1, min(4, os.cpu_count() or 1))


def run_grid(base: RunConfig, arms: Sequence[str], seeds: Sequence[int], workers: int | None = None) -> dict[str, ArmSummary]:
    jobs = [base.with_(mode=arm, seed=seed) for arm in arms for seed in seeds]
    workers = worker_count() if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    table = {}
    for arm in arms:
        runs = [(seed, m, f, r) for a, seed, m, f, r in results if a == arm]
        table[arm] = ArmSummary(
            arm,
            float(np.median([r[1] for r in runs])),
            float(np.median([r[2] for r in runs])),
            float(np.median([r[3] for r in runs])),
            runs,
        )
    return table


ABLATION_HEADER = ("arm", "median_mae", "median_max_f", "median_grad_ratio", "seeds")


def write_ablation(table: dict[str, ArmSummary], path) -> None:
    rows = [
        (ARM_LABELS.get(a, a), s.median_mae, s.median_max_f, s.median_grad_ratio, len(s.runs))
        for a, s in table.items()
    ]
    write_table_csv(ABLATION_HEADER, rows, path)

"""Synthetic paired-modality data, saliency metrics and file formats."""

from __future__ import annotations

import csv
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import zoom

from gradweave.network import Sample, box_mean

BETA_SQ = 0.3
N_THRESHOLDS = 255

# Base noise std and texture amplitude for both modalities before dominance scaling.
NOISE_STD = 0.12
TEXTURE_AMP = 0.15
TEXTURE_OFFSET = 0.15


@dataclass(frozen=True)
class SynthConfig:
    H: int = 32
    W: int = 32
    n_objects: int = 3  # upper bound; each sample draws 1..n_objects shapes
    dominance: float = 0.5
    background_cue_strength: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.H < 8 or self.W < 8:
            raise ValueError("H and W must be at least 8")
        if not 0.0 <= self.dominance <= 1.0:
            raise ValueError("dominance must lie in [0, 1]")
        if not 0.0 <= self.background_cue_strength <= 1.0:
            raise ValueError("background_cue_strength must lie in [0, 1]")
        if self.n_objects < 1:
            raise ValueError("n_objects must be at least 1")


@dataclass
class MetricsRecord:
    mae: float
    max_f_beta: float
    grad_ratio: float = float("nan")
    cos_RT: float = float("nan")
    cos_RF: float = float("nan")
    cos_TF: float = float("nan")


def _draw_mask(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    H, W = cfg.H, cfg.W
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    gt = np.zeros((H, W), dtype=bool)
    for _ in range(int(rng.integers(1, cfg.n_objects + 1))):
        cy, cx = rng.uniform(0.2 * H, 0.8 * H), rng.uniform(0.2 * W, 0.8 * W)
        ry, rx = rng.uniform(H / 10, H / 4), rng.uniform(W / 10, W / 4)
        if rng.random() < 0.5:
            shape = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            shape = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        gt |= shape
    if not gt.any():
        gt[H // 2, W // 2] = True
    return gt.astype(np.float64)


def _smooth_field(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.normal(0.0, 1.0, (max(2, cfg.H // 8), max(2, cfg.W // 8)))
    f = zoom(coarse, (cfg.H / coarse.shape[0], cfg.W / coarse.shape[1]), order=1)
    return f[: cfg.H, : cfg.W]


def _texture(cfg: SynthConfig, rng: np.random.Generator, halo: np.ndarray) -> np.ndarray:
    c = cfg.background_cue_strength
    return TEXTURE_OFFSET + TEXTURE_AMP * ((1.0 - c) * _smooth_field(cfg, rng) + c * halo)


def generate_sample(cfg: SynthConfig, rng: np.random.Generator) -> Sample:
    """One paired sample; modality A's object contrast grows with ``dominance``.

    The background texture of both modalities carries a halo around the object
    whose weight is ``background_cue_strength``.
    """
    dom = cfg.dominance
    gt = _draw_mask(cfg, rng)
    ring = box_mean(gt, max(3, (cfg.H // 8) | 1)) * (1.0 - gt)
    halo = ring / ring.max() if ring.max() > 0 else ring
    tex_R = _texture(cfg, rng, halo)
    tex_T = _texture(cfg, rng, halo)
    noise_R = rng.normal(0.0, NOISE_STD, gt.shape) * (1.0 - 0.5 * dom)
    noise_T = rng.normal(0.0, NOISE_STD, gt.shape) * (1.0 - 0.5 * (1.0 - dom))
    I_R = np.clip(gt * (0.5 + 0.5 * dom) + tex_R + noise_R, 0.0, 1.0)
    I_T = np.clip(gt * (0.5 + 0.5 * (1.0 - dom)) + tex_T + noise_T, 0.0, 1.0)
    return Sample(I_R, I_T, gt)


def generate_dataset(cfg: SynthConfig, n: int, split: str = "train") -> list[Sample]:
    """``n`` samples, a pure function of (cfg, split)."""
    offset = {"train": 0, "test": 1_000_003}[split]
    rng = np.random.default_rng([cfg.seed, offset])
    return [generate_sample(cfg, rng) for _ in range(n)]


def contrast(img: np.ndarray, gt: np.ndarray) -> float:
    """Mean foreground intensity minus mean background intensity."""
    fg = gt > 0.5
    return float(img[fg].mean() - img[~fg].mean())


# -------------------------------------------------------------------- metrics


def mae(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("mae: shape mismatch")
    return float(np.mean(np.abs(pred - gt)))


def f_measure(binary: np.ndarray, gt: np.ndarray, beta_sq: float = BETA_SQ) -> float:
    """F-beta of a binary map; 0/0 in precision, recall or F counts as 0."""
    b, g = np.asarray(binary, bool), np.asarray(gt) > 0.5
    tp = float(np.sum(b & g))
    n_pred, n_pos = float(b.sum()), float(g.sum())
    prec = tp / n_pred if n_pred else 0.0
    rec = tp / n_pos if n_pos else 0.0
    denom = beta_sq * prec + rec
    return (1.0 + beta_sq) * prec * rec / denom if denom else 0.0


def max_f_measure(pred: np.ndarray, gt: np.ndarray, beta_sq: float = BETA_SQ) -> float:
    """Maximum F-beta over the thresholds i/255, i = 1..255 (binarize as pred >= t)."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    g = np.asarray(gt).reshape(-1) > 0.5
    if pred.shape != g.shape:
        raise ValueError("max_f_measure: shape mismatch")
    if not g.any():
        raise ValueError("max_f_measure: ground truth has no positive pixel")
    t = np.arange(1, N_THRESHOLDS + 1) / N_THRESHOLDS
    binar = pred[None, :] >= t[:, None]
    tp = (binar & g[None, :]).sum(axis=1).astype(np.float64)
    n_pred = binar.sum(axis=1).astype(np.float64)
    prec = np.divide(tp, n_pred, out=np.zeros_like(tp), where=n_pred > 0)
    rec = tp / g.sum()
    denom = beta_sq * prec + rec
    f = np.divide((1.0 + beta_sq) * prec * rec, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f.max())


# ------------------------------------------------------------------------ PGM


class PGMError(ValueError):
    pass


def quantize(img: np.ndarray) -> np.ndarray:
    """[0, 1] floats to bytes, rounding half up."""
    img = np.asarray(img, dtype=np.float64)
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ValueError("PGM values must lie in [0, 1]")
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def write_pgm(img: np.ndarray, path) -> None:
    data = quantize(img)
    if data.ndim != 2:
        raise ValueError("write_pgm: expected a 2-d image")
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    pos, tokens = 0, []
    for _ in range(4):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise PGMError(f"{path}: malformed header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise PGMError(f"{path}: not a binary graymap (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PGMError(f"{path}: malformed header") from None
    if w <= 0 or h <= 0 or not 0 < maxval < 256:
        raise PGMError(f"{path}: unsupported header values {w}x{h} max {maxval}")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise PGMError(f"{path}: malformed header")
    pos += 1
    payload = buf[pos : pos + w * h]
    if len(payload) != w * h:
        raise PGMError(f"{path}: truncated payload ({len(payload)} of {w * h} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).astype(np.float64) / maxval


# ------------------------------------------------------------------------ CSV

DIAG_HEADER = (
    "iter", "loss", "loss_F", "loss_R", "loss_T", "grad_ratio",
    "cos_RT", "cos_RF", "cos_TF", "conflicts", "mae", "max_f",
)
_INT_FIELDS = {"iter", "conflicts"}


def fmt_float(x: float) -> str:
    return f"{x:.9g}"


def write_diagnostics_csv(records: Sequence, path) -> None:
    """One row per training step; ``iter`` counts from 1."""
    if not records:
        raise ValueError("write_diagnostics_csv: no records")
    rows = []
    for i, rec in enumerate(records, start=1):
        get = rec.get if isinstance(rec, dict) else lambda k, r=rec: getattr(r, k)
        row = []
        for col in DIAG_HEADER:
            if col == "iter":
                row.append(str(get("iter") if isinstance(rec, dict) and "iter" in rec else i))
            elif col in _INT_FIELDS:
                row.append(str(int(get(col))))
            else:
                row.append(fmt_float(float(get(col))))
        rows.append(row)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DIAG_HEADER)
        w.writerows(rows)


def read_diagnostics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != DIAG_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            {k: int(v) if k in _INT_FIELDS else float(v) for k, v in row.items()} for row in reader
        ]


def write_table_csv(header: Sequence[str], rows: Iterable[Sequence], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt_float(v) if isinstance(v, float) else v for v in row])


# ------------------------------------------------------------------- manifest


def write_dataset(samples: Sequence[Sample], out_dir) -> Path:
    """PGM triplets plus a manifest ``index,path_R,path_T,path_GT`` (paths relative)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["index,path_R,path_T,path_GT"]
    for i, s in enumerate(samples):
        names = [f"{i:04d}_{tag}.pgm" for tag in ("R", "T", "GT")]
        for img, name in zip((s.I_R, s.I_T, s.GT), names):
            write_pgm(img, out / name)
        lines.append(",".join([str(i), *names]))
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path) -> list[tuple[int, Sample]]:
    path = Path(path)
    base = path.parent
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#") or line.startswith("index,"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected index,path_R,path_T,path_GT")
        paths = [Path(p) if os.path.isabs(p) else base / p for p in parts[1:]]
        I_R, I_T, gt = (read_pgm(p) for p in paths)
        out.append((int(parts[0]), Sample(I_R, I_T, (gt > 0.5).astype(np.float64))))
    return out


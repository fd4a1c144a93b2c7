"""Evaluation metrics for eigenvalue regression and eigenfunction prediction."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

MAPE_EPS = 1e-8


class EmptyInput(Exception):
    pass


class ConstantTargets(Exception):
    """R^2 undefined when the targets have zero variance."""


class ZeroSignal(Exception):
    """PSNR/RelL1 undefined for an identically zero reference."""


class ShapeMismatch(Exception):
    pass


def rmse(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    if pred.size == 0:
        raise EmptyInput("empty input")
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def r2(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    ss_tot = float(((target - target.mean()) ** 2).sum())
    if ss_tot == 0:
        raise ConstantTargets("targets are constant")
    ss_res = float(((pred - target) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def mape(pred: np.ndarray, target: np.ndarray, eps: float = MAPE_EPS) -> float:
    """Mean absolute percentage error, in percent."""
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    if pred.size == 0:
        raise EmptyInput("empty input")
    return float(100.0 * np.mean(np.abs(pred - target) / (target + eps)))


def maxae(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"{pred.shape} vs {target.shape}")
    return float(np.abs(target - pred).max())


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    """20 log10(max|target| / RMSE) in dB; +inf on an exact match."""
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    peak = float(np.abs(target).max())
    if peak == 0:
        raise ZeroSignal("reference is identically zero")
    err = rmse(pred, target)
    if err == 0:
        return math.inf
    return float(20.0 * np.log10(peak / err))


def rel_l1(pred: np.ndarray, target: np.ndarray) -> float:
    """Sum|target - pred| / Sum|target|, in percent."""
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    denom = float(np.abs(target).sum())
    if denom == 0:
        raise ZeroSignal("reference has zero mass")
    return float(100.0 * np.abs(target - pred).sum() / denom)


@dataclass
class EvalReport:
    task: str
    eig_index: int
    n_samples: int
    rmse: float | None = None
    r2: float | None = None
    mape_percent: float | None = None
    maxae: float | None = None
    psnr_db: float | None = None
    rel_l1_percent: float | None = None
    worst: dict[str, list] = field(default_factory=dict)

    def to_dict(self) -> dict:
        def enc(v):
            if v is None:
                return None
            return "inf" if v == math.inf else v

        return {
            "task": self.task,
            "eig_index": self.eig_index,
            "n_samples": self.n_samples,
            "rmse": enc(self.rmse),
            "r2": enc(self.r2),
            "mape_percent": enc(self.mape_percent),
            "maxae": enc(self.maxae),
            "psnr_db": enc(self.psnr_db),
            "rel_l1_percent": enc(self.rel_l1_percent),
            "worst": self.worst,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _top_k(values: np.ndarray, k: int = 10) -> list[int]:
    order = np.argsort(values)[::-1]
    return [int(i) for i in order[:k]]


def evaluate_eigenvalues(pred: np.ndarray, target: np.ndarray, eig_index: int = 1,
                         top: int = 10) -> EvalReport:
    """Regression metrics plus the top worst samples by absolute and relative error."""
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    abs_err = np.abs(pred - target)
    rel_err = abs_err / (target + MAPE_EPS)
    report = EvalReport(
        task="eigenvalue",
        eig_index=eig_index,
        n_samples=pred.size,
        rmse=rmse(pred, target),
        r2=r2(pred, target),
        mape_percent=mape(pred, target),
    )
    report.worst = {
        "abs_error": [
            {"sample": i, "true": float(target[i]), "pred": float(pred[i]),
             "error": float(abs_err[i])}
            for i in _top_k(abs_err, top)
        ],
        "rel_error": [
            {"sample": i, "true": float(target[i]), "pred": float(pred[i]),
             "error": float(rel_err[i])}
            for i in _top_k(rel_err, top)
        ],
    }
    return report


def align_sign(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-sample sign flip of pred minimizing L2 distance to target."""
    flat_p = pred.reshape(pred.shape[0], -1)
    flat_t = target.reshape(target.shape[0], -1)
    keep = ((flat_p - flat_t) ** 2).sum(axis=1) <= ((flat_p + flat_t) ** 2).sum(axis=1)
    sign = np.where(keep, 1.0, -1.0)
    return pred * sign[:, None, None]


def evaluate_eigenfunctions(pred: np.ndarray, target: np.ndarray, mask: np.ndarray,
                            eig_index: int = 1, top: int = 10) -> EvalReport:
    """Raster metrics on masked, sign-aligned predictions (matching ARM2 training)."""
    pred = np.asarray(pred, float) * np.asarray(mask, float)
    target = np.asarray(target, float)
    pred = align_sign(pred, target)
    n = pred.shape[0]
    per_maxae = np.array([maxae(pred[i], target[i]) for i in range(n)])
    per_rel = np.array([rel_l1(pred[i], target[i]) for i in range(n)])
    per_psnr = np.array([psnr(pred[i], target[i]) for i in range(n)])
    report = EvalReport(
        task="eigenfunction",
        eig_index=eig_index,
        n_samples=n,
        maxae=float(per_maxae.max()),
        psnr_db=float(np.mean(per_psnr[np.isfinite(per_psnr)]))
        if np.any(np.isfinite(per_psnr)) else math.inf,
        rel_l1_percent=float(per_rel.mean()),
    )
    report.worst = {
        "rel_l1": [
            {"sample": i, "rel_l1": float(per_rel[i]), "maxae": float(per_maxae[i])}
            for i in _top_k(per_rel, top)
        ],
    }
    return report


def render_table(rows: list[dict], columns: list[str]) -> str:
    """Aligned text table; float cells get 4 significant digits."""
    def fmt(v):
        if isinstance(v, float):
            return "inf" if v == math.inf else f"{v:.4g}"
        return str(v)

    cells = [[fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c)
              for i, c in enumerate(columns)]
    lines = [" | ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("-+-".join("-" * w for w in widths))
    for row in cells:
        lines.append(" | ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)

"""Rank and linear correlation metrics for quality predictions.

SRCC is Pearson correlation of average ranks (tie-aware; identical to the
classical 1 - 6*sum(d^2)/(N(N^2-1)) form whenever no ties exist). PLCC is
Pearson correlation after remapping predictions through a five-parameter
monotone logistic curve fitted by damped Gauss-Newton, which removes the
arbitrary nonlinearity between a model's score scale and the label scale.

Also provides the repeated-split evaluation protocol (k random 80/20
splits, median of each metric taken independently) and full cross-dataset
evaluation matrices.

All functions are pure; nothing here touches the filesystem.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dataset import DatasetManifest, ImageRecord, split_dataset
from .rng import derive_seed
from .trainer import stable_sigmoid

LM_MAX_ITER = 200
LM_REL_TOL = 1e-10
LM_LAMBDA0 = 1e-3


class MetricError(Exception):
    pass


def rank_average(x) -> np.ndarray:
    """Fractional ranks (1-based); tied values share their average rank."""
    a = np.asarray(x, dtype=np.float64)
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(a.size)
    sorted_vals = a[order]
    i = 0
    while i < a.size:
        j = i
        while j + 1 < a.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _check_pair(x, y, caller: str) -> tuple[np.ndarray, np.ndarray]:
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.ndim != 1:
        raise MetricError(f"{caller}: need two equal-length vectors")
    if xa.size < 3:
        raise MetricError(f"{caller}: need at least 3 points, got {xa.size}")
    if not (np.all(np.isfinite(xa)) and np.all(np.isfinite(ya))):
        raise MetricError(f"{caller}: non-finite values")
    return xa, ya


def pearson(x, y) -> float:
    xa, ya = _check_pair(x, y, "pearson")
    xc = xa - xa.mean()
    yc = ya - ya.mean()
    denom = np.sqrt(xc @ xc) * np.sqrt(yc @ yc)
    if denom == 0.0:
        raise MetricError("pearson: zero variance input")
    return float(np.clip((xc @ yc) / denom, -1.0, 1.0))


def srcc(x, y) -> float:
    xa, ya = _check_pair(x, y, "srcc")
    try:
        return pearson(rank_average(xa), rank_average(ya))
    except MetricError:
        raise MetricError("srcc: zero rank variance (all values tied)")


@dataclass(frozen=True)
class LogisticParams:
    b1: float
    b2: float
    b3: float
    b4: float
    b5: float

    def as_array(self) -> np.ndarray:
        return np.array([self.b1, self.b2, self.b3, self.b4, self.b5])

    def to_list(self) -> list[float]:
        return [float(v) for v in self.as_array()]


def logistic_map(s_hat, betas: LogisticParams):
    """b1*(1/2 - 1/(1+exp(b2*(s-b3)))) + b4*s + b5, overflow-safe."""
    s = np.asarray(s_hat, dtype=np.float64)
    sig = stable_sigmoid(betas.b2 * (s - betas.b3))
    out = betas.b1 * (np.asarray(sig) - 0.5) + betas.b4 * s + betas.b5
    return out if out.ndim else float(out)


def _sse(preds: np.ndarray, mos: np.ndarray, betas: LogisticParams) -> float:
    r = logistic_map(preds, betas) - mos
    return float(r @ r)


def _affine_fit(preds: np.ndarray, mos: np.ndarray) -> LogisticParams:
    design = np.stack([preds, np.ones_like(preds)], axis=1)
    (a, b), *_ = np.linalg.lstsq(design, mos, rcond=None)
    return LogisticParams(0.0, 1.0, float(preds.mean()), float(a), float(b))


def fit_logistic(preds, mos) -> LogisticParams:
    """Least-squares fit of the five-parameter logistic remap.

    Damped Gauss-Newton with the conventional warm start (amplitude from
    the label range, slope 4/std of the predictions, center at the
    prediction mean). Never returns a fit worse in SSE than the plain
    affine fallback.
    """
    x, y = _check_pair(preds, mos, "fit_logistic")
    if x.size < 5:
        raise MetricError(f"fit_logistic: need at least 5 points, got {x.size}")
    sx = float(x.std())
    if sx == 0.0:
        raise MetricError("fit_logistic: zero variance in predictions")
    affine = _affine_fit(x, y)
    sse_affine = _sse(x, y, affine)
    if float(y.std()) == 0.0:
        return affine
    sign = 1.0 if pearson(x, y) >= 0.0 else -1.0
    beta = np.array(
        [
            float(y.max() - y.min()),
            sign * 4.0 / sx,
            float(x.mean()),
            0.0,
            float(y.mean()),
        ]
    )
    sse = _sse(x, y, LogisticParams(*beta))
    lam = LM_LAMBDA0
    for _ in range(LM_MAX_ITER):
        b1, b2, b3 = beta[0], beta[1], beta[2]
        sig = np.asarray(stable_sigmoid(b2 * (x - b3)))
        slope = sig * (1.0 - sig)
        jac = np.stack(
            [sig - 0.5, b1 * slope * (x - b3), -b1 * slope * b2, x, np.ones_like(x)],
            axis=1,
        )
        residual = logistic_map(x, LogisticParams(*beta)) - y
        hess = jac.T @ jac
        grad = jac.T @ residual
        damped = hess + lam * np.diag(np.maximum(np.diag(hess), 1e-12))
        try:
            delta = np.linalg.solve(damped, -grad)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        trial = beta + delta
        sse_trial = _sse(x, y, LogisticParams(*trial))
        if np.isfinite(sse_trial) and sse_trial < sse:
            improved = (sse - sse_trial) / max(sse, 1e-300)
            beta, sse = trial, sse_trial
            lam = max(lam / 10.0, 1e-15)
            if improved < LM_REL_TOL:
                break
        else:
            lam *= 10.0
            if lam > 1e15:
                break
    if not np.all(np.isfinite(beta)) or sse > sse_affine:
        return affine
    return LogisticParams(*(float(v) for v in beta))


def plcc(preds, mos) -> tuple[float, LogisticParams]:
    """Pearson correlation after the fitted logistic remap."""
    betas = fit_logistic(preds, mos)
    return pearson(logistic_map(np.asarray(preds, dtype=np.float64), betas), mos), betas


@dataclass
class EvalReport:
    model: str
    trained_on: str
    dataset: str
    n: int
    srcc: float
    plcc: float
    raw_pearson: float
    betas: LogisticParams | None = None
    seed: int | None = None

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "trained_on": self.trained_on,
            "dataset": self.dataset,
            "n": self.n,
            "srcc": self.srcc,
            "plcc": self.plcc,
            "raw_pearson": self.raw_pearson,
            "betas": self.betas.to_list() if self.betas else None,
            "seed": self.seed,
        }


def evaluate(
    preds,
    mos,
    model: str = "",
    trained_on: str = "",
    dataset: str = "",
    seed: int | None = None,
) -> EvalReport:
    """SRCC + logistic-remapped PLCC + raw Pearson on one prediction set."""
    p = np.asarray(preds, dtype=np.float64)
    plcc_value, betas = plcc(p, mos)
    return EvalReport(
        model=model,
        trained_on=trained_on,
        dataset=dataset,
        n=p.size,
        srcc=srcc(p, mos),
        plcc=plcc_value,
        raw_pearson=pearson(p, mos),
        betas=betas,
        seed=seed,
    )


def repeated_split_eval(
    manifest: DatasetManifest,
    train_fn: Callable,
    k: int = 10,
    base_seed: int = 0,
    fraction: float = 0.8,
    model_name: str = "",
) -> EvalReport:
    """k random train/test splits; median of each metric independently.

    train_fn(manifest, split, seed) must return a mapping from image id
    to predicted score covering at least the split's test ids.
    """
    if k < 1:
        raise MetricError("repeated_split_eval: k must be >= 1")
    reports = []
    for i in range(k):
        seed = derive_seed(base_seed, "split", i)
        split = split_dataset(manifest, seed, fraction)
        scores = train_fn(manifest, split, seed)
        preds = [scores[image_id] for image_id in split.test_ids]
        mos = [manifest.labels[image_id] for image_id in split.test_ids]
        reports.append(
            evaluate(preds, mos, model_name, manifest.name, manifest.name, seed)
        )
    return EvalReport(
        model=model_name,
        trained_on=manifest.name,
        dataset=manifest.name,
        n=reports[0].n,
        srcc=float(np.median([r.srcc for r in reports])),
        plcc=float(np.median([r.plcc for r in reports])),
        raw_pearson=float(np.median([r.raw_pearson for r in reports])),
        betas=None,
        seed=base_seed,
    )


@dataclass(frozen=True)
class ScoredModel:
    """A trained model reduced to provenance plus a batch scoring function
    (records in, one score per record out)."""

    name: str
    trained_on: str
    score_fn: Callable[[list[ImageRecord]], np.ndarray]


def cross_dataset_matrix(
    models: list[ScoredModel], datasets: list[DatasetManifest]
) -> list[list[EvalReport]]:
    """Evaluate every model on the full labeled set of every dataset."""
    if not models or not datasets:
        raise MetricError("cross_dataset_matrix: empty models or datasets")
    matrix = []
    for model in models:
        row = []
        for ds in datasets:
            preds = np.asarray(model.score_fn(ds.records), dtype=np.float64)
            mos = [ds.labels[r.id] for r in ds.records]
            row.append(evaluate(preds, mos, model.name, model.trained_on, ds.name))
        matrix.append(row)
    return matrix


def render_matrix_csv(matrix: list[list[EvalReport]]) -> str:
    """rows = (model, trained_on); columns = dataset x {srcc, plcc}."""
    datasets = [cell.dataset for cell in matrix[0]]
    header = ["model", "trained_on"]
    for name in datasets:
        header += [f"{name}_srcc", f"{name}_plcc"]
    lines = [",".join(header)]
    for row in matrix:
        fields = [row[0].model, row[0].trained_on]
        for cell in row:
            fields += [f"{cell.srcc:.6f}", f"{cell.plcc:.6f}"]
        lines.append(",".join(fields))
    return "\n".join(lines) + "\n"


def matrix_to_json(matrix: list[list[EvalReport]]) -> list[list[dict]]:
    return [[cell.to_dict() for cell in row] for row in matrix]

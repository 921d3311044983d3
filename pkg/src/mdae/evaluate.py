"""Separability metrics, Frechet distance between embedding groups, and a 2D linear projection."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .motion import N_GRADES, TECHNIQUES

log = logging.getLogger(__name__)

SYM_TOL = 1e-8
NEG_TOL = 1e-8
RIDGE = 1e-6


def confusion_and_uar(predictions: Sequence, truths: Sequence, classes: Sequence = TECHNIQUES):
    """Confusion matrix (rows = truth, columns = prediction) and unweighted average recall.

    Recall is averaged over the classes that occur in ``truths``; a class
    listed in ``classes`` but never true is left out of the average.
    """
    if len(predictions) != len(truths):
        raise ValueError(f"{len(predictions)} predictions for {len(truths)} truths")
    if not len(truths):
        raise ValueError("no samples")
    classes = list(classes)
    idx = {c: i for i, c in enumerate(classes)}
    unknown = {c for c in list(predictions) + list(truths) if c not in idx}
    if unknown:
        raise ValueError(f"labels outside class list: {sorted(map(str, unknown))}")
    C = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for p, t in zip(predictions, truths):
        C[idx[t], idx[p]] += 1
    support = C.sum(axis=1)
    present = support > 0
    recall = np.diag(C)[present] / support[present]
    return C, float(recall.mean())


@dataclass
class GradeError:
    mae: float
    grades: float
    per_grade: dict

    def to_json(self) -> dict:
        return {"mae": self.mae, "mae_grades": self.grades, "per_grade": self.per_grade}


def grade_mae(predicted, truth) -> GradeError:
    """Grade MAE macro-averaged over distinct true grades, also in units of grade steps (x12)."""
    p = np.asarray(predicted, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("no samples")
    err = np.abs(p - t)
    keys = np.round(t * (N_GRADES - 1)).astype(int)
    per = {int(k): float(err[keys == k].mean()) for k in np.unique(keys)}
    mae = float(np.mean(list(per.values())))
    return GradeError(mae, mae * (N_GRADES - 1), per)


def sqrt_psd(M) -> np.ndarray:
    """Symmetric PSD square root by eigendecomposition, small negative eigenvalues clipped."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got {M.shape}")
    scale = max(1.0, float(np.abs(M).max()))
    if np.abs(M - M.T).max() > SYM_TOL * scale:
        raise ValueError("matrix is not symmetric")
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    if w.min() < -NEG_TOL * scale:
        raise ValueError(f"matrix is indefinite (min eigenvalue {w.min():.3g})")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def _moments(X: np.ndarray, name: str):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError(f"group {name} is empty or not (n, d)")
    n, d = X.shape
    mu = X.mean(axis=0)
    S = np.cov(X, rowvar=False, ddof=1).reshape(d, d) if n > 1 else np.zeros((d, d))
    if n < d + 1:
        warnings.warn(
            f"group {name} has {n} samples for dimension {d}; covariance is rank deficient, "
            f"adding {RIDGE:g} ridge. FID from groups this small is unreliable.",
            RuntimeWarning, stacklevel=3,
        )
        S = S + RIDGE * np.eye(d)
    return mu, S


def fid(a, b) -> float:
    """Frechet distance between Gaussian fits of two embedding groups."""
    mu_a, S_a = _moments(a, "a")
    mu_b, S_b = _moments(b, "b")
    if mu_a.shape != mu_b.shape:
        raise ValueError(f"groups differ in dimension: {mu_a.shape[0]} vs {mu_b.shape[0]}")
    r = sqrt_psd(S_a)
    inner = r @ S_b @ r
    cross = sqrt_psd(0.5 * (inner + inner.T))
    val = float(np.sum((mu_a - mu_b) ** 2) + np.trace(S_a) + np.trace(S_b) - 2.0 * np.trace(cross))
    return max(val, 0.0)


@dataclass
class Projection:
    points: np.ndarray          # (n, 2); second column zero when rank < 2
    components: np.ndarray      # (k, d)
    explained: np.ndarray
    rank: int
    labels: list | None = None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "label", "pc1", "pc2"])
            for i, (x, y) in enumerate(self.points):
                w.writerow([i, "" if self.labels is None else self.labels[i], repr(float(x)), repr(float(y))])


def pca_project_2d(embeddings, labels: Sequence | None = None, tol: float = 1e-10) -> Projection:
    """Project centered embeddings onto the top two principal axes.

    Each axis is signed so its largest-magnitude loading is positive. Rank
    below 2 is logged and the missing coordinates are zero.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or len(X) < 3:
        raise ValueError("need at least 3 embeddings of shape (n, d)")
    if labels is not None and len(labels) != len(X):
        raise ValueError("one label per embedding required")
    Xc = X - X.mean(axis=0)
    _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    rank = int(np.sum(s > tol * max(1.0, s[0] if s.size else 0.0)))
    if rank < 2:
        log.warning("embeddings have rank %d; projection is %s", rank, "degenerate" if rank == 0 else "1-D")
    k = min(2, rank)
    comps = Vt[:k].copy()
    for i in range(k):
        if comps[i, np.argmax(np.abs(comps[i]))] < 0:
            comps[i] = -comps[i]
    pts = np.zeros((len(X), 2))
    pts[:, :k] = Xc @ comps.T
    total = float(np.sum(s ** 2))
    explained = (s[:k] ** 2 / total) if total > 0 else np.zeros(k)
    return Projection(pts, comps, explained, rank, list(labels) if labels is not None else None)


def _is_z(col: str) -> bool:
    return col.startswith("z") and col[1:].isdigit()


def load_embeddings(path) -> tuple[np.ndarray, list[dict]]:
    """Read an embedding CSV: ``z0..zN`` columns plus any metadata columns, or a ``.npy`` array."""
    path = Path(path)
    if path.suffix == ".npy":
        Z = np.load(path)
        return Z, [{} for _ in range(len(Z))]
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        zcols = sorted((c for c in cols if _is_z(c)), key=lambda c: int(c[1:]))
        if not zcols:
            raise ValueError(f"{path}: no z0..zN columns")
        rows = list(reader)
    Z = np.array([[float(r[c]) for c in zcols] for r in rows]).reshape(len(rows), len(zcols))
    meta = [{k: v for k, v in r.items() if not _is_z(k)} for r in rows]
    return Z, meta


def save_embeddings(path, Z, meta: Sequence[dict] | None = None) -> None:
    Z = np.asarray(Z, dtype=np.float64)
    meta = list(meta) if meta is not None else [{} for _ in range(len(Z))]
    keys = list(dict.fromkeys(k for m in meta for k in m))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys + [f"z{i}" for i in range(Z.shape[1])])
        for m, row in zip(meta, Z):
            w.writerow([m.get(k, "") for k in keys] + [repr(float(v)) for v in row])

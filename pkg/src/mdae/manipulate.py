"""Linear attribute head over semantic embeddings and lambda-guided manipulation."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import log_softmax, softmax

from .motion import TECHNIQUES, SampleMeta

log = logging.getLogger(__name__)

HEAD_MAGIC = b"MDAH"
HEAD_VERSION = 1


@dataclass(eq=False)
class AttributeHead:
    """Technique logits ``W z_s + b`` and grade ``w_g . z_s + b_g`` over standardized z_s."""

    technique_weights: np.ndarray   # (classes, d_z)
    technique_bias: np.ndarray      # (classes,)
    grade_weights: np.ndarray       # (d_z,)
    grade_bias: float
    z_mean: np.ndarray
    z_std: np.ndarray
    classes: tuple[str, ...] = TECHNIQUES

    def __post_init__(self):
        if np.any(self.z_std <= 0):
            raise ValueError("z_std must be positive in every dimension")
        for name in ("technique_weights", "technique_bias", "grade_weights", "z_mean", "z_std"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def d_z(self) -> int:
        return self.z_mean.shape[0]

    def standardize(self, z):
        return (np.asarray(z, dtype=np.float64) - self.z_mean) / self.z_std

    def destandardize(self, zs):
        return np.asarray(zs) * self.z_std + self.z_mean

    def _check(self, z):
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.d_z:
            raise ValueError(f"embedding dimension {z.shape[-1]} does not match head d_z={self.d_z}")
        return z

    def predict_standardized(self, zs):
        logits = zs @ self.technique_weights.T + self.technique_bias
        probs = softmax(logits, axis=-1)
        grade = np.clip(zs @ self.grade_weights + self.grade_bias, 0.0, 1.0)
        return probs, grade


def predict(head: AttributeHead, z):
    """Technique probabilities (sum to 1) and grade clamped to [0, 1]."""
    z = head._check(z)
    return head.predict_standardized(head.standardize(z))


def _class_index(head: AttributeHead, name) -> int:
    try:
        return head.classes.index(name)
    except ValueError:
        raise ValueError(f"unknown technique {name!r}; head classes are {head.classes}") from None


def train_head(embeddings, labels: Sequence[SampleMeta], classes: Sequence[str] = TECHNIQUES,
               weight_decay: float = 1e-3, seed: int = 0, max_iter: int = 2000) -> AttributeHead:
    """Fit technique cross-entropy plus grade squared error on standardized embeddings.

    Full-batch L-BFGS on the joint objective; the small L2 term keeps the
    logits finite on separable data.
    """
    Z = np.asarray(embeddings, dtype=np.float64)
    if Z.ndim != 2 or len(Z) != len(labels):
        raise ValueError("embeddings must be (n, d_z) with one label per row")
    classes = tuple(classes)
    y = np.array([classes.index(m.technique) for m in labels])
    if len(set(y.tolist())) < 2:
        raise ValueError("technique labels cover a single class; head is degenerate")
    g = np.array([m.grade for m in labels])
    mean = Z.mean(axis=0)
    std = Z.std(axis=0)
    std[std < 1e-12] = 1.0
    Zs = (Z - mean) / std
    n, d = Zs.shape
    k = len(classes)
    Y = np.eye(k)[y]
    present = np.zeros(k, dtype=bool)
    present[np.unique(y)] = True

    def unpack(theta):
        W = theta[: k * d].reshape(k, d)
        b = theta[k * d: k * d + k]
        wg = theta[k * d + k: k * d + k + d]
        return W, b, wg, theta[-1]

    def objective(theta):
        W, b, wg, bg = unpack(theta)
        logits = Zs @ W.T + b
        # Classes absent from the data get a fixed large negative bias.
        logits = np.where(present, logits, -30.0)
        lp = log_softmax(logits, axis=1)
        ce = -(Y * lp).sum() / n
        r = Zs @ wg + bg - g
        mse = (r ** 2).sum() / n
        reg = 0.5 * weight_decay * ((W ** 2).sum() + (wg ** 2).sum())
        P = np.exp(lp)
        dlogits = (P - Y) / n * present
        gW = dlogits.T @ Zs + weight_decay * W
        gb = dlogits.sum(0)
        gwg = 2 * Zs.T @ r / n + weight_decay * wg
        gbg = 2 * r.sum() / n
        return ce + mse + reg, np.concatenate([gW.ravel(), gb, gwg, [gbg]])

    rng = np.random.default_rng(seed)
    theta0 = 0.01 * rng.standard_normal(k * d + k + d + 1)
    res = minimize(objective, theta0, jac=True, method="L-BFGS-B", options={"maxiter": max_iter, "gtol": 1e-9})
    W, b, wg, bg = unpack(res.x)
    b = np.where(present, b, -30.0)
    W = W * present[:, None]
    return AttributeHead(W, b, wg, float(bg), mean, std, classes)


def technique_direction(head: AttributeHead, source, target) -> np.ndarray:
    s, t = _class_index(head, source), _class_index(head, target)
    if s == t:
        raise ValueError("source and target technique are the same")
    v = head.technique_weights[t] - head.technique_weights[s]
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise ValueError("technique weights of source and target coincide; no direction")
    return v / n


def grade_direction(head: AttributeHead, sign: float = 1.0) -> np.ndarray:
    if sign == 0:
        raise ValueError("grade direction sign must be nonzero")
    return np.sign(sign) * head.grade_weights / np.linalg.norm(head.grade_weights)


def direction(head: AttributeHead, kind: str, source=None, target=None, sign: float = 1.0) -> np.ndarray:
    """Unit direction in standardized embedding space.

    ``kind`` is "technique" (needs ``source`` and ``target``) or "grade".
    """
    if kind == "technique":
        return technique_direction(head, source, target)
    if kind == "grade":
        return grade_direction(head, sign)
    raise ValueError(f"unknown direction kind {kind!r}")


def _prediction_vector(head, zs):
    probs, grade = head.predict_standardized(zs)
    return np.concatenate([probs, np.atleast_1d(grade)[..., None] if np.ndim(grade) else [grade]], axis=-1)


def find_lambda_max(head: AttributeHead, z, d, step: float = 0.1, eps_conv: float = 1e-3,
                    window: int = 5, cap: float = 50.0) -> float:
    """Smallest grid lambda after which predictions stop moving.

    The grid is {0, step, 2 step, ...}; lambda_k qualifies once the spread of
    every predicted quantity over grid points k - window .. k is below
    ``eps_conv``. The search starts once predictions have moved by
    ``eps_conv`` from their value at lambda = 0 (immediately if they never
    do). Works on standardized z; returns ``cap`` with a warning when no
    point qualifies.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    zs = head.standardize(head._check(z))
    d = np.asarray(d, dtype=np.float64)
    n = int(np.floor(cap / step + 1e-9))
    lams = step * np.arange(n + 1)
    preds = _prediction_vector(head, zs[None] + lams[:, None] * d[None])
    # Skip a flat stretch at the start: a z deep inside its own class has
    # saturated predictions long before the direction crosses any boundary.
    moved = np.flatnonzero(np.max(np.abs(preds - preds[0]), axis=1) >= eps_conv)
    start = window if moved.size == 0 else max(window, int(moved[0]) + window)
    for k in range(start, n + 1):
        seg = preds[k - window: k + 1]
        if np.max(seg.max(0) - seg.min(0)) < eps_conv:
            return float(lams[k])
    log.warning("lambda_max not reached before cap %.3g; using the cap", cap)
    return float(cap)


@dataclass
class ManipulationResult:
    z: np.ndarray
    lam: float
    lambda_max: float
    lambdas: np.ndarray
    scores: np.ndarray
    direction: np.ndarray
    predictions: list = field(default_factory=list)

    def trace_json(self) -> dict:
        return {
            "lambda": self.lam,
            "lambda_max": self.lambda_max,
            "grid": self.lambdas.tolist(),
            "scores": self.scores.tolist(),
            "predictions": self.predictions,
        }


def guided_manipulate(z, head: AttributeHead, technique=None, grade=None, grid: int = 101,
                      step: float = 0.1, eps_conv: float = 1e-3, window: int = 5, cap: float = 50.0) -> ManipulationResult:
    """Move z along the attribute direction to the grid point closest to the targets.

    Score = 0.5 * ||probs - onehot(technique)|| + 0.5 * |grade_pred - grade|.
    An unset target is pinned to the attribute's current prediction.
    """
    if technique is None and grade is None:
        raise ValueError("at least one of technique/grade target must be given")
    z = head._check(z)
    zs = head.standardize(z)
    probs0, grade0 = head.predict_standardized(zs)
    current = head.classes[int(np.argmax(probs0))]
    tech_target = _class_index(head, technique) if technique is not None else int(np.argmax(probs0))
    onehot = np.eye(len(head.classes))[tech_target]
    target_grade = float(grade) if grade is not None else float(grade0)
    if not 0.0 <= target_grade <= 1.0:
        raise ValueError("grade target must be within [0, 1]")

    d = np.zeros(head.d_z)
    if technique is not None and head.classes[tech_target] != current:
        d += technique_direction(head, current, head.classes[tech_target])
    if grade is not None and not np.isclose(target_grade, grade0):
        d += grade_direction(head, target_grade - grade0)
    nd = np.linalg.norm(d)
    if nd < 1e-12:
        return ManipulationResult(z.copy(), 0.0, 0.0, np.zeros(1), np.zeros(1), d, [])
    d /= nd

    lam_max = find_lambda_max(head, z, d, step, eps_conv, window, cap)
    lams = np.linspace(0.0, lam_max, grid)
    cand = zs[None] + lams[:, None] * d[None]
    probs, grades = head.predict_standardized(cand)
    scores = 0.5 * np.linalg.norm(probs - onehot, axis=1) + 0.5 * np.abs(grades - target_grade)
    best = int(np.argmin(scores))
    preds = [{"technique_probs": p.tolist(), "grade": float(g)} for p, g in zip(probs, grades)]
    return ManipulationResult(head.destandardize(cand[best]), float(lams[best]), lam_max, lams, scores, d, preds)


# --------------------------------------------------------------------------
# head file


def save_head(head: AttributeHead, path) -> None:
    header = json.dumps({
        "d_z": head.d_z,
        "classes": list(head.classes),
        "z_mean": head.z_mean.tolist(),
        "z_std": head.z_std.tolist(),
        "grade_bias": head.grade_bias,
    }).encode("utf-8")
    block = np.concatenate([head.technique_weights.ravel(), head.technique_bias, head.grade_weights]).astype("<f8")
    Path(path).write_bytes(HEAD_MAGIC + struct.pack("<II", HEAD_VERSION, len(header)) + header + block.tobytes())


def load_head(path) -> AttributeHead:
    data = Path(path).read_bytes()
    if data[:4] != HEAD_MAGIC:
        raise ValueError(f"{path}: not an MDAH head file")
    version, n = struct.unpack("<II", data[4:12])
    if version != HEAD_VERSION:
        raise ValueError(f"{path}: unsupported head version {version}")
    h = json.loads(data[12:12 + n].decode("utf-8"))
    d, k = h["d_z"], len(h["classes"])
    block = np.frombuffer(data, "<f8", offset=12 + n)
    if block.size != k * d + k + d:
        raise ValueError(f"{path}: weight block has {block.size} values, expected {k * d + k + d}")
    return AttributeHead(
        block[: k * d].reshape(k, d).copy(), block[k * d: k * d + k].copy(), block[k * d + k:].copy(),
        float(h["grade_bias"]), np.array(h["z_mean"]), np.array(h["z_std"]), tuple(h["classes"]),
    )


# --------------------------------------------------------------------------
# end-to-end pipeline


def _features_tensor(model, feats):
    import torch

    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(feats.to_array()[None], dtype=dtype)
    return model.normalize(x)


def reconstruct_features(model, sched, x0, z, steps: int = 50, z_new=None):
    """Invert normalized features ``x0`` under ``z`` and decode under ``z_new`` (default ``z``)."""
    from . import diffusion

    fn = model.denoiser_fn()
    code = diffusion.stochastic_encode(x0, z, fn, sched, steps)
    return diffusion.decode(code, z if z_new is None else z_new, fn, sched)


def manipulate_motion(seq, chain, model, sched, head: AttributeHead, technique=None, grade=None,
                      steps: int = 20, **guide):
    """Edit the semantic code of a recording and decode it with its original stochastic code.

    Returns ``(sequence, result)``. Link lengths of the output are the chain
    distances measured on ``seq``, since decoding places markers at stored
    distances.
    """
    import torch

    from .pose import PoseFeatures, decode_sequence, encode_sequence

    feats = encode_sequence(seq, chain)
    with torch.no_grad():
        model.eval()
        x0 = _features_tensor(model, feats)
        z = model.semantic_encode(x0)
        res = guided_manipulate(z[0].double().numpy(), head, technique, grade, **guide)
        z_new = torch.as_tensor(res.z[None], dtype=z.dtype)
        x_hat = reconstruct_features(model, sched, x0, z, steps, z_new)
        out = model.denormalize(x_hat)[0].double().numpy()
    edited = PoseFeatures.from_array(out, feats.chain, feats.rate)
    return decode_sequence(edited), res


def embed_sequence(model, seq, chain) -> np.ndarray:
    """Semantic embedding of a single recording."""
    import torch

    from .pose import encode_sequence

    with torch.no_grad():
        model.eval()
        return model.semantic_encode(_features_tensor(model, encode_sequence(seq, chain)))[0].double().numpy()

"""Reversible mapping between marker coordinates and Stiefel rotation features.

Each link (a, b) of a skeleton chain is encoded by the rotation that carries
the unit vector from ``a`` towards the coordinate origin onto the unit vector
from ``a`` to ``b``. The rotation is stored as the first two columns of its
matrix; the link length is kept as a per-sequence constant.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .motion import MotionSequence

EPS_NORM = 1e-12
EPS_ANGLE = 1e-8
UNIT_TOL = 1e-9

FEATURE_MAGIC = b"MDAF"
FEATURE_VERSION = 1


class GeometryError(ValueError):
    """A degenerate configuration where a direction or axis is undefined."""


class ChainError(ValueError):
    pass


# --------------------------------------------------------------------------
# single-link geometry


def _unit(v, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n < EPS_NORM:
        raise GeometryError(f"{what} has (near) zero length")
    return v / n


def _check_unit(k) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64)
    if abs(np.linalg.norm(k) - 1.0) > UNIT_TOL:
        raise GeometryError(f"axis must be a unit vector, got norm {np.linalg.norm(k)}")
    return k


def _orthogonal_axis(v: np.ndarray) -> np.ndarray:
    # Gram-Schmidt of the coordinate axis where v is smallest in magnitude.
    e = np.zeros(3)
    e[np.argmin(np.abs(v))] = 1.0
    w = e - np.dot(e, v) * v
    return w / np.linalg.norm(w)


def axis_angle_between(a, b) -> tuple[np.ndarray, float]:
    """Axis and angle of the rotation about ``a`` taking the origin direction onto ``b``.

    Below ``EPS_ANGLE`` the axis is (0, 0, 1) and the rotation is the
    identity. Within ``EPS_ANGLE`` of pi the axis is an arbitrary but
    deterministic unit vector orthogonal to the origin direction.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a_dir = _unit(-a, "parent marker position (marker at origin)")
    b_dir = _unit(b - a, "link vector (parent and child coincide)")
    c = np.cross(a_dir, b_dir)
    s = np.linalg.norm(c)
    theta = float(np.arctan2(s, np.dot(a_dir, b_dir)))
    if theta < EPS_ANGLE:
        return np.array([0.0, 0.0, 1.0]), 0.0
    if theta > np.pi - EPS_ANGLE:
        return _orthogonal_axis(a_dir), float(np.pi)
    return c / s, theta


def _skew(k: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])


def rodrigues_matrix(k, theta: float) -> np.ndarray:
    k = _check_unit(k)
    K = _skew(k)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def to_stiefel(R) -> np.ndarray:
    return np.array(R, dtype=np.float64)[:, :2].copy()


def from_stiefel(M) -> np.ndarray:
    """Gram-Schmidt completion of a 3x2 block into a proper rotation."""
    M = np.asarray(M, dtype=np.float64)
    r1, r2 = M[:, 0], M[:, 1]
    n1 = np.linalg.norm(r1)
    if n1 < EPS_NORM:
        raise GeometryError("first Stiefel column is zero")
    r1 = r1 / n1
    w = r2 - np.dot(r1, r2) * r1
    n2 = np.linalg.norm(w)
    if n2 < EPS_NORM * max(1.0, np.linalg.norm(r2)):
        raise GeometryError("Stiefel columns are collinear")
    r2 = w / n2
    return np.stack([r1, r2, np.cross(r1, r2)], axis=1)


def angle_of(R) -> float:
    R = np.asarray(R, dtype=np.float64)
    return float(np.arccos(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)))


def axis_of(R, theta: float) -> np.ndarray:
    """Unit k with (R - I) k = 0, signed so that rodrigues_matrix(k, theta) reproduces R."""
    if theta < EPS_ANGLE:
        raise GeometryError("rotation angle is ~0; axis is indeterminate")
    R = np.asarray(R, dtype=np.float64)
    return _axes_of(R[None], np.array([theta]))[0]


def rotate_rodrigues(u, theta: float, v) -> np.ndarray:
    u = _check_unit(u)
    v = np.asarray(v, dtype=np.float64)
    c, s = np.cos(theta), np.sin(theta)
    return v * c + np.cross(u, v) * s + u * np.dot(u, v) * (1.0 - c)


def reconstruct_marker(a, k, theta: float, d: float) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if d <= 0:
        raise GeometryError(f"link distance must be positive, got {d}")
    a_dir = _unit(-a, "parent marker position (marker at origin)")
    k = _unit(k, "rotation axis")
    return rotate_rodrigues(k, theta, a_dir) * d + a


# --------------------------------------------------------------------------
# batched versions over leading axes, used by sequence encode/decode


def _rodrigues_batch(k: np.ndarray, theta: np.ndarray) -> np.ndarray:
    K = np.zeros(k.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -k[..., 2], k[..., 1]
    K[..., 1, 0], K[..., 1, 2] = k[..., 2], -k[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -k[..., 1], k[..., 0]
    s = np.sin(theta)[..., None, None]
    c = np.cos(theta)[..., None, None]
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def _axes_of(R: np.ndarray, theta: np.ndarray) -> np.ndarray:
    # Null vector of (R - I) is the last right-singular vector.
    _, _, vt = np.linalg.svd(R - np.eye(3))
    k = vt[..., -1, :]
    plus = np.linalg.norm(_rodrigues_batch(k, theta) - R, axis=(-2, -1))
    minus = np.linalg.norm(_rodrigues_batch(-k, theta) - R, axis=(-2, -1))
    return np.where((minus < plus)[..., None], -k, k)


def _from_stiefel_batch(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns rotations and a boolean mask of invalid blocks."""
    r1, r2 = M[..., :, 0], M[..., :, 1]
    n1 = np.linalg.norm(r1, axis=-1, keepdims=True)
    bad = n1[..., 0] < EPS_NORM
    r1 = r1 / np.where(n1 < EPS_NORM, 1.0, n1)
    w = r2 - np.sum(r1 * r2, axis=-1, keepdims=True) * r1
    n2 = np.linalg.norm(w, axis=-1, keepdims=True)
    tol = EPS_NORM * np.maximum(1.0, np.linalg.norm(r2, axis=-1, keepdims=True))
    bad |= (n2 < tol)[..., 0]
    r2 = w / np.where(n2 < tol, 1.0, n2)
    return np.stack([r1, r2, np.cross(r1, r2)], axis=-1), bad


# --------------------------------------------------------------------------
# chain and features


@dataclass(frozen=True)
class SkeletonChain:
    """Rooted tree of marker links, listed parents-before-children."""

    root: str
    links: tuple[tuple[str, str], ...]
    distances: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "links", tuple((str(p), str(c)) for p, c in self.links))
        if self.distances is not None:
            object.__setattr__(self, "distances", tuple(float(d) for d in self.distances))
        problems = self.problems()
        if problems:
            raise ChainError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        seen = {self.root}
        for i, (parent, child) in enumerate(self.links):
            if parent not in seen:
                out.append(f"link {i} ({parent}->{child}): parent not yet placed (links must be topologically ordered)")
            if child in seen:
                out.append(f"link {i} ({parent}->{child}): child {child!r} already placed")
            seen.add(child)
        if self.distances is not None:
            if len(self.distances) != len(self.links):
                out.append(f"{len(self.distances)} distances for {len(self.links)} links")
            out += [f"link {i}: distance must be > 0, got {d}" for i, d in enumerate(self.distances) if not d > 0]
        return out

    @property
    def markers(self) -> tuple[str, ...]:
        return (self.root,) + tuple(c for _, c in self.links)

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def feature_dim(self) -> int:
        return 3 + 6 * self.n_links

    def with_distances(self, distances) -> "SkeletonChain":
        return replace(self, distances=tuple(float(d) for d in distances))

    def to_json(self) -> dict:
        out = {"root": self.root, "links": [{"parent": p, "child": c} for p, c in self.links]}
        if self.distances is not None:
            out["distances"] = list(self.distances)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "SkeletonChain":
        links = tuple((lk["parent"], lk["child"]) for lk in obj["links"])
        return cls(obj["root"], links, obj.get("distances"))

    @classmethod
    def load(cls, path) -> "SkeletonChain":
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


@dataclass(frozen=True, eq=False)
class PoseFeatures:
    """Root trajectory (frames, 3) and per-link Stiefel blocks (frames, links, 3, 2)."""

    root: np.ndarray
    stiefel: np.ndarray
    chain: SkeletonChain
    rate: float = 25.0

    def __post_init__(self):
        root = np.array(self.root, dtype=np.float64)
        st = np.array(self.stiefel, dtype=np.float64)
        if root.ndim != 2 or root.shape[1] != 3:
            raise ValueError(f"root trajectory must be (frames, 3), got {root.shape}")
        if st.shape != (root.shape[0], self.chain.n_links, 3, 2):
            raise ValueError(f"stiefel block must be {(root.shape[0], self.chain.n_links, 3, 2)}, got {st.shape}")
        root.setflags(write=False)
        st.setflags(write=False)
        object.__setattr__(self, "root", root)
        object.__setattr__(self, "stiefel", st)

    @property
    def frames(self) -> int:
        return self.root.shape[0]

    def to_array(self) -> np.ndarray:
        """Flat (frames, 3 + 6 * links) layout: root, then r1, r2 of each link."""
        st = np.swapaxes(self.stiefel, -1, -2).reshape(self.frames, -1)
        return np.concatenate([self.root, st], axis=1)

    @classmethod
    def from_array(cls, x: np.ndarray, chain: SkeletonChain, rate: float = 25.0) -> "PoseFeatures":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != chain.feature_dim:
            raise ValueError(f"expected (frames, {chain.feature_dim}) features, got {x.shape}")
        st = x[:, 3:].reshape(x.shape[0], chain.n_links, 2, 3)
        return cls(x[:, :3], np.swapaxes(st, -1, -2), chain, rate)


def link_lengths(seq: MotionSequence, chain: SkeletonChain) -> np.ndarray:
    """Per-frame length of every link, shape (frames, links)."""
    idx = {m: seq.index(m) for m in chain.markers}
    p = seq.coords[:, [idx[a] for a, _ in chain.links]]
    c = seq.coords[:, [idx[b] for _, b in chain.links]]
    return np.linalg.norm(c - p, axis=-1)


def _stiefel_of_links(parent: np.ndarray, child: np.ndarray) -> np.ndarray:
    """Vectorized axis_angle_between -> rodrigues_matrix -> to_stiefel over frames."""
    a_dir = -parent / np.linalg.norm(parent, axis=-1, keepdims=True)
    v = child - parent
    b_dir = v / np.linalg.norm(v, axis=-1, keepdims=True)
    c = np.cross(a_dir, b_dir)
    s = np.linalg.norm(c, axis=-1)
    theta = np.arctan2(s, np.sum(a_dir * b_dir, axis=-1))
    k = np.tile([0.0, 0.0, 1.0], (len(theta), 1))
    mid = (theta >= EPS_ANGLE) & (theta <= np.pi - EPS_ANGLE)
    k[mid] = c[mid] / s[mid, None]
    for i in np.flatnonzero(theta > np.pi - EPS_ANGLE):
        k[i] = _orthogonal_axis(a_dir[i])
        theta[i] = np.pi
    theta[theta < EPS_ANGLE] = 0.0
    return _rodrigues_batch(k, theta)[..., :, :2]


def encode_sequence(seq: MotionSequence, chain: SkeletonChain, distances: str = "measured") -> PoseFeatures:
    """Coordinates -> features. ``distances`` is "measured" (per-link mean) or "provided"."""
    missing = [m for m in chain.markers if m not in seq.markers]
    if missing:
        raise ChainError(f"chain markers missing from sequence: {', '.join(missing)}")
    idx = {m: seq.index(m) for m in chain.markers}
    X = seq.coords
    blocks = np.empty((seq.frames, chain.n_links, 3, 2))
    for j, (pa, ch) in enumerate(chain.links):
        a, b = X[:, idx[pa]], X[:, idx[ch]]
        at_origin = np.linalg.norm(a, axis=-1) < EPS_NORM
        coincide = np.linalg.norm(b - a, axis=-1) < EPS_NORM
        if at_origin.any():
            raise GeometryError(f"link {j} ({pa}->{ch}): parent at origin in frame {int(np.argmax(at_origin))}")
        if coincide.any():
            raise GeometryError(f"link {j} ({pa}->{ch}): parent and child coincide in frame {int(np.argmax(coincide))}")
        blocks[:, j] = _stiefel_of_links(a, b)
    if distances == "measured":
        chain = chain.with_distances(link_lengths(seq, chain).mean(axis=0))
    elif distances == "provided":
        if chain.distances is None:
            raise ChainError("distances='provided' but the chain stores no distances")
    else:
        raise ValueError(f"distances must be 'measured' or 'provided', got {distances!r}")
    return PoseFeatures(X[:, idx[chain.root]].copy(), blocks, chain, seq.rate)


def decode_sequence(features: PoseFeatures, chain: SkeletonChain | None = None) -> MotionSequence:
    """Features -> coordinates, one link at a time in chain order.

    Each child is placed by from_stiefel -> angle_of -> axis_of ->
    reconstruct_marker using the chain's stored distance.
    """
    chain = chain or features.chain
    if chain.distances is None:
        raise ChainError("chain has no stored distances")
    if chain.n_links != features.chain.n_links:
        raise ChainError("features and chain disagree on link count")
    R, bad = _from_stiefel_batch(features.stiefel)
    if bad.any():
        f, j = np.argwhere(bad)[0]
        raise GeometryError(f"invalid Stiefel block (zero or collinear columns) at frame {f}, link {j}")
    theta = np.arccos(np.clip((np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0))
    moving = theta >= EPS_ANGLE
    k = np.zeros(theta.shape + (3,))
    k[moving] = _axes_of(R[moving], theta[moving])

    pos = {chain.root: features.root}
    for j, (pa, ch) in enumerate(chain.links):
        a = pos[pa]
        na = np.linalg.norm(a, axis=-1, keepdims=True)
        if (na < EPS_NORM).any():
            raise GeometryError(f"link {j} ({pa}->{ch}): parent at origin in frame {int(np.argmax(na[:, 0] < EPS_NORM))}")
        v = -a / na
        u, th = k[:, j], theta[:, j][:, None]
        rotated = v * np.cos(th) + np.cross(u, v) * np.sin(th) + u * np.sum(u * v, axis=-1, keepdims=True) * (1 - np.cos(th))
        pos[ch] = rotated * chain.distances[j] + a
    coords = np.stack([pos[m] for m in chain.markers], axis=1)
    return MotionSequence(chain.markers, coords, features.rate)


def joint_positions(x: torch.Tensor, chain: SkeletonChain, distances: torch.Tensor | None = None) -> torch.Tensor:
    """Differentiable reconstruction of marker positions from flat features.

    ``x`` has shape (..., frames, 3 + 6 * links); returns (..., frames,
    markers, 3) in ``chain.markers`` order. The rotation is applied as a
    matrix, which equals the axis/angle route of ``decode_sequence``.
    ``distances`` (broadcastable to (..., frames, links)) overrides the
    chain's stored link lengths, e.g. per sample in a batch.
    """
    if distances is None:
        if chain.distances is None:
            raise ChainError("chain has no stored distances")
        distances = torch.as_tensor(chain.distances, dtype=x.dtype, device=x.device)
    d = distances.unsqueeze(-1)
    blocks = x[..., 3:].reshape(*x.shape[:-1], chain.n_links, 2, 3)
    r1 = blocks[..., 0, :]
    r1 = r1 / r1.norm(dim=-1, keepdim=True)
    r2 = blocks[..., 1, :]
    r2 = r2 - (r1 * r2).sum(-1, keepdim=True) * r1
    r2 = r2 / r2.norm(dim=-1, keepdim=True)
    r3 = torch.cross(r1, r2, dim=-1)
    R = torch.stack([r1, r2, r3], dim=-1)
    pos = {chain.root: x[..., :3]}
    for j, (pa, ch) in enumerate(chain.links):
        a = pos[pa]
        v = -a / a.norm(dim=-1, keepdim=True)
        pos[ch] = a + d[..., j, :] * (R[..., j, :, :] @ v.unsqueeze(-1)).squeeze(-1)
    return torch.stack([pos[m] for m in chain.markers], dim=-2)


def anatomy_report(dataset: Sequence[MotionSequence], chain: SkeletonChain) -> dict:
    """Link-length spread and decode(encode(.)) error over a dataset, in meters."""
    stds, errors = [], []
    for seq in dataset:
        stds.append(link_lengths(seq, chain).std(axis=0))
        feats = encode_sequence(seq, chain)
        rec = decode_sequence(feats)
        order = [seq.index(m) for m in chain.markers]
        errors.append(np.linalg.norm(rec.coords - seq.coords[:, order], axis=-1).mean())
    stds = np.array(stds)
    return {
        "link_distance_std": dict(zip(["%s-%s" % lk for lk in chain.links], stds.mean(axis=0).tolist())),
        "mean_link_distance_std": float(stds.mean()),
        "mean_reconstruction_error": float(np.mean(errors)),
        "max_sequence_error": float(np.max(errors)),
        "sequences": len(errors),
    }


# --------------------------------------------------------------------------
# feature container


def save_features(features: PoseFeatures, path) -> None:
    chain_json = json.dumps(features.chain.to_json()).encode("utf-8")
    out = bytearray(FEATURE_MAGIC)
    out += struct.pack("<IIId", FEATURE_VERSION, features.frames, features.chain.n_links, features.rate)
    out += features.root.astype("<f8").tobytes()
    out += np.swapaxes(features.stiefel, -1, -2).astype("<f8").tobytes()
    out += struct.pack("<I", len(chain_json)) + chain_json
    Path(path).write_bytes(bytes(out))


def load_features(path) -> PoseFeatures:
    data = Path(path).read_bytes()
    head = struct.calcsize("<IIId")
    if data[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: bad magic, not an MDAF feature file")
    if len(data) < 4 + head:
        raise ValueError(f"{path}: truncated header")
    version, frames, links, rate = struct.unpack("<IIId", data[4:4 + head])
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos = 4 + head
    n_root, n_st = frames * 3 * 8, frames * links * 6 * 8
    if len(data) < pos + n_root + n_st + 4:
        raise ValueError(f"{path}: truncated data blocks")
    root = np.frombuffer(data, "<f8", frames * 3, pos).reshape(frames, 3)
    pos += n_root
    st = np.frombuffer(data, "<f8", frames * links * 6, pos).reshape(frames, links, 2, 3)
    pos += n_st
    (n,) = struct.unpack("<I", data[pos:pos + 4])
    chain = SkeletonChain.from_json(json.loads(data[pos + 4:pos + 4 + n].decode("utf-8")))
    return PoseFeatures(root, np.swapaxes(st, -1, -2), chain, rate)

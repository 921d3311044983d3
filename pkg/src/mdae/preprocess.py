"""Recording clean-up: decimation, outlier flagging, spatial normalization, mirroring."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .motion import MotionSequence

UP = np.array([0.0, 0.0, 1.0])


def _require(seq: MotionSequence, names: Sequence[str]) -> list[int]:
    missing = [n for n in names if n not in seq.markers]
    if missing:
        raise KeyError(f"unknown marker(s): {', '.join(missing)}")
    return [seq.markers.index(n) for n in names]


def _decimation_factor(rate: float, target: float) -> int:
    factor = rate / target
    if target <= 0 or not math.isclose(factor, round(factor), rel_tol=0, abs_tol=1e-9) or round(factor) < 1:
        raise ValueError(f"cannot decimate {rate} Hz to {target} Hz: factor {factor:g} is not a positive integer")
    return int(round(factor))


def downsample(seq: MotionSequence, target_rate: float) -> MotionSequence:
    """Keep every (rate / target_rate)-th frame starting at frame 0. No filtering."""
    k = _decimation_factor(seq.rate, target_rate)
    contacts = seq.contacts[::k] if seq.contacts is not None else None
    return replace(seq, coords=seq.coords[::k], rate=seq.rate / k, contacts=contacts)


def trim(seq: MotionSequence, start: int, end: int | None) -> MotionSequence:
    sl = slice(start, end)
    contacts = seq.contacts[sl] if seq.contacts is not None else None
    out = replace(seq, coords=seq.coords[sl], contacts=contacts)
    if out.frames == 0:
        raise ValueError(f"trim {start}:{end} leaves no frames")
    return out


@dataclass
class OutlierReport:
    stats: dict[str, list[float]]
    zscores: dict[str, list[float]]
    flags: list[dict] = field(default_factory=list)
    static_edges: list[dict] = field(default_factory=list)

    def flagged(self, statistic: str | None = None) -> list[int]:
        return sorted({f["index"] for f in self.flags if statistic is None or f["statistic"] == statistic})

    def to_json(self) -> dict:
        return {"stats": self.stats, "zscores": self.zscores, "flags": self.flags, "static_edges": self.static_edges}


def _zscores(values: np.ndarray) -> np.ndarray:
    sd = values.std()
    if sd == 0:
        return np.zeros_like(values)
    return (values - values.mean()) / sd


def _static_run(speed: np.ndarray, thresh: float) -> tuple[int, int]:
    still = speed < thresh
    head = int(np.argmin(still)) if not still.all() else len(still)
    tail = int(np.argmin(still[::-1])) if not still.all() else len(still)
    return head, tail


def detect_outliers(
    sequences: Sequence[MotionSequence],
    z_thresh: float = 3.0,
    head_marker: str | None = "HEAD",
    static_speed: float = 0.02,
    ids: Sequence[str] | None = None,
) -> OutlierReport:
    """Flag recordings whose duration, total displacement or peak head speed is atypical.

    z-scores use the population standard deviation; a zero spread gives z = 0.
    Nothing is removed. Near-static leading/trailing frames (all markers below
    ``static_speed`` m/s) are listed for manual trimming.
    """
    if len(sequences) < 3:
        raise ValueError("outlier detection needs at least 3 sequences")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(sequences))]
    duration = np.array([s.frames / s.rate for s in sequences])
    displacement = np.array([np.linalg.norm(np.diff(s.coords, axis=0), axis=-1).sum() for s in sequences])
    stats = {"duration": duration, "displacement": displacement}
    if head_marker is not None:
        head_speed = []
        for s in sequences:
            if head_marker not in s.markers:
                raise KeyError(f"head marker {head_marker!r} missing from a sequence")
            h = s.marker(head_marker)
            v = np.linalg.norm(np.diff(h, axis=0), axis=-1) * s.rate if s.frames > 1 else np.zeros(1)
            head_speed.append(v.max())
        stats["head_speed"] = np.array(head_speed)

    report = OutlierReport({k: v.tolist() for k, v in stats.items()}, {})
    for name, values in stats.items():
        z = _zscores(values)
        report.zscores[name] = z.tolist()
        for i in np.flatnonzero(np.abs(z) > z_thresh):
            report.flags.append({"index": int(i), "id": ids[i], "statistic": name, "z": float(z[i]), "value": float(values[i])})
    for i, s in enumerate(sequences):
        if s.frames < 2:
            continue
        speed = np.linalg.norm(np.diff(s.coords, axis=0), axis=-1).max(axis=1) * s.rate
        head, tail = _static_run(speed, static_speed)
        if head or tail:
            report.static_edges.append({"index": i, "id": ids[i], "static_start_frames": head, "static_end_frames": tail})
    return report


def center_to_origin(seq: MotionSequence, root_marker: str) -> MotionSequence:
    """Translate horizontally so the root marker starts at x = y = 0. Height is kept."""
    (r,) = _require(seq, [root_marker])
    shift = np.array([seq.coords[0, r, 0], seq.coords[0, r, 1], 0.0])
    return seq.with_coords(seq.coords - shift)


def facing_normal(seq: MotionSequence, facing_markers: tuple[str, str], frame: int = 0) -> np.ndarray:
    """Horizontal unit vector the body faces: up x (right - left)."""
    li, ri = _require(seq, facing_markers)
    lr = seq.coords[frame, ri] - seq.coords[frame, li]
    n = np.cross(UP, lr)
    n[2] = 0.0
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        raise ValueError("facing markers coincide horizontally; facing direction undefined")
    return n / norm


def rotate_to_facing(seq: MotionSequence, facing_markers: tuple[str, str]) -> MotionSequence:
    """Rotate about the vertical axis so the frame-0 facing normal points along -y."""
    n = facing_normal(seq, facing_markers)
    angle = math.atan2(-1.0, 0.0) - math.atan2(n[1], n[0])
    c, s = math.cos(angle), math.sin(angle)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return seq.with_coords(seq.coords @ R.T)


def mirror_left_to_right(seq: MotionSequence, name_pairs: Sequence[tuple[str, str]]) -> MotionSequence:
    """Negate x for every marker, then swap the names of each (left, right) pair."""
    _require(seq, [n for pair in name_pairs for n in pair])
    swap = {}
    for left, right in name_pairs:
        swap[left], swap[right] = right, left
    coords = seq.coords * np.array([-1.0, 1.0, 1.0])
    markers = tuple(swap.get(m, m) for m in seq.markers)
    # Keep the original marker order so downstream column indices stay valid.
    order = [markers.index(m) for m in seq.markers]
    out = seq.with_coords(coords[:, order], seq.markers)
    if seq.contacts is not None:
        feet = tuple(swap.get(m, m) for m in seq.foot_markers)
        c_order = [feet.index(m) for m in seq.foot_markers]
        out = replace(out, contacts=seq.contacts[:, c_order])
    return out


def center_wand_markers(seq: MotionSequence, triples: Sequence[tuple[str, str, str]]) -> MotionSequence:
    """Place every wand marker at the midpoint of its two neighbors."""
    coords = seq.coords.copy()
    for a, wand, b in triples:
        ia, iw, ib = _require(seq, [a, wand, b])
        coords[:, iw] = 0.5 * (coords[:, ia] + coords[:, ib])
    return seq.with_coords(coords)

"""Synthetic karate-like motions over a rigid marker chain.

Every technique is a parametric family of limb trajectories. The skill scalar
(grade value in [0, 1]) shortens the execution, raises its amplitude and
removes tremor. Link lengths come from a per-participant anatomy and are
exactly constant over frames unless ``link_jitter`` is set.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .motion import (
    TECHNIQUES,
    DatasetManifest,
    ManifestEntry,
    MotionSequence,
    SampleMeta,
    grade_value,
    save_sequence,
    with_contacts,
)
from .pose import SkeletonChain

# Non-canonical full-body set; chain hangs from the head so most links point
# away from the origin direction and stay clear of the antiparallel case.
DEFAULT_MARKERS = (
    "HEAD", "NECK", "PELV",
    "LSHO", "LELB", "LWRA", "RSHO", "RELB", "RWRA",
    "LHIP", "LKNE", "LANK", "LTOE", "RHIP", "RKNE", "RANK", "RTOE",
)
DEFAULT_LINKS = (
    ("HEAD", "NECK"), ("NECK", "PELV"),
    ("NECK", "LSHO"), ("LSHO", "LELB"), ("LELB", "LWRA"),
    ("NECK", "RSHO"), ("RSHO", "RELB"), ("RELB", "RWRA"),
    ("PELV", "LHIP"), ("LHIP", "LKNE"), ("LKNE", "LANK"), ("LANK", "LTOE"),
    ("PELV", "RHIP"), ("RHIP", "RKNE"), ("RKNE", "RANK"), ("RANK", "RTOE"),
)
BASE_LENGTHS = (0.22, 0.50, 0.18, 0.30, 0.26, 0.18, 0.30, 0.26, 0.10, 0.44, 0.42, 0.14, 0.10, 0.44, 0.42, 0.14)
FOOT_MARKERS = ("LANK", "LTOE", "RANK", "RTOE")
MIRROR_PAIRS = (
    ("LSHO", "RSHO"), ("LELB", "RELB"), ("LWRA", "RWRA"),
    ("LHIP", "RHIP"), ("LKNE", "RKNE"), ("LANK", "RANK"), ("LTOE", "RTOE"),
)
FACING_MARKERS = ("LHIP", "RHIP")


def default_chain() -> SkeletonChain:
    return SkeletonChain("HEAD", DEFAULT_LINKS)


@dataclass
class SynthConfig:
    techniques: tuple[str, ...] = ("RP", "FK")
    grade_levels: tuple[int, ...] = (0, 3, 6, 9, 12)
    samples_per_cell: int = 25
    frames: int = 50
    rate: float = 25.0
    participants: int = 6
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    link_jitter: float = 0.0
    marker_noise: float = 0.0
    foot_markers: tuple[str, ...] = field(default=FOOT_MARKERS)

    def check(self) -> None:
        if len(self.techniques) < 2:
            raise ValueError("synthetic config needs at least two technique classes")
        bad = [t for t in self.techniques if t not in TECHNIQUES]
        if bad:
            raise ValueError(f"unknown techniques {bad}; choose from {TECHNIQUES}")
        if len(self.grade_levels) < 1 or any(not 0 <= g <= 12 for g in self.grade_levels):
            raise ValueError("grade_levels must be non-empty grade indices in 0..12")
        if self.samples_per_cell < 1 or self.frames < 2 or self.rate <= 0 or self.participants < 1:
            raise ValueError("samples_per_cell >= 1, frames >= 2, rate > 0 and participants >= 1 required")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError("split_fractions must sum to 1")


def _direction(flex, abduct=0.0, side=1.0):
    """Unit limb direction: hangs down at 0, swings forward (-y) with flex, sideways with abduct."""
    flex, abduct = np.broadcast_arrays(np.asarray(flex, float), np.asarray(abduct, float))
    v = np.stack([side * np.sin(abduct), -np.sin(flex) * np.cos(abduct), -np.cos(flex) * np.cos(abduct)], axis=-1)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _technique_angles(technique: str, b: np.ndarray, e: np.ndarray, amp: float) -> dict:
    """Joint angles per frame for a technique given its activation profiles."""
    z = np.zeros_like(b)
    ang = {
        "torso": 0.05 + z, "head": 0.02 + z,
        "l_upper": 0.25 + z, "l_fore": 1.7 + z, "l_abd": 0.25 + z,
        "r_upper": 0.25 + z, "r_fore": 1.7 + z, "r_abd": 0.25 + z,
        "l_thigh": 0.05 + z, "l_shin": 0.0 + z, "l_abd_leg": 0.05 + z,
        "r_thigh": 0.05 + z, "r_shin": 0.0 + z, "r_abd_leg": 0.05 + z,
    }
    a = amp * b
    if technique == "RP":
        ang["r_upper"] = 0.25 + a * 1.3
        ang["r_fore"] = 1.7 - a * 0.15
        ang["r_abd"] = 0.25 - a * 0.2
        ang["l_upper"] = 0.25 - a * 0.5
        ang["torso"] = 0.05 + a * 0.1
    elif technique == "FK":
        ang["r_thigh"] = 0.05 + a * 1.45
        ang["r_shin"] = ang["r_thigh"] - 1.3 * a * (1.0 - e)
        ang["torso"] = 0.05 - a * 0.2
    elif technique in ("LRK", "HRK"):
        lift = 1.0 if technique == "LRK" else 1.5
        ang["r_thigh"] = 0.05 + a * lift
        ang["r_abd_leg"] = 0.05 + a * 0.8
        ang["r_shin"] = ang["r_thigh"] - 1.2 * a * (1.0 - e)
        ang["torso"] = 0.05 - a * 0.15
    elif technique == "SBK":
        ang["r_thigh"] = 0.05 - a * 1.2
        ang["r_shin"] = ang["r_thigh"] + 0.8 * a * (1.0 - e)
        ang["torso"] = 0.05 + a * 0.6
    else:
        raise ValueError(f"unknown technique {technique!r}")
    return ang


def _pose_sequence(technique, skill, lengths, t, rng, jitter) -> np.ndarray:
    """Marker coordinates (frames, markers, 3) built link by link from the head."""
    frames = len(t)
    onset = 0.2 + 0.2 * rng.random()
    duration = (1.2 - 0.5 * skill) * rng.uniform(0.93, 1.07)
    amp = rng.uniform(0.92, 1.08)
    tau = np.clip((t - onset) / duration, 0.0, 1.0)
    b = np.sin(np.pi * tau) ** 2
    e = np.sin(np.pi * tau) ** 4
    ang = _technique_angles(technique, b, e, amp)

    # Low-skill executions carry a visible tremor on every joint angle.
    tremor = 0.10 * (1.0 - skill)
    for key in ang:
        f, ph = rng.uniform(2.0, 4.0), rng.uniform(0, 2 * np.pi)
        ang[key] = ang[key] + tremor * b * np.sin(2 * np.pi * f * t + ph) + 0.01 * np.sin(2 * np.pi * 0.5 * t + ph)

    dirs = {
        ("HEAD", "NECK"): _direction(ang["head"]),
        ("NECK", "PELV"): _direction(ang["torso"]),
        ("NECK", "LSHO"): _direction(np.full(frames, 0.0), np.full(frames, 1.35), 1.0),
        ("NECK", "RSHO"): _direction(np.full(frames, 0.0), np.full(frames, 1.35), -1.0),
        ("LSHO", "LELB"): _direction(ang["l_upper"], ang["l_abd"], 1.0),
        ("LELB", "LWRA"): _direction(ang["l_fore"], ang["l_abd"], 1.0),
        ("RSHO", "RELB"): _direction(ang["r_upper"], ang["r_abd"], -1.0),
        ("RELB", "RWRA"): _direction(ang["r_fore"], ang["r_abd"], -1.0),
        ("PELV", "LHIP"): _direction(np.full(frames, 0.0), np.full(frames, 1.2), 1.0),
        ("PELV", "RHIP"): _direction(np.full(frames, 0.0), np.full(frames, 1.2), -1.0),
        ("LHIP", "LKNE"): _direction(ang["l_thigh"], ang["l_abd_leg"], 1.0),
        ("LKNE", "LANK"): _direction(ang["l_shin"], ang["l_abd_leg"], 1.0),
        ("LANK", "LTOE"): _direction(ang["l_shin"] + 1.45, ang["l_abd_leg"], 1.0),
        ("RHIP", "RKNE"): _direction(ang["r_thigh"], ang["r_abd_leg"], -1.0),
        ("RKNE", "RANK"): _direction(ang["r_shin"], ang["r_abd_leg"], -1.0),
        ("RANK", "RTOE"): _direction(ang["r_shin"] + 1.45, ang["r_abd_leg"], -1.0),
    }
    pos = {"HEAD": np.zeros((frames, 3))}
    for (pa, ch), length in zip(DEFAULT_LINKS, lengths):
        ln = length + (jitter * rng.standard_normal(frames) if jitter else 0.0)
        pos[ch] = pos[pa] + dirs[(pa, ch)] * np.asarray(ln)[..., None]
    coords = np.stack([pos[m] for m in DEFAULT_MARKERS], axis=1)

    # The left (stance) foot stays planted: translate every frame so LTOE holds its frame-0 spot.
    toe = DEFAULT_MARKERS.index("LTOE")
    coords += (coords[0, toe] - coords[:, toe])[:, None, :]
    # Ground: the lowest foot marker of frame 0 sits at marker height 0.02 m.
    foot = [DEFAULT_MARKERS.index(m) for m in FOOT_MARKERS]
    coords[..., 2] += 0.02 - coords[0, foot, 2].min()
    return coords


def generate_synthetic_dataset(config: SynthConfig | None = None, seed: int = 0):
    """Return (sequences, manifest); deterministic for a fixed seed."""
    config = config or SynthConfig()
    config.check()
    rng = np.random.default_rng(seed)
    base = np.array(BASE_LENGTHS)
    anatomy = [base * rng.uniform(0.9, 1.1) * rng.uniform(0.96, 1.04, size=base.shape) for _ in range(config.participants)]
    # Arm and leg lengths stay left/right symmetric.
    for lengths in anatomy:
        lengths[5:8] = lengths[2:5]
        lengths[12:16] = lengths[8:12]
    t = np.arange(config.frames) / config.rate

    sequences, entries = [], []
    n_train = config.split_fractions[0]
    n_val = config.split_fractions[1]
    for technique in config.techniques:
        for grade in config.grade_levels:
            order = rng.permutation(config.samples_per_cell)
            splits = np.empty(config.samples_per_cell, dtype=object)
            cut1 = int(round(n_train * config.samples_per_cell))
            cut2 = cut1 + int(round(n_val * config.samples_per_cell))
            splits[order[:cut1]] = "train"
            splits[order[cut1:cut2]] = "validation"
            splits[order[cut2:]] = "test"
            for k in range(config.samples_per_cell):
                p = int(rng.integers(config.participants))
                coords = _pose_sequence(technique, grade_value(grade), anatomy[p], t, rng, config.link_jitter)
                if config.marker_noise:
                    coords = coords + config.marker_noise * rng.standard_normal(coords.shape)
                seq = MotionSequence(DEFAULT_MARKERS, coords, config.rate)
                seq = with_contacts(seq, config.foot_markers)
                i = len(sequences)
                sequences.append(seq)
                meta = SampleMeta(participant=f"P{p:02d}", technique=technique, grade_index=int(grade))
                entries.append(ManifestEntry(f"seq_{i:04d}.mdae", meta, str(splits[k])))
    return sequences, DatasetManifest(entries)


def write_dataset(sequences, manifest: DatasetManifest, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for seq, entry in zip(sequences, manifest):
        save_sequence(seq, out / entry.path)
    manifest.save(out / "manifest.json")
    default_chain().save(out / "chain.json")
    return out

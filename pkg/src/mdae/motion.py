"""Motion capture data model, file formats and dataset manifests."""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

TECHNIQUES = ("RP", "FK", "LRK", "HRK", "SBK")
N_GRADES = 13
SPLITS = ("train", "validation", "test")
LIMB_SIDES = ("left", "right")

BINARY_MAGIC = b"MDAE"
BINARY_VERSION = 1

_UNIT_SCALE = {"m": 1.0, "cm": 0.01, "mm": 0.001}


class MotionFormatError(ValueError):
    """Raised when a motion file cannot be parsed or fails validation."""


def grade_value(grade_index: int) -> float:
    """Map a grade index (9th kyu = 0 ... 4th dan = 12) onto [0, 1]."""
    return grade_index / (N_GRADES - 1)


@dataclass(frozen=True, eq=False)
class MotionSequence:
    """Marker trajectories of one recording.

    ``coords`` has shape (frames, markers, 3) in meters. ``contacts``, when
    present, has shape (frames, len(foot_markers)) with 0/1 entries.
    """

    markers: tuple[str, ...]
    coords: np.ndarray
    rate: float
    contacts: np.ndarray | None = None
    foot_markers: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "markers", tuple(self.markers))
        object.__setattr__(self, "foot_markers", tuple(self.foot_markers))
        coords = np.array(self.coords, dtype=np.float64)
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        if self.contacts is not None:
            contacts = np.array(self.contacts, dtype=np.uint8)
            contacts.setflags(write=False)
            object.__setattr__(self, "contacts", contacts)

    @property
    def frames(self) -> int:
        return self.coords.shape[0]

    def index(self, name: str) -> int:
        try:
            return self.markers.index(name)
        except ValueError:
            raise KeyError(f"unknown marker {name!r}") from None

    def marker(self, name: str) -> np.ndarray:
        return self.coords[:, self.index(name)]

    def with_coords(self, coords: np.ndarray, markers: Sequence[str] | None = None) -> "MotionSequence":
        return replace(self, coords=coords, markers=tuple(markers) if markers is not None else self.markers)


@dataclass(frozen=True)
class SampleMeta:
    participant: str
    technique: str
    grade_index: int
    limb_side: str = "right"

    def __post_init__(self):
        if self.technique not in TECHNIQUES:
            raise ValueError(f"technique must be one of {TECHNIQUES}, got {self.technique!r}")
        if not 0 <= int(self.grade_index) < N_GRADES:
            raise ValueError(f"grade_index must be in 0..{N_GRADES - 1}, got {self.grade_index}")
        if self.limb_side not in LIMB_SIDES:
            raise ValueError(f"limb_side must be one of {LIMB_SIDES}, got {self.limb_side!r}")

    @property
    def grade(self) -> float:
        return grade_value(self.grade_index)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    meta: SampleMeta
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def to_json(self) -> list[dict]:
        return [
            {
                "path": e.path,
                "participant": e.meta.participant,
                "technique": e.meta.technique,
                "grade_index": e.meta.grade_index,
                "limb_side": e.meta.limb_side,
                "split": e.split,
            }
            for e in self.entries
        ]

    @classmethod
    def from_json(cls, records: list[dict]) -> "DatasetManifest":
        entries = []
        for rec in records:
            meta = SampleMeta(
                participant=str(rec["participant"]),
                technique=rec["technique"],
                grade_index=int(rec["grade_index"]),
                limb_side=rec.get("limb_side", "right"),
            )
            entries.append(ManifestEntry(str(rec["path"]), meta, rec["split"]))
        return cls(entries)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_json(json.loads(Path(path).read_text()))

    def check_files(self, root=".") -> list[str]:
        """Return problems with referenced files; empty when all load and validate."""
        problems = []
        for e in self.entries:
            p = Path(root) / e.path
            if not p.exists():
                problems.append(f"{e.path}: missing")
                continue
            try:
                load_sequence(p)
            except (MotionFormatError, OSError) as exc:
                problems.append(f"{e.path}: {exc}")
        return problems


def validate_sequence(seq: MotionSequence) -> list[str]:
    """List every violated invariant with its location. Empty means valid."""
    findings = []
    coords = seq.coords
    if coords.ndim != 3 or coords.shape[2] != 3:
        return [f"coords: expected shape (frames, markers, 3), got {coords.shape}"]
    if coords.shape[1] != len(seq.markers):
        findings.append(f"coords: {coords.shape[1]} marker columns but {len(seq.markers)} marker names")
    if len(set(seq.markers)) != len(seq.markers):
        findings.append("markers: duplicate marker names")
    if not (seq.rate > 0 and math.isfinite(seq.rate)):
        findings.append(f"rate: must be positive, got {seq.rate}")
    bad = np.argwhere(~np.isfinite(coords))
    for f, m in sorted({(int(f), int(m)) for f, m, _ in bad}):
        name = seq.markers[m] if m < len(seq.markers) else str(m)
        findings.append(f"coords: non-finite value at frame {f}, marker {name}")
    if seq.contacts is not None:
        if seq.contacts.shape != (coords.shape[0], len(seq.foot_markers)):
            findings.append(
                f"contacts: expected shape {(coords.shape[0], len(seq.foot_markers))}, got {seq.contacts.shape}"
            )
        elif np.any(seq.contacts > 1):
            findings.append("contacts: values must be 0 or 1")
        for name in seq.foot_markers:
            if name not in seq.markers:
                findings.append(f"contacts: foot marker {name!r} not in marker list")
    return findings


def _check(seq: MotionSequence) -> MotionSequence:
    findings = validate_sequence(seq)
    if findings:
        raise MotionFormatError("; ".join(findings))
    return seq


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def load_sequence(path, format: str | None = None, *, rate: float | None = None, units: str | None = None) -> MotionSequence:
    """Read a motion file. ``format`` is inferred from the suffix when omitted.

    CSV files take rate/units from a ``<file>.json`` sidecar unless given here.
    """
    path = Path(path)
    format = format or ("csv" if path.suffix.lower() == ".csv" else "binary")
    if format == "binary":
        return _check(_read_binary(path))
    if format != "csv":
        raise ValueError(f"unknown format {format!r}")

    side = json.loads(_sidecar(path).read_text()) if _sidecar(path).exists() else {}
    rate = rate if rate is not None else side.get("rate")
    if rate is None:
        raise MotionFormatError(f"{path}: sampling rate unknown (no sidecar and no rate given)")
    units = units or side.get("units", "m")
    if units not in _UNIT_SCALE:
        raise MotionFormatError(f"{path}: unknown units {units!r}")

    markers: list[str] = []
    frames: list[list[list[float]]] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["frame", "marker", "x", "y", "z"]:
            raise MotionFormatError(f"{path}:1: expected header frame,marker,x,y,z")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise MotionFormatError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            try:
                frame = int(row[0])
                xyz = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise MotionFormatError(f"{path}:{lineno}: {exc}") from None
            name = row[1]
            if frame == len(frames):
                if frames and len(frames[-1]) != len(markers):
                    raise MotionFormatError(
                        f"{path}:{lineno}: frame {frame - 1} has {len(frames[-1])} markers, expected {len(markers)}"
                    )
                frames.append([])
            elif frame != len(frames) - 1:
                raise MotionFormatError(f"{path}:{lineno}: frames must be contiguous from 0, got {frame}")
            slot = len(frames[-1])
            if frame == 0:
                markers.append(name)
            elif slot >= len(markers) or markers[slot] != name:
                raise MotionFormatError(f"{path}:{lineno}: marker {name!r} out of order or unexpected in frame {frame}")
            if not all(math.isfinite(v) for v in xyz):
                raise MotionFormatError(f"{path}:{lineno}: non-finite coordinate at frame {frame}, marker {name}")
            frames[-1].append(xyz)
    if not frames:
        raise MotionFormatError(f"{path}: no frames")
    if len(frames[-1]) != len(markers):
        raise MotionFormatError(f"{path}: last frame has {len(frames[-1])} markers, expected {len(markers)}")

    coords = np.asarray(frames, dtype=np.float64) * _UNIT_SCALE[units]
    contacts = side.get("contacts")
    seq = MotionSequence(
        markers=tuple(markers),
        coords=coords,
        rate=float(rate),
        contacts=np.asarray(contacts, dtype=np.uint8) if contacts is not None else None,
        foot_markers=tuple(side.get("foot_markers", ())),
    )
    return _check(seq)


def save_sequence(seq: MotionSequence, path, format: str | None = None) -> None:
    path = Path(path)
    format = format or ("csv" if path.suffix.lower() == ".csv" else "binary")
    _check(seq)
    if format == "binary":
        path.write_bytes(_binary_bytes(seq))
        return
    if format != "csv":
        raise ValueError(f"unknown format {format!r}")
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "marker", "x", "y", "z"])
        for f in range(seq.frames):
            for m, name in enumerate(seq.markers):
                w.writerow([f, name, *(repr(float(v)) for v in seq.coords[f, m])])
    side = {"rate": seq.rate, "units": "m"}
    if seq.contacts is not None:
        side["contacts"] = seq.contacts.tolist()
        side["foot_markers"] = list(seq.foot_markers)
    _sidecar(path).write_text(json.dumps(side))


def _name_table(names: Sequence[str]) -> bytes:
    out = bytearray()
    for n in names:
        b = n.encode("utf-8")
        out += struct.pack("<H", len(b)) + b
    return bytes(out)


def _binary_bytes(seq: MotionSequence) -> bytes:
    n_frames, n_markers = seq.coords.shape[:2]
    out = bytearray(BINARY_MAGIC)
    out += struct.pack("<IIId", BINARY_VERSION, n_frames, n_markers, seq.rate)
    out += _name_table(seq.markers)
    out += seq.coords.astype("<f8").tobytes()
    if seq.contacts is None:
        out += struct.pack("<I", 0)
    else:
        out += struct.pack("<I", len(seq.foot_markers))
        out += _name_table(seq.foot_markers)
        out += seq.contacts.astype(np.uint8).tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MotionFormatError(f"{self.path}: truncated file at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def names(self, n: int) -> tuple[str, ...]:
        return tuple(self.take(self.unpack("<H")[0]).decode("utf-8") for _ in range(n))


def _read_binary(path: Path) -> MotionSequence:
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != BINARY_MAGIC:
        raise MotionFormatError(f"{path}: bad magic, not an MDAE motion file")
    version, n_frames, n_markers, rate = r.unpack("<IIId")
    if version != BINARY_VERSION:
        raise MotionFormatError(f"{path}: unsupported version {version}")
    markers = r.names(n_markers)
    coords = np.frombuffer(r.take(8 * 3 * n_frames * n_markers), dtype="<f8").reshape(n_frames, n_markers, 3)
    (n_feet,) = r.unpack("<I")
    contacts, feet = None, ()
    if n_feet:
        feet = r.names(n_feet)
        contacts = np.frombuffer(r.take(n_frames * n_feet), dtype=np.uint8).reshape(n_frames, n_feet)
    bad = np.argwhere(~np.isfinite(coords))
    if len(bad):
        f, m, _ = bad[0]
        raise MotionFormatError(f"{path}: non-finite coordinate at frame {f}, marker {markers[m]}")
    return MotionSequence(markers, coords, rate, contacts, feet)


def derive_foot_contacts(
    seq: MotionSequence,
    foot_markers: Sequence[str],
    height_thresh: float = 0.05,
    speed_thresh: float = 0.1,
) -> np.ndarray:
    """Binary contact mask of shape (frames, len(foot_markers)).

    A foot marker is in contact at frame i when its height is below
    ``height_thresh`` and its speed is below ``speed_thresh``. Speed at frame i
    is the backward difference from frame i-1; frame 0 reuses frame 1's.
    """
    idx = [seq.index(n) for n in foot_markers]
    pos = seq.coords[:, idx]
    if seq.frames > 1:
        step = np.linalg.norm(np.diff(pos, axis=0), axis=-1) * seq.rate
        speed = np.concatenate([step[:1], step], axis=0)
    else:
        speed = np.zeros(pos.shape[:2])
    return ((pos[..., 2] < height_thresh) & (speed < speed_thresh)).astype(np.uint8)


def with_contacts(seq: MotionSequence, foot_markers: Sequence[str], **thresholds) -> MotionSequence:
    """Attach derived contacts unless ground truth for these markers is already stored."""
    if seq.contacts is not None and tuple(seq.foot_markers) == tuple(foot_markers):
        return seq
    mask = derive_foot_contacts(seq, foot_markers, **thresholds)
    return replace(seq, contacts=mask, foot_markers=tuple(foot_markers))

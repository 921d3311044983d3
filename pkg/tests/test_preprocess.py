import numpy as np
import pytest
from scipy.spatial.distance import pdist

from mdae.motion import MotionSequence
from mdae.preprocess import (center_to_origin, center_wand_markers, detect_outliers, downsample, facing_normal,
                             mirror_left_to_right, rotate_to_facing, trim)

PAIRS = [("LANK", "RANK"), ("LHIP", "RHIP")]


def _body(rng, frames=5, yaw=0.0):
    """Hips and ankles of a figure facing -y, then yawed about the vertical."""
    base = np.array([[0.15, 0, 1.0], [-0.15, 0, 1.0], [0.15, 0.05, 0.05], [-0.15, 0.0, 0.05], [0.0, -0.1, 1.6]])
    c, s = np.cos(yaw), np.sin(yaw)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    coords = base @ R.T + np.array([3.0, -2.0, 0.0]) + 0.01 * rng.normal(size=(frames, 5, 3))
    return MotionSequence(("LHIP", "RHIP", "LANK", "RANK", "HEAD"), coords, 250.0)


def _distances(seq, keep=None):
    c = seq.coords if keep is None else seq.coords[:, keep]
    return np.array([pdist(f) for f in c])


def test_downsample_counts():
    seq = MotionSequence(("A",), np.zeros((1000, 1, 3)), 250.0)
    out = downsample(seq, 25.0)
    assert out.frames == 100 and out.rate == 25.0
    assert downsample(seq, 250.0).frames == 1000
    with pytest.raises(ValueError):
        downsample(seq, 60.0)


def test_downsample_composes(rng):
    seq = MotionSequence(("A",), rng.normal(size=(120, 1, 3)), 240.0)
    a = downsample(downsample(seq, 120.0), 40.0)
    b = downsample(seq, 40.0)
    assert np.array_equal(a.coords, b.coords) and a.rate == b.rate


def test_trim_keeps_range(rng):
    seq = MotionSequence(("A",), rng.normal(size=(10, 1, 3)), 25.0)
    assert np.array_equal(trim(seq, 2, 5).coords, seq.coords[2:5])
    with pytest.raises(ValueError):
        trim(seq, 5, 5)


def _clip(frames, amp, rng):
    t = np.arange(frames)[:, None]
    coords = np.stack([amp * np.sin(t / 5 + k) * np.ones((frames, 3)) for k in range(2)], axis=1)
    coords = coords + 0.001 * rng.normal(size=coords.shape)
    return MotionSequence(("HEAD", "A"), coords, 25.0)


def test_outlier_long_clip(rng):
    clips = [_clip(50, 0.2, rng) for _ in range(10)] + [_clip(250, 0.2, rng)]
    rep = detect_outliers(clips, z_thresh=3.0)
    d = np.array([c.frames / c.rate for c in clips])
    z = (d - d.mean()) / d.std()
    np.testing.assert_allclose(rep.zscores["duration"], z)
    assert rep.flagged("duration") == [10]


def test_outlier_identical_dataset(rng):
    clip = _clip(40, 0.2, rng)
    rep = detect_outliers([clip] * 5)
    assert rep.flags == [] and all(v == 0 for v in rep.zscores["duration"])


def test_outlier_static_clip(rng):
    clips = [_clip(50, 0.2, np.random.default_rng(i)) for i in range(12)]
    static = MotionSequence(("HEAD", "A"), np.zeros((50, 2, 3)) + 0.5, 25.0)
    rep = detect_outliers(clips + [static], z_thresh=3.0)
    disp = np.array([np.linalg.norm(np.diff(c.coords, axis=0), axis=-1).sum() for c in clips + [static]])
    np.testing.assert_allclose(rep.stats["displacement"], disp)
    assert 12 in rep.flagged("displacement")
    assert any(e["index"] == 12 for e in rep.static_edges)


def test_outlier_needs_head(rng):
    clips = [MotionSequence(("A",), rng.normal(size=(5, 1, 3)), 25.0) for _ in range(3)]
    with pytest.raises(KeyError):
        detect_outliers(clips, head_marker="HEAD")
    with pytest.raises(ValueError):
        detect_outliers(clips[:2], head_marker=None)


def test_center_to_origin(rng):
    coords = rng.normal(size=(4, 2, 3))
    coords[0, 0] = [3, -2, 1]
    seq = MotionSequence(("R", "X"), coords, 25.0)
    out = center_to_origin(seq, "R")
    np.testing.assert_allclose(out.coords - coords, np.broadcast_to([-3, 2, 0], coords.shape), atol=1e-15)
    assert np.array_equal(center_to_origin(out, "R").coords, out.coords)
    assert np.abs(_distances(out) - _distances(seq)).max() < 1e-12
    with pytest.raises(KeyError):
        center_to_origin(seq, "Q")


def test_rotate_to_facing_from_plus_x(rng):
    seq = _body(rng, yaw=np.pi / 2)  # faces +x
    assert facing_normal(seq, ("LHIP", "RHIP")) @ np.array([1.0, 0, 0]) > 0.99
    out = rotate_to_facing(seq, ("LHIP", "RHIP"))
    n = facing_normal(out, ("LHIP", "RHIP"))
    assert np.abs(n - [0, -1, 0]).max() < 1e-9
    assert n @ np.array([0, -1.0, 0]) >= 1 - 1e-9
    assert np.abs(_distances(out) - _distances(seq)).max() < 1e-12
    np.testing.assert_allclose(out.coords[..., 2], seq.coords[..., 2])


def test_rotate_already_facing_is_identity(rng):
    seq = center_to_origin(_body(rng), "LHIP")
    lr = seq.coords[0, 1] - seq.coords[0, 0]
    c = seq.coords.copy()
    c[:, 1, 1] = c[:, 0, 1] + 0 * lr[1]  # make the frame-0 hip line exactly along x
    seq = seq.with_coords(c)
    out = rotate_to_facing(seq, ("LHIP", "RHIP"))
    assert np.abs(out.coords - seq.coords).max() < 1e-12


def test_rotate_coincident_markers(rng):
    c = np.zeros((3, 2, 3))
    c[:, 1, 2] = 1.0  # vertically stacked: no horizontal separation
    with pytest.raises(ValueError):
        rotate_to_facing(MotionSequence(("L", "R"), c, 25.0), ("L", "R"))


def test_mirror_definition():
    c = np.array([[[0.2, 0, 0], [-0.2, 0, 0]], [[0.3, 1, 0], [-0.1, 2, 0]]])
    seq = MotionSequence(("LANK", "RANK"), c, 25.0)
    out = mirror_left_to_right(seq, [("LANK", "RANK")])
    assert out.markers == seq.markers
    # New LANK carries the reflected old RANK trajectory.
    np.testing.assert_array_equal(out.marker("LANK"), seq.marker("RANK") * [-1, 1, 1])
    np.testing.assert_array_equal(out.coords[0, 0], [0.2, 0, 0])


def test_mirror_involution_and_isometry(rng):
    seq = _body(rng)
    once = mirror_left_to_right(seq, PAIRS)
    twice = mirror_left_to_right(once, PAIRS)
    assert np.array_equal(twice.coords, seq.coords)
    # Names are swapped, so compare the distance multisets of each frame.
    d0, d1 = np.sort(_distances(seq), axis=1), np.sort(_distances(once), axis=1)
    assert np.abs(d1 - d0).max() < 1e-12
    with pytest.raises(KeyError):
        mirror_left_to_right(seq, [("LANK", "RTOE")])


def test_wand_midpoint(rng):
    c = rng.normal(size=(3, 3, 3))
    c[:, 0] = [0, 0, 0]
    c[:, 2] = [0, 0, 1]
    seq = MotionSequence(("A", "W", "B"), c, 25.0)
    out = center_wand_markers(seq, [("A", "W", "B")])
    np.testing.assert_allclose(out.coords[:, 1], np.tile([0, 0, 0.5], (3, 1)))
    assert np.array_equal(center_wand_markers(out, [("A", "W", "B")]).coords, out.coords)
    np.testing.assert_allclose(_distances(out, [0, 2]), _distances(seq, [0, 2]), atol=1e-12)
    with pytest.raises(KeyError):
        center_wand_markers(seq, [("A", "Q", "B")])

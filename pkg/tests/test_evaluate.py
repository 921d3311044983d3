import warnings

import numpy as np
import pytest
from scipy.linalg import sqrtm
from scipy.stats import ortho_group

from mdae.evaluate import (confusion_and_uar, fid, grade_mae, load_embeddings, pca_project_2d, save_embeddings,
                           sqrt_psd)


def test_uar_perfect_and_forced():
    C, uar = confusion_and_uar(["RP", "FK", "FK"], ["RP", "FK", "FK"])
    assert uar == 1.0 and np.array_equal(C, np.diag(np.diag(C))) and C.sum() == 3
    _, uar = confusion_and_uar(["RP", "RP", "FK", "RP"], ["RP", "RP", "FK", "FK"], ["RP", "FK"])
    assert uar == pytest.approx(0.75)


def test_uar_relabel_invariant(rng):
    classes = ["RP", "FK", "LRK", "HRK", "SBK"]
    truth = list(rng.choice(classes, 60))
    pred = [t if rng.random() < 0.7 else rng.choice(classes) for t in truth]
    perm = dict(zip(classes, rng.permutation(classes)))
    _, a = confusion_and_uar(pred, truth)
    _, b = confusion_and_uar([perm[p] for p in pred], [perm[t] for t in truth])
    assert a == pytest.approx(b)


def test_uar_errors():
    with pytest.raises(ValueError):
        confusion_and_uar(["RP"], ["RP", "FK"])
    with pytest.raises(ValueError):
        confusion_and_uar([], [])


def test_grade_mae():
    t = np.array([0, 2, 2, 10]) / 12
    assert grade_mae(t, t).mae == 0.0
    g = grade_mae(np.clip(t + 0.1, 0, 1), t)
    assert g.mae == pytest.approx(0.1) and g.grades == pytest.approx(1.2)
    # Macro average: grade 2 appears twice but counts once.
    g = grade_mae([0, 0.2, 2 / 12, 10 / 12], t)
    assert g.mae == pytest.approx((0.0 + (0.2 - 2 / 12) / 2 + 0.0) / 3)
    with pytest.raises(ValueError):
        grade_mae([0.1], [0.1, 0.2])


def test_sqrt_psd_cases(rng):
    np.testing.assert_allclose(sqrt_psd(np.eye(3)), np.eye(3))
    np.testing.assert_allclose(sqrt_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))
    A = rng.normal(size=(6, 6))
    M = A.T @ A
    S = sqrt_psd(M)
    assert np.linalg.norm(S @ S - M) / np.linalg.norm(M) < 1e-8
    np.testing.assert_allclose(S, sqrtm(M).real, atol=1e-8)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(S)), np.sqrt(np.clip(np.sort(np.linalg.eigvalsh(M)), 0, None)), atol=1e-8)
    with pytest.raises(ValueError):
        sqrt_psd(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        sqrt_psd(np.diag([1.0, -1.0]))


def test_fid_identity_symmetry_rotation(rng):
    a = rng.normal(size=(200, 4))
    b = rng.normal(size=(150, 4)) * [1, 2, 1, 0.5] + 1
    assert fid(a, a) < 1e-8
    assert fid(a, b) == pytest.approx(fid(b, a), abs=1e-8)
    Q = ortho_group.rvs(4, random_state=3)
    assert fid(a @ Q.T, b @ Q.T) == pytest.approx(fid(a, b), abs=1e-6)


def test_fid_analytic_gaussians(rng):
    a = rng.normal(size=(10000, 2))
    b = rng.normal(size=(10000, 2)) + [3, 0]
    assert abs(fid(a, b) - 9.0) < 0.5


def test_fid_against_scipy_oracle(rng):
    a, b = rng.normal(size=(80, 3)), rng.normal(size=(90, 3)) @ rng.normal(size=(3, 3))
    Sa, Sb = np.cov(a.T), np.cov(b.T)
    ref = np.sum((a.mean(0) - b.mean(0)) ** 2) + np.trace(Sa + Sb - 2 * sqrtm(Sa @ Sb).real)
    assert fid(a, b) == pytest.approx(ref, rel=1e-7)


def test_fid_small_group_warns_and_empty_errors(rng):
    with pytest.warns(RuntimeWarning, match="unreliable"):
        fid(rng.normal(size=(3, 5)), rng.normal(size=(40, 5)))
    with pytest.raises(ValueError):
        fid(np.zeros((0, 2)), rng.normal(size=(5, 2)))


def test_pca_plane_preserves_distances(rng):
    basis = np.linalg.qr(rng.normal(size=(8, 2)))[0]
    X = rng.normal(size=(20, 2)) @ basis.T + rng.normal(size=8)
    P = pca_project_2d(X).points
    dX = np.linalg.norm(X[:, None] - X[None], axis=-1)
    dP = np.linalg.norm(P[:, None] - P[None], axis=-1)
    assert np.abs(dX - dP).max() < 1e-9


def test_pca_sign_convention(rng):
    X = rng.normal(size=(30, 5))
    p1, p2 = pca_project_2d(X), pca_project_2d(X * 1.0)
    assert np.array_equal(p1.points, p2.points)
    for c in p1.components:
        assert c[np.argmax(np.abs(c))] > 0


def test_pca_clusters_separate(rng):
    a = rng.normal(size=(50, 16)) * 0.3
    b = rng.normal(size=(50, 16)) * 0.3 + 4.0
    P = pca_project_2d(np.vstack([a, b])).points
    gap = np.linalg.norm(P[:50].mean(0) - P[50:].mean(0))
    within = max(P[:50].std(0).max(), P[50:].std(0).max())
    assert gap > 5 * within


def test_pca_rank_report(rng, caplog):
    proj = pca_project_2d(np.ones((5, 3)))
    assert proj.rank == 0 and np.all(proj.points == 0)
    line = np.outer(np.arange(6.0), [1, 2, 3])
    assert pca_project_2d(line).rank == 1
    with pytest.raises(ValueError):
        pca_project_2d(np.ones((2, 3)))


def test_embedding_csv_round_trip(tmp_path, rng):
    Z = rng.normal(size=(4, 3))
    meta = [{"technique": "RP", "split": "train"}] * 4
    save_embeddings(tmp_path / "e.csv", Z, meta)
    Z2, m2 = load_embeddings(tmp_path / "e.csv")
    assert np.array_equal(Z, Z2) and m2 == meta
    proj = pca_project_2d(Z2, [m["technique"] for m in m2])
    proj.to_csv(tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().startswith("index,label,pc1,pc2")

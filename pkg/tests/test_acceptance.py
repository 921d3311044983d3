"""Desk-scale acceptance checks. Each test records one PASS/FAIL line (see conftest)."""
import logging
import time

import numpy as np
import pytest
import torch
from scipy.spatial.distance import pdist
from scipy.spatial.transform import Rotation

from mdae import diffusion
from mdae.evaluate import confusion_and_uar, fid, sqrt_psd
from mdae.manipulate import embed_sequence, manipulate_motion, predict, train_head
from mdae.motion import MotionSequence
from mdae.network import (TrainConfig, build_feature_set, evaluate_loss, fit_normalization, loss_total,
                          new_model, train)
from mdae.pose import (PoseFeatures, anatomy_report, axis_angle_between, decode_sequence, encode_sequence,
                       from_stiefel, joint_positions, reconstruct_marker, to_stiefel)
from mdae.preprocess import center_to_origin, facing_normal, mirror_left_to_right, rotate_to_facing
from mdae.synth import FOOT_MARKERS, MIRROR_PAIRS, SynthConfig, default_chain, generate_synthetic_dataset

DESK = SynthConfig(samples_per_cell=20)
DESK_SEED = 7
MANIP_STEPS = 20


# ---------------------------------------------------------------- 1


def test_c1_geometry_round_trip(criterion):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst_marker = 0.0
    n = 0
    while n < 1000:
        a, b = rng.normal(size=3), rng.normal(size=3)
        if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b - a) < 1e-3:
            continue
        k, theta = axis_angle_between(a, b)
        if theta < 1e-6 or theta > np.pi - 1e-6:
            continue
        b_hat = reconstruct_marker(a, k, theta, np.linalg.norm(b - a))
        worst_marker = max(worst_marker, float(np.abs(b_hat - b).max()))
        n += 1
    Rs = Rotation.random(1000, random_state=2).as_matrix()
    worst_rot = max(float(np.abs(from_stiefel(to_stiefel(R)) - R).max()) for R in Rs)
    elapsed = time.perf_counter() - t0
    ok = worst_marker < 1e-9 and worst_rot < 1e-9 and elapsed < 1.0
    criterion(1, "geometry round trip", ok,
              f"marker err {worst_marker:.2e} m, f_GS(g_GS(R)) err {worst_rot:.2e}, {elapsed:.2f} s (tol 1e-9, < 1 s)")
    assert ok


# ---------------------------------------------------------------- 2


def test_c2_anatomy_preservation(criterion):
    chain = default_chain()
    rigid, _ = generate_synthetic_dataset(SynthConfig(samples_per_cell=5, frames=50), seed=11)
    rigid_err = max(float(np.abs(decode_sequence(encode_sequence(s, chain)).coords - s.coords).max()) for s in rigid)
    jittered, _ = generate_synthetic_dataset(SynthConfig(samples_per_cell=5, frames=50, link_jitter=0.0035), seed=11)
    rep = anatomy_report(jittered, chain)
    mean_err = rep["mean_reconstruction_error"]
    ok = rigid_err < 1e-6 and 0.003 <= mean_err <= 0.03
    criterion(2, "anatomy preservation", ok,
              f"rigid max err {rigid_err:.2e} m (< 1e-6); jitter std {100 * rep['mean_link_distance_std']:.3f} cm "
              f"-> mean err {100 * mean_err:.3f} cm (0.3..3 cm; reference 1.05 cm)")
    assert ok


# ---------------------------------------------------------------- 3


def test_c3_differentiability(criterion):
    t0 = time.perf_counter()
    chain = default_chain()
    seqs, _ = generate_synthetic_dataset(SynthConfig(samples_per_cell=1, frames=6), seed=5)
    f = encode_sequence(seqs[0], chain)
    rng = np.random.default_rng(3)

    # Jacobian of decode_sequence (axis/angle route, central differences) against autograd
    # through the matrix route, one random output projection per coordinate.
    x = f.to_array()[:1] + 0.02 * rng.normal(size=(1, chain.feature_dim))
    h, worst_jac = 1e-6, 0.0
    for j in rng.choice(chain.feature_dim, size=60, replace=False):
        w = rng.normal(size=(1, len(chain.markers), 3))
        xt = torch.tensor(x, requires_grad=True)
        (joint_positions(xt, f.chain) * torch.tensor(w)).sum().backward()
        auto = xt.grad[0, j].item()

        def g(v):
            xx = x.copy()
            xx[0, j] = v
            return float((decode_sequence(PoseFeatures.from_array(xx, f.chain)).coords * w).sum())

        num = (g(x[0, j] + h) - g(x[0, j] - h)) / (2 * h)
        worst_jac = max(worst_jac, abs(auto - num) / max(abs(auto), abs(num), 1e-6))

    # Gradient of loss_total with respect to 60 random network parameters.
    small, _ = generate_synthetic_dataset(SynthConfig(samples_per_cell=1, frames=12), seed=6)
    fs = build_feature_set(small, chain, 20, FOOT_MARKERS)
    model = new_model(chain, seed=3, d_model=16, heads=2, layers=1, d_z=8, max_frames=20).double()
    fit_normalization(model, fs)
    batch = fs.batch(model, dtype=torch.float64)
    sched, cfg = diffusion.make_schedule(T=100), TrainConfig()

    def loss():
        return loss_total(batch, model, cfg, sched, fs.chain, FOOT_MARKERS, torch.Generator().manual_seed(4))[0]

    model.zero_grad()
    loss().backward()
    params = list(model.parameters())
    h, worst_grad = 1e-5, 0.0
    for _ in range(60):
        p = params[rng.integers(len(params))]
        flat = p.data.view(-1)
        i = int(rng.integers(flat.numel()))
        auto, old = p.grad.view(-1)[i].item(), flat[i].item()
        with torch.no_grad():
            flat[i] = old + h
            up = loss().item()
            flat[i] = old - h
            dn = loss().item()
            flat[i] = old
        num = (up - dn) / (2 * h)
        worst_grad = max(worst_grad, abs(auto - num) / max(abs(auto), abs(num), 1e-6))
    elapsed = time.perf_counter() - t0
    ok = worst_jac < 1e-4 and worst_grad < 1e-4 and elapsed < 120
    criterion(3, "differentiability", ok,
              f"decode Jacobian rel err {worst_jac:.2e} (60 coords), loss_total grad rel err {worst_grad:.2e} "
              f"(60 params), {elapsed:.1f} s (tol 1e-4, < 2 min)")
    assert ok


# ---------------------------------------------------------------- 4


def test_c4_diffusion_algebra(criterion):
    rng = np.random.default_rng(4)
    sched = diffusion.make_schedule()
    x0 = rng.normal(size=(3, 20, 9))
    worst_alg = 0.0
    for t in (1, 10, 250, 500, 900, 1000):
        eps = rng.normal(size=x0.shape)
        x_t = diffusion.q_sample(x0, t, eps, sched)
        x0_hat = rng.normal(size=x0.shape)
        e = diffusion.eps_from_x0(x_t, x0_hat, t, sched)
        worst_alg = max(worst_alg, float(np.abs(diffusion.q_sample(x0_hat, t, e, sched) - x_t).max()))
    oracle = lambda x_t, t, z: x0
    worst_rt = 0.0
    for steps in (10, 50, 100, 1000):
        code = diffusion.stochastic_encode(x0, None, oracle, sched, steps)
        worst_rt = max(worst_rt, float(np.abs(diffusion.decode(code, None, oracle, sched) - x0).max()))

    chain = default_chain()
    model = new_model(chain, seed=0, d_model=16, heads=2, layers=1, d_z=8, max_frames=20).eval()
    xt = torch.as_tensor(rng.normal(size=(2, 12, chain.feature_dim)), dtype=torch.float32)
    with torch.no_grad():
        z = model.semantic_encode(xt)
        runs = [diffusion.decode(diffusion.StochasticCode(xt, 20), z, model.denoiser_fn(), sched) for _ in range(2)]
    bitwise = bool(torch.equal(runs[0], runs[1]))
    ok = worst_alg < 1e-9 and worst_rt < 1e-6 and bitwise
    criterion(4, "diffusion algebra", ok,
              f"q_sample/eps_from_x0 err {worst_alg:.2e} (1e-9), oracle encode->decode err {worst_rt:.2e} (1e-6), "
              f"deterministic decode bit-identical: {bitwise}")
    assert ok


# ---------------------------------------------------------------- 5 and 6 share one trained model


@pytest.fixture(scope="module")
def desk_run():
    torch.manual_seed(0)
    seqs, manifest = generate_synthetic_dataset(DESK, seed=DESK_SEED)
    entries = list(manifest)
    chain = default_chain()
    tr = [i for i, e in enumerate(entries) if e.split == "train"]
    fs = build_feature_set([seqs[i] for i in tr], chain, 100, FOOT_MARKERS)
    model = new_model(chain, seed=0)
    fit_normalization(model, fs)
    sched, cfg = diffusion.make_schedule(), TrainConfig(steps=2000)
    t0 = time.perf_counter()
    before = evaluate_loss(model, fs, cfg, sched)["total"]
    train(model, fs, cfg, sched)
    after = evaluate_loss(model, fs, cfg, sched)["total"]
    return {"seqs": seqs, "entries": entries, "chain": chain, "model": model, "sched": sched, "train_idx": tr,
            "before": before, "after": after, "train_seconds": time.perf_counter() - t0}


@pytest.mark.slow
def test_c5_desk_training(desk_run, criterion):
    r = desk_run
    model, sched, chain = r["model"], r["sched"], r["chain"]
    fs = build_feature_set(r["seqs"], chain, 100, FOOT_MARKERS)
    b = fs.batch(model)
    t0 = time.perf_counter()
    with torch.no_grad():
        z = model.semantic_encode(b.x0, b.mask)
        fn = model.denoiser_fn(b.mask)
        rec = diffusion.decode(diffusion.stochastic_encode(b.x0, z, fn, sched, 50), z, fn, sched)
    m = b.mask[..., None].to(rec.dtype)
    # Normalized features have unit std per dimension, so this is the error in units of data std.
    rel_err = float(((rec - b.x0).abs() * m).sum() / (m.sum() * b.x0.shape[-1]))
    drop = 1.0 - r["after"] / r["before"]
    elapsed = r["train_seconds"] + time.perf_counter() - t0
    ok = drop >= 0.9 and rel_err < 0.1 and model.n_params() <= 100_000 and len(r["seqs"]) <= 200 and elapsed < 1800
    criterion(5, "desk-scale training", ok,
              f"{len(r['seqs'])} samples, {model.n_params()} params, loss {r['before']:.3f} -> {r['after']:.4f} "
              f"(drop {100 * drop:.1f}%, need >= 90%), decode(stochastic_encode) err {rel_err:.3f} data std "
              f"(need < 0.1), {elapsed / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_c6_separability_and_manipulation(desk_run, criterion):
    r = desk_run
    model, sched, chain, seqs, entries = r["model"], r["sched"], r["chain"], r["seqs"], r["entries"]
    tr = r["train_idx"]
    te = [i for i, e in enumerate(entries) if e.split == "test"]
    Z = np.array([embed_sequence(model, s, chain) for s in seqs])
    head = train_head(Z[tr], [entries[i].meta for i in tr])
    probs, _ = predict(head, Z[te])
    _, uar = confusion_and_uar([head.classes[k] for k in probs.argmax(1)], [entries[i].meta.technique for i in te])

    flipped = kept = 0
    logging.getLogger("mdae").setLevel(logging.ERROR)
    for i in te:
        p0, g0 = predict(head, Z[i])
        current = head.classes[int(np.argmax(p0))]
        target = "FK" if current == "RP" else "RP"
        out, _ = manipulate_motion(seqs[i], chain, model, sched, head, technique=target, steps=MANIP_STEPS)
        p1, g1 = predict(head, embed_sequence(model, out, chain))
        flipped += head.classes[int(np.argmax(p1))] == target
        kept += abs(float(g1) - float(g0)) < 0.1
    flip_rate, keep_rate = flipped / len(te), kept / len(te)
    # Reference for the skill part: how often the head gives a real recording of the other technique at the
    # same grade a skill within 0.1 of the source. This is what a perfect edit would score.
    _, G = predict(head, Z)
    tech = np.array([e.meta.technique for e in entries])
    grade = np.array([e.meta.grade for e in entries])
    pairs = [abs(G[j] - G[i]) < 0.1 for i in te for j in np.flatnonzero((tech != tech[i]) & (grade == grade[i]))]
    ok = uar >= 0.9 and flip_rate >= 0.8 and keep_rate >= 0.8
    criterion(6, "separability and manipulation", ok,
              f"test UAR {uar:.3f} (>= 0.9); class flipped {flipped}/{len(te)} = {flip_rate:.2f}, "
              f"skill within 0.1 {kept}/{len(te)} = {keep_rate:.2f} (both >= 0.8); "
              f"same-grade real pairs within 0.1: {np.mean(pairs):.2f}")
    assert ok


# ---------------------------------------------------------------- 7


def test_c7_fid(criterion):
    rng = np.random.default_rng(7)
    A = rng.normal(size=(500, 8))
    self_fid = fid(A, A)
    mu = np.full(8, 0.75)
    big = fid(rng.normal(size=(10_000, 8)), rng.normal(size=(10_000, 8)) + mu)
    M = rng.normal(size=(8, 8))
    S = M @ M.T
    root = sqrt_psd(S)
    sqrt_err = float(np.abs(root @ root - S).max())
    ok = abs(self_fid) < 1e-8 and abs(big - mu @ mu) < 0.5 and sqrt_err < 1e-8
    criterion(7, "FID correctness", ok,
              f"fid(A, A) = {self_fid:.1e} (1e-8); Gaussian shift |mu|^2 = {mu @ mu:.3f}, fid = {big:.3f} (tol 0.5); "
              f"sqrt_psd err {sqrt_err:.1e} (1e-8)")
    assert ok


# ---------------------------------------------------------------- 8


def test_c8_preprocessing(criterion):
    t0 = time.perf_counter()
    seqs, _ = generate_synthetic_dataset(SynthConfig(samples_per_cell=2, frames=30), seed=8)
    worst_mirror = worst_center = worst_iso = worst_facing = 0.0
    for s in seqs:
        once = mirror_left_to_right(s, MIRROR_PAIRS)
        worst_mirror = max(worst_mirror, float(np.abs(mirror_left_to_right(once, MIRROR_PAIRS).coords - s.coords).max()))
        c1 = center_to_origin(s, "PELV")
        worst_center = max(worst_center, float(np.abs(center_to_origin(c1, "PELV").coords - c1.coords).max()))
        for yaw in (0.3, np.pi / 2, 2.5, -1.2):
            cz, sz = np.cos(yaw), np.sin(yaw)
            turned = c1.with_coords(c1.coords @ np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]]).T)
            out = rotate_to_facing(turned, ("LSHO", "RSHO"))
            worst_facing = max(worst_facing, float(np.abs(facing_normal(out, ("LSHO", "RSHO")) - [0, -1, 0]).max()))
            for a, b in ((s, c1), (turned, out)):
                da = np.array([pdist(f) for f in a.coords])
                db = np.array([pdist(f) for f in b.coords])
                worst_iso = max(worst_iso, float(np.abs(da - db).max()))
        d0 = np.sort([pdist(f) for f in s.coords], axis=1)
        d1 = np.sort([pdist(f) for f in once.coords], axis=1)
        worst_iso = max(worst_iso, float(np.abs(d0 - d1).max()))
    elapsed = time.perf_counter() - t0
    ok = worst_mirror == 0.0 and worst_center == 0.0 and worst_facing < 1e-9 and worst_iso < 1e-9 and elapsed < 1.0
    criterion(8, "preprocessing invariants", ok,
              f"mirror twice err {worst_mirror:.1e}, centering idempotence err {worst_center:.1e}, "
              f"facing normal err {worst_facing:.1e} (1e-9), isometry err {worst_iso:.1e}, {elapsed:.2f} s (< 1 s)")
    assert ok

"""Semantic encoder, x0-predicting denoiser, training objective and checkpoints."""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import diffusion
from .diffusion import NoiseSchedule, make_schedule
from .motion import MotionSequence
from .pose import SkeletonChain, encode_sequence, joint_positions

CKPT_MAGIC = b"MDAM"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class ModelDims:
    feature_dim: int
    d_model: int = 48
    heads: int = 4
    layers: int = 2
    d_z: int = 32
    max_frames: int = 100
    ff_mult: int = 2


@dataclass
class TrainConfig:
    phi_pos: float = 1.0
    phi_foot: float = 1.0
    phi_vel: float = 1.0
    batch_size: int = 16
    lr: float = 2e-3
    steps: int = 2000
    seed: int = 0
    optimizer: str = "adam"
    momentum: float = 0.9
    grad_clip: float = 1.0
    lr_final_frac: float = 0.1   # cosine decay to lr * lr_final_frac; 1.0 keeps lr constant

    def __post_init__(self):
        if min(self.phi_pos, self.phi_foot, self.phi_vel) < 0:
            raise ValueError("loss weights must be >= 0")


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def _encoder(dims: ModelDims) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(
        dims.d_model, dims.heads, dim_feedforward=dims.ff_mult * dims.d_model,
        dropout=0.0, activation="gelu", batch_first=True, norm_first=True,
    )
    return nn.TransformerEncoder(layer, dims.layers, enable_nested_tensor=False)


class SemanticEncoder(nn.Module):
    def __init__(self, dims: ModelDims):
        super().__init__()
        self.inp = nn.Linear(dims.feature_dim, dims.d_model)
        self.blocks = _encoder(dims)
        self.norm = nn.LayerNorm(dims.d_model)
        self.head = nn.Linear(dims.d_model, dims.d_z)

    def forward(self, x, pad, pos):
        h = self.blocks(self.inp(x) + pos, src_key_padding_mask=pad)
        h = self.norm(h)
        keep = (~pad).unsqueeze(-1).to(h.dtype)
        pooled = (h * keep).sum(1) / keep.sum(1).clamp_min(1.0)
        return self.head(pooled)


class DenoiserNet(nn.Module):
    """Frame tokens preceded by one time token and one z token."""

    def __init__(self, dims: ModelDims):
        super().__init__()
        self.d_model = dims.d_model
        self.inp = nn.Linear(dims.feature_dim, dims.d_model)
        self.time = nn.Sequential(nn.Linear(dims.d_model, dims.d_model), nn.SiLU(), nn.Linear(dims.d_model, dims.d_model))
        self.cond = nn.Linear(dims.d_z, dims.d_model)
        self.blocks = _encoder(dims)
        self.norm = nn.LayerNorm(dims.d_model)
        self.out = nn.Linear(dims.d_model, dims.feature_dim)
        # Learned pass-through weight g(t) on x_t. It starts near 0 (pure x0
        # prediction) and can grow at low noise, where x_t is already close to x0.
        self.gate = nn.Linear(dims.d_model, 1)
        nn.init.zeros_(self.gate.weight)
        nn.init.constant_(self.gate.bias, -4.0)

    def forward(self, x_t, t, z, pad, pos):
        B = x_t.shape[0]
        emb = timestep_embedding(t, self.d_model).to(x_t.dtype)
        g = torch.sigmoid(self.gate(emb)).unsqueeze(1)
        t_tok = self.time(emb).unsqueeze(1)
        z_tok = self.cond(z).unsqueeze(1)
        h = torch.cat([t_tok, z_tok, self.inp(x_t) + pos], dim=1)
        pad = torch.cat([pad.new_zeros(B, 2), pad], dim=1)
        h = self.norm(self.blocks(h, src_key_padding_mask=pad))
        return g * x_t + self.out(h[:, 2:])


class MotionDiffAE(nn.Module):
    """Holds both networks plus the feature normalization used by them.

    All tensors passed to ``semantic_encode``/``denoise`` are normalized
    features of shape (batch, frames, feature_dim).
    """

    def __init__(self, dims: ModelDims):
        super().__init__()
        self.dims = dims
        self.encoder = SemanticEncoder(dims)
        self.denoiser = DenoiserNet(dims)
        self.register_buffer("feat_mean", torch.zeros(dims.feature_dim))
        self.register_buffer("feat_std", torch.ones(dims.feature_dim))
        self.register_buffer("pos_enc", timestep_embedding(torch.arange(dims.max_frames), dims.d_model).float())

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _pad(self, x, mask):
        if x.shape[1] > self.dims.max_frames:
            raise ValueError(f"{x.shape[1]} frames exceed max_frames={self.dims.max_frames}")
        if mask is None:
            mask = torch.ones(x.shape[:2], dtype=torch.bool, device=x.device)
        return ~mask.bool(), self.pos_enc[: x.shape[1]].to(x.dtype)

    def semantic_encode(self, x0, mask=None):
        pad, pos = self._pad(x0, mask)
        return self.encoder(x0, pad, pos)

    def denoise(self, x_t, t, z, mask=None):
        pad, pos = self._pad(x_t, mask)
        t = torch.as_tensor(t, device=x_t.device)
        if t.ndim == 0:
            t = t.expand(x_t.shape[0])
        return self.denoiser(x_t, t, z, pad, pos)

    def denoiser_fn(self, mask=None):
        """Adapter to the ``(x_t, t, z) -> x0_hat`` callable used by the diffusion module."""
        return lambda x_t, t, z: self.denoise(x_t, t, z, mask)

    def normalize(self, x):
        return (x - self.feat_mean.to(x.dtype)) / self.feat_std.to(x.dtype)

    def denormalize(self, x):
        return x * self.feat_std.to(x.dtype) + self.feat_mean.to(x.dtype)


def semantic_encode(model: MotionDiffAE, x0, mask=None):
    return model.semantic_encode(x0, mask)


def denoise(model: MotionDiffAE, x_t, t, z, mask=None):
    if x_t.shape[-1] != model.dims.feature_dim:
        raise ValueError(f"expected feature dim {model.dims.feature_dim}, got {x_t.shape[-1]}")
    return model.denoise(x_t, t, z, mask)


# --------------------------------------------------------------------------
# losses; ``mask`` marks real frames with shape (batch, frames)


def _mask(x, mask):
    if mask is None:
        return torch.ones(x.shape[:2], dtype=x.dtype, device=x.device)
    return mask.to(x.dtype)


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_simple(x0, x0_hat, mask=None):
    """Mean squared error over all entries of real frames."""
    _check_shapes(x0, x0_hat)
    m = _mask(x0, mask)
    per_frame = ((x0 - x0_hat) ** 2).mean(-1)
    return (per_frame * m).sum() / m.sum()


def _pair_mask(m):
    return m[:, 1:] * m[:, :-1]


def loss_vel(x0, x0_hat, mask=None):
    """Mean squared difference of frame-to-frame deltas over real frame pairs."""
    _check_shapes(x0, x0_hat)
    if x0.shape[1] < 2:
        raise ValueError("velocity loss needs at least 2 frames")
    m = _pair_mask(_mask(x0, mask))
    diff = (x0[:, 1:] - x0[:, :-1]) - (x0_hat[:, 1:] - x0_hat[:, :-1])
    return ((diff ** 2).mean(-1) * m).sum() / m.sum().clamp_min(1.0)


def loss_pos(x0, x0_hat, chain: SkeletonChain, distances=None, mask=None):
    """Mean over real frames of the summed squared marker error after reconstruction.

    Inputs are raw (de-normalized) features; ``distances`` has shape
    (batch, links) and defaults to the chain's stored distances.
    """
    _check_shapes(x0, x0_hat)
    m = _mask(x0, mask)
    d = None if distances is None else distances[:, None, :]
    p0 = joint_positions(x0, chain, d)
    p1 = joint_positions(x0_hat, chain, d)
    per_frame = ((p0 - p1) ** 2).sum(dim=(-1, -2))
    return (per_frame * m).sum() / m.sum()


def loss_foot(x0_hat, contacts, chain: SkeletonChain, foot_markers: Sequence[str], distances=None, mask=None):
    """Contact-masked squared foot displacement, averaged over real frame pairs.

    ``contacts`` has shape (batch, frames, len(foot_markers)); the flag of
    frame i gates the displacement from frame i to i + 1.
    """
    missing = [f for f in foot_markers if f not in chain.markers]
    if missing:
        raise ValueError(f"foot markers not in chain: {missing}")
    if contacts.shape[:2] != x0_hat.shape[:2]:
        raise ValueError("contact mask length must equal frame count")
    idx = [chain.markers.index(f) for f in foot_markers]
    d = None if distances is None else distances[:, None, :]
    feet = joint_positions(x0_hat, chain, d)[..., idx, :]
    step = ((feet[:, 1:] - feet[:, :-1]) ** 2).sum(-1)
    c = contacts[:, :-1].to(x0_hat.dtype)
    m = _pair_mask(_mask(x0_hat, mask))
    return ((step * c).sum(-1) * m).sum() / m.sum().clamp_min(1.0)


@dataclass
class Batch:
    """Normalized features with padding mask, contacts and per-sample link distances."""

    x0: torch.Tensor
    mask: torch.Tensor
    contacts: torch.Tensor
    distances: torch.Tensor

    def to(self, dtype):
        return Batch(self.x0.to(dtype), self.mask, self.contacts, self.distances.to(dtype))

    def __len__(self):
        return self.x0.shape[0]

    def select(self, idx):
        return Batch(self.x0[idx], self.mask[idx], self.contacts[idx], self.distances[idx])


def loss_total(batch: Batch, model: MotionDiffAE, config: TrainConfig, sched: NoiseSchedule,
               chain: SkeletonChain, foot_markers: Sequence[str], generator: torch.Generator):
    """Weighted sum of the four losses at uniformly sampled t; returns (loss, metrics)."""
    x0 = batch.x0
    B = x0.shape[0]
    t = torch.randint(1, sched.T + 1, (B,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=torch.float64).to(x0.dtype)
    x_t = diffusion.q_sample(x0, t.numpy(), eps, sched)
    z = model.semantic_encode(x0, batch.mask)
    x0_hat = model.denoise(x_t, t, z, batch.mask)
    return _combine(x0, x0_hat, batch, model, config, chain, foot_markers)


def _combine(x0, x0_hat, batch, model, config, chain, foot_markers):
    m = batch.mask
    l_simple = loss_simple(x0, x0_hat, m)
    terms = {"simple": l_simple}
    raw0, raw1 = model.denormalize(x0), model.denormalize(x0_hat)
    total = l_simple
    if config.phi_pos:
        terms["pos"] = loss_pos(raw0, raw1, chain, batch.distances, m)
        total = total + config.phi_pos * terms["pos"]
    if config.phi_foot:
        terms["foot"] = loss_foot(raw1, batch.contacts, chain, foot_markers, batch.distances, m)
        total = total + config.phi_foot * terms["foot"]
    if config.phi_vel:
        terms["vel"] = loss_vel(x0, x0_hat, m)
        total = total + config.phi_vel * terms["vel"]
    metrics = {k: float(v.detach()) for k, v in terms.items()}
    metrics["total"] = float(total.detach())
    return total, metrics


def make_optimizer(model: MotionDiffAE, config: TrainConfig):
    if config.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=config.lr)
    if config.optimizer == "sgd":
        return torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum)
    raise ValueError(f"unknown optimizer {config.optimizer!r}")


def train_step(batch: Batch, model: MotionDiffAE, optimizer, config: TrainConfig, sched: NoiseSchedule,
               chain: SkeletonChain, foot_markers: Sequence[str], generator: torch.Generator) -> dict:
    """One update of both networks. A non-finite loss skips the update."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss, metrics = loss_total(batch, model, config, sched, chain, foot_markers, generator)
    if not torch.isfinite(loss):
        metrics["skipped"] = True
        metrics["diagnostics"] = {
            "nonfinite_params": [n for n, p in model.named_parameters() if not torch.isfinite(p).all()],
            "input_finite": bool(torch.isfinite(batch.x0).all()),
        }
        return metrics
    loss.backward()
    if config.grad_clip:
        metrics["grad_norm"] = float(nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip))
    optimizer.step()
    metrics["skipped"] = False
    return metrics


# --------------------------------------------------------------------------
# data plumbing


@dataclass
class FeatureSet:
    """Encoded sequences padded to a common length, in raw feature units."""

    chain: SkeletonChain
    features: np.ndarray      # (n, frames, feature_dim)
    mask: np.ndarray          # (n, frames) bool
    contacts: np.ndarray      # (n, frames, feet)
    distances: np.ndarray     # (n, links)
    foot_markers: tuple[str, ...] = field(default=())

    def __len__(self):
        return len(self.features)

    def batch(self, model: MotionDiffAE, idx=None, dtype=torch.float32) -> Batch:
        idx = np.arange(len(self)) if idx is None else np.asarray(idx)
        x = torch.as_tensor(self.features[idx], dtype=dtype)
        return Batch(
            model.normalize(x) * torch.as_tensor(self.mask[idx], dtype=dtype)[..., None],
            torch.as_tensor(self.mask[idx]),
            torch.as_tensor(self.contacts[idx], dtype=dtype),
            torch.as_tensor(self.distances[idx], dtype=dtype),
        )


def build_feature_set(sequences: Sequence[MotionSequence], chain: SkeletonChain, max_frames: int,
                      foot_markers: Sequence[str] = ()) -> FeatureSet:
    n = len(sequences)
    feats = [encode_sequence(s, chain) for s in sequences]
    too_long = [i for i, f in enumerate(feats) if f.frames > max_frames]
    if too_long:
        raise ValueError(f"sequences {too_long[:5]} exceed max_frames={max_frames}")
    F = max(f.frames for f in feats)
    X = np.zeros((n, F, chain.feature_dim))
    M = np.zeros((n, F), dtype=bool)
    C = np.zeros((n, F, len(foot_markers)))
    D = np.zeros((n, chain.n_links))
    for i, (f, s) in enumerate(zip(feats, sequences)):
        X[i, : f.frames] = f.to_array()
        M[i, : f.frames] = True
        D[i] = f.chain.distances
        if foot_markers:
            if s.contacts is None or tuple(s.foot_markers) != tuple(foot_markers):
                raise ValueError(f"sequence {i} lacks contacts for foot markers {tuple(foot_markers)}")
            C[i, : f.frames] = s.contacts
    return FeatureSet(chain, X, M, C, D, tuple(foot_markers))


def fit_normalization(model: MotionDiffAE, fs: FeatureSet, std_floor: float = 1e-2) -> None:
    x = fs.features[fs.mask]
    model.feat_mean.copy_(torch.as_tensor(x.mean(0)))
    model.feat_std.copy_(torch.as_tensor(np.maximum(x.std(0), std_floor)))


def new_model(chain: SkeletonChain, seed: int = 0, **dims) -> MotionDiffAE:
    torch.manual_seed(seed)
    return MotionDiffAE(ModelDims(feature_dim=chain.feature_dim, **dims))


def train(model: MotionDiffAE, fs: FeatureSet, config: TrainConfig, sched: NoiseSchedule,
          log=None, eval_every: int = 0) -> list[dict]:
    """Minibatch training loop; returns the per-step metrics trace."""
    gen = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    opt = make_optimizer(model, config)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(1, config.steps), eta_min=config.lr * config.lr_final_frac)
    dtype = next(model.parameters()).dtype
    trace = []
    for step in range(config.steps):
        idx = rng.choice(len(fs), size=min(config.batch_size, len(fs)), replace=False)
        metrics = train_step(fs.batch(model, idx, dtype), model, opt, config, sched, fs.chain, fs.foot_markers, gen)
        lr_sched.step()
        metrics["step"] = step
        trace.append(metrics)
        if log and (step % max(1, eval_every or 100) == 0 or step == config.steps - 1):
            log(metrics)
    model.eval()
    return trace


@torch.no_grad()
def evaluate_loss(model: MotionDiffAE, fs: FeatureSet, config: TrainConfig, sched: NoiseSchedule,
                  seed: int = 1234, repeats: int = 4) -> dict:
    """Loss over the whole set at fixed noise draws, averaged over ``repeats`` passes."""
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    dtype = next(model.parameters()).dtype
    batch = fs.batch(model, dtype=dtype)
    runs = [loss_total(batch, model, config, sched, fs.chain, fs.foot_markers, gen)[1] for _ in range(repeats)]
    return {k: float(np.mean([r[k] for r in runs])) for k in runs[0]}


@torch.no_grad()
def embed(model: MotionDiffAE, fs: FeatureSet, idx=None) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    b = fs.batch(model, idx, dtype)
    return model.semantic_encode(b.x0, b.mask).double().numpy()


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: MotionDiffAE, sched: NoiseSchedule, config: TrainConfig | None, path,
                    chain: SkeletonChain | None = None, extra: dict | None = None) -> None:
    state = model.state_dict()
    table, blobs, offset = [], [], 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        table.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>|="), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "dims": asdict(model.dims),
        "schedule": sched.to_json(),
        "config": asdict(config) if config is not None else None,
        "chain": chain.to_json() if chain is not None else None,
        "extra": extra or {},
        "tensors": table,
    }
    hb = json.dumps(header).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(hb)))
    buf.write(hb)
    for b in blobs:
        buf.write(b)
    Path(path).write_bytes(buf.getvalue())


@dataclass
class Checkpoint:
    model: MotionDiffAE
    schedule: NoiseSchedule
    config: TrainConfig | None
    chain: SkeletonChain | None
    extra: dict


def load_checkpoint(path, expect_dims: ModelDims | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not an MDAM checkpoint")
    if len(data) < 12:
        raise CheckpointError(f"{path}: corrupt checkpoint (truncated header)")
    version, n = struct.unpack("<II", data[4:12])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    try:
        header = json.loads(data[12:12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header ({exc})") from None
    dims = ModelDims(**header["dims"])
    if expect_dims is not None and dims != expect_dims:
        raise ShapeMismatchError(f"{path}: checkpoint dims {dims} differ from expected {expect_dims}")
    base = 12 + n
    state = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        if start + entry["nbytes"] > len(data):
            raise CheckpointError(f"{path}: corrupt checkpoint (tensor {entry['name']} truncated)")
        arr = np.frombuffer(data, dtype=np.dtype(entry["dtype"]).newbyteorder("<"), count=int(np.prod(entry["shape"])), offset=start)
        state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    model = MotionDiffAE(dims)
    dtype = next(iter(state.values())).dtype if state else torch.float32
    model = model.to(dtype)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise ShapeMismatchError(f"{path}: {exc}") from None
    model.eval()
    sched = make_schedule(header["schedule"]["kind"], header["schedule"]["T"])
    config = TrainConfig(**header["config"]) if header.get("config") else None
    chain = SkeletonChain.from_json(header["chain"]) if header.get("chain") else None
    return Checkpoint(model, sched, config, chain, header.get("extra", {}))


def load_for_resume(model: MotionDiffAE, path) -> Checkpoint:
    """Load a checkpoint whose dims must match ``model``; copies weights into it."""
    ck = load_checkpoint(path, expect_dims=model.dims)
    model.load_state_dict(ck.model.state_dict())
    ck.model = model
    return ck

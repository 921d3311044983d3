# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: light
#       format_version: '1.5'
#       jupytext_version: 1.11.3
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# # Training the autoencoder on synthetic motions
#
# `MDAE_STEPS` sets the number of optimizer steps; the default keeps this
# notebook around a minute on one CPU core. 2000 steps is the full desk run.
# The checkpoint is written next to this file for the manipulation notebook.

import os

import numpy as np
import torch

from mdae import diffusion
from mdae.network import (TrainConfig, build_feature_set, embed, evaluate_loss, fit_normalization, new_model,
                          save_checkpoint, train)
from mdae.synth import FOOT_MARKERS, SynthConfig, default_chain, generate_synthetic_dataset

torch.set_num_threads(1)
STEPS = int(os.environ.get("MDAE_STEPS", 300))

seqs, manifest = generate_synthetic_dataset(SynthConfig(samples_per_cell=20), seed=7)
entries = list(manifest)
chain = default_chain()
train_idx = [i for i, e in enumerate(entries) if e.split == "train"]
len(seqs), len(train_idx)

fs = build_feature_set([seqs[i] for i in train_idx], chain, 100, FOOT_MARKERS)
model = new_model(chain, seed=0)
fit_normalization(model, fs)
sched = diffusion.make_schedule()
config = TrainConfig(steps=STEPS)
model.n_params()

before = evaluate_loss(model, fs, config, sched)
trace = train(model, fs, config, sched)
after = evaluate_loss(model, fs, config, sched)
before["total"], after["total"], after["total"] / before["total"]

# Loss curve, smoothed over 50 steps.

total = np.array([m["total"] for m in trace])
np.convolve(total, np.ones(50) / 50, mode="valid")[::50].round(3)

# Invert every training motion to its stochastic code and decode it back
# with its own semantic code. The mean absolute error is in units of data
# std. After 300 steps it is still around 0.13, and the full 2000 steps bring
# it to about 0.055.

b = fs.batch(model)
with torch.no_grad():
    z = model.semantic_encode(b.x0, b.mask)
    code = diffusion.stochastic_encode(b.x0, z, model.denoiser_fn(b.mask), sched, 50)
    rec = diffusion.decode(code, z, model.denoiser_fn(b.mask), sched)
m = b.mask[..., None].float()
float(((rec - b.x0).abs() * m).sum() / (m.sum() * b.x0.shape[-1]))

save_checkpoint(model, sched, config, "synthetic.mdam", chain)
Z = embed(model, build_feature_set(seqs, chain, 100, FOOT_MARKERS))
np.save("synthetic_z.npy", Z)
Z.shape

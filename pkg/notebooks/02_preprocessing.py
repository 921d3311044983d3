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

# # Cleaning recordings before encoding

import numpy as np

from mdae.preprocess import (center_to_origin, detect_outliers, downsample, facing_normal, mirror_left_to_right,
                             rotate_to_facing)
from mdae.synth import MIRROR_PAIRS, SynthConfig, generate_synthetic_dataset

seqs, manifest = generate_synthetic_dataset(SynthConfig(samples_per_cell=3, frames=40, rate=50.0), seed=2)
seq = seqs[0]
seq.frames, seq.rate

# Halve the frame rate by keeping every second frame.

low = downsample(seq, 25.0)
low.frames, low.rate

# Centre on the pelvis at frame 0, then turn the body so the shoulders face -y.

c = center_to_origin(low, "PELV")
r = rotate_to_facing(c, ("LSHO", "RSHO"))
facing_normal(r, ("LSHO", "RSHO"))

# Mirroring swaps left/right names and flips x; doing it twice gives the input back.

m = mirror_left_to_right(r, MIRROR_PAIRS)
np.abs(mirror_left_to_right(m, MIRROR_PAIRS).coords - r.coords).max()

# Outlier screening flags atypical durations, displacements or head speeds.
# Nothing is dropped automatically.

report = detect_outliers(seqs, z_thresh=2.0, ids=[e.path for e in manifest])
report.flagged()

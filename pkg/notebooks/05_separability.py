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

# # How well do the semantic codes separate technique and skill?
#
# Uses `synthetic_z.npy` written by the training notebook.

import numpy as np

from mdae.evaluate import confusion_and_uar, fid, grade_mae, pca_project_2d
from mdae.manipulate import predict, train_head
from mdae.synth import SynthConfig, generate_synthetic_dataset

_, manifest = generate_synthetic_dataset(SynthConfig(samples_per_cell=20), seed=7)
entries = list(manifest)
Z = np.load("synthetic_z.npy")
tr = [i for i, e in enumerate(entries) if e.split == "train"]
te = [i for i, e in enumerate(entries) if e.split == "test"]

head = train_head(Z[tr], [entries[i].meta for i in tr])
probs, grade = predict(head, Z[te])
pred = [head.classes[k] for k in probs.argmax(1)]
C, uar = confusion_and_uar(pred, [entries[i].meta.technique for i in te])
uar

C[:2, :2]

grade_mae(grade, [entries[i].meta.grade for i in te]).to_json()

# Frechet distance between the two techniques, and between two halves of
# one technique for scale.

tech = np.array([e.meta.technique for e in entries])
fid(Z[tech == "RP"], Z[tech == "FK"]), fid(Z[tech == "RP"][::2], Z[tech == "RP"][1::2])

# A 2D linear view of the codes.

proj = pca_project_2d(Z, list(tech))
proj.explained.round(3)

for t in ("RP", "FK"):
    print(t, proj.points[tech == t].mean(axis=0).round(2))

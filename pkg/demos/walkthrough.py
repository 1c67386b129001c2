"""Small end-to-end run: synthesise chips, train with and without the two
priors, then look at AUCPR, shift invariance, pruning and the spectrum of
the enhanced images.

Takes a few minutes on one core. Sizes are kept tiny on purpose, so the
numbers are noisy; the point is the workflow. At this size the priors
usually cost AUCPR rather than add it (see the README's results).

    python demos/walkthrough.py
"""

import time

import numpy as np

from spdrdl import data as D
from spdrdl import evaluate as E
from spdrdl import model as M
from spdrdl import train as TR

SEED = 0

ds = D.generate(seed=SEED, n_train=600, n_val=200)
counts = np.bincount(ds.labels(ds.indices("train")), minlength=4)
print(f"train chips per class {counts.tolist()}, chip {ds.chip}px, crop {ds.crop}px")

model_cfg = M.ModelConfig(unet_width=4, unet_depth=2, backbone_widths=(8, 16, 32))
print(f"model: {M.build(model_cfg).num_parameters()} parameters")

runs = {}
for name, flags in [("CL", dict(use_ssp=False, use_sscp=False)),
                    ("CL+SSP+SSCP", dict(use_ssp=True, use_sscp=True))]:
    cfg = TR.TrainConfig(lr=1e-3, max_epochs=4, patience=4, **flags)
    t0 = time.perf_counter()
    params, log = TR.train(model_cfg, cfg, ds, SEED,
                           on_epoch=lambda r: print(f"  epoch {r.epoch}: val AUCPR {r.val_aucpr:.4f}"))
    runs[name] = params
    print(f"{log.method}: best {log.best_aucpr:.4f} at epoch {log.best_epoch} ({time.perf_counter() - t0:.0f}s)")

full = runs["CL+SSP+SSCP"]
report = E.evaluate(full, ds)
print("confusion (rows true, cols predicted):")
print(report.confusion.counts)

# nine shifted crops per chip; the spread of the target score is psi
idx = ds.indices("val")[:50]
for name, params in runs.items():
    print(f"{name}: mean psi over {idx.size} chips {E.mean_shift_invariance(params, ds, idx).mean():.4f}")

for row in E.prune_sweep(full, ds, [0.0, 0.25, 0.5, 0.75]):
    print(f"pruned {row['proportion']:.2f}: AUCPR {row['aucpr']:.4f}")

# fraction of spectral energy away from DC, before and after enhancement
n = ds.crop
mask = np.ones((n, n), bool)
mask[n // 2 - 2:n // 2 + 3, n // 2 - 2:n // 2 + 3] = False
for label, params in [("input", None), ("enhanced", full)]:
    spec = E.avg_spectrum(E.spectrum_images(ds, params))
    print(f"{label}: {spec[mask].sum() / spec.sum():.3f} of spectral magnitude outside the DC block")

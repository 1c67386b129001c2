"""Why blur before subsampling: a one-pixel shift of the input should
barely move the pooled output.

No training needed. A random untrained network already shows the effect,
since it comes from the pooling itself.

    python demos/antialiasing.py
"""

from dataclasses import replace

import numpy as np

from spdrdl import data as D
from spdrdl import evaluate as E
from spdrdl import model as M
from spdrdl import layers
from spdrdl.tensor import Tensor, no_grad

# period-4 stripes: after plain 2x2 max pooling a one-pixel shift turns
# alternating 1,0,1,0 into all ones; the blurred version moves far less
stripes = np.tile([1.0, 1.0, 0.0, 0.0], 8)[None, None, None, :].repeat(32, axis=2)
outs = {}
for shift in (0, 1):
    x = Tensor(np.roll(stripes, shift, axis=3))
    with no_grad():
        outs[shift] = (layers.max_pool(x).data, layers.aa_maxpool(x).data)
    print(f"shift {shift}: max_pool row {outs[shift][0][0, 0, 5, :6]}, "
          f"aa_maxpool row {np.round(outs[shift][1][0, 0, 5, :6], 2)}")
for k, name in enumerate(("max_pool", "aa_maxpool")):
    print(f"{name}: mean |change| under a 1 px shift {np.abs(outs[0][k] - outs[1][k]).mean():.3f}")

# the same story one level up: spread of the target score over nine
# shifted crops of each chip, for an identical network with and without AA
ds = D.generate(seed=1, n_train=8, n_val=60)
idx = ds.indices("val")
cfg = M.ModelConfig(unet_width=4, unet_depth=2, backbone_widths=(8, 16, 32))
for aa in (True, False):
    params = M.build(replace(cfg, aa=aa), seed=3)
    print(f"aa={aa}: mean psi {E.mean_shift_invariance(params, ds, idx).mean():.5f}")

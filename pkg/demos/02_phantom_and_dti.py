#!/usr/bin/env python3
"""Synthetic crossing-fiber phantoms and diffusion tensor fitting.

Generates an electrostatic gradient scheme, simulates a multi-tensor
slice with Rician noise, subsamples directions the way a sparse
acquisition would, and fits tensors / FA maps from the result.
"""

import numpy as np

from qspace_asr import metrics as mt
from qspace_asr import phantom as ph

# 60-direction single-shell scheme, electrostatically spread
table = ph.make_gradient_table(60, bvalue=1000.0, seed=7)
print(f"scheme: {len(table)} directions at b=1000, "
      f"min axis angle {ph.min_pairwise_angle(table.bvecs):.1f} deg")

# one slice of crossing fibers + CSF pockets
frac, tens = ph.make_crossing_slice(32, 32, seed=3)
vol = ph.simulate_multitensor(frac, tens, table)
print(f"clean signal range: [{vol.data.min():.3f}, {vol.data.max():.3f}]")

noisy = ph.add_rician_noise(vol, sigma=0.02, seed=11)
print(f"after Rician noise:  [{noisy.data.min():.3f}, {noisy.data.max():.3f}]")

# sparse acquisition: the 6 most spread directions of the 60
mask = ph.subsample_directions(table, 6)
print(f"observed subset: {np.flatnonzero(mask.observed).tolist()} "
      f"(min angle {ph.min_pairwise_angle(table.bvecs[mask.observed]):.1f} deg)")

# tensor fits from the full noisy data
field = mt.fit_dti(noisy.data, table)
scalars = mt.dti_scalars(field)
print(f"FA  map: mean {scalars['fa'].mean():.3f}, max {scalars['fa'].max():.3f}")
print(f"MD  map: mean {scalars['md'].mean():.2e} mm^2/s")
print(f"AD  map: mean {scalars['ad'].mean():.2e} mm^2/s")

# single-tensor sanity: the prolate reference tensor comes back exactly
ref = np.diag([1.7e-3, 0.2e-3, 0.2e-3])
data = ph.simulate_multitensor(np.ones((1, 1, 1)), ref[None, None, None], table)
fit = mt.fit_dti(data.data, table).matrices()[0, 0]
print(f"noiseless prolate tensor recovery error: {np.abs(fit - ref).max():.2e}")
fa = mt.dti_scalars(mt.fit_dti(data.data, table))["fa"][0, 0]
print(f"its FA: {fa:.4f} (closed form 0.8704)")

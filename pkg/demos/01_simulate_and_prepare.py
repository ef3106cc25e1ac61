# %% [markdown]
# Synthetic cyclic triaxial tests, normalization and windows.
#
# Run with `python3 demos/01_simulate_and_prepare.py`. Takes a couple of seconds.

# %%
import numpy as np

from triaxbnn import datapipe as dp
from triaxbnn import triaxsim as ts

# %% the 16-test undrained suite: e0 from 0.575 to 0.95, 300 kPa, 5 cycles
suite = ts.default_suite("undrained")
ds = ts.generate_dataset(suite)
print(len(ds), "series of", ds.N, "steps, kind", ds[0].kind)

# %% looser specimens build pore pressure faster
for s in ds:
    if s.e0 in (0.575, 0.775, 0.925):
        ru = s.states[:, 2]
        print(f"e0={s.e0:.3f}  r_u after cycle 1: {ru[60]:.3f}  after cycle 5: {ru[-1]:.3f}")

# %% same closure, drained: p' - p'0 tracks q / 3 to round-off
drained = ts.generate_dataset(ts.default_suite("drained"))
s = drained[0]
print("max |dp' - dq/3| =", np.abs((s.states[:, 0] - s.sigma3) - s.states[:, 1] / 3).max(), "kPa")

# %% hold out three void ratios for test and one for validation
train, val, test, stats = dp.prepare_splits(ds, dp.split_by_e0(ds, [0.6], [0.575, 0.775, 0.95]))
print("train/val/test:", len(train), len(val), len(test))
print("p RMS per sigma3 group:", stats.p_rms)

# %% normalization is exactly invertible
back = dp.denormalize(test, stats)
raw = ds.subset(test.ids)
print("round-trip error:", max(np.abs(a.states - b.states).max() for a, b in zip(raw, back)))

# %% overlapping windows: M (N - H + 1) of them
for H in (1, 14, ds.N):
    print(f"H={H:>3}: {len(dp.segment_windows(train, H))} windows")
b = dp.window_batch(train, 14)
print("batch shapes", b.s_init.shape, b.inputs.shape, b.targets.shape, b.theta.shape)

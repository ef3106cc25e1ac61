# %% [markdown]
# A shortened cyclic undrained study: rBNN and rFFNN with H = 14, FFNN with H = 1.
#
# `python3 demos/03_cyclic_study.py [epochs]` trains for 60 epochs by default
# (a few minutes on one core). The full run uses the shipped config:
#
#     triaxbnn simulate --config cyclic_cu --out-dir run
#     triaxbnn train    --config cyclic_cu --out-dir run
#     triaxbnn predict  --checkpoint run/checkpoint.json --out-dir run
#     triaxbnn evaluate --out-dir run

# %%
import sys

import numpy as np

from triaxbnn import bayesmodel as bm
from triaxbnn import cli
from triaxbnn import datapipe as dp
from triaxbnn import detmodel as dm
from triaxbnn import evalkit as ek
from triaxbnn import triaxsim as ts

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 60
cfg = cli.load_config("cyclic_cu")
tr = dict(cfg["train"], epochs=epochs, decay_steps=max(1, epochs // 2))

ds = ts.generate_dataset(ts.default_suite("undrained"))
train, val, test, stats = dp.prepare_splits(ds, dp.split_by_e0(ds, [0.6], [0.575, 0.775, 0.95]))
truth = {s.test_id: s.states[1:] for s in test}

# %% Bayesian recursive network
res = bm.train_rbnn(dp.window_batch(train, 14), dp.window_batch(val, 14), bm.BayesConfig.from_dict(tr))
print("rbnn:", res.status, "best epoch", res.best_epoch)
preds = bm.predict_dataset(res.vp, res.arch, test, n_mc=200)
rep = ek.build_report(preds, truth)
print("rBNN  RMSE p/q/r_u", np.round(rep.rmse, 4), f"coverage {rep.coverage:.3f}")

# %% deterministic recursive network and the single-step baseline
for name, H in (("rFFNN", 14), ("FFNN", 1)):
    r = dm.train_rffnn(dp.window_batch(train, H), dp.window_batch(val, H),
                       dm.TrainConfig.from_dict(dict(tr, H=H)))
    rep = ek.build_report(dm.predict_dataset(r.params, r.arch, test), truth)
    print(f"{name:<5} RMSE p/q/r_u", np.round(rep.rmse, 4))

# %% the first held-out test in kPa, with its 95% band
s = ds.by_id("CU-e0.575")
pr = preds["CU-e0.575"].denormalize(s.sigma3, stats)
for t in range(0, s.N, 30):
    print(f"step {t + 1:>3}: q {s.states[t + 1, 1]:8.2f}  predicted {pr.mean[t, 1]:8.2f} "
          f"[{pr.lo95[t, 1]:8.2f}, {pr.hi95[t, 1]:8.2f}]")

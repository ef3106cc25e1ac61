# %% [markdown]
# The autodiff core, the variational objective and a one-parameter sanity check.
#
# Run with `python3 demos/02_gradients_and_elbo.py` (about 10 s).

# %%
import math

import numpy as np

from triaxbnn import bayesmodel as bm
from triaxbnn import detmodel as dm
from triaxbnn import gradcore as gc
from triaxbnn.datapipe import WindowBatch
from triaxbnn.gradcore import NetArch

rng = np.random.default_rng(0)

# %% reverse mode against central differences on a recursive window loss
arch = NetArch(3 + 4 + 2, (8, 8), 3)
params = gc.init_params(arch, rng)
batch = WindowBatch(rng.normal(size=(4, 3)), rng.normal(size=(4, 5, 4)),
                    rng.normal(size=(4, 5, 3)), rng.normal(size=(4, 2)))
loss, g = gc.value_and_grad(lambda p: dm.batch_loss(p, arch, batch), params)
fd = gc.finite_difference(lambda p: float(dm.batch_loss(p, arch, batch)), params)
print(f"Huber loss {float(loss):.4f}, max |grad - fd| = {np.abs(g - fd).max():.2e}")

# %% KL to the standard normal prior in closed form
vp = bm.VariationalParams.initial(params, sigma0=0.05)
print(f"KL at initialization: {bm.kl_to_prior(vp):.1f} over {len(params)} weights")
one = bm.VariationalParams(np.zeros(1), bm.softplus_inv(np.array([2.0])))
print(f"KL(N(0, 4) || N(0, 1)) = {bm.kl_to_prior(one):.6f}  (1.5 - ln 2 = {1.5 - math.log(2):.6f})")

# %% ELBO estimates get tighter with more samples
lik = bm.WindowLikelihood(arch)
for n_q in (1, 10, 100):
    vals = [bm.elbo_estimate(vp, lik, batch, n_q=n_q, seed=s) for s in range(20)]
    print(f"N_q={n_q:>3}: ELBO {np.mean(vals):9.3f} +/- {np.std(vals):.3f}")


# %% a scalar "network" with a conjugate Gaussian posterior
class Obs:
    def __init__(self, y):
        self.y = y

    def __len__(self):
        return len(self.y)

    def take(self, idx):
        return Obs(self.y[idx])


class MeanLik:
    n_params = 1

    def __init__(self, n, noise):
        self.n, self.noise = n, noise

    def init_mean(self, rng):
        return np.zeros(1)

    def __call__(self, beta, data):
        return -0.5 * self.n / len(data) / self.noise ** 2 * gc.square(data.y - beta).sum(axis=-1)


y = rng.normal(1.5, 2.0, size=20)
prec = 1 + len(y) / 4.0
cfg = bm.BayesConfig(lr=0.02, lr_decay=0.3, decay_steps=1500, epochs=4000, batch_size=20, n_q=16,
                     patience=10_000)
res = bm.train_rbnn(Obs(y), None, cfg, loglik=MeanLik(len(y), 2.0))
print(f"posterior mean {res.vp.mu[0]:.4f} (exact {y.sum() / 4 / prec:.4f}), "
      f"std {res.vp.sigma[0]:.4f} (exact {prec ** -0.5:.4f})")

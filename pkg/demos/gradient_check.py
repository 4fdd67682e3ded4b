"""Compare reverse-mode gradients with central finite differences.

Runs the check on a few single ops and then on the whole toy network in
training mode.  Everything is float64.

    python3 demos/gradient_check.py
"""
import numpy as np

from deepntl import autodiff as ad
from deepntl.model import ModelConfig, forward, init_params, params_astype, trainable

rng = np.random.default_rng(0)
x = ad.Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
w = ad.Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
b = ad.Tensor(rng.normal(size=(4,)), requires_grad=True)

y = ad.Tensor(rng.normal(size=(2, 4, 3, 3)), requires_grad=True)
weights = ad.Tensor(rng.normal(size=(2, 1, 6, 6)))

checks = {
    "sigmoid": (lambda: ad.sum(ad.sigmoid(x)), [x]),
    "pixel_shuffle": (lambda: ad.sum(ad.mul(ad.pixel_shuffle(y, 2), weights)), [y]),
    "conv2d": (lambda: ad.sum(ad.mul(ad.conv2d(x, w, b, pad=1), ad.conv2d(x, w, b, pad=1))),
               [x, w, b]),
}
for name, (f, leaves) in checks.items():
    print(f"{name:14s} max relative error {ad.grad_check(f, leaves, eps=1e-5):.2e}")

cfg = ModelConfig.toy(4, 4)
params = params_astype(init_params(cfg, seed=1), np.float64)
dr = rng.uniform(0, 1, size=(2, 1, 4, 4))
dt = rng.uniform(0, 1, size=(2, 1, 4, 4))
vr = rng.uniform(0, 1, size=(2, 1, 8, 8))
gt = rng.uniform(0, 1, size=(2, 1, 8, 8))
leaves = list(trainable(params).values())


def loss():
    out = forward(ad.Tensor(dr), ad.Tensor(dt), ad.Tensor(vr), params, cfg, training=True)
    return ad.l1_loss(out, ad.Tensor(gt))


# central differences straddling a ReLU kink disagree with the analytic
# derivative, so a single large error here usually means an unlucky point
err = ad.grad_check(loss, leaves, eps=1e-5)
print(f"toy network    {sum(t.data.size for t in leaves)} parameters, "
      f"max relative error {err:.2e}")

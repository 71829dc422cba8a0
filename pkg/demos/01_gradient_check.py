"""
Checking reverse-mode gradients against finite differences
===========================================================

Every op in ``segattack.autodiff`` carries its own backward rule. This
script compares those rules with central differences on a small U-Net.
"""
import numpy as np

from segattack import autodiff as ad
from segattack.losses import LossKind
from segattack.models import ModelConfig, build_model

rng = np.random.default_rng(0)

# a single convolution first: gradient with respect to input, kernels and bias
x = rng.normal(size=(1, 2, 6, 6))
k = rng.normal(size=(3, 2, 3, 3))
b = rng.normal(size=3)
xt, kt, bt = (ad.Tensor(a, requires_grad=True) for a in (x, k, b))
out = ad.reduce_sum(ad.conv2d(xt, kt, bt, padding=1))
grads = ad.backward(out)
for name, t, arr in (("input", xt, x), ("kernels", kt, k), ("bias", bt, b)):
    def f(a, name=name):
        args = {"input": x, "kernels": k, "bias": b}
        args[name] = a
        return float(ad.conv2d(ad.Tensor(args["input"]), ad.Tensor(args["kernels"]), ad.Tensor(args["bias"]), padding=1).data.sum())

    print(f"conv2d d/d{name:<8} relative error {ad.relative_error(grads[t], ad.numerical_grad(f, arr)):.2e}")

# now the whole network: input gradient of the hybrid loss, as FGSM uses it
model = build_model(ModelConfig("unet", depth=3, base_channels=4, seed=0))
image = rng.uniform(0, 1, size=(1, 1, 16, 16))
target = (rng.uniform(size=(1, 3, 16, 16)) > 0.5).astype(float)
loss = LossKind("hybrid_focal_dice")

xt = ad.Tensor(image, requires_grad=True)
analytic = ad.backward(loss(target, model.forward(xt)))[xt]
numeric = ad.numerical_grad(lambda a: float(loss(target, model.forward(a)).data), image)
print("U-Net input gradient relative error", f"{ad.relative_error(analytic, numeric):.2e}")

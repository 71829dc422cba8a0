"""
FGSM against a trained segmentation model
=========================================

One signed gradient step on the input, with three different attack losses,
and the per-pixel damage shown as TP/FP/FN counts.
"""
import numpy as np

from segattack.attack import AttackConfig, epsilon_sweep, fgsm
from segattack.data import PhantomConfig, generate_phantoms, split_by_scan
from segattack.losses import LossKind
from segattack.metrics import binarize, diff_counts, diff_map
from segattack.models import ModelConfig, build_model
from segattack.training import TrainConfig, train

ds = generate_phantoms(PhantomConfig(n_scans=10, slices_per_scan=20, image_size=64, seed=0))
train_set, test_set = split_by_scan(ds, 0.2, seed=0)
test_set = test_set.with_masks()
model, _ = train(
    build_model(ModelConfig("unet", depth=3, base_channels=8, seed=0), dtype=np.float32),
    train_set,
    test_set,
    TrainConfig(epochs=10, batch_size=4, lr_max=1e-3),
)

# the perturbation stays within epsilon (up to float32 rounding) and in [0, 1]
x, y = test_set.images(np.float32)[:4], test_set.masks()[:4]
adv = fgsm(model, AttackConfig(0.009), x, y)
print("max |adv - x| =", float(np.abs(adv - x).max()))

# which loss hurts most?
for selector in ("bce", "focal+dice", "focal"):
    rows, _ = epsilon_sweep(model, AttackConfig(attack_loss=LossKind.parse(selector)), test_set)
    print(selector.ljust(10), "  ".join(f"eps={r.epsilon:<5g} DSC={r.mean_dsc:.3f} AS={r.attack_success:.3f}" for r in rows))

# pixel-level view of one slice: true positives lost, false positives gained
clean = binarize(model.forward(x[:1]).data)[0]
attacked = binarize(model.forward(fgsm(model, AttackConfig(0.015), x[:1], y[:1])).data)[0]
print("clean   ", diff_counts(diff_map(clean, y[0])))
print("attacked", diff_counts(diff_map(attacked, y[0])))

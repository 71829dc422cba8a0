"""Acceptance criteria, one test each, at pinned tolerances.

Each test prints a ``criterion N [PASS|FAIL]`` line; the lines are repeated in
an "acceptance criteria" section at the end of the pytest run. Criteria 6 to 8
train real models and take tens of minutes on one core (marked ``slow``).
"""
import functools
import math
import os
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from segattack import autodiff as ad
from segattack import experiment as ex
from segattack.attack import AttackConfig, fgsm
from segattack.autodiff import Tensor, numerical_grad, relative_error
from segattack.data import RleError, rle_decode, rle_encode
from segattack.experiment import ExperimentConfig
from segattack.losses import LossKind, bce_loss, compute_loss, dice_loss, focal_loss, hybrid_loss
from segattack.metrics import attack_success, diff_counts, diff_map, dsc, dsc_from_counts
from segattack.models import ModelConfig, build_model

GRAD_TOL = 1e-4
SEEDS = range(100)


# ---------------------------------------------------------------- 1 gradient integrity


def _off_kink(rng, shape, lo=0.05, hi=1.0):
    """Values with magnitude in [lo, hi] and random sign."""
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape):
    """Pool-safe input: a shuffled grid with gaps far above the FD step."""
    vals = np.linspace(-1, 1, int(np.prod(shape)))
    return rng.permutation(vals).reshape(shape)


def _op_cases(rng):
    """(name, function of input arrays, input arrays). Every function is
    projected onto a fixed random direction so the check covers the full
    Jacobian, not just its column sums."""
    s = (2, 3, 4, 4)
    a, b = _off_kink(rng, s), _off_kink(rng, s)
    pos = rng.uniform(0.2, 2.0, size=s)
    mask = rng.uniform(size=s) > 0.5
    x = rng.normal(size=(2, 3, 6, 6))
    x7 = rng.normal(size=(2, 3, 7, 7))
    k3 = rng.normal(size=(4, 3, 3, 3))
    k1 = rng.normal(size=(4, 3, 1, 1))
    bias = rng.normal(size=4)
    return [
        ("add", lambda p, q: ad.add(p, q), [a, b]),
        ("sub", lambda p, q: ad.sub(p, q), [a, b]),
        ("mul", lambda p, q: ad.mul(p, q), [a, b]),
        ("div", lambda p, q: ad.div(p, q), [a, pos]),
        ("add_const", lambda p: ad.add_const(p, 0.7), [a]),
        ("scale_const", lambda p: ad.scale_const(p, -1.3), [a]),
        ("pow_const", lambda p: ad.pow_const(p, 2.5), [pos]),
        ("relu", ad.relu, [a]),
        ("sigmoid", ad.sigmoid, [a * 4]),
        ("log", ad.log, [pos]),
        ("clip", lambda p: ad.clip(p, -0.5, 0.5), [np.where(np.abs(np.abs(a) - 0.5) < 0.02, 0.3, a)]),
        ("where_const", lambda p, q: ad.where_const(mask, p, q), [a, b]),
        ("reduce_sum_axis", lambda p: ad.reduce_sum(p, axis=(2, 3)), [a]),
        ("reduce_mean_axis", lambda p: ad.reduce_mean(p, axis=1), [a]),
        ("concat_channels", lambda p, q: ad.concat_channels(p, q), [a, b]),
        ("max_pool2", ad.max_pool2, [_distinct(rng, s)]),
        ("upsample_nearest2", ad.upsample_nearest2, [a]),
        ("conv2d_3x3_pad1", lambda p, k, c: ad.conv2d(p, k, c, padding=1), [x, k3, bias]),
        ("conv2d_3x3_stride2", lambda p, k, c: ad.conv2d(p, k, c, stride=2, padding=1), [x7, k3, bias]),
        ("conv2d_1x1", lambda p, k, c: ad.conv2d(p, k, c), [x, k1, bias]),
    ]


def _check_op(rng, fn, inputs):
    tensors = [Tensor(v, requires_grad=True) for v in inputs]
    out = fn(*tensors)
    direction = rng.normal(size=out.shape)
    root = ad.reduce_sum(ad.mul(out, Tensor(direction))) if out.data.ndim else out
    grads = ad.backward(root)
    worst = 0.0
    for i, t in enumerate(tensors):
        def f(arr, i=i):
            args = [Tensor(arr) if j == i else Tensor(v) for j, v in enumerate(inputs)]
            return float(np.sum(fn(*args).data * direction))

        worst = max(worst, relative_error(grads[t], numerical_grad(f, inputs[i])))
    return worst


def _loss_cases(rng):
    y = (rng.uniform(size=(2, 3, 3, 3)) > 0.5).astype(float)
    p = rng.uniform(0.05, 0.95, size=y.shape)
    cases = []
    for kind in ("bce", "focal", "dice", "hybrid_focal_dice"):
        for reduction in ("sum", "mean"):
            lk = LossKind(kind, reduction=reduction)
            cases.append((f"{kind}/{reduction}", lk, y, p))
    return cases


def test_criterion_1_gradient_integrity(criterion):
    with criterion(1, "gradient integrity") as note:
        start = time.perf_counter()
        worst = {}
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            for name, fn, inputs in _op_cases(rng):
                worst[name] = max(worst.get(name, 0.0), _check_op(rng, fn, inputs))
            for name, lk, y, p in _loss_cases(rng):
                pt = Tensor(p, requires_grad=True)
                g = ad.backward(compute_loss(lk, y, pt))[pt]
                fd = numerical_grad(lambda a: float(compute_loss(lk, y, Tensor(a)).data), p)
                worst[name] = max(worst.get(name, 0.0), relative_error(g, fd))

        model = build_model(ModelConfig("unet", depth=3, base_channels=4, seed=0))
        rng = np.random.default_rng(0)
        for pname in model.parameters:  # random biases keep pre-activations off ReLU kinks
            if pname.endswith(".bias"):
                model.parameters[pname] = rng.uniform(-0.1, 0.1, model.parameters[pname].shape)
        x = rng.uniform(0, 1, size=(1, 1, 16, 16))
        y = (rng.uniform(size=(1, 3, 16, 16)) > 0.5).astype(float)
        lk = LossKind("hybrid_focal_dice")
        xt = Tensor(x, requires_grad=True)
        g = ad.backward(lk(y, model.forward(xt)))[xt]
        fd = numerical_grad(lambda a: float(lk(y, model.forward(a)).data), x)
        worst["unet_d3_16x16_input"] = relative_error(g, fd)

        elapsed = time.perf_counter() - start
        name, value = max(worst.items(), key=lambda kv: kv[1])
        note["detail"] = (
            f"{len(worst)} checks x {len(SEEDS)} seeds, worst {name} rel err {value:.2e} "
            f"(tol {GRAD_TOL:g}), {elapsed:.0f}s (budget 120s)"
        )
        assert value < GRAD_TOL
        assert elapsed < 120


# ---------------------------------------------------------------- 2 formula oracles


def test_criterion_2_formula_oracles(criterion):
    with criterion(2, "loss formula oracles") as note:
        def v(t):
            return float(t.data)

        ln2 = math.log(2)
        dice_half = 1 - 2 * (0.5 + 1e-6) / (1.5 + 1e-6)
        hand = [
            (v(bce_loss(np.array([1.0]), Tensor([0.5]), "sum")), 0.693147),
            (v(bce_loss(np.array([1.0, 0.0]), Tensor([0.8, 0.3]), "sum")), 0.579818),
            (v(focal_loss(np.array([1.0]), Tensor([0.5]), 2.0, "sum")), 0.173287),
            (v(focal_loss(np.array([1.0]), Tensor([0.5]), 2.0, "sum")), 0.25 * ln2),
            (v(dice_loss(np.ones((1, 1, 2, 2)), Tensor(np.ones((1, 1, 2, 2))))), 0.0),
            (v(dice_loss(np.ones((1, 1, 2, 2)), Tensor(np.zeros((1, 1, 2, 2))))), 1.0),
            (dice_half, 0.333333),
            (v(hybrid_loss(np.array([1.0]), Tensor([0.5]), LossKind(reduction="sum"))), 0.506620),
        ]
        hand_err = max(abs(a - b) for a, b in hand)

        rng = np.random.default_rng(0)
        focal_err = 0.0
        for _ in range(1000):
            shape = tuple(rng.integers(1, 5, size=3))
            y = (rng.uniform(size=shape) > 0.5).astype(float)
            p = Tensor(rng.uniform(0, 1, size=shape))
            for red in ("sum", "mean"):
                focal_err = max(focal_err, abs(v(focal_loss(y, p, 0.0, red)) - v(bce_loss(y, p, red))))

        dice_err = 0.0
        for _ in range(1000):
            truth = (rng.uniform(size=(1, 1, 8, 8)) > rng.uniform(0.2, 0.9)).astype(np.uint8)
            pred = (rng.uniform(size=(1, 1, 8, 8)) > rng.uniform(0.2, 0.9)).astype(np.uint8)
            truth[0, 0, rng.integers(8), rng.integers(8)] = 1
            dice_err = max(dice_err, abs((1 - dsc(pred, truth)) - v(dice_loss(truth, Tensor(pred.astype(float))))))

        note["detail"] = (
            f"hand examples max err {hand_err:.1e} (tol 1e-6); focal(0) vs bce {focal_err:.1e} (tol 1e-12); "
            f"1-dsc vs dice loss {dice_err:.1e} (tol 1e-5)"
        )
        assert hand_err <= 1e-6
        assert focal_err <= 1e-12
        assert dice_err <= 1e-5


# ---------------------------------------------------------------- 3 attack success arithmetic


def test_criterion_3_attack_success_values(criterion):
    with criterion(3, "attack success against published values") as note:
        a = attack_success(0.8024, 0.3750)
        b = attack_success(0.7841, 0.3873)
        note["detail"] = f"AS(0.8024, 0.3750) = {a:.5f} vs 0.5327; AS(0.7841, 0.3873) = {b:.5f} vs 0.5061 (tol 1e-4)"
        assert abs(a - 0.5327) <= 1e-4
        assert abs(b - 0.5061) <= 1e-4


# ---------------------------------------------------------------- 4 FGSM contract


def test_criterion_4_fgsm_contract(criterion):
    with criterion(4, "FGSM contract") as note:
        model = build_model(ModelConfig("unet", depth=2, base_channels=2, seed=0))
        rng = np.random.default_rng(0)
        for pname in model.parameters:
            if pname.endswith(".bias"):
                model.parameters[pname] = rng.uniform(-0.1, 0.1, model.parameters[pname].shape)
        before = {k: v.copy() for k, v in model.parameters.items()}
        selectors = ["bce", "focal", "dice", "focal+dice"]
        worst_gap, overshoot, out_of_range, identity_fail, scale_fail, form_fail = 0.0, 0, 0, 0, 0, 0
        for case in range(1000):
            x = rng.uniform(0, 1, size=(2, 1, 8, 8))
            x[x < 0.05] = 0.0  # saturated pixels on both ends
            x[x > 0.95] = 1.0
            y = (rng.uniform(size=(2, 3, 8, 8)) > 0.5).astype(np.uint8)
            eps = float(rng.choice([0.0, 0.001, 0.005, 0.009, 0.015, rng.uniform(0, 0.5)]))
            sel = selectors[case % 4]
            adv = fgsm(model, AttackConfig(eps, LossKind.parse(sel)), x, y)
            worst_gap = max(worst_gap, float(np.max(np.abs(adv - x))) - eps)
            # the bound is checked against the float-rounded x +- eps, so one-ulp
            # noise in the subtraction above is not mistaken for an overshoot
            overshoot += int(np.any(adv > x + eps) or np.any(adv < x - eps))
            out_of_range += int(adv.min() < 0 or adv.max() > 1)
            if eps == 0:
                identity_fail += int(not np.array_equal(adv, x))
            if case % 10 == 0 and eps > 0:
                lk = LossKind.parse(sel)
                scaled = LossKind(lk.kind, w_dice=2.5, w_focal=2.5) if lk.kind == "hybrid_focal_dice" else None
                if scaled is not None:
                    scale_fail += int(not np.array_equal(adv, fgsm(model, AttackConfig(eps, scaled), x, y)))
                if lk.kind in ("bce", "focal"):
                    a = fgsm(model, AttackConfig(eps, LossKind(lk.kind, reduction="sum")), x, y)
                    b = fgsm(model, AttackConfig(eps, LossKind(lk.kind, reduction="mean")), x, y)
                    form_fail += int(not np.array_equal(a, b))
        eps0 = fgsm(model, AttackConfig(0.0), x, y)
        identity_fail += int(not np.array_equal(eps0, x))
        unchanged = all(np.array_equal(before[k], model.parameters[k]) for k in before)
        note["detail"] = (
            f"1000 cases: bound violations {overshoot} (max |adv-x|inf - eps = {worst_gap:.1e}), "
            f"out of range {out_of_range}, "
            f"eps=0 mismatches {identity_fail}, rescale mismatches {scale_fail}, sum/mean mismatches {form_fail}, "
            f"parameters unchanged {unchanged}"
        )
        assert overshoot == 0 and worst_gap <= 1e-15
        assert out_of_range == identity_fail == scale_fail == form_fail == 0
        assert unchanged


# ---------------------------------------------------------------- 5 RLE


def _split_runs(rle, rng):
    """Equivalent non-canonical encoding: cut some runs in two."""
    tok = [int(t) for t in rle.split()]
    out = []
    for start, length in zip(tok[::2], tok[1::2]):
        if length > 1 and rng.uniform() < 0.5:
            cut = int(rng.integers(1, length))
            out += [start, cut, start + cut, length - cut]
        else:
            out += [start, length]
    return " ".join(map(str, out))


def test_criterion_5_rle_properties(criterion):
    with criterion(5, "RLE round trip and validation") as note:
        rng = np.random.default_rng(0)
        roundtrip_fail = canonical_fail = 0
        for _ in range(1000):
            h, w = (int(v) for v in rng.integers(1, 65, size=2))
            density = rng.uniform(0, 1)
            mask = (rng.uniform(size=(h, w)) < density).astype(np.uint8)
            rle = rle_encode(mask)
            roundtrip_fail += int(not np.array_equal(rle_decode(rle, h, w), mask))
            canonical_fail += int(rle_encode(rle_decode(_split_runs(rle, rng), h, w)) != rle)
        malformed = ["1", "1 2 3", "3 2 1 1", "1 3 2 2", "8 5", "0 2", "a 2", "1 -1", "1 0"]
        accepted = []
        for bad in malformed:
            try:
                rle_decode(bad, 3, 3)
                accepted.append(bad)
            except RleError:
                pass
        note["detail"] = (
            f"1000 masks up to 64x64: round-trip failures {roundtrip_fail}, canonical-form failures {canonical_fail}; "
            f"{len(malformed) - len(accepted)}/{len(malformed)} malformed strings rejected"
        )
        assert roundtrip_fail == canonical_fail == 0
        assert not accepted, accepted


# ---------------------------------------------------------------- 6 and 7 trained pipeline


@functools.lru_cache(maxsize=None)
def trained_pipeline():
    """Default experiment (two base-16 models) run once per session."""
    out = os.environ.get("SEGATTACK_ACCEPTANCE_DIR") or tempfile.mkdtemp(prefix="segattack-acceptance-")
    cfg = ExperimentConfig(output_dir=str(Path(out) / "default")).seeded()
    start = time.perf_counter()
    ex.cmd_generate(cfg)
    histories = ex.cmd_train(cfg)
    summaries = ex.cmd_attack(cfg)
    ex.cmd_report(cfg)
    return cfg, histories, summaries, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_6_desk_scale_table(criterion):
    with criterion(6, "desk-scale clean vs attacked table") as note:
        cfg, histories, summaries, elapsed = trained_pipeline()
        assert cfg.phantom.n_scans >= 10 and cfg.phantom.image_size == 64
        assert all(m.base_channels == 16 for _, m in cfg.models)
        assert cfg.train.epochs <= 15
        parts, ok = [], True
        for name, s in summaries.items():
            a = {k: v["attack_success"] for k, v in s["losses"].items()}
            order = " > ".join(sorted(a, key=lambda k: -a[k]))
            parts.append(
                f"{name} clean {s['dsc_clean']:.4f} AS " + " ".join(f"{k}={v:.4f}" for k, v in a.items())
                + f" ({order})"
            )
            ok &= s["dsc_clean"] >= 0.75 and all(v >= 0.10 for v in a.values())
            assert histories[name].best_dsc == pytest.approx(s["dsc_clean"], abs=1e-9)
        report = (cfg.root / "report" / "report.md").read_text()
        note["detail"] = "; ".join(parts) + f"; {elapsed / 60:.1f} min (target 30)"
        assert "Ordering" in report
        for name, s in summaries.items():
            assert s["dsc_clean"] >= 0.75, f"{name} clean DSC {s['dsc_clean']:.4f} < 0.75"
            for k, v in s["losses"].items():
                assert v["attack_success"] >= 0.10, f"{name}/{k} AS {v['attack_success']:.4f} < 0.10"
        assert ok


@pytest.mark.slow
def test_criterion_7_epsilon_trend(criterion):
    with criterion(7, "epsilon sweep trend") as note:
        cfg, _, summaries, _ = trained_pipeline()
        drops = {}
        for name, s in summaries.items():
            for sel in cfg.attack_losses:
                path = cfg.root / "attacks" / name / ex.loss_slug(sel) / "sweep.csv"
                lines = path.read_text().splitlines()
                assert lines[0] == "epsilon,mean_dsc,attack_success"
                table = {float(r.split(",")[0]): float(r.split(",")[1]) for r in lines[1:]}
                assert sorted(table) == [0.0, 0.005, 0.009, 0.015]
                drops[f"{name}/{sel}"] = (table[0.0] - table[0.015]) / table[0.0]
        worst = min(drops, key=drops.get)
        note["detail"] = (
            "relative DSC drop at 0.015: " + " ".join(f"{k}={v:.3f}" for k, v in drops.items())
            + f"; minimum {worst} (need >= 0.10)"
        )
        assert all(v >= 0.10 for v in drops.values())


# ---------------------------------------------------------------- 8 reproducibility

REPRO = {
    "format_version": 1,
    "seed": 5,
    "phantom": {"n_scans": 4, "slices_per_scan": 6, "image_size": 32},
    "test_fraction": 0.25,
    "models": [
        {"name": "unet", "arch": "unet", "depth": 3, "base_channels": 4},
        {"name": "unetpp", "arch": "unetpp", "depth": 3, "base_channels": 4},
    ],
    "train": {"epochs": 3, "batch_size": 4},
    "attack": {"save_images": 2},
}


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.slow
def test_criterion_8_reproducibility(criterion, tmp_path):
    with criterion(8, "reproducible pipeline") as note:
        trees = []
        for run in ("first", "second"):
            cfg = ExperimentConfig.from_dict(dict(REPRO, output_dir=str(tmp_path / run))).seeded()
            ex.run_all(cfg)
            trees.append(_tree(cfg.root))
        a, b = trees
        reports = [k for k in a if k.startswith("report/")]
        differing = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
        note["detail"] = f"{len(reports)} report files, {len(a)} artifacts in total; differing files: {len(differing)}"
        assert reports and all(a[k] == b[k] for k in reports)
        assert not differing, differing[:5]


# ---------------------------------------------------------------- 9 diff maps


def test_criterion_9_diff_map_counts(criterion):
    with criterion(9, "diff-map counts reproduce DSC") as note:
        rng = np.random.default_rng(0)
        mismatches = 0
        for _ in range(100):
            shape = tuple(int(v) for v in rng.integers(1, 33, size=2))
            pred = (rng.uniform(size=shape) < rng.uniform()).astype(np.uint8)
            truth = (rng.uniform(size=shape) < rng.uniform()).astype(np.uint8)
            truth.flat[rng.integers(truth.size)] = 1
            c = diff_counts(diff_map(pred, truth))
            mismatches += int(dsc_from_counts(c["TP"], c["FP"], c["FN"]) != dsc(pred, truth))
            mismatches += int(2 * c["TP"] / (2 * c["TP"] + c["FP"] + c["FN"]) != dsc(pred, truth))
        note["detail"] = f"100 random pairs, exact mismatches {mismatches}"
        assert mismatches == 0

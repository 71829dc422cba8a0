"""End-to-end experiment runner: generate, train, attack, report, check.

Every command reads one JSON config and writes under ``output_dir``::

    data/                 images/{id}.pgm, masks.csv, manifest.txt, split.json
    models/{model}/       model.ckpt, history.csv
    attacks/{model}/      summary.json
    attacks/{model}/{loss}/
                          records.csv, sweep.csv,
                          images/{id}_{eps}.pgm|.png, diffs/{id}_{eps}.png
    report/               table.csv, params_vs_as.csv, report.md

All outputs are deterministic functions of the config, so reruns rewrite
identical bytes.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .attack import SWEEP_EPSILONS, AttackConfig, AttackSummary, epsilon_sweep
from .data import (
    AugmentConfig,
    Dataset,
    PhantomConfig,
    generate_phantoms,
    load_dataset,
    read_manifest,
    read_pgm,
    save_dataset,
    split_by_scan,
    write_pgm,
)
from .losses import LossKind
from .metrics import TABLE_LOSSES, EvalRow, diff_map, render_diff_map
from .models import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .training import History, TrainConfig, train

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1
PGM_HALF_QUANTUM = 0.5 / 65535
# float32 arithmetic in the attack can add a few ulps on top of quantisation
CHECK_SLACK = 1e-6


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class PipelineError(RuntimeError):
    """A command could not run, e.g. because an earlier stage is missing."""


# Phantom settings tuned so that both architectures train past 0.75 DSC
# while a 0.009 perturbation still moves the predictions.
DEFAULT_PHANTOM = {
    "n_scans": 20,
    "intensity_range": [[0.45, 0.46], [0.48, 0.49], [0.51, 0.52]],
    "body_intensity": 0.41,
    "texture": 0.12,
    "noise": 0.01,
}


@dataclass(frozen=True)
class ExperimentConfig:
    phantom: PhantomConfig = PhantomConfig.from_dict(DEFAULT_PHANTOM)
    test_fraction: float = 0.1
    models: Tuple[Tuple[str, ModelConfig], ...] = (
        ("unet", ModelConfig("unet", 5, 16)),
        ("unetpp", ModelConfig("unetpp", 5, 16)),
    )
    train: TrainConfig = TrainConfig(patience=5)
    attack: AttackConfig = AttackConfig(epsilons=SWEEP_EPSILONS)
    attack_losses: Tuple[str, ...] = TABLE_LOSSES
    save_images: int = 4
    output_dir: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        names = [n for n, _ in self.models]
        if not names:
            raise ConfigError("at least one model is required")
        if len(set(names)) != len(names):
            raise ConfigError(f"model names must be unique, got {names}")
        for n in names:
            if not n or "/" in n or n.startswith("."):
                raise ConfigError(f"invalid model name {n!r}")
        if not self.attack_losses:
            raise ConfigError("attack_losses must be nonempty")
        if len(set(self.attack_losses)) != len(self.attack_losses):
            raise ConfigError(f"duplicate attack loss in {self.attack_losses}")
        for sel in self.attack_losses:
            LossKind.parse(sel)
        if not 0 < self.test_fraction < 1:
            raise ConfigError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if self.save_images < 0:
            raise ConfigError("save_images must be >= 0")

    # seeds: one global seed drives generation, the split, initialisation and batching
    def seeded(self) -> "ExperimentConfig":
        return replace(
            self,
            phantom=replace(self.phantom, seed=self.seed),
            models=tuple((n, replace(m, seed=self.seed)) for n, m in self.models),
            train=replace(self.train, seed=self.seed),
        )

    @property
    def root(self) -> Path:
        return Path(self.output_dir)

    def model_config(self, name: str) -> ModelConfig:
        for n, m in self.models:
            if n == name:
                return m
        raise ConfigError(f"unknown model {name!r}; configured: {[n for n, _ in self.models]}")

    def to_dict(self) -> dict:
        tr = self.train
        return {
            "format_version": CONFIG_VERSION,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "phantom": _jsonable(self.phantom.to_dict()),
            "test_fraction": self.test_fraction,
            "models": [dict(name=n, **_model_fields(m)) for n, m in self.models],
            "train": {
                "epochs": tr.epochs,
                "batch_size": tr.batch_size,
                "lr_max": tr.lr_max,
                "lr_min": tr.lr_min,
                "weight_decay": tr.weight_decay,
                "max_iterations": tr.max_iterations,
                "patience": tr.patience,
                "loss": tr.loss.selector,
                "gamma": tr.loss.gamma,
                "augment": asdict(tr.augment),
                "dtype": tr.dtype,
            },
            "attack": {
                "epsilon": self.attack.epsilon,
                "epsilons": list(self.attack.epsilons),
                "losses": list(self.attack_losses),
                "batch_size": self.attack.batch_size,
                "save_images": self.save_images,
            },
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        """SHA-256 of the canonical config without ``output_dir``, so that the
        same experiment written to two places hashes the same."""
        d = self.to_dict()
        del d["output_dir"]
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            return _parse(d)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc


def _jsonable(obj):
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    return obj


def _model_fields(m: ModelConfig) -> dict:
    d = m.to_dict()
    d.pop("seed", None)
    return d


def _check_keys(section: str, d: dict, allowed: Sequence[str]) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{section} must be a JSON object")
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(extra)}")


def _parse(d: dict) -> ExperimentConfig:
    _check_keys(
        "config", d, ["format_version", "seed", "output_dir", "phantom", "test_fraction", "models", "train", "attack"]
    )
    version = d.get("format_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config format_version {version}; expected {CONFIG_VERSION}")
    base = ExperimentConfig()
    kw: dict = {}
    if "seed" in d:
        if not isinstance(d["seed"], int) or isinstance(d["seed"], bool):
            raise ConfigError("seed must be an integer")
        kw["seed"] = d["seed"]
    if "output_dir" in d:
        kw["output_dir"] = str(d["output_dir"])
    if "test_fraction" in d:
        kw["test_fraction"] = float(d["test_fraction"])
    if "phantom" in d:
        ph = dict(DEFAULT_PHANTOM)
        ph.update(d["phantom"])
        ph.pop("seed", None)
        kw["phantom"] = PhantomConfig.from_dict(ph)
    if "models" in d:
        models = []
        for entry in d["models"]:
            entry = dict(entry)
            _check_keys("models[]", entry, ["name", "arch", "depth", "base_channels", "in_channels", "out_classes"])
            if "name" not in entry:
                raise ConfigError("every model needs a name")
            name = str(entry.pop("name"))
            models.append((name, ModelConfig(**entry)))
        kw["models"] = tuple(models)
    if "train" in d:
        t = dict(d["train"])
        _check_keys(
            "train",
            t,
            ["epochs", "batch_size", "lr_max", "lr_min", "weight_decay", "max_iterations", "patience", "loss", "gamma",
             "augment", "dtype"],
        )
        loss = LossKind.parse(t.pop("loss", base.train.loss.selector), gamma=float(t.pop("gamma", 2.0)))
        aug = t.pop("augment", None)
        augment = AugmentConfig(**aug) if aug is not None else base.train.augment
        kw["train"] = replace(base.train, loss=loss, augment=augment, **t)
    if "attack" in d:
        a = dict(d["attack"])
        _check_keys("attack", a, ["epsilon", "epsilons", "losses", "batch_size", "save_images"])
        if "losses" in a:
            kw["attack_losses"] = tuple(a.pop("losses"))
        if "save_images" in a:
            kw["save_images"] = int(a.pop("save_images"))
        if "epsilons" in a:
            a["epsilons"] = tuple(float(e) for e in a["epsilons"])
        kw["attack"] = replace(base.attack, **a)
    return replace(base, **kw)


def load_config(path: Union[str, Path], seed: Optional[int] = None, out: Optional[str] = None) -> ExperimentConfig:
    """Read a JSON config; ``seed`` and ``out`` override the file's values."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    cfg = ExperimentConfig.from_dict(raw)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if out is not None:
        cfg = replace(cfg, output_dir=out)
    return cfg.seeded()


# ---------------------------------------------------------------- generate


def cmd_generate(cfg: ExperimentConfig) -> Path:
    data_dir = cfg.root / "data"
    ds = generate_phantoms(cfg.phantom)
    train_set, test_set = split_by_scan(ds, cfg.test_fraction, seed=cfg.seed)
    save_dataset(ds, data_dir, cfg.phantom.to_dict())
    split = {"seed": cfg.seed, "test_fraction": cfg.test_fraction, "train": train_set.scan_ids, "test": test_set.scan_ids}
    (data_dir / "split.json").write_text(json.dumps(split, indent=2, sort_keys=True) + "\n")
    logger.info("wrote %d slices from %d scans to %s", len(ds), len(ds.scan_ids), data_dir)
    return data_dir


def load_split(cfg: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    """Training set and the masked test slices used for validation and attacks."""
    data_dir = cfg.root / "data"
    if not (data_dir / "manifest.txt").exists() or not (data_dir / "split.json").exists():
        raise PipelineError(f"no dataset under {data_dir}: run generate first")
    manifest = read_manifest(data_dir / "manifest.txt")
    if manifest.get("config") != _jsonable(cfg.phantom.to_dict()):
        raise PipelineError(f"dataset under {data_dir} was generated from a different config: run generate first")
    split = json.loads((data_dir / "split.json").read_text())
    ds = load_dataset(data_dir)
    train_scans, test_scans = set(split["train"]), set(split["test"])
    train_set = Dataset([s for s in ds if s.scan_id in train_scans])
    test_set = Dataset([s for s in ds if s.scan_id in test_scans]).with_masks()
    if not len(test_set):
        raise PipelineError("the test split has no slices with masks")
    return train_set, test_set


# ---------------------------------------------------------------- train


def _model_names(cfg: ExperimentConfig, name: Optional[str]) -> List[str]:
    if name is None:
        return [n for n, _ in cfg.models]
    cfg.model_config(name)
    return [name]


def cmd_train(cfg: ExperimentConfig, model_name: Optional[str] = None) -> Dict[str, History]:
    names = _model_names(cfg, model_name)
    train_set, val_set = load_split(cfg)
    out = {}
    for name in names:
        mdir = cfg.root / "models" / name
        mdir.mkdir(parents=True, exist_ok=True)
        model = build_model(cfg.model_config(name), dtype=np.dtype(cfg.train.dtype))
        logger.info("training %s (%d parameters)", name, model.parameter_count())
        best, history = train(model, train_set, val_set, cfg.train)
        save_checkpoint(best, mdir / "model.ckpt", extra={"best_epoch": history.best_epoch, "name": name})
        (mdir / "history.csv").write_text(history.to_csv())
        out[name] = history
    return out


def load_trained(cfg: ExperimentConfig, name: str):
    path = cfg.root / "models" / name / "model.ckpt"
    if not path.exists():
        raise PipelineError(f"no checkpoint for {name} at {path}: run train first")
    model, _ = load_checkpoint(path, dtype=np.dtype(cfg.train.dtype))
    if model.config != cfg.model_config(name):
        raise PipelineError(f"checkpoint {path} does not match the configured model {name}: run train again")
    return model


# ---------------------------------------------------------------- attack


def loss_slug(selector: str) -> str:
    return selector.replace("+", "_")


def eps_tag(eps: float) -> str:
    return f"{eps:g}"


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _png(path: Path, rgb_or_gray: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(rgb_or_gray).save(path, format="PNG", optimize=False)


def diff_panel(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """One diff-map render per class, side by side with a 1 px separator."""
    panels = []
    for c in range(truth.shape[0]):
        panels.append(render_diff_map(diff_map(pred[c], truth[c])))
        panels.append(np.full((truth.shape[1], 1, 3), 255, dtype=np.uint8))
    return np.concatenate(panels[:-1], axis=1)


def _save_examples(ldir: Path, summary: AttackSummary, test_set: Dataset, count: int) -> None:
    (ldir / "images").mkdir(parents=True, exist_ok=True)
    (ldir / "diffs").mkdir(parents=True, exist_ok=True)
    tag = eps_tag(summary.epsilon)
    for rec, sample in list(zip(summary.records, test_set))[:count]:
        stem = f"{rec.sample_id}_{tag}"
        write_pgm(ldir / "images" / f"{stem}.pgm", rec.adv)
        _png(ldir / "images" / f"{stem}.png", np.round(np.clip(rec.adv[0], 0, 1) * 255).astype(np.uint8))
        _png(ldir / "diffs" / f"{stem}.png", diff_panel(rec.pred_attacked, sample.mask))


def cmd_attack(cfg: ExperimentConfig, model_name: Optional[str] = None) -> Dict[str, dict]:
    names = _model_names(cfg, model_name)
    _, test_set = load_split(cfg)
    results = {}
    for name in names:
        model = load_trained(cfg, name)
        adir = cfg.root / "attacks" / name
        adir.mkdir(parents=True, exist_ok=True)
        per_loss = {}
        dsc_clean = None
        for sel in cfg.attack_losses:
            acfg = replace(cfg.attack, attack_loss=LossKind.parse(sel))
            eps_list = list(cfg.attack.epsilons)
            if cfg.attack.epsilon not in eps_list:
                eps_list = sorted(eps_list + [cfg.attack.epsilon])
            rows, summaries = epsilon_sweep(model, acfg, test_set, eps_list)
            main = summaries[eps_list.index(cfg.attack.epsilon)]
            ldir = adir / loss_slug(sel)
            ldir.mkdir(parents=True, exist_ok=True)
            _write_csv(
                ldir / "records.csv",
                ["sample_id", "dsc_clean", "dsc_attacked"],
                [[r.sample_id, f"{r.dsc_clean:.10g}", f"{r.dsc_attacked:.10g}"] for r in main.records],
            )
            sweep_rows = [r for r in rows if r.epsilon in cfg.attack.epsilons] if cfg.attack.epsilons else rows
            _write_csv(
                ldir / "sweep.csv",
                ["epsilon", "mean_dsc", "attack_success"],
                [[eps_tag(r.epsilon), f"{r.mean_dsc:.10g}", f"{r.attack_success:.10g}"] for r in sweep_rows],
            )
            for s in summaries:
                _save_examples(ldir, s, test_set, cfg.save_images)
            dsc_clean = main.mean_dsc_clean
            per_loss[sel] = {
                "dsc_attacked": main.mean_dsc_attacked,
                "attack_success": main.attack_success,
                "sweep": [[r.epsilon, r.mean_dsc, r.attack_success] for r in sweep_rows],
            }
            logger.info("%s %s eps=%g: DSC %.4f -> %.4f (AS %.4f)", name, sel, cfg.attack.epsilon,
                        main.mean_dsc_clean, main.mean_dsc_attacked, main.attack_success)
        summary = {
            "model": name,
            "arch": model.config.arch,
            "parameter_count": model.parameter_count(),
            "fingerprint": model.fingerprint(),
            "epsilon": cfg.attack.epsilon,
            "n_samples": len(test_set),
            "dsc_clean": dsc_clean,
            "losses": per_loss,
        }
        (adir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        results[name] = summary
    return results


# ---------------------------------------------------------------- check


@dataclass
class CheckResult:
    checked: int = 0
    violations: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def check_perturbations(cfg: ExperimentConfig) -> CheckResult:
    """Verify every written adversarial PGM lies within epsilon of its clean slice.

    Both images are on the 16-bit grid, so the bound is relaxed by half a
    quantum.
    """
    result = CheckResult()
    images = cfg.root / "data" / "images"
    for path in sorted((cfg.root / "attacks").glob("*/*/images/*.pgm")):
        sid, _, tag = path.stem.rpartition("_")
        clean_path = images / f"{sid}.pgm"
        if not clean_path.exists():
            result.violations.append(f"{path}: no clean image {clean_path.name}")
            continue
        eps = float(tag)
        gap = float(np.max(np.abs(read_pgm(path) - read_pgm(clean_path))))
        result.checked += 1
        if gap > eps + PGM_HALF_QUANTUM + CHECK_SLACK:
            result.violations.append(f"{path}: max |adv - x| = {gap:.8f} exceeds epsilon {eps:g}")
    return result


# ---------------------------------------------------------------- report


def _load_summaries(cfg: ExperimentConfig) -> List[dict]:
    out = []
    for name, _ in cfg.models:
        path = cfg.root / "attacks" / name / "summary.json"
        if not path.exists():
            raise PipelineError(f"no attack results for {name}: run attack first")
        s = json.loads(path.read_text())
        missing = [sel for sel in cfg.attack_losses if sel not in s["losses"]]
        if missing or s["epsilon"] != cfg.attack.epsilon:
            raise PipelineError(f"attack results for {name} are stale: run attack again")
        out.append(s)
    return out


def eval_rows(cfg: ExperimentConfig, summaries: List[dict]) -> List[EvalRow]:
    return [
        EvalRow(
            s["model"],
            s["parameter_count"],
            s["dsc_clean"],
            {sel: s["losses"][sel]["dsc_attacked"] for sel in cfg.attack_losses},
        )
        for s in summaries
    ]


def as_ordering(row: EvalRow, losses: Sequence[str]) -> List[str]:
    """Attack losses by decreasing success; config order breaks ties."""
    return sorted(losses, key=lambda k: (-row.attack_success[k], list(losses).index(k)))


def _pearson(xs: Sequence[float], ys: Sequence[float]) -> Optional[float]:
    if len(xs) < 3 or np.std(xs) == 0 or np.std(ys) == 0:
        return None
    return float(np.corrcoef(xs, ys)[0, 1])


def render_report(cfg: ExperimentConfig, summaries: List[dict]) -> Dict[str, str]:
    losses = list(cfg.attack_losses)
    rows = eval_rows(cfg, summaries)

    table = io.StringIO()
    w = csv.writer(table, lineterminator="\n")
    w.writerow(rows[0].csv_header(losses) + ["best_attack"])
    for r in rows:
        w.writerow(r.csv_row(losses) + [r.best_attack()])

    pva = io.StringIO()
    w = csv.writer(pva, lineterminator="\n")
    w.writerow(["model", "parameters"] + [f"as_{sel}" for sel in losses])
    for r in sorted(rows, key=lambda r: (r.parameter_count, r.model_name)):
        w.writerow([r.model_name, r.parameter_count] + [f"{r.attack_success[sel]:.4f}" for sel in losses])

    md: List[str] = ["# Clean vs attacked segmentation", ""]
    md.append(f"FGSM at epsilon = {cfg.attack.epsilon:g} on {summaries[0]['n_samples']} masked test slices.")
    md.append("The most successful attack per model is in bold.")
    md.append("")
    md.append("| Model | Parameters | Normal | " + " | ".join(losses) + " |")
    md.append("|---|---:|---:|" + "---:|" * len(losses))
    for r in rows:
        best = r.best_attack()
        cells = [f"**{r.dsc_attacked[k]:.4f}**" if k == best else f"{r.dsc_attacked[k]:.4f}" for k in losses]
        md.append(f"| {r.model_name} | {r.parameter_count:,} | {r.dsc_clean:.4f} | " + " | ".join(cells) + " |")
    md += ["", "## Attack success", ""]
    md.append("| Model | " + " | ".join(losses) + " | Ordering |")
    md.append("|---|" + "---:|" * len(losses) + "---|")
    for r in rows:
        order = " > ".join(as_ordering(r, losses))
        md.append(f"| {r.model_name} | " + " | ".join(f"{r.attack_success[k]:.4f}" for k in losses) + f" | {order} |")
    if "bce" in losses:
        wins = [r.model_name for r in rows if r.best_attack() == "bce"]
        md.append("")
        md.append(f"BCE is the most successful attack loss for {len(wins)} of {len(rows)} models"
                  + (f" ({', '.join(wins)})." if wins else "."))
    md += ["", "## Parameter count vs attack success", ""]
    md.append("| Model | Parameters | " + " | ".join(f"AS {k}" for k in losses) + " |")
    md.append("|---|---:|" + "---:|" * len(losses))
    ordered = sorted(rows, key=lambda r: (r.parameter_count, r.model_name))
    for r in ordered:
        md.append(f"| {r.model_name} | {r.parameter_count:,} | " + " | ".join(f"{r.attack_success[k]:.4f}" for k in losses) + " |")
    md.append("")
    for k in losses:
        rho = _pearson([r.parameter_count for r in ordered], [r.attack_success[k] for r in ordered])
        md.append(f"- Pearson r (parameters, AS {k}): " + ("n/a, needs at least 3 models" if rho is None else f"{rho:+.4f}"))
    md += ["", "## Epsilon sweep", ""]
    for s in summaries:
        for k in losses:
            sweep = s["losses"][k]["sweep"]
            if not sweep:
                continue
            md.append(f"{s['model']}, {k}:")
            md.append("")
            md.append("| epsilon | mean DSC | AS |")
            md.append("|---:|---:|---:|")
            for eps, mean_dsc, as_ in sweep:
                md.append(f"| {eps:g} | {mean_dsc:.4f} | {as_:.4f} |")
            md.append("")
    md += ["## Provenance", "", "```"]
    md.append(f"seed            {cfg.seed}")
    md.append(f"config_sha256   {cfg.config_hash()}")
    md.append(f"phantom_seed    {cfg.phantom.seed}")
    md.append(f"train_seed      {cfg.train.seed}")
    for s in summaries:
        md.append(f"model {s['model']:<9} init_seed {cfg.model_config(s['model']).seed} sha256 {s['fingerprint']}")
    md.append("```")
    md.append("")
    return {"table.csv": table.getvalue(), "params_vs_as.csv": pva.getvalue(), "report.md": "\n".join(md)}


def cmd_report(cfg: ExperimentConfig) -> Dict[str, str]:
    summaries = _load_summaries(cfg)
    files = render_report(cfg, summaries)
    rdir = cfg.root / "report"
    rdir.mkdir(parents=True, exist_ok=True)
    for fname, text in files.items():
        (rdir / fname).write_text(text)
    for r in eval_rows(cfg, summaries):
        if not r.consistent():
            raise PipelineError(f"attack success for {r.model_name} disagrees with its DSC columns")
    return files


def run_all(cfg: ExperimentConfig) -> Dict[str, str]:
    cmd_generate(cfg)
    cmd_train(cfg)
    cmd_attack(cfg)
    return cmd_report(cfg)

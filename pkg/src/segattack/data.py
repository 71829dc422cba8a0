"""Dataset layer: RLE masks, synthetic phantom scans, scan-grouped splits,
preprocessing, augmentation and the on-disk dataset format.

Mask channel order is fixed: 0 large bowel, 1 small bowel, 2 stomach.

RLE strings follow the Kaggle convention: space separated ``start length``
pairs, starts 1-indexed into the row-major flattened image.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

CLASSES = ("large_bowel", "small_bowel", "stomach")
PGM_MAXVAL = 65535


@dataclass
class Sample:
    scan_id: str
    slice_index: int
    image: np.ndarray  # (1, H, W) float in [0, 1]
    mask: np.ndarray  # (3, H, W) uint8 in {0, 1}

    @property
    def id(self) -> str:
        return sample_id(self.scan_id, self.slice_index)


def sample_id(scan_id: str, slice_index: int) -> str:
    return f"{scan_id}_slice_{slice_index:04d}"


class Dataset:
    """An ordered collection of :class:`Sample` objects."""

    def __init__(self, samples: Sequence[Sample]):
        self.samples = list(samples)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return Dataset(self.samples[idx])
        return self.samples[idx]

    @property
    def scan_ids(self) -> List[str]:
        seen: Dict[str, None] = {}
        for s in self.samples:
            seen.setdefault(s.scan_id, None)
        return list(seen)

    @property
    def ids(self) -> List[str]:
        return [s.id for s in self.samples]

    def images(self, dtype=np.float64) -> np.ndarray:
        return np.stack([s.image for s in self.samples]).astype(dtype, copy=False)

    def masks(self) -> np.ndarray:
        return np.stack([s.mask for s in self.samples])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.samples[i] for i in indices])

    def with_masks(self) -> "Dataset":
        """Only the samples whose mask has at least one positive pixel."""
        return Dataset([s for s in self.samples if s.mask.any()])

    def positive_fraction(self) -> np.ndarray:
        """Per class, the fraction of slices with a nonempty mask."""
        if not self.samples:
            return np.zeros(len(CLASSES))
        return self.masks().reshape(len(self), len(CLASSES), -1).any(axis=2).mean(axis=0)


# ---------------------------------------------------------------- RLE


class RleError(ValueError):
    pass


def rle_decode(rle: str, height: int, width: int) -> np.ndarray:
    """Decode a Kaggle RLE string into a ``(height, width)`` uint8 mask."""
    tokens = rle.split()
    if len(tokens) % 2:
        raise RleError(f"odd number of RLE tokens ({len(tokens)}); expected start/length pairs")
    n = height * width
    flat = np.zeros(n, dtype=np.uint8)
    prev_end = 0  # 0-indexed exclusive end of previous run
    for k in range(0, len(tokens), 2):
        pair = k // 2
        try:
            start, length = int(tokens[k]), int(tokens[k + 1])
        except ValueError:
            raise RleError(f"pair {pair}: non-integer token in {tokens[k]!r} {tokens[k + 1]!r}")
        if start < 1 or length < 1:
            raise RleError(f"pair {pair}: start {start} and length {length} must be >= 1")
        lo = start - 1
        hi = lo + length
        if lo < prev_end:
            raise RleError(f"pair {pair}: run starting at {start} overlaps or precedes the previous run")
        if hi > n:
            raise RleError(f"pair {pair}: run {start}+{length} exceeds {height}x{width}={n} pixels")
        flat[lo:hi] = 1
        prev_end = hi
    return flat.reshape(height, width)


def rle_encode(mask: np.ndarray) -> str:
    """Canonical RLE of a binary 2-D mask: maximal runs, ascending starts."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise RleError(f"rle_encode expects a 2-D mask, got shape {mask.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise RleError("rle_encode expects a binary mask")
    flat = np.concatenate([[0], mask.reshape(-1).astype(np.int8), [0]])
    edges = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts, ends = edges[::2], edges[1::2]
    return " ".join(f"{s} {e - s}" for s, e in zip(starts, ends))


# ---------------------------------------------------------------- phantoms


@dataclass(frozen=True)
class PhantomConfig:
    """Synthetic abdominal-slice generator settings.

    Radii are fractions of ``image_size``. Each class occupies a
    contiguous run of slices in every scan, so ``empty_fraction`` of
    each scan's slices carry an empty mask for that class.
    """

    n_scans: int = 10
    slices_per_scan: int = 20
    image_size: int = 64
    blob_count: Tuple[int, int, int] = (1, 2, 1)
    radius_range: Tuple[Tuple[float, float], ...] = ((0.10, 0.14), (0.07, 0.10), (0.12, 0.17))
    intensity_range: Tuple[Tuple[float, float], ...] = ((0.50, 0.56), (0.60, 0.66), (0.72, 0.80))
    empty_fraction: Tuple[float, float, float] = (0.25, 0.3, 0.4)
    body_intensity: float = 0.35
    edge_softness: float = 0.08
    texture: float = 0.08
    noise: float = 0.03
    drift: float = 0.06
    seed: int = 0

    def __post_init__(self):
        if self.n_scans < 1 or self.slices_per_scan < 1:
            raise ValueError("n_scans and slices_per_scan must be positive")
        if self.image_size < 8:
            raise ValueError(f"image_size {self.image_size} too small")
        for name in ("blob_count", "radius_range", "intensity_range", "empty_fraction"):
            if len(getattr(self, name)) != len(CLASSES):
                raise ValueError(f"{name} needs one entry per class {CLASSES}")
        for cls, (lo, hi) in zip(CLASSES, self.radius_range):
            if not 0 < lo <= hi:
                raise ValueError(f"{cls}: invalid radius range ({lo}, {hi})")
            if 2 * hi + self.drift >= 1.0:
                raise ValueError(f"{cls}: blob diameter {2 * hi} (plus drift) does not fit in the image")
        for cls, frac in zip(CLASSES, self.empty_fraction):
            if not 0 <= frac < 1:
                raise ValueError(f"{cls}: empty_fraction must be in [0, 1), got {frac}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        d = dict(d)
        for key in ("blob_count", "empty_fraction"):
            if key in d:
                d[key] = tuple(d[key])
        for key in ("radius_range", "intensity_range"):
            if key in d:
                d[key] = tuple(tuple(r) for r in d[key])
        return cls(**d)


# nominal organ centres (row, col) as fractions of the image
_ANCHORS = ((0.42, 0.72), (0.68, 0.42), (0.32, 0.32))
# interior grating per class: (period in pixels, orientation in radians)
_GRATINGS = ((4.0, 0.0), (3.0, np.pi / 4), (5.0, np.pi / 2))


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def _grating(size: int, period: float, angle: float, phase: float) -> np.ndarray:
    r, c = np.mgrid[0:size, 0:size].astype(np.float64)
    return np.sin(2 * np.pi * (r * np.sin(angle) + c * np.cos(angle)) / period + phase)


def _scan(cfg: PhantomConfig, scan_id: str, rng: np.random.Generator) -> List[Sample]:
    s = cfg.image_size
    n = cfg.slices_per_scan
    rows, cols = np.mgrid[0:s, 0:s].astype(np.float64) / s

    body_texture = _smooth_noise(rng, s, s / 12)
    body_r = (rng.uniform(0.40, 0.46), rng.uniform(0.44, 0.48))
    body = ((rows - 0.5) / body_r[0]) ** 2 + ((cols - 0.5) / body_r[1]) ** 2 <= 1.0

    # per class and blob: anchor jitter, radii, axis ratio, phase of drift, presence window
    blobs = []
    for c in range(len(CLASSES)):
        n_present = int(round((1.0 - cfg.empty_fraction[c]) * n))
        start = int(rng.integers(0, n - n_present + 1))
        for b in range(cfg.blob_count[c]):
            ay, ax = _ANCHORS[c]
            if b:
                ax = ax + (0.16 if ax < 0.5 else -0.16) * b
            blobs.append(
                dict(
                    cls=c,
                    center=(ay + rng.uniform(-0.05, 0.05), ax + rng.uniform(-0.05, 0.05)),
                    radius=rng.uniform(*cfg.radius_range[c]),
                    aspect=rng.uniform(0.75, 1.25),
                    angle=rng.uniform(0, np.pi),
                    phase=rng.uniform(0, 2 * np.pi, size=2),
                    intensity=rng.uniform(*cfg.intensity_range[c]),
                    texture=_grating(s, *_GRATINGS[c], rng.uniform(0, 2 * np.pi))
                    + 0.5 * _smooth_noise(rng, s, 1.0),
                    window=(start, start + n_present),
                )
            )

    samples = []
    for t in range(n):
        image = np.where(body, cfg.body_intensity * (1 + 0.5 * cfg.texture * body_texture), 0.05)
        mask = np.zeros((len(CLASSES), s, s), dtype=np.uint8)
        for blob in blobs:
            lo, hi = blob["window"]
            if not lo <= t < hi:
                continue
            # organs grow then shrink through the stack and drift smoothly
            u = (t - lo + 0.5) / (hi - lo)
            r = blob["radius"] * (0.7 + 0.3 * np.sin(np.pi * u))
            cy = blob["center"][0] + cfg.drift * np.sin(2 * np.pi * t / n + blob["phase"][0]) / 2
            cx = blob["center"][1] + cfg.drift * np.sin(2 * np.pi * t / n + blob["phase"][1]) / 2
            ca, sa = np.cos(blob["angle"]), np.sin(blob["angle"])
            dy, dx = rows - cy, cols - cx
            v = (ca * dy + sa * dx) / (r * blob["aspect"])
            w = (-sa * dy + ca * dx) / (r / blob["aspect"])
            rad = np.sqrt(v * v + w * w)
            inside = rad <= 1.0
            weight = 1.0 / (1.0 + np.exp(-(1.0 - rad) / cfg.edge_softness))
            level = blob["intensity"] * (1 + cfg.texture * blob["texture"])
            image = image * (1 - weight) + level * weight
            mask[blob["cls"]] |= inside.astype(np.uint8)
        image = image + cfg.noise * rng.standard_normal((s, s))
        samples.append(Sample(scan_id, t, np.clip(image, 0.0, 1.0)[None], mask))
    return samples


def generate_phantoms(cfg: PhantomConfig) -> Dataset:
    """Deterministic synthetic dataset; each scan draws from its own derived seed."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_scans)
    samples: List[Sample] = []
    for k, ss in enumerate(seeds):
        samples.extend(_scan(cfg, f"case{k:03d}", np.random.default_rng(ss)))
    return Dataset(samples)


# ---------------------------------------------------------------- splitting


def split_by_scan(dataset: Dataset, test_fraction: float = 0.1, seed: int = 0) -> Tuple[Dataset, Dataset]:
    """Assign whole scans to train or test so no scan contributes to both."""
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    scans = sorted(dataset.scan_ids)
    if len(scans) < 2:
        raise ValueError(f"need at least 2 scans to split, got {len(scans)}")
    n_test = min(max(int(round(test_fraction * len(scans))), 1), len(scans) - 1)
    order = np.random.default_rng(seed).permutation(len(scans))
    test_scans = {scans[i] for i in order[:n_test]}
    train = Dataset([s for s in dataset if s.scan_id not in test_scans])
    test = Dataset([s for s in dataset if s.scan_id in test_scans])
    return train, test


# ---------------------------------------------------------------- preprocessing


def normalize(image: np.ndarray) -> np.ndarray:
    """Per-image min-max scaling to [0, 1]; constant images map to 0."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    if hi == lo:
        return np.zeros_like(image)
    return (image - lo) / (hi - lo)


def _resize(arr: np.ndarray, size: int, order: int) -> np.ndarray:
    h, w = arr.shape
    if (h, w) == (size, size):
        return arr
    out = ndimage.zoom(arr, (size / h, size / w), order=order, mode="nearest", grid_mode=True)
    return out[:size, :size]


def preprocess(image: np.ndarray, target_size: int, divisor: int = 1) -> np.ndarray:
    """Normalise a raw 2-D image to [0, 1] and resize bilinearly to ``(1, S, S)``."""
    image = np.asarray(image)
    if image.ndim != 2 or min(image.shape) < 1:
        raise ValueError(f"preprocess expects a non-empty 2-D image, got shape {image.shape}")
    if target_size < 1 or target_size % divisor:
        raise ValueError(
            f"target size {target_size} must be a positive multiple of {divisor} "
            "(the model halves the resolution depth-1 times)"
        )
    # resizing is linear, so normalising afterwards is equivalent and keeps exact endpoints
    out = normalize(_resize(image.astype(np.float64), target_size, order=1))
    return out[None]


def preprocess_mask(mask: np.ndarray, target_size: int) -> np.ndarray:
    """Nearest-neighbour resize of a ``(C, H, W)`` mask, re-binarised."""
    mask = np.asarray(mask)
    return np.stack([(_resize(m.astype(np.float64), target_size, 0) >= 0.5) for m in mask]).astype(np.uint8)


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentConfig:
    shift: float = 0.1  # max shift as a fraction of the image side
    scale: float = 0.1  # scale drawn from [1 - scale, 1 + scale]
    elastic: float = 1.0  # displacement std in pixels; 0 disables
    elastic_sigma: float = 4.0

    @property
    def is_identity(self) -> bool:
        return self.shift == 0 and self.scale == 0 and self.elastic == 0


def _warp(image: np.ndarray, mask: np.ndarray, coords: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    img = np.stack(
        [ndimage.map_coordinates(ch, coords, order=1, mode="constant", cval=0.0) for ch in image]
    )
    msk = np.stack(
        [ndimage.map_coordinates(ch.astype(np.float64), coords, order=1, mode="constant", cval=0.0) for ch in mask]
    )
    return np.clip(img, 0.0, 1.0).astype(image.dtype), (msk >= 0.5).astype(np.uint8)


def shift_scale(
    image: np.ndarray,
    mask: np.ndarray,
    shift: Tuple[float, float] = (0.0, 0.0),
    scale: float = 1.0,
    displacement: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Apply the same shift (pixels), scale about the centre and optional
    displacement field ``(2, H, W)`` to a ``(C, H, W)`` image and mask.

    Regions pulled in from outside the frame are zero.
    """
    _, h, w = image.shape
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    src_r = cy + (rows - cy) / scale - shift[0]
    src_c = cx + (cols - cx) / scale - shift[1]
    if displacement is not None:
        src_r = src_r + displacement[0]
        src_c = src_c + displacement[1]
    return _warp(image, mask, np.stack([src_r, src_c]))


def augment(
    image: np.ndarray, mask: np.ndarray, magnitudes: AugmentConfig, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """Random shift, scale and elastic deformation applied identically to image and mask."""
    if image.shape[1:] != mask.shape[1:]:
        raise ValueError(f"image {image.shape} and mask {mask.shape} differ spatially")
    if magnitudes.is_identity:
        return image.copy(), mask.copy()
    _, h, w = image.shape
    shift = (
        rng.uniform(-magnitudes.shift, magnitudes.shift) * h,
        rng.uniform(-magnitudes.shift, magnitudes.shift) * w,
    )
    scale = rng.uniform(1 - magnitudes.scale, 1 + magnitudes.scale)
    disp = None
    if magnitudes.elastic > 0:
        raw = rng.standard_normal((2, h, w))
        disp = np.stack([ndimage.gaussian_filter(d, magnitudes.elastic_sigma) for d in raw])
        disp *= magnitudes.elastic / (disp.std() + 1e-12)
    return shift_scale(image, mask, shift, scale, disp)


# ---------------------------------------------------------------- file formats


def write_pgm(path: Union[str, Path], image: np.ndarray) -> None:
    """16-bit binary PGM (P5, maxval 65535, big-endian samples) from values in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    h, w = img.shape
    data = np.round(np.clip(img, 0.0, 1.0) * PGM_MAXVAL).astype(">u2")
    Path(path).write_bytes(f"P5\n{w} {h}\n{PGM_MAXVAL}\n".encode("ascii") + data.tobytes())


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    """Read a binary PGM written by :func:`write_pgm` (or any 8/16-bit P5) into [0, 1]."""
    raw = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    pos += 1
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    dtype = ">u2" if maxval > 255 else "u1"
    arr = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return arr.astype(np.float64) / maxval


def quantize(image: np.ndarray) -> np.ndarray:
    """Round values to the 16-bit grid used on disk."""
    return np.round(np.clip(image, 0.0, 1.0) * PGM_MAXVAL) / PGM_MAXVAL


def mask_rows(dataset: Dataset) -> List[Tuple[str, str, str]]:
    return [
        (s.id, cls, rle_encode(s.mask[c])) for s in dataset for c, cls in enumerate(CLASSES)
    ]


def write_mask_csv(path: Union[str, Path], dataset: Dataset) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "class", "segmentation"])
    writer.writerows(mask_rows(dataset))
    Path(path).write_text(buf.getvalue())


def read_mask_csv(path: Union[str, Path], height: int, width: int) -> Dict[str, np.ndarray]:
    """``{sample id: (3, H, W) mask}`` from an ``id,class,segmentation`` CSV."""
    masks: Dict[str, np.ndarray] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            m = masks.setdefault(row["id"], np.zeros((len(CLASSES), height, width), dtype=np.uint8))
            m[CLASSES.index(row["class"])] = rle_decode(row["segmentation"], height, width)
    return masks


def manifest_text(dataset: Dataset, config: Optional[dict] = None) -> str:
    """Plain-text manifest: scans with slice counts, per-class positive slice
    counts, and the generator config echoed as JSON."""
    lines = ["# segattack dataset manifest v1", f"scan_count {len(dataset.scan_ids)}", f"slice_count {len(dataset)}"]
    for scan in dataset.scan_ids:
        lines.append(f"scan {scan} {sum(1 for s in dataset if s.scan_id == scan)}")
    positive = dataset.masks().reshape(len(dataset), len(CLASSES), -1).any(axis=2) if len(dataset) else None
    for c, cls in enumerate(CLASSES):
        lines.append(f"class_positive_slices {cls} {int(positive[:, c].sum()) if positive is not None else 0}")
    lines.append(f"images_with_any_mask {int(positive.any(axis=1).sum()) if positive is not None else 0}")
    if config is not None:
        lines.append("config " + json.dumps(config, sort_keys=True))
    return "\n".join(lines) + "\n"


def read_manifest(path: Union[str, Path]) -> dict:
    out: dict = {"scans": {}, "class_positive_slices": {}}
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        if key == "scan":
            sid, count = rest.split()
            out["scans"][sid] = int(count)
        elif key == "class_positive_slices":
            cls, count = rest.split()
            out["class_positive_slices"][cls] = int(count)
        elif key == "config":
            out["config"] = json.loads(rest)
        else:
            out[key] = int(rest)
    return out


def save_dataset(dataset: Dataset, root: Union[str, Path], config: Optional[dict] = None) -> None:
    """Write ``images/{id}.pgm``, ``masks.csv`` and ``manifest.txt`` under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for s in dataset:
        write_pgm(root / "images" / f"{s.id}.pgm", s.image)
    write_mask_csv(root / "masks.csv", dataset)
    (root / "manifest.txt").write_text(manifest_text(dataset, config))


def load_dataset(root: Union[str, Path]) -> Dataset:
    root = Path(root)
    manifest = read_manifest(root / "manifest.txt")
    samples = []
    masks = None
    for scan, count in manifest["scans"].items():
        for t in range(count):
            sid = sample_id(scan, t)
            img = read_pgm(root / "images" / f"{sid}.pgm")
            if masks is None:
                masks = read_mask_csv(root / "masks.csv", *img.shape)
            samples.append(Sample(scan, t, img[None], masks[sid]))
    return Dataset(samples)


def load_kaggle_layout(train_csv: Union[str, Path], image_dir: Union[str, Path], target_size: int = 224) -> Dataset:
    """Loader stub for the UW-Madison GI tract competition layout.

    Expected layout: ``train.csv`` with ``id,class,segmentation`` rows where
    ``id`` is ``case{N}_day{D}_slice_{SSSS}``, and PNG slices under
    ``image_dir`` named ``{id}.png``. Images are min-max normalised and
    resized to ``target_size``. Not exercised against the real archive.
    """
    from PIL import Image

    rows: Dict[str, Dict[str, str]] = {}
    with open(train_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(row["id"], {})[row["class"]] = row.get("segmentation") or ""
    samples = []
    for sid in sorted(rows):
        scan, _, idx = sid.rpartition("_slice_")
        raw = np.asarray(Image.open(Path(image_dir) / f"{sid}.png"), dtype=np.float64)
        h, w = raw.shape
        mask = np.stack([rle_decode(rows[sid].get(c, ""), h, w) for c in CLASSES])
        samples.append(Sample(scan, int(idx), preprocess(raw, target_size), preprocess_mask(mask, target_size)))
    return Dataset(samples)

"""U-Net and U-Net++ segmentation networks built on :mod:`segattack.autodiff`.

Both architectures share the same building blocks:

* ``block``: two 3x3 conv + ReLU layers,
* ``down``: 2x2 max pooling,
* ``up``: nearest-neighbour x2 upsampling followed by a 3x3 conv + ReLU,
* ``head``: a 1x1 conv to ``out_classes`` channels and a sigmoid.

Level ``i`` has ``base_channels * 2**i`` channels. With the defaults
(depth 5, base 16) the encoder widths are 16, 32, 64, 128, 256.

U-Net++ nodes are named ``X{i}_{j}`` for ``i + j <= depth - 1``. Node
``X{i}_0`` is the encoder; node ``X{i}_{j}`` for ``j >= 1`` is a block
over ``concat(X{i}_0, ..., X{i}_{j-1}, up(X{i+1}_{j-1}))``. The head reads
``X0_{depth-1}``; deep supervision is not used.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ARCHS = ("unet", "unetpp")
CHECKPOINT_MAGIC = b"SEGATTCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "unet"
    depth: int = 5
    base_channels: int = 16
    in_channels: int = 1
    out_classes: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        for name in ("base_channels", "in_channels", "out_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    def width(self, level: int) -> int:
        return self.base_channels * 2**level

    @property
    def bottleneck_width(self) -> int:
        return self.width(self.depth - 1)

    @property
    def divisor(self) -> int:
        """Input height and width must be multiples of this."""
        return 2 ** (self.depth - 1)

    def to_dict(self) -> dict:
        return asdict(self)


def _conv_specs(config: ModelConfig) -> List[Tuple[str, int, int, int]]:
    """Ordered ``(name, cin, cout, k)`` for every conv layer of the model.

    The order fixes both initialisation draws and checkpoint layout
    independence from dict ordering.
    """
    d = config.depth
    w = config.width
    specs: List[Tuple[str, int, int, int]] = []

    def block(name, cin, cout):
        specs.append((f"{name}.conv1", cin, cout, 3))
        specs.append((f"{name}.conv2", cout, cout, 3))

    if config.arch == "unet":
        for i in range(d):
            block(f"enc{i}", config.in_channels if i == 0 else w(i - 1), w(i))
        for i in range(d - 2, -1, -1):
            specs.append((f"up{i}.conv", w(i + 1), w(i), 3))
            block(f"dec{i}", 2 * w(i), w(i))
    else:
        for name, i, j in unetpp_nodes(d):
            if j == 0:
                block(name, config.in_channels if i == 0 else w(i - 1), w(i))
            else:
                specs.append((f"{name}.up", w(i + 1), w(i), 3))
                block(name, (j + 1) * w(i), w(i))
    specs.append(("head", w(0), config.out_classes, 1))
    return specs


def unetpp_nodes(depth: int) -> List[Tuple[str, int, int]]:
    """Nodes ``X{i}_{j}`` in evaluation order (by column ``j``, then level ``i``)."""
    return [(f"X{i}_{j}", i, j) for j in range(depth) for i in range(depth - j)]


class Model:
    """A U-Net family network with a named parameter map.

    ``parameters`` maps ``"<layer>.weight"`` / ``"<layer>.bias"`` to numpy
    arrays. Forward passes wrap them in leaf tensors, so the same model can
    be evaluated with or without parameter gradients.
    """

    def __init__(self, config: ModelConfig, parameters: Dict[str, np.ndarray]):
        self.config = config
        self.parameters = parameters
        if config.arch == "unet":
            self.topology = [f"enc{i}" for i in range(config.depth)] + [
                f"dec{i}" for i in range(config.depth - 2, -1, -1)
            ]
        else:
            self.topology = [name for name, _, _ in unetpp_nodes(config.depth)]

    def __repr__(self) -> str:
        return f"Model({self.config.arch}, depth={self.config.depth}, base={self.config.base_channels}, params={self.parameter_count()})"

    @property
    def dtype(self):
        return next(iter(self.parameters.values())).dtype

    def astype(self, dtype) -> "Model":
        return Model(self.config, {k: v.astype(dtype) for k, v in self.parameters.items()})

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.parameters.items()})

    def parameter_count(self) -> int:
        return parameter_count(self)

    def parameter_tensors(self, requires_grad: bool = False) -> Dict[str, Tensor]:
        return {
            name: Tensor(arr, requires_grad=requires_grad, name=name)
            for name, arr in self.parameters.items()
        }

    def check_input(self, shape: Tuple[int, ...]) -> None:
        if len(shape) != 4 or shape[1] != self.config.in_channels:
            raise ad.ShapeError(
                f"expected input of shape (N, {self.config.in_channels}, H, W), got {shape}"
            )
        div = self.config.divisor
        h, w = shape[2], shape[3]
        if h % div or w % div:
            raise ad.ShapeError(
                f"input spatial size {h}x{w} must be divisible by {div} "
                f"(2**(depth-1) for depth {self.config.depth})"
            )

    def apply(self, params: Dict[str, Tensor], x: Tensor) -> Tensor:
        """Forward pass with explicit parameter tensors."""
        self.check_input(x.shape)

        def conv(name, inp, padding=1):
            return ad.conv2d(inp, params[f"{name}.weight"], params[f"{name}.bias"], 1, padding)

        def block(name, inp):
            h = ad.relu(conv(f"{name}.conv1", inp))
            return ad.relu(conv(f"{name}.conv2", h))

        def up(name, inp):
            return ad.relu(conv(name, ad.upsample_nearest2(inp)))

        d = self.config.depth
        if self.config.arch == "unet":
            skips = []
            h = x
            for i in range(d):
                if i:
                    h = ad.max_pool2(h)
                h = block(f"enc{i}", h)
                skips.append(h)
            for i in range(d - 2, -1, -1):
                h = up(f"up{i}.conv", h)
                h = block(f"dec{i}", ad.concat_channels(skips[i], h))
            top = h
        else:
            nodes: Dict[Tuple[int, int], Tensor] = {}
            for name, i, j in unetpp_nodes(d):
                if j == 0:
                    inp = x if i == 0 else ad.max_pool2(nodes[(i - 1, 0)])
                else:
                    parts = [nodes[(i, jj)] for jj in range(j)]
                    parts.append(up(f"{name}.up", nodes[(i + 1, j - 1)]))
                    inp = ad.concat_many(parts)
                nodes[(i, j)] = block(name, inp)
            top = nodes[(0, d - 1)]
        return ad.sigmoid(conv("head", top, padding=0))

    def forward(self, batch: Union[Tensor, np.ndarray]) -> Tensor:
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=self.dtype))
        return self.apply(self.parameter_tensors(False), x)

    __call__ = forward

    def predict(self, batch: np.ndarray, batch_size: int = 16) -> np.ndarray:
        """Probabilities for a numpy batch, evaluated in fixed-size chunks."""
        batch = np.asarray(batch, dtype=self.dtype)
        outs = [
            self.forward(batch[i : i + batch_size]).data for i in range(0, len(batch), batch_size)
        ]
        return np.concatenate(outs, axis=0)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.parameters):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.parameters[name], dtype="<f8").tobytes())
        return h.hexdigest()


def build_model(config: ModelConfig, dtype=np.float64) -> Model:
    """Create a model with He-uniform weights (bound ``sqrt(6 / fan_in)``) and zero biases."""
    rng = np.random.default_rng(config.seed)
    params: Dict[str, np.ndarray] = {}
    for name, cin, cout, k in _conv_specs(config):
        bound = np.sqrt(6.0 / (cin * k * k))
        params[f"{name}.weight"] = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype)
        params[f"{name}.bias"] = np.zeros(cout, dtype=dtype)
    return Model(config, params)


def forward(model: Model, batch: Union[Tensor, np.ndarray]) -> Tensor:
    return model.forward(batch)


def parameter_count(model: Model) -> int:
    return int(sum(arr.size for arr in model.parameters.values()))


def encoder_widths(config: ModelConfig) -> List[int]:
    return [config.width(i) for i in range(config.depth)]


# ---------------------------------------------------------------- checkpoints
#
# Layout (all integers little-endian):
#   8 bytes   magic "SEGATTCK"
#   u32       header length L
#   L bytes   UTF-8 JSON header: {"format_version", "config", "seed", "entries"}
#   then, for each entry in name-sorted order:
#   u16 name length, name bytes, u8 ndim, ndim x u32 dims, prod(dims) x f64 data


def save_checkpoint(model: Model, path: Union[str, Path], extra: Optional[dict] = None) -> None:
    names = sorted(model.parameters)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "seed": model.config.seed,
        "entries": len(names),
    }
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(hbytes)))
    buf.write(hbytes)
    for name in names:
        arr = np.ascontiguousarray(model.parameters[name], dtype="<f8")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: Union[str, Path], dtype=np.float64) -> Tuple[Model, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a segattack checkpoint")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    pos = 12
    header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    params: Dict[str, np.ndarray] = {}
    for _ in range(header["entries"]):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        params[name] = arr.astype(dtype)
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes after last entry")
    return Model(ModelConfig(**header["config"]), params), header

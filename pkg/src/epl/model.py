"""Small 3D encoder-decoder with several evidential heads, plus teacher EMA.

Layout for ``depth = d`` and ``base_width = w``:

* encoder level 1 (full resolution): 3x3x3 conv, ``in -> w``
* encoder level s = 2..d: stride-2 3x3x3 conv then 3x3x3 conv, ``w*2^(s-2) -> w*2^(s-1)``
* decoder stage 1 is the deepest encoder output; stage j = 2..d upsamples the
  previous stage x2, concatenates the encoder skip of matching resolution and
  applies a ``decoder_kernel`` conv (pointwise by default)
* ``num_heads`` independent 1x1x1 heads + softplus produce evidence

Pointwise decoder convs keep nearly all 3x3x3 work in the encoder, which is
what makes CPU training on 32^3 volumes affordable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from . import volume_io
from .errors import FormatError, IoError, ShapeError
from .tensor import Tensor


@dataclass
class NetConfig:
    in_channels: int = 1
    base_width: int = 8
    depth: int = 3
    num_classes: int = 2
    num_heads: int = 2
    proto_stage: int = 3
    decoder_kernel: int = 1

    def __post_init__(self):
        if self.base_width < 1 or self.in_channels < 1:
            raise ValueError("widths must be positive")
        if not 1 <= self.proto_stage <= self.depth:
            raise ValueError("need depth >= proto_stage >= 1")
        if not 1 <= self.num_heads <= 8:
            raise ValueError("num_heads must be in 1..8")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.decoder_kernel not in (1, 3):
            raise ValueError("decoder_kernel must be 1 or 3")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelOutput:
    evidence: list        # num_heads tensors [B,N,D,H,W]
    hidden: Tensor        # [B,F,D,H,W] at label resolution


def _width(cfg: NetConfig, level: int) -> int:
    return cfg.base_width * 2 ** (level - 1)


def layer_shapes(cfg: NetConfig) -> dict:
    """Ordered ``name -> (out, in, k)`` for every conv in the network."""
    shapes = {"enc1": (_width(cfg, 1), cfg.in_channels, 3)}
    for s in range(2, cfg.depth + 1):
        shapes[f"down{s}"] = (_width(cfg, s), _width(cfg, s - 1), 3)
        shapes[f"enc{s}"] = (_width(cfg, s), _width(cfg, s), 3)
    for j in range(2, cfg.depth + 1):
        level = cfg.depth - j + 1
        shapes[f"dec{j}"] = (_width(cfg, level), _width(cfg, level + 1) + _width(cfg, level), cfg.decoder_kernel)
    for h in range(cfg.num_heads):
        shapes[f"head{h}"] = (cfg.num_classes, _width(cfg, 1), 1)
    return shapes


def param_count(cfg: NetConfig) -> int:
    return sum(o * i * k ** 3 + o for o, i, k in layer_shapes(cfg).values())


# Evidence heads start near zero so every head begins almost spatially flat.
# With full-scale heads the foreground logit often starts anti-correlated with
# the bright foreground, and the background-dominated gradient then drives it
# into the flat part of softplus before the trunk can discriminate.
HEAD_INIT_SCALE = 0.01


def init_params(cfg: NetConfig, seed: int | np.random.Generator = 0) -> dict:
    """Kaiming fan-in normal weights (heads scaled by ``HEAD_INIT_SCALE``), zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dtype = T.get_default_dtype()
    params = {}
    for name, (o, i, k) in layer_shapes(cfg).items():
        std = np.sqrt(2.0 / (i * k ** 3))
        if name.startswith("head"):
            std *= HEAD_INIT_SCALE
        params[f"{name}.w"] = Tensor(rng.normal(0.0, std, size=(o, i, k, k, k)).astype(dtype), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(o, dtype=dtype), requires_grad=True)
    return params


def _conv(params, name, x, stride=1):
    w = params[f"{name}.w"]
    k = w.shape[2]
    return T.conv3d(x, w, params[f"{name}.b"], stride=stride, padding=(k - 1) // 2)


def forward(params: dict, cfg: NetConfig, volume) -> ModelOutput:
    """Run the network on ``[C,D,H,W]`` or a batch ``[B,C,D,H,W]``."""
    x = T.as_tensor(volume)
    if x.ndim == 4:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected [B,{cfg.in_channels},D,H,W], got {x.shape}")
    factor = 2 ** (cfg.depth - 1)
    spatial = x.shape[2:]
    if any(n % factor for n in spatial):
        raise ShapeError(f"spatial extents {spatial} not divisible by {factor}")

    skips = [T.relu(_conv(params, "enc1", x))]
    for s in range(2, cfg.depth + 1):
        h = T.relu(_conv(params, f"down{s}", skips[-1], stride=2))
        skips.append(T.relu(_conv(params, f"enc{s}", h)))

    stages = [skips[-1]]
    for j in range(2, cfg.depth + 1):
        skip = skips[cfg.depth - j]
        up = T.trilinear_upsample(stages[-1], skip.shape[2:])
        stages.append(T.relu(_conv(params, f"dec{j}", T.concat([up, skip], axis=1))))

    top = stages[-1]
    evidence = [T.softplus(_conv(params, f"head{h}", top)) for h in range(cfg.num_heads)]
    hidden = T.trilinear_upsample(stages[cfg.proto_stage - 1], spatial)
    return ModelOutput(evidence=evidence, hidden=hidden)


def ema_update(teacher: dict, student: dict, decay: float) -> dict:
    """In-place ``teacher <- decay * teacher + (1 - decay) * student``."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError("decay must lie in [0, 1]")
    if teacher.keys() != student.keys():
        raise ShapeError("teacher and student parameter names differ")
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise ShapeError(f"parameter {name}: {t.shape} vs {s.shape}")
        t.data = decay * t.data + (1.0 - decay) * s.data
    return teacher


def clone_params(params: dict, requires_grad: bool = False) -> dict:
    return {k: Tensor(v.data.copy(), requires_grad=requires_grad, dtype=v.dtype) for k, v in params.items()}


CKPT_MAGIC = b"EPLC"


def save_checkpoint(path, params: dict, config: dict, step: int, teacher: dict | None = None) -> None:
    """JSON header (config echo, step, tensor names) followed by EPLV records."""
    groups = [("student", params)] + ([("teacher", teacher)] if teacher is not None else [])
    names = [[g, k] for g, p in groups for k in p]
    header = json.dumps({"config": config, "step": step, "tensors": names}, sort_keys=True).encode()
    body = b"".join(volume_io.encode(p[k]) for _, p in groups for k in p)
    try:
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC + struct.pack("<I", len(header)) + header + body)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[dict, dict | None, dict]:
    """Return (student params, teacher params or None, header)."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if buf[:4] != CKPT_MAGIC or len(buf) < 8:
        raise FormatError("not a checkpoint file")
    (n,) = struct.unpack_from("<I", buf, 4)
    try:
        header = json.loads(buf[8:8 + n])
    except ValueError as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from exc
    offset = 8 + n
    out = {"student": {}, "teacher": {}}
    for group, name in header["tensors"]:
        arr, offset = volume_io.decode(buf, offset)
        out[group][name] = Tensor(arr, requires_grad=group == "student", dtype=arr.dtype)
    if offset != len(buf):
        raise FormatError("trailing bytes after checkpoint tensors")
    return out["student"], out["teacher"] or None, header

"""Encoder-decoder registration network mapping (moving, fixed) to a displacement field.

The layout follows the small VoxelMorph design: stride-2 encoder convolutions,
a decoder that convolves, upsamples (nearest) and concatenates the encoder
feature of matching resolution, extra full-resolution convolutions, and a
final convolution producing one channel per spatial axis.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import io
from . import tensorcore as tc
from .tensorcore import ShapeError, Tensor, as_tensor


class CheckpointMismatch(ValueError):
    def __init__(self, missing, unexpected, wrong_shape):
        self.missing = sorted(missing)
        self.unexpected = sorted(unexpected)
        self.wrong_shape = sorted(wrong_shape)
        parts = []
        if self.missing:
            parts.append("missing: " + ", ".join(self.missing))
        if self.unexpected:
            parts.append("unexpected: " + ", ".join(self.unexpected))
        if self.wrong_shape:
            parts.append("wrong shape: " + ", ".join(self.wrong_shape))
        super().__init__("checkpoint does not match config; " + "; ".join(parts))


@dataclass
class RegNetConfig:
    ndim: int = 2
    enc: tuple = (16, 32, 32, 32)
    dec: tuple = (32, 32, 32, 8, 8)
    kernel: int = 3
    slope: float = 0.2
    final_std: float = 1e-5

    def __post_init__(self):
        self.enc = tuple(int(c) for c in self.enc)
        self.dec = tuple(int(c) for c in self.dec)
        if self.ndim not in (2, 3):
            raise ValueError(f"ndim must be 2 or 3, got {self.ndim}")
        if not self.enc or len(self.dec) < len(self.enc):
            raise ValueError("need at least one encoder level and one decoder conv per level")
        if self.kernel % 2 == 0:
            raise ValueError("kernel edge must be odd")

    @property
    def divisor(self) -> int:
        return 2 ** len(self.enc)

    def to_dict(self) -> dict:
        return asdict(self) | {"enc": list(self.enc), "dec": list(self.dec)}

    @classmethod
    def from_dict(cls, d: dict) -> RegNetConfig:
        return cls(**d)


def layer_shapes(cfg: RegNetConfig) -> dict[str, tuple]:
    k = (cfg.kernel,) * cfg.ndim
    shapes = {}
    levels = len(cfg.enc)
    cin = 2
    for i, c in enumerate(cfg.enc):
        shapes[f"enc{i}.w"] = (c, cin) + k
        shapes[f"enc{i}.b"] = (c,)
        cin = c
    for j, c in enumerate(cfg.dec):
        shapes[f"dec{j}.w"] = (c, cin) + k
        shapes[f"dec{j}.b"] = (c,)
        cin = c
        if j < levels:
            skip = levels - 2 - j
            cin += cfg.enc[skip] if skip >= 0 else 2
    shapes["flow.w"] = (cfg.ndim, cin) + k
    shapes["flow.b"] = (cfg.ndim,)
    return shapes


def init_params(cfg: RegNetConfig, seed: int) -> dict[str, Tensor]:
    """He-style Gaussian kernels, zero biases, near-zero flow layer."""
    rng = tc.seeded_rng(seed)
    params = {}
    for name, shape in layer_shapes(cfg).items():
        if name.endswith(".b"):
            arr = np.zeros(shape)
        elif name == "flow.w":
            arr = rng.normal(0.0, cfg.final_std, shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            arr = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
        params[name] = Tensor(arr.astype(np.float32), requires_grad=True)
    return params


def forward(params: dict[str, Tensor], moving, fixed, cfg: RegNetConfig) -> Tensor:
    moving, fixed = as_tensor(moving), as_tensor(fixed)
    if moving.shape != fixed.shape or moving.ndim != cfg.ndim + 2 or moving.shape[1] != 1:
        raise ShapeError("regnet.forward", moving.shape, fixed.shape,
                         detail=f"expected two single-channel {cfg.ndim}-D images of equal shape")
    bad = [s for s in moving.shape[2:] if s % cfg.divisor]
    if bad:
        raise ValueError(f"spatial extents {moving.shape[2:]} must be divisible by {cfg.divisor}")
    x = tc.concat([moving, fixed], axis=1)
    skips = [x]
    for i in range(len(cfg.enc)):
        x = tc.leaky_relu(tc.conv(x, params[f"enc{i}.w"], params[f"enc{i}.b"], stride=2), cfg.slope)
        skips.append(x)
    levels = len(cfg.enc)
    for j in range(len(cfg.dec)):
        x = tc.leaky_relu(tc.conv(x, params[f"dec{j}.w"], params[f"dec{j}.b"]), cfg.slope)
        if j < levels:
            x = tc.concat([tc.upsample_nearest(x, 2), skips[levels - 1 - j]], axis=1)
    return tc.conv(x, params["flow.w"], params["flow.b"])


class RegNet:
    """A config plus its parameters, callable as ``net(moving, fixed)``."""

    def __init__(self, cfg: RegNetConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    def __call__(self, moving, fixed) -> Tensor:
        return forward(self.params, moving, fixed, self.cfg)

    def predict(self, moving, fixed) -> np.ndarray:
        with tc.no_tape():
            return forward(self.params, moving, fixed, self.cfg).numpy()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.numpy() for k, v in self.params.items()}

    def save(self, path, extra: dict | None = None) -> None:
        save(self.params, path, self.cfg, extra)

    @classmethod
    def load(cls, path, cfg: RegNetConfig | None = None, prefix: str = "") -> RegNet:
        cfg = cfg or load_config(path)
        params, _ = load(path, cfg, prefix)
        return cls(cfg, params)


def config_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save(params: dict, path, cfg: RegNetConfig | None = None, extra: dict | None = None) -> None:
    """Write parameters (plus any ``extra`` named arrays) and the config JSON next to them."""
    entries = {k: (v.numpy() if isinstance(v, Tensor) else v) for k, v in params.items()}
    for k, v in (extra or {}).items():
        entries[k] = np.asarray(v, dtype=np.float32)
    io.save_checkpoint(path, entries)
    if cfg is not None:
        io.write_json(config_path(path), cfg.to_dict())


def load_config(path) -> RegNetConfig:
    with open(config_path(path)) as f:
        doc = json.load(f)
    return RegNetConfig.from_dict(doc.get("net", doc))


def load(path, cfg: RegNetConfig, prefix: str = "") -> tuple[dict[str, Tensor], dict[str, np.ndarray]]:
    """Return (network parameters, every other entry).

    Only entries named ``prefix + layer`` belong to the network; with an empty
    prefix, names containing ``/`` are treated as extras.
    """
    entries = io.load_checkpoint(path)
    shapes = layer_shapes(cfg)

    def ours(name):
        return name.startswith(prefix) if prefix else "/" not in name

    params_raw = {k[len(prefix):]: v for k, v in entries.items() if ours(k)}
    extra = {k: v for k, v in entries.items() if not ours(k)}
    missing = set(shapes) - set(params_raw)
    unexpected = set(params_raw) - set(shapes)
    wrong = {k for k in set(shapes) & set(params_raw) if tuple(params_raw[k].shape) != shapes[k]}
    if missing or unexpected or wrong:
        raise CheckpointMismatch(missing, unexpected, wrong)
    params = {k: Tensor(params_raw[k], requires_grad=True) for k in shapes}
    return params, extra


def zero_net(cfg: RegNetConfig) -> RegNet:
    """Network whose flow layer is exactly zero, so it always predicts the identity."""
    net = RegNet(cfg, seed=0)
    net.params["flow.w"] = Tensor(np.zeros(net.params["flow.w"].shape), requires_grad=True)
    return net


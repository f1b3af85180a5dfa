"""Joint training of the forward and reverse registration networks."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import io
from . import regnet
from . import tensorcore as tc
from .losses import HyperParams, LossBreakdown, total_loss
from .regnet import RegNet, RegNetConfig
from .tensorcore import NonFiniteError, Tensor

log = logging.getLogger(__name__)

NETS = ("gx", "gy")


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, component: str, detail: str = ""):
        self.step = step
        self.component = component
        super().__init__(f"non-finite loss at step {step} in {component}" + (f": {detail}" if detail else ""))


class IncompatibleDataset(ValueError):
    pass


@dataclass
class TrainConfig:
    hp: HyperParams = field(default_factory=HyperParams)
    net: RegNetConfig = field(default_factory=RegNetConfig)
    lr: float = 2e-4
    epochs: int = 30
    batch_size: int = 1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    flip: bool = False
    rot90: bool = False
    checkpoint_every: int = 0
    alternate: bool = False

    def __post_init__(self):
        if isinstance(self.hp, dict):
            self.hp = HyperParams(**self.hp)
        if isinstance(self.net, dict):
            self.net = RegNetConfig.from_dict(self.net)
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["net"] = self.net.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)


@dataclass
class PairDataset:
    """(moving, fixed) lattice arrays, plus optional per-pair evaluation extras."""

    moving: list
    fixed: list
    extras: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.moving) != len(self.fixed):
            raise ValueError("moving and fixed lists differ in length")
        if not self.extras:
            self.extras = [{} for _ in self.moving]

    def __len__(self):
        return len(self.moving)

    def check(self, cfg: RegNetConfig) -> None:
        if not len(self):
            raise IncompatibleDataset("dataset is empty")
        for i, (m, f) in enumerate(zip(self.moving, self.fixed)):
            if m.shape != f.shape or m.ndim != cfg.ndim:
                raise IncompatibleDataset(f"pair {i}: shapes {m.shape}/{f.shape} do not fit a {cfg.ndim}-D network")
            if any(s % cfg.divisor for s in m.shape):
                raise IncompatibleDataset(f"pair {i}: extents {m.shape} not divisible by {cfg.divisor}")


class Adam:
    """Adaptive-moment optimizer over a flat name -> Tensor map."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> dict[str, Tensor]:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        new = {}
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                new[name] = p
                continue
            m = self.m.get(name, np.zeros_like(p.data))
            v = self.v.get(name, np.zeros_like(p.data))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            new[name] = Tensor._wrap((p.data - update).astype(p.data.dtype), requires_grad=True)
        return new

    def state(self) -> dict[str, np.ndarray]:
        out = {"opt/step": np.array([self.t], dtype=np.float32)}
        for k, v in self.m.items():
            out[f"opt/m/{k}"] = v
        for k, v in self.v.items():
            out[f"opt/v/{k}"] = v
        return out

    def load_state(self, extra: dict[str, np.ndarray]) -> None:
        self.t = int(extra.get("opt/step", [0])[0])
        self.m = {k[6:]: np.array(v) for k, v in extra.items() if k.startswith("opt/m/")}
        self.v = {k[6:]: np.array(v) for k, v in extra.items() if k.startswith("opt/v/")}


def _joint(gx: RegNet, gy: RegNet) -> dict[str, Tensor]:
    return {f"gx/{k}": v for k, v in gx.params.items()} | {f"gy/{k}": v for k, v in gy.params.items()}


def _split(joint: dict[str, Tensor], gx: RegNet, gy: RegNet) -> None:
    gx.params = {k[3:]: v for k, v in joint.items() if k.startswith("gx/")}
    gy.params = {k[3:]: v for k, v in joint.items() if k.startswith("gy/")}


def _loss_and_grads(gx, gy, x, y, hp, step, only=None):
    with tc.GradTape() as tape:
        try:
            parts = total_loss(x, y, gx, gy, hp, skip_zero_weighted=True)
        except NonFiniteError as err:
            raise TrainingDiverged(step, err.op, str(err)) from err
    for name, value in parts.values().items():
        if not np.isfinite(value):
            raise TrainingDiverged(step, name)
    params = _joint(gx, gy)
    if only is not None:
        params = {k: v for k, v in params.items() if k.startswith(only)}
    grads = tape.backward(parts.total, wrt=list(params.values()))
    return parts, {k: grads[v].numpy() for k, v in params.items()}


def train_step(gx: RegNet, gy: RegNet, x, y, cfg: TrainConfig, opt: Adam, step: int = 0) -> LossBreakdown:
    """One optimizer update of both networks on a batch; returns the loss breakdown.

    The breakdown is that of the parameters before the update.
    """
    if cfg.alternate:
        parts, grads = _loss_and_grads(gx, gy, x, y, cfg.hp, step, only="gx/")
        _split(opt.step(_joint(gx, gy), grads), gx, gy)
        _, grads = _loss_and_grads(gx, gy, x, y, cfg.hp, step, only="gy/")
        opt.t -= 1  # both half-updates share one bias-correction step
        _split(opt.step(_joint(gx, gy), grads), gx, gy)
        return parts
    parts, grads = _loss_and_grads(gx, gy, x, y, cfg.hp, step)
    _split(opt.step(_joint(gx, gy), grads), gx, gy)
    return parts


def augment(images: list[np.ndarray], rng: np.random.Generator, flip: bool, rot90: bool) -> list[np.ndarray]:
    """Apply one random flip/rotation identically to every image."""
    nd = images[0].ndim
    out = list(images)
    if flip:
        for ax in range(nd):
            if rng.random() < 0.5:
                out = [np.flip(a, axis=ax) for a in out]
    if rot90:
        axes = tuple(rng.choice(nd, size=2, replace=False)) if nd > 2 else (0, 1)
        k = int(rng.integers(4))
        if out[0].shape[axes[0]] == out[0].shape[axes[1]]:
            out = [np.rot90(a, k, axes=axes) for a in out]
    return [np.ascontiguousarray(a) for a in out]


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch])))


@dataclass
class FitResult:
    gx: RegNet
    gy: RegNet
    records: list
    checkpoint: Path | None = None


def save_stage(path, gx: RegNet, gy: RegNet, opt: Adam | None, cfg: TrainConfig, epoch: int) -> None:
    """One checkpoint holding both networks, the optimizer state and the last finished epoch."""
    entries = _joint(gx, gy)
    extra = {"opt/epoch": np.array([epoch], dtype=np.float32)}
    if opt is not None:
        extra |= opt.state()
    regnet.save(entries, path, extra=extra)
    io.write_json(regnet.config_path(path), {"net": cfg.net.to_dict(), "train": cfg.to_dict()})


def load_stage(path, cfg: RegNetConfig | None = None) -> tuple[RegNet, RegNet, dict]:
    if cfg is None:
        with open(regnet.config_path(path)) as f:
            cfg = RegNetConfig.from_dict(json.load(f)["net"])
    px, extra = regnet.load(path, cfg, prefix="gx/")
    py, _ = regnet.load(path, cfg, prefix="gy/")
    extra = {k: v for k, v in extra.items() if k.startswith("opt/")}
    return RegNet(cfg, px), RegNet(cfg, py), extra


def fit(dataset: PairDataset, cfg: TrainConfig, out_dir=None, name: str = "global",
        resume=None, on_step: Callable[[dict], None] | None = None,
        on_epoch: Callable[[int, RegNet, RegNet], None] | None = None) -> FitResult:
    """Train both networks for ``cfg.epochs`` epochs over seeded shuffles of the pairs.

    Writes ``<name>.cmk`` and ``<name>_log.jsonl`` under ``out_dir`` when given.
    Resuming from a stage checkpoint continues after its recorded epoch.
    """
    dataset.check(cfg.net)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    start = 0
    if resume is not None:
        gx, gy, extra = load_stage(resume, cfg.net)
        opt.load_state(extra)
        start = int(extra.get("opt/epoch", [0])[0])
    else:
        gx = RegNet(cfg.net, seed=cfg.seed * 2 + 1)
        gy = RegNet(cfg.net, seed=cfg.seed * 2 + 2)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / f"{name}_log.jsonl", "a" if resume is not None else "w")
    records = []
    steps_per_epoch = -(-len(dataset) // cfg.batch_size)
    step = start * steps_per_epoch
    try:
        for epoch in range(start, cfg.epochs):
            rng = _epoch_rng(cfg.seed, epoch)
            order = rng.permutation(len(dataset))
            for b in range(0, len(order), cfg.batch_size):
                xs, ys = [], []
                for i in order[b:b + cfg.batch_size]:
                    m, f = augment([dataset.moving[i], dataset.fixed[i]], rng, cfg.flip, cfg.rot90)
                    xs.append(m[None])
                    ys.append(f[None])
                x, y = np.stack(xs), np.stack(ys)
                parts = train_step(gx, gy, x, y, cfg, opt, step)
                rec = {"step": step, "epoch": epoch, **parts.values()}
                records.append(rec)
                if log_file is not None:
                    log_file.write(json.dumps(rec) + "\n")
                if on_step is not None:
                    on_step(rec)
                step += 1
            log.info("epoch %d done, last total %.4f", epoch, records[-1]["total"])
            if on_epoch is not None:
                on_epoch(epoch, gx, gy)
            if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_stage(out_dir / f"{name}_epoch{epoch + 1}.cmk", gx, gy, opt, cfg, epoch + 1)
    finally:
        if log_file is not None:
            log_file.close()
    ckpt = None
    if out_dir is not None:
        ckpt = out_dir / f"{name}.cmk"
        save_stage(ckpt, gx, gy, opt, cfg, cfg.epochs)
    return FitResult(gx, gy, records, ckpt)

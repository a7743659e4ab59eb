"""Pretraining and the five fine-tuning regimes over one shared training loop.

The regimes differ only in which parameter groups an optimizer may touch and
in how the detector's inputs are produced:

========  ==================================  ===============================
regime    trainable groups                    detector input
========  ==================================  ===============================
BASELINE  none                                -
T_FT      task                                rounded-latent reconstructions
C_FT      all codec groups                    noisy-latent reconstructions
J_FT      codec + task                        noisy-latent reconstructions
J_FT_FD   codec + task, decoder frozen        noisy-latent reconstructions
========  ==================================  ===============================

Codec groups use Adam, the task group uses SGD.  For the joint regimes the
task keeps training for ``epochs_task - epochs_codec`` extra epochs on
rounded-latent reconstructions from the then-frozen codec.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import codec as C
from . import tensor as T
from . import task as K
from .params import (CODEC_GROUPS, GROUPS, SGD, Adam, ParameterSet, clip_grad_norm, load_checkpoint,
                     save_checkpoint)
from .tensor import Tensor

log = logging.getLogger(__name__)

# (q, beta) pairs used to fine-tune codecs by default
OPERATING_POINTS = ((1, 1.0), (2, 0.6675), (4, 0.3186), (4, 0.1))
# the detector loss sums over grid cells, so raw SGD steps at lr 0.01 are large; bound the gradient norm
TASK_GRAD_CLIP = 1.0


class Regime(str, Enum):
    BASELINE = "BASELINE"
    T_FT = "T_FT"
    C_FT = "C_FT"
    J_FT = "J_FT"
    J_FT_FD = "J_FT_FD"

    @classmethod
    def parse(cls, value: "Regime | str") -> "Regime":
        if isinstance(value, Regime):
            return value
        key = str(value).strip().upper().replace("-", "_")
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown regime {value!r}; expected one of {[r.value for r in cls]}") from None


class ConfigError(ValueError):
    pass


def trainable_groups(regime: Regime | str) -> frozenset[str]:
    regime = Regime.parse(regime)
    if regime is Regime.BASELINE:
        return frozenset()
    if regime is Regime.T_FT:
        return frozenset({"task"})
    if regime is Regime.C_FT:
        return CODEC_GROUPS
    if regime is Regime.J_FT:
        return frozenset(GROUPS)
    return frozenset(GROUPS) - {"decoder"}


_DEFAULT_CODEC_EPOCHS = {Regime.C_FT: 6, Regime.J_FT: 5, Regime.J_FT_FD: 5}


@dataclass
class RegimeConfig:
    regime: Regime = Regime.BASELINE
    q: int = 1
    beta: float = 1.0
    epochs_codec: int | None = None
    epochs_task: int = 6
    lr_task: float = 0.01
    lr_codec: float = 1e-4
    batch_size: int = 2
    seed: int = 0
    dataset_dir: str = ""
    init_codec: str = ""
    init_task: str = ""
    out_dir: str = ""

    def __post_init__(self):
        self.regime = Regime.parse(self.regime)
        if self.epochs_codec is None:
            self.epochs_codec = _DEFAULT_CODEC_EPOCHS.get(self.regime, 0)
        trains_codec = bool(trainable_groups(self.regime) & CODEC_GROUPS)
        if trains_codec and not self.beta > 0:
            raise ConfigError(f"beta must be positive for {self.regime.value}, got {self.beta}")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if self.epochs_codec < 0 or self.epochs_task < 0:
            raise ConfigError("epoch counts must be non-negative")

    @classmethod
    def from_text(cls, text: str) -> "RegimeConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        known = {f.name: f for f in fields(cls)}
        values: dict[str, object] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = value
        typed: dict[str, object] = {}
        for key, value in values.items():
            if key in ("q", "epochs_task", "batch_size", "seed", "epochs_codec"):
                typed[key] = int(value)
            elif key in ("beta", "lr_task", "lr_codec"):
                typed[key] = float(value)
            else:
                typed[key] = value
        return cls(**typed)

    @classmethod
    def load(cls, path: str | Path) -> "RegimeConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {v.value if isinstance(v, Regime) else v}")
        return "\n".join(lines) + "\n"


@dataclass
class EpochStats:
    task_loss: float
    bpp: float
    total: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    digests: dict[str, str] = field(default_factory=dict)
    diverged: bool = False
    wall_time: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainReport":
        return cls(epochs=[EpochStats(**e) for e in d["epochs"]], digests=dict(d["digests"]),
                   diverged=d.get("diverged", False), wall_time=d.get("wall_time", 0.0))


@dataclass
class LossBreakdown:
    total: Tensor
    task: Tensor
    rate: Tensor
    objective: Tensor


def _check_finite_term(t: Tensor, name: str) -> None:
    if not np.isfinite(t.data).all():
        raise T.NumericError(f"{name} term is not finite")


def combine_losses(task_loss: Tensor, rate_bpp: Tensor, beta: float, include_rate: bool = True) -> LossBreakdown:
    """L_T + beta * L_R; ``include_rate=False`` reports the sum but optimizes L_T alone."""
    _check_finite_term(task_loss, "task")
    _check_finite_term(rate_bpp, "rate")
    total = task_loss if beta == 0 else T.add(task_loss, T.scale(rate_bpp, beta))
    return LossBreakdown(total=total, task=task_loss, rate=rate_bpp,
                         objective=total if include_rate else task_loss)


def total_loss(x: Tensor, scenes: Sequence[K.Scene], codec_params: ParameterSet, task_params: ParameterSet,
               beta: float, mode: C.Mode | str = C.Mode.TRAIN, rng: np.random.Generator | int | None = None,
               include_rate: bool = True) -> LossBreakdown:
    """Rate-accuracy objective of one batch: detector on the codec output plus beta * bpp."""
    x_hat, latents = C.forward(x, codec_params, mode, rng)
    if C.Mode(mode) is C.Mode.EVAL:
        x_hat = C.decode_synthesis(latents.y_hat, codec_params, clamp=True)
    n, _, h, w = x.shape
    rate = C.bpp_tensor(latents, codec_params, n * h * w)
    lt = K.task_loss(K.detector_forward(x_hat, task_params), scenes).total
    return combine_losses(lt, rate, beta, include_rate)


# ---------------------------------------------------------------- utilities


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def reconstruct(images: np.ndarray, codec_params: ParameterSet, batch_size: int = 32,
                quantize_8bit: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Rounded-latent reconstructions (clamped, optionally 8-bit) and per-image estimated bpp."""
    recs, bpps = [], []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            xb = T.constant(images[i:i + batch_size])
            _, lat = C.forward(xb, codec_params, C.Mode.EVAL)
            rec = C.decode_synthesis(lat.y_hat, codec_params, clamp=True).data
            if quantize_8bit:
                rec = np.floor(rec * 255.0 + 0.5) / 255.0
            recs.append(rec)
            px = images.shape[2] * images.shape[3]
            for j in range(xb.shape[0]):
                one = C.LatentPair(*(T.constant(getattr(lat, f).data[j:j + 1])
                                     for f in ("y", "y_hat", "h", "h_hat", "sigma")))
                bpps.append(C.rate_estimate(one, codec_params, px).bpp_est)
    return np.concatenate(recs), np.asarray(bpps)


def _stats(acc: list[tuple[float, float, float]]) -> EpochStats:
    a = np.asarray(acc, dtype=np.float64)
    return EpochStats(*(float(v) for v in a.mean(axis=0)))


def _task_epoch(images: np.ndarray, scenes: Sequence[K.Scene], task_params: ParameterSet, opt,
                batch_size: int, rng: np.random.Generator, bpp: np.ndarray | None = None,
                beta: float = 0.0, clip: float | None = None) -> EpochStats:
    acc = []
    for idx in _batches(len(scenes), batch_size, rng):
        task_params.zero_grad()
        loss = K.task_loss(K.detector_forward(T.constant(images[idx]), task_params), [scenes[i] for i in idx]).total
        T.backward(loss)
        if clip is not None:
            clip_grad_norm(task_params, ["task"], clip)
        opt.step(task_params, ["task"])
        r = float(bpp[idx].mean()) if bpp is not None else 0.0
        acc.append((loss.item(), r, loss.item() + beta * r))
    return _stats(acc)


# ------------------------------------------------------------------ regimes


def run_regime(config: RegimeConfig, scenes: Sequence[K.Scene], codec_params: ParameterSet,
               task_params: ParameterSet) -> tuple[TrainReport, ParameterSet, ParameterSet]:
    """Fine-tune copies of (codec, task) under ``config.regime``; inputs are never modified."""
    start = time.perf_counter()
    codec = codec_params.copy()
    task = task_params.copy()
    groups = trainable_groups(config.regime)
    joint = ParameterSet()
    joint.update(codec)
    joint.update(task)
    joint.set_trainable(groups)
    rng = np.random.default_rng(config.seed)
    images = K.images_nchw(scenes)
    codec_groups = sorted(groups & CODEC_GROUPS)
    report = TrainReport()
    regime = config.regime

    if regime is Regime.T_FT:
        recon, bpp = reconstruct(images, codec)
        opt = SGD(config.lr_task)
        for _ in range(config.epochs_task):
            report.epochs.append(_task_epoch(recon, scenes, task, opt, config.batch_size, rng, bpp, config.beta,
                                             TASK_GRAD_CLIP))
            log.info("T_FT epoch %d: %s", len(report.epochs), report.epochs[-1])
    elif regime is not Regime.BASELINE:
        codec_opt = Adam(config.lr_codec)
        task_opt = SGD(config.lr_task)
        trains_task = "task" in groups
        n_epochs = max(config.epochs_codec, config.epochs_task if trains_task else 0)
        for epoch in range(n_epochs):
            if epoch < config.epochs_codec:
                acc = []
                for idx in _batches(len(scenes), config.batch_size, rng):
                    joint.zero_grad()
                    lb = total_loss(T.constant(images[idx]), [scenes[i] for i in idx], codec, task,
                                    config.beta, C.Mode.TRAIN, rng)
                    T.backward(lb.objective)
                    codec_opt.step(joint, codec_groups)
                    if trains_task:
                        clip_grad_norm(joint, ["task"], TASK_GRAD_CLIP)
                        task_opt.step(joint, ["task"])
                    acc.append((lb.task.item(), lb.rate.item(), lb.total.item()))
                report.epochs.append(_stats(acc))
            else:
                joint.set_trainable({"task"})
                recon, bpp = reconstruct(images, codec)
                report.epochs.append(_task_epoch(recon, scenes, task, task_opt, config.batch_size, rng,
                                                 bpp, config.beta, TASK_GRAD_CLIP))
            log.info("%s epoch %d: %s", regime.value, epoch + 1, report.epochs[-1])

    report.digests = joint.group_digests()
    report.wall_time = time.perf_counter() - start
    if config.out_dir:
        write_outputs(config, report, codec, task)
    return report, codec, task


def write_outputs(config: RegimeConfig, report: TrainReport, codec: ParameterSet, task: ParameterSet) -> None:
    import json

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "codec.mckpt", codec, meta={"q": str(config.q), "regime": config.regime.value,
                                                       "beta": repr(config.beta)})
    save_checkpoint(out / "task.mckpt", task, meta={"regime": config.regime.value})
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2))


def load_inputs(config: RegimeConfig) -> tuple[ParameterSet, ParameterSet]:
    for key in ("init_codec", "init_task"):
        path = getattr(config, key)
        if not path or not Path(path).exists():
            raise ConfigError(f"{key}: checkpoint {path!r} not found")
    codec, _, _ = load_checkpoint(config.init_codec)
    task, _, _ = load_checkpoint(config.init_task)
    return codec, task


# -------------------------------------------------------------- pretraining


@dataclass
class PretrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    decay_at: float = 0.7  # fraction of epochs after which lr drops 10x
    clip: float = 5.0  # global gradient-norm bound for codec pretraining


def _lr_at(cfg: PretrainConfig, epoch: int) -> float:
    return cfg.lr * (0.1 if epoch >= math.ceil(cfg.decay_at * cfg.epochs) else 1.0)


def pretrain_codec(q: int, scenes: Sequence[K.Scene], cfg: PretrainConfig = PretrainConfig(),
                   config: C.CodecConfig | None = None,
                   init: ParameterSet | None = None) -> tuple[ParameterSet, TrainReport]:
    """Rate-distortion pretraining: minimize bpp + lambda_q * 255^2 * MSE."""
    start = time.perf_counter()
    config = config or C.CodecConfig(q=q)
    lam = C.LAMBDA_TABLE[q]
    params = init.copy() if init is not None else C.init_codec_params(config, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.lr)
    images = K.images_nchw(scenes)
    report = TrainReport()
    last_good = params.copy()
    for epoch in range(cfg.epochs):
        opt.lr = _lr_at(cfg, epoch)
        acc = []
        try:
            for idx in _batches(len(images), cfg.batch_size, rng):
                params.zero_grad()
                x = T.constant(images[idx])
                x_hat, lat = C.forward(x, params, C.Mode.TRAIN, rng)
                bpp = C.bpp_tensor(lat, params, x.size // 3)
                mse = T.mean(T.square(T.sub(x_hat, x)))
                loss = T.add(bpp, T.scale(mse, lam * 255.0 ** 2))
                T.backward(loss)
                clip_grad_norm(params, CODEC_GROUPS, cfg.clip)
                opt.step(params, CODEC_GROUPS)
                acc.append((mse.item(), bpp.item(), loss.item()))
        except T.NumericError as exc:
            log.warning("codec q=%d diverged in epoch %d: %s", q, epoch + 1, exc)
            params = last_good
            report.diverged = True
            break
        report.epochs.append(_stats(acc))
        last_good = params.copy()
        log.info("codec q=%d epoch %d: %s", q, epoch + 1, report.epochs[-1])
    report.digests = params.group_digests()
    report.wall_time = time.perf_counter() - start
    return params, report


def pretrain_task(scenes: Sequence[K.Scene], cfg: PretrainConfig = PretrainConfig(epochs=30, lr=3e-3, batch_size=16),
                  init: ParameterSet | None = None) -> tuple[ParameterSet, TrainReport]:
    """Train the detector from scratch on uncompressed (reference-quality) scenes."""
    start = time.perf_counter()
    params = init.copy() if init is not None else K.init_detector_params(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.lr)
    images = K.images_nchw(scenes)
    report = TrainReport()
    for epoch in range(cfg.epochs):
        opt.lr = _lr_at(cfg, epoch)
        report.epochs.append(_task_epoch(images, scenes, params, opt, cfg.batch_size, rng))
        log.info("task epoch %d: %s", epoch + 1, report.epochs[-1])
    report.digests = params.group_digests()
    report.wall_time = time.perf_counter() - start
    return params, report

"""Patch sampling, Adam with global-norm clipping, step-halving schedule, train loop.

Training runs in float32. With a fixed seed and a single BLAS thread the
loop is bit-reproducible, including across ``--resume``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .imaging import bicubic_resize, degrade_sr, dihedral
from .model import NlrnConfig, NlrnParams, backward, forward, init_params, loss
from .validation import NumericalError, check_image

TASKS = ("denoise", "sr")


@dataclass
class TrainConfig:
    task: str = "denoise"
    sigma: float = 25.0  # 8-bit units
    factors: tuple = (2, 3, 4)
    patch_size: int | None = None  # None -> model neighborhood
    batch_size: int = 16
    lr: float = 1e-3
    halvings: int = 5
    clip_norm: float = 0.5
    steps: int = 1000
    seed: int = 0
    scales: tuple = (1.0, 0.9, 0.8, 0.7)
    checkpoint_every: int = 0  # 0: only at the end

    def __post_init__(self):
        self.factors = tuple(int(f) for f in self.factors)
        self.scales = tuple(float(s) for s in self.scales)
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if not self.sigma >= 0:
            raise ValueError("sigma must be >= 0")
        if self.task == "sr" and (not self.factors or any(f < 2 for f in self.factors)):
            raise ValueError("factors must be integers >= 2")
        for name in ("batch_size", "steps"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.patch_size is not None and self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if not self.lr > 0 or not self.clip_norm > 0:
            raise ValueError("lr and clip_norm must be positive")
        if self.halvings < 0 or self.checkpoint_every < 0:
            raise ValueError("halvings and checkpoint_every must be >= 0")
        if not self.scales or any(not 0 < s <= 1 for s in self.scales):
            raise ValueError("scales must lie in (0, 1]")

    def resolved_patch(self, model_cfg: NlrnConfig) -> int:
        return self.patch_size if self.patch_size is not None else model_cfg.neighborhood


def split_config(doc: dict):
    """Split one JSON document into ``(TrainConfig, NlrnConfig)``; unknown keys raise."""
    train_keys = {f.name for f in fields(TrainConfig)}
    model_keys = {f.name for f in fields(NlrnConfig)}
    for key in doc:
        if key not in train_keys | model_keys:
            raise ValueError(f"unknown config field {key!r}")
    tr = {k: v for k, v in doc.items() if k in train_keys}
    md = {k: v for k, v in doc.items() if k in model_keys}
    try:
        return TrainConfig(**tr), NlrnConfig(**md)
    except (TypeError, ValueError) as exc:
        error = exc
    # name the offending field when it is invalid on its own
    for cls, kw in ((TrainConfig, tr), (NlrnConfig, md)):
        for key, val in kw.items():
            try:
                cls(**{key: val})
            except (TypeError, ValueError) as exc:
                raise ValueError(f"invalid config field {key!r}: {exc}") from None
    raise ValueError(f"invalid config: {error}")


# ----------------------------------------------------------------------------
# data


def scaled_corpus(corpus, scales) -> list:
    """Every corpus image resampled at every augmentation scale."""
    out = []
    for img in corpus:
        img = check_image(img)
        for s in scales:
            out.append(img if s == 1.0 else bicubic_resize(img, s))
    return out


def sample_batch(corpus, cfg: TrainConfig, rng: np.random.Generator, patch: int, pool=None):
    """Random augmented patches; returns ``(clean, degraded)`` of shape ``(n, P, P)``.

    ``pool`` is the output of :func:`scaled_corpus`; it is built on the fly
    when omitted.
    """
    if pool is None:
        if len(corpus) == 0:
            raise ValueError("empty corpus")
        pool = scaled_corpus(corpus, cfg.scales)
    fits = [i for i, im in enumerate(pool) if im.shape[0] >= patch and im.shape[1] >= patch]
    if not fits:
        raise ValueError(f"patch size {patch} is larger than every scaled training image")
    clean = np.empty((cfg.batch_size, patch, patch))
    for b in range(cfg.batch_size):
        im = pool[fits[rng.integers(len(fits))]]
        y = rng.integers(im.shape[0] - patch + 1)
        x = rng.integers(im.shape[1] - patch + 1)
        clean[b] = dihedral(im[y : y + patch, x : x + patch], int(rng.integers(8)))
    if cfg.task == "denoise":
        degraded = clean + rng.normal(0.0, cfg.sigma / 255.0, size=clean.shape)
    else:
        factors = rng.choice(cfg.factors, size=cfg.batch_size)
        degraded = np.stack([degrade_sr(c, int(f)) for c, f in zip(clean, factors)])
    return clean, degraded


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> dict:
    """Bias-corrected Adam; updates ``params`` in place and returns it."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_gradients(grads: dict, max_norm: float = 0.5):
    """Rescale all gradients jointly so their global l2 norm is at most ``max_norm``.

    Returns ``(clipped, norm_before)``.
    """
    norm = global_norm(grads)
    if not math.isfinite(norm):
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        raise NumericalError(f"non-finite gradient in {bad}")
    if norm <= max_norm:
        return dict(grads), norm
    # scaled in float64 so the bound holds after rounding
    scale = max_norm / norm
    return {k: g.astype(np.float64) * scale for k, g in grads.items()}, norm


def lr_at(step: int, cfg: TrainConfig) -> float:
    """``halvings + 1`` equal-length segments over ``cfg.steps``, halving at each boundary."""
    seg = min(cfg.halvings, step * (cfg.halvings + 1) // cfg.steps)
    return cfg.lr * 0.5**seg


# ----------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    params: NlrnParams
    log: list
    adam: AdamState


def _state_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".state")


def _save(out, params, adam, rng, log_len):
    ckpt.save_params(out, params)
    tensors = {f"m.{k}": v for k, v in adam.m.items()}
    tensors.update({f"v.{k}": v for k, v in adam.v.items()})
    meta = {"step": adam.step, "rng": rng.bit_generator.state, "log_len": log_len}
    ckpt.write_atomic(_state_path(out), ckpt.encode(tensors, meta))


def _load_state(out, params):
    tensors, meta = ckpt.read(_state_path(out))
    adam = AdamState(step=int(meta["step"]))
    for k in params.tensors:
        adam.m[k] = tensors[f"m.{k}"]
        adam.v[k] = tensors[f"v.{k}"]
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return adam, rng


def train(corpus, cfg: TrainConfig, model_cfg: NlrnConfig, out=None, log_path=None,
          resume: bool = False, params: NlrnParams | None = None, callback=None) -> TrainResult:
    """Run ``cfg.steps`` optimizer steps.

    ``out``: checkpoint path, written every ``cfg.checkpoint_every`` steps and
    at the end together with ``<out>.state`` (Adam moments and RNG) for
    ``resume``. ``log_path`` receives one JSON object per step. A non-finite
    loss or gradient raises :class:`NumericalError` and leaves the last
    written checkpoint untouched.
    """
    if len(corpus) == 0:
        raise ValueError("no training images")
    patch = cfg.resolved_patch(model_cfg)
    pool = scaled_corpus(corpus, cfg.scales)
    log: list = []
    if resume:
        if out is None:
            raise ValueError("resume needs the checkpoint path")
        params = ckpt.load_params(out)
        if params.config != model_cfg:
            raise ValueError("checkpoint model config differs from the requested one")
        adam, rng = _load_state(out, params)
        if log_path is not None and Path(log_path).exists():
            lines = Path(log_path).read_text().splitlines()[: adam.step]
            log = [json.loads(s) for s in lines]
    else:
        rng = np.random.default_rng(cfg.seed)
        if params is None:
            params = init_params(model_cfg, rng)
        adam = AdamState()

    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w")
        for entry in log:
            log_file.write(json.dumps(entry) + "\n")
    try:
        while adam.step < cfg.steps:
            step = adam.step
            clean, degraded = sample_batch(corpus, cfg, rng, patch, pool)
            _, record = forward(degraded.astype(np.float32), params, mode="train")
            value = loss(record, clean)
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss at step {step}")
            grads = backward(record, clean)
            try:
                grads, _ = clip_gradients(grads, cfg.clip_norm)
            except NumericalError as exc:
                raise NumericalError(f"step {step}: {exc}") from None
            lr = lr_at(step, cfg)
            adam_step(params.tensors, grads, adam, lr)
            entry = {"step": step, "loss": value, "lr": lr, "grad_norm": global_norm(grads)}
            log.append(entry)
            if log_file is not None:
                log_file.write(json.dumps(entry) + "\n")
            if callback is not None:
                callback(entry, params)
            if out is not None and cfg.checkpoint_every and adam.step % cfg.checkpoint_every == 0:
                _save(out, params, adam, rng, len(log))
    finally:
        if log_file is not None:
            log_file.close()
    if out is not None:
        _save(out, params, adam, rng, len(log))
    return TrainResult(params, log, adam)


def train_config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["factors"] = list(cfg.factors)
    d["scales"] = list(cfg.scales)
    return d

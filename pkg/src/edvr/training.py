"""Loss, optimiser, augmentation and the training loop."""
import dataclasses
import time

import numpy as np

from . import tensor as T
from .synth import SynthBatches, TRACKS


@dataclasses.dataclass
class TrainConfig:
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 4
    patch: int = 64
    iters: int = 2000
    charbonnier_eps: float = 1e-3
    loss_mode: str = "per_element_mean"  # per_element_mean | global_norm
    augment: bool = True
    track: str = "sr_clean"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not self.charbonnier_eps > 0:
            raise ValueError(f"charbonnier_eps must be positive, got {self.charbonnier_eps}")
        if self.patch % 4:
            raise ValueError(f"patch must be divisible by 4, got {self.patch}")
        if self.loss_mode not in ("per_element_mean", "global_norm"):
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")
        if self.track not in TRACKS:
            raise ValueError(f"unknown track {self.track!r}")
        if self.batch < 1 or self.iters < 0:
            raise ValueError("batch must be >= 1 and iters >= 0")


def charbonnier_loss(pred, target, eps=1e-3, mode="per_element_mean"):
    """Charbonnier penalty.

    ``per_element_mean`` averages sqrt(d^2 + eps^2) over elements;
    ``global_norm`` is sqrt(||d||^2 + eps^2) over the whole tensor.
    Returns a scalar Tensor whose backward feeds ``pred``.
    """
    target = target.data if isinstance(target, T.Tensor) else np.asarray(target)
    if pred.shape != target.shape:
        raise T.ShapeError(f"charbonnier_loss: pred {pred.shape} vs target {target.shape}")
    d = pred.data.astype(np.float64) - target.astype(np.float64)
    if mode == "per_element_mean":
        r = np.sqrt(d * d + eps * eps)
        # mean(r) written as eps + mean(r - eps): exact at d = 0, no cancellation for small d
        value = eps + (d * d / (r + eps)).mean()

        def backward(g):
            return ((g * d / r / d.size).astype(pred.dtype),)
    elif mode == "global_norm":
        value = np.sqrt(np.sum(d * d) + eps * eps)

        def backward(g):
            return ((g * d / value).astype(pred.dtype),)
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    return T._result(np.asarray(value, dtype=pred.dtype), (pred,), backward)


@dataclasses.dataclass
class AdamState:
    m: dict = dataclasses.field(default_factory=dict)
    v: dict = dataclasses.field(default_factory=dict)
    t: int = 0


def adam_step(params, state, config):
    """One bias-corrected Adam update over ``params``; gradients are cleared after.

    Raises:
        FloatingPointError: a gradient contains NaN/Inf (names the parameter).
    """
    for p in params:
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {p.name!r} has no gradient")
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"adam_step: non-finite gradient in parameter {p.name!r}")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (config.lr * (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)).astype(p.dtype)
        p.grad = None


def _transform(a, hflip, rot):
    if hflip:
        a = a[..., ::-1]
    return np.rot90(a, rot, axes=(-2, -1))


def augment_batch(clips, targets, seed, flips=True, rotations=True):
    """Random horizontal flip and k*90 degree rotation, shared by a clip and its target.

    Args:
        clips (ndarray): (B, T, C, h, w).
        targets (ndarray): (B, C, H, W).
        seed (int | Generator): Draw source.

    Returns:
        (ndarray, ndarray): Transformed copies.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if rotations and (clips.shape[-1] != clips.shape[-2] or targets.shape[-1] != targets.shape[-2]):
        raise ValueError(f"rotation augmentation needs square patches, got {clips.shape[-2:]} / {targets.shape[-2:]}")
    out_c, out_t = [], []
    for clip, target in zip(clips, targets):
        hflip = bool(rng.integers(2)) if flips else False
        rot = int(rng.integers(4)) if rotations else 0
        out_c.append(_transform(clip, hflip, rot))
        out_t.append(_transform(target, hflip, rot))
    return np.ascontiguousarray(np.stack(out_c)), np.ascontiguousarray(np.stack(out_t))


def train_step(model, batch, config, state):
    """forward -> Charbonnier -> backward -> Adam. Returns the loss value."""
    clips, targets = batch
    model.zero_grad()
    pred = model(clips)
    loss = charbonnier_loss(pred, targets, config.charbonnier_eps, config.loss_mode)
    loss.backward()
    adam_step(model.parameters(), state, config)
    return float(loss.data)


def smoothed(losses, window=100):
    """(mean of the first ``window`` losses, mean of the last ``window``)."""
    losses = np.asarray(losses, dtype=np.float64)
    w = min(window, len(losses))
    return float(losses[:w].mean()), float(losses[-w:].mean())


def train(model, config, batches=None, log=None, log_timing=True, state=None):
    """Run ``config.iters`` steps on synthetic data (or the given batch iterator).

    ``log`` receives one line per iteration: ``iter loss lr elapsed_ms``.
    With ``log_timing=False`` elapsed_ms is written as 0 so logs are
    byte-reproducible.
    """
    if batches is None:
        patch = config.patch
        batches = SynthBatches(config.track, config.batch, model.config.n_frames, patch, config.seed)
    aug_rng = np.random.default_rng([config.seed, 1])
    state = state or AdamState()
    losses = []
    start = time.perf_counter()
    for it in range(1, config.iters + 1):
        clips, targets = next(batches)
        if config.augment:
            clips, targets = augment_batch(clips, targets, aug_rng)
        loss = train_step(model, (clips, targets), config, state)
        losses.append(loss)
        if log is not None:
            elapsed = int((time.perf_counter() - start) * 1000) if log_timing else 0
            log(f"{it} {loss:.8e} {config.lr:.3e} {elapsed}")
    return losses, state

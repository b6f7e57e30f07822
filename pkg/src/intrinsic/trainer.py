"""Two-stage training loop with Adam and seeded batch sampling.

Stage 1 fits the network to synthetic triplets alone. Stage 2 mixes
synthetic batches with illumination-varying pairs whose reflectance
consistency term runs through the edge-aware filter layer. Batch
composition at iteration k is a pure function of (seed, stage, k), so
any logged iteration can be replayed exactly from the checkpoint
before it.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from intrinsic.autodiff import Tape, Tensor, backward
from intrinsic.bilateral import BilateralParams
from intrinsic.errors import (
    ConfigError,
    ContractError,
    ConvergenceError,
    TrainingDivergedError,
)
from intrinsic.image import ImageF, IntrinsicTriplet, RealSceneGroup, rgb_to_grayscale
from intrinsic.losses import LossWeights, real_pair_loss, synthetic_loss, total_loss
from intrinsic.network import IntrinsicNet, save


@dataclass
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    crop: int = 64
    stage1_batch: int = 4
    stage2_synthetic: int = 4
    stage2_real: int = 4
    stage1_iters: int = 2000
    stage2_iters: int = 2000
    omega: float = 0.5
    bilateral: BilateralParams = field(default_factory=BilateralParams)
    filtered: bool = True
    flip: bool = False
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 1

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError(
                f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})"
            )
        if self.adam_epsilon <= 0:
            raise ConfigError(f"adam_epsilon must be > 0, got {self.adam_epsilon}")
        if self.crop < 1:
            raise ConfigError(f"crop must be >= 1, got {self.crop}")
        for name in ("stage1_batch", "stage2_synthetic", "stage2_real"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ConfigError("iteration counts must be >= 0")
        if self.omega < 0:
            raise ConfigError(f"omega must be >= 0, got {self.omega}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        if self.log_every < 1:
            raise ConfigError(f"log_every must be >= 1, got {self.log_every}")

    @property
    def stage2_batch(self) -> int:
        return self.stage2_synthetic + self.stage2_real


# ---------------------------------------------------------------------------
# Optimizer

class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    def __init__(self, params: Sequence):
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}


def adam_step(params: Sequence, grads: Sequence, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update; lr = 0 advances the step count only."""
    if len(params) != len(grads):
        raise ContractError(
            f"{len(params)} parameters but {len(grads)} gradients"
        )
    for p, g in zip(params, grads):
        if g is None:
            raise ContractError(f"parameter {p.name} has no gradient")
        if g.shape != p.data.shape:
            raise ContractError(
                f"gradient shape {g.shape} does not match parameter "
                f"{p.name} {p.data.shape}"
            )
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p, g in zip(params, grads):
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if config.lr != 0.0:
            p.data -= config.lr * (m / bc1) / (np.sqrt(v / bc2) + config.adam_epsilon)


# ---------------------------------------------------------------------------
# Batch sampling

def batch_rng(seed: int, stage: int, iteration: int) -> np.random.Generator:
    """The batch at (seed, stage, iteration) is always the same."""
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence((seed, stage, iteration)))
    )


def _crop_hwc(data: np.ndarray, y0: int, x0: int, crop: int, flip: bool) -> np.ndarray:
    window = data[y0 : y0 + crop, x0 : x0 + crop]
    if flip:
        window = window[:, ::-1]
    return window


def _stack_nchw(arrays: list) -> Tensor:
    return Tensor(np.ascontiguousarray(np.stack(arrays).transpose(0, 3, 1, 2)))


def sample_synthetic_batch(
    triplets: Sequence[IntrinsicTriplet],
    crop: int,
    batch: int,
    rng: np.random.Generator,
    flip: bool = False,
) -> tuple:
    """Random aligned crops across input, reflectance and shading."""
    imgs, refls, shads = [], [], []
    for _ in range(batch):
        trip = triplets[int(rng.integers(len(triplets)))]
        h, w = trip.input.height, trip.input.width
        x0 = int(rng.integers(w - crop + 1))
        y0 = int(rng.integers(h - crop + 1))
        do_flip = bool(flip and rng.integers(2))
        imgs.append(_crop_hwc(trip.input.data, y0, x0, crop, do_flip))
        refls.append(_crop_hwc(trip.reflectance.data, y0, x0, crop, do_flip))
        shads.append(_crop_hwc(trip.shading.data, y0, x0, crop, do_flip))
    return _stack_nchw(imgs), _stack_nchw(refls), _stack_nchw(shads)


def sample_real_pair_batch(
    groups: Sequence[RealSceneGroup],
    crop: int,
    batch: int,
    rng: np.random.Generator,
    flip: bool = False,
) -> tuple:
    """Two distinct views per item, identically cropped and flipped.

    Returns (images1, images2, guides1, guides2); the guides are the
    cropped linear images themselves, ready for the filter layer.
    """
    imgs1, imgs2, guides1, guides2 = [], [], [], []
    for _ in range(batch):
        group = groups[int(rng.integers(len(groups)))]
        pick = rng.choice(len(group.images), size=2, replace=False)
        a, b = group.images[int(pick[0])], group.images[int(pick[1])]
        h, w = a.height, a.width
        x0 = int(rng.integers(w - crop + 1))
        y0 = int(rng.integers(h - crop + 1))
        do_flip = bool(flip and rng.integers(2))
        c1 = _crop_hwc(a.data, y0, x0, crop, do_flip)
        c2 = _crop_hwc(b.data, y0, x0, crop, do_flip)
        imgs1.append(c1)
        imgs2.append(c2)
        guides1.append(ImageF(c1.copy()))
        guides2.append(ImageF(c2.copy()))
    return _stack_nchw(imgs1), _stack_nchw(imgs2), guides1, guides2


# ---------------------------------------------------------------------------
# Validation and shared loop pieces

def _normalize_triplets(triplets: Sequence[IntrinsicTriplet]) -> list:
    out = []
    for t in triplets:
        if t.shading.channels == 3:
            t = IntrinsicTriplet(
                input=t.input,
                reflectance=t.reflectance,
                shading=rgb_to_grayscale(t.shading),
            )
        out.append(t)
    return out


def _validate_geometry(net: IntrinsicNet, config: TrainConfig, dims: list):
    multiple = 2 ** net.config.levels
    if config.crop % multiple:
        raise ConfigError(
            f"crop {config.crop} must be divisible by 2^levels = {multiple}"
        )
    for h, w, what in dims:
        if config.crop > min(h, w):
            raise ConfigError(
                f"crop {config.crop} exceeds {what} size {h}x{w}"
            )


def _check_finite(value: float, stage: int, iteration: int, components: dict):
    if not np.isfinite(value):
        raise TrainingDivergedError(
            f"non-finite loss {value} at stage {stage} iteration {iteration}",
            snapshot={
                "stage": stage,
                "iteration": iteration,
                "total": value,
                "components": components,
            },
        )


def _maybe_checkpoint(net, out_dir, config, stage, iteration, total_iters):
    if out_dir is None or config.checkpoint_every == 0:
        return
    if iteration % config.checkpoint_every == 0 or iteration == total_iters:
        save(net, os.path.join(out_dir, f"stage{stage}_{iteration:06d}.intrk"))


# ---------------------------------------------------------------------------
# Training stages

def train_stage1(
    net: IntrinsicNet,
    triplets: Sequence[IntrinsicTriplet],
    config: TrainConfig,
    out_dir: Optional[str] = None,
) -> list:
    """Synthetic-only training; returns one log record per iteration."""
    if not triplets:
        raise ConfigError("stage 1 needs at least one synthetic triplet")
    triplets = _normalize_triplets(triplets)
    _validate_geometry(
        net, config, [(t.input.height, t.input.width, f"triplet {i}") for i, t in enumerate(triplets)]
    )
    params = net.parameters()
    adam = AdamState(params)
    weights = LossWeights(omega=config.omega)
    log = []
    for it in range(1, config.stage1_iters + 1):
        rng = batch_rng(config.seed, 1, it)
        images, refl_gt, shad_gt = sample_synthetic_batch(
            triplets, config.crop, config.stage1_batch, rng, config.flip
        )
        t0 = time.perf_counter()
        with Tape() as tape:
            refl, shad = net.forward(images, training=True)
            syn = synthetic_loss(refl, shad, refl_gt, shad_gt, images)
            report = total_loss(syn, None, weights)
        total_value = report.total.item()
        _check_finite(total_value, 1, it, report.as_floats())
        net.zero_grad()
        backward(tape, report.total)
        adam_step(params, [p.grad for p in params], adam, config)
        wall_ms = (time.perf_counter() - t0) * 1000.0
        if it % config.log_every == 0 or it == config.stage1_iters:
            log.append(
                {
                    "iter": it,
                    "e_syn": report.e_syn.item(),
                    "e_real": None,
                    "total": total_value,
                    "wall_ms": wall_ms,
                }
            )
        _maybe_checkpoint(net, out_dir, config, 1, it, config.stage1_iters)
    return log


def train_stage2(
    net: IntrinsicNet,
    triplets: Sequence[IntrinsicTriplet],
    groups: Sequence[RealSceneGroup],
    config: TrainConfig,
    out_dir: Optional[str] = None,
) -> list:
    """Hybrid training on synthetic triplets plus real pairs.

    An empty ``groups`` list trains on the synthetic half alone (the
    caller decides whether that ablation is intended). Batches whose
    filter solve fails to converge are skipped and logged, not fatal.
    """
    if not triplets:
        raise ConfigError("stage 2 needs at least one synthetic triplet")
    triplets = _normalize_triplets(triplets)
    dims = [(t.input.height, t.input.width, f"triplet {i}") for i, t in enumerate(triplets)]
    for g in groups:
        dims.append((g.images[0].height, g.images[0].width, f"group {g.scene_id}"))
    _validate_geometry(net, config, dims)
    params = net.parameters()
    adam = AdamState(params)
    weights = LossWeights(omega=config.omega)
    log = []
    for it in range(1, config.stage2_iters + 1):
        rng = batch_rng(config.seed, 2, it)
        images, refl_gt, shad_gt = sample_synthetic_batch(
            triplets, config.crop, config.stage2_synthetic, rng, config.flip
        )
        real_batch = None
        if groups:
            real_batch = sample_real_pair_batch(
                groups, config.crop, config.stage2_real, rng, config.flip
            )
        t0 = time.perf_counter()
        try:
            with Tape() as tape:
                refl, shad = net.forward(images, training=True)
                syn = synthetic_loss(refl, shad, refl_gt, shad_gt, images)
                real = None
                if real_batch is not None:
                    i1, i2, guides1, guides2 = real_batch
                    r1, s1 = net.forward(i1, training=True)
                    r2, s2 = net.forward(i2, training=True)
                    real = real_pair_loss(
                        r1, s1, r2, s2, i1, i2, guides1, guides2,
                        config.bilateral, filtered=config.filtered,
                    )
                report = total_loss(syn, real, weights)
            total_value = report.total.item()
            _check_finite(total_value, 2, it, report.as_floats())
            net.zero_grad()
            backward(tape, report.total)
            adam_step(params, [p.grad for p in params], adam, config)
        except ConvergenceError as exc:
            log.append(
                {
                    "iter": it,
                    "skipped": True,
                    "error": str(exc),
                    "wall_ms": (time.perf_counter() - t0) * 1000.0,
                }
            )
            continue
        wall_ms = (time.perf_counter() - t0) * 1000.0
        if it % config.log_every == 0 or it == config.stage2_iters:
            log.append(
                {
                    "iter": it,
                    "e_syn": report.e_syn.item(),
                    "e_real": None if report.e_real is None else report.e_real.item(),
                    "total": total_value,
                    "wall_ms": wall_ms,
                }
            )
        _maybe_checkpoint(net, out_dir, config, 2, it, config.stage2_iters)
    return log

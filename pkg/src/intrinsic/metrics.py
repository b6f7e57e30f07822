"""Evaluation metrics for intrinsic decompositions.

All metrics consume plain float64 image arrays, so they work on any
decomposition regardless of how it was produced. The scale-invariant
error here mirrors the training loss but is implemented independently
in numpy (no tape), which keeps it usable as a cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from intrinsic import bilateral
from intrinsic.errors import ConfigError, ContractError, DimensionError
from intrinsic.image import (
    ImageF,
    from_tensor,
    resize_max_dim,
    to_tensor,
)

_DEGENERATE_REF = 1e-12
_LIGHTNESS_FLOOR = 1e-10


@dataclass
class JudgementPoint:
    """A probe location in relative coordinates (x across, y down)."""

    id: object
    x: float
    y: float

    def __post_init__(self):
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ContractError(
                f"point {self.id!r} coordinates ({self.x}, {self.y}) "
                "must lie in [0, 1]"
            )


@dataclass
class Comparison:
    """Human judgement: which of two points has darker reflectance."""

    point1: object
    point2: object
    darker: str
    weight: float = 1.0

    def __post_init__(self):
        if self.darker not in ("1", "2", "E"):
            raise ContractError(f"darker must be '1', '2' or 'E', got {self.darker!r}")
        if not np.isfinite(self.weight) or self.weight < 0:
            raise ContractError(f"comparison weight {self.weight} must be finite and >= 0")


@dataclass
class JudgementSet:
    points: list
    comparisons: list

    def __post_init__(self):
        ids = {p.id for p in self.points}
        if len(ids) != len(self.points):
            raise ContractError("judgement point ids must be unique")
        for c in self.comparisons:
            if c.point1 not in ids or c.point2 not in ids:
                raise ContractError(
                    f"comparison references unknown point "
                    f"({c.point1!r}, {c.point2!r})"
                )

    def point_map(self) -> dict:
        return {p.id: p for p in self.points}


@dataclass
class MetricConfig:
    whdr_delta: float = 0.10
    lmse_window_frac: float = 0.10
    lmse_stride_frac: float = 0.05
    mpre_resize: int = 640

    def __post_init__(self):
        if self.whdr_delta <= 0:
            raise ConfigError(f"whdr_delta must be > 0, got {self.whdr_delta}")
        if not 0 < self.lmse_window_frac <= 1:
            raise ConfigError(
                f"lmse_window_frac must lie in (0, 1], got {self.lmse_window_frac}"
            )
        if not 0 < self.lmse_stride_frac <= self.lmse_window_frac:
            raise ConfigError(
                f"lmse_stride_frac must lie in (0, window_frac], "
                f"got {self.lmse_stride_frac}"
            )
        if self.mpre_resize < 1:
            raise ConfigError(f"mpre_resize must be >= 1, got {self.mpre_resize}")


# ---------------------------------------------------------------------------
# Scale-invariant errors (numpy, no autodiff)

def _si_mse_np(estimate: np.ndarray, reference: np.ndarray) -> float:
    est = estimate.ravel()
    ref = reference.ravel()
    denom = float(ref @ ref)
    alpha = 0.0 if denom < _DEGENERATE_REF else float(est @ ref) / denom
    resid = est - alpha * ref
    return float(resid @ resid) / est.size


def si_mse_metric(estimate: ImageF, reference: ImageF) -> float:
    """Mean squared error after scaling the reference onto the estimate."""
    if estimate.data.shape != reference.data.shape:
        raise DimensionError(
            f"estimate {estimate.data.shape} vs reference {reference.data.shape}"
        )
    return _si_mse_np(estimate.data, reference.data)


def _window_starts(dim: int, side: int, stride: int) -> list:
    if side >= dim:
        return [0]
    starts = list(range(0, dim - side + 1, stride))
    if starts[-1] != dim - side:
        starts.append(dim - side)
    return starts


def si_lmse(
    estimate: ImageF, reference: ImageF, config: Optional[MetricConfig] = None
) -> float:
    """Mean scale-invariant MSE over a lattice of square windows.

    Window side and stride are fractions of max(H, W); each window gets
    its own scale. Trailing windows are anchored at the far border so
    every pixel is covered by at least one full-size window, and a side
    that reaches past an axis degenerates to that axis's full extent.
    """
    if config is None:
        config = MetricConfig()
    if estimate.data.shape != reference.data.shape:
        raise DimensionError(
            f"estimate {estimate.data.shape} vs reference {reference.data.shape}"
        )
    h, w = estimate.height, estimate.width
    long_dim = max(h, w)
    side = int(round(config.lmse_window_frac * long_dim))
    if side < 2:
        raise ConfigError(
            f"window side {side} (from fraction {config.lmse_window_frac} of "
            f"{long_dim}) must be >= 2"
        )
    stride = max(1, int(round(config.lmse_stride_frac * long_dim)))
    values = []
    for y0 in _window_starts(h, side, stride):
        for x0 in _window_starts(w, side, stride):
            est = estimate.data[y0 : y0 + side, x0 : x0 + side]
            ref = reference.data[y0 : y0 + side, x0 : x0 + side]
            values.append(_si_mse_np(est, ref))
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# WHDR

def _lightness_at(reflectance: ImageF, x: float, y: float) -> float:
    col = min(int(x * reflectance.width), reflectance.width - 1)
    row = min(int(y * reflectance.height), reflectance.height - 1)
    value = float(reflectance.data[row, col].mean())
    return max(value, _LIGHTNESS_FLOOR)


def whdr(
    reflectance: ImageF, judgements: JudgementSet, delta: float = 0.10
) -> float:
    """Weighted human disagreement rate of a reflectance estimate.

    A comparison predicts "2" when the second point is darker by more
    than the ratio threshold 1 + delta, "1" symmetrically, else "E".
    """
    if not judgements.comparisons:
        raise ContractError("whdr is undefined without comparisons")
    points = judgements.point_map()
    total = 0.0
    disagree = 0.0
    for comp in judgements.comparisons:
        p1 = points[comp.point1]
        p2 = points[comp.point2]
        l1 = _lightness_at(reflectance, p1.x, p1.y)
        l2 = _lightness_at(reflectance, p2.x, p2.y)
        if l2 < l1 / (1.0 + delta):
            predicted = "2"
        elif l1 < l2 / (1.0 + delta):
            predicted = "1"
        else:
            predicted = "E"
        total += comp.weight
        if predicted != comp.darker:
            disagree += comp.weight
    if total == 0.0:
        raise ContractError("whdr is undefined when all comparison weights are zero")
    return disagree / total


# ---------------------------------------------------------------------------
# Multi-image pseudo reconstruction error

def mpre(decompositions: Sequence[tuple]) -> float:
    """Cross-image reconstruction error over one scene's decompositions.

    Takes (input, reflectance, shading) triples for N images of the
    same scene and averages the scale-invariant error of every swapped
    reconstruction R_j * S_i against input I_i, including i = j. Needs
    no ground truth: a method that nails a shared reflectance scores
    low no matter how illumination varies.
    """
    if not decompositions:
        raise ContractError("mpre needs at least one decomposition")
    shape = decompositions[0][0].data.shape
    for img, refl, shad in decompositions:
        if img.data.shape != shape or refl.data.shape != shape:
            raise DimensionError("mpre inputs must share dimensions")
        if shad.data.shape[:2] != shape[:2] or shad.channels != 1:
            raise DimensionError("mpre shadings must be 1-channel at image size")
    n = len(decompositions)
    acc = 0.0
    for img_i, _refl_i, shad_i in decompositions:
        for _img_j, refl_j, _shad_j in decompositions:
            recon = refl_j.data * shad_i.data
            acc += _si_mse_np(recon, img_i.data)
    return acc / (n * n)


# ---------------------------------------------------------------------------
# Decomposition driver

Decomposer = Union[Callable[[ImageF], tuple], object]


def _pad_amounts(size: int, multiple: int) -> int:
    return (-size) % multiple


def decompose(
    net,
    image: ImageF,
    bilateral_params: Optional[bilateral.BilateralParams] = None,
    filtered: bool = True,
) -> tuple:
    """Run a trained network on one image of arbitrary size.

    Pads reflectively so both dimensions divide 2^levels, evaluates in
    inference mode, crops back, and by default smooths the reflectance
    with the edge-aware solver guided by the input.
    """
    multiple = 2 ** net.config.levels
    pad_h = _pad_amounts(image.height, multiple)
    pad_w = _pad_amounts(image.width, multiple)
    data = image.data
    if pad_h or pad_w:
        mode = "reflect" if min(image.height, image.width) > 1 else "edge"
        if pad_h >= image.height or pad_w >= image.width:
            mode = "edge"
        data = np.pad(data, ((0, pad_h), (0, pad_w), (0, 0)), mode=mode)
    r_t, s_t = net.forward(to_tensor(ImageF(data)), training=False)
    refl = ImageF(from_tensor(r_t).data[: image.height, : image.width])
    shad = ImageF(from_tensor(s_t).data[: image.height, : image.width])
    if filtered:
        params = bilateral_params if bilateral_params is not None else bilateral.BilateralParams()
        refl = bilateral.solve(image, refl, params)
    return refl, shad


def _as_decomposer(net_or_fn, bilateral_params, filtered) -> Callable[[ImageF], tuple]:
    if callable(net_or_fn) and not hasattr(net_or_fn, "forward"):
        return net_or_fn
    return lambda img: decompose(
        net_or_fn, img, bilateral_params=bilateral_params, filtered=filtered
    )


@dataclass
class EvalScene:
    """One scene prepared for evaluation; unused fields stay None."""

    scene_id: str
    kind: str  # "synthetic" | "real" | "judgement"
    images: list
    reflectance_gt: Optional[ImageF] = None
    shading_gt: Optional[ImageF] = None
    judgements: Optional[JudgementSet] = None


_METRIC_KINDS = {
    "simse": "synthetic",
    "silmse": "synthetic",
    "whdr": "judgement",
    "mpre": "real",
}


def evaluate_scene(
    net_or_fn,
    scene: EvalScene,
    metrics: Sequence[str],
    config: Optional[MetricConfig] = None,
    bilateral_params: Optional[bilateral.BilateralParams] = None,
    filtered: bool = True,
) -> dict:
    """Compute the requested metrics for one scene.

    The report carries exactly the requested keys. Requesting a metric
    the scene kind cannot support raises ConfigError. simse and silmse
    report {"r": ..., "s": ...} pairs; mpre inputs larger than the
    configured size are downscaled before decomposition.
    """
    if config is None:
        config = MetricConfig()
    if not metrics:
        raise ConfigError("no metrics requested")
    for name in metrics:
        if name not in _METRIC_KINDS:
            raise ConfigError(f"unknown metric {name!r}")
        if _METRIC_KINDS[name] != scene.kind:
            raise ConfigError(
                f"metric {name!r} needs a {_METRIC_KINDS[name]} scene, "
                f"but scene {scene.scene_id!r} is {scene.kind}"
            )
    fn = _as_decomposer(net_or_fn, bilateral_params, filtered)
    report = {}
    if scene.kind == "synthetic":
        refl, shad = fn(scene.images[0])
        for name in metrics:
            if name == "simse":
                report[name] = {
                    "r": si_mse_metric(refl, scene.reflectance_gt),
                    "s": si_mse_metric(shad, scene.shading_gt),
                }
            else:
                report[name] = {
                    "r": si_lmse(refl, scene.reflectance_gt, config),
                    "s": si_lmse(shad, scene.shading_gt, config),
                }
    elif scene.kind == "judgement":
        refl, _shad = fn(scene.images[0])
        report["whdr"] = whdr(refl, scene.judgements, config.whdr_delta)
    elif scene.kind == "real":
        triples = []
        for img in scene.images:
            if max(img.height, img.width) > config.mpre_resize:
                img = resize_max_dim(img, config.mpre_resize)
            refl, shad = fn(img)
            triples.append((img, refl, shad))
        report["mpre"] = mpre(triples)
    else:
        raise ConfigError(f"unknown scene kind {scene.kind!r}")
    return report

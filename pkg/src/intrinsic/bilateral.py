"""Differentiable bilateral solver.

Smooths a target image under guide-image affinities by solving the
symmetric positive-definite system

    (Id + 2*gamma*L) x = target,      L = D - W,

the first-order optimality condition of

    gamma * sum_ij W(i, j) (x_i - x_j)^2 + sum_i (x_i - t_i)^2

over ordered pixel pairs, with W(i, j) = exp(-||f_i - f_j||^2) on
five-dimensional features (x/sx, y/sy, L*/sl, u*/su, v*/sv).

Two backends: a dense one that materializes W (the correctness oracle,
small images only) and a bilateral-grid one that factors W as
splat -> separable [1,2,1] blur -> slice on an occupied-cell sparse
grid and runs Jacobi-preconditioned conjugate gradient. Both solve the
same pixel-space system; the grid merely replaces W with its factored
surrogate. The solve is linear and self-adjoint, so the layer's
backward pass is the same solve applied to the upstream gradient.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve

from intrinsic import autodiff
from intrinsic.autodiff import Tensor
from intrinsic.errors import (
    ConfigError,
    ContractError,
    ConvergenceError,
    DimensionError,
    RangeError,
)
from intrinsic.image import ImageF, rgb_to_luv

# Per-axis gain of the [1, 2, 1] blur taps. The splat/blur/slice
# composite then carries the same integral as the exact Gaussian
# exp(-d^2) it stands in for (4c = sqrt(pi)), keeping gamma comparable
# between backends.
_BLUR_GAIN = math.sqrt(math.pi) / 4.0

_CORNERS = np.array(list(itertools.product((0, 1), repeat=5)), dtype=np.int64)

# Blur coupling between two corners of one pixel, used for the exact
# Jacobi diagonal: K[p, q] = prod_axis tap(delta_p - delta_q).
_CORNER_KERNEL = np.ones((32, 32))
for _p in range(32):
    for _q in range(32):
        for _a in range(5):
            d = abs(int(_CORNERS[_p, _a]) - int(_CORNERS[_q, _a]))
            _CORNER_KERNEL[_p, _q] *= _BLUR_GAIN * (2.0 if d == 0 else 1.0)

DENSE_PIXEL_LIMIT = 8192


@dataclass
class BilateralParams:
    """Solver configuration; defaults follow the training setup."""

    gamma: float = 12000.0
    sigma_x: float = 5.0
    sigma_y: float = 5.0
    sigma_l: float = 7.0
    sigma_u: float = 3.0
    sigma_v: float = 3.0
    backend: str = "grid"
    cg_tol: float = 1e-6
    cg_max_iter: int = 500

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        for name in ("sigma_x", "sigma_y", "sigma_l", "sigma_u", "sigma_v"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if not 0.0 < self.cg_tol < 1.0:
            raise ConfigError(f"cg_tol must lie in (0, 1), got {self.cg_tol}")
        if self.cg_max_iter < 1:
            raise ConfigError(f"cg_max_iter must be >= 1, got {self.cg_max_iter}")
        if self.backend not in ("dense", "grid"):
            raise ConfigError(f"backend must be 'dense' or 'grid', got {self.backend!r}")

    def sigmas(self) -> np.ndarray:
        return np.array(
            [self.sigma_x, self.sigma_y, self.sigma_l, self.sigma_u, self.sigma_v]
        )


def build_features(guide: ImageF, params: BilateralParams) -> np.ndarray:
    """Per-pixel (H, W, 5) feature vectors (x, y, L*, u*, v*) over sigma."""
    luv = rgb_to_luv(guide).data
    h, w = guide.height, guide.width
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    feats = np.empty((h, w, 5))
    feats[:, :, 0] = xs[None, :] / params.sigma_x
    feats[:, :, 1] = ys[:, None] / params.sigma_y
    feats[:, :, 2] = luv[:, :, 0] / params.sigma_l
    feats[:, :, 3] = luv[:, :, 1] / params.sigma_u
    feats[:, :, 4] = luv[:, :, 2] / params.sigma_v
    if not np.all(np.isfinite(feats)):
        raise RangeError("bilateral features are not finite")
    return feats


class _DenseSystem:
    """Explicit (Id + 2*gamma*L) with a cached Cholesky factorization."""

    def __init__(self, guide: ImageF, params: BilateralParams):
        npix = guide.height * guide.width
        if npix > DENSE_PIXEL_LIMIT:
            raise ContractError(
                f"dense backend supports at most {DENSE_PIXEL_LIMIT} pixels, "
                f"got {npix}; use the grid backend"
            )
        self.params = params
        self.npix = npix
        self._factor = None
        if params.gamma == 0.0:
            return
        f = build_features(guide, params).reshape(npix, 5)
        sq = (f * f).sum(axis=1)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (f @ f.T)
        np.clip(d2, 0.0, None, out=d2)
        w = np.exp(-d2)
        np.fill_diagonal(w, 0.0)
        a = -2.0 * params.gamma * w
        a[np.diag_indices(npix)] = 1.0 + 2.0 * params.gamma * w.sum(axis=1)
        self._factor = cho_factor(a)
        self._matrix = a

    def solve_flat(self, b: np.ndarray) -> np.ndarray:
        """Solve for (npix, k) right-hand sides."""
        if self.params.gamma == 0.0:
            return b.copy()
        x = cho_solve(self._factor, b)
        bnorm = np.linalg.norm(b, axis=0)
        rnorm = np.linalg.norm(self._matrix @ x - b, axis=0)
        bad = bnorm > 0
        if np.any(rnorm[bad] / bnorm[bad] > self.params.cg_tol):
            rel = float((rnorm[bad] / bnorm[bad]).max())
            raise ConvergenceError(
                f"dense solve residual {rel:.3e} exceeds tolerance", residual=rel
            )
        return x


class _GridSystem:
    """Splat/blur/slice factorization of W on the occupied-cell grid.

    Only grid cells touched by some pixel's 32 splat corners carry
    mass; blurring into never-sliced empty cells contributes nothing,
    so restricting the operator to occupied cells is exact.
    """

    def __init__(self, guide: ImageF, params: BilateralParams):
        self.params = params
        self.npix = guide.height * guide.width
        if params.gamma == 0.0:
            return
        f = build_features(guide, params).reshape(self.npix, 5)
        base = np.floor(f).astype(np.int64)
        frac = f - base
        lo = base.min(axis=0) - 1
        coords = base - lo
        dims = coords.max(axis=0) + 3
        strides = np.ones(5, dtype=np.int64)
        for a in range(3, -1, -1):
            strides[a] = strides[a + 1] * dims[a + 1]

        corner_coords = coords[:, None, :] + _CORNERS[None, :, :]
        keys = (corner_coords * strides).sum(axis=2)
        w32 = np.ones((self.npix, 32))
        for a in range(5):
            r = frac[:, a]
            w32 *= np.where(_CORNERS[None, :, a] == 1, r[:, None], 1.0 - r[:, None])

        ukeys, inverse = np.unique(keys.ravel(), return_inverse=True)
        ncells = ukeys.shape[0]
        self.splat = sp.csr_matrix(
            (w32.ravel(), (inverse, np.repeat(np.arange(self.npix), 32))),
            shape=(ncells, self.npix),
        )

        rows, cols, vals = [], [], []
        for offset in itertools.product((-1, 0, 1), repeat=5):
            tap = 1.0
            for d in offset:
                tap *= _BLUR_GAIN * (2.0 if d == 0 else 1.0)
            shift = int(np.dot(np.array(offset, dtype=np.int64), strides))
            nk = ukeys + shift
            pos = np.searchsorted(ukeys, nk)
            pos_c = np.minimum(pos, ncells - 1)
            valid = ukeys[pos_c] == nk
            src = np.nonzero(valid)[0]
            rows.append(src)
            cols.append(pos_c[src])
            vals.append(np.full(src.shape[0], tap))
        self.blur = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(ncells, ncells),
        )

        ones = np.ones(self.npix)
        self.degree = self._affinity(ones)
        w_self = np.einsum("ip,pq,iq->i", w32, _CORNER_KERNEL, w32)
        self.jacobi = 1.0 + 2.0 * params.gamma * (self.degree - w_self)

    def _affinity(self, v: np.ndarray) -> np.ndarray:
        return self.splat.T @ (self.blur @ (self.splat @ v))

    def _apply(self, v: np.ndarray) -> np.ndarray:
        if v.ndim == 1:
            deg = self.degree
        else:
            deg = self.degree[:, None]
        return v + 2.0 * self.params.gamma * (deg * v - self._affinity(v))

    def solve_flat(self, b: np.ndarray) -> np.ndarray:
        if self.params.gamma == 0.0:
            return b.copy()
        squeeze = b.ndim == 1
        if squeeze:
            b = b[:, None]
        x = np.zeros_like(b)
        active = np.arange(b.shape[1])
        # Constants are fixed points (A applied to a constant returns
        # it), so solve them directly.
        for k in range(b.shape[1]):
            if np.ptp(b[:, k]) == 0.0:
                x[:, k] = b[:, k]
        active = np.array([k for k in active if np.ptp(b[:, k]) != 0.0], dtype=np.int64)
        if active.size:
            x[:, active] = self._cg(b[:, active])
        return x[:, 0] if squeeze else x

    def _cg(self, b: np.ndarray) -> np.ndarray:
        tol = self.params.cg_tol
        diag = self.jacobi[:, None]
        x = np.zeros_like(b)
        r = b.copy()
        z = r / diag
        p = z.copy()
        rz = (r * z).sum(axis=0)
        bnorm = np.linalg.norm(b, axis=0)
        bnorm[bnorm == 0.0] = 1.0
        for _ in range(self.params.cg_max_iter):
            if np.all(np.linalg.norm(r, axis=0) / bnorm <= tol):
                return x
            ap = self._apply(p)
            pap = (p * ap).sum(axis=0)
            alpha = np.where(pap > 0.0, rz / np.where(pap > 0.0, pap, 1.0), 0.0)
            x = x + alpha[None, :] * p
            r = r - alpha[None, :] * ap
            z = r / diag
            rz_new = (r * z).sum(axis=0)
            beta = np.where(rz > 0.0, rz_new / np.where(rz > 0.0, rz, 1.0), 0.0)
            p = z + beta[None, :] * p
            rz = rz_new
        rel = float((np.linalg.norm(r, axis=0) / bnorm).max())
        if rel <= tol:
            return x
        raise ConvergenceError(
            f"grid solve: conjugate gradient did not reach {tol:.1e} within "
            f"{self.params.cg_max_iter} iterations (residual {rel:.3e})",
            residual=rel,
        )


def _build_system(guide: ImageF, params: BilateralParams):
    if params.backend == "dense":
        return _DenseSystem(guide, params)
    return _GridSystem(guide, params)


def _solve_image(system, target: ImageF) -> ImageF:
    h, w, c = target.data.shape
    flat = target.data.reshape(h * w, c)
    out = system.solve_flat(flat)
    return ImageF(out.reshape(h, w, c))


def _check_dims(guide: ImageF, target: ImageF):
    if (guide.height, guide.width) != (target.height, target.width):
        raise DimensionError(
            f"guide {guide.height}x{guide.width} and target "
            f"{target.height}x{target.width} must share spatial dims"
        )


def solve_dense(guide: ImageF, target: ImageF, params: BilateralParams) -> ImageF:
    _check_dims(guide, target)
    return _solve_image(_DenseSystem(guide, params), target)


def solve_grid(guide: ImageF, target: ImageF, params: BilateralParams) -> ImageF:
    _check_dims(guide, target)
    return _solve_image(_GridSystem(guide, params), target)


def solve(guide: ImageF, target: ImageF, params: BilateralParams) -> ImageF:
    if params.backend == "dense":
        return solve_dense(guide, target, params)
    return solve_grid(guide, target, params)


GuideArg = Union[ImageF, Sequence[ImageF]]


def _guides_for_batch(guide: GuideArg, batch: int) -> list:
    if isinstance(guide, ImageF):
        guides = [guide] * batch
    else:
        guides = list(guide)
    if len(guides) != batch:
        raise ContractError(
            f"need one guide per batch item: got {len(guides)} guides for batch {batch}"
        )
    return guides


def filter_layer_forward(guide: GuideArg, target: Tensor, params: BilateralParams) -> Tensor:
    """Bilateral solve as a network layer.

    The guide is a constant: no gradient flows into it. Because the
    solve is x = A^-1 t with A symmetric, the backward pass for the
    target is A^-1 applied to the upstream gradient, reusing the
    factorization built here.
    """
    n, c, h, w = target.shape
    guides = _guides_for_batch(guide, n)
    for g in guides:
        if (g.height, g.width) != (h, w):
            raise ContractError(
                f"guide {g.height}x{g.width} does not match target {h}x{w}"
            )
    systems = [_build_system(g, params) for g in guides]
    out = np.empty_like(target.data)
    for i, system in enumerate(systems):
        flat = target.data[i].reshape(c, h * w).T
        out[i] = system.solve_flat(flat).T.reshape(c, h, w)

    def backward(g):
        gx = np.empty_like(g)
        for i, system in enumerate(systems):
            flat = g[i].reshape(c, h * w).T
            gx[i] = system.solve_flat(flat).T.reshape(c, h, w)
        return (gx,)

    return autodiff.custom_op("bilateral_filter", (target,), out, backward)


def filter_layer_backward(guide: GuideArg, upstream: Tensor, params: BilateralParams) -> Tensor:
    """Standalone adjoint of filter_layer_forward: the same solve.

    Valid because A is symmetric and constant with respect to the
    target.
    """
    n = upstream.shape[0]
    guides = _guides_for_batch(guide, n)
    out = np.empty_like(upstream.data)
    c, h, w = upstream.shape[1:]
    for i, g in enumerate(guides):
        system = _build_system(g, params)
        flat = upstream.data[i].reshape(c, h * w).T
        out[i] = system.solve_flat(flat).T.reshape(c, h, w)
    return Tensor(out)


def solver_param_search(
    candidates: Sequence[BilateralParams],
    reflectances: Sequence[ImageF],
    guides: Sequence[ImageF],
    judgements: Sequence,
    delta: float = 0.10,
    with_scores: bool = False,
):
    """Pick the candidate whose filtered reflectances score lowest mean WHDR.

    Ties go to the earliest candidate. With ``with_scores`` the return
    value is (best, scores) where scores[i] is candidate i's mean WHDR.
    """
    from intrinsic.metrics import whdr

    if not candidates:
        raise ContractError("solver_param_search needs at least one candidate")
    if not (len(reflectances) == len(guides) == len(judgements)):
        raise ContractError(
            "solver_param_search needs equally many reflectances, guides, and judgements"
        )
    if not reflectances:
        raise ContractError("solver_param_search needs at least one scene")
    best: Optional[BilateralParams] = None
    best_score = math.inf
    all_scores = []
    for cand in candidates:
        scores = []
        for refl, guide, judge in zip(reflectances, guides, judgements):
            filtered = solve(guide, refl, cand)
            scores.append(whdr(filtered, judge, delta))
        score = float(np.mean(scores))
        all_scores.append(score)
        if score < best_score:
            best = cand
            best_score = score
    if with_scores:
        return best, all_scores
    return best

"""Seamless (Poisson) cloning with a matrix-free conjugate gradient solver.

Inside the blend region the output keeps the patch's discrete Laplacian; on
the region boundary it takes the background values. The 5-point Laplacian
restricted to the region is symmetric positive definite, so CG applies.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

# per-pixel residual bound in gray levels, on top of the relative tolerance
PIXEL_ATOL = 1e-7


@dataclass
class CGInfo:
    iterations: int
    rel_residual: float
    converged: bool


def neighbor_sum(x: np.ndarray) -> np.ndarray:
    """Sum of the 4 neighbors, treating outside-the-array as zero."""
    s = np.zeros_like(x)
    s[1:, :] += x[:-1, :]
    s[:-1, :] += x[1:, :]
    s[:, 1:] += x[:, :-1]
    s[:, :-1] += x[:, 1:]
    return s


def laplacian(x: np.ndarray) -> np.ndarray:
    """5-point Laplacian ``sum(neighbors) - 4 * center`` on interior pixels (border set to 0)."""
    out = np.zeros_like(x, dtype=np.float64)
    out[1:-1, 1:-1] = (x[:-2, 1:-1] + x[2:, 1:-1] + x[1:-1, :-2] + x[1:-1, 2:]
                       - 4.0 * x[1:-1, 1:-1])
    return out


def conjugate_gradient(apply_a, b, x0=None, tol=1e-6, atol=None, max_iter=10_000):
    """Solve ``A x = b`` for SPD ``A`` given as a callable.

    Stops when ``||b - A x|| <= tol * ||b||`` and, if ``atol`` is given,
    every residual entry is at most ``atol``.
    """
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return np.zeros_like(b), CGInfo(0, 0.0, True)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - apply_a(x)
    p = r.copy()
    rs = r @ r
    it = 0

    def done():
        if np.sqrt(rs) > tol * b_norm:
            return False
        return atol is None or np.max(np.abs(r)) <= atol

    while not done() and it < max_iter:
        ap = apply_a(p)
        step = rs / (p @ ap)
        x += step * p
        r -= step * ap
        rs_new = r @ r
        p = r + (rs_new / rs) * p
        rs = rs_new
        it += 1
    rel = float(np.sqrt(rs) / b_norm)
    return x, CGInfo(it, rel, bool(done()))


def _check_region(bg_shape, patch_shape, top_left, mask):
    H, W = bg_shape[:2]
    h, w = patch_shape[:2]
    y, x = top_left
    if y < 1 or x < 1 or y + h > H - 1 or x + w > W - 1:
        raise ValueError(
            f"patch region rows {y}..{y + h}, cols {x}..{x + w} must keep a 1-pixel border inside {H}x{W}")
    if mask.shape != (h, w):
        raise ValueError(f"mask shape {mask.shape} does not match patch {h}x{w}")
    if not mask.any():
        raise ValueError("blend mask is empty")


def default_mask(patch_shape, valid=None) -> np.ndarray:
    """Valid-pixel mask eroded by one pixel (the solve interior)."""
    valid = np.ones(patch_shape[:2], dtype=bool) if valid is None else valid
    return ndimage.binary_erosion(valid, border_value=0)


def poisson_solve(background, patch, top_left, mask=None, tol=1e-6, atol=PIXEL_ATOL, max_iter=10_000):
    """Solve the seamless-clone system and return unclamped float values.

    Returns ``(values, infos)``: ``values`` has the patch's shape (H x W x C)
    and holds the solution on ``mask`` and background elsewhere;
    ``infos`` has one :class:`CGInfo` per channel.
    """
    bg = np.asarray(background, dtype=np.float64)
    src = np.asarray(patch, dtype=np.float64)
    if bg.ndim == 2:
        bg, src = bg[..., None], src[..., None]
    h, w = src.shape[:2]
    mask = default_mask(src.shape) if mask is None else np.asarray(mask, dtype=bool)
    _check_region(bg.shape, src.shape, top_left, mask)
    y, x = top_left

    # work on the patch window grown by one pixel on every side
    omega = np.pad(mask, 1, constant_values=False)
    outside = ~omega
    window = bg[y - 1:y + h + 1, x - 1:x + w + 1]

    def apply_a(vec):
        field = np.zeros(omega.shape)
        field[omega] = vec
        return 4.0 * vec - neighbor_sum(field)[omega]

    out = window.copy()
    infos = []
    for ch in range(src.shape[2]):
        g = np.pad(src[..., ch], 1, mode="edge")
        guidance = -laplacian(np.pad(g, 1, mode="edge"))[1:-1, 1:-1]
        boundary = neighbor_sum(np.where(outside, window[..., ch], 0.0))
        rhs = (guidance + boundary)[omega]
        x_opt, info = conjugate_gradient(apply_a, rhs, x0=g[omega], tol=tol,
                                           atol=atol, max_iter=max_iter)
        if not info.converged:
            log.warning("CG did not converge on channel %d: rel residual %.3g after %d iterations",
                        ch, info.rel_residual, info.iterations)
        out[..., ch][omega] = x_opt
        infos.append(info)
    return out[1:-1, 1:-1], infos


def poisson_blend(background, patch, top_left, mask=None, tol=1e-6, atol=PIXEL_ATOL,
                  max_iter=10_000) -> np.ndarray:
    """Seamlessly clone ``patch`` into ``background`` with its top-left at ``top_left`` (row, col).

    ``mask`` (patch-sized, bool) is the set of pixels that get solved for;
    it defaults to the patch rectangle eroded by one pixel. Pixels outside the
    mask are returned unchanged. Results are clamped to [0, 255] and, for
    uint8 backgrounds, rounded.
    """
    background = np.asarray(background)
    vals, _ = poisson_solve(background, patch, top_left, mask, tol, atol, max_iter)
    mask = default_mask(np.shape(patch)) if mask is None else np.asarray(mask, dtype=bool)
    y, x = top_left
    h, w = mask.shape
    vals = np.clip(vals, 0.0, 255.0)
    if background.dtype == np.uint8:
        vals = np.rint(vals)
    out = background.copy()
    region = out[y:y + h, x:x + w]
    if background.ndim == 2:
        region[mask] = vals[..., 0][mask].astype(background.dtype)
    else:
        region[mask] = vals[mask].astype(background.dtype)
    return out

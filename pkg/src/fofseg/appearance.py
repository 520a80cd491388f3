"""Pixelwise color appearance model with motion-compensated history.

Each pixel keeps up to T frames of color samples, each weighted by how
confidently that sample was background when it was recorded. Background
and foreground color likelihoods are kernel density estimates over a
small spatial neighborhood of those samples; a uniform color term is
mixed in with weight growing as the history gets unreliable. The final
background probability fuses color likelihoods, the motion-label
likelihood from the sampler, and a smoothed, motion-compensated prior
from the previous frame's posterior.

Color densities live on the discrete 8-bit color cube (kernels evaluated
at integer colors, no continuous-measure correction) so that the uniform
density 1/256^3 shares their measure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .flowio import FlowField

DEFAULT_UNIFORM_DENSITY = 1.0 / 256 ** 3


class DimensionMismatchError(ValueError):
    pass


@dataclass
class AppearanceConfig:
    sigma_color: float = 15.0 / 4.0     # per-channel color variance
    sigma_spatial: float = 5.0 / 4.0    # per-axis spatial variance
    history_length: int = 5
    neighborhood_radius: int = 2
    uniform_density: float = DEFAULT_UNIFORM_DENSITY

    def __post_init__(self):
        if min(self.sigma_color, self.sigma_spatial, self.uniform_density) <= 0:
            raise ValueError("variances and uniform density must be positive")
        if self.history_length < 1 or self.neighborhood_radius < 0:
            raise ValueError("bad history length or neighborhood radius")

    @property
    def slots_per_pixel(self) -> int:
        side = 2 * self.neighborhood_radius + 1
        return self.history_length * side * side


@dataclass
class HistoryLayer:
    colors: np.ndarray   # (H, W, 3) uint8
    weights: np.ndarray  # (H, W) background probability at record time
    valid: np.ndarray    # (H, W) False where warping left a hole


@dataclass
class AppearanceHistory:
    """Ring buffer of history layers, most recent first."""

    height: int
    width: int
    max_layers: int
    layers: list[HistoryLayer] = field(default_factory=list)

    @classmethod
    def empty(cls, height: int, width: int, max_layers: int) -> "AppearanceHistory":
        return cls(height=height, width=width, max_layers=max_layers)

    def append(self, colors: np.ndarray, weights: np.ndarray) -> None:
        """Record the newest frame; the oldest layer beyond capacity drops."""
        colors = np.asarray(colors, dtype=np.uint8)
        weights = np.asarray(weights, dtype=np.float64)
        if colors.shape[:2] != (self.height, self.width) or weights.shape != (self.height, self.width):
            raise DimensionMismatchError("layer dimensions differ from history")
        layer = HistoryLayer(colors.copy(), weights.copy(), np.ones((self.height, self.width), dtype=bool))
        self.layers.insert(0, layer)
        del self.layers[self.max_layers:]


def _integer_displacement(flow: FlowField):
    dx = np.floor(flow.u.astype(np.float64) + 0.5).astype(np.int64)
    dy = np.floor(flow.v.astype(np.float64) + 0.5).astype(np.int64)
    return dx, dy


def _forward_warp_indices(flow: FlowField, weight_key: np.ndarray, valid: np.ndarray):
    """Resolve forward-warp destinations; highest weight wins a conflict.

    Returns (src_flat, dest_flat) index arrays of the surviving samples.
    """
    h, w = flow.u.shape
    dx, dy = _integer_displacement(flow)
    px, py = np.meshgrid(np.arange(w), np.arange(h))
    nx = px + dx
    ny = py + dy
    keep = valid & (nx >= 0) & (nx < w) & (ny >= 0) & (ny < h)
    src = np.flatnonzero(keep.ravel())
    dest = (ny.ravel()[src] * w + nx.ravel()[src]).astype(np.int64)
    wkey = weight_key.ravel()[src]
    order = np.lexsort((src, wkey, dest))
    src = src[order]
    dest = dest[order]
    last = np.r_[dest[1:] != dest[:-1], True]
    return src[last], dest[last]


def warp_history(history: AppearanceHistory, flow: FlowField) -> AppearanceHistory:
    """Move every history sample along the flow (nearest-pixel forward map).

    Destination conflicts keep the sample with the higher background
    weight; vacated pixels become holes; out-of-frame samples drop.
    """
    if (history.height, history.width) != flow.u.shape:
        raise DimensionMismatchError("history/flow dimensions differ")
    out = AppearanceHistory.empty(history.height, history.width, history.max_layers)
    n = history.height * history.width
    for layer in history.layers:
        src, dest = _forward_warp_indices(flow, layer.weights, layer.valid)
        colors = np.zeros_like(layer.colors)
        weights = np.zeros_like(layer.weights)
        valid = np.zeros(n, dtype=bool)
        colors.reshape(n, 3)[dest] = layer.colors.reshape(n, 3)[src]
        weights.ravel()[dest] = layer.weights.ravel()[src]
        valid[dest] = True
        out.layers.append(HistoryLayer(colors, weights, valid.reshape(history.height, history.width)))
    return out


def _neighborhood_slices(radius: int):
    side = 2 * radius + 1
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            yield dy, dx
    del side


def _spatial_kernel(dy: int, dx: int, sigma_spatial: float) -> float:
    return math.exp(-(dx * dx + dy * dy) / (2.0 * sigma_spatial)) / (2.0 * math.pi * sigma_spatial)


def _pad(a: np.ndarray, radius: int, constant=0):
    if a.ndim == 3:
        return np.pad(a, ((radius, radius), (radius, radius), (0, 0)), constant_values=constant)
    return np.pad(a, radius, constant_values=constant)


@dataclass
class LikelihoodMaps:
    """Raw KDE densities and mixing weights for a whole frame."""

    density_bg: np.ndarray
    density_fg: np.ndarray
    support_bg: np.ndarray
    support_fg: np.ndarray
    gamma_bg: np.ndarray
    gamma_fg: np.ndarray


def likelihood_maps(frame: np.ndarray, history: AppearanceHistory, config: AppearanceConfig) -> LikelihoodMaps:
    """Vectorized per-pixel background/foreground KDE over the whole frame."""
    frame = np.asarray(frame, dtype=np.float64)
    h, w = frame.shape[:2]
    if (history.height, history.width) != (h, w):
        raise DimensionMismatchError("frame/history dimensions differ")
    r = config.neighborhood_radius
    sc = config.sigma_color
    color_norm = (2.0 * math.pi * sc) ** -1.5

    num_bg = np.zeros((h, w))
    num_fg = np.zeros((h, w))
    den_bg = np.zeros((h, w))
    den_fg = np.zeros((h, w))
    sum_wbg = np.zeros((h, w))
    sum_wfg = np.zeros((h, w))

    for layer in history.layers:
        colors_p = _pad(layer.colors.astype(np.float64), r)
        wbg_p = _pad(layer.weights * layer.valid, r)
        wfg_p = _pad((1.0 - layer.weights) * layer.valid, r)
        for dy, dx in _neighborhood_slices(r):
            sk = _spatial_kernel(dy, dx, config.sigma_spatial)
            b = colors_p[r + dy : r + dy + h, r + dx : r + dx + w, :]
            wbg = wbg_p[r + dy : r + dy + h, r + dx : r + dx + w]
            wfg = wfg_p[r + dy : r + dy + h, r + dx : r + dx + w]
            d2 = np.square(frame - b).sum(axis=2)
            ck = color_norm * np.exp(-d2 / (2.0 * sc))
            num_bg += ck * sk * wbg
            den_bg += sk * wbg
            num_fg += ck * sk * wfg
            den_fg += sk * wfg
            sum_wbg += wbg
            sum_wfg += wfg

    support_bg = den_bg > 0
    support_fg = den_fg > 0
    density_bg = np.where(support_bg, num_bg / np.where(support_bg, den_bg, 1.0), 0.0)
    density_fg = np.where(support_fg, num_fg / np.where(support_fg, den_fg, 1.0), 0.0)
    slots = float(config.slots_per_pixel)
    return LikelihoodMaps(
        density_bg=density_bg,
        density_fg=density_fg,
        support_bg=support_bg,
        support_fg=support_fg,
        gamma_bg=sum_wbg / slots,
        gamma_fg=sum_wfg / slots,
    )


def kde_likelihood(c, x, history: AppearanceHistory, config: AppearanceConfig, model: str):
    """Normalized KDE density of color(s) c at pixel x under bg or fg.

    `c` may be one (r, g, b) triple or an (N, 3) batch. Returns
    (density, support); support is False when no valid weighted sample
    exists in the neighborhood, in which case the density is 0.
    """
    if model not in ("bg", "fg"):
        raise ValueError("model must be 'bg' or 'fg'")
    c = np.asarray(c, dtype=np.float64)
    batched = c.ndim == 2
    cb = c if batched else c[None, :]
    py, px = x
    r = config.neighborhood_radius
    sc = config.sigma_color
    color_norm = (2.0 * math.pi * sc) ** -1.5

    num = np.zeros(cb.shape[0])
    den = 0.0
    for layer in history.layers:
        for dy, dx in _neighborhood_slices(r):
            qy, qx = py + dy, px + dx
            if not (0 <= qy < history.height and 0 <= qx < history.width):
                continue
            if not layer.valid[qy, qx]:
                continue
            wgt = layer.weights[qy, qx] if model == "bg" else 1.0 - layer.weights[qy, qx]
            if wgt == 0.0:
                continue
            sk = _spatial_kernel(dy, dx, config.sigma_spatial)
            d2 = np.square(cb - layer.colors[qy, qx].astype(np.float64)).sum(axis=1)
            num += color_norm * np.exp(-d2 / (2.0 * sc)) * sk * wgt
            den += sk * wgt
    if den == 0.0:
        zero = np.zeros(cb.shape[0])
        return (zero, False) if batched else (0.0, False)
    out = num / den
    return (out, True) if batched else (float(out[0]), True)


def gamma_weight(history: AppearanceHistory, x, config: AppearanceConfig, model: str) -> float:
    """Mean model weight over every neighborhood-by-history slot at x.

    Holes, out-of-frame offsets and missing layers contribute zero weight
    but still count toward the slot total.
    """
    if model not in ("bg", "fg"):
        raise ValueError("model must be 'bg' or 'fg'")
    py, px = x
    r = config.neighborhood_radius
    total = 0.0
    for layer in history.layers:
        for dy, dx in _neighborhood_slices(r):
            qy, qx = py + dy, px + dx
            if not (0 <= qy < history.height and 0 <= qx < history.width):
                continue
            if not layer.valid[qy, qx]:
                continue
            wgt = layer.weights[qy, qx]
            total += wgt if model == "bg" else 1.0 - wgt
    return total / config.slots_per_pixel


def mix_uniform(density, gamma, uniform_density: float = DEFAULT_UNIFORM_DENSITY):
    """Blend a KDE density with the uniform color density."""
    return gamma * density + (1.0 - gamma) * uniform_density


def gaussian_prior_kernel(size: int = 7, sigma: float = 1.75) -> np.ndarray:
    """Normalized odd-sized Gaussian smoothing kernel."""
    half = size // 2
    g = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(g[:, None] ** 2 + g[None, :] ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def propagate_prior(previous_posterior: np.ndarray, flow: FlowField, fill: float = 0.5) -> np.ndarray:
    """Warp the previous posterior along the flow, then smooth.

    Warp holes take the neutral value `fill`; smoothing is a 7x7 Gaussian
    (sigma 1.75) renormalized over in-frame taps at the borders.
    """
    prev = np.asarray(previous_posterior, dtype=np.float64)
    if prev.shape != flow.u.shape:
        raise DimensionMismatchError("posterior/flow dimensions differ")
    src, dest = _forward_warp_indices(flow, prev, np.ones(prev.shape, dtype=bool))
    warped = np.full(prev.size, fill, dtype=np.float64)
    warped[dest] = prev.ravel()[src]
    warped = warped.reshape(prev.shape)

    kernel = gaussian_prior_kernel()
    num = ndimage.convolve(warped, kernel, mode="constant", cval=0.0)
    den = ndimage.convolve(np.ones_like(warped), kernel, mode="constant", cval=0.0)
    return num / den


def posterior_from_terms(color_bg, color_fg, label_bg, label_fg, prior):
    """Bayes fusion of the mixed color likelihoods, label likelihoods and prior.

    Degenerate 0/0 pixels fall back to the prior. Inputs broadcast; output
    lies in [0, 1].
    """
    color_bg = np.asarray(color_bg, dtype=np.float64)
    num = color_bg * label_bg * prior
    den = num + np.asarray(color_fg, dtype=np.float64) * label_fg * (1.0 - np.asarray(prior))
    out = np.where(den > 0.0, num / np.where(den > 0.0, den, 1.0), prior)
    return out if out.ndim else float(out)

"""Nonparametric mixture inference over orientation fields.

Pixels are clustered by which library motion best explains their
observed flow orientation. The component count is open-ended: a
collapsed Gibbs sampler with auxiliary components (one fresh library
draw per pixel update by default) lets new motions appear whenever the
data demand them, weighted by the concentration parameter alpha. The
sampler is run once per alpha candidate and the candidate whose
background/foreground split best agrees with the others wins the vote.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .orientation import (
    MotionLibrary,
    OrientationField,
    ZERO_MOTION,
    refine_motion,
    wrap_angle,
)

DEFAULT_VARIANCE_FLOOR = math.radians(1.0) ** 2  # ~3.05e-4 rad^2
DEFAULT_ALPHAS = (1e-4, 1e-2, 10.0)

_SQRT_2PI = math.sqrt(2.0 * math.pi)
_EXP_NEG_HALF = math.exp(-0.5)
_TWO_PI = 2.0 * math.pi


class UseFallback(Exception):
    """Signal: no residuals available, apply the per-pixel fallback variance."""


class NoValidPixelsError(ValueError):
    pass


class DimensionMismatchError(ValueError):
    pass


@dataclass
class SamplerConfig:
    alpha_candidates: tuple = DEFAULT_ALPHAS
    n_sweeps: int = 20
    aux_per_sweep: int = 1
    rng_seed: int = 0
    variance_floor: float = DEFAULT_VARIANCE_FLOOR
    refine_after_fraction: float = 0.5

    def __post_init__(self):
        self.alpha_candidates = tuple(float(a) for a in self.alpha_candidates)
        if not self.alpha_candidates or any(a <= 0 for a in self.alpha_candidates):
            raise ValueError("alpha candidates must be non-empty and positive")
        if self.n_sweeps < 2:
            raise ValueError("need at least 2 sweeps")
        if self.aux_per_sweep < 1:
            raise ValueError("need at least 1 auxiliary component per update")
        if self.variance_floor <= 0:
            raise ValueError("variance floor must be positive")
        if not 0.0 <= self.refine_after_fraction <= 1.0:
            raise ValueError("refine_after_fraction must lie in [0, 1]")


@dataclass
class Component:
    hypothesis_index: int
    variance: float
    pixel_count: int


@dataclass
class SegmentationState:
    """Mutable sampler state: per-pixel component ids plus the live components.

    `labels` holds component ids on the full grid; zero-motion pixels carry
    the ZERO_MOTION sentinel and are never resampled.
    """

    labels: np.ndarray
    components: dict[int, Component]
    next_id: int
    archive: dict[int, tuple[int, float]] = field(default_factory=dict)

    def live_ids(self) -> list[int]:
        return sorted(self.components)


@dataclass
class ComponentInfo:
    """One row of the per-frame diagnostics table."""

    label: int
    hypothesis: tuple[float, float, float] | None
    variance: float | None
    pixel_count: int


@dataclass
class SegmentationResult:
    map_labels: np.ndarray
    background_component: int
    label_likelihoods: np.ndarray
    num_components: int
    chosen_alpha: float
    valid: np.ndarray
    components: list[ComponentInfo]
    all_zero_motion: bool = False

    def background_mask(self) -> np.ndarray:
        """Binary background map; zero-motion pixels count as background."""
        return self.map_labels == self.background_component


def variance_update(residuals, variance_floor: float = DEFAULT_VARIANCE_FLOOR) -> float:
    """Population variance of wrapped residuals, floored.

    Raises UseFallback on an empty input so the caller can apply the
    per-pixel squared-residual fallback instead.
    """
    r = np.asarray(residuals, dtype=np.float64)
    if r.size == 0:
        raise UseFallback("no residuals; use the per-pixel fallback variance")
    return max(float(np.var(r)), variance_floor)


def fallback_variance(residual: float, variance_floor: float = DEFAULT_VARIANCE_FLOOR) -> float:
    """Variance used against a component that has no members yet."""
    return max(residual * residual, variance_floor)


def _gauss_pdf(residual, variance):
    return np.exp(-np.square(residual) / (2.0 * variance)) / np.sqrt(2.0 * math.pi * variance)


def _fallback_pdf(residual, variance_floor):
    """Gaussian evaluated under the per-pixel fallback variance max(r^2, floor).

    Components that had no members at the last variance update are scored
    this way against every pixel, so a fresh component can still attract
    the rest of its cluster.
    """
    r2 = np.square(residual)
    var = np.maximum(r2, variance_floor)
    return np.exp(-r2 / (2.0 * var)) / np.sqrt(2.0 * math.pi * var)


def _library_matrix(library: MotionLibrary, valid_flat: np.ndarray) -> np.ndarray:
    """(n_hypotheses, n_valid) predicted angles; NaN where a field has no
    defined orientation (focus-of-expansion pixel)."""
    rows = []
    for fld in library.fields:
        ang = fld.angle.ravel()[valid_flat]
        if not fld.valid.all():
            bad = ~fld.valid.ravel()[valid_flat]
            if bad.any():
                ang = ang.copy()
                ang[bad] = np.nan
        rows.append(ang)
    return np.asarray(rows)


def _residuals(a_obs: np.ndarray, predicted: np.ndarray) -> np.ndarray:
    """Wrapped residuals; undefined predictions charge the maximum (pi)."""
    r = wrap_angle(a_obs - predicted)
    if np.isnan(r).any():
        r = np.where(np.isnan(r), np.pi, r)
    return r


def initial_state(
    obs: OrientationField,
    library: MotionLibrary,
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
) -> SegmentationState:
    """Single-component start: the library entry with minimal mean |residual|."""
    valid_flat = np.flatnonzero(obs.valid.ravel())
    if valid_flat.size == 0:
        raise NoValidPixelsError("all pixels are zero-motion")
    a = obs.angle.ravel()[valid_flat]
    lib = _library_matrix(library, valid_flat)
    objective = np.abs(_residuals(a[None, :], lib)).mean(axis=1)
    best = int(np.argmin(objective))
    var = max(float(np.var(_residuals(a, lib[best]))), variance_floor)

    labels = np.full(obs.angle.shape, ZERO_MOTION, dtype=np.int64)
    labels.ravel()[valid_flat] = 0
    comp = Component(hypothesis_index=best, variance=var, pixel_count=int(valid_flat.size))
    return SegmentationState(labels=labels, components={0: comp}, next_id=1, archive={0: (best, var)})


def gibbs_sweep(
    state: SegmentationState,
    obs: OrientationField,
    library: MotionLibrary,
    alpha: float,
    rng: np.random.Generator,
    aux_per_sweep: int = 1,
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
) -> SegmentationState:
    """One full Gibbs sweep, in place.

    Valid pixels are resampled in raster order. Existing components weigh
    n_{-i,k} * G(a_i; F(phi_k, x_i), var_k); each of the m auxiliary slots
    weighs (alpha/m) * G under the per-pixel fallback variance. A pixel
    that is currently a singleton keeps its own component as the first
    auxiliary slot, so singletons can survive. After the pixel pass every
    live component resamples its hypothesis from the library in proportion
    to its members' joint likelihood, then refreshes its variance from the
    wrapped residuals (floored).
    """
    if state.labels.shape != obs.angle.shape:
        raise DimensionMismatchError("state/observation dimensions differ")
    m = int(aux_per_sweep)
    alpha_over_m = alpha / m

    valid_flat = np.flatnonzero(obs.valid.ravel())
    n_valid = valid_flat.size
    if n_valid == 0:
        raise NoValidPixelsError("all pixels are zero-motion")
    a_np = obs.angle.ravel()[valid_flat]
    lib_np = _library_matrix(library, valid_flat)
    n_lib = lib_np.shape[0]

    a_list = a_np.tolist()
    lib_rows = [row.tolist() for row in lib_np]

    labels_flat = state.labels.ravel()

    # parallel live-component arrays for the sequential pass
    live_ids: list[int] = state.live_ids()
    id_to_pos = {cid: j for j, cid in enumerate(live_ids)}
    live_counts = [state.components[cid].pixel_count for cid in live_ids]
    live_var = [state.components[cid].variance for cid in live_ids]
    live_hyp = [state.components[cid].hypothesis_index for cid in live_ids]
    live_L: list[list[float]] = [
        _gauss_pdf(_residuals(a_np, lib_np[h]), v).tolist()
        for h, v in zip(live_hyp, live_var)
    ]

    u = rng.random(n_valid)
    aux_draws = rng.integers(0, n_lib, size=(n_valid, m))

    sqrt_floor_var = math.sqrt(variance_floor)
    inv_norm_floor = 1.0 / (_SQRT_2PI * sqrt_floor_var)
    two_floor = 2.0 * variance_floor

    def _remove_at(pos: int) -> None:
        last = len(live_ids) - 1
        gone = live_ids[pos]
        if pos != last:
            live_ids[pos] = live_ids[last]
            live_counts[pos] = live_counts[last]
            live_var[pos] = live_var[last]
            live_hyp[pos] = live_hyp[last]
            live_L[pos] = live_L[last]
            id_to_pos[live_ids[pos]] = pos
        live_ids.pop()
        live_counts.pop()
        live_var.pop()
        live_hyp.pop()
        live_L.pop()
        del id_to_pos[gone]

    for ii in range(n_valid):
        gi = valid_flat[ii]
        cid = labels_flat[gi]
        pos = id_to_pos[cid]
        live_counts[pos] -= 1
        singleton = live_counts[pos] == 0

        nlive = len(live_ids)
        weights = []
        total = 0.0
        for j in range(nlive):
            w = live_counts[j] * live_L[j][ii]
            weights.append(w)
            total += w

        # auxiliary slots: a singleton's own parameters fill slot 0
        aux_weights = []
        aux_kind = []  # ("self",) or ("new", hyp_index, variance)
        for s in range(m):
            if s == 0 and singleton:
                w = alpha_over_m * live_L[pos][ii]
                aux_weights.append(w)
                aux_kind.append(None)
            else:
                hidx = int(aux_draws[ii, s])
                r = math.remainder(a_list[ii] - lib_rows[hidx][ii], _TWO_PI)
                if r != r:  # NaN: hypothesis has no orientation here
                    aux_weights.append(0.0)
                    aux_kind.append(("new", hidx, variance_floor))
                    continue
                r2 = r * r
                if r2 >= variance_floor:
                    w = alpha_over_m * _EXP_NEG_HALF / (_SQRT_2PI * abs(r))
                    var_new = r2
                else:
                    w = alpha_over_m * math.exp(-r2 / two_floor) * inv_norm_floor
                    var_new = variance_floor
                aux_weights.append(w)
                aux_kind.append(("new", hidx, var_new))
            total += aux_weights[-1]

        if total <= 0.0:
            live_counts[pos] += 1  # nothing explains this pixel; keep it put
            continue

        x = u[ii] * total
        chosen = -1
        acc = 0.0
        for j in range(nlive):
            acc += weights[j]
            if x < acc:
                chosen = j
                break
        if chosen >= 0:
            live_counts[chosen] += 1
            labels_flat[gi] = live_ids[chosen]
            if singleton and chosen != pos:
                _remove_at(pos)
            continue

        picked = m - 1
        for s in range(m):
            acc += aux_weights[s]
            if x < acc:
                picked = s
                break
        kind = aux_kind[picked]
        if kind is None:
            live_counts[pos] += 1  # singleton survives on its own slot
            continue
        _, hidx, var_new = kind
        new_id = state.next_id
        state.next_id += 1
        live_ids.append(new_id)
        live_counts.append(1)
        live_var.append(var_new)
        live_hyp.append(hidx)
        # never-before-populated component: per-pixel fallback variance
        live_L.append(_fallback_pdf(_residuals(a_np, lib_np[hidx]), variance_floor).tolist())
        id_to_pos[new_id] = len(live_ids) - 1
        labels_flat[gi] = new_id
        if singleton:
            _remove_at(pos)

    # per-component hypothesis resample and variance refresh, id order
    labels_valid = labels_flat[valid_flat]
    state.components = {}
    order = sorted(range(len(live_ids)), key=lambda j: live_ids[j])
    for j in order:
        cid = live_ids[j]
        members = np.flatnonzero(labels_valid == cid)
        if members.size == 0:
            continue
        var = live_var[j]
        r_all = _residuals(a_np[members][None, :], lib_np[:, members])
        logw = -np.sum(np.square(r_all), axis=1) / (2.0 * var)
        logw -= logw.max()
        p = np.exp(logw)
        p /= p.sum()
        hyp = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
        hyp = min(hyp, n_lib - 1)
        new_var = max(float(np.var(_residuals(a_np[members], lib_np[hyp, members]))), variance_floor)
        state.components[cid] = Component(
            hypothesis_index=hyp, variance=new_var, pixel_count=int(members.size)
        )
        state.archive[cid] = (hyp, new_var)
    return state


def _zero_motion_result(shape, chosen_alpha: float) -> SegmentationResult:
    labels = np.zeros(shape, dtype=np.int32)
    return SegmentationResult(
        map_labels=labels,
        background_component=0,
        label_likelihoods=np.ones(shape, dtype=np.float64),
        num_components=1,
        chosen_alpha=chosen_alpha,
        valid=np.zeros(shape, dtype=bool),
        components=[ComponentInfo(0, None, None, int(np.prod(shape)))],
        all_zero_motion=True,
    )


def _run_single_alpha(
    obs: OrientationField,
    library: MotionLibrary,
    config: SamplerConfig,
    alpha: float,
    seed: int,
) -> SegmentationResult:
    if not obs.valid.any():
        return _zero_motion_result(obs.angle.shape, alpha)

    rng = np.random.default_rng(seed)
    lib = library.copy()
    state = initial_state(obs, lib, config.variance_floor)

    valid_flat = np.flatnonzero(obs.valid.ravel())
    n_valid = valid_flat.size
    n_rec = math.ceil(config.n_sweeps / 2)
    record_from = config.n_sweeps - n_rec + 1
    refine_from = max(1, math.ceil(config.n_sweeps * config.refine_after_fraction))

    visits: dict[int, np.ndarray] = {}
    for sweep in range(1, config.n_sweeps + 1):
        gibbs_sweep(
            state, obs, lib, alpha, rng,
            aux_per_sweep=config.aux_per_sweep,
            variance_floor=config.variance_floor,
        )
        if sweep >= refine_from and state.components:
            largest = max(state.components, key=lambda c: (state.components[c].pixel_count, -c))
            comp = state.components[largest]
            member_grid = (state.labels == largest)
            refined = refine_motion(
                lib.hypotheses[comp.hypothesis_index], obs, member_grid, lib.intrinsics
            )
            lib.append(refined)
        if sweep >= record_from:
            labels_valid = state.labels.ravel()[valid_flat]
            for cid in state.components:
                row = visits.setdefault(cid, np.zeros(n_valid, dtype=np.int32))
                row[labels_valid == cid] += 1

    ids = sorted(visits)
    stacked = np.stack([visits[cid] for cid in ids])
    winner_rows = np.argmax(stacked, axis=0)
    winner_ids = np.asarray(ids, dtype=np.int64)[winner_rows]

    present, counts = np.unique(winner_ids, return_counts=True)
    bg_id = int(present[np.argmax(counts)])  # ties: np.unique sorts ids ascending

    bg_row = ids.index(bg_id)
    bg_freq = stacked[bg_row].astype(np.float64) / float(n_rec)

    order = sorted(zip(present, counts), key=lambda pc: (-pc[1], pc[0]))
    out_label = {int(cid): lab for lab, (cid, _) in enumerate(order)}

    map_labels = np.zeros(obs.angle.shape, dtype=np.int32)
    remapped = np.array([out_label[int(c)] for c in winner_ids], dtype=np.int32)
    map_labels.ravel()[valid_flat] = remapped

    likelihood = np.ones(obs.angle.shape, dtype=np.float64)
    likelihood.ravel()[valid_flat] = bg_freq

    info = []
    for cid, cnt in order:
        hyp_idx, var = state.archive[int(cid)]
        hyp = tuple(float(x) for x in lib.hypotheses[hyp_idx])
        info.append(ComponentInfo(out_label[int(cid)], hyp, var, int(cnt)))

    return SegmentationResult(
        map_labels=map_labels,
        background_component=0,
        label_likelihoods=likelihood,
        num_components=len(present),
        chosen_alpha=alpha,
        valid=obs.valid.copy(),
        components=info,
    )


def run_inference(
    obs: OrientationField, library: MotionLibrary, config: SamplerConfig
) -> list[SegmentationResult]:
    """Run the sampler once per alpha candidate (seeded independently)."""
    return [
        _run_single_alpha(obs, library, config, alpha, config.rng_seed + j)
        for j, alpha in enumerate(config.alpha_candidates)
    ]


def vote_argmax(background_masks) -> int:
    """Index of the mask that best agrees with the pixelwise vote.

    Score_j = sum_x [b_sum(x) * b_j(x) + f_sum(x) * f_j(x)] where b_sum and
    f_sum are the per-pixel background and foreground vote totals over all
    candidates. Ties break toward the lowest index.
    """
    masks = [np.asarray(b, dtype=bool) for b in background_masks]
    if not masks:
        raise ValueError("no candidate masks")
    shape = masks[0].shape
    if any(b.shape != shape for b in masks):
        raise DimensionMismatchError("candidate masks must share dimensions")
    b = np.stack(masks).astype(np.int64)
    f = 1 - b
    b_sum = b.sum(axis=0)
    f_sum = f.sum(axis=0)
    scores = [int((b_sum * b[j] + f_sum * f[j]).sum()) for j in range(len(masks))]
    return int(np.argmax(scores))


def select_alpha(results: list[SegmentationResult]) -> SegmentationResult:
    """Pick the candidate segmentation that best agrees with the others."""
    if not results:
        raise ValueError("no candidate results")
    return results[vote_argmax([r.background_mask() for r in results])]

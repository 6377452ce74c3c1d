"""Channel-wise gradient mask construction and disjoint routing.

The five channel groups are ordered (dc, rest, opa, rot, sca) throughout.
Masks collapse point-wise channel weights into scene-level scalars
(mean over compensators, median over carriers) bounded by per-group caps
and floors; an optional per-point variant keeps the full weight rows.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from gsmark.config import ConfigurationError, MaskConfig
from gsmark.experts import FeatureBundle
from gsmark.model import Role
from gsmark.render import CHANNEL_GROUPS, GradientSet
from gsmark.sbag import ProxyScores


class RoutingIntegrityError(RuntimeError):
    """A gradient source carries energy outside its role partition."""


@dataclass
class ChannelWeights:
    w_wm: np.ndarray   # (5, N) in [0, 1]
    w_vis: np.ndarray  # (5, N) in [0, 1]


@dataclass
class GroupMask:
    m_wm: np.ndarray   # (5,) or (5, N) when per-point
    m_vis: np.ndarray
    cap: np.ndarray    # (5,)
    floor: np.ndarray  # (5,)

    def factor(self, which: str, group_index: int, index: int) -> float:
        m = self.m_wm if which == "wm" else self.m_vis
        return float(m[group_index] if m.ndim == 1 else m[group_index, index])


def channel_weights(proxy: ProxyScores,
                    features: FeatureBundle) -> ChannelWeights:
    """Point-wise channel permissiveness.

    Carrier weights tie each channel to the expert that governs it
    (appearance safety for color, geometric stability for pose/shape);
    compensator weights are the complements.
    """
    r1, r2 = proxy.R[0], proxy.R[1]
    w_wm = np.stack([
        r2,                                 # dc
        r2 * (1.0 - features.rho_hf),       # rest
        features.gate,                      # opa
        r1,                                 # rot
        r1 * features.iso,                  # sca
    ])
    w_wm = np.clip(w_wm, 0.0, 1.0)
    return ChannelWeights(w_wm=w_wm, w_vis=1.0 - w_wm)


def _lower_median(values: np.ndarray) -> float:
    v = np.sort(values)
    return float(v[(len(v) - 1) // 2])


def build_masks(weights: ChannelWeights, roles: np.ndarray,
                cfg: MaskConfig | None = None) -> GroupMask:
    """Collapse channel weights into the routing mask.

    m_vis_g = max(clip(mean over compensators, 0, cap), floor);
    m_wm_g = clip(median over carriers, 0, cap).
    """
    cfg = cfg or MaskConfig()
    cap = np.asarray(cfg.cap, dtype=np.float64)
    floor = np.asarray(cfg.floor, dtype=np.float64)
    if cap.shape != (5,) or floor.shape != (5,):
        raise ConfigurationError("cap and floor must have 5 entries")
    if np.any(cap < floor):
        raise ConfigurationError("cap must be >= floor per group")

    roles = np.asarray(roles)
    wm_idx = np.flatnonzero(roles == Role.WM)
    vis_idx = np.flatnonzero(roles == Role.VIS)

    if cfg.per_point:
        m_wm = np.clip(weights.w_wm, 0.0, cap[:, None])
        m_vis = np.maximum(np.clip(weights.w_vis, 0.0, cap[:, None]),
                           floor[:, None])
        return GroupMask(m_wm=m_wm, m_vis=m_vis, cap=cap, floor=floor)

    m_wm = np.zeros(5)
    if wm_idx.size:
        for g in range(5):
            m_wm[g] = np.clip(_lower_median(weights.w_wm[g, wm_idx]),
                              0.0, cap[g])
    else:
        warnings.warn("no watermark carriers; m_wm set to zero")
    if vis_idx.size:
        m_vis = np.clip(weights.w_vis[:, vis_idx].mean(axis=1), 0.0, cap)
    else:
        m_vis = np.zeros(5)
    m_vis = np.maximum(m_vis, floor)
    return GroupMask(m_wm=m_wm, m_vis=m_vis, cap=cap, floor=floor)


def _group_mask_column(mask_values, group_index, n):
    if mask_values.ndim == 1:
        return np.full(n, mask_values[group_index])
    return mask_values[group_index]


def _scale_group(arr: np.ndarray, factors: np.ndarray) -> np.ndarray:
    return arr * factors.reshape((-1,) + (1,) * (arr.ndim - 1))


def route_gradients(grads_wm: GradientSet, grads_vis: GradientSet,
                    roles: np.ndarray, mask: GroupMask) -> GradientSet:
    """Merge the two role-filtered backward passes under the mask.

    Every (gaussian, group) entry receives exactly one masked source;
    neutral rows stay zero.  Nonzero energy outside a source's partition
    indicates an upstream filter bug and raises.
    """
    roles = np.asarray(roles)
    n = len(roles)
    wm_rows = roles == Role.WM
    vis_rows = roles == Role.VIS

    for grads, allowed, name in ((grads_wm, wm_rows, "wm"),
                                 (grads_vis, vis_rows, "vis")):
        for gname in CHANNEL_GROUPS:
            arr = grads.group(gname)
            outside = arr[~allowed]
            if outside.size and np.any(outside != 0):
                raise RoutingIntegrityError(
                    f"{name} gradients carry energy outside the "
                    f"{name.upper()} partition in group {gname!r}")

    out_arrays = []
    for g, gname in enumerate(CHANNEL_GROUPS):
        fac_wm = _group_mask_column(mask.m_wm, g, n) * wm_rows
        fac_vis = _group_mask_column(mask.m_vis, g, n) * vis_rows
        out_arrays.append(_scale_group(grads_wm.group(gname), fac_wm)
                          + _scale_group(grads_vis.group(gname), fac_vis))
    return GradientSet(*out_arrays)

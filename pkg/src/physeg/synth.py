"""Simulated physical rasters (NDVI/DEM/SAR) from label masks under interval constraints.

Every labeled pixel receives a value drawn inside its class interval for the
requested modality; optional box-blur smoothing is followed by a per-class
re-clip so containment survives spatial correlation.  Generation is
bit-deterministic for a fixed (mask, graph, config) triple, with per-modality
sub-seeds so each modality is independently reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .priors import MODALITY_INDEX, PriorGraph

DEFAULT_BACKGROUND = {"NDVI": 0.0, "DEM": 0.0, "SAR": -30.0}


class UnknownClassError(ValueError):
    """A mask label has no entry in the accompanying graph."""


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    noise_model: str = "truncated_gaussian"  # or "uniform"
    smoothing_radius: int = 1
    background_fill: dict = field(default_factory=lambda: dict(DEFAULT_BACKGROUND))

    def __post_init__(self):
        if self.noise_model not in ("truncated_gaussian", "uniform"):
            raise ValueError(f"unknown noise model {self.noise_model!r}")
        if self.smoothing_radius < 0:
            raise ValueError("smoothing_radius must be >= 0")


def box_blur(values: np.ndarray, radius: int) -> np.ndarray:
    """Mean filter with a (2r+1)^2 window and edge-replicated borders."""
    if radius <= 0:
        return np.array(values, dtype=np.float64, copy=True)
    k = 2 * radius + 1
    padded = np.pad(np.asarray(values, dtype=np.float64), radius, mode="edge")
    integral = np.pad(padded, ((1, 0), (1, 0))).cumsum(axis=0).cumsum(axis=1)
    window = (
        integral[k:, k:]
        - integral[:-k, k:]
        - integral[k:, :-k]
        + integral[:-k, :-k]
    )
    return window / (k * k)


def _check_labels(mask: np.ndarray, graph: PriorGraph) -> np.ndarray:
    labels = np.asarray(mask)
    if labels.ndim != 2:
        raise ValueError(f"label mask must be 2-D, got shape {labels.shape}")
    present = np.unique(labels)
    for cid in present:
        if cid != 0 and not 1 <= cid <= graph.num_classes:
            raise UnknownClassError(f"mask label {int(cid)} does not resolve in the graph")
    return labels


def _interval_grids(labels, graph, modality, fill):
    """Per-pixel lo/hi/mid/std lookup grids for the given modality."""
    c = graph.num_classes
    lo = np.full(c + 1, fill, dtype=np.float64)
    hi = np.full(c + 1, fill, dtype=np.float64)
    for cid in range(1, c + 1):
        iv = graph.interval(cid, modality)
        lo[cid], hi[cid] = iv.lo, iv.hi
    return lo[labels], hi[labels]


def synthesize_raster(
    mask: np.ndarray,
    graph: PriorGraph,
    modality: str,
    config: SynthConfig,
) -> np.ndarray:
    """Generate one modality raster, pixel-aligned with the mask.

    Labeled pixels end up inside their class interval exactly (values are
    re-clipped after smoothing); background pixels take the configured fill.
    """
    labels = _check_labels(mask, graph)
    if modality not in MODALITY_INDEX:
        raise ValueError(f"unknown modality {modality!r}")
    fill = float(config.background_fill.get(modality, DEFAULT_BACKGROUND[modality]))
    lo, hi = _interval_grids(labels, graph, modality, fill)

    seq = np.random.SeedSequence([int(config.seed), MODALITY_INDEX[modality]])
    rng = np.random.Generator(np.random.PCG64(seq))
    if config.noise_model == "uniform":
        u = rng.random(labels.shape)
        values = lo + u * (hi - lo)
    else:
        # midpoint-peaked: N(mid, width/4) clipped to the interval
        z = rng.standard_normal(labels.shape)
        mid = 0.5 * (lo + hi)
        values = np.clip(mid + z * (hi - lo) / 4.0, lo, hi)

    if config.smoothing_radius > 0:
        values = box_blur(values, config.smoothing_radius)
        values = np.clip(values, lo, hi)

    values[labels == 0] = fill
    return values


def synthesize_scene(
    mask: np.ndarray,
    graph: PriorGraph,
    modalities,
    config: SynthConfig,
) -> dict[str, np.ndarray]:
    """Generate one raster per requested modality, all pixel-aligned."""
    out = {}
    for modality in sorted(modalities, key=lambda m: MODALITY_INDEX[m]):
        out[modality] = synthesize_raster(mask, graph, modality, config)
    return out

"""Two-mode inference: residual refinement plus interval-distance re-weighting.

For each available modality the per-pixel distance between the measured value
and each class's admissible interval feeds a Gaussian attenuation
``s = exp(-min(d, tau)^2 / sigma^2)``; class scores are multiplied by the
product of attenuations and renormalized.  With no modalities available the
attenuation is identically 1 and the refined probabilities are simply
renormalized (visual-only mode).  Every pixel whose argmax label changes is
recorded in a trace carrying distances, attenuations and the knowledge-graph
reasoning for the classes involved.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .priors import MODALITIES, MODALITY_INDEX, PriorGraph, interval_distance_grid
from .refiner import RefinerParams, assemble_joint, refine

DENOM_FLOOR = 1e-12
SIGMA_FLOOR = 1e-3  # modality units; guards zero-width intervals


@dataclass(frozen=True)
class AttenuationConfig:
    """Cap/tolerance settings per modality, interval-width-relative by default.

    In relative mode each (modality, class) pair gets sigma = sigma_rel * width
    and tau = tau_rel * sigma; zero-width intervals fall back to the sigma
    floor.  Absolute per-modality overrides replace both for every class of
    that modality.
    """

    available: tuple = ()
    sigma_rel: float = 0.5
    tau_rel: float = 2.0
    sigma_abs: dict = field(default_factory=dict)
    tau_abs: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "available", tuple(self.available))
        for name in self.available:
            if name not in MODALITY_INDEX:
                raise ValueError(f"unknown modality {name!r} in available set")
        if self.sigma_rel <= 0 or self.tau_rel <= 0:
            raise ValueError("sigma_rel and tau_rel must be > 0")
        for table, label in ((self.sigma_abs, "sigma"), (self.tau_abs, "tau")):
            for name, value in table.items():
                if value <= 0:
                    raise ValueError(f"absolute {label} for {name!r} must be > 0")

    def params_for(self, modality: str, interval) -> tuple[float, float]:
        """Resolved (tau, sigma) for one (modality, class interval) pair."""
        sigma = self.sigma_abs.get(modality)
        tau = self.tau_abs.get(modality)
        if sigma is None:
            sigma = max(self.sigma_rel * interval.width, SIGMA_FLOOR)
        if tau is None:
            tau = self.tau_rel * sigma
        return tau, sigma


@dataclass
class RefinementTrace:
    """Per-pixel records of argmax flips caused by re-weighting, plus warnings."""

    flips: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_jsonl(self) -> str:
        lines = [json.dumps(rec, sort_keys=True) for rec in self.flips]
        for msg in self.warnings:
            lines.append(json.dumps({"warning": msg}, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")


def attenuation(d: float, tau: float, sigma: float) -> float:
    """Gaussian attenuation of a single interval distance: in (0, 1], 1 at d=0."""
    if sigma <= 0:
        raise ValueError("attenuation tolerance sigma must be > 0")
    if tau <= 0:
        raise ValueError("attenuation cap tau must be > 0")
    capped = min(float(d), tau)
    return math.exp(-(capped * capped) / (sigma * sigma))


def _attenuation_grids(rasters, graph, config, num_classes):
    """Stack of per-class attenuation products S (H, W, C) and per-modality parts."""
    shape = next(iter(rasters.values())).shape
    scores = np.ones(shape + (num_classes,))
    parts = {}
    for name in sorted(config.available, key=lambda m: MODALITY_INDEX[m]):
        values = np.asarray(rasters[name], dtype=np.float64)
        per_mod = np.empty(shape + (num_classes,))
        for ch in range(num_classes):
            iv = graph.interval(ch + 1, name)
            tau, sigma = config.params_for(name, iv)
            d = np.minimum(interval_distance_grid(values, iv), tau)
            per_mod[:, :, ch] = np.exp(-(d * d) / (sigma * sigma))
        parts[name] = per_mod
        scores *= per_mod
    return scores, parts


def reweight(refined, rasters, graph: PriorGraph, config: AttenuationConfig):
    """Multiply refined scores by interval attenuations and renormalize.

    Returns (probabilities, labels, trace).  Only modalities listed in
    ``config.available`` participate; an empty set degrades to plain
    renormalization of the refined scores.  If attenuation wipes out every
    class at a pixel the refined scores are used there and a warning is
    recorded.
    """
    refined = np.asarray(refined, dtype=np.float64)
    if refined.ndim != 3:
        raise ValueError(f"refined map must be (H, W, C), got shape {refined.shape}")
    h, w, c = refined.shape
    if c != graph.num_classes:
        raise ValueError(
            f"refined map has {c} channels but the graph defines {graph.num_classes} classes"
        )
    used = {}
    for name in config.available:
        if name not in rasters:
            raise ValueError(f"modality {name!r} declared available but no raster supplied")
        grid = np.asarray(rasters[name], dtype=np.float64)
        if grid.shape != (h, w):
            raise ValueError(f"raster {name!r} shape {grid.shape} does not match {(h, w)}")
        used[name] = grid

    trace = RefinementTrace()
    pre_labels = np.argmax(refined, axis=2).astype(np.int32) + 1

    if used:
        scores, parts = _attenuation_grids(used, graph, config, c)
    else:
        scores, parts = np.ones_like(refined), {}

    weighted = refined * scores
    denom = weighted.sum(axis=2, keepdims=True)
    dead = denom[:, :, 0] < DENOM_FLOOR
    if np.any(dead):
        refined_sum = refined.sum(axis=2, keepdims=True)
        weighted = np.where(dead[:, :, None], refined, weighted)
        denom = np.where(dead[:, :, None], refined_sum, denom)
        for y, x in np.argwhere(dead):
            trace.warnings.append(
                f"pixel ({int(y)}, {int(x)}): all classes fully attenuated; "
                "kept refined probabilities"
            )
    probs = weighted / np.maximum(denom, DENOM_FLOOR)
    labels = np.argmax(probs, axis=2).astype(np.int32) + 1

    for y, x in np.argwhere(labels != pre_labels):
        pre, post = int(pre_labels[y, x]), int(labels[y, x])
        per_modality = {}
        for name, grid in used.items():
            record = {"value": float(grid[y, x])}
            for tag, cid in (("pre", pre), ("post", post)):
                iv = graph.interval(cid, name)
                record[f"distance_{tag}"] = float(
                    interval_distance_grid(grid[y : y + 1, x : x + 1], iv)[0, 0]
                )
                record[f"score_{tag}"] = float(parts[name][y, x, cid - 1])
            per_modality[name] = record
        trace.flips.append(
            {
                "y": int(y),
                "x": int(x),
                "pre_label": pre,
                "post_label": post,
                "pre_category": graph.entry_for_id(pre).category,
                "post_category": graph.entry_for_id(post).category,
                "modalities": per_modality,
                "pre_reasoning": graph.entry_for_id(pre).reasoning,
                "post_reasoning": graph.entry_for_id(post).reasoning,
            }
        )
    return probs, labels, trace


def infer(
    params: RefinerParams,
    features,
    coarse,
    rasters,
    graph: PriorGraph,
    config: AttenuationConfig,
):
    """Full pipeline: assemble joint tensor, refine, re-weight, label.

    Rasters not listed in ``config.available`` are ignored entirely, so
    visual-only inference (empty available set) is independent of any raster
    content supplied.  Returns (labels, probabilities, trace).
    """
    rasters = rasters or {}
    used = {name: rasters[name] for name in config.available if name in rasters}
    missing = [name for name in config.available if name not in rasters]
    if missing:
        raise ValueError(f"modalities declared available but not supplied: {missing}")
    z = assemble_joint(features, coarse, used, graph)
    y1, _ = refine(params, z, coarse)
    probs, labels, trace = reweight(y1, used, graph, config)
    return labels, probs, trace

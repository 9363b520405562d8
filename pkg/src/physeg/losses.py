"""Joint visual-physical training losses with analytic gradients.

Pixel term: cross-entropy plus a soft-Dice penalty over labeled pixels.
Region term: intra-class feature variance over hard argmax regions (no
gradient w.r.t. the prediction; regions are frozen per evaluation).
Physics term: squared hinge on region-mean physical values leaving their
class intervals.  The hinge is reported on hard argmax regions
(``phys_loss``) and trained through probability-weighted region means
(``phys_loss_soft``) so it actually carries a gradient; the two coincide
at one-hot predictions.

Region-mean comparisons use a small edge tolerance so summation rounding
on exactly-clipped rasters never registers as an interval violation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .priors import MODALITY_INDEX, PriorGraph

CLAMP_EPS = 1e-7  # probability clamp inside cross-entropy
_SOFT_MASS_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # Dice weight inside the pixel term
    lambda1: float = 0.05  # region-compactness weight
    lambda2: float = 0.40  # physics-consistency weight

    def __post_init__(self):
        if self.alpha < 0 or self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class RegionStats:
    """Per-class statistics over hard argmax regions (class c -> row c-1)."""

    counts: np.ndarray  # (C,) pixels per predicted class
    feature_means: np.ndarray  # (C, D); zero rows for empty classes
    raster_means: dict  # modality -> (C,) mean physical value
    region_map: np.ndarray  # (H, W) argmax class ids in 1..C

    @property
    def empty(self) -> np.ndarray:
        return self.counts == 0


def _edge_tol(lo: float, hi: float) -> float:
    return 1e-9 * max(1.0, abs(lo), abs(hi))


def _check_pred(pred) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim != 3:
        raise ValueError(f"prediction must be (H, W, C), got shape {pred.shape}")
    return pred


def _check_aligned(pred, gt=None, features=None, rasters=None):
    h, w, _ = pred.shape
    if gt is not None and np.asarray(gt).shape != (h, w):
        raise ValueError(
            f"ground-truth mask shape {np.asarray(gt).shape} does not match prediction {(h, w)}"
        )
    if features is not None:
        f = np.asarray(features)
        if f.ndim != 3 or f.shape[:2] != (h, w):
            raise ValueError(
                f"feature map shape {f.shape} does not match prediction {(h, w)}"
            )
    for name, grid in (rasters or {}).items():
        if np.asarray(grid).shape != (h, w):
            raise ValueError(
                f"raster {name!r} shape {np.asarray(grid).shape} does not match prediction {(h, w)}"
            )


def seg_loss(pred, gt, alpha: float = 1.0, dice_as_loss: bool = True):
    """Cross-entropy + alpha * (1 - soft Dice) over labeled pixels.

    Returns (value, gradient w.r.t. pred).  Dice averages the per-class soft
    overlap over classes present in the ground truth; ``dice_as_loss=False``
    flips the Dice term to a reward (-coefficient), which shifts the value by
    a constant but leaves gradients unchanged.
    """
    pred = _check_pred(pred)
    gt = np.asarray(gt)
    _check_aligned(pred, gt=gt)
    h, w, c = pred.shape
    if gt.max(initial=0) > c:
        raise ValueError(f"ground truth contains class {int(gt.max())} > C={c}")

    grad = np.zeros_like(pred)
    labeled = gt > 0
    n_lab = int(labeled.sum())
    if n_lab == 0:
        return 0.0, grad

    rows, cols = np.nonzero(labeled)
    chan = gt[rows, cols] - 1
    p_true = pred[rows, cols, chan]
    clipped = np.clip(p_true, CLAMP_EPS, 1.0 - CLAMP_EPS)
    ce = float(-np.log(clipped).mean())
    interior = (p_true > CLAMP_EPS) & (p_true < 1.0 - CLAMP_EPS)
    g_true = np.where(interior, -1.0 / (n_lab * clipped), 0.0)
    np.add.at(grad, (rows, cols, chan), g_true)

    dice_value = 0.0
    if alpha != 0.0:
        present = np.unique(gt[labeled])
        n_present = len(present)
        dice_sum = 0.0
        dice_grad = np.zeros_like(pred)
        for cid in present:
            ch = cid - 1
            g_mask = gt == cid
            inter = float(pred[g_mask, ch].sum())
            p_sum = float(pred[labeled, ch].sum())
            g_sum = float(g_mask.sum())
            union = p_sum + g_sum
            dice_c = 2.0 * inter / union
            dice_sum += dice_c
            coeff = 2.0 / (union * union)
            d_dice = np.where(g_mask, coeff * (union - inter), 0.0)
            d_dice = np.where(labeled & ~g_mask, -coeff * inter, d_dice)
            dice_grad[:, :, ch] -= d_dice / n_present
        mean_dice = dice_sum / n_present
        if dice_as_loss:
            dice_value = 1.0 - mean_dice
            grad += alpha * dice_grad
        else:
            dice_value = -mean_dice
            grad += alpha * dice_grad
    return ce + alpha * dice_value, grad


def region_stats(pred, features, rasters=None) -> RegionStats:
    """Hard argmax regions with per-class feature and raster means.

    Ties in the argmax break toward the lower class id.  Empty classes get
    zero mean rows and are flagged via ``RegionStats.empty``.
    """
    pred = _check_pred(pred)
    features = np.asarray(features, dtype=np.float64)
    rasters = rasters or {}
    _check_aligned(pred, features=features, rasters=rasters)
    h, w, c = pred.shape
    region = np.argmax(pred, axis=2).astype(np.int32) + 1

    flat = region.ravel() - 1
    counts = np.bincount(flat, minlength=c).astype(np.int64)
    safe = np.maximum(counts, 1)

    d = features.shape[2]
    feat_sums = np.zeros((c, d))
    np.add.at(feat_sums, flat, features.reshape(-1, d))
    feature_means = feat_sums / safe[:, None]
    feature_means[counts == 0] = 0.0

    raster_means = {}
    for name in sorted(rasters, key=lambda m: MODALITY_INDEX.get(m, 99)):
        sums = np.bincount(flat, weights=np.asarray(rasters[name], dtype=np.float64).ravel(), minlength=c)
        means = sums / safe
        means[counts == 0] = 0.0
        raster_means[name] = means
    return RegionStats(
        counts=counts,
        feature_means=feature_means,
        raster_means=raster_means,
        region_map=region,
    )


def region_loss(stats: RegionStats, features, pred):
    """Intra-class feature variance: sum_c |R_c|^-1 sum_{i in R_c} ||F_i - mu_c||^2.

    Region assignment is frozen, and the features are a fixed input, so the
    gradient w.r.t. the prediction is identically zero (returned as such).
    """
    pred = _check_pred(pred)
    features = np.asarray(features, dtype=np.float64)
    diff = features - stats.feature_means[stats.region_map - 1]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    inv = np.zeros(len(stats.counts))
    nonempty = stats.counts > 0
    inv[nonempty] = 1.0 / stats.counts[nonempty]
    value = float((sq * inv[stats.region_map - 1]).sum())
    return value, np.zeros_like(pred)


def _hinge_sq(mean: float, lo: float, hi: float):
    """Squared interval hinge and its derivative w.r.t. the mean."""
    tol = _edge_tol(lo, hi)
    over = mean - hi
    under = lo - mean
    term = 0.0
    deriv = 0.0
    if over > tol:
        term += over * over
        deriv += 2.0 * over
    if under > tol:
        term += under * under
        deriv -= 2.0 * under
    return term, deriv


def phys_loss(stats: RegionStats, graph: PriorGraph, modalities=None):
    """Interval hinge on hard-region means, averaged over modalities.

    Returns (value, diagnostics); diagnostics carry one record per
    (nonempty class, modality) for interpretability.
    """
    if modalities is None:
        modalities = tuple(stats.raster_means)
    modalities = sorted(modalities, key=lambda m: MODALITY_INDEX[m])
    diagnostics = []
    total = 0.0
    for name in modalities:
        means = stats.raster_means[name]
        for cid in range(1, len(stats.counts) + 1):
            if stats.counts[cid - 1] == 0:
                continue
            iv = graph.interval(cid, name)
            term, _ = _hinge_sq(float(means[cid - 1]), iv.lo, iv.hi)
            total += term
            diagnostics.append(
                {
                    "class_id": cid,
                    "category": graph.entry_for_id(cid).category,
                    "modality": name,
                    "mean": float(means[cid - 1]),
                    "lo": iv.lo,
                    "hi": iv.hi,
                    "term": term,
                }
            )
    value = total / len(modalities) if modalities else 0.0
    return value, diagnostics


def phys_loss_soft(pred, rasters, graph: PriorGraph):
    """Interval hinge on probability-weighted region means, with gradient.

    Means are w_c = sum_i p_ic v_i / sum_i p_ic, making the hinge
    differentiable in the prediction; equals the hard-region hinge when the
    prediction is one-hot.  Returns (value, gradient w.r.t. pred).
    """
    pred = _check_pred(pred)
    rasters = rasters or {}
    _check_aligned(pred, rasters=rasters)
    grad = np.zeros_like(pred)
    modalities = sorted(rasters, key=lambda m: MODALITY_INDEX[m])
    if not modalities:
        return 0.0, grad
    c = pred.shape[2]
    if graph.num_classes < c:
        raise ValueError(
            f"prediction has {c} channels but the graph defines {graph.num_classes} classes"
        )
    mass = pred.sum(axis=(0, 1))  # (C,)
    total = 0.0
    for name in modalities:
        values = np.asarray(rasters[name], dtype=np.float64)
        weighted = np.einsum("ijc,ij->c", pred, values)
        for ch in range(c):
            if mass[ch] < _SOFT_MASS_FLOOR:
                continue
            mean = float(weighted[ch] / mass[ch])
            iv = graph.interval(ch + 1, name)
            term, deriv = _hinge_sq(mean, iv.lo, iv.hi)
            total += term
            if deriv != 0.0:
                grad[:, :, ch] += deriv * (values - mean) / mass[ch]
    m = len(modalities)
    return total / m, grad / m


def total_loss(pred, gt, features, rasters, graph: PriorGraph, weights: LossWeights = LossWeights()):
    """Weighted joint objective: seg + lambda1 * region + lambda2 * phys.

    The ``phys`` component (and the returned gradient) use the
    probability-weighted hinge; ``phys_argmax`` reports the hard-region value
    of the same hinge alongside per-(class, modality) diagnostics.
    Returns (total, components, gradient w.r.t. pred).
    """
    pred = _check_pred(pred)
    rasters = rasters or {}
    _check_aligned(pred, gt=gt, features=features, rasters=rasters)
    seg, grad = seg_loss(pred, gt, weights.alpha)
    stats = region_stats(pred, features, rasters)
    region, _ = region_loss(stats, features, pred)
    phys_soft, grad_phys = phys_loss_soft(pred, rasters, graph)
    phys_hard, diagnostics = phys_loss(stats, graph)
    total = seg + weights.lambda1 * region + weights.lambda2 * phys_soft
    grad = grad + weights.lambda2 * grad_phys
    components = {
        "seg": seg,
        "region": region,
        "phys": phys_soft,
        "phys_argmax": phys_hard,
        "total": total,
        "phys_terms": diagnostics,
    }
    return total, components, grad

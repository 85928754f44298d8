"""Per-case predictive-interval constructors over per-class volumes.

Two families share one output vocabulary: direct constructors (three-head
net, volume regressor) emit a VolumeInterval straight away; sampling
constructors (confidence thresholding, MC dropout, test-time augmentation)
emit SamplingStats from which a normal-quantile interval is formed.

All volumes are mL; class index 0 (background) is excluded everywhere.
Argmax ties break toward the lowest class index, so untouched/padded
voxels land in the background.
"""

from __future__ import annotations

from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from volpi import nets
from volpi.seeding import derive_seed

DEFAULT_CT_THRESHOLDS = tuple(np.linspace(0.01, 0.99, 20))


@dataclass
class VolumeInterval:
    """Per-foreground-class (lower, mean, upper) volume triple in mL."""

    lower_mL: np.ndarray
    mean_mL: np.ndarray
    upper_mL: np.ndarray
    method_id: str
    calibrated: bool = False
    order_violations: np.ndarray | None = None  # pre-sort disorder flags
    unbounded: np.ndarray | None = None

    def __post_init__(self):
        self.lower_mL = np.asarray(self.lower_mL, dtype=float)
        self.mean_mL = np.asarray(self.mean_mL, dtype=float)
        self.upper_mL = np.asarray(self.upper_mL, dtype=float)
        if self.unbounded is None:
            self.unbounded = np.zeros(self.lower_mL.shape, dtype=bool)


@dataclass
class SamplingStats:
    """Sample mean/std of per-class volumes over repeated predictions."""

    mu_mL: np.ndarray
    sigma_mL: np.ndarray
    n_samples: int
    method_id: str = ""

    def __post_init__(self):
        self.mu_mL = np.asarray(self.mu_mL, dtype=float)
        self.sigma_mL = np.asarray(self.sigma_mL, dtype=float)
        if self.n_samples < 2:
            raise ValueError("sampling statistics need n_samples >= 2")
        if (self.sigma_mL < 0).any():
            raise ValueError("sigma_mL must be nonnegative")


@dataclass
class PIRecord:
    """One (case, method) outcome: interval, truth and cost accounting."""

    case_id: str
    interval: VolumeInterval
    truth_mL: np.ndarray
    wall_time_s: float
    forward_passes: int
    prerequisite_passes: int = 0  # e.g. the segmentation pass feeding the regressor
    dsc: np.ndarray | None = None  # per-class Dice of the method's segmentation

    def __post_init__(self):
        if self.forward_passes < 1:
            raise ValueError("forward_passes must be >= 1")
        self.truth_mL = np.asarray(self.truth_mL, dtype=float)


def _finalize_bounds(lower, mean, upper):
    """Order (expansion only) then clamp at zero; volumes are physical."""
    lower = np.minimum(lower, mean)
    upper = np.maximum(upper, mean)
    return (
        np.maximum(lower, 0.0),
        np.maximum(mean, 0.0),
        np.maximum(upper, 0.0),
    )


def mask_volumes(soft_mask: np.ndarray, spacing_mm) -> np.ndarray:
    """Hard-assign voxels by argmax and count per-class volumes in mL."""
    probs = np.asarray(soft_mask)
    n_classes = probs.shape[0]
    labels = probs.argmax(axis=0)
    counts = np.bincount(labels.ravel(), minlength=n_classes)
    voxel_mm3 = float(np.prod(np.asarray(spacing_mm, dtype=float)))
    return counts[1:].astype(float) * voxel_mm3 / 1000.0


def triad_intervals(masks: nets.SoftMaskSet, spacing_mm) -> VolumeInterval:
    """Volumes of the lower/mean/upper head masks, sorted per class.

    A class whose triple is not already ordered lower <= mean <= upper is
    flagged as a head-order violation before sorting.
    """
    if masks.probs.shape[0] != 3:
        raise ValueError(f"need 3 heads, got {masks.probs.shape[0]}")
    lower = mask_volumes(masks.probs[0], spacing_mm)
    mean = mask_volumes(masks.probs[1], spacing_mm)
    upper = mask_volumes(masks.probs[2], spacing_mm)
    violations = ~((lower <= mean) & (mean <= upper))
    stacked = np.sort(np.stack([lower, mean, upper]), axis=0)
    lo, mid, hi = _finalize_bounds(stacked[0], stacked[1], stacked[2])
    return VolumeInterval(lo, mid, hi, method_id="triad", order_violations=violations)


def threshold_volumes(soft_mask: np.ndarray, thresholds, spacing_mm) -> np.ndarray:
    """Per-class volumes when binarizing each class's own probability map
    at each threshold; shape [n_thresholds, N-1], non-increasing down rows."""
    probs = np.asarray(soft_mask)
    thresholds = np.asarray(thresholds, dtype=float)
    voxel_mm3 = float(np.prod(np.asarray(spacing_mm, dtype=float)))
    flat = probs.reshape(probs.shape[0], -1)  # [N, V]
    counts = (flat[None, 1:, :] >= thresholds[:, None, None]).sum(axis=2)
    return counts.astype(float) * voxel_mm3 / 1000.0


def ct_stats(soft_mask: np.ndarray, thresholds, spacing_mm) -> SamplingStats:
    """Confidence thresholding: volume distribution over a threshold sweep.

    ``soft_mask`` is a single head's [N, D, H, W] probabilities, already
    temperature-scaled by the caller.
    """
    thresholds = np.asarray(thresholds, dtype=float)
    if thresholds.size < 2:
        raise ValueError("need at least 2 thresholds")
    if (np.diff(thresholds) <= 0).any():
        raise ValueError("thresholds must be strictly increasing")
    if thresholds[0] <= 0 or thresholds[-1] >= 1:
        raise ValueError("thresholds must lie strictly inside (0, 1)")
    vols = threshold_volumes(soft_mask, thresholds, spacing_mm)
    return SamplingStats(
        mu_mL=vols.mean(axis=0),
        sigma_mL=vols.std(axis=0, ddof=1),
        n_samples=int(thresholds.size),
        method_id="ct",
    )


def mc_stats(net, intensities, T: int, seed: int, spacing_mm) -> SamplingStats:
    """Volume distribution over T dropout-active passes."""
    if T < 2:
        raise ValueError("T must be >= 2")
    passes = nets.forward_mc(net, intensities, T, seed)
    vols = np.stack([mask_volumes(p.probs[0], spacing_mm) for p in passes])
    return SamplingStats(
        mu_mL=vols.mean(axis=0),
        sigma_mL=vols.std(axis=0, ddof=1),
        n_samples=T,
        method_id="mc",
    )


@dataclass(frozen=True)
class Augmentation:
    """One randomized input transform with an exact spatial inverse."""

    flips: tuple[bool, bool, bool] = (False, False, False)
    rot_k: int = 0  # quarter turns in the (H, W) plane
    shift_vox: tuple[int, int, int] = (0, 0, 0)
    intensity_scale: float = 1.0
    intensity_shift: float = 0.0  # fraction of the input intensity range

    @classmethod
    def identity(cls) -> "Augmentation":
        return cls()

    def _spatial(self, a: np.ndarray, inverse: bool) -> np.ndarray:
        # a: [K, D, H, W]; forward order flip -> rotate -> shift
        def do_flip(arr):
            axes = [i + 1 for i, f in enumerate(self.flips) if f]
            return np.flip(arr, axis=axes) if axes else arr

        def do_rot(arr, k):
            return np.rot90(arr, k, axes=(2, 3)) if k % 4 else arr

        def do_shift(arr, shifts):
            if not any(shifts):
                return arr
            out = np.zeros_like(arr)
            src = [slice(None)]
            dst = [slice(None)]
            for s, n in zip(shifts, arr.shape[1:]):
                if s >= 0:
                    src.append(slice(0, n - s))
                    dst.append(slice(s, n))
                else:
                    src.append(slice(-s, n))
                    dst.append(slice(0, n + s))
            out[tuple(dst)] = arr[tuple(src)]
            return out

        if inverse:
            a = do_shift(a, tuple(-s for s in self.shift_vox))
            a = do_rot(a, -self.rot_k)
            return do_flip(a)
        a = do_flip(a)
        a = do_rot(a, self.rot_k)
        return do_shift(a, self.shift_vox)

    def apply_to_image(self, x: np.ndarray) -> np.ndarray:
        """Transform a [C, D, H, W] intensity grid (spatial + intensity)."""
        out = self._spatial(np.asarray(x), inverse=False).astype(np.float32, copy=True)
        if self.intensity_scale != 1.0 or self.intensity_shift != 0.0:
            span = float(x.max() - x.min())
            out = out * self.intensity_scale + self.intensity_shift * span
        return np.ascontiguousarray(out)

    def invert_probs(self, probs: np.ndarray) -> np.ndarray:
        """Map a predicted [N, D, H, W] probability grid back to the
        original frame; voxels shifted in from outside become all-zero and
        therefore count as background under argmax."""
        return np.ascontiguousarray(self._spatial(np.asarray(probs), inverse=True))


def sample_augmentations(n_aug: int, grid_shape, seed: int) -> list[Augmentation]:
    """Randomized flips, quarter turns, <=10% translations, intensity jitter."""
    rng = np.random.default_rng(derive_seed("tta", seed))
    d, h, w = grid_shape
    ks = (0, 1, 2, 3) if h == w else (0, 2)
    max_shift = [max(1, int(0.1 * n)) for n in (d, h, w)]
    augs = []
    for _ in range(n_aug):
        augs.append(
            Augmentation(
                flips=tuple(bool(rng.random() < 0.5) for _ in range(3)),
                rot_k=int(rng.choice(ks)),
                shift_vox=tuple(int(rng.integers(-m, m + 1)) for m in max_shift),
                intensity_scale=float(rng.uniform(0.9, 1.1)),
                intensity_shift=float(rng.uniform(-0.05, 0.05)),
            )
        )
    return augs


TTA_CHUNK = 8


def _predict_prob_chunks(net, images: list[np.ndarray]) -> list[np.ndarray]:
    """Single-head class probabilities for each image; batched for real nets,
    sequential for callable stand-ins (oracles in tests)."""
    if callable(net) and not isinstance(net, nets.SegmentationNet):
        return [np.asarray(net(img)) for img in images]
    out: list[np.ndarray] = []
    for start in range(0, len(images), TTA_CHUNK):
        stack = np.stack(images[start : start + TTA_CHUNK])
        logits = nets.forward_batch(net, stack)  # [B, n_heads, N, ...]
        probs = logits.softmax(dim=2).numpy().astype(np.float32)
        out.extend(probs[b, 0] for b in range(len(stack)))
    return out


def tta_stats(
    net,
    intensities,
    n_aug: int,
    seed: int,
    spacing_mm,
    augmentations: list[Augmentation] | None = None,
) -> SamplingStats:
    """Volume distribution over augmented inputs, predictions inverse-mapped
    to the original frame before counting.

    ``net`` may be a SegmentationNet or any callable mapping a [C, D, H, W]
    image to [N, D, H, W] probabilities.
    """
    x = np.asarray(intensities)
    if augmentations is None:
        augmentations = sample_augmentations(n_aug, x.shape[1:], seed)
    if len(augmentations) < 2:
        raise ValueError("need at least 2 augmentations")
    images = [aug.apply_to_image(x) for aug in augmentations]
    prob_list = _predict_prob_chunks(net, images)
    vols = np.stack(
        [
            mask_volumes(aug.invert_probs(probs), spacing_mm)
            for aug, probs in zip(augmentations, prob_list)
        ]
    )
    return SamplingStats(
        mu_mL=vols.mean(axis=0),
        sigma_mL=vols.std(axis=0, ddof=1),
        n_samples=len(augmentations),
        method_id="tta",
    )


def regcnn_intervals(regressor, intensities, segmentation_one_hot) -> VolumeInterval:
    """Quantile-regressor triple per class, sorted and clamped at zero."""
    preds = nets.regress(regressor, intensities, segmentation_one_hot)
    tri = preds.reshape(-1, 3)  # per class: (q_lo, q_med, q_hi)
    violations = ~((tri[:, 0] <= tri[:, 1]) & (tri[:, 1] <= tri[:, 2]))
    tri = np.sort(tri, axis=1)
    lo, mid, hi = _finalize_bounds(tri[:, 0], tri[:, 1], tri[:, 2])
    return VolumeInterval(lo, mid, hi, method_id="regcnn", order_violations=violations)


def interval_from_stats(stats: SamplingStats, alpha: float) -> VolumeInterval:
    """Normal-quantile interval mu +/- z*sigma (z = 1.65 at alpha = 0.1,
    matching the conventional rounding; exact quantile otherwise)."""
    if abs(alpha - 0.1) < 1e-12:
        z = 1.65
    else:
        z = NormalDist().inv_cdf(1.0 - alpha / 2.0)
    lo, mid, hi = _finalize_bounds(
        stats.mu_mL - z * stats.sigma_mL, stats.mu_mL, stats.mu_mL + z * stats.sigma_mL
    )
    return VolumeInterval(lo, mid, hi, method_id=stats.method_id or "stats")

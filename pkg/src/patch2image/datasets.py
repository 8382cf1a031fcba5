"""Cohort splitting, patch sampling, augmentation, batch weighting.

Conventions that matter for reproducibility:

* Splits are by patient, never by image, stratified on patient cancer
  status with largest-remainder rounding, so every run with the same seed
  produces the same cohort down to the membership lists.
* Patch sampling draws from a substream keyed by image id, so adding or
  reordering images never changes the patches of the others.
* The intensity centering constant is one scalar: the mean over every
  pixel of the training split. It is computed once and reused verbatim at
  validation, test, and deployment time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DegenerateBatchError
from .graph import PATCH_CLASSES
from .phantoms import ImageRecord, load_image
from .rng import substream

SOURCE_FRACTIONS = {"train": 0.765, "val": 0.085, "test": 0.15}
TARGET_FRACTIONS = {"train": 0.7, "val": 0.3}

_LESION_TO_LABEL = {name: i for i, name in enumerate(PATCH_CLASSES)}


def birads_label(assessment: int | None):
    """Map a 1-6 assessment tag to an image label: 1,2 benign; 4,5,6
    cancer; 3 (indeterminate) yields None and the patient is excluded."""
    if assessment in (1, 2):
        return 0
    if assessment in (4, 5, 6):
        return 1
    if assessment == 3:
        return None
    raise DataError(f"assessment tag {assessment!r} outside 1-6")


def image_label(record: ImageRecord) -> int | None:
    """Whole-image cancer label. Source images are labeled from lesion
    truth; target images only ever reveal their assessment tag."""
    if record.domain == "source":
        return 1 if record.malignant else 0
    return birads_label(record.assessment)


def patient_strata(records) -> tuple[dict, list]:
    """(patient -> stratum) plus the list of excluded patients (tag 3)."""
    strata: dict[str, str] = {}
    excluded = []
    by_patient: dict[str, list[ImageRecord]] = {}
    for r in records:
        by_patient.setdefault(r.patient_id, []).append(r)
    for pid, recs in by_patient.items():
        labels = [image_label(r) for r in recs]
        if any(l is None for l in labels):
            excluded.append(pid)
        elif any(l == 1 for l in labels):
            strata[pid] = "cancer"
        elif any(r.lesion != "none" for r in recs):
            strata[pid] = "benign-finding"
        else:
            strata[pid] = "clean"
    return strata, sorted(excluded)


def _largest_remainder(n: int, fractions: dict[str, float]) -> dict[str, int]:
    ideal = {k: n * f for k, f in fractions.items()}
    counts = {k: math.floor(v) for k, v in ideal.items()}
    short = n - sum(counts.values())
    by_rem = sorted(fractions, key=lambda k: ideal[k] - counts[k], reverse=True)
    for k in by_rem[:short]:
        counts[k] += 1
    return counts


def split_patients(records, fractions: dict[str, float], seed: int):
    """Stratified patient split. Returns {split: [ImageRecord...]} plus the
    excluded patient ids; record order inside a split follows the manifest."""
    total = sum(fractions.values())
    if abs(total - 1.0) > 1e-9:
        raise ConfigError(f"split fractions sum to {total}, expected 1")
    strata, excluded = patient_strata(records)
    assignment: dict[str, str] = {}
    for stratum in sorted(set(strata.values())):
        members = sorted(pid for pid, s in strata.items() if s == stratum)
        order = substream(seed, f"split/{stratum}").permutation(len(members))
        shuffled = [members[i] for i in order]
        counts = _largest_remainder(len(members), fractions)
        at = 0
        for split in fractions:  # dict order is the declared split order
            for pid in shuffled[at:at + counts[split]]:
                assignment[pid] = split
            at += counts[split]
    out = {split: [] for split in fractions}
    for r in records:
        split = assignment.get(r.patient_id)
        if split is not None:
            out[split].append(r)
    return out, excluded


def compute_pixel_mean(root, records) -> float:
    """Mean over every pixel of every listed image, as one float64."""
    if not records:
        raise DataError("cannot take a pixel mean over zero images")
    total, count = 0.0, 0
    for r in records:
        img = load_image(root, r)
        total += float(img.sum())
        count += img.size
    return total / count


# -- patch extraction ---------------------------------------------------------

@dataclass
class PatchSet:
    """Sampled patches: raw [0,1] intensities, one label per patch, and
    enough provenance to audit any row back to its pixel origin."""

    x: np.ndarray            # (N, 1, P, P) float32
    y: np.ndarray            # (N,) int64, indexes PATCH_CLASSES
    image_ids: np.ndarray    # (N,) unicode
    offsets: np.ndarray      # (N, 2) top-left (row, col)

    def __len__(self):
        return self.x.shape[0]

    def class_counts(self) -> dict[str, int]:
        return {name: int((self.y == i).sum()) for i, name in enumerate(PATCH_CLASSES)}

    def save(self, path) -> None:
        np.savez(Path(path), x=self.x, y=self.y, image_ids=self.image_ids,
                 offsets=self.offsets)

    @classmethod
    def load(cls, path) -> "PatchSet":
        path = Path(path)
        if not path.exists():
            raise DataError(f"no patch file at {path}")
        with np.load(path, allow_pickle=False) as z:
            return cls(x=z["x"], y=z["y"], image_ids=z["image_ids"], offsets=z["offsets"])


def _overlap_ratio(top, left, patch, bbox) -> float:
    r0, c0, r1, c1 = bbox
    inter_h = min(top + patch, r1) - max(top, r0)
    inter_w = min(left + patch, c1) - max(left, c0)
    if inter_h <= 0 or inter_w <= 0:
        return 0.0
    inter = inter_h * inter_w
    return inter / min(patch * patch, (r1 - r0) * (c1 - c0))


def sample_patches(root, records, *, per_roi: int = 10, patch_size: int = 64,
                   min_overlap: float = 0.9, jitter: int = 8, seed: int = 0,
                   max_tries: int = 200) -> PatchSet:
    """Lesion patches plus matched background patches from lesion images.

    Per region of interest: per_roi positions jittered around the lesion
    centre, accepted when patch/box overlap (relative to the smaller of
    the two) reaches min_overlap, and per_roi background positions from
    the same image that miss the box entirely. Rejection sampling is
    bounded; running out of tries is an error, not a silent shortfall.
    """
    xs, ys, ids, offs = [], [], [], []
    for rec in records:
        if rec.lesion == "none":
            continue
        if rec.bbox is None:
            raise DataError(f"{rec.image_id}: lesion {rec.lesion} but no box")
        img = load_image(root, rec)
        size = img.shape[0]
        if size < patch_size:
            raise DataError(f"{rec.image_id}: image {size} smaller than patch {patch_size}")
        rng = substream(seed, f"patch/{rec.image_id}")
        r0, c0, r1, c1 = rec.bbox
        ideal_top = (r0 + r1) // 2 - patch_size // 2
        ideal_left = (c0 + c1) // 2 - patch_size // 2
        hi = size - patch_size
        label = _LESION_TO_LABEL[rec.lesion]

        for _ in range(per_roi):
            for attempt in range(max_tries):
                top = int(np.clip(ideal_top + rng.integers(-jitter, jitter + 1), 0, hi))
                left = int(np.clip(ideal_left + rng.integers(-jitter, jitter + 1), 0, hi))
                if _overlap_ratio(top, left, patch_size, rec.bbox) >= min_overlap:
                    break
            else:
                raise DataError(
                    f"{rec.image_id}: no lesion patch met overlap {min_overlap} "
                    f"in {max_tries} tries"
                )
            xs.append(img[top:top + patch_size, left:left + patch_size])
            ys.append(label)
            ids.append(rec.image_id)
            offs.append((top, left))

        for _ in range(per_roi):
            for attempt in range(max_tries):
                top = int(rng.integers(0, hi + 1))
                left = int(rng.integers(0, hi + 1))
                if _overlap_ratio(top, left, patch_size, rec.bbox) == 0.0:
                    break
            else:
                raise DataError(
                    f"{rec.image_id}: no lesion-free patch found in {max_tries} tries"
                )
            xs.append(img[top:top + patch_size, left:left + patch_size])
            ys.append(_LESION_TO_LABEL["background"])
            ids.append(rec.image_id)
            offs.append((top, left))

    if not xs:
        raise DataError("no lesion-bearing images in the given records")
    x = np.asarray(np.stack(xs)[:, None, :, :], dtype=np.float32)
    return PatchSet(x=x, y=np.asarray(ys, dtype=np.int64),
                    image_ids=np.asarray(ids), offsets=np.asarray(offs, dtype=np.int64))


# -- whole images --------------------------------------------------------------

@dataclass
class ImageSet:
    x: np.ndarray        # (N, 1, H, W) float32, raw [0,1]
    y: np.ndarray        # (N,) int64 cancer labels
    ids: np.ndarray      # (N,) unicode
    patients: np.ndarray # (N,) unicode

    def __len__(self):
        return self.x.shape[0]


def load_image_set(root, records) -> ImageSet:
    xs, ys, ids, pats = [], [], [], []
    for r in records:
        label = image_label(r)
        if label is None:
            continue  # indeterminate tag; excluded cohorts never get here
        xs.append(load_image(root, r).astype(np.float32))
        ys.append(label)
        ids.append(r.image_id)
        pats.append(r.patient_id)
    if not xs:
        raise DataError("no labeled images to load")
    return ImageSet(x=np.stack(xs)[:, None], y=np.asarray(ys, dtype=np.int64),
                    ids=np.asarray(ids), patients=np.asarray(pats))


# -- training-time transforms ---------------------------------------------------

def shift2d(patch: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Integer translate with zero fill; patch is (C, H, W)."""
    out = np.zeros_like(patch)
    h, w = patch.shape[1:]
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    out[:, ys, xs] = patch[:, ys_src, xs_src]
    return out


def augment_patches(x: np.ndarray, sample_indices, *, seed: int, epoch: int,
                    max_shift: int = 8) -> np.ndarray:
    """Per-sample flips (half the time each axis) and a small zero-filled
    translation. Draws are keyed by (seed, epoch, dataset index): sample i
    gets the same treatment no matter how the batch was assembled."""
    from .rng import per_index

    out = np.empty_like(x)
    for row, idx in enumerate(sample_indices):
        rng = per_index(seed, f"augment/{epoch}", int(idx))
        p = x[row]
        if rng.random() < 0.5:
            p = p[:, :, ::-1]
        if rng.random() < 0.5:
            p = p[:, ::-1, :]
        dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
        out[row] = shift2d(np.ascontiguousarray(p), int(dy), int(dx))
    return out


def balanced_batch_weights(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-sample weights that level class influence inside one batch:
    w = B / (classes_present * class_count). Weights sum to the batch size."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DegenerateBatchError("empty batch")
    counts = np.bincount(labels, minlength=num_classes)
    present = int((counts > 0).sum())
    w = labels.size / (present * counts[labels])
    return w.astype(np.float64)


def batch_indices(n: int, batch_size: int, *, seed: int, epoch: int):
    """Deterministic shuffled batches; a trailing singleton is folded into
    the previous batch (batch statistics need at least two samples)."""
    if batch_size < 2:
        raise ConfigError("batch size must be >= 2")
    perm = substream(seed, f"batches/{epoch}").permutation(n)
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches

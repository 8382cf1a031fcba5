"""Domain transfer: how much target-domain data buys how much AUC.

The subsets are nested by construction: patients are shuffled once per
stratum and every fraction takes a prefix, so the 20% cohort contains the
10% cohort and so on up to the full set. Each point fine-tunes a fresh
copy of the source-trained network on its subset; the zero-shot row (no
fine-tuning at all) is the baseline every point is read against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .checkpoint import load_graph
from .datasets import ImageSet
from .errors import ConfigError, DataError
from .rng import substream
from .train import IMAGE_SCHEDULE, image_auc, train_whole_image


def nested_patient_subsets(patients, labels, fractions, seed: int) -> dict[float, list]:
    """fraction -> patient list, nested and stratified by patient label.

    patients: unique ids; labels: one 0/1 per patient. Every nonempty
    stratum keeps at least one patient in the smallest subset.
    """
    fractions = sorted(set(float(f) for f in fractions))
    if not fractions or fractions[0] <= 0 or fractions[-1] > 1:
        raise ConfigError(f"fractions must lie in (0, 1], got {fractions}")
    strata: dict[int, list] = {0: [], 1: []}
    for pid, lab in zip(patients, labels):
        strata[int(lab)].append(pid)
    shuffled = {}
    for lab, members in strata.items():
        members = sorted(members)
        order = substream(seed, f"subset/{lab}").permutation(len(members))
        shuffled[lab] = [members[i] for i in order]
    out = {}
    for f in fractions:
        chosen = []
        for lab, members in shuffled.items():
            if not members:
                continue
            take = max(1, int(round(f * len(members))))
            chosen.extend(members[:take])
        out[f] = sorted(chosen)
    return out


def _patient_labels(images: ImageSet):
    by_pid: dict[str, int] = {}
    for pid, y in zip(images.patients, images.y):
        by_pid[pid] = max(by_pid.get(pid, 0), int(y))
    pids = sorted(by_pid)
    return pids, [by_pid[p] for p in pids]


def _subset_images(images: ImageSet, keep) -> ImageSet:
    keep = set(keep)
    mask = np.array([p in keep for p in images.patients])
    return ImageSet(x=images.x[mask], y=images.y[mask],
                    ids=images.ids[mask], patients=images.patients[mask])


@dataclass
class TransferPoint:
    fraction: float       # 0.0 marks the zero-shot baseline
    n_patients: int
    n_images: int
    auc: float


def transfer_curve(source_checkpoint, target_train: ImageSet, target_val: ImageSet,
                   *, fractions=(0.1, 0.2, 0.4, 0.7, 1.0), schedule=None,
                   pixel_mean: float, seed: int = 0, batch_size: int = 2):
    """Fine-tune on growing target cohorts; returns (points, subsets).

    Points come back ordered: zero-shot first, then ascending fraction.
    pixel_mean is the target-domain training mean, applied unchanged to
    every subset and to the baseline so scores stay comparable.
    """
    if len(target_train) == 0 or len(target_val) == 0:
        raise DataError("transfer needs nonempty target train and val sets")
    schedule = IMAGE_SCHEDULE if schedule is None else schedule
    pids, labels = _patient_labels(target_train)
    subsets = nested_patient_subsets(pids, labels, fractions, seed)

    base_net, _ = load_graph(source_checkpoint)
    points = [TransferPoint(0.0, 0, 0, image_auc(base_net, target_val, pixel_mean,
                                                 batch_size=batch_size))]
    for f in sorted(subsets):
        cohort = _subset_images(target_train, subsets[f])
        net, _ = load_graph(source_checkpoint)  # fresh copy per point
        train_whole_image(net, cohort, target_val, pixel_mean=pixel_mean,
                          schedule=schedule, seed=seed, batch_size=batch_size)
        points.append(TransferPoint(
            float(f), len(subsets[f]), len(cohort),
            image_auc(net, target_val, pixel_mean, batch_size=batch_size)))
    return points, subsets

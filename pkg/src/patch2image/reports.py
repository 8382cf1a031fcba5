"""CSV and JSON report writers.

Every float is written with repr() so a rerun under the same seed produces
byte-identical files; wall-clock seconds never appear in these artifacts.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .metrics import FLIP_PASSES, RocResult, ensemble_average, roc_auc


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_rows(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def predictions_csv(path, ids, patients, labels, scores) -> None:
    """One row per image: id, patient, label, cancer score."""
    rows = zip(ids, patients, (int(v) for v in labels),
               (float(v) for v in scores))
    write_rows(path, ["image_id", "patient_id", "label", "score"], rows)


def augmented_csv(path, ids, labels, per_pass: dict, mean_scores) -> None:
    """Per-image mirror-pass scores next to their average.

    per_pass maps pass name -> (N, C) probabilities; the cancer column is
    what lands in the file. Column order is the fixed pass order so files
    diff cleanly across runs.
    """
    names = ["+".join(axes) if axes else "identity" for axes in FLIP_PASSES]
    missing = [n for n in names if n not in per_pass]
    if missing:
        raise ValueError(f"per_pass missing {missing}")
    cols = [np.asarray(per_pass[n])[:, 1] for n in names]
    rows = []
    for i, (img, lab) in enumerate(zip(ids, labels)):
        rows.append([img, int(lab), *(float(c[i]) for c in cols),
                     float(mean_scores[i])])
    write_rows(path, ["image_id", "label", *names, "mean"], rows)


def roc_csv(path, roc: RocResult) -> None:
    rows = zip((float(t) for t in roc.thresholds),
               (float(v) for v in roc.fpr), (float(v) for v in roc.tpr))
    write_rows(path, ["threshold", "fpr", "tpr"], rows)


def ensemble_csv(path, labels, member_names, single_probs, augmented_probs) -> None:
    """Model-level report: one single-pass row and one flip-averaged row
    per member, then the ensemble (mean of the members' flip-averaged
    probabilities). AUC is computed on the cancer column of each."""
    if not (len(member_names) == len(single_probs) == len(augmented_probs)):
        raise ValueError("one name, single, and augmented array per member")
    labels = np.asarray(labels)
    rows = []
    for name, single, augmented in zip(member_names, single_probs, augmented_probs):
        rows.append([name, "single", roc_auc(np.asarray(single)[:, 1], labels).auc])
        rows.append([name, "augmented",
                     roc_auc(np.asarray(augmented)[:, 1], labels).auc])
    combined = ensemble_average(augmented_probs)
    rows.append(["ensemble", "averaged", roc_auc(combined[:, 1], labels).auc])
    write_rows(path, ["model", "prediction", "auc"], rows)


def transfer_csv(path, points) -> None:
    rows = ((p.fraction, p.n_patients, p.n_images, p.auc) for p in points)
    write_rows(path, ["fraction", "n_patients", "n_images", "auc"], rows)


def summary_json(path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")

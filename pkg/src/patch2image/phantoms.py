"""Synthetic mammogram-like phantoms with labeled lesions.

Each patient contributes two 256x256 16-bit grayscale views (CC and MLO)
of textured background; lesion-bearing patients get one region of
interest per view, drawn from four appearance classes:

* mass-benign      one smooth round blob with a soft edge
* mass-malignant   a brighter blob with an irregular, sharper outline
* calc-benign      a few ring-shaped rim calcifications with darker cores
* calc-malignant   many fine bright dots packed into a tight cluster

Two domains share the lesion models but differ in acquisition character:
the target domain uses a different background spectrum and passes the
final image through a strictly monotone intensity remap (a gamma curve),
the kind of shift a detector change produces. Target patients also carry
a 1-6 assessment tag in place of ground truth; labels for that domain are
derived from the tag downstream, never from the lesion bookkeeping here.

Every random draw comes from named substreams of one seed, keyed by image
index, so any image can be regenerated in isolation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .rng import per_index, substream

IMAGE_SIZE = 256
LESION_KINDS = ("mass-benign", "mass-malignant", "calc-benign", "calc-malignant")
VIEWS = ("CC", "MLO")
_MARGIN = 44  # lesion centres stay this far from the border: a patch always fits


@dataclass
class ImageRecord:
    image_id: str
    patient_id: str
    view: str
    domain: str
    lesion: str            # one of LESION_KINDS or "none"
    bbox: tuple | None     # (row0, col0, row1, col1) half-open, or None
    assessment: int | None # 1..6 tag, target domain only
    path: str

    @property
    def malignant(self) -> bool:
        return self.lesion.endswith("malignant")


@dataclass
class PhantomSpec:
    domain: str                 # 'source' | 'target'
    n_patients: int
    malignant_frac: float = 0.25
    benign_frac: float = 0.25
    seed: int = 0
    image_size: int = IMAGE_SIZE

    def __post_init__(self):
        if self.domain not in ("source", "target"):
            raise ConfigError(f"domain must be 'source' or 'target', got {self.domain!r}")
        if self.malignant_frac + self.benign_frac > 1.0 + 1e-9:
            raise ConfigError("lesion fractions exceed 1")
        if self.n_patients < 1:
            raise ConfigError("need at least one patient")


def _fft_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Circular gaussian blur; wraparound is harmless for noise textures."""
    n = img.shape[0]
    freq = np.fft.fftfreq(n)
    gauss = np.exp(-2.0 * (np.pi * sigma) ** 2 * freq ** 2)
    ker = np.outer(gauss, gauss)
    return np.fft.ifft2(np.fft.fft2(img) * ker).real


def _background(rng: np.random.Generator, size: int, domain: str, view: str) -> np.ndarray:
    if domain == "source":
        sigma, amp, base = 6.0, 0.085, 0.38
    else:
        sigma, amp, base = 3.0, 0.105, 0.33
    noise = _fft_blur(rng.standard_normal((size, size)), sigma)
    noise = noise / (noise.std() + 1e-12)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1.0)
    # broad illumination falloff; the two views are lit from different corners
    if view == "CC":
        grad = 0.10 * (1.0 - 0.5 * yy - 0.5 * xx)
    else:
        grad = 0.10 * (1.0 - 0.5 * yy - 0.5 * (1.0 - xx))
    fine = 0.012 * rng.standard_normal((size, size))
    return base + amp * noise + grad + fine


def _soft_disc(size, cy, cx, radius_fn, edge):
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    dist = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)
    return 1.0 / (1.0 + np.exp((dist - radius_fn(theta)) / edge))


def _paint_mass(img, rng, malignant: bool):
    size = img.shape[0]
    cy, cx = rng.integers(_MARGIN, size - _MARGIN, 2)
    if malignant:
        r = rng.uniform(14, 19)
        harmonics = rng.integers(5, 9)
        phase = rng.uniform(0, 2 * np.pi)
        wobble = rng.uniform(0.18, 0.30)
        spike = rng.uniform(0.06, 0.14)
        k2 = harmonics + rng.integers(3, 6)
        phase2 = rng.uniform(0, 2 * np.pi)

        def radius_fn(theta):
            return r * (1.0 + wobble * np.sin(harmonics * theta + phase)
                        + spike * np.clip(np.sin(k2 * theta + phase2), 0.6, 1.0) - spike * 0.6)

        contrast = rng.uniform(0.65, 0.85)
        blob = _soft_disc(size, cy, cx, radius_fn, edge=1.4)
        extent = r * (1.0 + wobble + spike * 0.4) + 3
    else:
        r = rng.uniform(12, 18)
        contrast = rng.uniform(0.26, 0.34)
        blob = _soft_disc(size, cy, cx, lambda theta: np.full_like(theta, r), edge=2.6)
        extent = r + 5
    img += contrast * blob
    return _bbox(cy, cx, extent, size)


def _paint_calc(img, rng, malignant: bool):
    """Malignant: many fine bright specks in a tight cluster. Benign: a few
    rim calcifications, bright rings around cores no brighter than their
    surroundings; the hollow profile is what separates them from every
    filled-blob class."""
    size = img.shape[0]
    cy, cx = rng.integers(_MARGIN, size - _MARGIN, 2)
    yy, xx = np.mgrid[0:size, 0:size]
    extent = 0.0
    if malignant:
        n_marks = rng.integers(20, 34)
        spread = rng.uniform(6, 10)
        contrast = rng.uniform(0.60, 0.85)
        for _ in range(n_marks):
            ang = rng.uniform(0, 2 * np.pi)
            rad = spread * np.sqrt(rng.uniform(0, 1))
            dy, dx = rad * np.sin(ang), rad * np.cos(ang)
            rr = rng.uniform(0.9, 1.5)
            d2 = (yy - (cy + dy)) ** 2 + (xx - (cx + dx)) ** 2
            img += contrast * np.exp(-d2 / (2.0 * rr * rr))
            extent = max(extent, rad + 3 * rr)
    else:
        n_marks = rng.integers(3, 6)
        spread = rng.uniform(7, 12)
        contrast = rng.uniform(0.45, 0.60)
        for _ in range(n_marks):
            ang = rng.uniform(0, 2 * np.pi)
            rad = spread * np.sqrt(rng.uniform(0, 1))
            dy, dx = rad * np.sin(ang), rad * np.cos(ang)
            ring_r = rng.uniform(6.0, 10.0)
            shell = rng.uniform(1.3, 2.2)
            dist = np.hypot(yy - (cy + dy), xx - (cx + dx))
            img += contrast * np.exp(-((dist - ring_r) ** 2) / (2.0 * shell * shell))
            extent = max(extent, rad + ring_r + 3 * shell)
    return _bbox(cy, cx, extent + 1, size)


def _bbox(cy, cx, extent, size):
    r0 = max(int(np.floor(cy - extent)), 0)
    c0 = max(int(np.floor(cx - extent)), 0)
    r1 = min(int(np.ceil(cy + extent)) + 1, size)
    c1 = min(int(np.ceil(cx + extent)) + 1, size)
    return (r0, c0, r1, c1)


def _monotone_remap(img: np.ndarray) -> np.ndarray:
    """Target-domain intensity transfer curve: strictly increasing on [0,1]."""
    return np.power(img, 0.62)


_PAINTERS = {
    "mass-benign": lambda img, rng: _paint_mass(img, rng, False),
    "mass-malignant": lambda img, rng: _paint_mass(img, rng, True),
    "calc-benign": lambda img, rng: _paint_calc(img, rng, False),
    "calc-malignant": lambda img, rng: _paint_calc(img, rng, True),
}


def render_image(spec: PhantomSpec, index: int, view: str, lesion: str):
    """One phantom view, deterministic in (seed, index, view)."""
    rng = per_index(spec.seed, f"phantom/{spec.domain}/{view}", index)
    img = _background(rng, spec.image_size, spec.domain, view)
    bbox = None
    if lesion != "none":
        if lesion not in _PAINTERS:
            raise ConfigError(f"unknown lesion kind {lesion!r}")
        bbox = _PAINTERS[lesion](img, rng)
    img = np.clip(img, 0.0, 1.0)
    if spec.domain == "target":
        img = _monotone_remap(img)
    return img, bbox


def _patient_roster(spec: PhantomSpec):
    """Assign each patient a lesion kind (or none) and, for the target
    domain, a 1-6 assessment tag consistent with it."""
    rng = substream(spec.seed, f"roster/{spec.domain}")
    n = spec.n_patients
    n_mal = int(round(n * spec.malignant_frac))
    n_ben = int(round(n * spec.benign_frac))
    kinds = (["mass-malignant", "calc-malignant"] * (n_mal // 2 + 1))[:n_mal]
    kinds += (["mass-benign", "calc-benign"] * (n_ben // 2 + 1))[:n_ben]
    kinds += ["none"] * (n - len(kinds))
    order = rng.permutation(n)
    roster = []
    for pid in range(n):
        lesion = kinds[order[pid]]
        tag = None
        if spec.domain == "target":
            if lesion.endswith("malignant"):
                tag = int(rng.choice([4, 5, 6], p=[0.5, 0.3, 0.2]))
            elif lesion == "none":
                tag = int(rng.choice([1, 2], p=[0.4, 0.6]))
            else:  # benign findings: mostly 2, sometimes the indeterminate 3
                tag = int(rng.choice([2, 3], p=[0.7, 0.3]))
        roster.append((pid, lesion, tag))
    return roster


def generate_corpus(out_dir, spec: PhantomSpec) -> list[ImageRecord]:
    """Write PNGs plus manifest.csv; returns the records in manifest order."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for pid, lesion, tag in _patient_roster(spec):
        for vi, view in enumerate(VIEWS):
            index = pid * len(VIEWS) + vi
            img, bbox = render_image(spec, index, view, lesion)
            image_id = f"{spec.domain[:3]}-p{pid:04d}-{view}"
            rel = f"images/{image_id}.png"
            arr = np.round(img * 65535.0).astype(np.uint16)
            Image.fromarray(arr).save(img_dir / f"{image_id}.png")  # 16-bit grayscale PNG
            records.append(ImageRecord(
                image_id=image_id, patient_id=f"{spec.domain[:3]}-p{pid:04d}",
                view=view, domain=spec.domain, lesion=lesion, bbox=bbox,
                assessment=tag, path=rel,
            ))
    write_manifest(out_dir / "manifest.csv", records)
    return records


def write_manifest(path, records) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "patient_id", "view", "domain", "lesion",
                    "bbox", "assessment", "path"])
        for r in records:
            bbox = " ".join(str(v) for v in r.bbox) if r.bbox else ""
            w.writerow([r.image_id, r.patient_id, r.view, r.domain, r.lesion,
                        bbox, "" if r.assessment is None else r.assessment, r.path])


def read_manifest(path) -> list[ImageRecord]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no manifest at {path}")
    records = []
    with path.open() as fh:
        for row in csv.DictReader(fh):
            bbox = tuple(int(v) for v in row["bbox"].split()) if row["bbox"] else None
            records.append(ImageRecord(
                image_id=row["image_id"], patient_id=row["patient_id"],
                view=row["view"], domain=row["domain"], lesion=row["lesion"],
                bbox=bbox, assessment=int(row["assessment"]) if row["assessment"] else None,
                path=row["path"],
            ))
    if not records:
        raise DataError(f"{path} lists no images")
    return records


def load_image(root, record: ImageRecord) -> np.ndarray:
    """PNG -> float array in [0, 1], shape (H, W)."""
    p = Path(root) / record.path
    if not p.exists():
        raise DataError(f"missing image file {p}")
    arr = np.asarray(Image.open(p), dtype=np.uint16)
    return arr.astype(np.float64) / 65535.0

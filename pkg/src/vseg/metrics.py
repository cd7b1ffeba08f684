"""Evaluation metrics: hard Dice overlap, HD95 surface distance, voxel statistics.

Conventions, fixed so numbers are comparable run to run:

- Hard DSC is 2*TP / (2*TP + FN + FP) on binary masks. A class empty in both
  volumes scores 1.0; empty in exactly one scores 0.0.
- HD95 is the max of the two directed 95th-percentile surface distances, in
  millimetres between voxel centers, and is reported only when the class is
  nonempty in both volumes. Surfaces are mask voxels with any of their six
  face neighbors outside the mask (the volume border counts as outside).
- Percentiles interpolate linearly between order statistics at rank
  0.95*(n-1).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "LabelVolume",
    "MetricsReport",
    "OAR_NAMES",
    "aggregate_reports",
    "class_names_for",
    "dsc_binary",
    "evaluate",
    "hd95",
    "voxel_class_frequencies",
]

# Class naming for the canonical 10-class setup: nine organs-at-risk plus
# background, in the order used throughout the toolkit.
OAR_NAMES = (
    "background",
    "brain_stem",
    "chiasm",
    "mandible",
    "optic_nerve_l",
    "optic_nerve_r",
    "parotid_l",
    "parotid_r",
    "submandibular_l",
    "submandibular_r",
)


def class_names_for(num_classes: int):
    if num_classes == len(OAR_NAMES):
        return list(OAR_NAMES)
    return ["background"] + [f"class_{c}" for c in range(1, num_classes)]


@dataclass
class LabelVolume:
    """Per-voxel class IDs on a (S, H, W) grid with physical voxel spacing."""

    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    num_classes: int = 10

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise ValueError(f"labels must be rank 3, got shape {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError(f"labels must be integers, got {self.labels.dtype}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(
                f"label ids must lie in [0, {self.num_classes}), "
                f"found range [{self.labels.min()}, {self.labels.max()}]"
            )

    @property
    def dims(self):
        return self.labels.shape

    def class_mask(self, class_id: int) -> np.ndarray:
        return self.labels == class_id


def _check_geometry(pred: LabelVolume, truth: LabelVolume, op: str, spacing_too=False):
    if pred.dims != truth.dims:
        raise ValueError(f"{op}: volume dims differ, {pred.dims} vs {truth.dims}")
    if spacing_too and pred.spacing != truth.spacing:
        raise ValueError(f"{op}: voxel spacings differ, {pred.spacing} vs {truth.spacing}")


def dsc_binary(pred: LabelVolume, truth: LabelVolume, class_id: int) -> float:
    """Hard Dice coefficient of one class between two label volumes."""
    _check_geometry(pred, truth, "dsc_binary")
    p = pred.class_mask(class_id)
    t = truth.class_mask(class_id)
    np_, nt = int(p.sum()), int(t.sum())
    if np_ == 0 and nt == 0:
        return 1.0
    tp = int((p & t).sum())
    return 2.0 * tp / (np_ + nt)


def _surface(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with any 6-neighbor outside; the border counts as outside."""
    mp = np.pad(mask, 1, constant_values=False)
    interior = (
        mp[2:, 1:-1, 1:-1]
        & mp[:-2, 1:-1, 1:-1]
        & mp[1:-1, 2:, 1:-1]
        & mp[1:-1, :-2, 1:-1]
        & mp[1:-1, 1:-1, 2:]
        & mp[1:-1, 1:-1, :-2]
    )
    return mask & ~interior


def hd95(pred: LabelVolume, truth: LabelVolume, class_id: int):
    """95th-percentile symmetric surface distance in mm, or None if either empty."""
    _check_geometry(pred, truth, "hd95", spacing_too=True)
    p = pred.class_mask(class_id)
    t = truth.class_mask(class_id)
    if not p.any() or not t.any():
        return None
    spacing = np.asarray(pred.spacing)
    ps = np.argwhere(_surface(p)) * spacing
    ts = np.argwhere(_surface(t)) * spacing
    d_pt = cKDTree(ts).query(ps)[0]
    d_tp = cKDTree(ps).query(ts)[0]
    return float(max(np.percentile(d_pt, 95.0), np.percentile(d_tp, 95.0)))


def voxel_class_frequencies(truth: LabelVolume, num_classes: int | None = None):
    """Per-class voxel counts with fractions of the total and of the foreground.

    The background's foreground fraction is reported as 0. An empty foreground
    yields all-zero foreground fractions.
    """
    c = truth.num_classes if num_classes is None else int(num_classes)
    counts = np.bincount(truth.labels.ravel(), minlength=c)[:c]
    total = counts.sum()
    frac_total = counts / total if total else counts.astype(float)
    fg = counts[1:].sum()
    frac_fg = np.zeros(c)
    if fg:
        frac_fg[1:] = counts[1:] / fg
    return counts, frac_total, frac_fg


@dataclass
class MetricsReport:
    """Per-class scores for one (prediction, truth) pair."""

    class_names: list
    dsc: list
    hd95_mm: list
    voxel_counts: list
    frequencies: list
    mean_dsc: float | None
    annotated: list = field(default_factory=list)

    def rows(self):
        for i, name in enumerate(self.class_names):
            yield {
                "class": name,
                "dsc": self.dsc[i],
                "hd95": self.hd95_mm[i],
                "voxels": self.voxel_counts[i],
                "fraction": self.frequencies[i],
            }

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "dsc", "hd95", "voxels", "fraction"])
            for r in self.rows():
                w.writerow(
                    [
                        r["class"],
                        "" if r["dsc"] is None else repr(float(r["dsc"])),
                        "" if r["hd95"] is None else repr(float(r["hd95"])),
                        int(r["voxels"]),
                        repr(float(r["fraction"])),
                    ]
                )

    def to_json(self, path=None):
        doc = {
            "classes": list(self.rows()),
            "mean_dsc": self.mean_dsc,
        }
        if path is None:
            return json.dumps(doc, indent=2, sort_keys=True)
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
        return None


def _mask_flags(mask, num_classes: int) -> np.ndarray:
    flags = getattr(mask, "m", mask)
    flags = np.asarray(flags).astype(bool)
    if flags.shape != (num_classes,):
        raise ValueError(
            f"annotation mask must have one flag per class ({num_classes}), got {flags.shape}"
        )
    return flags


def evaluate(pred: LabelVolume, truth: LabelVolume, mask=None) -> MetricsReport:
    """Score every annotated class; unannotated classes appear as absent."""
    _check_geometry(pred, truth, "evaluate", spacing_too=True)
    c = truth.num_classes
    flags = np.ones(c, dtype=bool) if mask is None else _mask_flags(mask, c)
    counts, frac_total, _ = voxel_class_frequencies(truth)

    dscs, hds = [], []
    for cid in range(c):
        if not flags[cid]:
            dscs.append(None)
            hds.append(None)
            continue
        dscs.append(dsc_binary(pred, truth, cid))
        hds.append(hd95(pred, truth, cid))

    fg = [d for cid, d in enumerate(dscs) if cid > 0 and d is not None]
    return MetricsReport(
        class_names=class_names_for(c),
        dsc=dscs,
        hd95_mm=hds,
        voxel_counts=[int(v) for v in counts],
        frequencies=[float(f) for f in frac_total],
        mean_dsc=float(np.mean(fg)) if fg else None,
        annotated=[bool(f) for f in flags],
    )


def aggregate_reports(reports):
    """Mean and spread per class across reports (ignoring absent entries).

    Returns rows of (class, n, dsc_mean, dsc_sd, hd95_mean, hd95_sd); entries
    with no contributing reports carry None means.
    """
    if not reports:
        return []
    names = reports[0].class_names
    rows = []
    for i, name in enumerate(names):
        ds = [r.dsc[i] for r in reports if r.dsc[i] is not None]
        hs = [r.hd95_mm[i] for r in reports if r.hd95_mm[i] is not None]
        rows.append(
            {
                "class": name,
                "n": len(ds),
                "dsc_mean": float(np.mean(ds)) if ds else None,
                "dsc_sd": float(np.std(ds)) if ds else None,
                "hd95_mean": float(np.mean(hs)) if hs else None,
                "hd95_sd": float(np.std(hs)) if hs else None,
            }
        )
    return rows

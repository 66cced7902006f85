"""Saliency metrics (adaptive E-measure, S-measure, adaptive F-measure) and reports.

All metrics take a probability map ``pred`` in [0, 1] and a binary ``gt`` of
the same 2-D shape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import EmptyDataset, ShapeError

BETA2 = 0.3
E_EPS = 1e-12


def _as_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    pred, gt = np.squeeze(pred), np.squeeze(gt)
    if pred.ndim != 2 or pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} must be equal 2-D maps")
    return pred, (gt > 0.5).astype(np.float64)


def adaptive_threshold(pred):
    return min(1.0, 2.0 * float(pred.mean()))


def binarize(pred):
    """Adaptive binarisation: ``pred >= min(1, 2 * mean)``; an all-zero map stays empty."""
    return (pred >= adaptive_threshold(pred)) & (pred > 0)


def f_measure(pred, gt, beta2=BETA2):
    pred, gt = _as_pair(pred, gt)
    b = binarize(pred)
    tp = float((b & (gt > 0)).sum())
    precision = tp / b.sum() if b.any() else 0.0
    recall = tp / gt.sum() if gt.any() else 0.0
    if precision + recall == 0:
        return 0.0
    return (1 + beta2) * precision * recall / (beta2 * precision + recall)


def e_measure(pred, gt):
    pred, gt = _as_pair(pred, gt)
    fm = binarize(pred).astype(np.float64)
    if gt.sum() == 0:
        return float(1.0 - fm.mean())
    if gt.sum() == gt.size:
        return float(fm.mean())
    phi_gt = gt - gt.mean()
    phi_fm = fm - fm.mean()
    align = 2 * phi_gt * phi_fm / (phi_gt ** 2 + phi_fm ** 2 + E_EPS)
    return float(((1 + align) ** 2 / 4).mean())


def s_measure(pred, gt, alpha=0.5):
    pred, gt = _as_pair(pred, gt)
    return kernels.s_measure(pred, gt, alpha)


def resize_to(pred, shape):
    """Bilinear resize of a 2-D map (half-pixel centres) to ``shape``."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape == tuple(shape):
        return pred
    import torch
    import torch.nn.functional as F

    t = torch.from_numpy(pred)[None, None]
    return F.interpolate(t, size=tuple(shape), mode="bilinear", align_corners=False)[0, 0].numpy()


# ---------------------------------------------------------------------------
# dataset reports

@dataclass
class EvalReport:
    per_image: list                      # (id, Em, Sm, Fm)
    aggregate: tuple                     # (Em, Sm, Fm)
    per_attribute: dict = field(default_factory=dict)   # tag -> (Em, Sm, Fm, n)

    def to_text(self) -> str:
        lines = ["id\tEm\tSm\tFm"]
        for sid, e, s, f in self.per_image:
            lines.append(f"{sid}\t{e:.10f}\t{s:.10f}\t{f:.10f}")
        e, s, f = self.aggregate
        lines += ["", "# summary (adaptive F-measure, beta^2 = 0.3)",
                  f"mean\t{e:.10f}\t{s:.10f}\t{f:.10f}", f"count\t{len(self.per_image)}"]
        if self.per_attribute:
            lines += ["", "# per attribute", "attribute\tEm\tSm\tFm\tn"]
            for tag in sorted(self.per_attribute):
                e, s, f, n = self.per_attribute[tag]
                lines.append(f"{tag}\t{e:.10f}\t{s:.10f}\t{f:.10f}\t{n}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        per_image, agg, per_attr = [], None, {}
        section = "images"
        for line in text.splitlines():
            if not line.strip():
                continue
            if line.startswith("# summary"):
                section = "summary"
                continue
            if line.startswith("# per attribute"):
                section = "attributes"
                continue
            cols = line.split("\t")
            if cols[0] in ("id", "attribute"):
                continue
            if section == "images":
                per_image.append((cols[0], *map(float, cols[1:4])))
            elif section == "summary" and cols[0] == "mean":
                agg = tuple(map(float, cols[1:4]))
            elif section == "attributes":
                per_attr[cols[0]] = (*map(float, cols[1:4]), int(cols[4]))
        return cls(per_image, agg, per_attr)


def score_image(pred, gt):
    pred = np.squeeze(np.asarray(pred, dtype=np.float64))
    gt = np.squeeze(np.asarray(gt, dtype=np.float64))
    if pred.shape != gt.shape:
        pred = resize_to(pred, gt.shape)
    return e_measure(pred, gt), s_measure(pred, gt), f_measure(pred, gt)


def _mean(rows):
    return tuple(float(np.mean([r[i] for r in rows])) for i in range(3))


def evaluate_dataset(pairs) -> EvalReport:
    """Score ``(pred, gt, attributes)`` or ``(id, pred, gt, attributes)`` items."""
    per_image, tagged = [], {}
    for i, item in enumerate(pairs):
        if len(item) == 4:
            sid, pred, gt, attrs = item
        else:
            (pred, gt, attrs), sid = item, f"{i:05d}"
        scores = score_image(pred, gt)
        per_image.append((sid, *scores))
        for tag in attrs or ():
            tagged.setdefault(tag, []).append(scores)
    if not per_image:
        raise EmptyDataset("nothing to evaluate")
    aggregate = _mean([r[1:] for r in per_image])
    per_attribute = {t: (*_mean(rows), len(rows)) for t, rows in tagged.items()}
    return EvalReport(per_image, aggregate, per_attribute)

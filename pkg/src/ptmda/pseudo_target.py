"""Pseudo-labelling the target and merging it with each source domain."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .data import Domain
from .nn import ModelBundle, predict_average

logger = logging.getLogger(__name__)

SOURCE_ROW = 0
PSEUDO_ROW = 1


@dataclass(frozen=True)
class PseudoTargetDomain:
    source_index: int
    source_name: str
    X: np.ndarray
    y: np.ndarray
    provenance: np.ndarray  # SOURCE_ROW / PSEUDO_ROW per row
    confidences: np.ndarray  # NaN on source rows

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def n_pseudo(self) -> int:
        return int((self.provenance == PSEUDO_ROW).sum())

    def as_domain(self) -> Domain:
        return Domain(f"pt:{self.source_name}", self.X, self.y, "source")


def assign_pseudo_labels(bundle: ModelBundle, X_t: np.ndarray):
    if not bundle.classifiers:
        raise ValueError("bundle has no classifiers")
    return predict_average(bundle, X_t)


def select_confident(X_t, labels, confidences, kappa: float) -> np.ndarray:
    """Indices whose averaged confidence is strictly above ``kappa``."""
    if not 0.0 <= kappa <= 1.0:
        raise ValueError(f"kappa must lie in [0, 1], got {kappa}")
    return np.flatnonzero(np.asarray(confidences) > kappa)


def build_pseudo_target(
    source: Domain,
    X_selected: np.ndarray,
    pseudo_labels: np.ndarray,
    confidences: np.ndarray,
    source_index: int = 0,
    n_classes: int | None = None,
) -> PseudoTargetDomain:
    """Source rows first (true labels), then the selected target rows."""
    if source.role != "source" or source.y is None:
        raise ValueError(f"{source.name}: pseudo targets are built from labelled source domains")
    X_selected = np.asarray(X_selected).reshape(-1, source.input_dim)
    pseudo_labels = np.asarray(pseudo_labels, dtype=np.int64)
    confidences = np.asarray(confidences, dtype=float)
    if not (X_selected.shape[0] == pseudo_labels.shape[0] == confidences.shape[0]):
        raise ValueError("selected rows, pseudo labels and confidences must align")
    label_space = np.arange(n_classes) if n_classes is not None else np.unique(source.y)
    unknown = np.setdiff1d(pseudo_labels, label_space)
    if unknown.size:
        raise ValueError(f"pseudo labels {unknown.tolist()} are outside the label space")
    n_src = len(source)
    if X_selected.shape[0] == 0:
        logger.warning("pseudo target for %s has no pseudo-labelled rows; using source rows only", source.name)
    return PseudoTargetDomain(
        source_index=source_index,
        source_name=source.name,
        X=np.concatenate([source.X, X_selected.astype(source.X.dtype, copy=False)]),
        y=np.concatenate([source.y, pseudo_labels]),
        provenance=np.concatenate([np.full(n_src, SOURCE_ROW, np.int8), np.full(len(pseudo_labels), PSEUDO_ROW, np.int8)]),
        confidences=np.concatenate([np.full(n_src, np.nan), confidences]),
    )


def dump_pseudo_target_csv(pt: PseudoTargetDomain, path) -> None:
    """Audit dump: features, label, provenance (source|pseudo), confidence."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(pt.X.shape[1])] + ["label", "provenance", "confidence"])
        for row, lab, prov, conf in zip(pt.X, pt.y, pt.provenance, pt.confidences):
            w.writerow(
                [repr(float(v)) for v in row]
                + [int(lab), "pseudo" if prov == PSEUDO_ROW else "source", "" if np.isnan(conf) else repr(float(conf))]
            )

"""Accuracy, proxy A-distance and the ablation grid."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression

from .data import Domain
from .trainer import TrainConfig, run_ptmda

logger = logging.getLogger(__name__)

# flag overrides per ablation variant
VARIANTS: Dict[str, dict] = {
    "source-only": dict(source_only=True, use_pt=False, use_mc=False, norm_kind="BN"),
    "PT+BN": dict(use_pt=True, norm_kind="BN", use_mc=False),
    "PT+MN": dict(use_pt=True, norm_kind="MN", use_mc=False),
    "PT+MC": dict(use_pt=True, norm_kind="BN", use_mc=True),
    "PTMDA": dict(use_pt=True, norm_kind="MN", use_mc=True),
    "MN+MC-PT": dict(use_pt=False, norm_kind="MN", use_mc=True),
}
ABLATION_FLAGS = {"use_pt", "norm_kind", "use_mc", "source_only"}


def accuracy(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValueError("accuracy of an empty prediction set")
    return float((pred == truth).mean())


def proxy_a_distance(feats_a, feats_b, split_ratio: float = 0.5, rng: Optional[np.random.Generator] = None) -> float:
    """``2 (1 - 2 err)`` of a linear domain classifier, clamped to [0, 2].

    Each set is split independently into train/held-out parts.  The two sets
    are put in a canonical order first, so swapping them gives the same value.
    """
    a, b = np.asarray(feats_a, dtype=float), np.asarray(feats_b, dtype=float)
    if len(a) < 10 or len(b) < 10:
        raise ValueError("proxy_a_distance needs at least 10 samples per set")
    if not 0.0 < split_ratio < 1.0:
        raise ValueError("split_ratio must lie in (0, 1)")
    if (a.shape[0], a.tobytes()) > (b.shape[0], b.tobytes()):
        a, b = b, a
    rng = rng if rng is not None else np.random.default_rng(0)
    parts = []
    for feats, label in ((a, 0), (b, 1)):
        perm = rng.permutation(len(feats))
        cut = min(max(1, int(round(split_ratio * len(feats)))), len(feats) - 1)
        parts.append((feats[perm[:cut]], feats[perm[cut:]], label))
    X_tr = np.concatenate([p[0] for p in parts])
    y_tr = np.concatenate([np.full(len(p[0]), p[2]) for p in parts])
    X_te = np.concatenate([p[1] for p in parts])
    y_te = np.concatenate([np.full(len(p[1]), p[2]) for p in parts])
    mu, sd = X_tr.mean(axis=0), X_tr.std(axis=0) + 1e-12
    clf = LogisticRegression(C=1.0, max_iter=2000)
    clf.fit((X_tr - mu) / sd, y_tr)
    err = float((clf.predict((X_te - mu) / sd) != y_te).mean())
    return float(np.clip(2.0 * (1.0 - 2.0 * err), 0.0, 2.0))


@dataclass
class AblationRun:
    variant: str
    seed: int
    accuracy: float
    wall_time: float
    final: dict = field(default_factory=dict)


@dataclass
class AblationTable:
    runs: List[AblationRun]

    def summary(self) -> Dict[str, dict]:
        out = {}
        for name in dict.fromkeys(r.variant for r in self.runs):
            accs = np.array([r.accuracy for r in self.runs if r.variant == name])
            out[name] = {
                "mean": float(accs.mean()),
                "std": float(accs.std()),
                "n": int(accs.size),
                "seeds": [r.seed for r in self.runs if r.variant == name],
                "accuracies": accs.tolist(),
            }
        return out

    def mean(self, variant: str) -> float:
        return self.summary()[variant]["mean"]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "seed", "accuracy", "wall_time"])
            for r in self.runs:
                w.writerow([r.variant, r.seed, repr(r.accuracy), f"{r.wall_time:.3f}"])

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"summary": self.summary(), "runs": [r.__dict__ for r in self.runs]}, fh, indent=2)


def _one_run(args):
    name, flags, seed, sources, target, base = args
    cfg = TrainConfig(**{**base.to_dict(), **flags, "seed": seed})
    _, report = run_ptmda(sources, target, cfg)
    if "target_accuracy" not in report.final:
        raise ValueError("ablation needs target labels for evaluation")
    logger.info("%s seed=%d acc=%.4f", name, seed, report.final["target_accuracy"])
    return AblationRun(name, seed, report.final["target_accuracy"], report.wall_time, report.final)


def run_ablation(
    sources: Sequence[Domain],
    target: Domain,
    base_cfg: TrainConfig,
    variants: Mapping[str, dict] | Sequence[str],
    seeds: Sequence[int],
    jobs: int = 1,
    data_for_seed=None,
) -> AblationTable:
    """Target accuracy for every (variant, seed).

    ``variants`` is either names from :data:`VARIANTS` or a mapping of
    name -> flag overrides drawn from ``use_pt``, ``norm_kind``, ``use_mc``,
    ``source_only``.  ``data_for_seed(seed) -> (sources, target)`` regenerates
    the data per seed; otherwise the given domains are reused.
    """
    if not isinstance(variants, Mapping):
        variants = {name: VARIANTS[name] for name in variants}
    for name, flags in variants.items():
        bad = set(flags) - ABLATION_FLAGS
        if bad:
            raise ValueError(f"variant {name}: unsupported flags {sorted(bad)}")
    tasks = []
    for name, flags in variants.items():
        for seed in seeds:
            src, tgt = data_for_seed(seed) if data_for_seed is not None else (sources, target)
            tasks.append((name, flags, seed, src, tgt, base_cfg))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_one_run, tasks))
    else:
        runs = [_one_run(t) for t in tasks]
    return AblationTable(runs)

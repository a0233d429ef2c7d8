"""Domains, synthetic shifted benchmarks, CSV I/O and mini-batch streams."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np


def stream_key(*parts) -> List[int]:
    """Stable 32-bit words for a tuple of names (python's ``hash`` is salted)."""
    words = []
    for part in parts:
        digest = hashlib.sha256(str(part).encode()).digest()
        words.append(int.from_bytes(digest[:4], "little"))
    return words


def rng_stream(seed: int, *keys) -> np.random.Generator:
    """Generator keyed by (seed, names...); reordering other streams never shifts it."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *stream_key(*keys)]))


@dataclass
class Domain:
    name: str
    X: np.ndarray
    y: Optional[np.ndarray] = None
    role: str = "source"

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise ValueError(f"role must be 'source' or 'target', got {self.role!r}")
        self.X = np.asarray(self.X)
        if self.X.ndim != 2:
            raise ValueError(f"domain {self.name}: X must be 2-D, got shape {self.X.shape}")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int64)
            if self.y.shape != (self.X.shape[0],):
                raise ValueError(f"domain {self.name}: {self.y.shape[0]} labels for {self.X.shape[0]} rows")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]


# ---------------------------------------------------------------------------
# synthetic families
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Base dataset plus one shift parameter per domain; the last domain is the target.

    ``params`` are rotation angles in degrees for ``rotated-moons`` and
    ``(shift_vector, covariance_scale)`` pairs for ``shifted-gaussians``.
    """

    family: str = "rotated-moons"
    params: Sequence = (0.0, 30.0, 60.0, 90.0)
    n_per_domain: int = 500
    noise_std: float = 0.1
    seed: int = 0
    n_classes: int = 3
    dim: int = 2
    names: Optional[Sequence[str]] = None

    def __post_init__(self):
        if len(self.params) < 2:
            raise ValueError("need at least one source and one target domain")
        keys = [repr(p) for p in self.params]
        if len(set(keys)) != len(keys):
            raise ValueError("domain parameters must be distinct")
        if self.names is not None and len(self.names) != len(self.params):
            raise ValueError("names and params must have equal length")

    def domain_names(self) -> List[str]:
        if self.names is not None:
            return list(self.names)
        if self.family == "rotated-moons":
            return [f"rot{float(a):g}" for a in self.params]
        return [f"dom{i}" for i in range(len(self.params))]


def balanced_labels(n: int, n_classes: int) -> np.ndarray:
    return np.arange(n) % n_classes


def make_moons(n: int, noise_std: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Two interleaving half circles, centred at the origin."""
    y = balanced_labels(n, 2)
    t = rng.uniform(0.0, np.pi, size=n)
    outer = np.stack([np.cos(t), np.sin(t)], axis=1)
    inner = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    X = np.where(y[:, None] == 0, outer, inner)
    X = X + noise_std * rng.standard_normal((n, 2))
    return X - np.array([0.5, 0.25]), y


def rotate(X: np.ndarray, degrees: float) -> np.ndarray:
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    return X @ np.array([[c, s], [-s, c]])


def gen_synthetic(spec: SyntheticSpec) -> List[Domain]:
    """Generate one domain per parameter; each draws its own base sample.

    Every domain's base sample comes from a stream keyed by (seed, domain
    name), so adding or reordering domains leaves the others unchanged.
    """
    names = spec.domain_names()
    domains = []
    for k, (name, param) in enumerate(zip(names, spec.params)):
        rng = rng_stream(spec.seed, "data", name)
        if spec.family == "rotated-moons":
            X, y = make_moons(spec.n_per_domain, spec.noise_std, rng)
            X = rotate(X, float(param))
        elif spec.family == "shifted-gaussians":
            X, y = _shifted_gaussians(spec, param, rng)
        else:
            raise ValueError(f"unknown synthetic family {spec.family!r}")
        role = "target" if k == len(names) - 1 else "source"
        domains.append(Domain(name, X, y, role))
    return domains


def _class_means(n_classes: int, dim: int) -> np.ndarray:
    # classes spaced on a circle in the first two coordinates
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    means = np.zeros((n_classes, dim))
    means[:, 0] = 2.0 * np.cos(angles)
    means[:, 1 % dim] += 2.0 * np.sin(angles)
    return means


def _shifted_gaussians(spec: SyntheticSpec, param, rng) -> Tuple[np.ndarray, np.ndarray]:
    shift, cov_scale = param
    shift = np.broadcast_to(np.asarray(shift, dtype=float), (spec.dim,))
    y = balanced_labels(spec.n_per_domain, spec.n_classes)
    means = _class_means(spec.n_classes, spec.dim)
    noise = rng.standard_normal((spec.n_per_domain, spec.dim)) * (float(cov_scale) * spec.noise_std)
    return means[y] + shift + noise, y


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


class CSVFormatError(ValueError):
    pass


def dump_csv_domain(domain: Domain, path, extra_columns: Optional[dict] = None) -> None:
    """Header row, ``x0..x{d-1}`` then ``label`` (if present) and any extras.

    Floats are written as their shortest round-trip repr, so float64 reloads bit-exactly.
    """
    cols = [f"x{i}" for i in range(domain.input_dim)]
    extra_columns = extra_columns or {}
    header = cols + (["label"] if domain.y is not None else []) + list(extra_columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in range(len(domain)):
            row = [repr(float(v)) for v in domain.X[r]]
            if domain.y is not None:
                row.append(str(int(domain.y[r])))
            row += [str(vals[r]) for vals in extra_columns.values()]
            w.writerow(row)


def load_csv_domain(
    path,
    name: Optional[str] = None,
    role: str = "source",
    feature_columns: Optional[Sequence[str]] = None,
    label_column: Optional[str] = "label",
    n_classes: Optional[int] = None,
) -> Domain:
    """Parse a CSV domain; errors carry the 1-based file line number.

    ``feature_columns`` defaults to every column except the label column.
    Labels must be integers in ``[0, n_classes)`` when ``n_classes`` is
    given, otherwise ``0..max`` with every class present.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVFormatError(f"{path}: empty file") from None
        has_label = label_column is not None and label_column in header
        if feature_columns is None:
            feature_columns = [c for c in header if c != label_column]
        missing = [c for c in feature_columns if c not in header]
        if missing:
            raise CSVFormatError(f"{path}:1: missing columns {missing}")
        f_idx = [header.index(c) for c in feature_columns]
        l_idx = header.index(label_column) if has_label else None
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CSVFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(row[i]) for i in f_idx])
            except ValueError as exc:
                raise CSVFormatError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
            if l_idx is not None:
                cell = row[l_idx].strip()
                try:
                    lab = int(cell)
                except ValueError:
                    raise CSVFormatError(f"{path}:{lineno}: label {cell!r} is not a class index") from None
                if lab < 0 or (n_classes is not None and lab >= n_classes):
                    raise CSVFormatError(f"{path}:{lineno}: unknown label {lab}")
                labels.append(lab)
    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(f_idx))
    y = np.array(labels, dtype=np.int64) if l_idx is not None else None
    if y is not None and n_classes is None and y.size and role == "source":
        present = np.unique(y)
        if present.size != present.max() + 1:
            raise CSVFormatError(f"{path}: labels {present.tolist()} are not contiguous from 0")
    return Domain(name or path.stem, X, y, role)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class BatchStream:
    """Epoch-wise shuffling index stream for one domain.

    Draws without replacement within a pass (a short tail is dropped and a
    fresh permutation starts), or with replacement when the domain is
    smaller than the batch.
    """

    n: int
    batch_size: int
    rng: np.random.Generator
    _perm: np.ndarray = field(default=None, repr=False)
    _pos: int = 0

    def next_indices(self) -> np.ndarray:
        if self.n == 0:
            raise ValueError("cannot sample from an empty domain")
        if self.n < self.batch_size:
            return self.rng.integers(0, self.n, size=self.batch_size)
        if self._perm is None or self._pos + self.batch_size > self.n:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def sample_batch(domain: Domain, batch_size: int, stream: BatchStream):
    idx = stream.next_indices()
    return domain.X[idx], (domain.y[idx] if domain.y is not None else None)

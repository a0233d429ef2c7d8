"""Two-stage pseudo-target training loop."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import SGD, Tensor
from .data import BatchStream, Domain, rng_stream, sample_batch
from .losses import adversarial_domain_loss, cross_entropy, mc_loss, stage_objective
from .nn import ModelBundle, predict_average, recalibrate_norm_stats
from .pseudo_target import PseudoTargetDomain, assign_pseudo_labels, build_pseudo_target, select_confident

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, stage: int, pair: Tuple[str, str], epoch: int, detail: str = ""):
        self.stage, self.pair, self.epoch = stage, pair, epoch
        super().__init__(f"non-finite loss in stage {stage}, pair {pair[0]}->{pair[1]}, epoch {epoch}{': ' + detail if detail else ''}")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    kappa: float = 0.98
    d0: int = 4096
    d_r: int = 1024
    epochs_stage1: int = 30
    epochs_stage2: int = 30
    batch_size: int = 64
    steps_per_epoch: int = 0  # 0: ceil(largest domain / batch_size)
    seed: int = 0
    norm_kind: str = "MN"
    use_mc: bool = True
    use_pt: bool = True
    source_only: bool = False
    precision: str = "float32"
    hidden_dims: Tuple[int, ...] = (64, 64)
    feature_dim: int = 16
    disc_hidden: int = 32
    grl_coeff: float = 1.0
    adv_weighting: str = "objective"
    detach_probs: bool = True
    refresh_pseudo: bool = False
    mn_momentum: float = 0.1
    mn_eps: float = 1e-5
    mn_recalibrate: bool = True

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.validate()

    def validate(self) -> None:
        if self.lr <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive; momentum and weight_decay non-negative")
        if not 0.0 <= self.kappa <= 1.0:
            raise ConfigError(f"kappa must lie in [0, 1], got {self.kappa}")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (normalization statistics)")
        if self.norm_kind not in ("MN", "BN"):
            raise ConfigError(f"norm_kind must be MN or BN, got {self.norm_kind!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.d0 < 1 or self.d_r < 1 or self.feature_dim < 1 or self.disc_hidden < 1:
            raise ConfigError("dimensions must be positive")
        if self.grl_coeff < 0:
            raise ConfigError("grl_coeff must be non-negative")
        if self.adv_weighting not in ("objective", "reversal"):
            raise ConfigError(f"adv_weighting must be objective or reversal, got {self.adv_weighting!r}")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    pair: Tuple[str, str]
    cls: float
    adv: float
    mc: float
    lam: float
    steps: int
    mc_skipped: int = 0


@dataclass
class TrainReport:
    seed: int
    config: dict
    records: List[EpochRecord] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "config": self.config,
            "records": [dict(dataclasses.asdict(r), pair=list(r.pair)) for r in self.records],
            "final": self.final,
            "wall_time": self.wall_time,
        }

    def fingerprint(self) -> str:
        """Canonical JSON of everything except timing."""
        d = self.to_dict()
        d.pop("wall_time")
        d["final"] = {k: v for k, v in d["final"].items() if k != "wall_time"}
        return json.dumps(d, sort_keys=True)

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def write_trace_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "stage", "pair", "cls", "adv", "mc", "lambda"])
            for r in self.records:
                w.writerow([r.epoch, r.stage, f"{r.pair[0]}->{r.pair[1]}", repr(r.cls), repr(r.adv), repr(r.mc), repr(r.lam)])


def lambda_schedule(epoch: int, total: int) -> float:
    """``2 / (1 + exp(-10 * epoch / total)) - 1``: 0 at the start, ~1 at the end."""
    if total < 1:
        raise ValueError("total must be >= 1")
    if not 0 <= epoch <= total:
        raise ValueError(f"epoch {epoch} outside [0, {total}]")
    return 2.0 / (1.0 + math.exp(-10.0 * epoch / total)) - 1.0


# ---------------------------------------------------------------------------
# one optimizer step
# ---------------------------------------------------------------------------


def _joint_step(bundle: ModelBundle, opt: SGD, idx: int, xs, ys, xt, yt, lam: float, cfg: TrainConfig, stats: dict):
    """Single joint update: classification + lam * (reversed adversarial + MC).

    ``xt`` is the target-role batch (unlabelled in stage 1, pseudo-target rows
    with labels ``yt`` in stage 2) or None for source-only training.
    """
    dtype = cfg.dtype
    fs, ft = bundle.G(Tensor(xs.astype(dtype)), Tensor(xt.astype(dtype)) if xt is not None else None, training=True)
    clf = bundle.classifiers[idx]
    logit_s = clf(fs)
    cls = cross_entropy(logit_s, ys)
    logit_t = clf(ft) if ft is not None else None
    if yt is not None:
        cls = cls + cross_entropy(logit_t, yt)

    zero = Tensor(np.zeros((), dtype=dtype))
    adv = mc = zero
    reversal = cfg.adv_weighting == "reversal"
    coeff = cfg.grl_coeff * (lam if reversal else 1.0)
    if ft is not None and not cfg.source_only:
        ps, pt = ad.softmax(logit_s), ad.softmax(logit_t)
        if cfg.detach_probs:
            ps, pt = ps.detach(), pt.detach()
        adv = adversarial_domain_loss(
            bundle.discriminate(fs, ps, idx, coeff),
            bundle.discriminate(ft, pt, idx, coeff),
        )
    if cfg.use_mc and not cfg.source_only:
        mc = mc_loss(fs, ys, stats)
        if yt is not None:
            mc = mc + mc_loss(ft, yt, stats)

    if reversal:
        objective = stage_objective(cls, zero, mc, lam) + adv
    else:
        objective = stage_objective(cls, adv, mc, lam)
    values = (float(cls.data), float(adv.data), float(mc.data))
    if not all(math.isfinite(v) for v in values + (float(objective.data),)):
        raise FloatingPointError(f"cls={values[0]} adv={values[1]} mc={values[2]}")
    opt.zero_grad()
    ad.backward(objective)
    opt.step()
    return values


def _steps_per_epoch(cfg: TrainConfig, domains: Sequence) -> int:
    if cfg.steps_per_epoch > 0:
        return cfg.steps_per_epoch
    return max(1, math.ceil(max(len(d) for d in domains) / cfg.batch_size))


def make_optimizer(bundle: ModelBundle, cfg: TrainConfig) -> SGD:
    return SGD(bundle.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _run_epoch(stage, epoch, lam, pairs, steps, bundle, opt, cfg) -> List[EpochRecord]:
    """Round-robin over ``pairs``: ``steps`` rounds of one joint step per pair.

    Each pair is ``(names, idx, src, src_stream, tgt_or_None, tgt_stream, tgt_labelled)``.
    """
    sums = {p[0]: np.zeros(3) for p in pairs}
    skipped = {p[0]: 0 for p in pairs}
    for _ in range(steps):
        for names, idx, src, s_stream, tgt, t_stream, labelled in pairs:
            xs, ys = sample_batch(src, cfg.batch_size, s_stream)
            xt = yt = None
            if tgt is not None:
                xt, yt = sample_batch(tgt, cfg.batch_size, t_stream)
                if not labelled:
                    yt = None
            stats: dict = {}
            try:
                vals = _joint_step(bundle, opt, idx, xs, ys, xt, yt, lam, cfg, stats)
            except (FloatingPointError, ad.NonFiniteGradientError) as exc:
                raise NonFiniteLossError(stage, names, epoch, str(exc)) from exc
            sums[names] += vals
            skipped[names] += stats.get("mc_skipped", 0)
    rows = []
    for names, *_ in pairs:
        c, a, m = (sums[names] / steps).tolist()
        rows.append(EpochRecord(stage, epoch, names, c, a, m, lam, steps, skipped[names]))
    return rows


def stage1_train(
    bundle: ModelBundle,
    sources: Sequence[Domain],
    target: Domain,
    cfg: TrainConfig,
    opt: Optional[SGD] = None,
) -> List[EpochRecord]:
    """Align every source with the target, one joint step per (source, batch)."""
    if not sources:
        raise ValueError("at least one source domain is required")
    rows: List[EpochRecord] = []
    if cfg.epochs_stage1 == 0:
        return rows
    opt = opt or make_optimizer(bundle, cfg)
    pairs = []
    for src in sources:
        idx = bundle.source_names.index(src.name)
        s_stream = BatchStream(len(src), cfg.batch_size, rng_stream(cfg.seed, "stage1", src.name))
        t_stream = BatchStream(len(target), cfg.batch_size, rng_stream(cfg.seed, "stage1", target.name, src.name))
        pairs.append(((src.name, target.name), idx, src, s_stream, None if cfg.source_only else target, t_stream, False))
    steps = _steps_per_epoch(cfg, sources)
    for epoch in range(cfg.epochs_stage1):
        lam = 0.0 if cfg.source_only else lambda_schedule(epoch, cfg.epochs_stage1)
        rows += _run_epoch(1, epoch, lam, pairs, steps, bundle, opt, cfg)
    return rows


def stage2_train(
    bundle: ModelBundle,
    sources: Sequence[Domain],
    pseudo_targets: Sequence[PseudoTargetDomain],
    cfg: TrainConfig,
    opt: Optional[SGD] = None,
    refresh: Optional[Callable[[], Sequence[PseudoTargetDomain]]] = None,
) -> List[EpochRecord]:
    """Align each remainder source with each other source's pseudo target.

    The classifier and discriminator used for pair (pseudo target p,
    remainder r) are those indexed by p's source domain.
    """
    rows: List[EpochRecord] = []
    if cfg.epochs_stage2 == 0 or len(sources) < 2:
        return rows
    opt = opt or make_optimizer(bundle, cfg)

    def build_pairs(pts):
        pairs = []
        for pt in pts:
            idx = bundle.source_names.index(pt.source_name)
            pt_dom = pt.as_domain()
            for rem in sources:
                if rem.name == pt.source_name:
                    continue
                r_stream = BatchStream(len(rem), cfg.batch_size, rng_stream(cfg.seed, "stage2", rem.name, pt.source_name))
                p_stream = BatchStream(len(pt_dom), cfg.batch_size, rng_stream(cfg.seed, "stage2", "pt", pt.source_name, rem.name))
                pairs.append(((rem.name, pt_dom.name), idx, rem, r_stream, pt_dom, p_stream, True))
        return pairs

    pairs = build_pairs(pseudo_targets)
    steps = _steps_per_epoch(cfg, sources)
    for epoch in range(cfg.epochs_stage2):
        if refresh is not None and epoch > 0:
            pairs = build_pairs(refresh())
        rows += _run_epoch(2, epoch, lambda_schedule(epoch, cfg.epochs_stage2), pairs, steps, bundle, opt, cfg)
    return rows


# ---------------------------------------------------------------------------
# end-to-end
# ---------------------------------------------------------------------------


def _check_domains(sources: Sequence[Domain], target: Domain) -> int:
    if not sources:
        raise ValueError("at least one source domain is required")
    if len(target) == 0:
        raise ValueError("target domain is empty")
    names = [s.name for s in sources]
    if len(set(names)) != len(names) or target.name in names:
        raise ValueError("domain names must be unique")
    dims = {d.input_dim for d in [*sources, target]}
    if len(dims) != 1:
        raise ValueError(f"domains disagree on input_dim: {sorted(dims)}")
    for s in sources:
        if s.y is None:
            raise ValueError(f"source {s.name} has no labels")
    return int(max(s.y.max() for s in sources)) + 1


def build_bundle(sources: Sequence[Domain], n_classes: int, cfg: TrainConfig) -> ModelBundle:
    return ModelBundle.build(
        [s.name for s in sources],
        sources[0].input_dim,
        n_classes,
        lambda *keys: rng_stream(cfg.seed, *keys),
        hidden=cfg.hidden_dims,
        feature_dim=cfg.feature_dim,
        disc_hidden=cfg.disc_hidden,
        norm_kind=cfg.norm_kind,
        d0=cfg.d0,
        d_r=cfg.d_r,
        dtype=cfg.dtype,
        mn_eps=cfg.mn_eps,
        mn_momentum=cfg.mn_momentum,
    )


def _finalize_target_stats(bundle: ModelBundle, target: Domain, cfg: TrainConfig) -> None:
    # In stage 2 the MN target branch carries pseudo-target batches (source
    # rows mixed in), so the EMA drifts off the real target; re-estimate it.
    if bundle.arch["norm_kind"] == "MN" and cfg.mn_recalibrate and not cfg.source_only:
        recalibrate_norm_stats(bundle.G, target.X, cfg.dtype)


def make_pseudo_targets(bundle, sources, target, cfg, n_classes):
    if cfg.refresh_pseudo:
        _finalize_target_stats(bundle, target, cfg)
    labels, conf = assign_pseudo_labels(bundle, target.X)
    keep = select_confident(target.X, labels, conf, cfg.kappa)
    pts = [
        build_pseudo_target(src, target.X[keep], labels[keep], conf[keep], bundle.source_names.index(src.name), n_classes)
        for src in sources
    ]
    return pts, keep, labels


def run_ptmda(sources: Sequence[Domain], target: Domain, cfg: TrainConfig) -> Tuple[ModelBundle, TrainReport]:
    """Stage 1, one round of pseudo-labelling, stage 2, then evaluation.

    Sources are processed in name order, so the order they are passed in
    does not affect the result.
    """
    t0 = time.perf_counter()
    n_classes = _check_domains(sources, target)
    if target.y is not None:
        n_classes = max(n_classes, int(target.y.max()) + 1)
    sources = sorted(sources, key=lambda d: d.name)
    bundle = build_bundle(sources, n_classes, cfg)
    opt = make_optimizer(bundle, cfg)
    report = TrainReport(seed=cfg.seed, config=cfg.to_dict())

    report.records += stage1_train(bundle, sources, target, cfg, opt)
    final: Dict[str, object] = {}
    _finalize_target_stats(bundle, target, cfg)
    if target.y is not None:
        final["stage1_target_accuracy"] = float((predict_average(bundle, target.X)[0] == target.y).mean())

    if cfg.use_pt and not cfg.source_only:
        pts, keep, labels = make_pseudo_targets(bundle, sources, target, cfg, n_classes)
        final["pseudo_count"] = int(keep.size)
        if target.y is not None:
            final["pseudo_accuracy"] = float((labels[keep] == target.y[keep]).mean()) if keep.size else None
        refresh = None
        if cfg.refresh_pseudo:
            refresh = lambda: make_pseudo_targets(bundle, sources, target, cfg, n_classes)[0]  # noqa: E731
        report.records += stage2_train(bundle, sources, pts, cfg, opt, refresh)
        _finalize_target_stats(bundle, target, cfg)

    pred, _ = predict_average(bundle, target.X)
    if target.y is not None:
        final["target_accuracy"] = float((pred == target.y).mean())
    final["source_accuracies"] = {s.name: float((predict_average(bundle, s.X)[0] == s.y).mean()) for s in sources}
    final["mc_skipped"] = int(sum(r.mc_skipped for r in report.records))
    report.wall_time = time.perf_counter() - t0
    final["wall_time"] = report.wall_time
    report.final = final
    return bundle, report

"""Command-line entry point.

Every experiment is one flat ``key = value`` file (``#`` starts a comment)
whose keys are the :class:`~ptmda.trainer.TrainConfig` fields plus the data
keys below; any key can be overridden with ``--key-name value``.

Exit codes: 0 success, 1 configuration or input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import CSVFormatError, Domain, SyntheticSpec, dump_csv_domain, gen_synthetic, load_csv_domain
from .evaluation import VARIANTS, accuracy, run_ablation
from .gradsuite import TOLERANCE, run_suite
from .nn import load_checkpoint, predict_average, save_checkpoint
from .trainer import ConfigError, NonFiniteLossError, TrainConfig, run_ptmda

logger = logging.getLogger("ptmda")

# data and output keys that live next to the TrainConfig fields
DATA_DEFAULTS: Dict[str, object] = {
    "run_name": "run",
    "family": "rotated-moons",
    "params": (0.0, 30.0, 60.0, 90.0),
    "n_per_domain": 500,
    "noise_std": 0.1,
    "n_classes": 3,
    "dim": 2,
    "source_csv": (),
    "target_csv": "",
    "label_column": "label",
}
TRAIN_DEFAULTS: Dict[str, object] = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
ALL_KEYS = {**TRAIN_DEFAULTS, **DATA_DEFAULTS}


def _coerce(key: str, raw: str):
    default = ALL_KEYS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if key == "hidden_dims":
                return tuple(int(s) for s in items)
            if key == "params":
                return tuple(float(s) for s in items)
            return tuple(items)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config_text(text: str, origin: str = "<config>") -> Dict[str, object]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in ALL_KEYS:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def format_config(values: Dict[str, object]) -> str:
    lines = []
    for key in ALL_KEYS:
        v = values[key]
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def resolve_config(args) -> Dict[str, object]:
    values = dict(ALL_KEYS)
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text(), str(path)))
    for key in ALL_KEYS:
        raw = getattr(args, key, None)
        if raw is not None:
            values[key] = _coerce(key, raw)
    return values


def train_config(values) -> TrainConfig:
    return TrainConfig(**{k: values[k] for k in TRAIN_DEFAULTS})


def load_domains(values, seed: Optional[int] = None) -> Tuple[List[Domain], Domain]:
    """CSV domains when ``source_csv`` is set, otherwise the synthetic family."""
    if values["source_csv"]:
        if not values["target_csv"]:
            raise ConfigError("source_csv given without target_csv")
        label = values["label_column"]
        sources = [load_csv_domain(p, role="source", label_column=label) for p in values["source_csv"]]
        target = load_csv_domain(values["target_csv"], role="target", label_column=label)
        return sources, target
    spec = synthetic_spec(values, seed)
    doms = gen_synthetic(spec)
    return doms[:-1], doms[-1]


def synthetic_spec(values, seed: Optional[int] = None) -> SyntheticSpec:
    params = values["params"]
    if values["family"] == "shifted-gaussians":
        # params are per-domain shifts along the first axis, unit covariance scale
        dim = values["dim"]
        params = tuple((tuple([p] + [0.0] * (dim - 1)), 1.0) for p in params)
    try:
        return SyntheticSpec(
            family=values["family"], params=params, n_per_domain=values["n_per_domain"],
            noise_std=values["noise_std"], seed=values["seed"] if seed is None else seed,
            n_classes=values["n_classes"], dim=values["dim"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    values = resolve_config(args)
    doms = gen_synthetic(synthetic_spec(values))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for d in doms:
        dump_csv_domain(d, out / f"{d.name}.csv")
    _write_json(out / "domains.json", {"domains": [{"name": d.name, "role": d.role, "rows": len(d)} for d in doms]})
    print(f"wrote {len(doms)} domains to {out}")
    return 0


def cmd_train(args) -> int:
    if args.config is None:
        raise ConfigError("train needs --config")
    values = resolve_config(args)
    cfg = train_config(values)
    sources, target = load_domains(values)
    bundle, report = run_ptmda(sources, target, cfg)
    run_dir = Path(values["run_name"])
    run_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(bundle, run_dir / "model.ckpt", extra={"config": cfg.to_dict()})
    report.write_json(run_dir / "report.json")
    report.write_trace_csv(run_dir / "trace.csv")
    (run_dir / "config.txt").write_text(format_config(values))
    final = report.final
    if "stage1_target_accuracy" in final:
        print(f"stage1_target_accuracy {final['stage1_target_accuracy']!r}")
    if "pseudo_count" in final:
        print(f"pseudo_count {final['pseudo_count']}")
    if "target_accuracy" in final:
        print(f"target_accuracy {final['target_accuracy']!r}")
    print(f"report {run_dir / 'report.json'}")
    return 0


def cmd_evaluate(args) -> int:
    bundle, _ = load_checkpoint(args.checkpoint)
    dom = load_csv_domain(args.data, role="target", label_column=args.label_column)
    if dom.y is None:
        raise ConfigError(f"{args.data}: no {args.label_column!r} column to evaluate against")
    pred, _ = predict_average(bundle, dom.X)
    acc = accuracy(pred, dom.y)
    report = Path(args.report) if args.report else Path(args.checkpoint).with_name("evaluation.json")
    _write_json(report, {"checkpoint": str(args.checkpoint), "data": str(args.data), "n": len(dom), "accuracy": acc})
    print(f"accuracy {acc!r}")
    return 0


def cmd_ablate(args) -> int:
    values = resolve_config(args)
    cfg = train_config(values)
    names = [s.strip() for s in args.variants.split(",")] if args.variants else list(VARIANTS)
    unknown = [n for n in names if n not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}; choose from {list(VARIANTS)}")
    seeds = [int(s) for s in args.seeds.split(",")]
    if values["source_csv"]:
        sources, target = load_domains(values)
        table = run_ablation(sources, target, cfg, names, seeds, jobs=args.jobs)
    else:
        table = run_ablation(None, None, cfg, names, seeds, jobs=args.jobs, data_for_seed=lambda s: load_domains(values, s))
    run_dir = Path(values["run_name"])
    run_dir.mkdir(parents=True, exist_ok=True)
    table.write_csv(run_dir / "ablation.csv")
    table.write_json(run_dir / "ablation.json")
    for name, row in table.summary().items():
        print(f"{name:12s} mean {row['mean']:.4f} std {row['std']:.4f} n {row['n']}")
    print(f"report {run_dir / 'ablation.json'}")
    return 0


def cmd_gradcheck(args) -> int:
    errors = run_suite(instances=args.instances, seed=args.seed)
    worst = max(errors.values())
    for name, err in errors.items():
        print(f"{name:16s} {err:.3e}")
    print(f"max_relative_error {worst:.3e}")
    if args.report:
        _write_json(Path(args.report), {"errors": errors, "max_relative_error": worst, "tolerance": TOLERANCE})
    return 0 if worst <= TOLERANCE else 2


def cmd_dump_embeddings(args) -> int:
    bundle, _ = load_checkpoint(args.checkpoint)
    dom = load_csv_domain(args.data, role="target", label_column=args.label_column)
    feats = bundle.features(dom.X)
    extra = {"label": dom.y.tolist()} if dom.y is not None else {}
    emb = Domain(dom.name, feats.astype(np.float64), None, "target")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dump_csv_domain(emb, out, extra_columns=extra)
    print(f"wrote {len(dom)} embeddings of dimension {feats.shape[1]} to {out}")
    return 0


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value experiment file")
    g = p.add_argument_group("config overrides")
    for key in ALL_KEYS:
        g.add_argument("--" + key.replace("_", "-"), dest=key, metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptmda", description="Multi-source domain adaptation with pseudo target domains.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic domains to CSV")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train and write <run_name>/model.ckpt and report.json")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="accuracy of a checkpoint on a labelled CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--label-column", default="label")
    p.add_argument("--report", help="JSON output (default: evaluation.json next to the checkpoint)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the variant grid over seeds")
    _add_config_flags(p)
    p.add_argument("--variants", help=f"comma list from {','.join(VARIANTS)}")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss and layer")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="optional JSON output")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-embeddings", help="write G(x) features to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--label-column", default="label")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_embeddings)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, CSVFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

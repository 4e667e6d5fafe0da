"""Command-line surface for the pruning pipeline.

Heavy imports happen inside the command handlers so that ``--threads``
(or the THINNER_THREADS environment variable) can cap the numeric
libraries' thread pools before numpy is loaded; ``--threads 1``
guarantees bit-exact reruns. Every command that writes artifacts also
writes ``run_manifest.json`` beside them; feeding a manifest's ``argv``
back through ``main`` reproduces the outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

from .errors import ThinnerError

TOOL_VERSION = "0.1.0"

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


@dataclass
class RunManifest:
    """Reproducibility record written alongside every output artifact."""

    command: str
    argv: list[str]
    config: dict
    seed: int | None
    inputs: dict
    outputs: list[str]
    version: str = TOOL_VERSION

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "run_manifest.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)
            fh.write("\n")
        return path


def manifest_to_argv(manifest_path) -> list[str]:
    """Argument vector that re-runs the command recorded in a manifest."""
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    return list(manifest["argv"])


def _configure_threads(threads: int | None) -> None:
    if threads is None:
        env = os.environ.get("THINNER_THREADS")
        threads = int(env) if env else None
    if threads is None:
        return
    if threads < 1:
        raise ThinnerError(f"--threads must be >= 1, got {threads}")
    for var in _THREAD_VARS:
        os.environ[var] = str(threads)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_list(text: str, conv, what: str):
    try:
        values = [conv(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise ThinnerError(f"cannot parse {what} list {text!r}: {exc}") from exc
    if not values:
        raise ThinnerError(f"empty {what} list: {text!r}")
    return values


def _load_schedule(path):
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ThinnerError(f"cannot read schedule {path}: {exc}") from exc
    if not isinstance(raw, list) or not raw:
        raise ThinnerError(
            f"schedule {path}: expected a non-empty JSON list of {{\"layer\", \"rate\"}} objects"
        )
    schedule = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict) or "layer" not in entry or "rate" not in entry:
            raise ThinnerError(
                f"schedule {path}: entry {i} must be an object with 'layer' and 'rate' keys, "
                f"got {entry!r}"
            )
        if not isinstance(entry["layer"], str) or not isinstance(entry["rate"], (int, float)):
            raise ThinnerError(
                f"schedule {path}: entry {i} needs a string layer and numeric rate, got {entry!r}"
            )
        schedule.append((entry["layer"], float(entry["rate"])))
    return schedule


# ---------------------------------------------------------------------------
# command handlers


def cmd_stats(args) -> int:
    from .metrics import count_flops, count_params
    from .model_io import load_model

    model = load_model(args.model)
    params = count_params(model)
    flops = count_flops(model)
    print(flops.format_table())
    print(f"total params: {params.total_params}  total flops: {flops.total_flops}")
    if args.out is not None:
        out = _out_dir(args)
        flops.to_csv(out / "stats.csv")
        argv = ["stats", str(args.model), "--out", str(args.out)]
        if args.threads is not None:
            argv += ["--threads", str(args.threads)]
        RunManifest(
            command="stats",
            argv=argv,
            config={"model": str(args.model), "out": str(args.out)},
            seed=None,
            inputs={"model": str(args.model)},
            outputs=["stats.csv"],
        ).write(out)
    return 0


def cmd_prune(args) -> int:
    from .lsq_prune import METHODS, PruneConfig, prune_network
    from .model_io import load_dataset, load_model, save_model

    if args.method not in METHODS:
        raise ThinnerError(f"unknown method {args.method!r}; valid methods: {', '.join(METHODS)}")
    model = load_model(args.model)
    dataset = load_dataset(args.data) if args.data else None
    schedule = _load_schedule(args.schedule)
    config = PruneConfig(
        images=args.images,
        locations_per_image=args.locations,
        finetune_epochs=args.finetune_epochs,
    )
    pruned, report = prune_network(model, dataset, schedule, args.method, seed=args.seed, config=config)
    out = _out_dir(args)
    save_model(pruned, out / "model.json")
    report.to_csv(out / "report.csv")
    report.to_json(out / "report.json")
    argv = [
        "prune",
        "--model", str(args.model),
        "--schedule", str(args.schedule),
        "--method", args.method,
        "--images", str(args.images),
        "--locations", str(args.locations),
        "--seed", str(args.seed),
        "--finetune-epochs", str(args.finetune_epochs),
        "--out", str(args.out),
    ]
    if args.data:
        argv[3:3] = ["--data", str(args.data)]
    if args.threads is not None:
        argv += ["--threads", str(args.threads)]
    RunManifest(
        command="prune",
        argv=argv,
        config={
            "model": str(args.model),
            "data": str(args.data) if args.data else None,
            "schedule": str(args.schedule),
            "method": args.method,
            "images": args.images,
            "locations": args.locations,
            "finetune_epochs": args.finetune_epochs,
            "out": str(args.out),
        },
        seed=args.seed,
        inputs={"model": str(args.model), "data": str(args.data) if args.data else None},
        outputs=["model.json", "model.bin", "report.csv", "report.json"],
    ).write(out)
    print(
        f"pruned {len(report.sites)} sites: params {report.params_before} -> {report.params_after}, "
        f"flops {report.flops_before} -> {report.flops_after}"
    )
    return 0


def run_comparison(model, dataset, rates, methods, seed, config=None):
    """Selection-method comparison over all prunable sites.

    For each (method, rate): prune every site of a fresh copy of the
    model, fine-tuning as configured, and record each site's
    post-selection reconstruction error plus the final model's accuracy.
    Sampling streams depend only on (seed, site), so every method sees
    identical samples at the first site.

    Returns rows (method, rate, site, recon_error, accuracy).
    """
    import math

    from .finetune import evaluate
    from .lsq_prune import PruneConfig, prune_network
    from .sampling import prunable_sites

    config = config or PruneConfig()
    rows = []
    for method in methods:
        for rate in rates:
            schedule = [(site.layer, rate) for site in prunable_sites(model)]
            pruned, report = prune_network(
                model, dataset, schedule, method, seed=seed, config=config
            )
            accuracy, _ = evaluate(pruned, dataset)
            for record in report.sites:
                recon = record.recon_scaled if math.isfinite(record.recon_scaled) else record.recon_plain
                rows.append((method, rate, record.layer, recon, accuracy))
    return rows


def cmd_compare(args) -> int:
    from .lsq_prune import METHODS
    from .model_io import load_dataset, load_model
    from .util import write_csv

    methods = _parse_list(args.methods, str, "method")
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ThinnerError(f"unknown methods {bad}; valid methods: {', '.join(METHODS)}")
    rates = _parse_list(args.rates, float, "rate")
    model = load_model(args.model)
    dataset = load_dataset(args.data)
    rows = run_comparison(model, dataset, rates, methods, args.seed)
    out = _out_dir(args)
    write_csv(out / "comparison.csv", ("method", "rate", "site", "recon_error", "accuracy"), rows)
    argv = [
        "compare",
        "--model", str(args.model),
        "--data", str(args.data),
        "--rates", args.rates,
        "--methods", args.methods,
        "--seed", str(args.seed),
        "--out", str(args.out),
    ]
    if args.threads is not None:
        argv += ["--threads", str(args.threads)]
    RunManifest(
        command="compare",
        argv=argv,
        config={
            "model": str(args.model),
            "data": str(args.data),
            "rates": rates,
            "methods": methods,
            "out": str(args.out),
        },
        seed=args.seed,
        inputs={"model": str(args.model), "data": str(args.data)},
        outputs=["comparison.csv"],
    ).write(out)
    print(f"wrote {len(rows)} comparison rows to {out / 'comparison.csv'}")
    return 0


def cmd_finetune(args) -> int:
    from .finetune import TrainConfig, train
    from .model_io import load_dataset, load_model, save_model

    model = load_model(args.model)
    dataset = load_dataset(args.data)
    config = TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    trained, history = train(model, dataset, config)
    out = _out_dir(args)
    save_model(trained, out / "model.json")
    history.to_csv(out / "history.csv")
    argv = [
        "finetune",
        "--model", str(args.model),
        "--data", str(args.data),
        "--epochs", str(args.epochs),
        "--lr", str(args.lr),
        "--batch-size", str(args.batch_size),
        "--seed", str(args.seed),
        "--out", str(args.out),
    ]
    if args.threads is not None:
        argv += ["--threads", str(args.threads)]
    RunManifest(
        command="finetune",
        argv=argv,
        config={
            "model": str(args.model),
            "data": str(args.data),
            "epochs": args.epochs,
            "lr": args.lr,
            "batch_size": args.batch_size,
            "out": str(args.out),
        },
        seed=args.seed,
        inputs={"model": str(args.model), "data": str(args.data)},
        outputs=["model.json", "model.bin", "history.csv"],
    ).write(out)
    final = history.epochs[-1] if history.epochs else None
    if final:
        print(f"epoch {final.epoch}: loss {final.loss:.4f} accuracy {final.accuracy:.4f}")
    return 0


def cmd_eval(args) -> int:
    from .finetune import evaluate
    from .model_io import load_dataset, load_model

    model = load_model(args.model)
    dataset = load_dataset(args.data)
    accuracy, loss = evaluate(model, dataset)
    print(f"accuracy {accuracy:.6f} loss {loss:.6f}")
    if args.out is not None:
        out = _out_dir(args)
        with open(out / "eval.json", "w", encoding="utf-8") as fh:
            json.dump({"accuracy": accuracy, "loss": loss}, fh, indent=1, sort_keys=True)
            fh.write("\n")
        argv = ["eval", "--model", str(args.model), "--data", str(args.data), "--out", str(args.out)]
        if args.threads is not None:
            argv += ["--threads", str(args.threads)]
        RunManifest(
            command="eval",
            argv=argv,
            config={"model": str(args.model), "data": str(args.data), "out": str(args.out)},
            seed=None,
            inputs={"model": str(args.model), "data": str(args.data)},
            outputs=["eval.json"],
        ).write(out)
    return 0


def cmd_gen_data(args) -> int:
    from .model_io import generate_synthetic, save_dataset

    shape = tuple(_parse_list(args.shape, int, "shape"))
    if len(shape) != 3:
        raise ThinnerError(f"--shape must be C,H,W, got {args.shape!r}")
    dataset = generate_synthetic(args.classes, args.per_class, shape, seed=args.seed)
    out = _out_dir(args)
    save_dataset(dataset, out / "data.thds")
    argv = [
        "gen-data",
        "--classes", str(args.classes),
        "--per-class", str(args.per_class),
        "--shape", args.shape,
        "--seed", str(args.seed),
        "--out", str(args.out),
    ]
    if args.threads is not None:
        argv += ["--threads", str(args.threads)]
    RunManifest(
        command="gen-data",
        argv=argv,
        config={
            "classes": args.classes,
            "per_class": args.per_class,
            "shape": list(shape),
            "out": str(args.out),
        },
        seed=args.seed,
        inputs={},
        outputs=["data.thds"],
    ).write(out)
    print(f"wrote {len(dataset)} images to {out / 'data.thds'}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="thinner", description="Filter-level CNN pruning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--threads", type=int, default=None,
                       help="cap numeric thread pools (1 = bit-exact); env THINNER_THREADS")

    p = sub.add_parser("stats", help="parameter / FLOP accounting of a model")
    p.add_argument("model")
    p.add_argument("--out", default=None)
    common(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("prune", help="prune a model along a schedule")
    p.add_argument("--model", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--schedule", required=True, help="JSON list of {layer, rate}")
    p.add_argument("--method", required=True)
    p.add_argument("--images", type=int, default=10)
    p.add_argument("--locations", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--finetune-epochs", type=int, default=1)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("compare", help="compare selection methods across rates")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--rates", required=True, help="comma-separated rates")
    p.add_argument("--methods", required=True, help="comma-separated method names")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("finetune", help="train a model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="top-1 accuracy and loss of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--shape", required=True, help="C,H,W")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_gen_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _configure_threads(args.threads)
        return args.func(args)
    except ThinnerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

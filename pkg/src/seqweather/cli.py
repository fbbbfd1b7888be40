"""``seqweather`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("seqweather")


class UsageError(Exception):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key] = _parse_value(value)
    return out


# ---------------------------------------------------------------- commands


def cmd_generate_data(args) -> int:
    from .data import DEFAULT_SIZES, build_benchmark

    sizes = dict(DEFAULT_SIZES)
    for key in sizes:
        v = getattr(args, key)
        if v is not None:
            sizes[key] = v
    manifest = build_benchmark(args.out, sizes, seed=args.seed, domains=tuple(args.domains), force=args.force)
    print(f"wrote {len(manifest.rows)} images for {', '.join(manifest.domains)} to {manifest.root}")
    return 0


def build_config(args):
    from .pipeline import RunConfig

    d = {}
    if args.config:
        d.update(json.loads(Path(args.config).read_text()))
        d.pop("config_hash", None)
    d.update(_overrides(args.set))
    for key in ("seed", "manifest", "ablation", "steps"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    if args.without_source:
        d["with_source"] = False
    if args.source_ckpt:
        d["source_checkpoint"] = str(Path(args.source_ckpt).resolve())
    try:
        cfg = RunConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if cfg.manifest and not Path(cfg.manifest).exists():
        raise FileNotFoundError(f"manifest {cfg.manifest} does not exist")
    if cfg.source_checkpoint and not Path(cfg.source_checkpoint).exists():
        raise FileNotFoundError(f"source checkpoint {cfg.source_checkpoint} does not exist")
    return cfg


def cmd_run(args) -> int:
    from .data import DEFAULT_SIZES, Manifest
    from .metrics import accumulated_forgetting, miou_average
    from .pipeline import CONFIG_NAME, SequenceData, resolve_run_dir, run_sequence

    cfg = build_config(args)
    out = resolve_run_dir(args.out)
    if args.force and (out / CONFIG_NAME).exists() and not args.resume:
        shutil.rmtree(out)
    if cfg.manifest:
        data = SequenceData.from_manifest(Manifest.read(cfg.manifest), cfg.steps)
    else:
        log.info("no manifest given: generating the benchmark in memory (seed %d)", cfg.seed)
        data = SequenceData.synthetic(cfg.seed, cfg.steps, DEFAULT_SIZES)

    def on_log(rec):
        log.debug(json.dumps(rec, sort_keys=True))

    m = run_sequence(cfg, data, out, resume=args.resume, on_log=on_log)
    print(f"{out}: A.F. {accumulated_forgetting(m):.1f}  mIoU Avg. {miou_average(m):.1f}  (config {cfg.digest()})")
    return 0


def _load_metrics(run_dir):
    from .metrics import MetricMatrix
    from .pipeline import METRICS_NAME, resolve_run_dir

    path = resolve_run_dir(run_dir) / METRICS_NAME
    if not path.exists():
        raise FileNotFoundError(f"no {METRICS_NAME} in {path.parent}")
    m = MetricMatrix.load(path)
    if not m.complete():
        raise RuntimeError(f"{path.parent} is an unfinished run")
    return m


def cmd_report(args) -> int:
    from .report import compare_table, render_comparison, render_report

    m = _load_metrics(args.run)
    out = Path(args.out) if args.out else Path(args.run) / "report"
    names = args.names or [Path(args.run).name, Path(args.compare).name if args.compare else ""]
    if args.compare:
        other = _load_metrics(args.compare)
        render_comparison(m, other, out, names[:2])
        print(compare_table(m, other, names[:2]), end="")
    else:
        files = render_report(m, out, names[0], plot=not args.no_plot)
        print(files["text"].read_text(), end="")
    return 0


def cmd_compose_preview(args) -> int:
    from PIL import Image

    from .data import quantize
    from .pipeline import resolve_run_dir
    from .replay import ComposeParams, WeatherVector, replay_all

    paths = [Path(p) for p in args.vectors or []]
    if args.run:
        paths += sorted(resolve_run_dir(args.run).glob("step_*/weather.wv"))
    if not paths:
        raise UsageError("give --run or at least one --vectors file")
    vectors = [WeatherVector.load(p) for p in paths]
    image = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float64) / 255.0
    params = ComposeParams((args.sigma_min, args.sigma_max))
    composed, masks = replay_all(image, vectors, params, np.random.default_rng(args.seed))
    region = (1.0 - np.prod(masks, axis=0))[..., None].repeat(3, axis=2)
    Image.fromarray(quantize(np.concatenate([image, composed, region], axis=1))).save(args.out)
    print(f"wrote {args.out}: {len(vectors)} weather vector(s) from {', '.join(v.domain_tag for v in vectors)}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    from .data import DEFAULT_SEQUENCE
    from .trainer import ABLATIONS

    p = argparse.ArgumentParser(prog="seqweather", description="Continual multi-target weather adaptation: data, training, reports.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write the synthetic benchmark to disk")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--domains", nargs="+", default=list(DEFAULT_SEQUENCE))
    g.add_argument("--force", action="store_true", help="overwrite an existing directory")
    for key in ("source_train", "source_val", "target_train", "target_val"):
        g.add_argument("--" + key.replace("_", "-"), dest=key, type=int)
    g.set_defaults(func=cmd_generate_data)

    r = sub.add_parser("run", help="source training plus sequential adaptation")
    r.add_argument("--out", required=True, help="run directory (relative paths honour SEQWEATHER_RUN_ROOT)")
    r.add_argument("--config", help="JSON file with RunConfig fields")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field (JSON value)")
    r.add_argument("--manifest", help="benchmark manifest; omitted: generate in memory")
    r.add_argument("--seed", type=int)
    r.add_argument("--steps", nargs="+", help="target domains in order")
    r.add_argument("--ablation", choices=sorted(ABLATIONS))
    r.add_argument("--without-source", action="store_true")
    r.add_argument("--source-ckpt", help="start from this checkpoint instead of training on source")
    r.add_argument("--resume", action="store_true")
    r.add_argument("--force", action="store_true", help="discard an existing run directory")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="tables and forgetting curves for a finished run")
    rep.add_argument("run")
    rep.add_argument("--compare", help="second run directory, reported side by side")
    rep.add_argument("--names", nargs=2)
    rep.add_argument("--out")
    rep.add_argument("--no-plot", action="store_true")
    rep.set_defaults(func=cmd_report)

    c = sub.add_parser("compose-preview", help="compose stored weather vectors into an image")
    c.add_argument("--image", required=True)
    c.add_argument("--run", help="use every step's weather vector from this run")
    c.add_argument("--vectors", nargs="+")
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--sigma-min", type=float, default=0.2)
    c.add_argument("--sigma-max", type=float, default=1.2)
    c.set_defaults(func=cmd_compose_preview)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

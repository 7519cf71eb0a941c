"""Command-line runner: ``dfa-engine {run,compare,align,bench}``.

Exit codes: 0 success, 2 invalid config, 3 missing or malformed data,
4 unsupported mode, 1 any other parameter error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment as X
from .config import ConfigError, load_config, preset_names
from .datasets import IngestionError
from .parallel import UnsupportedModeError
from .tensor import ParameterError


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dfa-engine", description="Train and compare BP, DFA and shallow learners.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="config file path or preset name")
        sp.add_argument("--seed", type=int, default=None, help="override the configured seed")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--workers", type=int, default=None, help="threads for concurrent DFA updates")

    common(sub.add_parser("run", help="train one config and write metrics, alignment, summary, checkpoint"))
    cmp_ = sub.add_parser("compare", help="run two configs and report them side by side")
    cmp_.add_argument("--config", action="append", required=True, help="config file or preset; give exactly twice")
    cmp_.add_argument("--seed", type=int, default=None, help="override the seed of both configs")
    cmp_.add_argument("--out", default=None, help="output directory")
    cmp_.add_argument("--workers", type=int, default=None, help="threads for concurrent DFA updates")
    al = sub.add_parser("align", help="measure feedback alignment for a DFA checkpoint")
    common(al, config_required=False)
    al.add_argument("--checkpoint", default=None, help="checkpoint.bin from a DFA run (default: fresh network)")
    be = sub.add_parser("bench", help="time sequential versus concurrent DFA updates")
    common(be)
    be.add_argument("--repeats", type=int, default=3, help="timed repetitions per worker count")
    sub.add_parser("presets", help="list shipped presets")
    return p


def _workers_list(n: int | None) -> list[int]:
    if n is None:
        return [1, 2, 4, 8]
    out, w = [], 1
    while w < n:
        out.append(w)
        w *= 2
    return out + [n]


def _dispatch(args) -> int:
    if args.command == "presets":
        print("\n".join(preset_names()))
        return 0
    if args.command == "run":
        cfg, text = load_config(args.config, args.seed)
        summary = X.run(cfg, args.out, args.workers, config_text=text)
        print(json.dumps({k: summary[k] for k in ("name", "mode", "metric", "best_val_metric",
                                                  "test_metric_at_best_val", "final_test_metric")}, indent=2))
        return 0
    if args.command == "compare":
        if len(args.config) != 2:
            raise ConfigError("compare: pass --config exactly twice")
        (cfg_a, _), (cfg_b, _) = (load_config(c, args.seed) for c in args.config)
        out = args.out or str(Path("runs") / f"compare_{cfg_a.experiment['name']}_{cfg_b.experiment['name']}")
        print(X.format_compare(X.compare(cfg_a, cfg_b, out, args.workers)))
        return 0
    if args.command == "align":
        cfg = None
        if args.checkpoint is None:
            if args.config is None:
                raise ConfigError("align: pass --checkpoint or --config")
            cfg, _ = load_config(args.config, args.seed)
        out = args.out or (str(Path(args.checkpoint).parent) if args.checkpoint else cfg.experiment["output_dir"])
        for r in X.align_checkpoint(args.checkpoint, cfg, out):
            print(f"{r.layer_id}: mean {r.mean_cosine:+.4f} std {r.std_cosine:.4f} n {r.sample_count}")
        return 0
    cfg, _ = load_config(args.config, args.seed)
    report = X.bench(cfg, _workers_list(args.workers), args.repeats, args.out or cfg.experiment["output_dir"])
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except IngestionError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except UnsupportedModeError as exc:
        print(f"unsupported mode: {exc}", file=sys.stderr)
        return 4
    except ParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command line front door: ``boostseq {synth,boost,eval,explain,report}``.

Failures print one JSON line ``{"error": kind, "code": n, "message": ...}`` to
stderr and exit with 2 (config), 3 (data) or 4 (numeric).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import boosting as bs
from . import diffcore as dc
from . import metrics as mt
from . import runs
from . import synthdata as sd
from .synthdata import ConfigError

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _fail(kind: str, code: int, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "code": code, "message": " ".join(str(message).split())},
                                sort_keys=True) + "\n")
    return code


def cmd_synth(args) -> int:
    config, seed = runs.load_synth_config(args.config)
    seed = args.seed if args.seed is not None else seed
    if seed is None:
        raise ConfigError("a seed is required (--seed or [synth] seed)")
    ds = sd.generate(config, seed)
    out = sd.save_dataset(ds, args.out)
    print(f"wrote {len(ds.videos)} sequences to {out}")
    return 0


def cmd_boost(args) -> int:
    over = {"data": args.data, "out": args.out, "strategy": args.strategy, "seed": args.seed}
    if args.families:
        over["families"] = tuple(s.strip() for s in args.families.split(",") if s.strip())
    cfg = runs.load_run_config(args.config, **over)
    ds = runs.load_data(cfg.data)

    def progress(state: bs.BoostState) -> None:
        r = state.history[-1]
        print(f"iteration {r.iteration}: {r.selected} alpha={r.alpha:.6g} train={r.train_loss:.6g} "
              f"val={r.val_loss:.6g} {'accepted' if r.accepted else 'rejected'}", flush=True)

    model, state = runs.train_model(ds, cfg, progress)
    out = runs.save_model(model, state, cfg.out, ds)
    print(f"wrote run to {out}")
    return 0


def cmd_eval(args) -> int:
    model = runs.load_model(args.model)
    ds = runs.load_data(args.data)
    report, scores, labels, mask = runs.evaluate_model(model, ds, args.split, args.mode, args.consensus,
                                                       not args.no_smooth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "report.csv")
    mt.write_curves(scores, labels, mask, model.tools, out / "curves")
    print(f"mAz={report.m_az:.6f} mAP={report.m_ap:.6f} excluded={report.excluded}")
    return 0


def cmd_explain(args) -> int:
    model = runs.load_model(args.model)
    ds = runs.load_data(args.data)
    summary = runs.explain_model(model, ds, args.split, args.out, args.frames)
    print(f"wrote {len(summary['heatmaps'])} heatmaps to {args.out}")
    return 0


def cmd_report(args) -> int:
    try:
        a = [mt.EvalReport.read_csv(p) for p in args.a]
        b = [mt.EvalReport.read_csv(p) for p in args.b]
    except (OSError, KeyError, ValueError) as exc:
        raise runs.DataError(f"cannot read report: {exc}") from None
    result = runs.compare_reports(a, b)
    runs.write_comparison(args.out, result)
    print(f"p_az={result['p_az']:.6g} p_ap={result['p_ap']:.6g} wins_a={result['wins_a_m_az']}/{result['runs']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="boostseq", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic workflow dataset")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("boost", help="train a boosted CNN+RNN network")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--strategy", choices=("joint", "sequential"))
    p.add_argument("--families", help="comma list from cnn,rnn; 'cnn' boosts the CNN block only")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_boost)

    p = sub.add_parser("eval", help="score a trained run on one split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=sd.SPLITS)
    p.add_argument("--mode", default="offline", choices=("offline", "online"))
    p.add_argument("--consensus", action="store_true", help="evaluate only where both annotators agree")
    p.add_argument("--no-smooth", action="store_true", help="skip median filtering")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="sensitivity heatmaps and the RNN gradient matrix")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=sd.SPLITS)
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("report", help="paired t-tests between two groups of eval reports")
    p.add_argument("--a", nargs="+", required=True)
    p.add_argument("--b", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("config", EXIT_CONFIG, exc)
    except (runs.DataError, FileNotFoundError) as exc:
        return _fail("data", EXIT_DATA, exc)
    except (dc.NumericError, bs.BoostError) as exc:
        return _fail("numeric", EXIT_NUMERIC, exc)


if __name__ == "__main__":
    sys.exit(main())

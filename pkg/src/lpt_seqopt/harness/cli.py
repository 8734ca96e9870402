"""Command-line entry point: ``lpt-seqopt <subcommand> [flags]``.

Failures exit nonzero and print one JSON object ``{"error", "message"}`` on
stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .. import oracles as orc
from ..model import load_checkpoint, save_checkpoint
from ..seqcore import SeqError, Vocabulary, decode
from ..trainer import MetricsLog
from . import experiment as ex
from .config import ConfigError, from_dict, strip_comments
from .metrics import evaluate_file
from .presets import ABLATIONS, LAMBDA_SWEEP, _merge, preset_dict, variant_dict

log = logging.getLogger("lpt_seqopt")

EXIT_USAGE, EXIT_FAILURE = 2, 1


def _setup_logging():
    level = os.environ.get("LPT_SEQOPT_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _common(p):
    p.add_argument("--config", help="run config JSON (comments allowed)")
    p.add_argument("--preset", default="tfbind8", help="base preset when --config is absent")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--budget", type=int, help="override the oracle query budget")
    p.add_argument("--threads", type=int, default=1, help="worker threads (runs are serial)")
    p.add_argument("--cache", help="directory for cached offline models")


def build_parser():
    parser = argparse.ArgumentParser(prog="lpt-seqopt",
                                     description="Latent prompt transformer sequence optimizer")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train on sequences only")
    _common(p)
    p = sub.add_parser("finetune", help="train on sequences with labels")
    _common(p)
    p.add_argument("--checkpoint", help="start from this checkpoint (e.g. a pretrain output)")
    p = sub.add_parser("optimize", help="offline training followed by the online loop")
    _common(p)
    p.add_argument("--checkpoint", help="skip offline training and start from this model")
    p = sub.add_parser("evaluate", help="metrics for a run report")
    p.add_argument("report", help="report.json written by optimize")
    p.add_argument("--out", help="write the metrics JSON here instead of stdout")
    p = sub.add_parser("ablate", help="run the loop with one mechanism toggled")
    _common(p)
    p.add_argument("--variant", required=True,
                   choices=sorted(ABLATIONS) + ["lambda-sweep", "all"])
    p.add_argument("--lambdas", default=",".join(str(v) for v in LAMBDA_SWEEP),
                   help="guidance weights for the lambda sweep")
    p = sub.add_parser("make-oracle", help="write an oracle definition JSON")
    p.add_argument("--kind", choices=["table", "constrained", "motif"], default="table")
    p.add_argument("--symbols", default="ACGT")
    p.add_argument("--length", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--feasible-frac", type=float, default=0.1)
    p.add_argument("--motif", action="append", default=[], metavar="PATTERN:WEIGHT")
    p.add_argument("--length-penalty", type=float, default=0.0)
    p.add_argument("--noise-pct", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p = sub.add_parser("brute-force", help="enumerate an oracle and print its exact optimum")
    p.add_argument("--oracle", required=True)
    p.add_argument("--top", type=int, default=0, help="also list this many best sequences")
    return parser


def resolve_config(args):
    if args.config:
        text = Path(args.config).read_text(encoding="utf-8")
        try:
            data = json.loads(strip_comments(text))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: invalid JSON ({e})") from None
    else:
        data = preset_dict(args.preset)
    top = {}
    if args.seed is not None:
        top["seed"] = args.seed
    if args.out:
        top["out_dir"] = args.out
    if getattr(args, "cache", None):
        top["cache_dir"] = args.cache
    top["threads"] = args.threads
    if args.budget is not None:
        top["dso"] = {"budget": args.budget}
    return _merge(data, top)


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _summary(report):
    best = report["best_ever"]
    return {"best_sequence": best["sequence"], "best_score": best["score"],
            "best_rank": best.get("rank"), "queries_used": report["queries_used"],
            "iterations": report["iterations"], "stop_reason": report["stop_reason"]}


def cmd_train(args, stages):
    cfg = from_dict(resolve_config(args))
    out = Path(cfg.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    task = ex.build_task(cfg)
    metrics_path = out / "metrics.jsonl"
    if metrics_path.exists():
        metrics_path.unlink()
    metrics = MetricsLog(metrics_path)
    if getattr(args, "checkpoint", None):
        model, _, _ = load_checkpoint(args.checkpoint)
        model = ex.continue_training(cfg, task, model, stages, metrics)
    else:
        model = ex.offline_train(cfg, task, metrics, stages=stages)
    save_checkpoint(out / "model.ckpt", model, seed=cfg.seed, config=cfg.to_dict(),
                    counters={"stages": list(stages)})
    print(json.dumps({"checkpoint": str(out / "model.ckpt"), "n_params": model.n_params,
                      "steps": len(metrics.rows)}))
    return 0


def cmd_optimize(args):
    cfg = from_dict(resolve_config(args))
    model = None
    if args.checkpoint:
        model, _, _ = load_checkpoint(args.checkpoint)
    report = ex.optimize(cfg, model=model)
    print(json.dumps(_summary(report)))
    return 0


def cmd_evaluate(args):
    rep = evaluate_file(args.report).to_dict()
    if args.out:
        _write_json(args.out, rep)
    else:
        print(json.dumps(rep, indent=2, sort_keys=True))
    return 0


def cmd_ablate(args):
    base = resolve_config(args)
    out = Path(base.get("out_dir") or "ablation")
    if args.variant == "all":
        names = sorted(ABLATIONS) + ["lambda-sweep"]
    else:
        names = [args.variant]
    runs = {"full": base}
    for name in names:
        if name == "lambda-sweep":
            for lam in (float(v) for v in args.lambdas.split(",")):
                runs[f"lambda-{lam:g}"] = _merge(base, {"dso": {"guidance_weight": lam}})
        else:
            runs[name] = variant_dict(base, name)
    summary = {}
    for name, data in runs.items():
        cfg = from_dict(_merge(data, {"out_dir": str(out / name)}))
        report = ex.optimize(cfg)
        ev = evaluate_file(out / name / "report.json").to_dict()
        summary[name] = dict(_summary(report), final_proposal_top100_mean=report[
            "final_proposal_top100_mean"], auc_top10=ev["auc_top10"], top100_mean=ev["top100_mean"])
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_make_oracle(args):
    vocab = Vocabulary(tuple(args.symbols), args.length)
    if args.kind == "table":
        oracle = orc.TableOracle(vocab, seed=args.seed)
    elif args.kind == "constrained":
        oracle = orc.constrained_table_task(vocab, args.seed, args.feasible_frac)
    else:
        vocab = Vocabulary(tuple(args.symbols), args.length, eos=True)
        motifs = []
        for m in args.motif:
            pattern, _, weight = m.partition(":")
            motifs.append((pattern, float(weight or 1.0)))
        oracle = orc.MotifOracle(vocab, motifs, args.length_penalty)
    if args.noise_pct:
        oracle = orc.NoisyOracle(oracle, args.noise_pct, seed=args.seed)
    orc.save_oracle(args.out, oracle)
    print(json.dumps({"oracle": args.out, "kind": oracle.kind}))
    return 0


def cmd_brute_force(args):
    oracle = orc.load_oracle(args.oracle)
    res = orc.brute_force(oracle)
    out = {"max": res["max"], "argmax": decode(res["argmax"], oracle.vocab), "min": res["min"],
           "n_total": res["n_total"], "n_feasible": res["n_feasible"]}
    if args.top:
        tokens, scores = orc.all_scores(oracle)
        mask = (orc.feasible(scores, oracle.constraint_specs())
                if isinstance(oracle, orc.CompositeOracle) else None)
        order = [i for i in sorted(range(len(tokens)), key=lambda i: -scores[i, 0])
                 if mask is None or mask[i]][:args.top]
        out["top"] = [{"sequence": decode(tokens[i], oracle.vocab), "score": float(scores[i, 0])}
                      for i in order]
    print(json.dumps(out, indent=2))
    return 0


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if args.command == "pretrain":
            return cmd_train(args, ("pretrain",))
        if args.command == "finetune":
            return cmd_train(args, ("finetune",) if args.checkpoint else ("pretrain", "finetune"))
        if args.command == "optimize":
            return cmd_optimize(args)
        if args.command == "evaluate":
            return cmd_evaluate(args)
        if args.command == "ablate":
            return cmd_ablate(args)
        if args.command == "make-oracle":
            return cmd_make_oracle(args)
        if args.command == "brute-force":
            return cmd_brute_force(args)
    except (ConfigError, SeqError, orc.OracleError, KeyError, ValueError, OSError) as e:
        err = {"error": type(e).__name__, "message": str(e).strip("'\"")}
        print(json.dumps(err), file=sys.stderr)
        return EXIT_USAGE if isinstance(e, (ConfigError, KeyError)) else EXIT_FAILURE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

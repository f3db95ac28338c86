"""Command line entry point: ``escorte <subcommand> ...``.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import action, config, escortctl, numcore as nc, reid, simworld
from .harness import evaluate, latency, seqio

log = logging.getLogger("escorte")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DATA_ERRORS = (
    config.ConfigError,
    simworld.ConfigError,
    reid.ConfigError,
    seqio.ParseError,
    seqio.VersionError,
    nc.CheckpointError,
    nc.ShapeError,
    FileNotFoundError,
    IsADirectoryError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")


def _load_reid(path) -> reid.EmbeddingModel:
    return reid.EmbeddingModel.from_bytes(Path(path).read_bytes())


def _load_action(path) -> action.ActionModel:
    return action.ActionModel.from_bytes(Path(path).read_bytes())


def cmd_generate(args) -> int:
    kv = config.read_kv(args.spec) if args.spec else {}
    spec = config.corpus_spec(kv, args.spec or "<defaults>")
    corpus = simworld.generate_corpus(spec, args.seed)
    meta = {"seed": args.seed, "dim": spec.dim, "fps": spec.fps, "identities": spec.identities}
    seqio.save_corpus(corpus, args.out, meta)
    counts = {s: len(corpus.split(s)) for s in ("train", "dev", "test")}
    print(f"wrote {len(corpus.sequences)} sequences to {args.out} {counts}")
    return EXIT_OK


def cmd_train_reid(args) -> int:
    kv = config.read_kv(args.config) if args.config else {}
    cfg = config.reid_config(kv, args.config or "<defaults>")
    train = seqio.load_corpus(args.corpus, ["train"]).sequences
    pool = reid.TripletPool.from_sequences(train)
    model, hist = reid.train_reid(pool, cfg)
    Path(args.out).write_bytes(model.to_bytes())
    print(f"re-ID: {cfg.steps} steps, loss {hist[0]:.4f} -> {np.mean(hist[-20:]):.4f}; wrote {args.out}")
    return EXIT_OK


def cmd_train_action(args) -> int:
    kv = config.read_kv(args.config) if args.config else {}
    src = args.config or "<defaults>"
    reid_path = args.reid or kv.get("reid")
    if reid_path and args.config and not args.reid:
        reid_path = str(Path(args.config).parent / reid_path)
    kind = kv.get("input", "embed").strip()
    if reid_path is None:
        raise UsageError("train-action needs a re-ID checkpoint (--reid or 'reid' config key)")
    rmodel = _load_reid(reid_path)
    cfg = config.action_config(kv, evaluate.token_dim(rmodel, kind), src)
    train = seqio.load_corpus(args.corpus, ["train"]).sequences
    streams = evaluate.ground_truth_streams(rmodel, train, cfg.input)
    model, hist = action.train_action(streams, cfg)
    Path(args.out).write_bytes(model.to_bytes())
    print(f"action: {cfg.steps} steps, loss {hist[0]:.4f} -> {np.mean(hist[-20:]):.4f}; wrote {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    rmodel, amodel = _load_reid(args.reid), _load_action(args.action)
    seqs = seqio.load_corpus(args.corpus, [args.split]).sequences
    if not seqs:
        raise seqio.ParseError(f"{args.corpus}: split {args.split!r} is empty")
    report = evaluate.evaluate_joint(rmodel, amodel, seqs, args.threshold)
    if args.report:
        _write_json(args.report, report.to_dict())
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_bench(args) -> int:
    rmodel, amodel = _load_reid(args.reid), _load_action(args.action)
    rep = latency.measure_latency(
        rmodel, amodel, args.frames, nc.make_rng(args.seed), fps=args.fps, alpha_as_prose=args.alpha_as_prose
    )
    out = {"t_r": rep.t_r, "t_a": rep.t_a, "t_f": rep.t_f, "w": rep.w, "t_i": rep.t_i, "realtime": rep.t_r <= rep.t_f}
    if args.report:
        _write_json(args.report, out)
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def control_replay(
    rmodel, amodel, seqs, ctl: escortctl.ControlConfig, threshold: float = reid.DEFAULT_THRESHOLD
) -> list[dict]:
    """Drive the controller from pipeline output; one record per frame once warm."""
    records = []
    for seq in seqs:
        tr = evaluate.run_pipeline(rmodel, amodel, seq, threshold)
        if tr is None or len(tr.probs) == 0:
            continue
        dt = seq.frames[1].t - seq.frames[0].t if len(seq.frames) > 1 else 1 / 30
        state = escortctl.reset(ctl)
        for j, pr in enumerate(tr.probs):
            k = tr.first_pred_frame + j
            obs = None if tr.chosen[k] is None else action.ActionState(int(np.argmax(pr)))
            state, cmd = escortctl.control_step(state, obs, dt, ctl)
            records.append(escortctl.command_record(seq.frames[k].t, state, cmd, seq_id=seq.seq_id))
            if state.mode is escortctl.Mode.ABORTED:
                break
    return records


def cmd_control_sim(args) -> int:
    rmodel, amodel = _load_reid(args.reid), _load_action(args.action)
    ctl = config.control_config(config.read_kv(args.control)) if args.control else escortctl.ControlConfig()
    seqs = seqio.load_corpus(args.corpus, [args.split]).sequences
    records = control_replay(rmodel, amodel, seqs, ctl, args.threshold)
    with open(args.log, "w", encoding="utf-8") as fh:
        escortctl.write_command_log(records, fh)
    print(f"wrote {len(records)} command records to {args.log}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="escorte", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="generate a synthetic corpus")
    g.add_argument("--spec", help="corpus key-value config (defaults if omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, required=True)
    g.set_defaults(fn=cmd_generate)

    r = sub.add_parser("train-reid", help="train the embedding head")
    r.add_argument("--corpus", required=True)
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_train_reid)

    a = sub.add_parser("train-action", help="train the action classifier")
    a.add_argument("--corpus", required=True)
    a.add_argument("--config")
    a.add_argument("--reid", help="re-ID checkpoint used to embed subject detections")
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_train_action)

    for name, fn, helptext in (
        ("evaluate", cmd_evaluate, "evaluate the joint pipeline"),
        ("bench", cmd_bench, "measure latency"),
        ("control-sim", cmd_control_sim, "replay sequences through the controller"),
    ):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--reid", required=True)
        c.add_argument("--action", required=True)
        if name != "bench":
            c.add_argument("--corpus", required=True)
            c.add_argument("--split", default="test")
            c.add_argument("--threshold", type=float, default=reid.DEFAULT_THRESHOLD)
        c.set_defaults(fn=fn)
    sub.choices["evaluate"].add_argument("--report")
    b = sub.choices["bench"]
    b.add_argument("--frames", type=int, default=300)
    b.add_argument("--fps", type=float, default=30.0)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--alpha-as-prose", action="store_true", help="flip the latency gate")
    b.add_argument("--report")
    cs = sub.choices["control-sim"]
    cs.add_argument("--log", required=True)
    cs.add_argument("--control", help="controller key-value config")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"escorte: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as e:
        print(f"escorte: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        print(f"escorte: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

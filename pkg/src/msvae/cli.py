"""Command-line surface: gen-data, train, eval, report.

Batch operation only; every command is deterministic under fixed flags and
seeds, and every output artifact embeds the resolved configuration.
Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfg_mod
from . import corpus as corpus_mod
from . import gridworld as gw
from . import metrics as metrics_mod
from . import model as md
from . import pipelines as pl

logger = logging.getLogger(__name__)

PIPELINES = ("supervised-follower", "supervised-speaker", "msvae",
             "speaker-follower", "msvae-speaker-follower")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _add_common(p):
    p.add_argument("--preset", default="desk_scale", choices=sorted(cfg_mod.PRESETS))
    p.add_argument("--config", default=None, help="JSON config file merged over the preset")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="dot-path config override")


def build_parser() -> _Parser:
    parser = _Parser(prog="msvae", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a corpus directory")
    _add_common(g)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="run a training pipeline")
    _add_common(t)
    t.add_argument("--pipeline", required=True)
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None, help="training-state checkpoint to resume from")
    t.add_argument("--speaker-checkpoint", default=None,
                   help="reuse a trained speaker for the speaker-follower pipelines")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(e)
    e.add_argument("--checkpoint", required=True, help="model checkpoint, or 'oracle' for the harness self-test")
    e.add_argument("--corpus", required=True)
    e.add_argument("--mode", required=True, choices=("follow", "speak", "pragmatic"))
    e.add_argument("--candidates", type=int, default=None)
    e.add_argument("--speaker-checkpoint", default=None)
    e.add_argument("--out", default=None, help="eval.json path (default: next to the checkpoint's run)")

    r = sub.add_parser("report", help="aggregate run directories into a markdown table")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--compare", action="append", default=[], metavar="A:B",
                   help="one-sided t-test of condition A > condition B")
    r.add_argument("--out", default=None)
    return parser


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    doc = cfg_mod.resolve(args.preset, args.config, args.overrides)
    c = doc["corpus"]
    summary = corpus_mod.generate(
        args.out, seed=c["seed"], difficulty=c["difficulty"], m=c["m"], n=c["n"],
        val_tasks=c["val_tasks"], test_tasks=c["test_tasks"],
        subgoal_weights=tuple(c["subgoal_weights"]),
    )
    Path(args.out, "config.json").write_text(json.dumps(doc, sort_keys=True) + "\n")
    print(f"corpus at {args.out}: M={c['m']} N={c['n']} vocab={summary['vocab_size']}")
    for split in ("paired", "unpaired", "val", "test"):
        s = summary[split]
        print(f"  {split}: count={s['count']} mean_actions={s['mean_actions']:.2f} "
              f"mean_tokens={s['mean_tokens']:.2f}")
    for name in ("paired.jsonl", "unpaired.jsonl", "val.jsonl", "test.jsonl", "vocab.json"):
        print(f"  sha256 {name} {_sha256(Path(args.out) / name)}")
    return 0


def cmd_train(args) -> int:
    doc = cfg_mod.resolve(args.preset, args.config, args.overrides)
    if args.pipeline not in PIPELINES:
        raise UsageError(f"unknown pipeline {args.pipeline!r}; have {PIPELINES}")
    corpus = corpus_mod.load(args.corpus)
    tc = cfg_mod.train_config(doc)
    out = Path(args.out)

    if args.pipeline == "supervised-follower":
        ck, rec = pl.train_supervised_follower(tc, corpus, out, resume_from=args.resume)
    elif args.pipeline == "supervised-speaker":
        ck, rec = pl.train_supervised_speaker(tc, corpus, out, resume_from=args.resume)
    elif args.pipeline == "msvae":
        ck, rec = pl.train_msvae(tc, corpus, out, resume_from=args.resume)
    else:
        speaker_ck = args.speaker_checkpoint
        if speaker_ck is None:
            stage = out / ("msvae_stage" if args.pipeline == "msvae-speaker-follower" else "speaker_stage")
            if args.pipeline == "msvae-speaker-follower":
                speaker_ck, _ = pl.train_msvae(tc, corpus, stage)
            else:
                speaker_ck, _ = pl.train_supervised_speaker(tc, corpus, stage)
        ck, rec = pl.train_speaker_follower(tc, corpus, out, speaker_ck,
                                            pipeline_name=args.pipeline)
    # re-embed the pipeline name and full resolved doc in the run config
    run_cfg = json.loads((out / "config.json").read_text())
    run_cfg["pipeline"] = args.pipeline
    run_cfg["resolved"] = doc
    (out / "config.json").write_text(json.dumps(run_cfg, sort_keys=True) + "\n")
    print(f"pipeline={args.pipeline} selected_epoch={rec.selected_epoch} "
          f"{rec.metric_name}={rec.selected_metric:.4f} checkpoint={ck}")
    return 0


class _OracleFollower:
    """Sentinel follower used for the eval-harness self-test."""

    def __init__(self, corpus):
        self.corpus = corpus
        self._tasks = {}

    def register(self, world, task):
        self._tasks[id(world)] = task

    def follow(self, tokens, world, mode="greedy", rng=None, max_steps=64):
        actions = gw.oracle_solve(world, self._tasks[id(world)])
        states, traj = gw.rollout(world, actions)
        return traj, states


def cmd_eval(args) -> int:
    doc = cfg_mod.resolve(args.preset, args.config, args.overrides)
    ev = doc["eval"]
    if args.candidates is not None:
        ev = dict(ev, candidates=args.candidates)
    corpus = corpus_mod.load(args.corpus)
    records = corpus.test if ev["split"] == "test" else corpus.val
    limit = ev["limit"]
    recs = records[:limit] if limit else records
    rng = np.random.default_rng(ev["seed"])

    if args.checkpoint == "oracle":
        if args.mode != "follow":
            raise UsageError("the oracle sentinel only follows")
        follower = _OracleFollower(corpus)
        eps = []
        for rec in recs:
            world, task = corpus.rebuild(rec)
            follower.register(world, task)
            eps.append(metrics_mod.Episode(rec["tokens"], world, task, gw.step_cap(len(rec["actions"]))))
        rep = metrics_mod.success_rate(follower, eps)
        sr, bleu, n = rep.sr, 0.0, rep.n_episodes
        out_path = Path(args.out) if args.out else Path("eval.json")
        meta = {"kind": "oracle"}
    else:
        model, meta = md.load_model(args.checkpoint)
        kind = meta["kind"]
        if args.mode == "follow" and kind not in ("follower", "msvae"):
            raise UsageError(f"checkpoint kind {kind!r} cannot follow")
        if args.mode == "speak" and kind not in ("speaker", "msvae"):
            raise UsageError(f"checkpoint kind {kind!r} cannot speak")
        if args.mode == "pragmatic" and kind not in ("follower", "msvae"):
            raise UsageError(f"checkpoint kind {kind!r} cannot follow")

        if args.mode == "follow":
            rep = pl.evaluate_follower(model, corpus, recs, decoding=ev["decoding"], rng=rng)
            sr, bleu, n = rep.sr, 0.0, rep.n_episodes
        elif args.mode == "speak":
            bleu, n = pl.evaluate_speaker(model, corpus, recs)
            sr = 0.0
        else:
            n_cand = ev["candidates"]
            if n_cand == 0:
                rep = pl.evaluate_follower(model, corpus, recs, decoding="greedy", rng=rng)
            else:
                if args.speaker_checkpoint:
                    speaker, smeta = md.load_model(args.speaker_checkpoint)
                    if smeta["kind"] not in ("speaker", "msvae"):
                        raise UsageError(f"checkpoint kind {smeta['kind']!r} cannot speak")
                elif kind == "msvae":
                    speaker = model
                else:
                    raise UsageError("pragmatic mode needs --speaker-checkpoint for a plain follower")
                rep = pl.evaluate_pragmatic(model, speaker, corpus, recs, n_cand, rng)
            sr, bleu, n = rep.sr, 0.0, rep.n_episodes
        default_out = Path(args.checkpoint).parent.parent / "eval.json"
        out_path = Path(args.out) if args.out else default_out

    metrics_mod.write_eval_json(
        out_path, sr=sr, bleu=bleu, n_episodes=n, seed=ev["seed"], checkpoint=args.checkpoint,
        extra={"mode": args.mode, "split": ev["split"], "corpus": str(args.corpus),
               "candidates": ev["candidates"] if args.mode == "pragmatic" else None,
               "config": doc},
    )
    print(f"mode={args.mode} n={n} SR={sr:.4f} BLEU={bleu:.4f} -> {out_path}")
    return 0


def _load_run(run_dir: Path) -> dict:
    out = {"dir": str(run_dir)}
    cfg_path = run_dir / "config.json"
    out["config"] = json.loads(cfg_path.read_text()) if cfg_path.exists() else {}
    rr = run_dir / "runrecord.json"
    out["runrecord"] = json.loads(rr.read_text()) if rr.exists() else None
    ej = run_dir / "eval.json"
    out["eval"] = json.loads(ej.read_text()) if ej.exists() else None
    return out


def _condition(run: dict) -> str:
    return run["config"].get("pipeline", "unknown")


def _score(run: dict) -> tuple[float, float]:
    """(SR, BLEU) for aggregation; prefers test eval.json over val record."""
    if run["eval"] is not None:
        return float(run["eval"]["sr"]), float(run["eval"]["bleu4"])
    rr = run["runrecord"]
    if rr is None:
        raise cfg_mod.ConfigError(f"run {run['dir']} has neither eval.json nor runrecord.json")
    best = max(rr["entries"], key=lambda e: e["smoothed"]) if rr["entries"] else {"sr": 0.0, "bleu": 0.0}
    return float(best["sr"]), float(best["bleu"])


def cmd_report(args) -> int:
    runs = [_load_run(Path(d)) for d in args.runs]
    groups: dict[str, list[dict]] = {}
    for run in runs:
        groups.setdefault(_condition(run), []).append(run)

    for name, rs in groups.items():
        sources = {(r["eval"] or {}).get("corpus") for r in rs if r["eval"]}
        if len(sources) > 1:
            logger.warning("condition %s aggregates runs on different corpora: %s", name, sources)

    lines = ["| condition | seeds | SR | BLEU |", "|---|---|---|---|"]
    scores: dict[str, dict[str, list[float]]] = {}
    for name in sorted(groups):
        srs, bleus = zip(*(_score(r) for r in groups[name]))
        scores[name] = {"sr": list(srs), "bleu": list(bleus)}
        lines.append(
            f"| {name} | {len(srs)} | {np.mean(srs):.3f} ± {np.std(srs, ddof=min(1, len(srs) - 1)):.3f} "
            f"| {np.mean(bleus):.4f} ± {np.std(bleus, ddof=min(1, len(bleus) - 1)):.4f} |"
        )
    if args.compare and any(len(g) >= 2 for g in groups.values()):
        lines.append("")
        for pair in args.compare:
            a, b = pair.split(":")
            if a not in scores or b not in scores:
                raise UsageError(f"--compare {pair}: unknown condition")
            if len(scores[a]["sr"]) < 2 or len(scores[b]["sr"]) < 2:
                lines.append(f"p(SR {a} > {b}): needs >= 2 seeds per side")
                continue
            p = metrics_mod.t_test_one_sided(scores[a]["sr"], scores[b]["sr"])
            lines.append(f"p(SR {a} > {b}) = {p:.3g}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "gen-data":
            return cmd_gen_data(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "report":
            return cmd_report(args)
        raise UsageError(f"unknown command {args.command!r}")
    except (UsageError, cfg_mod.ConfigError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (corpus_mod.CorpusError, FileNotFoundError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except pl.NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

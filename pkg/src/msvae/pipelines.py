"""Training loops and experiment pipelines: supervised baselines, the
semi-supervised latent model, speaker-follower augmentation, and simplified
pragmatic inference.

Every pipeline is bit-deterministic under (seed, config, corpus): all
randomness flows from named substreams of the config seed, metrics.csv holds
only step plus the nine loss terms (wall-clock goes to timing.csv), and
checkpoints carry optimizer and rng state so runs can resume exactly.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import corpus as corpus_mod
from . import gridworld as gw
from . import metrics as metrics_mod
from . import model as md
from . import nn

logger = logging.getLogger(__name__)

MAX_CONSECUTIVE_SKIPS = 50
SMOOTH_WINDOW = 5


class NumericFailure(RuntimeError):
    pass


@dataclass
class ArchConfig:
    hidden: int = 64
    obs_hidden: int = 128
    word_emb: int = 32
    action_emb: int = 16
    attn_dim: int = 64
    prior_hidden: int = 128
    cell_dim: int = 32
    input_feed: bool = True
    obs_view: str = "ego"


@dataclass
class TrainConfig:
    seed: int
    epochs: int = 60
    iters_per_epoch: int = 100
    paired_batch: int = 32
    unpaired_batch: int = 32
    hp: md.HyperParams = field(default_factory=md.HyperParams)
    arch: ArchConfig = field(default_factory=ArchConfig)
    pretrain_follower: str | None = None
    pretrain_speaker: str | None = None
    eval_every: int = 1
    eval_tasks: int = 100
    arch_variant: str = "attention"  # supervised follower: attention | no_attention | bottleneck
    include_real_pairs: bool = True  # speaker-follower: mix real pairs into pseudo data
    follow_cap: int = 64

    def __post_init__(self):
        if min(self.epochs, self.iters_per_epoch, self.paired_batch) <= 0:
            raise ValueError("epochs, iterations and batch sizes must be positive")

    def model_config(self, vocab_size: int) -> md.ModelConfig:
        return md.ModelConfig(
            vocab_size=vocab_size,
            obs_dim=gw.OBS_VIEWS[self.arch.obs_view][1],
            hidden=self.arch.hidden,
            obs_hidden=self.arch.obs_hidden,
            word_emb=self.arch.word_emb,
            action_emb=self.arch.action_emb,
            attn_dim=self.arch.attn_dim,
            k_slots=self.hp.k_slots,
            latent_dim=self.hp.latent_dim,
            prior_hidden=self.arch.prior_hidden,
            cell_dim=self.arch.cell_dim,
            input_feed=self.arch.input_feed,
            obs_view=self.arch.obs_view,
        )


@dataclass
class RunRecord:
    entries: list[dict]
    selected_epoch: int
    selected_metric: float
    metric_name: str
    checkpoint: str
    config: dict

    def save(self, path):
        Path(path).write_text(json.dumps(asdict(self), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text()))


def smoothed_curve(values, window: int = SMOOTH_WINDOW) -> list[float]:
    """Trailing moving average; entry i averages the last <= window values."""
    out = []
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out.append(float(np.mean(values[lo : i + 1])))
    return out


# ---------------------------------------------------------------------------
# batches from corpus records


def pair_batches(records, corpus, idx, view: str = "ego") -> tuple[md.LangBatch, md.TrajBatch]:
    chosen = [records[i] for i in idx]
    lang = md.make_lang_batch([r["tokens"] for r in chosen])
    traj = md.make_traj_batch([corpus.trajectory(r, view) for r in chosen])
    return lang, traj


def traj_batch(records, corpus, idx, view: str = "ego") -> md.TrajBatch:
    return md.make_traj_batch([corpus.trajectory(records[i], view) for i in idx])


# ---------------------------------------------------------------------------
# evaluation helpers


def evaluate_follower(model, corpus, records, decoding: str = "greedy", rng=None,
                      limit: int | None = None) -> metrics_mod.EvalReport:
    eps = metrics_mod.episodes_from_records(corpus, records[:limit] if limit else records)
    return metrics_mod.success_rate(model, eps, decoding=decoding, rng=rng)


def evaluate_speaker(model, corpus, records, limit: int | None = None) -> tuple[float, int]:
    recs = records[:limit] if limit else records
    view = model.cfg.obs_view
    hyps, refs = [], []
    for rec in recs:
        tokens, _ = model.speak(corpus.trajectory(rec, view))
        hyps.append(tokens)
        refs.append(rec["tokens"])
    return metrics_mod.bleu4(hyps, refs), len(recs)


# ---------------------------------------------------------------------------
# run directory plumbing


def _zero_report(objective: float, slot: str) -> md.LossReport:
    """Degenerate report for single-term pipelines: the objective sits in one
    cross-modal slot so the recombination identity still holds exactly."""
    terms = dict(a1=0.0, a2=0.0, b1=0.0, b2=0.0, c1=0.0, c2=0.0, v=0.0, dprime=0.0)
    terms[slot] = objective
    return md.LossReport(total=0.5 * objective, **terms)


class _Run:
    """Shared training-loop state: model, optimizer, rng streams, logging."""

    def __init__(self, cfg: TrainConfig, corpus, out_dir, kind: str, pipeline: str,
                 build_model, resume_from=None):
        self.cfg = cfg
        self.corpus = corpus
        self.out = Path(out_dir)
        self.pipeline = pipeline
        (self.out / "checkpoints").mkdir(parents=True, exist_ok=True)
        self.config_doc = {"pipeline": pipeline, "train": _config_doc(cfg)}
        (self.out / "config.json").write_text(json.dumps(self.config_doc, sort_keys=True) + "\n")

        self.rngs = {
            "batch": np.random.default_rng([cfg.seed, 0]),
            "loss": np.random.default_rng([cfg.seed, 1]),
            "eval": np.random.default_rng([cfg.seed, 2]),
        }
        self.model = build_model(np.random.default_rng([cfg.seed, 3]))
        self.opt = ad.Adam(self.model.params(), lr=cfg.hp.learning_rate)
        self.kind = kind
        self.start_epoch = 0
        self.entries: list[dict] = []
        self.best_metric = -np.inf
        self.best_epoch = -1
        self.best_params: dict[str, np.ndarray] | None = None
        self.skips = 0

        if resume_from is not None:
            self._load_state(resume_from)
        mode = "a" if resume_from is not None else "w"
        self.metrics_f = open(self.out / "metrics.csv", mode)
        self.timing_f = open(self.out / "timing.csv", mode)
        if mode == "w":
            self.metrics_f.write("step," + ",".join(md.LossReport.FIELDS) + "\n")
            self.timing_f.write("step,seconds\n")
        self.t0 = time.monotonic()

    # -- state checkpoints ---------------------------------------------------

    def _state_meta(self, epoch: int) -> dict:
        return {
            "kind": self.kind,
            "model_config": asdict(self.model.cfg),
            "attention": getattr(self.model, "attention", True),
            "vocab_words": self.corpus.vocab.id_to_word[4:],
            "pipeline": self.pipeline,
            "epoch": epoch,
            "entries": self.entries,
            "best": {"metric": float(self.best_metric), "epoch": self.best_epoch},
            "rng_states": {k: r.bit_generator.state for k, r in self.rngs.items()},
            "train_state": True,
        }

    def save_state(self, epoch: int) -> Path:
        arrays = {k: v.value for k, v in self.model.named_params().items()}
        arrays.update(self.opt.state_arrays())
        if self.best_params is not None:
            arrays.update({f"best.{k}": v for k, v in self.best_params.items()})
        path = self.out / "checkpoints" / f"epoch_{epoch:04d}.bin"
        nn.save_checkpoint(path, arrays, self._state_meta(epoch))
        prev = self.out / "checkpoints" / f"epoch_{epoch - 1:04d}.bin"
        if prev.exists():
            prev.unlink()
        return path

    def _load_state(self, path):
        arrays, meta = nn.load_checkpoint(path)
        if not meta.get("train_state"):
            raise ValueError(f"{path} is a model-only checkpoint; cannot resume")
        self.model.load_values({k: v for k, v in arrays.items()
                                if not k.startswith(("adam.", "best."))})
        self.opt.load_state_arrays(arrays)
        for k, rng in self.rngs.items():
            rng.bit_generator.state = meta["rng_states"][k]
        self.start_epoch = meta["epoch"] + 1
        self.entries = meta["entries"]
        self.best_metric = meta["best"]["metric"]
        self.best_epoch = meta["best"]["epoch"]
        best = {k[len("best."):]: v for k, v in arrays.items() if k.startswith("best.")}
        self.best_params = best or None

    # -- logging -------------------------------------------------------------

    def log_step(self, step: int, report: md.LossReport):
        row = ",".join(repr(v) for v in report.as_row())
        self.metrics_f.write(f"{step},{row}\n")
        self.timing_f.write(f"{step},{time.monotonic() - self.t0:.3f}\n")

    def apply(self, loss_node, report, step: int) -> bool:
        if not np.isfinite(report.total):
            self.skips += 1
            logger.warning("non-finite loss at step %d; skipped (%d consecutive)", step, self.skips)
            if self.skips >= MAX_CONSECUTIVE_SKIPS:
                raise NumericFailure(f"{self.skips} consecutive non-finite losses")
            return False
        self.skips = 0
        self.opt.zero_grad()
        ad.backward(loss_node)
        self.opt.step()
        return True

    def note_eval(self, epoch: int, sr: float, bleu: float, mean_total: float, metric_name: str):
        values = [e[metric_name] for e in self.entries] + [sr if metric_name == "sr" else bleu]
        smooth = smoothed_curve(values)[-1]
        self.entries.append({"epoch": epoch, "sr": sr, "bleu": bleu,
                             "mean_total": mean_total, "smoothed": smooth})
        if smooth > self.best_metric:
            self.best_metric = smooth
            self.best_epoch = epoch
            self.best_params = {k: v.value.copy() for k, v in self.model.named_params().items()}

    def finish(self, metric_name: str) -> tuple[Path, RunRecord]:
        self.metrics_f.close()
        self.timing_f.close()
        if self.best_params is None:  # no eval ran; fall back to final weights
            self.best_params = {k: v.value.copy() for k, v in self.model.named_params().items()}
            self.best_epoch = self.cfg.epochs - 1
            self.best_metric = 0.0
        best_path = self.out / "checkpoints" / "best.bin"
        meta = {
            "kind": self.kind,
            "model_config": asdict(self.model.cfg),
            "attention": getattr(self.model, "attention", True),
            "vocab_words": self.corpus.vocab.id_to_word[4:],
            "pipeline": self.pipeline,
            "selected_epoch": self.best_epoch,
        }
        nn.save_checkpoint(best_path, self.best_params, meta)
        record = RunRecord(
            entries=self.entries,
            selected_epoch=self.best_epoch,
            selected_metric=float(self.best_metric),
            metric_name=metric_name,
            checkpoint=str(best_path),
            config=self.config_doc,
        )
        record.save(self.out / "runrecord.json")
        return best_path, record


def _config_doc(cfg: TrainConfig) -> dict:
    doc = asdict(cfg)
    return doc


def warm_start(model, ckpt_path, rename: dict[str, str] | None = None) -> list[str]:
    """Copy shape-matching parameters from a checkpoint into the model.

    `rename` maps checkpoint name prefixes onto model name prefixes (the
    speaker's observation featurizer lands on the encoder-side one).
    """
    arrays, _ = nn.load_checkpoint(ckpt_path)
    target = model.named_params()
    copied = []
    for name, arr in arrays.items():
        if name.startswith(("adam.", "best.")):
            continue
        mapped = name
        for old, new in (rename or {}).items():
            if name.startswith(old):
                mapped = new + name[len(old):]
                break
        node = target.get(mapped)
        if node is not None and node.value.shape == tuple(arr.shape):
            node.value[...] = arr
            copied.append(mapped)
    return copied


# ---------------------------------------------------------------------------
# pipelines


def train_supervised_follower(cfg: TrainConfig, corpus, out_dir, records=None,
                              resume_from=None, pipeline_name="supervised-follower"):
    """Imitation learning on paired records (teacher forcing).

    arch_variant picks the architecture row: attention, no_attention, or
    bottleneck (the latent architecture trained with the same IL loss).
    """
    records = corpus.paired if records is None else records
    if not records:
        raise ValueError("no paired records to train on")
    mcfg = cfg.model_config(len(corpus.vocab))

    def build(rng):
        if cfg.arch_variant == "bottleneck":
            model = md.MsVae(rng, mcfg)
        elif cfg.arch_variant in ("attention", "no_attention"):
            model = md.BaselineFollower(rng, mcfg, attention=cfg.arch_variant == "attention")
        else:
            raise ValueError(f"unknown arch_variant {cfg.arch_variant!r}")
        if cfg.pretrain_follower:
            warm_start(model, cfg.pretrain_follower)
        return model

    kind = "msvae" if cfg.arch_variant == "bottleneck" else "follower"
    run = _Run(cfg, corpus, out_dir, kind, pipeline_name, build, resume_from)

    def loss_fn(model, idx, rng):
        lang, traj = pair_batches(records, corpus, idx, cfg.arch.obs_view)
        if cfg.arch_variant == "bottleneck":
            mean, _ = model.encode_language(lang)
            ll = model.action_log_likelihood(mean, traj)
        else:
            ll = model.action_log_likelihood(lang, traj)
        mean_ll = ad.reduce_mean(ll)
        return ad.neg(mean_ll), _zero_report(float(mean_ll.value), "c2")

    step = run.start_epoch * cfg.iters_per_epoch
    for epoch in range(run.start_epoch, cfg.epochs):
        totals = []
        for _ in range(cfg.iters_per_epoch):
            step += 1
            idx = run.rngs["batch"].integers(0, len(records), size=min(cfg.paired_batch, len(records)))
            loss_node, report = loss_fn(run.model, idx, run.rngs["loss"])
            run.apply(loss_node, report, step)
            run.log_step(step, report)
            totals.append(report.total)
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            rep = evaluate_follower(run.model, corpus, corpus.val, limit=cfg.eval_tasks)
            run.note_eval(epoch, rep.sr, 0.0, float(np.mean(totals)), "sr")
        run.save_state(epoch)
    return run.finish("sr")


def train_supervised_speaker(cfg: TrainConfig, corpus, out_dir, resume_from=None):
    """Token cross-entropy from trajectories to instructions."""
    records = corpus.paired
    if not records:
        raise ValueError("no paired records to train on")
    mcfg = cfg.model_config(len(corpus.vocab))

    def build(rng):
        model = md.BaselineSpeaker(rng, mcfg)
        if cfg.pretrain_speaker:
            warm_start(model, cfg.pretrain_speaker)
        return model

    run = _Run(cfg, corpus, out_dir, "speaker", "supervised-speaker", build, resume_from)

    step = run.start_epoch * cfg.iters_per_epoch
    for epoch in range(run.start_epoch, cfg.epochs):
        totals = []
        for _ in range(cfg.iters_per_epoch):
            step += 1
            idx = run.rngs["batch"].integers(0, len(records), size=min(cfg.paired_batch, len(records)))
            lang, traj = pair_batches(records, corpus, idx, cfg.arch.obs_view)
            mean_ll = ad.reduce_mean(run.model.language_log_likelihood(traj, lang))
            report = _zero_report(float(mean_ll.value), "c1")
            run.apply(ad.neg(mean_ll), report, step)
            run.log_step(step, report)
            totals.append(report.total)
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            bleu, _ = evaluate_speaker(run.model, corpus, corpus.val, limit=cfg.eval_tasks)
            run.note_eval(epoch, 0.0, bleu, float(np.mean(totals)), "bleu")
        run.save_state(epoch)
    return run.finish("bleu")


def train_msvae(cfg: TrainConfig, corpus, out_dir, resume_from=None):
    """Semi-supervised training of the shared-latent model: each iteration
    draws one paired and one unpaired batch and maximizes the combined
    objective; the domain distance is measured between the two batches'
    trajectory-encoder means."""
    if not corpus.paired:
        raise ValueError("no paired records to train on")
    mcfg = cfg.model_config(len(corpus.vocab))

    def build(rng):
        model = md.MsVae(rng, mcfg)
        if cfg.pretrain_follower:
            n = warm_start(model, cfg.pretrain_follower)
            logger.info("warm start (follower): %d tensors", len(n))
        if cfg.pretrain_speaker:
            n = warm_start(model, cfg.pretrain_speaker, rename={"obs_mlp.": "enc_obs_mlp."})
            logger.info("warm start (speaker): %d tensors", len(n))
        return model

    run = _Run(cfg, corpus, out_dir, "msvae", "msvae", build, resume_from)
    use_unpaired = cfg.unpaired_batch > 0 and len(corpus.unpaired) > 0

    step = run.start_epoch * cfg.iters_per_epoch
    for epoch in range(run.start_epoch, cfg.epochs):
        totals = []
        for _ in range(cfg.iters_per_epoch):
            step += 1
            pidx = run.rngs["batch"].integers(0, len(corpus.paired), size=min(cfg.paired_batch, len(corpus.paired)))
            lang, traj = pair_batches(corpus.paired, corpus, pidx, cfg.arch.obs_view)
            unpaired = None
            if use_unpaired:
                uidx = run.rngs["batch"].integers(0, len(corpus.unpaired), size=cfg.unpaired_batch)
                unpaired = traj_batch(corpus.unpaired, corpus, uidx, cfg.arch.obs_view)
            loss_node, report = md.total_loss(run.model, lang, traj, unpaired, cfg.hp, run.rngs["loss"])
            run.apply(loss_node, report, step)
            run.log_step(step, report)
            totals.append(report.total)
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            rep = evaluate_follower(run.model, corpus, corpus.val, limit=cfg.eval_tasks)
            bleu, _ = evaluate_speaker(run.model, corpus, corpus.val, limit=min(cfg.eval_tasks, 50))
            run.note_eval(epoch, rep.sr, bleu, float(np.mean(totals)), "sr")
        run.save_state(epoch)
    return run.finish("sr")


# ---------------------------------------------------------------------------
# speaker-follower augmentation


def augment(speak_fn, corpus, out_path, speaker_tag: str) -> tuple[Path, int]:
    """Annotate every unpaired trajectory with a generated instruction.

    speak_fn(trajectory, record) -> (token ids, truncated flag). Output uses
    the paired schema with pseudo/truncated flags; an empty unpaired set
    yields an empty (but valid) file with a warning.
    """
    out_path = Path(out_path)
    header, _ = corpus_mod.read_split(corpus.root / "unpaired.jsonl")
    if not corpus.unpaired:
        logger.warning("augment: unpaired set is empty; writing empty pseudo corpus")
    records = []
    for rec in corpus.unpaired:
        tokens, truncated = speak_fn(corpus, rec)
        out = dict(rec)
        out["tokens"] = [int(t) for t in tokens]
        out["pseudo"] = True
        out["truncated"] = bool(truncated)
        records.append(out)
    corpus_mod.write_pseudo_paired(out_path, records, header, speaker_tag)
    return out_path, len(records)


def model_speak_fn(model, len_cap: int = 30):
    def fn(corpus, rec):
        traj = corpus.trajectory(rec, model.cfg.obs_view)
        return model.speak(traj, len_cap=len_cap)

    return fn


def oracle_speak_fn(_corpus=None):
    """Grammar-perfect speaker: re-renders the generating task's instruction."""

    def fn(corpus, rec):
        _, task = corpus.rebuild(rec)
        return corpus.vocab.tokenize(gw.render_instruction(task)), False

    return fn


def train_speaker_follower(cfg: TrainConfig, corpus, out_dir, speaker_ckpt,
                           pipeline_name="speaker-follower"):
    """Augment the unpaired set with a trained speaker, then train an
    attention follower on pseudo pairs (plus real pairs unless disabled)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    speaker, meta = md.load_model(speaker_ckpt)
    if meta["kind"] not in ("speaker", "msvae"):
        raise ValueError(f"checkpoint kind {meta['kind']!r} cannot speak")
    pseudo_path, _ = augment(model_speak_fn(speaker), corpus, out / "pseudo_paired.jsonl",
                             speaker_tag=meta["kind"])
    _, pseudo = corpus_mod.read_pseudo_paired(pseudo_path)
    usable = [r for r in pseudo if r["tokens"]]
    dropped = len(pseudo) - len(usable)
    if dropped:
        logger.warning("augment: dropped %d empty pseudo instructions", dropped)
    records = usable + (list(corpus.paired) if cfg.include_real_pairs else [])
    sub = TrainConfig(**{**asdict(cfg), "arch_variant": "attention",
                         "hp": cfg.hp, "arch": cfg.arch})
    return train_supervised_follower(sub, corpus, out, records=records,
                                     pipeline_name=pipeline_name)


# ---------------------------------------------------------------------------
# pragmatic inference


def pragmatic_candidates(follower, speaker, tokens, world, n_candidates: int, rng,
                         max_steps: int = 64):
    """Greedy rollout plus sampled rollouts, each scored by the speaker's
    likelihood of the given instruction."""
    greedy_traj, greedy_states = follower.follow(tokens, world, mode="greedy", max_steps=max_steps)
    candidates = [(greedy_traj, greedy_states)]
    for _ in range(n_candidates):
        candidates.append(follower.follow(tokens, world, mode="sample", rng=rng, max_steps=max_steps))
    encode = md.observation_encoder(speaker.cfg)
    scores = []
    for traj, states in candidates:
        if not traj.actions:
            scores.append(-np.inf)
            continue
        seen = gw.Trajectory(np.stack([encode(s) for s in states[:-1]]), traj.actions)
        scores.append(speaker.trajectory_language_score(seen, tokens))
    return candidates, scores


def pragmatic_infer(follower, speaker, tokens, world, n_candidates: int, rng,
                    max_steps: int = 64):
    """Pick the candidate the speaker scores highest; ties keep the greedy
    rollout (candidate 0). n_candidates=0 is plain greedy decoding."""
    if n_candidates == 0:
        return follower.follow(tokens, world, mode="greedy", max_steps=max_steps)
    candidates, scores = pragmatic_candidates(follower, speaker, tokens, world, n_candidates, rng, max_steps)
    best = int(np.argmax(scores))  # argmax keeps the first (greedy) on ties
    return candidates[best]


def evaluate_pragmatic(follower, speaker, corpus, records, n_candidates: int, rng,
                       limit: int | None = None) -> metrics_mod.EvalReport:
    recs = records[:limit] if limit else records
    outcomes = []
    for rec in recs:
        world, task = corpus.rebuild(rec)
        cap = gw.step_cap(len(rec["actions"]))
        _, states = pragmatic_infer(follower, speaker, rec["tokens"], world, n_candidates, rng, cap)
        outcomes.append(bool(gw.check_success(states, task)))
    n = len(outcomes)
    return metrics_mod.EvalReport(sr=sum(outcomes) / n if n else 0.0, bleu4=0.0,
                                  n_episodes=n, outcomes=outcomes)

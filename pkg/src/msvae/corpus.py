"""Dataset construction, tokenization and persistence.

Corpus files are line-delimited JSON with a schema header on line one.
Trajectories are stored as (seed, tries, action ids) and observations are
re-derived by replaying the environment, which keeps files small and
guarantees consistency with the dynamics code. The four splits draw from
disjoint seed ranges of a common master seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gridworld as gw

SCHEMA_VERSION = 1
RESERVED = {"<pad>": 0, "<bos>": 1, "<eos>": 2, "<unk>": 3}

_SPLIT_OFFSETS = {"paired": 0, "unpaired": 1_000_000, "val": 2_000_000, "test": 3_000_000}
_SPLIT_SPAN = 4_000_000


class CorpusError(RuntimeError):
    pass


class Vocab:
    """Word <-> id map with reserved ids; non-reserved entries are assigned
    in sorted order so ids are stable across regenerations."""

    def __init__(self, words):
        self.id_to_word = ["<pad>", "<bos>", "<eos>", "<unk>"] + sorted(set(words))
        self.word_to_id = {w: i for i, w in enumerate(self.id_to_word)}
        if len(self.word_to_id) != len(self.id_to_word):
            raise CorpusError("vocabulary words collide with reserved tokens")

    def __len__(self):
        return len(self.id_to_word)

    @property
    def pad(self):
        return RESERVED["<pad>"]

    @property
    def bos(self):
        return RESERVED["<bos>"]

    @property
    def eos(self):
        return RESERVED["<eos>"]

    @property
    def unk(self):
        return RESERVED["<unk>"]

    def tokenize(self, text) -> list[int]:
        """Map a string (whitespace split) or word list to ids; unknown
        words map to unk."""
        words = text.split() if isinstance(text, str) else list(text)
        return [self.word_to_id.get(w, self.unk) for w in words]

    def detokenize(self, ids) -> str:
        return " ".join(self.id_to_word[i] for i in ids)

    def save(self, path):
        doc = {"version": SCHEMA_VERSION, "reserved": RESERVED, "words": self.id_to_word[4:]}
        Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        doc = json.loads(Path(path).read_text())
        return cls(doc["words"])


def default_vocab() -> Vocab:
    return Vocab(gw.grammar_words())


@dataclass
class Corpus:
    """A generated corpus directory, loaded into memory."""

    root: Path
    vocab: Vocab
    difficulty: str
    subgoal_weights: tuple[float, ...]
    paired: list[dict]
    unpaired: list[dict]
    val: list[dict]
    test: list[dict]

    def __post_init__(self):
        # replayed observations are 0/1; cache them bit-packed per record and
        # view so batch assembly does not re-run the environment every draw
        self._obs_cache: dict[tuple[int, str], np.ndarray] = {}

    def rebuild(self, record) -> tuple[gw.World, gw.Task]:
        return gw.rebuild_task(record["seed"], record["tries"], self.difficulty,
                               subgoal_weights=self.subgoal_weights)

    def trajectory(self, record, view: str = "grid") -> gw.Trajectory:
        encode, dim = gw.OBS_VIEWS[view][0], gw.OBS_VIEWS[view][1]
        packed = self._obs_cache.get((id(record), view))
        if packed is None:
            world, _ = self.rebuild(record)
            states, traj = gw.rollout(world, record["actions"])
            if view != "grid":
                obs = np.stack([encode(s) for s in states[:-1]]) if record["actions"] else \
                    np.zeros((0, dim))
                traj = gw.Trajectory(obs, traj.actions)
            self._obs_cache[(id(record), view)] = np.packbits(traj.observations.astype(np.uint8), axis=1)
            return traj
        obs = np.unpackbits(packed, axis=1, count=dim).astype(np.float64)
        return gw.Trajectory(obs, tuple(record["actions"]))


def _end_state(world: gw.World) -> list[int]:
    carried = world.carried
    return [
        world.agent_pos[0],
        world.agent_pos[1],
        world.agent_dir,
        gw.KINDS.index(carried.kind) if carried else -1,
        gw.COLORS.index(carried.color) if carried else -1,
    ]


def _make_record(seed: int, difficulty: str, vocab: Vocab, subgoal_weights, with_tokens: bool) -> dict:
    world, task, tries = gw.sample_task_record(seed, difficulty, subgoal_weights=subgoal_weights)
    actions = [int(a) for a in gw.oracle_solve(world, task)]
    states, _ = gw.rollout(world, actions)
    rec = {"seed": seed, "tries": tries, "actions": actions, "end": _end_state(states[-1])}
    if with_tokens:
        rec["tokens"] = vocab.tokenize(gw.render_instruction(task))
    return rec


def _dump_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def generate(out_dir, seed: int, difficulty: str, m: int, n: int, val_tasks: int, test_tasks: int,
             subgoal_weights=gw.SUBGOAL_WEIGHTS) -> dict:
    """Write paired/unpaired/val/test jsonl files plus vocab.json.

    Splits use disjoint seed ranges derived from `seed`; regeneration with
    the same arguments is byte-identical. Returns a summary dict.
    """
    if m < 0 or n < 0:
        raise ValueError("split sizes must be nonnegative")
    for count, name in ((m, "paired"), (n, "unpaired"), (val_tasks, "val"), (test_tasks, "test")):
        if count > 1_000_000:
            raise ValueError(f"{name} size {count} exceeds the 1e6 seed-range span")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = default_vocab()
    vocab.save(out / "vocab.json")

    sizes = {"paired": m, "unpaired": n, "val": val_tasks, "test": test_tasks}
    summary = {"difficulty": difficulty, "seed": seed, "vocab_size": len(vocab)}
    for split, count in sizes.items():
        with_tokens = split != "unpaired"
        base = seed * _SPLIT_SPAN + _SPLIT_OFFSETS[split]
        header = {
            "schema": "msvae-corpus",
            "version": SCHEMA_VERSION,
            "split": split,
            "difficulty": difficulty,
            "count": count,
            "master_seed": seed,
            "subgoal_weights": list(subgoal_weights),
        }
        tok_lens, act_lens = [], []
        try:
            with open(out / f"{split}.jsonl", "w") as f:
                f.write(_dump_line(header))
                for i in range(count):
                    rec = _make_record(base + i, difficulty, vocab, subgoal_weights, with_tokens)
                    act_lens.append(len(rec["actions"]))
                    if with_tokens:
                        tok_lens.append(len(rec["tokens"]))
                    f.write(_dump_line(rec))
        except OSError as e:
            raise CorpusError(f"writing {out / (split + '.jsonl')}: {e}") from e
        summary[split] = {
            "count": count,
            "mean_actions": float(np.mean(act_lens)) if act_lens else 0.0,
            "mean_tokens": float(np.mean(tok_lens)) if tok_lens else 0.0,
        }
    return summary


def read_split(path) -> tuple[dict, list[dict]]:
    path = Path(path)
    try:
        with open(path) as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise CorpusError(f"reading {path}: {e}") from e
    if not lines:
        raise CorpusError(f"{path}: empty file, expected a schema header")
    header = json.loads(lines[0])
    if header.get("schema") != "msvae-corpus":
        raise CorpusError(f"{path}: missing corpus schema header")
    return header, [json.loads(ln) for ln in lines[1:]]


def load(root) -> Corpus:
    root = Path(root)
    vocab = Vocab.load(root / "vocab.json")
    splits = {}
    difficulty = None
    weights = None
    for name in ("paired", "unpaired", "val", "test"):
        header, records = read_split(root / f"{name}.jsonl")
        splits[name] = records
        difficulty = header["difficulty"]
        weights = tuple(header["subgoal_weights"])
    return Corpus(root, vocab, difficulty, weights, splits["paired"], splits["unpaired"],
                  splits["val"], splits["test"])


def verify_record(corpus: Corpus, record) -> bool:
    """Replay the stored actions; the final state must match the record."""
    world, _ = corpus.rebuild(record)
    states, _ = gw.rollout(world, record["actions"])
    return _end_state(states[-1]) == record["end"]


def write_pseudo_paired(path, records, source_header: dict, speaker_tag: str) -> None:
    """Write speaker-annotated records in the paired schema, flagged pseudo."""
    header = dict(source_header)
    header.update({"split": "paired", "pseudo": True, "speaker": speaker_tag,
                   "count": len(records)})
    with open(path, "w") as f:
        f.write(_dump_line(header))
        for rec in records:
            f.write(_dump_line(rec))


def read_pseudo_paired(path) -> tuple[dict, list[dict]]:
    return read_split(path)

"""The shared-latent sequence VAE, its seq2seq baselines, and every
objective term: per-modality reconstruction and KL terms, the cross-modal
terms, the unpaired trajectory bound, the per-slot sliced-Wasserstein domain
distance, and the combined training objective.

Conventions: modality 1 is the trajectory (actions given observations),
modality 2 is the language. All likelihood terms are per-sample sums of step
log-probabilities; reported loss terms are batch means. The combined
objective is maximized; trainers minimize its negation.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import gridworld as gw
from . import nn
from .autodiff import Node

START_ACTION_OFFSET = 0  # start id = n_actions + 0, pad id = n_actions + 1


@dataclass
class HyperParams:
    """Objective weights and shared latent geometry."""

    alpha: float = 1.0 / 20.0
    gamma: float = 100.0
    beta: float = 0.1
    k_slots: int = 4
    latent_dim: int = 128
    learning_rate: float = 1e-3
    n_projections: int = 50

    def __post_init__(self):
        if self.alpha < 0 or self.gamma < 0 or self.beta < 0:
            raise ValueError("alpha, gamma, beta must be nonnegative")


@dataclass
class ModelConfig:
    vocab_size: int
    obs_dim: int
    n_actions: int = gw.N_ACTIONS
    word_emb: int = 32
    action_emb: int = 16
    hidden: int = 64
    obs_hidden: int = 128  # intermediate width of the observation MLP
    attn_dim: int = 64
    cell_dim: int = 32  # projection width of the spatial cell readout
    k_slots: int = 4
    latent_dim: int = 128
    prior_hidden: int = 128
    input_feed: bool = True  # feed the previous attention context into the decoder step
    obs_view: str = "ego"  # model-side observation frame: ego | grid | synthetic

    def __post_init__(self):
        if self.obs_view in gw.OBS_VIEWS and self.obs_dim != gw.OBS_VIEWS[self.obs_view][1]:
            raise ValueError(
                f"obs_dim {self.obs_dim} does not match view {self.obs_view!r} "
                f"(expected {gw.OBS_VIEWS[self.obs_view][1]})"
            )


@dataclass
class LossReport:
    """Per-term breakdown of the combined objective (all batch means)."""

    a1: float
    a2: float
    b1: float
    b2: float
    c1: float
    c2: float
    v: float
    dprime: float
    total: float

    FIELDS = ("a1", "a2", "b1", "b2", "c1", "c2", "v", "dprime", "total")

    def recombine(self, hp: HyperParams) -> float:
        """Reassemble the total from the parts with the given weights."""
        jbar = 0.5 * (self.a1 + hp.beta * self.b1 + self.c1 + self.a2 + hp.beta * self.b2 + self.c2)
        return jbar + hp.gamma * self.v - hp.alpha * self.dprime

    def as_row(self) -> list[float]:
        return [getattr(self, f) for f in self.FIELDS]


# ---------------------------------------------------------------------------
# batches


@dataclass
class LangBatch:
    enc_ids: np.ndarray  # (B, L) tokens + eos, padded
    enc_mask: np.ndarray
    dec_in: np.ndarray  # bos + tokens
    dec_tgt: np.ndarray  # tokens + eos
    lengths: np.ndarray

    @property
    def batch(self):
        return self.enc_ids.shape[0]

    @property
    def steps(self):
        return self.enc_ids.shape[1]


@dataclass
class TrajBatch:
    obs: np.ndarray  # (B, T, obs_dim)
    enc_act: np.ndarray  # recorded actions
    dec_in: np.ndarray  # start + actions[:-1]
    dec_tgt: np.ndarray  # actions
    mask: np.ndarray
    lengths: np.ndarray

    @property
    def batch(self):
        return self.obs.shape[0]

    @property
    def steps(self):
        return self.obs.shape[1]


def make_lang_batch(token_lists, bos: int = 1, eos: int = 2, pad: int = 0) -> LangBatch:
    if not token_lists:
        raise ValueError("empty language batch")
    if any(len(t) == 0 for t in token_lists):
        raise ValueError("empty token sequence")
    lengths = np.array([len(t) + 1 for t in token_lists])  # + eos
    width = int(lengths.max())
    b = len(token_lists)
    enc = np.full((b, width), pad, dtype=np.intp)
    dec_in = np.full((b, width), pad, dtype=np.intp)
    dec_tgt = np.full((b, width), pad, dtype=np.intp)
    mask = np.zeros((b, width))
    for i, toks in enumerate(token_lists):
        n = len(toks)
        enc[i, :n] = toks
        enc[i, n] = eos
        dec_in[i, 0] = bos
        dec_in[i, 1 : n + 1] = toks
        dec_tgt[i, :n] = toks
        dec_tgt[i, n] = eos
        mask[i, : n + 1] = 1.0
    return LangBatch(enc, mask, dec_in, dec_tgt, lengths)


def make_traj_batch(trajectories, n_actions: int = gw.N_ACTIONS) -> TrajBatch:
    if not trajectories:
        raise ValueError("empty trajectory batch")
    if any(len(t) == 0 for t in trajectories):
        raise ValueError("empty trajectory")
    start_id, pad_id = n_actions, n_actions + 1
    lengths = np.array([len(t) for t in trajectories])
    width = int(lengths.max())
    b = len(trajectories)
    odim = trajectories[0].observations.shape[1]
    obs = np.zeros((b, width, odim))
    enc = np.full((b, width), pad_id, dtype=np.intp)
    dec_in = np.full((b, width), pad_id, dtype=np.intp)
    dec_tgt = np.full((b, width), 0, dtype=np.intp)
    mask = np.zeros((b, width))
    for i, tr in enumerate(trajectories):
        n = len(tr)
        obs[i, :n] = tr.observations
        enc[i, :n] = tr.actions
        dec_in[i, 0] = start_id
        dec_in[i, 1:n] = tr.actions[: n - 1]
        dec_tgt[i, :n] = tr.actions
        mask[i, :n] = 1.0
    return TrajBatch(obs, enc, dec_in, dec_tgt, mask, lengths)


def _step_masks(mask: np.ndarray) -> list[np.ndarray]:
    return [mask[:, t] for t in range(mask.shape[1])]


# ---------------------------------------------------------------------------
# building blocks


class ObsMlp(nn.Layer):
    """Flattened one-hot grid -> hidden features, two tanh layers."""

    def __init__(self, rng, obs_dim: int, hidden: int, width: int | None = None):
        super().__init__()
        width = width or hidden
        self.l1 = self._child("l1", nn.Linear(rng, obs_dim, width))
        self.l2 = self._child("l2", nn.Linear(rng, width, hidden))

    def __call__(self, x: Node) -> Node:
        return ad.tanh(self.l2(ad.tanh(self.l1(x))))

    def features_steps(self, obs: np.ndarray) -> list[Node]:
        """(B, T, obs_dim) -> T per-step (B, H) nodes.

        Per-step nodes keep backward gradients small and let two decoder
        passes share the same forward computation."""
        return [self(ad.constant(obs[:, t, :])) for t in range(obs.shape[1])]


def _grid_shape(obs_view: str, obs_dim: int) -> tuple[int, int]:
    """(n_cells, channels) factorization of a flat observation.

    Observations that are not whole grids (synthetic feature vectors in small
    tests) degrade to a single cell, making the readout a plain projection.
    """
    if obs_view in gw.OBS_VIEWS:
        _, dim, cells, channels = gw.OBS_VIEWS[obs_view]
        if obs_dim == dim:
            return cells, channels
    return 1, obs_dim


def observation_encoder(cfg: ModelConfig):
    """The world -> flat observation function for the model's view."""
    if cfg.obs_view in gw.OBS_VIEWS:
        return gw.OBS_VIEWS[cfg.obs_view][0]
    return gw.observe


class GridReadout(nn.Layer):
    """Spatial attention over grid cells.

    Cell keys/values are a linear map of the per-cell channels plus a learned
    position embedding; the query comes from decoder state and attention
    context. The dot product performs the instruction-to-cell binding that a
    flat MLP over the one-hot grid cannot learn at desk-scale sample counts.
    """

    def __init__(self, rng, query_dim: int, proj_dim: int, cfg: ModelConfig):
        super().__init__()
        self.n_cells, self.channels = _grid_shape(cfg.obs_view, cfg.obs_dim)
        self.cell_block = self.n_cells * self.channels  # trailing dims (carried object) are global
        self.proj_dim = proj_dim
        self.scale = 1.0 / np.sqrt(proj_dim)
        self.wc = self._child("wc", nn.Linear(rng, self.channels, proj_dim))
        self.pos = self._param("pos", rng.normal(0.0, 0.02, size=(self.n_cells, proj_dim)))
        self.wq = self._child("wq", nn.Linear(rng, query_dim, proj_dim))

    def step_features(self, obs: np.ndarray, t: int) -> Node:
        """Channel projections of step t's cells -> (B, n_cells, P).

        Built per step as an independent small node: slicing one fused
        all-steps tensor made every backward allocate full-size gradients.
        Position embeddings are folded into the attention instead of being
        added here (q . (k + pos) = q . k + q . pos), which avoids a large
        broadcast add per step.
        """
        b = obs.shape[0]
        cells = obs[:, t, : self.cell_block].reshape(b * self.n_cells, self.channels)
        feats = self.wc(ad.constant(cells))
        return ad.reshape(feats, (b, self.n_cells, self.proj_dim))

    def __call__(self, query: Node, cells: Node) -> Node:
        """query (B, q) x cells (B, n_cells, P) -> attended cell features
        (channel projection + position embedding of the attended cells)."""
        q = self.wq(query)
        scores = ad.add(ad.bdot(q, cells), ad.matmul(q, ad.transpose2(self.pos)))
        w = ad.softmax(ad.scale(scores, self.scale), axis=-1)
        return ad.add(ad.bmix(w, cells), ad.matmul(w, self.pos))


class LanguageEncoderCore(nn.Layer):
    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        self.emb = self._child("emb", nn.Embedding(rng, cfg.vocab_size, cfg.word_emb))
        self.gru = self._child("gru", nn.GruCell(rng, cfg.word_emb, cfg.hidden))

    def hidden_states(self, lang: LangBatch) -> tuple[Node, Node]:
        inputs = [self.emb(lang.enc_ids[:, t]) for t in range(lang.steps)]
        states = nn.gru_encode(self.gru, inputs, _step_masks(lang.enc_mask))
        return ad.stack(states, axis=1), states[-1]


class TrajEncoderCore(nn.Layer):
    """Steps over (obs features, action embedding, spatial readout) inputs;
    the readout, queried by the running state, grounds which objects the
    agent is near so downstream language decoding can name them."""

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        self.emb = self._child("emb", nn.Embedding(rng, cfg.n_actions + 2, cfg.action_emb))
        self.readout = self._child("readout", GridReadout(rng, cfg.hidden, cfg.cell_dim, cfg))
        self.gru = self._child("gru", nn.GruCell(rng, cfg.hidden + cfg.action_emb + cfg.cell_dim, cfg.hidden))

    def hidden_states(self, traj: TrajBatch, obs_feats: list[Node]) -> tuple[Node, Node]:
        masks = _step_masks(traj.mask)
        h = self.gru.init_state(traj.batch)
        states = []
        for t in range(traj.steps):
            cell_ctx = self.readout(h, self.readout.step_features(traj.obs, t))
            x = ad.concat([obs_feats[t], self.emb(traj.enc_act[:, t]), cell_ctx], axis=1)
            h_new = self.gru.step(x, h)
            h = ad.add(h, ad.mul_colvec(ad.sub(h_new, h), ad.constant(masks[t])))
            states.append(h)
        return ad.stack(states, axis=1), states[-1]


class ActionDecoder(nn.Layer):
    """Autoregressive policy head; the memory enters only through attention
    contexts (fed to the head and, with input_feed, to the next step)."""

    def __init__(self, rng, cfg: ModelConfig, memory_dim: int, use_attention: bool = True):
        super().__init__()
        self.use_attention = use_attention
        self.memory_dim = memory_dim
        self.input_feed = cfg.input_feed
        self.blind = False  # diagnostic: replace contexts with zeros
        self.emb = self._child("emb", nn.Embedding(rng, cfg.n_actions + 2, cfg.action_emb))
        in_dim = cfg.hidden + cfg.action_emb + (memory_dim if cfg.input_feed else 0)
        self.gru = self._child("gru", nn.GruCell(rng, in_dim, cfg.hidden))
        if use_attention:
            self.attn = self._child("attn", nn.KeyValueAttention(rng, cfg.hidden, memory_dim, cfg.attn_dim))
        # spatial readout: query from (state, instruction context) attends
        # over grid cells; the dot product binds the instruction to cells
        self.readout = self._child("readout", GridReadout(rng, cfg.hidden + memory_dim, cfg.cell_dim, cfg))
        self.head = self._child("head", nn.Linear(rng, memory_dim + cfg.hidden + cfg.cell_dim, cfg.n_actions))

    def _context(self, h: Node, memory, prepared, memory_mask):
        if self.blind:
            return self.init_context(h.value.shape[0])
        if self.use_attention:
            ctx, _ = self.attn(h, prepared, memory, memory_mask)
            return ctx
        return memory  # fixed (B, memory_dim) summary

    def prepare(self, memory):
        return self.attn.prepare(memory) if self.use_attention else None

    def init_context(self, batch: int) -> Node:
        return ad.constant(np.zeros((batch, self.memory_dim)))

    def step_logits(self, obs_feat: Node, cell_feats: Node, prev_ids, h: Node, memory, prepared,
                    memory_mask=None, prev_ctx: Node | None = None):
        if prev_ctx is None:
            prev_ctx = self.init_context(obs_feat.value.shape[0])
        parts = [obs_feat, self.emb(prev_ids)]
        if self.input_feed:
            parts.append(prev_ctx)
        h = self.gru.step(ad.concat(parts, axis=1), h)
        ctx = self._context(h, memory, prepared, memory_mask)
        cell_ctx = self.readout(ad.concat([h, ctx], axis=1), cell_feats)
        return self.head(ad.concat([ctx, h, cell_ctx], axis=1)), h, ctx

    def teacher_forced_logll(self, traj: TrajBatch, obs_feats: list[Node], memory,
                             memory_mask=None, h0: Node | None = None) -> Node:
        """Per-sample sum of log p(a_t | ...) over valid steps -> (B,)."""
        prepared = self.prepare(memory)
        h = h0 if h0 is not None else self.gru.init_state(traj.batch)
        ctx = None
        total = None
        for t in range(traj.steps):
            cf = self.readout.step_features(traj.obs, t)
            logits, h, ctx = self.step_logits(obs_feats[t], cf, traj.dec_in[:, t], h, memory, prepared,
                                              memory_mask, prev_ctx=ctx)
            picked = ad.select_columns(ad.log_softmax(logits), traj.dec_tgt[:, t])
            masked = ad.mul(picked, ad.constant(traj.mask[:, t]))
            total = masked if total is None else ad.add(total, masked)
        return total


class WordDecoder(nn.Layer):
    """Autoregressive language head; bos-prefixed, eos-terminated."""

    def __init__(self, rng, cfg: ModelConfig, memory_dim: int, use_attention: bool = True):
        super().__init__()
        self.use_attention = use_attention
        self.memory_dim = memory_dim
        self.input_feed = cfg.input_feed
        self.blind = False
        self.emb = self._child("emb", nn.Embedding(rng, cfg.vocab_size, cfg.word_emb))
        in_dim = cfg.word_emb + (memory_dim if cfg.input_feed else 0)
        self.gru = self._child("gru", nn.GruCell(rng, in_dim, cfg.hidden))
        if use_attention:
            self.attn = self._child("attn", nn.KeyValueAttention(rng, cfg.hidden, memory_dim, cfg.attn_dim))
        self.head = self._child("head", nn.Linear(rng, memory_dim + cfg.hidden, cfg.vocab_size))

    def _context(self, h, memory, prepared, memory_mask):
        if self.blind:
            return self.init_context(h.value.shape[0])
        if self.use_attention:
            ctx, _ = self.attn(h, prepared, memory, memory_mask)
            return ctx
        return memory

    def prepare(self, memory):
        return self.attn.prepare(memory) if self.use_attention else None

    def init_context(self, batch: int) -> Node:
        return ad.constant(np.zeros((batch, self.memory_dim)))

    def step_logits(self, prev_ids, h, memory, prepared, memory_mask=None,
                    prev_ctx: Node | None = None):
        parts = [self.emb(prev_ids)]
        if self.input_feed:
            parts.append(prev_ctx if prev_ctx is not None else self.init_context(len(prev_ids)))
        h = self.gru.step(ad.concat(parts, axis=1) if len(parts) > 1 else parts[0], h)
        ctx = self._context(h, memory, prepared, memory_mask)
        return self.head(ad.concat([ctx, h], axis=1)), h, ctx

    def teacher_forced_logll(self, lang: LangBatch, memory, memory_mask=None,
                             h0: Node | None = None) -> Node:
        prepared = self.prepare(memory)
        h = h0 if h0 is not None else self.gru.init_state(lang.batch)
        ctx = None
        total = None
        for t in range(lang.steps):
            logits, h, ctx = self.step_logits(lang.dec_in[:, t], h, memory, prepared,
                                              memory_mask, prev_ctx=ctx)
            picked = ad.select_columns(ad.log_softmax(logits), lang.dec_tgt[:, t])
            masked = ad.mul(picked, ad.constant(lang.enc_mask[:, t]))
            total = masked if total is None else ad.add(total, masked)
        return total


# ---------------------------------------------------------------------------
# the shared-latent model


class MsVae(nn.Layer):
    """Two encoders to K latent slots, two autoregressive decoders reading
    the slots through attention, and an autoregressive slot prior."""

    kind = "msvae"

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        # decoder-side and encoder-side observation featurizers are separate
        # so each can be warm-started from its corresponding baseline
        self.obs_mlp = self._child("obs_mlp", ObsMlp(rng, cfg.obs_dim, cfg.hidden, cfg.obs_hidden))
        self.enc_obs_mlp = self._child("enc_obs_mlp", ObsMlp(rng, cfg.obs_dim, cfg.hidden, cfg.obs_hidden))
        self.lang_enc = self._child("lang_enc", LanguageEncoderCore(rng, cfg))
        self.lang_bottleneck = self._child(
            "lang_bottleneck", nn.BottleneckAttention(rng, cfg.k_slots, cfg.hidden, cfg.latent_dim, cfg.attn_dim)
        )
        self.traj_enc = self._child("traj_enc", TrajEncoderCore(rng, cfg))
        self.traj_bottleneck = self._child(
            "traj_bottleneck", nn.BottleneckAttention(rng, cfg.k_slots, cfg.hidden, cfg.latent_dim, cfg.attn_dim)
        )
        self.act_dec = self._child("act_dec", ActionDecoder(rng, cfg, memory_dim=cfg.latent_dim))
        self.word_dec = self._child("word_dec", WordDecoder(rng, cfg, memory_dim=cfg.latent_dim))
        self.prior = self._child("prior", nn.AutoregressivePrior(rng, cfg.latent_dim, cfg.prior_hidden))

    # encoders ---------------------------------------------------------------

    def obs_features(self, traj: TrajBatch) -> list[Node]:
        """Decoder-side observation features (the policy path), per step."""
        return self.obs_mlp.features_steps(traj.obs)

    def encode_language(self, lang: LangBatch) -> tuple[Node, Node]:
        hidden, _ = self.lang_enc.hidden_states(lang)
        return self.lang_bottleneck(hidden, lang.enc_mask)

    def encode_trajectory(self, traj: TrajBatch, obs_feats: list[Node] | None = None) -> tuple[Node, Node]:
        if obs_feats is None:
            obs_feats = self.enc_obs_mlp.features_steps(traj.obs)
        hidden, _ = self.traj_enc.hidden_states(traj, obs_feats)
        return self.traj_bottleneck(hidden, traj.mask)

    # likelihoods ------------------------------------------------------------

    def action_log_likelihood(self, z: Node, traj: TrajBatch, obs_feats: list[Node] | None = None) -> Node:
        if obs_feats is None:
            obs_feats = self.obs_features(traj)
        return self.act_dec.teacher_forced_logll(traj, obs_feats, z)

    def language_log_likelihood(self, z: Node, lang: LangBatch) -> Node:
        return self.word_dec.teacher_forced_logll(lang, z)

    def prior_params(self, z: Node) -> tuple[Node, Node]:
        return nn.prior_log_density_params(self.prior, z)

    # rollouts ---------------------------------------------------------------

    def follow(self, tokens, world: gw.World, mode: str = "greedy", rng=None,
               max_steps: int = 64, z_mode: str = "mean", noise_rng=None):
        """Roll the policy in the environment from a language instruction.

        Returns (trajectory, visited states). Uses posterior mean slots by
        default; z_mode="sample" draws one latent sample instead.
        """
        lang = make_lang_batch([list(tokens)])
        mean, logvar = self.encode_language(lang)
        if z_mode == "sample":
            z = nn.reparameterize(mean, logvar, noise_rng.standard_normal(mean.value.shape))
        else:
            z = mean
        prepared = self.act_dec.prepare(z)
        h = self.act_dec.gru.init_state(1)
        ctx = None
        encode_obs = observation_encoder(self.cfg)
        prev = np.array([self.cfg.n_actions], dtype=np.intp)  # start id
        states = [world]
        obs_rows, actions = [], []
        for _ in range(max_steps):
            o = encode_obs(world)
            of = self.obs_mlp(ad.constant(o[None, :]))
            cf = self.act_dec.readout.step_features(o[None, None, :], 0)
            logits, h, ctx = self.act_dec.step_logits(of, cf, prev, h, z, prepared, prev_ctx=ctx)
            a = _pick(logits.value[0], mode, rng)
            obs_rows.append(o)
            actions.append(a)
            world, done = gw.step(world, a)
            states.append(world)
            prev = np.array([a], dtype=np.intp)
            if done:
                break
        return gw.Trajectory(np.array(obs_rows), tuple(actions)), states

    def speak(self, traj: gw.Trajectory, mode: str = "greedy", rng=None,
              len_cap: int = 30, eos: int = 2) -> tuple[list[int], bool]:
        """Describe a trajectory; returns (token ids, truncated flag)."""
        batch = make_traj_batch([traj], self.cfg.n_actions)
        mean, _ = self.encode_trajectory(batch)
        prepared = self.word_dec.prepare(mean)
        h = self.word_dec.gru.init_state(1)
        ctx = None
        prev = np.array([1], dtype=np.intp)  # bos
        out = []
        for _ in range(len_cap):
            logits, h, ctx = self.word_dec.step_logits(prev, h, mean, prepared, prev_ctx=ctx)
            w = _pick(logits.value[0], mode, rng)
            if w == eos:
                return out, False
            out.append(w)
            prev = np.array([w], dtype=np.intp)
        return out, True

    def trajectory_language_score(self, traj: gw.Trajectory, tokens) -> float:
        """log p(tokens | mean latent of traj); the pragmatic-inference score."""
        tb = make_traj_batch([traj], self.cfg.n_actions)
        mean, _ = self.encode_trajectory(tb)
        lang = make_lang_batch([list(tokens)])
        return float(self.language_log_likelihood(mean, lang).value[0])


def _pick(logits: np.ndarray, mode: str, rng) -> int:
    if mode == "greedy":
        return int(np.argmax(logits))
    if mode == "sample":
        shifted = logits - logits.max()
        p = np.exp(shifted)
        p /= p.sum()
        return int(rng.choice(len(p), p=p))
    raise ValueError(f"unknown decoding mode {mode!r}")


# ---------------------------------------------------------------------------
# baselines (no latent bottleneck)


class BaselineFollower(nn.Layer):
    """Standard attention seq2seq policy; attention optional so the
    no-attention architecture row is the same class."""

    kind = "follower"

    def __init__(self, rng, cfg: ModelConfig, attention: bool = True):
        super().__init__()
        self.cfg = cfg
        self.attention = attention
        self.obs_mlp = self._child("obs_mlp", ObsMlp(rng, cfg.obs_dim, cfg.hidden, cfg.obs_hidden))
        self.lang_enc = self._child("lang_enc", LanguageEncoderCore(rng, cfg))
        self.act_dec = self._child("act_dec", ActionDecoder(rng, cfg, memory_dim=cfg.hidden, use_attention=attention))
        self.init_map = self._child("init_map", nn.Linear(rng, cfg.hidden, cfg.hidden))

    def _encode(self, lang: LangBatch):
        hidden, final = self.lang_enc.hidden_states(lang)
        memory = hidden if self.attention else final
        mask = lang.enc_mask if self.attention else None
        return memory, mask, ad.tanh(self.init_map(final))

    def action_log_likelihood(self, lang: LangBatch, traj: TrajBatch) -> Node:
        memory, mask, h0 = self._encode(lang)
        return self.act_dec.teacher_forced_logll(traj, self.obs_mlp.features_steps(traj.obs), memory, mask, h0=h0)

    def follow(self, tokens, world: gw.World, mode: str = "greedy", rng=None, max_steps: int = 64, **_):
        lang = make_lang_batch([list(tokens)])
        memory, mask, h = self._encode(lang)
        prepared = self.act_dec.prepare(memory)
        ctx = None
        encode_obs = observation_encoder(self.cfg)
        prev = np.array([self.cfg.n_actions], dtype=np.intp)
        states = [world]
        obs_rows, actions = [], []
        for _ in range(max_steps):
            o = encode_obs(world)
            of = self.obs_mlp(ad.constant(o[None, :]))
            cf = self.act_dec.readout.step_features(o[None, None, :], 0)
            logits, h, ctx = self.act_dec.step_logits(of, cf, prev, h, memory, prepared, mask, prev_ctx=ctx)
            a = _pick(logits.value[0], mode, rng)
            obs_rows.append(o)
            actions.append(a)
            world, done = gw.step(world, a)
            states.append(world)
            prev = np.array([a], dtype=np.intp)
            if done:
                break
        return gw.Trajectory(np.array(obs_rows), tuple(actions)), states


class BaselineSpeaker(nn.Layer):
    """Attention seq2seq from trajectories to language."""

    kind = "speaker"

    def __init__(self, rng, cfg: ModelConfig, attention: bool = True):
        super().__init__()
        self.cfg = cfg
        self.attention = attention
        self.obs_mlp = self._child("obs_mlp", ObsMlp(rng, cfg.obs_dim, cfg.hidden, cfg.obs_hidden))
        self.traj_enc = self._child("traj_enc", TrajEncoderCore(rng, cfg))
        self.word_dec = self._child("word_dec", WordDecoder(rng, cfg, memory_dim=cfg.hidden, use_attention=attention))
        self.init_map = self._child("init_map", nn.Linear(rng, cfg.hidden, cfg.hidden))

    def _encode(self, traj: TrajBatch):
        hidden, final = self.traj_enc.hidden_states(traj, self.obs_mlp.features_steps(traj.obs))
        memory = hidden if self.attention else final
        mask = traj.mask if self.attention else None
        return memory, mask, ad.tanh(self.init_map(final))

    def language_log_likelihood(self, traj: TrajBatch, lang: LangBatch) -> Node:
        memory, mask, h0 = self._encode(traj)
        return self.word_dec.teacher_forced_logll(lang, memory, mask, h0=h0)

    def speak(self, traj: gw.Trajectory, mode: str = "greedy", rng=None, len_cap: int = 30,
              eos: int = 2) -> tuple[list[int], bool]:
        batch = make_traj_batch([traj], self.cfg.n_actions)
        memory, mask, h = self._encode(batch)
        prepared = self.word_dec.prepare(memory)
        ctx = None
        prev = np.array([1], dtype=np.intp)
        out = []
        for _ in range(len_cap):
            logits, h, ctx = self.word_dec.step_logits(prev, h, memory, prepared, mask, prev_ctx=ctx)
            w = _pick(logits.value[0], mode, rng)
            if w == eos:
                return out, False
            out.append(w)
            prev = np.array([w], dtype=np.intp)
        return out, True

    def trajectory_language_score(self, traj: gw.Trajectory, tokens) -> float:
        tb = make_traj_batch([traj], self.cfg.n_actions)
        lang = make_lang_batch([list(tokens)])
        return float(self.language_log_likelihood(tb, lang).value[0])


# ---------------------------------------------------------------------------
# objectives


def paired_loss(model: MsVae, lang: LangBatch, traj: TrajBatch, hp: HyperParams, rng) -> dict:
    """All paired-bound terms, one reparameterized sample per modality branch
    (shared between the reconstruction and cross-modal terms)."""
    obs_feats = model.obs_features(traj)
    m1, lv1 = model.encode_trajectory(traj)
    m2, lv2 = model.encode_language(lang)
    z1 = nn.reparameterize(m1, lv1, rng.standard_normal(m1.value.shape))
    z2 = nn.reparameterize(m2, lv2, rng.standard_normal(m2.value.shape))

    a1 = ad.reduce_mean(model.action_log_likelihood(z1, traj, obs_feats))
    c1 = ad.reduce_mean(model.language_log_likelihood(z1, lang))
    a2 = ad.reduce_mean(model.language_log_likelihood(z2, lang))
    c2 = ad.reduce_mean(model.action_log_likelihood(z2, traj, obs_feats))

    pm1, plv1 = model.prior_params(z1)
    b1 = ad.neg(ad.reduce_mean(nn.gaussian_kl_per_sample(m1, lv1, pm1, plv1)))
    pm2, plv2 = model.prior_params(z2)
    b2 = ad.neg(ad.reduce_mean(nn.gaussian_kl_per_sample(m2, lv2, pm2, plv2)))

    jbar = ad.scale(
        ad.add(
            ad.add(ad.add(a1, ad.scale(b1, hp.beta)), c1),
            ad.add(ad.add(a2, ad.scale(b2, hp.beta)), c2),
        ),
        0.5,
    )
    return {"a1": a1, "b1": b1, "c1": c1, "a2": a2, "b2": b2, "c2": c2,
            "jbar": jbar, "traj_means": m1}


def unpaired_loss(model: MsVae, traj: TrajBatch, hp: HyperParams, rng) -> dict:
    """Trajectory-only bound V = A_1 + beta * B_1 (B_1 = -KL)."""
    obs_feats = model.obs_features(traj)
    m1, lv1 = model.encode_trajectory(traj)
    z1 = nn.reparameterize(m1, lv1, rng.standard_normal(m1.value.shape))
    a1 = ad.reduce_mean(model.action_log_likelihood(z1, traj, obs_feats))
    pm1, plv1 = model.prior_params(z1)
    b1 = ad.neg(ad.reduce_mean(nn.gaussian_kl_per_sample(m1, lv1, pm1, plv1)))
    v = ad.add(a1, ad.scale(b1, hp.beta))
    return {"a1": a1, "b1": b1, "v": v, "traj_means": m1}


def domain_distance(paired_means: Node, unpaired_means: Node, n_projections: int, rng) -> Node:
    """Per-slot sliced squared 2-Wasserstein distance between the two
    batches of posterior means, summed over slots.

    Each slot draws fresh random unit projection directions; both batches
    are truncated to the smaller batch size so order statistics align.
    """
    pb, ub = paired_means.value.shape[0], unpaired_means.value.shape[0]
    if pb == 0 or ub == 0:
        raise ValueError("domain_distance: empty batch")
    if paired_means.value.shape[1:] != unpaired_means.value.shape[1:]:
        raise ad.ShapeMismatch(
            f"domain_distance: slot shapes {paired_means.value.shape} vs {unpaired_means.value.shape}"
        )
    b = min(pb, ub)
    k, d = paired_means.value.shape[1], paired_means.value.shape[2]
    x = ad.narrow(paired_means, 0, 0, b)
    y = ad.narrow(unpaired_means, 0, 0, b)
    total = None
    for slot in range(k):
        dirs = rng.standard_normal((d, n_projections))
        dirs /= np.maximum(np.linalg.norm(dirs, axis=0, keepdims=True), 1e-12)
        dirs_c = ad.constant(dirs)
        xs = ad.sort_axis0(ad.matmul(ad.reshape(ad.narrow(x, 1, slot, 1), (b, d)), dirs_c))
        ys = ad.sort_axis0(ad.matmul(ad.reshape(ad.narrow(y, 1, slot, 1), (b, d)), dirs_c))
        diff = ad.sub(xs, ys)
        slot_dist = ad.reduce_mean(ad.mul(diff, diff))
        total = slot_dist if total is None else ad.add(total, slot_dist)
    return total


def total_loss(model: MsVae, lang: LangBatch, traj: TrajBatch, unpaired: TrajBatch | None,
               hp: HyperParams, rng) -> tuple[Node, LossReport]:
    """Combined objective over one paired and one unpaired mini-batch.

    Returns (loss node to minimize, per-term report). The domain distance is
    always evaluated when an unpaired batch is present, but enters the
    objective only with weight alpha > 0.
    """
    p = paired_loss(model, lang, traj, hp, rng)
    total = p["jbar"]
    v_val, d_val = 0.0, 0.0
    if unpaired is not None and unpaired.batch > 0:
        u = unpaired_loss(model, unpaired, hp, rng)
        v_val = float(u["v"].value)
        if hp.gamma > 0:
            total = ad.add(total, ad.scale(u["v"], hp.gamma))
        dprime = domain_distance(p["traj_means"], u["traj_means"], hp.n_projections, rng)
        d_val = float(dprime.value)
        if hp.alpha > 0:
            total = ad.sub(total, ad.scale(dprime, hp.alpha))
    report = LossReport(
        a1=float(p["a1"].value), a2=float(p["a2"].value),
        b1=float(p["b1"].value), b2=float(p["b2"].value),
        c1=float(p["c1"].value), c2=float(p["c2"].value),
        v=v_val, dprime=d_val, total=float(total.value),
    )
    return ad.neg(total), report


# ---------------------------------------------------------------------------
# persistence


def save_model(path, model, vocab_words: list[str], extra: dict | None = None) -> None:
    meta = {
        "kind": model.kind,
        "model_config": asdict(model.cfg),
        "vocab_words": vocab_words,
        "attention": getattr(model, "attention", True),
    }
    meta.update(extra or {})
    arrays = {k: v.value for k, v in model.named_params().items()}
    nn.save_checkpoint(path, arrays, meta)


def build_model(kind: str, rng, cfg: ModelConfig, attention: bool = True):
    if kind == "msvae":
        return MsVae(rng, cfg)
    if kind == "follower":
        return BaselineFollower(rng, cfg, attention)
    if kind == "speaker":
        return BaselineSpeaker(rng, cfg, attention)
    raise ValueError(f"unknown model kind {kind!r}")


def load_model(path):
    """Rebuild a model from a checkpoint; returns (model, meta)."""
    arrays, meta = nn.load_checkpoint(path)
    cfg = ModelConfig(**meta["model_config"])
    model = build_model(meta["kind"], np.random.default_rng(0), cfg, meta.get("attention", True))
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    missing = set(model.named_params()) - set(params)
    if missing:
        raise ValueError(f"checkpoint {path} missing parameters: {sorted(missing)[:5]}")
    model.load_values(params)
    return model, meta

import numpy as np
import pytest

from msvae import autodiff as ad
from msvae import gridworld as gw
from msvae import model as md
from msvae import nn


def tiny_cfg(**kw):
    base = dict(vocab_size=9, obs_dim=5, n_actions=6, word_emb=3, action_emb=3,
                hidden=4, attn_dim=3, cell_dim=3, k_slots=2, latent_dim=3, prior_hidden=4,
                obs_view="synthetic")
    base.update(kw)
    return md.ModelConfig(**base)


def synth_traj(rng, t, obs_dim=5, n_actions=6):
    return gw.Trajectory(rng.normal(size=(t, obs_dim)), tuple(int(a) for a in rng.integers(0, n_actions, t)))


def synth_lang(rng, n, vocab=9):
    return [int(v) for v in rng.integers(4, vocab, n)]


@pytest.fixture
def tiny_model():
    return md.MsVae(np.random.default_rng(0), tiny_cfg())


class TestEncoders:
    def test_language_arity_over_lengths(self, tiny_model):
        r = np.random.default_rng(1)
        for n in (1, 7, 50):
            lang = md.make_lang_batch([synth_lang(r, n)])
            mean, logvar = tiny_model.encode_language(lang)
            assert mean.value.shape == (1, 2, 3)
            assert logvar.value.shape == (1, 2, 3)

    def test_different_instructions_different_means(self, tiny_model):
        a = md.make_lang_batch([[4, 5, 6]])
        b = md.make_lang_batch([[6, 5, 4]])
        ma, _ = tiny_model.encode_language(a)
        mb, _ = tiny_model.encode_language(b)
        assert not np.allclose(ma.value, mb.value)

    def test_trajectory_t1_and_determinism(self, tiny_model):
        r = np.random.default_rng(2)
        tb = md.make_traj_batch([synth_traj(r, 1)])
        m1, lv1 = tiny_model.encode_trajectory(tb)
        m2, lv2 = tiny_model.encode_trajectory(tb)
        assert m1.value.shape == (1, 2, 3)
        np.testing.assert_array_equal(m1.value, m2.value)
        np.testing.assert_array_equal(lv1.value, lv2.value)

    def test_empty_inputs_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            md.make_lang_batch([[]])
        with pytest.raises(ValueError, match="empty"):
            md.make_traj_batch([])

    def test_padding_does_not_leak(self, tiny_model):
        # a short instruction's slots are identical with and without a
        # longer batch neighbor forcing padding
        r = np.random.default_rng(3)
        short = synth_lang(r, 2)
        longer = synth_lang(r, 8)
        alone = tiny_model.encode_language(md.make_lang_batch([short]))[0].value[0]
        padded = tiny_model.encode_language(md.make_lang_batch([short, longer]))[0].value[0]
        np.testing.assert_allclose(alone, padded, atol=1e-12)


class TestLikelihoods:
    def test_uniform_action_logits(self, tiny_model):
        tiny_model.act_dec.head.w.value[...] = 0.0
        tiny_model.act_dec.head.b.value[...] = 0.0
        r = np.random.default_rng(4)
        for t in (1, 3, 6):
            tb = md.make_traj_batch([synth_traj(r, t)])
            z = ad.constant(r.normal(size=(1, 2, 3)))
            ll = tiny_model.action_log_likelihood(z, tb)
            assert abs(float(ll.value[0]) + t * np.log(6)) < 1e-10

    def test_uniform_language_logits_scores_eos(self, tiny_model):
        tiny_model.word_dec.head.w.value[...] = 0.0
        tiny_model.word_dec.head.b.value[...] = 0.0
        r = np.random.default_rng(5)
        n = 4
        lang = md.make_lang_batch([synth_lang(r, n)])
        z = ad.constant(r.normal(size=(1, 2, 3)))
        ll = tiny_model.language_log_likelihood(z, lang)
        # eos is scored: n tokens + eos at uniform 1/V each
        assert abs(float(ll.value[0]) + (n + 1) * np.log(9)) < 1e-10

    def test_autoregressive_order_sensitivity(self, tiny_model):
        r = np.random.default_rng(6)
        obs = r.normal(size=(4, 5))
        actions = (0, 1, 2, 3)
        swapped = (1, 0, 2, 3)
        z = ad.constant(r.normal(size=(1, 2, 3)))
        ll_a = tiny_model.action_log_likelihood(z, md.make_traj_batch([gw.Trajectory(obs, actions)]))
        ll_b = tiny_model.action_log_likelihood(z, md.make_traj_batch([gw.Trajectory(obs, swapped)]))
        assert not np.isclose(float(ll_a.value[0]), float(ll_b.value[0]))

    def test_length_mismatch_rejected(self):
        r = np.random.default_rng(7)
        with pytest.raises(ValueError, match="lengths differ"):
            gw.Trajectory(r.normal(size=(3, 5)), (0, 1))


class TestPairedLoss:
    def test_beta_zero_drops_kl(self, tiny_model):
        r = np.random.default_rng(8)
        lang = md.make_lang_batch([synth_lang(r, 3)])
        traj = md.make_traj_batch([synth_traj(r, 3)])
        hp = md.HyperParams(beta=0.0, k_slots=2, latent_dim=3)
        p = paired = md.paired_loss(tiny_model, lang, traj, hp, np.random.default_rng(0))
        expected = 0.5 * (float(p["a1"].value) + float(p["c1"].value)
                          + float(p["a2"].value) + float(p["c2"].value))
        assert abs(float(paired["jbar"].value) - expected) < 1e-12

    def test_a1_definitional(self, tiny_model):
        # A_1 equals the action likelihood evaluated at the same z sample
        r = np.random.default_rng(9)
        lang = md.make_lang_batch([synth_lang(r, 3)])
        traj = md.make_traj_batch([synth_traj(r, 4)])
        hp = md.HyperParams(k_slots=2, latent_dim=3)
        p = md.paired_loss(tiny_model, lang, traj, hp, np.random.default_rng(42))
        # replay the same noise stream to rebuild z1
        rng = np.random.default_rng(42)
        m1, lv1 = tiny_model.encode_trajectory(traj)
        z1 = nn.reparameterize(m1, lv1, rng.standard_normal(m1.value.shape))
        ll = tiny_model.action_log_likelihood(z1, traj)
        assert abs(float(p["a1"].value) - float(ll.value.mean())) < 1e-12


class TestUnpairedLoss:
    def test_closed_form_kl_toy(self):
        # 1-slot 1-dim toy with q = N(0,1), p = N(1,1): B_1 = -0.5
        cfg = tiny_cfg(k_slots=1, latent_dim=1)
        m = md.MsVae(np.random.default_rng(0), cfg)
        m.traj_bottleneck.mean_head.w.value[...] = 0.0
        m.traj_bottleneck.mean_head.b.value[...] = 0.0
        m.traj_bottleneck.logvar_head.w.value[...] = 0.0
        m.traj_bottleneck.logvar_head.b.value[...] = 0.0
        m.prior.mean_head.w.value[...] = 0.0
        m.prior.mean_head.b.value[...] = 1.0
        m.prior.logvar_head.w.value[...] = 0.0
        m.prior.logvar_head.b.value[...] = 0.0
        r = np.random.default_rng(10)
        traj = md.make_traj_batch([synth_traj(r, 2)])
        hp = md.HyperParams(beta=1.0, k_slots=1, latent_dim=1)
        u = md.unpaired_loss(m, traj, hp, np.random.default_rng(0))
        assert abs(float(u["b1"].value) + 0.5) < 1e-12
        assert abs(float(u["v"].value) - (float(u["a1"].value) - 0.5)) < 1e-12

    def test_v_le_a1_with_beta_one(self, tiny_model):
        r = np.random.default_rng(11)
        traj = md.make_traj_batch([synth_traj(r, 3) for _ in range(3)])
        hp = md.HyperParams(beta=1.0, k_slots=2, latent_dim=3)
        u = md.unpaired_loss(tiny_model, traj, hp, np.random.default_rng(0))
        assert float(u["v"].value) <= float(u["a1"].value) + 1e-12
        assert float(u["b1"].value) <= 1e-12


class TestDomainDistance:
    def test_identical_batches_zero(self):
        r = np.random.default_rng(12)
        x = ad.constant(r.normal(size=(6, 2, 3)))
        d = md.domain_distance(x, ad.constant(x.value.copy()), 10, np.random.default_rng(0))
        assert float(d.value) == 0.0

    def test_d1_matches_sorted_oracle(self):
        r = np.random.default_rng(13)
        x = r.normal(size=(8, 1, 1))
        y = r.normal(size=(8, 1, 1))
        d = md.domain_distance(ad.constant(x), ad.constant(y), 50, np.random.default_rng(1))
        oracle = np.mean((np.sort(x[:, 0, 0]) - np.sort(y[:, 0, 0])) ** 2)
        assert abs(float(d.value) - oracle) < 1e-9

    def test_translation_property(self):
        r = np.random.default_rng(14)
        x = r.normal(size=(10, 1, 1))
        c = 0.73
        d = md.domain_distance(ad.constant(x), ad.constant(x + c), 50, np.random.default_rng(2))
        assert abs(float(d.value) - c * c) < 1e-9

    def test_slots_sum(self):
        r = np.random.default_rng(15)
        x = r.normal(size=(10, 3, 1))
        c = 0.5
        d = md.domain_distance(ad.constant(x), ad.constant(x + c), 20, np.random.default_rng(3))
        assert abs(float(d.value) - 3 * c * c) < 1e-9

    def test_symmetric_nonnegative(self):
        r = np.random.default_rng(16)
        x = ad.constant(r.normal(size=(5, 2, 4)))
        y = ad.constant(r.normal(size=(5, 2, 4)))
        d_xy = md.domain_distance(x, y, 25, np.random.default_rng(7))
        d_yx = md.domain_distance(y, x, 25, np.random.default_rng(7))
        assert float(d_xy.value) >= 0.0
        assert abs(float(d_xy.value) - float(d_yx.value)) < 1e-12

    def test_unequal_batches_truncate(self):
        r = np.random.default_rng(17)
        x = ad.constant(r.normal(size=(9, 1, 2)))
        y = ad.constant(r.normal(size=(5, 1, 2)))
        d = md.domain_distance(x, y, 10, np.random.default_rng(8))
        assert np.isfinite(float(d.value))

    def test_empty_batch_rejected(self):
        x = ad.constant(np.zeros((0, 1, 2)))
        y = ad.constant(np.zeros((4, 1, 2)))
        with pytest.raises(ValueError, match="empty"):
            md.domain_distance(x, y, 5, np.random.default_rng(0))


class TestTotalLoss:
    def batches(self, seed=18):
        r = np.random.default_rng(seed)
        lang = md.make_lang_batch([synth_lang(r, 3) for _ in range(3)])
        traj = md.make_traj_batch([synth_traj(r, 3) for _ in range(3)])
        unpaired = md.make_traj_batch([synth_traj(r, 4) for _ in range(3)])
        return lang, traj, unpaired

    def test_paired_only_reduction(self, tiny_model):
        lang, traj, _ = self.batches()
        hp = md.HyperParams(gamma=0.0, alpha=0.0, k_slots=2, latent_dim=3)
        loss, report = md.total_loss(tiny_model, lang, traj, None, hp, np.random.default_rng(0))
        p = md.paired_loss(tiny_model, lang, traj, hp, np.random.default_rng(0))
        assert abs(report.total - float(p["jbar"].value)) < 1e-12
        assert report.v == 0.0 and report.dprime == 0.0

    def test_alpha_zero_reports_dprime(self, tiny_model):
        lang, traj, unpaired = self.batches()
        hp = md.HyperParams(alpha=0.0, gamma=1.0, k_slots=2, latent_dim=3)
        _, report = md.total_loss(tiny_model, lang, traj, unpaired, hp, np.random.default_rng(0))
        assert report.dprime > 0.0
        assert abs(report.total - report.recombine(hp)) < 1e-10

    def test_accounting_identity(self, tiny_model):
        lang, traj, unpaired = self.batches()
        hp = md.HyperParams(alpha=0.3, gamma=2.0, beta=0.5, k_slots=2, latent_dim=3)
        loss, report = md.total_loss(tiny_model, lang, traj, unpaired, hp, np.random.default_rng(0))
        assert abs(report.total - report.recombine(hp)) < 1e-10
        assert abs(float(loss.value) + report.total) < 1e-12


class TestFullLossGradient:
    def test_finite_difference_on_toy_instance(self):
        # 2-token toy: every parameter gradient vs central differences
        cfg = tiny_cfg()
        m = md.MsVae(np.random.default_rng(1), cfg)
        r = np.random.default_rng(19)
        lang = md.make_lang_batch([synth_lang(r, 2)])
        traj = md.make_traj_batch([synth_traj(r, 2)])
        unpaired = md.make_traj_batch([synth_traj(r, 2)])
        hp = md.HyperParams(alpha=0.25, gamma=1.5, beta=0.7, k_slots=2, latent_dim=3)

        def build():
            loss, _ = md.total_loss(m, lang, traj, unpaired, hp, np.random.default_rng(7))
            return loss

        params = m.params()
        loss = build()
        ad.zero_grad(params)
        ad.backward(loss)
        worst = 0.0
        for p in params:
            num = ad.numeric_gradient(lambda: float(build().value), p.value, eps=1e-5)
            err = ad.max_rel_error(p.gradient, num)
            worst = max(worst, err)
            assert err <= 1e-4, f"{p.name}: rel err {err:.3g}"


class TestRollouts:
    def world(self):
        return gw.sample_task(5, "goto_seq")

    def real_model(self):
        cfg = md.ModelConfig(vocab_size=22, obs_dim=gw.ego_dim(), hidden=12, word_emb=8,
                             action_emb=6, attn_dim=8, cell_dim=8, k_slots=2, latent_dim=6,
                             prior_hidden=8)
        return md.MsVae(np.random.default_rng(3), cfg)

    def test_greedy_follow_deterministic(self):
        m = self.real_model()
        world, task = self.world()
        tokens = [4, 5, 6]
        t1, _ = m.follow(tokens, world, max_steps=20)
        t2, _ = m.follow(tokens, world, max_steps=20)
        assert t1.actions == t2.actions

    def test_follow_respects_step_cap(self):
        m = self.real_model()
        world, _ = self.world()
        traj, states = m.follow([4, 5], world, max_steps=7)
        assert len(traj) <= 7
        assert len(states) == len(traj) + 1

    def test_speak_greedy_deterministic_in_vocab(self):
        m = self.real_model()
        world, task = self.world()
        actions = gw.oracle_solve(world, task)
        _, traj = gw.rollout(world, actions, view="ego")
        toks1, trunc1 = m.speak(traj, len_cap=12)
        toks2, _ = m.speak(traj, len_cap=12)
        assert toks1 == toks2
        assert all(0 <= t < 22 for t in toks1)

    def test_z_enters_only_through_attention(self):
        # diagnostic mode zeroes the attention context everywhere it flows,
        # making the rollout independent of the instruction
        m = self.real_model()
        m.act_dec.blind = True
        world, _ = self.world()
        ta, _ = m.follow([4, 5, 6], world, max_steps=15)
        tb, _ = m.follow([9, 10, 11, 12], world, max_steps=15)
        assert ta.actions == tb.actions

    def test_speak_independent_of_traj_when_context_zeroed(self):
        m = self.real_model()
        m.word_dec.blind = True
        world, task = self.world()
        _, tr1 = gw.rollout(world, gw.oracle_solve(world, task), view="ego")
        world2, task2 = gw.sample_task(6, "goto_seq")
        _, tr2 = gw.rollout(world2, gw.oracle_solve(world2, task2), view="ego")
        assert m.speak(tr1, len_cap=10)[0] == m.speak(tr2, len_cap=10)[0]


class TestPersistence:
    def test_round_trip_preserves_behavior(self, tmp_path):
        cfg = md.ModelConfig(vocab_size=22, obs_dim=gw.ego_dim(), hidden=10, word_emb=6,
                             action_emb=4, attn_dim=6, cell_dim=6, k_slots=2, latent_dim=5,
                             prior_hidden=6)
        m = md.MsVae(np.random.default_rng(7), cfg)
        path = tmp_path / "m.bin"
        md.save_model(path, m, vocab_words=["a", "b"], extra={"note": "t"})
        m2, meta = md.load_model(path)
        assert meta["kind"] == "msvae" and meta["vocab_words"] == ["a", "b"]
        for name, node in m.named_params().items():
            np.testing.assert_array_equal(node.value, m2.named_params()[name].value)
        world, _ = gw.sample_task(9, "goto_seq")
        assert m.follow([4, 5], world, max_steps=10)[0].actions == m2.follow([4, 5], world, max_steps=10)[0].actions

    def test_baseline_kinds(self, tmp_path):
        cfg = tiny_cfg()
        f = md.BaselineFollower(np.random.default_rng(0), cfg, attention=False)
        md.save_model(tmp_path / "f.bin", f, vocab_words=[])
        f2, meta = md.load_model(tmp_path / "f.bin")
        assert meta["kind"] == "follower" and meta["attention"] is False
        assert f2.attention is False

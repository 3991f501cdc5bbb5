import numpy as np
import pytest

import freqvfx.tensor as fx
from freqvfx.adapt import (VfxEmbedding, adapt, freq_constraint_loss,
                           gen_latents_for_adapt, reference_latents,
                           state_hashes, timestep_window)
from freqvfx.config import AdaptConfig
from freqvfx.denoiser import build_adapter_stack, build_conditioning, build_denoiser
from freqvfx.errors import (AdaptationDivergedError, NumericGuardError,
                            ParameterError, ShapeError)
from freqvfx.sampling import sample
from freqvfx.schedule import NoiseSchedule, forward_noise
from freqvfx.synthgen import HIGHFREQ_PARTICLES, build_dataset

import oracles

LATENT = (2, 2, 4, 4)
WIDTH = 16
NUM_STEPS = 10


def small_setup(seed=0, b=2):
    rng = np.random.default_rng(seed)
    params = build_denoiser(rng, latent_shape=LATENT, width=WIDTH, n_blocks=2,
                            patch=2, num_steps=NUM_STEPS)
    stack = build_adapter_stack(rng, params, n_experts=4, total_rank=8, top_k=3)
    sched = NoiseSchedule.cosine(NUM_STEPS)
    z0 = rng.standard_normal((b,) + LATENT).astype(np.float32)
    text = rng.standard_normal((2, WIDTH)).astype(np.float32)
    cond = build_conditioning(params, z0, text)
    return params, stack, sched, cond


def quick_config(**overrides):
    base = dict(steps=3, lr=0.02, seed=0, sample_steps=2, sample_cfg=1.0,
                sample_seed=0, embed_tokens=4, t_low_frac=0.25, t_high_frac=0.75)
    base.update(overrides)
    return AdaptConfig(**base)


class TestVfxEmbedding:
    def test_init_contract(self):
        emb = VfxEmbedding.init(np.random.default_rng(0), length=16, width=64)
        assert emb.tokens.shape == (16, 64)
        assert emb.tokens.dtype == np.float32
        assert emb.tokens.requires_grad
        sd = emb.tokens.data.std()
        assert 0.015 < sd < 0.025

    def test_empty_rejected(self):
        with pytest.raises(ParameterError):
            VfxEmbedding.init(np.random.default_rng(0), length=0)


class TestFreqConstraintLoss:
    def test_zero_at_identity(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal((2, 3, 1, 6, 6)).astype(np.float32)
        assert float(freq_constraint_loss(z, z.copy()).data) == 0.0

    def test_symmetry_and_bounds(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            a = rng.standard_normal((2, 3, 1, 6, 6)).astype(np.float32)
            b = rng.standard_normal((2, 3, 1, 6, 6)).astype(np.float32)
            lab = float(freq_constraint_loss(a, b).data)
            lba = float(freq_constraint_loss(b, a).data)
            assert lab == lba
            assert 0.0 <= lab <= 4.0

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((2, 3, 1, 6, 6)).astype(np.float32)
        b = rng.standard_normal((2, 3, 1, 6, 6)).astype(np.float32)
        from freqvfx.spectral import EPS_DEFAULT, SIGMA1_DEFAULT, SIGMA2_DEFAULT
        jd_a = oracles.joint_descriptor_scalar(a, SIGMA1_DEFAULT, SIGMA2_DEFAULT,
                                               EPS_DEFAULT)
        jd_b = oracles.joint_descriptor_scalar(b, SIGMA1_DEFAULT, SIGMA2_DEFAULT,
                                               EPS_DEFAULT)
        want = float(np.mean(np.sum(np.abs(jd_a - jd_b), axis=1)))
        got = float(freq_constraint_loss(a, b).data)
        assert abs(got - want) <= 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            freq_constraint_loss(np.zeros((1, 2, 1, 4, 4), dtype=np.float32),
                                 np.zeros((1, 2, 1, 4, 5), dtype=np.float32))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        zg_arr = rng.standard_normal((1, 2, 1, 5, 5))
        zr_arr = rng.standard_normal((1, 2, 1, 5, 5))

        def value(zg, zr):
            return float(freq_constraint_loss(fx.Tensor(zg), fx.Tensor(zr)).data)

        zg = fx.parameter(zg_arr.copy())
        with fx.Tape() as tape:
            loss = freq_constraint_loss(zg, fx.Tensor(zr_arr))
        grads = fx.backward(tape, loss)
        num = oracles.fd_grad(value, [zg_arr, zr_arr], wrt=0, step=1e-6)
        oracles.assert_grads_close(grads[zg].data, num, rtol=1e-5, atol=1e-8)


class TestLatentConstruction:
    def test_reference_formula_and_detachment(self):
        _, _, sched, _ = small_setup()
        rng = np.random.default_rng(5)
        ref = fx.parameter(rng.standard_normal((2,) + LATENT).astype(np.float32))
        eps = rng.standard_normal((2,) + LATENT).astype(np.float32)
        t = 4
        with fx.Tape() as tape:
            z_ref = reference_latents(ref, t, fx.Tensor(eps), sched)
            loss = fx.reduce_sum(fx.square(z_ref))
        a, s = sched.coefficients(t)
        want = float(a) * ref.data + float(s) * eps
        assert np.allclose(z_ref.data, want, rtol=1e-6)
        grads = fx.backward(tape, loss)
        assert ref not in grads

    def test_perfect_predictor_reproduces_noised_anchor(self):
        params, stack, sched, cond = small_setup()
        rng = np.random.default_rng(6)
        anchor = rng.standard_normal((2,) + LATENT).astype(np.float32)
        eps = rng.standard_normal((2,) + LATENT).astype(np.float32)
        t = 4
        perfect = lambda z_in, ti, c: fx.Tensor(eps)
        out = gen_latents_for_adapt(anchor, cond, t, eps, sched, params, stack,
                                    predictor=perfect)
        want = forward_noise(fx.Tensor(anchor), t, fx.Tensor(eps), sched)
        assert np.allclose(out.data, want.data, rtol=1e-5, atol=1e-6)

    def test_gradient_flows_to_embedding_not_anchor(self):
        params, stack, sched, cond = small_setup()
        rng = np.random.default_rng(7)
        emb = VfxEmbedding.init(rng, length=4, width=WIDTH)
        cond_e = cond.with_vfx(emb.tokens)
        anchor = fx.parameter(rng.standard_normal((2,) + LATENT).astype(np.float32))
        eps = rng.standard_normal((2,) + LATENT).astype(np.float32)
        with fx.Tape() as tape:
            out = gen_latents_for_adapt(anchor, cond_e, 4, eps, sched, params, stack)
            loss = fx.reduce_sum(fx.square(out))
        grads = fx.backward(tape, loss)
        assert anchor not in grads
        g = grads.get(emb.tokens)
        assert g is not None and np.any(g.data)

    def test_low_signal_timestep_guarded(self):
        params, stack, _, cond = small_setup()
        a = np.array([1.0, 5e-5])
        weak = NoiseSchedule(alphas=a, sigmas=np.sqrt(1.0 - a ** 2))
        anchor = np.zeros((2,) + LATENT, dtype=np.float32)
        with pytest.raises(NumericGuardError):
            gen_latents_for_adapt(anchor, cond, 1, anchor.copy(), weak, params,
                                  stack)


class TestTimestepWindow:
    def test_mid_window(self):
        sched = NoiseSchedule.cosine(1000)
        assert np.array_equal(timestep_window(sched, 0.25, 0.75),
                              np.arange(250, 750))

    def test_full_window(self):
        sched = NoiseSchedule.cosine(NUM_STEPS)
        assert np.array_equal(timestep_window(sched, 0.0, 1.0), np.arange(10))

    def test_empty_window_rejected(self):
        sched = NoiseSchedule.cosine(NUM_STEPS)
        with pytest.raises(ParameterError):
            timestep_window(sched, 0.5, 0.55)


class TestAdapt:
    def _reference(self, b=2, seed=3):
        ds = build_dataset(((HIGHFREQ_PARTICLES, b),), seed=seed,
                           latent_shape=LATENT, text_width=WIDTH)
        return np.stack([s.video for s in ds.samples])

    def test_self_reference_fixpoint_stays_at_zero(self):
        params, stack, sched, cond = small_setup()
        cfg = quick_config(steps=3)
        emb = VfxEmbedding.init(np.random.default_rng(cfg.seed),
                                length=cfg.embed_tokens, width=WIDTH)
        before = emb.tokens.data.copy()
        ref = sample(params, stack, sched, cond.with_vfx(emb.tokens),
                     steps=cfg.sample_steps, cfg_scale=cfg.sample_cfg,
                     seed=cfg.sample_seed).video.data
        result = adapt(ref, cond, cfg, params, stack, sched, embedding=emb)
        assert [s.loss for s in result.trace] == [0.0, 0.0, 0.0]
        assert np.array_equal(emb.tokens.data, before)

    def test_updates_only_the_embedding(self):
        params, stack, sched, cond = small_setup()
        cfg = quick_config(steps=5, lr=0.05)
        emb = VfxEmbedding.init(np.random.default_rng(0), length=4, width=WIDTH)
        before_emb = emb.tokens.data.copy()
        frozen = state_hashes(params, stack)
        result = adapt(self._reference(), cond, cfg, params, stack, sched,
                       embedding=emb)
        assert state_hashes(params, stack) == frozen
        assert not np.array_equal(emb.tokens.data, before_emb)
        assert result.embedding is emb
        assert np.all(np.isfinite(result.losses))
        window = timestep_window(sched, cfg.t_low_frac, cfg.t_high_frac)
        for s in result.trace:
            assert s.t in window

    def test_fresh_embedding_created_when_missing(self):
        params, stack, sched, cond = small_setup()
        cfg = quick_config(steps=2)
        result = adapt(self._reference(), cond, cfg, params, stack, sched)
        assert result.embedding.tokens.shape == (cfg.embed_tokens, WIDTH)
        assert len(result.trace) == 2

    def test_onestep_mode_runs_frozen(self):
        params, stack, sched, cond = small_setup()
        cfg = quick_config(steps=4, mode="onestep", refresh_every=2)
        frozen = state_hashes(params, stack)
        result = adapt(self._reference(), cond, cfg, params, stack, sched)
        assert len(result.trace) == 4
        assert np.all(np.isfinite(result.losses))
        assert state_hashes(params, stack) == frozen

    def test_zero_lr_keeps_embedding(self):
        params, stack, sched, cond = small_setup()
        cfg = quick_config(steps=3, lr=0.0)
        emb = VfxEmbedding.init(np.random.default_rng(0), length=4, width=WIDTH)
        before = emb.tokens.data.copy()
        adapt(self._reference(), cond, cfg, params, stack, sched, embedding=emb)
        assert np.array_equal(emb.tokens.data, before)

    def test_mixed_objective_still_frozen(self):
        params, stack, sched, cond = small_setup()
        cfg = quick_config(steps=2, lambda_diffusion=0.5)
        frozen = state_hashes(params, stack)
        result = adapt(self._reference(), cond, cfg, params, stack, sched)
        assert state_hashes(params, stack) == frozen
        assert np.all(np.isfinite(result.losses))

    def test_absurd_lr_diverges(self):
        params, stack, sched, cond = small_setup()
        cfg = quick_config(steps=4, lr=1e18)
        with pytest.raises(AdaptationDivergedError), np.errstate(all="ignore"):
            adapt(self._reference(), cond, cfg, params, stack, sched)

    def test_reference_shape_validated(self):
        params, stack, sched, cond = small_setup()
        cfg = quick_config()
        bad = np.zeros((2, 2, 2, 4, 5), dtype=np.float32)
        with pytest.raises(ShapeError):
            adapt(bad, cond, cfg, params, stack, sched)

    def test_config_validation(self):
        with pytest.raises(ParameterError):
            AdaptConfig(mode="other")
        with pytest.raises(ParameterError):
            AdaptConfig(steps=0)
        with pytest.raises(ParameterError):
            AdaptConfig(t_low_frac=0.8, t_high_frac=0.2)

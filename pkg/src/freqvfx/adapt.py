"""Stage-2 test-time training of the vfx embedding tokens.

Only the embedding receives updates; backbone, router, and experts stay
frozen (verified by hashing in the tests). Each step draws a timestep from
the mid-schedule window and noise, builds a noisy generated latent and a
noisy reference latent (sharing the noise draw by default), and minimizes
the L1 distance between their joint frequency descriptors.

Two constructions of the generated branch are available:

* "unroll" (default): a short differentiable sampler run produces the current
  generation from a fixed sampling seed, then it is forward-noised to t. At
  the self-reference fixpoint (reference equals the model's own sample under
  the same seed policy) the loss is exactly zero and stays there.
* "onestep": one denoiser evaluation on a noised anchor sample predicts the
  clean latent, which is re-noised with the shared eps. Cheaper per step; the
  anchor is refreshed from a detached sampler run every `refresh_every` steps.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as fx
from .config import AdaptConfig, SpectralConfig
from .denoiser import AdapterStack, Conditioning, DenoiserParams, denoise_step
from .errors import AdaptationDivergedError, NumericGuardError, ParameterError, ShapeError
from .sampling import sample
from .schedule import NoiseSchedule, forward_noise
from .spectral import EPS_DEFAULT, SIGMA1_DEFAULT, SIGMA2_DEFAULT, joint_descriptor
from .tensor import Tensor
from .train import AdamW

ALPHA_GUARD = 1e-4


@dataclass
class VfxEmbedding:
    """Learnable (L, d) tokens appended to the conditioning context."""

    tokens: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, length: int = 16, width: int = 64,
             std: float = 0.02, dtype=np.float32) -> "VfxEmbedding":
        if length < 1:
            raise ParameterError(f"embedding needs at least one token, got {length}")
        data = rng.normal(0.0, std, size=(length, width)).astype(dtype)
        return cls(tokens=fx.parameter(data, name="embedding.tokens"))


def freq_constraint_loss(z_gen, z_ref, sigma1: float = SIGMA1_DEFAULT,
                         sigma2: float = SIGMA2_DEFAULT,
                         epsilon: float = EPS_DEFAULT) -> Tensor:
    """Batch-mean L1 distance between the two joint descriptors; range [0, 4]."""
    g = z_gen if isinstance(z_gen, Tensor) else Tensor(np.asarray(z_gen))
    r = z_ref if isinstance(z_ref, Tensor) else Tensor(np.asarray(z_ref))
    if g.shape != r.shape:
        raise ShapeError(f"generated {g.shape} and reference {r.shape} latents disagree")
    jd_g = joint_descriptor(g, sigma1, sigma2, epsilon).values
    jd_r = joint_descriptor(r, sigma1, sigma2, epsilon).values
    per_sample = fx.reduce_sum(fx.absolute(jd_g - jd_r), axes=(1,))
    return fx.reduce_mean(per_sample)


def reference_latents(ref_video, t, eps, schedule: NoiseSchedule) -> Tensor:
    """Noise the clean reference to timestep t (never part of the gradient path)."""
    ref = ref_video.detach() if isinstance(ref_video, Tensor) else Tensor(np.asarray(ref_video))
    return forward_noise(ref, t, eps, schedule)


def gen_latents_for_adapt(anchor_z0, cond: Conditioning, t: int, eps,
                          schedule: NoiseSchedule, params: DenoiserParams,
                          stack: AdapterStack | None, *,
                          cross_bias: np.ndarray | None = None,
                          predictor=None) -> Tensor:
    """One-step construction of the noisy generated latent at timestep t.

    The anchor (current generation, treated as constant) is noised to t, one
    denoiser call predicts the clean latent hat_z0 = (z_t - sigma_t eps_hat) / alpha_t,
    and hat_z0 is re-noised with the same eps. Gradients flow only through eps_hat.
    """
    alpha, sigma = schedule.coefficients(int(t))
    if alpha < ALPHA_GUARD:
        raise NumericGuardError(
            f"alpha_t = {alpha:.3e} at t={int(t)} is below the {ALPHA_GUARD} guard; "
            "pick a timestep with more signal")
    anchor = anchor_z0.detach() if isinstance(anchor_z0, Tensor) else Tensor(np.asarray(anchor_z0))
    eps_t = eps if isinstance(eps, Tensor) else Tensor(np.asarray(eps, dtype=anchor.dtype))
    z_in = forward_noise(anchor, int(t), eps_t, schedule)
    if predictor is not None:
        eps_hat = predictor(z_in, int(t), cond)
    else:
        eps_hat = denoise_step(z_in, int(t), cond, params, stack, cross_bias=cross_bias)
    hat_z0 = (z_in - float(sigma) * eps_hat) / float(alpha)
    return forward_noise(hat_z0, int(t), eps_t, schedule)


@dataclass
class AdaptStep:
    step: int
    t: int
    loss: float


@dataclass
class AdaptResult:
    embedding: VfxEmbedding
    trace: list[AdaptStep] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([s.loss for s in self.trace])


def timestep_window(schedule: NoiseSchedule, low_frac: float, high_frac: float) -> np.ndarray:
    """Indices [low_frac * T, high_frac * T), the mid-schedule adaptation window."""
    lo = int(low_frac * schedule.num_steps)
    hi = int(high_frac * schedule.num_steps)
    window = np.arange(lo, hi)
    if window.size == 0:
        raise ParameterError(f"empty timestep window [{lo}, {hi})")
    return window


def adapt(ref_video, cond: Conditioning, config: AdaptConfig, params: DenoiserParams,
          stack: AdapterStack, schedule: NoiseSchedule,
          embedding: VfxEmbedding | None = None,
          spectral: SpectralConfig | None = None) -> AdaptResult:
    """Minimize the expected frequency-constraint loss over the embedding."""
    spectral = spectral or SpectralConfig()
    ref = ref_video if isinstance(ref_video, Tensor) else Tensor(np.asarray(ref_video))
    if ref.ndim != 5 or ref.shape[1:] != params.latent_shape:
        raise ShapeError(f"reference {ref.shape} does not match model {params.latent_shape}")
    rng = np.random.default_rng(config.seed)
    if embedding is None:
        embedding = VfxEmbedding.init(rng, length=config.embed_tokens,
                                      width=params.width, std=config.embed_std)
    opt = AdamW([embedding.tokens], lr=config.lr, betas=config.betas,
                eps=config.adam_eps, weight_decay=config.weight_decay)
    window = timestep_window(schedule, config.t_low_frac, config.t_high_frac)
    shape = ref.shape
    anchor = None
    result = AdaptResult(embedding=embedding)

    for step in range(config.steps):
        cond_e = cond.with_vfx(embedding.tokens)

        with fx.Tape() as tape:
            gen0 = None
            if config.mode == "unroll":
                gen0 = sample(params, stack, schedule, cond_e, steps=config.sample_steps,
                              cfg_scale=config.sample_cfg, seed=config.sample_seed).video
            elif anchor is None or step % max(1, config.refresh_every) == 0:
                with fx.pause_tape():
                    anchor = sample(params, stack, schedule, cond_e,
                                    steps=config.sample_steps, cfg_scale=config.sample_cfg,
                                    seed=config.sample_seed).video.detach()
            total = None
            first_t = 0
            for draw in range(config.n_draws):
                t = int(rng.choice(window))
                eps = rng.standard_normal(shape).astype(np.float32)
                eps_ref = eps if config.shared_noise else \
                    rng.standard_normal(shape).astype(np.float32)
                if draw == 0:
                    first_t = t
                if config.mode == "unroll":
                    z_gen = forward_noise(gen0, t, Tensor(eps), schedule)
                else:
                    z_gen = gen_latents_for_adapt(anchor, cond_e, t, eps, schedule,
                                                  params, stack)
                z_ref = reference_latents(ref, t, Tensor(eps_ref), schedule)
                term = freq_constraint_loss(z_gen, z_ref, spectral.sigma1, spectral.sigma2,
                                            spectral.epsilon)
                if config.lambda_diffusion > 0.0:
                    eps_hat_ref = denoise_step(z_ref.detach(), t, cond_e, params, stack)
                    denoise_term = fx.reduce_mean(fx.square(eps_hat_ref - Tensor(eps_ref)))
                    term = term + config.lambda_diffusion * fx.cast(denoise_term, term.dtype)
                total = term if total is None else total + term
            loss = total if config.n_draws == 1 else total * (1.0 / config.n_draws)

        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise AdaptationDivergedError(step)
        grads = fx.backward(tape, loss)
        opt.step(grads)
        result.trace.append(AdaptStep(step=step, t=first_t, loss=loss_val))
    return result


def state_hashes(params: DenoiserParams, stack: AdapterStack) -> dict[str, int]:
    """CRC32 of every frozen/trainable array, for parameter-isolation checks."""
    out = {}
    for name, tensor in {**params.named_arrays(), **stack.parameters()}.items():
        out[name] = zlib.crc32(np.ascontiguousarray(tensor.data).tobytes())
    return out

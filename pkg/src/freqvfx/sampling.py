"""Deterministic DDIM-style sampling with classifier-free guidance.

Each step computes the joint descriptor and routing weights once from the
shared noisy latent and reuses them for both guidance branches; with
cfg_scale == 1 the unconditional branch is skipped entirely, so guided and
unguided trajectories coincide bit for bit.

The update uses the alpha-ratio form z' = (a'/a) z + (s' - (a'/a) s) eps_hat,
algebraically identical to re-noising the predicted clean latent but without
dividing by the (near-zero) alpha at early steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as fx
from .denoiser import AdapterStack, Conditioning, DenoiserParams, denoise_step
from .errors import ParameterError, ShapeError
from .moe import route
from .schedule import NoiseSchedule, sampling_grid
from .spectral import joint_descriptor_detached
from .tensor import Tensor


@dataclass
class SampleResult:
    video: Tensor                 # final latent (B, T, C, H, W)
    timesteps: np.ndarray         # grid endpoints, length steps+1, descending
    descriptors: np.ndarray       # (steps, B, 6) descriptor used at each step
    pi_cond: np.ndarray | None    # (steps, B, M) routing used by the cond branch
    pi_uncond: np.ndarray | None  # same for the uncond branch (None when skipped)


def sample(params: DenoiserParams, stack: AdapterStack | None, schedule: NoiseSchedule,
           cond: Conditioning, *, steps: int = 30, cfg_scale: float = 7.5,
           seed: int | None = None, rng: np.random.Generator | None = None,
           init_noise: np.ndarray | None = None) -> SampleResult:
    """Iteratively denoise pure noise under the given conditioning."""
    if cfg_scale < 0:
        raise ParameterError(f"cfg_scale must be >= 0, got {cfg_scale}")
    if schedule.num_steps != params.num_steps:
        raise ParameterError(
            f"schedule length {schedule.num_steps} != model timestep table {params.num_steps}")
    grid = sampling_grid(schedule.num_steps, steps)
    b = cond.image_tokens.shape[0]
    shape = (b,) + params.latent_shape
    dtype = params.embed_w.dtype
    if init_noise is not None:
        init_noise = np.asarray(init_noise, dtype=dtype)
        if init_noise.shape != shape:
            raise ShapeError(f"init noise {init_noise.shape} != latent batch {shape}")
    else:
        rng = rng if rng is not None else np.random.default_rng(seed)
        init_noise = rng.standard_normal(shape).astype(dtype)

    z = Tensor(init_noise)
    n_experts = stack.n_experts if stack is not None else 0
    descriptors = np.zeros((steps, b, 6), dtype=np.float64)
    pi_cond = np.zeros((steps, b, n_experts), dtype=np.float64) if stack is not None else None
    pi_uncond = np.zeros_like(pi_cond) if (stack is not None and cfg_scale != 1.0) else None

    for k in range(steps):
        t, t_next = int(grid[k]), int(grid[k + 1])
        jd = joint_descriptor_detached(z)
        descriptors[k] = jd
        pi = None
        if stack is not None:
            pi = route(jd, stack.router, stack.top_k)
            pi_cond[k] = pi.pi.data
        eps_c = denoise_step(z, t, cond, params, stack, pi=pi)
        if cfg_scale == 1.0:
            eps_hat = eps_c
        else:
            eps_u = denoise_step(z, t, None, params, stack, pi=pi, uncond=True)
            if pi_uncond is not None:
                pi_uncond[k] = pi.pi.data  # same weights by construction; recorded per branch
            eps_hat = eps_u + cfg_scale * (eps_c - eps_u)
        a_t, s_t = schedule.alphas[t], schedule.sigmas[t]
        a_n, s_n = schedule.alphas[t_next], schedule.sigmas[t_next]
        ratio = a_n / a_t
        z = float(ratio) * z + float(s_n - ratio * s_t) * eps_hat

    return SampleResult(video=z, timesteps=grid, descriptors=descriptors,
                        pi_cond=pi_cond, pi_uncond=pi_uncond)

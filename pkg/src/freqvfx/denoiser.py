"""A desk-scale attention denoiser whose projections carry routed LoRA experts.

Layout: a latent video (B, T, C, H, W) is cut into 2x2 spatial patches, each
(t, patch) position becoming one token of dimension C*p*p, linearly embedded
to the model width. Blocks apply self-attention over all tokens and
cross-attention into the conditioning tokens (image frame-0 tokens, text
tokens, optional appended vfx embedding tokens, or a null token for the
unconditional branch). Residual connections only; no MLP or normalization
layers, which keeps the backbone a fixed random feature map.

Self-attention logits carry a +diag_bias identity term so each token mostly
attends to itself; that lets the value/output LoRA paths realize per-token
linear maps, which is what makes the frozen-backbone stage-1 objective
learnable at this scale.

The cross-attention output projections are drawn with a larger scale
(cross_gain) than the 1/sqrt(width) used elsewhere. With a frozen random
backbone the conditioning read would otherwise be a faint additive term, and
test-time updates to the vfx tokens could barely move the output spectrum;
the gain keeps the context injection comparable to the token content itself.

Every backbone weight is a frozen constant (requires_grad False). The only
trainable state lives in the router, the per-projection expert stacks, and
(in stage 2) the vfx embedding tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as fx
from .errors import ParameterError, ShapeError
from .moe import MoeAdapter, RouterParams, RoutingWeights, moe_forward, route
from .spectral import joint_descriptor_detached
from .tensor import Tensor

LATENT_SHAPE_DEFAULT = (8, 4, 8, 8)  # (T, C, h, w)
WIDTH_DEFAULT = 64
PATCH_DEFAULT = 2
N_BLOCKS_DEFAULT = 2
DIAG_BIAS_DEFAULT = 8.0
CROSS_GAIN_DEFAULT = 4.0
NUM_STEPS_DEFAULT = 1000
N_TEXT_TOKENS_DEFAULT = 2


@dataclass
class AttentionProjections:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk,
                f"{prefix}.wv": self.wv, f"{prefix}.wo": self.wo}


@dataclass
class DenoiserBlock:
    self_attn: AttentionProjections
    cross_attn: AttentionProjections


@dataclass
class DenoiserParams:
    latent_shape: tuple[int, int, int, int]
    patch: int
    width: int
    diag_bias: float
    embed_w: Tensor
    embed_b: Tensor
    unembed_w: Tensor
    unembed_b: Tensor
    pos: Tensor
    temb: Tensor
    null_token: Tensor
    cond_proj_w: Tensor
    blocks: list[DenoiserBlock]

    @property
    def patch_dim(self) -> int:
        _, c, _, _ = self.latent_shape
        return c * self.patch * self.patch

    @property
    def n_tokens(self) -> int:
        t, _, h, w = self.latent_shape
        return t * (h // self.patch) * (w // self.patch)

    @property
    def num_steps(self) -> int:
        return self.temb.shape[0]

    def named_arrays(self) -> dict[str, Tensor]:
        out = {
            "backbone.embed_w": self.embed_w, "backbone.embed_b": self.embed_b,
            "backbone.unembed_w": self.unembed_w, "backbone.unembed_b": self.unembed_b,
            "backbone.pos": self.pos, "backbone.temb": self.temb,
            "backbone.null_token": self.null_token, "backbone.cond_proj_w": self.cond_proj_w,
        }
        for i, blk in enumerate(self.blocks):
            out.update(blk.self_attn.named(f"backbone.block{i}.self"))
            out.update(blk.cross_attn.named(f"backbone.block{i}.cross"))
        return out


@dataclass
class Conditioning:
    """Cross-attention context: image tokens, text tokens, optional vfx tokens."""

    image_tokens: Tensor
    text_tokens: Tensor
    vfx_tokens: Tensor | None = None

    def with_vfx(self, vfx_tokens: Tensor | None) -> "Conditioning":
        return Conditioning(self.image_tokens, self.text_tokens, vfx_tokens)


@dataclass
class AdapterStack:
    """One shared router plus a MoeAdapter per adapted projection layer."""

    router: RouterParams
    layers: dict[str, MoeAdapter]
    top_k: int

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.router.parameters())
        for name, adapter in self.layers.items():
            out.update(adapter.parameters(prefix=f"adapter.{name}"))
        return out

    @property
    def n_experts(self) -> int:
        return self.router.n_experts


PROJECTION_SLOTS = ("q", "k", "v", "o")


def build_denoiser(rng: np.random.Generator,
                   latent_shape: tuple[int, int, int, int] = LATENT_SHAPE_DEFAULT,
                   width: int = WIDTH_DEFAULT, n_blocks: int = N_BLOCKS_DEFAULT,
                   patch: int = PATCH_DEFAULT, num_steps: int = NUM_STEPS_DEFAULT,
                   diag_bias: float = DIAG_BIAS_DEFAULT,
                   cross_gain: float = CROSS_GAIN_DEFAULT,
                   dtype=np.float32) -> DenoiserParams:
    """Random frozen backbone. All tensors are constants (requires_grad False)."""
    t, c, h, w = latent_shape
    if h % patch or w % patch:
        raise ParameterError(f"spatial dims {h}x{w} must divide by patch={patch}")
    if cross_gain <= 0.0:
        raise ParameterError(f"cross_gain must be positive, got {cross_gain}")
    pdim = c * patch * patch
    n_tok = t * (h // patch) * (w // patch)

    def const(shape, std, name):
        return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), name=name)

    def zeros(shape, name):
        return Tensor(np.zeros(shape, dtype=dtype), name=name)

    blocks = []
    for i in range(n_blocks):
        def proj(tag, out_std):
            return AttentionProjections(
                wq=const((width, width), 1.0 / math.sqrt(width), f"block{i}.{tag}.wq"),
                wk=const((width, width), 1.0 / math.sqrt(width), f"block{i}.{tag}.wk"),
                wv=const((width, width), 1.0 / math.sqrt(width), f"block{i}.{tag}.wv"),
                wo=const((width, width), out_std, f"block{i}.{tag}.wo"),
            )
        blocks.append(DenoiserBlock(
            self_attn=proj("self", 1.0 / math.sqrt(width)),
            cross_attn=proj("cross", cross_gain / math.sqrt(width))))

    return DenoiserParams(
        latent_shape=tuple(latent_shape), patch=patch, width=width, diag_bias=diag_bias,
        embed_w=const((width, pdim), 1.0 / math.sqrt(pdim), "embed_w"),
        embed_b=zeros((width,), "embed_b"),
        unembed_w=const((pdim, width), 1.0 / math.sqrt(width), "unembed_w"),
        unembed_b=zeros((pdim,), "unembed_b"),
        pos=const((n_tok, width), 0.5, "pos"),
        temb=const((num_steps, width), 0.5, "temb"),
        null_token=const((1, width), 0.5, "null_token"),
        cond_proj_w=const((width, pdim), 1.0 / math.sqrt(pdim), "cond_proj_w"),
        blocks=blocks,
    )


def build_adapter_stack(rng: np.random.Generator, params: DenoiserParams,
                        n_experts: int = 4, total_rank: int = 16, top_k: int = 3,
                        alpha: float | None = None, tau: float = 1.5,
                        router_hidden: int = 16, dtype=np.float32) -> AdapterStack:
    router = RouterParams.init(rng, n_experts=n_experts, hidden=router_hidden,
                               tau=tau, dtype=dtype)
    layers: dict[str, MoeAdapter] = {}
    for i in range(len(params.blocks)):
        for attn in ("self", "cross"):
            for slot in PROJECTION_SLOTS:
                name = f"block{i}.{attn}.{slot}"
                layers[name] = MoeAdapter.init(
                    rng, d_in=params.width, d_out=params.width, n_experts=n_experts,
                    total_rank=total_rank, top_k=top_k, alpha=alpha, dtype=dtype,
                    name=f"adapter.{name}")
    return AdapterStack(router=router, layers=layers, top_k=top_k)


# ---------------------------------------------------------------------------
# token plumbing


def patchify(z, patch: int) -> Tensor:
    """(B, T, C, H, W) -> (B, T*(H/p)*(W/p), C*p*p) tokens."""
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z))
    if z.ndim != 5:
        raise ShapeError(f"latent video must be 5-axis, got {z.shape}")
    b, t, c, h, w = z.shape
    if h % patch or w % patch:
        raise ShapeError(f"spatial dims {h}x{w} must divide by patch={patch}")
    hp, wp = h // patch, w // patch
    x = fx.reshape(z, (b, t, c, hp, patch, wp, patch))
    x = fx.transpose(x, (0, 1, 3, 5, 2, 4, 6))
    return fx.reshape(x, (b, t * hp * wp, c * patch * patch))


def unpatchify(tokens, latent_shape: tuple[int, int, int, int], patch: int) -> Tensor:
    """Inverse of patchify for the given (T, C, H, W)."""
    tokens = tokens if isinstance(tokens, Tensor) else Tensor(np.asarray(tokens))
    t, c, h, w = latent_shape
    hp, wp = h // patch, w // patch
    b = tokens.shape[0]
    if tokens.shape != (b, t * hp * wp, c * patch * patch):
        raise ShapeError(f"token tensor {tokens.shape} does not match latent {latent_shape}")
    x = fx.reshape(tokens, (b, t, hp, wp, c, patch, patch))
    x = fx.transpose(x, (0, 1, 4, 2, 5, 3, 6))
    return fx.reshape(x, (b, t, c, h, w))


def build_conditioning(params: DenoiserParams, z0, text_tokens,
                       vfx_tokens: Tensor | None = None) -> Conditioning:
    """Image tokens from frozen-projected frame 0, plus text (and vfx) tokens."""
    z0 = z0 if isinstance(z0, Tensor) else Tensor(np.asarray(z0))
    if z0.ndim != 5:
        raise ShapeError(f"latent video must be 5-axis, got {z0.shape}")
    frame0 = fx.slice_axis(z0.detach(), 1, 0, 1)
    img = fx.matmul(patchify(frame0, params.patch), fx.swap_last2(params.cond_proj_w))
    text = text_tokens if isinstance(text_tokens, Tensor) else Tensor(np.asarray(text_tokens))
    if text.ndim == 2:
        text = fx.broadcast_to(fx.reshape(text, (1,) + text.shape), (z0.shape[0],) + text.shape)
    return Conditioning(image_tokens=img, text_tokens=text, vfx_tokens=vfx_tokens)


def _context_tokens(params: DenoiserParams, cond: Conditioning | None,
                    batch: int, uncond: bool) -> Tensor:
    d = params.width
    if uncond or cond is None:
        return fx.broadcast_to(fx.reshape(params.null_token, (1, 1, d)), (batch, 1, d))
    parts = []
    for name, tok in (("image", cond.image_tokens), ("text", cond.text_tokens),
                      ("vfx", cond.vfx_tokens)):
        if tok is None:
            continue
        tok = tok if isinstance(tok, Tensor) else Tensor(np.asarray(tok))
        if tok.ndim == 2:
            tok = fx.broadcast_to(fx.reshape(tok, (1,) + tok.shape), (batch,) + tok.shape)
        if tok.ndim != 3 or tok.shape[0] != batch or tok.shape[2] != d:
            raise ShapeError(f"{name} tokens {tok.shape} incompatible with "
                             f"batch {batch}, width {d}")
        parts.append(tok)
    return fx.concat(parts, axis=1)


def _attention(x: Tensor, kv: Tensor, proj: AttentionProjections,
               stack: AdapterStack | None, pi: RoutingWeights | None,
               layer: str, scale: float, bias: np.ndarray | None) -> Tensor:
    def project(slot: str, h: Tensor) -> Tensor:
        w = getattr(proj, "w" + slot)
        if stack is None:
            return fx.matmul(h, fx.swap_last2(w))
        return moe_forward(stack.layers[f"{layer}.{slot}"], pi, w, h)

    q = project("q", x)
    k = project("k", kv)
    v = project("v", kv)
    scores = fx.matmul(q, fx.swap_last2(k)) * scale
    if bias is not None:
        scores = scores + Tensor(np.asarray(bias, dtype=scores.dtype))
    attn = fx.softmax(scores, axis=-1)
    return project("o", fx.matmul(attn, v))


def denoise_step(z_t, t, cond: Conditioning | None, params: DenoiserParams,
                 stack: AdapterStack | None, *, pi: RoutingWeights | None = None,
                 uncond: bool = False, cross_bias: np.ndarray | None = None) -> Tensor:
    """Predict the noise in z_t. Routing weights come from the descriptor of
    z_t unless a precomputed `pi` is passed in (CFG branches share one).
    """
    z_t = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t))
    if z_t.ndim != 5 or z_t.shape[1:] != params.latent_shape:
        raise ShapeError(f"latent {z_t.shape} does not match model {params.latent_shape}")
    b = z_t.shape[0]
    t_arr = np.asarray(t)
    if not np.issubdtype(t_arr.dtype, np.integer):
        raise ParameterError(f"timestep must be integer, got dtype {t_arr.dtype}")
    if t_arr.ndim == 1 and t_arr.shape[0] != b:
        raise ShapeError(f"per-sample t has length {t_arr.shape[0]}, batch is {b}")
    if np.any(t_arr < 0) or np.any(t_arr >= params.num_steps):
        raise ParameterError(f"timestep {t} outside [0, {params.num_steps})")

    if stack is not None and pi is None:
        pi = route(joint_descriptor_detached(z_t), stack.router, stack.top_k)

    tokens = fx.matmul(patchify(z_t, params.patch), fx.swap_last2(params.embed_w))
    tokens = tokens + params.embed_b
    temb = params.temb.data[t_arr]  # frozen table: plain gather, stays constant
    if temb.ndim == 1:
        temb = temb[None, None, :]
    else:
        temb = temb[:, None, :]
    x = tokens + params.pos + Tensor(temb)

    kv = _context_tokens(params, cond, b, uncond)
    scale = 1.0 / math.sqrt(params.width)
    n = params.n_tokens
    diag = (params.diag_bias * np.eye(n, dtype=x.dtype)) if params.diag_bias else None
    for i, blk in enumerate(params.blocks):
        x = x + _attention(x, x, blk.self_attn, stack, pi, f"block{i}.self", scale, diag)
        x = x + _attention(x, kv, blk.cross_attn, stack, pi, f"block{i}.cross", scale,
                           cross_bias)

    out = fx.matmul(x, fx.swap_last2(params.unembed_w)) + params.unembed_b
    return unpatchify(out, params.latent_shape, params.patch)

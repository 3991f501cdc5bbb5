"""Descriptor-driven routing over rank-budgeted LoRA experts.

A shared two-layer MLP turns the 6-dim joint descriptor into M mixture
weights (temperature softmax, optional top-k masking with renormalization).
Each adapted projection layer owns M low-rank experts whose ranks split a
fixed total budget r, so the trainable parameter count is r * (d_in + d_out)
regardless of how many experts share it.

The descriptor is always treated as a constant here: gradients reach the
router only through its own weights, never back into the descriptor pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as fx
from .errors import ParameterError, ShapeError
from .spectral import JointDescriptor
from .tensor import Tensor

DESCRIPTOR_DIM = 6
ROUTER_HIDDEN_DEFAULT = 16
N_EXPERTS_DEFAULT = 4
TOTAL_RANK_DEFAULT = 16
TOP_K_DEFAULT = 3


@dataclass
class RouterParams:
    """Two-layer routing MLP: logits = W2 @ gelu(W1 @ e + b1) + b2."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    tau: float = 1.0

    @classmethod
    def init(cls, rng: np.random.Generator, n_experts: int = N_EXPERTS_DEFAULT,
             hidden: int = ROUTER_HIDDEN_DEFAULT, tau: float = 1.0,
             dtype=np.float32) -> "RouterParams":
        """Second layer starts at zero so routing begins uniform."""
        if hidden < 1:
            raise ParameterError(f"router hidden width must be >= 1, got {hidden}")
        if tau <= 0:
            raise ParameterError(f"router temperature must be positive, got {tau}")
        w1 = rng.normal(0.0, 0.5, size=(hidden, DESCRIPTOR_DIM)).astype(dtype)
        return cls(
            w1=fx.parameter(w1, name="router.w1"),
            b1=fx.parameter(np.zeros(hidden, dtype=dtype), name="router.b1"),
            w2=fx.parameter(np.zeros((n_experts, hidden), dtype=dtype), name="router.w2"),
            b2=fx.parameter(np.zeros(n_experts, dtype=dtype), name="router.b2"),
            tau=tau,
        )

    @property
    def n_experts(self) -> int:
        return self.w2.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {"router.w1": self.w1, "router.b1": self.b1,
                "router.w2": self.w2, "router.b2": self.b2}


@dataclass
class LoraExpert:
    """One low-rank update: delta(h) = B @ (A @ h), rank = A.shape[0]."""

    a: Tensor
    b: Tensor

    @property
    def rank(self) -> int:
        return self.a.shape[0]


@dataclass
class MoeAdapter:
    """M experts attached to one projection, sharing a total rank budget."""

    experts: list[LoraExpert]
    scaling: float
    total_rank: int
    top_k: int

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int,
             n_experts: int = N_EXPERTS_DEFAULT, total_rank: int = TOTAL_RANK_DEFAULT,
             top_k: int = TOP_K_DEFAULT, alpha: float | None = None,
             dtype=np.float32, name: str = "adapter") -> "MoeAdapter":
        """A ~ N(0, 0.02), B = 0: the adapter starts as an exact identity."""
        ranks = split_rank_budget(total_rank, n_experts)
        if not 1 <= top_k <= n_experts:
            raise ParameterError(f"top_k must lie in [1, {n_experts}], got {top_k}")
        experts = []
        for m, r in enumerate(ranks):
            a = fx.parameter(rng.normal(0.0, 0.02, size=(r, d_in)).astype(dtype),
                             name=f"{name}.expert{m}.a")
            b = fx.parameter(np.zeros((d_out, r), dtype=dtype),
                             name=f"{name}.expert{m}.b")
            experts.append(LoraExpert(a, b))
        scaling = (alpha if alpha is not None else float(total_rank)) / float(total_rank)
        return cls(experts=experts, scaling=scaling, total_rank=total_rank, top_k=top_k)

    @property
    def d_in(self) -> int:
        return self.experts[0].a.shape[1]

    @property
    def d_out(self) -> int:
        return self.experts[0].b.shape[0]

    def parameters(self, prefix: str = "adapter") -> dict[str, Tensor]:
        out = {}
        for m, ex in enumerate(self.experts):
            out[f"{prefix}.expert{m}.a"] = ex.a
            out[f"{prefix}.expert{m}.b"] = ex.b
        return out


@dataclass
class RoutingWeights:
    """Per-sample mixture weights, rows sum to 1, at most top_k nonzero."""

    pi: Tensor
    top_k: int


def split_rank_budget(r: int, m: int) -> list[int]:
    """Distribute total rank r over m experts; remainders go to low indices."""
    if m < 1:
        raise ParameterError(f"need at least one expert, got {m}")
    if r < m:
        raise ParameterError(f"total rank {r} cannot give every one of {m} experts rank >= 1")
    base, rem = divmod(r, m)
    return [base + 1] * rem + [base] * (m - rem)


def adapter_param_count(adapter: MoeAdapter) -> int:
    """Trainable scalars in the adapter: r * (d_in + d_out), independent of M."""
    return sum(ex.a.size + ex.b.size for ex in adapter.experts)


def _descriptor_constant(e, dtype) -> Tensor:
    if isinstance(e, JointDescriptor):
        e = e.values
    data = e.data if isinstance(e, Tensor) else np.asarray(e)
    if data.ndim != 2 or data.shape[1] != DESCRIPTOR_DIM:
        raise ShapeError(f"routing descriptor must be (B, {DESCRIPTOR_DIM}), got {data.shape}")
    # constant leaf: no gradient path into the descriptor
    return Tensor(np.ascontiguousarray(data, dtype=dtype))


def route(e, params: RouterParams, top_k: int) -> RoutingWeights:
    """Mixture weights from a descriptor; top-k masked and renormalized."""
    m = params.n_experts
    if not 1 <= top_k <= m:
        raise ParameterError(f"top_k must lie in [1, {m}], got {top_k}")
    ec = _descriptor_constant(e, params.w1.dtype)
    h = fx.gelu(fx.matmul(ec, fx.swap_last2(params.w1)) + params.b1)
    logits = fx.matmul(h, fx.swap_last2(params.w2)) + params.b2
    pi = fx.softmax(logits, tau=params.tau, axis=-1)
    if top_k < m:
        # stable argsort on negated weights: ties resolve to the lower index
        order = np.argsort(-pi.data, axis=-1, kind="stable")
        mask = np.zeros_like(pi.data)
        np.put_along_axis(mask, order[:, :top_k], 1.0, axis=-1)
        masked = pi * Tensor(mask)
        pi = masked / fx.reduce_sum(masked, axes=(-1,), keepdims=True)
    return RoutingWeights(pi=pi, top_k=top_k)


def moe_forward(adapter: MoeAdapter, weights: RoutingWeights, w_base, h) -> Tensor:
    """Adapted projection: h @ W^T + s * sum_m pi_m * (h @ A_m^T @ B_m^T).

    `h` carries samples on axis 0 and features last: (B, d_in) or (B, N, d_in).
    The base path is computed untouched; zero experts leave it bit-exact.
    """
    w_base = w_base if isinstance(w_base, Tensor) else Tensor(np.asarray(w_base))
    h = h if isinstance(h, Tensor) else Tensor(np.asarray(h))
    if h.ndim < 2:
        raise ShapeError(f"hidden states need a feature axis, got shape {h.shape}")
    d_in, d_out = adapter.d_in, adapter.d_out
    if w_base.shape != (d_out, d_in):
        raise ShapeError(f"base weights {w_base.shape} do not match adapter ({d_out}, {d_in})")
    if h.shape[-1] != d_in:
        raise ShapeError(f"hidden feature dim {h.shape[-1]} != adapter d_in {d_in}")
    pi = weights.pi
    if pi.ndim != 2 or pi.shape[0] != h.shape[0] or pi.shape[1] != len(adapter.experts):
        raise ShapeError(f"routing weights {pi.shape} do not match batch {h.shape[0]} "
                         f"x {len(adapter.experts)} experts")
    for m, ex in enumerate(adapter.experts):
        if ex.a.shape[1] != d_in or ex.b.shape[0] != d_out or ex.a.shape[0] != ex.b.shape[1]:
            raise ShapeError(f"expert {m} shapes A{ex.a.shape} B{ex.b.shape} are inconsistent")

    out = fx.matmul(h, fx.swap_last2(w_base))
    pi_shape = (h.shape[0],) + (1,) * (h.ndim - 1)
    for m, ex in enumerate(adapter.experts):
        down = fx.matmul(h, fx.swap_last2(ex.a))
        up = fx.matmul(down, fx.swap_last2(ex.b))
        gate = fx.reshape(fx.slice_axis(pi, 1, m, m + 1), pi_shape)
        out = out + (adapter.scaling * gate) * up
    return out

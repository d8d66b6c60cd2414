"""Building blocks of the hybrid decoder.

RMSNorm, SwiGLU MLP, grouped-query attention with an append-only KV cache,
a selective state-space mixer (sequential, parallel and single-step paths)
and a top-k mixture-of-experts MLP.

Sequences are unbatched ``[T, d_model]`` tensors throughout. Parameters are
drawn from :class:`~longllava.tensor.Rng` streams, never from torch's global
generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .tensor import DEFAULT_DTYPE, Rng, ShapeError, silu


def _linear(d_in: int, d_out: int, rng: Rng, std: float, bias: bool = False, dtype=DEFAULT_DTYPE) -> nn.Linear:
    lin = nn.Linear(d_in, d_out, bias=bias, dtype=dtype)
    with torch.no_grad():
        lin.weight.copy_(rng.normal((d_out, d_in), std, dtype))
        if bias:
            lin.bias.zero_()
    return lin


class RMSNorm(nn.Module):
    def __init__(self, d_model: int, eps: float = 1e-6, dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(d_model, dtype=dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return rmsnorm(x, self)


def rmsnorm(x: torch.Tensor, layer: RMSNorm) -> torch.Tensor:
    if x.shape[-1] != layer.gain.shape[0]:
        raise ShapeError("rmsnorm", x.shape, layer.gain.shape)
    rms = torch.sqrt((x * x).mean(dim=-1, keepdim=True) + layer.eps)
    return x / rms * layer.gain


class SwiGLU(nn.Module):
    """``down(silu(gate(x)) * up(x))``; 3 * d_model * d_ff parameters."""

    def __init__(self, d_model: int, d_ff: int, rng: Rng, std: float = 0.02, out_std: float | None = None,
                 dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        self.w_gate = _linear(d_model, d_ff, rng.spawn("gate"), std, dtype=dtype)
        self.w_up = _linear(d_model, d_ff, rng.spawn("up"), std, dtype=dtype)
        self.w_down = _linear(d_ff, d_model, rng.spawn("down"), out_std or std, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.w_down(silu(self.w_gate(x)) * self.w_up(x))


# ---------------------------------------------------------------------------
# attention


@dataclass
class KVCache:
    """Append-only keys/values for one attention layer, ``[T_so_far, n_kv_heads*head_dim]``."""

    k: torch.Tensor
    v: torch.Tensor

    @classmethod
    def empty(cls, width: int, dtype=DEFAULT_DTYPE) -> "KVCache":
        return cls(torch.zeros(0, width, dtype=dtype), torch.zeros(0, width, dtype=dtype))

    def append(self, k: torch.Tensor, v: torch.Tensor) -> None:
        self.k = torch.cat([self.k, k], dim=0)
        self.v = torch.cat([self.v, v], dim=0)

    @property
    def length(self) -> int:
        return self.k.shape[0]

    @property
    def nbytes(self) -> int:
        return self.k.element_size() * self.k.numel() + self.v.element_size() * self.v.numel()


class GQAAttention(nn.Module):
    """Grouped-query attention without any positional signal.

    With ``causal=False`` it is the bidirectional attention used by the toy
    vision encoder.
    """

    def __init__(self, d_model: int, n_heads: int, n_kv_heads: int, head_dim: int, rng: Rng,
                 std: float = 0.02, out_std: float | None = None, causal: bool = True,
                 dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        if n_heads % n_kv_heads:
            raise ValueError(f"n_heads={n_heads} not divisible by n_kv_heads={n_kv_heads}")
        self.n_heads, self.n_kv_heads, self.head_dim = n_heads, n_kv_heads, head_dim
        self.causal = causal
        self.w_q = _linear(d_model, n_heads * head_dim, rng.spawn("q"), std, dtype=dtype)
        self.w_k = _linear(d_model, n_kv_heads * head_dim, rng.spawn("k"), std, dtype=dtype)
        self.w_v = _linear(d_model, n_kv_heads * head_dim, rng.spawn("v"), std, dtype=dtype)
        self.w_o = _linear(n_heads * head_dim, d_model, rng.spawn("o"), out_std or std, dtype=dtype)

    @property
    def kv_width(self) -> int:
        return self.n_kv_heads * self.head_dim

    def forward(self, x: torch.Tensor, cache: KVCache | None = None) -> torch.Tensor:
        return attention_forward(x, self, cache)


def attention_forward(x: torch.Tensor, layer: GQAAttention, cache: KVCache | None = None) -> torch.Tensor:
    T = x.shape[0]
    H, Hkv, hd = layer.n_heads, layer.n_kv_heads, layer.head_dim
    q = layer.w_q(x).view(T, H, hd).transpose(0, 1)
    k_new = layer.w_k(x)
    v_new = layer.w_v(x)
    offset = 0
    if cache is not None:
        offset = cache.length
        cache.append(k_new, v_new)
        k_all, v_all = cache.k, cache.v
    else:
        k_all, v_all = k_new, v_new
    S = k_all.shape[0]
    group = H // Hkv
    k = k_all.view(S, Hkv, hd).transpose(0, 1)
    v = v_all.view(S, Hkv, hd).transpose(0, 1)
    if group > 1:
        k = k.repeat_interleave(group, dim=0)
        v = v.repeat_interleave(group, dim=0)
    scores = (q @ k.transpose(1, 2)) / math.sqrt(hd)
    if layer.causal and S > 1:
        rows = torch.arange(T).unsqueeze(1) + offset
        cols = torch.arange(S).unsqueeze(0)
        scores = scores.masked_fill(cols > rows, float("-inf"))
    probs = torch.softmax(scores, dim=-1)
    out = (probs @ v).transpose(0, 1).reshape(T, H * hd)
    return layer.w_o(out)


# ---------------------------------------------------------------------------
# selective state space mixer


@dataclass
class SSMState:
    """Recurrent state of one Mamba layer; its size never depends on sequence length."""

    h: torch.Tensor            # [d_inner, d_state]
    conv_window: torch.Tensor  # [d_conv - 1, d_inner], most recent last

    @classmethod
    def zeros(cls, d_inner: int, d_state: int, d_conv: int, dtype=DEFAULT_DTYPE) -> "SSMState":
        return cls(torch.zeros(d_inner, d_state, dtype=dtype), torch.zeros(d_conv - 1, d_inner, dtype=dtype))

    @property
    def nbytes(self) -> int:
        return (self.h.element_size() * self.h.numel()
                + self.conv_window.element_size() * self.conv_window.numel())


class SelectiveSSM(nn.Module):
    """Mamba-style mixer: in-proj, causal depthwise conv, selective scan, gated out-proj.

    Per channel c and state s::

        h_t = exp(dt_t * A[c, s]) * h_{t-1} + dt_t * B_t[s] * x_t[c]
        y_t = sum_s C_t[s] * h_t[s] + D[c] * x_t[c]

    with ``A = -exp(A_log) < 0`` and ``dt = softplus(.) > 0``.
    """

    def __init__(self, d_model: int, d_inner: int, rng: Rng, d_state: int = 16, d_conv: int = 4,
                 dt_rank: int | None = None, std: float = 0.02, out_std: float | None = None,
                 dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        self.d_model, self.d_inner, self.d_state, self.d_conv = d_model, d_inner, d_state, d_conv
        self.dt_rank = dt_rank or max(1, math.ceil(d_model / 16))
        self.in_proj = _linear(d_model, 2 * d_inner, rng.spawn("in"), std, dtype=dtype)
        self.conv_weight = nn.Parameter(rng.spawn("conv").normal((d_inner, d_conv), 1.0 / math.sqrt(d_conv), dtype))
        self.conv_bias = nn.Parameter(torch.zeros(d_inner, dtype=dtype))
        self.x_proj = _linear(d_inner, self.dt_rank + 2 * d_state, rng.spawn("x"), std, dtype=dtype)
        self.dt_proj = _linear(self.dt_rank, d_inner, rng.spawn("dt"), self.dt_rank ** -0.5, bias=True, dtype=dtype)
        # softplus(bias) log-uniform in [1e-3, 1e-1]
        dt = torch.exp(rng.spawn("dt_bias").uniform((d_inner,), math.log(1e-3), math.log(1e-1), torch.float64))
        with torch.no_grad():
            self.dt_proj.bias.copy_((dt + torch.log(-torch.expm1(-dt))).to(dtype))
        a = torch.arange(1, d_state + 1, dtype=torch.float64).repeat(d_inner, 1)
        self.A_log = nn.Parameter(torch.log(a).to(dtype))
        self.D = nn.Parameter(torch.ones(d_inner, dtype=dtype))
        self.out_proj = _linear(d_inner, d_model, rng.spawn("out"), out_std or std, dtype=dtype)

    def new_state(self) -> SSMState:
        return SSMState.zeros(self.d_inner, self.d_state, self.d_conv, self.A_log.dtype)

    def forward(self, x: torch.Tensor, state: SSMState | None = None, parallel: bool = True) -> torch.Tensor:
        if parallel:
            return ssm_scan_parallel(x, self, state)
        return ssm_scan_sequential(x, self, state)


@dataclass
class ScanInputs:
    xc: torch.Tensor      # conv + silu stream [T, d_inner]
    z: torch.Tensor       # gate stream [T, d_inner]
    dt: torch.Tensor      # [T, d_inner]
    B: torch.Tensor       # [T, d_state]
    C: torch.Tensor       # [T, d_state]
    decay: torch.Tensor   # exp(dt*A) [T, d_inner, d_state]
    inc: torch.Tensor     # dt*B*x [T, d_inner, d_state]
    window: torch.Tensor  # trailing conv inputs after this chunk


def ssm_inputs(x: torch.Tensor, layer: SelectiveSSM, state: SSMState | None = None) -> ScanInputs:
    if x.dim() != 2 or x.shape[1] != layer.d_model:
        raise ShapeError("ssm", x.shape, (None, layer.d_model))
    T = x.shape[0]
    xs, z = layer.in_proj(x).chunk(2, dim=-1)
    if state is None:
        prev = torch.zeros(layer.d_conv - 1, layer.d_inner, dtype=x.dtype)
    else:
        prev = state.conv_window
    padded = torch.cat([prev, xs], dim=0)
    windows = padded.unfold(0, layer.d_conv, 1)  # [T, d_inner, d_conv]
    xc = silu((windows * layer.conv_weight).sum(-1) + layer.conv_bias)
    proj = layer.x_proj(xc)
    dt_in, B, C = torch.split(proj, [layer.dt_rank, layer.d_state, layer.d_state], dim=-1)
    dt = F.softplus(layer.dt_proj(dt_in))
    A = -torch.exp(layer.A_log)
    decay = torch.exp(dt.unsqueeze(-1) * A)
    inc = dt.unsqueeze(-1) * B.unsqueeze(1) * xc.unsqueeze(-1)
    window = padded[T:] if layer.d_conv > 1 else prev
    return ScanInputs(xc, z, dt, B, C, decay, inc, window)


def linear_scan_sequential(decay: torch.Tensor, inc: torch.Tensor, h0: torch.Tensor | None = None) -> torch.Tensor:
    """Reference recurrence ``h_t = decay_t * h_{t-1} + inc_t`` along dim 0."""
    h = torch.zeros_like(inc[0]) if h0 is None else h0
    out = []
    for t in range(inc.shape[0]):
        h = decay[t] * h + inc[t]
        out.append(h)
    return torch.stack(out)


def linear_scan_parallel(decay: torch.Tensor, inc: torch.Tensor, h0: torch.Tensor | None = None) -> torch.Tensor:
    """Same recurrence as :func:`linear_scan_sequential` via a work-efficient associative scan.

    Elements are pairs ``(a, b)`` composed as ``(a1, b1) then (a2, b2) = (a2*a1, a2*b1 + b2)``.
    Adjacent pairs are combined, the half-length problem is solved recursively,
    and even positions are filled in from the odd-position prefixes: O(T) work,
    O(log T) depth. Each output depends only on inputs at or before its position.
    """
    if h0 is not None:
        inc = torch.cat([(decay[:1] * h0 + inc[:1]), inc[1:]], dim=0)
    if torch.is_grad_enabled() and (decay.requires_grad or inc.requires_grad):
        return _LinearScan.apply(decay, inc)
    return _scan_pairs(decay, inc)


class _LinearScan(torch.autograd.Function):
    """Pair scan with a hand-written backward.

    The adjoint of ``h_t = a_t h_{t-1} + b_t`` is the same recurrence run
    backwards: ``g_t = dL/dh_t + a_{t+1} g_{t+1}``, giving ``dL/db_t = g_t``
    and ``dL/da_t = g_t h_{t-1}``.
    """

    @staticmethod
    def forward(ctx, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        h = _scan_pairs(a, b)
        ctx.save_for_backward(a, h)
        return h

    @staticmethod
    def backward(ctx, grad_h: torch.Tensor):
        a, h = ctx.saved_tensors
        a_next = torch.cat([a[1:], torch.zeros_like(a[:1])], dim=0)
        g = _scan_pairs(a_next.flip(0), grad_h.flip(0)).flip(0)
        h_prev = torch.cat([torch.zeros_like(h[:1]), h[:-1]], dim=0)
        return g * h_prev, g


def _scan_pairs(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    T = a.shape[0]
    if T == 1:
        return b
    odd = T % 2
    if odd:
        a = torch.cat([a, torch.ones_like(a[:1])], dim=0)
        b = torch.cat([b, torch.zeros_like(b[:1])], dim=0)
    a_even, a_odd = a[0::2], a[1::2]
    b_even, b_odd = b[0::2], b[1::2]
    h_odd = _scan_pairs(a_odd * a_even, a_odd * b_even + b_odd)
    h_even = torch.cat([b_even[:1], a_even[1:] * h_odd[:-1] + b_even[1:]], dim=0)
    h = torch.stack([h_even, h_odd], dim=1).reshape(a.shape)
    return h[:T] if odd else h


def _ssm_output(inp: ScanInputs, h: torch.Tensor, layer: SelectiveSSM) -> torch.Tensor:
    y = (h * inp.C.unsqueeze(1)).sum(-1) + layer.D * inp.xc
    return layer.out_proj(y * silu(inp.z))


def _update_state(state: SSMState | None, h: torch.Tensor, inp: ScanInputs) -> None:
    if state is not None:
        state.h = h[-1].detach()
        state.conv_window = inp.window.detach()


def ssm_scan_sequential(x: torch.Tensor, layer: SelectiveSSM, state: SSMState | None = None) -> torch.Tensor:
    """Correctness oracle: the recurrence evaluated one step at a time."""
    inp = ssm_inputs(x, layer, state)
    h = linear_scan_sequential(inp.decay, inp.inc, None if state is None else state.h)
    _update_state(state, h, inp)
    return _ssm_output(inp, h, layer)


def ssm_scan_parallel(x: torch.Tensor, layer: SelectiveSSM, state: SSMState | None = None) -> torch.Tensor:
    inp = ssm_inputs(x, layer, state)
    h = linear_scan_parallel(inp.decay, inp.inc, None if state is None else state.h)
    _update_state(state, h, inp)
    return _ssm_output(inp, h, layer)


def ssm_step(x_t: torch.Tensor, layer: SelectiveSSM, state: SSMState) -> torch.Tensor:
    """Advance one token; ``state`` is updated and keeps its size."""
    y = ssm_scan_sequential(x_t.reshape(1, -1), layer, state)
    return y.reshape(x_t.shape)


# ---------------------------------------------------------------------------
# mixture of experts


@dataclass
class RoutingRecord:
    indices: torch.Tensor   # [T, top_k] expert ids, best first
    weights: torch.Tensor   # [T, top_k], rows sum to 1
    logits: torch.Tensor    # [T, n_experts]
    aux_loss: torch.Tensor | None = field(default=None)


class MoE(nn.Module):
    """Top-k routed SwiGLU experts with renormalised gates.

    Ties in router logits go to the lower expert index. ``aux_loss_coef`` > 0
    enables a switch-style load-balancing term on the routing record.
    """

    def __init__(self, d_model: int, d_ff: int, rng: Rng, n_experts: int = 16, top_k: int = 2,
                 std: float = 0.02, out_std: float | None = None, aux_loss_coef: float = 0.0,
                 dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        if not 1 <= top_k <= n_experts:
            raise ValueError(f"top_k={top_k} outside [1, {n_experts}]")
        self.n_experts, self.top_k = n_experts, top_k
        self.aux_loss_coef = aux_loss_coef
        self.router = _linear(d_model, n_experts, rng.spawn("router"), std, dtype=dtype)
        self.experts = nn.ModuleList(
            SwiGLU(d_model, d_ff, rng.spawn(f"expert{e}"), std, out_std, dtype) for e in range(n_experts)
        )

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, RoutingRecord]:
        return moe_forward(x, self)


def route(logits: torch.Tensor, top_k: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Top-k expert ids (stable: lower index wins ties) and softmax over the kept logits."""
    order = torch.sort(logits.detach(), dim=-1, descending=True, stable=True).indices
    idx = order[:, :top_k]
    weights = torch.softmax(logits.gather(-1, idx), dim=-1)
    return idx, weights


def moe_forward(x: torch.Tensor, layer: MoE) -> tuple[torch.Tensor, RoutingRecord]:
    logits = layer.router(x)
    idx, weights = route(logits, layer.top_k)
    y = torch.zeros_like(x)
    for e in torch.unique(idx).tolist():
        rows, slot = (idx == e).nonzero(as_tuple=True)
        out = layer.experts[e](x[rows]) * weights[rows, slot].unsqueeze(-1)
        y = y.index_add(0, rows, out)
    aux = None
    if layer.aux_loss_coef > 0:
        frac = F.one_hot(idx, layer.n_experts).sum(1).to(x.dtype).mean(0) / layer.top_k
        prob = torch.softmax(logits, dim=-1).mean(0)
        aux = layer.aux_loss_coef * layer.n_experts * (frac * prob).sum()
    return y, RoutingRecord(idx, weights, logits, aux)

"""The hybrid Mamba/attention decoder: config, assembly, decode sessions,
parameter accounting, Expert-0 pruning and Int8 weight quantisation."""

from __future__ import annotations

import copy
import enum
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import (
    GQAAttention,
    KVCache,
    MoE,
    RMSNorm,
    RoutingRecord,
    SelectiveSSM,
    SSMState,
    SwiGLU,
    attention_forward,
    ssm_scan_parallel,
    ssm_scan_sequential,
    ssm_step,
)
from .tensor import DEFAULT_DTYPE, Rng, embedding_lookup


class ConfigError(ValueError):
    def __init__(self, violations: list[str]) -> None:
        self.violations = violations
        super().__init__("invalid config: " + "; ".join(violations))


class Mixer(str, enum.Enum):
    MAMBA = "mamba"
    ATTENTION = "attention"


class MLPKind(str, enum.Enum):
    DENSE = "dense"
    MOE = "moe"


@dataclass(frozen=True)
class LayerSpec:
    layer_index: int
    mixer: Mixer
    mlp: MLPKind


@dataclass(frozen=True)
class HybridConfig:
    """Structure of the hybrid stack.

    Defaults are the desk-scale toy: four stacks of eight layers, the
    attention layer fourth in each stack (7 Mamba : 1 attention), MoE on the
    odd layers of every stack. ``attn_position_in_stack`` may be a tuple;
    ``tuple(range(layers_per_stack))`` gives a pure-attention control.
    ``moe_stride=0`` means a fully dense MLP stack.
    """

    d_model: int = 256
    d_ff: int = 704
    vocab_size: int = 512
    n_stacks: int = 4
    layers_per_stack: int = 8
    attn_position_in_stack: int | tuple[int, ...] = 3
    moe_stride: int = 2
    moe_offset: int = 1
    n_experts: int = 16
    top_k: int = 2
    n_heads: int = 8
    n_kv_heads: int = 2
    head_dim: int = 32
    d_state: int = 16
    d_conv: int = 4
    expand: int = 2
    tokens_per_image: int = 144
    image_token_id: int = 4
    tie_embeddings: bool = True
    init_std: float = 0.02
    aux_loss_coef: float = 0.0

    @property
    def attn_positions(self) -> tuple[int, ...]:
        p = self.attn_position_in_stack
        return (p,) if isinstance(p, int) else tuple(p)

    @property
    def n_layers(self) -> int:
        return self.n_stacks * self.layers_per_stack

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    def layer_specs(self) -> list[LayerSpec]:
        specs = []
        for i in range(self.n_layers):
            mixer = Mixer.ATTENTION if i % self.layers_per_stack in self.attn_positions else Mixer.MAMBA
            moe = self.moe_stride > 0 and (i % self.layers_per_stack) % self.moe_stride == self.moe_offset
            specs.append(LayerSpec(i, mixer, MLPKind.MOE if moe else MLPKind.DENSE))
        return specs

    @property
    def n_attn_layers(self) -> int:
        return sum(s.mixer is Mixer.ATTENTION for s in self.layer_specs())

    @property
    def n_mamba_layers(self) -> int:
        return self.n_layers - self.n_attn_layers

    @property
    def n_moe_layers(self) -> int:
        return sum(s.mlp is MLPKind.MOE for s in self.layer_specs())

    @property
    def mamba_to_attn_ratio(self) -> float:
        return self.n_mamba_layers / self.n_attn_layers if self.n_attn_layers else math.inf

    @property
    def kv_scalars_per_token(self) -> int:
        """K and V scalars cached per position, summed over attention layers."""
        return 2 * self.n_kv_heads * self.head_dim * self.n_attn_layers

    def validate(self) -> "HybridConfig":
        bad = []
        for name in ("d_model", "d_ff", "vocab_size", "n_stacks", "layers_per_stack", "n_experts", "top_k",
                     "n_heads", "n_kv_heads", "head_dim", "d_state", "d_conv", "expand", "tokens_per_image"):
            if getattr(self, name) <= 0:
                bad.append(f"{name} must be positive")
        if self.n_kv_heads > 0 and self.n_heads % self.n_kv_heads:
            bad.append("n_heads must be a multiple of n_kv_heads")
        if self.top_k > self.n_experts:
            bad.append("top_k must not exceed n_experts")
        if self.moe_stride < 0 or (self.moe_stride and not 0 <= self.moe_offset < self.moe_stride):
            bad.append("moe_offset must lie in [0, moe_stride)")
        if any(not 0 <= p < self.layers_per_stack for p in self.attn_positions):
            bad.append("attn_position_in_stack outside the stack")
        if not 0 <= self.image_token_id < self.vocab_size:
            bad.append("image_token_id outside vocabulary")
        if bad:
            raise ConfigError(bad)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        if not isinstance(self.attn_position_in_stack, int):
            d["attn_position_in_stack"] = list(self.attn_position_in_stack)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HybridConfig":
        d = dict(d)
        if isinstance(d.get("attn_position_in_stack"), list):
            d["attn_position_in_stack"] = tuple(d["attn_position_in_stack"])
        return cls(**d)


# ---------------------------------------------------------------------------


class HybridBlock(nn.Module):
    """Pre-norm residual block: ``x + mixer(norm(x))`` then ``x + mlp(norm(x))``."""

    def __init__(self, spec: LayerSpec, cfg: HybridConfig, rng: Rng, dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        self.spec = spec
        std = cfg.init_std
        out_std = cfg.init_std / math.sqrt(2 * cfg.n_layers)
        self.norm_mixer = RMSNorm(cfg.d_model, dtype=dtype)
        if spec.mixer is Mixer.ATTENTION:
            self.mixer = GQAAttention(cfg.d_model, cfg.n_heads, cfg.n_kv_heads, cfg.head_dim, rng.spawn("attn"),
                                      std, out_std, causal=True, dtype=dtype)
        else:
            self.mixer = SelectiveSSM(cfg.d_model, cfg.d_inner, rng.spawn("ssm"), cfg.d_state, cfg.d_conv,
                                      std=std, out_std=out_std, dtype=dtype)
        self.norm_mlp = RMSNorm(cfg.d_model, dtype=dtype)
        if spec.mlp is MLPKind.MOE:
            self.mlp = MoE(cfg.d_model, cfg.d_ff, rng.spawn("moe"), cfg.n_experts, cfg.top_k, std, out_std,
                           cfg.aux_loss_coef, dtype)
        else:
            self.mlp = SwiGLU(cfg.d_model, cfg.d_ff, rng.spawn("mlp"), std, out_std, dtype)

    def forward(self, x: torch.Tensor, cache=None, parallel: bool = True, step: bool = False):
        h = self.norm_mixer(x)
        if isinstance(self.mixer, GQAAttention):
            h = attention_forward(h, self.mixer, cache)
        elif step:
            h = ssm_step(h[0], self.mixer, cache).unsqueeze(0)
        elif parallel:
            h = ssm_scan_parallel(h, self.mixer, cache)
        else:
            h = ssm_scan_sequential(h, self.mixer, cache)
        x = x + h
        h = self.norm_mlp(x)
        routing = None
        if isinstance(self.mlp, MoE):
            h, routing = self.mlp(h)
        else:
            h = self.mlp(h)
        return x + h, routing


class HybridModel(nn.Module):
    def __init__(self, cfg: HybridConfig, seed: int = 0, dtype=DEFAULT_DTYPE) -> None:
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        rng = Rng(seed, "llm")
        self.embed = nn.Parameter(rng.spawn("embed").normal((cfg.vocab_size, cfg.d_model), cfg.init_std, dtype))
        self.layers = nn.ModuleList(
            HybridBlock(spec, cfg, rng.spawn(f"layer{spec.layer_index}"), dtype) for spec in cfg.layer_specs()
        )
        self.norm_out = RMSNorm(cfg.d_model, dtype=dtype)
        if not cfg.tie_embeddings:
            self.head = nn.Parameter(rng.spawn("head").normal((cfg.vocab_size, cfg.d_model), cfg.init_std, dtype))
        self.last_routing: list[RoutingRecord] = []

    @property
    def dtype(self) -> torch.dtype:
        return self.embed.dtype

    @property
    def layer_specs(self) -> list[LayerSpec]:
        return [blk.spec for blk in self.layers]

    def embed_inputs(self, token_ids, image_embeds: torch.Tensor | None = None) -> torch.Tensor:
        """Token embeddings with every image placeholder replaced by the next image embedding row."""
        ids = torch.as_tensor(token_ids, dtype=torch.long).reshape(-1)
        x = embedding_lookup(self.embed, ids)
        slots = (ids == self.cfg.image_token_id).nonzero(as_tuple=True)[0]
        n_embeds = 0 if image_embeds is None else image_embeds.shape[0]
        if slots.numel() != n_embeds:
            raise ValueError(f"{slots.numel()} image slots but {n_embeds} image embedding rows")
        if n_embeds:
            x = x.index_copy(0, slots, image_embeds.to(x.dtype))
        return x

    def logits(self, h: torch.Tensor) -> torch.Tensor:
        h = self.norm_out(h)
        return h @ (self.embed if self.cfg.tie_embeddings else self.head).T

    def forward(self, token_ids, image_embeds: torch.Tensor | None = None, parallel: bool = True) -> torch.Tensor:
        return forward_full(self, token_ids, image_embeds, parallel)

    def aux_loss(self) -> torch.Tensor | None:
        terms = [r.aux_loss for r in self.last_routing if r is not None and r.aux_loss is not None]
        return sum(terms) if terms else None


def build_model(cfg: HybridConfig, seed: int = 0, dtype=DEFAULT_DTYPE) -> HybridModel:
    return HybridModel(cfg, seed, dtype)


def forward_full(model: HybridModel, token_ids, image_embeds: torch.Tensor | None = None,
                 parallel: bool = True) -> torch.Tensor:
    """Logits ``[T, vocab]`` for every position of one causal pass."""
    x = model.embed_inputs(token_ids, image_embeds)
    if x.shape[0] < 1:
        raise ValueError("empty input")
    routing = []
    for blk in model.layers:
        x, r = blk(x, None, parallel)
        routing.append(r)
    model.last_routing = routing
    return model.logits(x)


# ---------------------------------------------------------------------------
# incremental decoding


@dataclass
class DecodeSession:
    """Per-sequence decode state: KV caches for attention layers, SSM states for Mamba layers."""

    model: HybridModel
    caches: dict[int, KVCache | SSMState] = field(default_factory=dict)
    position_count: int = 0

    def __post_init__(self) -> None:
        if not self.caches:
            for i, blk in enumerate(self.model.layers):
                if isinstance(blk.mixer, GQAAttention):
                    self.caches[i] = KVCache.empty(blk.mixer.kv_width, self.model.dtype)
                else:
                    self.caches[i] = blk.mixer.new_state()

    def kv_bytes(self) -> int:
        return sum(c.nbytes for c in self.caches.values() if isinstance(c, KVCache))

    def ssm_bytes(self) -> int:
        return sum(c.nbytes for c in self.caches.values() if isinstance(c, SSMState))

    def nbytes(self) -> int:
        return self.kv_bytes() + self.ssm_bytes()


def new_session(model: HybridModel) -> DecodeSession:
    return DecodeSession(model)


@torch.no_grad()
def prefill(session: DecodeSession, token_ids, image_embeds: torch.Tensor | None = None) -> torch.Tensor:
    """Advance the session over a prompt chunk; returns logits at its last position."""
    model = session.model
    x = model.embed_inputs(token_ids, image_embeds)
    for i, blk in enumerate(model.layers):
        x, _ = blk(x, session.caches[i], parallel=True)
    session.position_count += x.shape[0]
    return model.logits(x[-1:])[0]


@torch.no_grad()
def decode_step(session: DecodeSession, token_id: int) -> torch.Tensor:
    model = session.model
    x = model.embed_inputs([int(token_id)])
    for i, blk in enumerate(model.layers):
        x, _ = blk(x, session.caches[i], step=True)
    session.position_count += 1
    return model.logits(x)[0]


@torch.no_grad()
def greedy_decode(model: HybridModel, token_ids, max_new_tokens: int, image_embeds=None,
                  stop_ids: tuple[int, ...] = ()) -> list[int]:
    """Temperature-zero generation; returns only the new tokens."""
    if max_new_tokens <= 0:
        return []
    session = new_session(model)
    logits = prefill(session, token_ids, image_embeds)
    out = []
    for _ in range(max_new_tokens):
        tok = int(torch.argmax(logits))
        out.append(tok)
        if tok in stop_ids or len(out) == max_new_tokens:
            break
        logits = decode_step(session, tok)
    return out


# ---------------------------------------------------------------------------
# parameter accounting


@dataclass(frozen=True)
class ParamCount:
    total: int
    active: int


def count_params(model: HybridModel) -> ParamCount:
    """Enumerate named parameters; a MoE layer contributes its router plus ``top_k`` experts to ``active``."""
    total = active = 0
    for name, p in model.named_parameters():
        total += p.numel()
        active += p.numel()
    for blk in model.layers:
        if isinstance(blk.mlp, MoE):
            per_expert = sum(p.numel() for p in blk.mlp.experts[0].parameters())
            active -= (blk.mlp.n_experts - blk.mlp.top_k) * per_expert
    for _, buf in _int8_buffers(model):
        total += buf.numel()
        active += buf.numel()
    return ParamCount(total, active)


def closed_form_params(cfg: HybridConfig) -> ParamCount:
    d, ff, di, ds = cfg.d_model, cfg.d_ff, cfg.d_inner, cfg.d_state
    dt_rank = max(1, math.ceil(d / 16))
    mlp = 3 * d * ff
    attn = d * cfg.n_heads * cfg.head_dim * 2 + d * cfg.n_kv_heads * cfg.head_dim * 2
    mamba = (d * 2 * di + di * cfg.d_conv + di + di * (dt_rank + 2 * ds) + dt_rank * di + di
             + di * ds + di + di * d)
    total = active = cfg.vocab_size * d * (1 if cfg.tie_embeddings else 2) + d
    for spec in cfg.layer_specs():
        mixer = attn if spec.mixer is Mixer.ATTENTION else mamba
        total += mixer + 2 * d
        active += mixer + 2 * d
        if spec.mlp is MLPKind.MOE:
            router = d * cfg.n_experts
            total += router + cfg.n_experts * mlp
            active += router + cfg.top_k * mlp
        else:
            total += mlp
            active += mlp
    return ParamCount(total, active)


# ---------------------------------------------------------------------------
# Expert-0 pruning


def prune_to_expert0(model: HybridModel) -> HybridModel:
    """Dense copy of ``model`` in which every MoE layer keeps only expert 0 and drops its router."""
    if not any(isinstance(blk.mlp, MoE) for blk in model.layers):
        warnings.warn("prune_to_expert0: model has no MoE layers; returned unchanged", stacklevel=2)
        return model
    pruned = copy.deepcopy(model)
    for blk in pruned.layers:
        if isinstance(blk.mlp, MoE):
            blk.mlp = blk.mlp.experts[0]
            blk.spec = replace(blk.spec, mlp=MLPKind.DENSE)
    pruned.cfg = replace(model.cfg, moe_stride=0)
    return pruned


# ---------------------------------------------------------------------------
# Int8 weight-only quantisation


def quantize_tensor(w: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Symmetric per-output-row absmax: ``w ~= q * scale[:, None]`` with ``q`` in [-127, 127].

    All-zero rows get scale 1 so they round-trip exactly.
    """
    absmax = w.detach().abs().amax(dim=1)
    scale = torch.where(absmax > 0, absmax / 127.0, torch.ones_like(absmax))
    q = torch.round(w.detach() / scale.unsqueeze(1)).clamp(-127, 127).to(torch.int8)
    return q, scale


def dequantize_tensor(q: torch.Tensor, scale: torch.Tensor, dtype=DEFAULT_DTYPE) -> torch.Tensor:
    return q.to(dtype) * scale.to(dtype).unsqueeze(1)


class Int8Linear(nn.Module):
    """Linear layer holding int8 weights; dequantises on every call."""

    def __init__(self, lin: nn.Linear) -> None:
        super().__init__()
        q, scale = quantize_tensor(lin.weight)
        self.register_buffer("qweight", q)
        self.register_buffer("scale", scale.to(lin.weight.dtype))
        self.bias = None if lin.bias is None else nn.Parameter(lin.bias.detach().clone(), requires_grad=False)
        self.in_features, self.out_features = lin.in_features, lin.out_features

    @property
    def weight(self) -> torch.Tensor:
        return dequantize_tensor(self.qweight, self.scale, self.scale.dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight, self.bias)


def _int8_buffers(model: nn.Module) -> Iterator[tuple[str, torch.Tensor]]:
    for name, buf in model.named_buffers():
        if name.endswith("qweight"):
            yield name, buf


def _swap_linears(module: nn.Module) -> None:
    for name, child in module.named_children():
        if isinstance(child, nn.Linear):
            setattr(module, name, Int8Linear(child))
        else:
            _swap_linears(child)


def quantize_int8_weights(model: HybridModel) -> HybridModel:
    """Copy of ``model`` with every matmul weight inside the blocks stored as int8.

    Embeddings (and the tied head), norms, conv kernels and SSM decay/skip
    parameters stay in full precision.
    """
    qmodel = copy.deepcopy(model)
    for blk in qmodel.layers:
        _swap_linears(blk)
    qmodel.quantized = True
    return qmodel

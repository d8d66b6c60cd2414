"""Progressive multimodal training.

Stage 0 (text) tunes the language model alone; Stage I (align) trains only
the projector; Stages II and III (single-/multi-image SFT) train projector
and language model with the vision encoder frozen. Each stage resumes from
the previous stage's components, packs its corpus into fixed-length token
streams separated by ``<eos>``, and follows a warmup + cosine learning-rate
law over exactly one epoch by default.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_components, load_state_strict, model_from_state, save_components
from .model import HybridConfig, HybridModel, build_model, forward_full
from .protocol import (
    DESK_PACK_LENGTH,
    MultimodalSequence,
    Record,
    Vocabulary,
    plan_packing,
    record_to_sequence,
)
from .synth import (
    SynthTaskSpec,
    gen_caption_task,
    gen_icl_task,
    gen_needle_task,
    gen_single_qa,
    gen_subimage_task,
    gen_text_task,
    gen_video_caption,
    image_key,
    resolve_image,
)
from .tensor import Rng, cross_entropy
from .vision import EncoderConfig, Projector, VisionEncoder, image_features

log = logging.getLogger(__name__)

FULL_SCALE_PEAK_LR = 1e-5
WARMUP_FRACTION = 0.03
FULL_SCALE_STAGE_SIZES = {"text": 278_000, "align": 600_000, "single-sft": 932_000, "multi-sft": 750_000}

ADAM_BETAS = (0.0, 0.999)  # no first-moment momentum
ADAM_EPS = 1e-8


class Stage(str, enum.Enum):
    TEXT = "text"
    ALIGN = "align"
    SINGLE_SFT = "single-sft"
    MULTI_SFT = "multi-sft"


STAGE_ORDER = (Stage.TEXT, Stage.ALIGN, Stage.SINGLE_SFT, Stage.MULTI_SFT)

TRAINABLE = {
    Stage.TEXT: frozenset({"llm"}),
    Stage.ALIGN: frozenset({"projector"}),
    Stage.SINGLE_SFT: frozenset({"projector", "llm"}),
    Stage.MULTI_SFT: frozenset({"projector", "llm"}),
}

MULTI_SFT_WEIGHTS = {
    "multi_image_a": 200,
    "multi_image_b": 200,
    "video_caption": 50,
    "single_replay": 200,
    "text_replay": 50,
    "subimage": 50,
}


@dataclass
class MixtureSpec:
    weights: dict[str, float]

    def __post_init__(self) -> None:
        if not self.weights or any(w <= 0 for w in self.weights.values()):
            raise ValueError("mixture weights must be positive")

    def normalized(self) -> dict[str, float]:
        total = sum(self.weights.values())
        return {k: w / total for k, w in self.weights.items()}


@dataclass
class StageConfig:
    stage: Stage
    trainable: frozenset[str] = frozenset()
    mixture: MixtureSpec | None = None
    peak_lr: float = FULL_SCALE_PEAK_LR
    warmup_fraction: float = WARMUP_FRACTION
    epochs: int = 1
    pack_length: int = DESK_PACK_LENGTH

    def __post_init__(self) -> None:
        self.stage = Stage(self.stage)
        if not self.trainable:
            self.trainable = TRAINABLE[self.stage]
        if self.mixture is None and self.stage is Stage.MULTI_SFT:
            self.mixture = MixtureSpec(dict(MULTI_SFT_WEIGHTS))

    @property
    def response_only(self) -> bool:
        return self.stage in (Stage.SINGLE_SFT, Stage.MULTI_SFT)


# ---------------------------------------------------------------------------
# components


@dataclass
class Components:
    model: HybridModel
    encoder: VisionEncoder
    projector: Projector
    vocab: Vocabulary = field(default_factory=Vocabulary)
    _features: dict = field(default_factory=dict, repr=False)

    def modules(self) -> dict[str, nn.Module]:
        return {"encoder": self.encoder, "projector": self.projector, "llm": self.model}

    @property
    def tokens_per_image(self) -> int:
        return self.model.cfg.tokens_per_image

    @property
    def pool_factor(self) -> int:
        g = self.encoder.cfg.grid_side
        side = math.isqrt(self.tokens_per_image)
        if side * side != self.tokens_per_image or g % side:
            raise ValueError(f"tokens_per_image {self.tokens_per_image} does not tile a {g}x{g} grid")
        return g // side

    def features(self, ref) -> torch.Tensor:
        """Pooled encoder features; cached while the encoder is frozen."""
        frozen = not any(p.requires_grad for p in self.encoder.parameters())
        key = ref if isinstance(ref, str) else image_key(ref)
        if frozen and key in self._features:
            return self._features[key]
        with torch.set_grad_enabled(not frozen):
            f = image_features(resolve_image(ref), self.encoder, self.pool_factor)
        if frozen:
            self._features[key] = f
        return f

    def image_embeds(self, refs: Sequence) -> torch.Tensor | None:
        if not refs:
            return None
        feats = torch.cat([self.features(r) for r in refs], dim=0)
        return self.projector(feats)


def build_components(cfg: HybridConfig, enc_cfg: EncoderConfig = EncoderConfig(), seed: int = 0,
                     projector_hidden: int | None = None) -> Components:
    model = build_model(cfg, seed)
    encoder = VisionEncoder(enc_cfg)
    projector = Projector(enc_cfg.d_vision, cfg.d_model, projector_hidden, seed=seed)
    return Components(model, encoder, projector)


def module_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_bundle(comp: Components, path: str | Path, meta: dict | None = None) -> str:
    return save_components(path, {
        "llm": (comp.model, comp.model.cfg.to_dict()),
        "encoder": (comp.encoder, comp.encoder.cfg.to_dict()),
        "projector": (comp.projector, {**comp.projector.config(), "meta": meta or {}}),
    })


def load_bundle(path: str | Path) -> Components:
    ck = load_components(path)
    cfgs = ck.manifest["configs"]
    model = model_from_state(cfgs["llm"], ck.component("llm"))
    encoder = VisionEncoder(EncoderConfig(**cfgs["encoder"]))
    load_state_strict(encoder, ck.component("encoder"), "encoder")
    pc = cfgs["projector"]
    projector = Projector(pc["d_vision"], pc["d_model"], pc["d_hidden"])
    load_state_strict(projector, ck.component("projector"), "projector")
    return Components(model, encoder, projector)


# ---------------------------------------------------------------------------
# freezing and schedule


def freeze_mask(model: HybridModel, encoder: VisionEncoder, projector: Projector,
                stage: StageConfig) -> dict[str, bool]:
    """Per-parameter trainable flags, keyed ``<component>.<param name>``."""
    flags = {}
    for comp, module in (("encoder", encoder), ("projector", projector), ("llm", model)):
        for name, _ in module.named_parameters():
            flags[f"{comp}.{name}"] = comp in stage.trainable
    return flags


def apply_freeze(comp: Components, stage: StageConfig) -> list[nn.Parameter]:
    flags = freeze_mask(comp.model, comp.encoder, comp.projector, stage)
    trainable = []
    for cname, module in comp.modules().items():
        for name, p in module.named_parameters():
            p.requires_grad_(flags[f"{cname}.{name}"])
            if p.requires_grad:
                trainable.append(p)
    return trainable


def lr_schedule(step: float, total_steps: int, peak: float = FULL_SCALE_PEAK_LR,
                warmup_fraction: float = WARMUP_FRACTION) -> float:
    """Linear warmup over ``warmup_fraction * total_steps`` then half-cosine decay to 0 at ``total_steps``."""
    if total_steps <= 0:
        return peak
    step = min(max(step, 0), total_steps)
    warm = warmup_fraction * total_steps
    if warm > 0 and step < warm:
        return peak * step / warm
    span = total_steps - warm
    progress = (step - warm) / span if span > 0 else 1.0
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# mixture sampling


def sample_mixture(spec: MixtureSpec, n: int, seed: int, sources: dict[str, Sequence] | None = None) -> list:
    """Draw ``n`` source names i.i.d. proportional to the weights.

    With ``sources`` the k-th draw of a source yields that source's next item
    (cycling), so the result is a list of ``(source, item)`` pairs.
    """
    names = list(spec.weights)
    if sources is not None:
        for name in names:
            if not sources.get(name):
                raise ValueError(f"mixture source {name!r} is empty")
    if n <= 0:
        return []
    p = np.array([spec.weights[k] for k in names], dtype=np.float64)
    draws = Rng(seed, "mixture").choice(len(names), size=n, p=p / p.sum())
    picked = [names[i] for i in draws]
    if sources is None:
        return picked
    counters = {k: 0 for k in names}
    out = []
    for name in picked:
        src = sources[name]
        out.append((name, src[counters[name] % len(src)]))
        counters[name] += 1
    return out


# ---------------------------------------------------------------------------
# training


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainingReport:
    stage: str
    steps: list[dict] = field(default_factory=list)
    checksums_before: dict[str, str] = field(default_factory=dict)
    checksums_after: dict[str, str] = field(default_factory=dict)
    items_consumed: int = 0
    n_batches: int = 0
    seconds: float = 0.0
    parent_checkpoint: str | None = None
    checkpoint: str | None = None

    @property
    def losses(self) -> list[float]:
        return [s["loss"] for s in self.steps]

    def smoothed_losses(self, alpha: float = 0.1) -> list[float]:
        out, ema = [], None
        for v in self.losses:
            ema = v if ema is None else (1 - alpha) * ema + alpha * v
            out.append(ema)
        return out

    def to_records(self) -> list[dict]:
        recs = [{"type": "step", "stage": self.stage, **s} for s in self.steps]
        summary = {k: v for k, v in asdict(self).items() if k != "steps"}
        recs.append({"type": "summary", **summary})
        return recs

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for r in self.to_records():
                fh.write(json.dumps(r, sort_keys=True) + "\n")


@dataclass
class Example:
    sequence: MultimodalSequence
    images: list


def make_examples(records: Sequence[Record], vocab: Vocabulary, tokens_per_image: int) -> list[Example]:
    return [Example(record_to_sequence(r, vocab, tokens_per_image), r.images) for r in records]


def loss_mask(ex: Example, vocab: Vocabulary, response_only: bool) -> list[bool]:
    if response_only:
        return ex.sequence.target_mask()
    return [not vocab.is_special(t) for t in ex.sequence.render(vocab)]


def batch_tensors(members: Sequence[Example], comp: Components, response_only: bool):
    """Token ids, image embeddings and next-token loss mask for one packed stream."""
    vocab = comp.vocab
    ids: list[int] = []
    mask: list[bool] = []
    refs: list = []
    for k, ex in enumerate(members):
        if k:
            ids.append(vocab.eos)
            mask.append(False)
        ids += ex.sequence.render(vocab)
        mask += loss_mask(ex, vocab, response_only)
        refs += [ex.images[s.index] for s in ex.sequence.image_slots]
    ids_t = torch.tensor(ids, dtype=torch.long)
    return ids_t, comp.image_embeds(refs), torch.tensor(mask[1:], dtype=torch.bool)


def sequence_loss(comp: Components, ids: torch.Tensor, embeds, mask: torch.Tensor) -> torch.Tensor:
    logits = forward_full(comp.model, ids, embeds)
    loss = cross_entropy(logits[:-1], ids[1:], mask)
    aux = comp.model.aux_loss()
    return loss if aux is None else loss + aux


def train_stage(comp: Components, stage: StageConfig, corpus: Sequence[Record], seed: int,
                log_every: int = 0) -> TrainingReport:
    """One progressive stage over ``corpus`` (``epochs`` passes, each item exactly once per pass)."""
    if not corpus:
        raise TrainingError("empty corpus")
    report = TrainingReport(stage.stage.value)
    report.checksums_before = {k: module_checksum(m) for k, m in comp.modules().items()}
    params = apply_freeze(comp, stage)
    opt = torch.optim.Adam(params, lr=0.0, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=0.0)
    examples = make_examples(corpus, comp.vocab, comp.tokens_per_image)
    rng = Rng(seed, f"train/{stage.stage.value}")
    plans = []
    for _ in range(stage.epochs):
        order = rng.permutation(len(examples))
        batches = plan_packing([len(examples[i].sequence) for i in order], stage.pack_length)
        plans += [[examples[order[m]] for m in b.members] for b in batches]
        report.items_consumed += sum(len(b.members) for b in batches)
    total = len(plans)
    report.n_batches = total
    comp.model.train()
    t0 = time.perf_counter()
    for step, members in enumerate(plans):
        lr = lr_schedule(step, total, stage.peak_lr, stage.warmup_fraction)
        for g in opt.param_groups:
            g["lr"] = lr
        ids, embeds, mask = batch_tensors(members, comp, stage.response_only)
        loss = sequence_loss(comp, ids, embeds, mask)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step} of stage {stage.stage.value}: "
                                f"{len(members)} items, {ids.numel()} tokens, {int(mask.sum())} targets")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        report.steps.append({"step": step, "loss": loss.item(), "lr": lr, "tokens": int(ids.numel())})
        if log_every and step % log_every == 0:
            log.info("%s step %d/%d loss %.4f lr %.2e", stage.stage.value, step, total, float(loss), lr)
    comp.model.eval()
    for p in params:
        p.requires_grad_(False)
    report.seconds = time.perf_counter() - t0
    report.checksums_after = {k: module_checksum(m) for k, m in comp.modules().items()}
    return report


@torch.no_grad()
def eval_loss(comp: Components, records: Sequence[Record], response_only: bool = True) -> float:
    """Mean per-item loss (no packing) over ``records``."""
    total = 0.0
    for ex in make_examples(records, comp.vocab, comp.tokens_per_image):
        ids, embeds, mask = batch_tensors([ex], comp, response_only)
        total += float(sequence_loss(comp, ids, embeds, mask))
    return total / len(records)


# ---------------------------------------------------------------------------
# the progressive chain


def desk_model_config(**overrides) -> HybridConfig:
    """Small hybrid stack used for CPU training runs; keeps every structural ratio."""
    base = dict(d_model=64, d_ff=128, vocab_size=512, n_stacks=4, layers_per_stack=8, n_heads=4,
                n_kv_heads=2, head_dim=16, d_state=8, d_conv=4, expand=2, n_experts=16, top_k=2)
    base.update(overrides)
    return HybridConfig(**base)


def chain_model_config(**overrides) -> HybridConfig:
    """One stack of the desk model at 36 tokens per image; the wider init lets it start reading images."""
    base = dict(n_stacks=1, tokens_per_image=36, init_std=0.1)
    base.update(overrides)
    return desk_model_config(**base)


@dataclass
class ChainConfig:
    model: HybridConfig = field(default_factory=chain_model_config)
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(d_vision=32, n_layers=1, n_heads=2))
    projector_hidden: int | None = None
    seed: int = 0
    pack_length: dict[str, int] = field(default_factory=lambda: {
        "text": 256, "align": 256, "single-sft": 256, "multi-sft": 512})
    peak_lr: dict[str, float] = field(default_factory=lambda: {
        "text": 1e-3, "align": 1e-3, "single-sft": 1e-3, "multi-sft": 1e-3})
    warmup_fraction: float = WARMUP_FRACTION
    epochs: dict[str, int] = field(default_factory=lambda: {
        "text": 1, "align": 1, "single-sft": 1, "multi-sft": 1})
    sizes: dict[str, int] = field(default_factory=lambda: {
        "text": 400, "align": 360, "single-sft": 1500, "multi-sft": 1500})
    multi_weights: dict[str, float] = field(default_factory=lambda: dict(MULTI_SFT_WEIGHTS))
    needle_haystack: tuple[int, int] = (2, 8)
    icl_shots: tuple[int, int] = (0, 4)


def stage_corpus(stage: Stage, cc: ChainConfig, seed: int) -> list[Record]:
    n = cc.sizes[stage.value]
    side = cc.encoder.image_size
    spec = SynthTaskSpec(image_size=side, haystack=cc.needle_haystack, shots=cc.icl_shots)
    if stage is Stage.TEXT:
        return gen_text_task(n, seed)
    if stage is Stage.ALIGN:
        return gen_caption_task(spec, n, seed)
    if stage is Stage.SINGLE_SFT:
        return gen_single_qa(spec, n, seed)
    sources = {
        "multi_image_a": gen_icl_task(spec, n, seed + 1),
        "multi_image_b": gen_needle_task(spec, n, seed + 2),
        "video_caption": gen_video_caption(spec, max(1, n // 4), seed + 3),
        "single_replay": gen_single_qa(spec, n, seed + 4),
        "text_replay": gen_text_task(max(1, n // 4), seed + 5),
        "subimage": gen_subimage_task(spec, max(1, n // 4), seed + 6),
    }
    drawn = sample_mixture(MixtureSpec(cc.multi_weights), n, seed, sources)
    return [rec for _, rec in drawn]


def stage_config(stage: Stage, cc: ChainConfig) -> StageConfig:
    return StageConfig(stage, peak_lr=cc.peak_lr[stage.value], warmup_fraction=cc.warmup_fraction,
                       epochs=cc.epochs[stage.value], pack_length=cc.pack_length[stage.value])


def run_stage(comp: Components, stage: Stage, cc: ChainConfig, out_dir: Path | None = None,
              parent: str | None = None, log_every: int = 0) -> TrainingReport:
    seed = cc.seed * 100 + STAGE_ORDER.index(stage)
    corpus = stage_corpus(stage, cc, seed)
    report = train_stage(comp, stage_config(stage, cc), corpus, seed, log_every)
    report.parent_checkpoint = parent
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        ck = out_dir / f"stage_{stage.value}.ckpt"
        report.checkpoint = save_bundle(comp, ck, {"stage": stage.value, "parent": parent})
        report.write_jsonl(out_dir / f"stage_{stage.value}.jsonl")
    return report


def run_chain(cc: ChainConfig = ChainConfig(), out_dir: str | Path | None = None,
              log_every: int = 0) -> tuple[Components, list[TrainingReport]]:
    """Text -> align -> single-image SFT -> multi-image SFT, each stage resuming the previous."""
    comp = build_components(cc.model, cc.encoder, cc.seed, cc.projector_hidden)
    out = Path(out_dir) if out_dir is not None else None
    reports, parent = [], None
    for stage in STAGE_ORDER:
        rep = run_stage(comp, stage, cc, out, parent, log_every)
        reports.append(rep)
        parent = rep.checkpoint
    return comp, reports

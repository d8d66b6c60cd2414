"""Analytic cost models and wall-clock measurements.

The analytic half turns a model geometry into token counts, KV-cache bytes,
FLOPs and a memory-budget image count. The empirical half times prefill and
decode on real toy models and reads off session memory, with warmups
excluded and every raw sample kept.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .model import HybridConfig, HybridModel, build_model, decode_step, new_session, prefill

GIB = 1024 ** 3
GPU_80GB = 80 * GIB


# ---------------------------------------------------------------------------
# analytic cost model


@dataclass(frozen=True)
class CostModelConfig:
    name: str = "custom"
    total_params: float = 53e9
    active_params: float = 13e9
    n_attn_layers: int = 4
    n_kv_heads: int = 8
    head_dim: int = 128
    bytes_per_scalar: int = 2        # KV precision: 2 for bf16, 1 for int8
    tokens_per_image: int = 144
    flops_kappa: int = 1             # FLOPs = kappa * active_params * tokens
    weight_bytes_per_param: float = 1.0  # int8 weights

    def __post_init__(self) -> None:
        for k in ("total_params", "active_params", "n_attn_layers", "n_kv_heads", "head_dim",
                  "bytes_per_scalar", "tokens_per_image", "weight_bytes_per_param"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        if self.active_params > self.total_params:
            raise ValueError("active_params cannot exceed total_params")
        if self.flops_kappa not in (1, 2):
            raise ValueError("flops_kappa must be 1 or 2")

    @property
    def weight_bytes(self) -> float:
        return self.total_params * self.weight_bytes_per_param

    @property
    def kv_bytes_per_token(self) -> int:
        return 2 * self.n_attn_layers * self.n_kv_heads * self.head_dim * self.bytes_per_scalar

    def to_dict(self) -> dict:
        return asdict(self)


# Attention geometry of a Jamba-class hybrid (4 of 32 layers attend, 8 KV heads of width 128).
JAMBA_GEOMETRY = dict(n_attn_layers=4, n_kv_heads=8, head_dim=128)
LONGLLAVA_A13B = CostModelConfig("A13B", total_params=53e9, active_params=13e9, **JAMBA_GEOMETRY)
LONGLLAVA_9B = CostModelConfig("9B", total_params=9e9, active_params=9e9, **JAMBA_GEOMETRY)
PRESETS = {c.name: c for c in (LONGLLAVA_A13B, LONGLLAVA_9B)}

MAX_IMAGES_ANCHOR = 1173  # images on one 80 GB device with int8 weights


def video_tokens(minutes: float, fps: float, tokens_per_image: int) -> int:
    if minutes < 0 or fps < 0 or tokens_per_image < 0:
        raise ValueError("arguments must be non-negative")
    return int(round(minutes * 60 * fps)) * tokens_per_image


def kv_cache_bytes(cfg: CostModelConfig, T: int) -> int:
    if T < 0:
        raise ValueError("T must be non-negative")
    return 2 * cfg.n_attn_layers * cfg.n_kv_heads * cfg.head_dim * T * cfg.bytes_per_scalar


def flops_estimate(cfg: CostModelConfig, n_images: int) -> float:
    if n_images < 0:
        raise ValueError("n_images must be non-negative")
    return cfg.flops_kappa * cfg.active_params * n_images * cfg.tokens_per_image


@dataclass(frozen=True)
class OverheadModel:
    """Runtime memory beyond weights and KV cache.

    ``activation_bytes_per_token`` is charged for every image token (vision
    activations, projector outputs, runtime buffers), so it scales with the
    image count and the per-image budget; ``prompt_slack_tokens`` reserves
    KV room for the text prompt; ``fixed_bytes`` covers anything constant.
    """

    activation_bytes_per_token: float = 0.0
    prompt_slack_tokens: int = 0
    fixed_bytes: float = 0.0

    def activation_overhead(self, n_images: int, tokens_per_image: int) -> float:
        return self.activation_bytes_per_token * n_images * tokens_per_image


def memory_required(n_images: int, cfg: CostModelConfig, overhead: OverheadModel) -> float:
    tokens = n_images * cfg.tokens_per_image + overhead.prompt_slack_tokens
    return (cfg.weight_bytes + overhead.fixed_bytes + kv_cache_bytes(cfg, tokens)
            + overhead.activation_overhead(n_images, cfg.tokens_per_image))


class InfeasibleBudget(ValueError):
    pass


def max_images(budget_bytes: float, cfg: CostModelConfig, overhead: OverheadModel = OverheadModel()) -> int:
    """Largest image count whose total memory fits ``budget_bytes`` (exponential + binary search)."""
    if memory_required(0, cfg, overhead) > budget_bytes:
        raise InfeasibleBudget(f"budget {budget_bytes:.4g} B is below fixed cost "
                               f"{memory_required(0, cfg, overhead):.4g} B (weights {cfg.weight_bytes:.4g} B)")
    lo, hi = 0, 1
    while memory_required(hi, cfg, overhead) <= budget_bytes:
        lo, hi = hi, hi * 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if memory_required(mid, cfg, overhead) <= budget_bytes:
            lo = mid
        else:
            hi = mid
    return lo


def max_images_closed_form(budget_bytes: float, cfg: CostModelConfig, overhead: OverheadModel = OverheadModel()) -> float:
    """Real-valued solution of the (linear) budget equation."""
    per_image = cfg.tokens_per_image * (cfg.kv_bytes_per_token + overhead.activation_bytes_per_token)
    return (budget_bytes - memory_required(0, cfg, overhead)) / per_image


def fit_overhead(budget_bytes: float, cfg: CostModelConfig, target_images: int,
                 prompt_slack_tokens: int = 0) -> OverheadModel:
    """Choose the per-token activation charge so ``max_images`` returns exactly ``target_images``.

    The fit aims at ``target + 0.5`` so the integer answer sits in the middle
    of its rounding interval.
    """
    base = OverheadModel(0.0, prompt_slack_tokens)
    free = budget_bytes - memory_required(0, cfg, base)
    if free <= 0:
        raise InfeasibleBudget("budget does not cover the weights")
    per_token = free / ((target_images + 0.5) * cfg.tokens_per_image) - cfg.kv_bytes_per_token
    if per_token < 0:
        raise ValueError("target is above the KV-only bound; no non-negative overhead fits")
    return OverheadModel(per_token, prompt_slack_tokens)


# Fitted once with fit_overhead(GPU_80GB, LONGLLAVA_9B, 1173) and frozen here.
CALIBRATED_OVERHEAD = OverheadModel(activation_bytes_per_token=438_684.7989395446)


def max_images_table(budgets: Sequence[float], cfg: CostModelConfig,
                     overhead: OverheadModel = CALIBRATED_OVERHEAD) -> list[dict]:
    rows = []
    for b in budgets:
        try:
            n = max_images(b, cfg, overhead)
        except InfeasibleBudget:
            n = None
        rows.append({"budget_bytes": b, "budget_gib": b / GIB, "config": cfg.name,
                     "tokens_per_image": cfg.tokens_per_image, "max_images": n,
                     "closed_form": max_images_closed_form(b, cfg, overhead)})
    return rows


def cost_table(cfg: CostModelConfig = LONGLLAVA_9B, overhead: OverheadModel = CALIBRATED_OVERHEAD) -> list[dict]:
    """The headline analytic rows: video tokens, KV bytes at 256K, FLOPs, max images."""
    rows = [
        {"quantity": "video_tokens(3 min, 1 fps, 576)", "value": video_tokens(3, 1, 576)},
        {"quantity": "video_tokens(3 min, 1 fps, 144)", "value": video_tokens(3, 1, 144)},
        {"quantity": "kv_cache_bytes(T=262144, bf16)", "value": kv_cache_bytes(cfg, 262_144)},
        {"quantity": "kv_cache_gib(T=262144, bf16)", "value": kv_cache_bytes(cfg, 262_144) / GIB},
    ]
    for preset in (LONGLLAVA_9B, LONGLLAVA_A13B):
        for n in (128, 54):
            rows.append({"quantity": f"pflops({preset.name}, {n} images, kappa={preset.flops_kappa})",
                         "value": flops_estimate(preset, n) / 1e15})
    rows.append({"quantity": f"max_images(80 GiB, {cfg.name})", "value": max_images(GPU_80GB, cfg, overhead)})
    return rows


# ---------------------------------------------------------------------------
# measurements


Clock = Callable[[], float]


@dataclass
class ModelRunner:
    """Drives fresh decode sessions of a model on synthetic token streams."""

    model: HybridModel
    seed: int = 0
    label: str = ""

    def tokens(self, T: int) -> torch.Tensor:
        g = torch.Generator().manual_seed(self.seed + T)
        return torch.randint(16, self.model.cfg.vocab_size, (T,), generator=g)

    def prefill(self, T: int):
        session = new_session(self.model)
        logits = prefill(session, self.tokens(T))
        return session, logits

    def step(self, session, token_id: int = 16):
        with torch.no_grad():
            return decode_step(session, token_id)


def runner_for(cfg: HybridConfig, seed: int = 0, label: str = "") -> ModelRunner:
    model = build_model(cfg, seed)
    model.eval()
    return ModelRunner(model, seed, label)


def pure_attention_control(cfg: HybridConfig) -> HybridConfig:
    """Same width, depth and MLPs with every mixer an attention layer."""
    return replace(cfg, attn_position_in_stack=tuple(range(cfg.layers_per_stack)))


@dataclass
class Timing:
    median: float
    samples: list[float]
    warmups: list[float]


def _timed(fn: Callable[[], object], trials: int, warmups: int, clock: Clock) -> Timing:
    if trials < 1:
        raise ValueError("trials must be positive")
    warm, samples = [], []
    for i in range(warmups + trials):
        t0 = clock()
        fn()
        dt = clock() - t0
        (warm if i < warmups else samples).append(dt)
    return Timing(statistics.median(samples), samples, warm)


def measure_prefill(runner: ModelRunner, T: int, trials: int = 5, warmups: int = 3,
                    clock: Clock = time.perf_counter) -> Timing:
    """Median wall time of a fresh-session prefill of ``T`` tokens."""
    return _timed(lambda: runner.prefill(T), trials, warmups, clock)


def measure_decode_step(runner: ModelRunner, T: int, steps: int = 16, trials: int = 5, warmups: int = 3,
                        clock: Clock = time.perf_counter) -> Timing:
    """Median per-token decode time after a ``T``-token prefill.

    All trials share one session, so the context grows by ``steps`` per
    trial; keep ``steps * (trials + warmups)`` small next to ``T``.
    """
    session, _ = runner.prefill(T)

    def run() -> None:
        for _ in range(steps):
            runner.step(session)

    t = _timed(run, trials, warmups, clock)
    per = [x / steps for x in t.samples]
    return Timing(statistics.median(per), per, [x / steps for x in t.warmups])


def throughput_from_times(time_1: float, time_n: float, n: int) -> float:
    """Steady-state decode rate ``(N - 1) / (time_N - time_1)``."""
    if n < 2:
        raise ValueError("N must be at least 2")
    if time_n <= time_1:
        raise ValueError("time_N must exceed time_1")
    return (n - 1) / (time_n - time_1)


@dataclass
class ThroughputResult:
    tokens_per_s: float
    time_1: float
    time_n: float
    n: int
    stamps: list[float] = field(default_factory=list)


def measure_throughput(runner: ModelRunner, T_context: int, N: int = 1000,
                       clock: Clock = time.perf_counter, session=None) -> ThroughputResult:
    """Emit ``N`` tokens after a ``T_context`` prefill; ``time_k`` counts from the start of decoding."""
    if N < 2:
        raise ValueError("N must be at least 2")
    if session is None:
        session, _ = runner.prefill(T_context)
    t0 = clock()
    stamps = []
    for _ in range(N):
        runner.step(session)
        stamps.append(clock() - t0)
    return ThroughputResult(throughput_from_times(stamps[0], stamps[-1], N), stamps[0], stamps[-1], N, stamps)


def session_bytes(runner: ModelRunner, T: int) -> int:
    """Bytes held by a session after a ``T``-token prefill (KV caches plus recurrent states)."""
    session, _ = runner.prefill(T)
    return session.nbytes()


def analytic_kv_bytes_per_token(cfg: HybridConfig, dtype=torch.float32) -> int:
    return cfg.kv_scalars_per_token * torch.empty(0, dtype=dtype).element_size()


# ---------------------------------------------------------------------------
# ladder analysis


def fit_exponent(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of log y against log x."""
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    return float(np.polyfit(lx, ly, 1)[0])


def fit_slope(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    """Least-squares (slope, intercept) of y against x."""
    slope, intercept = np.polyfit(np.asarray(xs, float), np.asarray(ys, float), 1)
    return float(slope), float(intercept)


def ladder(T0: int, rungs: int = 4) -> list[int]:
    return [T0 * 2 ** i for i in range(rungs)]


@dataclass
class EfficiencyReport:
    label: str
    context: int
    prefill_seconds: float
    decode_step_seconds: float
    throughput: float | None
    session_bytes: int
    config: dict
    raw: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {"label": self.label, "context": self.context, "prefill_seconds": self.prefill_seconds,
                "decode_step_seconds": self.decode_step_seconds, "throughput": self.throughput,
                "session_bytes": self.session_bytes}


def efficiency_report(runner: ModelRunner, T: int, trials: int = 5, warmups: int = 3, decode_steps: int = 16,
                      throughput_n: int | None = None, clock: Clock = time.perf_counter) -> EfficiencyReport:
    pf = measure_prefill(runner, T, trials, warmups, clock)
    dec = measure_decode_step(runner, T, decode_steps, trials, warmups, clock)
    tp = measure_throughput(runner, T, throughput_n, clock) if throughput_n else None
    raw = {"prefill": pf.samples, "prefill_warmups": pf.warmups, "decode": dec.samples}
    if tp is not None:
        raw["throughput_stamps"] = tp.stamps
    return EfficiencyReport(runner.label, T, pf.median, dec.median, tp.tokens_per_s if tp else None,
                            session_bytes(runner, T), runner.model.cfg.to_dict(), raw)


def ladder_toy_config(**overrides) -> HybridConfig:
    """Small hybrid used for the timing ladders; its all-attention twin comes from pure_attention_control."""
    base = dict(d_model=32, d_ff=64, vocab_size=512, n_stacks=1, n_heads=2, n_kv_heads=1, head_dim=16,
                d_state=4, n_experts=4, top_k=2)
    base.update(overrides)
    return HybridConfig(**base)


@dataclass
class LadderComparison:
    """Hybrid vs. pure-attention control over one context ladder."""

    contexts: list[int]
    rows: list[dict]
    decode_growth: dict[str, float]
    prefill_exponent: dict[str, float]
    memory_slope: dict[str, float]
    analytic_kv_slope: float


def compare_ladder(cfg: HybridConfig, T0: int, rungs: int = 4, trials: int = 5, warmups: int = 2,
                   decode_steps: int = 8, seed: int = 0, clock: Clock = time.perf_counter) -> LadderComparison:
    """Time prefill and decode and read session memory on a hybrid and its all-attention twin.

    Decode growth is the fitted log-log exponent of per-step time against
    context; prefill exponent likewise for full-prompt latency.
    """
    Ts = ladder(T0, rungs)
    runners = {"hybrid": runner_for(cfg, seed, "hybrid"),
               "attention": runner_for(pure_attention_control(cfg), seed, "attention")}
    rows, series = [], {k: {"prefill": [], "decode": [], "bytes": []} for k in runners}
    for T in Ts:
        # interleave the two models at each rung so drift in machine load hits both
        for label, runner in runners.items():
            pf = measure_prefill(runner, T, trials, warmups, clock)
            dec = measure_decode_step(runner, T, decode_steps, trials, warmups, clock)
            nbytes = session_bytes(runner, T)
            s = series[label]
            s["prefill"].append(pf.median)
            s["decode"].append(dec.median)
            s["bytes"].append(nbytes)
            rows.append({"label": label, "context": T, "prefill_seconds": pf.median,
                         "decode_step_seconds": dec.median, "session_bytes": nbytes,
                         "prefill_samples": pf.samples, "decode_samples": dec.samples})
    return LadderComparison(
        Ts, rows,
        decode_growth={k: fit_exponent(Ts, s["decode"]) for k, s in series.items()},
        prefill_exponent={k: fit_exponent(Ts, s["prefill"]) for k, s in series.items()},
        memory_slope={k: fit_slope(Ts, s["bytes"])[0] for k, s in series.items()},
        analytic_kv_slope=float(analytic_kv_bytes_per_token(cfg)),
    )


def sweep_tokens_per_image(make_runner: Callable[[int], ModelRunner], budgets: Sequence[int] = (36, 144, 576),
                           n_images: int = 4, cost_cfg: CostModelConfig = LONGLLAVA_A13B, trials: int = 3,
                           warmups: int = 1, clock: Clock = time.perf_counter,
                           quality: Callable[[int], float] | None = None) -> list[dict]:
    """Prefill time and analytic FLOPs for ``n_images`` at each per-image token budget.

    ``make_runner(tokens_per_image)`` supplies the model; the optional
    ``quality`` callback fills the accuracy column.
    """
    rows = []
    for b in budgets:
        runner = make_runner(b)
        T = n_images * (b + 2)
        t = measure_prefill(runner, T, trials, warmups, clock)
        rows.append({"tokens_per_image": b, "n_images": n_images, "context": T,
                     "prefill_seconds": t.median, "prefill_samples": t.samples,
                     "flops": flops_estimate(replace(cost_cfg, tokens_per_image=b), n_images),
                     "quality": quality(b) if quality else None})
    return rows


# ---------------------------------------------------------------------------
# report files


def write_csv(rows: Sequence[dict], path: str | Path) -> None:
    rows = list(rows)
    if not rows:
        Path(path).write_text("")
        return
    cols = list(rows[0])
    for r in rows[1:]:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (" ".join(map(repr, v)) if isinstance(v, list) else v) for k, v in r.items()})


def write_series(path: str | Path, xs: Sequence[float], ys: Sequence[float], x_name: str = "x",
                 y_name: str = "y") -> None:
    """Two-column whitespace-separated (x, y) data for external plotting."""
    with open(path, "w") as fh:
        fh.write(f"# {x_name} {y_name}\n")
        for x, y in zip(xs, ys):
            fh.write(f"{x} {y}\n")


"""Command-line entry point: ``longllava {train,generate,bench,costmodel,eval}``.

Configuration is a flat ``dotted.key = value`` file; values parse as JSON
when they can and stay strings otherwise. Precedence: ``--set`` flags, then
the config file, then built-in defaults. Every run writes ``manifest.json``
(resolved config plus content hashes of its inputs) into its output
directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import torch

from . import bench, evaluation, training
from .checkpoint import CheckpointError, file_sha256, load_components
from .model import ConfigError, HybridConfig, greedy_decode, quantize_int8_weights
from .protocol import ProtocolError, Record, record_to_sequence
from .vision import EncoderConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PRECONDITION = 3
EXIT_RUNTIME = 4

log = logging.getLogger("longllava")


class CliConfigError(Exception):
    pass


class PreconditionError(Exception):
    pass


# ---------------------------------------------------------------------------
# config


def default_config() -> dict:
    cc = training.ChainConfig()
    cfg = {f"model.{k}": v for k, v in cc.model.to_dict().items()}
    cfg.update({f"encoder.{k}": v for k, v in cc.encoder.to_dict().items()})
    cfg["train.seed"] = cc.seed
    cfg["train.warmup_fraction"] = cc.warmup_fraction
    cfg["train.projector_hidden"] = cc.projector_hidden
    for stage in training.STAGE_ORDER:
        s = stage.value
        cfg[f"train.{s}.peak_lr"] = cc.peak_lr[s]
        cfg[f"train.{s}.size"] = cc.sizes[s]
        cfg[f"train.{s}.pack_length"] = cc.pack_length[s]
        cfg[f"train.{s}.epochs"] = cc.epochs[s]
    cfg.update({
        "bench.contexts": [128, 256, 512, 1024],
        "bench.trials": 5,
        "bench.warmups": 3,
        "bench.decode_steps": 16,
        "bench.throughput_n": 1000,
        "bench.budgets": [36, 144, 576],
        "bench.n_images": 4,
        "bench.stub_timer": False,
        "bench.stub_time_1": 10.0,
        "bench.stub_time_n": 20.0,
        "cost.preset": "9B",
        **{f"cost.{f.name}": None for f in fields(bench.CostModelConfig) if f.name != "name"},
        "cost.budgets_gib": [40, 80],
        "eval.trials": 20,
        "eval.seed": 0,
        "eval.haystacks": [2, 4, 8],
        "eval.depths": [0.0, 0.25, 0.5, 0.75, 1.0],
        "eval.shots": [1, 2, 4, 5],
        "eval.relation": "same shape",
        "eval.frame_counts": [1, 2, 4, 8, 16, 32, 64],
        "eval.video_length": 64,
    })
    return cfg


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_config_file(path: str | Path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliConfigError(f"{path}:{n}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


def resolve_config(config_file: str | None, overrides: list[str]) -> dict:
    cfg = default_config()
    layers = [read_config_file(config_file)] if config_file else []
    sets = {}
    for item in overrides:
        if "=" not in item:
            raise CliConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        sets[k.strip()] = parse_value(v)
    layers.append(sets)
    for layer in layers:
        for k, v in layer.items():
            if k not in cfg:
                raise CliConfigError(f"unknown config key {k!r}")
            cfg[k] = v
    return cfg


def _section(cfg: dict, prefix: str) -> dict:
    p = prefix + "."
    return {k[len(p):]: v for k, v in cfg.items() if k.startswith(p)}


def model_config(cfg: dict) -> HybridConfig:
    d = _section(cfg, "model")
    if isinstance(d.get("attn_position_in_stack"), list):
        d["attn_position_in_stack"] = tuple(d["attn_position_in_stack"])
    try:
        return HybridConfig(**d).validate()
    except (TypeError, ConfigError) as exc:
        raise CliConfigError(f"model config: {exc}") from exc


def encoder_config(cfg: dict) -> EncoderConfig:
    try:
        return EncoderConfig(**_section(cfg, "encoder")).validate()
    except (TypeError, ValueError) as exc:
        raise CliConfigError(f"encoder config: {exc}") from exc


def chain_config(cfg: dict) -> training.ChainConfig:
    stages = [s.value for s in training.STAGE_ORDER]
    return training.ChainConfig(
        model=model_config(cfg), encoder=encoder_config(cfg), projector_hidden=cfg["train.projector_hidden"],
        seed=int(cfg["train.seed"]), warmup_fraction=float(cfg["train.warmup_fraction"]),
        pack_length={s: int(cfg[f"train.{s}.pack_length"]) for s in stages},
        peak_lr={s: float(cfg[f"train.{s}.peak_lr"]) for s in stages},
        sizes={s: int(cfg[f"train.{s}.size"]) for s in stages},
        epochs={s: int(cfg[f"train.{s}.epochs"]) for s in stages},
    )


# ---------------------------------------------------------------------------
# run directory


def git_blob_hash(data: bytes) -> str:
    """Content hash in git's blob format: sha1 of ``b"blob <len>\\0" + data``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: dict, inputs: dict[str, str | None], argv: list[str],
                   extra: dict | None = None) -> Path:
    hashes = {}
    for name, path in inputs.items():
        if path:
            hashes[name] = {"path": str(path), "git_blob": git_blob_hash(Path(path).read_bytes())}
    manifest = {"command": command, "argv": argv, "config": cfg, "inputs": hashes, **(extra or {})}
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def load_bundle_checked(path: str | None, required: bool = True):
    if path is None:
        if required:
            raise PreconditionError("a --checkpoint is required")
        return None
    if not Path(path).exists():
        raise PreconditionError(f"checkpoint {path} does not exist")
    return training.load_bundle(path)


def bundle_stage(path: str) -> str | None:
    ck = load_components(path)
    return ck.manifest["configs"].get("projector", {}).get("meta", {}).get("stage")


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args, cfg: dict) -> int:
    cc = chain_config(cfg)
    out = Path(args.out)
    stages = list(training.STAGE_ORDER) if args.stage == "all" else [training.Stage(args.stage)]
    first = stages[0]
    idx = training.STAGE_ORDER.index(first)
    if idx > 0 and not args.unchained:
        needed = training.STAGE_ORDER[idx - 1].value
        if not args.resume:
            raise PreconditionError(f"stage {first.value} needs a checkpoint from stage {needed} (--resume)")
        got = bundle_stage(args.resume)
        if got != needed:
            raise PreconditionError(f"stage {first.value} needs a checkpoint from stage {needed}, "
                                    f"{args.resume} is from stage {got}")
    if args.resume:
        comp = load_bundle_checked(args.resume)
    else:
        comp = training.build_components(cc.model, cc.encoder, cc.seed, cc.projector_hidden)
    write_manifest(out, "train", cfg, {"config": args.config, "resume": args.resume}, sys.argv)
    parent = file_sha256(args.resume) if args.resume else None
    summary = []
    for stage in stages:
        rep = training.run_stage(comp, stage, cc, out, parent, log_every=args.log_every)
        parent = rep.checkpoint
        summary.append({"stage": stage.value, "batches": rep.n_batches, "first_loss": rep.losses[0],
                        "last_loss": rep.losses[-1], "checkpoint_sha256": rep.checkpoint})
        print(f"{stage.value}: {rep.n_batches} steps, loss {rep.losses[0]:.4f} -> {rep.losses[-1]:.4f}, "
              f"checkpoint {out / f'stage_{stage.value}.ckpt'} sha256 {rep.checkpoint}")
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return EXIT_OK


def _load_input_record(path: str) -> Record:
    try:
        data = json.loads(Path(path).read_text())
        return Record(**data)
    except (OSError, json.JSONDecodeError, TypeError, ProtocolError) as exc:
        raise CliConfigError(f"malformed input spec {path}: {exc}") from exc


def cmd_generate(args, cfg: dict) -> int:
    comp = load_bundle_checked(args.checkpoint)
    if args.int8:
        comp.model = quantize_int8_weights(comp.model)
    rec = _load_input_record(args.input)
    try:
        seq = record_to_sequence(rec, comp.vocab, comp.tokens_per_image, with_answer=False)
    except (ProtocolError, IndexError, ValueError) as exc:
        raise CliConfigError(f"malformed input spec {args.input}: {exc}") from exc
    prompt = seq.render(comp.vocab)
    embeds = comp.image_embeds([rec.images[s.index] for s in seq.image_slots])
    new = greedy_decode(comp.model, torch.tensor(prompt), args.max_new_tokens, embeds, stop_ids=(comp.vocab.eos,))
    text = comp.vocab.decode(new)
    out = Path(args.out)
    write_manifest(out, "generate", cfg, {"checkpoint": args.checkpoint, "input": args.input}, sys.argv)
    trace = {"prompt_ids": prompt, "generated_ids": new, "trace": prompt + new, "text": text}
    (out / "generation.json").write_text(json.dumps(trace) + "\n")
    print(text)
    return EXIT_OK


class StubClock:
    """Scripted clock for formula checks: the first decode stamp reads ``time_1``, the last ``time_n``."""

    def __init__(self, time_1: float, time_n: float, n: int) -> None:
        self.values = [0.0] + [time_1 + (time_n - time_1) * k / (n - 1) for k in range(n)]
        self.i = 0

    def __call__(self) -> float:
        v = self.values[min(self.i, len(self.values) - 1)]
        self.i += 1
        return v


def _runner(args, cfg: dict) -> bench.ModelRunner:
    comp = load_bundle_checked(args.checkpoint, required=False)
    model = comp.model if comp else training.build_components(model_config(cfg), encoder_config(cfg)).model
    if args.int8:
        model = quantize_int8_weights(model)
    model.eval()
    return bench.ModelRunner(model, label="checkpoint" if comp else "fresh")


def cmd_bench(args, cfg: dict) -> int:
    out = Path(args.out)
    write_manifest(out, "bench", cfg, {"checkpoint": args.checkpoint, "config": args.config}, sys.argv)
    torch.set_num_threads(1)
    contexts = [int(t) for t in cfg["bench.contexts"]]
    trials, warmups = int(cfg["bench.trials"]), int(cfg["bench.warmups"])
    rows, raw = [], {}
    if args.mode == "throughput" and cfg["bench.stub_timer"]:
        n = int(cfg["bench.throughput_n"])
        clock = StubClock(float(cfg["bench.stub_time_1"]), float(cfg["bench.stub_time_n"]), n)

        class _Null:
            def prefill(self, T):
                return None, None

            def step(self, session, token_id=0):
                return None

        res = bench.measure_throughput(_Null(), 0, n, clock=clock, session=object())
        rows.append({"context": 0, "N": n, "time_1": res.time_1, "time_n": res.time_n,
                     "tokens_per_s": res.tokens_per_s})
    else:
        runner = _runner(args, cfg)
        for T in contexts:
            if args.mode == "prefill":
                t = bench.measure_prefill(runner, T, trials, warmups)
                rows.append({"context": T, "prefill_seconds": t.median})
                raw[T] = {"samples": t.samples, "warmups": t.warmups}
            elif args.mode == "throughput":
                res = bench.measure_throughput(runner, T, int(cfg["bench.throughput_n"]))
                rows.append({"context": T, "N": res.n, "time_1": res.time_1, "time_n": res.time_n,
                             "tokens_per_s": res.tokens_per_s})
                raw[T] = {"stamps": res.stamps}
            elif args.mode == "memory":
                rows.append({"context": T, "session_bytes": bench.session_bytes(runner, T),
                             "analytic_kv_bytes_per_token": bench.analytic_kv_bytes_per_token(runner.model.cfg)})
        if args.mode == "sweep-tokens":
            base = runner.model.cfg
            rows = bench.sweep_tokens_per_image(
                lambda b: bench.runner_for(replace(base, tokens_per_image=b)),
                [int(b) for b in cfg["bench.budgets"]], int(cfg["bench.n_images"]), trials=trials, warmups=warmups)
            raw = {r["tokens_per_image"]: r.pop("prefill_samples") for r in rows}
    bench.write_csv(rows, out / f"bench_{args.mode}.csv")
    (out / f"bench_{args.mode}_raw.json").write_text(json.dumps(raw) + "\n")
    for r in rows:
        print(json.dumps(r))
    return EXIT_OK


def cmd_costmodel(args, cfg: dict) -> int:
    preset = cfg["cost.preset"]
    if preset not in bench.PRESETS:
        raise CliConfigError(f"unknown cost.preset {preset!r} (choose from {sorted(bench.PRESETS)})")
    cost = bench.PRESETS[preset]
    overrides = {f.name: cfg[f"cost.{f.name}"] for f in fields(bench.CostModelConfig)
                 if cfg.get(f"cost.{f.name}") is not None}
    try:
        cost = replace(cost, **overrides)
    except ValueError as exc:
        raise CliConfigError(str(exc)) from exc
    out = Path(args.out)
    write_manifest(out, "costmodel", cfg, {"config": args.config}, sys.argv, {"cost_config": cost.to_dict()})
    rows = bench.cost_table(cost)
    bench.write_csv(rows, out / "cost_table.csv")
    budgets = [g * bench.GIB for g in cfg["cost.budgets_gib"]]
    table = bench.max_images_table(budgets, cost)
    table += bench.max_images_table(budgets, replace(cost, tokens_per_image=576))
    bench.write_csv(table, out / "max_images.csv")
    sweep = [g * bench.GIB for g in range(10, 81, 5)]
    series = bench.max_images_table(sweep, cost)
    bench.write_series(out / "max_images_series.dat", [r["budget_gib"] for r in series],
                       [r["max_images"] if r["max_images"] is not None else 0 for r in series],
                       "budget_gib", "max_images")
    for r in rows:
        print(f"{r['quantity']}: {r['value']}")
    return EXIT_OK


SUITES = ("niah", "icl", "frames")


def cmd_eval(args, cfg: dict) -> int:
    if args.suite not in SUITES:
        raise CliConfigError(f"unknown suite {args.suite!r}")
    if args.oracle:
        runner = evaluation.OracleRunner()
        image_size = int(cfg["encoder.image_size"])
    else:
        comp = load_bundle_checked(args.checkpoint)
        if args.int8:
            comp.model = quantize_int8_weights(comp.model)
        runner = evaluation.ModelRunner(comp)
        image_size = comp.encoder.cfg.image_size
    trials, seed = int(cfg["eval.trials"]), int(cfg["eval.seed"])
    if args.suite == "niah":
        grid = evaluation.niah_grid(runner, cfg["eval.haystacks"], cfg["eval.depths"], trials, seed, image_size)
    elif args.suite == "icl":
        grid = evaluation.icl_grid(runner, cfg["eval.shots"], cfg["eval.relation"], trials, seed, image_size)
    else:
        task = evaluation.needle_video(int(cfg["eval.video_length"]), image_size=image_size)
        grid = evaluation.sweep_frames(runner, cfg["eval.frame_counts"], task, trials, seed)
    out = Path(args.out)
    write_manifest(out, "eval", cfg, {"checkpoint": args.checkpoint, "config": args.config}, sys.argv,
                   {"oracle": args.oracle})
    grid.write_csv(out / f"eval_{args.suite}.csv")
    if args.suite == "niah":
        grid.write_heatmap(out / "eval_niah_heatmap.dat", "haystack", "depth")
    for row in grid.rows():
        print(json.dumps(row))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="longllava", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--config", help="flat dotted key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--out", default="runs/latest", help="run directory")
        sp.add_argument("--seed", type=int, help="shorthand for --set train.seed / eval.seed")

    t = sub.add_parser("train", help="run one training stage or the whole chain")
    common(t)
    t.add_argument("--stage", required=True, choices=[s.value for s in training.STAGE_ORDER] + ["all"])
    t.add_argument("--resume", help="checkpoint of the previous stage")
    t.add_argument("--unchained", action="store_true", help="allow a stage without its predecessor's checkpoint")
    t.add_argument("--log-every", type=int, default=0)

    g = sub.add_parser("generate", help="greedy decoding from a checkpoint")
    common(g)
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--input", required=True, help="JSON record: task_type, images, texts, question")
    g.add_argument("--max-new-tokens", type=int, default=16)
    g.add_argument("--int8", action="store_true", help="int8 weight-only quantization")

    b = sub.add_parser("bench", help="prefill / throughput / token-budget / memory measurements")
    common(b)
    b.add_argument("--mode", required=True, choices=["prefill", "throughput", "sweep-tokens", "memory"])
    b.add_argument("--checkpoint")
    b.add_argument("--int8", action="store_true")

    c = sub.add_parser("costmodel", help="analytic token, KV-cache, FLOPs and max-image tables")
    common(c)

    e = sub.add_parser("eval", help="needle / in-context / frame-sweep grids")
    common(e)
    e.add_argument("--suite", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--oracle", action="store_true", help="answer from generation parameters")
    e.add_argument("--int8", action="store_true")
    return p


COMMANDS = {"train": cmd_train, "generate": cmd_generate, "bench": cmd_bench, "costmodel": cmd_costmodel,
            "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides += [f"train.seed={args.seed}", f"eval.seed={args.seed}"]
        cfg = resolve_config(args.config, overrides)
        return COMMANDS[args.command](args, cfg)
    except (CliConfigError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PreconditionError, CheckpointError) as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (training.TrainingError, RuntimeError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

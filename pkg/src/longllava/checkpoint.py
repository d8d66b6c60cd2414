"""Self-describing checkpoint files.

Layout (all integers little-endian)::

    b"LLVACKPT" | u32 format_version | u64 manifest_len | manifest (UTF-8 JSON) | payload

The manifest records each component's config and, per tensor, its
hierarchical name, shape, dtype, byte offset into the payload, byte length
and CRC32. Tensor bytes are stored little-endian IEEE-754.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .model import HybridConfig, HybridModel

MAGIC = b"LLVACKPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int8: "|i1",
    torch.int64: "<i8",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


def _state(module: nn.Module, prefix: str) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v.detach() for k, v in module.state_dict().items()}


def save_components(path: str | Path, components: dict[str, tuple[nn.Module, dict]]) -> str:
    """Write ``{prefix: (module, config_dict)}`` to ``path``; returns the file's sha256."""
    entries, chunks, offset = [], [], 0
    configs = {}
    for prefix, (module, cfg) in components.items():
        configs[prefix] = cfg
        for name, t in _state(module, prefix).items():
            if t.dtype not in _DTYPES:
                raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
            data = np.ascontiguousarray(t.cpu().numpy().astype(_DTYPES[t.dtype])).tobytes()
            entries.append({
                "name": name,
                "shape": list(t.shape),
                "dtype": _DTYPES[t.dtype],
                "offset": offset,
                "nbytes": len(data),
                "crc32": zlib.crc32(data),
            })
            chunks.append(data)
            offset += len(data)
    manifest = {"format_version": FORMAT_VERSION, "configs": configs, "tensors": entries, "payload_nbytes": offset}
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    raw = _HEADER.pack(MAGIC, FORMAT_VERSION, len(blob)) + blob + b"".join(chunks)
    path = Path(path)
    path.write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


@dataclass
class LoadedCheckpoint:
    manifest: dict
    tensors: dict[str, torch.Tensor]

    def component(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def read_manifest(path: str | Path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointTruncatedError("file shorter than header")
    magic, version, mlen = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"format version {version}, expected {FORMAT_VERSION}")
    if len(raw) < _HEADER.size + mlen:
        raise CheckpointTruncatedError("manifest truncated")
    manifest = json.loads(raw[_HEADER.size:_HEADER.size + mlen])
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(f"manifest version {manifest.get('format_version')}")
    return manifest, raw[_HEADER.size + mlen:]


def load_components(path: str | Path) -> LoadedCheckpoint:
    manifest, payload = read_manifest(path)
    if len(payload) != manifest["payload_nbytes"]:
        raise CheckpointTruncatedError(f"payload has {len(payload)} bytes, manifest declares {manifest['payload_nbytes']}")
    tensors = {}
    for e in manifest["tensors"]:
        data = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if zlib.crc32(data) != e["crc32"]:
            raise CheckpointChecksumError(f"checksum mismatch in {e['name']}")
        arr = np.frombuffer(data, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))).clone()
    return LoadedCheckpoint(manifest, tensors)


def load_state_strict(module: nn.Module, state: dict[str, torch.Tensor], prefix: str) -> None:
    expected = module.state_dict()
    if set(expected) != set(state):
        missing = sorted(set(expected) - set(state))[:3]
        extra = sorted(set(state) - set(expected))[:3]
        raise CheckpointShapeError(f"{prefix}: tensor names differ (missing {missing}, unexpected {extra})")
    for k, v in expected.items():
        if tuple(v.shape) != tuple(state[k].shape):
            raise CheckpointShapeError(f"{prefix}.{k}: shape {tuple(state[k].shape)} != config {tuple(v.shape)}")
        if v.dtype != state[k].dtype:
            raise CheckpointShapeError(f"{prefix}.{k}: dtype {state[k].dtype} != {v.dtype}")
    module.load_state_dict(state, strict=True)


def save_checkpoint(model: HybridModel, path: str | Path) -> str:
    return save_components(path, {"llm": (model, model.cfg.to_dict())})


def _model_dtype(state: dict[str, torch.Tensor]) -> torch.dtype:
    return state["embed"].dtype


def model_from_state(cfg_dict: dict, state: dict[str, torch.Tensor]) -> HybridModel:
    cfg = HybridConfig.from_dict(cfg_dict)
    model = HybridModel(cfg, seed=0, dtype=_model_dtype(state))
    load_state_strict(model, state, "llm")
    return model


def load_checkpoint(path: str | Path) -> HybridModel:
    ck = load_components(path)
    if "llm" not in ck.manifest["configs"]:
        raise CheckpointError("checkpoint holds no language model")
    return model_from_state(ck.manifest["configs"]["llm"], ck.component("llm"))


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

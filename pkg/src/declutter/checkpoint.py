"""Single-file checkpoint container.

Layout, all integers little-endian::

    bytes 0..3    magic b"DCLT"
    bytes 4..7    container version (uint32)
    bytes 8..15   header length in bytes (uint64)
    header        UTF-8 JSON
    blocks        raw float32 little-endian tensors, back to back

The header carries the run metadata (iteration, resolved config and its
hash, torch version), the RNG state (base64), per-parameter Adam step
counts, and a table of blocks with name, shape and byte offset relative to
the start of the block section. Block names are "field.<param>",
"camera.<param>", and "adam.<param>.exp_avg" / ".exp_avg_sq".
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DCLT"
VERSION = 1


class CheckpointError(Exception):
    pass


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


@dataclass
class CheckpointData:
    iteration: int
    config: dict
    blocks: dict[str, np.ndarray]
    adam_steps: dict[str, int]
    rng_state: bytes | None

    def tensor(self, name: str, dtype=torch.float32) -> torch.Tensor:
        if name not in self.blocks:
            raise CheckpointError(f"checkpoint has no block {name!r}")
        return torch.from_numpy(self.blocks[name].copy()).to(dtype)


def _named_blocks(field, cameras, optimizer) -> tuple[dict[str, torch.Tensor], dict[str, int]]:
    blocks: dict[str, torch.Tensor] = {}
    names: dict[int, str] = {}
    for name, param in field.named_parameters():
        blocks[f"field.{name}"] = param
        names[id(param)] = f"field.{name}"
    for name, param in cameras.named_parameters():
        blocks[f"camera.{name}"] = param
        names[id(param)] = f"camera.{name}"
    steps: dict[str, int] = {}
    if optimizer is not None:
        for param, state in optimizer.state.items():
            name = names.get(id(param))
            if name is None or "exp_avg" not in state:
                continue
            blocks[f"adam.{name}.exp_avg"] = state["exp_avg"]
            blocks[f"adam.{name}.exp_avg_sq"] = state["exp_avg_sq"]
            steps[name] = int(state["step"])
    return blocks, steps


def save_checkpoint(
    path,
    iteration: int,
    config: dict,
    field,
    cameras,
    optimizer=None,
    generator: torch.Generator | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blocks, steps = _named_blocks(field, cameras, optimizer)

    table = []
    payload = bytearray()
    for name, tensor in blocks.items():
        arr = tensor.detach().cpu().contiguous().numpy().astype("<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload.extend(arr.tobytes())

    header = {
        "iteration": int(iteration),
        "config": config,
        "config_hash": config_hash(config),
        "torch_version": torch.__version__,
        "rng_state_b64": (
            base64.b64encode(generator.get_state().numpy().tobytes()).decode()
            if generator is not None
            else None
        ),
        "adam_steps": steps,
        "blocks": table,
    }
    header_bytes = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(VERSION).tobytes())
        fh.write(np.uint64(len(header_bytes)).tobytes())
        fh.write(header_bytes)
        fh.write(bytes(payload))
    return path


def load_checkpoint(path) -> CheckpointData:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    header_len = int(np.frombuffer(raw[8:16], dtype="<u8")[0])
    header = json.loads(raw[16 : 16 + header_len].decode())
    body = raw[16 + header_len :]

    blocks: dict[str, np.ndarray] = {}
    for entry in header["blocks"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=start)
        blocks[entry["name"]] = arr.reshape(shape)

    rng_state = None
    if header.get("rng_state_b64"):
        rng_state = base64.b64decode(header["rng_state_b64"])
    return CheckpointData(
        iteration=header["iteration"],
        config=header["config"],
        blocks=blocks,
        adam_steps={k: int(v) for k, v in header.get("adam_steps", {}).items()},
        rng_state=rng_state,
    )


def restore_generator(generator: torch.Generator, rng_state: bytes) -> None:
    state = torch.from_numpy(np.frombuffer(rng_state, dtype=np.uint8).copy())
    generator.set_state(state)

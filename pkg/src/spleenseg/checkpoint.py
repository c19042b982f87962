"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"SSNETCKP"                      magic
    u32                              format version
    u32 n, n bytes                   UTF-8 JSON config block
    repeated until EOF:
        u32 n, n bytes               UTF-8 tensor name
        u32 rank, rank x u32         dims
        prod(dims) x f32             payload, C order
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .networks import Discriminator, Generator, GeneratorConfig, build_discriminator, build_generator

MAGIC = b"SSNETCKP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _state_arrays(module: torch.nn.Module) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((k, v.detach().cpu().numpy().astype(np.float32)) for k, v in module.state_dict().items())


def _load_into(module: torch.nn.Module, arrays: dict) -> None:
    state = module.state_dict()
    missing = set(state) - set(arrays)
    extra = set(arrays) - set(state)
    if missing or extra:
        raise CheckpointError(f"parameter set mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
    loaded = OrderedDict()
    for name, ref in state.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {tuple(ref.shape)}")
        loaded[name] = torch.from_numpy(np.array(arr, dtype=np.float32)).to(ref.dtype)
    module.load_state_dict(loaded)


@dataclass
class Checkpoint:
    train_config: dict
    generator_config: GeneratorConfig
    generator_state: "OrderedDict[str, np.ndarray]"
    discriminator_state: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    epoch: int = 0
    batches: int = 0
    version: int = FORMAT_VERSION

    @classmethod
    def capture(cls, gen: Generator, disc: Discriminator | None, train_config: dict, epoch: int, batches: int) -> "Checkpoint":
        return cls(
            train_config=dict(train_config),
            generator_config=gen.config,
            generator_state=_state_arrays(gen),
            discriminator_state=_state_arrays(disc) if disc is not None else OrderedDict(),
            epoch=epoch,
            batches=batches,
        )

    @property
    def view(self) -> str | None:
        return self.train_config.get("view")

    def generator(self) -> Generator:
        g = build_generator(self.generator_config, seed=0)
        _load_into(g, self.generator_state)
        g.eval()
        return g

    def discriminator(self) -> Discriminator:
        d = build_discriminator(seed=0)
        _load_into(d, self.discriminator_state)
        return d

    # -- serialization -----------------------------------------------------

    def config_block(self) -> dict:
        return {
            "train_config": self.train_config,
            "generator_config": self.generator_config.to_dict(),
            "epoch": self.epoch,
            "batches": self.batches,
        }

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<I", self.version)]
        block = json.dumps(self.config_block(), sort_keys=True).encode("utf-8")
        parts += [struct.pack("<I", len(block)), block]
        records = [("generator." + k, v) for k, v in self.generator_state.items()]
        records += [("discriminator." + k, v) for k, v in self.discriminator_state.items()]
        for name, arr in records:
            raw_name = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f4", order="C")  # keeps rank 0, unlike ascontiguousarray
            parts += [struct.pack("<I", len(raw_name)), raw_name, struct.pack("<I", arr.ndim)]
            parts += [struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
        return b"".join(parts)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:8] != MAGIC:
            raise CheckpointError("not a checkpoint: bad magic bytes")
        pos = 8

        def take(n):
            nonlocal pos
            if pos + n > len(buf):
                raise CheckpointError("truncated checkpoint")
            chunk = buf[pos : pos + n]
            pos += n
            return chunk

        (version,) = struct.unpack("<I", take(4))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", take(4))
        block = json.loads(take(n).decode("utf-8"))
        gen_state, disc_state = OrderedDict(), OrderedDict()
        while pos < len(buf):
            (n,) = struct.unpack("<I", take(4))
            name = take(n).decode("utf-8")
            (rank,) = struct.unpack("<I", take(4))
            dims = struct.unpack(f"<{rank}I", take(4 * rank))
            count = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
            prefix, _, key = name.partition(".")
            if prefix == "generator":
                gen_state[key] = arr
            elif prefix == "discriminator":
                disc_state[key] = arr
            else:
                raise CheckpointError(f"unknown record {name!r}")
        gcfg = block["generator_config"]
        return cls(
            train_config=block["train_config"],
            generator_config=GeneratorConfig(**gcfg),
            generator_state=gen_state,
            discriminator_state=disc_state,
            epoch=int(block["epoch"]),
            batches=int(block["batches"]),
            version=version,
        )

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"missing checkpoint {path}")
        return cls.from_bytes(path.read_bytes())

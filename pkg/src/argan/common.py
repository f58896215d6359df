"""Shared helpers: content hashing, canonical JSON, and seed derivation."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np
import torch


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path, chunk_size: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while True:
            chunk = f.read(chunk_size)
            if not chunk:
                break
            h.update(chunk)
    return h.hexdigest()


def tensor_content_hash(t: torch.Tensor) -> str:
    """Hash of a tensor's values (shape-sensitive, dtype-normalized to float32)."""
    arr = t.detach().cpu().to(torch.float32).contiguous().numpy()
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def array_content_hash(a: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(a.shape).encode())
    h.update(str(a.dtype).encode())
    h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def model_checksum(model: torch.nn.Module) -> str:
    """Deterministic checksum over named parameters and buffers.

    Independent of any serialization format, so it is stable across
    save/load round trips and usable as a cache key.
    """
    h = hashlib.sha256()
    state = model.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        v = state[name]
        if isinstance(v, torch.Tensor):
            h.update(v.detach().cpu().contiguous().numpy().tobytes())
        else:
            h.update(str(v).encode())
    return h.hexdigest()


def canonical_json(obj: Any) -> str:
    """Serialize with sorted keys and fixed separators; hash-stable under key reordering."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(obj: Any) -> str:
    return sha256_bytes(canonical_json(obj).encode())


def derive_seed(*parts: Any) -> int:
    """Derive a 63-bit seed from arbitrary parts (ints, strings, hashes).

    Used to give every (global seed, image hash, restart index) tuple its own
    reproducible RNG stream independent of batch composition.
    """
    h = hashlib.sha256()
    for p in parts:
        h.update(str(p).encode())
        h.update(b"\x00")
    return int.from_bytes(h.digest()[:8], "big") & 0x7FFF_FFFF_FFFF_FFFF


def seeded_generator(*parts: Any) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.manual_seed(derive_seed(*parts))
    return g

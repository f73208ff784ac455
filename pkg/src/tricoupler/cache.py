"""Content-addressed cache for device eigensystems.

Keys combine the device description, the exact bias bytes, the basis and
the frame bucket, so any parameter perturbation is a miss.  A process-wide
in-memory store backs every computation; an optional directory-backed
layer (used by the batch front-end) persists entries across runs with an
LRU size cap.  Results with and without the cache are bit-identical
because entries store exactly what the solver returned.
"""

from __future__ import annotations

import hashlib
import json
import os
import pickle
import struct
from collections import OrderedDict
from pathlib import Path

from .circuit_model import DeviceSpec, FluxBias, _device_to_dict
from .quantizer import (
    BasisConfig,
    DeviceEigensystem,
    diagonalize_device,
    frame_bucket,
)

CACHE_DIR_ENV = "TRICOUPLER_CACHE_DIR"


def eigensystem_key(
    dev: DeviceSpec, bias: FluxBias, basis: BasisConfig, frame_bias: FluxBias
) -> str:
    payload = json.dumps(_device_to_dict(dev), sort_keys=True).encode()
    payload += struct.pack(
        "<4d", bias.f_m, bias.f_s, frame_bias.f_m, frame_bias.f_s
    )
    payload += json.dumps(
        [list(basis.dims), basis.kept_states, list(basis.kinds)]
    ).encode()
    return hashlib.sha256(payload).hexdigest()


class EigensystemCache:
    """Two-level (memory, optional disk) store for device eigensystems."""

    def __init__(
        self,
        directory: str | os.PathLike | None = None,
        memory_entries: int = 4096,
        disk_bytes_cap: int = 2 * 1024**3,
        enabled: bool = True,
    ):
        self.enabled = enabled
        self.memory: OrderedDict[str, DeviceEigensystem] = OrderedDict()
        self.memory_entries = memory_entries
        self.disk_bytes_cap = disk_bytes_cap
        self.directory = Path(directory) if directory else None
        if self.directory:
            self.directory.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0

    def _disk_path(self, key: str) -> Path:
        return self.directory / f"{key}.pkl"

    def get(self, key: str) -> DeviceEigensystem | None:
        if not self.enabled:
            return None
        if key in self.memory:
            self.memory.move_to_end(key)
            self.hits += 1
            return self.memory[key]
        if self.directory:
            path = self._disk_path(key)
            if path.exists():
                try:
                    with open(path, "rb") as fh:
                        value = pickle.load(fh)
                except Exception:
                    # corrupt entry: drop it, caller recomputes and restores
                    path.unlink(missing_ok=True)
                    self.misses += 1
                    return None
                os.utime(path)
                self._remember(key, value)
                self.hits += 1
                return value
        self.misses += 1
        return None

    def _remember(self, key: str, value: DeviceEigensystem):
        self.memory[key] = value
        self.memory.move_to_end(key)
        while len(self.memory) > self.memory_entries:
            self.memory.popitem(last=False)

    def put(self, key: str, value: DeviceEigensystem):
        if not self.enabled:
            return
        self._remember(key, value)
        if self.directory:
            path = self._disk_path(key)
            tmp = path.with_suffix(".tmp")
            with open(tmp, "wb") as fh:
                pickle.dump(value, fh, protocol=pickle.HIGHEST_PROTOCOL)
            os.replace(tmp, path)
            self._evict_disk()

    def _evict_disk(self):
        entries = sorted(
            self.directory.glob("*.pkl"), key=lambda p: p.stat().st_mtime
        )
        total = sum(p.stat().st_size for p in entries)
        while total > self.disk_bytes_cap and entries:
            victim = entries.pop(0)
            total -= victim.stat().st_size
            victim.unlink(missing_ok=True)

    def stats(self) -> dict:
        return {"hits": self.hits, "misses": self.misses, "size": len(self.memory)}


_GLOBAL_CACHE = EigensystemCache(directory=os.environ.get(CACHE_DIR_ENV))


def global_cache() -> EigensystemCache:
    return _GLOBAL_CACHE


def set_global_cache(cache: EigensystemCache):
    global _GLOBAL_CACHE
    _GLOBAL_CACHE = cache


def cached_eigensystem(
    dev: DeviceSpec,
    bias: FluxBias,
    basis: BasisConfig,
    frame_bias: FluxBias | None = None,
    cache: EigensystemCache | None = None,
) -> DeviceEigensystem:
    """Diagonalize through the cache (the standard entry point)."""
    fb = frame_bias or frame_bucket(bias)
    store = cache if cache is not None else _GLOBAL_CACHE
    key = eigensystem_key(dev, bias, basis, fb)
    hit = store.get(key)
    if hit is not None:
        return hit
    value = diagonalize_device(dev, bias, basis, frame_bias=fb)
    store.put(key, value)
    return value

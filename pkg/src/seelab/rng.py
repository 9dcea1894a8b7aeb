"""Counter-based Brownian increments, one Philox stream per path.

The stream of path ``p`` under master seed ``s`` is keyed by ``(p, s)``, so
any subset of paths can be regenerated independently and the result does not
depend on how paths are split across workers.
"""
from __future__ import annotations

import threading
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import InvalidArgumentError

_MASK64 = (1 << 64) - 1
_CACHE_SIZE = 24
_cache: OrderedDict = OrderedDict()
_lock = threading.Lock()


def derive_seed(seed, *tags):
    """Deterministic child seed from a master seed and integer/str tags."""
    entropy = [int(seed) & _MASK64]
    for tag in tags:
        if isinstance(tag, str):
            entropy.extend(tag.encode())
        else:
            entropy.append(int(tag) & _MASK64)
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


def path_generator(seed, path):
    key = np.array([int(path) & _MASK64, int(seed) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def chunk_bounds(n, workers):
    """Split ``range(n)`` into at most ``workers`` contiguous chunks."""
    workers = max(1, min(int(workers), n))
    edges = np.linspace(0, n, workers + 1).astype(int)
    return list(zip(edges[:-1].tolist(), edges[1:].tolist()))


def _fill(out, seed, start, stop):
    size = out.shape[1] * out.shape[2]
    for p in range(start, stop):
        out[p].reshape(size)[:] = path_generator(seed, p).standard_normal(size)


def standard_normals(seed, n_paths, n_steps, m, workers=1):
    """Read-only ``(n_paths, n_steps, m)`` array of per-path standard normals."""
    key = (int(seed) & _MASK64, int(n_paths), int(n_steps), int(m))
    with _lock:
        if key in _cache:
            _cache.move_to_end(key)
            return _cache[key]
    out = np.empty((n_paths, n_steps, m))
    bounds = chunk_bounds(n_paths, workers)
    if len(bounds) == 1:
        _fill(out, key[0], 0, n_paths)
    else:
        with ThreadPoolExecutor(len(bounds)) as pool:
            list(pool.map(lambda b: _fill(out, key[0], *b), bounds))
    out.setflags(write=False)
    with _lock:
        _cache[key] = out
        while len(_cache) > _CACHE_SIZE:
            _cache.popitem(last=False)
    return out


def clear_cache():
    with _lock:
        _cache.clear()


def brownian_increments(seed, n_paths, dts, m, workers=1):
    """Increments ``dW[p, i, j] ~ N(0, dts[i])`` of shape ``(n_paths, M, m)``.

    Ensembles that share ``(seed, n_paths, M, m)`` see the same normals
    (common random numbers).  ``workers`` changes wall time, never values.
    """
    dts = np.asarray(dts, dtype=float)
    if n_paths < 1 or m < 1 or dts.ndim != 1 or dts.size < 1:
        raise InvalidArgumentError("need n_paths >= 1, m >= 1 and a nonempty step vector")
    if np.any(dts <= 0):
        raise InvalidArgumentError("time steps must be positive")
    z = standard_normals(seed, n_paths, dts.size, m, workers)
    return z * np.sqrt(dts)[None, :, None]

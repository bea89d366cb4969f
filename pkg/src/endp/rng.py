"""Counter-based standard-normal draws.

Every block of rows is generated by its own Philox stream whose key is
derived from ``(seed, *key, block_index)``.  Row ``i`` of a request is
therefore a pure function of ``(seed, key, i, row_len)``: it does not depend
on how many rows were requested, on the order in which blocks are produced,
or on which worker produced them.
"""

from __future__ import annotations

import numpy as np

BLOCK_ROWS = 256

# purpose tags used as the first key word by the network code
TRAIN = 0
EVAL = 1
NOISE = 2
INIT = 3
SHUFFLE = 4


def _block_generator(seed: int, key: tuple[int, ...], block: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key) + (block,))
    return np.random.Generator(np.random.Philox(ss))


def keyed_generator(seed: int, key: tuple[int, ...] = ()) -> np.random.Generator:
    """A single Philox generator for small draws (initialisation, shuffles)."""
    return _block_generator(seed, key, 0)


def keyed_normals(seed: int, key: tuple[int, ...], n_rows: int, row_len: int,
                  dtype=np.float64, start: int = 0) -> np.ndarray:
    """Rows ``start .. start + n_rows`` of the N(0, 1) table keyed by ``(seed, key)``."""
    if seed < 0 or start < 0 or any(k < 0 for k in key):
        raise ValueError("seed, start and key words must be non-negative")
    out = np.empty((n_rows, row_len), dtype=np.float64)
    stop = start + n_rows
    first = start // BLOCK_ROWS
    for b in range(first, -(-stop // BLOCK_ROWS)):
        lo, hi = b * BLOCK_ROWS, (b + 1) * BLOCK_ROWS
        # always draw a full block so a row never depends on the request size
        block = _block_generator(seed, key, b).standard_normal((BLOCK_ROWS, row_len))
        a, z = max(lo, start), min(hi, stop)
        out[a - start:z - start] = block[a - lo:z - lo]
    return out.astype(dtype, copy=False)

"""Counter-based normal variates (Philox4x32-10 + Box-Muller).

Every variate is a pure function of ``(seed, stream, path_id, step, index)``,
so paths can be simulated in any order, chunking, or thread count and still
reproduce bit-for-bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

# named sub-streams; values are part of the reproducibility contract
STREAMS = {
    "simulate": 1,
    "refine": 2,
    "start": 3,
    "train": 4,
    "aux": 5,
}

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_MAX_BLOCK = 1 << 24


@numba.njit(cache=True, inline="always")
def _philox_block(c0, c1, c2, c3, k0, k1):
    # 32-bit words carried in uint64 registers
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        n0 = (p1 >> _S32) ^ c1 ^ k0
        n2 = (p0 >> _S32) ^ c3 ^ k1
        c1 = p1 & _MASK32
        c3 = p0 & _MASK32
        c0 = n0
        c2 = n2
        k0 = (k0 + _W0) & _MASK32
        k1 = (k1 + _W1) & _MASK32
    return c0, c1, c2, c3


@numba.njit(cache=True)
def philox4x32(counter, key):
    """Raw Philox4x32-10 block for a single 128-bit counter and 64-bit key."""
    c = _philox_block(np.uint64(counter[0]), np.uint64(counter[1]),
                      np.uint64(counter[2]), np.uint64(counter[3]),
                      np.uint64(key[0]), np.uint64(key[1]))
    out = np.empty(4, dtype=np.uint32)
    out[0], out[1], out[2], out[3] = c
    return out


@numba.njit(cache=True)
def _normals_kernel(seed_lo, seed_hi, stream, path_ids, steps, count, out):
    two_pi = 2.0 * np.pi
    inv53 = 1.0 / 9007199254740992.0
    nblocks = (count + 1) // 2
    for i in range(path_ids.shape[0]):
        pid = np.uint64(path_ids[i])
        c0 = pid & _MASK32
        c1 = pid >> _S32
        c2 = np.uint64(steps[i])
        for b in range(nblocks):
            c3 = (stream << np.uint64(24)) | np.uint64(b)
            x0, x1, x2, x3 = _philox_block(c0, c1, c2, c3, seed_lo, seed_hi)
            a = (x0 >> np.uint64(5)) * np.uint64(67108864) + (x1 >> np.uint64(6))
            bb = (x2 >> np.uint64(5)) * np.uint64(67108864) + (x3 >> np.uint64(6))
            u1 = 1.0 - float(a) * inv53  # (0, 1]
            u2 = float(bb) * inv53
            r = np.sqrt(-2.0 * np.log(u1))
            k = 2 * b
            out[i, k] = r * np.cos(two_pi * u2)
            if k + 1 < count:
                out[i, k + 1] = r * np.sin(two_pi * u2)


def standard_normals(seed: int, stream: str | int, path_ids, steps, count: int) -> np.ndarray:
    """Standard normals of shape ``(len(path_ids), count)``.

    ``steps`` is a scalar or one step index per path.
    """
    stream_id = STREAMS[stream] if isinstance(stream, str) else int(stream)
    if not 0 <= stream_id < 256:
        raise ValueError(f"stream id {stream_id} outside [0, 256)")
    if count < 0 or (count + 1) // 2 > _MAX_BLOCK:
        raise ValueError(f"count {count} out of range")
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    pids = np.ascontiguousarray(path_ids, dtype=np.uint64).reshape(-1)
    st = np.asarray(steps, dtype=np.int64)
    if st.ndim == 0:
        st = np.full(pids.shape[0], int(st), dtype=np.int64)
    if st.shape != pids.shape:
        raise ValueError("steps must be scalar or match path_ids")
    if st.size and (st.min() < 0 or st.max() >= 2**32):
        raise ValueError("step index outside [0, 2**32)")
    out = np.empty((pids.shape[0], count), dtype=np.float64)
    _normals_kernel(np.uint64(seed & 0xFFFFFFFF), np.uint64(seed >> 32), np.uint64(stream_id),
                    pids, st.astype(np.uint64), count, out)
    return out


def derive_seed(seed: int, name: str) -> int:
    """Child seed for a named sub-study (e.g. one per stepsize in a sweep)."""
    key = np.array([seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF], dtype=np.uint32)
    h = 0
    for ch in name.encode():
        h = (h * 131 + ch) & 0xFFFFFFFF
    block = philox4x32(np.array([h, len(name), 0xC0FFEE, 0], dtype=np.uint32), key)
    return int(block[0]) | (int(block[1]) << 32)


@dataclass(frozen=True)
class RngStream:
    """Per-path handle on the counter-based generator."""

    seed: int
    path_id: int

    def normals(self, stream: str | int, step: int, count: int) -> np.ndarray:
        return standard_normals(self.seed, stream, [self.path_id], step, count)[0]

    def increment(self, step: int, d: int, h: float) -> np.ndarray:
        """Brownian increment ``W_{(k+1)h} - W_{kh}`` of the simulate stream."""
        return np.sqrt(h) * self.normals("simulate", step, d)

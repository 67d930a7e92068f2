"""Hot numeric kernels.

Every kernel exists twice: a loop form compiled by numba (``*_loop``) and a
vectorised numpy form (``*_numpy``). The public name is bound to one of them
according to :data:`mitovl._jit.USE_JIT`. Both forms return identical results
(integer kernels bit-for-bit, float kernels to rounding); the test-suite
checks this and ``benchmarks/bench_kernels.py`` times them.
"""

import hashlib

import numpy as np

from mitovl._jit import USE_JIT, njit

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_S53 = np.uint64(53)

STATUS_OK = 0
STATUS_EMPTY = 1
STATUS_FORCED = 2


def stable_hash64(text):
    """64-bit digest of a string that does not depend on PYTHONHASHSEED."""
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


# ---------------------------------------------------------------------------
# SplitMix64, counter addressable: value(key, c) = mix(key + (c + 1) * GOLDEN)


@njit
def _mix64(z):
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


@njit
def _splitmix_scalar(x):
    return _mix64(x + GOLDEN)


def splitmix64(x):
    """SplitMix64 finaliser on uint64 scalars or arrays (wrapping arithmetic)."""
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = x + GOLDEN
        z = (z ^ (z >> _S30)) * _MIX1
        z = (z ^ (z >> _S27)) * _MIX2
        return z ^ (z >> _S31)


def derive_keys(global_seed, annotation_hashes, replicas):
    """Per-(annotation, replica) stream keys, shape ``(len(annotation_hashes) * replicas,)``.

    Rows are annotation-major: row ``i * replicas + r`` belongs to annotation ``i``
    and replica ``r``.
    """
    seed = splitmix64(np.uint64(global_seed & 0xFFFFFFFFFFFFFFFF))
    ann = splitmix64(seed ^ np.asarray(annotation_hashes, dtype=np.uint64))
    rep = np.arange(replicas, dtype=np.uint64)
    return splitmix64(ann[:, None] ^ rep[None, :]).ravel()


def uniform_ints_numpy(keys, counter, lo, hi):
    """Uniform integers on ``[lo, hi]`` (inclusive) from stream position ``counter``."""
    keys = np.asarray(keys, dtype=np.uint64)
    with np.errstate(over="ignore"):
        r = splitmix64(keys + np.uint64(counter) * GOLDEN)
        n = (np.asarray(hi, dtype=np.int64) - np.asarray(lo, dtype=np.int64) + 1).astype(np.uint64)
        return np.asarray(lo, dtype=np.int64) + ((r >> _S11) * n >> _S53).astype(np.int64)


@njit
def _uniform_int_scalar(key, counter, lo, hi):
    r = _splitmix_scalar(key + np.uint64(counter) * GOLDEN)
    n = np.uint64(hi - lo + 1)
    return lo + np.int64(((r >> _S11) * n) >> _S53)


# ---------------------------------------------------------------------------
# tile placement: expand -> feasible interval -> sample


@njit
def _place_tiles_loop(x0, y0, x1, y1, width, height, keys, tile_side, max_shift, force_edges):
    n = keys.shape[0]
    ox = np.empty(n, dtype=np.int64)
    oy = np.empty(n, dtype=np.int64)
    dx = np.zeros(n, dtype=np.int64)
    dy = np.zeros(n, dtype=np.int64)
    status = np.zeros(n, dtype=np.int8)
    half = tile_side // 2
    for i in range(n):
        cx = (x0[i] + x1[i]) // 2
        cy = (y0[i] + y1[i]) // 2
        ox[i] = cx - half
        oy[i] = cy - half
        lo_x = max(-max_shift, -ox[i])
        hi_x = min(max_shift, width[i] - tile_side - ox[i])
        lo_y = max(-max_shift, -oy[i])
        hi_y = min(max_shift, height[i] - tile_side - oy[i])
        if lo_x <= hi_x and lo_y <= hi_y:
            dx[i] = _uniform_int_scalar(keys[i], 0, lo_x, hi_x)
            dy[i] = _uniform_int_scalar(keys[i], 1, lo_y, hi_y)
        elif force_edges:
            # nearest in-slide placement to the centred one
            dx[i] = min(max(0, -ox[i]), width[i] - tile_side - ox[i])
            dy[i] = min(max(0, -oy[i]), height[i] - tile_side - oy[i])
            status[i] = STATUS_FORCED
        else:
            status[i] = STATUS_EMPTY
    return ox, oy, dx, dy, status


def _place_tiles_numpy(x0, y0, x1, y1, width, height, keys, tile_side, max_shift, force_edges):
    half = tile_side // 2
    ox = (x0 + x1) // 2 - half
    oy = (y0 + y1) // 2 - half
    lo_x = np.maximum(-max_shift, -ox)
    hi_x = np.minimum(max_shift, width - tile_side - ox)
    lo_y = np.maximum(-max_shift, -oy)
    hi_y = np.minimum(max_shift, height - tile_side - oy)
    ok = (lo_x <= hi_x) & (lo_y <= hi_y)
    dx = np.zeros(len(keys), dtype=np.int64)
    dy = np.zeros(len(keys), dtype=np.int64)
    dx[ok] = uniform_ints_numpy(keys[ok], 0, lo_x[ok], hi_x[ok])
    dy[ok] = uniform_ints_numpy(keys[ok], 1, lo_y[ok], hi_y[ok])
    status = np.zeros(len(keys), dtype=np.int8)
    bad = ~ok
    if force_edges:
        dx[bad] = np.minimum(np.maximum(0, -ox[bad]), width[bad] - tile_side - ox[bad])
        dy[bad] = np.minimum(np.maximum(0, -oy[bad]), height[bad] - tile_side - oy[bad])
        status[bad] = STATUS_FORCED
    else:
        status[bad] = STATUS_EMPTY
    return ox.astype(np.int64), oy.astype(np.int64), dx, dy, status


# ---------------------------------------------------------------------------
# negative-tile vs positive-box intersection (half-open rectangles)


@njit
def _tiles_hit_boxes_loop(tile_slide, tile_x, tile_y, tile_side, box_offsets, bx0, by0, bx1, by1):
    n = tile_slide.shape[0]
    hit = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        s = tile_slide[i]
        tx0 = tile_x[i]
        ty0 = tile_y[i]
        tx1 = tx0 + tile_side
        ty1 = ty0 + tile_side
        for j in range(box_offsets[s], box_offsets[s + 1]):
            if tx0 < bx1[j] and bx0[j] < tx1 and ty0 < by1[j] and by0[j] < ty1:
                hit[i] = True
                break
    return hit


def _tiles_hit_boxes_numpy(tile_slide, tile_x, tile_y, tile_side, box_offsets, bx0, by0, bx1, by1):
    hit = np.zeros(len(tile_slide), dtype=bool)
    for s in np.unique(tile_slide):
        lo, hi = box_offsets[s], box_offsets[s + 1]
        if lo == hi:
            continue
        rows = np.flatnonzero(tile_slide == s)
        tx0 = tile_x[rows, None]
        ty0 = tile_y[rows, None]
        inter = (
            (tx0 < bx1[None, lo:hi])
            & (bx0[None, lo:hi] < tx0 + tile_side)
            & (ty0 < by1[None, lo:hi])
            & (by0[None, lo:hi] < ty0 + tile_side)
        )
        hit[rows] = inter.any(axis=1)
    return hit


# ---------------------------------------------------------------------------
# Mann-Whitney U with mid-ranks for ties


@njit
def _mann_whitney_u_loop(scores, positive):
    n = scores.shape[0]
    order = np.argsort(scores)  # mid-ranks make stability irrelevant
    rank_sum = 0.0
    n_pos = 0
    i = 0
    while i < n:
        j = i
        while j + 1 < n and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        mid = 0.5 * (i + j) + 1.0
        for k in range(i, j + 1):
            if positive[order[k]]:
                rank_sum += mid
                n_pos += 1
        i = j + 1
    return rank_sum - n_pos * (n_pos + 1) / 2.0


def _mann_whitney_u_numpy(scores, positive):
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    mid = upper - (counts - 1) / 2.0
    ranks = mid[inverse]
    n_pos = int(positive.sum())
    return float(ranks[positive].sum()) - n_pos * (n_pos + 1) / 2.0


if USE_JIT:
    place_tiles = _place_tiles_loop
    tiles_hit_boxes = _tiles_hit_boxes_loop
    mann_whitney_u = _mann_whitney_u_loop
else:
    place_tiles = _place_tiles_numpy
    tiles_hit_boxes = _tiles_hit_boxes_numpy
    mann_whitney_u = _mann_whitney_u_numpy

BACKEND = "numba" if USE_JIT else "numpy"

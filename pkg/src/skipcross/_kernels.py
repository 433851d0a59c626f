"""Hot numeric loops, each with a numba-compiled and a pure-numpy implementation.

The numba path is used when numba imports cleanly and ``SKIPCROSS_NUMBA`` is
not set to ``0``. Both paths are always importable so tests and the benchmark
can compare them directly (``get_kernels("numba")`` / ``get_kernels("numpy")``).
"""
from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False


def _numba_requested() -> bool:
    return os.environ.get("SKIPCROSS_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def im2col_numpy(xp, kh, kw, stride, ho, wo):
    """Patch matrix of a pre-padded (N, C, Hp, Wp) array, shape (C*kh*kw, N*ho*wo)."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)


def col2im_numpy(cols, n, c, hp, wp, kh, kw, stride, ho, wo):
    """Scatter-add inverse of :func:`im2col_numpy` into a padded (N, C, hp, wp) array."""
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(c, kh, kw, n, ho, wo)
    he = (ho - 1) * stride + 1
    we = (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + he : stride, j : j + we : stride] += cols6[:, i, j].transpose(1, 0, 2, 3)
    return out


def adi_numpy(alt, occ, radius):
    h, w = alt.shape
    total = np.zeros((h, w), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.int64)
    pad_alt = np.zeros((h + 2 * radius, w + 2 * radius), dtype=np.float64)
    pad_occ = np.zeros((h + 2 * radius, w + 2 * radius), dtype=bool)
    pad_alt[radius : radius + h, radius : radius + w] = alt
    pad_occ[radius : radius + h, radius : radius + w] = occ
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            nb_alt = pad_alt[radius + dy : radius + dy + h, radius + dx : radius + dx + w]
            nb_occ = pad_occ[radius + dy : radius + dy + h, radius + dx : radius + dx + w] & occ
            dist = np.sqrt(float(dx * dx + dy * dy))
            total += np.where(nb_occ, np.abs(alt - nb_alt) / dist, 0.0)
            count += nb_occ
    out = np.zeros((h, w), dtype=np.float64)
    ok = occ & (count > 0)
    out[ok] = total[ok] / count[ok]
    return out


def knn_numpy(occ, k):
    """Indices (row-major) and distances of the k nearest occupied pixels for every blank pixel.

    Returns (blank_flat, nbr_flat[nb, k], dist[nb, k]). Ties on distance break
    toward the smaller row-major index.
    """
    h, w = occ.shape
    occ_flat = np.flatnonzero(occ.ravel())
    blank_flat = np.flatnonzero(~occ.ravel())
    oy, ox = np.divmod(occ_flat, w)
    nbr = np.empty((blank_flat.size, k), dtype=np.int64)
    dist = np.empty((blank_flat.size, k), dtype=np.float64)
    chunk = max(1, 2_000_000 // max(1, occ_flat.size))
    for start in range(0, blank_flat.size, chunk):
        b = blank_flat[start : start + chunk]
        by, bx = np.divmod(b, w)
        d2 = (by[:, None] - oy[None, :]) ** 2 + (bx[:, None] - ox[None, :]) ** 2
        # occ_flat is ascending, so a stable sort on d2 keeps row-major order within ties
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        nbr[start : start + chunk] = occ_flat[order]
        dist[start : start + chunk] = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return blank_flat, nbr, dist


def zbuffer_numpy(flat_pix, depth):
    """Index into the inputs of the winning (smallest depth, then lowest index) point per pixel."""
    if flat_pix.size == 0:
        return np.zeros(0, dtype=np.int64)
    idx = np.arange(flat_pix.size)
    order = np.lexsort((idx, depth, flat_pix))
    sp = flat_pix[order]
    first = np.ones(sp.size, dtype=bool)
    first[1:] = sp[1:] != sp[:-1]
    return order[first]


NUMPY = SimpleNamespace(
    name="numpy",
    im2col=im2col_numpy,
    col2im=col2im_numpy,
    adi=adi_numpy,
    knn=knn_numpy,
    zbuffer=zbuffer_numpy,
)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _im2col_nb(xp, kh, kw, stride, ho, wo):
        n, c = xp.shape[0], xp.shape[1]
        cols = np.empty((c * kh * kw, n * ho * wo), dtype=xp.dtype)
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    q = (ch * kh + i) * kw + j
                    for b in range(n):
                        for y in range(ho):
                            r = (b * ho + y) * wo
                            for x in range(wo):
                                cols[q, r + x] = xp[b, ch, y * stride + i, x * stride + j]
        return cols

    @njit(cache=True)
    def _col2im_nb(cols, n, c, hp, wp, kh, kw, stride, ho, wo):
        out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
        # offset-major accumulation keeps the summation order identical to the numpy path
        for i in range(kh):
            for j in range(kw):
                for b in range(n):
                    for ch in range(c):
                        q = (ch * kh + i) * kw + j
                        for y in range(ho):
                            r = (b * ho + y) * wo
                            for x in range(wo):
                                out[b, ch, y * stride + i, x * stride + j] += cols[q, r + x]
        return out

    @njit(cache=True)
    def _adi_nb(alt, occ, radius):
        h, w = alt.shape
        out = np.zeros((h, w), dtype=np.float64)
        for y in range(h):
            for x in range(w):
                if not occ[y, x]:
                    continue
                total = 0.0
                m = 0
                for dy in range(-radius, radius + 1):
                    ny = y + dy
                    if ny < 0 or ny >= h:
                        continue
                    for dx in range(-radius, radius + 1):
                        nx = x + dx
                        if (dy == 0 and dx == 0) or nx < 0 or nx >= w or not occ[ny, nx]:
                            continue
                        total += abs(alt[y, x] - alt[ny, nx]) / np.sqrt(float(dx * dx + dy * dy))
                        m += 1
                if m > 0:
                    out[y, x] = total / m
        return out

    @njit(cache=True)
    def _knn_nb(occ, k):
        h, w = occ.shape
        nblank = 0
        for y in range(h):
            for x in range(w):
                if not occ[y, x]:
                    nblank += 1
        blank = np.empty(nblank, dtype=np.int64)
        nbr = np.empty((nblank, k), dtype=np.int64)
        dist = np.empty((nblank, k), dtype=np.float64)
        best_d2 = np.empty(k, dtype=np.int64)
        best_ix = np.empty(k, dtype=np.int64)
        rmax = max(h, w)
        t = 0
        for y in range(h):
            for x in range(w):
                if occ[y, x]:
                    continue
                found = 0
                # expanding square rings; stop once the ring lies beyond the k-th best distance
                for r in range(1, rmax + 1):
                    if found == k and r * r > best_d2[k - 1]:
                        break
                    for dy in range(-r, r + 1):
                        ny = y + dy
                        if ny < 0 or ny >= h:
                            continue
                        step = 1 if (dy == -r or dy == r) else 2 * r
                        dx = -r
                        while dx <= r:
                            nx = x + dx
                            if nx >= 0 and nx < w and occ[ny, nx]:
                                d2 = dy * dy + dx * dx
                                ix = ny * w + nx
                                if found < k or d2 < best_d2[k - 1] or (d2 == best_d2[k - 1] and ix < best_ix[k - 1]):
                                    p = found if found < k else k - 1
                                    while p > 0 and (best_d2[p - 1] > d2 or (best_d2[p - 1] == d2 and best_ix[p - 1] > ix)):
                                        if p < k:
                                            best_d2[p] = best_d2[p - 1]
                                            best_ix[p] = best_ix[p - 1]
                                        p -= 1
                                    best_d2[p] = d2
                                    best_ix[p] = ix
                                    if found < k:
                                        found += 1
                            dx += step
                blank[t] = y * w + x
                for q in range(k):
                    nbr[t, q] = best_ix[q]
                    dist[t, q] = np.sqrt(float(best_d2[q]))
                t += 1
        return blank, nbr, dist

    @njit(cache=True)
    def _zbuffer_nb(flat_pix, depth, npix):
        win = np.full(npix, -1, dtype=np.int64)
        for i in range(flat_pix.size):
            p = flat_pix[i]
            cur = win[p]
            if cur < 0 or depth[i] < depth[cur]:
                win[p] = i
        cnt = 0
        for p in range(npix):
            if win[p] >= 0:
                cnt += 1
        out = np.empty(cnt, dtype=np.int64)
        t = 0
        for p in range(npix):
            if win[p] >= 0:
                out[t] = win[p]
                t += 1
        return out

    def _zbuffer_numba(flat_pix, depth):
        if flat_pix.size == 0:
            return np.zeros(0, dtype=np.int64)
        npix = int(flat_pix.max()) + 1
        return _zbuffer_nb(flat_pix.astype(np.int64), depth.astype(np.float64), npix)

    NUMBA = SimpleNamespace(
        name="numba",
        im2col=_im2col_nb,
        col2im=_col2im_nb,
        adi=lambda alt, occ, radius: _adi_nb(np.ascontiguousarray(alt, dtype=np.float64),
                                             np.ascontiguousarray(occ, dtype=np.bool_), int(radius)),
        knn=lambda occ, k: _knn_nb(np.ascontiguousarray(occ, dtype=np.bool_), int(k)),
        zbuffer=_zbuffer_numba,
    )
else:  # pragma: no cover
    NUMBA = None


def get_kernels(which: str | None = None) -> SimpleNamespace:
    """Return the kernel set by name; ``None`` picks according to the environment."""
    if which is None:
        which = "numba" if (HAS_NUMBA and _numba_requested()) else "numpy"
    if which == "numba":
        if NUMBA is None:
            raise RuntimeError("numba kernels requested but numba is not importable")
        return NUMBA
    if which == "numpy":
        return NUMPY
    raise ValueError(f"unknown kernel set {which!r}")


def active() -> SimpleNamespace:
    return get_kernels(None)

"""Hot numeric kernels with two interchangeable backends.

The compute-heavy inner loops (2-D convolution and windowed SSIM statistics)
are compiled with numba when available. Setting the environment variable
``ABYSS_BACKEND=numpy`` forces the pure-numpy implementations; ``numba``
forces the compiled path (raising if numba is missing). The default is
numba when importable, numpy otherwise. ``benchmarks/bench_kernels.py``
compares the two.

All kernels are deterministic: every output element is produced by exactly
one sequential accumulation, so results are bit-stable across runs and
thread counts.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_ENV_BACKEND = os.environ.get("ABYSS_BACKEND", "").strip().lower()

try:
    import numba
    from numba import njit, prange

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised via ABYSS_BACKEND=numpy
    HAS_NUMBA = False

if _ENV_BACKEND == "numpy":
    USE_NUMBA = False
elif _ENV_BACKEND == "numba":
    if not HAS_NUMBA:
        raise ImportError("ABYSS_BACKEND=numba but numba is not installed")
    USE_NUMBA = True
elif _ENV_BACKEND in ("", "auto"):
    USE_NUMBA = HAS_NUMBA
else:
    raise ValueError(f"unknown ABYSS_BACKEND value: {_ENV_BACKEND!r}")

ACTIVE_BACKEND = "numba" if USE_NUMBA else "numpy"


def set_num_threads(n: int) -> None:
    """Cap kernel parallelism (no-op on the numpy backend)."""
    if USE_NUMBA:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------


def _conv2d_valid_np(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Valid cross-correlation of x (B,C,H,W) with w (O,C,KH,KW)."""
    kh, kw = w.shape[2], w.shape[3]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (B, C, OH, OW, KH, KW) -> contract over C, KH, KW
    out = np.einsum("bcyxij,ocij->boyx", win, w, optimize=True)
    return np.ascontiguousarray(out, dtype=x.dtype)


def _conv2d_dw_np(x: np.ndarray, gy: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (B, C, OH, OW, KH, KW), gy: (B, O, OH, OW) -> (O, C, KH, KW)
    gw = np.einsum("bcyxij,boyx->ocij", win, gy, optimize=True)
    return np.ascontiguousarray(gw, dtype=x.dtype)


def _ssim_map_np(a, b, win, c1, c2):
    k = win.shape[0]
    wa = sliding_window_view(a, (k, k))
    wb = sliding_window_view(b, (k, k))
    mu_a = np.einsum("yxij,ij->yx", wa, win, optimize=True)
    mu_b = np.einsum("yxij,ij->yx", wb, win, optimize=True)
    m_aa = np.einsum("yxij,ij->yx", wa * wa, win, optimize=True)
    m_bb = np.einsum("yxij,ij->yx", wb * wb, win, optimize=True)
    m_ab = np.einsum("yxij,ij->yx", wa * wb, win, optimize=True)
    va = m_aa - mu_a * mu_a
    vb = m_bb - mu_b * mu_b
    cov = m_ab - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2)
    return num / den


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(parallel=True, fastmath=True, cache=True)
    def _conv2d_valid_s1_nb(x, w):
        # Accumulates over a buffer as wide as the input rows so each
        # (c, ky, kx) contributes through one long contiguous loop; the
        # spill columns between output rows are dropped on copy-out.
        B, C, H, W = x.shape
        O, _, KH, KW = w.shape
        OH = H - KH + 1
        OW = W - KW + 1
        L = (OH - 1) * W + OW
        xf = x.reshape(B, C, H * W)
        out = np.empty((B, O, OH, OW), dtype=x.dtype)
        for bo in prange(B * O):
            b = bo // O
            o = bo % O
            buf = np.zeros(L, dtype=x.dtype)
            for c in range(C):
                for ky in range(KH):
                    for kx in range(KW):
                        wv = w[o, c, ky, kx]
                        xs = xf[b, c, ky * W + kx:]
                        for i in range(L):
                            buf[i] += xs[i] * wv
            for oy in range(OH):
                base = oy * W
                for ox in range(OW):
                    out[b, o, oy, ox] = buf[base + ox]
        return out

    @njit(parallel=True, fastmath=True, cache=True)
    def _conv2d_valid_s2_nb(x, w):
        B, C, H, W = x.shape
        O, _, KH, KW = w.shape
        OH = (H - KH) // 2 + 1
        OW = (W - KW) // 2 + 1
        out = np.empty((B, O, OH, OW), dtype=x.dtype)
        for bo in prange(B * O):
            b = bo // O
            o = bo % O
            for oy in range(OH):
                row = np.zeros(OW, dtype=x.dtype)
                for c in range(C):
                    for ky in range(KH):
                        xrow = x[b, c, oy * 2 + ky]
                        for kx in range(KW):
                            wv = w[o, c, ky, kx]
                            for ox in range(OW):
                                row[ox] += xrow[ox * 2 + kx] * wv
                out[b, o, oy] = row
        return out

    @njit(parallel=True, fastmath=True, cache=True)
    def _conv2d_dw_s1_nb(x, gyt, KH, KW, L):
        # gyt: (O, B, OH, W) with gy zero-padded on the right to the input
        # row width W, so the reduction per (ky, kx) is one flat dot product.
        B, C, H, W = x.shape
        O, OH = gyt.shape[0], gyt.shape[2]
        xf = x.reshape(B, C, H * W)
        gf = gyt.reshape(O, B, OH * W)
        gw = np.empty((O, C, KH, KW), dtype=x.dtype)
        for oc in prange(O * C):
            o = oc // C
            c = oc % C
            for ky in range(KH):
                for kx in range(KW):
                    total = x.dtype.type(0.0)
                    for b in range(B):
                        xs = xf[b, c, ky * W + kx:]
                        gs = gf[o, b]
                        for i in range(L):
                            total += xs[i] * gs[i]
                    gw[o, c, ky, kx] = total
        return gw

    @njit(parallel=True, fastmath=True, cache=True)
    def _conv2d_dw_s2_nb(x, gy, KH, KW):
        B, C, H, W = x.shape
        O, OH, OW = gy.shape[1], gy.shape[2], gy.shape[3]
        gw = np.empty((O, C, KH, KW), dtype=x.dtype)
        for oc in prange(O * C):
            o = oc // C
            c = oc % C
            for ky in range(KH):
                for kx in range(KW):
                    total = x.dtype.type(0.0)
                    for b in range(B):
                        for oy in range(OH):
                            xrow = x[b, c, oy * 2 + ky]
                            grow = gy[b, o, oy]
                            for ox in range(OW):
                                total += xrow[ox * 2 + kx] * grow[ox]
                    gw[o, c, ky, kx] = total
        return gw

    @njit(parallel=True, cache=True)
    def _ssim_map_nb(a, b, win, c1, c2):
        H, W = a.shape
        k = win.shape[0]
        OH = H - k + 1
        OW = W - k + 1
        out = np.empty((OH, OW), dtype=a.dtype)
        for oy in prange(OH):
            for ox in range(OW):
                mu_a = 0.0
                mu_b = 0.0
                m_aa = 0.0
                m_bb = 0.0
                m_ab = 0.0
                for i in range(k):
                    for j in range(k):
                        wv = win[i, j]
                        av = a[oy + i, ox + j]
                        bv = b[oy + i, ox + j]
                        mu_a += wv * av
                        mu_b += wv * bv
                        m_aa += wv * av * av
                        m_bb += wv * bv * bv
                        m_ab += wv * av * bv
                va = m_aa - mu_a * mu_a
                vb = m_bb - mu_b * mu_b
                cov = m_ab - mu_a * mu_b
                num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
                den = (mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2)
                out[oy, ox] = num / den
        return out


# ---------------------------------------------------------------------------
# public dispatch
# ---------------------------------------------------------------------------


def conv2d_valid(x: np.ndarray, w: np.ndarray, stride: int = 1) -> np.ndarray:
    """Valid-mode cross-correlation.

    x: (B, C, H, W), w: (O, C, KH, KW); caller applies any zero padding.
    Returns (B, O, OH, OW) with OH = (H - KH) // stride + 1.
    """
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    if USE_NUMBA and stride in (1, 2):
        if stride == 1:
            return _conv2d_valid_s1_nb(x, w)
        return _conv2d_valid_s2_nb(x, w)
    return _conv2d_valid_np(x, w, stride)


def conv2d_grad_weight(x: np.ndarray, gy: np.ndarray, kh: int, kw: int, stride: int = 1) -> np.ndarray:
    """Gradient of conv2d_valid w.r.t. the kernel, given upstream gy."""
    x = np.ascontiguousarray(x)
    gy = np.ascontiguousarray(gy, dtype=x.dtype)
    if USE_NUMBA and stride in (1, 2):
        if stride == 1:
            W = x.shape[3]
            OH, OW = gy.shape[2], gy.shape[3]
            gyt = np.zeros((gy.shape[1], gy.shape[0], OH, W), dtype=x.dtype)
            gyt[:, :, :, :OW] = gy.transpose(1, 0, 2, 3)
            return _conv2d_dw_s1_nb(x, gyt, kh, kw, (OH - 1) * W + OW)
        return _conv2d_dw_s2_nb(x, gy, kh, kw)
    return _conv2d_dw_np(x, gy, kh, kw, stride)


def ssim_map(a: np.ndarray, b: np.ndarray, win: np.ndarray, c1: float, c2: float) -> np.ndarray:
    """Per-window SSIM values over all valid window positions."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    win = np.ascontiguousarray(win, dtype=np.float64)
    if USE_NUMBA:
        return _ssim_map_nb(a, b, win, float(c1), float(c2))
    return _ssim_map_np(a, b, win, float(c1), float(c2))

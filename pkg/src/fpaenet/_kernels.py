"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``FPAENET_NUMBA`` is not set to ``0``.  Both paths are bitwise
interchangeable for the im2col/col2im gathers; the matrix products are
always delegated to numpy.
"""
import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def _numba_requested():
    return os.environ.get("FPAENET_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


USE_NUMBA = _HAVE_NUMBA and _numba_requested()


def backend_name():
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# im2col / col2im
# ---------------------------------------------------------------------------


@njit(cache=True)
def _im2col_nb(x, k, stride, pad, ho, wo):
    n, c, h, w = x.shape
    cols = np.zeros((n, c * k * k, ho * wo), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ch * k + i) * k + j
                    for y in range(ho):
                        yy = y * stride + i - pad
                        if yy < 0 or yy >= h:
                            continue
                        base = y * wo
                        for xo in range(wo):
                            xx = xo * stride + j - pad
                            if 0 <= xx < w:
                                cols[b, row, base + xo] = x[b, ch, yy, xx]
    return cols


@njit(cache=True)
def _col2im_nb(cols, n, c, h, w, k, stride, pad, ho, wo):
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ch * k + i) * k + j
                    for y in range(ho):
                        yy = y * stride + i - pad
                        if yy < 0 or yy >= h:
                            continue
                        base = y * wo
                        for xo in range(wo):
                            xx = xo * stride + j - pad
                            if 0 <= xx < w:
                                out[b, ch, yy, xx] += cols[b, row, base + xo]
    return out


def _im2col_np(x, k, stride, pad, ho, wo):
    n, c = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im_np(cols, n, c, h, w, k, stride, pad, ho, wo):
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols6[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def im2col(x, k, stride, pad, ho, wo, use_numba=None):
    if use_numba is None:
        use_numba = USE_NUMBA
    x = np.ascontiguousarray(x)
    if use_numba:
        return _im2col_nb(x, k, stride, pad, ho, wo)
    return _im2col_np(x, k, stride, pad, ho, wo)


def col2im(cols, shape, k, stride, pad, ho, wo, use_numba=None):
    if use_numba is None:
        use_numba = USE_NUMBA
    n, c, h, w = shape
    cols = np.ascontiguousarray(cols)
    if use_numba:
        return _col2im_nb(cols, n, c, h, w, k, stride, pad, ho, wo)
    return _col2im_np(cols, n, c, h, w, k, stride, pad, ho, wo)


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d_forward(x, w, b, stride, pad, use_numba=None):
    """Cross-correlation of NCHW ``x`` with OIHW ``w``.

    Returns the output and the column buffer needed by the backward pass
    (``None`` for the 1x1/stride-1/no-pad case, where the input itself is
    the column matrix).
    """
    n, c, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho = conv_out_size(h, k, stride, pad)
    wo = conv_out_size(wd, k, stride, pad)
    w2 = w.reshape(cout, -1)
    if k == 1 and stride == 1 and pad == 0:
        cols = x.reshape(n, c, h * wd)
        saved = None
    else:
        cols = im2col(x, k, stride, pad, ho, wo, use_numba)
        saved = cols
    out = np.matmul(w2, cols)
    if b is not None:
        out += b.reshape(1, cout, 1)
    return out.reshape(n, cout, ho, wo), saved


def conv2d_backward(g, x, w, cols, stride, pad, need_input=True, use_numba=None):
    """Gradients of a conv2d w.r.t. input, weight and bias."""
    n, c, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho, wo = g.shape[2], g.shape[3]
    g3 = g.reshape(n, cout, ho * wo)
    if cols is None:
        cols = x.reshape(n, c, h * wd)
    gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    gb = g3.sum(axis=(0, 2))
    gx = None
    if need_input:
        gcols = np.matmul(w.reshape(cout, -1).T, g3)
        if k == 1 and stride == 1 and pad == 0:
            gx = gcols.reshape(x.shape)
        else:
            gx = col2im(gcols, x.shape, k, stride, pad, ho, wo, use_numba)
    return gx, gw, gb


# ---------------------------------------------------------------------------
# greedy non-maximum suppression over an already-sorted candidate list
# ---------------------------------------------------------------------------


@njit(cache=True)
def _nms_sorted_nb(x1, y1, x2, y2, thr):
    m = x1.shape[0]
    keep = np.empty(m, dtype=np.int64)
    suppressed = np.zeros(m, dtype=np.bool_)
    nk = 0
    for i in range(m):
        if suppressed[i]:
            continue
        keep[nk] = i
        nk += 1
        ai = (x2[i] - x1[i]) * (y2[i] - y1[i])
        for j in range(i + 1, m):
            if suppressed[j]:
                continue
            iw = min(x2[i], x2[j]) - max(x1[i], x1[j])
            ih = min(y2[i], y2[j]) - max(y1[i], y1[j])
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            union = ai + (x2[j] - x1[j]) * (y2[j] - y1[j]) - inter
            if inter / union >= thr:
                suppressed[j] = True
    return keep[:nk]


def _nms_sorted_np(x1, y1, x2, y2, thr):
    m = x1.shape[0]
    areas = (x2 - x1) * (y2 - y1)
    alive = np.ones(m, dtype=bool)
    keep = []
    for i in range(m):
        if not alive[i]:
            continue
        keep.append(i)
        rest = np.arange(i + 1, m)[alive[i + 1:]]
        if rest.size == 0:
            continue
        iw = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        ih = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
        iou = inter / (areas[i] + areas[rest] - inter)
        alive[rest[iou >= thr]] = False
    return np.asarray(keep, dtype=np.int64)


def nms_sorted(xyxy, thr, use_numba=None):
    """Indices kept by greedy NMS; ``xyxy`` must already be in priority order."""
    if use_numba is None:
        use_numba = USE_NUMBA
    xyxy = np.ascontiguousarray(xyxy, dtype=np.float64)
    if xyxy.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    args = (xyxy[:, 0].copy(), xyxy[:, 1].copy(), xyxy[:, 2].copy(), xyxy[:, 3].copy(), float(thr))
    if use_numba:
        return _nms_sorted_nb(*args)
    return _nms_sorted_np(*args)

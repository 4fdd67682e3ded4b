"""Independent reference implementations used by the tests.

Everything here is written with explicit Python loops and ``math`` so it
shares no code path with the package.
"""
import math


def naive_pearson(a, b):
    xs = [float(v) for row in a for v in row]
    ys = [float(v) for row in b for v in row]
    n = len(xs)
    mx = math.fsum(xs) / n
    my = math.fsum(ys) / n
    sxy = math.fsum((x - mx) * (y - my) for x, y in zip(xs, ys))
    sxx = math.fsum((x - mx) ** 2 for x in xs)
    syy = math.fsum((y - my) ** 2 for y in ys)
    return sxy / math.sqrt(sxx * syy)


def naive_mse(a, b):
    total = 0.0
    count = 0
    for i in range(len(a)):
        for j in range(len(a[0])):
            d = float(a[i][j]) - float(b[i][j])
            total = math.fsum((total, d * d))
            count += 1
    return total / count


def naive_psnr(a, b, max_val):
    e = naive_mse(a, b)
    if e == 0:
        return math.inf
    return 10 * math.log10(max_val ** 2 / e)


def naive_ssim(a, b, max_val):
    xs = [float(v) for row in a for v in row]
    ys = [float(v) for row in b for v in row]
    n = len(xs)
    mx = math.fsum(xs) / n
    my = math.fsum(ys) / n
    vx = math.fsum((x - mx) ** 2 for x in xs) / n
    vy = math.fsum((y - my) ** 2 for y in ys) / n
    cxy = math.fsum((x - mx) * (y - my) for x, y in zip(xs, ys)) / n
    c1 = (0.01 * max_val) ** 2
    c2 = (0.03 * max_val) ** 2
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))


def _interp_quantile(values, q):
    v = sorted(values)
    h = q * (len(v) - 1)
    lo = int(math.floor(h))
    hi = int(math.ceil(h))
    return v[lo] + (h - lo) * (v[hi] - v[lo])


def _cv(values):
    n = len(values)
    mu = math.fsum(values) / n
    if mu == 0:
        return None
    var = math.fsum((x - mu) ** 2 for x in values) / n
    return math.sqrt(var) / mu


def brute_force_calibration_fields(stack, nodata=-1.0, spatial_q=0.25, temporal_q=0.25):
    """CF mask as nested lists, from the definitions with explicit loops.

    ``stack`` is a list of 2-D lists (one per product).  Thresholds are
    compared inclusively (pixels at the quantile are kept).
    """
    k = len(stack)
    rows, cols = len(stack[0]), len(stack[0][0])

    def is_valid(v):
        return v != nodata

    svc = []
    for img in stack:
        out = [[None] * cols for _ in range(rows)]
        for i in range(1, rows - 1):
            for j in range(1, cols - 1):
                window = [img[i + di][j + dj] for di in (-1, 0, 1) for dj in (-1, 0, 1)]
                if all(is_valid(v) for v in window):
                    out[i][j] = _cv([float(v) for v in window])
        svc.append(out)
    pooled = [v for img in svc for row in img for v in row if v is not None]

    tvc = [[None] * cols for _ in range(rows)]
    for i in range(rows):
        for j in range(cols):
            series = [img[i][j] for img in stack]
            if all(is_valid(v) for v in series):
                tvc[i][j] = _cv([float(v) for v in series])
    tpooled = [v for row in tvc for v in row if v is not None]

    s_thr = _interp_quantile(pooled, spatial_q) if pooled else None
    t_thr = _interp_quantile(tpooled, temporal_q) if tpooled else None

    cf = [[0] * cols for _ in range(rows)]
    for i in range(rows):
        for j in range(cols):
            tsm = s_thr is not None and all(
                svc[p][i][j] is not None and svc[p][i][j] <= s_thr for p in range(k))
            tm = t_thr is not None and tvc[i][j] is not None and tvc[i][j] <= t_thr
            tusm = all(stack[p][i][j] != 63 for p in range(k))
            cf[i][j] = int(tsm and tm and tusm)
    return cf


def naive_conv2d(x, w, b, pad):
    """x: [n][cin][h][w], w: [cout][cin][k][k]; stride 1."""
    n, cin, h, wd = len(x), len(x[0]), len(x[0][0]), len(x[0][0][0])
    cout, k = len(w), len(w[0][0])
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = [[[[0.0] * wo for _ in range(ho)] for _ in range(cout)] for _ in range(n)]
    for a in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o] if b is not None else 0.0
                    for c in range(cin):
                        for di in range(k):
                            for dj in range(k):
                                ii, jj = i + di - pad, j + dj - pad
                                if 0 <= ii < h and 0 <= jj < wd:
                                    acc += x[a][c][ii][jj] * w[o][c][di][dj]
                    out[a][o][i][j] = acc
    return out

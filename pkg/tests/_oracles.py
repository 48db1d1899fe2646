"""Independent reference implementations used as test oracles.

Nothing here imports the code under test except to build inputs.
"""

import numpy as np


def central_difference(f, x: np.ndarray, h: float = 1e-4, curvature: bool = False):
    """Gradient of scalar ``f`` at ``x`` by central differences (float64).

    With ``curvature`` also returns max |f(x+h) - 2 f(x) + f(x-h)| over the
    coordinates. It is O(h^2) where ``f`` is smooth on the stencil and O(h)
    when a kink (ReLU, max, sort) lies inside it, where the central quotient
    no longer estimates the derivative.
    """
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    f0 = f(x) if curvature else 0.0
    second = 0.0
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
        second = max(second, abs(fp - 2 * f0 + fm))
    return (g, second) if curvature else g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(np.ravel(a) - np.ravel(b))
    den = max(np.linalg.norm(np.ravel(a)), np.linalg.norm(np.ravel(b)), 1e-12)
    return float(num / den)


def crossmax_steps(Z, k_sel):
    """CrossMax on a single |I| x C matrix with plain Python loops."""
    rows = [list(map(float, r)) for r in np.asarray(Z, dtype=np.float64)]
    n, c = len(rows), len(rows[0])
    # step 1: each row minus its own max
    for r in range(n):
        m = rows[r][0]
        for v in rows[r][1:]:
            if v > m:
                m = v
        rows[r] = [np.float64(v) - np.float64(m) for v in rows[r]]
    # step 2: each column minus its own max
    for j in range(c):
        m = rows[0][j]
        for r in range(1, n):
            if rows[r][j] > m:
                m = rows[r][j]
        for r in range(n):
            rows[r][j] = np.float64(rows[r][j]) - np.float64(m)
    # step 3/4: k_sel-th largest per column
    return np.array([sorted((rows[r][j] for r in range(n)), reverse=True)[k_sel] for j in range(c)])


def brute_mean(Z):
    Z = np.asarray(Z, dtype=np.float64)
    n, c = Z.shape
    out = []
    for j in range(c):
        s = 0.0
        for r in range(n):
            s += Z[r, j]
        out.append(s / n)
    return np.array(out)


def bilinear_resize_loops(img: np.ndarray, out_size: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a (H, W) array, scalar loops."""
    h, w = img.shape
    out = np.zeros((out_size, out_size))
    for i in range(out_size):
        for j in range(out_size):
            y = 0.0 if out_size == 1 else i * (h - 1) / (out_size - 1)
            x = 0.0 if out_size == 1 else j * (w - 1) / (out_size - 1)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = y - y0, x - x0
            out[i, j] = (
                img[y0, x0] * (1 - fy) * (1 - fx)
                + img[y0, x1] * (1 - fy) * fx
                + img[y1, x0] * fy * (1 - fx)
                + img[y1, x1] * fy * fx
            )
    return out

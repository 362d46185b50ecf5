"""Straight-line numpy evaluation of the training losses on hashed inputs.

Inputs come from `unit(stream, k)`, a splitmix64 hash that the Rust tests
reproduce bit for bit. Prints the values frozen into crates/core/tests.
"""
import numpy as np
from scipy.ndimage import correlate1d

MASK = (1 << 64) - 1
EPS = 1e-4


def mix(z):
    z = (z + 0x9E3779B97F4A7C15) & MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


def field(stream, h, w, lo, hi):
    u = np.array([(mix((stream << 32) | k) >> 40) / 16777216.0 for k in range(h * w * 3)])
    return np.float32(lo + (hi - lo) * u).astype(np.float64).reshape(h, w, 3)


def factor(img):
    return img / (img.sum(axis=2, keepdims=True) + EPS)


def smooth(m):
    dx = np.zeros_like(m)
    dy = np.zeros_like(m)
    dx[:, :-1] = m[:, 1:] - m[:, :-1]
    dy[:-1] = m[1:] - m[:-1]
    return ((dx ** 2).sum() + (dy ** 2).sum()) / (m.shape[0] * m.shape[1])


def stage1(i_o, i_e, alphas, betas, y=0.8):
    n = i_o.shape[0] * i_o.shape[1]
    e_o, e_e = factor(i_o), factor(i_e)
    lcol = ((e_o - e_e) ** 2).sum() / n
    a = i_e.sum(axis=(0, 1)) / (i_e.sum() + EPS)
    gcol = ((a - 1 / 3) ** 2).sum()
    target = np.maximum(0.0, 3 * y * (1 - np.abs(e_o - 1 / 3).sum(axis=2)))
    lum = ((target - i_e.sum(axis=2)) ** 2).mean()
    sa = sum(smooth(m) for m in alphas)
    sb = sum(smooth(m) for m in betas)
    total = 1000 * lcol + 1500 * gcol + 5 * lum + 1000 * sa + 5000 * sb
    return lcol, gcol, lum, sa, sb, total


def gauss():
    d = np.arange(11) - 5.0
    g = np.exp(-d * d / (2 * 1.5 ** 2))
    return g / g.sum()


def blur(p):
    g = gauss()
    def sep(a):
        return correlate1d(correlate1d(a, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return sep(p) / sep(np.ones_like(p))


def ssim(x, y):
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for c in range(3):
        a, b = x[:, :, c], y[:, :, c]
        mx, my = blur(a), blur(b)
        vx = blur(a * a) - mx * mx
        vy = blur(b * b) - my * my
        cov = blur(a * b) - mx * my
        m = (2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        vals.append(m.mean())
    return float(np.mean(vals))


def grads(img):
    dx = np.zeros_like(img)
    dy = np.zeros_like(img)
    dx[:, :-1] = img[:, 1:] - img[:, :-1]
    dy[:-1] = img[1:] - img[:-1]
    return dx, dy


def stage2(i_e, i_d):
    s = ssim(i_e, i_d)
    ex, ey = grads(i_e)
    dx, dy = grads(i_d)
    count = 2 * i_e.size
    match = (((ex - dx) ** 2).sum() + ((ey - dy) ** 2).sum()) / count
    mag = ((dx ** 2).sum() + (dy ** 2).sum()) / count
    return s, match, mag, -10 * s + 40 * match + mag


if __name__ == "__main__":
    h = w = 64
    i_o = field(1, h, w, 0.02, 0.5)
    i_e = field(2, h, w, 0.05, 0.95)
    alphas = [field(10 + i, h, w, -1.0, 1.0) for i in range(3)]
    betas = [field(20 + i, h, w, 0.5, 1.0) for i in range(3)]
    print("stage1", ["%.17g" % v for v in stage1(i_o, i_e, alphas, betas)])
    i_e2 = field(3, h, w, 0.0, 1.0)
    i_d2 = field(4, h, w, 0.0, 1.0)
    print("stage2", ["%.17g" % v for v in stage2(i_e2, i_d2)])
    x = field(5, 32, 48, 0.0, 1.0)
    noise = field(6, 32, 48, -0.1, 0.1)
    y = np.float32(np.clip(x + noise, 0.0, 1.0)).astype(np.float64)
    print("ssim", "%.17g" % ssim(x, y))

#!/usr/bin/env python3
"""Reference MSSIM / VIFP on a fixed 32x32 fixture, built on scipy.

MSSIM: 8x8 window, stride 1, Gaussian weights sigma=1.5 (normalised),
C1=(0.01)^2, C2=(0.03)^2, L=1, mean over all valid windows.

VIFP: pixel-domain VIF, 4 scales, window N = 2^(5-scale)+1 with sigma N/5,
sigma_nsq = 2 on images mapped to [0, 255]. Filtering keeps the image size
with symmetric boundary extension so small images still have 4 scales.

Writes ../data/metric_fixture.txt: line 1 = "rows cols", then the reference
image (rows lines), then the distorted image (rows lines), then the
expected values "mssim <v>" / "vifp <v>" / "vifp_gray <v>".
"""
import numpy as np
from scipy import ndimage

MASK = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed):
        self.s = seed & MASK

    def next_u64(self):
        self.s = (self.s + 0x9E3779B97F4A7C15) & MASK
        z = self.s
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        return z ^ (z >> 31)

    def uniform(self):
        return (self.next_u64() >> 11) / float(1 << 53)


def gaussian_window(n, sigma):
    c = (n - 1) / 2.0
    ax = np.arange(n) - c
    xx, yy = np.meshgrid(ax, ax, indexing="ij")
    w = np.exp(-(xx**2 + yy**2) / (2 * sigma * sigma))
    return w / w.sum()


def mssim(a, b):
    w = gaussian_window(8, 1.5)
    c1, c2 = 0.01**2, 0.03**2
    h, wd = a.shape
    vals = []
    for i in range(h - 7):
        for j in range(wd - 7):
            x = a[i:i + 8, j:j + 8]
            y = b[i:i + 8, j:j + 8]
            mx, my = (w * x).sum(), (w * y).sum()
            sxx = (w * x * x).sum() - mx * mx
            syy = (w * y * y).sum() - my * my
            sxy = (w * x * y).sum() - mx * my
            vals.append(((2 * mx * my + c1) * (2 * sxy + c2)) /
                        ((mx * mx + my * my + c1) * (sxx + syy + c2)))
    return float(np.mean(vals))


def filt(img, win):
    return ndimage.correlate(img, win, mode="reflect")


def vifp(ref, dist):
    ref = ref * 255.0
    dist = dist * 255.0
    sigma_nsq = 2.0
    eps = 1e-10
    num = den = 0.0
    for scale in range(1, 5):
        n = 2 ** (4 - scale + 1) + 1
        win = gaussian_window(n, n / 5.0)
        if scale > 1:
            ref = filt(ref, win)[::2, ::2]
            dist = filt(dist, win)[::2, ::2]
        mu1, mu2 = filt(ref, win), filt(dist, win)
        s1 = filt(ref * ref, win) - mu1 * mu1
        s2 = filt(dist * dist, win) - mu2 * mu2
        s12 = filt(ref * dist, win) - mu1 * mu2
        s1[s1 < 0] = 0
        s2[s2 < 0] = 0
        g = s12 / (s1 + eps)
        sv = s2 - g * s12
        g[s1 < eps] = 0
        sv[s1 < eps] = s2[s1 < eps]
        s1[s1 < eps] = 0
        g[s2 < eps] = 0
        sv[s2 < eps] = 0
        sv[g < 0] = s2[g < 0]
        g[g < 0] = 0
        sv[sv <= eps] = eps
        num += np.log10(1 + g * g * s1 / (sv + sigma_nsq)).sum()
        den += np.log10(1 + s1 / sigma_nsq).sum()
    return float(num / den)


def main():
    rows = cols = 32
    ref = np.zeros((rows, cols))
    for i in range(rows):
        for j in range(cols):
            ref[i, j] = 0.5 + 0.3 * np.sin(0.7 * i) * np.cos(0.45 * j) + 0.15 * ((i // 8 + j // 8) % 2)
    rng = SplitMix64(2024)
    half = 0.1 * np.sqrt(3.0)
    dist = np.zeros_like(ref)
    for i in range(rows):
        for j in range(cols):
            dist[i, j] = ref[i, j] + (2.0 * rng.uniform() - 1.0) * half
    gray = np.full_like(ref, 0.5)
    m = mssim(ref, dist)
    v = vifp(ref, dist)
    vg = vifp(ref, gray)
    vs = vifp(ref, ref)
    ms8 = mssim(ref[:8, :8], dist[:8, :8])
    v8 = vifp(ref[:8, :8], dist[:8, :8])
    with open("../data/metric_fixture.txt", "w") as f:
        f.write(f"{rows} {cols}\n")
        for r in ref:
            f.write(" ".join(repr(float(x)) for x in r) + "\n")
        for r in dist:
            f.write(" ".join(repr(float(x)) for x in r) + "\n")
        f.write(f"mssim {m!r}\nvifp {v!r}\nvifp_gray {vg!r}\nmssim_8x8 {ms8!r}\nvifp_8x8 {v8!r}\n")
    print("mssim", m, "vifp", v, "vifp_gray", vg, "vifp_self", vs, "mssim8", ms8, "vifp8", v8)


if __name__ == "__main__":
    main()

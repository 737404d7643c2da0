"""Writes ssim_fixture.json: a checkerboard, its blurred copy, and their SSIM
evaluated window by window from the definition (Gaussian 11x11, sigma 1.5)."""
import json

import numpy as np

W, H, CELL = 32, 24, 4

ys, xs = np.mgrid[0:H, 0:W]
a = (((xs // CELL) + (ys // CELL)) % 2).astype(np.float64) * 0.8 + 0.1

# 5x5 box blur with edge replication.
pad = np.pad(a, 2, mode="edge")
b = np.zeros_like(a)
for dy in range(5):
    for dx in range(5):
        b += pad[dy:dy + H, dx:dx + W]
b /= 25.0

g = np.exp(-((np.arange(11) - 5) ** 2) / (2 * 1.5 ** 2))
g /= g.sum()
win = np.outer(g, g)

c1, c2 = 0.01 ** 2, 0.03 ** 2
vals = []
for y in range(H - 10):
    for x in range(W - 10):
        pa = a[y:y + 11, x:x + 11]
        pb = b[y:y + 11, x:x + 11]
        ma = (win * pa).sum()
        mb = (win * pb).sum()
        va = (win * (pa - ma) ** 2).sum()
        vb = (win * (pb - mb) ** 2).sum()
        cov = (win * (pa - ma) * (pb - mb)).sum()
        vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))

out = {
    "width": W,
    "height": H,
    "a": [float(v) for v in a.ravel()],
    "b": [float(v) for v in b.ravel()],
    "ssim": float(np.mean(vals)),
}
with open("ssim_fixture.json", "w") as f:
    json.dump(out, f)
print(out["ssim"])

#!/usr/bin/env python3
"""Regenerates the golden confounder images with numpy.

Writes raw HWC uint8 buffers (16x16x3): base.bin plus
<kind>_u<000|050|100>.bin for each transform into tests/golden/, or
into the directory given as the first argument.
"""
import pathlib
import sys

import numpy as np

H, W, C = 16, 16, 3
TAG = [".####.", "#....#", "#.##.#", "#.#..#", "#.##.#", ".####."]


def base_image():
    y, x = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    img = np.zeros((H, W, C), dtype=np.uint8)
    img[..., 0] = (x * 16 + 3) % 256
    img[..., 1] = (y * 16 + 7) % 256
    img[..., 2] = ((x + y) * 9 + 40) % 256
    img[0, 0] = (0, 0, 0)
    img[1, 1] = (255, 255, 255)
    img[2, 2] = (250, 5, 128)
    return img


def quantize(v):
    return np.floor(np.clip(v, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def state(kind, u):
    if kind == "corner_tag":
        conf = u < 0.5
        strength = u
    else:
        conf = u > 0.5
        strength = abs(2.0 * u - 1.0)
    return strength, 1.0 if conf else -1.0


def transform(x, kind, u):
    s, sign = state(kind, u)
    out = x.copy()
    if kind == "intensity_shift":
        out = np.clip(out + sign * (24.0 * s) / 255.0, 0.0, 1.0)
    elif kind == "color_shift":
        out[..., 0] = np.clip(out[..., 0] + sign * (24.0 * s) / 255.0, 0.0, 1.0)
        dgb = -sign * (12.0 * s) / 255.0
        out[..., 1] = np.clip(out[..., 1] + dgb, 0.0, 1.0)
        out[..., 2] = np.clip(out[..., 2] + dgb, 0.0, 1.0)
    else:
        y0, x0 = H - 1 - 6, W - 1 - 6
        for r, row in enumerate(TAG):
            for c, ch in enumerate(row):
                if ch == "#":
                    v = out[y0 + r, x0 + c, :]
                    out[y0 + r, x0 + c, :] = (1.0 - s) * v + s * 1.0
    return out


def main():
    default = pathlib.Path(__file__).resolve().parent.parent / "tests" / "golden"
    out = pathlib.Path(sys.argv[1]) if len(sys.argv) > 1 else default
    base = base_image()
    base.tofile(out / "base.bin")
    x = base.astype(np.float64) / 255.0
    for kind in ("corner_tag", "intensity_shift", "color_shift"):
        for u, tag in ((0.0, "000"), (0.5, "050"), (1.0, "100")):
            quantize(transform(x, kind, u)).tofile(out / f"{kind}_u{tag}.bin")


if __name__ == "__main__":
    main()

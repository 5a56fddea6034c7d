"""Plain-numpy image routines: bilinear resize, homography warps,
gaussian blur, and a built-in 5x7 bitmap font.

All functions work on float arrays in [0, 1]; images are (H, W, 3),
masks (H, W). Nothing here touches the autodiff engine.
"""

from __future__ import annotations

import numpy as np

# 5x7 bitmap font, '#' = foreground. Hermetic: no external font files.
_FONT_ROWS = {
    "A": ".###. #...# #...# ##### #...# #...# #...#",
    "B": "####. #...# #...# ####. #...# #...# ####.",
    "C": ".###. #...# #.... #.... #.... #...# .###.",
    "D": "####. #...# #...# #...# #...# #...# ####.",
    "E": "##### #.... #.... ####. #.... #.... #####",
    "F": "##### #.... #.... ####. #.... #.... #....",
    "G": ".###. #...# #.... #.### #...# #...# .###.",
    "H": "#...# #...# #...# ##### #...# #...# #...#",
    "I": "##### ..#.. ..#.. ..#.. ..#.. ..#.. #####",
    "J": "..### ...#. ...#. ...#. #..#. #..#. .##..",
    "K": "#...# #..#. #.#.. ##... #.#.. #..#. #...#",
    "L": "#.... #.... #.... #.... #.... #.... #####",
    "M": "#...# ##.## #.#.# #.#.# #...# #...# #...#",
    "N": "#...# ##..# #.#.# #..## #...# #...# #...#",
    "O": ".###. #...# #...# #...# #...# #...# .###.",
    "P": "####. #...# #...# ####. #.... #.... #....",
    "Q": ".###. #...# #...# #...# #.#.# #..#. .##.#",
    "R": "####. #...# #...# ####. #.#.. #..#. #...#",
    "S": ".#### #.... #.... .###. ....# ....# ####.",
    "T": "##### ..#.. ..#.. ..#.. ..#.. ..#.. ..#..",
    "U": "#...# #...# #...# #...# #...# #...# .###.",
    "V": "#...# #...# #...# #...# #...# .#.#. ..#..",
    "W": "#...# #...# #...# #.#.# #.#.# ##.## #...#",
    "X": "#...# #...# .#.#. ..#.. .#.#. #...# #...#",
    "Y": "#...# #...# .#.#. ..#.. ..#.. ..#.. ..#..",
    "Z": "##### ....# ...#. ..#.. .#... #.... #####",
    "0": ".###. #...# #..## #.#.# ##..# #...# .###.",
    "1": "..#.. .##.. ..#.. ..#.. ..#.. ..#.. #####",
    "2": ".###. #...# ....# ..##. .#... #.... #####",
    "3": ".###. #...# ....# ..##. ....# #...# .###.",
    "4": "...#. ..##. .#.#. #..#. ##### ...#. ...#.",
    "5": "##### #.... ####. ....# ....# #...# .###.",
    "6": ".###. #.... #.... ####. #...# #...# .###.",
    "7": "##### ....# ...#. ..#.. .#... .#... .#...",
    "8": ".###. #...# #...# .###. #...# #...# .###.",
    "9": ".###. #...# #...# .#### ....# ....# .###.",
}

FONT_ALPHABET = "".join(sorted(_FONT_ROWS))
GLYPH_H, GLYPH_W = 7, 5


def _char_bitmap(ch: str) -> np.ndarray:
    rows = _FONT_ROWS[ch].split()
    return np.array([[1.0 if c == "#" else 0.0 for c in row] for row in rows],
                    dtype=np.float32)


def render_text(text: str, scale: int = 1) -> np.ndarray:
    """Rasterize a string into a binary mask, one blank column between chars."""
    cols = []
    for i, ch in enumerate(text):
        if i:
            cols.append(np.zeros((GLYPH_H, 1), dtype=np.float32))
        cols.append(_char_bitmap(ch))
    mask = np.concatenate(cols, axis=1)
    if scale > 1:
        mask = np.kron(mask, np.ones((scale, scale), dtype=np.float32))
    return mask


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample, align_corners=False convention, edge clamp."""
    h, w = img.shape[:2]
    if h == out_h and w == out_w:
        return img.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * w / out_w - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(img.dtype if img.dtype.kind == "f" else np.float32)
    fx = (xs - x0).astype(fy.dtype)
    if img.ndim == 3:
        fy = fy[:, None, None]
        fx = fx[None, :, None]
        a = img[y0][:, x0]
        b = img[y0][:, x1]
        c = img[y1][:, x0]
        d = img[y1][:, x1]
    else:
        fy = fy[:, None]
        fx = fx[None, :]
        a = img[np.ix_(y0, x0)]
        b = img[np.ix_(y0, x1)]
        c = img[np.ix_(y1, x0)]
        d = img[np.ix_(y1, x1)]
    top = a * (1 - fx) + b * fx
    bot = c * (1 - fx) + d * fx
    return (top * (1 - fy) + bot * fy).astype(img.dtype, copy=False)


def _sample_bilinear(img, ys, xs, fill):
    """Sample img at float coords; outside the frame returns fill."""
    h, w = img.shape[:2]
    inside = (ys >= 0) & (ys <= h - 1) & (xs >= 0) & (xs <= w - 1)
    ys_c = np.clip(ys, 0, h - 1)
    xs_c = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys_c).astype(np.int64)
    x0 = np.floor(xs_c).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys_c - y0)
    fx = (xs_c - x0)
    if img.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    out = (img[y0, x0] * (1 - fy) * (1 - fx) + img[y0, x1] * (1 - fy) * fx
           + img[y1, x0] * fy * (1 - fx) + img[y1, x1] * fy * fx)
    if img.ndim == 3:
        out = np.where(inside[..., None], out, np.asarray(fill, dtype=out.dtype))
    else:
        out = np.where(inside, out, fill)
    return out.astype(img.dtype, copy=False)


def warp_homography(img: np.ndarray, mat: np.ndarray, out_h: int, out_w: int,
                    fill=0.0) -> np.ndarray:
    """Inverse-map warp: `mat` sends output (x, y, 1) to source coords."""
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    ones = np.ones_like(xs)
    pts = np.stack([xs, ys, ones], axis=-1) @ mat.T
    sx = pts[..., 0] / pts[..., 2]
    sy = pts[..., 1] / pts[..., 2]
    return _sample_bilinear(img, sy, sx, fill)


def homography_from_points(src, dst) -> np.ndarray:
    """3x3 homography mapping the four src (x, y) points onto dst."""
    a = []
    b = []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.extend([u, v])
    h = np.linalg.solve(np.asarray(a, dtype=np.float64),
                        np.asarray(b, dtype=np.float64))
    return np.append(h, 1.0).reshape(3, 3)


def affine_matrix(angle_deg=0.0, shear_deg=0.0, scale=1.0, tx=0.0, ty=0.0,
                  center=(0.0, 0.0)) -> np.ndarray:
    """Forward affine around `center`, returned as a 3x3 homography."""
    cx, cy = center
    t = np.deg2rad(angle_deg)
    sh = np.tan(np.deg2rad(shear_deg))
    rot = np.array([[np.cos(t) * scale, -np.sin(t) * scale, 0],
                    [np.sin(t) * scale, np.cos(t) * scale, 0],
                    [0, 0, 1.0]])
    shear = np.array([[1.0, sh, 0], [0, 1.0, 0], [0, 0, 1.0]])
    to_o = np.array([[1.0, 0, -cx], [0, 1.0, -cy], [0, 0, 1.0]])
    back = np.array([[1.0, 0, cx + tx], [0, 1.0, cy + ty], [0, 0, 1.0]])
    return back @ rot @ shear @ to_o


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable gaussian blur via shifted sums; edge-replicated."""
    if sigma <= 0:
        return img.copy()
    r = max(1, int(np.ceil(3 * sigma)))
    xs = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    k /= k.sum()
    pad_spec = [(r, r)] + [(0, 0)] * (img.ndim - 1)
    out = np.pad(img.astype(np.float64), pad_spec, mode="edge")
    acc = np.zeros_like(img, dtype=np.float64)
    for i, kv in enumerate(k):
        acc += kv * out[i:i + img.shape[0]]
    out = np.pad(acc, [(0, 0), (r, r)] + [(0, 0)] * (img.ndim - 2), mode="edge")
    acc = np.zeros_like(img, dtype=np.float64)
    for i, kv in enumerate(k):
        acc += kv * out[:, i:i + img.shape[1]]
    return acc.astype(img.dtype, copy=False)

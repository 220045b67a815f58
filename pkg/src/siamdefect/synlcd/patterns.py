"""Clean display test patterns: ten procedural built-ins and a directory loader."""
from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def _grid(h, w):
    y = np.linspace(0.0, 1.0, h)[:, None]
    x = np.linspace(0.0, 1.0, w)[None, :]
    return np.broadcast_to(y, (h, w)), np.broadcast_to(x, (h, w))


def color_bars(h, w):
    colors = np.array([[255, 255, 255], [255, 255, 0], [0, 255, 255], [0, 255, 0],
                       [255, 0, 255], [255, 0, 0], [0, 0, 255], [0, 0, 0]], dtype=np.uint8)
    idx = np.minimum((np.arange(w) * len(colors)) // w, len(colors) - 1)
    return np.broadcast_to(colors[idx][None], (h, w, 3)).copy()


def gray_ramp(h, w):
    _, x = _grid(h, w)
    v = np.round(x * 255).astype(np.uint8)
    return np.repeat(v[..., None], 3, axis=2)


def hue_sweep(h, w):
    y, x = _grid(h, w)
    hsv = np.stack([x * 179, np.full_like(x, 255), 255 - y * 160], axis=-1).astype(np.uint8)
    return cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)


def checkerboard(h, w, cells=8):
    yy, xx = np.mgrid[0:h, 0:w]
    on = ((yy * cells // h) + (xx * cells // w)) % 2 == 0
    return np.repeat(np.where(on, 230, 25).astype(np.uint8)[..., None], 3, axis=2)


def text_panel(h, w):
    img = np.full((h, w, 3), 240, dtype=np.uint8)
    scale = max(h, w) / 512
    step = max(8, int(28 * scale))
    words = ("DISPLAY TEST 0123", "abcdefghijklm", "NOPQRSTUVWXYZ", "456789 +-=*/")
    for i, y in enumerate(range(step, h, step)):
        cv2.putText(img, words[i % len(words)], (max(2, w // 32), y), cv2.FONT_HERSHEY_SIMPLEX,
                    0.7 * scale, (20, 20, 60), max(1, int(round(2 * scale))), cv2.LINE_AA)
    return img


def rings(h, w):
    y, x = _grid(h, w)
    r = np.hypot(y - 0.5, x - 0.5)
    v = 127.5 + 127.5 * np.cos(2 * np.pi * 6 * r)
    out = np.stack([v, 0.6 * v + 60, 255 - v], axis=-1)
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def color_blocks(h, w, cells=4):
    palette = np.random.default_rng(12345).integers(30, 226, size=(cells * cells, 3))
    yy, xx = np.mgrid[0:h, 0:w]
    idx = (yy * cells // h) * cells + (xx * cells // w)
    return palette[idx].astype(np.uint8)


def gray_steps(h, w, levels=11):
    values = np.round(np.linspace(0, 255, levels)).astype(np.uint8)
    idx = np.minimum((np.arange(h) * levels) // h, levels - 1)
    return np.broadcast_to(values[idx][:, None, None], (h, w, 3)).copy()


def soft_shapes(h, w):
    y, x = _grid(h, w)
    img = np.zeros((h, w, 3))
    blobs = ((0.3, 0.3, 0.12, (220, 80, 60)), (0.65, 0.4, 0.18, (60, 160, 220)),
             (0.5, 0.75, 0.15, (90, 210, 90)))
    for cy, cx, s, color in blobs:
        g = np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * s * s))
        img += g[..., None] * np.array(color)
    return np.clip(np.round(img + 20), 0, 255).astype(np.uint8)


def window_ui(h, w):
    img = gray_ramp(h, w) // 2 + 60
    bar = max(4, h // 12)
    img[:bar] = (40, 70, 150)
    cv2.rectangle(img, (w // 8, h // 4), (w - w // 8, h - h // 8), (245, 245, 245), -1)
    cv2.rectangle(img, (w // 8, h // 4), (w - w // 8, h // 4 + bar), (200, 60, 60), -1)
    for i in range(3):
        y0 = h // 4 + bar * (2 + i)
        cv2.line(img, (w // 8 + bar, y0), (w - w // 4, y0), (30, 30, 30), max(1, h // 128))
    return img


BUILTIN_PATTERNS = {
    "colorbars": color_bars,
    "grayramp": gray_ramp,
    "huesweep": hue_sweep,
    "checker": checkerboard,
    "text": text_panel,
    "rings": rings,
    "blocks": color_blocks,
    "graysteps": gray_steps,
    "softshapes": soft_shapes,
    "window": window_ui,
}


def builtin_patterns(size=(512, 512)) -> dict[str, np.ndarray]:
    """The ten procedural patterns as RGB uint8 arrays of shape (H, W, 3)."""
    h, w = size
    return {name: np.ascontiguousarray(fn(h, w), dtype=np.uint8) for name, fn in BUILTIN_PATTERNS.items()}


def read_rgb(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise FileNotFoundError(f"cannot read image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def write_rgb(path, image: np.ndarray) -> None:
    if not cv2.imwrite(str(path), cv2.cvtColor(np.asarray(image, dtype=np.uint8), cv2.COLOR_RGB2BGR)):
        raise OSError(f"cannot write image {path}")


def load_patterns(directory, size=None) -> dict[str, np.ndarray]:
    """Read every image in ``directory`` (sorted by name), keyed by file stem."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"pattern directory {directory} does not exist")
    out = {}
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() in IMAGE_SUFFIXES:
            img = read_rgb(path)
            if size is not None:
                img = cv2.resize(img, (size[1], size[0]), interpolation=cv2.INTER_AREA)
            out[path.stem] = img
    if not out:
        raise ValueError(f"no pattern images found in {directory}")
    return out

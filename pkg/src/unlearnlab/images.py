"""Artifact I/O: binary PPM, PNG/GIF via Pillow, contact sheets, SVG plots."""

from __future__ import annotations

import pathlib

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(3,H,W) floats in [0,1] -> (H,W,3) uint8, clipping out-of-range values."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float64).transpose(2, 0, 1) / 255.0


def write_ppm(path, img: np.ndarray) -> None:
    """Binary P6, 8-bit, no comments: header then raw RGB rows."""
    arr = to_uint8(img)
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(arr.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise ValueError(f"{path}: not a binary PPM (P6) file")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(f.readline())
        if maxval != 255:
            raise ValueError(f"{path}: only 8-bit PPM supported")
        raw = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    return from_uint8(raw.reshape(h, w, 3))


def write_png(path, img: np.ndarray, scale: int = 1) -> None:
    pic = Image.fromarray(to_uint8(img), "RGB")
    if scale > 1:
        pic = pic.resize((pic.width * scale, pic.height * scale), Image.NEAREST)
    pic.save(path)


def write_gif(path, video: np.ndarray, scale: int = 4, ms_per_frame: int = 180) -> None:
    frames = []
    for fr in video:
        pic = Image.fromarray(to_uint8(fr), "RGB")
        if scale > 1:
            pic = pic.resize((pic.width * scale, pic.height * scale), Image.NEAREST)
        frames.append(pic)
    frames[0].save(path, save_all=True, append_images=frames[1:],
                   duration=ms_per_frame, loop=0)


def write_frame_dir(dirpath, video: np.ndarray) -> list[pathlib.Path]:
    """Numbered PPM frames (frame_000.ppm, ...) for a (F,3,H,W) clip."""
    d = pathlib.Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, fr in enumerate(video):
        p = d / f"frame_{i:03d}.ppm"
        write_ppm(p, fr)
        paths.append(p)
    return paths


def contact_sheet(images, cols: int = 4, pad: int = 1) -> np.ndarray:
    """Tile (N,3,H,W) images into one (3,?,?) grid with thin white separators."""
    images = np.asarray(images)
    n, _, h, w = images.shape
    cols = max(1, min(cols, n))
    rows = (n + cols - 1) // cols
    sheet = np.ones((3, rows * (h + pad) + pad, cols * (w + pad) + pad))
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        sheet[:, y:y + h, x:x + w] = np.clip(img, 0.0, 1.0)
    return sheet


def svg_line_plot(path, series: dict, title: str = "", xlabel: str = "",
                  ylabel: str = "", width: int = 520, height: int = 320) -> None:
    """Minimal dependency-free line plot; one polyline per named series."""
    ml, mr, mt, mb = 56, 16, 34, 44
    pw, ph = width - ml - mr, height - mt - mb
    xs_all = [x for xs, _ in series.values() for x in xs]
    ys_all = [y for _, ys in series.values() for y in ys]
    if not xs_all:
        xs_all, ys_all = [0.0, 1.0], [0.0, 1.0]
    x0, x1 = min(xs_all), max(xs_all)
    y0, y1 = min(ys_all), max(ys_all)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    y0, y1 = y0 - 0.05 * (y1 - y0), y1 + 0.05 * (y1 - y0)

    def px(x):
        return ml + pw * (x - x0) / (x1 - x0)

    def py(y):
        return mt + ph * (1.0 - (y - y0) / (y1 - y0))

    palette = ["#1f6fb2", "#c24a35", "#3a8f5d", "#8856b0", "#b08c2a", "#444444"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width/2:.0f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
           f'<line x1="{ml}" y1="{mt+ph}" x2="{ml+pw}" y2="{mt+ph}" stroke="#222"/>',
           f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt+ph}" stroke="#222"/>',
           f'<text x="{ml+pw/2:.0f}" y="{height-8}" text-anchor="middle">{xlabel}</text>',
           f'<text x="14" y="{mt+ph/2:.0f}" text-anchor="middle" '
           f'transform="rotate(-90 14 {mt+ph/2:.0f})">{ylabel}</text>']
    for k in range(5):
        yv = y0 + (y1 - y0) * k / 4
        out.append(f'<line x1="{ml}" y1="{py(yv):.1f}" x2="{ml+pw}" y2="{py(yv):.1f}" '
                   f'stroke="#ddd"/>')
        out.append(f'<text x="{ml-6}" y="{py(yv)+4:.1f}" text-anchor="end">{yv:.3g}</text>')
    for k in range(5):
        xv = x0 + (x1 - x0) * k / 4
        out.append(f'<text x="{px(xv):.1f}" y="{mt+ph+16}" text-anchor="middle">{xv:.3g}</text>')
    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = palette[i % len(palette)]
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, ys))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.6"/>')
        for x, y in zip(xs, ys):
            out.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="2.4" fill="{color}"/>')
        out.append(f'<text x="{ml+pw-4}" y="{mt+14+14*i}" text-anchor="end" '
                   f'fill="{color}">{name}</text>')
    out.append("</svg>")
    pathlib.Path(path).write_text("\n".join(out))

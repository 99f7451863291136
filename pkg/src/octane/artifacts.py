"""Run artifacts: model files, CSV tables, PGM images, and small SVG line charts."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, fields
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .autoencoder import LayerParams, NetworkParams, RegWeights
from .training import TrainConfig, TrainedModel


# --- model file ------------------------------------------------------------

def config_to_json(cfg: TrainConfig) -> str:
    d = asdict(cfg)
    return json.dumps(d, sort_keys=True)


def config_from_json(text: str) -> TrainConfig:
    d = json.loads(text)
    d["reg"] = RegWeights(**d["reg"])
    known = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in d.items() if k in known})


def save_model(path, model: TrainedModel) -> None:
    p = model.params
    np.savez(
        path,
        K_enc=np.stack([l.K for l in p.encoder]),
        b_enc=np.array([l.b for l in p.encoder]),
        K_dec=np.stack([l.K for l in p.decoder]),
        b_dec=np.array([l.b for l in p.decoder]),
        encoder_ranks=np.array(model.encoder_ranks, dtype=np.int64),
        batch_size=np.array(model.batch_size),
        image_shape=np.array(model.image_shape, dtype=np.int64),
        config=np.array(config_to_json(model.config)),
    )


def load_model(path) -> TrainedModel:
    with np.load(path, allow_pickle=False) as z:
        enc = [LayerParams(k, b) for k, b in zip(z["K_enc"], z["b_enc"])]
        dec = [LayerParams(k, b) for k, b in zip(z["K_dec"], z["b_dec"])]
        ranks = [tuple(int(v) for v in r) for r in z["encoder_ranks"]]
        return TrainedModel(NetworkParams(enc, dec), ranks, config_from_json(str(z["config"])),
                            int(z["batch_size"]), tuple(int(v) for v in z["image_shape"]))


# --- tables ----------------------------------------------------------------

def fmt(v) -> str:
    """Stable text for CSV cells: repr-exact floats, ``a:b`` rank pairs, blanks for None."""
    if v is None:
        return ""
    if isinstance(v, (tuple, list)):
        return ":".join(str(int(x)) for x in v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def write_csv(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --- images ----------------------------------------------------------------

def write_pgm(path, img: np.ndarray) -> None:
    """Binary graymap (P5), 8 bits; values are clipped to [0, 1] and scaled."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("expected a 2-D image")
    data = np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary graymap")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
    return data.astype(np.float64) / maxval


# --- charts ----------------------------------------------------------------

_COLORS = ("#d95f02", "#1b9e77", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666")


def line_chart(path, series: dict, title: str = "", xlabel: str = "", ylabel: str = "", dashed=(),
               width: int = 480, height: int = 320) -> None:
    """Write an SVG line chart. ``series`` maps a label to ``(xs, ys)``; NaNs break lines."""
    left, right, top, bottom = 60, 130, 30, 45
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys) if np.isfinite(y)]
    if not pts:
        pts = [(0.0, 0.0), (1.0, 1.0)]
    x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
    y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    pw, ph = width - left - right, height - top - bottom
    sx = lambda x: left + (x - x0) / (x1 - x0) * pw
    sy = lambda y: top + (1 - (y - y0) / (y1 - y0)) * ph
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" '
           f'font-size="11">',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>',
           f'<text x="{left + pw / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<text x="{left + pw / 2}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>',
           f'<text x="14" y="{top + ph / 2}" text-anchor="middle" transform="rotate(-90 14 {top + ph / 2})">'
           f'{escape(ylabel)}</text>']
    for k in range(5):
        xv = x0 + (x1 - x0) * k / 4
        yv = y0 + (y1 - y0) * k / 4
        out.append(f'<text x="{sx(xv):.1f}" y="{top + ph + 15}" text-anchor="middle">{xv:.3g}</text>')
        out.append(f'<text x="{left - 5}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.3g}</text>')
    for i, (label, (xs, ys)) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        dash = ' stroke-dasharray="5,3"' if label in dashed else ""
        run = []
        for x, y in list(zip(xs, ys)) + [(None, float("nan"))]:
            if y is not None and np.isfinite(y):
                run.append(f"{sx(x):.1f},{sy(y):.1f}")
                continue
            if run:
                out.append(f'<polyline points="{" ".join(run)}" fill="none" stroke="{color}" stroke-width="1.5"'
                           f'{dash}/>')
            run = []
        ly = top + 12 + 16 * i
        out.append(f'<line x1="{width - right + 10}" y1="{ly}" x2="{width - right + 30}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"{dash}/>')
        out.append(f'<text x="{width - right + 35}" y="{ly + 4}">{escape(label)}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")

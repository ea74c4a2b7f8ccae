"""Synthetic road-marking glyph corpus: rendering, corruption, splits, manifest I/O."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import correlate1d

SIZE = 32
CLASSES = ("35", "40", "FORWARD", "LEFT", "PED", "RAIL", "RIGHT", "STOP", "XING", "NULL")
CLASS_INDEX = {name: i for i, name in enumerate(CLASSES)}
NULL = CLASS_INDEX["NULL"]

TABLE_I_COUNTS = {"35": 112, "40": 69, "FORWARD": 86, "LEFT": 705, "PED": 54,
                  "RAIL": 90, "RIGHT": 101, "STOP": 49, "XING": 64, "NULL": 2700}
AUGMENTED_COUNTS = {**{c: 300 for c in CLASSES if c != "NULL"}, "NULL": 2000}

MANIFEST_COLUMNS = ("id", "path", "label", "split", "blur_sigma", "noise_sigma",
                    "perspective_strength", "seed")
TRAIN_FRACTION = 0.6


class CorpusError(ValueError):
    pass


class ManifestError(CorpusError):
    """Problem with one manifest row; ``line`` is 1-based and counts the header."""

    def __init__(self, line: int, message: str):
        super().__init__(f"manifest line {line}: {message}")
        self.line = line


# --------------------------------------------------------------------- glyphs

Polyline = list[tuple[float, float]]

# strokes inside a unit cell, x right / y down
_FONT: dict[str, list[Polyline]] = {
    "0": [[(.15, 0), (.85, 0), (1, .15), (1, .85), (.85, 1), (.15, 1), (0, .85), (0, .15), (.15, 0)]],
    "3": [[(0, 0), (1, 0), (1, 1), (0, 1)], [(.3, .5), (1, .5)]],
    "4": [[(.75, 1), (.75, 0), (0, .65), (1, .65)]],
    "5": [[(1, 0), (0, 0), (0, .45), (1, .45), (1, 1), (0, 1)]],
    "S": [[(1, .1), (.8, 0), (.2, 0), (0, .15), (0, .35), (.2, .5), (.8, .5), (1, .65),
           (1, .85), (.8, 1), (.2, 1), (0, .9)]],
    "T": [[(0, 0), (1, 0)], [(.5, 0), (.5, 1)]],
    "O": [[(.2, 0), (.8, 0), (1, .2), (1, .8), (.8, 1), (.2, 1), (0, .8), (0, .2), (.2, 0)]],
    "P": [[(0, 1), (0, 0), (.8, 0), (1, .15), (1, .4), (.8, .55), (0, .55)]],
    "E": [[(1, 0), (0, 0), (0, 1), (1, 1)], [(0, .5), (.7, .5)]],
    "D": [[(0, 0), (0, 1), (.6, 1), (1, .7), (1, .3), (.6, 0), (0, 0)]],
    "X": [[(0, 0), (1, 1)], [(1, 0), (0, 1)]],
    "I": [[(.5, 0), (.5, 1)], [(.2, 0), (.8, 0)], [(.2, 1), (.8, 1)]],
    "N": [[(0, 1), (0, 0), (1, 1), (1, 0)]],
    "G": [[(1, .1), (.8, 0), (.2, 0), (0, .2), (0, .8), (.2, 1), (.8, 1), (1, .8), (1, .55),
           (.55, .55)]],
    "R": [[(0, 1), (0, 0), (.8, 0), (1, .15), (1, .4), (.8, .55), (0, .55)], [(.4, .55), (1, 1)]],
    "A": [[(0, 1), (.5, 0), (1, 1)], [(.25, .6), (.75, .6)]],
    "L": [[(0, 0), (0, 1), (1, 1)]],
}

# (character, x0, y0, x1, y1) placement boxes in the unit glyph square
_PAIR = ((.04, .12, .44, .88), (.56, .12, .96, .88))
_GRID = ((.08, .04, .44, .44), (.56, .04, .92, .44), (.08, .56, .44, .96), (.56, .56, .92, .96))
_LAYOUT = {
    "35": list(zip("35", _PAIR)),
    "40": list(zip("40", _PAIR)),
    "STOP": list(zip("STOP", _GRID)),
    "XING": list(zip("XING", _GRID)),
    "RAIL": list(zip("RAIL", _GRID)),
    "PED": list(zip("PE", _GRID[:2])) + [("D", (.32, .56, .68, .96))],
}

# arrows: (open strokes, filled polygons)
_ARROWS: dict[str, tuple[list[Polyline], list[Polyline]]] = {
    "FORWARD": ([[(.5, .98), (.5, .35)]], [[(.22, .4), (.5, .02), (.78, .4)]]),
    "LEFT": ([[(.66, .98), (.66, .5), (.6, .38), (.48, .32), (.38, .31)]],
             [[(.4, .1), (.04, .31), (.4, .52)]]),
}


def _place(strokes: Iterable[Polyline], box) -> list[Polyline]:
    x0, y0, x1, y1 = box
    return [[(x0 + (x1 - x0) * u, y0 + (y1 - y0) * v) for u, v in pl] for pl in strokes]


def glyph_geometry(label: str) -> tuple[list[Polyline], list[Polyline]]:
    """Strokes and filled polygons of a class in unit-square coordinates."""
    if label in _ARROWS:
        return _ARROWS[label]
    if label == "RIGHT":
        strokes, fills = _ARROWS["LEFT"]
        flip = lambda pls: [[(1 - u, v) for u, v in pl] for pl in pls]  # noqa: E731
        return flip(strokes), flip(fills)
    if label in _LAYOUT:
        out: list[Polyline] = []
        for ch, box in _LAYOUT[label]:
            out += _place(_FONT[ch], box)
        return out, []
    if label == "NULL":
        return [], []
    raise CorpusError(f"unknown class label {label!r}")


@dataclass(frozen=True)
class GlyphSpec:
    """What to draw. Style fields left as None are drawn from ``seed``."""

    class_id: str
    seed: int
    stroke_width: float | None = None
    scale: float | None = None
    rotation_deg: float | None = None

    def __post_init__(self):
        if self.class_id not in CLASS_INDEX:
            raise CorpusError(f"unknown class label {self.class_id!r}")
        if self.rotation_deg is not None and abs(self.rotation_deg) > 10:
            raise CorpusError(f"rotation must be within +-10 degrees, got {self.rotation_deg}")


def _segments(polylines: Sequence[Polyline]) -> np.ndarray:
    segs = [(a[0], a[1], b[0], b[1]) for pl in polylines for a, b in zip(pl[:-1], pl[1:])]
    return np.asarray(segs, dtype=np.float64).reshape(-1, 4)


_PIX = (np.arange(SIZE) + 0.5)
_PY, _PX = np.meshgrid(_PIX, _PIX, indexing="ij")


def _segment_distance(segs: np.ndarray) -> np.ndarray:
    """Distance from each pixel centre to the nearest segment, shape [SIZE, SIZE]."""
    if len(segs) == 0:
        return np.full((SIZE, SIZE), np.inf)
    px = _PX[..., None]
    py = _PY[..., None]
    ax, ay, bx, by = segs.T
    dx, dy = bx - ax, by - ay
    L2 = np.maximum(dx * dx + dy * dy, 1e-12)
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / L2, 0.0, 1.0)
    ex = px - (ax + t * dx)
    ey = py - (ay + t * dy)
    return np.sqrt(ex * ex + ey * ey).min(axis=-1)


def _inside(poly: np.ndarray) -> np.ndarray:
    """Even-odd point-in-polygon test for every pixel centre."""
    inside = np.zeros((SIZE, SIZE), dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        crosses = (y1 > _PY) != (y2 > _PY)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (_PY - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (_PX < xint)
    return inside


def _background(rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.12, 0.32)
    coarse = rng.normal(0.0, 0.05, size=(5, 5))
    shade = resize_bilinear(coarse, SIZE, SIZE)
    grain = rng.normal(0.0, 0.025, size=(SIZE, SIZE))
    img = base + shade + grain
    for _ in range(int(rng.integers(0, 3))):
        pts = [rng.uniform(0, SIZE, size=2)]
        for _ in range(int(rng.integers(2, 5))):
            pts.append(pts[-1] + rng.normal(0, 6, size=2))
        d = _segment_distance(_segments([[tuple(p) for p in pts]]))
        img -= rng.uniform(0.05, 0.12) * np.clip(1.0 - d, 0.0, 1.0)
    return np.clip(img, 0.0, 1.0)


def render_glyph(spec: GlyphSpec) -> np.ndarray:
    """Deterministic [1, 32, 32] grayscale image of ``spec`` on a textured road patch."""
    if spec.class_id == "RIGHT":
        left = render_glyph(replace(spec, class_id="LEFT"))
        return left[:, :, ::-1].copy()
    rng = np.random.default_rng([spec.seed, 0])
    bg = _background(rng)
    # style draws happen for every class so NULL shares its background with glyphs
    width = spec.stroke_width if spec.stroke_width is not None else rng.uniform(1.8, 2.6)
    scale = spec.scale if spec.scale is not None else rng.uniform(0.82, 1.0)
    rot = spec.rotation_deg if spec.rotation_deg is not None else rng.uniform(-10, 10)
    shift = rng.uniform(-1.5, 1.5, size=2)
    paint = rng.uniform(0.75, 0.95)
    wear = rng.uniform(0.0, 0.15)
    wear_field = resize_bilinear(rng.uniform(0, 1, size=(6, 6)), SIZE, SIZE)
    if spec.class_id == "NULL":
        return bg[None].copy()

    strokes, fills = glyph_geometry(spec.class_id)
    size = 26.0 * scale
    th = math.radians(rot)
    c, s = math.cos(th), math.sin(th)
    cx, cy = SIZE / 2 + shift[0], SIZE / 2 + shift[1]

    def tf(pl: Polyline) -> Polyline:
        out = []
        for u, v in pl:
            x, y = (u - 0.5) * size, (v - 0.5) * size
            out.append((cx + c * x - s * y, cy + s * x + c * y))
        return out

    strokes = [tf(pl) for pl in strokes]
    fills = [tf(pl) for pl in fills]
    edges = strokes + [pl + [pl[0]] for pl in fills]
    d = _segment_distance(_segments(edges))
    alpha = np.clip(width / 2 + 0.5 - d, 0.0, 1.0)
    for poly in fills:
        alpha = np.maximum(alpha, _inside(np.asarray(poly)).astype(np.float64))
    alpha *= 1.0 - wear * wear_field
    img = bg * (1.0 - alpha) + paint * alpha
    return np.clip(img, 0.0, 1.0)[None]


# ----------------------------------------------------------------- corruption


@dataclass(frozen=True)
class CorruptionParams:
    blur_sigma: float = 1.2
    noise_sigma: float = 0.05
    perspective_strength: float = 0.15

    def __post_init__(self):
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise CorpusError("blur_sigma and noise_sigma must be >= 0")
        if not 0.0 <= self.perspective_strength <= 0.3:
            raise CorpusError(
                f"perspective_strength must lie in [0, 0.3], got {self.perspective_strength}")

    @classmethod
    def none(cls) -> "CorruptionParams":
        return cls(0.0, 0.0, 0.0)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    with np.errstate(over="ignore"):  # tiny sigma: off-centre taps underflow to 0
        k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur of a 2-d image with zero padding (mass leaks at the border)."""
    k = gaussian_kernel(sigma)
    out = correlate1d(img, k, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, k, axis=1, mode="constant", cval=0.0)


def _homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    a = []
    b = []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b += [u, v]
    h = np.linalg.solve(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return np.append(h, 1.0).reshape(3, 3)


def sample_bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear lookup at pixel-centre coordinates, edge-clamped."""
    h, w = img.shape
    xs = np.clip(xs - 0.5, 0.0, w - 1.0)
    ys = np.clip(ys - 0.5, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xs).astype(int), w - 2) if w > 1 else np.zeros_like(xs, dtype=int)
    y0 = np.minimum(np.floor(ys).astype(int), h - 2) if h > 1 else np.zeros_like(ys, dtype=int)
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def perspective_warp(img: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Ground-plane keystone: the top edge narrows by up to strength*size, with a little yaw shear.

    The bottom edge stays fixed, as for a marking viewed by a pitched camera.
    """
    n = img.shape[0]
    corners = np.array([[0, 0], [n, 0], [n, n], [0, n]], dtype=np.float64)
    squeeze = rng.uniform(0, 1) * strength * n / 2
    shear = rng.uniform(-1, 1) * strength * n / 8
    moved = corners + np.array([[squeeze + shear, 0], [shear - squeeze, 0], [0, 0], [0, 0]])
    hmat = _homography(corners, moved)  # output coords -> source coords
    gy, gx = np.meshgrid(np.arange(n) + 0.5, np.arange(n) + 0.5, indexing="ij")
    src = hmat @ np.stack([gx.ravel(), gy.ravel(), np.ones(n * n)])
    xs, ys = src[0] / src[2], src[1] / src[2]
    return sample_bilinear(img, xs, ys).reshape(n, n)


def corrupt(clean: np.ndarray, params: CorruptionParams, seed: int) -> np.ndarray:
    """Blur, perspective-warp, add Gaussian noise, clip to [0, 1]."""
    rng = np.random.default_rng(seed)
    squeeze = clean.ndim == 3
    img = np.asarray(clean[0] if squeeze else clean, dtype=np.float64).copy()
    if params.blur_sigma > 0:
        img = gaussian_blur(img, params.blur_sigma)
    if params.perspective_strength > 0:
        img = perspective_warp(img, params.perspective_strength, rng)
    if params.noise_sigma > 0:
        img = img + rng.normal(0.0, params.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return img[None] if squeeze else img


def resize_bilinear(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize; the identity when the size is unchanged."""
    ih, iw = img.shape
    if (ih, iw) == (h, w):
        return np.array(img, dtype=np.float64)
    gy, gx = np.meshgrid((np.arange(h) + 0.5) * ih / h, (np.arange(w) + 0.5) * iw / w,
                         indexing="ij")
    return sample_bilinear(np.asarray(img, dtype=np.float64), gx, gy)


# ------------------------------------------------------------------ PGM files


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def write_pgm(path, img: np.ndarray) -> None:
    """Write a [H,W] or [1,H,W] image in [0,1] as 8-bit binary PGM (P5)."""
    a = np.asarray(img)
    if a.ndim == 3:
        a = a[0]
    raw = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = raw.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(raw.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5/P2 PGM into a float [H,W] array scaled to [0,1]."""
    with open(path, "rb") as f:
        data = f.read()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorpusError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == b"P5":
        pos += 1
        dt = np.uint8 if maxval < 256 else np.dtype(">u2")
        n = w * h * np.dtype(dt).itemsize
        if len(data) - pos < n:
            raise CorpusError(f"{path}: truncated PGM pixel data")
        px = np.frombuffer(data[pos:pos + n], dtype=dt).reshape(h, w)
    elif magic == b"P2":
        vals = data[pos:].split()
        if len(vals) < w * h:
            raise CorpusError(f"{path}: truncated PGM pixel data")
        px = np.array([int(v) for v in vals[: w * h]]).reshape(h, w)
    else:
        raise CorpusError(f"{path}: not a PGM file (magic {magic!r})")
    return px.astype(np.float64) / maxval


def read_image(path) -> np.ndarray:
    """PGM natively; other formats through Pillow when it is installed."""
    p = Path(path)
    with open(p, "rb") as f:
        head = f.read(2)
    if head in (b"P5", b"P2"):
        return read_pgm(p)
    try:
        from PIL import Image
    except ImportError as e:  # pragma: no cover
        raise CorpusError(f"{p}: only PGM is supported without Pillow") from e
    with Image.open(p) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


# ---------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ManifestRow:
    id: str
    path: str
    label: str
    split: str
    corruption: CorruptionParams
    seed: int

    @property
    def class_index(self) -> int:
        return CLASS_INDEX[self.label]

    @property
    def is_positive(self) -> bool:
        return self.label != "NULL"

    def fields(self) -> list[str]:
        c = self.corruption
        return [self.id, self.path, self.label, self.split, repr(float(c.blur_sigma)),
                repr(float(c.noise_sigma)), repr(float(c.perspective_strength)), str(self.seed)]


@dataclass
class CorpusIndex:
    root: Path
    rows: list[ManifestRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def split(self, name: str) -> "CorpusIndex":
        return CorpusIndex(self.root, [r for r in self.rows if r.split == name])

    def counts(self) -> dict[str, int]:
        out = {c: 0 for c in CLASSES}
        for r in self.rows:
            out[r.label] += 1
        return out

    def ids(self) -> set[str]:
        return {r.id for r in self.rows}

    def write_manifest(self, path=None) -> Path:
        path = Path(path) if path else self.root / "manifest.tsv"
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, delimiter="\t", lineterminator="\n")
            w.writerow(MANIFEST_COLUMNS)
            for r in self.rows:
                w.writerow(r.fields())
        return path


@dataclass
class LabeledSamples:
    """Array-of-structs view of a corpus split, ready for batching."""

    ids: list[str]
    clean: np.ndarray  # [N,1,32,32]
    corrupted: np.ndarray  # [N,1,32,32]
    labels: np.ndarray  # [N] class indices

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def is_positive(self) -> np.ndarray:
        return self.labels != NULL

    def subset(self, idx) -> "LabeledSamples":
        idx = np.asarray(idx, dtype=np.intp)
        return LabeledSamples([self.ids[i] for i in idx], self.clean[idx],
                              self.corrupted[idx], self.labels[idx])

    @classmethod
    def concat(cls, parts: Sequence["LabeledSamples"]) -> "LabeledSamples":
        return cls([i for p in parts for i in p.ids],
                   np.concatenate([p.clean for p in parts]),
                   np.concatenate([p.corrupted for p in parts]),
                   np.concatenate([p.labels for p in parts]))


def scaled_counts(factor: float, base: dict[str, int] = TABLE_I_COUNTS,
                  minimum: int = 1) -> dict[str, int]:
    return {c: max(minimum, int(round(n * factor))) for c, n in base.items()}


def _validate_counts(counts: dict[str, int]) -> None:
    for c, n in counts.items():
        if c not in CLASS_INDEX:
            raise CorpusError(f"unknown class label {c!r}")
        if int(n) < 1:
            raise CorpusError(f"count for {c} must be >= 1, got {n}")


def train_quotas(counts: dict[str, int]) -> dict[str, int]:
    """Per-class train sizes: largest-remainder apportionment of 0.6 of the total.

    Each class gets floor(0.6 n) or one more; the leftover seats go to the
    largest fractional parts (ties in class order), so the train total is
    round(0.6 * sum(n)).
    """
    labels = [c for c in CLASSES if c in counts]
    exact = {c: TRAIN_FRACTION * int(counts[c]) for c in labels}
    quota = {c: math.floor(exact[c] + 1e-9) for c in labels}
    spare = int(round(TRAIN_FRACTION * sum(int(counts[c]) for c in labels))) - sum(quota.values())
    order = sorted(labels, key=lambda c: (-(exact[c] - quota[c]), CLASS_INDEX[c]))
    for c in order[:max(spare, 0)]:
        quota[c] += 1
    return quota


def stratified_split(counts: dict[str, int], rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Per class, a boolean train mask with ``train_quotas`` entries set."""
    quota = train_quotas(counts)
    out = {}
    for c in CLASSES:
        if c not in counts:
            continue
        n = int(counts[c])
        mask = np.zeros(n, dtype=bool)
        mask[rng.permutation(n)[:quota[c]]] = True
        out[c] = mask
    return out


def make_corpus(counts: dict[str, int] | None = None,
                corruption: CorruptionParams | None = None,
                seed: int = 0, out_dir=None) -> CorpusIndex:
    """Render, write ``images/<id>.pgm`` and ``manifest.tsv``; return the index.

    Only clean glyphs are written. Corrupted views are re-derived on load from
    the recorded corruption parameters and per-row seed.
    """
    counts = dict(TABLE_I_COUNTS if counts is None else counts)
    corruption = corruption or CorruptionParams()
    _validate_counts(counts)
    if out_dir is None:
        raise CorpusError("make_corpus needs an output directory")
    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        probe = root / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise CorpusError(f"cannot write corpus to {root}: {e}") from e

    rng = np.random.default_rng(seed)
    masks = stratified_split(counts, rng)
    rows = []
    k = 0
    for c in CLASSES:
        if c not in counts:
            continue
        seeds = rng.integers(0, 2**31 - 1, size=int(counts[c]))
        for j, s in enumerate(seeds):
            sid = f"{k:05d}"
            rel = f"images/{sid}.pgm"
            write_pgm(root / rel, render_glyph(GlyphSpec(c, int(s))))
            rows.append(ManifestRow(sid, rel, c, "train" if masks[c][j] else "test",
                                    corruption, int(s)))
            k += 1
    index = CorpusIndex(root, rows)
    index.write_manifest()
    return index


def _parse_row(line: int, rec: list[str], root: Path, check_files: bool) -> ManifestRow:
    if len(rec) != len(MANIFEST_COLUMNS):
        raise ManifestError(line, f"expected {len(MANIFEST_COLUMNS)} columns, got {len(rec)}")
    sid, rel, label, split, blur, noise, persp, seed = rec
    if label not in CLASS_INDEX:
        raise ManifestError(line, f"unknown label {label!r} in row {sid!r}")
    if split not in ("train", "test"):
        raise ManifestError(line, f"split must be train or test, got {split!r}")
    try:
        params = CorruptionParams(float(blur), float(noise), float(persp))
        seed_i = int(seed)
    except (ValueError, CorpusError) as e:
        raise ManifestError(line, f"bad numeric field: {e}") from None
    if check_files and not (root / rel).is_file():
        raise ManifestError(line, f"missing image file {rel}")
    return ManifestRow(sid, rel, label, split, params, seed_i)


def ingest_external(directory, manifest_file="manifest.tsv") -> CorpusIndex:
    """Read a corpus directory laid out like :func:`make_corpus` output."""
    root = Path(directory)
    mpath = Path(manifest_file)
    if not mpath.is_absolute():
        mpath = root / mpath
    if not mpath.is_file():
        raise CorpusError(f"manifest not found: {mpath}")
    with open(mpath, encoding="utf-8", newline="") as f:
        records = list(csv.reader(f, delimiter="\t"))
    if not records:
        return CorpusIndex(root, [])
    if tuple(records[0]) != MANIFEST_COLUMNS:
        raise ManifestError(1, f"header must be {' '.join(MANIFEST_COLUMNS)}")
    rows = []
    seen = set()
    for i, rec in enumerate(records[1:], start=2):
        if not rec:
            continue
        row = _parse_row(i, rec, root, check_files=True)
        if row.id in seen:
            raise ManifestError(i, f"duplicate id {row.id!r}")
        seen.add(row.id)
        rows.append(row)
    return CorpusIndex(root, rows)


def load_image(root: Path, row: ManifestRow) -> np.ndarray:
    img = read_image(root / row.path)
    return resize_bilinear(np.clip(img, 0.0, 1.0), SIZE, SIZE)[None]


def load_samples(index: CorpusIndex) -> LabeledSamples:
    """Load clean images and derive their corrupted views."""
    n = len(index.rows)
    clean = np.zeros((n, 1, SIZE, SIZE))
    corrupted = np.zeros((n, 1, SIZE, SIZE))
    labels = np.zeros(n, dtype=np.intp)
    for i, r in enumerate(index.rows):
        img = load_image(index.root, r)
        clean[i] = img
        corrupted[i] = corrupt(img, r.corruption, r.seed)
        labels[i] = r.class_index
    return LabeledSamples([r.id for r in index.rows], clean, corrupted, labels)


def write_samples(samples_clean: np.ndarray, labels: Sequence[int], out_dir, seeds: Sequence[int],
                  corruption: CorruptionParams, split: str = "train",
                  id_prefix: str = "") -> CorpusIndex:
    """Write externally produced clean images in the corpus layout."""
    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CorpusError(f"cannot write corpus to {root}: {e}") from e
    rows = []
    for k, (img, lab, s) in enumerate(zip(samples_clean, labels, seeds)):
        sid = f"{id_prefix}{k:05d}"
        rel = f"images/{sid}.pgm"
        write_pgm(root / rel, img)
        rows.append(ManifestRow(sid, rel, CLASSES[int(lab)], split, corruption, int(s)))
    index = CorpusIndex(root, rows)
    index.write_manifest()
    return index


def dir_digest(path) -> dict[str, bytes]:
    """Relative path -> bytes for every file under ``path`` (for byte-equality checks)."""
    root = Path(path)
    out = {}
    for dirpath, _, files in os.walk(root):
        for fn in files:
            p = Path(dirpath) / fn
            out[str(p.relative_to(root))] = p.read_bytes()
    return out

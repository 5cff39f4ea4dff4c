"""Procedural corpus of shape scenes with compositional captions."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoders import TokenSequence, Vocabulary
from .numerics import make_rng

CANVAS = 16
N_TOKENS = 8

COLORS = {
    "red": (0.9, 0.1, 0.1), "green": (0.1, 0.8, 0.2), "blue": (0.15, 0.3, 0.95),
    "yellow": (0.95, 0.9, 0.1), "magenta": (0.9, 0.1, 0.85), "cyan": (0.1, 0.9, 0.9),
    "white": (0.97, 0.97, 0.97), "orange": (1.0, 0.55, 0.05),
}
CATEGORIES = ("circle", "square", "triangle", "star")
PATTERNS = ("solid", "hstripe", "vstripe", "checker")
SIZES = {"small": 3.0, "medium": 4.0, "large": 5.0}
BACKGROUNDS = {
    "black": ((0.05, 0.05, 0.05), None), "gray": ((0.5, 0.5, 0.5), None),
    "navy": ((0.05, 0.05, 0.35), None), "forest": ((0.05, 0.3, 0.08), None),
    "sunset": ((0.95, 0.45, 0.2), (0.35, 0.1, 0.45)), "ocean": ((0.2, 0.75, 0.8), (0.02, 0.1, 0.4)),
}
SPARE_WORDS = ("shape", "thing", "object", "toy")


def vocabulary_names() -> list[str]:
    words = ["<pad>", "a", "on", *COLORS, *CATEGORIES, *[b for b in BACKGROUNDS if b not in COLORS],
             *SPARE_WORDS]
    words += [f"tok{i}" for i in range(64 - len(words))]
    return words


def default_vocabulary() -> Vocabulary:
    return Vocabulary(vocabulary_names())


def held_out_combos() -> dict[str, list[tuple[str, str]]]:
    """(color, pattern) pairs per category reserved for evaluation subjects."""
    colors = list(COLORS)
    out = {}
    for k, cat in enumerate(CATEGORIES):
        out[cat] = [(colors[(2 * k + j * 3) % 8], PATTERNS[(k + j + 1) % 4]) for j in range(3)]
    return out


@dataclass(frozen=True)
class SceneSpec:
    category: str
    color: str
    pattern: str
    size: str
    background: str
    position: tuple[int, int]  # subject centre (row, col)

    def validate(self) -> None:
        for value, table, what in ((self.category, CATEGORIES, "category"), (self.color, COLORS, "color"),
                                   (self.pattern, PATTERNS, "pattern"), (self.size, SIZES, "size"),
                                   (self.background, BACKGROUNDS, "background")):
            if value not in table:
                raise ValueError(f"invalid {what} {value!r}")
        r = SIZES[self.size]
        for c in self.position:
            if c - r < -0.5 or c + r > CANVAS - 0.5:
                raise ValueError(f"subject of size {self.size} at {self.position} leaves the canvas")

    @property
    def is_held_out(self) -> bool:
        return (self.color, self.pattern) in held_out_combos()[self.category]


@dataclass
class CorpusItem:
    image: np.ndarray      # (H, W, 3) in [0, 1]
    caption: TokenSequence
    scene: SceneSpec
    mask: np.ndarray       # (H, W) bool

    @property
    def words(self) -> list[str]:
        return caption_words(self.scene)


def caption_words(spec: SceneSpec) -> list[str]:
    return ["a", spec.color, spec.category, "on", spec.background]


def caption_tokens(words: list[str], vocab: Vocabulary | None = None, target_index: int = 2) -> TokenSequence:
    vocab = vocab or default_vocabulary()
    ids = vocab.encode(words) + [vocab.index["<pad>"]] * (N_TOKENS - len(words))
    return TokenSequence(tuple(ids), target_index)


def _shape_mask(spec: SceneSpec) -> np.ndarray:
    yy, xx = np.mgrid[0:CANVAS, 0:CANVAS].astype(np.float64)
    cy, cx = spec.position
    r = SIZES[spec.size]
    dy, dx = yy - cy, xx - cx
    if spec.category == "circle":
        return dy ** 2 + dx ** 2 <= r ** 2
    if spec.category == "square":
        s = r * 0.85
        return (np.abs(dy) <= s) & (np.abs(dx) <= s)
    if spec.category == "triangle":
        # apex up, base at the bottom of the bounding box
        top, bottom = -r, r * 0.8
        frac = (dy - top) / (bottom - top)
        return (dy >= top) & (dy <= bottom) & (np.abs(dx) <= frac * r + 0.25)
    # five-pointed star via polar radius modulation
    ang = np.arctan2(dy, dx) + np.pi / 2
    rho = np.hypot(dy, dx)
    lim = r * (0.55 + 0.45 * np.abs(np.cos(2.5 * ang)))
    return rho <= lim


def _background(name: str) -> np.ndarray:
    top, bottom = BACKGROUNDS[name]
    top = np.asarray(top)
    if bottom is None:
        return np.broadcast_to(top, (CANVAS, CANVAS, 3)).copy()
    w = np.linspace(0.0, 1.0, CANVAS)[:, None, None]
    return np.broadcast_to((1 - w) * top + w * np.asarray(bottom), (CANVAS, CANVAS, 3)).copy()


def _fill(spec: SceneSpec) -> np.ndarray:
    base = np.asarray(COLORS[spec.color])
    dark = base * 0.35
    yy, xx = np.mgrid[0:CANVAS, 0:CANVAS]
    if spec.pattern == "solid":
        alt = np.zeros((CANVAS, CANVAS), bool)
    elif spec.pattern == "hstripe":
        alt = (yy % 2) == 1
    elif spec.pattern == "vstripe":
        alt = (xx % 2) == 1
    else:
        alt = ((yy + xx) % 2) == 1
    return np.where(alt[..., None], dark, base)


def render_scene(spec: SceneSpec, vocab: Vocabulary | None = None) -> CorpusItem:
    spec.validate()
    mask = _shape_mask(spec)
    img = np.where(mask[..., None], _fill(spec), _background(spec.background))
    return CorpusItem(img, caption_tokens(caption_words(spec), vocab), spec, mask)


def _positions(size: str) -> list[tuple[int, int]]:
    r = SIZES[size]
    lo, hi = int(np.ceil(r - 0.5)), int(np.floor(CANVAS - 0.5 - r))
    return [(y, x) for y in range(lo, hi + 1) for x in range(lo, hi + 1)]


def random_spec(rng: np.random.Generator, held_out: bool = False) -> SceneSpec:
    """Uniform over the palette product; ``held_out`` draws only reserved subjects."""
    while True:
        cat = CATEGORIES[rng.integers(len(CATEGORIES))]
        if held_out:
            color, pattern = held_out_combos()[cat][rng.integers(3)]
        else:
            color = list(COLORS)[rng.integers(len(COLORS))]
            pattern = PATTERNS[rng.integers(len(PATTERNS))]
        size = list(SIZES)[rng.integers(len(SIZES))]
        bg = list(BACKGROUNDS)[rng.integers(len(BACKGROUNDS))]
        pos = _positions(size)
        spec = SceneSpec(cat, color, pattern, size, bg, pos[rng.integers(len(pos))])
        if spec.is_held_out == held_out:
            return spec


def generate_corpus(seed: int, n: int, held_out: bool = False) -> list[CorpusItem]:
    if n < 1:
        raise ValueError("generate_corpus: n must be >= 1")
    rng = make_rng(seed)
    return [render_scene(random_spec(rng, held_out)) for _ in range(n)]


def palette_hash() -> str:
    blob = repr((COLORS, CATEGORIES, PATTERNS, SIZES, BACKGROUNDS, vocabulary_names()))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def grammar_productions() -> set[tuple[str, str]]:
    return ({("color", c) for c in COLORS} | {("category", c) for c in CATEGORIES}
            | {("background", b) for b in BACKGROUNDS})


def productions_of(spec: SceneSpec) -> set[tuple[str, str]]:
    return {("color", spec.color), ("category", spec.category), ("background", spec.background)}


def stack(items: list[CorpusItem]):
    """(images, captions, masks) as batched arrays/lists."""
    return (np.stack([it.image for it in items]), [it.caption for it in items],
            np.stack([it.mask for it in items]))


# ------------------------------------------------------------------ disk I/O


def write_ppm(path, img: np.ndarray) -> None:
    a = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    h, w = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(a.tobytes())


def write_pgm(path, grid: np.ndarray) -> None:
    a = np.clip(np.round(np.asarray(grid, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(a.tobytes())


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} image")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit images are supported")
    pixels = np.frombuffer(data[pos + 1:pos + 1 + w * h * channels], dtype=np.uint8)
    if pixels.size != w * h * channels:
        raise ValueError(f"{path}: truncated pixel data")
    shape = (h, w, channels) if channels > 1 else (h, w)
    return pixels.reshape(shape).astype(np.float64) / 255.0


def read_ppm(path) -> np.ndarray:
    return _read_pnm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)


def write_corpus(items: list[CorpusItem], out_dir, seed: int) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, it in enumerate(items):
        write_ppm(out / f"{i:04d}.ppm", it.image)
        (out / f"{i:04d}.txt").write_text(" ".join(it.words) + "\n", encoding="utf-8")
        write_pgm(out / f"{i:04d}.mask.pgm", it.mask.astype(np.float64))
    default_vocabulary().write(out / "vocab.txt")
    (out / "corpus.manifest").write_text(
        f"seed = {seed}\nn = {len(items)}\npalette = {palette_hash()}\n", encoding="utf-8")


@dataclass
class DiskItem:
    image: np.ndarray
    caption: TokenSequence
    words: list[str]
    mask: np.ndarray


def read_corpus(in_dir) -> list[DiskItem]:
    d = Path(in_dir)
    if not (d / "corpus.manifest").exists():
        raise FileNotFoundError(f"{d}: no corpus.manifest")
    vocab = Vocabulary.read(d / "vocab.txt") if (d / "vocab.txt").exists() else default_vocabulary()
    items = []
    for ppm in sorted(d.glob("[0-9][0-9][0-9][0-9].ppm")):
        stem = ppm.name[:4]
        words = (d / f"{stem}.txt").read_text(encoding="utf-8").split()
        items.append(DiskItem(read_ppm(ppm), caption_tokens(words, vocab), words,
                              read_pgm(d / f"{stem}.mask.pgm") > 0.5))
    return items

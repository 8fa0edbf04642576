"""Procedural handwritten-document corpus with exact token ground truth.

Glyphs are hand-authored polyline stroke skeletons (no font dependency),
rasterized under per-writer style transforms: slant shear, stroke width,
per-vertex jitter, baseline wobble and ink intensity.  Writer styles are the
distribution-shift axis: test documents come from style ids never seen in
training.

Dataset layout on disk:
    data/<split>/img_%05d.pgm          binary 8-bit graymap
    data/<split>/img_%05d.tokens.txt   whitespace-separated token spelling
    data/manifest.tsv                  id, split, style_id, width, height
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tokens import Dictionary, DocNode, TokenSequence, parse, serialize

GLYPH_H = 16
GLYPH_W = 16  # two feature columns per glyph at downsample factor 8

# Stroke skeletons in a unit box, x right, y down, baseline near y=0.9.
GLYPH_STROKES: dict[str, list[list[tuple[float, float]]]] = {
    "a": [[(0.68, 0.38), (0.48, 0.30), (0.27, 0.40), (0.21, 0.62), (0.30, 0.84),
           (0.55, 0.88), (0.68, 0.74)], [(0.68, 0.33), (0.68, 0.90)]],
    "b": [[(0.26, 0.06), (0.26, 0.90)],
          [(0.26, 0.48), (0.50, 0.40), (0.70, 0.54), (0.70, 0.76), (0.50, 0.90), (0.26, 0.84)]],
    "c": [[(0.70, 0.38), (0.50, 0.28), (0.30, 0.36), (0.22, 0.60), (0.30, 0.84),
           (0.50, 0.91), (0.70, 0.82)]],
    "d": [[(0.70, 0.48), (0.46, 0.40), (0.26, 0.54), (0.26, 0.76), (0.46, 0.90), (0.70, 0.84)],
          [(0.70, 0.06), (0.70, 0.90)]],
    "e": [[(0.24, 0.62), (0.70, 0.60), (0.68, 0.42), (0.48, 0.31), (0.29, 0.40),
           (0.22, 0.62), (0.30, 0.84), (0.52, 0.91), (0.70, 0.83)]],
    "f": [[(0.64, 0.14), (0.50, 0.07), (0.40, 0.20), (0.40, 0.90)],
          [(0.24, 0.44), (0.62, 0.44)]],
    "g": [[(0.68, 0.38), (0.48, 0.30), (0.28, 0.40), (0.22, 0.56), (0.32, 0.70),
           (0.55, 0.72), (0.68, 0.60)],
          [(0.68, 0.33), (0.68, 0.84), (0.54, 0.96), (0.32, 0.92)]],
    "h": [[(0.26, 0.06), (0.26, 0.90)],
          [(0.26, 0.50), (0.46, 0.37), (0.64, 0.44), (0.68, 0.90)]],
    "i": [[(0.50, 0.36), (0.50, 0.90)], [(0.50, 0.16), (0.50, 0.22)]],
    "j": [[(0.56, 0.36), (0.56, 0.80), (0.46, 0.94), (0.30, 0.90)],
          [(0.56, 0.16), (0.56, 0.22)]],
    "k": [[(0.28, 0.06), (0.28, 0.90)], [(0.66, 0.36), (0.28, 0.62)],
          [(0.42, 0.54), (0.68, 0.90)]],
    "l": [[(0.48, 0.06), (0.48, 0.84), (0.60, 0.90)]],
    "m": [[(0.18, 0.90), (0.18, 0.36)],
          [(0.18, 0.46), (0.33, 0.33), (0.45, 0.46), (0.45, 0.90)],
          [(0.45, 0.46), (0.60, 0.33), (0.74, 0.46), (0.74, 0.90)]],
    "n": [[(0.26, 0.90), (0.26, 0.36)],
          [(0.26, 0.46), (0.46, 0.33), (0.66, 0.42), (0.68, 0.90)]],
    "o": [[(0.50, 0.30), (0.30, 0.38), (0.22, 0.60), (0.30, 0.82), (0.50, 0.90),
           (0.68, 0.80), (0.75, 0.60), (0.68, 0.38), (0.50, 0.30)]],
    "p": [[(0.26, 0.36), (0.26, 0.97)],
          [(0.26, 0.42), (0.50, 0.33), (0.70, 0.46), (0.70, 0.63), (0.50, 0.76), (0.26, 0.68)]],
    "q": [[(0.70, 0.42), (0.46, 0.32), (0.26, 0.46), (0.26, 0.63), (0.46, 0.76), (0.70, 0.66)],
          [(0.70, 0.36), (0.70, 0.97)]],
    "r": [[(0.30, 0.36), (0.30, 0.90)], [(0.30, 0.50), (0.46, 0.35), (0.66, 0.33)]],
    "s": [[(0.68, 0.36), (0.46, 0.28), (0.28, 0.38), (0.42, 0.56), (0.60, 0.62),
           (0.68, 0.78), (0.50, 0.90), (0.27, 0.83)]],
    "t": [[(0.46, 0.10), (0.46, 0.80), (0.58, 0.90)], [(0.26, 0.40), (0.68, 0.40)]],
    "u": [[(0.25, 0.36), (0.25, 0.76), (0.40, 0.90), (0.60, 0.82), (0.68, 0.70)],
          [(0.68, 0.36), (0.68, 0.90)]],
    "v": [[(0.25, 0.36), (0.47, 0.90), (0.70, 0.36)]],
    "w": [[(0.16, 0.36), (0.31, 0.90), (0.47, 0.50), (0.62, 0.90), (0.78, 0.36)]],
    "x": [[(0.25, 0.36), (0.70, 0.90)], [(0.70, 0.36), (0.25, 0.90)]],
    "y": [[(0.25, 0.36), (0.31, 0.70), (0.50, 0.78)],
          [(0.70, 0.36), (0.54, 0.95), (0.33, 0.97)]],
    "z": [[(0.26, 0.36), (0.68, 0.36), (0.26, 0.90), (0.70, 0.90)]],
    " ": [],
}


@dataclass(frozen=True)
class WriterStyle:
    """Per-author rendering parameters, derived from (style id, corpus seed)."""

    style_id: int
    slant: float  # radians, [-0.35, 0.35]
    stroke_width: float  # pixels, [1, 3]
    jitter: float  # per-vertex noise sigma, pixels
    baseline_wobble: float  # amplitude, pixels
    ink: float  # intensity, [0.5, 1.0]

    @classmethod
    def from_seed(cls, style_id: int, corpus_seed: int) -> "WriterStyle":
        rng = np.random.default_rng(
            np.random.SeedSequence([corpus_seed, 7919, style_id])
        )
        return cls(
            style_id=style_id,
            slant=float(rng.uniform(-0.25, 0.25)),
            stroke_width=float(rng.uniform(1.2, 2.6)),
            jitter=float(rng.uniform(0.0, 0.3)),
            baseline_wobble=float(rng.uniform(0.0, 1.0)),
            ink=float(rng.uniform(0.6, 1.0)),
        )


def render_glyph(ch: str, style: WriterStyle, rng: np.random.Generator) -> np.ndarray:
    """Ink bitmap (GLYPH_H x GLYPH_W), 0 = blank, style.ink = full stroke."""
    if ch not in GLYPH_STROKES:
        raise ValueError(f"character {ch!r} has no glyph skeleton")
    bitmap = np.zeros((GLYPH_H, GLYPH_W), dtype=np.float32)
    radius = style.stroke_width / 2.0
    yy, xx = np.mgrid[0:GLYPH_H, 0:GLYPH_W]
    for stroke in GLYPH_STROKES[ch]:
        pts = []
        for x, y in stroke:
            # Shear: the glyph top leans by slant; baseline stays put.
            xs = x + math.tan(style.slant) * (0.9 - y)
            px = xs * (GLYPH_W - 1)
            py = y * (GLYPH_H - 1)
            if style.jitter > 0:
                px += rng.normal(0.0, style.jitter)
                py += rng.normal(0.0, style.jitter)
            pts.append((px, py))
        for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
            # Soft-edged capsule around the segment.
            dx, dy = x1 - x0, y1 - y0
            seg_len2 = dx * dx + dy * dy
            if seg_len2 == 0:
                dist = np.hypot(xx - x0, yy - y0)
            else:
                t = np.clip(((xx - x0) * dx + (yy - y0) * dy) / seg_len2, 0.0, 1.0)
                dist = np.hypot(xx - (x0 + t * dx), yy - (y0 + t * dy))
            coverage = np.clip(radius + 0.5 - dist, 0.0, 1.0)
            np.maximum(bitmap, style.ink * coverage, out=bitmap)
    return bitmap


class PageOverflowError(ValueError):
    """Document content does not fit the page at the given sizes."""


LINE_HEIGHT = GLYPH_H + 4
SECTION_RULE_HEIGHT = 4
MARGIN = 4
PARAGRAPH_INDENT = 10


def render_document(
    tree: DocNode,
    style: WriterStyle,
    rng: np.random.Generator,
    page_height: int,
    page_width: int,
) -> tuple[np.ndarray, DocNode]:
    """Rasterize a layout tree onto a white page; the tree is the ground truth.

    Sections are marked by a short horizontal rule; each paragraph renders as
    one text line.  Raises PageOverflowError if content does not fit, so the
    caller can retry with smaller content.
    """
    page = np.ones((page_height, page_width), dtype=np.float32)
    y = MARGIN
    for section in tree.child_entities():
        if y + SECTION_RULE_HEIGHT > page_height - MARGIN:
            raise PageOverflowError("section rule overflows the page")
        rule_w = page_width // 3
        page[y + 1 : y + 3, MARGIN : MARGIN + rule_w] = 1.0 - style.ink
        y += SECTION_RULE_HEIGHT + 2
        for paragraph in section.child_entities():
            text = paragraph.all_text()
            if y + LINE_HEIGHT > page_height - MARGIN + 2:
                raise PageOverflowError("paragraph line overflows the page")
            x = MARGIN + PARAGRAPH_INDENT
            phase = rng.uniform(0.0, 2.0 * math.pi)
            for ch in text:
                if x + GLYPH_W > page_width - MARGIN:
                    raise PageOverflowError("text line overflows the page width")
                wobble = style.baseline_wobble * math.sin(
                    2.0 * math.pi * x / 64.0 + phase
                )
                gy = int(round(y + 2 + wobble))
                gy = max(0, min(gy, page_height - GLYPH_H))
                glyph = render_glyph(ch, style, rng)
                region = page[gy : gy + GLYPH_H, x : x + GLYPH_W]
                np.minimum(region, 1.0 - glyph, out=region)
                x += GLYPH_W
            y += LINE_HEIGHT
        y += 2
    return np.round(page * 255.0).astype(np.uint8).astype(np.float32) / 255.0, tree


# -- corpus -------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusConfig:
    """Counts, style pools and complexity bounds for the on-disk corpus.

    The test style pool must be disjoint from every training pool; the
    validation pool reuses seen (train-real) styles so validation measures
    in-distribution accuracy.
    """

    n_train_synth: int = 250
    n_train_real: int = 250
    n_val: int = 64
    n_test: int = 100
    train_synth_styles: tuple[int, ...] = (0, 1, 2, 3)
    train_real_styles: tuple[int, ...] = (4, 5, 6, 7)
    val_styles: tuple[int, ...] = (4, 5, 6, 7)
    test_styles: tuple[int, ...] = (8, 9)
    max_sections: int = 2
    max_paragraphs: int = 3
    min_chars: int = 4
    max_chars: int = 12
    page_height: int = 128
    page_width: int = 256
    seed: int = 0

    def __post_init__(self):
        train = set(self.train_synth_styles) | set(self.train_real_styles)
        if set(self.test_styles) & train:
            raise ValueError("test style pool overlaps a training pool")
        if set(self.train_synth_styles) & set(self.train_real_styles):
            raise ValueError("train-synthetic and train-real style pools overlap")

    def counts(self) -> dict[str, int]:
        return {
            "train_synth": self.n_train_synth,
            "train_real": self.n_train_real,
            "val": self.n_val,
            "test": self.n_test,
        }

    def style_pool(self, split: str) -> tuple[int, ...]:
        return {
            "train_synth": self.train_synth_styles,
            "train_real": self.train_real_styles,
            "val": self.val_styles,
            "test": self.test_styles,
        }[split]


def random_text(rng: np.random.Generator, n_chars: int, alphabet: str) -> str:
    """Space-separated words of letters, trimmed to exactly n_chars."""
    letters = [c for c in alphabet if c != " "]
    out: list[str] = []
    while len(out) < n_chars:
        if out:
            out.append(" ")
        word_len = int(rng.integers(2, 7))
        for _ in range(word_len):
            out.append(letters[int(rng.integers(0, len(letters)))])
    text = "".join(out[:n_chars]).strip()
    return text if text else letters[0]


def sample_document_tree(
    rng: np.random.Generator,
    max_sections: int,
    max_paragraphs: int,
    min_chars: int,
    max_chars: int,
    alphabet: str,
) -> DocNode:
    sections = []
    for _ in range(int(rng.integers(1, max_sections + 1))):
        paragraphs = []
        for _ in range(int(rng.integers(1, max_paragraphs + 1))):
            n = int(rng.integers(min_chars, max_chars + 1))
            paragraphs.append(DocNode("paragraph", [random_text(rng, n, alphabet)]))
        sections.append(DocNode("section", paragraphs))
    return DocNode("page", sections)


def render_with_retries(
    rng: np.random.Generator,
    style: WriterStyle,
    max_sections: int,
    max_paragraphs: int,
    min_chars: int,
    max_chars: int,
    page_height: int,
    page_width: int,
    alphabet: str,
) -> tuple[np.ndarray, DocNode]:
    """Sample and render, shrinking content on overflow.

    Deterministic: the rng stream simply continues across retries.
    """
    while True:
        tree = sample_document_tree(
            rng, max_sections, max_paragraphs, min_chars, max_chars, alphabet
        )
        try:
            image, _ = render_document(tree, style, rng, page_height, page_width)
            return image, tree
        except PageOverflowError:
            max_paragraphs = max(1, max_paragraphs - 1)
            max_chars = max(min_chars, max_chars - 2)


def generate_document(
    cfg: CorpusConfig,
    split: str,
    index: int,
    dictionary: Dictionary,
) -> tuple[np.ndarray, DocNode, int]:
    """One reproducible document: (image, tree, style_id)."""
    pool = cfg.style_pool(split)
    seq = np.random.SeedSequence([cfg.seed, _split_tag(split), index])
    rng = np.random.default_rng(seq)
    style_id = int(pool[int(rng.integers(0, len(pool)))])
    style = WriterStyle.from_seed(style_id, cfg.seed)
    image, tree = render_with_retries(
        rng, style, cfg.max_sections, cfg.max_paragraphs, cfg.min_chars,
        cfg.max_chars, cfg.page_height, cfg.page_width, dictionary.alphabet,
    )
    return image, tree, style_id


def _split_tag(split: str) -> int:
    return {"train_synth": 1, "train_real": 2, "val": 3, "test": 4}[split]


def write_pgm(path: Path, image: np.ndarray) -> None:
    """Binary 8-bit portable graymap; image values in [0, 1]."""
    h, w = image.shape
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM file")
    w, h = (int(x) for x in parts[1].split())
    maxval = int(parts[2])
    pixels = np.frombuffer(parts[3][: w * h], dtype=np.uint8).reshape(h, w)
    return pixels.astype(np.float32) / float(maxval)


def generate_corpus(cfg: CorpusConfig, out_dir, dictionary: Dictionary | None = None) -> Path:
    """Write the full dataset; byte-identical for identical configs."""
    dictionary = dictionary or Dictionary()
    root = Path(out_dir)
    manifest_rows = []
    for split, count in cfg.counts().items():
        split_dir = root / split
        split_dir.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            image, tree, style_id = generate_document(cfg, split, i, dictionary)
            stem = f"img_{i:05d}"
            write_pgm(split_dir / f"{stem}.pgm", image)
            tokens = serialize(tree, dictionary)
            (split_dir / f"{stem}.tokens.txt").write_text(
                dictionary.to_text(tokens) + "\n", encoding="utf-8"
            )
            h, w = image.shape
            manifest_rows.append((f"{split}/{stem}", split, style_id, w, h))
    manifest_rows.sort(key=lambda r: r[0])
    lines = ["id\tsplit\tstyle_id\twidth\theight"]
    lines.extend("\t".join(str(x) for x in row) for row in manifest_rows)
    (root / "manifest.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return root


@dataclass
class DocInstance:
    id: str
    image: np.ndarray
    tokens: TokenSequence
    style_id: int


class DocDataset:
    """Reader for the on-disk corpus; instances load lazily by id."""

    def __init__(self, root, dictionary: Dictionary | None = None):
        self.root = Path(root)
        self.dictionary = dictionary or Dictionary()
        manifest = self.root / "manifest.tsv"
        if not manifest.exists():
            raise FileNotFoundError(f"no manifest at {manifest}")
        self._rows: dict[str, tuple[str, int]] = {}
        for line in manifest.read_text(encoding="utf-8").splitlines()[1:]:
            doc_id, split, style_id, _w, _h = line.split("\t")
            self._rows[doc_id] = (split, int(style_id))

    def split_ids(self, split: str) -> list[str]:
        return sorted(i for i, (s, _) in self._rows.items() if s == split)

    def load(self, doc_id: str) -> DocInstance:
        split, style_id = self._rows[doc_id]
        image = read_pgm(self.root / f"{doc_id}.pgm")
        text = (self.root / f"{doc_id}.tokens.txt").read_text(encoding="utf-8")
        tokens = self.dictionary.from_text(text)
        parse(tokens, self.dictionary, lenient=False)  # annotations must be valid
        return DocInstance(doc_id, image, tokens, style_id)

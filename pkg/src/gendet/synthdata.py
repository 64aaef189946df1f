"""Procedural scenes of colored shapes with text names, plus dataset IO.

Scenes are rendered onto a uint8 canvas (so the float image is exactly
representable after PPM round-trips), boxes are taken from the rendered
pixel extents, and each object's name is a short word sequence ("red
triangle", "small blue circle") determined by its appearance. Images are
stored as binary PPM (P6), annotations and vocabulary as a JSON sidecar.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

PAD_ID = 0
EOS_ID = 1
NUM_RESERVED = 2

DATASET_VERSION = 1
ANNOTATIONS_NAME = "annotations.json"

DEFAULT_COLORS = (
    ("red", (220, 50, 47)),
    ("green", (64, 190, 80)),
    ("blue", (56, 108, 230)),
    ("yellow", (235, 215, 60)),
    ("magenta", (205, 70, 200)),
)


class DataError(ValueError):
    """Dataset bytes or annotation structure are malformed."""


class VocabularyError(DataError):
    """A word or token id falls outside the vocabulary."""


@dataclass
class Vocabulary:
    """Closed word list with reserved ids PAD=0 and EOS=1; words are dense
    from id 2 in list order."""

    words: list

    def __post_init__(self):
        self._index = {w: NUM_RESERVED + i for i, w in enumerate(self.words)}
        if len(self._index) != len(self.words):
            raise VocabularyError("duplicate words in vocabulary")

    def __len__(self):
        return NUM_RESERVED + len(self.words)

    def word_id(self, word):
        try:
            return self._index[word]
        except KeyError:
            raise VocabularyError(f"unknown word {word!r}") from None

    def id_word(self, token_id):
        token_id = int(token_id)
        if not NUM_RESERVED <= token_id < len(self):
            raise VocabularyError(f"token id {token_id} is reserved or out of range")
        return self.words[token_id - NUM_RESERVED]


def tokenize(name, vocab):
    """Whitespace-split ``name`` into token ids; no end marker appended."""
    return tuple(vocab.word_id(w) for w in name.split())


def detokenize(token_ids, vocab):
    """Space-join token ids back into a name."""
    return " ".join(vocab.id_word(t) for t in token_ids)


@dataclass
class SceneConfig:
    """Knobs of the procedural scene generator."""

    image_size: int = 64
    min_shapes: int = 1
    max_shapes: int = 4
    colors: tuple = DEFAULT_COLORS
    shapes: tuple = ("circle", "square", "triangle")
    size_range: tuple = (10, 26)  # bounding-square side, pixels
    small_max: int = 13  # sizes <= this get a "small" prefix
    big_min: int = 23  # sizes >= this get a "big" prefix
    size_words: bool = True
    background: tuple = (20, 20, 24)
    max_attempts: int = 30

    def normalize(self):
        """Rebuild nested sequences as tuples (JSON round-trips as lists)."""
        self.colors = tuple((str(n), tuple(int(c) for c in rgb)) for n, rgb in self.colors)
        self.shapes = tuple(str(s) for s in self.shapes)
        self.size_range = tuple(int(v) for v in self.size_range)
        self.background = tuple(int(v) for v in self.background)
        return self

    def validate(self):
        self.normalize()
        if self.min_shapes < 0 or self.max_shapes < self.min_shapes:
            raise DataError("invalid shape count range")
        if len(self.colors) < 1 or len(self.shapes) < 1:
            raise DataError("need at least one color and one shape")
        lo, hi = self.size_range
        if not 4 <= lo <= hi < self.image_size:
            raise DataError(f"invalid size range {self.size_range}")
        return self


@dataclass
class DetectionSample:
    """One labeled scene: image in [0, 1], normalized center-format boxes,
    and per-object names as token-id tuples (no end marker stored)."""

    image: np.ndarray  # (H, W, 3) float64
    boxes: np.ndarray  # (G, 4) cxcywh in [0, 1]
    names: list  # list of tuple[int, ...]


def build_vocabulary(cfg):
    """All words the generator can emit, in a stable order."""
    words = []
    if cfg.size_words:
        words += ["small", "big"]
    words += [name for name, _ in cfg.colors]
    words += list(cfg.shapes)
    return Vocabulary(list(dict.fromkeys(words)))


def _shape_mask(shape, cx, cy, size, canvas_size):
    yy, xx = np.ogrid[0:canvas_size, 0:canvas_size]
    half = size / 2.0
    if shape == "square":
        return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    if shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= half * half
    if shape == "triangle":
        top = cy - half
        inside_y = (yy >= top) & (yy <= cy + half)
        return inside_y & (np.abs(xx - cx) <= (yy - top) * 0.5)
    raise DataError(f"unknown shape {shape!r}")


def _boxes_overlap(a, b, gap=1):
    return not (
        a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1]
    )


def generate_scene(seed, cfg, vocab):
    """Render one deterministic scene from ``seed``.

    Placement rejects overlapping boxes for up to ``max_attempts`` draws,
    then places regardless. Boxes come from the rendered mask extents of
    each shape, so they are tight by construction.
    """
    rng = np.random.default_rng(seed)
    s = cfg.image_size
    canvas = np.empty((s, s, 3), dtype=np.uint8)
    canvas[:] = cfg.background
    count = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    placed = []
    boxes = []
    names = []
    for _ in range(count):
        for attempt in range(cfg.max_attempts):
            size = int(rng.integers(cfg.size_range[0], cfg.size_range[1] + 1))
            shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
            color_name, rgb = cfg.colors[int(rng.integers(len(cfg.colors)))]
            margin = size // 2 + 1
            cx = int(rng.integers(margin, s - margin))
            cy = int(rng.integers(margin, s - margin))
            mask = _shape_mask(shape, cx, cy, size, s)
            ys, xs = np.nonzero(mask)
            px_box = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
            if attempt == cfg.max_attempts - 1 or not any(
                _boxes_overlap(px_box, other) for other in placed
            ):
                break
        canvas[mask] = rgb
        placed.append(px_box)
        x1, y1, x2, y2 = px_box
        boxes.append(
            ((x1 + x2) / (2 * s), (y1 + y2) / (2 * s), (x2 - x1) / s, (y2 - y1) / s)
        )
        words = [color_name, shape]
        if cfg.size_words:
            if size <= cfg.small_max:
                words.insert(0, "small")
            elif size >= cfg.big_min:
                words.insert(0, "big")
        names.append(tokenize(" ".join(words), vocab))
    return DetectionSample(
        image=canvas.astype(np.float64) / 255.0,
        boxes=np.array(boxes, dtype=np.float64).reshape(len(boxes), 4),
        names=names,
    )


# ---------------------------------------------------------------------------
# PPM (P6) image IO
# ---------------------------------------------------------------------------


def write_ppm(path, image):
    """Write an [0, 1] float image as binary PPM with maxval 255."""
    arr = np.asarray(image)
    data = np.rint(arr * 255.0).astype(np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path):
    """Read a binary PPM back into an (H, W, 3) float64 image in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()

    pos = 0

    def fail(msg):
        raise DataError(f"{path}: {msg} at byte offset {pos}")

    def next_token():
        nonlocal pos
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            return next_token()
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            fail("unexpected end of header")
        return blob[start:pos]

    if next_token() != b"P6":
        fail("not a binary PPM (expected magic P6)")
    try:
        w, h, maxval = int(next_token()), int(next_token()), int(next_token())
    except ValueError:
        fail("non-numeric header field")
    if maxval != 255:
        fail(f"unsupported maxval {maxval} (expected 255)")
    pos += 1  # single whitespace byte after maxval
    expected = w * h * 3
    if len(blob) - pos != expected:
        fail(f"expected {expected} pixel bytes, found {len(blob) - pos}")
    data = np.frombuffer(blob, dtype=np.uint8, offset=pos).reshape(h, w, 3)
    return data.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# dataset IO
# ---------------------------------------------------------------------------


def write_dataset(dirpath, samples, vocab):
    """Write samples as numbered PPMs plus an annotations/vocab JSON."""
    os.makedirs(dirpath, exist_ok=True)
    entries = []
    for i, sample in enumerate(samples):
        image_name = f"{i + 1:04d}.ppm"
        write_ppm(os.path.join(dirpath, image_name), sample.image)
        entries.append(
            {
                "image": image_name,
                "boxes": [[float(v) for v in box] for box in sample.boxes],
                "names": [list(map(int, name)) for name in sample.names],
            }
        )
    doc = {"version": DATASET_VERSION, "vocab": list(vocab.words), "samples": entries}
    with open(os.path.join(dirpath, ANNOTATIONS_NAME), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def read_dataset(dirpath):
    """Read a dataset directory back into (samples, vocabulary)."""
    ann_path = os.path.join(dirpath, ANNOTATIONS_NAME)
    try:
        with open(ann_path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"{ann_path}: missing annotations file") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{ann_path}: invalid JSON at line {e.lineno} column {e.colno}") from None
    if not isinstance(doc, dict):
        raise DataError(f"{ann_path}: top level must be an object")
    missing = {"version", "vocab", "samples"} - set(doc)
    if missing:
        raise DataError(f"{ann_path}: missing keys {sorted(missing)}")
    if doc["version"] != DATASET_VERSION:
        raise DataError(f"{ann_path}: unsupported version {doc['version']!r}")
    vocab = Vocabulary([str(w) for w in doc["vocab"]])
    samples = []
    for k, entry in enumerate(doc["samples"]):
        where = f"{ann_path}: sample {k}"
        if not isinstance(entry, dict) or {"image", "boxes", "names"} - set(entry):
            raise DataError(f"{where}: needs image/boxes/names")
        boxes = np.asarray(entry["boxes"], dtype=np.float64).reshape(-1, 4)
        names = [tuple(int(t) for t in name) for name in entry["names"]]
        if len(names) != len(boxes):
            raise DataError(f"{where}: {len(boxes)} boxes but {len(names)} names")
        for name in names:
            for t in name:
                if not NUM_RESERVED <= t < len(vocab):
                    raise DataError(f"{where}: token id {t} outside vocabulary")
        image = read_ppm(os.path.join(dirpath, entry["image"]))
        samples.append(DetectionSample(image=image, boxes=boxes, names=names))
    return samples, vocab

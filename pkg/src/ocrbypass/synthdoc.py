"""Synthetic word-strip dataset: glyph rendering, degradations, and manifest I/O.

Strips are rendered from a fixed-width glyph atlas (white background, black
ink), grouped into documents of consecutive strips, degraded with a
per-document severity level, and stored as 8-bit grayscale PNGs next to a
JSON-lines manifest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import uniform_filter

__all__ = [
    "MARGIN",
    "SPLITS",
    "GlyphAtlas",
    "TextStrip",
    "SynthDocument",
    "DegradationConfig",
    "DegradationRanges",
    "render_clean",
    "degrade",
    "generate_dataset",
    "load_dataset",
    "documents_from_strips",
    "load_words",
    "save_png",
    "load_png",
    "quantize",
]

MARGIN = 4
SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class GlyphAtlas:
    """Fixed-width binary font: one glyph_height x glyph_width bitmap per character."""

    glyph_height: int
    glyph_width: int
    glyphs: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        for ch, bitmap in self.glyphs.items():
            if bitmap.shape != (self.glyph_height, self.glyph_width):
                raise ValueError(f"glyph {ch!r} has shape {bitmap.shape}, expected "
                                 f"({self.glyph_height}, {self.glyph_width})")

    @property
    def characters(self) -> str:
        return "".join(sorted(self.glyphs))

    @classmethod
    def from_json(cls, path: str | Path) -> "GlyphAtlas":
        doc = json.loads(Path(path).read_text())
        glyphs = {
            ch: np.array([[c == "1" for c in row] for row in rows], dtype=bool)
            for ch, rows in doc["glyphs"].items()
        }
        return cls(glyph_height=doc["glyph_height"], glyph_width=doc["glyph_width"], glyphs=glyphs)

    @classmethod
    def load_default(cls) -> "GlyphAtlas":
        with resources.as_file(resources.files("ocrbypass.assets") / "glyph_atlas.json") as p:
            return cls.from_json(p)


@dataclass(eq=False)
class TextStrip:
    """One word image with its label and document/split membership."""

    sample_id: str
    image: np.ndarray  # H x W, float in [0, 1], 1 = white
    text: str
    document_id: str
    split: str


@dataclass(frozen=True)
class SynthDocument:
    """Ordered group of strips sharing one degradation severity (pruning unit)."""

    document_id: str
    strip_ids: tuple[str, ...]


@dataclass(frozen=True)
class DegradationConfig:
    """Per-strip degradation parameters; applied in a fixed order (see degrade)."""

    gaussian_sigma: float = 0.0
    salt_pepper_rate: float = 0.0
    background_shade: float = 0.0
    blur_radius: int = 0
    occlusion_rate: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.gaussian_sigma < 0:
            raise ValueError("gaussian_sigma must be >= 0")
        for name in ("salt_pepper_rate", "background_shade", "occlusion_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.blur_radius < 0:
            raise ValueError("blur_radius must be >= 0")


@dataclass(frozen=True)
class DegradationRanges:
    """Low/high bounds per degradation parameter; severity interpolates between them.

    Blur is binary (radius jumps from min to max once severity crosses
    blur_threshold). The default knobs weight the shade-times-noise interaction:
    past mid severity the raw engine rejects most strips (speckle crosses its
    binarize threshold), yet a denoised strip stays readable, so preprocessing
    has recoverable headroom. Occlusion is kept small because it destroys
    strokes outright and nothing upstream can restore them.
    """

    gaussian_sigma: tuple[float, float] = (0.06, 0.32)
    salt_pepper_rate: tuple[float, float] = (0.0, 0.10)
    background_shade: tuple[float, float] = (0.0, 0.42)
    blur_radius: tuple[int, int] = (0, 1)
    blur_threshold: float = 0.35
    occlusion_rate: tuple[float, float] = (0.0, 0.03)

    def at(self, severity: float, seed: int) -> DegradationConfig:
        """Interpolate every range at severity in [0, 1]."""
        t = float(np.clip(severity, 0.0, 1.0))

        def lerp(lo: float, hi: float) -> float:
            return lo + t * (hi - lo)

        return DegradationConfig(
            gaussian_sigma=lerp(*self.gaussian_sigma),
            salt_pepper_rate=lerp(*self.salt_pepper_rate),
            background_shade=lerp(*self.background_shade),
            blur_radius=self.blur_radius[1] if t >= self.blur_threshold else self.blur_radius[0],
            occlusion_rate=lerp(*self.occlusion_rate),
            seed=seed,
        )


def render_clean(text: str, atlas: GlyphAtlas, margin: int = MARGIN) -> np.ndarray:
    """Render text on the fixed-width glyph grid: white 1.0 background, black 0.0 ink.

    Output is (glyph_height + 2*margin) x (glyph_width*len(text) + 2*margin).
    """
    for ch in text:
        if ch not in atlas.glyphs:
            raise ValueError(f"character {ch!r} not present in the glyph atlas")
    gh, gw = atlas.glyph_height, atlas.glyph_width
    img = np.ones((gh + 2 * margin, gw * len(text) + 2 * margin), dtype=np.float64)
    for pos, ch in enumerate(text):
        left = margin + pos * gw
        cell = img[margin : margin + gh, left : left + gw]
        cell[atlas.glyphs[ch]] = 0.0
    return img


def degrade(image: np.ndarray, cfg: DegradationConfig) -> np.ndarray:
    """Apply background shading, box blur, Gaussian noise, salt-and-pepper, and
    occlusion, in that fixed order, then clamp to [0, 1].

    Deterministic given cfg.seed; with all parameters zero the output equals
    the input bit for bit.
    """
    rng = np.random.default_rng(cfg.seed)
    img = image.astype(np.float64, copy=True)

    # 1. Background shading: darken toward gray (ink at 0.0 is unaffected).
    img *= 1.0 - cfg.background_shade

    # 2. Box blur of integer radius (skip 0 so the identity case stays exact).
    if cfg.blur_radius > 0:
        img = uniform_filter(img, size=2 * cfg.blur_radius + 1, mode="nearest")

    # 3. Additive Gaussian pixel noise.
    img += rng.normal(0.0, cfg.gaussian_sigma, size=img.shape)

    # 4. Salt-and-pepper: each hit pixel goes fully white or fully black.
    hits = rng.random(img.shape) < cfg.salt_pepper_rate
    salt = rng.random(img.shape) < 0.5
    img[hits & salt] = 1.0
    img[hits & ~salt] = 0.0

    # 5. At most one black occlusion patch per strip.
    if rng.random() < cfg.occlusion_rate:
        h, w = img.shape
        ph = int(rng.integers(4, max(5, h // 2)))
        pw = int(rng.integers(3, max(4, w // 3)))
        top = int(rng.integers(0, h - ph + 1))
        left = int(rng.integers(0, w - pw + 1))
        img[top : top + ph, left : left + pw] = 0.0

    return np.clip(img, 0.0, 1.0)


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap values to the 8-bit grid used by PNG storage (round(v*255)/255)."""
    return np.round(image * 255.0) / 255.0


def save_png(path: str | Path, image: np.ndarray) -> None:
    data = np.round(image * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(Path(path))


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(Path(path)) as im:
        data = np.asarray(im.convert("L"), dtype=np.float64)
    return data / 255.0


def load_words(path: str | Path | None = None) -> list[str]:
    """Load the word list (shipped asset by default), one word per line."""
    if path is None:
        with resources.as_file(resources.files("ocrbypass.assets") / "words.txt") as p:
            text = Path(p).read_text()
    else:
        text = Path(path).read_text()
    return [w for w in text.split() if w]


def documents_from_strips(strips: Sequence[TextStrip]) -> list[SynthDocument]:
    """Group strips into documents by document_id, preserving first-seen order."""
    order: dict[str, list[str]] = {}
    for strip in strips:
        order.setdefault(strip.document_id, []).append(strip.sample_id)
    return [SynthDocument(document_id=d, strip_ids=tuple(ids)) for d, ids in order.items()]


def generate_dataset(
    out_dir: str | Path,
    word_list: Sequence[str],
    atlas: GlyphAtlas,
    counts: tuple[int, int, int],
    strips_per_document: int = 10,
    ranges: DegradationRanges = DegradationRanges(),
    severity_jitter: float = 0.1,
    seed: int = 0,
) -> list[TextStrip]:
    """Generate degraded strips for the (train, validation, test) splits.

    Documents are groups of strips_per_document consecutive strips sharing one
    severity level drawn uniformly from [0, 1]; each strip jitters that level
    slightly, so mean document CER under the black box tracks severity. Writes
    images/<sample_id>.png plus manifest.jsonl and returns the strips with
    their stored (8-bit quantized) pixel values.
    """
    if strips_per_document < 1:
        raise ValueError("strips_per_document must be >= 1")
    if any(c < 1 for c in counts):
        raise ValueError("every split count must be >= 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    strips: list[TextStrip] = []
    for split, count in zip(SPLITS, counts):
        severity = 0.0
        for idx in range(count):
            doc_idx = idx // strips_per_document
            if idx % strips_per_document == 0:
                severity = float(rng.random())
            sample_id = f"{split}-{idx:05d}"
            document_id = f"{split}-doc-{doc_idx:04d}"
            text = str(word_list[int(rng.integers(0, len(word_list)))])
            local = float(np.clip(severity + rng.normal(0.0, severity_jitter), 0.0, 1.0))
            cfg = ranges.at(local, seed=int(rng.integers(0, 2**31)))
            img = quantize(degrade(render_clean(text, atlas), cfg))
            save_png(out / "images" / f"{sample_id}.png", img)
            strips.append(TextStrip(sample_id=sample_id, image=img, text=text,
                                    document_id=document_id, split=split))

    with (out / "manifest.jsonl").open("w") as fh:
        for strip in strips:
            fh.write(json.dumps({
                "sample_id": strip.sample_id,
                "path": f"images/{strip.sample_id}.png",
                "text": strip.text,
                "document_id": strip.document_id,
                "split": strip.split,
            }) + "\n")
    return strips


def load_dataset(manifest_path: str | Path) -> list[TextStrip]:
    """Load every strip recorded in a manifest; paths resolve relative to it."""
    manifest = Path(manifest_path)
    base = manifest.parent
    strips = []
    with manifest.open() as fh:
        for line in fh:
            row = json.loads(line)
            strips.append(TextStrip(
                sample_id=row["sample_id"],
                image=load_png(base / row["path"]),
                text=row["text"],
                document_id=row["document_id"],
                split=row["split"],
            ))
    return strips

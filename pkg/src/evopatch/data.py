"""Manifest ingestion, subject-disjoint splits and the synthetic glyph-face generator."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .geometry import PatchRect
from .imaging import GrayImage, hist_equalize, read_pixels, write_png

MANIFEST_SCHEMA = "evopatch.manifest/1"
SYNTH_SCHEMA = "evopatch.synthetic/1"
REGIONS_SCHEMA = "evopatch.regions/1"


class DatasetError(ValueError):
    pass


class ManifestError(DatasetError):
    def __init__(self, path, problems: list[tuple[int, str]]):
        self.problems = problems
        lines = "\n".join(f"  line {n}: {msg}" for n, msg in problems)
        super().__init__(f"{path}: {len(problems)} bad manifest row(s)\n{lines}")


# --- manifest ---------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    image: str
    label: int
    subject: str
    nose: tuple[int, int]

    def to_row(self) -> dict:
        return {"image": self.image, "label": self.label, "subject": self.subject, "nose": list(self.nose)}


def write_manifest(path: str | Path, entries: Iterable[ManifestEntry], num_classes: int) -> None:
    """JSON Lines: a header row with schema and class count, then one row per image."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": MANIFEST_SCHEMA, "num_classes": num_classes}) + "\n")
        for e in entries:
            fh.write(json.dumps(e.to_row()) + "\n")


def read_manifest(path: str | Path) -> tuple[int, list[ManifestEntry]]:
    num_classes, rows = _read_rows(path)
    return num_classes, [e for _, e in rows]


def _read_rows(path: str | Path) -> tuple[int, list[tuple[int, ManifestEntry]]]:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].strip():
        raise DatasetError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(path, [(1, f"bad header: {exc}")]) from None
    if header.get("schema") != MANIFEST_SCHEMA or not isinstance(header.get("num_classes"), int):
        raise ManifestError(path, [(1, f"header must be {{'schema': {MANIFEST_SCHEMA!r}, 'num_classes': int}}")])
    num_classes = header["num_classes"]
    entries, problems = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            nose = row["nose"]
            entry = ManifestEntry(str(row["image"]), int(row["label"]), str(row["subject"]), (nose[0], nose[1]))
        except (json.JSONDecodeError, KeyError, TypeError, IndexError, ValueError) as exc:
            problems.append((lineno, f"malformed row: {exc}"))
            continue
        if not 0 <= entry.label < num_classes:
            problems.append((lineno, f"label {entry.label} outside [0, {num_classes})"))
            continue
        entries.append((lineno, entry))
    if problems:
        raise ManifestError(path, problems)
    if not entries:
        raise DatasetError(f"{path}: manifest lists no images")
    return num_classes, entries


def load_manifest(path: str | Path) -> tuple[list[GrayImage], int]:
    """Load every listed image as equalized grayscale; returns (images, num_classes).

    All row failures are collected and raised together with their line numbers.
    """
    path = Path(path)
    num_classes, rows = _read_rows(path)
    images, problems = [], []
    for lineno, e in rows:
        img_path = path.parent / e.image
        try:
            pixels = read_pixels(img_path)
        except (OSError, ValueError) as exc:
            problems.append((lineno, f"cannot read {img_path}: {exc}"))
            continue
        h, w = pixels.shape
        nx, ny = (int(round(v)) for v in e.nose)
        if not (0 <= nx < w and 0 <= ny < h):
            problems.append((lineno, f"nose ({nx}, {ny}) outside {w}x{h} image {e.image}"))
            continue
        images.append(hist_equalize(GrayImage(pixels, (nx, ny), e.label, e.subject)))
    if problems:
        raise ManifestError(path, problems)
    return images, num_classes


# --- splitting --------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    train_subjects: frozenset[str]
    val_subjects: frozenset[str]
    test_subjects: frozenset[str]

    def partition(self, images: Sequence[GrayImage]):
        pick = lambda subs: [img for img in images if img.subject in subs]  # noqa: E731
        return pick(self.train_subjects), pick(self.val_subjects), pick(self.test_subjects)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def plan_split(subjects: Iterable[str], test_frac: float = 0.30, val_frac: float = 0.20, seed: int = 0) -> SplitPlan:
    subs = sorted(set(subjects))
    if len(subs) < 3:
        raise DatasetError(f"need at least 3 subjects for a subject-disjoint split, got {len(subs)}")
    n = len(subs)
    n_test = min(max(1, _round_half_up(test_frac * n)), n - 2)
    n_val = min(max(1, _round_half_up(val_frac * (n - n_test))), n - n_test - 1)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [subs[i] for i in order]
    return SplitPlan(
        frozenset(shuffled[n_test + n_val :]),
        frozenset(shuffled[n_test : n_test + n_val]),
        frozenset(shuffled[:n_test]),
    )


def split_by_subject(images: Sequence[GrayImage], test_frac: float = 0.30, val_frac: float = 0.20, seed: int = 0):
    """(train, val, test) image lists with no subject shared between them."""
    plan = plan_split((img.subject for img in images), test_frac, val_frac, seed)
    return plan.partition(images)


# --- synthetic data ---------------------------------------------------------

# relative to the nose: (dx, dy, width, height); eyes and mouth
DEFAULT_REGIONS = ((-42, -36, 36, 28), (6, -36, 36, 28), (-24, 16, 48, 30))
MAX_GLYPH_CLASSES = 7


@dataclass(frozen=True)
class SyntheticSpec:
    """Face-like images where class evidence lives only inside ``glyph_regions``.

    ``glyph_regions[c]`` lists nose-relative rectangles ``(dx, dy, w, h)`` used for
    class ``c``. Each subject renders ``expressions_per_subject`` images, cycling
    through classes starting at its home class.
    """

    image_size: int = 128
    num_classes: int = 3
    subjects_per_class: int = 6
    expressions_per_subject: int = 1
    glyph_regions: tuple[tuple[tuple[int, int, int, int], ...], ...] = ()
    jitter: int = 2
    nose_jitter: int = 4
    stroke: float = 4.0
    rng_seed: int = 0
    schema: str = SYNTH_SCHEMA

    def __post_init__(self):
        regions = self.glyph_regions or tuple(DEFAULT_REGIONS for _ in range(self.num_classes))
        regions = tuple(tuple(tuple(int(v) for v in r) for r in per_class) for per_class in regions)
        object.__setattr__(self, "glyph_regions", regions)

    def validate(self) -> None:
        if self.schema != SYNTH_SCHEMA:
            raise DatasetError(f"unknown synthetic spec schema {self.schema!r}")
        if not 2 <= self.num_classes <= MAX_GLYPH_CLASSES:
            raise DatasetError(f"num_classes must be in [2, {MAX_GLYPH_CLASSES}]")
        if self.subjects_per_class < 1 or not 1 <= self.expressions_per_subject <= self.num_classes:
            raise DatasetError("need subjects_per_class >= 1 and 1 <= expressions_per_subject <= num_classes")
        if len(self.glyph_regions) != self.num_classes:
            raise DatasetError(f"glyph_regions lists {len(self.glyph_regions)} classes, expected {self.num_classes}")
        if self.jitter < 0 or self.nose_jitter < 0:
            raise DatasetError("jitter values must be non-negative")
        size = self.image_size
        c = size // 2
        lo, hi = c - self.nose_jitter, c + self.nose_jitter
        for cls, per_class in enumerate(self.glyph_regions):
            if not per_class:
                raise DatasetError(f"class {cls} has no glyph region")
            for dx, dy, w, h in per_class:
                if w < 4 or h < 4:
                    raise DatasetError(f"class {cls} region {(dx, dy, w, h)} is smaller than 4x4")
                if lo + dx < 0 or lo + dy < 0 or hi + dx + w > size or hi + dy + h > size:
                    raise DatasetError(f"class {cls} region {(dx, dy, w, h)} leaves the {size}x{size} image")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["glyph_regions"] = [[list(r) for r in per_class] for per_class in self.glyph_regions]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "glyph_regions" in d:
            d["glyph_regions"] = tuple(tuple(tuple(r) for r in per_class) for per_class in d["glyph_regions"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise DatasetError(f"bad synthetic spec: {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticSpec":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: {exc}") from None

    @property
    def num_subjects(self) -> int:
        return self.num_classes * self.subjects_per_class


def _curve(kind: int, w: int, h: int) -> np.ndarray:
    """Sample points (x, y) of glyph ``kind`` centred on the origin."""
    t = np.linspace(0.0, 1.0, 80)
    ax, ay = 0.38 * w, 0.32 * h
    if kind == 0:  # horizontal bar
        pts = np.stack([(2 * t - 1) * ax, 0 * t], 1)
    elif kind == 1:  # smile
        th = np.pi * t
        pts = np.stack([ax * np.cos(th), ay * np.sin(th) - 0.3 * ay], 1)
    elif kind == 2:  # ring
        th = 2 * np.pi * t
        pts = np.stack([0.8 * ax * np.cos(th), ay * np.sin(th)], 1)
    elif kind == 3:  # frown
        th = np.pi + np.pi * t
        pts = np.stack([ax * np.cos(th), ay * np.sin(th) + 0.3 * ay], 1)
    elif kind == 4:  # vertical bar
        pts = np.stack([0 * t, (2 * t - 1) * ay], 1)
    elif kind == 5:  # cross
        a = np.stack([(2 * t - 1) * ax, (2 * t - 1) * ay], 1)
        pts = np.concatenate([a, a * [1, -1]])
    elif kind == 6:  # slash
        pts = np.stack([(2 * t - 1) * ax, (1 - 2 * t) * ay], 1)
    else:
        raise DatasetError(f"no glyph for class {kind}")
    return pts


def render_glyph(kind: int, w: int, h: int, shift: tuple[int, int], stroke: float) -> np.ndarray:
    """Boolean w x h stroke mask for one glyph, shifted by ``shift`` and clipped to the box."""
    pts = _curve(kind, w, h) + [(w - 1) / 2 + shift[0], (h - 1) / 2 + shift[1]]
    yy, xx = np.mgrid[0:h, 0:w]
    d2 = (xx[..., None] - pts[:, 0]) ** 2 + (yy[..., None] - pts[:, 1]) ** 2
    return d2.min(axis=-1) <= (stroke / 2) ** 2


def _subject_base(spec: SyntheticSpec, subject: int) -> tuple[np.ndarray, tuple[int, int]]:
    rng = np.random.default_rng([spec.rng_seed, 1, subject])
    size = spec.image_size
    c = size // 2
    nose = tuple(int(v) for v in c + rng.integers(-spec.nose_jitter, spec.nose_jitter + 1, size=2))
    yy, xx = np.mgrid[0:size, 0:size]
    rx, ry = 0.36 * size * rng.uniform(0.92, 1.08), 0.44 * size * rng.uniform(0.92, 1.08)
    face = ((xx - nose[0]) / rx) ** 2 + ((yy - nose[1] + 0.06 * size) / ry) ** 2 <= 1.0
    texture = ndimage.gaussian_filter(rng.normal(size=(size, size)), 3.0)
    texture *= 28.0 / (texture.std() + 1e-12)
    skin = rng.uniform(130, 185)
    base = np.where(face, skin, rng.uniform(25, 70)) + texture
    base += rng.normal(0.0, 4.0, size=(size, size))
    return np.clip(np.floor(base + 0.5), 0, 255).astype(np.uint8), nose


def region_rects(spec: SyntheticSpec, label: int, nose: tuple[int, int]) -> list[PatchRect]:
    return [PatchRect(nose[0] + dx, nose[1] + dy, w, h) for dx, dy, w, h in spec.glyph_regions[label]]


def render_sample(spec: SyntheticSpec, subject: int, label: int) -> GrayImage:
    """One image of ``subject`` showing class ``label``; glyph pixels never leave the regions."""
    data, nose = _subject_base(spec, subject)
    data = data.copy()
    rng = np.random.default_rng([spec.rng_seed, 2, subject, label])
    for r in region_rects(spec, label, nose):
        shift = tuple(int(v) for v in rng.integers(-spec.jitter, spec.jitter + 1, size=2))
        mask = render_glyph(label, r.width, r.height, shift, spec.stroke)
        box = data[r.top : r.bottom, r.left : r.right]
        box[mask] = np.uint8(rng.integers(10, 40))
    return GrayImage(data, nose, label, f"s{subject:03d}")


def generate_synthetic(spec: SyntheticSpec) -> list[GrayImage]:
    spec.validate()
    images = []
    for s in range(spec.num_subjects):
        home = s // spec.subjects_per_class
        for j in range(spec.expressions_per_subject):
            images.append(render_sample(spec, s, (home + j) % spec.num_classes))
    return images


def write_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> Path:
    """Write PNGs, a manifest and the ground-truth region file; returns the manifest path."""
    images = generate_synthetic(spec)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, img in enumerate(images):
        name = f"images/{img.subject}_c{img.label}_{i:04d}.png"
        write_png(out / name, img.data)
        entries.append(ManifestEntry(name, img.label, img.subject, img.nose))
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, entries, spec.num_classes)
    regions = {
        "schema": REGIONS_SCHEMA,
        "relative_to": "nose",
        "regions": [[list(r) for r in per_class] for per_class in spec.glyph_regions],
    }
    (out / "regions.json").write_text(json.dumps(regions, indent=1) + "\n")
    (out / "synthetic_spec.json").write_text(json.dumps(spec.to_dict(), indent=1) + "\n")
    return manifest


def load_regions(path: str | Path) -> list[list[tuple[int, int, int, int]]]:
    d = json.loads(Path(path).read_text())
    if d.get("schema") != REGIONS_SCHEMA:
        raise DatasetError(f"{path}: not a region file")
    return [[tuple(r) for r in per_class] for per_class in d["regions"]]

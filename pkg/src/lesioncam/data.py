"""Labels, manifests, image IO, resizing and the synthetic dermoscopy generator."""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import FormatError, UsageError, ValidationError

CLASS_NAMES = ("melanoma", "seborrheic_keratosis", "nevus")
MELANOMA, SEBORRHEIC_KERATOSIS, NEVUS = 0, 1, 2


@dataclass(frozen=True)
class BBox:
    """Pixel box; x0/y0 inclusive, x1/y1 exclusive."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def height(self):
        return self.y1 - self.y0

    def is_valid(self, image_w, image_h):
        return 0 <= self.x0 < self.x1 <= image_w and 0 <= self.y0 < self.y1 <= image_h

    def crop(self, image):
        return image[self.y0:self.y1, self.x0:self.x1]

    def contains(self, x, y):
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1

    def __str__(self):
        return f"{self.x0} {self.y0} {self.x1} {self.y1}"


@dataclass(frozen=True)
class LabelRecord:
    image_id: str
    melanoma: int
    seborrheic_keratosis: int

    def __post_init__(self):
        if self.melanoma and self.seborrheic_keratosis:
            raise ValidationError(f"{self.image_id}: melanoma and seborrheic_keratosis both set")

    @property
    def class_id(self) -> int:
        if self.melanoma:
            return MELANOMA
        if self.seborrheic_keratosis:
            return SEBORRHEIC_KERATOSIS
        return NEVUS

    @classmethod
    def from_class(cls, image_id, class_id):
        return cls(image_id, int(class_id == MELANOMA), int(class_id == SEBORRHEIC_KERATOSIS))


def class_counts(records) -> tuple[int, int, int]:
    counts = [0, 0, 0]
    for r in records:
        counts[r.class_id] += 1
    return tuple(counts)


def _parse_flag(text, lineno):
    try:
        value = float(text)
    except ValueError:
        raise FormatError(f"line {lineno}: flag {text!r} is not a number") from None
    if value not in (0.0, 1.0):
        raise FormatError(f"line {lineno}: flag {text!r} not in {{0, 1}}")
    return int(value)


def load_labels(csv_path) -> list[LabelRecord]:
    """Read an ISIC-2017 style ground-truth CSV (image_id,melanoma,seborrheic_keratosis)."""
    records = []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return records
        header = [h.strip() for h in header]
        if header[:3] != ["image_id", "melanoma", "seborrheic_keratosis"]:
            raise FormatError(f"line 1: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or not any(cell.strip() for cell in row):
                continue
            if len(row) < 3:
                raise FormatError(f"line {lineno}: expected 3 fields, got {len(row)}")
            image_id = row[0].strip()
            mel, sk = _parse_flag(row[1], lineno), _parse_flag(row[2], lineno)
            if mel and sk:
                raise ValidationError(f"line {lineno} ({image_id}): melanoma and seborrheic_keratosis both 1")
            records.append(LabelRecord(image_id, mel, sk))
    return records


def write_labels(records, csv_path):
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "melanoma", "seborrheic_keratosis"])
        for r in records:
            w.writerow([r.image_id, r.melanoma, r.seborrheic_keratosis])


# ---------------------------------------------------------------- manifests

@dataclass
class ManifestEntry:
    path: Path
    label: LabelRecord
    bbox: BBox | None = None

    @property
    def class_id(self):
        return self.label.class_id

    @property
    def image_id(self):
        return self.label.image_id


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def labels(self) -> list[LabelRecord]:
        return [e.label for e in self.entries]

    def check_paths(self):
        missing = [str(e.path) for e in self.entries if not Path(e.path).exists()]
        if missing:
            raise FormatError(f"manifest references missing images: {missing[:5]}")


MANIFEST_FIELDS = ["image_path", "melanoma", "seborrheic_keratosis"]
BBOX_FIELDS = ["bbox_x0", "bbox_y0", "bbox_x1", "bbox_y1"]


def write_manifest(manifest: DatasetManifest, csv_path):
    csv_path = Path(csv_path)
    with_bbox = any(e.bbox is not None for e in manifest.entries)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS + (BBOX_FIELDS if with_bbox else []))
        for e in manifest.entries:
            path = Path(e.path)
            try:
                path = path.relative_to(csv_path.parent)
            except ValueError:
                pass
            row = [path.as_posix(), e.label.melanoma, e.label.seborrheic_keratosis]
            if with_bbox:
                b = e.bbox
                row += [b.x0, b.y0, b.x1, b.y1] if b is not None else ["", "", "", ""]
            w.writerow(row)


def read_manifest(csv_path, check=True) -> DatasetManifest:
    """Read a manifest CSV; relative image paths resolve against the CSV's directory."""
    csv_path = Path(csv_path)
    root = csv_path.parent
    entries = []
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or reader.fieldnames[:3] != MANIFEST_FIELDS:
            raise FormatError(f"{csv_path}: manifest header must start with {MANIFEST_FIELDS}")
        for lineno, row in enumerate(reader, start=2):
            path = Path(row["image_path"])
            if not path.is_absolute():
                path = root / path
            mel = _parse_flag(row["melanoma"], lineno)
            sk = _parse_flag(row["seborrheic_keratosis"], lineno)
            if mel and sk:
                raise ValidationError(f"line {lineno}: melanoma and seborrheic_keratosis both 1")
            bbox = None
            if all(row.get(k) not in (None, "") for k in BBOX_FIELDS):
                try:
                    bbox = BBox(*(int(row[k]) for k in BBOX_FIELDS))
                except ValueError:
                    raise FormatError(f"line {lineno}: bad bbox values") from None
            entries.append(ManifestEntry(path, LabelRecord(path.stem, mel, sk), bbox))
    manifest = DatasetManifest(root, entries)
    if check:
        manifest.check_paths()
    return manifest


# ---------------------------------------------------------------- image IO


def _pnm_tokens(data: bytes, count: int):
    """Return ``count`` whitespace-separated header tokens and the offset after them."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                end = data.find(b"\n", pos)
                pos = len(data) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def _decode_pnm(data: bytes, path):
    magic = data[:2]
    channels = {b"P6": 3, b"P5": 1}[magic]
    try:
        tokens, pos = _pnm_tokens(data[2:], 3)
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError(f"{path}: malformed PNM header") from None
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise FormatError(f"{path}: unsupported PNM dimensions/maxval ({w}, {h}, {maxval})")
    pos += 2
    need = w * h * channels
    raster = data[pos:pos + need]
    if len(raster) != need:
        raise FormatError(f"{path}: truncated raster ({len(raster)} of {need} bytes)")
    arr = np.frombuffer(raster, dtype=np.uint8).copy()
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def decode_image(path) -> np.ndarray:
    """Read PPM (P6), PGM (P5) or PNG into uint8 (H,W,3) or (H,W)."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if data[:2] in (b"P6", b"P5"):
        return _decode_pnm(data, path)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            with Image.open(path) as im:
                im.load()
                if im.mode not in ("L", "RGB"):
                    im = im.convert("RGB")
                return np.asarray(im, dtype=np.uint8).copy()
        except (OSError, ValueError) as exc:
            raise FormatError(f"{path}: corrupt PNG ({exc})") from None
    raise FormatError(f"{path}: unsupported image format")


def encode_image(image, path):
    """Write uint8 image; format chosen by suffix (.ppm, .pgm, .png)."""
    path = Path(path)
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise FormatError(f"encode_image expects uint8, got {image.dtype}")
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pgm"):
        if suffix == ".ppm" and (image.ndim != 3 or image.shape[2] != 3):
            raise FormatError(f"PPM needs an (H,W,3) image, got {image.shape}")
        if suffix == ".pgm" and image.ndim != 2:
            raise FormatError(f"PGM needs an (H,W) image, got {image.shape}")
        h, w = image.shape[:2]
        magic = b"P6" if suffix == ".ppm" else b"P5"
        path.write_bytes(magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(image).tobytes())
    elif suffix == ".png":
        Image.fromarray(image).save(path)
    else:
        raise FormatError(f"{path}: unsupported output format {suffix!r}")


def as_rgb(image) -> np.ndarray:
    image = np.asarray(image)
    return np.repeat(image[..., None], 3, axis=2) if image.ndim == 2 else image


# ---------------------------------------------------------------- resizing

def _sample_positions(src, dst):
    if dst == 1:
        return np.array([(src - 1) / 2.0])
    return np.arange(dst) * ((src - 1) / (dst - 1))


def bilinear(grid, out_h, out_w) -> np.ndarray:
    """Corner-aligned bilinear resampling of a 2-D or (H,W,C) float array."""
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape[:2]
    ys, xs = _sample_positions(h, out_h), _sample_positions(w, out_w)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    fy, fx = ys - y0, xs - x0
    if grid.ndim == 3:
        fy, fx = fy[:, None, None], fx[None, :, None]
    else:
        fy, fx = fy[:, None], fx[None, :]
    # lerp form a + (b - a) * f keeps constant regions exactly constant
    a, b = grid[y0][:, x0], grid[y0][:, x1]
    top = a + (b - a) * fx
    a, b = grid[y1][:, x0], grid[y1][:, x1]
    bottom = a + (b - a) * fx
    return top + (bottom - top) * fy


def resize_bilinear(image, width, height) -> np.ndarray:
    """Resize to ``width`` x ``height``; uint8 input is rounded back to uint8."""
    if width < 1 or height < 1:
        raise UsageError(f"target size must be positive, got {width}x{height}")
    image = np.asarray(image)
    out = bilinear(image, height, width)
    if image.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out.astype(image.dtype if image.dtype.kind == "f" else np.float64)


# ---------------------------------------------------------------- synthetic data

@dataclass
class SyntheticSpec:
    image_size: int = 64
    per_class: int = 100
    hair_density: int = 0
    seed: int = 0
    hair_max_width: int = 3


@dataclass
class SyntheticSample:
    image_id: str
    image: np.ndarray  # uint8 (H,W,3), hairs included
    clean: np.ndarray  # same image before hairs were drawn
    class_id: int
    bbox: BBox
    lesion_mask: np.ndarray
    hair_mask: np.ndarray

    @property
    def label(self):
        return LabelRecord.from_class(self.image_id, self.class_id)


SKIN = np.array([222.0, 182.0, 158.0])
# offsets from SKIN point in distinct colour directions, so classes differ in hue and not only in darkness
LESION_COLORS = {
    MELANOMA: SKIN + np.array([-140.0, -140.0, -140.0]),
    SEBORRHEIC_KERATOSIS: SKIN + np.array([-90.0, -40.0, -20.0]),
    NEVUS: SKIN + np.array([-30.0, -70.0, -110.0]),
}
HAIR_COLOR = np.array([38.0, 28.0, 24.0])


def _ellipse(yy, xx, cy, cx, ry, rx, angle):
    c, s = np.cos(angle), np.sin(angle)
    u = ((xx - cx) * c + (yy - cy) * s) / rx
    v = (-(xx - cx) * s + (yy - cy) * c) / ry
    return u * u + v * v


def _draw_lesion(rng, size, class_id):
    """Return (float RGB image of the lesion over skin, boolean lesion mask)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    radius = rng.uniform(0.14, 0.21) * size
    margin = radius * 1.35 + 2
    cy, cx = rng.uniform(margin, size - margin, size=2)
    shade = 1 + 0.04 * np.sin(xx / size * rng.uniform(2, 5) + rng.uniform(0, 6))
    img = SKIN[None, None] * shade[..., None] + rng.normal(0, 2.5, (size, size, 3))
    color = LESION_COLORS[class_id] + rng.uniform(-10, 10, 3)
    if class_id == MELANOMA:
        # several overlapping lobes with ragged radii
        field = np.full((size, size), np.inf)
        for _ in range(rng.integers(3, 6)):
            off = rng.uniform(0, radius * 0.55)
            ang = rng.uniform(0, 2 * np.pi)
            ly, lx = cy + off * np.sin(ang), cx + off * np.cos(ang)
            r = radius * rng.uniform(0.6, 0.85)
            field = np.minimum(field, _ellipse(yy, xx, ly, lx, r, r * rng.uniform(0.7, 1.3), rng.uniform(0, np.pi)))
        theta = np.arctan2(yy - cy, xx - cx)
        field *= 1 + 0.12 * np.sin(theta * rng.integers(3, 6) + rng.uniform(0, 6))
        mask = field <= 1
        alpha = mask.astype(float)
        # low-frequency mottling: dark-thin detail would read as hair to the closing
        mottling = ndimage.gaussian_filter(rng.normal(0, 1, (size, size)), 4.0)
        mottling = (6 * mottling / max(mottling.std(), 1e-9))[..., None]
        lesion = color[None, None] + mottling
    elif class_id == SEBORRHEIC_KERATOSIS:
        field = _ellipse(yy, xx, cy, cx, radius * rng.uniform(0.85, 1.0), radius * rng.uniform(1.0, 1.25),
                         rng.uniform(0, np.pi))
        mask = field <= 1
        alpha = mask.astype(float)
        stipple = rng.random((size, size))
        # stipple contrast stays below the hair threshold so texture is not read as hair
        texture = np.where(stipple < 0.12, -14.0, np.where(stipple > 0.88, 14.0, 0.0))[..., None]
        lesion = color[None, None] + texture
    else:
        field = _ellipse(yy, xx, cy, cx, radius, radius * rng.uniform(0.9, 1.1), rng.uniform(0, np.pi))
        mask = field <= 1
        # soft rim so the blob has no hard edge
        alpha = np.clip((1.15 - field) / 0.3, 0, 1)
        mask = alpha > 0.5
        lesion = color[None, None] - 18 * (1 - field.clip(0, 1))[..., None]
    img = img * (1 - alpha[..., None]) + lesion * alpha[..., None]
    return img, mask


def _segment_distance(yy, xx, y0, x0, y1, x1):
    dy, dx = y1 - y0, x1 - x0
    t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / max(dy * dy + dx * dx, 1e-9), 0, 1)
    return np.hypot(yy - (y0 + t * dy), xx - (x0 + t * dx))


def draw_hairs(rng, image, count, max_width=3):
    """Draw ``count`` dark straight hairs over a float image; returns (image, hair mask)."""
    size_h, size_w = image.shape[:2]
    yy, xx = np.mgrid[0:size_h, 0:size_w].astype(np.float64)
    hair = np.zeros((size_h, size_w), bool)
    out = image.copy()
    for _ in range(count):
        length = rng.uniform(0.35, 0.8) * max(size_h, size_w)
        angle = rng.uniform(0, np.pi)
        cy, cx = rng.uniform(0, size_h), rng.uniform(0, size_w)
        dy, dx = np.sin(angle) * length / 2, np.cos(angle) * length / 2
        width = rng.integers(1, max_width + 1)
        line = _segment_distance(yy, xx, cy - dy, cx - dx, cy + dy, cx + dx) <= width / 2
        out[line] = HAIR_COLOR + rng.uniform(-8, 8, 3)
        hair |= line
    return out, hair


def _to_uint8(img):
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _mask_bbox(mask) -> BBox:
    ys, xs = np.nonzero(mask)
    return BBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def generate_sample(spec: SyntheticSpec, class_id: int, index: int) -> SyntheticSample:
    rng = np.random.default_rng([spec.seed, class_id, index])
    img, lesion_mask = _draw_lesion(rng, spec.image_size, class_id)
    clean = _to_uint8(img)
    hair_mask = np.zeros(lesion_mask.shape, bool)
    if spec.hair_density:
        img, hair_mask = draw_hairs(rng, clean.astype(np.float64), spec.hair_density, spec.hair_max_width)
    image_id = f"syn_{CLASS_NAMES[class_id][:3]}_{index:05d}"
    return SyntheticSample(image_id, _to_uint8(img), clean, class_id, _mask_bbox(lesion_mask), lesion_mask, hair_mask)


def generate_synthetic(spec: SyntheticSpec) -> list[SyntheticSample]:
    """Deterministic function of ``spec``: ``per_class`` samples of each class, class-interleaved."""
    return [generate_sample(spec, c, i) for i in range(spec.per_class) for c in range(len(CLASS_NAMES))]


def save_synthetic(samples, root, fmt="png") -> DatasetManifest:
    """Write images, ``labels.csv`` and ``manifest.csv`` (with true bboxes) under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        path = root / "images" / f"{s.image_id}.{fmt}"
        encode_image(s.image, path)
        entries.append(ManifestEntry(path, s.label, s.bbox))
    manifest = DatasetManifest(root, entries)
    write_manifest(manifest, root / "manifest.csv")
    write_labels(manifest.labels, root / "labels.csv")
    return manifest


# ---------------------------------------------------------------- splitting

def split(items, fractions=(0.9, 0.1), seed=0):
    """Class-stratified seeded split into (train, val).

    ``items`` is a DatasetManifest or any sequence whose elements expose
    ``class_id``. Raises ValidationError when a class has no members.
    """
    if len(fractions) != 2 or abs(sum(fractions) - 1) > 1e-9 or min(fractions) < 0:
        raise UsageError(f"fractions must be two non-negative numbers summing to 1, got {fractions}")
    seq = list(items.entries if isinstance(items, DatasetManifest) else items)
    rng = np.random.default_rng(seed)
    train, val = [], []
    for c in range(len(CLASS_NAMES)):
        members = [i for i, item in enumerate(seq) if item.class_id == c]
        if not members:
            raise ValidationError(f"cannot stratify: class {CLASS_NAMES[c]} has no samples")
        members = [members[i] for i in rng.permutation(len(members))]
        n_train = int(round(fractions[0] * len(members)))
        train += members[:n_train]
        val += members[n_train:]
    train_items = [seq[i] for i in sorted(train)]
    val_items = [seq[i] for i in sorted(val)]
    if isinstance(items, DatasetManifest):
        return replace(items, entries=train_items), replace(items, entries=val_items)
    return train_items, val_items

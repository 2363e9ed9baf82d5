"""Image/mask ingestion (NetPBM graymaps), synthetic datasets, augmentation and batching.

Colour images are stored as co-registered single-plane PGM files named
``<stem>.c0.pgm``, ``<stem>.c1.pgm``, ... next to the path listed in the
manifest (``<stem>.pgm``); a grayscale image is just ``<stem>.pgm``.
Masks are PGM files whose pixel values are the class labels.

Manifest format, one sample per line::

    id<TAB>image_path<TAB>mask_path<TAB>split

Relative paths are resolved against the manifest's directory. Lines starting
with ``#`` are comments.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

SPLITS = ("train", "val", "test")


class PGMError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


# PGM -------------------------------------------------------------------------


def _header_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated integers after the magic, skipping comments."""
    values = []
    pos = 2
    n = len(buf)
    while len(values) < count:
        while pos < n and (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b"#"):
            if buf[pos:pos + 1] == b"#":
                end = buf.find(b"\n", pos)
                pos = n if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < n and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            if pos >= n:
                raise PGMError("truncated header", pos)
            raise PGMError(f"expected an integer, found {buf[pos:pos + 1]!r}", pos)
        values.append(int(buf[start:pos]))
    return values, pos


def parse_pgm(buf: bytes) -> np.ndarray:
    if len(buf) < 2 or buf[:2] not in (b"P2", b"P5"):
        raise PGMError(f"not a PGM file (magic {buf[:2]!r})", 0)
    (width, height, maxval), pos = _header_tokens(buf, 3)
    if width < 1 or height < 1:
        raise PGMError(f"invalid extent {width}x{height}", pos)
    if not 0 < maxval <= 65535:
        raise PGMError(f"maxval {maxval} out of range 1..65535", pos)
    count = width * height
    if buf[:2] == b"P5":
        if pos >= len(buf) or not buf[pos:pos + 1].isspace():
            raise PGMError("missing whitespace after header", pos)
        pos += 1
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
        need = count * dtype.itemsize
        if len(buf) - pos < need:
            raise PGMError(f"truncated raster: need {need} bytes, have {len(buf) - pos}", len(buf))
        grid = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
    else:
        fields = buf[pos:].split()
        if len(fields) < count:
            raise PGMError(f"truncated raster: need {count} samples, have {len(fields)}", len(buf))
        try:
            grid = np.array([int(v) for v in fields[:count]], dtype=np.int64)
        except ValueError as exc:
            raise PGMError(f"non-numeric sample ({exc})", pos) from None
    grid = grid.reshape(height, width)
    if grid.max(initial=0) > maxval:
        raise PGMError(f"sample exceeds maxval {maxval}", pos)
    return grid.astype(np.uint16 if maxval > 255 else np.uint8)


def load_pgm(path) -> np.ndarray:
    """Read a P2 or P5 graymap as a 2D unsigned integer array."""
    with open(path, "rb") as fh:
        return parse_pgm(fh.read())


def save_pgm(grid, path, binary: bool = True) -> None:
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValueError(f"save_pgm expects a 2D grid, got shape {grid.shape}")
    if grid.size and (grid.min() < 0 or grid.max() > 65535):
        raise ValueError("PGM samples must lie in 0..65535")
    maxval = 255 if grid.max(initial=0) <= 255 else 65535
    h, w = grid.shape
    header = f"{'P5' if binary else 'P2'}\n{w} {h}\n{maxval}\n".encode("ascii")
    if binary:
        body = grid.astype(np.uint8 if maxval == 255 else ">u2").tobytes()
    else:
        body = "\n".join(" ".join(str(int(v)) for v in row) for row in grid).encode("ascii") + b"\n"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header + body)


def plane_paths(image_path: Path) -> list[Path]:
    stem = str(image_path)[:-4] if str(image_path).endswith(".pgm") else str(image_path)
    planes = []
    k = 0
    while os.path.exists(f"{stem}.c{k}.pgm"):
        planes.append(Path(f"{stem}.c{k}.pgm"))
        k += 1
    return planes


def load_image(image_path) -> np.ndarray:
    """(C, H, W) float image in [0, 1]."""
    image_path = Path(image_path)
    paths = [image_path] if image_path.exists() else plane_paths(image_path)
    if not paths:
        raise FileNotFoundError(f"no image at {image_path} or colour planes beside it")
    planes = [load_pgm(p) for p in paths]
    scale = 255.0 if all(p.dtype == np.uint8 for p in planes) else 65535.0
    return np.stack(planes).astype(np.float64) / scale


def save_image(image, image_path) -> None:
    """Store a (C, H, W) image in [0, 1] as 8-bit plane files."""
    image = np.asarray(image)
    image_path = Path(image_path)
    grids = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    if grids.shape[0] == 1:
        save_pgm(grids[0], image_path)
        return
    stem = str(image_path)[:-4]
    for k, grid in enumerate(grids):
        save_pgm(grid, f"{stem}.c{k}.pgm")


# samples and manifests -------------------------------------------------------


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    id: str


@dataclass
class DatasetManifest:
    root: Path
    entries: list[tuple[str, str, str, str]]
    seed: int | None = None
    num_classes: int | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.root = Path(self.root)
        seen: dict[str, str] = {}
        for sid, _, _, split in self.entries:
            if split not in SPLITS:
                raise ValueError(f"unknown split {split!r} for id {sid!r}")
            if sid in seen:
                raise ValueError(f"id {sid!r} appears more than once (splits {seen[sid]!r}, {split!r})")
            seen[sid] = split

    def ids(self, split: str) -> list[str]:
        return [e[0] for e in self.entries if e[3] == split]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def check_files(self) -> None:
        for sid, img, msk, _ in self.entries:
            ip = self.resolve(img)
            if not ip.exists() and not plane_paths(ip):
                raise FileNotFoundError(f"image for {sid!r} missing: {ip}")
            if not self.resolve(msk).exists():
                raise FileNotFoundError(f"mask for {sid!r} missing: {self.resolve(msk)}")

    def samples(self, split: str) -> list[Sample]:
        if split not in self._cache:
            out = []
            for sid, img, msk, s in self.entries:
                if s != split:
                    continue
                image = load_image(self.resolve(img))
                mask = load_pgm(self.resolve(msk)).astype(np.int64)
                if image.shape[1:] != mask.shape:
                    raise ValueError(f"{sid}: image {image.shape} and mask {mask.shape} disagree")
                out.append(Sample(image, mask, sid))
            self._cache[split] = out
        return self._cache[split]

    def save(self, path=None) -> Path:
        path = Path(path) if path else self.root / "manifest.tsv"
        lines = []
        if self.seed is not None:
            lines.append(f"# seed={self.seed}")
        if self.num_classes is not None:
            lines.append(f"# num_classes={self.num_classes}")
        lines += ["\t".join(e) for e in self.entries]
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        entries = []
        meta = {}
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                if value:
                    meta[key.strip()] = value.strip()
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            entries.append(tuple(parts))
        seed = int(meta["seed"]) if "seed" in meta else None
        ncls = int(meta["num_classes"]) if "num_classes" in meta else None
        return cls(path.parent, entries, seed, ncls)


def split_ids(ids: Sequence[str], train_fraction: float, seed: int) -> dict[str, str]:
    """Seeded shuffle, first ``round(n * train_fraction)`` ids go to train, rest to test."""
    order = list(ids)
    np.random.default_rng(seed).shuffle(order)
    n_train = int(round(len(order) * train_fraction))
    return {sid: ("train" if i < n_train else "test") for i, sid in enumerate(order)}


# synthetic data --------------------------------------------------------------

_SUPERSAMPLE = 4


def _shape_coverage(rng: np.random.Generator, extent: int) -> tuple[np.ndarray, np.ndarray]:
    """Random ellipse or rotated rectangle: (sub-pixel coverage, pixel-centre mask)."""
    cy, cx = rng.uniform(0.2, 0.8, size=2) * extent
    ry, rx = rng.uniform(0.1, 0.3, size=2) * extent
    theta = rng.uniform(0, np.pi)
    ellipse = rng.random() < 0.6
    s = _SUPERSAMPLE

    def inside(yy, xx):
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / rx
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ry
        return (u * u + v * v <= 1.0) if ellipse else ((np.abs(u) <= 1.0) & (np.abs(v) <= 1.0))

    sub = (np.arange(extent * s) + 0.5) / s
    yy, xx = np.meshgrid(sub, sub, indexing="ij")
    coverage = inside(yy, xx).reshape(extent, s, extent, s).mean(axis=(1, 3))
    centre = np.arange(extent) + 0.5
    cyy, cxx = np.meshgrid(centre, centre, indexing="ij")
    return coverage, inside(cyy, cxx)


def _texture(rng: np.random.Generator, extent: int, waves: int, freq: float) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(extent), np.arange(extent), indexing="ij")
    field_ = np.zeros((extent, extent))
    for _ in range(waves):
        ky, kx = rng.normal(scale=freq, size=2)
        field_ += np.cos(2 * np.pi * (ky * yy + kx * xx) / extent + rng.uniform(0, 2 * np.pi))
    return field_ / np.sqrt(waves)


def synth_sample(rng: np.random.Generator, extent: int, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """One (3, H, W) image in [0, 1] and its (H, W) label mask.

    Shapes are drawn with anti-aliased edges on a smooth textured background;
    each foreground class has its own colour shift and texture. Redrawn until
    the foreground fraction is inside (0.05, 0.6).
    """
    while True:
        base = rng.uniform(0.3, 0.5, size=3)
        image = base[:, None, None] + 0.08 * _texture(rng, extent, 6, 2.0)[None]
        image = image + 0.03 * rng.normal(size=(3, 1, 1)) * _texture(rng, extent, 4, 1.0)[None]
        mask = np.zeros((extent, extent), dtype=np.int64)
        for _ in range(int(rng.integers(1, 4))):
            label = int(rng.integers(1, num_classes))
            coverage, centre = _shape_coverage(rng, extent)
            tint = np.full(3, 0.22) * (1 + 0.5 * (label - 1))
            tint[(label - 1) % 3] += 0.12
            tint = tint * np.where(rng.random(3) < 0.5, 1.0, 0.6)
            fg = base[:, None, None] + tint[:, None, None] + 0.1 * _texture(rng, extent, 4, 6.0)[None]
            image = image * (1 - coverage) + fg * coverage
            mask[centre] = label
        image = image + rng.normal(scale=0.04, size=image.shape)
        frac = np.count_nonzero(mask) / mask.size
        if 0.05 < frac < 0.6:
            return np.clip(image, 0.0, 1.0), mask


def synth_generate(
    n: int,
    extent: int,
    num_classes: int,
    seed: int,
    root,
    train_fraction: float = 0.7,
) -> DatasetManifest:
    """Write ``n`` synthetic samples under ``root`` and return their manifest."""
    if extent % 16:
        raise ValueError(f"extent must be divisible by 16, got {extent}")
    if num_classes < 2:
        raise ValueError("num_classes counts the background and must be >= 2")
    root = Path(root)
    rng = np.random.default_rng(seed)
    ids = [f"synth{i:04d}" for i in range(n)]
    splits = split_ids(ids, train_fraction, seed)
    entries = []
    for sid in ids:
        image, mask = synth_sample(rng, extent, num_classes)
        img_rel = f"images/{sid}.pgm"
        msk_rel = f"masks/{sid}.pgm"
        save_image(image, root / img_rel)
        save_pgm(mask.astype(np.uint8), root / msk_rel)
        entries.append((sid, img_rel, msk_rel, splits[sid]))
    manifest = DatasetManifest(root, entries, seed, num_classes)
    manifest.save()
    return manifest


# augmentation and batching ---------------------------------------------------


def augment_params(seed: int) -> tuple[bool, bool, int]:
    """(horizontal flip, vertical flip, quarter turns) drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    turns = int(rng.integers(4))
    return hflip, vflip, turns


def apply_geometry(a: np.ndarray, hflip: bool, vflip: bool, turns: int) -> np.ndarray:
    """Apply flips then counter-clockwise quarter turns to the last two axes."""
    if hflip:
        a = a[..., :, ::-1]
    if vflip:
        a = a[..., ::-1, :]
    if turns:
        a = np.rot90(a, turns, axes=(-2, -1))
    return np.ascontiguousarray(a)


def augment(sample: Sample, seed: int) -> Sample:
    hflip, vflip, turns = augment_params(seed)
    return Sample(
        apply_geometry(sample.image, hflip, vflip, turns),
        apply_geometry(sample.mask, hflip, vflip, turns),
        sample.id,
    )


class Batch(NamedTuple):
    images: np.ndarray
    masks: np.ndarray
    ids: list[str]


def batch_iter(
    manifest: DatasetManifest,
    split: str,
    batch_size: int,
    shuffle_seed: int | None = None,
    augment_seed: int | None = None,
) -> Iterator[Batch]:
    """Yield batches of one split; the last batch may be short.

    ``shuffle_seed`` None keeps manifest order. ``augment_seed`` None
    disables augmentation; otherwise sample i of the pass is augmented with
    a seed derived from (augment_seed, i).
    """
    samples = manifest.samples(split)
    if not samples:
        raise ValueError(f"split {split!r} is empty")
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        np.random.default_rng(shuffle_seed).shuffle(order)
    for start in range(0, len(order), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        if augment_seed is not None:
            chunk = [augment(s, augment_seed * 100_003 + start + j) for j, s in enumerate(chunk)]
        yield Batch(
            np.stack([s.image for s in chunk]),
            np.stack([s.mask for s in chunk]),
            [s.id for s in chunk],
        )

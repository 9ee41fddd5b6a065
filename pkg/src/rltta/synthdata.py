"""Synthetic two-domain real/fake image generator and dataset file I/O.

A "real" image is a textured background with a shaded face ellipse; a
"fake" one additionally carries the inner face of a donor sample alpha-
blended over it, which leaves a seam ring whose sharpness depends on the
domain. Domain-level post-processing (contrast, blur, block quantization,
sensor noise) is applied to both classes.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dctn, idctn
from scipy.ndimage import gaussian_filter, zoom

from .augment import read_png, write_png

DATASET_MAGIC = b"DFTA"
DATASET_VERSION = 1
SPLITS = ("train", "val", "test")


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    name: str
    texture: str = "gradient"          # "gradient" | "noise"
    blur: float = 0.0                  # gaussian sigma, px
    noise_sigma: float = 2.0           # additive gray levels
    quantization: float = 0.0          # 8x8 DCT step multiplier, 0 = off
    seam_width: float = 0.6            # alpha ramp width, px
    donor_shift: tuple = (35.0, 70.0)  # host/donor skin colour distance
    contrast: tuple = (0.45, 1.0)      # per-image contrast scale range
    brightness: tuple = (-10.0, 10.0)  # per-image offset range

    def __post_init__(self):
        if self.texture not in ("gradient", "noise"):
            raise ValueError(f"unknown texture {self.texture!r}")
        if self.blur < 0 or self.noise_sigma < 0 or self.quantization < 0 or self.seam_width <= 0:
            raise ValueError("blur, noise and quantization must be >= 0, seam_width > 0")
        if not 0 < self.contrast[0] <= self.contrast[1] <= 1.5:
            raise ValueError("contrast range must satisfy 0 < lo <= hi <= 1.5")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("donor_shift", "contrast", "brightness"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


DOMAIN_A = DomainSpec("A")
DOMAIN_B = DomainSpec(
    "B", texture="noise", noise_sigma=3.0, contrast=(0.25, 0.5), brightness=(-20.0, 20.0),
)


@dataclass
class DatasetManifest:
    seed: int = 0
    counts: dict = field(default_factory=lambda: {"A": [1500, 1500], "B": [1500, 1500]})
    image_size: int = 32
    channels: int = 3
    splits: tuple = (0.6, 0.2, 0.2)

    def __post_init__(self):
        if self.image_size < 8 or self.image_size > 256:
            raise ValueError("image_size must be in [8, 256]")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        for name, (n_real, n_fake) in self.counts.items():
            if n_real <= 0 or n_fake <= 0:
                raise ValueError(f"domain {name}: counts must be positive")
        if len(self.splits) != 3 or min(self.splits) < 0 or abs(sum(self.splits) - 1.0) > 1e-9:
            raise ValueError("splits must be three non-negative ratios summing to 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class Dataset:
    """Images ``(N, H, W, C)`` uint8 with per-image label (0 real, 1 fake) and domain id."""

    images: np.ndarray
    labels: np.ndarray
    domains: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.domains = np.asarray(self.domains, dtype=np.uint8)
        if self.images.ndim != 4 or not (len(self.images) == len(self.labels) == len(self.domains)):
            raise ValueError("inconsistent dataset arrays")
        if np.any(self.labels > 1):
            raise ValueError("labels must be 0 or 1")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.domains[idx])

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.images.shape == other.images.shape
                and np.array_equal(self.images, other.images)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.domains, other.domains))


# --- rendering -------------------------------------------------------------

def _rng(seed, domain_id, index):
    return np.random.default_rng(np.random.SeedSequence([seed, domain_id, index]))


def _background(rng, spec, size):
    ys, xs = np.mgrid[0:size, 0:size] / (size - 1)
    c0 = rng.uniform(30, 220, 3)
    c1 = rng.uniform(30, 220, 3)
    if spec.texture == "gradient":
        ang = rng.uniform(0, 2 * np.pi)
        t = (np.cos(ang) * (xs - 0.5) + np.sin(ang) * (ys - 0.5)) + 0.5
        t = np.clip(t, 0, 1)[..., None]
        return c0 * (1 - t) + c1 * t
    # value noise: coarse random grid, smoothly upsampled, two octaves
    t = np.zeros((size, size))
    for cells, amp in ((4, 0.7), (8, 0.3)):
        grid = rng.uniform(0, 1, (cells + 1, cells + 1))
        t += amp * zoom(grid, size / (cells + 1), order=3, mode="nearest")[:size, :size]
    t = np.clip(t, 0, 1)[..., None]
    return c0 * (1 - t) + c1 * t


def _face_appearance(rng):
    return {
        "skin": rng.uniform([120, 80, 60], [230, 180, 150]),
        "shade_dir": rng.uniform(0, 2 * np.pi),
        "shade": rng.uniform(0.0, 25.0),
        "feature": rng.uniform(20, 60),
    }


def _render_face(app, geom, size):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    cx, cy, rx, ry = geom
    u, v = (xs - cx) / rx, (ys - cy) / ry
    shade = app["shade"] * (np.cos(app["shade_dir"]) * u + np.sin(app["shade_dir"]) * v)
    face = app["skin"][None, None, :] + shade[..., None]
    # eyes and mouth
    for ex in (-0.38, 0.38):
        eye = ((u - ex) / 0.16) ** 2 + ((v + 0.25) / 0.09) ** 2 <= 1
        face[eye] = app["feature"]
    mouth = (np.abs(v - 0.45) <= 0.06) & (np.abs(u) <= 0.35)
    face[mouth] = app["feature"] * 1.4
    return face


def _ellipse_distance(geom, size, scale=1.0):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    cx, cy, rx, ry = geom
    return np.sqrt(((xs - cx) / (rx * scale)) ** 2 + ((ys - cy) / (ry * scale)) ** 2)


def _soft_mask(dist, radius_px, width_px):
    # alpha 1 inside, ramping to 0 across ``width_px`` around the boundary
    return np.clip(0.5 - (dist - 1.0) * radius_px / width_px, 0.0, 1.0)


def _jpeg_like(img, strength):
    h, w, _ = img.shape
    q = strength * (1.0 + np.add.outer(np.arange(8), np.arange(8)))
    out = img.copy()
    for y in range(0, h - h % 8, 8):
        for x in range(0, w - w % 8, 8):
            block = dctn(img[y:y + 8, x:x + 8], axes=(0, 1), norm="ortho")
            block = np.round(block / q[..., None]) * q[..., None]
            out[y:y + 8, x:x + 8] = idctn(block, axes=(0, 1), norm="ortho")
    return out


INNER_SCALE = 0.72


def render_sample(spec: DomainSpec, seed: int, domain_id: int, index: int, label: int,
                  size: int = 32, n_total: int = 1):
    """Render one image; returns ``(uint8 image, geometry)``.

    ``geometry`` is ``(cx, cy, rx, ry)`` of the face; the blended region of a
    fake is the same ellipse scaled by ``INNER_SCALE``.
    """
    rng = _rng(seed, domain_id, index)
    bg = _background(rng, spec, size)
    geom = (
        (size - 1) / 2 + rng.uniform(-1.5, 1.5),
        (size - 1) / 2 + rng.uniform(-1.5, 1.5),
        size * rng.uniform(0.28, 0.34),
        size * rng.uniform(0.36, 0.42),
    )
    host = _face_appearance(rng)
    img = bg.copy()
    face_alpha = _soft_mask(_ellipse_distance(geom, size), min(geom[2:]), 0.8)[..., None]
    img = img * (1 - face_alpha) + _render_face(host, geom, size) * face_alpha

    contrast = rng.uniform(*spec.contrast)
    brightness = rng.uniform(*spec.brightness)
    noise_seed = rng.integers(2**32)

    if label == 1:
        # donor: the face appearance of another sample, shifted in colour
        donor_index = (index + 1 + int(rng.integers(max(n_total - 1, 1)))) % max(n_total, 2)
        donor = _face_appearance(_rng(seed, domain_id, 10**7 + donor_index))
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        donor["skin"] = np.clip(host["skin"] + direction * rng.uniform(*spec.donor_shift), 0, 255)
        inner = _ellipse_distance(geom, size, INNER_SCALE)
        alpha = _soft_mask(inner, INNER_SCALE * min(geom[2:]), spec.seam_width)[..., None]
        img = img * (1 - alpha) + _render_face(donor, geom, size) * alpha

    mean = img.mean()
    img = mean + contrast * (img - mean) + brightness
    if spec.blur > 0:
        img = gaussian_filter(img, sigma=(spec.blur, spec.blur, 0), mode="nearest")
    if spec.quantization > 0:
        img = _jpeg_like(img, spec.quantization)
    if spec.noise_sigma > 0:
        img = img + np.random.default_rng(noise_seed).normal(0, spec.noise_sigma, img.shape)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8), geom


def generate(spec: DomainSpec, manifest: DatasetManifest, seed: int | None = None,
             domain_id: int = 0) -> Dataset:
    """All images of one domain, reals first then fakes, pure in its inputs."""
    seed = manifest.seed if seed is None else seed
    n_real, n_fake = manifest.counts[spec.name]
    n = n_real + n_fake
    labels = np.r_[np.zeros(n_real, np.uint8), np.ones(n_fake, np.uint8)]
    images = np.empty((n, manifest.image_size, manifest.image_size, manifest.channels), np.uint8)
    for i, y in enumerate(labels):
        img, _ = render_sample(spec, seed, domain_id, i, int(y), manifest.image_size, n)
        if manifest.channels == 1:
            img = np.floor(img.astype(np.float64) @ [0.299, 0.587, 0.114] + 0.5).astype(np.uint8)[..., None]
        images[i] = img
    return Dataset(images, labels, np.full(n, domain_id, np.uint8))


def split(dataset: Dataset, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> dict:
    """Stratified, seeded split into train/val/test (disjoint and exhaustive)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B117]))
    parts = {name: [] for name in SPLITS}
    for label in (0, 1):
        idx = np.flatnonzero(dataset.labels == label)
        idx = idx[rng.permutation(len(idx))]
        a = int(round(ratios[0] * len(idx)))
        b = a + int(round(ratios[1] * len(idx)))
        for name, chunk in zip(SPLITS, (idx[:a], idx[a:b], idx[b:])):
            parts[name].append(chunk)
    return {name: dataset.subset(np.sort(np.concatenate(chunks))) for name, chunks in parts.items()}


# --- file formats ----------------------------------------------------------
#
# "DFTA" | u16 version | u32 count | u16 W | u16 H | u16 C
# then per image: u8 label | u8 domain id | W*H*C raw bytes (row-major HWC)

_HEADER = struct.Struct("<4sHIHHH")


def to_bytes(dataset: Dataset) -> bytes:
    n, h, w, c = dataset.images.shape
    parts = [_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, w, h, c)]
    for img, y, d in zip(dataset.images, dataset.labels, dataset.domains):
        parts.append(bytes((int(y), int(d))))
        parts.append(img.tobytes())
    return b"".join(parts)


def from_bytes(data: bytes) -> Dataset:
    if len(data) < _HEADER.size:
        raise DatasetFormatError(f"truncated header: {len(data)} of {_HEADER.size} bytes at position 0")
    magic, version, n, w, h, c = _HEADER.unpack_from(data, 0)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r} at position 0")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported version {version} at position 4")
    if c not in (1, 3) or w == 0 or h == 0:
        raise DatasetFormatError(f"bad image geometry {w}x{h}x{c} at position 10")
    rec = 2 + w * h * c
    expected = _HEADER.size + n * rec
    if len(data) < expected:
        pos = _HEADER.size + ((len(data) - _HEADER.size) // rec) * rec
        raise DatasetFormatError(
            f"truncated payload: record {(pos - _HEADER.size) // rec} of {n} incomplete at position {pos}")
    if len(data) > expected:
        raise DatasetFormatError(f"{len(data) - expected} trailing bytes at position {expected}")
    body = np.frombuffer(data, np.uint8, count=n * rec, offset=_HEADER.size).reshape(n, rec)
    labels = body[:, 0].copy()
    if np.any(labels > 1):
        bad = int(np.flatnonzero(labels > 1)[0])
        raise DatasetFormatError(f"invalid label at position {_HEADER.size + bad * rec}")
    return Dataset(body[:, 2:].reshape(n, h, w, c).copy(), labels, body[:, 1].copy())


def save(dataset: Dataset, path) -> None:
    Path(path).write_bytes(to_bytes(dataset))


def load(path) -> Dataset:
    return from_bytes(Path(path).read_bytes())


def export_png_dir(dataset: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["filename", "label", "domain"])
        for i, (img, y, d) in enumerate(zip(dataset.images, dataset.labels, dataset.domains)):
            name = f"{i:06d}.png"
            write_png(directory / name, img)
            writer.writerow([name, int(y), int(d)])


def import_png_dir(directory) -> Dataset:
    """Read a directory of PNGs described by ``labels.csv`` (filename, label, domain)."""
    directory = Path(directory)
    images, labels, domains = [], [], []
    with open(directory / "labels.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            images.append(read_png(directory / row["filename"]))
            labels.append(int(row["label"]))
            domains.append(int(row.get("domain") or 0))
    if not images:
        raise DatasetFormatError(f"{directory}: no images listed")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DatasetFormatError(f"{directory}: images differ in shape {sorted(shapes)}")
    return Dataset(np.stack(images), labels, domains)

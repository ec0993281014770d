"""File formats and datasets.

* binary PGM (P5, maxval 255) for images, masks and heatmaps
* FMAP: little-endian feature-map dump
* SGNN: little-endian inference checkpoint
* JSON-lines manifests, plus the synthetic lesion generator that writes them
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import FeatureMap
from .numeric import Rng
from .sgnn import Model, ModelConfig

SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.jsonl"


class FormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None) -> None:
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(FormatError):
    pass


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# PGM

_WHITESPACE = b" \t\n\r\v\f"


def _pgm_token(buf: bytes, pos: int) -> tuple[bytes, int, int]:
    """Next header token, skipping whitespace and ``#`` comments.

    Returns (token, start offset, offset just past the token).
    """
    n = len(buf)
    while pos < n:
        if buf[pos] in _WHITESPACE:
            pos += 1
        elif buf[pos] == ord("#"):
            while pos < n and buf[pos] not in b"\r\n":
                pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos] not in _WHITESPACE and buf[pos] != ord("#"):
        pos += 1
    if start == pos:
        raise FormatError("truncated PGM header", start)
    return buf[start:pos], start, pos


def parse_pgm(buf: bytes) -> np.ndarray:
    if len(buf) < 2 or buf[:2] != b"P5":
        raise FormatError(f"bad PGM magic {buf[:2]!r}, only binary P5 is supported", 0)
    pos = 2
    values = []
    for field_name in ("width", "height", "maxval"):
        tok, start, pos = _pgm_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"invalid PGM {field_name} {tok!r}", start)
        values.append(int(tok))
    width, height, maxval = values
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval}, expected 255", pos)
    if width < 1 or height < 1:
        raise FormatError(f"invalid PGM size {width}x{height}", pos)
    if pos >= len(buf) or buf[pos] not in _WHITESPACE:
        raise FormatError("missing whitespace before PGM raster", pos)
    pos += 1
    expected = width * height
    actual = len(buf) - pos
    if actual != expected:
        kind = "truncated" if actual < expected else "trailing bytes in"
        raise FormatError(f"{kind} PGM raster: expected {expected} bytes, found {actual}", pos)
    raster = np.frombuffer(buf, dtype=np.uint8, offset=pos).reshape(height, width)
    return (raster.astype(np.float64) / 255.0)[None]


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read a P5 PGM as a ``1 x H x W`` float image in [0, 1]."""
    return parse_pgm(Path(path).read_bytes())


def encode_pgm(image: np.ndarray) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise ValueError(f"PGM holds one channel, got {img.shape[0]}")
        img = img[0]
    h, w = img.shape
    raster = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return b"P5\n%d %d\n255\n" % (w, h) + raster.tobytes()


def write_pgm(image: np.ndarray, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_pgm(image))


# ---------------------------------------------------------------------------
# resizing

def _sample_positions(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize; accepts ``H x W`` or ``1 x H x W``."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    _, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img[0].copy() if squeeze else img.copy()
    y0, y1, fy = _sample_positions(h, out_h)
    x0, x1, fx = _sample_positions(w, out_w)
    fy = fy[:, None]
    fx = fx[None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bottom = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    out = top * (1 - fy) + bottom * fy
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# FMAP

_FMAP_HEADER = struct.Struct("<4sIIIII")


def save_feature_map(fm: FeatureMap, path: str | os.PathLike) -> None:
    c, h, w = fm.tensor.shape
    body = np.ascontiguousarray(fm.tensor, dtype="<f8").tobytes()
    Path(path).write_bytes(_FMAP_HEADER.pack(b"FMAP", 1, c, h, w, fm.downsample) + body)


def load_feature_map(path: str | os.PathLike) -> FeatureMap:
    buf = Path(path).read_bytes()
    if len(buf) < _FMAP_HEADER.size:
        raise FormatError(f"FMAP file too short: expected at least {_FMAP_HEADER.size} bytes, got {len(buf)}", 0)
    magic, version, c, h, w, down = _FMAP_HEADER.unpack_from(buf)
    if magic != b"FMAP":
        raise FormatError(f"bad FMAP magic {magic!r}", 0)
    if version != 1:
        raise FormatError(f"unsupported FMAP version {version}", 4)
    expected = _FMAP_HEADER.size + 8 * c * h * w
    if len(buf) != expected:
        raise FormatError(f"FMAP length mismatch: expected {expected} bytes, got {len(buf)}", _FMAP_HEADER.size)
    data = np.frombuffer(buf, dtype="<f8", offset=_FMAP_HEADER.size).astype(np.float64)
    return FeatureMap(data.reshape(c, h, w), down)


# ---------------------------------------------------------------------------
# checkpoints

def encode_checkpoint(model: Model) -> bytes:
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [b"SGNN", struct.pack("<II", 1, len(cfg)), cfg]
    for p in model.parameters():
        name = p.name.encode("utf-8")
        parts.append(struct.pack("<I", len(name)) + name)
        parts.append(struct.pack(f"<I{p.value.ndim}I", p.value.ndim, *p.value.shape))
        parts.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(model: Model, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_checkpoint(model))


class _Reader:
    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode_checkpoint(buf: bytes) -> Model:
    r = _Reader(buf)
    if r.take(4, "magic") != b"SGNN":
        raise CheckpointError("bad checkpoint magic", 0)
    version = r.u32("version")
    if version != 1:
        raise CheckpointError(f"unsupported checkpoint version {version}", 4)
    cfg_len = r.u32("config length")
    try:
        cfg = ModelConfig.from_dict(json.loads(r.take(cfg_len, "config").decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"invalid checkpoint config: {exc}", 12) from exc
    model = Model(cfg)
    for p in model.parameters():
        at = r.pos
        name = r.take(r.u32("parameter name length"), "parameter name").decode("utf-8", "replace")
        if name != p.name:
            raise CheckpointError(f"expected parameter {p.name!r}, found {name!r}", at)
        rank = r.u32(f"rank of {name}")
        if rank > 8:
            raise CheckpointError(f"parameter {name!r}: implausible rank {rank}", r.pos - 4)
        dims = tuple(r.u32(f"dims of {name}") for _ in range(rank))
        if dims != p.value.shape:
            raise CheckpointError(
                f"parameter {name!r}: stored shape {dims} inconsistent with config shape {p.value.shape}", at
            )
        payload = r.take(8 * p.value.size, f"payload of {name}")
        p.value[...] = np.frombuffer(payload, dtype="<f8").reshape(dims)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} unexpected trailing bytes (extra parameters?)", r.pos)
    return model


def load_checkpoint(path: str | os.PathLike) -> Model:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# manifests

@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    label: int
    split: str
    mask_path: str | None = None


def load_manifest(path: str | os.PathLike) -> list[SampleRecord]:
    path = Path(path)
    base = path.parent
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: expected an object")
            extra = set(obj) - {"image", "mask", "label", "split"}
            if extra:
                raise ManifestError(f"{path}:{lineno}: unknown keys {sorted(extra)}")
            image = obj.get("image")
            if not isinstance(image, str) or not image:
                raise ManifestError(f"{path}:{lineno}: 'image' must be a non-empty string")
            label = obj.get("label")
            if isinstance(label, bool) or label not in (0, 1):
                raise ManifestError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
            split = obj.get("split")
            if split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: split must be one of {SPLITS}, got {split!r}")
            mask = obj.get("mask")
            if mask is not None and not isinstance(mask, str):
                raise ManifestError(f"{path}:{lineno}: 'mask' must be a string")
            records.append(
                SampleRecord(
                    image_path=str(base / image),
                    label=int(label),
                    split=split,
                    mask_path=None if mask is None else str(base / mask),
                )
            )
    return records


def split_records(records: list[SampleRecord], split: str) -> list[SampleRecord]:
    return [r for r in records if r.split == split]


def load_sample(record: SampleRecord, size: int) -> tuple[np.ndarray, np.ndarray | None]:
    """Image (``1 x size x size``) and optional binary mask (``size x size``)."""
    for p in (record.image_path, record.mask_path):
        if p is not None and not os.path.exists(p):
            raise FileNotFoundError(f"manifest references missing file: {p}")
    image = read_pgm(record.image_path)
    mask = None
    if record.mask_path is not None:
        mask = read_pgm(record.mask_path)[0]
        if mask.shape != image.shape[1:]:
            raise FormatError(
                f"mask {record.mask_path} is {mask.shape[0]}x{mask.shape[1]}, "
                f"image is {image.shape[1]}x{image.shape[2]}"
            )
    if image.shape[1:] != (size, size):
        image = resize_bilinear(image, size, size)
        if mask is not None:
            mask = resize_bilinear(mask, size, size)
    if mask is not None:
        mask = (mask >= 0.5).astype(np.float64)
    return image, mask


# ---------------------------------------------------------------------------
# synthetic lesions

MASK_LEVEL = 0.1


@dataclass(frozen=True)
class SynthConfig:
    n_per_class: int = 100
    image_size: int = 64
    lesion_count_range: tuple[int, int] = (1, 3)
    lesion_radius_px: tuple[float, float] = (3.0, 8.0)
    lesion_amplitude: float = 0.6
    background_mean: float = 0.2
    background_std: float = 0.05
    position_dependent: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_per_class < 1:
            raise ValueError("n_per_class must be at least 1")
        if self.lesion_radius_px[0] < 1 or self.lesion_radius_px[0] > self.lesion_radius_px[1]:
            raise ValueError(f"invalid lesion radius range {self.lesion_radius_px}")
        lo, hi = self.lesion_count_range
        if lo < 1 or lo > hi:
            raise ValueError(f"invalid lesion count range {self.lesion_count_range}")
        if self.lesion_amplitude <= MASK_LEVEL:
            raise ValueError("lesion amplitude must exceed the mask level")
        if self.position_dependent and self.max_reach >= self.image_size / 2:
            raise ValueError(f"lesions of radius {self.lesion_radius_px[1]} do not fit in the top half")

    @property
    def max_reach(self) -> float:
        """Largest distance from a blob centre at which the mask can still be set."""
        return self.lesion_radius_px[1] * math.sqrt(2.0 * math.log(self.lesion_amplitude / MASK_LEVEL))


def split_for_pair(pair: int, n_pairs: int) -> str:
    """80/10/10 by index; each (benign, diseased) pair lands in one split."""
    if pair < n_pairs * 8 // 10:
        return "train"
    if pair < n_pairs * 9 // 10:
        return "val"
    return "test"


def _draw_image(cfg: SynthConfig, rng: Rng, diseased: bool) -> tuple[np.ndarray, np.ndarray]:
    s = cfg.image_size
    background = rng.gauss_array(s * s, cfg.background_mean, cfg.background_std).reshape(s, s)
    lesion = np.zeros((s, s))
    if diseased:
        yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
        for _ in range(rng.randint(*cfg.lesion_count_range)):
            r = rng.uniform(*cfg.lesion_radius_px)
            # radius at which a single blob drops to the mask level
            reach = r * math.sqrt(2.0 * math.log(cfg.lesion_amplitude / MASK_LEVEL))
            top = max(s / 2.0 - reach, 0.0) if cfg.position_dependent else float(s)
            cy = rng.uniform(0.0, top)
            cx = rng.uniform(0.0, float(s))
            lesion += cfg.lesion_amplitude * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * r * r))
    image = np.clip(background + lesion, 0.0, 1.0)
    mask = (lesion > MASK_LEVEL).astype(np.float64)
    return image, mask


def generate_synthetic_dataset(cfg: SynthConfig, out_dir: str | os.PathLike) -> Path:
    """Write images, masks and a manifest; return the manifest path.

    Records alternate benign/diseased so every split is exactly balanced.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = Rng(cfg.seed)
    lines = []
    for pair in range(cfg.n_per_class):
        split = split_for_pair(pair, cfg.n_per_class)
        for label in (0, 1):
            idx = 2 * pair + label
            image, mask = _draw_image(cfg, rng, diseased=bool(label))
            img_rel = f"images/img_{idx:05d}.pgm"
            mask_rel = f"masks/mask_{idx:05d}.pgm"
            write_pgm(image, out / img_rel)
            write_pgm(mask, out / mask_rel)
            lines.append(json.dumps({"image": img_rel, "mask": mask_rel, "label": label, "split": split}))
    manifest = out / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest

"""Dataset ingestion: IDX corpora, face directories, preprocessing, domain splits.

Images are held as float32 arrays in [0, 1] with shape (N, H, W).  Labels are
integers for digit/fashion corpora and identity strings for faces.
"""

from __future__ import annotations

import gzip
import math
import struct
import zlib
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

IDX_TYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IDX_CODES = {v.newbyteorder("="): k for k, v in IDX_TYPES.items()}

_MAX_BYTES = 2 ** 62


class IdxError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


class DatasetError(ValueError):
    pass


# -- IDX ----------------------------------------------------------------------------

def parse_idx(buf: bytes) -> tuple[np.ndarray, list[int]]:
    """Decode an IDX buffer into an array of the declared shape.

    The whole buffer must be consumed: header plus exactly prod(dims) items.
    """
    buf = memoryview(buf)
    if len(buf) < 4:
        raise IdxError(f"truncated header: {len(buf)} bytes, need 4", len(buf))
    if buf[0] != 0 or buf[1] != 0:
        raise IdxError(f"bad magic prefix {bytes(buf[:2]).hex()}, expected 0000", 0)
    code, ndim = buf[2], buf[3]
    if code not in IDX_TYPES:
        raise IdxError(f"unknown type code 0x{code:02x}", 2)
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise IdxError(f"truncated header: {ndim} dimensions need {head} bytes, have {len(buf)}", len(buf))
    dims = list(struct.unpack(f">{ndim}I", buf[4:head]))
    dt = IDX_TYPES[code]
    count = math.prod(dims)
    nbytes = count * dt.itemsize
    if nbytes > _MAX_BYTES:
        raise IdxError(f"dimension product {dims} overflows", 4)
    end = head + nbytes
    if len(buf) < end:
        raise IdxError(f"truncated payload: need {nbytes} bytes, have {len(buf) - head}", len(buf))
    if len(buf) > end:
        raise IdxError(f"{len(buf) - end} trailing bytes after payload", end)
    arr = np.frombuffer(buf[head:end], dtype=dt).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True), dims


def write_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    key = arr.dtype.newbyteorder("=")
    if key not in IDX_CODES:
        raise IdxError(f"dtype {arr.dtype} has no IDX type code", 2)
    code = IDX_CODES[key]
    if arr.ndim > 255:
        raise IdxError("too many dimensions", 3)
    head = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=IDX_TYPES[code]).tobytes()


def read_idx_file(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    try:
        return parse_idx(raw)[0]
    except IdxError as e:
        raise IdxError(f"{path}: {e.args[0]}", e.offset) from None


# -- datasets ----------------------------------------------------------------------

@dataclass
class RawDataset:
    """Images (N, H, W) float32 in [0, 1] with per-image labels.

    ``provenance`` records where the samples came from and, after a split,
    which side they are on and which classes were held for training.
    """

    images: np.ndarray
    labels: np.ndarray
    name: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels)
        if self.images.ndim != 3:
            raise DatasetError(f"{self.name}: images must be (N, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{self.name}: {len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DatasetError(f"{self.name}: pixel values outside [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def side(self) -> int:
        return self.images.shape[1]

    @property
    def classes(self) -> list:
        return sorted(set(self.labels.tolist()))

    def subset(self, idx, **prov) -> "RawDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return RawDataset(self.images[idx], self.labels[idx], self.name, {**self.provenance, **prov})


def load_idx_dataset(images_path, labels_path, name: str, limit: int | None = None) -> RawDataset:
    imgs = read_idx_file(images_path)
    labels = read_idx_file(labels_path)
    if imgs.ndim != 3 or labels.ndim != 1:
        raise DatasetError(f"{name}: expected (N, H, W) images and (N,) labels, got {imgs.shape} and {labels.shape}")
    if imgs.dtype != np.uint8:
        raise DatasetError(f"{name}: image payload must be u8, got {imgs.dtype}")
    if limit is not None:
        imgs, labels = imgs[:limit], labels[:limit]
    return RawDataset((imgs / np.float32(255)).astype(np.float32), labels.astype(np.int64), name,
                      {"dataset": name, "source": str(images_path)})


IDX_TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")


def find_idx_corpus(root) -> tuple[Path, Path] | None:
    """Locate the standard training image/label IDX pair under ``root`` (plain or .gz)."""
    root = Path(root)
    found = []
    for stem in IDX_TRAIN_FILES:
        hits = [root / (stem + ext) for ext in ("", ".gz") if (root / (stem + ext)).is_file()]
        if not hits:
            return None
        found.append(hits[0])
    return found[0], found[1]


# -- splits -------------------------------------------------------------------------

BY_CLASS = "by-class-list"
BY_IDENTITY = "by-identity-fraction"


@dataclass(frozen=True)
class SplitSpec:
    mode: str
    train_classes: frozenset = frozenset()
    test_fraction: Fraction = Fraction(1, 10)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in (BY_CLASS, BY_IDENTITY):
            raise ValueError(f"unknown split mode {self.mode!r}")
        object.__setattr__(self, "train_classes", frozenset(self.train_classes))
        object.__setattr__(self, "test_fraction", Fraction(self.test_fraction).limit_denominator(10 ** 6))
        if self.mode == BY_CLASS and not self.train_classes:
            raise ValueError("by-class-list split needs at least one training class")
        if self.mode == BY_IDENTITY and not (0 < self.test_fraction < 1):
            raise ValueError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")


def _split_tags(spec: SplitSpec, train_labels, side: str) -> dict:
    return {"side": side, "split_mode": spec.mode, "split_seed": spec.seed,
            "train_labels": sorted(train_labels, key=str)}


def split_by_labels(ds: RawDataset, spec: SplitSpec) -> tuple[RawDataset, RawDataset]:
    if spec.mode != BY_CLASS:
        raise ValueError(f"split_by_labels needs mode {BY_CLASS!r}")
    present = set(ds.labels.tolist())
    missing = spec.train_classes - present
    if missing:
        raise DatasetError(f"training classes {sorted(missing, key=str)} do not occur in {ds.name}")
    if present <= spec.train_classes:
        raise DatasetError(f"training classes cover every class of {ds.name}; test domain would be empty")
    mask = np.isin(ds.labels, list(spec.train_classes))
    tags = list(spec.train_classes)
    return (ds.subset(np.flatnonzero(mask), **_split_tags(spec, tags, "X1")),
            ds.subset(np.flatnonzero(~mask), **_split_tags(spec, tags, "X2")))


def split_by_identity(ds: RawDataset, spec: SplitSpec) -> tuple[RawDataset, RawDataset]:
    """Move whole identities, in seeded random order, into X2 until it holds
    at least ``test_fraction`` of the samples."""
    if spec.mode != BY_IDENTITY:
        raise ValueError(f"split_by_identity needs mode {BY_IDENTITY!r}")
    ids, counts = np.unique(ds.labels, return_counts=True)
    if len(ids) < 2:
        raise DatasetError(f"{ds.name}: identity split needs at least two identities")
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    order = rng.permutation(len(ids))
    frac = spec.test_fraction
    n = len(ds)
    taken, size = [], 0
    for k in order:
        if size * frac.denominator >= frac.numerator * n:
            break
        taken.append(k)
        size += int(counts[k])
    if len(taken) == len(ids):
        raise DatasetError(f"{ds.name}: test fraction {frac} leaves no training identities")
    test_ids = set(ids[taken].tolist())
    train_ids = sorted(set(ids.tolist()) - test_ids, key=str)
    mask = np.isin(ds.labels, list(test_ids))
    return (ds.subset(np.flatnonzero(~mask), **_split_tags(spec, train_ids, "X1")),
            ds.subset(np.flatnonzero(mask), **_split_tags(spec, train_ids, "X2")))


def split(ds: RawDataset, spec: SplitSpec) -> tuple[RawDataset, RawDataset]:
    return split_by_labels(ds, spec) if spec.mode == BY_CLASS else split_by_identity(ds, spec)


# -- face preprocessing --------------------------------------------------------------

@dataclass(frozen=True)
class PreprocessConfig:
    crop_fraction: float = 0.6
    target_side: int = 50
    pad_to: int = 72

    def __post_init__(self):
        if not 0 < self.crop_fraction <= 1:
            raise ValueError("crop_fraction must lie in (0, 1]")
        if self.target_side < 1 or self.pad_to < self.target_side:
            raise ValueError("need 1 <= target_side <= pad_to")


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row o averages input cells overlapping [o * r, (o + 1) * r), r = n_in / n_out."""
    r = n_in / n_out
    A = np.zeros((n_out, n_in))
    for o in range(n_out):
        lo, hi = o * r, (o + 1) * r
        for i in range(int(math.floor(lo)), min(n_in, int(math.ceil(hi)))):
            A[o, i] = min(hi, i + 1) - max(lo, i)
    return A / r


def area_downsample(img: np.ndarray, side: int) -> np.ndarray:
    H, W = img.shape
    if H < side or W < side:
        raise DatasetError(f"cannot downsample {img.shape} to {side}x{side}")
    if H == side and W == side:
        return img.copy()
    return _area_matrix(H, side) @ img.astype(np.float64) @ _area_matrix(W, side).T


def zero_pad(img: np.ndarray, side: int) -> np.ndarray:
    H, W = img.shape
    out = np.zeros((side, side), dtype=img.dtype)
    top, left = (side - H) // 2, (side - W) // 2
    out[top:top + H, left:left + W] = img
    return out


def preprocess_face(img: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    """Central square crop, box-filter downsample, centered zero padding."""
    img = np.asarray(img)
    H, W = img.shape
    crop = int(round(cfg.crop_fraction * min(H, W)))
    if crop < 1:
        raise DatasetError(f"crop of {cfg.crop_fraction} x {min(H, W)} px is smaller than one pixel")
    if crop < cfg.target_side:
        raise DatasetError(f"crop side {crop} is smaller than target side {cfg.target_side}")
    top, left = (H - crop) // 2, (W - crop) // 2
    patch = area_downsample(img[top:top + crop, left:left + crop], cfg.target_side)
    patch = np.clip(patch, 0.0, 1.0).astype(np.float32)
    return zero_pad(patch, cfg.pad_to)


# -- face directories -----------------------------------------------------------------

def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) or ASCII (P2) PGM into float in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == b"P5":
        dt = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
        body = raw[pos + 1:pos + 1 + w * h * dt.itemsize]
        if len(body) != w * h * dt.itemsize:
            raise DatasetError(f"{path}: truncated PGM payload")
        px = np.frombuffer(body, dtype=dt).reshape(h, w)
    elif magic == b"P2":
        px = np.array(raw[pos:].split()[: w * h], dtype=np.int64)
        if px.size != w * h:
            raise DatasetError(f"{path}: truncated PGM payload")
        px = px.reshape(h, w)
    else:
        raise DatasetError(f"{path}: not a PGM file (magic {magic!r})")
    return px.astype(np.float64) / maxval


def write_pgm(path, img: np.ndarray) -> None:
    px = np.clip(np.round(np.asarray(img) * 255), 0, 255).astype(np.uint8)
    h, w = px.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + px.tobytes())


def read_gray_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".pnm"):
        return read_pgm(path)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


IMAGE_SUFFIXES = {".pgm", ".pnm", ".png", ".jpg", ".jpeg"}


def load_face_dir(root, cfg: PreprocessConfig | None = None, name: str = "faces",
                  min_images: int = 1) -> RawDataset:
    """Load ``<root>/<identity>/<image>`` and preprocess every face."""
    cfg = cfg or PreprocessConfig()
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"face directory {root} does not exist")
    imgs, labels = [], []
    for ident in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(f for f in ident.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
        if len(files) < min_images:
            continue
        for f in files:
            imgs.append(preprocess_face(read_gray_image(f), cfg))
            labels.append(ident.name)
    if not imgs:
        raise DatasetError(f"no face images found under {root}")
    return RawDataset(np.stack(imgs), np.array(labels, dtype=object), name,
                      {"dataset": name, "source": str(root)})


# -- cache file -------------------------------------------------------------------------
# Layout (little-endian):
#   0   4s  magic "IVLB"
#   4   u32 version
#   8   u32 count
#   12  u16 H, u16 W
#   16  f32[count*H*W] pixels, row-major
#   ..  u8 label kind (0 = i64, 1 = utf-8 strings), then labels
#       (i64[count] | per label: u16 byte length + bytes)
#   ..  u16 name length + utf-8 name
#   ..  u32 CRC32 of everything before it

CACHE_MAGIC = b"IVLB"
CACHE_VERSION = 1


def dataset_to_bytes(ds: RawDataset) -> bytes:
    n, H, W = ds.images.shape
    parts = [struct.pack("<4sIIHH", CACHE_MAGIC, CACHE_VERSION, n, H, W),
             np.ascontiguousarray(ds.images, dtype="<f4").tobytes()]
    if ds.labels.dtype.kind in "iu":
        parts += [b"\x00", ds.labels.astype("<i8").tobytes()]
    else:
        parts.append(b"\x01")
        for lab in ds.labels.tolist():
            b = str(lab).encode()
            parts.append(struct.pack("<H", len(b)) + b)
    nm = ds.name.encode()
    parts.append(struct.pack("<H", len(nm)) + nm)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def dataset_from_bytes(raw: bytes) -> RawDataset:
    if len(raw) < 20:
        raise DatasetError("cache file truncated")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise DatasetError("cache file CRC mismatch")
    magic, ver, n, H, W = struct.unpack_from("<4sIIHH", body, 0)
    if magic != CACHE_MAGIC:
        raise DatasetError(f"bad cache magic {magic!r}")
    if ver != CACHE_VERSION:
        raise DatasetError(f"unsupported cache version {ver}")
    pos = 16
    npx = n * H * W * 4
    images = np.frombuffer(body, dtype="<f4", count=n * H * W, offset=pos).reshape(n, H, W).astype(np.float32)
    pos += npx
    kind = body[pos]
    pos += 1
    if kind == 0:
        labels = np.frombuffer(body, dtype="<i8", count=n, offset=pos).astype(np.int64)
        pos += 8 * n
    else:
        out = []
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", body, pos)
            out.append(body[pos + 2:pos + 2 + ln].decode())
            pos += 2 + ln
        labels = np.array(out, dtype=object)
    (ln,) = struct.unpack_from("<H", body, pos)
    name = body[pos + 2:pos + 2 + ln].decode()
    return RawDataset(images, labels, name, {"dataset": name})


def save_dataset(ds: RawDataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> RawDataset:
    ds = dataset_from_bytes(Path(path).read_bytes())
    ds.provenance["source"] = str(path)
    return ds


def take_first(ds: RawDataset, limit: int) -> RawDataset:
    """The first ``limit`` samples (all of them if fewer), in file order."""
    return ds if len(ds) <= limit else ds.subset(np.arange(limit))


def with_name(ds: RawDataset, name: str) -> RawDataset:
    return replace(ds, name=name, provenance={**ds.provenance, "dataset": name})

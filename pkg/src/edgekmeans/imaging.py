"""PGM decoding, dense gradient-orientation descriptors, descriptor files."""
import re
import struct
import zlib
from dataclasses import dataclass

import numpy as np

DESC_DIM = 128
N_CELLS = 4
N_BINS = 8

DESC_MAGIC = b"EDFD"
DESC_VERSION = 1


class ImagingError(Exception):
    pass


class BadMagic(ImagingError):
    pass


class HeaderOverflow(ImagingError):
    pass


class TruncatedPayload(ImagingError):
    pass


class TrailingGarbage(ImagingError):
    pass


class ImageTooSmall(ImagingError):
    pass


class FormatVersionMismatch(ImagingError):
    pass


class ChecksumMismatch(ImagingError):
    pass


@dataclass(frozen=True)
class GrayImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width) uint8, row-major
    maxval: int = 255

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width):
            raise ValueError("pixel array shape does not match width x height")


@dataclass(frozen=True)
class ExtractorParams:
    patch_size: int = 16
    stride: int = 16
    energy_threshold: float = 1.0

    def __post_init__(self):
        if self.patch_size < 4 or self.patch_size % 4:
            raise ValueError("patch_size must be >= 4 and divisible by 4")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


@dataclass
class Descriptor:
    values: np.ndarray  # float32, shape (128,)
    source_image: int
    patch_origin: tuple[int, int]

    def __eq__(self, other):
        if not isinstance(other, Descriptor):
            return NotImplemented
        return (
            self.source_image == other.source_image
            and tuple(self.patch_origin) == tuple(other.patch_origin)
            and self.values.dtype == other.values.dtype
            and self.values.tobytes() == other.values.tobytes()
        )


# ---------------------------------------------------------------- PGM

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*")


def _header_tokens(data: bytes, count: int, pos: int):
    """Read ``count`` whitespace-separated integers, skipping comments."""
    out = []
    for _ in range(count):
        pos = _TOKEN.match(data, pos).end()
        m = re.compile(rb"\d+").match(data, pos)
        if m is None:
            raise HeaderOverflow("malformed or missing header field")
        if len(m.group()) > 9:
            raise HeaderOverflow("header field too large")
        out.append(int(m.group()))
        pos = m.end()
    return out, pos


def parse_pgm(data: bytes) -> GrayImage:
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise BadMagic(f"unsupported magic {magic!r}")
    (width, height, maxval), pos = _header_tokens(data, 3, 2)
    if width < 1 or height < 1 or not 1 <= maxval <= 255:
        raise HeaderOverflow(f"bad dimensions/maxval {width}x{height}/{maxval}")
    n = width * height

    if magic == b"P5":
        # exactly one whitespace byte separates header and raster
        if pos >= len(data) or data[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
            raise TruncatedPayload("missing raster")
        payload = data[pos + 1:]
        if len(payload) < n:
            raise TruncatedPayload(f"expected {n} bytes, got {len(payload)}")
        if len(payload) > n:
            raise TrailingGarbage(f"{len(payload) - n} bytes after raster")
        pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    else:
        body = re.sub(rb"#[^\n]*", b"", data[pos:]).split()
        if len(body) < n:
            raise TruncatedPayload(f"expected {n} samples, got {len(body)}")
        if len(body) > n:
            raise TrailingGarbage(f"{len(body) - n} samples after raster")
        try:
            vals = [int(t) for t in body]
        except ValueError as e:
            raise TruncatedPayload(str(e)) from None
        pixels = np.array(vals, dtype=np.int64).reshape(height, width)

    if pixels.max(initial=0) > maxval:
        raise HeaderOverflow("sample exceeds maxval")
    return GrayImage(width, height, pixels.astype(np.uint8), maxval)


def write_pgm(img: GrayImage, binary: bool = True) -> bytes:
    head = f"{'P5' if binary else 'P2'}\n{img.width} {img.height}\n{img.maxval}\n".encode()
    if binary:
        return head + img.pixels.astype(np.uint8).tobytes()
    rows = [" ".join(str(int(v)) for v in row) for row in img.pixels]
    return head + ("\n".join(rows) + "\n").encode()


def read_pgm(path) -> GrayImage:
    with open(path, "rb") as fh:
        return parse_pgm(fh.read())


# ---------------------------------------------------------- descriptors

def patch_descriptor(patch: np.ndarray, energy_threshold: float, scale: float = 1.0):
    """128-d orientation histogram of one patch, or None if rejected.

    Gradient magnitudes are multiplied by ``scale``. Passing raw integer
    intensities with ``scale = 1 / maxval`` keeps the differences exact, so
    orientations that sit on a bin edge are binned the same way regardless
    of brightness offset.
    """
    # np.gradient: central differences inside, one-sided at the edges
    gy, gx = np.gradient(patch)
    mag = np.hypot(gx, gy) * scale
    energy = mag.sum()
    if energy < energy_threshold or energy == 0.0:
        return None
    ang = np.degrees(np.arctan2(gy, gx)) % 360.0
    bins = np.minimum((ang // 45.0).astype(np.int64), N_BINS - 1)

    p = patch.shape[0]
    cell = p // N_CELLS
    rows = np.arange(p) // cell
    cell_idx = rows[:, None] * N_CELLS + rows[None, :]
    flat = (cell_idx * N_BINS + bins).ravel()
    hist = np.bincount(flat, weights=mag.ravel(), minlength=DESC_DIM)
    return hist / np.linalg.norm(hist)


def extract_descriptors(img: GrayImage, params: ExtractorParams = ExtractorParams(),
                        image_id: int = 0) -> list[Descriptor]:
    p, s = params.patch_size, params.stride
    if img.width < p or img.height < p:
        raise ImageTooSmall(f"{img.width}x{img.height} image, patch {p}")
    raw = img.pixels.astype(np.float64)
    scale = 1.0 / img.maxval
    out = []
    for r in range(0, img.height - p + 1, s):
        for c in range(0, img.width - p + 1, s):
            d = patch_descriptor(raw[r:r + p, c:c + p], params.energy_threshold, scale)
            if d is not None:
                out.append(Descriptor(d.astype(np.float32), image_id, (r, c)))
    return out


def max_descriptor_count(width, height, params: ExtractorParams) -> int:
    p, s = params.patch_size, params.stride
    if width < p or height < p:
        return 0
    return ((width - p) // s + 1) * ((height - p) // s + 1)


# ------------------------------------------------------ descriptor file

_HEAD = struct.Struct("<HHI")
_REC = struct.Struct("<IHH")


def dump_descriptors(descs: list[Descriptor]) -> bytes:
    body = bytearray(_HEAD.pack(DESC_VERSION, DESC_DIM, len(descs)))
    for d in descs:
        if d.values.shape != (DESC_DIM,):
            raise ValueError("descriptor must have 128 values")
        body += _REC.pack(d.source_image, *d.patch_origin)
        body += np.asarray(d.values, dtype="<f4").tobytes()
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    return DESC_MAGIC + bytes(body) + struct.pack("<I", crc)


def load_descriptors(data: bytes) -> list[Descriptor]:
    if data[:4] != DESC_MAGIC:
        raise BadMagic("not a descriptor file")
    if len(data) < 4 + _HEAD.size + 4:
        raise TruncatedPayload("descriptor file too short")
    body, (crc,) = data[4:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumMismatch("descriptor file CRC32 mismatch")
    version, dim, count = _HEAD.unpack_from(body, 0)
    if version != DESC_VERSION or dim != DESC_DIM:
        raise FormatVersionMismatch(f"version {version}, dimension {dim}")
    rec = _REC.size + 4 * DESC_DIM
    if len(body) != _HEAD.size + count * rec:
        raise TruncatedPayload("descriptor count does not match payload size")
    out = []
    pos = _HEAD.size
    for _ in range(count):
        img_id, row, col = _REC.unpack_from(body, pos)
        vals = np.frombuffer(body, dtype="<f4", count=DESC_DIM, offset=pos + _REC.size)
        out.append(Descriptor(vals.astype(np.float32), img_id, (row, col)))
        pos += rec
    return out


def write_descriptors(descs, sink):
    data = dump_descriptors(descs)
    if hasattr(sink, "write"):
        sink.write(data)
    else:
        with open(sink, "wb") as fh:
            fh.write(data)


def read_descriptors(source) -> list[Descriptor]:
    if hasattr(source, "read"):
        return load_descriptors(source.read())
    with open(source, "rb") as fh:
        return load_descriptors(fh.read())

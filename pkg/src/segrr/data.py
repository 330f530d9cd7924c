"""Synthetic segmentation phantoms and the binary file formats.

Phantoms are concentric structures (outer ring, middle ring, inner disk
on background) with class-dependent intensities; channel 2 inverts the
contrast of the inner disk so a single channel cannot solve the task.
Generation is a pure function of (spec, seed, index).

Tensor container ("SGSE"): magic, version u16, rank u16, dims u32 each,
dtype code u16 (f32=1, u8=2), little-endian row-major payload, trailing
CRC32 of the payload. Checkpoints are name-length-prefixed archives of
such blocks.
"""

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

MAGIC = b"SGSE"
FORMAT_VERSION = 1
DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.uint8): 2}
CODE_DTYPES = {1: np.dtype(np.float32), 2: np.dtype(np.uint8)}


class TensorFileError(Exception):
    pass


class BadMagicError(TensorFileError):
    pass


class BadVersionError(TensorFileError):
    pass


class TruncatedFileError(TensorFileError):
    pass


class ChecksumError(TensorFileError):
    pass


# ----------------------------------------------------------------------
# phantom generation

@dataclass
class PhantomSpec:
    size: int = 64
    channels: int = 2
    num_classes: int = 4
    outer_radius: tuple = (18.0, 26.0)
    middle_radius: tuple = (10.0, 16.0)
    inner_radius: tuple = (4.0, 8.0)
    # per (channel, class) intensity means; channel 2 inverts the inner disk
    class_means: tuple = ((0.10, 0.40, 0.65, 0.90),
                          (0.10, 0.40, 0.65, 0.20))
    noise_sigma: float = 0.04
    seed: int = 1234

    def __post_init__(self):
        if self.num_classes != 4:
            raise ValueError("phantom family is fixed at 4 classes (background + 3 nested)")
        if len(self.class_means) != self.channels:
            raise ValueError("class_means must have one row per channel")
        if not (self.outer_radius[0] > self.middle_radius[1] > self.middle_radius[0]
                > self.inner_radius[1] > self.inner_radius[0] > 0):
            raise ValueError("radius ranges must be strictly nested and decreasing")
        if self.outer_radius[1] >= self.size / 2 - 2:
            raise ValueError("outer structure would not fit inside the image")


def generate_phantom(spec: PhantomSpec, index: int):
    """One (image Tensor (C,H,W) float32, label grid (H,W) uint8) pair."""
    rng = np.random.default_rng([spec.seed, int(index)])
    s = spec.size
    r_out = rng.uniform(*spec.outer_radius)
    r_mid = rng.uniform(*spec.middle_radius)
    r_in = rng.uniform(*spec.inner_radius)
    margin = r_out + 2
    cy = rng.uniform(margin, s - margin)
    cx = rng.uniform(margin, s - margin)

    yy, xx = np.mgrid[0:s, 0:s]
    rr = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    label = np.zeros((s, s), dtype=np.uint8)
    label[rr <= r_out] = 1
    label[rr <= r_mid] = 2
    label[rr <= r_in] = 3

    image = np.empty((spec.channels, s, s), dtype=np.float32)
    for c in range(spec.channels):
        means = np.asarray(spec.class_means[c], dtype=np.float32)
        image[c] = means[label]
    if spec.noise_sigma > 0:
        image += rng.normal(0.0, spec.noise_sigma, size=image.shape).astype(np.float32)
    return Tensor(image), label


# ----------------------------------------------------------------------
# tensor container

def _tensor_block(array):
    arr = np.ascontiguousarray(array)
    if arr.dtype not in DTYPE_CODES:
        raise TensorFileError(f"unsupported dtype {arr.dtype} (use float32 or uint8)")
    payload = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
    head = MAGIC + struct.pack("<HHH", FORMAT_VERSION, arr.ndim, DTYPE_CODES[arr.dtype])
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + payload + struct.pack("<I", zlib.crc32(payload))


def _parse_tensor_block(buf, offset=0):
    """Returns (array, next_offset); raises distinct errors per corruption."""
    if len(buf) - offset < 10:
        raise TruncatedFileError("header truncated")
    if buf[offset:offset + 4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[offset:offset + 4]!r}")
    version, rank, code = struct.unpack_from("<HHH", buf, offset + 4)
    if version != FORMAT_VERSION:
        raise BadVersionError(f"unsupported format version {version}")
    if code not in CODE_DTYPES:
        raise TensorFileError(f"unknown dtype code {code}")
    pos = offset + 10
    if len(buf) - pos < 4 * rank:
        raise TruncatedFileError("dims truncated")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    dtype = CODE_DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - pos < nbytes + 4:
        raise TruncatedFileError("payload truncated")
    payload = buf[pos:pos + nbytes]
    pos += nbytes
    (crc,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if zlib.crc32(payload) != crc:
        raise ChecksumError("payload CRC mismatch")
    arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(dims)
    return arr, pos


def write_tensor(path, t):
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.dtype == np.float64:
        arr = arr.astype(np.float32)
    with open(path, "wb") as f:
        f.write(_tensor_block(arr))


def read_tensor(path):
    with open(path, "rb") as f:
        buf = f.read()
    arr, pos = _parse_tensor_block(buf)
    if pos != len(buf):
        raise TensorFileError(f"{len(buf) - pos} trailing bytes after tensor block")
    return Tensor(arr) if arr.dtype == np.float32 else arr


# ----------------------------------------------------------------------
# checkpoint archive: sequence of (u32 name length, name utf-8, tensor block)

CKPT_MAGIC = b"SGCKPT01"


def _write_entry(f, name, array):
    name_b = name.encode("utf-8")
    f.write(struct.pack("<I", len(name_b)))
    f.write(name_b)
    f.write(_tensor_block(array))


def write_checkpoint(path, net, optimizer_state=None, manifest_text=""):
    """Named-parameter archive: network params + buffers, optimizer
    moments and step counter, and the resolved manifest text.
    """
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        _write_entry(f, "__manifest__", np.frombuffer(manifest_text.encode("utf-8"), dtype=np.uint8))
        for name, p in net.parameters():
            _write_entry(f, f"param:{name}", p.data)
        for name, b in net.buffers():
            _write_entry(f, f"buffer:{name}", b)
        if optimizer_state is not None:
            _write_entry(f, "opt:step", np.asarray([optimizer_state.step], dtype=np.float32))
            for name, (m, v) in optimizer_state.moments.items():
                _write_entry(f, f"opt:m:{name}", m)
                _write_entry(f, f"opt:v:{name}", v)


def read_checkpoint_entries(path):
    """Raw (name -> array) mapping plus the manifest text."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:8] != CKPT_MAGIC:
        raise BadMagicError("not a checkpoint file")
    pos = 8
    entries = {}
    while pos < len(buf):
        if len(buf) - pos < 4:
            raise TruncatedFileError("entry header truncated")
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        arr, pos = _parse_tensor_block(buf, pos)
        entries[name] = arr
    manifest = entries.pop("__manifest__", np.zeros(0, np.uint8)).tobytes().decode("utf-8")
    return entries, manifest


def load_checkpoint_into(path, net, optimizer_state=None):
    """Restore parameters/buffers by name; reports mismatches by name."""
    entries, manifest = read_checkpoint_entries(path)
    params = dict(net.parameters())
    buffers = {name: (mod, bname) for name, mod, bname in net.named_buffer_slots()}

    expect = {f"param:{n}" for n in params} | {f"buffer:{n}" for n in buffers}
    have = {n for n in entries if n.startswith(("param:", "buffer:"))}
    missing = sorted(expect - have)
    unknown = sorted(have - expect)
    if missing or unknown:
        raise KeyError(f"checkpoint/config mismatch; missing={missing} unknown={unknown}")

    for name, p in params.items():
        arr = entries[f"param:{name}"]
        if arr.shape != p.data.shape:
            raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
        p.grad = None
    for name, (mod, bname) in buffers.items():
        mod._set_buffer(bname, entries[f"buffer:{name}"].astype(mod._buffers[bname].dtype))

    if optimizer_state is not None and "opt:step" in entries:
        optimizer_state.step = int(entries["opt:step"][0])
        for name in params:
            optimizer_state.moments[name] = (entries[f"opt:m:{name}"].astype(np.float32),
                                             entries[f"opt:v:{name}"].astype(np.float32))
    return manifest


# ----------------------------------------------------------------------
# PGM heatmaps

def write_heatmap_pgm(path, map2d, fixed_range=None):
    """8-bit binary PGM (P5). min-max normalized unless fixed_range=(lo, hi)
    is given (excitation maps use (0, 1) since they are sigmoid-bounded).
    Rounding is round-half-up.
    """
    arr = np.asarray(map2d, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"heatmap must be 2D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("heatmap contains non-finite values")
    if fixed_range is not None:
        lo, hi = fixed_range
    else:
        lo, hi = float(arr.min()), float(arr.max())
    span = hi - lo if hi > lo else 1.0
    scaled = (arr - lo) / span * 255.0
    pixels = np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_pgm(path):
    """Minimal binary PGM reader (for round-trip verification)."""
    with open(path, "rb") as f:
        buf = f.read()
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    maxval = int(parts[2])
    if maxval != 255:
        raise ValueError("only 8-bit PGM supported")
    return np.frombuffer(parts[3][:w * h], dtype=np.uint8).reshape(h, w)


# ----------------------------------------------------------------------
# dataset directory helpers

def dataset_paths(out_dir, index):
    return out_dir / f"image_{index:05d}.sgt", out_dir / f"label_{index:05d}.sgt"


def write_dataset(out_dir, spec: PhantomSpec, count):
    """count (image, label) tensor-file pairs plus an index file."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(count):
        image, label = generate_phantom(spec, i)
        img_path, lab_path = dataset_paths(out_dir, i)
        write_tensor(img_path, image)
        write_tensor(lab_path, label)
        lines.append(f"{img_path.name} {lab_path.name}")
    (out_dir / "index.txt").write_text("\n".join(lines) + ("\n" if lines else ""))


def read_dataset(data_dir):
    """List of (image Tensor (C,H,W), label grid (H,W)) pairs per the index."""
    index = (data_dir / "index.txt").read_text().splitlines()
    samples = []
    for line in index:
        if not line.strip():
            continue
        img_name, lab_name = line.split()
        samples.append((read_tensor(data_dir / img_name), read_tensor(data_dir / lab_name)))
    return samples

"""Persistence and run plumbing: binary checkpoints, sample-set array files,
toy datasets, run configuration files, manifests, and the output-directory
lock.

Checkpoint format (little-endian):

    magic "FLWC" | u32 version=1 | u8 kind | u32 dim | u32 context_width
    u32 n_layers | per-layer descriptor | u64 count | count * f64 | u32 crc32

Layer descriptors: 0 = permutation (u32 n, n*u32), 1/2 = additive/affine
coupling (u32 n_cond + idx, u32 n_out + idx, u32 context_width, u32 n_widths
+ widths), 3 = diagonal affine (u32 d; scale then shift live in the blob).
The float blob holds every layer's arrays in order; the checksum covers the
blob bytes.  Sample sets reuse the same convention with magic "FLWA"
(u32 rows, u32 cols), image datasets with magic "FLWI" (height, width,
channels, count).
"""

from __future__ import annotations

import configparser
import contextlib
import hashlib
import io
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .flows import CouplingLayer, DiagonalAffine, FlowModel, Mlp, Permutation

CHECKPOINT_MAGIC = b"FLWC"
ARRAY_MAGIC = b"FLWA"
IMAGE_MAGIC = b"FLWI"
FORMAT_VERSION = 1

_KIND_CODES = {"base": 0, "pregen": 1, "conditional": 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


class PersistError(ValueError):
    pass


class TruncatedFile(PersistError):
    pass


class ChecksumMismatch(PersistError):
    pass


class VersionMismatch(PersistError):
    pass


class KindMismatch(PersistError):
    pass


class LockError(RuntimeError):
    pass


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


# ---------------------------------------------------------------------------
# binary helpers
# ---------------------------------------------------------------------------

class _Reader:
    def __init__(self, data: bytes, what: str):
        self._buf = io.BytesIO(data)
        self._what = what

    def read(self, n: int) -> bytes:
        out = self._buf.read(n)
        if len(out) != n:
            raise TruncatedFile(f"{self._what}: truncated (wanted {n} bytes)")
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.read(struct.calcsize("<" + fmt)))

    def ints(self, n: int) -> np.ndarray:
        return np.frombuffer(self.read(4 * n), dtype="<u4").astype(np.intp)

    def floats(self, n: int) -> np.ndarray:
        return np.frombuffer(self.read(8 * n), dtype="<f8").astype(np.float64)

    def at_end(self) -> bool:
        return self._buf.read(1) == b""


def _pack_ints(values) -> bytes:
    return np.asarray(values, dtype="<u4").tobytes()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _layer_descriptor(layer) -> bytes:
    if isinstance(layer, Permutation):
        return struct.pack("<BI", 0, len(layer.perm)) + _pack_ints(layer.perm)
    if isinstance(layer, CouplingLayer):
        code = 1 if layer.kind == "additive" else 2
        out = struct.pack("<BI", code, len(layer.idx_cond)) + _pack_ints(layer.idx_cond)
        out += struct.pack("<I", len(layer.idx_out)) + _pack_ints(layer.idx_out)
        out += struct.pack("<I", layer.context_width)
        widths = layer.conditioner.widths
        out += struct.pack("<I", len(widths)) + _pack_ints(widths)
        return out
    if isinstance(layer, DiagonalAffine):
        return struct.pack("<BI", 3, len(layer.scale))
    raise PersistError(f"cannot serialize layer type {type(layer).__name__}")


def _read_layer(r: _Reader):
    (code,) = r.unpack("B")
    if code == 0:
        (n,) = r.unpack("I")
        return Permutation(r.ints(n)), []
    if code in (1, 2):
        (n_cond,) = r.unpack("I")
        idx_cond = r.ints(n_cond)
        (n_out,) = r.unpack("I")
        idx_out = r.ints(n_out)
        (ctx,) = r.unpack("I")
        (n_widths,) = r.unpack("I")
        widths = r.ints(n_widths).tolist()
        mlp = Mlp(widths, np.random.default_rng(0))
        layer = CouplingLayer("additive" if code == 1 else "affine",
                              idx_cond, idx_out, mlp, ctx)
        return layer, layer.state_arrays()
    if code == 3:
        (d,) = r.unpack("I")
        layer = DiagonalAffine(np.ones(d), np.zeros(d))
        return layer, [layer.scale, layer.shift]
    raise PersistError(f"unknown layer code {code}")


def save_checkpoint(model: FlowModel, path, kind: str) -> None:
    if kind not in _KIND_CODES:
        raise PersistError(f"unknown checkpoint kind {kind!r}")
    head = CHECKPOINT_MAGIC + struct.pack("<IBII", FORMAT_VERSION,
                                          _KIND_CODES[kind], model.dim,
                                          model.context_width)
    body = struct.pack("<I", len(model.layers))
    arrays = []
    for layer in model.layers:
        body += _layer_descriptor(layer)
        arrays.extend(layer.state_arrays())
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    count = sum(a.size for a in arrays)
    tail = struct.pack("<Q", count) + blob + struct.pack("<I",
                                                         zlib.crc32(blob) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(head + body + tail)


def load_checkpoint(path, expected_kind: str | None = None) -> FlowModel:
    with open(path, "rb") as f:
        r = _Reader(f.read(), str(path))
    magic = r.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise PersistError(f"{path}: not a checkpoint (magic {magic!r})")
    version, kind_code, dim, context_width = r.unpack("IBII")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected "
                              f"{FORMAT_VERSION}")
    kind = _KIND_NAMES.get(kind_code)
    if kind is None:
        raise PersistError(f"{path}: unknown model kind code {kind_code}")
    if expected_kind is not None and kind != expected_kind:
        raise KindMismatch(f"{path}: checkpoint kind {kind!r}, expected "
                           f"{expected_kind!r}")
    (n_layers,) = r.unpack("I")
    layers, targets = [], []
    for _ in range(n_layers):
        layer, arrays = _read_layer(r)
        layers.append(layer)
        targets.extend(arrays)
    (count,) = r.unpack("Q")
    expected = sum(a.size for a in targets)
    if count != expected:
        raise PersistError(f"{path}: descriptor implies {expected} parameters, "
                           f"blob declares {count}")
    blob = r.read(8 * count)
    (crc,) = r.unpack("I")
    if not r.at_end():
        raise PersistError(f"{path}: trailing bytes after checksum")
    if zlib.crc32(blob) & 0xFFFFFFFF != crc:
        raise ChecksumMismatch(f"{path}: parameter blob checksum mismatch")
    values = np.frombuffer(blob, dtype="<f8")
    off = 0
    for a in targets:
        a[...] = values[off:off + a.size].reshape(a.shape)
        off += a.size
    model = FlowModel(dim, layers, context_width)
    # DiagonalAffine caches its log-determinant; refresh after the fill.
    for layer in model.layers:
        if isinstance(layer, DiagonalAffine):
            layer.logdet = float(np.sum(np.log(np.abs(layer.scale))))
    return model


def checkpoint_kind(path) -> str:
    with open(path, "rb") as f:
        r = _Reader(f.read(17), str(path))
    if r.read(4) != CHECKPOINT_MAGIC:
        raise PersistError(f"{path}: not a checkpoint")
    _, kind_code, _, _ = r.unpack("IBII")
    return _KIND_NAMES[kind_code]


# ---------------------------------------------------------------------------
# array and image files
# ---------------------------------------------------------------------------

def save_array(path, arr) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise PersistError("array files hold 2-d data")
    blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    with open(path, "wb") as f:
        f.write(ARRAY_MAGIC + struct.pack("<III", FORMAT_VERSION, *arr.shape))
        f.write(blob + struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF))


def load_array(path) -> np.ndarray:
    with open(path, "rb") as f:
        r = _Reader(f.read(), str(path))
    if r.read(4) != ARRAY_MAGIC:
        raise PersistError(f"{path}: not an array file")
    version, rows, cols = r.unpack("III")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}")
    blob = r.read(8 * rows * cols)
    (crc,) = r.unpack("I")
    if zlib.crc32(blob) & 0xFFFFFFFF != crc:
        raise ChecksumMismatch(f"{path}: checksum mismatch")
    return np.frombuffer(blob, dtype="<f8").reshape(rows, cols).copy()


@dataclass
class Dataset:
    """Toy training data: flattened samples plus the image shape when the
    rows are images (values in [0, 1], channel-last)."""

    kind: str
    samples: np.ndarray
    image_shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not np.all(np.isfinite(self.samples)):
            raise PersistError("dataset contains non-finite values")
        if self.image_shape is not None:
            h, w, c = self.image_shape
            if self.samples.ndim != 2 or self.samples.shape[1] != h * w * c:
                raise PersistError("sample width does not match image shape")
            if self.samples.size and (self.samples.min() < 0.0
                                      or self.samples.max() > 1.0):
                raise PersistError("image values must lie in [0, 1]")

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


def save_image_dataset(path, dataset: Dataset) -> None:
    if dataset.image_shape is None:
        raise PersistError("dataset has no image shape")
    h, w, c = dataset.image_shape
    blob = np.ascontiguousarray(dataset.samples, dtype="<f8").tobytes()
    with open(path, "wb") as f:
        f.write(IMAGE_MAGIC + struct.pack("<IIIII", FORMAT_VERSION, h, w, c,
                                          dataset.samples.shape[0]))
        f.write(blob + struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF))


def load_image_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        r = _Reader(f.read(), str(path))
    if r.read(4) != IMAGE_MAGIC:
        raise PersistError(f"{path}: not an image dataset")
    version, h, w, c, count = r.unpack("IIIII")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}")
    blob = r.read(8 * h * w * c * count)
    (crc,) = r.unpack("I")
    if zlib.crc32(blob) & 0xFFFFFFFF != crc:
        raise ChecksumMismatch(f"{path}: checksum mismatch")
    samples = np.frombuffer(blob, dtype="<f8").reshape(count, h * w * c).copy()
    return Dataset(kind="image-grid", samples=samples, image_shape=(h, w, c))


def convert_npy_images(npy_paths, out_path) -> Dataset:
    """Pack .npy images (h, w) or (h, w, c), values in [0, 1], into a
    dataset file."""
    arrays = [np.load(p) for p in npy_paths]
    if not arrays:
        raise PersistError("no input images")
    shaped = []
    for a in arrays:
        a = np.asarray(a, dtype=np.float64)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.shape != arrays[0].shape and a.ndim != 3:
            raise PersistError("images must share a shape")
        shaped.append(a)
    h, w, c = shaped[0].shape
    samples = np.stack([a.reshape(h * w * c) for a in shaped])
    ds = Dataset(kind="image-grid", samples=samples, image_shape=(h, w, c))
    save_image_dataset(out_path, ds)
    return ds


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------

_MIXTURE_CENTERS = np.array([[2.0, 2.0], [2.0, -2.0], [-2.0, 2.0], [-2.0, -2.0]])
_BOARD_CELLS = [(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0]


def synth_dataset(kind: str, n: int, seed: int) -> Dataset:
    """Deterministic 2-d toy distributions.

    two-moons: two radius-1 half-circles (the second flipped and shifted to
    interlock) with N(0, 0.05^2) noise.  gaussian-mixture: four equal
    components at (+-2, +-2) with covariance 0.25 I.  checkerboard: uniform
    on the 8 alternating unit cells of [-2, 2]^2.
    """
    rng = np.random.default_rng(seed)
    if kind == "two-moons":
        n_outer = n // 2
        t_outer = rng.uniform(0.0, np.pi, n_outer)
        t_inner = rng.uniform(0.0, np.pi, n - n_outer)
        pts = np.concatenate([
            np.column_stack([np.cos(t_outer), np.sin(t_outer)]),
            np.column_stack([1.0 - np.cos(t_inner), 0.5 - np.sin(t_inner)]),
        ]) if n else np.zeros((0, 2))
        pts = pts + 0.05 * rng.standard_normal((n, 2))
    elif kind == "gaussian-mixture":
        comp = rng.integers(0, 4, size=n)
        pts = _MIXTURE_CENTERS[comp] + 0.5 * rng.standard_normal((n, 2))
    elif kind == "checkerboard":
        cell = rng.integers(0, len(_BOARD_CELLS), size=n)
        ij = np.array(_BOARD_CELLS, dtype=np.float64)[cell]
        pts = -2.0 + ij + rng.uniform(0.0, 1.0, size=(n, 2))
    else:
        raise PersistError(f"unknown synthetic dataset kind {kind!r}")
    return Dataset(kind=kind, samples=pts.reshape(n, 2))


def make_blob_images(n: int, height: int = 8, width: int = 8,
                     seed: int = 0) -> Dataset:
    """Smooth toy images: one or two Gaussian bumps on a dark background."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    samples = np.zeros((n, height * width))
    for i in range(n):
        img = np.full((height, width), 0.05)
        for _ in range(rng.integers(1, 3)):
            cy = rng.uniform(1.0, height - 2.0)
            cx = rng.uniform(1.0, width - 2.0)
            rad = rng.uniform(1.0, 2.5)
            amp = rng.uniform(0.5, 0.9)
            img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad * rad))
        samples[i] = np.clip(img, 0.0, 1.0).reshape(-1)
    return Dataset(kind="blobs", samples=samples, image_shape=(height, width, 1))


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

TASKS = ("inpaint", "cs", "sr2x", "grayscale", "toy2d", "sat")

_PATH_KEYS = ("path", "mask_path", "y_path", "gt_path", "cnf_path",
              "base_checkpoint", "conditional_checkpoint", "samples_path")


class RunConfig:
    """Typed access to a flat sections-of-key=value run file."""

    def __init__(self, parser: configparser.ConfigParser, path: str,
                 overrides: tuple[str, ...] = ()):
        self._cp = parser
        self.path = path
        self.overrides = overrides
        self.task = self.get("run", "task")
        if self.task not in TASKS:
            raise ConfigError("run.task", f"must be one of {TASKS}, got {self.task!r}")
        self.output_dir = self.get("run", "output_dir")
        if not self.output_dir:
            raise ConfigError("run.output_dir", "is required")
        self.seed = self.getint("run", "seed", 0)

    # -- raw getters -------------------------------------------------------

    def get(self, section: str, key: str, default: str | None = None) -> str:
        if self._cp.has_option(section, key):
            return self._cp.get(section, key).strip()
        if default is None:
            raise ConfigError(f"{section}.{key}", "is required")
        return default

    def has(self, section: str, key: str) -> bool:
        return self._cp.has_option(section, key) and \
            self._cp.get(section, key).strip() != ""

    def getint(self, section, key, default=None):
        raw = self.get(section, key, None if default is None else str(default))
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key}", f"expected integer, got {raw!r}")

    def getfloat(self, section, key, default=None):
        raw = self.get(section, key, None if default is None else repr(default))
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key}", f"expected number, got {raw!r}")

    def getfloats(self, section, key, default=None):
        raw = self.get(section, key, default)
        try:
            return [float(tok) for tok in raw.split(",") if tok.strip()]
        except ValueError:
            raise ConfigError(f"{section}.{key}", f"expected comma floats, got {raw!r}")

    def getints(self, section, key, default=None):
        raw = self.get(section, key, default)
        try:
            return [int(tok) for tok in raw.split(",") if tok.strip()]
        except ValueError:
            raise ConfigError(f"{section}.{key}", f"expected comma ints, got {raw!r}")

    def canonical_text(self) -> str:
        buf = io.StringIO()
        self._cp.write(buf)
        if self.overrides:
            buf.write("\n# overrides\n")
            for ov in self.overrides:
                buf.write(f"# {ov}\n")
        return buf.getvalue()

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()


def load_run_config(path, overrides=()) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as f:
            parser.read_file(f)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}")
    except configparser.Error as e:
        raise ConfigError("config", f"parse failure: {e}")
    for ov in overrides:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError("override", f"expected section.key=value, got {ov!r}")
        target, value = ov.split("=", 1)
        section, key = target.split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section.strip(), key.strip(), value.strip())
    cfg = RunConfig(parser, str(path), tuple(overrides))
    # referenced paths must exist up front
    for section in parser.sections():
        for key in parser.options(section):
            if key in _PATH_KEYS and parser.get(section, key).strip():
                p = parser.get(section, key).strip()
                if not os.path.exists(p):
                    raise ConfigError(f"{section}.{key}", f"path does not exist: {p}")
    if cfg.task != "sat":
        sigma = cfg.getfloat("train", "sigma", 0.1)
        if not sigma > 0.0:
            raise ConfigError("train.sigma", "must be positive")
    return cfg


# ---------------------------------------------------------------------------
# manifests and the output lock
# ---------------------------------------------------------------------------

def package_version() -> str:
    try:
        from importlib.metadata import version
        return version("flowcond")
    except Exception:
        return "unknown"


def write_manifest(output_dir, cfg: RunConfig, command: str) -> Path:
    path = Path(output_dir) / "manifest.txt"
    lines = [
        f"command={command}",
        f"config={cfg.path}",
        f"config_sha256={cfg.config_hash()}",
        f"seed={cfg.seed}",
        f"task={cfg.task}",
        f"flowcond_version={package_version()}",
        f"numpy_version={np.__version__}",
    ]
    for ov in cfg.overrides:
        lines.append(f"override={ov}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@contextlib.contextmanager
def output_lock(output_dir):
    """Guard an output directory against concurrent runs."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"output directory {out} is locked by another run "
                        f"(remove {lock} if stale)")
    try:
        os.write(fd, f"{os.getpid()}\n".encode("ascii"))
        os.close(fd)
        yield out
    finally:
        with contextlib.suppress(FileNotFoundError):
            lock.unlink()

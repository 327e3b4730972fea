"""Volume container, the raw ``.vol`` + ``.vol.hdr`` file format, phantoms
and aligned crop sampling.

File format
-----------
``name.vol``      raw little-endian float32 payload, (H, W, D) raster order
                  (D varies fastest).
``name.vol.hdr``  UTF-8 text, one ``key=value`` per line::

                      dims=H,W,D
                      dtype=f32
                      endian=LE
                      spacing=sx,sy,sz
                      id=subject-001
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import DataError

HEADER_SUFFIX = ".hdr"
_DTYPES = {"f32": np.dtype("<f4")}


class VolumeFormatError(DataError):
    """Header or payload cannot be interpreted."""


class TruncatedPayloadError(VolumeFormatError):
    """Payload holds fewer elements than the header dims require."""


class SizeMismatchError(VolumeFormatError):
    """Payload holds more elements than the header dims describe."""


class UnknownDtypeError(VolumeFormatError):
    """Header names a dtype tag this reader does not support."""


class DegenerateRangeError(DataError, ValueError):
    """Volume has no intensity range to normalise."""


@dataclass
class Volume:
    data: np.ndarray  # [1, H, W, D] float32
    spacing: tuple = (1.0, 1.0, 1.0)
    id: str = "volume"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[0] != 1:
            raise ValueError(f"volume data must be [1,H,W,D] or [H,W,D], got {arr.shape}")
        self.data = arr
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")

    @property
    def dims(self):
        return self.data.shape[1:]

    @property
    def array(self):
        """The [H, W, D] intensity grid."""
        return self.data[0]

    def tensor(self):
        return Tensor(self.data)


def header_path(path):
    path = Path(path)
    return path.with_name(path.name + HEADER_SUFFIX)


def save_volume(v, path):
    path = Path(path)
    if "\n" in v.id or "\r" in v.id:
        raise ValueError("volume id must be a single line")
    lines = [
        "dims=" + ",".join(str(n) for n in v.dims),
        "dtype=f32",
        "endian=LE",
        "spacing=" + ",".join(repr(s) for s in v.spacing),
        "id=" + v.id,
    ]
    header_path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    path.write_bytes(np.ascontiguousarray(v.array, dtype="<f4").tobytes(order="C"))


def read_header(path):
    hdr = header_path(path)
    if not hdr.exists():
        raise VolumeFormatError(f"missing header {hdr}")
    fields = {}
    for lineno, line in enumerate(hdr.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise VolumeFormatError(f"{hdr}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()
    for key in ("dims", "dtype", "endian"):
        if key not in fields:
            raise VolumeFormatError(f"{hdr}: missing '{key}'")
    if fields["dtype"] not in _DTYPES:
        raise UnknownDtypeError(f"{hdr}: unknown dtype tag {fields['dtype']!r}")
    if fields["endian"] != "LE":
        raise VolumeFormatError(f"{hdr}: unsupported endianness {fields['endian']!r}")
    try:
        dims = tuple(int(n) for n in fields["dims"].split(","))
        spacing = tuple(float(s) for s in fields.get("spacing", "1,1,1").split(","))
    except ValueError:
        raise VolumeFormatError(f"{hdr}: malformed dims or spacing") from None
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeFormatError(f"{hdr}: dims must be three positive ints, got {dims}")
    return {"dims": dims, "dtype": fields["dtype"], "spacing": spacing, "id": fields.get("id", Path(path).stem)}


def load_volume(path):
    path = Path(path)
    hdr = read_header(path)
    if not path.exists():
        raise VolumeFormatError(f"missing payload {path}")
    raw = path.read_bytes()
    dtype = _DTYPES[hdr["dtype"]]
    expected = int(np.prod(hdr["dims"]))
    if len(raw) % dtype.itemsize:
        raise TruncatedPayloadError(f"{path}: payload is not a whole number of {hdr['dtype']} values")
    n = len(raw) // dtype.itemsize
    if n < expected:
        raise TruncatedPayloadError(f"{path}: payload has {n} values, header dims need {expected}")
    if n > expected:
        raise SizeMismatchError(f"{path}: payload has {n} values, header dims describe {expected}")
    data = np.frombuffer(raw, dtype=dtype).reshape(hdr["dims"]).astype(np.float32)
    return Volume(data, spacing=hdr["spacing"], id=hdr["id"])


def list_volumes(directory):
    """Sorted ``.vol`` payload paths in ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"dataset directory {directory} does not exist")
    return sorted(p for p in directory.glob("*.vol") if p.is_file())


def normalize(v):
    """Min-max scale intensities to [0, 1]."""
    arr = v.array.astype(np.float64)
    lo, hi = arr.min(), arr.max()
    if not hi > lo:
        raise DegenerateRangeError(f"volume {v.id!r} is constant; cannot normalise")
    out = (arr - lo) / (hi - lo)
    return Volume(np.clip(out, 0.0, 1.0).astype(np.float32), spacing=v.spacing, id=v.id)


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


def synth_phantom(seed, size=(32, 32, 32)):
    """Deterministic head-like phantom normalised to [0, 1].

    A sum of 5-12 randomly oriented ellipsoids with distinct intensities
    (steep sigmoid edges, so the boundaries are sharp at voxel scale) on a
    low-amplitude smooth background.
    """
    size = tuple(int(s) for s in size)
    if len(size) != 3 or min(size) < 16:
        raise ValueError(f"phantom size must be at least 16 per axis, got {size}")
    rng = np.random.default_rng(seed)
    axes = [np.linspace(-1.0, 1.0, n) for n in size]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)  # [H,W,D,3]

    freq = rng.uniform(0.5, 1.5, size=3)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    vol = 0.05 * np.prod(np.sin(np.pi * freq * grid + phase), axis=-1)

    count = int(rng.integers(5, 13))
    intensities = rng.permutation(np.linspace(0.2, 1.0, count))
    for k in range(count):
        centre = rng.uniform(-0.45, 0.45, size=3)
        radii = rng.uniform(0.12, 0.55, size=3)
        rot = _random_rotation(rng)
        local = (grid - centre) @ rot
        r = np.sqrt(((local / radii) ** 2).sum(axis=-1))
        sharpness = rng.uniform(20.0, 60.0)
        vol += intensities[k] / (1.0 + np.exp(np.clip(sharpness * (r - 1.0), -60, 60)))
    return normalize(Volume(vol.astype(np.float32), id=f"phantom-{seed}"))


def random_crop_pair(hr, lr, crop, rng):
    """Aligned cubic crops from an HR volume and its same-size LR version.

    ``rng`` is a ``numpy.random.Generator`` owned by the caller. Returns two
    ``[1, crop, crop, crop]`` tensors and the crop origin.
    """
    if hr.dims != lr.dims:
        raise ValueError(f"HR dims {hr.dims} differ from LR dims {lr.dims}")
    if any(crop > n for n in hr.dims):
        raise ValueError(f"crop {crop} larger than volume {hr.dims}")
    origin = tuple(int(rng.integers(0, n - crop + 1)) for n in hr.dims)
    sl = (slice(None),) + tuple(slice(o, o + crop) for o in origin)
    return Tensor(np.ascontiguousarray(hr.data[sl])), Tensor(np.ascontiguousarray(lr.data[sl])), origin

"""3D seismic volume I/O, slice sampling, label sparsification and synthesis.

Volumes live on disk as a raw little-endian payload (``<name>.dat``) next to a
JSON sidecar (``<name>.json``) declaring shape, dtype and axis order. In
memory everything is kept in canonical (inline, crossline, depth) order.
An inline slice ``data[i]`` therefore has shape (n_crossline, n_depth).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve1d

from .errors import ConfigError, DataError, FormatError, GenerationError

log = logging.getLogger(__name__)

IGNORE_LABEL = -1

CANONICAL_AXES = ("inline", "crossline", "depth")

_DTYPES = {"float32": np.dtype("<f4"), "int32": np.dtype("<i4")}


@dataclass
class SeismicVolume:
    """Dense amplitude volume, canonical (inline, crossline, depth) order."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise DataError(f"expected 3D volume, got {self.data.ndim}D")
        if any(s < 1 for s in self.data.shape):
            raise DataError(f"degenerate volume shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise DataError("volume contains NaN/Inf amplitudes")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def n_inline(self) -> int:
        return self.data.shape[0]

    def normalized(self) -> "SeismicVolume":
        """Zero-mean unit-variance copy (whole-volume statistics)."""
        x = self.data.astype(np.float64)
        std = x.std()
        if std == 0.0:
            return SeismicVolume(np.zeros_like(self.data))
        return SeismicVolume(((x - x.mean()) / std).astype(np.float32))


@dataclass
class LabelVolume:
    """Facies class ids in [0, classes) with IGNORE_LABEL for unlabeled voxels."""

    labels: np.ndarray
    classes: int
    class_names: list[str] | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 3:
            raise DataError(f"expected 3D labels, got {self.labels.ndim}D")
        if self.classes < 1:
            raise DataError(f"classes must be >= 1, got {self.classes}")
        bad = (self.labels != IGNORE_LABEL) & (
            (self.labels < 0) | (self.labels >= self.classes)
        )
        if bad.any():
            raise DataError(
                f"labels outside [0, {self.classes}) present "
                f"(e.g. {int(self.labels[bad][0])})"
            )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class SliceSamplingPlan:
    """Uniform-stride slice selection along one survey axis."""

    stride: int
    offset: int = 0
    axis: str = "inline"

    def __post_init__(self):
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if not 0 <= self.offset < self.stride:
            raise ConfigError(
                f"offset must be in [0, stride), got offset={self.offset} "
                f"stride={self.stride}"
            )
        if self.axis not in ("inline", "crossline"):
            raise ConfigError(f"unknown slicing axis {self.axis!r}")

    def selected_indices(self, n: int) -> np.ndarray:
        return np.arange(self.offset, n, self.stride)

    def held_out_indices(self, n: int) -> np.ndarray:
        mask = np.ones(n, dtype=bool)
        mask[self.selected_indices(n)] = False
        return np.flatnonzero(mask)


@dataclass(frozen=True)
class SparsityConfig:
    """Random label thinning: keep a fixed fraction of labeled pixels."""

    keep_fraction: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.keep_fraction <= 1.0:
            raise ConfigError(
                f"keep_fraction must be in [0,1], got {self.keep_fraction}"
            )


@dataclass
class SliceSet:
    """A stack of 2D slices plus optional labels; the unit of model input."""

    indices: np.ndarray
    data: np.ndarray                 # (n, H, W) float32
    labels: np.ndarray | None = None  # (n, H, W) int64 or None

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class TrainingSplit:
    labeled: SliceSet
    unlabeled: SliceSet
    test: SliceSet


# ---------------------------------------------------------------------------
# disk format
# ---------------------------------------------------------------------------

def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def _read_header(header_path: Path) -> dict:
    with open(header_path) as fh:
        header = json.load(fh)
    for key in ("shape", "dtype", "axes"):
        if key not in header:
            raise FormatError(f"sidecar {header_path} missing key {key!r}")
    if header["dtype"] not in _DTYPES:
        raise FormatError(f"unsupported dtype {header['dtype']!r}")
    axes = tuple(header["axes"])
    if sorted(axes) != sorted(CANONICAL_AXES):
        raise FormatError(f"axes must be a permutation of {CANONICAL_AXES}, got {axes}")
    if len(header["shape"]) != 3:
        raise FormatError(f"shape must have 3 entries, got {header['shape']}")
    return header


def _read_payload(path: Path, header: dict) -> np.ndarray:
    dtype = _DTYPES[header["dtype"]]
    shape = tuple(int(s) for s in header["shape"])
    raw = np.fromfile(path, dtype=dtype)
    expected = int(np.prod(shape))
    if raw.size != expected:
        raise FormatError(
            f"{path}: payload has {raw.size} values, header shape {shape} "
            f"needs {expected}"
        )
    arr = raw.reshape(shape)
    # canonicalize axis order
    order = [tuple(header["axes"]).index(ax) for ax in CANONICAL_AXES]
    return np.transpose(arr, order)


def load_volume(path, header=None, normalize: bool = True) -> SeismicVolume:
    """Load a seismic volume from ``<name>.dat`` + JSON sidecar.

    ``normalize`` rescales amplitudes to zero mean / unit variance; pass
    False to get the raw payload back bit-exactly.
    """
    path = Path(path)
    header_path = Path(header) if header is not None else _sidecar_path(path)
    hdr = _read_header(header_path)
    vol = SeismicVolume(_read_payload(path, hdr))
    return vol.normalized() if normalize else vol


def load_labels(path, header=None) -> LabelVolume:
    """Load a label volume; the sidecar must carry a ``classes`` count."""
    path = Path(path)
    header_path = Path(header) if header is not None else _sidecar_path(path)
    hdr = _read_header(header_path)
    if "classes" not in hdr:
        raise FormatError(f"label sidecar {header_path} missing 'classes'")
    arr = _read_payload(path, hdr)
    return LabelVolume(arr, int(hdr["classes"]), hdr.get("class_names"))


def save_volume(volume: SeismicVolume, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    volume.data.astype("<f4").tofile(path)
    header = {
        "shape": list(volume.shape),
        "dtype": "float32",
        "axes": list(CANONICAL_AXES),
    }
    with open(_sidecar_path(path), "w") as fh:
        json.dump(header, fh, indent=2)
    return path


def save_labels(labels: LabelVolume, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels.labels.astype("<i4").tofile(path)
    header = {
        "shape": list(labels.shape),
        "dtype": "int32",
        "axes": list(CANONICAL_AXES),
        "classes": labels.classes,
        "class_names": labels.class_names
        or [f"class_{c}" for c in range(labels.classes)],
    }
    with open(_sidecar_path(path), "w") as fh:
        json.dump(header, fh, indent=2)
    return path


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _take_slices(arr: np.ndarray, indices: np.ndarray, axis: str) -> np.ndarray:
    if axis == "inline":
        return arr[indices]
    return np.transpose(arr[:, indices], (1, 0, 2))


def sample_training_slices(
    volume: SeismicVolume, labels: LabelVolume, plan: SliceSamplingPlan
) -> TrainingSplit:
    """Split a volume into labeled slices, unlabeled slices and held-out labels.

    Labeled slices sit on the plan's stride grid; everything else becomes the
    unlabeled stream, whose labels are returned separately for evaluation.
    """
    if volume.shape != labels.shape:
        raise DataError(
            f"volume shape {volume.shape} != label shape {labels.shape}"
        )
    n = volume.shape[0] if plan.axis == "inline" else volume.shape[1]
    picked = plan.selected_indices(n)
    if picked.size == 0:
        raise ConfigError(
            f"plan (stride={plan.stride}, offset={plan.offset}) selects no "
            f"slices on axis of length {n}"
        )
    rest = plan.held_out_indices(n)
    labeled = SliceSet(
        picked,
        _take_slices(volume.data, picked, plan.axis),
        _take_slices(labels.labels, picked, plan.axis),
    )
    unlabeled = SliceSet(rest, _take_slices(volume.data, rest, plan.axis))
    test = SliceSet(
        rest,
        _take_slices(volume.data, rest, plan.axis),
        _take_slices(labels.labels, rest, plan.axis),
    )
    return TrainingSplit(labeled, unlabeled, test)


def sparsify_labels(labels: np.ndarray, cfg: SparsityConfig) -> np.ndarray:
    """Keep round(keep_fraction * n_labeled) labeled pixels, IGNORE the rest.

    Works on any label array (slice stacks or full volumes). Pixels that are
    already IGNORE stay IGNORE; kept pixels keep their class untouched.
    """
    labels = np.asarray(labels, dtype=np.int64)
    out = np.full_like(labels, IGNORE_LABEL)
    labeled_pos = np.flatnonzero(labels.ravel() != IGNORE_LABEL)
    n_keep = int(round(cfg.keep_fraction * labeled_pos.size))
    if n_keep > 0:
        rng = np.random.default_rng(cfg.seed)
        kept = rng.choice(labeled_pos, size=n_keep, replace=False)
        out.ravel()[kept] = labels.ravel()[kept]
    return out


# ---------------------------------------------------------------------------
# synthetic volumes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Layered-stratigraphy generator settings.

    Labels partition depth into quasi-horizontal bands whose interfaces
    undulate sinusoidally and may be offset by faults; amplitudes combine a
    per-class base reflectivity, a wavelet response at interfaces and
    Gaussian noise.
    """

    shape: tuple[int, int, int] = (64, 64, 128)
    layers: int = 6
    wavelength: float = 48.0          # lateral undulation wavelength, voxels
    relief: float = 5.0               # undulation amplitude, depth voxels
    class_amplitudes: tuple[float, ...] | None = None
    noise_level: float = 0.15
    fault_count: int = 2
    fault_max_throw: float = 8.0
    wavelet_width: float = 3.0        # ricker stddev, depth samples
    dip: float = 0.0                  # uniform depth drift per inline step

    def __post_init__(self):
        if self.layers < 2:
            raise ConfigError(f"layers must be >= 2, got {self.layers}")
        if self.noise_level < 0:
            raise ConfigError(f"noise_level must be >= 0, got {self.noise_level}")
        if self.class_amplitudes is not None and len(self.class_amplitudes) != self.layers:
            raise ConfigError(
                f"need {self.layers} class amplitudes, got "
                f"{len(self.class_amplitudes)}"
            )


def _ricker(width: float) -> np.ndarray:
    half = max(int(round(4 * width)), 1)
    t = np.arange(-half, half + 1, dtype=np.float64)
    a = (t / width) ** 2
    return (1.0 - a) * np.exp(-a / 2.0)


def synth_volume(spec: SynthSpec, seed: int = 0) -> tuple[SeismicVolume, LabelVolume]:
    """Generate a layered synthetic survey; deterministic per seed."""
    rng = np.random.default_rng(seed)
    ni, nc, nd = spec.shape
    n_if = spec.layers - 1

    ii = np.arange(ni, dtype=np.float64)[:, None]
    cc = np.arange(nc, dtype=np.float64)[None, :]

    # evenly spaced base interfaces, each undulating with its own phase
    base = (np.arange(1, spec.layers) * nd / spec.layers)[:, None, None]
    phase_i = rng.uniform(0, 2 * np.pi, size=n_if)
    phase_c = rng.uniform(0, 2 * np.pi, size=n_if)
    horizon = base + spec.relief * (
        np.sin(2 * np.pi * ii / spec.wavelength + phase_i[:, None, None])
        + 0.6 * np.sin(2 * np.pi * cc / (0.75 * spec.wavelength) + phase_c[:, None, None])
    )
    if spec.dip:
        horizon = horizon + spec.dip * (ii - ni / 2.0)

    # vertical-offset faults: every interface shifts past a fault plane
    for _ in range(spec.fault_count):
        axis = int(rng.integers(0, 2))
        n_axis = ni if axis == 0 else nc
        pos = int(rng.integers(n_axis // 4, 3 * n_axis // 4))
        throw = rng.uniform(0.35, 1.0) * spec.fault_max_throw * rng.choice([-1.0, 1.0])
        sel = (ii >= pos) if axis == 0 else (cc >= pos)
        horizon = horizon + throw * sel[None, :, :]

    # keep interfaces ordered with at least one sample of separation
    horizon = np.clip(horizon, 1.0, nd - 1.0)
    for k in range(1, n_if):
        horizon[k] = np.maximum(horizon[k], horizon[k - 1] + 1.0)

    depth = np.arange(nd, dtype=np.float64)[None, None, :]
    labels = np.zeros((ni, nc, nd), dtype=np.int64)
    for k in range(n_if):
        labels += depth >= horizon[k][:, :, None]

    amps = spec.class_amplitudes
    if amps is None:
        amps = tuple(np.linspace(-1.0, 1.0, spec.layers))
    base_map = np.asarray(amps, dtype=np.float64)[labels]

    # wavelet response fired by reflectivity contrasts along depth
    rc = np.zeros_like(base_map)
    rc[:, :, 1:] = np.diff(base_map, axis=2)
    response = convolve1d(rc, _ricker(spec.wavelet_width), axis=2, mode="nearest")

    data = base_map + response
    if spec.noise_level > 0:
        data = data + rng.normal(0.0, spec.noise_level, size=data.shape)

    counts = np.bincount(labels.ravel(), minlength=spec.layers)
    min_frac = counts / labels.size
    for cid in range(spec.layers):
        if min_frac[cid] < 0.01:
            raise GenerationError(
                f"class {cid} occupies {100 * min_frac[cid]:.2f}% of voxels "
                f"(< 1%); adjust relief/fault settings",
                class_id=cid,
            )

    return SeismicVolume(data.astype(np.float32)), LabelVolume(labels, spec.layers)

"""Grid types, analytic dynamic phantoms, scan schedules and raw volume I/O.

All geometry lives in the normalized box [-1, 1]^3.  Arrays are indexed
``(z, y, x)``; coordinates and displacement vectors are ordered ``(x, y, z)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import PhantomSpecError, VolumeFormatError
from .grid import cell_centers

EXTENT = (-1.0, 1.0)
AXES = ("x", "y", "z")


def _readonly(arr):
    arr = np.asarray(arr)
    view = arr.view()
    view.flags.writeable = False
    return view


@dataclass(frozen=True)
class Volume3:
    """A static attenuation field sampled on a cell-centered (Z, Y, X) grid."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"Volume3 needs a rank-3 array, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        if not np.all(np.isfinite(data)):
            raise ValueError("Volume3 values must be finite")
        object.__setattr__(self, "data", _readonly(data))

    @property
    def shape(self):
        return self.data.shape

    @property
    def planar(self):
        """True for a single-slice (2D) volume."""
        return self.data.shape[0] == 1

    @property
    def spacing(self):
        return tuple(2.0 / n for n in self.data.shape)

    @property
    def extent(self):
        return EXTENT


@dataclass(frozen=True)
class Volume4:
    """A time-ordered stack of frames, stored as one (T, Z, Y, X) array."""

    data: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        if data.ndim != 4:
            raise ValueError(f"Volume4 needs a rank-4 array, got shape {data.shape}")
        if times.size != data.shape[0]:
            raise ValueError(f"{data.shape[0]} frames but {times.size} times")
        _check_times(times)
        if not np.all(np.isfinite(data)):
            raise ValueError("Volume4 values must be finite")
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "times", _readonly(times))

    @classmethod
    def from_frames(cls, frames, times):
        return cls(np.stack([np.asarray(getattr(f, "data", f)) for f in frames]), times)

    @property
    def frames(self):
        return [Volume3(d) for d in self.data]

    @property
    def shape(self):
        return self.data.shape

    def __len__(self):
        return self.data.shape[0]


def _check_times(times, error=ValueError):
    if times.size == 0:
        raise error("empty time list")
    if np.any(times < 0.0) or np.any(times > 1.0) or not np.all(np.isfinite(times)):
        raise error("times must lie in [0, 1]")
    if times.size > 1 and np.any(np.diff(times) <= 0.0):
        raise error("times must be strictly increasing")


# ---------------------------------------------------------------------------
# Scan schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScanSchedule:
    """One view angle per projection, each acquired at its own normalized time."""

    angles_deg: np.ndarray
    times: np.ndarray
    arc: tuple
    endpoint: bool = True

    def __post_init__(self):
        angles = np.asarray(self.angles_deg, dtype=np.float64).reshape(-1)
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        if angles.size < 2 or angles.size != times.size:
            raise ValueError("a schedule needs N >= 2 angles and as many times")
        _check_times(times)
        object.__setattr__(self, "angles_deg", _readonly(angles))
        object.__setattr__(self, "times", _readonly(times))
        object.__setattr__(self, "arc", (float(self.arc[0]), float(self.arc[1])))

    @property
    def n_proj(self):
        return self.angles_deg.size

    def subset(self, indices):
        """Angles and times of the selected projections (not itself a schedule)."""
        indices = np.asarray(indices)
        return self.angles_deg[indices], self.times[indices]


def make_schedule(start_deg, stop_deg, n_proj, endpoint=True):
    """Contiguous acquisition of ``n_proj`` views from ``start_deg`` to ``stop_deg``.

    Time runs linearly with the view index, ``t_i = i / (n_proj - 1)``.  With
    ``endpoint=False`` the stop angle itself is not sampled.
    """
    n_proj = int(n_proj)
    if n_proj < 2:
        raise ValueError(f"n_proj must be >= 2, got {n_proj}")
    if stop_deg == start_deg:
        raise ValueError("stop angle must differ from start angle")
    angles = np.linspace(start_deg, stop_deg, n_proj, endpoint=endpoint)
    times = np.arange(n_proj) / (n_proj - 1)
    return ScanSchedule(angles, times, (start_deg, stop_deg), endpoint)


# ---------------------------------------------------------------------------
# Analytic phantoms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple
    semi_axes: tuple
    value: float
    phi_deg: float = 0.0  # rotation about z


@dataclass(frozen=True)
class Static:
    pass


@dataclass(frozen=True)
class Translate:
    velocity: tuple  # box units per unit time, (x, y, z)


@dataclass(frozen=True)
class Sinusoid:
    axis: str
    amplitude: float
    period: float


@dataclass(frozen=True)
class Squeeze:
    """Compression toward the plane ``axis = 0``, strongest near the axis line.

    A rest coordinate ``c`` along ``axis`` maps to ``c * s`` with
    ``s = 1 - peak * t * exp(-d^2 / width^2)`` and ``d`` the distance from the
    axis line (measured in the two remaining coordinates).
    """

    axis: str
    peak: float
    width: float = 0.5


def _axis_index(axis):
    if axis not in AXES:
        raise PhantomSpecError(f"axis must be one of {AXES}, got {axis!r}")
    return AXES.index(axis)


@dataclass(frozen=True)
class PhantomSpec:
    """Additive ellipsoids moved by one global analytic motion law.

    Validation guarantees that the support stays inside the cylinder of
    radius ``1 - fit_margin`` around the z axis for every t in [0, 1].
    """

    ellipsoids: tuple
    motion: object = field(default_factory=Static)
    fit_margin: float = 0.02
    planar: bool = False

    def __post_init__(self):
        object.__setattr__(self, "ellipsoids", tuple(self.ellipsoids))
        if not 0.0 <= self.fit_margin < 1.0:
            raise PhantomSpecError("fit_margin must lie in [0, 1)")
        m = self.motion
        if isinstance(m, Translate):
            if len(m.velocity) != 3:
                raise PhantomSpecError("translate velocity needs three components")
        elif isinstance(m, Sinusoid):
            _axis_index(m.axis)
            if m.period <= 0:
                raise PhantomSpecError("sinusoid period must be positive")
        elif isinstance(m, Squeeze):
            ax = _axis_index(m.axis)
            if not 0.0 <= m.peak < 1.0:
                raise PhantomSpecError("squeeze peak must lie in [0, 1)")
            if m.width <= 0:
                raise PhantomSpecError("squeeze width must be positive")
            if self.planar and ax == 2:
                raise PhantomSpecError("a planar phantom cannot squeeze along z")
        elif not isinstance(m, Static):
            raise PhantomSpecError(f"unknown motion law {m!r}")
        for e in self.ellipsoids:
            if len(e.center) != 3 or len(e.semi_axes) != 3:
                raise PhantomSpecError("ellipsoid center and semi-axes need three components")
            if min(e.semi_axes) <= 0:
                raise PhantomSpecError("semi-axes must be positive")
        limit = 1.0 - self.fit_margin
        reach = max((_max_reach(e, off) for e in self.ellipsoids for off in _offsets(self.motion)),
                    default=0.0)
        if reach + 1e-6 > limit:
            raise PhantomSpecError(
                f"phantom support reaches radius {reach:.4f} > {limit:.4f} (inscribed circle minus margin)")

    def with_values(self, values):
        """Copy with the ellipsoid values replaced."""
        ells = tuple(replace(e, value=float(v)) for e, v in zip(self.ellipsoids, values, strict=True))
        return replace(self, ellipsoids=ells)

    def with_motion(self, motion):
        return replace(self, motion=motion)


def _offsets(motion):
    # Extreme in-plane offsets over t in [0, 1]; reach is convex in the offset,
    # so checking the endpoints of the offset segment bounds every t.
    if isinstance(motion, Translate):
        return [np.zeros(2), np.asarray(motion.velocity[:2], dtype=float)]
    if isinstance(motion, Sinusoid):
        ax = _axis_index(motion.axis)
        if ax == 2:
            return [np.zeros(2)]
        out = []
        for s in (-1.0, 1.0):
            o = np.zeros(2)
            o[ax] = s * motion.amplitude
            out.append(o)
        return out
    # squeezing only shrinks coordinates
    return [np.zeros(2)]


def _max_reach(e, offset, n=4096):
    phi = math.radians(e.phi_deg)
    u = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    a, b = e.semi_axes[0], e.semi_axes[1]
    px = a * np.cos(u) * math.cos(phi) - b * np.sin(u) * math.sin(phi)
    py = a * np.cos(u) * math.sin(phi) + b * np.sin(u) * math.cos(phi)
    cx = e.center[0] + offset[0]
    cy = e.center[1] + offset[1]
    return float(np.max(np.hypot(cx + px, cy + py)))


# Modified (high-contrast) Shepp-Logan tables.
# 2D: value, a, b, x0, y0, phi
_SL2 = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
]
# 3D: value, a, b, c, x0, y0, z0, phi
_SL3 = [
    (1.0, 0.69, 0.92, 0.81, 0.0, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.78, 0.0, -0.0184, 0.0, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.22, 0.0, 0.0, -18.0),
    (-0.2, 0.16, 0.41, 0.28, -0.22, 0.0, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.41, 0.0, 0.35, -0.15, 0.0),
    (0.1, 0.046, 0.046, 0.05, 0.0, 0.1, 0.25, 0.0),
    (0.1, 0.046, 0.046, 0.05, 0.0, -0.1, 0.25, 0.0),
    (0.1, 0.046, 0.023, 0.05, -0.08, -0.605, 0.0, 0.0),
    (0.1, 0.023, 0.023, 0.02, 0.0, -0.606, 0.0, 0.0),
    (0.1, 0.023, 0.046, 0.02, 0.06, -0.605, 0.0, 0.0),
]


def shepp_logan_spec(dim=2, motion=None, fit_margin=0.02):
    """The modified Shepp-Logan phantom as a :class:`PhantomSpec`."""
    if dim == 2:
        ells = [Ellipsoid((x0, y0, 0.0), (a, b, 1.0), v, phi) for v, a, b, x0, y0, phi in _SL2]
    elif dim == 3:
        ells = [Ellipsoid((x0, y0, z0), (a, b, c), v, phi) for v, a, b, c, x0, y0, z0, phi in _SL3]
    else:
        raise ValueError(f"dim must be 2 or 3, got {dim}")
    return PhantomSpec(tuple(ells), motion or Static(), fit_margin, planar=(dim == 2))


def shepp_logan(dim, side, supersample=False):
    """Rasterize the static modified Shepp-Logan phantom; 2D gives a single slice."""
    if side < 8:
        raise ValueError(f"side must be >= 8, got {side}")
    return render_phantom(shepp_logan_spec(dim), side, 0.0, supersample=supersample)


def _rest_positions(motion, x, y, z, t):
    """Map observed positions at time t back to rest positions."""
    if isinstance(motion, Translate):
        vx, vy, vz = motion.velocity
        return x - vx * t, y - vy * t, z - vz * t
    if isinstance(motion, Sinusoid):
        shift = motion.amplitude * math.sin(2.0 * math.pi * t / motion.period)
        pos = [x, y, z]
        ax = AXES.index(motion.axis)
        pos[ax] = pos[ax] - shift
        return tuple(pos)
    if isinstance(motion, Squeeze) and motion.peak > 0.0 and t > 0.0:
        pos = [x, y, z]
        ax = AXES.index(motion.axis)
        others = [pos[i] for i in range(3) if i != ax]
        d2 = others[0] ** 2 + others[1] ** 2
        scale = 1.0 - motion.peak * t * np.exp(-d2 / motion.width**2)
        pos[ax] = pos[ax] / scale
        return tuple(pos)
    return x, y, z


def _slice_values(spec, x, y, z, t):
    px, py, pz = _rest_positions(spec.motion, x, y, z, t)
    out = np.zeros(np.broadcast(px, py, pz).shape)
    for e in spec.ellipsoids:
        if e.value == 0.0:
            continue
        phi = math.radians(e.phi_deg)
        c, s = math.cos(phi), math.sin(phi)
        dx = px - e.center[0]
        dy = py - e.center[1]
        # rotate into the ellipsoid frame
        u = (c * dx + s * dy) / e.semi_axes[0]
        v = (-s * dx + c * dy) / e.semi_axes[1]
        r2 = u * u + v * v
        if not spec.planar:
            w = (pz - e.center[2]) / e.semi_axes[2]
            r2 = r2 + w * w
        out += np.where(r2 <= 1.0, e.value, 0.0)
    # cancelling values (e.g. 1 - 0.8 - 0.2) leave round-off residue
    out[np.abs(out) < 1e-12] = 0.0
    return out


def render_phantom(spec, side, t, supersample=False, dtype=np.float32):
    """Rasterize ``spec`` at normalized time ``t`` on a cell-centered grid.

    Values are point samples at cell centers, or with ``supersample`` the
    mean over an ``n x n (x n)`` grid of sub-cell centers (``True`` means
    n = 2).  Planar specs give shape ``(1, side, side)`` sampled in the
    plane z = 0.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if side < 1:
        raise ValueError("side must be positive")
    nz = 1 if spec.planar else side
    sub = 2 if supersample is True else max(1, int(supersample))
    xs = cell_centers(side * sub)
    zs = np.zeros(1) if spec.planar else cell_centers(nz * sub)
    y, x = np.meshgrid(xs, xs, indexing="ij")
    slices = []
    for z in zs:
        slices.append(_slice_values(spec, x, y, z, t))
    vol = np.stack(slices)
    if sub > 1:
        zsub = 1 if spec.planar else sub
        vol = vol.reshape(nz, zsub, side, sub, side, sub).mean(axis=(1, 3, 5))
    return Volume3(vol.astype(dtype))


def render_sequence_gt(spec, side, times, supersample=False, dtype=np.float32):
    """Ground-truth frames of ``spec`` at the given times."""
    frames = [render_phantom(spec, side, float(t), supersample, dtype).data for t in times]
    return Volume4(np.stack(frames), times)


def spec_from_dict(d):
    """Build a :class:`PhantomSpec` from its JSON form.

    Either ``{"preset": "shepp_logan", "dim": 2}`` or an explicit
    ``"ellipsoids"`` list of ``{"center", "semi_axes", "value", "phi_deg"}``;
    ``"motion"`` is ``{"kind": "static" | "translate" | "sinusoid" | "squeeze", ...}``.
    """
    motion = _motion_from_dict(d.get("motion", {"kind": "static"}))
    margin = float(d.get("fit_margin", 0.02))
    try:
        if "preset" in d:
            if d["preset"] != "shepp_logan":
                raise PhantomSpecError(f"unknown preset {d['preset']!r}")
            return shepp_logan_spec(int(d.get("dim", 2)), motion, margin)
        ells = tuple(
            Ellipsoid(tuple(e["center"]), tuple(e["semi_axes"]), float(e["value"]),
                      float(e.get("phi_deg", 0.0)))
            for e in d["ellipsoids"]
        )
    except (KeyError, TypeError) as exc:
        raise PhantomSpecError(f"malformed phantom description: {exc}") from exc
    return PhantomSpec(ells, motion, margin, planar=bool(d.get("planar", False)))


def _motion_from_dict(m):
    kind = m.get("kind", "static")
    try:
        if kind == "static":
            return Static()
        if kind == "translate":
            return Translate(tuple(float(v) for v in m["velocity"]))
        if kind == "sinusoid":
            return Sinusoid(m["axis"], float(m["amplitude"]), float(m["period"]))
        if kind == "squeeze":
            return Squeeze(m["axis"], float(m["peak"]), float(m.get("width", 0.5)))
    except KeyError as exc:
        raise PhantomSpecError(f"motion {kind!r} is missing {exc}") from exc
    raise PhantomSpecError(f"unknown motion kind {kind!r}")


# ---------------------------------------------------------------------------
# Raw file format: <name>.f32 payload + <name>.json sidecar
# ---------------------------------------------------------------------------


def _paths(path):
    p = Path(path)
    if p.suffix in (".f32", ".json"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".f32"), p.with_name(p.name + ".json")


def write_raw(path, array, meta):
    """Write ``array`` as little-endian float32 plus a JSON sidecar."""
    payload, sidecar = _paths(path)
    payload.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(array, dtype="<f4")
    meta = dict(meta, shape=list(arr.shape))
    payload.write_bytes(arr.tobytes(order="C"))
    sidecar.write_text(json.dumps(meta, indent=2) + "\n")
    return payload


def read_raw(path, kind):
    payload, sidecar = _paths(path)
    try:
        meta = json.loads(sidecar.read_text())
    except FileNotFoundError as exc:
        raise VolumeFormatError(f"missing sidecar {sidecar}") from exc
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"sidecar {sidecar} is not valid JSON: {exc}") from exc
    if meta.get("kind") != kind:
        raise VolumeFormatError(f"{sidecar} has kind {meta.get('kind')!r}, expected {kind!r}")
    shape = tuple(int(n) for n in meta.get("shape", ()))
    raw = payload.read_bytes()
    expected = 4 * int(np.prod(shape)) if shape else -1
    if len(raw) != expected:
        raise VolumeFormatError(
            f"{payload} holds {len(raw)} bytes but the sidecar shape {list(shape)} needs {expected}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return arr, meta


def write_volume(vol, path):
    """Write a :class:`Volume3` (as T=1) or :class:`Volume4`."""
    if isinstance(vol, Volume3):
        data, times = vol.data[None], [0.0]
    else:
        data, times = vol.data, [float(t) for t in vol.times]
    return write_raw(path, data, {"kind": "volume", "times": times, "extent": list(EXTENT)})


def read_volume(path):
    """Read a volume file; a single frame comes back as :class:`Volume3`."""
    arr, meta = read_raw(path, "volume")
    if arr.ndim != 4:
        raise VolumeFormatError(f"volume shape must be [T, Z, Y, X], got {list(arr.shape)}")
    times = np.asarray(meta.get("times", []), dtype=np.float64)
    if times.size != arr.shape[0]:
        raise VolumeFormatError(f"sidecar lists {times.size} times for {arr.shape[0]} frames")
    _check_times(times, VolumeFormatError)
    if arr.shape[0] == 1:
        return Volume3(arr[0])
    return Volume4(arr, times)


def as_array(x):
    """Underlying ndarray of a volume/sinogram-like object, or ``x`` itself."""
    return np.asarray(getattr(x, "data", x))


def volume_shape_for(side, planar):
    return (1, side, side) if planar else (side, side, side)


def block_average(vol, factor=2):
    """Downsample by averaging ``factor``-sized blocks (planar z untouched)."""
    a = as_array(vol)
    nz, ny, nx = a.shape
    fz = 1 if nz == 1 else factor
    if nz % fz or ny % factor or nx % factor:
        raise ValueError(f"shape {a.shape} is not divisible by {factor}")
    out = a.reshape(nz // fz, fz, ny // factor, factor, nx // factor, factor).mean(axis=(1, 3, 5))
    return Volume3(out.astype(a.dtype))


def sequence_times(n_frames):
    """Uniform frame times spanning [0, 1]."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if n_frames == 1:
        return np.zeros(1)
    return np.linspace(0.0, 1.0, n_frames)


__all__ = [
    "Volume3", "Volume4", "ScanSchedule", "make_schedule", "PhantomSpec", "Ellipsoid",
    "Static", "Translate", "Sinusoid", "Squeeze", "shepp_logan", "shepp_logan_spec",
    "render_phantom", "render_sequence_gt", "spec_from_dict", "read_volume", "write_volume",
    "block_average", "sequence_times",
]

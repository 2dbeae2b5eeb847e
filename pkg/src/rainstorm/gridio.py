"""Gridded precipitation fields: geometry, PGRID file I/O, cutoff and
intensity diagnostics.

Fields hold precipitation depth per timestep (mm/step) in a ``[t, y, x]``
array. Cells outside the study domain are NaN in both the array and the
file; ``domain_mask`` is the in-memory view of the same information.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0
KM_PER_DEG = EARTH_RADIUS_KM * math.pi / 180.0

#: default intensity cutoff, mm/hour (0.1 mm per 3-hour step)
DEFAULT_CUTOFF = 0.033

BINARY_MAGIC = "PGRD1"
TEXT_MAGIC = "PGRT1"
_HEADER_KEYS = ("nx", "ny", "nt", "dx_km", "dy_km", "dt_hours", "lat0", "lon0", "units")


class PGridFormatError(ValueError):
    """Malformed PGRID file."""


class PGridTruncationError(PGridFormatError):
    """PGRID payload holds fewer or more values than the header promises."""


class UndefinedCurveError(ValueError):
    pass


@dataclass(frozen=True)
class GridGeometry:
    """Locally flat, constant-spacing grid.

    Row ``y`` runs northward from ``lat0`` and column ``x`` eastward from
    ``lon0``; (lat0, lon0) is the center of cell (0, 0).
    """

    nx: int
    ny: int
    dx_km: float
    dy_km: float
    lat0: float = 0.0
    lon0: float = 0.0
    dt_hours: float = 3.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"grid needs nx, ny >= 1 (got {self.nx}, {self.ny})")
        if not (self.dx_km > 0 and self.dy_km > 0):
            raise ValueError("cell spacing must be positive")
        if not self.dt_hours > 0:
            raise ValueError("dt_hours must be positive")

    @property
    def cell_area_km2(self) -> float:
        return self.dx_km * self.dy_km

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    def _km_per_deg_lon(self) -> float:
        return KM_PER_DEG * math.cos(math.radians(self.lat0))

    def latlon(self, x, y):
        """Latitude/longitude (degrees) of fractional grid coordinates."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        lat = self.lat0 + y * self.dy_km / KM_PER_DEG
        lon = self.lon0 + x * self.dx_km / self._km_per_deg_lon()
        return lat, lon

    def xy(self, lat, lon):
        """Inverse of :meth:`latlon` (fractional grid coordinates)."""
        lat = np.asarray(lat, dtype=float)
        lon = np.asarray(lon, dtype=float)
        y = (lat - self.lat0) * KM_PER_DEG / self.dy_km
        x = (lon - self.lon0) * self._km_per_deg_lon() / self.dx_km
        return x, y

    def nearest_cell(self, lat, lon):
        """Nearest (x, y) cell index, clipped to the grid."""
        x, y = self.xy(lat, lon)
        xi = np.clip(np.floor(x + 0.5), 0, self.nx - 1).astype(int)
        yi = np.clip(np.floor(y + 0.5), 0, self.ny - 1).astype(int)
        return xi, yi

    def cell_latlon(self):
        """Arrays ``(lat, lon)`` of shape (ny, nx) holding cell centers."""
        yy, xx = np.mgrid[0:self.ny, 0:self.nx]
        return self.latlon(xx, yy)

    def to_header(self) -> dict:
        return {"nx": self.nx, "ny": self.ny, "dx_km": self.dx_km, "dy_km": self.dy_km,
                "dt_hours": self.dt_hours, "lat0": self.lat0, "lon0": self.lon0}


def unit_vectors(lat, lon):
    """Cartesian unit vectors (..., 3) for latitude/longitude in degrees."""
    la = np.radians(np.asarray(lat, dtype=float))
    lo = np.radians(np.asarray(lon, dtype=float))
    return np.stack([np.cos(la) * np.cos(lo), np.cos(la) * np.sin(lo), np.sin(la)], axis=-1)


def vector_to_latlon(v):
    v = np.asarray(v, dtype=float)
    lat = np.degrees(np.arcsin(np.clip(v[..., 2], -1.0, 1.0)))
    lon = np.degrees(np.arctan2(v[..., 1], v[..., 0]))
    return lat, lon


def great_circle_km(u, v):
    """Great-circle distance between unit vectors (broadcasting)."""
    chord = np.linalg.norm(np.asarray(u) - np.asarray(v), axis=-1)
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0))


@dataclass(frozen=True, eq=False)
class GridField:
    """Precipitation depth per timestep on a grid, NaN outside the domain."""

    geometry: GridGeometry
    values: np.ndarray
    domain_mask: np.ndarray = dc_field(default=None)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise ValueError("values must be a (t, y, x) array")
        if values.shape[1:] != self.geometry.shape:
            raise ValueError(f"values shape {values.shape} does not match grid "
                             f"{self.geometry.shape}")
        mask = self.domain_mask
        if mask is None:
            mask = np.isfinite(values).all(axis=0) if values.shape[0] else \
                np.ones(self.geometry.shape, dtype=bool)
        mask = np.array(mask, dtype=bool)
        if mask.shape != self.geometry.shape:
            raise ValueError("domain mask shape does not match grid")
        values[:, ~mask] = np.nan
        inside = values[:, mask]
        if not np.isfinite(inside).all():
            raise ValueError("missing values inside the domain mask")
        if (inside < 0).any():
            raise ValueError("negative precipitation inside the domain")
        values.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "domain_mask", mask)

    @property
    def nt(self) -> int:
        return self.values.shape[0]

    def filled(self, fill=0.0) -> np.ndarray:
        """Writable copy of the values with outside-domain cells set to ``fill``."""
        out = np.array(self.values)
        out[:, ~self.domain_mask] = fill
        return out

    def with_values(self, values) -> "GridField":
        return GridField(self.geometry, values, self.domain_mask)

    def total(self) -> float:
        return float(self.values[:, self.domain_mask].sum())

    def __eq__(self, other):
        if not isinstance(other, GridField):
            return NotImplemented
        return (self.geometry == other.geometry
                and np.array_equal(self.domain_mask, other.domain_mask)
                and np.array_equal(self.values, other.values, equal_nan=True))


# ---------------------------------------------------------------- file I/O

def _parse_header(lines, path):
    if not lines or lines[0].strip() not in (BINARY_MAGIC, TEXT_MAGIC):
        got = lines[0].strip() if lines else ""
        raise PGridFormatError(f"{path}: line 1: expected magic {BINARY_MAGIC} or "
                               f"{TEXT_MAGIC}, got {got!r}")
    header = {}
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if line == "END":
            return lines[0].strip(), header, lineno
        if "=" not in line:
            raise PGridFormatError(f"{path}: line {lineno}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _HEADER_KEYS:
            raise PGridFormatError(f"{path}: line {lineno}: unknown header key {key!r}")
        if key in header:
            raise PGridFormatError(f"{path}: line {lineno}: duplicate header key {key!r}")
        try:
            if key in ("nx", "ny", "nt"):
                parsed = int(val)
            elif key == "units":
                if val != "mm_per_step":
                    raise ValueError(val)
                parsed = val
            else:
                parsed = float(val)
        except ValueError:
            raise PGridFormatError(f"{path}: line {lineno}: bad value for {key}: {val!r}") \
                from None
        if key in ("nx", "ny") and parsed < 1:
            raise PGridFormatError(f"{path}: line {lineno}: {key} must be >= 1")
        if key == "nt" and parsed < 0:
            raise PGridFormatError(f"{path}: line {lineno}: nt must be >= 0")
        if key in ("dx_km", "dy_km", "dt_hours") and not parsed > 0:
            raise PGridFormatError(f"{path}: line {lineno}: {key} must be positive")
        header[key] = parsed
    raise PGridFormatError(f"{path}: header is not terminated by END")


def load_field(path) -> GridField:
    """Read a PGRID (binary ``PGRD1`` or text ``PGRT1``) file.

    Raises
    ------
    PGridFormatError
        Malformed header (the message names the line), negative values, or
        cells that are missing at only some timesteps.
    PGridTruncationError
        The payload does not hold exactly ``nt*ny*nx`` values.
    """
    path = Path(path)
    raw = path.read_bytes()
    lines = []
    pos = 0
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            lines.append(raw[pos:].decode("ascii", "replace"))
            pos = len(raw)
            break
        line = raw[pos:nl].decode("ascii", "replace")
        lines.append(line)
        pos = nl + 1
        if line.strip() == "END" or len(lines) > 64:
            break
    magic, header, end_lineno = _parse_header(lines, path)
    missing = [k for k in _HEADER_KEYS if k not in header]
    if missing:
        raise PGridFormatError(f"{path}: line {end_lineno}: header missing keys {missing}")
    nt, ny, nx = header["nt"], header["ny"], header["nx"]
    count = nt * ny * nx
    payload = raw[pos:]
    if magic == BINARY_MAGIC:
        if len(payload) != 4 * count:
            raise PGridTruncationError(f"{path}: expected {count} float32 values "
                                       f"({4 * count} bytes), found {len(payload)} bytes")
        data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    else:
        try:
            data = np.array(payload.decode("ascii").split(), dtype=np.float64)
        except ValueError as exc:
            raise PGridFormatError(f"{path}: unparseable value in text payload: {exc}") \
                from None
        if data.size != count:
            raise PGridTruncationError(f"{path}: expected {count} values, found {data.size}")
    values = data.reshape(nt, ny, nx)
    finite = np.isfinite(values)
    if nt:
        mask = finite.all(axis=0)
        if (finite.any(axis=0) & ~mask).any():
            raise PGridFormatError(f"{path}: cells missing at only some timesteps")
    else:
        mask = np.ones((ny, nx), dtype=bool)
    if (values[finite] < 0).any():
        raise PGridFormatError(f"{path}: negative precipitation values")
    geometry = GridGeometry(nx=nx, ny=ny, dx_km=header["dx_km"], dy_km=header["dy_km"],
                            lat0=header["lat0"], lon0=header["lon0"],
                            dt_hours=header["dt_hours"])
    return GridField(geometry, values, mask)


def _header_text(magic, geometry, nt):
    g = geometry
    rows = [magic, f"nx={g.nx}", f"ny={g.ny}", f"nt={nt}", f"dx_km={g.dx_km!r}",
            f"dy_km={g.dy_km!r}", f"dt_hours={g.dt_hours!r}", f"lat0={g.lat0!r}",
            f"lon0={g.lon0!r}", "units=mm_per_step", "END"]
    return "\n".join(rows) + "\n"


def save_field(field: GridField, path, text: bool = False) -> None:
    """Write ``field`` as PGRID; ``text=True`` writes the ``PGRT1`` variant."""
    path = Path(path)
    if text:
        body = " ".join(repr(float(v)) for v in field.values.ravel())
        path.write_text(_header_text(TEXT_MAGIC, field.geometry, field.nt) + body + "\n",
                        encoding="ascii")
    else:
        head = _header_text(BINARY_MAGIC, field.geometry, field.nt).encode("ascii")
        path.write_bytes(head + field.values.astype("<f4").tobytes())


def load_mask(path) -> np.ndarray:
    """Region mask stored as a one-timestep PGRID field (nonzero = inside)."""
    fld = load_field(path)
    if fld.nt < 1:
        raise PGridFormatError(f"{path}: mask file has no timesteps")
    return fld.domain_mask & (np.nan_to_num(fld.values[0]) != 0)


def save_mask(mask, geometry: GridGeometry, path) -> None:
    values = np.asarray(mask, dtype=float)[None]
    save_field(GridField(geometry, values, np.ones(geometry.shape, dtype=bool)), path)


# ---------------------------------------------------------------- diagnostics

def apply_cutoff(field: GridField, cutoff_mm_per_hour: float = DEFAULT_CUTOFF) -> GridField:
    """Zero every in-domain value whose intensity is below the cutoff."""
    if cutoff_mm_per_hour < 0:
        raise ValueError("cutoff must be >= 0")
    if cutoff_mm_per_hour == 0:
        return field
    vals = field.filled()
    vals[vals / field.geometry.dt_hours < cutoff_mm_per_hour] = 0.0
    return field.with_values(vals)


@dataclass(frozen=True)
class IntensityCurve:
    thresholds: np.ndarray
    cumulative_fraction: np.ndarray

    def excluded_fraction(self, cutoff: float) -> float:
        """Share of total precipitation at intensities strictly below ``cutoff``."""
        i = np.searchsorted(self.thresholds, cutoff, side="left")
        return 0.0 if i == 0 else float(self.cumulative_fraction[i - 1])

    def cutoff_at(self, fraction: float) -> float:
        """Largest threshold whose lower tail holds at most ``fraction`` of the total.

        Cutting strictly below the returned intensity removes no more than
        ``fraction`` of total precipitation.
        """
        k = int(np.searchsorted(self.cumulative_fraction, fraction, side="right"))
        return float(self.thresholds[min(k, self.thresholds.size - 1)])


def intensity_curve(field: GridField) -> IntensityCurve:
    """Cumulative share of total precipitation vs intensity (mm/hour)."""
    vals = field.values[:, field.domain_mask]
    vals = vals[vals > 0]
    total = vals.sum()
    if vals.size == 0 or not total > 0:
        raise UndefinedCurveError("field has no precipitation; curve undefined")
    intens = vals / field.geometry.dt_hours
    thresholds, inverse = np.unique(intens, return_inverse=True)
    amounts = np.bincount(inverse, weights=vals)
    frac = np.cumsum(amounts) / total
    frac[-1] = 1.0
    return IntensityCurve(thresholds, frac)

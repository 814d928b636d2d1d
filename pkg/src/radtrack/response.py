"""Detector-array response and object attenuation tables.

The array is six rectangular NaI(Tl) crystals standing on the faces of a
hexagon.  Effective areas are built analytically: projected crystal area
toward the source, a single intrinsic photopeak efficiency, and transmission
through sibling crystals along the line of sight.  Object attenuation
profiles use straight-line chords through slabs of aluminium (vehicles) or
tissue (pedestrians) around a source placed in the trunk or a backpack.

Frames: the platform frame has +x forward, +y left and +z up, with the origin
on the ground below the array centre.  Azimuths are counter-clockwise from +x.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Linear attenuation coefficients at 662 keV, 1/m.
MU_662 = {
    "Pb": 125.7,
    "Al": 20.2,
    "NaI": 28.5,
    "tissue": 8.6,
    "air": 0.0093,
}

INCH = 0.0254

OBJECT_CLASSES = ("person", "car", "truck", "motorcycle", "bus")
VEHICLE_CLASSES = ("car", "truck", "motorcycle", "bus")

# length, width, height in metres; heights are the nominal values used for
# monocular range inference.
CLASS_DIMENSIONS = {
    "person": (0.30, 0.50, 1.75),
    "car": (4.50, 1.80, 1.43),
    "truck": (5.50, 2.00, 1.80),
    "motorcycle": (2.10, 0.80, 0.80),
    "bus": (12.0, 2.55, 2.50),
}


def wrap_angle(a):
    """Wrap angles to [-pi, pi)."""
    return (np.asarray(a, dtype=float) + np.pi) % (2.0 * np.pi) - np.pi


def _rot_z(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class DetectorArrayGeometry:
    """Positions, orientations and crystal sizes of the detector array.

    ``offsets`` are crystal centres relative to the array centre, which sits
    ``elevation`` metres above the platform origin.  ``dims`` is
    (thickness along the normal, width along the face, height).
    """

    offsets: np.ndarray
    normals: np.ndarray
    dims: tuple = (2 * INCH, 4 * INCH, 16 * INCH)
    elevation: float = 1.3

    def __post_init__(self):
        offsets = np.asarray(self.offsets, dtype=float)
        normals = np.asarray(self.normals, dtype=float)
        if offsets.shape != (6, 3) or normals.shape != (6, 3):
            raise ValueError("detector array must have 6 detectors")
        if not np.allclose(np.linalg.norm(normals, axis=1), 1.0, atol=1e-12):
            raise ValueError("detector normals must be unit vectors")
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "normals", normals)

    @property
    def n_detectors(self) -> int:
        return len(self.offsets)

    @property
    def face_area(self) -> float:
        return self.dims[1] * self.dims[2]

    def axes(self, k: int) -> np.ndarray:
        """Columns are the crystal's normal, tangent and vertical axes."""
        n = self.normals[k]
        t = np.cross([0.0, 0.0, 1.0], n)
        t /= np.linalg.norm(t)
        return np.column_stack([n, t, np.cross(n, t)])

    def positions(self) -> np.ndarray:
        """Crystal centres in the platform frame."""
        return self.offsets + np.array([0.0, 0.0, self.elevation])


def hexagonal_array(elevation: float = 1.3, dims=None) -> DetectorArrayGeometry:
    """Six crystals on the faces of a hexagon.

    Detector ``k`` faces azimuth ``-150 + 60 k`` degrees, so detectors 3-5
    look out of the left (+y) side of the platform.
    """
    dims = tuple(dims) if dims is not None else (2 * INCH, 4 * INCH, 16 * INCH)
    apothem = dims[1] * np.sqrt(3.0) / 2.0
    radius = apothem + dims[0] / 2.0
    phis = np.deg2rad(-150.0 + 60.0 * np.arange(6))
    normals = np.column_stack([np.cos(phis), np.sin(phis), np.zeros(6)])
    return DetectorArrayGeometry(radius * normals, normals, dims, elevation)


def chord_through_box(p0, p1, center, axes, half):
    """Length of the segment p0->p1 that lies inside an oriented box.

    ``p0`` may be an (n, 3) array of start points.
    """
    p0 = np.atleast_2d(p0)
    q0 = (p0 - center) @ axes
    d = (np.asarray(p1) - p0) @ axes
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - q0) / d
        t2 = (half - q0) / d
    lo = np.where(d == 0.0, np.where(np.abs(q0) <= half, -np.inf, np.inf), np.minimum(t1, t2))
    hi = np.where(d == 0.0, np.where(np.abs(q0) <= half, np.inf, -np.inf), np.maximum(t1, t2))
    t_in = np.clip(lo.max(axis=1), 0.0, 1.0)
    t_out = np.clip(hi.min(axis=1), 0.0, 1.0)
    return np.maximum(t_out - t_in, 0.0) * np.linalg.norm(np.asarray(p1) - p0, axis=1)


def projected_area(geometry: DetectorArrayGeometry, k: int, u) -> float:
    """Area of crystal ``k`` seen from unit direction ``u``."""
    th, w, h = geometry.dims
    n, t, z = geometry.axes(k).T
    return (w * h * abs(n @ u)) + (th * h * abs(t @ u)) + (th * w * abs(z @ u))


@dataclass
class ResponseTable:
    """Azimuthal effective-area table, one row per detector, in m^2."""

    roi: str
    azimuth_deg: np.ndarray
    eps: np.ndarray

    def __post_init__(self):
        self.azimuth_deg = np.asarray(self.azimuth_deg, dtype=float)
        self.eps = np.atleast_2d(np.asarray(self.eps, dtype=float))
        if np.any(self.eps < 0):
            raise ValueError("effective areas must be non-negative")
        if self.eps.shape[1] != len(self.azimuth_deg):
            raise ValueError("table width does not match azimuth grid")

    @property
    def n_detectors(self) -> int:
        return self.eps.shape[0]

    @property
    def step_deg(self) -> float:
        return 360.0 / len(self.azimuth_deg)


def build_response(
    geometry: DetectorArrayGeometry,
    roi: str = "cs137",
    intrinsic_efficiency: float = 0.35,
    mu: float = MU_662["NaI"],
    distance: float = 10.0,
    n_sub: int = 3,
    step_deg: float = 10.0,
) -> ResponseTable:
    """Effective area per detector on an azimuth grid.

    Each crystal is sampled on an ``n_sub``**3 grid of points; for every point
    the ray toward a source ``distance`` metres from the array centre is
    traced through the other crystals and the transmissions are averaged.
    """
    roi = getattr(roi, "isotope", roi)
    az = np.arange(0.0, 360.0, step_deg)
    half = np.asarray(geometry.dims) / 2.0
    u = (np.arange(n_sub) + 0.5) / n_sub - 0.5
    grid = np.stack(np.meshgrid(u, u, u, indexing="ij"), axis=-1).reshape(-1, 3)
    centres = geometry.positions()
    eps = np.zeros((geometry.n_detectors, len(az)))
    for k in range(geometry.n_detectors):
        ax_k = geometry.axes(k)
        points = centres[k] + (grid * 2.0 * half) @ ax_k.T
        for j, a in enumerate(np.deg2rad(az)):
            src = np.array([distance * np.cos(a), distance * np.sin(a), geometry.elevation])
            path = np.zeros(len(points))
            for other in range(geometry.n_detectors):
                if other != k:
                    path += chord_through_box(points, src, centres[other], geometry.axes(other), half)
            direction = src - centres[k]
            direction /= np.linalg.norm(direction)
            area = projected_area(geometry, k, direction)
            eps[k, j] = area * intrinsic_efficiency * np.exp(-mu * path).mean()
    return ResponseTable(roi, az, eps)


def _periodic_interp(values, step_deg, angle_rad):
    n = values.shape[-1]
    x = np.mod(np.rad2deg(np.asarray(angle_rad, dtype=float)), 360.0) / step_deg
    i0 = np.floor(x).astype(int) % n
    f = x - np.floor(x)
    return values[..., i0], values[..., (i0 + 1) % n], f


def lookup_eps(table: ResponseTable, azimuth, elevation, detector):
    """Effective area toward ``(azimuth, elevation)`` (radians) for a detector.

    Linear in azimuth between grid nodes and scaled by ``cos(elevation)``,
    clamped at zero.  ``azimuth``, ``elevation`` and ``detector`` broadcast.
    """
    detector = np.asarray(detector)
    if np.any(detector >= table.n_detectors) or np.any(detector < 0):
        raise ValueError(f"detector outside response table (0..{table.n_detectors - 1})")
    # interpolation weights are computed before broadcasting against detectors
    n = table.eps.shape[1]
    x = np.mod(np.rad2deg(np.asarray(azimuth, dtype=float)), 360.0) / table.step_deg
    fl = np.floor(x)
    i0 = fl.astype(int) % n
    f = x - fl
    flat = table.eps.ravel()
    row = detector * n
    v = (1.0 - f) * flat.take(row + i0) + f * flat.take(row + (i0 + 1) % n)
    v = v * np.maximum(np.cos(np.asarray(elevation, dtype=float)), 0.0)
    shape = np.broadcast_shapes(v.shape, np.shape(azimuth), np.shape(elevation), detector.shape)
    return v if v.shape == shape else np.broadcast_to(v, shape).copy()


def effective_area_from_counts(r_sim: float, counts: float, n_particles: float) -> float:
    """Effective area from a simulated point-source exposure, in m^2.

    ``counts`` photopeak counts recorded from ``n_particles`` emitted into 4 pi
    by a source ``r_sim`` metres away.
    """
    if r_sim <= 0 or n_particles <= 0:
        raise ValueError("distance and particle count must be positive")
    if counts < 0:
        raise ValueError("counts must be non-negative")
    return 4.0 * np.pi * r_sim**2 * counts / n_particles


# -- object attenuation ------------------------------------------------------


@dataclass(frozen=True)
class ShieldingSpec:
    material: str
    thickness: float
    mu: float | None = None

    def __post_init__(self):
        if self.thickness < 0:
            raise ValueError("shielding thickness must be non-negative")
        if self.mu is None:
            if self.material not in MU_662:
                raise ValueError(f"unknown shielding material {self.material!r}")
            object.__setattr__(self, "mu", MU_662[self.material])
        if self.mu <= 0:
            raise ValueError("attenuation coefficient must be positive")

    @property
    def transmission(self) -> float:
        return float(np.exp(-self.mu * self.thickness))


@dataclass
class AttenuationProfile:
    """Transmission versus bearing in the object's heading frame.

    Bearing 0 points along the object's heading; angles grow
    counter-clockwise.
    """

    object_class: str
    azimuth_deg: np.ndarray
    transmission: np.ndarray

    def __post_init__(self):
        self.azimuth_deg = np.asarray(self.azimuth_deg, dtype=float)
        self.transmission = np.asarray(self.transmission, dtype=float)
        if np.any(self.transmission <= 0) or np.any(self.transmission > 1):
            raise ValueError("transmission factors must lie in (0, 1]")

    @property
    def step_deg(self) -> float:
        return 360.0 / len(self.azimuth_deg)

    def mean(self) -> float:
        """Bearing-averaged transmission, used when heading is unknown."""
        return float(self.transmission.mean())


# Vehicle body slabs (aluminium): engine block in the forward sector and
# thin panels on every face.
ENGINE_THICKNESS = 1.0
PANEL_THICKNESS = 0.05
ENGINE_HALF_SECTOR_DEG = 30.0
TRUNK_OFFSET = 1.3


def _box_exit_chord(origin, theta, half_length, half_width, thickness):
    """Chord through the face slab a ray leaves an axis-aligned footprint by."""
    c, s = np.cos(theta), np.sin(theta)
    with np.errstate(divide="ignore"):
        tx = np.where(c > 0, (half_length - origin[0]) / c, np.where(c < 0, (-half_length - origin[0]) / c, np.inf))
        ty = np.where(s > 0, (half_width - origin[1]) / s, np.where(s < 0, (-half_width - origin[1]) / s, np.inf))
        return np.where(tx <= ty, thickness / np.abs(c), thickness / np.abs(s))


def _ellipse_chord(origin, theta, a, b):
    """Chord of the ray from ``origin`` through the ellipse x^2/a^2 + y^2/b^2 = 1."""
    c, s = np.cos(theta), np.sin(theta)
    A = (c / a) ** 2 + (s / b) ** 2
    B = 2.0 * (origin[0] * c / a**2 + origin[1] * s / b**2)
    C = (origin[0] / a) ** 2 + (origin[1] / b) ** 2 - 1.0
    disc = B**2 - 4.0 * A * C
    root = np.sqrt(np.maximum(disc, 0.0))
    t1 = np.maximum((-B - root) / (2.0 * A), 0.0)
    t2 = np.maximum((-B + root) / (2.0 * A), 0.0)
    return np.where(disc > 0, t2 - t1, 0.0)


def build_attenuation_profile(
    object_class: str,
    shielding=(),
    placement: str = "default",
    step_deg: float = 5.0,
) -> AttenuationProfile:
    """Transmission from a source inside/behind an object toward each bearing.

    ``placement`` is ``"trunk"`` (vehicles), ``"backpack"`` (pedestrians),
    ``"default"`` (whichever of those fits the class) or ``"isotropic"``
    (shielding only, no body).
    """
    if object_class not in OBJECT_CLASSES:
        raise ValueError(f"unknown object class {object_class!r}")
    theta_deg = np.arange(0.0, 360.0, step_deg)
    theta = np.deg2rad(theta_deg)
    shield = float(np.prod([s.transmission for s in shielding])) if shielding else 1.0
    length, width, _ = CLASS_DIMENSIONS[object_class]
    if placement == "default":
        placement = "backpack" if object_class == "person" else "trunk"
    if placement == "isotropic":
        mu_t = np.zeros_like(theta)
    elif placement == "trunk":
        if object_class == "person":
            raise ValueError("trunk placement requires a vehicle class")
        origin = (-TRUNK_OFFSET, 0.0)
        mu_t = MU_662["Al"] * _box_exit_chord(origin, theta, length / 2, width / 2, PANEL_THICKNESS)
        engine = np.abs(wrap_angle(theta)) < np.deg2rad(ENGINE_HALF_SECTOR_DEG)
        mu_t = mu_t + np.where(engine, MU_662["Al"] * ENGINE_THICKNESS, 0.0)
    elif placement == "backpack":
        a, b = length / 2, width / 2
        origin = (-(a + 0.10), 0.0)
        mu_t = MU_662["tissue"] * _ellipse_chord(origin, theta, a, b)
    else:
        raise ValueError(f"unknown source placement {placement!r}")
    trans = np.maximum(shield * np.exp(-mu_t), np.finfo(float).tiny)
    return AttenuationProfile(object_class, theta_deg, trans)


def attenuation_at(profile: AttenuationProfile, theta):
    """Interpolated transmission at bearing ``theta`` (radians, heading frame)."""
    v0, v1, f = _periodic_interp(profile.transmission, profile.step_deg, theta)
    return (1.0 - f) * v0 + f * v1


def isotropic_profiles(shielding=()) -> dict:
    return {c: build_attenuation_profile(c, shielding, "isotropic") for c in OBJECT_CLASSES}


def default_profiles(shielding=()) -> dict:
    return {c: build_attenuation_profile(c, shielding) for c in OBJECT_CLASSES}


# -- geometry shared by the simulator and the count model --------------------


def source_geometry(source_pos, platform_pos, platform_yaw, geometry: DetectorArrayGeometry):
    """Distances and directions from each crystal to a source.

    Parameters are arrays over time samples: ``source_pos`` and
    ``platform_pos`` are (n, 3) world positions, ``platform_yaw`` is (n,).

    Returns ``(r, azimuth, elevation)``: ``r`` is (n, 6) crystal-to-source
    distance; azimuth/elevation are (n,) and give the source direction from
    the array centre in the platform frame.
    """
    source_pos = np.atleast_2d(np.asarray(source_pos, dtype=float))
    platform_pos = np.atleast_2d(np.asarray(platform_pos, dtype=float))
    yaw = np.atleast_1d(np.asarray(platform_yaw, dtype=float))
    c, s = np.cos(yaw), np.sin(yaw)
    d = source_pos - platform_pos
    lx = c * d[:, 0] + s * d[:, 1]
    ly = -s * d[:, 0] + c * d[:, 1]
    lz = d[:, 2]
    crystals = geometry.positions()
    r = np.sqrt((lx[:, None] - crystals[None, :, 0]) ** 2 + (ly[:, None] - crystals[None, :, 1]) ** 2
                + (lz[:, None] - crystals[None, :, 2]) ** 2)
    azimuth = np.arctan2(ly, lx)
    elevation = np.arctan2(lz - geometry.elevation, np.hypot(lx, ly))
    return r, azimuth, elevation


def object_bearing(source_pos, platform_pos, object_heading, geometry: DetectorArrayGeometry):
    """Bearing from the source to the array centre in the object's heading frame."""
    source_pos = np.atleast_2d(np.asarray(source_pos, dtype=float))
    platform_pos = np.atleast_2d(np.asarray(platform_pos, dtype=float))
    d = platform_pos[:, :2] - source_pos[:, :2]
    return wrap_angle(np.arctan2(d[:, 1], d[:, 0]) - np.asarray(object_heading, dtype=float))


# -- text tables ---------------------------------------------------------------

TABLE_HEADER = "# radtrack-table v1"


def save_response(table: ResponseTable, path) -> None:
    lines = [TABLE_HEADER, f"# kind response roi {table.roi}"]
    for k, row in enumerate(table.eps):
        lines.append(f"# detector {k}")
        lines += [f"{float(a)!r} {float(v)!r}" for a, v in zip(table.azimuth_deg, row)]
    Path(path).write_text("\n".join(lines) + "\n")


def save_attenuation(profiles: dict, path) -> None:
    lines = [TABLE_HEADER, "# kind attenuation"]
    for name, prof in profiles.items():
        lines.append(f"# class {name}")
        lines += [f"{float(a)!r} {float(v)!r}" for a, v in zip(prof.azimuth_deg, prof.transmission)]
    Path(path).write_text("\n".join(lines) + "\n")


def _read_blocks(path):
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != TABLE_HEADER:
        raise ValueError(f"{path}: missing table header {TABLE_HEADER!r}")
    meta = lines[1].lstrip("# ").split()
    blocks: list[tuple[str, list]] = []
    for line in lines[2:]:
        if line.startswith("#"):
            blocks.append((line.lstrip("# ").split()[1], []))
        elif line.strip():
            blocks[-1][1].append([float(x) for x in line.split()])
    return meta, blocks


def load_response(path) -> ResponseTable:
    meta, blocks = _read_blocks(path)
    if meta[:2] != ["kind", "response"]:
        raise ValueError(f"{path}: not a response table")
    data = [np.array(rows) for _, rows in blocks]
    return ResponseTable(meta[3], data[0][:, 0], np.array([d[:, 1] for d in data]))


def load_attenuation(path) -> dict:
    meta, blocks = _read_blocks(path)
    if meta[:2] != ["kind", "attenuation"]:
        raise ValueError(f"{path}: not an attenuation table")
    out = {}
    for name, rows in blocks:
        rows = np.array(rows)
        out[name] = AttenuationProfile(name, rows[:, 0], rows[:, 1])
    return out

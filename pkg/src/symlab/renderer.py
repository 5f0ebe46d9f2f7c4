"""Procedural object catalog and an analytic ray-casting pinhole renderer.

Objects sit at the world origin with their symmetry axis along +z. Lighting is a
single directional light fixed in the camera frame plus ambient, so any rotation
that leaves the object invariant also leaves the rendered image invariant.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from PIL import Image

from symlab.geometry import (
    Pose,
    SphericalCoord,
    compose,
    relative_action,
    rotation_about_axis,
    viewpoint_from_spherical,
)

RGB = tuple[float, float, float]

DEFAULT_RESOLUTION = 64
DEFAULT_FOV_DEG = 60.0
DECAL_HALF_HEIGHT = 0.3
DEFAULT_ELEVATION_BAND = (-math.pi / 3, math.pi / 3)
RADIUS_FACTOR = 2.5
BACKGROUND: RGB = (0.0, 0.0, 0.0)
AMBIENT = 0.35
DIFFUSE = 0.65
_LIGHT_CAM = np.array([-0.3, -0.5, -1.0]) / np.linalg.norm([-0.3, -0.5, -1.0])


class InvalidViewpointError(ValueError):
    """Camera placed inside the object volume."""


class Primitive(str, Enum):
    CYLINDER = "cylinder"
    BOX = "box"
    PLATE = "plate"
    CUBE = "cube"


class SymmetryKind(str, Enum):
    CONTINUOUS_AXIAL = "continuous-axial"
    DISCRETE_CYCLIC = "discrete-cyclic"
    TRIVIAL = "trivial"


@dataclass(frozen=True)
class SymmetryDescriptor:
    """Rotational symmetry about the object's vertical axis.

    ``order`` is the cyclic order for discrete symmetry (ignored otherwise).
    """

    kind: SymmetryKind
    axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    order: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", SymmetryKind(self.kind))
        n = float(np.linalg.norm(self.axis))
        if abs(n - 1.0) > 1e-9:
            raise ValueError("symmetry axis must be a unit vector")
        if self.kind is SymmetryKind.DISCRETE_CYCLIC and self.order < 2:
            raise ValueError("discrete-cyclic symmetry needs order >= 2")
        if self.kind is not SymmetryKind.DISCRETE_CYCLIC:
            object.__setattr__(self, "order", 1)

    @property
    def generators(self) -> list[Pose]:
        if self.kind is SymmetryKind.DISCRETE_CYCLIC:
            return [self.element(2 * math.pi / self.order)]
        return []

    def element(self, angle: float) -> Pose:
        """Group element rotating by ``angle`` about the axis through the origin."""
        return Pose(rotation_about_axis(self.axis, angle), np.zeros(3))

    def label(self) -> str:
        if self.kind is SymmetryKind.DISCRETE_CYCLIC:
            return f"discrete-cyclic({self.order})"
        return self.kind.value


@dataclass(frozen=True)
class Texture:
    """Procedural texture parameters.

    Cylinder/plate: ``bands`` colour the side by height (bottom to top), ``rings``
    colour the top cap by radius (centre outwards), ``cap`` colours the bottom.
    Box/cube: ``faces`` in order +x, -x, +y, -y, +z, -z.
    ``decal`` wraps a patch of ``decal_color`` around half of the cylinder side.
    """

    bands: tuple[RGB, ...] = ()
    rings: tuple[RGB, ...] = ()
    cap: RGB = (0.5, 0.5, 0.5)
    faces: tuple[RGB, ...] = ()
    decal: bool = False
    decal_color: RGB = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class ObjectSpec:
    name: str
    primitive: Primitive
    dimensions: tuple[float, ...]
    texture: Texture
    symmetry: SymmetryDescriptor

    def __post_init__(self) -> None:
        object.__setattr__(self, "primitive", Primitive(self.primitive))
        dims = tuple(float(d) for d in self.dimensions)
        expected = {Primitive.CYLINDER: 2, Primitive.PLATE: 2, Primitive.BOX: 3, Primitive.CUBE: 1}
        if len(dims) != expected[self.primitive]:
            raise ValueError(f"{self.primitive.value} takes {expected[self.primitive]} dimensions")
        if not all(d > 0 for d in dims):
            raise ValueError("dimensions must be strictly positive")
        object.__setattr__(self, "dimensions", dims)
        if self.primitive in (Primitive.CYLINDER, Primitive.PLATE):
            if not self.texture.bands or not self.texture.rings:
                raise ValueError("cylinder-like objects need side bands and cap rings")
        elif len(self.texture.faces) != 6:
            raise ValueError("box-like objects need six face colours")
        inferred = infer_symmetry(self.primitive, dims, self.texture)
        if inferred != self.symmetry:
            raise ValueError(
                f"declared symmetry {self.symmetry.label()} inconsistent with "
                f"geometry and texture ({inferred.label()})"
            )

    @property
    def half_extents(self) -> NDArray[np.float64]:
        if self.primitive is Primitive.CUBE:
            return np.full(3, self.dimensions[0] / 2)
        return np.asarray(self.dimensions) / 2

    @property
    def bounding_radius(self) -> float:
        if self.primitive in (Primitive.CYLINDER, Primitive.PLATE):
            r, h = self.dimensions
            return math.hypot(r, h / 2)
        return float(np.linalg.norm(self.half_extents))

    def default_radius(self) -> float:
        return RADIUS_FACTOR * self.bounding_radius

    def contains(self, point: NDArray[np.float64]) -> bool:
        p = np.asarray(point, dtype=np.float64)
        if self.primitive in (Primitive.CYLINDER, Primitive.PLATE):
            r, h = self.dimensions
            return bool(math.hypot(p[0], p[1]) <= r and abs(p[2]) <= h / 2)
        return bool(np.all(np.abs(p) <= self.half_extents))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["primitive"] = self.primitive.value
        d["symmetry"]["kind"] = self.symmetry.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ObjectSpec:
        tex = {k: _tuplify(v) for k, v in d["texture"].items()}
        sym = dict(d["symmetry"])
        sym["axis"] = tuple(sym["axis"])
        return cls(
            name=d["name"],
            primitive=Primitive(d["primitive"]),
            dimensions=tuple(d["dimensions"]),
            texture=Texture(**tex),
            symmetry=SymmetryDescriptor(**sym),
        )


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def infer_symmetry(primitive: Primitive, dims: tuple[float, ...], texture: Texture) -> SymmetryDescriptor:
    """Largest rotation group about +z that leaves shape and texture unchanged."""
    if primitive in (Primitive.CYLINDER, Primitive.PLATE):
        if texture.decal:
            return SymmetryDescriptor(SymmetryKind.TRIVIAL)
        return SymmetryDescriptor(SymmetryKind.CONTINUOUS_AXIAL)
    px, nx, py, ny = texture.faces[:4]
    square = primitive is Primitive.CUBE or math.isclose(dims[0], dims[1])
    if square and px == nx == py == ny:
        return SymmetryDescriptor(SymmetryKind.DISCRETE_CYCLIC, order=4)
    if px == nx and py == ny:
        return SymmetryDescriptor(SymmetryKind.DISCRETE_CYCLIC, order=2)
    return SymmetryDescriptor(SymmetryKind.TRIVIAL)


def make_object(
    name: str, primitive: Primitive | str, dimensions: tuple[float, ...], texture: Texture
) -> ObjectSpec:
    primitive = Primitive(primitive)
    dims = tuple(float(d) for d in dimensions)
    return ObjectSpec(name, primitive, dims, texture, infer_symmetry(primitive, dims, texture))


_CAN_BANDS: tuple[RGB, ...] = (
    (0.15, 0.25, 0.75),
    (0.85, 0.80, 0.20),
    (0.80, 0.15, 0.15),
    (0.85, 0.80, 0.20),
    (0.15, 0.25, 0.75),
)
_CAN_RINGS: tuple[RGB, ...] = ((0.70, 0.70, 0.72), (0.45, 0.45, 0.50))
_SIX_FACES: tuple[RGB, ...] = (
    (0.90, 0.10, 0.10),
    (0.10, 0.80, 0.20),
    (0.15, 0.30, 0.95),
    (0.95, 0.85, 0.10),
    (0.95, 0.95, 0.95),
    (0.90, 0.45, 0.05),
)


def _build_catalog() -> dict[str, ObjectSpec]:
    objs = [
        make_object("cylinder", Primitive.CYLINDER, (0.6, 1.6), Texture(bands=_CAN_BANDS, rings=_CAN_RINGS)),
        make_object(
            "cylinder_decal",
            Primitive.CYLINDER,
            (0.6, 1.6),
            Texture(bands=_CAN_BANDS, rings=_CAN_RINGS, decal=True, decal_color=(0.95, 0.95, 0.95)),
        ),
        make_object(
            "plate",
            Primitive.PLATE,
            (0.95, 0.12),
            Texture(
                bands=((0.85, 0.85, 0.80),),
                rings=((0.95, 0.95, 0.90), (0.20, 0.45, 0.80), (0.95, 0.95, 0.90)),
                cap=(0.60, 0.60, 0.55),
            ),
        ),
        # cracker-box analog: distinct front/back/sides
        make_object(
            "box",
            Primitive.BOX,
            (1.0, 0.4, 1.4),
            Texture(
                faces=(
                    (0.90, 0.15, 0.10),
                    (0.95, 0.85, 0.20),
                    (0.20, 0.55, 0.90),
                    (0.20, 0.75, 0.30),
                    (0.95, 0.95, 0.95),
                    (0.40, 0.20, 0.10),
                )
            ),
        ),
        make_object("cube", Primitive.CUBE, (1.1,), Texture(faces=_SIX_FACES)),
        make_object(
            "cube_c4",
            Primitive.CUBE,
            (1.1,),
            Texture(faces=((0.90, 0.10, 0.10),) * 4 + ((0.95, 0.95, 0.95), (0.15, 0.30, 0.95))),
        ),
    ]
    return {o.name: o for o in objs}


CATALOG: dict[str, ObjectSpec] = _build_catalog()


def get_object(name: str) -> ObjectSpec:
    try:
        return CATALOG[name]
    except KeyError:
        raise KeyError(f"unknown object {name!r}; choose from {sorted(CATALOG)}") from None


@dataclass(frozen=True, eq=False)
class Observation:
    """RGB image with values in [0, 1], stored (H, W, 3)."""

    pixels: NDArray[np.float32]

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"observation must be HxWx3, got {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("observation values must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def to_uint8(self) -> NDArray[np.uint8]:
        return np.round(self.pixels * 255.0).astype(np.uint8)

    def quantized(self) -> Observation:
        """8-bit round trip, matching what a lossless raster file stores."""
        return Observation(self.to_uint8().astype(np.float32) / 255.0)

    @classmethod
    def from_uint8(cls, arr: NDArray[np.uint8]) -> Observation:
        return cls(np.asarray(arr, dtype=np.float32) / 255.0)


def camera_rays(width: int, height: int, fov_deg: float = DEFAULT_FOV_DEG) -> NDArray[np.float64]:
    """Unit ray directions (H, W, 3) in the camera frame through pixel centres."""
    f = 0.5 * height / math.tan(math.radians(fov_deg) / 2)
    u = (np.arange(width) + 0.5 - width / 2) / f
    v = (np.arange(height) + 0.5 - height / 2) / f
    uu, vv = np.meshgrid(u, v)
    d = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def _intersect_cylinder(o, d, radius, half_h):
    n = d.shape[0]
    t_best = np.full(n, np.inf)
    part = np.full(n, -1)  # 0 side, 1 top, 2 bottom
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (o[0] * d[:, 0] + o[1] * d[:, 1])
    c = o[0] ** 2 + o[1] ** 2 - radius**2
    disc = b * b - 4 * a * c
    ok = (disc >= 0) & (a > 1e-12)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    safe_a = np.where(ok, a, 1.0)
    for t in ((-b - sq) / (2 * safe_a), (-b + sq) / (2 * safe_a)):
        z = o[2] + t * d[:, 2]
        hit = ok & (t > 1e-9) & (np.abs(z) <= half_h) & (t < t_best)
        t_best = np.where(hit, t, t_best)
        part = np.where(hit, 0, part)
    dz = d[:, 2]
    safe_dz = np.where(np.abs(dz) > 1e-12, dz, 1.0)
    for sign, code in ((1.0, 1), (-1.0, 2)):
        t = (sign * half_h - o[2]) / safe_dz
        x = o[0] + t * d[:, 0]
        y = o[1] + t * d[:, 1]
        hit = (np.abs(dz) > 1e-12) & (t > 1e-9) & (x * x + y * y <= radius**2) & (t < t_best)
        t_best = np.where(hit, t, t_best)
        part = np.where(hit, code, part)
    return t_best, part


def _shade_cylinder(obj: ObjectSpec, pts, part):
    radius, height = obj.dimensions
    half_h = height / 2
    tex = obj.texture
    n = pts.shape[0]
    normals = np.zeros((n, 3))
    colors = np.zeros((n, 3))

    side = part == 0
    normals[side, :2] = pts[side, :2] / radius
    bands = np.asarray(tex.bands)
    k = np.clip(((pts[side, 2] + half_h) / height * len(bands)).astype(int), 0, len(bands) - 1)
    colors[side] = bands[k]
    if tex.decal:
        az = np.arctan2(pts[:, 1], pts[:, 0])
        on_decal = side & (az >= 0.0) & (np.abs(pts[:, 2]) < DECAL_HALF_HEIGHT * height)
        colors[on_decal] = tex.decal_color

    top = part == 1
    normals[top] = (0.0, 0.0, 1.0)
    rings = np.asarray(tex.rings)
    rho = np.hypot(pts[top, 0], pts[top, 1])
    k = np.clip((rho / radius * len(rings)).astype(int), 0, len(rings) - 1)
    colors[top] = rings[k]

    bottom = part == 2
    normals[bottom] = (0.0, 0.0, -1.0)
    colors[bottom] = tex.cap
    return normals, colors


def _intersect_box(o, d, half):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    t_near = tmin.max(axis=1)
    t_far = tmax.min(axis=1)
    axis = tmin.argmax(axis=1)
    hit = (t_near <= t_far) & (t_near > 1e-9)
    return np.where(hit, t_near, np.inf), np.where(hit, axis, -1)


def _shade_box(obj: ObjectSpec, d, axis):
    n = d.shape[0]
    normals = np.zeros((n, 3))
    colors = np.zeros((n, 3))
    faces = np.asarray(obj.texture.faces)
    hit = axis >= 0
    idx = np.nonzero(hit)[0]
    ax = axis[hit]
    # entering face points against the ray
    sign = -np.sign(d[idx, ax])
    normals[idx, ax] = sign
    face = 2 * ax + (sign < 0)
    colors[idx] = faces[face]
    return normals, colors


def render(
    obj: ObjectSpec,
    view: Pose,
    width: int = DEFAULT_RESOLUTION,
    height: int = DEFAULT_RESOLUTION,
    fov_deg: float = DEFAULT_FOV_DEG,
) -> Observation:
    """Ray-cast ``obj`` from camera pose ``view``."""
    if width < 8 or height < 8:
        raise ValueError(f"resolution must be at least 8x8, got {width}x{height}")
    origin = view.translation
    if obj.contains(origin):
        raise InvalidViewpointError(f"camera at {origin.tolist()} is inside {obj.name}")
    d = camera_rays(width, height, fov_deg).reshape(-1, 3) @ view.rotation.T
    if obj.primitive in (Primitive.CYLINDER, Primitive.PLATE):
        radius, h = obj.dimensions
        t, part = _intersect_cylinder(origin, d, radius, h / 2)
        pts = origin + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        normals, colors = _shade_cylinder(obj, pts, part)
    else:
        t, axis = _intersect_box(origin, d, obj.half_extents)
        normals, colors = _shade_box(obj, d, axis)
    hit = np.isfinite(t)
    light = view.rotation @ _LIGHT_CAM
    lambert = np.clip(normals @ light, 0.0, None)
    shaded = colors * (AMBIENT + DIFFUSE * lambert)[:, None]
    img = np.where(hit[:, None], shaded, np.asarray(BACKGROUND))
    return Observation(np.clip(img, 0.0, 1.0).reshape(height, width, 3))


def symmetry_orbit(obj: ObjectSpec, view: Pose, n: int) -> list[Pose]:
    """Viewpoints related to ``view`` by elements of the object's symmetry group.

    Continuous-axial symmetry gives ``n`` uniformly spaced rotations; discrete
    cyclic symmetry gives the generator powers (at most ``n``); trivial gives
    ``[view]``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    sym = obj.symmetry
    if sym.kind is SymmetryKind.TRIVIAL:
        return [view]
    count = n if sym.kind is SymmetryKind.CONTINUOUS_AXIAL else min(n, sym.order)
    step = 2 * math.pi / (n if sym.kind is SymmetryKind.CONTINUOUS_AXIAL else sym.order)
    return [view if k == 0 else compose(sym.element(k * step), view) for k in range(count)]


@dataclass(frozen=True, eq=False)
class Record:
    viewpoint: Pose
    spherical: SphericalCoord
    observation: Observation


@dataclass(eq=False)
class Dataset:
    object: ObjectSpec
    records: list[Record]
    seed: int
    radius: float
    width: int
    height: int
    elevation_band: tuple[float, float] = DEFAULT_ELEVATION_BAND
    fov_deg: float = DEFAULT_FOV_DEG

    def __len__(self) -> int:
        return len(self.records)

    def images(self) -> NDArray[np.float32]:
        """(N, H, W, 3) stack of all observations."""
        return np.stack([r.observation.pixels for r in self.records])

    def pose_matrices(self) -> NDArray[np.float64]:
        return np.stack([r.viewpoint.matrix() for r in self.records])

    def angles(self) -> NDArray[np.float64]:
        """(N, 2) azimuth, elevation per record."""
        return np.array([[r.spherical.azimuth, r.spherical.elevation] for r in self.records])


def sample_spherical(
    rng: np.random.Generator,
    n: int,
    radius: float,
    elevation_band: tuple[float, float] = DEFAULT_ELEVATION_BAND,
) -> list[SphericalCoord]:
    az = rng.uniform(0.0, 2 * math.pi, size=n)
    el = rng.uniform(elevation_band[0], elevation_band[1], size=n)
    return [SphericalCoord(float(a), float(e), radius) for a, e in zip(az, el)]


def generate_dataset(
    obj: ObjectSpec,
    n: int,
    radius: float | None = None,
    seed: int = 0,
    width: int = DEFAULT_RESOLUTION,
    height: int | None = None,
    elevation_band: tuple[float, float] = DEFAULT_ELEVATION_BAND,
    fov_deg: float = DEFAULT_FOV_DEG,
) -> Dataset:
    """Render ``n`` views at random azimuth/elevation on a sphere of fixed radius.

    Observations are stored 8-bit quantized so the in-memory dataset equals its
    on-disk serialization exactly.
    """
    if n < 2:
        raise ValueError("a dataset needs at least two records")
    height = width if height is None else height
    radius = obj.default_radius() if radius is None else float(radius)
    rng = np.random.default_rng(seed)
    records = []
    for c in sample_spherical(rng, n, radius, elevation_band):
        v = viewpoint_from_spherical(c)
        records.append(Record(v, c, render(obj, v, width, height, fov_deg).quantized()))
    return Dataset(obj, records, seed, radius, width, height, tuple(elevation_band), fov_deg)


def sample_pair(ds: Dataset, rng: np.random.Generator):
    """Two distinct records and the action between them.

    Returns ``(o_a, v_a, action, o_b, v_b)``.
    """
    if len(ds) < 2:
        raise ValueError("dataset has fewer than two records")
    i, j = rng.choice(len(ds), size=2, replace=False)
    a, b = ds.records[int(i)], ds.records[int(j)]
    return a.observation, a.viewpoint, relative_action(a.viewpoint, b.viewpoint), b.observation, b.viewpoint


def sample_pair_indices(n: int, count: int, rng: np.random.Generator) -> NDArray[np.int64]:
    """(count, 2) index pairs with distinct members, drawn uniformly."""
    i = rng.integers(0, n, size=count)
    j = (i + rng.integers(1, n, size=count)) % n
    return np.stack([i, j], axis=1)


def save_dataset(ds: Dataset, out_dir: str | Path) -> Path:
    """Write ``meta.json``, ``poses.jsonl`` and one PNG per record."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    meta = {
        "object": ds.object.to_dict(),
        "seed": ds.seed,
        "radius": ds.radius,
        "width": ds.width,
        "height": ds.height,
        "count": len(ds),
        "elevation_band": list(ds.elevation_band),
        "fov_deg": ds.fov_deg,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    lines = []
    for i, rec in enumerate(ds.records):
        Image.fromarray(rec.observation.to_uint8(), mode="RGB").save(out / "images" / f"{i:06d}.png")
        lines.append(
            json.dumps(
                {
                    "index": i,
                    "azimuth": rec.spherical.azimuth,
                    "elevation": rec.spherical.elevation,
                    "radius": rec.spherical.radius,
                    "pose": rec.viewpoint.matrix().reshape(-1).tolist(),
                }
            )
        )
    (out / "poses.jsonl").write_text("\n".join(lines) + "\n")
    return out


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    meta_file = path / "meta.json"
    if not meta_file.is_file():
        raise FileNotFoundError(f"no dataset at {path} (missing {meta_file.name})")
    meta = json.loads(meta_file.read_text())
    obj = ObjectSpec.from_dict(meta["object"])
    records = []
    with open(path / "poses.jsonl") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            pose = Pose.from_matrix(np.asarray(row["pose"]).reshape(4, 4))
            sph = SphericalCoord(row["azimuth"], row["elevation"], row["radius"])
            img = np.asarray(Image.open(path / "images" / f"{row['index']:06d}.png").convert("RGB"))
            records.append(Record(pose, sph, Observation.from_uint8(img)))
    if len(records) != meta["count"]:
        raise ValueError(f"{path}: meta says {meta['count']} records, found {len(records)}")
    return Dataset(
        obj,
        records,
        meta["seed"],
        meta["radius"],
        meta["width"],
        meta["height"],
        tuple(meta["elevation_band"]),
        meta["fov_deg"],
    )


def load_image(path: str | Path) -> Observation:
    return Observation.from_uint8(np.asarray(Image.open(path).convert("RGB")))


def save_image(obs: Observation, path: str | Path) -> None:
    Image.fromarray(obs.to_uint8(), mode="RGB").save(path)


import hashlib
import math

import numpy as np
import pytest
from scipy import stats

from symlab.geometry import (
    Pose,
    SphericalCoord,
    apply_action,
    compose,
    rotation_about_axis,
    viewpoint_from_spherical,
)
from symlab.renderer import (
    CATALOG,
    InvalidViewpointError,
    Observation,
    SymmetryDescriptor,
    SymmetryKind,
    Texture,
    camera_rays,
    generate_dataset,
    get_object,
    load_dataset,
    make_object,
    render,
    sample_pair,
    save_dataset,
    symmetry_orbit,
)


def view(az, el, obj):
    return viewpoint_from_spherical(SphericalCoord(az, el, obj.default_radius()))


def test_catalog_symmetries():
    assert get_object("cylinder").symmetry.kind is SymmetryKind.CONTINUOUS_AXIAL
    assert get_object("plate").symmetry.kind is SymmetryKind.CONTINUOUS_AXIAL
    assert get_object("cylinder_decal").symmetry.kind is SymmetryKind.TRIVIAL
    assert get_object("cube").symmetry.kind is SymmetryKind.TRIVIAL
    assert get_object("box").symmetry.kind is SymmetryKind.TRIVIAL
    c4 = get_object("cube_c4").symmetry
    assert c4.kind is SymmetryKind.DISCRETE_CYCLIC and c4.order == 4


def test_object_spec_validation():
    cyl = get_object("cylinder")
    with pytest.raises(ValueError):
        make_object("bad", "cylinder", (0.0, 1.0), cyl.texture)
    with pytest.raises(ValueError, match="inconsistent"):
        type(cyl)(cyl.name, cyl.primitive, cyl.dimensions, cyl.texture, SymmetryDescriptor(SymmetryKind.TRIVIAL))
    decal = Texture(bands=cyl.texture.bands, rings=cyl.texture.rings, decal=True)
    with pytest.raises(ValueError, match="inconsistent"):
        type(cyl)("d", cyl.primitive, cyl.dimensions, decal, cyl.symmetry)


def test_object_spec_dict_round_trip():
    for obj in CATALOG.values():
        assert type(obj).from_dict(obj.to_dict()) == obj


def test_generators_close_the_group():
    sym = get_object("cube_c4").symmetry
    (g,) = sym.generators
    acc = Pose.identity()
    for _ in range(sym.order):
        acc = compose(g, acc)
    assert acc.allclose(Pose.identity(), atol=1e-9)


def test_render_deterministic_and_ranges():
    for obj in CATALOG.values():
        v = view(0.7, 0.3, obj)
        a, b = render(obj, v, 32, 24), render(obj, v, 32, 24)
        assert np.array_equal(a.pixels, b.pixels)
        assert a.pixels.shape == (24, 32, 3)
        assert a.pixels.min() >= 0 and a.pixels.max() <= 1
        assert np.array_equal(a.pixels[0, 0], [0, 0, 0])  # background corner


def test_render_rejects_tiny_resolution_and_inside_camera():
    obj = get_object("cube")
    with pytest.raises(ValueError):
        render(obj, view(0, 0, obj), 4, 4)
    with pytest.raises(InvalidViewpointError):
        render(obj, Pose(np.eye(3), [0.1, 0.0, 0.0]), 16, 16)


def test_object_centered():
    obj = get_object("cube")
    img = render(obj, view(0.4, 0.2, obj), 64, 64).pixels
    ys, xs = np.nonzero(img.sum(axis=2) > 0)
    assert abs(xs.mean() - 31.5) < 3 and abs(ys.mean() - 31.5) < 3


def test_principal_ray_hits_target():
    # the ray through the optical centre of the sensor points at the look-at target
    obj = get_object("cube")
    rng = np.random.default_rng(0)
    for _ in range(20):
        v = view(rng.uniform(0, 2 * math.pi), rng.uniform(-1.4, 1.4), obj)
        d = camera_rays(2, 2).reshape(-1, 3).mean(axis=0)
        d = v.rotation @ (d / np.linalg.norm(d))
        to_target = -v.translation
        cross = np.cross(d, to_target / np.linalg.norm(to_target))
        assert np.linalg.norm(cross) < 1e-9


def test_cylinder_axial_rotation_invariance():
    obj = get_object("cylinder")
    v = view(0.3, 0.4, obj)
    g = Pose(rotation_about_axis([0, 0, 1], 1.234), np.zeros(3))
    a = render(obj, v).pixels
    b = render(obj, compose(g, v)).pixels
    assert np.abs(a - b).max() <= 1e-6


def test_cube_non_symmetry_rotation_changes_image():
    obj = get_object("cube")
    v = view(0.3, 0.4, obj)
    g = Pose(rotation_about_axis([0, 0, 1], math.pi / 2), np.zeros(3))
    assert np.abs(render(obj, v).pixels - render(obj, compose(g, v)).pixels).max() > 0.1


def test_symmetry_orbit_shapes():
    cyl = get_object("cylinder")
    v = view(0.0, 0.2, cyl)
    orbit = symmetry_orbit(cyl, v, 4)
    assert len(orbit) == 4
    az = [math.atan2(p.translation[1], p.translation[0]) % (2 * math.pi) for p in orbit]
    assert np.allclose(az, [0, math.pi / 2, math.pi, 3 * math.pi / 2], atol=1e-9)

    c4 = get_object("cube_c4")
    (g,) = c4.symmetry.generators
    orbit = symmetry_orbit(c4, v, 4)
    expected = [v, compose(g, v), compose(g, compose(g, v)), compose(g, compose(g, compose(g, v)))]
    assert len(orbit) == 4
    assert all(p.allclose(q, atol=1e-9) for p, q in zip(orbit, expected))

    cube = get_object("cube")
    assert symmetry_orbit(cube, v, 5) == [v]
    with pytest.raises(ValueError):
        symmetry_orbit(cyl, v, 0)


@pytest.mark.parametrize("name", ["cylinder", "plate", "cube_c4"])
def test_orbit_renders_match(name):
    obj = get_object(name)
    rng = np.random.default_rng(1)
    for _ in range(5):
        v = view(rng.uniform(0, 2 * math.pi), rng.uniform(-1.0, 1.0), obj)
        ref = render(obj, v, 32, 32).pixels
        for p in symmetry_orbit(obj, v, 6):
            assert np.abs(render(obj, p, 32, 32).pixels - ref).max() < 1e-3


def test_generate_dataset_properties():
    obj = get_object("cylinder")
    a = generate_dataset(obj, 10, seed=3, width=16)
    b = generate_dataset(obj, 10, seed=3, width=16)
    assert len(a) == 10
    for ra, rb in zip(a.records, b.records):
        assert np.array_equal(ra.observation.pixels, rb.observation.pixels)
        assert np.array_equal(ra.viewpoint.matrix(), rb.viewpoint.matrix())
        assert abs(np.linalg.norm(ra.viewpoint.translation) - a.radius) < 1e-6
        lo, hi = a.elevation_band
        assert lo <= ra.spherical.elevation <= hi
        # stored observation is the 8-bit image of a fresh render
        fresh = render(obj, ra.viewpoint, 16, 16).quantized()
        assert np.array_equal(fresh.pixels, ra.observation.pixels)
    with pytest.raises(ValueError):
        generate_dataset(obj, 1)


def test_dataset_azimuth_uniform_chi2():
    ds = generate_dataset(get_object("cube"), 2000, seed=11, width=8)
    counts, _ = np.histogram(ds.angles()[:, 0], bins=20, range=(0, 2 * math.pi))
    assert stats.chisquare(counts).pvalue > 0.01


def test_sample_pair():
    ds = generate_dataset(get_object("cube"), 12, seed=0, width=8)
    rng = np.random.default_rng(4)
    for _ in range(200):
        o_a, v_a, act, o_b, v_b = sample_pair(ds, rng)
        assert not v_a.allclose(v_b)
        assert apply_action(v_a, act).allclose(v_b, atol=1e-5)
    s1 = [sample_pair(ds, np.random.default_rng(9))[2].vector() for _ in range(3)]
    s2 = [sample_pair(ds, np.random.default_rng(9))[2].vector() for _ in range(3)]
    assert all(np.array_equal(x, y) for x, y in zip(s1, s2))


def _tree_digest(path):
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(f.relative_to(path).as_posix().encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def test_dataset_serialization(tmp_path):
    obj = get_object("box")
    ds = generate_dataset(obj, 6, seed=2, width=16)
    save_dataset(ds, tmp_path / "a")
    save_dataset(generate_dataset(obj, 6, seed=2, width=16), tmp_path / "b")
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")
    assert {p.name for p in (tmp_path / "a").iterdir()} == {"meta.json", "poses.jsonl", "images"}
    back = load_dataset(tmp_path / "a")
    assert back.object == obj and len(back) == 6 and back.radius == ds.radius
    for r1, r2 in zip(ds.records, back.records):
        assert np.array_equal(r1.observation.pixels, r2.observation.pixels)
        assert r1.viewpoint.allclose(r2.viewpoint, atol=0)
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")


def test_observation_validation():
    with pytest.raises(ValueError):
        Observation(np.full((8, 8, 3), 1.5))
    with pytest.raises(ValueError):
        Observation(np.zeros((8, 8)))

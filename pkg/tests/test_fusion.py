import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instcomp import fusion as F
from instcomp import scene_synth as S
from instcomp import tensor as T
from instcomp.camera import CameraView, look_at
from instcomp.tensor import Tensor


def observed_surface(scene, views):
    """Occupied voxels that contain a rendered depth point (nudged along its ray)."""
    s = scene.voxel_size
    out = np.zeros(scene.extents, dtype=bool)
    for v in views:
        pts, _ = v.unproject()
        dirs = pts - v.position
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        q = np.clip(np.floor((pts + 1e-6 * dirs) / s).astype(int), 0, np.array(scene.extents) - 1)
        out[q[:, 0], q[:, 1], q[:, 2]] = True
    return out


@pytest.fixture(scope="module")
def scene():
    sc = S.generate_scene(S.SceneConfig(seed=5))
    sc.views = S.render_views(sc, 8, seed=5)
    return sc


@pytest.fixture(scope="module")
def wall():
    sc = S.generate_scene(S.SceneConfig(seed=0, n_objects=(0, 0)))
    s = sc.voxel_size
    X, Y, Z = sc.extents
    eye = np.array([(X - 1) * s - 1.5, 0.6 * Y * s, 0.5 * Z * s])
    view = S.render_view(sc, look_at(eye, eye + [1.0, 0, 0]))
    return sc, view


def test_surface_voxel_near_zero(wall):
    sc, view = wall
    vol = F.fuse_tsdf([view], sc.grid())
    X, Y, Z = sc.extents
    v = (X - 1, int(0.6 * Y), Z // 2)
    assert vol.weights[v] > 0
    assert abs(vol.values[v]) <= 1.0 / 3.0
    front = (X - 1 - 5, int(0.6 * Y), Z // 2)
    assert vol.values[front] == 1.0 and vol.weights[front] > 0


def test_far_behind_surface_untouched(wall):
    sc, view = wall
    vol = F.fuse_tsdf([view], sc.grid())
    assert np.all(np.abs(vol.values) <= 1)
    unseen = vol.weights == 0
    assert np.all(vol.values[unseen] == 1.0)


def test_zero_views_rejected(scene):
    with pytest.raises(ValueError):
        F.fuse_tsdf([], scene.grid())


def test_box_surface_fidelity():
    sc = S.generate_scene(S.SceneConfig(seed=0, n_objects=(0, 0)))
    sc.labels[20:30, 1:9, 24:36] = 2
    sc.instances = [S.InstanceGT(S.Box3.from_bounds((20, 1, 24), (30, 9, 36)), np.ones((10, 8, 12), bool), 0)]
    s = sc.voxel_size
    views = [S.render_view(sc, look_at(np.array(e) * s, np.array([25, 5, 30]) * s))
             for e in ([10, 25, 10], [45, 22, 50])]
    vol = F.fuse_tsdf(views, sc.grid())
    surf = observed_surface(sc, views) & (sc.labels == 2)
    assert surf.sum() > 50
    near = F.dilate(F.zero_crossings(vol))
    assert near[surf].mean() >= 0.99


def test_scene_surface_fidelity(scene):
    vol = F.fuse_tsdf(scene.views, scene.grid())
    surf = observed_surface(scene, scene.views)
    assert scene.occupancy[surf].all()
    near = F.dilate(F.zero_crossings(vol))
    assert near[surf].mean() >= 0.99


def test_view_order_invariance(scene):
    a = F.fuse_tsdf(scene.views, scene.grid())
    b = F.fuse_tsdf(scene.views[::-1], scene.grid())
    assert np.abs(a.values - b.values).max() <= 1e-12
    np.testing.assert_array_equal(a.weights, b.weights)


def test_subgrid_matches_crop(scene):
    full = F.fuse_tsdf(scene.views, scene.grid())
    sub = F.fuse_tsdf(scene.views, scene.grid().sub((8, 4, 16), (32, 16, 32)))
    ref = full.crop((8, 4, 16), (32, 16, 32))
    np.testing.assert_array_equal(sub.values, ref.values)
    np.testing.assert_array_equal(sub.weights, ref.weights)


class TestProject:
    def view(self, depth_value=0.0):
        M = look_at([0.5, 0.5, 0.5], [0.5, 0.5, 2.0])
        return CameraView(40, 40, 16, 12, M, np.full((24, 32), depth_value), np.zeros((24, 32, 3)))

    def test_optical_axis(self):
        # voxel (4, 4, 9) has center (0.45, 0.45, 0.95), on the optical axis
        grid = F.GridConfig((40, 40, 80), voxel_size=0.1)
        M = look_at([0.45, 0.45, 0.0], [0.45, 0.45, 1.0])
        view = CameraView(40, 40, 16, 12, M, np.ones((24, 32)), np.zeros((24, 32, 3)))
        (px, py), z, valid = F.project_voxel((4, 4, 9), view, grid)
        assert (px, py) == (16, 12)
        assert z == pytest.approx(0.95)
        assert valid

    def test_behind_camera(self):
        grid = F.GridConfig((10, 10, 10), voxel_size=0.1)
        view = self.view(depth_value=1.0)
        _, z, valid = F.project_voxel((5, 5, 0), view, grid)
        assert z < 0 and not valid

    def test_occlusion(self):
        grid = F.GridConfig((10, 10, 40), voxel_size=0.1)
        view = self.view(depth_value=1.0)
        assert F.project_voxel((4, 4, 14), view, grid)[2]  # z = 1.0
        assert not F.project_voxel((4, 4, 17), view, grid)[2]  # 0.3 m behind the surface

    def test_round_trip_pixels(self, scene):
        s = scene.voxel_size
        checked_strict = 0
        for v in scene.views:
            pts, pix = v.unproject()
            dirs = pts - v.position
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            q = np.floor((pts + 1e-6 * dirs) / s)
            c = (q + 0.5) * s
            u, w, z = v.project(c)
            err = np.hypot(u - (pix[:, 1] + 0.5), w - (pix[:, 0] + 0.5))
            footprint = v.fx * s / z  # pixels spanned by one voxel at that depth
            assert np.all(err <= 1.0 + footprint * np.sqrt(3) / 2)
            small = footprint <= 1.0
            checked_strict += small.sum()
            assert np.all(err[small] <= 1.0 + 1e-9)
        assert checked_strict > 0


class TestBackproject:
    def test_constant_features(self, scene):
        views = scene.views[:1]
        grid = scene.grid()
        f = Tensor(np.full((3, 6, 8), 2.5))
        vol = F.backproject_features([f], views, grid)
        seen = vol.view_count > 0
        assert seen.any()
        assert np.all(vol.features.data[:, seen] == 2.5)
        assert np.all(vol.features.data[:, ~seen] == 0.0)
        proj = F.project_voxels(grid, views[0])
        np.testing.assert_array_equal(seen.reshape(-1), proj.valid)

    def test_max_of_two_views(self, scene):
        views = scene.views[:2]
        vol = F.backproject_features([Tensor(np.full((1, 6, 8), 1.0)), Tensor(np.full((1, 6, 8), 3.0))],
                                     views, scene.grid())
        both = vol.view_count == 2
        assert both.any()
        assert np.all(vol.features.data[0][both] == 3.0)

    def test_mean_pool(self, scene):
        views = scene.views[:2]
        vol = F.backproject_features([Tensor(np.full((1, 6, 8), 1.0)), Tensor(np.full((1, 6, 8), 3.0))],
                                     views, scene.grid(), pool="mean")
        both = vol.view_count == 2
        np.testing.assert_allclose(vol.features.data[0][both], 2.0)

    def test_bad_stride(self, scene):
        with pytest.raises(ValueError):
            F.backproject_features([Tensor(np.ones((1, 5, 8)))], scene.views[:1], scene.grid())

    def test_gradient_routes_to_argmax(self, scene):
        views = scene.views[:2]
        grid = scene.grid().sub((16, 0, 16), (24, 16, 24))
        rng = np.random.default_rng(0)
        f1 = Tensor(rng.uniform(-1, 1, (2, 6, 8)), requires_grad=True)
        f2 = Tensor(rng.uniform(-1, 1, (2, 6, 8)), requires_grad=True)
        wts = rng.uniform(-1, 1, (2,) + grid.extents)

        def loss(a, b):
            vol = F.backproject_features([a, b], views, grid)
            return T.tsum(T.mul(vol.features, Tensor(wts)))

        assert T.gradcheck(loss, [f1, f2]) < 1e-4
        out = F.backproject_features([f1, f2], views, grid)
        T.backward(T.tsum(T.mul(out.features, Tensor(wts))))
        # sources that never win have zero gradient; perturbing them leaves the loss unchanged
        for k, f in enumerate((f1, f2)):
            dead = np.argwhere(f.grad == 0)
            base = loss(f1, f2).item()
            for idx in dead[:5]:
                f.data[tuple(idx)] -= 1e-3  # lowering a non-winning value cannot make it win
                assert loss(f1, f2).item() == base
                f.data[tuple(idx)] += 1e-3
        assert np.any(f1.grad != 0) or np.any(f2.grad != 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_fused_values_bounded(seed):
    sc = S.generate_scene(S.SceneConfig(seed=seed % 1000, n_objects=(1, 2)))
    views = S.render_views(sc, 2, seed)
    vol = F.fuse_tsdf(views, sc.grid())
    assert np.all(np.abs(vol.values) <= 1)
    assert np.all(vol.values[vol.weights == 0] == 1.0)


def test_volume_file_round_trip(tmp_path, scene):
    vol = F.fuse_tsdf(scene.views[:2], scene.grid())
    p = tmp_path / "v.rvnv"
    F.save_volume(p, vol)
    back = F.load_volume(p)
    assert back.extents == vol.extents and back.truncation_voxels == 3
    np.testing.assert_array_equal(back.values, vol.values.astype(np.float32))
    np.testing.assert_array_equal(back.weights, vol.weights.astype(np.float32))
    assert p.read_bytes()[:4] == b"RVNV"

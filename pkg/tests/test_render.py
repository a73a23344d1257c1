import math

import numpy as np
import pytest

from slipforge import geometry as geo
from slipforge import render as rd
from slipforge import slipdyn as sd
from slipforge import textures as tx
from slipforge.errors import ParamError, ParseError


def stable_params():
    return sd.ScenarioParams(
        cuboid_width=0.08,
        cuboid_height=0.10,
        cuboid_mass=0.1,
        grip_offset_horizontal=0.0,
        grip_offset_vertical=0.01,
        friction_torque_max=0.12,
    )


def default_setup():
    p = stable_params()
    return rd.scene_from_params(p), rd.make_camera(), p


def test_texture_bank_statistics():
    g = np.linspace(0.0, 1.0, 97)
    u, v = np.meshgrid(g, g)
    for tid in range(tx.TEXTURE_COUNT):
        vals = tx.procedural_texture(tid, u, v)
        assert vals.min() >= 0.0 and vals.max() <= 1.0
        assert 0.2 <= vals.mean() <= 0.8
        assert vals.var() > 0.0


def test_texture_determinism():
    u = np.random.default_rng(0).random((16, 16))
    v = np.random.default_rng(1).random((16, 16))
    for tid in (0, 7, 14, 21, 33, 47):
        a = tx.procedural_texture(tid, u, v)
        b = tx.procedural_texture(tid, u, v)
        assert np.array_equal(a, b)


def test_texture_unknown_id():
    with pytest.raises(ParamError):
        tx.procedural_texture(48, 0.5, 0.5)
    with pytest.raises(ParamError):
        tx.procedural_texture(-1, 0.5, 0.5)


def test_checker_contrast_across_half_period():
    for tid in tx.CHECKER_IDS:
        half = tx.checker_period(tid) / 2.0
        a = float(tx.procedural_texture(tid, 0.1, 0.1))
        b = float(tx.procedural_texture(tid, 0.1 + half, 0.1))
        assert abs(a - b) >= 0.3


def test_camera_resolution_fixed():
    cam = rd.make_camera()
    assert (cam.width, cam.height) == (346, 260)
    with pytest.raises(ParamError):
        rd.CameraModel(
            focal_px=300.0, cx=173.0, cy=130.0,
            offset_pos=np.zeros(3), offset_quat=geo.IDENTITY_QUAT, width=640, height=480,
        ).validate()
    with pytest.raises(ParamError):
        rd.CameraModel(
            focal_px=-1.0, cx=173.0, cy=130.0,
            offset_pos=np.zeros(3), offset_quat=geo.IDENTITY_QUAT,
        ).validate()
    with pytest.raises(ParamError):
        rd.make_camera(fov_deg=0.0)


def test_render_frame_basic_properties():
    scene, cam, p = default_setup()
    log = sd.simulate_slip(p)
    fr, mask = rd.render_with_mask(scene, cam, log[0].gripper, log[0].cube, log[0].t)
    assert fr.pixels.shape == (260, 346)
    assert np.all(np.isfinite(fr.pixels))
    assert fr.pixels.min() >= 0.0 and fr.pixels.max() <= 1.0
    # object roughly centered and visibly sized
    frac = mask.mean()
    assert 0.03 < frac < 0.5
    ys, xs = np.nonzero(mask)
    assert 73 < xs.mean() < 273 and 5 < ys.mean() < 255


def test_render_determinism():
    scene, cam, p = default_setup()
    log = sd.simulate_slip(p)
    a, am = rd.render_with_mask(scene, cam, log[250].gripper, log[250].cube)
    b, bm = rd.render_with_mask(scene, cam, log[250].gripper, log[250].cube)
    assert np.array_equal(a.pixels, b.pixels)
    assert np.array_equal(am, bm)


def test_object_mask_fills_view_when_camera_inside():
    scene, cam, _ = default_setup()
    scene = rd.SceneModel(**{**scene.__dict__, "cuboid_size": (0.4, 0.4, 0.4)})
    grip = geo.Pose(geo.IDENTITY_QUAT, np.array([0.0, 0.0, 0.5]))
    # camera sits at gripper + (0, -0.25, 0); wrap the cuboid around it
    cube = geo.Pose(geo.IDENTITY_QUAT, np.array([0.0, -0.15, 0.47]))
    mask = rd.object_mask(scene, cam, grip, cube)
    assert mask.mean() >= 0.9


def test_object_mask_empty_when_behind_camera():
    scene, cam, _ = default_setup()
    grip = geo.Pose(geo.IDENTITY_QUAT, np.array([0.0, 0.0, 0.5]))
    cube = geo.Pose(geo.IDENTITY_QUAT, np.array([0.0, -2.0, 0.5]))
    mask = rd.object_mask(scene, cam, grip, cube)
    assert not mask.any()


def test_rigid_grasp_pixels_bitwise_stable():
    # no-slip run with the light fixed in the camera frame: every pixel the
    # object owns must be bit-identical in every frame
    scene, cam, p = default_setup()
    assert scene.light_frame == "camera"
    log = sd.simulate_slip(p)
    f0, m0 = rd.render_with_mask(scene, cam, log[0].gripper, log[0].cube)
    assert m0.any()
    # frames 0..419 hold the object; release then detaches it
    for k in (60, 150, 210, 280, 419):
        fk, mk = rd.render_with_mask(scene, cam, log[k].gripper, log[k].cube)
        assert np.array_equal(mk, m0)
        assert np.array_equal(fk.pixels[m0], f0.pixels[m0])
        # and the background does change while the gripper moves
        if k in (150, 210):
            assert not np.array_equal(fk.pixels, f0.pixels)


def test_translation_changes_only_ground_pixels():
    # black uniform background sphere, no visible cuboid, camera translating
    # parallel to the ground: differences may appear only where the ground
    # projects; the expected region comes from analytic ray-plane hits
    p = stable_params()
    scene = rd.scene_from_params(p)
    scene = rd.SceneModel(**{**scene.__dict__, "background_brightness": 0.0})
    cam = rd.make_camera()
    h = 0.5
    g_a = geo.Pose(geo.IDENTITY_QUAT, np.array([0.0, 0.0, h]))
    g_b = geo.Pose(geo.IDENTITY_QUAT, np.array([0.02, 0.0, h]))
    cube_away = geo.Pose(geo.IDENTITY_QUAT, np.array([0.0, -5.0, 0.1]))
    fa, _ = rd.render_with_mask(scene, cam, g_a, cube_away)
    fb, _ = rd.render_with_mask(scene, cam, g_b, cube_away)
    diff = fa.pixels != fb.pixels

    # analytic ground mask: rays through pixel centers that point downward
    q_cam = geo.quat_mul(g_a.quat, cam.offset_quat)
    r = geo.quat_to_matrix(q_cam)
    xs = (np.arange(346) + 0.5 - cam.cx) / cam.focal_px
    ys = (np.arange(260) + 0.5 - cam.cy) / cam.focal_px
    dirs = np.stack(
        [np.tile(xs, (260, 1)), np.tile(ys[:, None], (1, 346)), np.ones((260, 346))], axis=-1
    )
    dz = dirs @ r.T[:, 2]
    ground = dz < -1e-9
    assert diff.any()
    assert not (diff & ~ground).any()


def test_supersampling_agrees_with_base_render():
    scene, cam, p = default_setup()
    cam_ss = rd.make_camera(supersample=2)
    log = sd.simulate_slip(p)
    a, am = rd.render_with_mask(scene, cam, log[0].gripper, log[0].cube)
    b, bm = rd.render_with_mask(scene, cam_ss, log[0].gripper, log[0].cube)
    assert b.pixels.shape == a.pixels.shape
    # anti-aliasing only reshapes boundaries
    assert (am ^ bm).mean() < 0.01
    interior = am & bm
    assert np.abs(a.pixels[interior] - b.pixels[interior]).mean() < 0.05


def test_pgm_round_trip(tmp_path):
    scene, cam, p = default_setup()
    log = sd.simulate_slip(p)
    fr = rd.render_frame(scene, cam, log[0].gripper, log[0].cube)
    path = tmp_path / "frame_000000.pgm"
    rd.write_pgm(fr, path)
    back = rd.read_pgm(path)
    assert back.shape == fr.pixels.shape
    assert np.abs(back - fr.pixels).max() <= 0.5 / 255.0 + 1e-12


def test_pgm_parse_error(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P6\n2 2\n255\nxxxx")
    with pytest.raises(ParseError):
        rd.read_pgm(path)
    path.write_bytes(b"P5\n9 9\n255\nshort")
    with pytest.raises(ParseError):
        rd.read_pgm(path)

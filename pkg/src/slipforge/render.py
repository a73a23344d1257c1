"""Software rasterizer for the gripper-mounted camera.

Scene: a textured cuboid (the grasped object), a textured ground plane at
z = 0, and a textured background sphere that fills every pixel the first
two leave uncovered.  The camera rides on the gripper at a fixed offset.

Geometry is transformed into camera space via relative transforms that are
rounded at 1e-9 before rasterization: a rigidly grasped object then has a
bit-identical camera-space pose in every frame even though the absolute
poses move, so its pixels are bit-identical too (the property that makes
"no slip means no object events" literal).  Triangles are z-buffered with
perspective-correct texture interpolation and flat Lambertian shading plus
an ambient term equal to the background brightness.  The light direction
can be fixed in camera frame (default; think of an LED ring on the end
effector, which keeps shading on a rigidly held object constant) or in the
world frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ParamError, ParseError
from .geometry import Pose, Quaternion, matrix_to_quat, quat_mul, quat_to_matrix
from .slipdyn import ScenarioParams
from .textures import procedural_texture

SENSOR_WIDTH = 346
SENSOR_HEIGHT = 260

SURF_NONE = 0
SURF_CUBOID = 1
SURF_GROUND = 2

_NEAR = 0.01
_SNAP_DECIMALS = 9


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera rigidly mounted on the gripper (fixed DAVIS-size sensor)."""

    focal_px: float
    cx: float
    cy: float
    offset_pos: np.ndarray  # camera position in gripper frame
    offset_quat: Quaternion  # gripper-to-camera rotation
    supersample: int = 1

    width: int = SENSOR_WIDTH
    height: int = SENSOR_HEIGHT

    def validate(self) -> None:
        if self.focal_px <= 0.0 or not math.isfinite(self.focal_px):
            raise ParamError("focal length must be positive")
        if self.width != SENSOR_WIDTH or self.height != SENSOR_HEIGHT:
            raise ParamError("sensor resolution is fixed at 346x260")
        if self.supersample < 1 or self.supersample > 8:
            raise ParamError("supersample factor must lie in [1, 8]")


def make_camera(
    fov_deg: float = 60.0,
    offset_pos=(0.0, -0.25, 0.0),
    pitch: float = 0.20,
    supersample: int = 1,
) -> CameraModel:
    """Camera looking along gripper +y toward the grip point, pitched down.

    Camera axes: X right in the image, Y down, Z forward (the view axis).
    """
    if not (0.0 < fov_deg < 180.0):
        raise ParamError("horizontal field of view must lie in (0, 180) degrees")
    focal = (SENSOR_WIDTH / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    base = np.array(
        [
            [1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, -1.0, 0.0],
        ]
    )
    cp, sp = math.cos(-pitch), math.sin(-pitch)
    rot_x = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    q_off = matrix_to_quat(base @ rot_x)
    cam = CameraModel(
        focal_px=focal,
        cx=SENSOR_WIDTH / 2.0,
        cy=SENSOR_HEIGHT / 2.0,
        offset_pos=np.asarray(offset_pos, dtype=np.float64),
        offset_quat=q_off,
        supersample=supersample,
    )
    cam.validate()
    return cam


@dataclass(frozen=True)
class SceneModel:
    """Everything the rasterizer needs besides poses."""

    cuboid_size: tuple  # (width, depth, height), meters
    cuboid_texture: int
    ground_texture: int
    sphere_texture: int
    background_brightness: float
    light_azimuth: float
    light_elevation: float
    light_intensity: float
    light_frame: str = "camera"  # or "world"
    ground_tile: float = 0.2
    ground_extent: float = 30.0
    sphere_radius: float = 5.0

    def validate(self) -> None:
        if any(s <= 0 for s in self.cuboid_size):
            raise ParamError("cuboid dimensions must be positive")
        if self.light_frame not in ("camera", "world"):
            raise ParamError("light_frame must be 'camera' or 'world'")
        if self.ground_tile <= 0 or self.sphere_radius <= 0 or self.ground_extent <= 0:
            raise ParamError("scene scales must be positive")


def scene_from_params(params: ScenarioParams, light_frame: str = "camera") -> SceneModel:
    params.validate()
    return SceneModel(
        cuboid_size=(params.cuboid_width, params.cuboid_depth, params.cuboid_height),
        cuboid_texture=int(params.texture_ids[0]),
        ground_texture=int(params.texture_ids[1]),
        sphere_texture=int(params.texture_ids[2]),
        background_brightness=params.background_brightness,
        light_azimuth=params.light_azimuth,
        light_elevation=params.light_elevation,
        light_intensity=params.light_intensity,
        light_frame=light_frame,
    )


@dataclass
class Frame:
    """Grayscale frame, intensities in [0, 1]."""

    pixels: np.ndarray
    timestamp: float


def _snap(a: np.ndarray) -> np.ndarray:
    return np.round(a, _SNAP_DECIMALS)


def _relative_transform(q_ref: Quaternion, p_ref: np.ndarray, q: Quaternion, p: np.ndarray):
    """Pose of (q, p) expressed in the (q_ref, p_ref) frame, snapped at 1e-9."""
    q_rel = quat_mul(q_ref.conjugate(), q)
    arr = _snap(q_rel.as_array())
    arr = arr / np.linalg.norm(arr)
    r_ref = quat_to_matrix(q_ref)
    t_rel = _snap(r_ref.T @ (np.asarray(p) - np.asarray(p_ref)))
    return quat_to_matrix(Quaternion(*arr)), t_rel


_CUBOID_FACES = (
    # (axis, sign): quad on the face where coordinate `axis` == sign * half
    (0, +1),
    (0, -1),
    (1, +1),
    (1, -1),
    (2, +1),
    (2, -1),
)


def _cuboid_faces(size):
    """Quads in the object frame: (verts (4,3), uv (4,2), normal) per face."""
    hw = np.asarray(size, dtype=np.float64) / 2.0
    faces = []
    for axis, sign in _CUBOID_FACES:
        a1, a2 = (axis + 1) % 3, (axis + 2) % 3
        corners = []
        for s1, s2 in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
            v = np.zeros(3)
            v[axis] = sign * hw[axis]
            v[a1] = s1 * hw[a1]
            v[a2] = s2 * hw[a2]
            corners.append(v)
        uv = np.array([(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)])
        n = np.zeros(3)
        n[axis] = float(sign)
        faces.append((np.array(corners), uv, n))
    return faces


def _clip_near(verts: np.ndarray, uvs: np.ndarray):
    """Sutherland-Hodgman clip of a polygon against z >= _NEAR in camera space."""
    out_v, out_uv = [], []
    n = len(verts)
    for i in range(n):
        a, b = verts[i], verts[(i + 1) % n]
        ua, ub = uvs[i], uvs[(i + 1) % n]
        ain = a[2] >= _NEAR
        bin_ = b[2] >= _NEAR
        if ain:
            out_v.append(a)
            out_uv.append(ua)
        if ain != bin_:
            t = (_NEAR - a[2]) / (b[2] - a[2])
            out_v.append(a + (b - a) * t)
            out_uv.append(ua + (ub - ua) * t)
    return out_v, out_uv


def _light_dir_camera(scene: SceneModel, r_cam_world: np.ndarray) -> np.ndarray:
    """Unit vector from surfaces toward the light, in camera coordinates.

    Camera-frame convention: azimuth swings the light around the view axis
    starting straight ahead, elevation lifts it toward the image top.
    """
    ce, se = math.cos(scene.light_elevation), math.sin(scene.light_elevation)
    ca, sa = math.cos(scene.light_azimuth), math.sin(scene.light_azimuth)
    if scene.light_frame == "camera":
        return np.array([ce * sa, -se, ce * ca])
    l_world = np.array([ce * ca, ce * sa, se])
    return r_cam_world.T @ l_world


_RAY_CACHE: dict = {}


def _ray_grid(w, h, f, cx, cy):
    """Unit camera-frame view rays through every pixel center, memoized."""
    key = (w, h, f, cx, cy)
    grid = _RAY_CACHE.get(key)
    if grid is None:
        dx = (np.arange(w) + 0.5 - cx) / f
        dy = (np.arange(h) + 0.5 - cy) / f
        grid = np.empty((h, w, 3))
        grid[:, :, 0] = dx
        grid[:, :, 1] = dy[:, None]
        grid[:, :, 2] = 1.0
        grid /= np.linalg.norm(grid, axis=2, keepdims=True)
        grid.setflags(write=False)
        _RAY_CACHE[key] = grid
    return grid


class _Raster:
    def __init__(self, width, height, focal, cx, cy):
        self.w, self.h = width, height
        self.f, self.cx, self.cy = focal, cx, cy
        self.zbuf = np.full((height, width), np.inf)
        self.surf = np.zeros((height, width), dtype=np.uint8)
        self.img = np.zeros((height, width))

    def draw(self, verts_cam, uvs, tex_id, shade, surf_id, uv_wrap=True):
        polys_v, polys_uv = _clip_near(verts_cam, uvs)
        if len(polys_v) < 3:
            return
        self._polygon(polys_v, polys_uv, tex_id, shade, surf_id, uv_wrap)

    def _polygon(self, verts, uvs, tex_id, shade, surf_id, uv_wrap):
        """Rasterize a convex planar polygon with perspective-correct uv.

        Convexity gives one contiguous pixel span per row, found by
        intersecting each edge half-plane with the row; per-pixel work then
        touches covered pixels only.  1/z, u/z and v/z are affine across the
        supporting plane, so any non-degenerate vertex triple serves as the
        interpolation basis for every covered pixel."""
        n = len(verts)
        zs = np.array([v[2] for v in verts])
        sx = np.array([self.f * v[0] / v[2] + self.cx for v in verts])
        sy = np.array([self.f * v[1] / v[2] + self.cy for v in verts])
        y0 = max(0, int(math.floor(sy.min() - 0.5)))
        y1 = min(self.h - 1, int(math.ceil(sy.max() - 0.5)))
        if y1 < y0:
            return
        # orientation from the signed screen area (shoelace)
        total = 0.0
        for i in range(n):
            j = (i + 1) % n
            total += sx[i] * sy[j] - sx[j] * sy[i]
        if total == 0.0:
            return
        sgn = 1.0 if total > 0.0 else -1.0
        py = np.arange(y0, y1 + 1) + 0.5
        lo = np.full(py.shape, 0.5)
        hi = np.full(py.shape, self.w - 0.5)
        ok = np.ones(py.shape, dtype=bool)
        for i in range(n):
            j = (i + 1) % n
            # inside test sgn*w >= 0 rearranged to a bound on px per row
            a = sgn * (sx[j] - sx[i]) * (py - sy[i])
            b = sgn * (sy[j] - sy[i])
            if b > 0.0:
                hi = np.minimum(hi, a / b + sx[i])
            elif b < 0.0:
                lo = np.maximum(lo, a / b + sx[i])
            else:
                ok &= a >= 0.0
        xs0 = np.maximum(np.ceil(lo - 0.5).astype(np.int64), 0)
        xs1 = np.minimum(np.floor(hi - 0.5).astype(np.int64), self.w - 1)
        counts = np.where(ok, np.maximum(xs1 - xs0 + 1, 0), 0)
        if not counts.any():
            return
        rows = np.repeat(np.arange(y0, y1 + 1), counts)
        ends = np.cumsum(counts)
        gx = np.arange(ends[-1]) - np.repeat(ends - counts, counts) + np.repeat(xs0, counts)
        gy = rows
        # interpolation basis: widest triangle fanned from vertex 0
        b1, area = 1, 0.0
        for i in range(1, n - 1):
            a = (sx[i] - sx[0]) * (sy[i + 1] - sy[0]) - (sy[i] - sy[0]) * (sx[i + 1] - sx[0])
            if abs(a) > abs(area):
                b1, area = i, a
        if area == 0.0:
            return
        b2 = b1 + 1
        pxs = gx + 0.5
        pys = gy + 0.5
        w0 = (sx[b2] - sx[b1]) * (pys - sy[b1]) - (sy[b2] - sy[b1]) * (pxs - sx[b1])
        w1 = (sx[0] - sx[b2]) * (pys - sy[b2]) - (sy[0] - sy[b2]) * (pxs - sx[b2])
        l0, l1 = w0 / area, w1 / area
        l2 = 1.0 - l0 - l1
        z = 1.0 / (l0 / zs[0] + l1 / zs[b1] + l2 / zs[b2])
        win = z < self.zbuf[gy, gx]
        if not win.any():
            return
        gy, gx, z = gy[win], gx[win], z[win]
        l0, l1, l2 = l0[win], l1[win], l2[win]
        u = (l0 * (uvs[0][0] / zs[0]) + l1 * (uvs[b1][0] / zs[b1]) + l2 * (uvs[b2][0] / zs[b2])) * z
        v = (l0 * (uvs[0][1] / zs[0]) + l1 * (uvs[b1][1] / zs[b1]) + l2 * (uvs[b2][1] / zs[b2])) * z
        if uv_wrap:
            u, v = np.mod(u, 1.0), np.mod(v, 1.0)
        tex = procedural_texture(tex_id, u, v)
        self.zbuf[gy, gx] = z
        self.surf[gy, gx] = surf_id
        self.img[gy, gx] = np.clip(tex * shade, 0.0, 1.0)

    def fill_sphere(self, scene, r_cam_world, p_cam):
        rest = self.surf == SURF_NONE
        if not rest.any():
            return
        ys, xs = np.nonzero(rest)
        d = _ray_grid(self.w, self.h, self.f, self.cx, self.cy)[ys, xs]
        dw = d @ r_cam_world.T
        o = np.asarray(p_cam, dtype=np.float64)
        b = dw @ o
        disc = b * b - (o @ o - scene.sphere_radius**2)
        s = -b + np.sqrt(np.maximum(disc, 0.0))
        hit = o[None, :] + dw * s[:, None]
        az = np.arctan2(hit[:, 1], hit[:, 0])
        el = np.arcsin(np.clip(hit[:, 2] / scene.sphere_radius, -1.0, 1.0))
        u = az / (2.0 * np.pi) + 0.5
        v = el / np.pi + 0.5
        tex = procedural_texture(scene.sphere_texture, u, v)
        self.img[ys, xs] = np.clip(tex * scene.background_brightness, 0.0, 1.0)


def _render(scene, camera, gripper_pose, cube_pose, width, height, focal, cx, cy):
    q_cam = quat_mul(gripper_pose.quat, camera.offset_quat)
    p_cam = gripper_pose.pos + quat_to_matrix(gripper_pose.quat) @ camera.offset_pos
    r_cam_world = quat_to_matrix(q_cam)

    rast = _Raster(width, height, focal, cx, cy)
    light = _light_dir_camera(scene, r_cam_world)
    ambient = scene.background_brightness

    # grasped cuboid (drawn first so z-ties on the resting bottom face go to it)
    r_obj, t_obj = _relative_transform(q_cam, p_cam, cube_pose.quat, cube_pose.pos)
    for verts, uvs, normal in _cuboid_faces(scene.cuboid_size):
        v_cam = verts @ r_obj.T + t_obj
        n_cam = r_obj @ normal
        shade = ambient + scene.light_intensity * max(0.0, float(n_cam @ light))
        rast.draw(v_cam, uvs, scene.cuboid_texture, shade, SURF_CUBOID)

    # ground plane z = 0 (world-fixed)
    r_gnd, t_gnd = _relative_transform(
        q_cam, p_cam, Quaternion(1.0, 0.0, 0.0, 0.0), np.zeros(3)
    )
    g = scene.ground_extent
    quad = np.array([[-g, -g, 0.0], [g, -g, 0.0], [g, g, 0.0], [-g, g, 0.0]])
    quad_uv = quad[:, :2] / scene.ground_tile
    n_cam = r_gnd @ np.array([0.0, 0.0, 1.0])
    shade = ambient + scene.light_intensity * max(0.0, float(n_cam @ light))
    v_cam = quad @ r_gnd.T + t_gnd
    rast.draw(v_cam, quad_uv, scene.ground_texture, shade, SURF_GROUND)

    rast.fill_sphere(scene, r_cam_world, p_cam)
    return rast


def render_with_mask(
    scene: SceneModel,
    camera: CameraModel,
    gripper_pose: Pose,
    cube_pose: Pose,
    timestamp: float = 0.0,
) -> tuple[Frame, np.ndarray]:
    """Render one frame and the object mask (pixels where the cuboid wins)."""
    scene.validate()
    camera.validate()
    k = camera.supersample
    if k == 1:
        rast = _render(
            scene, camera, gripper_pose, cube_pose,
            camera.width, camera.height, camera.focal_px, camera.cx, camera.cy,
        )
        return Frame(rast.img, timestamp), rast.surf == SURF_CUBOID
    rast = _render(
        scene, camera, gripper_pose, cube_pose,
        camera.width * k, camera.height * k,
        camera.focal_px * k, camera.cx * k, camera.cy * k,
    )
    img = rast.img.reshape(camera.height, k, camera.width, k).mean(axis=(1, 3))
    cub = (rast.surf == SURF_CUBOID).reshape(camera.height, k, camera.width, k)
    mask = cub.mean(axis=(1, 3)) > 0.5
    return Frame(img, timestamp), mask


def render_frame(scene, camera, gripper_pose, cube_pose, timestamp: float = 0.0) -> Frame:
    frame, _ = render_with_mask(scene, camera, gripper_pose, cube_pose, timestamp)
    return frame


def object_mask(scene, camera, gripper_pose, cube_pose) -> np.ndarray:
    _, mask = render_with_mask(scene, camera, gripper_pose, cube_pose)
    return mask


def write_pgm(frame: Frame, path) -> None:
    """Binary PGM dump (8-bit)."""
    img = np.clip(np.rint(frame.pixels * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary PGM back to floats in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise ParseError(f"{path} is not a binary PGM", offset=0)
    try:
        w, h = (int(x) for x in parts[1].split())
        maxval = int(parts[2])
    except ValueError:
        raise ParseError(f"{path} has a malformed PGM header", offset=2) from None
    if maxval != 255 or len(parts[3]) < w * h:
        raise ParseError(f"{path} has unsupported depth or truncated data", offset=len(data))
    img = np.frombuffer(parts[3][: w * h], dtype=np.uint8).reshape(h, w)
    return img.astype(np.float64) / 255.0

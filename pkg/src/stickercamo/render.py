"""Hard z-buffer rasterization, textured Phong shading and background compositing.

Geometry, pose and lighting are constants: the rasterizer runs in numpy and
produces a :class:`FragmentMap`; shading is a torch function of the texture only,
so gradients reach texels through the bilinear lookup.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .errors import RenderError
from .geometry import triangle_coverage
from .imageio import resize_bilinear

DEFAULT_FOV = 60.0
DEFAULT_RESOLUTION = (416, 416)
NEAR_PLANE = 1e-2


@dataclass(frozen=True)
class ScenePose:
    elevation: float
    azimuth: float
    distance: float

    def __post_init__(self):
        if not self.distance > 0:
            raise RenderError("distance must be positive")
        if not -90.0 <= self.elevation <= 90.0:
            raise RenderError("elevation must lie in [-90, 90]")
        object.__setattr__(self, "azimuth", float(self.azimuth) % 360.0)


@dataclass(frozen=True)
class Environment:
    """Phong lighting with a single directional light.

    ``light_direction`` points from the surface towards the light.
    """
    ambient: tuple = (0.5, 0.5, 0.5)
    diffuse_color: float = 1.0
    specular: tuple = (0.2, 0.2, 0.2)
    shininess: float = 10.0
    light_direction: tuple = (0.3, 1.0, 0.4)

    def __post_init__(self):
        amb = tuple(float(x) for x in self.ambient)
        spec = tuple(float(x) for x in self.specular)
        ld = np.asarray(self.light_direction, dtype=np.float64)
        n = np.linalg.norm(ld)
        if not n > 0:
            raise RenderError("light direction must be nonzero")
        values = amb + spec + (float(self.diffuse_color),)
        if not all(math.isfinite(v) and v >= 0 for v in values):
            raise RenderError("lighting coefficients must be finite and non-negative")
        if not (math.isfinite(self.shininess) and self.shininess > 0):
            raise RenderError("shininess must be positive")
        object.__setattr__(self, "ambient", amb)
        object.__setattr__(self, "specular", spec)
        object.__setattr__(self, "diffuse_color", float(self.diffuse_color))
        object.__setattr__(self, "light_direction", tuple((ld / n).tolist()))

    def with_(self, **kw):
        return replace(self, **kw)


AMBIENT_ONLY = Environment(ambient=(1.0, 1.0, 1.0), diffuse_color=0.0, specular=(0.0, 0.0, 0.0))


@dataclass
class Camera:
    eye: np.ndarray
    target: np.ndarray
    resolution: tuple = DEFAULT_RESOLUTION
    fov: float = DEFAULT_FOV
    up: tuple = (0.0, 1.0, 0.0)

    def __post_init__(self):
        self.eye = np.asarray(self.eye, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        fwd = self.target - self.eye
        if np.linalg.norm(fwd) < 1e-12:
            raise RenderError("camera eye and target coincide")
        fwd = fwd / np.linalg.norm(fwd)
        up = np.asarray(self.up, dtype=np.float64)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            # looking straight up or down: any horizontal axis will do
            right = np.cross(fwd, np.array([0.0, 0.0, -1.0]))
        right /= np.linalg.norm(right)
        self._rot = np.stack([right, np.cross(right, fwd), fwd])  # rows: x, y(up), z(forward)

    @property
    def focal(self):
        return (self.resolution[0] / 2.0) / math.tan(math.radians(self.fov) / 2.0)

    def to_view(self, points):
        """World points to camera space (x right, y up, z = depth along the gaze)."""
        return (np.asarray(points, dtype=np.float64) - self.eye) @ self._rot.T

    def project(self, points):
        """Pixel coordinates (x right, y down, origin at the top-left corner) and depth."""
        pv = self.to_view(points)
        z = pv[:, 2]
        h, w = self.resolution
        with np.errstate(divide="ignore", invalid="ignore"):
            x = w / 2.0 + self.focal * pv[:, 0] / z
            y = h / 2.0 - self.focal * pv[:, 1] / z
        return np.stack([x, y], axis=1), z


def camera_from_pose(pose, target, resolution=DEFAULT_RESOLUTION, fov=DEFAULT_FOV):
    """Camera on a sphere around ``target`` looking at it, y up.

    Azimuth 0 places the camera on the +z side; elevation raises it towards +y.
    """
    e, a = math.radians(pose.elevation), math.radians(pose.azimuth)
    offset = pose.distance * np.array([math.cos(e) * math.sin(a), math.sin(e),
                                       math.cos(e) * math.cos(a)])
    target = np.asarray(target, dtype=np.float64)
    return Camera(target + offset, target, tuple(resolution), fov)


def sample_pose(ranges, rng):
    """Uniformly sample (elevation, azimuth, distance) from ``[lo, hi]`` ranges.

    ``ranges`` maps "elevation", "azimuth", "distance" to pairs; ``rng`` is a
    :class:`numpy.random.Generator`.
    """
    vals = {}
    for key in ("elevation", "azimuth", "distance"):
        lo, hi = ranges[key]
        if lo > hi:
            raise RenderError(f"inverted {key} range [{lo}, {hi}]")
        vals[key] = float(lo) if lo == hi else float(rng.uniform(lo, hi))
    return ScenePose(**vals)


@dataclass
class FragmentMap:
    """Per-pixel visible face (-1 for none), perspective-correct barycentrics and depth."""
    face_id: np.ndarray
    bary: np.ndarray
    depth: np.ndarray
    camera: Camera = field(repr=False, default=None)

    @property
    def covered(self):
        return self.face_id >= 0

    @property
    def resolution(self):
        return self.face_id.shape


def rasterize(mesh, pose, resolution=DEFAULT_RESOLUTION, fov=DEFAULT_FOV, camera=None):
    """Z-buffer rasterization; on equal depth the lower face id wins.

    Faces with a vertex in front of the near plane are skipped (no clipping).
    """
    h, w = resolution
    if camera is None:
        camera = camera_from_pose(pose, mesh.centroid, resolution, fov)
    xy, z = camera.project(mesh.vertices)
    face_id = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    depth = np.full((h, w), np.inf)
    tri_xy = xy[mesh.faces]
    tri_z = z[mesh.faces]
    visible = np.all(tri_z > NEAR_PLANE, axis=1)
    for f in np.flatnonzero(visible):
        hit = triangle_coverage(tri_xy[f], h, w)
        if hit is None:
            continue
        rows, cols, lam = hit
        inv = lam / tri_z[f]
        zf = 1.0 / inv.sum(axis=1)
        closer = zf < depth[rows, cols]
        if not closer.any():
            continue
        rows, cols = rows[closer], cols[closer]
        depth[rows, cols] = zf[closer]
        face_id[rows, cols] = f
        bary[rows, cols] = inv[closer] * zf[closer, None]
    return FragmentMap(face_id, bary, depth, camera)


@dataclass
class RenderOutput:
    image: torch.Tensor
    silhouette: torch.Tensor


@dataclass
class ShadingPlan:
    """Texture-independent part of shading for one fragment map.

    Holds, for every covered pixel, the four bilinear texel indices and weights
    plus the lighting factors, so shading is a cheap gather + affine map.
    """
    resolution: tuple
    texture_shape: tuple
    pixels: np.ndarray
    idx: np.ndarray
    wts: np.ndarray
    scale: np.ndarray
    offset: np.ndarray
    silhouette: np.ndarray


def _bilinear_taps(uv, tex_h, tex_w):
    x = uv[:, 0] * tex_w - 0.5
    y = (1.0 - uv[:, 1]) * tex_h - 0.5
    x0, y0 = np.floor(x), np.floor(y)
    fx, fy = x - x0, y - y0
    x0, y0 = x0.astype(np.int64), y0.astype(np.int64)
    xs = np.clip(np.stack([x0, x0 + 1, x0, x0 + 1], 1), 0, tex_w - 1)
    ys = np.clip(np.stack([y0, y0, y0 + 1, y0 + 1], 1), 0, tex_h - 1)
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], 1)
    return ys * tex_w + xs, wts


def plan_shading(fragments, mesh, texture_shape, env):
    """Precompute UV lookups and Phong factors.

    Pixel color = clamp(albedo * (ambient + kd * max(0, n.l)) + ks * max(0, r.v)^s, 0, 1)
    with flat face normals flipped towards the viewer.
    """
    tex_h, tex_w = texture_shape[:2]
    cov = fragments.covered
    pixels = np.flatnonzero(cov.ravel())
    fid = fragments.face_id.ravel()[pixels]
    bary = fragments.bary.reshape(-1, 3)[pixels]
    uv = np.einsum("nk,nkd->nd", bary, mesh.uv_coords[mesh.face_uvs[fid]])
    idx, wts = _bilinear_taps(uv, tex_h, tex_w)

    pos = np.einsum("nk,nkd->nd", bary, mesh.vertices[mesh.faces[fid]])
    normals = mesh.face_normals()[fid]
    view = fragments.camera.eye - pos
    view /= np.maximum(np.linalg.norm(view, axis=1, keepdims=True), 1e-12)
    flip = np.sum(normals * view, axis=1) < 0
    normals[flip] *= -1
    light = np.asarray(env.light_direction)
    ndl = normals @ light
    diffuse = env.diffuse_color * np.maximum(ndl, 0.0)
    refl = 2.0 * ndl[:, None] * normals - light
    rdv = np.maximum(np.sum(refl * view, axis=1), 0.0)
    spec_term = np.where(ndl > 0, rdv ** env.shininess, 0.0)
    scale = np.asarray(env.ambient)[None, :] + diffuse[:, None]
    offset = spec_term[:, None] * np.asarray(env.specular)[None, :]
    return ShadingPlan(fragments.resolution, (tex_h, tex_w), pixels, idx, wts, scale, offset,
                       cov.astype(np.uint8))


def apply_shading(plan, texture):
    """Differentiable (in ``texture``) evaluation of a :class:`ShadingPlan`."""
    texture = torch.as_tensor(texture)
    if tuple(texture.shape[:2]) != tuple(plan.texture_shape):
        raise RenderError("texture shape differs from the one the plan was built for")
    h, w = plan.resolution
    dtype = texture.dtype
    flat = texture.reshape(-1, 3)
    idx = torch.from_numpy(plan.idx)
    wts = torch.from_numpy(plan.wts).to(dtype)
    albedo = (flat[idx] * wts[:, :, None]).sum(dim=1)
    color = albedo * torch.from_numpy(plan.scale).to(dtype) + torch.from_numpy(plan.offset).to(dtype)
    color = torch.clamp(color, 0.0, 1.0)
    image = torch.zeros(h * w, 3, dtype=dtype).index_put((torch.from_numpy(plan.pixels),), color)
    return RenderOutput(image.reshape(h, w, 3), torch.from_numpy(plan.silhouette).bool())


def shade_phong(fragments, mesh, texture, env):
    texture = torch.as_tensor(texture)
    if texture.shape[0] < 2 or texture.shape[1] < 2:
        raise RenderError("texture must be at least 2x2")
    return apply_shading(plan_shading(fragments, mesh, tuple(texture.shape), env), texture)


def fit_background(background, resolution):
    bg = torch.as_tensor(background)
    if not bg.is_floating_point():
        bg = bg.double()
    return resize_bilinear(bg, resolution)


def composite(render, background):
    """x_adv = render * m + background * (1 - m), as an exact per-pixel selection."""
    bg = torch.as_tensor(background)
    img = render.image
    if tuple(bg.shape[:2]) != tuple(img.shape[:2]):
        raise RenderError(f"background {tuple(bg.shape[:2])} does not match render "
                          f"{tuple(img.shape[:2])}")
    bg = bg.to(img.dtype)
    return torch.where(render.silhouette[:, :, None], img, bg)


def render_scene(mesh, texture, pose, env, background, resolution=None, fov=DEFAULT_FOV):
    """Rasterize, shade and composite one view. Returns ``(image, RenderOutput, FragmentMap)``."""
    texture = torch.as_tensor(texture)
    resolution = tuple(resolution or torch.as_tensor(background).shape[:2])
    frags = rasterize(mesh, pose, resolution, fov)
    out = shade_phong(frags, mesh, texture, env)
    return composite(out, fit_background(background, resolution)), out, frags


def render_batch(mesh, texture, poses, env, backgrounds, resolution=DEFAULT_RESOLUTION,
                 fov=DEFAULT_FOV):
    """Composite renders for each (pose, background) pair, in input order.

    ``env`` may be a single :class:`Environment` or one per pose.
    """
    if len(poses) != len(backgrounds):
        raise RenderError(f"{len(poses)} poses but {len(backgrounds)} backgrounds")
    envs = env if isinstance(env, (list, tuple)) else [env] * len(poses)
    if len(envs) != len(poses):
        raise RenderError("need one environment per pose")
    return [render_scene(mesh, texture, p, e, bg, resolution, fov)[0]
            for p, e, bg in zip(poses, envs, backgrounds)]

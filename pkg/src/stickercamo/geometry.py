"""UV-mapped triangle meshes, camouflage face selection, UV-space mask baking
and texture blending.

Texture convention used throughout the package: a texture is an ``(H, W, 3)``
array, row 0 is the top of the image and UV ``(u, v)`` maps to the continuous
pixel position ``x = u * W``, ``y = (1 - v) * H`` (OBJ convention, v points up).
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import GeometryError
from .imageio import read_image, resize_bilinear

log = logging.getLogger(__name__)

STICKER_PAD = 0.5


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    uv_coords: np.ndarray
    face_uvs: np.ndarray
    base_texture: np.ndarray
    groups: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.uv_coords = np.asarray(self.uv_coords, dtype=np.float64).reshape(-1, 2)
        self.face_uvs = np.asarray(self.face_uvs, dtype=np.int64).reshape(-1, 3)
        self.base_texture = np.asarray(self.base_texture, dtype=np.float64)
        if len(self.faces) == 0:
            raise GeometryError("mesh has no faces")
        if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise GeometryError("face index out of range")
        if len(self.face_uvs) != len(self.faces):
            raise GeometryError("face_uvs must have one triple per face")
        if self.face_uvs.min() < 0 or self.face_uvs.max() >= len(self.uv_coords):
            raise GeometryError("face uv index out of range")
        if np.any(self.uv_coords < 0) or np.any(self.uv_coords > 1):
            log.warning("uv coordinates outside [0, 1] clamped")
            self.uv_coords = np.clip(self.uv_coords, 0.0, 1.0)
        if self.base_texture.ndim != 3 or self.base_texture.shape[2] != 3:
            raise GeometryError("base texture must be HxWx3")
        self.base_texture = np.clip(self.base_texture, 0.0, 1.0)

    @property
    def num_faces(self):
        return len(self.faces)

    @property
    def centroid(self):
        return self.vertices.mean(axis=0)

    def face_uv_triangles(self, face_ids=None):
        """UV corner coordinates, shape (F, 3, 2)."""
        fu = self.face_uvs if face_ids is None else self.face_uvs[np.asarray(face_ids)]
        return self.uv_coords[fu]

    def face_normals(self):
        tri = self.vertices[self.faces]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)


@dataclass(frozen=True)
class FaceSelection:
    face_ids: tuple

    def __post_init__(self):
        ids = tuple(sorted({int(i) for i in self.face_ids}))
        object.__setattr__(self, "face_ids", ids)

    def __len__(self):
        return len(self.face_ids)

    def validate(self, mesh):
        if self.face_ids and (self.face_ids[0] < 0 or self.face_ids[-1] >= mesh.num_faces):
            raise GeometryError("face selection references faces outside the mesh")
        return self

    def union(self, other):
        return FaceSelection(self.face_ids + other.face_ids)

    @classmethod
    def from_groups(cls, mesh, names):
        ids = []
        for name in names:
            if name not in mesh.groups:
                raise GeometryError(f"mesh has no face group {name!r}")
            ids.extend(np.asarray(mesh.groups[name]).tolist())
        return cls(tuple(ids))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            data = json.load(fh)
        if not isinstance(data, dict) or "face_ids" not in data:
            raise GeometryError(f"{path}: expected an object with a 'face_ids' list")
        return cls(tuple(int(i) for i in data["face_ids"]))

    def save(self, path):
        Path(path).write_text(json.dumps({"face_ids": list(self.face_ids)}))


@dataclass
class RegionMask:
    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2:
            raise GeometryError("mask must be a 2-D image")
        if not np.all((m == 0) | (m == 1)):
            raise GeometryError("mask values must be 0 or 1")
        self.mask = m.astype(np.uint8)

    @property
    def resolution(self):
        return self.mask.shape

    @property
    def nnz(self):
        return int(self.mask.sum())

    @property
    def coverage(self):
        return self.nnz / self.mask.size

    def tensor(self, dtype=torch.float32):
        return torch.as_tensor(self.mask, dtype=dtype)

    def bbox(self):
        """Inclusive-exclusive (r0, r1, c0, c1) bounding box of the set pixels."""
        rows = np.flatnonzero(self.mask.any(axis=1))
        cols = np.flatnonzero(self.mask.any(axis=0))
        if len(rows) == 0:
            raise GeometryError("empty camouflage region")
        return rows[0], rows[-1] + 1, cols[0], cols[-1] + 1


# ---------------------------------------------------------------------------
# OBJ loading


def _parse_mtl(path):
    """Return the diffuse map referenced by the first material defining one."""
    for line in Path(path).read_text().splitlines():
        parts = line.strip().split(None, 1)
        if len(parts) == 2 and parts[0] == "map_Kd":
            return (Path(path).parent / parts[1].strip()).resolve()
    return None


def _check_manifold(faces):
    edges = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    if np.any(counts > 2):
        log.warning("mesh is non-manifold: %d edges shared by more than two faces",
                    int(np.sum(counts > 2)))


def load_mesh(path, texture_size=(64, 64)):
    """Load a Wavefront OBJ mesh with UVs.

    Quads and larger polygons are fan-triangulated from their first corner,
    which for a quad is the split along the 0-2 diagonal. The diffuse texture
    comes from ``map_Kd`` of the referenced MTL file; without one, a flat
    mid-gray texture of ``texture_size`` is used.
    """
    path = Path(path)
    if not path.exists():
        raise GeometryError(f"mesh file not found: {path}")
    verts, uvs, faces, fuvs = [], [], [], []
    groups = {}
    current_group = None
    mtllib = None
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        if tag == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif tag == "vt":
            uvs.append([float(x) for x in parts[1:3]])
        elif tag in ("g", "o"):
            current_group = parts[1] if len(parts) > 1 else None
        elif tag == "mtllib":
            mtllib = path.parent / line.split(None, 1)[1].strip()
        elif tag == "f":
            corners = parts[1:]
            if len(corners) < 3:
                raise GeometryError(f"{path}:{lineno}: face with fewer than 3 corners")
            vi, ti = [], []
            for c in corners:
                fields = c.split("/")
                if len(fields) < 2 or fields[1] == "":
                    raise GeometryError("mesh has no UV map")
                v, t = int(fields[0]), int(fields[1])
                vi.append(v - 1 if v > 0 else len(verts) + v)
                ti.append(t - 1 if t > 0 else len(uvs) + t)
            for k in range(1, len(corners) - 1):
                if current_group is not None:
                    groups.setdefault(current_group, []).append(len(faces))
                faces.append([vi[0], vi[k], vi[k + 1]])
                fuvs.append([ti[0], ti[k], ti[k + 1]])
    if not uvs:
        raise GeometryError("mesh has no UV map")
    if not faces:
        raise GeometryError("mesh has no faces")

    texture = None
    if mtllib is not None and mtllib.exists():
        tex_path = _parse_mtl(mtllib)
        if tex_path is not None and tex_path.exists():
            texture = read_image(tex_path)
            if texture.ndim == 2:
                texture = np.repeat(texture[:, :, None], 3, axis=2)
    if texture is None:
        texture = np.full((*texture_size, 3), 0.5)

    faces = np.asarray(faces, dtype=np.int64)
    _check_manifold(faces)
    return TriMesh(verts, faces, uvs, fuvs, texture,
                   {k: np.asarray(v, dtype=np.int64) for k, v in groups.items()})


def save_mesh(mesh, path, texture_name=None):
    """Write ``mesh`` as OBJ (+ MTL + PNG texture next to it)."""
    from .imageio import write_image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    texture_name = texture_name or path.stem + "_diffuse.png"
    write_image(path.parent / texture_name, mesh.base_texture)
    mtl = path.with_suffix(".mtl")
    mtl.write_text(f"newmtl material0\nKd 1 1 1\nmap_Kd {texture_name}\n")
    face_group = np.full(mesh.num_faces, -1)
    names = list(mesh.groups)
    for gi, name in enumerate(names):
        face_group[mesh.groups[name]] = gi
    lines = [f"mtllib {mtl.name}"]
    lines += ["v %.9g %.9g %.9g" % tuple(v) for v in mesh.vertices]
    lines += ["vt %.9g %.9g" % tuple(t) for t in mesh.uv_coords]
    lines.append("usemtl material0")
    current = None
    for f in range(mesh.num_faces):
        g = face_group[f]
        if g != current:
            lines.append(f"g {names[g]}" if g >= 0 else "g default")
            current = g
        a, b, c = mesh.faces[f] + 1
        ta, tb, tc = mesh.face_uvs[f] + 1
        lines.append(f"f {a}/{ta} {b}/{tb} {c}/{tc}")
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# Triangle coverage with a top-left fill rule


def triangle_coverage(tri_xy, height, width):
    """Pixels whose centers fall inside a 2-D triangle given in pixel units.

    Pixel (r, c) has center (c + 0.5, r + 0.5); y grows downwards. Points on an
    edge belong to the triangle only if the edge is a top or left edge, so a
    pixel center on an edge shared by two triangles is claimed exactly once.

    Returns ``(rows, cols, w)`` with ``w`` the (N, 3) screen-space barycentric
    weights of the covered pixel centers, or ``None`` if nothing is covered.
    """
    p = np.asarray(tri_xy, dtype=np.float64)
    area = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[1, 1] - p[0, 1]) * (p[2, 0] - p[0, 0])
    if area == 0 or not np.isfinite(area):
        return None
    if area < 0:
        p = p[[0, 2, 1]]
        area = -area
        order = [0, 2, 1]
    else:
        order = [0, 1, 2]

    c0 = max(int(np.floor(p[:, 0].min() - 0.5)), 0)
    c1 = min(int(np.ceil(p[:, 0].max() - 0.5)), width - 1)
    r0 = max(int(np.floor(p[:, 1].min() - 0.5)), 0)
    r1 = min(int(np.ceil(p[:, 1].max() - 0.5)), height - 1)
    if c0 > c1 or r0 > r1:
        return None
    ys, xs = np.mgrid[r0:r1 + 1, c0:c1 + 1]
    px = xs.ravel() + 0.5
    py = ys.ravel() + 0.5

    inside = np.ones(px.shape, dtype=bool)
    weights = []
    # edge i is opposite vertex i
    for a, b in ((1, 2), (2, 0), (0, 1)):
        dx = p[b, 0] - p[a, 0]
        dy = p[b, 1] - p[a, 1]
        e = dx * (py - p[a, 1]) - dy * (px - p[a, 0])
        owns_edge = dy < 0 or (dy == 0 and dx > 0)
        inside &= (e > 0) | ((e == 0) & owns_edge)
        weights.append(e)
    if not inside.any():
        return None
    w = np.stack(weights, axis=1)[inside] / area
    w = w[:, np.argsort(order)]
    return ys.ravel()[inside], xs.ravel()[inside], w


def uv_to_pixel(uv, height, width):
    uv = np.asarray(uv, dtype=np.float64)
    return np.stack([uv[..., 0] * width, (1.0 - uv[..., 1]) * height], axis=-1)


def bake_region_mask(mesh, sel, resolution):
    """Rasterize the UV triangles of the selected faces into a binary mask.

    A pixel is set iff its center lies in the UV triangle of a selected face.
    The original UV atlas is reused as is (no island re-packing).
    """
    height, width = resolution
    if height < 8 or width < 8:
        raise GeometryError("mask resolution must be at least 8x8")
    if len(sel) == 0:
        raise GeometryError("empty camouflage region")
    sel.validate(mesh)
    mask = np.zeros((height, width), dtype=np.uint8)
    for tri in uv_to_pixel(mesh.face_uv_triangles(sel.face_ids), height, width):
        hit = triangle_coverage(tri, height, width)
        if hit is not None:
            mask[hit[0], hit[1]] = 1
    return RegionMask(mask)


# ---------------------------------------------------------------------------
# Texture blending


def _as_texture(x, dtype=None):
    t = torch.as_tensor(x)
    if not t.is_floating_point():
        t = t.double()
    return t if dtype is None else t.to(dtype)


def blend_textures(base, adv, mask, lam=1.0):
    """``mask * (lam * adv) + (1 - mask) * base``, clamped to [0, 1].

    ``base`` is bilinearly resampled to the mask resolution when needed.
    Differentiable with respect to ``adv``.
    """
    adv = _as_texture(adv)
    m = mask.mask if isinstance(mask, RegionMask) else np.asarray(mask)
    base = _as_texture(resize_bilinear(_as_texture(base, adv.dtype), m.shape), adv.dtype)
    if tuple(adv.shape[:2]) != tuple(m.shape) or tuple(base.shape[:2]) != tuple(m.shape):
        raise GeometryError(
            f"resolution mismatch: adv {tuple(adv.shape[:2])}, mask {tuple(m.shape)}")
    mt = torch.as_tensor(m, dtype=adv.dtype)[:, :, None]
    return torch.clamp(mt * (lam * adv) + (1 - mt) * base, 0.0, 1.0)


def sticker_cutout(texture, mask):
    """Crop ``texture`` to the mask bounding box; unmasked texels become mid-gray.

    Returns ``(sticker_rgb, sticker_mask)`` as numpy arrays.
    """
    if isinstance(texture, torch.Tensor):
        texture = texture.detach().cpu().numpy()
    r0, r1, c0, c1 = mask.bbox()
    m = mask.mask[r0:r1, c0:c1]
    rgb = np.where(m[:, :, None] > 0, np.asarray(texture)[r0:r1, c0:c1], STICKER_PAD)
    return rgb, m.copy()

"""Built-in toy assets: a procedural UV-mapped car mesh and the default printable palette."""

from importlib import resources

import numpy as np

from .geometry import TriMesh, triangle_coverage, uv_to_pixel

# Face-group presets for the toy car. "global" covers the whole painted body
# (windows and tires excluded), "local" only doors and roof.
GLOBAL_GROUPS = ("hood", "trunk", "roof", "front", "rear", "fender_left", "fender_right",
                 "door_left", "door_right", "pillars")
LOCAL_GROUPS = ("door_left", "door_right", "roof")

_COLORS = {
    "body": (0.72, 0.08, 0.07),
    "window": (0.12, 0.16, 0.22),
    "tire": (0.05, 0.05, 0.05),
    "rim": (0.55, 0.55, 0.58),
    "headlight": (0.95, 0.92, 0.7),
    "taillight": (0.95, 0.25, 0.2),
    "grille": (0.15, 0.15, 0.15),
    "rocker": (0.3, 0.05, 0.05),
}


def load_palette(path=None):
    """Printable colors as an (N, 3) array; rows of ``R G B`` in [0, 1]."""
    if path is None:
        text = resources.files("stickercamo.data").joinpath("palette30.txt").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    rows = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].replace(",", " ").strip()
        if line:
            rows.append([float(x) for x in line.split()])
    pal = np.asarray(rows, dtype=np.float64)
    if pal.ndim != 2 or pal.shape[1] != 3 or len(pal) == 0:
        raise ValueError("palette must be a non-empty list of R G B rows")
    if np.any(pal < 0) or np.any(pal > 1):
        raise ValueError("palette colors must lie in [0, 1]")
    return pal


class _Builder:
    def __init__(self):
        self.verts = []
        self.faces = []       # (vertex triple, island id, local uv triple, color key)
        self.islands = []     # (width, height) in world units
        self.groups = {}

    def vertex(self, p):
        self.verts.append(np.asarray(p, dtype=np.float64))
        return len(self.verts) - 1

    def island(self, w, h):
        self.islands.append((w, h))
        return len(self.islands) - 1

    def quad_grid(self, origin, du, dv, nu, nv, group_of, color_of):
        """Planar rectangle origin + s*du + t*dv, split into nu x nv quads.

        ``group_of(i, j)`` / ``color_of(i, j)`` give the group and paint of cell (i, j).
        Outward normal is du x dv.
        """
        origin, du, dv = (np.asarray(x, dtype=np.float64) for x in (origin, du, dv))
        isl = self.island(np.linalg.norm(du), np.linalg.norm(dv))
        idx = {}
        for i in range(nu + 1):
            for j in range(nv + 1):
                idx[i, j] = self.vertex(origin + du * i / nu + dv * j / nv)
        for i in range(nu):
            for j in range(nv):
                corners = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)]
                luv = [(a / nu, b / nv) for a, b in corners]
                vids = [idx[c] for c in corners]
                g, col = group_of(i, j), color_of(i, j)
                for tri in ((0, 1, 2), (0, 2, 3)):
                    self.groups.setdefault(g, []).append(len(self.faces))
                    self.faces.append(([vids[t] for t in tri], isl, [luv[t] for t in tri], col))

    def box_faces(self, lo, hi, spec):
        """Six faces of an axis-aligned box; ``spec[name] = (nu, nv, group_of, color_of)``."""
        x0, y0, z0 = lo
        x1, y1, z1 = hi
        ex, ey, ez = np.array([x1 - x0, 0, 0]), np.array([0, y1 - y0, 0]), np.array([0, 0, z1 - z0])
        planes = {
            "+x": ((x1, y0, z1), -ez, ey),
            "-x": ((x0, y0, z0), ez, ey),
            "+z": ((x0, y0, z1), ex, ey),
            "-z": ((x1, y0, z0), -ex, ey),
            "+y": ((x0, y1, z1), ex, -ez),
            "-y": ((x0, y0, z0), ex, ez),
        }
        for name, (nu, nv, gof, cof) in spec.items():
            o, du, dv = planes[name]
            self.quad_grid(o, du, dv, nu, nv, gof, cof)

    def wheel(self, center, radius, width, island_uv, group="wheels"):
        cx, cy, cz = center
        n = 8
        ang = np.arange(n) * 2 * np.pi / n
        ring = [(cx + radius * np.cos(a), cy + radius * np.sin(a)) for a in ang]
        zs = (cz - width / 2, cz + width / 2)
        inner = [[self.vertex((x, y, z)) for x, y in ring] for z in zs]
        isl = island_uv
        for k in range(n):
            k2 = (k + 1) % n
            a, b, c, d = inner[0][k], inner[0][k2], inner[1][k2], inner[1][k]
            for tri in ((a, b, c), (a, c, d)):
                self.groups.setdefault(group, []).append(len(self.faces))
                self.faces.append((list(tri), isl, [(0.1, 0.1), (0.9, 0.1), (0.9, 0.9)], "tire"))
        for side, z in enumerate(zs):
            c = self.vertex((cx, cy, z))
            for k in range(n):
                k2 = (k + 1) % n
                tri = (c, inner[side][k], inner[side][k2]) if side else (c, inner[side][k2], inner[side][k])
                self.groups.setdefault(group, []).append(len(self.faces))
                self.faces.append((list(tri), isl, [(0.5, 0.5), (0.2, 0.2), (0.8, 0.2)], "rim"))


def _pack(islands, margin):
    """Shelf-pack rectangles into the unit square at a uniform scale.

    Returns per-island (u0, v0, su, sv) placements.
    """
    order = sorted(range(len(islands)), key=lambda i: -islands[i][1])

    def place(scale):
        out = {}
        x = y = shelf = margin
        shelf_h = 0.0
        for i in order:
            w, h = islands[i][0] * scale, islands[i][1] * scale
            if x + w + margin > 1.0:
                y += shelf_h + margin
                x, shelf_h = margin, 0.0
            if w + 2 * margin > 1.0 or y + h + margin > 1.0:
                return None
            out[i] = (x, y, w, h)
            x += w + margin
            shelf_h = max(shelf_h, h)
        return out

    lo, hi = 0.0, 10.0
    for _ in range(60):
        mid = (lo + hi) / 2
        if place(mid) is None:
            hi = mid
        else:
            lo = mid
    return place(lo)


def toy_car(texture_size=128):
    """A boxy car (body, cabin, four wheels) with a packed UV atlas and painted texture.

    Axes: x forward, y up, z to the left side; wheels touch y = 0.
    """
    b = _Builder()
    body = lambda *_: "body"
    L, W = 4.4, 1.8

    def side(name):
        def gof(i, j):
            return f"door_{name}" if i in (2, 3) else f"fender_{name}"

        def cof(i, j):
            return "rocker" if j == 0 else "body"
        return gof, cof

    gl, cl = side("left")
    gr, cr = side("right")

    def front_color(i, j):
        if j == 1 and i in (0, 3):
            return "headlight"
        return "grille" if j == 1 else "body"

    def rear_color(i, j):
        return "taillight" if j == 1 and i in (0, 3) else "body"

    def top_group(i, j):
        return "hood" if i >= 4 else ("trunk" if i <= 1 else "body_top_hidden")

    b.box_faces((-L / 2, 0.3, -W / 2), (L / 2, 1.0, W / 2), {
        "+x": (4, 2, lambda *_: "front", front_color),
        "-x": (4, 2, lambda *_: "rear", rear_color),
        "+z": (6, 2, gl, cl),
        "-z": (6, 2, gr, cr),
        "+y": (6, 2, top_group, body),
    })
    cab_lo, cab_hi = (-1.2, 1.0, -0.78), (0.9, 1.55, 0.78)

    def window_or_pillar(name):
        def gof(i, j):
            return "pillars" if i in (0, 3) else name

        def cof(i, j):
            return "body" if i in (0, 3) else "window"
        return gof, cof

    wl = window_or_pillar("window_left")
    wr = window_or_pillar("window_right")
    b.box_faces(cab_lo, cab_hi, {
        "+x": (1, 1, lambda *_: "windshield", lambda *_: "window"),
        "-x": (1, 1, lambda *_: "rear_window", lambda *_: "window"),
        "+z": (4, 1, *wl),
        "-z": (4, 1, *wr),
        "+y": (3, 2, lambda *_: "roof", body),
    })
    wheel_isl = b.island(0.5, 0.5)
    for x in (-1.35, 1.35):
        for z in (-W / 2 + 0.05, W / 2 - 0.05):
            b.wheel((x, 0.34, z), 0.34, 0.3, wheel_isl)

    placement = _pack(b.islands, margin=0.02)
    uv_coords, face_uvs, colors = [], [], []
    for vids, isl, luv, col in b.faces:
        u0, v0, su, sv = placement[isl]
        idx = []
        for (s, t) in luv:
            uv_coords.append((u0 + s * su, v0 + t * sv))
            idx.append(len(uv_coords) - 1)
        face_uvs.append(idx)
        colors.append(col)
    uv_coords = np.asarray(uv_coords)
    face_uvs = np.asarray(face_uvs)

    tex = np.full((texture_size, texture_size, 3), 0.5)
    # paint each face's UV triangle, slightly inflated so bilinear lookups near
    # island borders do not bleed the gray fill
    for f, col in enumerate(colors):
        tri = uv_to_pixel(uv_coords[face_uvs[f]], texture_size, texture_size)
        c = tri.mean(axis=0)
        tri = c + (tri - c) * 1.0 + np.sign(tri - c) * 0.75
        hit = triangle_coverage(tri, texture_size, texture_size)
        if hit is not None:
            tex[hit[0], hit[1]] = _COLORS[col]
    groups = {k: np.asarray(v, dtype=np.int64) for k, v in b.groups.items()}
    return TriMesh(np.asarray(b.verts), np.asarray([f[0] for f in b.faces]), uv_coords,
                   face_uvs, tex, groups)


def unit_quad(texture=None, size=1.0):
    """Screen-facing square in the z=0 plane (normal +z), UVs covering [0,1]^2."""
    h = size / 2
    verts = [(-h, -h, 0), (h, -h, 0), (h, h, 0), (-h, h, 0)]
    uvs = [(0, 0), (1, 0), (1, 1), (0, 1)]
    faces = [(0, 1, 2), (0, 2, 3)]
    if texture is None:
        texture = np.full((8, 8, 3), 0.5)
    return TriMesh(verts, faces, uvs, faces, texture, {"quad": np.array([0, 1])})

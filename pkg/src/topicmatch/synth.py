"""Synthetic homography pairs with exact ground truth, and grayscale image I/O."""
from dataclasses import dataclass
import os

import numpy as np
from PIL import Image, ImageDraw

from .geometry import estimate_homography_dlt, image_corners, warp_point
from .numerics import ContractError, make_rng

COARSE_CELL = 8


class ImageFormatError(ValueError):
    pass


@dataclass
class ImagePair:
    image_a: np.ndarray
    image_b: np.ndarray
    homography: np.ndarray      # maps A pixel coordinates to B
    corners_b: np.ndarray       # where A's corners land in B
    contrast: float
    brightness: float
    seed: int


def value_noise(rng, size, octaves=5, base_cells=4):
    out = np.zeros((size, size))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = base_cells * 2 ** o
        grid = rng.random((cells + 1, cells + 1))
        coords = np.linspace(0, cells, size)
        i0 = np.minimum(coords.astype(int), cells - 1)
        f = coords - i0
        f = f * f * (3 - 2 * f)
        rows = grid[i0] * (1 - f)[:, None] + grid[i0 + 1] * f[:, None]
        layer = rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]
        out += amp * layer
        total += amp
        amp *= 0.5
    return out / total


def random_polygons(rng, size, count):
    """Layer of filled polygons (some striped) as a (values, coverage) pair."""
    canvas = Image.new("F", (size, size), 0.0)
    cover = Image.new("L", (size, size), 0)
    draw_c, draw_m = ImageDraw.Draw(canvas), ImageDraw.Draw(cover)
    for _ in range(count):
        cx, cy = rng.uniform(0, size, 2)
        radius = rng.uniform(0.06, 0.22) * size
        n_vert = int(rng.integers(3, 8))
        angles = np.sort(rng.uniform(0, 2 * np.pi, n_vert))
        radii = radius * rng.uniform(0.5, 1.0, n_vert)
        pts = [(float(cx + r * np.cos(a)), float(cy + r * np.sin(a))) for a, r in zip(angles, radii)]
        draw_c.polygon(pts, fill=float(rng.uniform(0.0, 1.0)))
        draw_m.polygon(pts, fill=255)
    values = np.asarray(canvas, dtype=np.float64)
    coverage = np.asarray(cover, dtype=np.float64) / 255.0
    stripes = 0.5 + 0.5 * np.sin(np.arange(size)[None, :] * rng.uniform(0.3, 1.2)
                                 + np.arange(size)[:, None] * rng.uniform(-0.6, 0.6))
    values = np.where(values > 0.66, 0.6 * values + 0.4 * stripes, values)
    return values, coverage


def make_texture(rng, size):
    noise = value_noise(rng, size)
    poly, cover = random_polygons(rng, size, int(rng.integers(10, 18)))
    img = (1 - 0.85 * cover) * noise + 0.85 * cover * poly
    img = img - img.min()
    return img / max(img.max(), 1e-12)


def sample_homography(rng, size, magnitude):
    if magnitude == 0:
        return np.eye(3), image_corners((size, size))
    src = image_corners((size, size))
    dst = src + rng.uniform(-magnitude * size, magnitude * size, src.shape)
    return estimate_homography_dlt(src, dst), dst


def warp_image(image, h, out_hw=None):
    """Bilinear backward warp of ``image`` by ``h``; zero outside the source."""
    src_h, src_w = image.shape
    out_h, out_w = out_hw or image.shape
    ys, xs = np.mgrid[0:out_h, 0:out_w]
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    h_inv = np.linalg.inv(h)
    hom = pts @ h_inv[:, :2].T + h_inv[:, 2]
    sx, sy = hom[:, 0] / hom[:, 2], hom[:, 1] / hom[:, 2]
    inside = (sx >= 0) & (sx <= src_w - 1) & (sy >= 0) & (sy <= src_h - 1) & (hom[:, 2] > 0)
    x0 = np.clip(np.floor(sx), 0, src_w - 1).astype(int)
    y0 = np.clip(np.floor(sy), 0, src_h - 1).astype(int)
    x1 = np.minimum(x0 + 1, src_w - 1)
    y1 = np.minimum(y0 + 1, src_h - 1)
    fx = np.where(inside, sx - x0, 0.0)
    fy = np.where(inside, sy - y0, 0.0)
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bottom = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    val = top * (1 - fy) + bottom * fy
    return np.where(inside, val, 0.0).reshape(out_h, out_w), inside.reshape(out_h, out_w)


def cell_centers(grid_hw, cell=COARSE_CELL):
    gh, gw = grid_hw
    ys, xs = np.divmod(np.arange(gh * gw), gw)
    return np.stack([xs * cell + (cell - 1) / 2, ys * cell + (cell - 1) / 2], axis=1)


def point_to_cell(p, grid_hw, cell=COARSE_CELL):
    """(cell x, cell y, inside) of image points; cell c spans pixels [c*cell - 0.5, (c+1)*cell - 0.5)."""
    p = np.asarray(p, dtype=np.float64)
    jx = np.floor((p[:, 0] + 0.5) / cell).astype(np.int64)
    jy = np.floor((p[:, 1] + 0.5) / cell).astype(np.int64)
    inside = (jx >= 0) & (jx < grid_hw[1]) & (jy >= 0) & (jy < grid_hw[0])
    return jx, jy, inside


def fraction_cells_inside(h, size):
    grid = (size // COARSE_CELL, size // COARSE_CELL)
    p = warp_point(h, cell_centers(grid))
    inside = (p[:, 0] >= 0) & (p[:, 0] < size) & (p[:, 1] >= 0) & (p[:, 1] < size)
    return inside.mean()


def gen_pair(seed, size=128, perspective=0.1, jitter=0.1, max_attempts=100):
    if size % 8 or size < 64:
        raise ContractError("size must be a multiple of 8 and >= 64")
    rng = make_rng(seed, 0x5359)
    image_a = make_texture(rng, size)
    for attempt in range(max_attempts):
        hrng = make_rng(seed, 0x484F, attempt)
        h, corners = sample_homography(hrng, size, perspective)
        if np.linalg.cond(h) < 1e6 and fraction_cells_inside(h, size) >= 0.3:
            break
    else:
        raise ContractError(f"seed {seed}: no admissible homography in {max_attempts} draws")
    warped, inside = warp_image(image_a, h)
    contrast = 1.0 + float(rng.uniform(-jitter, jitter)) if jitter else 1.0
    brightness = float(rng.uniform(-jitter, jitter)) if jitter else 0.0
    image_b = np.where(inside, np.clip(warped * contrast + brightness, 0.0, 1.0), 0.0)
    return ImagePair(image_a, image_b, h, corners, contrast, brightness, int(seed))


def gt_coarse_matches(h, grid_hw_a, grid_hw_b=None, cell=COARSE_CELL):
    """Ground-truth coarse cell pairs (i, j) under homography ``h`` (A -> B).

    Each A cell centre is warped into B and paired with the B cell whose centre
    lies within half a cell (L-inf); when several A cells land in one B cell,
    only the closest is kept so the result is a partial injection.
    """
    grid_hw_b = grid_hw_b or grid_hw_a
    gw = grid_hw_b[1]
    p = warp_point(h, cell_centers(grid_hw_a, cell))
    jx, jy, ok = point_to_cell(p, grid_hw_b, cell)
    ii = np.flatnonzero(ok)
    jj = jy[ok] * gw + jx[ok]
    centers_b = cell_centers(grid_hw_b, cell)
    dist = np.abs(p[ii] - centers_b[jj]).max(axis=1)
    # order by (j, distance, i) and keep the first entry per B cell
    order = np.lexsort((ii, dist, jj))
    first = np.ones(len(order), dtype=bool)
    first[1:] = jj[order][1:] != jj[order][:-1]
    keep = np.sort(order[first])
    return ii[keep], jj[keep]


# ---- image I/O -------------------------------------------------------------

def _read_pgm(data):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ImageFormatError(f"bad PGM magic {tokens[0][:8]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError("non-numeric PGM header") from None
    if maxval != 255:
        raise ImageFormatError(f"unsupported PGM maxval {maxval}")
    pixels = data[pos + 1:pos + 1 + w * h]
    if len(pixels) != w * h:
        raise ImageFormatError("truncated PGM pixel data")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def load_image(path):
    """Grayscale float image in [0, 1] from binary PGM or PNG."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] in (b"P5", b"P2", b"P6", b"P3") or path.lower().endswith(".pgm"):
        raw = _read_pgm(data)
    elif data[:8] == b"\x89PNG\r\n\x1a\n":
        img = Image.open(path)
        img.load()
        if img.mode in ("L", "I;16", "I", "F"):
            raw = np.asarray(img.convert("L"))
        else:
            rgb = np.asarray(img.convert("RGB"), dtype=np.int64)
            raw = (rgb.sum(axis=2) * 2 + 3) // 6      # (R+G+B)/3 rounded half up
    else:
        raise ImageFormatError(f"{path}: unrecognised image format")
    return raw.astype(np.float64) / 255.0


def quantize(image):
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255).astype(np.uint8)


def save_image(path, image):
    q = quantize(image)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pgm":
        h, w = q.shape
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(q.tobytes())
    elif ext == ".png":
        Image.fromarray(q).save(path)
    else:
        raise ImageFormatError(f"{path}: only .pgm and .png are supported")


# ---- dataset manifests -----------------------------------------------------

def write_manifest(path, seeds, config_hash):
    with open(path, "w", encoding="utf-8") as fh:
        for s in seeds:
            fh.write(f"{int(s)}\t{config_hash}\n")


def read_manifest(path):
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ImageFormatError(f"{path}:{lineno}: expected 'seed<TAB>config-hash'")
            try:
                entries.append((int(parts[0]), parts[1]))
            except ValueError:
                raise ImageFormatError(f"{path}:{lineno}: bad seed {parts[0]!r}") from None
    return entries

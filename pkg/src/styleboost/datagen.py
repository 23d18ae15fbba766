"""Procedural face dataset and the deterministic style oracle.

Faces are rasterized with numpy only (ellipse head, eyes, mouth, flat
background), fully determined by an integer seed. The style oracle palette-
quantizes an image and blackens color boundaries; it is a pure, idempotent
function, which makes it usable as ground truth in end-to-end checks.
"""

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .imaging import from_uint8, save_image, to_uint8
from .manifest import DatasetManifest, ManifestEntry

SUPPORTED_SIZES = (32, 64)

# seed-space offsets keeping source/style/test seed sets pairwise disjoint
STYLE_SEED_OFFSET = 1_000_000
TEST_SEED_OFFSET = 2_000_000

PALETTE = np.array([
    [238, 234, 222],
    [242, 202, 92],
    [206, 92, 60],
    [126, 64, 102],
    [72, 120, 162],
    [92, 160, 96],
    [154, 104, 72],
    [44, 52, 84],
], dtype=np.uint8)

EDGE_COLOR = np.array([12, 12, 12], dtype=np.uint8)


@dataclass
class FaceParams:
    seed: int
    head_hue: float      # [0, 2*pi)
    bg_hue: float        # [0, 2*pi)
    pose_offset: float   # horizontal shift of eyes/mouth, [-W/8, W/8] px
    face_scale: float    # fraction of image height, [0.5, 0.9]

    @classmethod
    def from_seed(cls, seed, size):
        if seed < 0:
            raise ConfigError(f"seed must be non-negative, got {seed}")
        rng = np.random.default_rng(seed)
        return cls(
            seed=seed,
            head_hue=float(rng.uniform(0.0, 2.0 * np.pi)),
            bg_hue=float(rng.uniform(0.0, 2.0 * np.pi)),
            pose_offset=float(rng.uniform(-size / 8.0, size / 8.0)),
            face_scale=float(rng.uniform(0.5, 0.9)),
        )


def _hsv(hue_rad, s, v):
    r, g, b = colorsys.hsv_to_rgb((hue_rad / (2.0 * np.pi)) % 1.0, s, v)
    return np.array([r, g, b], dtype=np.float64)


def _ellipse_mask(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def gen_source_image(seed, size=32):
    """Render one synthetic face; pure function of (seed, size)."""
    if size not in SUPPORTED_SIZES:
        raise ConfigError(f"size must be one of {SUPPORTED_SIZES}, got {size}")
    p = FaceParams.from_seed(seed, size)
    rng = np.random.default_rng(seed + 7)  # detail draws, separate stream
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = _hsv(p.bg_hue, 0.35, 0.50)

    cy, cx = h * 0.54, w * 0.5
    ry = p.face_scale * h * 0.46
    rx = p.face_scale * h * 0.36
    head = _ellipse_mask(yy, xx, cy, cx, ry, rx)
    img[head] = _hsv(p.head_hue, 0.38, 0.86)

    # hair: crescent over the top of the head
    hair = _ellipse_mask(yy, xx, cy - ry * 0.48, cx, ry * 0.62, rx * 1.02) & head
    img[hair] = _hsv(p.head_hue + 0.7, 0.55, 0.32)

    eye_dy = cy - ry * 0.12
    eye_dx = rx * 0.42
    eye_r = max(1.2, rx * (0.13 + 0.04 * rng.uniform()))
    dark = np.array([0.08, 0.07, 0.09])
    for side in (-1.0, 1.0):
        ex = cx + side * eye_dx + p.pose_offset
        img[_ellipse_mask(yy, xx, eye_dy, ex, eye_r, eye_r)] = dark

    mouth_w = rx * (0.40 + 0.18 * rng.uniform())
    mouth = _ellipse_mask(yy, xx, cy + ry * 0.48, cx + p.pose_offset,
                          max(1.0, ry * 0.09), mouth_w)
    img[mouth & head] = np.array([0.55, 0.15, 0.18])

    return from_uint8(np.round(img * 255.0).astype(np.uint8))


def _quantize_indices(arr_u8):
    """Nearest color over PALETTE + edge color; edge gets index -1."""
    colors = np.vstack([PALETTE, EDGE_COLOR[None]]).astype(np.int32)
    flat = arr_u8.reshape(-1, 1, 3).astype(np.int32)
    d = ((flat - colors[None]) ** 2).sum(axis=2)
    idx = d.argmin(axis=1).reshape(arr_u8.shape[:2])
    return np.where(idx == len(PALETTE), -1, idx)


def apply_style_oracle(img):
    """Palette-quantize and blacken color boundaries. Idempotent.

    Boundary rule: a pixel is outlined when a 4-neighbour holds a different
    palette color; outline-colored pixels are ignored on both sides of the
    comparison, so a second application finds no new boundaries.
    """
    idx = _quantize_indices(to_uint8(img))
    boundary = np.zeros(idx.shape, dtype=bool)
    for axis, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
        nb = np.roll(idx, shift, axis=axis)
        # roll wraps around; mask off the wrapped border row/column
        valid = np.ones(idx.shape, dtype=bool)
        if axis == 0:
            valid[0 if shift == 1 else -1, :] = False
        else:
            valid[:, 0 if shift == 1 else -1] = False
        boundary |= valid & (idx >= 0) & (nb >= 0) & (nb != idx)

    out = np.empty(idx.shape + (3,), dtype=np.uint8)
    safe_idx = np.where(idx < 0, 0, idx)
    out[:] = PALETTE[safe_idx]
    out[idx < 0] = EDGE_COLOR
    out[boundary] = EDGE_COLOR
    return from_uint8(out)


def _gen_by_provenance(provenance, seed, size):
    img = gen_source_image(seed, size)
    if provenance == "style":
        img = apply_style_oracle(img)
    return img


def build_datasets(n_source, n_style, n_test, root_seed, out_dir, size=32):
    """Write source/style/test images plus a manifest; resumable and
    bit-reproducible for a fixed root_seed."""
    if size not in SUPPORTED_SIZES:
        raise ConfigError(f"size must be one of {SUPPORTED_SIZES}, got {size}")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)

    groups = (
        ("source", "train", root_seed, n_source),
        ("style", "train", root_seed + STYLE_SEED_OFFSET, n_style),
        ("source", "test", root_seed + TEST_SEED_OFFSET, n_test),
    )
    entries = []
    for provenance, split, base, count in groups:
        for i in range(count):
            seed = base + i
            name = f"images/{provenance}_{seed}.png"
            path = out_dir / name
            if not path.exists():
                save_image(_gen_by_provenance(provenance, seed, size), path)
            entries.append(ManifestEntry(name, split, seed, provenance))

    manifest = DatasetManifest(out_dir, entries)
    manifest.check_unique_paths()
    manifest.save(out_dir / "manifest.jsonl")
    return manifest

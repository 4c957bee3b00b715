"""Procedural benchmark generator: textured reference map plus warped frames.

The map combines seeded multi-scale value noise with geometric shapes so
every region carries both low-frequency structure (for retrieval and coarse
matching) and sharp corners (for keypoint extraction).  Frames are
homography-warped crops with brightness/contrast jitter; the exact warp and
the geo position of each frame centre are recorded as ground truth, making
the generated sequence a self-contained evaluation oracle.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from scipy import ndimage

from aeroloc import geo as geomod
from aeroloc.errors import ConfigurationError
from aeroloc.imageio import save_gray
from aeroloc.store import save_manifest

DEFAULT_ORIGIN = (47.0, 8.0)


def generate_map(rng: np.random.Generator, size: int) -> np.ndarray:
    """Seeded multi-scale value noise plus random shapes, in [0, 1]."""
    img = np.zeros((size, size))
    amplitude = 1.0
    total = 0.0
    for cells in (4, 8, 16, 32, 64, 128):
        grid = rng.uniform(0, 1, size=(cells, cells))
        layer = ndimage.zoom(grid, size / cells, order=1, mode="nearest")[:size, :size]
        img += amplitude * layer
        total += amplitude
        amplitude *= 0.55
    img /= total

    # geometric shapes give the fine stage corner content
    yy, xx = np.mgrid[0:size, 0:size]
    n_shapes = max(60, size // 12)
    for _ in range(n_shapes):
        kind = rng.integers(0, 3)
        intensity = rng.uniform(-0.35, 0.35)
        cx, cy = rng.uniform(0, size, 2)
        if kind == 0:  # axis-aligned rectangle
            w, h = rng.uniform(size / 80, size / 12, 2)
            mask = (np.abs(xx - cx) < w / 2) & (np.abs(yy - cy) < h / 2)
        elif kind == 1:  # disc
            r = rng.uniform(size / 100, size / 20)
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 < r * r
        else:  # thick line segment
            ang = rng.uniform(0, np.pi)
            length = rng.uniform(size / 20, size / 5)
            thick = rng.uniform(1.5, size / 150)
            dx, dy = np.cos(ang), np.sin(ang)
            t = (xx - cx) * dx + (yy - cy) * dy
            d = np.abs(-(xx - cx) * dy + (yy - cy) * dx)
            mask = (np.abs(t) < length / 2) & (d < thick)
        img[mask] += intensity

    # fine-grain texture so flat areas still carry gradient signal
    img += rng.uniform(-0.03, 0.03, size=(size, size))
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo)


def frame_to_map_transform(
    center: tuple[float, float], rotation_deg: float, scale: float, frame_size: int
) -> np.ndarray:
    """Affine homography taking frame pixels to map pixels.

    The frame centre lands on ``center``; ``scale`` is map pixels per frame
    pixel (footprint side = scale * frame_size).
    """
    theta = math.radians(rotation_deg)
    c, s = math.cos(theta), math.sin(theta)
    half = frame_size / 2.0
    a = scale * np.array([[c, -s], [s, c]])
    t = np.array(center) - a @ np.array([half, half])
    m = np.eye(3)
    m[:2, :2] = a
    m[:2, 2] = t
    return m


def render_frame(map_img: np.ndarray, transform: np.ndarray, frame_size: int) -> np.ndarray:
    """Sample a warped crop by bilinear interpolation of the map."""
    us, vs = np.meshgrid(np.arange(frame_size), np.arange(frame_size))
    pts = np.stack([us.ravel(), vs.ravel(), np.ones(us.size)])
    mapped = transform @ pts
    xs = mapped[0] / mapped[2]
    ys = mapped[1] / mapped[2]
    sampled = ndimage.map_coordinates(
        map_img, np.stack([ys, xs]), order=1, mode="constant", cval=0.5
    )
    return sampled.reshape(frame_size, frame_size)


def synth_dataset(
    out_dir: str | Path,
    seed: int = 42,
    map_size: int = 2048,
    n_frames: int = 50,
    tile_size: int = 512,
    overlap: int = 256,
    gsd: float = 0.5,
    rotation_max_deg: float = 15.0,
    scale_range: tuple[float, float] = (0.8, 1.2),
    jitter: float = 0.2,
    origin: tuple[float, float] = DEFAULT_ORIGIN,
) -> dict:
    """Generate a map, warped frames and a manifest with exact ground truth.

    Deterministic per seed: identical seeds give identical map bytes and
    manifest contents.
    """
    if map_size < 4 * tile_size:
        raise ConfigurationError(
            f"map size {map_size} must be at least 4x tile size {tile_size}"
        )
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    map_img = generate_map(rng, map_size)
    save_gray(out / "map.png", map_img)
    georef = geomod.GeoRef(origin[0], origin[1], gsd, gsd)

    # keep the warped footprint inside the map
    margin = math.ceil(tile_size / 2 * max(scale_range) * math.sqrt(2.0)) + 2
    frames = []
    for i in range(n_frames):
        cx = rng.uniform(margin, map_size - margin)
        cy = rng.uniform(margin, map_size - margin)
        rot = rng.uniform(-rotation_max_deg, rotation_max_deg)
        scale = rng.uniform(*scale_range)
        contrast = 1.0 + rng.uniform(-jitter, jitter)
        brightness = rng.uniform(-jitter, jitter) * 0.5

        transform = frame_to_map_transform((cx, cy), rot, scale, tile_size)
        frame = render_frame(map_img, transform, tile_size)
        frame = np.clip(contrast * frame + brightness, 0.0, 1.0)
        name = f"frames/frame_{i:04d}.png"
        save_gray(out / name, frame)

        gt = geomod.pixel_to_geo(georef, (cx, cy))
        frames.append(
            {
                "frame_id": f"frame_{i:04d}",
                "image": name,
                "gt_lat": gt.latitude,
                "gt_lon": gt.longitude,
                "timestamp": i / 5.0,
                "warp": {
                    "center_px": [cx, cy],
                    "rotation_deg": rot,
                    "scale": scale,
                    "contrast": contrast,
                    "brightness": brightness,
                    "frame_to_map": transform.tolist(),
                },
            }
        )

    manifest = {
        "map": {
            "path": "map.png",
            "width": map_size,
            "height": map_size,
            "georef": georef.to_dict(),
            "tile_size": tile_size,
            "overlap": overlap,
        },
        "frames": frames,
        "seed": seed,
    }
    save_manifest(out / "manifest.json", manifest)
    return manifest

"""Satellite-map tiling, global descriptors, top-k retrieval and the tile database.

The database is a flat list of tile records scanned exhaustively: desk-scale
databases stay below ten thousand tiles, where exactness beats indexing.
The built-in descriptor aggregator is generalized-mean pooling over grid
cells (a classical baseline, not a learned aggregator); externally computed
descriptors bypass it through tile-record ingestion.  On disk a database is
a JSON manifest of tile records plus one tensor file holding all
descriptors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from aeroloc import store
from aeroloc.errors import ConfigurationError, ContractViolationError, DataFormatError
from aeroloc.features import DenseFeatureMap
from aeroloc.geo import GeoRef

UNIT_NORM_TOL = 1e-6


@dataclass(frozen=True)
class TileRecord:
    """One reference tile: source rectangle, geo reference and unit descriptor."""

    tile_id: int
    rect: tuple[int, int, int, int]
    georef: GeoRef
    descriptor: np.ndarray
    features_path: str | None = None

    def __post_init__(self) -> None:
        d = np.asarray(self.descriptor, dtype=np.float64)
        if d.ndim != 1:
            raise ContractViolationError("tile descriptor must be a vector")
        if abs(np.linalg.norm(d) - 1.0) > UNIT_NORM_TOL:
            raise ContractViolationError(
                f"tile {self.tile_id}: descriptor norm {np.linalg.norm(d):.8f} is not 1"
            )
        d.setflags(write=False)
        object.__setattr__(self, "descriptor", d)

    @property
    def center_px(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.rect
        return ((x0 + x1) / 2.0, (y0 + y1) / 2.0)


def tile_satellite_map(
    width: int, height: int, tile_size: int, overlap: int
) -> list[tuple[int, int, int, int]]:
    """Row-major full-coverage tiling with stride ``tile_size - overlap``.

    The last row/column is shifted inward so every tile is full size and the
    map is fully covered.  Raises :class:`DataFormatError` when the map is
    smaller than one tile.
    """
    if overlap < 0 or tile_size <= overlap:
        raise ConfigurationError("need tile_size > overlap >= 0")
    if width < tile_size or height < tile_size:
        raise DataFormatError(
            f"map {width}x{height} smaller than tile size {tile_size}"
        )
    stride = tile_size - overlap

    def starts(extent: int) -> list[int]:
        s = list(range(0, extent - tile_size + 1, stride))
        if s[-1] != extent - tile_size:
            s.append(extent - tile_size)
        return s

    return [
        (x, y, x + tile_size, y + tile_size)
        for y in starts(height)
        for x in starts(width)
    ]


def aggregate_descriptor(f: DenseFeatureMap, power: float = 3.0) -> np.ndarray:
    """Generalized-mean pooling over grid cells followed by L2 normalisation.

    Features are clamped at zero before pooling (the built-in extractors are
    non-negative already).  Raises on an all-zero map.
    """
    x = np.maximum(f.data.reshape(-1, f.channels), 0.0)
    pooled = np.power(np.mean(np.power(x, power), axis=0), 1.0 / power)
    norm = np.linalg.norm(pooled)
    if norm < 1e-12:
        raise ContractViolationError("cannot aggregate an all-zero feature map")
    return pooled / norm


def query_top_k(
    query: np.ndarray, records: list[TileRecord], k: int
) -> list[tuple[int, float]]:
    """Cosine top-k over the database; ties break to the lowest tile id."""
    if not records:
        raise ConfigurationError("tile database is empty")
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    q = np.asarray(query, dtype=np.float64)
    if abs(np.linalg.norm(q) - 1.0) > UNIT_NORM_TOL:
        raise ContractViolationError("query descriptor must be unit norm")
    ids = np.array([r.tile_id for r in records])
    mat = np.stack([r.descriptor for r in records])
    sims = mat @ q
    order = np.lexsort((ids, -sims))[: min(k, len(records))]
    return [(int(ids[o]), float(sims[o])) for o in order]


@dataclass
class TileDatabase:
    """Tile records plus the source-map metadata they were cut from."""

    records: list[TileRecord]
    tile_size: int
    overlap: int
    map_path: str
    map_width: int
    map_height: int
    georef: GeoRef


def build_database(
    map_path: str | Path,
    georef: GeoRef,
    tile_size: int = 512,
    overlap: int = 256,
    extractor=None,
    descriptors_from: str | Path | None = None,
    export_tiles_to: str | Path | None = None,
) -> TileDatabase:
    """Tile a reference map and compute (or ingest) one descriptor per tile.

    With ``descriptors_from`` set, per-tile descriptor files named
    ``tile_{id:05d}.global.glft`` are read instead of running the built-in
    aggregator.  ``export_tiles_to`` additionally writes each tile as a PNG,
    which is how an external feature exporter gets its inputs.
    """
    from aeroloc.backends import HandcraftedDenseExtractor
    from aeroloc.imageio import load_gray, save_gray

    map_img = load_gray(map_path)
    height, width = map_img.shape
    rects = tile_satellite_map(width, height, tile_size, overlap)
    if extractor is None:
        extractor = HandcraftedDenseExtractor()
    if export_tiles_to is not None:
        Path(export_tiles_to).mkdir(parents=True, exist_ok=True)

    records = []
    for tile_id, rect in enumerate(rects):
        x0, y0, x1, y1 = rect
        tile_img = map_img[y0:y1, x0:x1]
        if export_tiles_to is not None:
            save_gray(Path(export_tiles_to) / f"tile_{tile_id:05d}.png", tile_img)
        if descriptors_from is not None:
            desc_path = Path(descriptors_from) / f"tile_{tile_id:05d}.global.glft"
            if not desc_path.exists():
                raise DataFormatError(f"missing descriptor file {desc_path}")
            vec, _ = store.read_tensor(desc_path)
            descriptor = vec.astype(np.float64).ravel()
        else:
            descriptor = aggregate_descriptor(extractor.extract(tile_img))
        records.append(
            TileRecord(tile_id, rect, georef.shifted(x0, y0), descriptor)
        )
    return TileDatabase(
        records, tile_size, overlap, str(map_path), width, height, georef
    )


def save_database(db: TileDatabase, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tile_size": db.tile_size,
        "overlap": db.overlap,
        "map": {
            "path": str(Path(db.map_path).resolve()),
            "width": db.map_width,
            "height": db.map_height,
            "georef": db.georef.to_dict(),
        },
        "tiles": [
            {
                "tile_id": r.tile_id,
                "rect": list(r.rect),
                "georef": r.georef.to_dict(),
                "features_path": r.features_path,
            }
            for r in db.records
        ],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    descriptors = np.stack([r.descriptor for r in db.records])
    store.write_tensor(
        out / "descriptors.glft",
        descriptors,
        {"tile_ids": [r.tile_id for r in db.records]},
    )


def load_database(db_dir: str | Path) -> TileDatabase:
    src = Path(db_dir)
    manifest_path = src / "manifest.json"
    if not manifest_path.exists():
        raise DataFormatError(f"{src}: not a tile database (missing manifest.json)")
    manifest = json.loads(manifest_path.read_text())
    descriptors, meta = store.read_tensor(src / "descriptors.glft")
    tiles = manifest["tiles"]
    if descriptors.shape[0] != len(tiles):
        raise DataFormatError(
            f"{src}: descriptor count {descriptors.shape[0]} != tile count {len(tiles)}"
        )
    records = []
    for row, entry in zip(descriptors, tiles):
        vec = row.astype(np.float64)
        norm = np.linalg.norm(vec)
        if norm < 1e-12:
            raise DataFormatError(f"{src}: tile {entry['tile_id']} has a zero descriptor")
        records.append(
            TileRecord(
                entry["tile_id"],
                tuple(entry["rect"]),
                GeoRef.from_dict(entry["georef"]),
                vec / norm,
                entry.get("features_path"),
            )
        )
    return TileDatabase(
        records,
        manifest["tile_size"],
        manifest["overlap"],
        manifest["map"]["path"],
        manifest["map"]["width"],
        manifest["map"]["height"],
        GeoRef.from_dict(manifest["map"]["georef"]),
    )


class TileRetriever(BaseEstimator):
    """Flat-scan retrieval index over tile records (fit once, query many)."""

    def __init__(self, k: int = 3):
        self.k = k

    def fit(self, records: list[TileRecord], y=None) -> "TileRetriever":
        if not records:
            raise ConfigurationError("tile database is empty")
        self.records_ = list(records)
        self.by_id_ = {r.tile_id: r for r in self.records_}
        return self

    def query(self, descriptor: np.ndarray, k: int | None = None) -> list[tuple[int, float]]:
        return query_top_k(descriptor, self.records_, k or self.k)

    def record(self, tile_id: int) -> TileRecord:
        return self.by_id_[tile_id]

"""Flat-earth tile geometry: geotag->pixel mapping and minimum-separation tile sampling.

Tiles are small (at most a few km across), so geodesy is a local equirectangular
model: one degree of latitude is a fixed 111320 m and one degree of longitude is
111320 * cos(lat), evaluated at the tile center. Rows grow southward (north is
up in the raster). Tiles never span the antimeridian; longitude differences are
plain subtraction after normalization into [-180, 180).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

METERS_PER_DEGREE = 111_320.0


class OutOfFootprintError(ValueError):
    """A geotag was mapped against a tile whose footprint does not contain it."""


@dataclass(frozen=True)
class GeoPoint:
    """Geodetic coordinate; lat in [-90, 90], lon normalized into [-180, 180)."""

    lat: float
    lon: float

    def __post_init__(self):
        lat = float(self.lat)
        lon = float(self.lon)
        if not (-90.0 <= lat <= 90.0):
            raise ValueError(f"latitude {lat} outside [-90, 90]")
        if not math.isfinite(lon):
            raise ValueError(f"longitude {lon} is not finite")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", ((lon + 180.0) % 360.0) - 180.0)


@dataclass(frozen=True)
class TileSpec:
    """A square satellite tile raster centered on a geotag.

    Defaults give a 224 px tile of 16 px patches; at 1 m/px each patch covers
    16 m of ground, at 10 m/px it covers 160 m.
    """

    center: GeoPoint
    resolution_m_per_px: float = 1.0
    size_px: int = 224
    patch_px: int = 16

    def __post_init__(self):
        object.__setattr__(self, "resolution_m_per_px", float(self.resolution_m_per_px))
        object.__setattr__(self, "size_px", int(self.size_px))
        object.__setattr__(self, "patch_px", int(self.patch_px))
        if self.resolution_m_per_px <= 0:
            raise ValueError("resolution_m_per_px must be positive")
        if self.size_px <= 0 or self.patch_px <= 0:
            raise ValueError("size_px and patch_px must be positive")
        if self.size_px % self.patch_px != 0:
            raise ValueError(
                f"size_px {self.size_px} not divisible by patch_px {self.patch_px}"
            )

    @property
    def grid_px(self) -> int:
        """Patches per side."""
        return self.size_px // self.patch_px

    @property
    def half_extent_m(self) -> float:
        return self.size_px * self.resolution_m_per_px / 2.0

    @property
    def patch_extent_m(self) -> float:
        return self.patch_px * self.resolution_m_per_px


@dataclass(frozen=True)
class PixelCoord:
    row: int
    col: int


@dataclass(frozen=True)
class PatchIndex:
    prow: int
    pcol: int


def meters_per_degree(lat: float) -> tuple[float, float]:
    """Local meters per degree of latitude and longitude at the given latitude."""
    if not (-90.0 <= lat <= 90.0):
        raise ValueError(f"latitude {lat} outside [-90, 90]")
    return METERS_PER_DEGREE, METERS_PER_DEGREE * math.cos(math.radians(lat))


def flat_earth_offset_m(origin: GeoPoint, p: GeoPoint) -> tuple[float, float]:
    """(north_m, east_m) displacement of `p` from `origin`, cos scale at origin."""
    north = (p.lat - origin.lat) * METERS_PER_DEGREE
    east = (p.lon - origin.lon) * METERS_PER_DEGREE * math.cos(math.radians(origin.lat))
    return north, east


def flat_earth_distance_m(a: GeoPoint, b: GeoPoint) -> float:
    """Symmetric flat-earth distance; longitude scale at the midpoint latitude."""
    dn = (a.lat - b.lat) * METERS_PER_DEGREE
    de = (a.lon - b.lon) * METERS_PER_DEGREE * math.cos(math.radians((a.lat + b.lat) / 2))
    return math.hypot(dn, de)


def tile_contains(tile: TileSpec, p: GeoPoint) -> bool:
    """Strict containment: points exactly on the footprint boundary are outside."""
    north, east = flat_earth_offset_m(tile.center, p)
    half = tile.half_extent_m
    return abs(north) < half and abs(east) < half


def geotag_to_pixel(tile: TileSpec, p: GeoPoint) -> PixelCoord:
    """Map a geotag inside the tile footprint to its raster pixel.

    Raises OutOfFootprintError for points on or outside the footprint boundary;
    the caller decides whether to drop the point or assign it elsewhere.
    """
    north, east = flat_earth_offset_m(tile.center, p)
    half = tile.half_extent_m
    if not (abs(north) < half and abs(east) < half):
        raise OutOfFootprintError(
            f"point ({p.lat}, {p.lon}) outside tile at ({tile.center.lat}, "
            f"{tile.center.lon}): offset ({north:.1f} m N, {east:.1f} m E), "
            f"half extent {half:.1f} m"
        )
    res = tile.resolution_m_per_px
    row = math.floor(tile.size_px / 2 - north / res)
    col = math.floor(tile.size_px / 2 + east / res)
    return PixelCoord(int(row), int(col))


def pixel_to_geotag(tile: TileSpec, px: PixelCoord) -> GeoPoint:
    """Geotag of a pixel's center; inverse of geotag_to_pixel up to half a pixel."""
    if not (0 <= px.row < tile.size_px and 0 <= px.col < tile.size_px):
        raise ValueError(f"pixel {px} out of bounds for size_px {tile.size_px}")
    res = tile.resolution_m_per_px
    north = (tile.size_px / 2 - (px.row + 0.5)) * res
    east = ((px.col + 0.5) - tile.size_px / 2) * res
    lat = tile.center.lat + north / METERS_PER_DEGREE
    lon = tile.center.lon + east / (
        METERS_PER_DEGREE * math.cos(math.radians(tile.center.lat))
    )
    return GeoPoint(lat, lon)


def pixel_to_patch(px: PixelCoord, patch_px: int) -> PatchIndex:
    """Index of the non-overlapping patch containing the pixel."""
    if patch_px <= 0:
        raise ValueError("patch_px must be positive")
    if px.row < 0 or px.col < 0:
        raise ValueError(f"pixel {px} has negative coordinates")
    return PatchIndex(px.row // patch_px, px.col // patch_px)


def sample_tiles(
    points: Sequence[GeoPoint], spec: TileSpec, min_sep_px: int
) -> tuple[list[TileSpec], list[list[int]]]:
    """Greedy minimum-separation tile sampling over geotags, in input order.

    A point spawns a tile centered on itself unless an already spawned tile
    center lies strictly within min_sep_px * resolution meters. Every point is
    then assigned to every tile whose footprint strictly contains it, so one
    ground image can belong to several overlapping tiles.

    Returns the tiles and, per tile, the ascending indices of assigned points.
    """
    if not points:
        raise ValueError("points must be non-empty")
    if min_sep_px < 0:
        raise ValueError("min_sep_px must be >= 0")

    min_sep_m = min_sep_px * spec.resolution_m_per_px
    lats = np.array([p.lat for p in points], dtype=np.float64)
    lons = np.array([p.lon for p in points], dtype=np.float64)

    center_lat = np.empty(len(points))
    center_lon = np.empty(len(points))
    n_tiles = 0
    tiles: list[TileSpec] = []
    for i in range(len(points)):
        if n_tiles > 0 and min_sep_m > 0:
            clat = center_lat[:n_tiles]
            clon = center_lon[:n_tiles]
            dn = (lats[i] - clat) * METERS_PER_DEGREE
            de = (
                (lons[i] - clon)
                * METERS_PER_DEGREE
                * np.cos(np.radians((lats[i] + clat) / 2))
            )
            if bool(np.any(dn * dn + de * de < min_sep_m * min_sep_m)):
                continue
        center_lat[n_tiles] = lats[i]
        center_lon[n_tiles] = lons[i]
        n_tiles += 1
        tiles.append(
            TileSpec(
                center=points[i],
                resolution_m_per_px=spec.resolution_m_per_px,
                size_px=spec.size_px,
                patch_px=spec.patch_px,
            )
        )

    half = spec.half_extent_m
    assignment: list[list[int]] = []
    for t in tiles:
        dn = (lats - t.center.lat) * METERS_PER_DEGREE
        de = (
            (lons - t.center.lon)
            * METERS_PER_DEGREE
            * math.cos(math.radians(t.center.lat))
        )
        inside = (np.abs(dn) < half) & (np.abs(de) < half)
        assignment.append(np.nonzero(inside)[0].tolist())
    return tiles, assignment


def cap_subsample(
    assignment: Sequence[Sequence[int]], cap: int = 25, seed: int = 0
) -> list[list[int]]:
    """Uniformly subsample each tile's point list down to at most `cap` entries.

    Tiles at or under the cap pass through unchanged. Retained entries keep
    their original relative order; the draw is deterministic for a fixed seed.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    rng = np.random.default_rng(seed)
    capped: list[list[int]] = []
    for members in assignment:
        if len(members) <= cap:
            capped.append(list(members))
        else:
            keep = np.sort(rng.choice(len(members), size=cap, replace=False))
            capped.append([members[k] for k in keep])
    return capped

"""File ingestion and result writers.

Input formats (planar km coordinates throughout):
  gauges CSV:  site_id,x_km,y_km,year,precip_m,evap_m
  runoff CSV:  catchment_id,year,runoff_m,obs_sd_m   (obs_sd_m optional)
  catchments:  GeoJSON FeatureCollection of polygons with an "id" property,
               or a grid-node CSV with header id,x,y.

Every output file starts with a metadata line (tool version, config hash,
seed) and is written with deterministic formatting.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .geometry import (Catchment, Domain, MeshSettings, catchment_from_polygon)
from .model import (ArealObservation, ModelError, ObservationSet,
                    PointObservation, areal_scale, compute_point_scale)


class DataError(ValueError):
    """Malformed input data; message carries file and line context."""


@dataclass(frozen=True)
class GaugeRecord:
    site_id: str
    x_km: float
    y_km: float
    year: int
    precip_m: float
    evap_m: float


@dataclass(frozen=True)
class RunoffRecord:
    catchment_id: str
    year: int
    runoff_m: float
    obs_sd_m: float | None


GAUGE_HEADER = ["site_id", "x_km", "y_km", "year", "precip_m", "evap_m"]
RUNOFF_HEADER = ["catchment_id", "year", "runoff_m", "obs_sd_m"]
NODE_HEADER = ["id", "x", "y"]


def _open_rows(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def _check_header(path, got: list[str], want: list[str], optional_tail: int = 0):
    got = [c.strip() for c in got]
    required = want[: len(want) - optional_tail]
    if got[: len(required)] != required or len(got) > len(want):
        raise DataError(f"{path}: expected header {','.join(want)} "
                        f"(last {optional_tail} optional), got {','.join(got)}")
    return len(got)


def _parse_float(path, lineno, name, raw, allow_empty=False):
    raw = raw.strip()
    if raw == "":
        if allow_empty:
            return None
        raise DataError(f"{path}:{lineno}: missing value for column {name!r}")
    try:
        val = float(raw)
    except ValueError:
        raise DataError(f"{path}:{lineno}: column {name!r} is not a number: {raw!r}") from None
    if not np.isfinite(val):
        raise DataError(f"{path}:{lineno}: column {name!r} is not finite: {raw!r}")
    return val


def _parse_int(path, lineno, name, raw):
    raw = raw.strip()
    try:
        return int(raw)
    except ValueError:
        raise DataError(f"{path}:{lineno}: column {name!r} is not an integer: {raw!r}") from None


def load_point_data(path) -> list[GaugeRecord]:
    """Gauge records; negative precipitation is rejected, evap > precip only warned."""
    rows = _open_rows(path)
    if not rows:
        raise DataError(f"{path}: empty file")
    _check_header(path, rows[0], GAUGE_HEADER)
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(GAUGE_HEADER):
            raise DataError(f"{path}:{lineno}: expected {len(GAUGE_HEADER)} fields, got {len(row)}")
        sid = row[0].strip()
        if not sid:
            raise DataError(f"{path}:{lineno}: empty site_id")
        x = _parse_float(path, lineno, "x_km", row[1])
        y = _parse_float(path, lineno, "y_km", row[2])
        year = _parse_int(path, lineno, "year", row[3])
        precip = _parse_float(path, lineno, "precip_m", row[4])
        evap = _parse_float(path, lineno, "evap_m", row[5])
        if precip < 0:
            raise DataError(f"{path}:{lineno}: negative precipitation {precip}")
        if evap < 0:
            raise DataError(f"{path}:{lineno}: negative evaporation {evap}")
        if evap > precip:
            warnings.warn(f"{path}:{lineno}: evaporation exceeds precipitation at "
                          f"{sid}, year {year} (negative point runoff)")
        records.append(GaugeRecord(sid, x, y, year, precip, evap))
    if not records:
        raise DataError(f"{path}: no data rows")
    return records


def load_areal_data(path) -> list[RunoffRecord]:
    """Runoff records; duplicate (catchment, year) is an error."""
    rows = _open_rows(path)
    if not rows:
        raise DataError(f"{path}: empty file")
    ncols = _check_header(path, rows[0], RUNOFF_HEADER, optional_tail=1)
    records = []
    seen = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != ncols:
            raise DataError(f"{path}:{lineno}: expected {ncols} fields, got {len(row)}")
        cid = row[0].strip()
        if not cid:
            raise DataError(f"{path}:{lineno}: empty catchment_id")
        year = _parse_int(path, lineno, "year", row[1])
        runoff = _parse_float(path, lineno, "runoff_m", row[2])
        sd = None
        if ncols == 4:
            sd = _parse_float(path, lineno, "obs_sd_m", row[3], allow_empty=True)
            if sd is not None and sd <= 0:
                raise DataError(f"{path}:{lineno}: obs_sd_m must be positive, got {sd}")
        if runoff <= 0:
            warnings.warn(f"{path}:{lineno}: non-positive runoff {runoff} at {cid}, year {year}")
        key = (cid, year)
        if key in seen:
            raise DataError(f"{path}:{lineno}: duplicate observation for {cid}, year {year}")
        seen.add(key)
        records.append(RunoffRecord(cid, year, runoff, sd))
    if not records:
        raise DataError(f"{path}: no data rows")
    return records


def load_catchments_geojson(path, spacing_km: float, origin=(0.0, 0.0)) -> dict[str, Catchment]:
    """Catchment polygons from GeoJSON (planar km coordinates), discretized."""
    from shapely.geometry import shape

    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc
    feats = doc.get("features")
    if doc.get("type") != "FeatureCollection" or not isinstance(feats, list):
        raise DataError(f"{path}: expected a GeoJSON FeatureCollection")
    out: dict[str, Catchment] = {}
    for i, feat in enumerate(feats):
        props = feat.get("properties") or {}
        cid = str(props.get("id", "")).strip()
        if not cid:
            raise DataError(f"{path}: feature {i} has no 'id' property")
        if cid in out:
            raise DataError(f"{path}: duplicate catchment id {cid!r}")
        geom = feat.get("geometry")
        if not geom:
            raise DataError(f"{path}: feature {cid!r} has no geometry")
        poly = shape(geom)
        if poly.geom_type not in ("Polygon", "MultiPolygon"):
            raise DataError(f"{path}: feature {cid!r} is {poly.geom_type}, expected Polygon")
        out[cid] = catchment_from_polygon(cid, poly, spacing=spacing_km, origin=origin)
    if not out:
        raise DataError(f"{path}: no catchment features")
    return out


def load_catchments_nodes_csv(path) -> dict[str, Catchment]:
    """Catchments given directly as grid-node lists (header id,x,y)."""
    rows = _open_rows(path)
    if not rows:
        raise DataError(f"{path}: empty file")
    _check_header(path, rows[0], NODE_HEADER)
    nodes: dict[str, list[tuple[float, float]]] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
        cid = row[0].strip()
        x = _parse_float(path, lineno, "x", row[1])
        y = _parse_float(path, lineno, "y", row[2])
        nodes.setdefault(cid, []).append((x, y))
    if not nodes:
        raise DataError(f"{path}: no data rows")
    return {cid: Catchment(id=cid, nodes=np.array(pts)) for cid, pts in nodes.items()}


@dataclass
class Dataset:
    """Everything loaded for one study region."""

    sites: dict[str, tuple[float, float]]
    gauge_records: list[GaugeRecord]
    runoff_records: list[RunoffRecord]
    catchments: dict[str, Catchment]
    future_runoff_records: list[RunoffRecord] = field(default_factory=list)
    default_areal_sd_fraction: float = 0.03

    def observation_years(self) -> list[int]:
        years = {r.year for r in self.gauge_records} | {r.year for r in self.runoff_records}
        return sorted(years)

    def build_domain(self, mesh_settings: MeshSettings | None = None) -> Domain:
        return Domain(self.sites, self.catchments, mesh_settings)

    def observation_set(self) -> ObservationSet:
        """Stack gauge and runoff records with their variance scales."""
        by_site: dict[str, dict[int, GaugeRecord]] = {}
        for rec in self.gauge_records:
            by_site.setdefault(rec.site_id, {})[rec.year] = rec
        years = self.observation_years()
        point_obs = []
        for sid, rows in sorted(by_site.items()):
            p_series = np.array([rows[y].precip_m if y in rows else np.nan for y in years])
            e_series = np.array([rows[y].evap_m if y in rows else np.nan for y in years])
            for j, y in enumerate(years):
                if y not in rows:
                    continue
                scale = compute_point_scale(p_series, e_series, j)
                rec = rows[y]
                point_obs.append(PointObservation(
                    site_id=sid, year=y, value=rec.precip_m - rec.evap_m, scale=scale))
        areal_obs = []
        for rec in self.runoff_records:
            if rec.catchment_id not in self.catchments:
                raise DataError(f"runoff record references unknown catchment "
                                f"{rec.catchment_id!r}")
            variance = rec.obs_sd_m ** 2 if rec.obs_sd_m is not None else None
            scale = areal_scale(variance, rec.runoff_m, self.default_areal_sd_fraction)
            areal_obs.append(ArealObservation(
                catchment_id=rec.catchment_id, year=rec.year,
                value=rec.runoff_m, scale=scale))
        return ObservationSet(point_obs, areal_obs)

    def future_values(self, catchment_id: str) -> list[tuple[int, float]]:
        return sorted((r.year, r.runoff_m) for r in self.future_runoff_records
                      if r.catchment_id == catchment_id)


def build_sites(gauge_records: list[GaugeRecord]) -> dict[str, tuple[float, float]]:
    sites: dict[str, tuple[float, float]] = {}
    for rec in gauge_records:
        xy = (rec.x_km, rec.y_km)
        if rec.site_id in sites and sites[rec.site_id] != xy:
            raise DataError(f"site {rec.site_id!r} has inconsistent coordinates")
        sites[rec.site_id] = xy
    return sites


# ---------------------------------------------------------------------------
# writers

def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def metadata_line(config_hash: str, seed) -> str:
    return f"# runfield={__version__} config_sha256={config_hash} seed={seed}"


def write_csv(path, header: list[str], rows: list[dict], config_hash: str = "none",
              seed="none") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [metadata_line(config_hash, seed), ",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(col, "")) for col in header))
    path.write_text("\n".join(lines) + "\n")


def write_json(path, payload: dict, config_hash: str = "none", seed="none") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"meta": {"runfield": __version__, "config_sha256": config_hash,
                    "seed": seed}, **payload}
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    return obj


def prediction_rows(predictions, method: str = "lgm") -> list[dict]:
    rows = []
    for p in predictions:
        rows.append({"target": p.target_id, "year": p.year, "method": method,
                     "mean": p.mean, "sd_process": p.sd_process,
                     "sd_predictive": p.sd_predictive, "lo": p.lo, "hi": p.hi,
                     "negative": p.negative})
    return rows


PREDICTION_HEADER = ["target", "year", "method", "mean", "sd_process",
                     "sd_predictive", "lo", "hi", "negative"]


def write_ascii_grid(path, grid_predictions, field: str = "mean") -> None:
    """ESRI-style ASCII grid of one prediction field on a regular lattice."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    xs = sorted({g.x_km for g in grid_predictions})
    ys = sorted({g.y_km for g in grid_predictions})
    if len(xs) > 1:
        cell = xs[1] - xs[0]
    elif len(ys) > 1:
        cell = ys[1] - ys[0]
    else:
        cell = 1.0
    lookup = {(g.x_km, g.y_km): getattr(g.prediction, field) for g in grid_predictions}
    lines = [
        f"ncols {len(xs)}",
        f"nrows {len(ys)}",
        f"xllcorner {repr(xs[0] - cell / 2.0)}",
        f"yllcorner {repr(ys[0] - cell / 2.0)}",
        f"cellsize {repr(float(cell))}",
        "NODATA_value -9999",
    ]
    for y in reversed(ys):
        lines.append(" ".join(repr(float(lookup.get((x, y), -9999.0))) for x in xs))
    path.write_text("\n".join(lines) + "\n")

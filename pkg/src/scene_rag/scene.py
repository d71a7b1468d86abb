"""Scene records: parsing, validation, annotation, and the scene-to-text serializer.

A record is one JSON object per line::

    {"schema": 1, "scene_id": "s-0001", "timestamp_us": 1690000000000000,
     "gps_tx": {"lat_deg": 33.42, "lon_deg": -111.93, "alt_m": 360.2},
     "gps_rx": {"lat_deg": 33.43, "lon_deg": -111.92},
     "camera_caption": "...", "lidar_caption": "...",
     "detections": [{"class": "car", "confidence": 0.91, "bbox": [x, y, w, h]}],
     "power": [[64 floats], [64 floats], [64 floats], [64 floats]],
     "image_ref": "frames/0001.jpg"}

Only ``schema``, ``scene_id``, ``timestamp_us``, ``gps_tx`` and ``gps_rx`` are
required.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from collections import Counter
from collections.abc import Iterable
from dataclasses import dataclass, field

from scene_rag import _http
from scene_rag.geo import GeoDomainError, GeoPoint, haversine_distance, initial_bearing

SCHEMA_VERSION = 1
N_ARRAYS = 4
N_BEAMS = 64
VEHICLE_CLASSES = frozenset({"car", "truck", "bus", "motorcycle", "bicycle"})
NO_CAMERA = "no camera description"

_TOP_KEYS = {
    "schema", "scene_id", "timestamp_us", "gps_tx", "gps_rx", "camera_caption",
    "lidar_caption", "detections", "power", "image_ref",
}
_GPS_KEYS = {"lat_deg", "lon_deg", "alt_m"}
_DET_KEYS = {"class", "confidence", "bbox"}


class SceneValidationError(ValueError):
    """A record breaks the schema; ``field`` names the offending path."""

    def __init__(self, field: str, message: str, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}field '{field}': {message}")
        self.field = field
        self.line = line
        self.reason = message


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


@dataclass(frozen=True)
class Detection:
    class_name: str
    confidence: float
    bbox: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if not isinstance(self.class_name, str) or not self.class_name:
            raise SceneValidationError("class", "must be a non-empty string")
        if not _is_number(self.confidence) or not 0.0 <= self.confidence <= 1.0:
            raise SceneValidationError("confidence", f"must be within [0, 1], got {self.confidence!r}")
        object.__setattr__(self, "confidence", float(self.confidence))
        if self.bbox is not None:
            box = tuple(self.bbox)
            if len(box) != 4 or not all(_is_number(v) and 0.0 <= v <= 1.0 for v in box):
                raise SceneValidationError("bbox", f"must be four numbers within [0, 1], got {self.bbox!r}")
            object.__setattr__(self, "bbox", tuple(float(v) for v in box))


@dataclass(frozen=True)
class SceneRecord:
    scene_id: str
    timestamp_us: int
    gps_tx: GeoPoint
    gps_rx: GeoPoint
    camera_caption: str | None = None
    lidar_caption: str | None = None
    detections: tuple[Detection, ...] = ()
    power: tuple[tuple[float, ...], ...] | None = None
    image_ref: str | None = None

    def __post_init__(self):
        if not isinstance(self.scene_id, str) or not self.scene_id:
            raise SceneValidationError("scene_id", "must be a non-empty string")
        if not isinstance(self.timestamp_us, int) or isinstance(self.timestamp_us, bool):
            raise SceneValidationError("timestamp_us", f"must be an integer, got {self.timestamp_us!r}")
        for name in ("gps_tx", "gps_rx"):
            if not isinstance(getattr(self, name), GeoPoint):
                raise SceneValidationError(name, "must be a GeoPoint")
        for name in ("camera_caption", "lidar_caption", "image_ref"):
            v = getattr(self, name)
            if v is not None and not isinstance(v, str):
                raise SceneValidationError(name, f"must be a string, got {type(v).__name__}")
        dets = tuple(self.detections)
        if not all(isinstance(d, Detection) for d in dets):
            raise SceneValidationError("detections", "must contain Detection objects")
        object.__setattr__(self, "detections", dets)
        if self.power is not None:
            object.__setattr__(self, "power", _check_power(self.power))


def _check_power(power) -> tuple[tuple[float, ...], ...]:
    rows = list(power)
    if len(rows) != N_ARRAYS:
        raise SceneValidationError("power", f"must have {N_ARRAYS} rows, got {len(rows)}")
    out = []
    for i, row in enumerate(rows):
        if isinstance(row, (str, bytes)) or not isinstance(row, Iterable):
            raise SceneValidationError(f"power[{i}]", "must be a list of numbers")
        vals = list(row)
        if len(vals) != N_BEAMS:
            raise SceneValidationError(f"power[{i}]", f"must have {N_BEAMS} values, got {len(vals)}")
        for j, v in enumerate(vals):
            if not _is_number(v) or not math.isfinite(v):
                raise SceneValidationError(f"power[{i}][{j}]", f"must be a finite number, got {v!r}")
        out.append(tuple(float(v) for v in vals))
    return tuple(out)


# --- JSON lines ---------------------------------------------------------------


def _gps_from_dict(obj, name: str) -> GeoPoint:
    if not isinstance(obj, dict):
        raise SceneValidationError(name, "must be an object with lat_deg and lon_deg")
    extra = set(obj) - _GPS_KEYS
    if extra:
        raise SceneValidationError(f"{name}.{sorted(extra)[0]}", "unknown field")
    for key in ("lat_deg", "lon_deg"):
        if key not in obj:
            raise SceneValidationError(f"{name}.{key}", "missing")
        if not _is_number(obj[key]):
            raise SceneValidationError(f"{name}.{key}", f"must be a number, got {obj[key]!r}")
    alt = obj.get("alt_m")
    if alt is not None and not _is_number(alt):
        raise SceneValidationError(f"{name}.alt_m", f"must be a number, got {alt!r}")
    try:
        return GeoPoint(obj["lat_deg"], obj["lon_deg"], alt)
    except GeoDomainError as exc:
        key = "lat_deg" if "lat_deg" in str(exc) else "lon_deg" if "lon_deg" in str(exc) else "alt_m"
        raise SceneValidationError(f"{name}.{key}", str(exc)) from None


def record_from_dict(obj) -> SceneRecord:
    """Validate one decoded JSON object and build a :class:`SceneRecord`."""
    if not isinstance(obj, dict):
        raise SceneValidationError("<record>", "must be a JSON object")
    extra = set(obj) - _TOP_KEYS
    if extra:
        raise SceneValidationError(sorted(extra)[0], "unknown field")
    if "schema" not in obj:
        raise SceneValidationError("schema", "missing")
    if obj["schema"] != SCHEMA_VERSION or isinstance(obj["schema"], bool):
        raise SceneValidationError("schema", f"unsupported version {obj['schema']!r}, expected {SCHEMA_VERSION}")
    for key in ("scene_id", "timestamp_us", "gps_tx", "gps_rx"):
        if key not in obj:
            raise SceneValidationError(key, "missing")
    dets_raw = obj.get("detections")
    if dets_raw is None:
        dets_raw = []
    if not isinstance(dets_raw, list):
        raise SceneValidationError("detections", "must be a list")
    detections = []
    for i, d in enumerate(dets_raw):
        prefix = f"detections[{i}]"
        if not isinstance(d, dict):
            raise SceneValidationError(prefix, "must be an object")
        extra = set(d) - _DET_KEYS
        if extra:
            raise SceneValidationError(f"{prefix}.{sorted(extra)[0]}", "unknown field")
        for key in ("class", "confidence"):
            if key not in d:
                raise SceneValidationError(f"{prefix}.{key}", "missing")
        try:
            detections.append(Detection(d["class"], d["confidence"], d.get("bbox")))
        except SceneValidationError as exc:
            raise SceneValidationError(f"{prefix}.{exc.field}", exc.reason) from None
        except TypeError:
            raise SceneValidationError(f"{prefix}.bbox", "must be a list of four numbers") from None
    power = obj.get("power")
    if power is not None and not isinstance(power, list):
        raise SceneValidationError("power", "must be a 4x64 list of lists")
    return SceneRecord(
        scene_id=obj["scene_id"],
        timestamp_us=obj["timestamp_us"],
        gps_tx=_gps_from_dict(obj["gps_tx"], "gps_tx"),
        gps_rx=_gps_from_dict(obj["gps_rx"], "gps_rx"),
        camera_caption=obj.get("camera_caption"),
        lidar_caption=obj.get("lidar_caption"),
        detections=tuple(detections),
        power=power,
        image_ref=obj.get("image_ref"),
    )


def _lines(stream) -> Iterable[str]:
    if isinstance(stream, bytes):
        stream = stream.decode("utf-8")
    if isinstance(stream, str):
        # JSON lines break on "\n" only; str.splitlines would also split on U+0085, U+2028 etc.
        return stream.split("\n")
    return stream


def parse_scene_records(stream) -> list[SceneRecord]:
    """Parse JSON-lines scene records from a string, bytes, file, or iterable of lines.

    Blank lines are skipped.  Errors carry the 1-based line number and the
    offending field; a repeated ``scene_id`` is an error.
    """
    records: list[SceneRecord] = []
    seen: dict[str, int] = {}
    for line_no, line in enumerate(_lines(stream), start=1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SceneValidationError("<json>", f"invalid JSON: {exc.msg}", line=line_no) from None
        try:
            rec = record_from_dict(obj)
        except SceneValidationError as exc:
            raise SceneValidationError(exc.field, exc.reason, line=line_no) from None
        if rec.scene_id in seen:
            raise SceneValidationError(
                "scene_id", f"duplicate {rec.scene_id!r} (first on line {seen[rec.scene_id]})", line=line_no
            )
        seen[rec.scene_id] = line_no
        records.append(rec)
    return records


def _gps_to_dict(p: GeoPoint) -> dict:
    out = {"lat_deg": p.lat_deg, "lon_deg": p.lon_deg}
    if p.alt_m is not None:
        out["alt_m"] = p.alt_m
    return out


def record_to_dict(rec: SceneRecord) -> dict:
    out: dict = {
        "schema": SCHEMA_VERSION,
        "scene_id": rec.scene_id,
        "timestamp_us": rec.timestamp_us,
        "gps_tx": _gps_to_dict(rec.gps_tx),
        "gps_rx": _gps_to_dict(rec.gps_rx),
    }
    if rec.camera_caption is not None:
        out["camera_caption"] = rec.camera_caption
    if rec.lidar_caption is not None:
        out["lidar_caption"] = rec.lidar_caption
    dets = []
    for d in rec.detections:
        item: dict = {"class": d.class_name, "confidence": d.confidence}
        if d.bbox is not None:
            item["bbox"] = list(d.bbox)
        dets.append(item)
    out["detections"] = dets
    if rec.power is not None:
        out["power"] = [list(row) for row in rec.power]
    if rec.image_ref is not None:
        out["image_ref"] = rec.image_ref
    return out


def dump_scene_records(records: Iterable[SceneRecord]) -> str:
    """Serialize records back to JSON lines (inverse of :func:`parse_scene_records`)."""
    return "".join(json.dumps(record_to_dict(r), ensure_ascii=False) + "\n" for r in records)


# --- scene to text ----------------------------------------------------------


@dataclass(frozen=True)
class SceneText:
    scene_id: str
    body: str
    distance_km: float
    bearing_deg: float
    vehicle_count: int
    class_counts: dict[str, int] = field(default_factory=dict)
    best_beam: tuple[int, int] | None = None


def _one_line(text: str) -> str:
    return " ".join(text.split())


def _argmax(row) -> int:
    best = 0
    for j in range(1, len(row)):
        if row[j] > row[best]:
            best = j
    return best


def _fmt_power(v: float) -> str:
    return format(v, ".6g")


def scene_to_text(rec: SceneRecord, vehicle_classes=VEHICLE_CLASSES) -> SceneText:
    """Fuse a record's modalities into one deterministic paragraph.

    Line order: header, camera caption, lidar caption (if any), object census
    with vehicle count, TX-to-RX distance (3 decimals, km), bearing from TX to
    RX (1 decimal, degrees), beam-power summary (if any).
    """
    vehicle_classes = frozenset(vehicle_classes)
    distance = haversine_distance(rec.gps_tx, rec.gps_rx)
    bearing = initial_bearing(rec.gps_tx, rec.gps_rx)
    census = Counter(d.class_name for d in rec.detections)
    vehicles = sum(1 for d in rec.detections if d.class_name in vehicle_classes)

    lines = [f"Scene {rec.scene_id} at timestamp {rec.timestamp_us} us."]
    caption = _one_line(rec.camera_caption) if rec.camera_caption else ""
    lines.append(f"Camera: {caption or NO_CAMERA}.")
    if rec.lidar_caption and _one_line(rec.lidar_caption):
        lines.append(f"Lidar: {_one_line(rec.lidar_caption)}.")
    if census:
        parts = ", ".join(f"{name}: {census[name]}" for name in sorted(census))
        lines.append(f"Objects: {parts}. Vehicle count: {vehicles}.")
    else:
        lines.append(f"Objects: none detected. Vehicle count: {vehicles}.")
    lines.append(f"TX–RX distance: {distance:.3f} km")
    bearing_txt = f"{bearing:.1f}"
    if bearing_txt == "360.0":
        bearing_txt = "0.0"
    lines.append(f"bearing TX→RX: {bearing_txt}°")

    best = None
    if rec.power is not None:
        per_array = []
        best_val = -math.inf
        for a, row in enumerate(rec.power):
            beam = _argmax(row)
            per_array.append(f"array {a} max {_fmt_power(row[beam])} at beam {beam}")
            if row[beam] > best_val:
                best_val = row[beam]
                best = (a, beam)
        lines.append(f"Power: {'; '.join(per_array)}; best beam: array {best[0]}, beam {best[1]}.")

    return SceneText(
        scene_id=rec.scene_id,
        body="\n".join(lines),
        distance_km=distance,
        bearing_deg=bearing,
        vehicle_count=vehicles,
        class_counts=dict(sorted(census.items())),
        best_beam=best,
    )


# --- remote captioning --------------------------------------------------------


@dataclass(frozen=True)
class AnnotationEndpoint:
    """Caption service: POST ``{"image_ref"}`` returns ``{"caption"}``."""

    url: str
    api_key: str | None = None
    timeout: float = _http.DEFAULT_TIMEOUT_S
    max_attempts: int = _http.DEFAULT_ATTEMPTS
    backoff: float = _http.DEFAULT_BACKOFF_S


def annotate_scene(rec: SceneRecord, endpoint: AnnotationEndpoint | None, *,
                   overwrite: bool = False, transport=None) -> SceneRecord:
    """Return a copy of ``rec`` with ``camera_caption`` filled in by ``endpoint``.

    Without an endpoint, or when the record already has a caption and
    ``overwrite`` is false, ``rec`` is returned as is.
    """
    if endpoint is None or (rec.camera_caption and not overwrite):
        return rec
    if not rec.image_ref:
        raise SceneValidationError("image_ref", f"scene {rec.scene_id!r} has no image reference to caption")
    data = _http.post_json(
        endpoint.url,
        {"image_ref": rec.image_ref},
        api_key=endpoint.api_key or os.environ.get(_http.API_KEY_ENV),
        timeout=endpoint.timeout,
        max_attempts=endpoint.max_attempts,
        backoff=endpoint.backoff,
        transport=transport,
    )
    caption = data.get("caption")
    if not isinstance(caption, str):
        raise _http.ProtocolError("annotation response has no string 'caption'")
    return dataclasses.replace(rec, camera_caption=caption)

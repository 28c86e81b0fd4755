"""Gaze stream parsing, validation and spatial accumulation.

Coordinates are image-space pixels (origin top-left, y down). A sample is
in bounds when ``0 <= floor(x) < width`` and ``0 <= floor(y) < height``.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import IO, Iterable, Union

import numpy as np


class GazeError(ValueError):
    pass


class MalformedRecord(GazeError):
    def __init__(self, location: int, reason: str):
        super().__init__(f"malformed gaze record at {location}: {reason}")
        self.location = location
        self.reason = reason


class EmptyRecording(GazeError):
    pass


@dataclass(frozen=True, slots=True)
class GazeSample:
    t: float
    x: float
    y: float


@dataclass(frozen=True)
class GazeRecording:
    image_id: str
    samples: tuple[GazeSample, ...]
    sample_rate_hz: float = 1000.0

    def __post_init__(self):
        if not self.sample_rate_hz > 0:
            raise ValueError("sample_rate_hz must be positive")

    def __len__(self) -> int:
        return len(self.samples)

    @cached_property
    def _columns(self) -> np.ndarray:
        flat = np.fromiter((v for s in self.samples for v in (s.t, s.x, s.y)), np.float64, 3 * len(self.samples))
        flat.flags.writeable = False
        return flat.reshape(-1, 3)

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Read-only (t, x, y) columns, built once per recording."""
        arr = self._columns
        return arr[:, 0], arr[:, 1], arr[:, 2]


@dataclass(frozen=True)
class ValidationSummary:
    n_total: int
    n_in_bounds: int
    n_out_of_bounds: int
    monotone_time: bool

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class HeatmapGrid:
    width: int
    height: int
    cell_size: int
    counts: np.ndarray = field(repr=False)
    n_dropped: int = 0

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def c_max(self) -> int:
        return int(self.counts.max()) if self.counts.size else 0


def _parse_value(raw, location: int, key: str) -> float:
    if isinstance(raw, bool) or raw is None:
        raise MalformedRecord(location, f"field {key!r} is not numeric")
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise MalformedRecord(location, f"field {key!r} is not numeric: {raw!r}") from None
    if not math.isfinite(value):
        raise MalformedRecord(location, f"field {key!r} is not finite")
    return value


def _make_sample(t, x, y, location: int) -> GazeSample:
    t = _parse_value(t, location, "t")
    if t < 0:
        raise MalformedRecord(location, "negative timestamp")
    return GazeSample(t, _parse_value(x, location, "x"), _parse_value(y, location, "y"))


def _parse_csv(text: str) -> list[GazeSample]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        return []
    try:
        idx = [header.index(k) for k in ("t", "x", "y")]
    except ValueError:
        raise MalformedRecord(1, f"header must contain t,x,y; got {header}") from None
    samples = []
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise MalformedRecord(line, f"expected {len(header)} columns, got {len(row)}")
        samples.append(_make_sample(*(row[i].strip() for i in idx), location=line))
    return samples


def _parse_json(text: str) -> list[GazeSample]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedRecord(exc.pos, exc.msg) from None
    if not isinstance(doc, list):
        raise MalformedRecord(0, "top-level value must be an array")
    samples = []
    for i, obj in enumerate(doc):
        if not isinstance(obj, dict) or not {"t", "x", "y"} <= obj.keys():
            raise MalformedRecord(i, "expected object with keys t, x, y")
        samples.append(_make_sample(obj["t"], obj["x"], obj["y"], location=i))
    return samples


def parse_gaze(
    stream: Union[bytes, str, IO],
    format: str = "csv",
    image_id: str = "",
    sample_rate_hz: float = 1000.0,
) -> GazeRecording:
    """Parse a gaze file into a recording, keeping samples in file order.

    ``MalformedRecord.location`` is the 1-based line for csv and the array
    index (or character offset for syntax errors) for json.
    """
    if hasattr(stream, "read"):
        stream = stream.read()
    text = stream.decode("utf-8") if isinstance(stream, bytes) else stream
    if format == "csv":
        samples = _parse_csv(text)
    elif format == "json":
        samples = _parse_json(text)
    else:
        raise ValueError(f"unknown gaze format {format!r}")
    if not samples:
        raise EmptyRecording(f"no gaze samples for {image_id or 'recording'}")
    return GazeRecording(image_id=image_id, samples=tuple(samples), sample_rate_hz=sample_rate_hz)


def serialize_gaze(recording: GazeRecording, format: str = "json") -> str:
    if format == "json":
        return json.dumps([asdict(s) for s in recording.samples])
    if format == "csv":
        buf = io.StringIO()
        buf.write("t,x,y\n")
        for s in recording.samples:
            buf.write(f"{s.t!r},{s.x!r},{s.y!r}\n")
        return buf.getvalue()
    raise ValueError(f"unknown gaze format {format!r}")


def _in_bounds_mask(x: np.ndarray, y: np.ndarray, width: int, height: int):
    fx, fy = np.floor(x), np.floor(y)
    mask = (fx >= 0) & (fx < width) & (fy >= 0) & (fy < height)
    return mask, fx, fy


def validate_recording(r: GazeRecording, width: int, height: int) -> ValidationSummary:
    if width <= 0 or height <= 0:
        raise ValueError("width and height must be positive")
    t, x, y = r.as_arrays()
    mask, _, _ = _in_bounds_mask(x, y, width, height)
    n_in = int(mask.sum())
    return ValidationSummary(
        n_total=len(r.samples),
        n_in_bounds=n_in,
        n_out_of_bounds=len(r.samples) - n_in,
        monotone_time=bool(np.all(np.diff(t) >= 0)),
    )


def grid_shape(width: int, height: int, cell_size: int) -> tuple[int, int]:
    return -(-height // cell_size), -(-width // cell_size)


def accumulate_heatmap(
    r: Union[GazeRecording, Iterable[GazeSample]], width: int, height: int, cell_size: int = 1
) -> HeatmapGrid:
    """Count in-bounds samples per ``cell_size`` square cell.

    Out-of-bounds samples are dropped and reported in ``n_dropped``.
    """
    if width <= 0 or height <= 0:
        raise ValueError("width and height must be positive")
    if cell_size < 1 or int(cell_size) != cell_size:
        raise ValueError("cell_size must be an integer >= 1")
    cell_size = int(cell_size)
    if not isinstance(r, GazeRecording):
        r = GazeRecording(image_id="", samples=tuple(r))
    _, x, y = r.as_arrays()
    mask, fx, fy = _in_bounds_mask(x, y, width, height)
    rows = (fy[mask] // cell_size).astype(np.intp)
    cols = (fx[mask] // cell_size).astype(np.intp)
    shape = grid_shape(width, height, cell_size)
    flat = np.bincount(rows * shape[1] + cols, minlength=shape[0] * shape[1])
    counts = flat.astype(np.int64).reshape(shape)
    return HeatmapGrid(width, height, cell_size, counts, n_dropped=int((~mask).sum()))

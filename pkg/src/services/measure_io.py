"""
Text formats for measures, point patterns and allocations, plus atomic
file writes.

All formats are line based and parsed strictly: anything unexpected raises
MalformedFileError with the offending line number.
"""

import json
import logging
import os
import tempfile
from pathlib import Path
from typing import List, Optional, Tuple, Union

from pydantic import BaseModel, ValidationError

from errors import MalformedFileError
from models import (
    AllocationCase,
    AllocationEntry,
    AllocationMap,
    Atom,
    Measure,
    PointPattern,
    TargetKind,
    TorusGeometry,
)
from services.torus import torus_distance

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MEASURE_MAGIC = "measure v1"
POINTS_MAGIC = "points v1"
ALLOC_MAGIC = "alloc v1"


def format_float(x: float) -> str:
    return format(x, ".17g")


def atomic_write_text(path: PathLike, text: str) -> None:
    """Write text to path through a temp file in the same directory and os.replace."""
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    directory.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    logger.debug(f"Wrote {path}")


def write_json(path: PathLike, model: BaseModel) -> None:
    atomic_write_text(path, model.model_dump_json(indent=2) + "\n")


# ---------------------------------------------------------------------------
# Parsing helpers
# ---------------------------------------------------------------------------

class _Lines:
    """Cursor over the non-empty lines of a document."""

    def __init__(self, text: str):
        self.rows: List[Tuple[int, str]] = [
            (number, line.strip()) for number, line in enumerate(text.splitlines(), start=1) if line.strip()
        ]
        self.pos = 0

    def next(self, what: str) -> Tuple[int, str]:
        if self.pos >= len(self.rows):
            raise MalformedFileError(f"unexpected end of file, expected {what}")
        row = self.rows[self.pos]
        self.pos += 1
        return row

    def peek(self) -> Optional[Tuple[int, str]]:
        return self.rows[self.pos] if self.pos < len(self.rows) else None

    def expect_end(self) -> None:
        if self.pos < len(self.rows):
            number, line = self.rows[self.pos]
            raise MalformedFileError(f"line {number}: trailing content {line!r}")


def _int(token: str, number: int, what: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise MalformedFileError(f"line {number}: {what} must be an integer, got {token!r}")


def _float(token: str, number: int, what: str) -> float:
    try:
        return float(token)
    except ValueError:
        raise MalformedFileError(f"line {number}: {what} must be a number, got {token!r}")


def _magic(lines: _Lines, magic: str) -> None:
    number, line = lines.next(f"'{magic}'")
    if line != magic:
        raise MalformedFileError(f"line {number}: expected {magic!r}, got {line!r}")


def _geometry(d: int, L: float, n: int, number: int) -> TorusGeometry:
    try:
        return TorusGeometry(d=d, L=L, n=n)
    except ValidationError as e:
        raise MalformedFileError(f"line {number}: invalid geometry: {e.errors()[0]['msg']}")


def _counted_header(lines: _Lines, keyword: str) -> int:
    number, line = lines.next(f"'{keyword} <count>'")
    tokens = line.split()
    if len(tokens) != 2 or tokens[0] != keyword:
        raise MalformedFileError(f"line {number}: expected '{keyword} <count>', got {line!r}")
    count = _int(tokens[1], number, f"{keyword} count")
    if count < 0:
        raise MalformedFileError(f"line {number}: negative {keyword} count")
    return count


# ---------------------------------------------------------------------------
# measure v1
# ---------------------------------------------------------------------------

def serialize_measure(mu: Measure) -> str:
    """Canonical text form; re-parsing yields a bit-identical measure."""
    g = mu.geometry
    out = [MEASURE_MAGIC, f"{g.d} {format_float(g.L)} {g.n}", f"cells {g.cell_count}"]
    values = [format_float(m) for m in mu.cell_mass]
    for start in range(0, len(values), g.n):
        out.append(" ".join(values[start:start + g.n]))
    out.append(f"atoms {len(mu.atoms)}")
    for atom in mu.atoms:
        out.append(" ".join([format_float(x) for x in atom.position] + [format_float(atom.mass)]))
    return "\n".join(out) + "\n"


def parse_measure(text: str) -> Measure:
    lines = _Lines(text)
    _magic(lines, MEASURE_MAGIC)

    number, line = lines.next("'d L n'")
    tokens = line.split()
    if len(tokens) != 3:
        raise MalformedFileError(f"line {number}: expected 'd L n', got {line!r}")
    geometry = _geometry(
        _int(tokens[0], number, "d"), _float(tokens[1], number, "L"), _int(tokens[2], number, "n"), number
    )

    count = _counted_header(lines, "cells")
    if count != geometry.cell_count:
        raise MalformedFileError(f"cells count {count} does not match n^d = {geometry.cell_count}")
    cells: List[float] = []
    while len(cells) < count:
        number, line = lines.next("cell masses")
        if line.startswith("atoms"):
            raise MalformedFileError(f"line {number}: expected {count} cell masses, found {len(cells)}")
        cells.extend(_float(tok, number, "cell mass") for tok in line.split())
    if len(cells) != count:
        raise MalformedFileError(f"line {number}: expected {count} cell masses, found {len(cells)}")

    atom_count = _counted_header(lines, "atoms")
    atoms = []
    for _ in range(atom_count):
        number, line = lines.next("atom line")
        tokens = line.split()
        if len(tokens) != geometry.d + 1:
            raise MalformedFileError(f"line {number}: atom needs {geometry.d} coordinates and a mass")
        values = [_float(tok, number, "atom field") for tok in tokens]
        try:
            atoms.append(Atom(position=tuple(values[:-1]), mass=values[-1]))
        except ValidationError as e:
            raise MalformedFileError(f"line {number}: invalid atom: {e.errors()[0]['msg']}")
    lines.expect_end()

    try:
        return Measure(geometry=geometry, cell_mass=tuple(cells), atoms=tuple(atoms))
    except ValidationError as e:
        raise MalformedFileError(f"invalid measure: {e.errors()[0]['msg']}")


def read_measure(path: PathLike) -> Measure:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise MalformedFileError(f"cannot read measure file {path}: {e}")
    return parse_measure(text)


def write_measure(path: PathLike, mu: Measure) -> None:
    atomic_write_text(path, serialize_measure(mu))


# ---------------------------------------------------------------------------
# points v1
# ---------------------------------------------------------------------------

def serialize_points(pattern: PointPattern) -> str:
    g = pattern.geometry
    out = [POINTS_MAGIC, f"{g.d} {format_float(g.L)} {len(pattern)}"]
    out.extend(" ".join(format_float(x) for x in p) for p in pattern.points)
    return "\n".join(out) + "\n"


def parse_points(text: str, n: int) -> PointPattern:
    """Parse a points file; the grid resolution n is not part of the format."""
    lines = _Lines(text)
    _magic(lines, POINTS_MAGIC)
    number, line = lines.next("'d L count'")
    tokens = line.split()
    if len(tokens) != 3:
        raise MalformedFileError(f"line {number}: expected 'd L count', got {line!r}")
    geometry = _geometry(_int(tokens[0], number, "d"), _float(tokens[1], number, "L"), n, number)
    count = _int(tokens[2], number, "count")
    points = []
    for _ in range(count):
        number, line = lines.next("point line")
        tokens = line.split()
        if len(tokens) != geometry.d:
            raise MalformedFileError(f"line {number}: point needs {geometry.d} coordinates")
        points.append(tuple(_float(tok, number, "coordinate") for tok in tokens))
    lines.expect_end()

    separation = float("inf")
    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            separation = min(separation, torus_distance(points[i], points[j], geometry.L))
    return PointPattern(geometry=geometry, points=tuple(points), separation=separation)


def write_points(path: PathLike, pattern: PointPattern) -> None:
    atomic_write_text(path, serialize_points(pattern))


# ---------------------------------------------------------------------------
# alloc v1
# ---------------------------------------------------------------------------

def serialize_allocation(alloc: AllocationMap) -> str:
    g = alloc.geometry
    rows = [(src, e) for src, row in enumerate(alloc.entries) for e in row]
    out = [
        ALLOC_MAGIC,
        f"{g.d} {format_float(g.L)} {g.n} {alloc.case.value} {format_float(alloc.monge_defect)} {len(rows)}",
    ]
    out.extend(f"{src} {e.kind.value} {e.target} {format_float(e.mass)}" for src, e in rows)
    return "\n".join(out) + "\n"


def parse_allocation(text: str) -> AllocationMap:
    lines = _Lines(text)
    _magic(lines, ALLOC_MAGIC)
    number, line = lines.next("allocation header")
    tokens = line.split()
    if len(tokens) != 6:
        raise MalformedFileError(f"line {number}: expected 'd L n case defect count', got {line!r}")
    geometry = _geometry(
        _int(tokens[0], number, "d"), _float(tokens[1], number, "L"), _int(tokens[2], number, "n"), number
    )
    try:
        case = AllocationCase(tokens[3])
    except ValueError:
        raise MalformedFileError(f"line {number}: unknown allocation case {tokens[3]!r}")
    defect = _float(tokens[4], number, "defect")
    count = _int(tokens[5], number, "count")

    rows: List[List[AllocationEntry]] = [[] for _ in range(geometry.cell_count)]
    for _ in range(count):
        number, line = lines.next("allocation line")
        tokens = line.split()
        if len(tokens) != 4:
            raise MalformedFileError(f"line {number}: expected 'src_cell target_kind target_id mass'")
        src = _int(tokens[0], number, "src_cell")
        if not 0 <= src < geometry.cell_count:
            raise MalformedFileError(f"line {number}: source cell {src} out of range")
        try:
            entry = AllocationEntry(
                kind=TargetKind(tokens[1]),
                target=_int(tokens[2], number, "target_id"),
                mass=_float(tokens[3], number, "mass"),
            )
        except (ValueError, ValidationError):
            raise MalformedFileError(f"line {number}: invalid allocation entry {line!r}")
        rows[src].append(entry)
    lines.expect_end()
    return AllocationMap(
        geometry=geometry,
        entries=tuple(tuple(r) for r in rows),
        monge_defect=defect,
        case=case,
    )


def write_allocation(path: PathLike, alloc: AllocationMap) -> None:
    atomic_write_text(path, serialize_allocation(alloc))


def load_json(path: PathLike, model_cls):
    """Load and validate a JSON document into a pydantic model."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return model_cls.model_validate(data)
    except (OSError, ValueError, ValidationError) as e:
        raise MalformedFileError(f"cannot load {model_cls.__name__} from {path}: {e}")

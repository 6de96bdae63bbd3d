"""
Core domain models for factorlab.
"""

import math
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Vector = Tuple[float, ...]
GridVector = Tuple[int, ...]


class TorusGeometry(BaseModel):
    """Flat torus [0, L)^d cut into n^d square cells."""
    model_config = ConfigDict(frozen=True)

    d: int = Field(..., ge=1, le=3, description="Dimension")
    L: float = Field(..., gt=0, description="Side length per axis")
    n: int = Field(..., ge=1, description="Grid resolution per axis")

    @model_validator(mode="after")
    def _check_cell_width(self) -> "TorusGeometry":
        if (self.L / self.n) * self.n != self.L:
            raise ValueError(f"cell width L/n does not reproduce L exactly (L={self.L!r}, n={self.n})")
        return self

    @property
    def h(self) -> float:
        """Cell width."""
        return self.L / self.n

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def cell_count(self) -> int:
        return self.n ** self.d

    def with_resolution(self, n: int) -> "TorusGeometry":
        return TorusGeometry(d=self.d, L=self.L, n=n)

    def with_dimension(self, d: int) -> "TorusGeometry":
        return TorusGeometry(d=d, L=self.L, n=self.n)

    def cell_index(self, multi_index: GridVector) -> int:
        """Row-major flat index of a cell."""
        return int(np.ravel_multi_index(tuple(int(k) % self.n for k in multi_index), self.shape))

    def cell_multi_index(self, index: int) -> GridVector:
        return tuple(int(k) for k in np.unravel_index(index, self.shape))

    def cell_center(self, index: int) -> Vector:
        return tuple((k + 0.5) * self.h for k in self.cell_multi_index(index))


class Atom(BaseModel):
    """Point mass of a measure."""
    model_config = ConfigDict(frozen=True)

    position: Vector
    mass: float = Field(..., gt=0, allow_inf_nan=False)


class Measure(BaseModel):
    """
    Finite measure on the torus: cell masses in row-major order plus atoms.

    Atoms are kept in canonical (lexicographic) order, so two measures compare
    equal iff geometry and every mass agree exactly.
    """
    model_config = ConfigDict(frozen=True)

    geometry: TorusGeometry
    cell_mass: Tuple[float, ...]
    atoms: Tuple[Atom, ...] = ()
    approximate: bool = Field(False, description="Set when produced by a sub-grid (multilinear) shift")

    @field_validator("atoms")
    @classmethod
    def _sort_atoms(cls, atoms: Tuple[Atom, ...]) -> Tuple[Atom, ...]:
        return tuple(sorted(atoms, key=lambda a: (a.position, a.mass)))

    @model_validator(mode="after")
    def _check_masses(self) -> "Measure":
        geometry = self.geometry
        if len(self.cell_mass) != geometry.cell_count:
            raise ValueError(f"expected {geometry.cell_count} cell masses, got {len(self.cell_mass)}")
        if self.cell_mass and not min(self.cell_mass) >= 0.0:
            raise ValueError("cell masses must be nonnegative")
        if not all(math.isfinite(m) for m in self.cell_mass):
            raise ValueError("cell masses must be finite")
        for atom in self.atoms:
            if len(atom.position) != geometry.d:
                raise ValueError(f"atom position {atom.position} has wrong dimension")
            if not all(0.0 <= x < geometry.L for x in atom.position):
                raise ValueError(f"atom position {atom.position} outside [0, L)^d")
        return self

    @classmethod
    def from_grid(cls, geometry: TorusGeometry, grid: np.ndarray, atoms=()) -> "Measure":
        """Build a measure from an array of cell masses shaped like the grid."""
        values = np.asarray(grid, dtype=float).reshape(-1)
        return cls(geometry=geometry, cell_mass=tuple(values.tolist()), atoms=tuple(atoms))

    @classmethod
    def zero(cls, geometry: TorusGeometry) -> "Measure":
        return cls(geometry=geometry, cell_mass=(0.0,) * geometry.cell_count)

    def grid(self) -> np.ndarray:
        """Cell masses as an array of shape (n,)*d; axis 0 is the first coordinate."""
        return np.asarray(self.cell_mass, dtype=float).reshape(self.geometry.shape)

    @property
    def is_diffuse(self) -> bool:
        return not self.atoms


class PointPattern(BaseModel):
    """Finite point set on the torus with a certified minimum separation."""
    model_config = ConfigDict(frozen=True)

    geometry: TorusGeometry
    points: Tuple[Vector, ...]
    separation: float = Field(..., description="Minimum pairwise torus distance (inf for fewer than two points)")

    @field_validator("points")
    @classmethod
    def _sort_points(cls, points: Tuple[Vector, ...]) -> Tuple[Vector, ...]:
        return tuple(sorted(points))

    def __len__(self) -> int:
        return len(self.points)


class ProkhorovBracket(BaseModel):
    """Certified lower/upper bounds on a Prokhorov distance."""
    model_config = ConfigDict(frozen=True)

    lower: float = Field(..., ge=0)
    upper: float = Field(..., ge=0)
    witness_flow: Optional[Dict[str, float]] = None

    @model_validator(mode="after")
    def _ordered(self) -> "ProkhorovBracket":
        if self.lower > self.upper:
            raise ValueError(f"bracket lower {self.lower} exceeds upper {self.upper}")
        return self

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.lower + self.upper)

    @property
    def width(self) -> float:
        return self.upper - self.lower


class Shell(BaseModel):
    """Annulus 1/N <= |t| <= 2/N."""
    model_config = ConfigDict(frozen=True)

    N: int = Field(..., ge=1)

    @property
    def inner(self) -> float:
        return 1.0 / self.N

    @property
    def outer(self) -> float:
        return 2.0 / self.N


class SymmetryGroup(BaseModel):
    """Grid translation symmetries of a measure (or of a pair of measures)."""
    model_config = ConfigDict(frozen=True)

    geometry: TorusGeometry
    elements: Tuple[GridVector, ...] = Field(..., description="All symmetry shifts as grid index vectors")
    generators: Tuple[Vector, ...]
    generator_indices: Tuple[GridVector, ...]
    invariant_basis: Tuple[Vector, ...] = ()
    gap: float = Field(..., description="Least norm of a nonzero symmetry; inf if none, 0 if V is nontrivial")
    tolerance: float
    closed: bool = True

    @property
    def order(self) -> int:
        return len(self.elements)

    @property
    def v_dimension(self) -> int:
        return len(self.invariant_basis)


class ExtractionTrace(BaseModel):
    """Everything the extraction pipeline computed on the way to its point pattern."""
    N: int
    epsilon: float
    M: int
    shell_distance: float
    center: Measure
    radius: float
    resolution: int = Field(..., description="Quantization resolution r")
    step: float = Field(..., description="Quantization mass step q")
    center_shift: GridVector
    occupancy: Tuple[GridVector, ...]
    clusters: Tuple[Tuple[GridVector, ...], ...]
    representatives: PointPattern
    attempts: int = 1


class TargetKind(str, Enum):
    """Kind of allocation target."""
    CELL = "cell"
    ATOM = "atom"
    POINT = "point"


class AllocationCase(str, Enum):
    """Case of the balancing construction that produced an allocation."""
    IDENTITY = "identity"
    TESSELLATION = "tessellation"
    LOCAL = "local"
    AUXILIARY = "auxiliary"
    PROJECTED = "projected"


class AllocationEntry(BaseModel):
    """Mass sent from one source cell to one target."""
    model_config = ConfigDict(frozen=True)

    kind: TargetKind
    target: int
    mass: float = Field(..., ge=0)


class AllocationMap(BaseModel):
    """
    Allocation at grid resolution: for each source cell, the ordered list of
    (target, mass) pairs it sends its mass to.
    """
    model_config = ConfigDict(frozen=True)

    geometry: TorusGeometry
    entries: Tuple[Tuple[AllocationEntry, ...], ...]
    monge_defect: float = Field(0.0, ge=0, le=1)
    case: AllocationCase = AllocationCase.IDENTITY
    pattern: Optional[PointPattern] = None
    chart_allocation: Optional["AllocationMap"] = None
    atom_entries: Tuple[Tuple[AllocationEntry, ...], ...] = Field(
        (), description="Rows for atom sources, in canonical atom order (tessellations of atomic measures)"
    )

    @classmethod
    def identity(cls, phi: Measure) -> "AllocationMap":
        entries = tuple(
            (AllocationEntry(kind=TargetKind.CELL, target=i, mass=m),) if m > 0 else ()
            for i, m in enumerate(phi.cell_mass)
        )
        return cls(geometry=phi.geometry, entries=entries, monge_defect=0.0, case=AllocationCase.IDENTITY)

    @staticmethod
    def defect_of(entries) -> float:
        """Fraction of the total mass sitting in source cells with more than one target."""
        outgoing = [math.fsum(e.mass for e in row) for row in entries]
        total = math.fsum(outgoing)
        if total <= 0:
            return 0.0
        split = math.fsum(m for m, row in zip(outgoing, entries) if len({(e.kind, e.target) for e in row}) > 1)
        return min(1.0, split / total)

    def incoming(self) -> Dict[Tuple[TargetKind, int], float]:
        """Total mass received by each target."""
        pieces: Dict[Tuple[TargetKind, int], List[float]] = {}
        for row in self.entries + self.atom_entries:
            for entry in row:
                pieces.setdefault((entry.kind, entry.target), []).append(entry.mass)
        return {key: math.fsum(values) for key, values in pieces.items()}

    def outgoing(self) -> List[float]:
        """Mass sent by each source cell."""
        return [math.fsum(e.mass for e in row) for row in self.entries]

    def targets_of(self, source: int) -> Dict[Tuple[TargetKind, int], float]:
        return {(e.kind, e.target): e.mass for e in self.entries[source]}


class LinearChart(BaseModel):
    """Orthonormal basis of W, the rows of the linear map L: W -> R^k."""
    model_config = ConfigDict(frozen=True)

    basis: Tuple[Vector, ...]
    ambient_dimension: int

    @property
    def dimension(self) -> int:
        return len(self.basis)

    def matrix(self) -> np.ndarray:
        if not self.basis:
            return np.zeros((0, self.ambient_dimension))
        return np.asarray(self.basis, dtype=float)

    def to_chart(self, x) -> np.ndarray:
        return self.matrix() @ np.asarray(x, dtype=float)

    def from_chart(self, y) -> np.ndarray:
        return self.matrix().T @ np.asarray(y, dtype=float)

    def orthonormality_residual(self) -> float:
        if not self.basis:
            return 0.0
        E = self.matrix()
        return float(np.max(np.abs(E @ E.T - np.eye(self.dimension))))


class ScenarioKind(str, Enum):
    """Scenario generators."""
    POISSON = "poisson"
    DIFFUSE = "diffuse"
    INVARIANT_DIRECTION = "invariant_direction"
    LATTICE = "lattice"


class PlantedTruth(BaseModel):
    """Ground truth planted by a generator."""
    symmetry_generators: Optional[List[GridVector]] = None
    v_dimension: Optional[int] = None
    diffuse: Optional[bool] = None


class Scenario(BaseModel):
    """Reproducible measure recipe."""
    seed: int = Field(..., ge=0, lt=2 ** 64)
    kind: ScenarioKind
    d: int = 2
    L: float = 1.0
    n: int = 16
    parameters: Dict[str, Any] = Field(default_factory=dict)
    expected: Optional[PlantedTruth] = None

    @property
    def geometry(self) -> TorusGeometry:
        return TorusGeometry(d=self.d, L=self.L, n=self.n)


class ScenarioManifest(BaseModel):
    """List of scenarios shipped as a corpus."""
    name: str
    scenarios: List[Scenario]


class CheckRecord(BaseModel):
    """One verification check."""
    check_id: str
    seed: int
    passed: bool
    value: float
    tolerance: float
    detail: str = ""


class VerificationReport(BaseModel):
    """Outcome of a verification campaign."""
    campaign: str
    records: List[CheckRecord] = Field(default_factory=list)
    runtime_s: float = 0.0

    @property
    def passed_count(self) -> int:
        return sum(1 for r in self.records if r.passed)

    @property
    def failed_count(self) -> int:
        return sum(1 for r in self.records if not r.passed)

    @property
    def exit_code(self) -> int:
        return 0 if self.failed_count == 0 else 1

    def sorted_records(self) -> List[CheckRecord]:
        return sorted(self.records, key=lambda r: (r.check_id, r.seed))

    def worst(self) -> Optional[CheckRecord]:
        if not self.records:
            return None
        return max(self.records, key=lambda r: (not r.passed, r.value))


AllocationMap.model_rebuild()

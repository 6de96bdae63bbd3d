"""
Scenario generators with planted ground truth, and scenario manifests.

All randomness comes from numpy's PCG64 bit generator seeded with the
scenario seed, so every measure is reproducible bit for bit.
"""

import logging
import math
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import fft

from config import settings
from errors import BadLatticeError, UsageError
from models import (
    Atom,
    GridVector,
    Measure,
    PlantedTruth,
    Scenario,
    ScenarioKind,
    ScenarioManifest,
    TorusGeometry,
    Vector,
)
from services import torus
from services.measure_io import load_json, write_json
from services.symmetry import invariant_generators, reduce_generators, span_subgroup

logger = logging.getLogger(__name__)

# spectral decay offset of the smoothing filter
SPECTRAL_TAU = 3.0


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def gen_poisson(geometry: TorusGeometry, intensity: float, seed: int, mass: float = 1.0) -> Measure:
    """
    Poisson point pattern as an atomic measure; atoms sit on the 2^-bits * L sub-grid.

    Coincident draws are merged into one atom of the summed mass.
    """
    if not intensity > 0:
        raise UsageError(f"intensity must be positive, got {intensity}")
    rng = make_rng(seed)
    count = int(rng.poisson(intensity * geometry.L ** geometry.d))
    T = torus.tick_count()
    ticks = rng.integers(0, T, size=(count, geometry.d))
    if count:
        unique, multiplicity = np.unique(ticks, axis=0, return_counts=True)
    else:
        unique, multiplicity = ticks, np.zeros(0, dtype=np.int64)
    atoms = [
        Atom(position=tuple(torus.position_from_ticks(int(t), geometry.L) for t in row), mass=float(k) * mass)
        for row, k in zip(unique, multiplicity)
    ]
    return Measure(geometry=geometry, cell_mass=(0.0,) * geometry.cell_count, atoms=tuple(atoms))


def _wavenumbers(n: int) -> np.ndarray:
    return fft.fftfreq(n, d=1.0 / n)


def smooth_field(shape: Tuple[int, ...], smoothness: float, rng: np.random.Generator) -> np.ndarray:
    """White noise filtered by the power law (4 pi^2 |k|^2 + tau^2)^(-smoothness/2)."""
    noise = rng.standard_normal(shape)
    k2 = np.zeros(shape)
    for axis, n in enumerate(shape):
        k = _wavenumbers(n).reshape([-1 if a == axis else 1 for a in range(len(shape))])
        k2 = k2 + k * k
    amplitude = (4.0 * math.pi ** 2 * k2 + SPECTRAL_TAU ** 2) ** (-smoothness / 2.0)
    return np.real(fft.ifftn(fft.fftn(noise) * amplitude))


def _normalized(values: np.ndarray, total: float) -> np.ndarray:
    s = math.fsum(values.reshape(-1).tolist())
    return values * (total / s)


def gen_diffuse_field(geometry: TorusGeometry, smoothness: float, seed: int, total: float = 1.0) -> Measure:
    """Squared smoothed noise field, normalized to the requested total; no atoms."""
    if smoothness < 0:
        raise UsageError(f"smoothness must be >= 0, got {smoothness}")
    field = smooth_field(geometry.shape, smoothness, make_rng(seed))
    return Measure.from_grid(geometry, _normalized(field * field, total))


def gen_with_invariant_direction(
    geometry: TorusGeometry,
    axes: Sequence[int],
    seed: int,
    smoothness: float = 2.0,
    total: float = 1.0,
) -> Measure:
    """Measure constant along the given axes: a diffuse profile on the other axes times uniform."""
    axes = sorted(set(int(a) for a in axes))
    if not axes or any(a < 0 or a >= geometry.d for a in axes):
        raise UsageError(f"axis set {axes} must be a nonempty subset of 0..{geometry.d - 1}")
    if len(axes) == geometry.d:
        return Measure.from_grid(geometry, np.full(geometry.shape, total / geometry.cell_count))

    rest = [a for a in range(geometry.d) if a not in axes]
    profile = gen_diffuse_field(geometry.with_dimension(len(rest)), smoothness, seed, total).grid()
    profile = profile.reshape([geometry.n if a in rest else 1 for a in range(geometry.d)])
    grid = np.broadcast_to(profile / geometry.n ** len(axes), geometry.shape)
    return Measure.from_grid(geometry, grid)


def lattice_indices(geometry: TorusGeometry, generators: Iterable[Vector]) -> List[GridVector]:
    """Grid index vectors of lattice generators given in length units."""
    indices = []
    for g in generators:
        if len(g) != geometry.d:
            raise BadLatticeError(f"generator {tuple(g)} has dimension {len(g)}, torus has {geometry.d}")
        k = []
        for x in g:
            steps = x / geometry.h
            if abs(steps - round(steps)) > 1e-9:
                raise BadLatticeError(f"generator {tuple(g)} is not a multiple of the cell width {geometry.h}")
            k.append(int(round(steps)) % geometry.n)
        indices.append(tuple(k))
    return indices


def gen_lattice_symmetric(
    geometry: TorusGeometry,
    generators: Iterable[Vector],
    seed: int,
    smoothness: float = 2.0,
    total: float = 1.0,
) -> Measure:
    """
    Generic diffuse measure averaged over the lattice spanned by the generators.

    Raises:
        BadLatticeError: if a generator is off the grid or the lattice contains
            a primitive grid direction (that would plant an invariant direction)
    """
    indices = lattice_indices(geometry, generators)
    elements = span_subgroup(indices, geometry.n, geometry.d)
    directions = invariant_generators(elements, geometry)
    if directions:
        raise BadLatticeError(f"lattice contains the primitive direction {directions[0]}")
    group = sorted(elements)

    seed_field = gen_diffuse_field(geometry, smoothness, seed, total).grid()
    axes = tuple(range(geometry.d))
    symmetrized = sum(np.roll(seed_field, shift=k, axis=axes) for k in group) / len(group)
    return Measure.from_grid(geometry, symmetrized)


def planted_truth(scenario: Scenario) -> PlantedTruth:
    """Ground truth a scenario plants by construction."""
    geometry = scenario.geometry
    params = scenario.parameters
    if scenario.kind == ScenarioKind.LATTICE:
        indices = lattice_indices(geometry, params.get("generators", []))
        group = span_subgroup(indices, geometry.n, geometry.d)
        return PlantedTruth(symmetry_generators=reduce_generators(group, geometry), v_dimension=0, diffuse=True)
    if scenario.kind == ScenarioKind.INVARIANT_DIRECTION:
        return PlantedTruth(v_dimension=len(set(params.get("axes", [0]))), diffuse=True)
    if scenario.kind == ScenarioKind.DIFFUSE:
        return PlantedTruth(symmetry_generators=[], v_dimension=0, diffuse=True)
    return PlantedTruth(v_dimension=0, diffuse=False)


def generate(scenario: Scenario) -> Measure:
    """Build the measure a scenario describes."""
    geometry = scenario.geometry
    params = scenario.parameters
    total = float(params.get("total", 1.0))
    smoothness = float(params.get("smoothness", 2.0))
    if scenario.kind == ScenarioKind.POISSON:
        return gen_poisson(geometry, float(params.get("intensity", 8.0)), scenario.seed, float(params.get("mass", 1.0)))
    if scenario.kind == ScenarioKind.DIFFUSE:
        return gen_diffuse_field(geometry, smoothness, scenario.seed, total)
    if scenario.kind == ScenarioKind.INVARIANT_DIRECTION:
        return gen_with_invariant_direction(geometry, params.get("axes", [0]), scenario.seed, smoothness, total)
    if scenario.kind == ScenarioKind.LATTICE:
        generators = [tuple(g) for g in params.get("generators", [])]
        return gen_lattice_symmetric(geometry, generators, scenario.seed, smoothness, total)
    raise UsageError(f"unknown scenario kind {scenario.kind}")


def load_manifest(path: Union[str, Path]) -> ScenarioManifest:
    return load_json(path, ScenarioManifest)


def save_manifest(path: Union[str, Path], manifest: ScenarioManifest) -> None:
    write_json(path, manifest)


def default_manifest_path(corpus_dir: Optional[str] = None) -> Path:
    return Path(corpus_dir or settings.corpus_dir) / "manifest.json"

"""
Factor point process extraction pipeline.

From a measure with no invariant direction to a nonempty, uniformly
separated point pattern that moves with the measure:

    shell index N -> epsilon = 1/M -> canonical quantized center of radius eps/3
    -> occupancy set U -> clusters of U -> one representative per cluster

Every step is a function of the translation orbit of the input, so
extract(translate(mu, t)) = extract(mu) + t for grid shifts t.
"""

import logging
import math
from fractions import Fraction
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.cluster.hierarchy import DisjointSet

from config import settings
from errors import (
    EmptyOccupancyError,
    EpsilonNotFoundError,
    KeyPropertyViolationError,
    NoCandidateError,
    ShellUnresolvableError,
)
from models import ExtractionTrace, GridVector, Measure, PointPattern, Shell, TorusGeometry
from services import torus
from services.cell_flow import MARGIN, CellFlow, largest_level, shifted_lower_bounds, unit_grid
from services.prokhorov import is_resolvable, shell_scan
from services.symmetry import shell_index, symmetry_group

logger = logging.getLogger(__name__)


class CenterChoice(NamedTuple):
    center: Measure
    radius: float
    shift: GridVector


class QuantizationPlan(NamedTuple):
    resolution: int
    step: float


def epsilon_index(shell_distance: float, m_max: int) -> int:
    """Smallest M with 1/M < shell_distance."""
    if shell_distance <= 0:
        raise EpsilonNotFoundError("shell distance is 0: some shell translate coincides with the measure")
    M = math.floor(1.0 / shell_distance) + 1
    while M > 1 and Fraction(1, M - 1) < Fraction(shell_distance):
        M -= 1
    while Fraction(1, M) >= Fraction(shell_distance):
        M += 1
    if M > m_max:
        raise EpsilonNotFoundError(
            f"shell distance {shell_distance!r} is not above 1/m_max = 1/{m_max}; "
            f"the grid is too coarse or the measure nearly symmetric"
        )
    return M


def select_epsilon(mu: Measure, shell: Shell, m_max: Optional[int] = None) -> float:
    """Largest epsilon = 1/M (M <= m_max) below the shell distance of mu."""
    m_max = m_max or settings.m_max
    distance = shell_scan(mu, shell).distance
    return 1.0 / epsilon_index(distance, m_max)


def resolvable_shell(geometry: TorusGeometry, shell: Shell) -> Shell:
    """Smallest N' >= N whose shell contains a grid vector; larger N keeps the ball free of H."""
    N = shell.N
    while not is_resolvable(geometry, Shell(N=N)):
        if 1.0 / N < geometry.h / 2:
            raise ShellUnresolvableError(f"no shell from N={shell.N} contains a grid vector of spacing {geometry.h}")
        N += 1
    if N != shell.N:
        logger.info(f"Shell N={shell.N} holds no grid vector; using N={N}")
    return Shell(N=N)


def quantization_plan(geometry: TorusGeometry, epsilon: float, total: float, attempt: int = 0) -> QuantizationPlan:
    """
    Resolution r: smallest power of two with L/r <= eps/6 (capped at n, and n
    when r does not divide n); step q = eps * total / (6 n^d * safety).
    Each retry doubles r and halves q.
    """
    target = 6.0 * geometry.L / epsilon
    r = 1
    while r < target:
        r *= 2
    r = min(geometry.n, r * 2 ** attempt)
    if r < 2 or geometry.n % r:
        r = geometry.n
    q = epsilon * total / (6.0 * geometry.cell_count * settings.quantize_safety) / 2 ** attempt
    return QuantizationPlan(resolution=r, step=q)


class OrbitQuantizer:
    """
    Quantization codes of every grid translate translate(mu, -k).

    Translates by multiples of the coarse cell are cyclic rolls of the coarse
    codes, so only the fine offsets inside one coarse cell are quantized.
    """

    def __init__(self, mu: Measure, plan: QuantizationPlan):
        self.mu = mu
        self.plan = plan
        self.geometry = mu.geometry
        self.factor = self.geometry.n // plan.resolution
        self.coarse = self.geometry.with_resolution(plan.resolution)
        self._offsets: Dict[GridVector, np.ndarray] = {}

    def offset_codes(self, offset: GridVector) -> np.ndarray:
        if offset not in self._offsets:
            shifted = torus.translate_by_index(self.mu, tuple(-x for x in offset))
            self._offsets[offset] = torus.quantize_codes(shifted, self.plan.resolution, self.plan.step)
        return self._offsets[offset]

    def split(self, k: Sequence[int]) -> Tuple[GridVector, GridVector]:
        """(fine offset, coarse roll) with codes(k) = np.roll(offset_codes(offset), roll)."""
        f = self.factor
        r = self.plan.resolution
        offset = tuple(int(x) % self.geometry.n % f for x in k)
        roll = tuple(-(int(x) % self.geometry.n // f) % r for x in k)
        return offset, roll

    def codes(self, k: Sequence[int]) -> np.ndarray:
        """Codes of quantize(translate(mu, -k))."""
        offset, roll = self.split(k)
        return np.roll(self.offset_codes(offset), shift=roll, axis=tuple(range(self.geometry.d)))

    def unit_grid(self, codes: np.ndarray) -> np.ndarray:
        """Cell masses of measure(codes) divided by their exact total."""
        grid = codes.astype(float) * self.plan.step
        total = math.fsum(grid.reshape(-1).tolist())
        return grid / total if total > 0 else grid

    def measure(self, codes: np.ndarray) -> Measure:
        return Measure.from_grid(self.coarse, codes.astype(float) * self.plan.step)


def _orbit(geometry: TorusGeometry) -> List[GridVector]:
    return torus.all_grid_vectors(geometry)


def _lex_less(a: np.ndarray, b: np.ndarray) -> bool:
    differ = np.flatnonzero(a != b)
    return bool(differ.size) and a[differ[0]] < b[differ[0]]


def canonical_center(
    mu: Measure,
    epsilon: float,
    shell: Optional[Shell] = None,
    plan: Optional[QuantizationPlan] = None,
    shell_distance: Optional[float] = None,
) -> CenterChoice:
    """
    Lexicographically smallest quantized translate of mu, with radius eps/3.

    The A_eps test (shell distance > eps) is translation-invariant, so it is
    evaluated once for the whole orbit.

    Raises:
        NoCandidateError: if mu does not pass the A_eps test
    """
    geometry = mu.geometry
    if shell_distance is None:
        if shell is None:
            shell = resolvable_shell(geometry, shell_index(symmetry_group(mu)))
        shell_distance = shell_scan(mu, shell).distance
    if not shell_distance > epsilon:
        raise NoCandidateError(f"no translate passes the A_eps test: shell distance {shell_distance!r} <= eps {epsilon!r}")
    plan = plan or quantization_plan(geometry, epsilon, torus.total_mass(mu))

    orbit = OrbitQuantizer(mu, plan)
    best_shift: Optional[GridVector] = None
    best_codes: Optional[np.ndarray] = None
    for k in _orbit(geometry):
        codes = orbit.codes(k)
        if best_codes is None or _lex_less(codes.reshape(-1), best_codes.reshape(-1)):
            best_shift, best_codes = k, codes
    logger.debug(f"Canonical center at shift {best_shift} (r={plan.resolution}, q={plan.step!r})")
    return CenterChoice(center=orbit.measure(best_codes), radius=epsilon / 3.0, shift=best_shift)


def occupancy_set(
    mu: Measure,
    center: Measure,
    radius: float,
    plan: Optional[QuantizationPlan] = None,
) -> List[GridVector]:
    """
    Grid vectors t whose quantized translate translate(mu, -t) lies in the open
    ball of the given radius around the center.

    Each fine offset gets one FFT pass bounding the deficit of all its coarse
    rolls; only rolls the bound cannot exclude reach a flow.

    Raises:
        EmptyOccupancyError: if no translate falls in the ball
    """
    geometry = mu.geometry
    if plan is None:
        plan = quantization_plan(geometry, 3.0 * radius, torus.total_mass(mu))
    orbit = OrbitQuantizer(mu, plan)
    if radius <= 0:
        raise EmptyOccupancyError(f"no translate within {radius!r} of the center")

    # d_P < radius iff f(K) < radius at the largest level strictly below radius
    K = largest_level(orbit.coarse, radius, strict=True)
    center_grid = unit_grid(center)
    screens: Dict[GridVector, Optional[np.ndarray]] = {}
    verdicts: Dict[bytes, bool] = {}
    screened_out = 0
    occupied = []
    for k in _orbit(geometry):
        codes = orbit.codes(k)
        fingerprint = codes.tobytes()
        if fingerprint not in verdicts:
            offset, roll = orbit.split(k)
            if radius <= 1.0 and offset not in screens:
                screens[offset] = shifted_lower_bounds(center_grid, orbit.unit_grid(orbit.offset_codes(offset)), K)
            screen = screens.get(offset)
            if radius > 1.0:
                verdicts[fingerprint] = True
            elif screen is not None and screen[roll] > radius + MARGIN:
                verdicts[fingerprint] = False
                screened_out += 1
            else:
                verdicts[fingerprint] = CellFlow(orbit.coarse, center_grid, orbit.unit_grid(codes)).below(K, radius)
        if verdicts[fingerprint]:
            occupied.append(k)
    if not occupied:
        raise EmptyOccupancyError(f"no translate within {radius!r} of the center")
    logger.debug(
        f"Occupancy: {len(occupied)} of {geometry.cell_count} translates, "
        f"{len(verdicts)} distinct translates, {screened_out} excluded without a flow"
    )
    return occupied




def _pair_distance_sq(a: GridVector, b: GridVector, geometry: TorusGeometry) -> Fraction:
    h = Fraction(geometry.L) / geometry.n
    return torus.index_norm_sq([x - y for x, y in zip(a, b)], geometry.n) * h * h


def cluster_dichotomy(occupancy: Sequence[GridVector], N: int, geometry: TorusGeometry) -> List[Tuple[GridVector, ...]]:
    """
    Partition U into classes of pairs closer than 1/N.

    Raises:
        KeyPropertyViolationError: if some pair lies at distance in [1/N, 2/N]
    """
    inner, outer = Fraction(1, N * N), Fraction(4, N * N)
    points = sorted(set(tuple(u) for u in occupancy))
    classes = DisjointSet(points)
    for i, a in enumerate(points):
        for b in points[i + 1:]:
            sq = _pair_distance_sq(a, b, geometry)
            if sq < inner:
                classes.merge(a, b)
            elif sq <= outer:
                distance = math.sqrt(float(sq))
                raise KeyPropertyViolationError(
                    f"occupancy vectors {a} and {b} at distance {distance!r} inside [1/{N}, 2/{N}]",
                    pair=(a, b),
                    distance=distance,
                )

    clusters = sorted(tuple(sorted(c)) for c in classes.subsets())
    for cluster in clusters:
        for i, a in enumerate(cluster):
            for b in cluster[i + 1:]:
                if _pair_distance_sq(a, b, geometry) > inner:
                    raise KeyPropertyViolationError(f"cluster diameter exceeds 1/{N} between {a} and {b}", pair=(a, b))
    return clusters


def cluster_representative(cluster: Sequence[GridVector], n: int, unwrap: bool = True) -> GridVector:
    """
    Lexicographic minimum of a cluster.

    With unwrap, members are placed next to the first member (differences in
    (-n/2, n/2]) before comparing, so the choice does not jump at the seam.
    """
    if not unwrap:
        return min(tuple(c) for c in cluster)
    anchor = cluster[0]
    unwrapped = [
        tuple(a + torus.wrap_index(x - a, n) for x, a in zip(member, anchor))
        for member in cluster
    ]
    return tuple(x % n for x in min(unwrapped))


def representatives(
    clusters: Sequence[Sequence[GridVector]],
    geometry: TorusGeometry,
    unwrap: bool = True,
) -> PointPattern:
    """One point per cluster, with the certified minimum separation of the result."""
    chosen = [cluster_representative(c, geometry.n, unwrap) for c in clusters if c]
    separation = math.inf
    for i, a in enumerate(chosen):
        for b in chosen[i + 1:]:
            separation = min(separation, torus.index_norm([x - y for x, y in zip(a, b)], geometry))
    points = tuple(tuple(x * geometry.h for x in k) for k in chosen)
    return PointPattern(geometry=geometry, points=points, separation=separation)


class PointProcessExtractor:
    """
    Runs the extraction pipeline with a retry ladder on KeyPropertyViolation.
    """

    def __init__(
        self,
        m_max: Optional[int] = None,
        retry_limit: Optional[int] = None,
        tol: Optional[float] = None,
        unwrap: bool = True,
    ):
        self.m_max = m_max or settings.m_max
        self.retry_limit = settings.retry_limit if retry_limit is None else retry_limit
        self.tol = tol
        self.unwrap = unwrap

    def trace(self, mu: Measure) -> ExtractionTrace:
        """
        Run the pipeline and return every intermediate result.

        Raises:
            HasInvariantDirectionError, EpsilonNotFoundError, KeyPropertyViolationError
        """
        geometry = mu.geometry
        group = symmetry_group(mu, self.tol)
        shell = resolvable_shell(geometry, shell_index(group))
        scan = shell_scan(mu, shell)
        M = epsilon_index(scan.distance, self.m_max)
        epsilon = 1.0 / M
        total = torus.total_mass(mu)
        logger.info(f"Extraction: N={shell.N}, shell distance {scan.distance!r}, epsilon=1/{M}")

        last_error: Optional[KeyPropertyViolationError] = None
        for attempt in range(self.retry_limit + 1):
            plan = quantization_plan(geometry, epsilon, total, attempt)
            try:
                choice = canonical_center(mu, epsilon, plan=plan, shell_distance=scan.distance)
                occupancy = occupancy_set(mu, choice.center, choice.radius, plan)
                clusters = cluster_dichotomy(occupancy, shell.N, geometry)
            except KeyPropertyViolationError as e:
                last_error = e
                logger.warning(f"❌ Attempt {attempt + 1} failed: {e}")
                if attempt < self.retry_limit:
                    logger.info("🔧 Retrying with finer quantization...")
                continue

            pattern = representatives(clusters, geometry, self.unwrap)
            logger.info(f"✅ Extracted {len(pattern)} point(s), separation {pattern.separation!r}")
            return ExtractionTrace(
                N=shell.N,
                epsilon=epsilon,
                M=M,
                shell_distance=scan.distance,
                center=choice.center,
                radius=choice.radius,
                resolution=plan.resolution,
                step=plan.step,
                center_shift=choice.shift,
                occupancy=tuple(occupancy),
                clusters=tuple(clusters),
                representatives=pattern,
                attempts=attempt + 1,
            )

        logger.error(f"Extraction failed after {self.retry_limit + 1} attempts")
        raise last_error

    def extract(self, mu: Measure) -> PointPattern:
        return self.trace(mu).representatives


def extract_point_process(mu: Measure, m_max: Optional[int] = None, tol: Optional[float] = None) -> PointPattern:
    """Nonempty, separated, translation-equivariant point pattern of mu."""
    return PointProcessExtractor(m_max=m_max, tol=tol).extract(mu)


def extract_plain_order(mu: Measure, m_max: Optional[int] = None, tol: Optional[float] = None) -> PointPattern:
    """Extraction with plain coordinate order for representatives (not equivariant at the seam)."""
    return PointProcessExtractor(m_max=m_max, tol=tol, unwrap=False).extract(mu)

"""
Verification campaigns.

Each campaign turns scenarios (or plain seeds) into CheckRecords. Work is
fanned out per scenario to a process pool when jobs > 1; records are sorted
by (check_id, seed) so the report does not depend on scheduling.
"""

import itertools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import settings
from errors import FactorLabError, HasInvariantDirectionError, UsageError
from models import (
    AllocationMap,
    Atom,
    CheckRecord,
    GridVector,
    Measure,
    PointPattern,
    Scenario,
    ScenarioKind,
    ScenarioManifest,
    TargetKind,
    TorusGeometry,
    VerificationReport,
)
from pipelines.allocation import balance, balance_with_auxiliary, gram_schmidt_chart
from pipelines.extraction import extract_plain_order, extract_point_process
from services import torus
from services.generators import gen_poisson, generate, make_rng, planted_truth
from services.prokhorov import prokhorov, support_sites
from services.symmetry import orthonormalize, shell_index, span_subgroup, symmetry_group
from services.tessellation import fair_tessellation, point_grid_index

logger = logging.getLogger(__name__)

Output = Union[FrozenSet[GridVector], str]


# ---------------------------------------------------------------------------
# Equivariance
# ---------------------------------------------------------------------------

def _support_cells(mu: Measure) -> FrozenSet[GridVector]:
    cells = {mu.geometry.cell_multi_index(i) for i, m in enumerate(mu.cell_mass) if m > 0}
    cells.update(torus.atom_cell(a, mu.geometry) for a in mu.atoms)
    return frozenset(cells)


def _pattern_cells(pattern: PointPattern) -> FrozenSet[GridVector]:
    cells = set()
    for p in pattern.points:
        k = point_grid_index(p, pattern.geometry)
        if k is None:
            raise UsageError(f"point {p} is off the grid")
        cells.add(k)
    return frozenset(cells)


PIPELINES: Dict[str, Callable[[Measure], FrozenSet[GridVector]]] = {
    "identity": _support_cells,
    "extract": lambda mu: _pattern_cells(extract_point_process(mu)),
    "extract_plain_order": lambda mu: _pattern_cells(extract_plain_order(mu)),
}


def pipeline_output(pipeline_id: str, mu: Measure) -> Output:
    """Grid cells produced by a pipeline, or the name of the error it raised."""
    if pipeline_id not in PIPELINES:
        raise UsageError(f"unknown pipeline {pipeline_id!r}; choose from {sorted(PIPELINES)}")
    try:
        return PIPELINES[pipeline_id](mu)
    except FactorLabError as e:
        return type(e).__name__


def shift_output(output: Output, k: Sequence[int], n: int) -> Output:
    if isinstance(output, str):
        return output
    return frozenset(tuple((x + s) % n for x, s in zip(cell, k)) for cell in output)


def _discrepancy(a: Output, b: Output) -> float:
    if isinstance(a, str) or isinstance(b, str):
        return 0.0 if a == b else math.inf
    return float(len(a ^ b))


def sample_shifts(geometry: TorusGeometry, count: int, seed: int) -> List[GridVector]:
    rng = make_rng(seed)
    return [tuple(int(x) for x in row) for row in rng.integers(0, geometry.n, size=(count, geometry.d))]


def equivariance_records(pipeline_id: str, seed: int, mu: Measure, shifts_per_sample: int) -> List[CheckRecord]:
    base = pipeline_output(pipeline_id, mu)
    records = []
    for j, k in enumerate(sample_shifts(mu.geometry, shifts_per_sample, seed)):
        moved = pipeline_output(pipeline_id, torus.translate_by_index(mu, k))
        value = _discrepancy(moved, shift_output(base, k, mu.geometry.n))
        records.append(CheckRecord(
            check_id=f"equivariance.{pipeline_id}.shift{j:02d}",
            seed=seed,
            passed=value == 0.0,
            value=value,
            tolerance=0.0,
            detail=f"shift={list(k)}" + (f" output={base}" if isinstance(base, str) else ""),
        ))
    return records


def verify_equivariance(
    pipeline_id: str,
    corpus: Sequence[Tuple[int, Measure]],
    shifts_per_sample: int = 20,
) -> VerificationReport:
    """
    Check pipeline(translate(mu, t)) == pipeline(mu) + t for sampled grid shifts.

    Args:
        pipeline_id: One of PIPELINES
        corpus: (seed, measure) samples; the seed also drives the shift sampling
        shifts_per_sample: Shifts per sample

    Returns:
        VerificationReport with one record per (sample, shift)
    """
    if not corpus:
        raise UsageError("equivariance check needs a nonempty corpus")
    start = time.perf_counter()
    records = []
    for seed, mu in corpus:
        records.extend(equivariance_records(pipeline_id, seed, mu, shifts_per_sample))
    return VerificationReport(campaign="equivariance", records=records, runtime_s=time.perf_counter() - start)


# ---------------------------------------------------------------------------
# Balance
# ---------------------------------------------------------------------------

def summation_tolerance(total: float, terms: int) -> float:
    """
    Absolute slack for comparing float sums of `terms` masses with the given
    total: the worst-case rounding terms * eps * total, plus balance_rel_tol
    of the total.
    """
    return (settings.balance_rel_tol + terms * float(np.finfo(float).eps)) * total


def _entry_count(alloc: AllocationMap) -> int:
    return sum(len(row) for row in alloc.entries + alloc.atom_entries)


def balance_residuals(alloc: AllocationMap, psi: Measure) -> List[Dict[str, object]]:
    """Expected vs received mass and their absolute difference for every target of psi and of the map."""
    expected: Dict[Tuple[TargetKind, int], float] = {}
    for i, m in enumerate(psi.cell_mass):
        if m > 0:
            expected[(TargetKind.CELL, i)] = m
    for i, atom in enumerate(psi.atoms):
        expected[(TargetKind.ATOM, i)] = atom.mass
    received = alloc.incoming()

    keys = sorted(set(expected) | set(received), key=lambda x: (x[0].value, x[1]))
    rows = []
    for kind, target in keys:
        e = expected.get((kind, target), 0.0)
        r = received.get((kind, target), 0.0)
        rows.append({
            "target_kind": kind.value,
            "target_id": target,
            "expected": e,
            "received": r,
            "residual": abs(r - e),
        })
    return rows


def verify_balance(alloc: AllocationMap, phi: Measure, psi: Measure, seed: int = 0) -> VerificationReport:
    """
    Per-target incoming residual and per-source conservation residual of an allocation.

    Residuals are absolute; both are judged against summation_tolerance of
    the relevant total over the entries of the map.
    """
    start = time.perf_counter()
    records = []
    if alloc.geometry != phi.geometry or phi.geometry != psi.geometry:
        records.append(CheckRecord(check_id="balance.geometry", seed=seed, passed=False, value=math.inf, tolerance=0.0,
                                   detail="allocation and measures live on different tori"))
        return VerificationReport(campaign="balance", records=records, runtime_s=time.perf_counter() - start)

    terms = max(1, _entry_count(alloc))
    residuals = balance_residuals(alloc, psi)
    worst = max(residuals, key=lambda r: r["residual"], default=None)
    target_value = float(worst["residual"]) if worst else 0.0
    target_tol = summation_tolerance(torus.total_mass(psi), terms)
    records.append(CheckRecord(
        check_id="balance.target_residual",
        seed=seed,
        passed=target_value <= target_tol,
        value=target_value,
        tolerance=target_tol,
        detail=f"worst={worst['target_kind']}:{worst['target_id']}" if worst else "",
    ))

    outgoing = alloc.outgoing()
    source_tol = summation_tolerance(torus.total_mass(phi), terms)
    source_value = 0.0
    worst_source = -1
    for i, (out, m) in enumerate(zip(outgoing, phi.cell_mass)):
        value = abs(out - m)
        if value > source_value:
            source_value, worst_source = value, i
    records.append(CheckRecord(
        check_id="balance.source_residual",
        seed=seed,
        passed=source_value <= source_tol,
        value=source_value,
        tolerance=source_tol,
        detail=f"worst=cell:{worst_source}" if worst_source >= 0 else "",
    ))
    return VerificationReport(campaign="balance", records=records, runtime_s=time.perf_counter() - start)


def verify_tessellation(alloc: AllocationMap, mu: Measure, seed: int = 0) -> CheckRecord:
    """Every point of the pattern receives total/|P| up to summation_tolerance."""
    pattern = alloc.pattern
    count = len(pattern) if pattern else 0
    total = torus.total_mass(mu)
    capacity = total / count if count else 0.0
    tolerance = summation_tolerance(total, max(1, _entry_count(alloc)))
    received = alloc.incoming()
    worst = 0.0
    for p in range(count):
        worst = max(worst, abs(received.get((TargetKind.POINT, p), 0.0) - capacity))
    return CheckRecord(
        check_id="tessellation.capacity",
        seed=seed,
        passed=count > 0 and worst <= tolerance,
        value=worst,
        tolerance=tolerance,
        detail=f"points={count}",
    )




def atomic_target(phi: Measure, seed: int, intensity: float) -> Measure:
    """Poisson atoms rescaled to the total of phi."""
    atoms = gen_poisson(phi.geometry, intensity, seed).atoms
    if not atoms:
        atoms = (Atom(position=(0.0,) * phi.geometry.d, mass=1.0),)
    total = torus.total_mass(phi)
    count = math.fsum(a.mass for a in atoms)
    scaled = tuple(Atom(position=a.position, mass=a.mass * total / count) for a in atoms)
    return Measure(geometry=phi.geometry, cell_mass=(0.0,) * phi.geometry.cell_count, atoms=scaled)


# ---------------------------------------------------------------------------
# Prokhorov oracle
# ---------------------------------------------------------------------------

def brute_force_prokhorov(mu: Measure, nu: Measure) -> float:
    """
    Prokhorov distance of the unit-normalized measures straight from the
    definition, with every subset of the union of supports as a test set.
    """
    a = support_sites(mu)
    b = support_sites(nu)
    if a.exact != b.exact:
        a, b = support_sites(mu, exact=False), support_sites(nu, exact=False)
    geometry = mu.geometry
    coords = sorted(set(map(tuple, a.coords.tolist())) | set(map(tuple, b.coords.tolist())))
    index = {c: i for i, c in enumerate(coords)}
    m = len(coords)
    mu_mass = np.zeros(m)
    nu_mass = np.zeros(m)
    for c, w in zip(map(tuple, a.coords.tolist()), a.masses):
        mu_mass[index[c]] += w
    for c, w in zip(map(tuple, b.coords.tolist()), b.masses):
        nu_mass[index[c]] += w

    points = np.asarray(coords)
    if a.exact:
        delta = torus.wrapped_fine_delta(points[:, None, :], points[None, :, :], torus.fine_period(geometry))
        lengths = torus.fine_unit(geometry) * np.sqrt(np.sum(delta * delta, axis=2).astype(float))
    else:
        L = geometry.L
        delta = np.abs(points[:, None, :] - points[None, :, :]) % L
        delta = np.minimum(delta, L - delta)
        lengths = np.sqrt(np.sum(delta * delta, axis=2))

    subsets = np.array(list(itertools.product((0, 1), repeat=m)), dtype=float)
    candidates = sorted({0.0, 1.0} | {float(x) for x in lengths.reshape(-1) if x <= 1.0})
    best = 1.0
    for eps in candidates:
        near = (lengths <= eps).astype(float)
        dilated = (subsets @ near > 0).astype(float)
        excess = max(
            float(np.max(subsets @ mu_mass - dilated @ nu_mass)),
            float(np.max(subsets @ nu_mass - dilated @ mu_mass)),
        )
        best = min(best, max(eps, excess))
    return best


def random_site_pair(seed: int, max_sites: int = 3) -> Tuple[Measure, Measure]:
    """Two atomic measures with equal totals, each on at most max_sites sites."""
    rng = make_rng(seed)
    geometry = TorusGeometry(d=2, L=1.0, n=8)
    T = torus.tick_count()

    def draw() -> List[Atom]:
        count = int(rng.integers(1, max_sites + 1))
        ticks = {tuple(int(x) for x in rng.integers(0, 16, size=2) * (T // 16)) for _ in range(count)}
        return [Atom(position=tuple(torus.position_from_ticks(t, 1.0) for t in tk), mass=float(rng.uniform(0.1, 1.0)))
                for tk in sorted(ticks)]

    mu_atoms, nu_atoms = draw(), draw()
    mu_total = math.fsum(x.mass for x in mu_atoms)
    nu_total = math.fsum(x.mass for x in nu_atoms)
    nu_atoms = [Atom(position=x.position, mass=x.mass * mu_total / nu_total) for x in nu_atoms]
    zero = (0.0,) * geometry.cell_count
    return (Measure(geometry=geometry, cell_mass=zero, atoms=tuple(mu_atoms)),
            Measure(geometry=geometry, cell_mass=zero, atoms=tuple(nu_atoms)))


# ---------------------------------------------------------------------------
# Monge defect scenario
# ---------------------------------------------------------------------------

def defect_scenario(n: int) -> Tuple[Measure, Measure, PointPattern]:
    """Smooth 1D density 1 + sin(2 pi x)/2, three equal atoms and a fixed two-point pattern."""
    geometry = TorusGeometry(d=1, L=1.0, n=n)
    h = geometry.h
    cells = [
        h + (math.cos(2 * math.pi * i * h) - math.cos(2 * math.pi * (i + 1) * h)) / (4 * math.pi)
        for i in range(n)
    ]
    phi = Measure(geometry=geometry, cell_mass=tuple(cells))
    total = torus.total_mass(phi)
    atoms = tuple(Atom(position=(x,), mass=total / 3) for x in (0.15625, 0.40625, 0.78125))
    psi = Measure(geometry=geometry, cell_mass=(0.0,) * n, atoms=atoms)
    points = ((0.125,), (0.59375,))
    pattern = PointPattern(geometry=geometry, points=points, separation=torus.torus_distance(points[0], points[1], 1.0))
    return phi, psi, pattern


# ---------------------------------------------------------------------------
# Campaign jobs (top-level so they pickle into worker processes)
# ---------------------------------------------------------------------------

def _equivariance_job(scenario: Scenario, shifts: int, pipeline_id: str) -> List[CheckRecord]:
    return equivariance_records(pipeline_id, scenario.seed, generate(scenario), shifts)


def _necessity_job(scenario: Scenario) -> List[CheckRecord]:
    mu = generate(scenario)
    truth = planted_truth(scenario)
    try:
        extract_point_process(mu)
        rejected, detail = False, "extraction succeeded"
    except HasInvariantDirectionError as e:
        rejected, detail = True, str(e)
    except FactorLabError as e:
        rejected, detail = False, f"{type(e).__name__}: {e}"
    found = symmetry_group(mu).v_dimension
    return [
        CheckRecord(check_id="necessity.rejected", seed=scenario.seed, passed=rejected,
                    value=0.0 if rejected else 1.0, tolerance=0.0, detail=detail),
        CheckRecord(check_id="necessity.v_dimension", seed=scenario.seed, passed=found == truth.v_dimension,
                    value=float(abs(found - (truth.v_dimension or 0))), tolerance=0.0,
                    detail=f"found={found} planted={truth.v_dimension}"),
    ]


def _symmetry_job(scenario: Scenario) -> List[CheckRecord]:
    mu = generate(scenario)
    geometry = scenario.geometry
    truth = planted_truth(scenario)
    group = symmetry_group(mu)
    planted = span_subgroup(truth.symmetry_generators or [], geometry.n, geometry.d)
    recovered = span_subgroup(group.generator_indices, geometry.n, geometry.d)
    records = [
        CheckRecord(check_id="symmetry.generators", seed=scenario.seed, passed=planted == recovered,
                    value=float(len(planted ^ recovered)), tolerance=0.0,
                    detail=f"generators={[list(g) for g in group.generators]}"),
        CheckRecord(check_id="symmetry.closed", seed=scenario.seed, passed=group.closed,
                    value=0.0 if group.closed else 1.0, tolerance=0.0),
    ]
    expected_N = scenario.parameters.get("expected_N")
    if expected_N is not None:
        try:
            N = shell_index(group).N
        except HasInvariantDirectionError:
            N = -1
        records.append(CheckRecord(check_id="symmetry.shell_index", seed=scenario.seed, passed=N == expected_N,
                                   value=float(abs(N - expected_N)), tolerance=0.0,
                                   detail=f"N={N} expected={expected_N}"))
    return records


def _balance_job(scenario: Scenario) -> List[CheckRecord]:
    phi = generate(scenario)
    psi = atomic_target(phi, scenario.seed + 1, float(scenario.parameters.get("atom_intensity", 4.0)))
    try:
        alloc = balance(phi, psi)
    except FactorLabError as e:
        return [CheckRecord(check_id="balance.run", seed=scenario.seed, passed=False, value=math.inf,
                            tolerance=0.0, detail=f"{type(e).__name__}: {e}")]
    records = verify_balance(alloc, phi, psi, seed=scenario.seed).records
    if alloc.pattern is not None:
        records.append(verify_tessellation(fair_tessellation(phi, alloc.pattern), phi, seed=scenario.seed))
    return records


def _chart_job(seed: int) -> List[CheckRecord]:
    rng = make_rng(seed)
    d = int(rng.integers(1, 4))
    m = int(rng.integers(0, d))
    V = orthonormalize(rng.standard_normal((m, d)))
    chart = gram_schmidt_chart(V, d)
    residual = chart.orthonormality_residual()
    if V and chart.basis:
        residual = max(residual, float(np.max(np.abs(np.asarray(V) @ chart.matrix().T))))
    return [CheckRecord(check_id="chart.orthonormality", seed=seed, passed=residual <= 1e-12, value=residual,
                        tolerance=1e-12, detail=f"d={d} dimV={len(V)}")]


def _oracle_job(seed: int) -> List[CheckRecord]:
    mu, nu = random_site_pair(seed)
    bracket = prokhorov(mu, nu)
    expected = brute_force_prokhorov(mu, nu)
    error = abs(bracket.midpoint - expected)
    return [CheckRecord(check_id="oracle.prokhorov", seed=seed, passed=error <= 1e-9, value=error, tolerance=1e-9,
                        detail=f"flow={bracket.midpoint!r} brute={expected!r}")]


def _defect_job(seed: int) -> List[CheckRecord]:
    defects = {}
    for n in (32, 64, 128):
        phi, psi, pattern = defect_scenario(n)
        defects[n] = balance_with_auxiliary(phi, psi, pattern).monge_defect
    records = []
    for coarse, fine in ((32, 64), (64, 128)):
        ratio = defects[fine] / defects[coarse] if defects[coarse] > 0 else 0.0
        records.append(CheckRecord(check_id=f"defect.ratio_{fine}_{coarse}", seed=seed, passed=ratio <= 0.75,
                                   value=ratio, tolerance=0.75,
                                   detail=f"defect({coarse})={defects[coarse]:.6g} defect({fine})={defects[fine]:.6g}"))
    return records


def _run_task(task: Tuple[Callable, tuple]) -> List[CheckRecord]:
    func, args = task
    return func(*args)


CAMPAIGNS = ("equivariance", "necessity", "symmetry", "balance", "chart", "oracle", "defect")


def _scenarios(manifest: Optional[ScenarioManifest], kinds: Sequence[ScenarioKind]) -> List[Scenario]:
    if manifest is None:
        raise UsageError("this campaign needs a scenario manifest")
    return [s for s in manifest.scenarios if s.kind in kinds]


def build_tasks(
    campaign: str,
    manifest: Optional[ScenarioManifest],
    shifts: int,
    count: int,
    pipeline_id: str,
) -> List[Tuple[Callable, tuple]]:
    if campaign == "equivariance":
        free = _scenarios(manifest, (ScenarioKind.POISSON, ScenarioKind.DIFFUSE))
        return [(_equivariance_job, (s, shifts, pipeline_id)) for s in free]
    if campaign == "necessity":
        return [(_necessity_job, (s,)) for s in _scenarios(manifest, (ScenarioKind.INVARIANT_DIRECTION,))]
    if campaign == "symmetry":
        return [(_symmetry_job, (s,)) for s in _scenarios(manifest, (ScenarioKind.LATTICE, ScenarioKind.DIFFUSE))]
    if campaign == "balance":
        return [(_balance_job, (s,)) for s in _scenarios(manifest, (ScenarioKind.DIFFUSE,))]
    if campaign == "chart":
        return [(_chart_job, (seed,)) for seed in range(count)]
    if campaign == "oracle":
        return [(_oracle_job, (seed,)) for seed in range(count)]
    if campaign == "defect":
        return [(_defect_job, (0,))]
    raise UsageError(f"unknown campaign {campaign!r}; choose from {list(CAMPAIGNS)}")


def run_campaign(
    campaign: str,
    manifest: Optional[ScenarioManifest] = None,
    jobs: Optional[int] = None,
    shifts: int = 20,
    count: int = 100,
    pipeline_id: str = "extract",
) -> VerificationReport:
    """
    Run a named campaign.

    Args:
        campaign: One of CAMPAIGNS
        manifest: Scenario manifest (required by scenario-driven campaigns)
        jobs: Worker processes (default settings.jobs)
        shifts: Shifts per sample for the equivariance campaign
        count: Number of seeds for seed-driven campaigns (chart, oracle)
        pipeline_id: Pipeline checked by the equivariance campaign

    Returns:
        VerificationReport with records sorted by (check_id, seed)
    """
    jobs = jobs or settings.jobs
    tasks = build_tasks(campaign, manifest, shifts, count, pipeline_id)
    if not tasks:
        raise UsageError(f"campaign {campaign!r} has nothing to run on this manifest")
    logger.info(f"🚀 Campaign {campaign}: {len(tasks)} task(s) on {jobs} worker(s)")

    start = time.perf_counter()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as executor:
            batches = list(executor.map(_run_task, tasks))
    else:
        batches = [_run_task(task) for task in tasks]
    records = [r for batch in batches for r in batch]
    report = VerificationReport(campaign=campaign, records=records, runtime_s=time.perf_counter() - start)
    report = VerificationReport(campaign=campaign, records=report.sorted_records(), runtime_s=report.runtime_s)
    logger.info(f"✅ Campaign {campaign}: {report.passed_count} passed, {report.failed_count} failed")
    return report

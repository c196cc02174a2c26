"""Field-dependent analyses: level diagrams, clock transitions, ODMR, decay-time sweeps."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment, minimize_scalar
from scipy.signal import find_peaks

from .bath import BathSpin, LatticeConfig, SurfaceConfig, generate_surface_bath, sort_bath
from .cce import BathStatePolicy, CceConfig, CoherenceProblem, GcceSolver, cluster_system, resolve_core
from .errors import ConfigurationError, NumericalError
from .protocol import RAMSEY, HAHN_ECHO, PulseProtocol
from .pulses import DecayFit, DecayWindow, extract_decay_time
from .spin_core import SpinSystem, build_hamiltonian, eigendecompose, embed, spin_operators

log = logging.getLogger(__name__)

TRACK_OVERLAP_MIN = 0.6
# a gap minimum is a clock transition only if the +-1 level is this flat,
# as a fraction of the free-electron slope along the scan
CLOCK_SLOPE_FRACTION = 1e-2
# gaps smaller than this are true crossings, not avoided ones
MIN_AVOIDED_GAP = 1e-6
# a spectral dip shallower than this fraction of the lower peak does not resolve two lines
ODMR_DIP_FRACTION = 0.01
POINT_FAILED = "point failed"


@dataclass(frozen=True)
class FieldGeometry:
    """Applied field of signed magnitude b0 along (theta0, azimuth 0) plus a fixed residual field.

    Angles are in degrees, magnitudes in gauss.  ``phi`` is the azimuth of the
    residual field relative to the applied one.
    """

    b0: float = 0.0
    theta0: float = 60.0
    br: float = 0.0
    theta_r: float = 120.0
    phi: float = 0.0

    def __post_init__(self):
        for name in ("b0", "theta0", "br", "theta_r", "phi"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigurationError(f"geometry.{name} must be finite")
        if self.br < 0:
            raise ConfigurationError("geometry.br is a magnitude and must be >= 0")

    @property
    def direction(self) -> np.ndarray:
        t = np.radians(self.theta0)
        return np.array([np.sin(t), 0.0, np.cos(t)])

    @property
    def residual(self) -> np.ndarray:
        t, p = np.radians(self.theta_r), np.radians(self.phi)
        return self.br * np.array([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)])

    def vector(self, b0: Optional[float] = None) -> np.ndarray:
        b0 = self.b0 if b0 is None else b0
        return b0 * self.direction + self.residual

    def with_b0(self, b0: float) -> "FieldGeometry":
        return replace(self, b0=float(b0))

    def mirrored(self) -> "FieldGeometry":
        return replace(self, phi=-self.phi)

    def center_shift(self) -> float:
        """Scan offset that cancels the residual field's axial part."""
        return -self.br * np.cos(np.radians(self.theta_r)) / np.cos(np.radians(self.theta0))


def _system_at(problem: CoherenceProblem, ids: tuple[int, ...], geometry: FieldGeometry, b0: float):
    return cluster_system(problem.with_field(geometry.vector(b0)), ids)


def _electron_weights(v: np.ndarray, nuclear_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """|m_s=0> weight and <S_z> for every eigenvector column."""
    p = (np.abs(v) ** 2).reshape(3, nuclear_dim, -1).sum(axis=1)
    return p[1], p[0] - p[2]


@dataclass
class LevelDiagram:
    """Eigenvalues along a scan of b0, sorted and continuity-tracked.

    ``energies[i]`` is ascending at field i; ``tracks[i, k]`` is the energy of
    track k, and ``track_level[i, k]`` its position in the sorted list.
    ``splits`` lists (field index, track) where the step overlap fell below
    the continuity threshold.
    """

    b0: np.ndarray
    fields: np.ndarray
    energies: np.ndarray
    tracks: np.ndarray
    track_level: np.ndarray
    ms0_weight: np.ndarray
    sz: np.ndarray
    splits: list
    geometry: FieldGeometry
    system: SpinSystem = field(repr=False)
    h0: np.ndarray = field(repr=False)
    dh: np.ndarray = field(repr=False)

    def hamiltonian(self, b0: float) -> np.ndarray:
        """H at scan value b0 (the field, hence H, is affine in b0)."""
        return self.h0 + b0 * self.dh

    def gap_matrix(self, i: int) -> np.ndarray:
        e = self.energies[i]
        return np.abs(e[:, None] - e[None, :])

    def adjacent_gaps(self) -> np.ndarray:
        return np.diff(self.energies, axis=1)


def level_diagram(problem: CoherenceProblem, geometry: FieldGeometry, b0_grid, spin_ids=None) -> LevelDiagram:
    """Levels of the electron plus selected bath spins (default: the core) over a b0 scan."""
    b0 = np.asarray(b0_grid, dtype=float)
    if b0.ndim != 1 or len(b0) < 2 or np.any(np.diff(b0) <= 0):
        raise ConfigurationError("level diagram needs a strictly increasing b0 grid with >= 2 points")
    ids = tuple(resolve_core(problem.bath, problem.cce) if spin_ids is None else spin_ids)
    first = _system_at(problem, ids, geometry, 0.0)
    h0 = build_hamiltonian(first)
    dh = build_hamiltonian(_system_at(problem, ids, geometry, 1.0)) - h0
    n = len(b0)
    d = first.dim
    energies = np.empty((n, d))
    tracks = np.empty((n, d))
    track_level = np.empty((n, d), dtype=int)
    ms0 = np.empty((n, d))
    sz = np.empty((n, d))
    splits = []
    prev = None
    perm = np.arange(d)
    for i, b in enumerate(b0):
        w, v = eigendecompose(h0 + b * dh, reference=prev)
        energies[i] = w
        ms0[i], sz[i] = _electron_weights(v, first.nuclear_dim)
        if prev is not None:
            ov = np.abs(prev.conj().T @ v) ** 2  # rows: sorted levels at i-1
            rows, cols = linear_sum_assignment(-ov)
            step = np.empty(d, dtype=int)
            step[rows] = cols
            for k in range(d):
                if ov[perm[k], step[perm[k]]] < TRACK_OVERLAP_MIN:
                    splits.append((i, k))
            perm = step[perm]
        track_level[i] = perm
        tracks[i] = w[perm]
        prev = v
    fields = np.array([geometry.vector(b) for b in b0])
    return LevelDiagram(b0, fields, energies, tracks, track_level, ms0, sz, splits, geometry, first, h0, dh)


@dataclass(frozen=True)
class ClockTransition:
    """Avoided crossing between sorted levels ``pair`` at scan value ``b0``."""

    b0: float
    b_axial: float
    pair: tuple[int, int]
    gap_mhz: float
    dfdb_mhz_per_gauss: float
    partner: int

    def to_dict(self) -> dict:
        return {
            "b0_gauss": self.b0,
            "b_axial_gauss": self.b_axial,
            "pair": list(self.pair),
            "gap_mhz": self.gap_mhz,
            "dfdb_mhz_per_gauss": self.dfdb_mhz_per_gauss,
            "ms0_partner": self.partner,
        }


def _quadratic_vertex(x, y) -> float:
    c = np.polyfit(x, y, 2)
    if c[0] <= 0:
        return float(x[1])
    return float(np.clip(-c[1] / (2 * c[0]), x[0], x[2]))


def _pair_gap(diagram: LevelDiagram, k: int, b: float) -> float:
    w = np.linalg.eigvalsh(diagram.hamiltonian(b))
    return float(w[k + 1] - w[k])


def _slopes(diagram: LevelDiagram, b: float):
    """Eigenpairs at b and Hellmann-Feynman level slopes dE/db0."""
    w, v = np.linalg.eigh(diagram.hamiltonian(b))
    slope = _expectations(v, diagram.dh)
    return w, v, slope


def _expectations(v: np.ndarray, op: np.ndarray) -> np.ndarray:
    return np.real(np.sum(v.conj() * (op @ v), axis=0))


def _is_clock_pair(eig, k: int, free: float, e_op: np.ndarray, slack: float = 1.0) -> bool:
    """Level k is nearly field independent and k, k+1 are the two E-split branches."""
    _, v, slope = eig
    if abs(slope[k]) >= slack * CLOCK_SLOPE_FRACTION * free:
        return False
    # the E term splits the pair into symmetric and antisymmetric +-1 combinations;
    # minima between nuclear sublevels of one branch fail this
    ek = _expectations(v[:, k : k + 2], e_op)
    return ek[0] * ek[1] < 0


def find_clock_transitions(diagram: LevelDiagram) -> list[ClockTransition]:
    """Strict local minima of adjacent-level gaps inside the +-1 manifold.

    Grid minima are refined by a three-point quadratic and then polished with
    a bounded scalar minimisation on the exact gap.  Minima where the level
    itself still moves with the field are ordinary level repulsions and are
    not reported, and so are minima between two levels of the same E-split
    branch (nuclear anticrossings).  ``dfdb_mhz_per_gauss`` is the slope of the transition to
    the ms=0 level with the strongest S_x coupling; in tilted fields it keeps
    the small slope of that ms=0 nuclear sublevel.
    """
    g = diagram.adjacent_gaps()
    n, npair = g.shape
    system = diagram.system
    ox, oy, _ = spin_operators(system.central.species)
    sx = embed({0: ox}, system.dims)
    e_op = embed({0: ox @ ox - oy @ oy}, system.dims)
    free = system.central.species.gyro * max(abs(diagram.geometry.direction[2]), 1e-3)
    at_grid = {}
    found = []
    for k in range(npair):
        for i in range(1, n - 1):
            if not (g[i, k] < g[i - 1, k] and g[i, k] <= g[i + 1, k]):
                continue
            if diagram.ms0_weight[i, k] > 0.5 or diagram.ms0_weight[i, k + 1] > 0.5:
                continue
            if abs(diagram.sz[i, k]) > 0.5 or abs(diagram.sz[i, k + 1]) > 0.5:
                continue
            if g[i, k] < MIN_AVOIDED_GAP:
                continue
            x = diagram.b0[i - 1 : i + 2]
            # cheap screen on the grid point; the slope there is off by at most the grid step
            if i not in at_grid:
                at_grid[i] = _slopes(diagram, diagram.b0[i])
            if not _is_clock_pair(at_grid[i], k, free, e_op, slack=10.0):
                continue
            guess = _quadratic_vertex(x, g[i - 1 : i + 2, k])
            res = minimize_scalar(
                partial(_pair_gap, diagram, k),
                bounds=(x[0], x[2]),
                method="bounded",
                options={"xatol": 1e-12 * max(1.0, abs(guess))},
            )
            b_star = float(res.x) if res.fun <= _pair_gap(diagram, k, guess) else guess
            eig = _slopes(diagram, b_star)
            if not _is_clock_pair(eig, k, free, e_op):
                continue
            w, v, slope = eig
            ms0w, _ = _electron_weights(v, system.nuclear_dim)
            partners = np.flatnonzero(ms0w > 0.5)
            coupling = np.abs(v[:, partners].conj().T @ sx @ v[:, k]) ** 2
            partner = int(partners[np.argmax(coupling)])
            dfdb = float(slope[k] - slope[partner])
            worst = max(abs(g[i - 1, k] - g[i, k]), abs(g[i + 1, k] - g[i, k])) / g[i, k]
            if worst > 0.2:
                log.warning("b0 grid is coarse near %.4g G (gap changes %.0f%% per step); refine the scan", diagram.b0[i], 100 * worst)
            found.append(
                ClockTransition(
                    b_star,
                    float(diagram.geometry.vector(b_star)[2]),
                    (k, k + 1),
                    float(w[k + 1] - w[k]),
                    dfdb,
                    partner,
                )
            )
    found.sort(key=lambda c: (c.b0, c.pair))
    return found


@dataclass
class OdmrSpectrum:
    frequencies: np.ndarray
    intensity: np.ndarray
    line_freqs: np.ndarray
    line_amps: np.ndarray
    linewidth: float

    @property
    def total_amplitude(self) -> float:
        return float(self.line_amps.sum())

    def integrated(self, f_lo: float = -np.inf, f_hi: float = np.inf) -> float:
        """Exact integral of the broadened spectrum over [f_lo, f_hi]."""
        hw = self.linewidth / 2
        cdf = lambda f: np.arctan((f - self.line_freqs) / hw) / np.pi
        return float(np.sum(self.line_amps * (cdf(f_hi) - cdf(f_lo))))

    def peaks(self) -> np.ndarray:
        """Frequencies of peaks separated from their neighbours by a dip of at least 1%."""
        top = self.intensity.max()
        idx, props = find_peaks(self.intensity, prominence=ODMR_DIP_FRACTION * top)
        return self.frequencies[idx]


def odmr_spectrum(system, linewidth: float, frequencies=None, polarization: str = "x") -> OdmrSpectrum:
    """Lorentzian-broadened transitions between ms=0-like and ms=+-1-like levels.

    ``linewidth`` is the full width at half maximum in MHz; every line keeps
    unit area times its |<a|S|b>|^2 amplitude.  Nuclear sublevels are equally
    populated.
    """
    if not linewidth > 0:
        raise ConfigurationError("ODMR linewidth must be positive")
    if polarization not in ("x", "y"):
        raise ConfigurationError("ODMR polarization must be 'x' or 'y'")
    w, v = np.linalg.eigh(build_hamiltonian(system))
    ms0w, _ = _electron_weights(v, system.nuclear_dim)
    op = spin_operators(system.central.species)["xy".index(polarization)]
    s = v.conj().T @ embed({0: op}, system.dims) @ v
    zero = np.flatnonzero(ms0w > 0.5)
    ones = np.flatnonzero(ms0w <= 0.5)
    amps = np.abs(s[np.ix_(zero, ones)]) ** 2 / system.nuclear_dim
    freqs = np.abs(w[ones][None, :] - w[zero][:, None])
    keep = amps > 1e-12 * max(amps.max(), 1e-300)
    freqs, amps = freqs[keep], amps[keep]
    order = np.argsort(freqs, kind="stable")
    freqs, amps = freqs[order], amps[order]
    if frequencies is None:
        pad = 10 * linewidth
        frequencies = np.linspace(freqs.min() - pad, freqs.max() + pad, 4001)
    f = np.asarray(frequencies, dtype=float)
    hw = linewidth / 2
    lor = (hw / np.pi) / ((f[:, None] - freqs[None, :]) ** 2 + hw**2)
    return OdmrSpectrum(f, lor @ amps, freqs, amps, float(linewidth))


def point_seed(seed: int, index: int) -> int:
    """Deterministic per-point seed from a global seed and a grid index."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, np.uint32)[0])


@dataclass
class SweepResult:
    b0: np.ndarray
    t2: np.ndarray
    fits: list
    gap_nearest_ct: np.ndarray
    clock_transitions: list
    geometry: FieldGeometry
    metadata: dict

    @property
    def resolved(self) -> np.ndarray:
        return np.array([f.resolved for f in self.fits], dtype=bool)


def sweep_point(
    problem: CoherenceProblem,
    protocol: PulseProtocol,
    window: DecayWindow,
    vector,
    seed: Optional[int] = None,
    keep_going: bool = False,
) -> DecayFit:
    """Decay time at one field vector.  Module level so it can be shipped to worker processes.

    With ``keep_going`` a numerical failure turns into an unresolved fit whose
    reason starts with ``POINT_FAILED``.
    """
    p = problem.with_field(vector)
    if seed is not None:
        p = CoherenceProblem(p.central, p.bath, p.field, replace(p.cce, seed=seed))
    try:
        fit, _ = window.run(GcceSolver(p, protocol).curve)
    except NumericalError as exc:
        if not keep_going:
            raise
        return DecayFit(float("nan"), None, window.method, None, resolved=False, reason=f"{POINT_FAILED}: {exc}")
    return fit


def _star(fn, args):
    return fn(*args)


def clock_transitions_along(problem: CoherenceProblem, geometry: FieldGeometry, lo: float, hi: float, n: int = 801):
    diagram = level_diagram(problem, geometry, np.linspace(lo, hi, n))
    return diagram, find_clock_transitions(diagram)


def sweep_t2star(
    problem: CoherenceProblem,
    geometry: FieldGeometry,
    b0_grid,
    protocol: PulseProtocol = RAMSEY,
    window: DecayWindow = DecayWindow(),
    include_clock_points: bool = True,
    map_fn: Callable = map,
    clock_scan_points: int = 801,
    keep_going: bool = False,
) -> SweepResult:
    """Decay time at every b0 on the grid; unresolved points stay NaN and flagged.

    With ``include_clock_points`` the refined clock-transition positions of
    the core subsystem are added to the grid.  ``map_fn`` lets callers run the
    independent points in parallel; results do not depend on it.
    """
    grid = np.asarray(b0_grid, dtype=float)
    if grid.ndim != 1 or len(grid) < 1 or not np.all(np.isfinite(grid)):
        raise ConfigurationError("sweep grid must be a non-empty 1-D list of finite b0 values")
    lo, hi = grid.min(), grid.max()
    cts = []
    diagram = None
    if hi > lo:
        diagram, cts = clock_transitions_along(problem, geometry, lo, hi, clock_scan_points)
    if include_clock_points:
        grid = np.concatenate([grid, [c.b0 for c in cts]])
    grid = np.unique(grid)
    sampled = problem.cce.bath_state_policy is BathStatePolicy.SAMPLED_PRODUCT
    jobs = [
        (problem, protocol, window, tuple(geometry.vector(b)), point_seed(problem.cce.seed, i) if sampled else None, keep_going)
        for i, b in enumerate(grid)
    ]
    fits = list(map_fn(partial(_star, sweep_point), jobs))
    t2 = np.array([f.t_char if f.resolved else np.nan for f in fits])
    gap = np.full(len(grid), np.nan)
    if cts:
        for i, b in enumerate(grid):
            ct = min(cts, key=lambda c: abs(c.b0 - b))
            gap[i] = _pair_gap(diagram, ct.pair[0], b)
    meta = {
        "protocol": protocol.tag,
        "geometry": geometry.__dict__ | {"b0": None},
        "window": {"t_max": window.t_max, "n_points": window.n_points, "max_doublings": window.max_doublings, "method": window.method.value},
        "clock_transitions": [c.to_dict() for c in cts],
        "n_unresolved": int(np.isnan(t2).sum()),
        "point_errors": [{"b0_gauss": float(b), "reason": f.reason} for b, f in zip(grid, fits) if f.reason.startswith(POINT_FAILED)],
    }
    return SweepResult(grid, t2, fits, gap, cts, geometry, meta)


@dataclass(frozen=True)
class Asymmetry:
    value: float
    center: float
    left: tuple
    right: tuple
    resolved: bool
    reason: str = ""


def asymmetry_metric(sweep: SweepResult, window: Optional[float] = None) -> Asymmetry:
    """(T_left - T_right) / (T_left + T_right) for the peak decay times either side of centre.

    The centre is the midpoint of the outermost clock transitions.  Each side's
    peak is the largest resolved decay time within ``window`` gauss of a
    clock transition on that side (default: a quarter of the outer spacing).
    """
    cts = sorted(c.b0 for c in sweep.clock_transitions)
    nan = float("nan")
    if len(cts) < 2:
        return Asymmetry(nan, nan, (), (), False, "fewer than two clock transitions in the sweep")
    center = 0.5 * (cts[0] + cts[-1])
    w = 0.25 * (cts[-1] - cts[0]) if window is None else window
    sides = []
    for on_side in (lambda b: b < center, lambda b: b > center):
        anchors = [c for c in cts if on_side(c)]
        near = np.zeros(len(sweep.b0), dtype=bool)
        for a in anchors:
            near |= np.abs(sweep.b0 - a) <= w
        ok = near & np.isfinite(sweep.t2)
        if not ok.any():
            sides.append(None)
            continue
        j = np.flatnonzero(ok)[np.argmax(sweep.t2[ok])]
        sides.append((float(sweep.b0[j]), float(sweep.t2[j])))
    if sides[0] is None or sides[1] is None:
        return Asymmetry(nan, center, sides[0] or (), sides[1] or (), False, "no resolved peak near a clock transition on one side")
    (bl, tl), (br_, tr) = sides
    return Asymmetry((tl - tr) / (tl + tr), center, (bl, tl), (br_, tr), True)


@dataclass(frozen=True)
class DepthRow:
    depth: float
    termination: str
    field_label: str
    field: tuple
    t2_us: float
    t2_mean_us: float
    t2_std_us: float
    n_resolved: int
    n_branches: int
    n_spins: int


def depth_scan(
    central,
    core_spins: Sequence[BathSpin],
    surfaces: Iterable[SurfaceConfig],
    lattice: LatticeConfig,
    fields: Sequence[tuple[str, Sequence[float]]],
    cce: CceConfig,
    window: DecayWindow = DecayWindow(t_max=100.0),
    bulk: Sequence[BathSpin] = (),
    map_fn: Callable = map,
) -> list[DepthRow]:
    """Hahn-echo T2 for each (surface, field) pair.

    ``core_spins`` (e.g. the nitrogen) and ``bulk`` spins are merged with the
    generated surface bath.  With the sampled policy every
    branch (sampled state times core basis state) also gets its own decay
    time; mean and spread of the resolved ones are reported next to the decay
    time of the averaged curve.
    """
    jobs = []
    meta = []
    for surf in surfaces:
        bath = sort_bath(list(core_spins) + list(bulk) + generate_surface_bath(surf, lattice))
        cfg = cce
        if cce.core_spins is None:
            cfg = replace(cce, core_spins=tuple(i for i, s in enumerate(bath) if any(s is c for c in core_spins)))
        for label, vec in fields:
            jobs.append((CoherenceProblem(central, bath, tuple(vec), cfg), window))
            meta.append((surf, label, tuple(float(x) for x in vec), len(bath)))
    results = list(map_fn(partial(_star, _depth_point), jobs))
    rows = []
    for (surf, label, vec, nspin), (fit, per) in zip(meta, results):
        good = [f.t_char for f in per if f.resolved]
        rows.append(
            DepthRow(
                surf.depth,
                surf.termination.value,
                label,
                vec,
                fit.t_char if fit.resolved else float("nan"),
                float(np.mean(good)) if good else float("nan"),
                float(np.std(good)) if good else float("nan"),
                len(good),
                len(per),
                nspin,
            )
        )
    return rows


def _depth_point(problem: CoherenceProblem, window: DecayWindow):
    solver = GcceSolver(problem, HAHN_ECHO)
    fit, curve = window.run(solver.curve)
    per = []
    if problem.cce.bath_state_policy is BathStatePolicy.SAMPLED_PRODUCT:
        samples = solver.per_sample(curve.times)
        for row in samples:
            per.append(extract_decay_time(type(curve)(curve.times, row, {}), window.method))
    return fit, per

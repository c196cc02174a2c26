"""Generalized cluster correlation expansion (gCCE) of central-spin coherence.

Every cluster contains the fused core (electron plus ``core_spins``) and
zero, one or two further bath spins.  Each cluster is diagonalised exactly
with all terms of the spin Hamiltonian; the coherence is the product of
irreducible cluster contributions.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np

from .bath import BathSpin, pair_tensor, rng_from_seed
from .errors import ConfigurationError
from .protocol import PulseProtocol, QubitStates, SystemSolver, basis_index, qubit_states
from .spin_core import DEFAULT_DIMENSION_CAP, CentralSpinModel, NuclearSpin, SpinSystem

log = logging.getLogger(__name__)

SATURATION_FLOOR = 1e-12


class BathStatePolicy(str, Enum):
    EXACT_MIXED = "exact_mixed"
    SAMPLED_PRODUCT = "sampled_product"


@dataclass(frozen=True)
class CceConfig:
    """Expansion settings.

    ``core_spins=None`` selects the default core: every ¹⁵N in the bath plus
    the ¹³C with the largest |A_zz|.
    """

    order: int = 1
    core_spins: tuple[int, ...] | None = None
    r_dip: float | None = None
    bath_state_policy: BathStatePolicy = BathStatePolicy.EXACT_MIXED
    n_samples: int = 25
    seed: int = 0
    include_pair_couplings: bool = True
    nuclear_zeeman: bool = True
    dimension_cap: int = DEFAULT_DIMENSION_CAP

    def __post_init__(self):
        object.__setattr__(self, "bath_state_policy", BathStatePolicy(self.bath_state_policy))
        if self.core_spins is not None:
            object.__setattr__(self, "core_spins", tuple(sorted(int(i) for i in self.core_spins)))
        if self.order not in (1, 2):
            raise ConfigurationError(f"order must be 1 or 2, got {self.order}")
        if self.order == 2 and (self.r_dip is None or self.r_dip <= 0):
            raise ConfigurationError("r_dip must be a positive distance when order = 2")
        if self.n_samples < 1:
            raise ConfigurationError("n_samples must be at least 1")


@dataclass(frozen=True, order=True)
class SpinCluster:
    order_tag: int
    member_ids: tuple[int, ...]


@dataclass
class CoherenceCurve:
    times: np.ndarray
    values: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=complex)
        if self.times.shape != self.values.shape:
            raise ValueError("times and values differ in shape")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("time grid must be strictly ascending")

    @property
    def abs(self) -> np.ndarray:
        return np.abs(self.values)


@dataclass(frozen=True)
class CoherenceProblem:
    """Everything the engine needs: central spin, bath, field and expansion settings."""

    central: CentralSpinModel
    bath: tuple[BathSpin, ...]
    field: tuple[float, float, float]
    cce: CceConfig = CceConfig()

    def __post_init__(self):
        object.__setattr__(self, "bath", tuple(self.bath))
        object.__setattr__(self, "field", tuple(float(b) for b in self.field))

    def with_field(self, b) -> "CoherenceProblem":
        return CoherenceProblem(self.central, self.bath, tuple(b), self.cce)


def default_core(bath: Sequence[BathSpin]) -> tuple[int, ...]:
    core = [i for i, s in enumerate(bath) if s.species.label == "15N"]
    carbons = [i for i, s in enumerate(bath) if s.species.label == "13C"]
    if carbons:
        core.append(max(carbons, key=lambda i: (abs(bath[i].azz), -i)))
    return tuple(sorted(core))


def resolve_core(bath: Sequence[BathSpin], cfg: CceConfig) -> tuple[int, ...]:
    core = default_core(bath) if cfg.core_spins is None else cfg.core_spins
    for i in core:
        if not 0 <= i < len(bath):
            raise ConfigurationError(f"core spin id {i} is not in the bath (size {len(bath)})")
    return tuple(core)


def _cluster_dim(bath, ids) -> int:
    return 3 * int(np.prod([bath[i].species.dim for i in ids]))


def enumerate_clusters(bath: Sequence[BathSpin], cfg: CceConfig) -> list[SpinCluster]:
    """Core cluster, one cluster per non-core spin, and (order 2) pairs closer than r_dip."""
    core = resolve_core(bath, cfg)
    rest = [i for i in range(len(bath)) if i not in core]
    clusters = [SpinCluster(0, core)]
    clusters += [SpinCluster(1, tuple(sorted(core + (i,)))) for i in rest]
    if cfg.order == 2 and len(rest) > 1:
        pos = np.array([bath[i].position for i in rest])
        dist = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
        for p, q in zip(*np.nonzero(np.triu(dist < cfg.r_dip, k=1))):
            clusters.append(SpinCluster(2, tuple(sorted(core + (rest[p], rest[q])))))
    for c in clusters:
        dim = _cluster_dim(bath, c.member_ids)
        if dim > cfg.dimension_cap:
            raise ConfigurationError(f"cluster {c.member_ids} has Hilbert dimension {dim} > cap {cfg.dimension_cap}")
    return sorted(clusters)


def cluster_system(problem: CoherenceProblem, ids: Sequence[int]) -> SpinSystem:
    bath = problem.bath
    cfg = problem.cce
    spins = [NuclearSpin(bath[i].species, bath[i].hyperfine, bath[i].position) for i in ids]
    couplings = {}
    if cfg.include_pair_couplings:
        for p, q in combinations(range(len(ids)), 2):
            couplings[(p, q)] = pair_tensor(bath[ids[p]], bath[ids[q]])
    return SpinSystem(
        problem.central,
        spins=spins,
        pair_couplings=couplings,
        field=problem.field,
        nuclear_zeeman=cfg.nuclear_zeeman,
        dimension_cap=cfg.dimension_cap,
    )


def full_system(problem: CoherenceProblem) -> SpinSystem:
    return cluster_system(problem, list(range(len(problem.bath))))


def sample_bath_states(bath: Sequence[BathSpin], n: int, seed: int) -> np.ndarray:
    """``n`` random product states as per-spin z-basis level indices, shape (n, len(bath))."""
    if n < 1:
        raise ConfigurationError("n must be at least 1")
    dims = np.array([s.species.dim for s in bath], dtype=np.int64)
    rng = rng_from_seed(seed)
    if len(bath) == 0:
        return np.zeros((n, 0), dtype=np.int64)
    return np.floor(rng.random((n, len(bath))) * dims).astype(np.int64)


def cluster_coherence(
    system: SpinSystem,
    protocol: PulseProtocol,
    times,
    states: np.ndarray | None = None,
    qubits: QubitStates | None = None,
) -> np.ndarray:
    """Coherence of one cluster; ``states`` (n, n_spins) gives product bath states, else mixed."""
    if qubits is None:
        qubits = qubit_states(system.central, system.field, protocol.qubit_selector)
    solver = SystemSolver(system, qubits)
    idx = None if states is None else basis_index(states, system.dims[1:])
    return solver.coherence(protocol.kind, times, idx)


def combine_gcce(curves: Mapping[SpinCluster, np.ndarray]) -> np.ndarray:
    """Product of irreducible contributions over a cluster lattice.

    Each cluster's curve is divided by the irreducible contributions of all
    its sub-clusters present in ``curves``.  Where a divisor falls below
    ``SATURATION_FLOOR`` in magnitude the result is set to zero.  The
    reduction runs over clusters in canonical sorted order.
    """
    ordered = sorted(curves)
    irreducible: dict[tuple[int, ...], np.ndarray] = {}
    shape = np.shape(curves[ordered[0]])
    saturated = np.zeros(shape, dtype=bool)
    total = np.ones(shape, dtype=complex)
    for c in ordered:
        value = np.asarray(curves[c], dtype=complex)
        denom = np.ones(shape, dtype=complex)
        m = c.member_ids
        for size in range(len(m)):
            for sub in combinations(m, size):
                part = irreducible.get(sub)
                if part is not None:
                    denom = denom * part
        small = np.abs(denom) < SATURATION_FLOOR
        saturated |= small
        contribution = value / np.where(small, 1.0, denom)
        irreducible[c.member_ids] = contribution
        total = total * contribution
    return np.where(saturated, 0.0, total)


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def problem_hash(problem: CoherenceProblem, protocol: PulseProtocol) -> str:
    from .bath import bath_to_json

    return config_hash(
        {
            "central": {"D": problem.central.D, "E": problem.central.E, "frame": problem.central.frame.tolist()},
            "bath": bath_to_json(problem.bath),
            "field": problem.field,
            "cce": asdict(problem.cce),
            "protocol": protocol.tag,
        }
    )


def core_basis_states(bath: Sequence[BathSpin], core: Sequence[int]) -> np.ndarray:
    """All product basis states of the core spins as level indices, shape (n, len(core))."""
    dims = [bath[i].species.dim for i in core]
    if not dims:
        return np.zeros((1, 0), dtype=np.int64)
    return np.indices(dims).reshape(len(dims), -1).T.astype(np.int64)


def core_hyperfine_field(bath: Sequence[BathSpin], core: Sequence[int], levels) -> np.ndarray:
    """Static field (MHz per electron spin component) of core spins frozen in basis levels."""
    h = np.zeros(3)
    for i, lvl in zip(core, levels):
        m = bath[i].species.spin - lvl  # basis order is m = +I ... -I
        h += m * bath[i].hyperfine.a[:, 2]
    return h


def stratify_core(samples: np.ndarray, bath: Sequence[BathSpin], core: Sequence[int]) -> np.ndarray:
    """Pair every sampled state with every core basis state.

    Core populations are then exact instead of binomial; only the non-core
    spins are sampled.  Rows are ordered core state first, shape
    (n_core_states * n_samples, len(bath)).
    """
    core = list(core)
    if not core:
        return samples
    blocks = []
    for levels in core_basis_states(bath, core):
        block = samples.copy()
        block[:, core] = levels
        blocks.append(block)
    return np.concatenate(blocks)


class _Branches:
    """Initial nuclear configurations that share a qubit definition.

    Each row fixes the core spins in a basis state; the qubit is taken from the
    electron Hamiltonian including that state's static hyperfine field.  With
    ``bath_states`` None the non-core spins are maximally mixed, otherwise
    each row is one sampled product state of the whole bath.
    """

    def __init__(self, problem: CoherenceProblem, protocol: PulseProtocol, core, bath_states=None):
        bath = problem.bath
        self.core = tuple(core)
        self.bath_states = bath_states
        if bath_states is None:
            self.core_states = core_basis_states(bath, self.core)
        else:
            self.core_states = bath_states[:, list(self.core)]
        uniq, inverse = np.unique(self.core_states, axis=0, return_inverse=True)
        self.group = inverse.ravel()
        self.qubits = [
            qubit_states(problem.central, problem.field, protocol.qubit_selector, core_hyperfine_field(bath, self.core, u))
            for u in uniq
        ]
        self.group_states = uniq
        self.dims_of = [s.species.dim for s in bath]

    def __len__(self):
        return len(self.core_states)

    def cluster_curves(self, solver: SystemSolver, member_ids: Sequence[int], kind, times) -> np.ndarray:
        """Coherence of one cluster for every branch, shape (n_branches, n_times)."""
        member_ids = list(member_ids)
        dims = [self.dims_of[i] for i in member_ids]
        pos = {i: j for j, i in enumerate(member_ids)}
        core_pos = [pos[i] for i in self.core]
        out = np.empty((len(self), len(times)), dtype=complex)
        for g, (levels, q) in enumerate(zip(self.group_states, self.qubits)):
            rows = np.flatnonzero(self.group == g)
            if self.bath_states is None:
                free = [d if j not in core_pos else 1 for j, d in enumerate(dims)]
                states = np.indices(free).reshape(len(dims), -1).T.astype(np.int64) if dims else np.zeros((1, 0), np.int64)
                states[:, core_pos] = levels
                idx = basis_index(states, dims)
                out[rows] = solver.coherence(kind, times, idx, q).mean(axis=0)
            else:
                flat = basis_index(self.bath_states[rows][:, member_ids], dims)
                uniq, inverse = np.unique(flat, return_inverse=True)
                out[rows] = solver.coherence(kind, times, uniq, q)[inverse.ravel()]
        return out


class GcceSolver:
    """Diagonalises every cluster once; coherence can then be evaluated on any time grid.

    The expansion runs separately for every branch (core basis state, or
    sampled bath state) and the branches are averaged at the end, so no
    cluster is ever divided by a coherence of a different branch.
    """

    def __init__(self, problem: CoherenceProblem, protocol: PulseProtocol):
        self.problem = problem
        self.protocol = protocol
        self.core = resolve_core(problem.bath, problem.cce)
        self.clusters = enumerate_clusters(problem.bath, problem.cce)
        self.solvers = {c: SystemSolver(cluster_system(problem, c.member_ids)) for c in self.clusters}
        cfg = problem.cce
        samples = None
        if cfg.bath_state_policy is BathStatePolicy.SAMPLED_PRODUCT:
            samples = stratify_core(sample_bath_states(problem.bath, cfg.n_samples, cfg.seed), problem.bath, self.core)
        self.samples = samples
        self.branches = _Branches(problem, protocol, self.core, samples)

    @property
    def counts(self) -> dict[str, int]:
        tags = [c.order_tag for c in self.clusters]
        return {f"order{k}": tags.count(k) for k in (0, 1, 2)}

    @property
    def qubits(self) -> QubitStates:
        return self.branches.qubits[0]

    def per_sample(self, times) -> np.ndarray:
        """gCCE coherence per branch, shape (n_branches, n_times).

        Branches are the core basis states for the mixed policy and, for the
        sampled policy, every sampled bath state combined with every core
        basis state; their plain mean is the coherence.
        """
        kind = self.protocol.kind
        curves = {c: self.branches.cluster_curves(self.solvers[c], c.member_ids, kind, times) for c in self.clusters}
        return combine_gcce(curves)

    def curve(self, times) -> CoherenceCurve:
        values = self.per_sample(times).mean(axis=0)
        over = int(np.count_nonzero(np.abs(values) > 1 + 1e-6))
        if over:
            log.debug("gCCE coherence exceeds unity at %d time points", over)
        freqs = [q.frequency for q in self.branches.qubits]
        meta = {
            "protocol": self.protocol.tag,
            "config_hash": problem_hash(self.problem, self.protocol),
            "seed": self.problem.cce.seed,
            "cluster_counts": self.counts,
            "bath_state_policy": self.problem.cce.bath_state_policy.value,
            "qubit_frequency_mhz": freqs[0],
            "branch_frequencies_mhz": freqs,
            "points_above_unity": over,
        }
        return CoherenceCurve(np.asarray(times, dtype=float), values, meta)


def gcce_coherence(problem: CoherenceProblem, protocol: PulseProtocol, times) -> CoherenceCurve:
    return GcceSolver(problem, protocol).curve(times)


def exact_coherence(
    problem: CoherenceProblem,
    protocol: PulseProtocol,
    times,
    states: np.ndarray | None = None,
) -> CoherenceCurve:
    """Full Hilbert-space reference with the same qubit branches as the expansion.

    Non-core spins are maximally mixed unless product ``states`` (n, n_spins)
    are given, in which case the result is their average.
    """
    system = full_system(problem)
    core = resolve_core(problem.bath, problem.cce)
    branches = _Branches(problem, protocol, core, None if states is None else np.atleast_2d(states).astype(np.int64))
    values = branches.cluster_curves(SystemSolver(system), range(len(problem.bath)), protocol.kind, np.asarray(times, float))
    meta = {"protocol": protocol.tag, "method": "exact", "dimension": system.dim}
    return CoherenceCurve(times, values.mean(axis=0), meta)


def load_validation_suite() -> list[dict]:
    """Pinned small-bath instances used to compare expansion orders against the exact result."""
    from importlib import resources

    from .bath import bath_from_json

    data = json.loads(resources.files("nvcce").joinpath("data/validation_suite.json").read_text())
    out = []
    for inst in data["instances"]:
        inst = dict(inst)
        inst["bath"] = bath_from_json(inst["bath"])
        inst["times"] = np.linspace(0.0, inst["t_max_us"], inst["n_times"])
        out.append(inst)
    return out

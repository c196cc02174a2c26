"""Spin operators, the central-spin Hamiltonian and unitary propagation.

Units are fixed throughout the package: fields in Gauss, couplings and
Hamiltonian entries in MHz (linear frequency), times in microseconds and
distances in Angstrom.  The factor 2*pi appears only in :func:`propagate`
and :func:`evolution_phases`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache, reduce
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg

from .errors import ConfigurationError, NumericalError

DEFAULT_DIMENSION_CAP = 4096

# Gyromagnetic ratios in MHz/G (linear frequency).  Electron: free-electron
# g-factor times the Bohr magneton over h.  Nuclei: CODATA / NIST shielded
# values gamma/2pi.
GYRO_ELECTRON = 2.802495
GYRO_C13 = 1.07084e-3
GYRO_N15 = -0.43173e-3
GYRO_H1 = 4.25775e-3
GYRO_F19 = 4.00776e-3


@dataclass(frozen=True)
class SpinSpecies:
    label: str
    spin: float
    gyro: float

    def __post_init__(self):
        if self.spin not in (0.5, 1.0):
            raise ConfigurationError(f"unsupported spin {self.spin} for {self.label!r}")
        if not np.isfinite(self.gyro) or self.gyro == 0.0:
            raise ConfigurationError(f"gyromagnetic ratio of {self.label!r} must be finite and nonzero")

    @property
    def dim(self) -> int:
        return int(round(2 * self.spin + 1))


ELECTRON = SpinSpecies("e", 1.0, GYRO_ELECTRON)
C13 = SpinSpecies("13C", 0.5, GYRO_C13)
N15 = SpinSpecies("15N", 0.5, GYRO_N15)
H1 = SpinSpecies("1H", 0.5, GYRO_H1)
F19 = SpinSpecies("19F", 0.5, GYRO_F19)

SPECIES = {s.label: s for s in (C13, N15, H1, F19)}


def species_from_label(label: str, gyro_overrides: Mapping[str, float] | None = None) -> SpinSpecies:
    try:
        base = SPECIES[label]
    except KeyError:
        raise ConfigurationError(f"unknown nuclear species {label!r}; known: {sorted(SPECIES)}") from None
    if gyro_overrides and label in gyro_overrides:
        return SpinSpecies(base.label, base.spin, float(gyro_overrides[label]))
    return base


@dataclass(frozen=True)
class HyperfineTensor:
    """3x3 coupling tensor in MHz, expressed in the central-spin frame."""

    a: np.ndarray

    def __post_init__(self):
        a = np.array(self.a, dtype=float).reshape(3, 3)
        if not np.all(np.isfinite(a)):
            raise ConfigurationError("hyperfine tensor has non-finite entries")
        scale = np.abs(a).max()
        if scale > 0 and np.abs(a - a.T).max() > 1e-6 * scale:
            raise ConfigurationError("hyperfine tensor is not symmetric")
        a.setflags(write=False)
        object.__setattr__(self, "a", a)

    @property
    def azz(self) -> float:
        return float(self.a[2, 2])

    @classmethod
    def axial(cls, a_perp: float, a_par: float) -> "HyperfineTensor":
        return cls(np.diag([a_perp, a_perp, a_par]))

    def secular(self) -> "HyperfineTensor":
        """Keep only the S_z I_z component."""
        return HyperfineTensor(np.diag([0.0, 0.0, self.azz]))


@dataclass(frozen=True)
class CentralSpinModel:
    """S=1 defect electron spin with zero-field splitting D and E (MHz)."""

    D: float
    E: float = 0.0
    species: SpinSpecies = ELECTRON
    frame: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        if self.species.spin != 1.0:
            raise ConfigurationError("central spin must be S=1")
        if not (np.isfinite(self.D) and np.isfinite(self.E)):
            raise ConfigurationError("D and E must be finite")
        if abs(self.E) > abs(self.D):
            raise ConfigurationError(f"|E|={abs(self.E)} exceeds |D|={abs(self.D)}")
        frame = np.array(self.frame, dtype=float).reshape(3, 3)
        if np.abs(frame.T @ frame - np.eye(3)).max() > 1e-12 or np.linalg.det(frame) < 0:
            raise ConfigurationError("central-spin frame must be a right-handed orthonormal triad")
        frame.setflags(write=False)
        object.__setattr__(self, "frame", frame)


@dataclass(frozen=True)
class NuclearSpin:
    species: SpinSpecies
    hyperfine: HyperfineTensor
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SpinSystem:
    """Central electron plus an ordered list of nuclear spins in a static field.

    ``pair_couplings`` maps index pairs ``(i, j)`` with ``i < j`` to 3x3
    nuclear-nuclear tensors in MHz.  ``nuclear_zeeman=False`` drops the
    nuclear Zeeman terms (used for frozen-bath checks).
    """

    central: CentralSpinModel
    spins: tuple[NuclearSpin, ...] = ()
    pair_couplings: Mapping[tuple[int, int], np.ndarray] = field(default_factory=dict)
    field: tuple[float, float, float] = (0.0, 0.0, 0.0)
    nuclear_zeeman: bool = True
    dimension_cap: int = DEFAULT_DIMENSION_CAP

    def __post_init__(self):
        object.__setattr__(self, "spins", tuple(self.spins))
        object.__setattr__(self, "field", tuple(float(b) for b in self.field))
        if not np.all(np.isfinite(self.field)):
            raise ConfigurationError("magnetic field has non-finite entries")
        if self.dim > self.dimension_cap:
            raise ConfigurationError(
                f"Hilbert dimension {self.dim} exceeds cap {self.dimension_cap} ({len(self.spins)} nuclear spins)"
            )
        n = len(self.spins)
        couplings = {}
        for (i, j), tensor in self.pair_couplings.items():
            if not (0 <= i < j < n):
                raise ConfigurationError(f"pair coupling key {(i, j)} must satisfy 0 <= i < j < {n}")
            t = np.array(tensor, dtype=float).reshape(3, 3)
            scale = np.abs(t).max()
            if not np.all(np.isfinite(t)):
                raise ConfigurationError(f"pair coupling {(i, j)} has non-finite entries")
            if scale > 0 and (np.abs(t - t.T).max() > 1e-9 * scale or abs(np.trace(t)) > 1e-9 * scale):
                raise ConfigurationError(f"pair coupling {(i, j)} must be symmetric and traceless")
            couplings[(i, j)] = t
        object.__setattr__(self, "pair_couplings", couplings)

    @property
    def dims(self) -> list[int]:
        return [3] + [s.species.dim for s in self.spins]

    @property
    def dim(self) -> int:
        return int(np.prod(self.dims))

    @property
    def nuclear_dim(self) -> int:
        return self.dim // 3


@lru_cache(maxsize=None)
def _spin_matrices(spin: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    m = np.arange(spin, -spin - 1, -1)  # basis ordered m = +S ... -S
    sz = np.diag(m).astype(complex)
    # <m+1|S+|m> = sqrt(S(S+1) - m(m+1))
    sp = np.diag(np.sqrt(spin * (spin + 1) - m[1:] * (m[1:] + 1)), k=1).astype(complex)
    sx = (sp + sp.conj().T) / 2
    sy = (sp - sp.conj().T) / 2j
    for op in (sx, sy, sz):
        op.setflags(write=False)
    return sx, sy, sz


def spin_operators(species: SpinSpecies | float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (Sx, Sy, Sz) for spin 1/2 or 1 in the |m=+S>, ..., |m=-S> basis."""
    spin = species.spin if isinstance(species, SpinSpecies) else float(species)
    if spin not in (0.5, 1.0):
        raise ConfigurationError(f"unsupported spin value {spin}")
    return _spin_matrices(spin)


def embed(ops: Mapping[int, np.ndarray], dims: Sequence[int]) -> np.ndarray:
    """Kronecker product placing ``ops[k]`` on subsystem k and identities elsewhere."""
    factors = [ops.get(k, np.eye(d)) for k, d in enumerate(dims)]
    return reduce(np.kron, factors)


def electron_hamiltonian(central: CentralSpinModel, b: Sequence[float]) -> np.ndarray:
    """Three-level electron Hamiltonian: zero-field splitting plus Zeeman."""
    sx, sy, sz = spin_operators(central.species)
    s = (sx, sy, sz)
    h = central.D * (sz @ sz - (2.0 / 3.0) * np.eye(3)) + central.E * (sx @ sx - sy @ sy)
    g = central.species.gyro
    for k in range(3):
        h = h + g * b[k] * s[k]
    return h


def build_hamiltonian(system: SpinSystem) -> np.ndarray:
    dims = system.dims
    b = np.asarray(system.field)
    h = embed({0: electron_hamiltonian(system.central, b)}, dims)
    s_ops = spin_operators(system.central.species)
    nuclear_ops = [spin_operators(sp.species) for sp in system.spins]
    for i, sp in enumerate(system.spins, start=1):
        ii = nuclear_ops[i - 1]
        a = sp.hyperfine.a
        for p in range(3):
            for q in range(3):
                if a[p, q] != 0.0:
                    h += a[p, q] * embed({0: s_ops[p], i: ii[q]}, dims)
        if system.nuclear_zeeman:
            local = -sp.species.gyro * sum(b[k] * ii[k] for k in range(3))
            h += embed({i: local}, dims)
    for (i, j), jt in system.pair_couplings.items():
        oi, oj = nuclear_ops[i], nuclear_ops[j]
        for p in range(3):
            for q in range(3):
                if jt[p, q] != 0.0:
                    h += jt[p, q] * embed({i + 1: oi[p], j + 1: oj[q]}, dims)
    return h


def _canonical_block(vecs: np.ndarray) -> np.ndarray:
    """Basis of a degenerate subspace that depends only on the subspace itself."""
    m = vecs.shape[1]
    proj = vecs @ vecs.conj().T
    q, _, _ = scipy.linalg.qr(proj, pivoting=True)
    return q[:, :m]


def _fix_phases(vecs: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vecs) > np.abs(vecs).max(axis=0) * (1 - 1e-9), axis=0)
    ph = vecs[idx, np.arange(vecs.shape[1])]
    return vecs * (np.abs(ph) / ph)


def eigendecompose(h: np.ndarray, reference: np.ndarray | None = None, degeneracy_tol: float = 1e-10):
    """Ascending eigenvalues and orthonormal eigenvectors of a Hermitian matrix.

    Eigenvectors inside a degenerate block are replaced by a canonical basis
    of the block; they are ordered by descending overlap with ``reference``
    columns when given, else by the position of their largest component.
    Every column is phased so its largest component is real and positive.
    """
    h = np.asarray(h)
    if not np.all(np.isfinite(h)):
        raise NumericalError("matrix has non-finite entries", matrix=h)
    try:
        w, v = np.linalg.eigh(h)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed: {exc}", matrix=h) from exc
    scale = max(np.abs(h).max(), 1.0)
    start = 0
    n = len(w)
    while start < n:
        stop = start + 1
        while stop < n and w[stop] - w[stop - 1] <= degeneracy_tol * scale:
            stop += 1
        if stop - start > 1:
            block = _canonical_block(v[:, start:stop])
            if reference is not None:
                ov = np.abs(np.asarray(reference).conj().T @ block) ** 2
                order = np.argsort(-ov.max(axis=0), kind="stable")
            else:
                lead = np.argmax(np.abs(block) ** 2 > (np.abs(block) ** 2).max(axis=0) * (1 - 1e-9), axis=0)
                order = np.argsort(lead, kind="stable")
            v[:, start:stop] = block[:, order]
        start = stop
    return w, _fix_phases(v)


def evolution_phases(eigenvalues: np.ndarray, times) -> np.ndarray:
    """exp(-i 2pi lambda_k t) as an (n_levels, n_times) array."""
    return np.exp(-2j * np.pi * np.outer(eigenvalues, np.atleast_1d(times)))


def evolution_operator(h: np.ndarray, t: float) -> np.ndarray:
    if t < 0:
        raise ConfigurationError("propagation time must be non-negative")
    w, v = eigendecompose(h)
    return (v * evolution_phases(w, t)[:, 0]) @ v.conj().T


def propagate(h: np.ndarray, t: float, state: np.ndarray) -> np.ndarray:
    """Evolve a pure state (1-D) or density matrix (2-D) for time t (us) under H (MHz)."""
    u = evolution_operator(h, t)
    state = np.asarray(state)
    if state.ndim == 1:
        return u @ state
    return u @ state @ u.conj().T

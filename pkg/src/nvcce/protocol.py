"""Measurement protocols and the coherence kernel for a single spin system.

The kernel evaluates the off-diagonal element <a|rho_e(t)|b> of the
central-spin reduced density matrix, normalised by its t=0 value, for
nuclear product basis states.  Pulses are ideal, instantaneous and act as
identity on every nuclear spin.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence, Union

import numpy as np

from .errors import ConfigurationError, NumericalError
from .spin_core import CentralSpinModel, SpinSystem, build_hamiltonian, eigendecompose, electron_hamiltonian, spin_operators

# keeps the (levels x states x times) work arrays below ~64 MB
_CHUNK_ELEMENTS = 4_000_000


class ProtocolKind(str, Enum):
    RAMSEY = "ramsey"
    HAHN_ECHO = "hahn_echo"


class QubitSelector(str, Enum):
    MS0_TO_LOWER_BRANCH = "ms0_to_lower_branch"
    MS0_TO_UPPER_BRANCH = "ms0_to_upper_branch"


Selector = Union[QubitSelector, tuple[int, int]]


def parse_selector(value) -> Selector:
    if isinstance(value, QubitSelector):
        return value
    if isinstance(value, str):
        return QubitSelector(value)
    a, b = value
    return (int(a), int(b))


@dataclass(frozen=True)
class PulseProtocol:
    """Ramsey (free induction decay) or Hahn echo on a chosen qubit pair.

    For ``hahn_echo`` the time axis is the total free evolution tau, split as
    tau/2 - pi - tau/2.
    """

    kind: ProtocolKind = ProtocolKind.RAMSEY
    qubit_selector: Selector = QubitSelector.MS0_TO_LOWER_BRANCH

    def __post_init__(self):
        object.__setattr__(self, "kind", ProtocolKind(self.kind))
        object.__setattr__(self, "qubit_selector", parse_selector(self.qubit_selector))

    @property
    def tag(self) -> str:
        sel = self.qubit_selector
        sel = sel.value if isinstance(sel, QubitSelector) else f"levels{sel[0]}-{sel[1]}"
        return f"{self.kind.value}:{sel}"


RAMSEY = PulseProtocol(ProtocolKind.RAMSEY)
HAHN_ECHO = PulseProtocol(ProtocolKind.HAHN_ECHO)


@dataclass(frozen=True)
class QubitStates:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    energies: np.ndarray

    @property
    def frequency(self) -> float:
        return float(self.energies[1] - self.energies[0])


def qubit_states(
    central: CentralSpinModel,
    field: Sequence[float],
    selector: Selector,
    hyperfine_field: Sequence[float] | None = None,
) -> QubitStates:
    """Qubit levels of the electron Hamiltonian at the working field.

    ``hyperfine_field`` (MHz, per electron spin component) adds the static
    field of nuclear spins frozen in a basis state, so the qubit follows the
    hyperfine branch it lives in.  Levels are indexed in ascending energy.
    ``ms0_*`` selectors pick the level with the largest |m_s=0> weight as
    ``a`` and the lower/upper of the remaining two as ``b``.
    """
    h = electron_hamiltonian(central, field)
    if hyperfine_field is not None:
        ops = spin_operators(central.species)
        h = h + sum(float(hyperfine_field[p]) * ops[p] for p in range(3))
    w, v = eigendecompose(h)
    if isinstance(selector, QubitSelector):
        i0 = int(np.argmax(np.abs(v[1, :]) ** 2))  # basis index 1 is m_s = 0
        rest = [k for k in range(3) if k != i0]
        j = rest[0] if selector is QubitSelector.MS0_TO_LOWER_BRANCH else rest[1]
    else:
        i0, j = selector
        if not (0 <= i0 < 3 and 0 <= j < 3):
            raise ConfigurationError(f"qubit level indices {selector} out of range 0..2")
    if i0 == j:
        raise ConfigurationError("qubit selector picks the same level twice")
    scale = max(np.abs(w).max(), 1.0)
    if abs(w[i0] - w[j]) <= 1e-12 * scale:
        raise ConfigurationError(f"qubit levels {i0} and {j} are degenerate")
    k = ({0, 1, 2} - {i0, j}).pop()
    return QubitStates(v[:, i0], v[:, j], v[:, k], np.array([w[i0], w[j]]))


def basis_index(states: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Flat nuclear-basis index of product states given per-spin level indices."""
    states = np.atleast_2d(np.asarray(states, dtype=np.int64))
    strides = np.ones(len(dims), dtype=np.int64)
    for k in range(len(dims) - 2, -1, -1):
        strides[k] = strides[k + 1] * dims[k + 1]
    return states @ strides if len(dims) else np.zeros(len(states), dtype=np.int64)


class SystemSolver:
    """Eigendecomposition of one spin system, reusable across time grids and qubit choices."""

    def __init__(self, system: SpinSystem, qubits: QubitStates | None = None):
        self.system = system
        self.qubits = qubits
        self.dims = system.dims
        self.nuclear_dim = system.nuclear_dim
        h = build_hamiltonian(system)
        try:
            self.w, self.v = np.linalg.eigh(h)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"eigendecomposition failed: {exc}", matrix=h) from exc
        self._vr_conj = self.v.reshape(3, self.nuclear_dim, len(self.w)).conj()

    def _project(self, phi: np.ndarray, q: QubitStates) -> np.ndarray:
        """<a|rho_e|b> contribution of eigenbasis amplitudes phi (d, ...)."""
        psi = np.tensordot(self.v, phi, axes=(1, 0)).reshape(3, self.nuclear_dim, *phi.shape[1:])
        alpha = np.tensordot(q.a.conj(), psi, axes=(0, 0))
        beta = np.tensordot(q.b.conj(), psi, axes=(0, 0))
        return np.sum(alpha * beta.conj(), axis=0)

    def _apply_pulse(self, phi: np.ndarray, pulse: np.ndarray) -> np.ndarray:
        psi = np.tensordot(self.v, phi, axes=(1, 0)).reshape(3, self.nuclear_dim, *phi.shape[1:])
        psi = np.tensordot(pulse, psi, axes=(1, 0)).reshape(phi.shape)
        return np.tensordot(self.v.conj().T, psi, axes=(1, 0))

    def coherence(
        self,
        kind: ProtocolKind,
        times,
        state_index: np.ndarray | None = None,
        qubits: QubitStates | None = None,
    ) -> np.ndarray:
        """Normalised coherence per nuclear basis state, shape (n_states, n_times).

        ``state_index=None`` evaluates the maximally mixed nuclear state and
        returns shape (n_times,).
        """
        q = self.qubits if qubits is None else qubits
        if q is None:
            raise ConfigurationError("no qubit states given")
        kind = ProtocolKind(kind)
        times = np.asarray(times, dtype=float)
        if np.any(times < 0):
            raise ConfigurationError("times must be non-negative")
        mixed = state_index is None
        idx = np.arange(self.nuclear_dim) if mixed else np.asarray(state_index, dtype=np.int64)
        psi_e = (q.a + q.b) / np.sqrt(2.0)
        # eigenbasis amplitudes of psi_e (x) |k> for the requested nuclear basis states
        u = np.tensordot(psi_e, self._vr_conj[:, idx, :], axes=(0, 0)).T
        norm = self._project(u, q)
        d, ns = u.shape
        pulse = None
        if kind is ProtocolKind.HAHN_ECHO:
            pulse = np.outer(q.a, q.b.conj()) + np.outer(q.b, q.a.conj()) + np.outer(q.c, q.c.conj())
        out = np.empty((ns, len(times)), dtype=complex)
        step = max(1, _CHUNK_ELEMENTS // max(1, d * ns))
        for start in range(0, len(times), step):
            t = times[start : start + step]
            if kind is ProtocolKind.RAMSEY:
                ph = np.exp(-2j * np.pi * np.outer(self.w, t))
                phi = u[:, :, None] * ph[:, None, :]
            else:
                ph = np.exp(-1j * np.pi * np.outer(self.w, t))  # half of tau
                phi = u[:, :, None] * ph[:, None, :]
                phi = self._apply_pulse(phi, pulse) * ph[:, None, :]
            out[:, start : start + step] = self._project(phi, q)
        if kind is ProtocolKind.HAHN_ECHO:
            # the pi pulse maps <a|rho|b> onto <b|rho|a>
            out = out.conj()
        out /= norm[:, None]
        return out.mean(axis=0) if mixed else out

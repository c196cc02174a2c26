"""Ramsey and Hahn-echo runs, and decay-time extraction from coherence curves."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np
from scipy.optimize import OptimizeWarning, curve_fit

from .cce import CoherenceCurve, CoherenceProblem, GcceSolver
from .errors import ConfigurationError
from .protocol import HAHN_ECHO, RAMSEY, ProtocolKind, PulseProtocol, QubitSelector

__all__ = [
    "PulseProtocol",
    "ProtocolKind",
    "QubitSelector",
    "DecayMethod",
    "DecayFit",
    "run_ramsey",
    "run_hahn_echo",
    "decay_envelope",
    "extract_decay_time",
    "adaptive_decay",
    "DecayWindow",
]

log = logging.getLogger(__name__)

UNRESOLVED = "unresolved within window"
EXPONENT_BOUNDS = (0.5, 4.0)


class DecayMethod(str, Enum):
    ONE_OVER_E = "one_over_e"
    STRETCHED_FIT = "stretched_fit"


@dataclass(frozen=True)
class DecayFit:
    """Characteristic decay time of |L|.

    ``resolved=False`` means the window did not contain a usable decay;
    ``t_char`` is then NaN and ``reason`` says why.
    """

    t_char: float
    exponent: Optional[float]
    method: DecayMethod
    residual: Optional[float]
    resolved: bool = True
    reason: str = ""

    def __post_init__(self):
        object.__setattr__(self, "method", DecayMethod(self.method))
        if self.resolved and not (np.isfinite(self.t_char) and self.t_char > 0):
            raise ValueError("resolved DecayFit needs a positive finite t_char")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = self.method.value
        if not self.resolved:
            d["t_char"] = None
        return d


@dataclass(frozen=True)
class DecayWindow:
    """Starting window and sampling for adaptive decay extraction."""

    t_max: float = 10.0
    n_points: int = 512
    max_doublings: int = 8
    method: DecayMethod = DecayMethod.ONE_OVER_E

    def __post_init__(self):
        object.__setattr__(self, "method", DecayMethod(self.method))
        if not self.t_max > 0 or self.n_points < 8 or self.max_doublings < 0:
            raise ConfigurationError("decay window needs t_max > 0, n_points >= 8, max_doublings >= 0")

    def run(self, evaluate: Callable[[np.ndarray], CoherenceCurve]) -> tuple[DecayFit, CoherenceCurve]:
        return adaptive_decay(evaluate, self.t_max, self.n_points, self.method, self.max_doublings)


def _protocol(kind: ProtocolKind, selector) -> PulseProtocol:
    return PulseProtocol(kind, selector if selector is not None else QubitSelector.MS0_TO_LOWER_BRANCH)


def run_ramsey(problem: CoherenceProblem, times, qubit_selector=None) -> CoherenceCurve:
    """Free induction decay between two ideal pi/2 pulses."""
    protocol = RAMSEY if qubit_selector is None else _protocol(ProtocolKind.RAMSEY, qubit_selector)
    return GcceSolver(problem, protocol).curve(times)


def run_hahn_echo(problem: CoherenceProblem, taus, qubit_selector=None) -> CoherenceCurve:
    """Echo coherence against total free evolution tau."""
    protocol = HAHN_ECHO if qubit_selector is None else _protocol(ProtocolKind.HAHN_ECHO, qubit_selector)
    return GcceSolver(problem, protocol).curve(taus)


# a dip-and-rise smaller than this fraction of the preceding peak is not an oscillation
OSCILLATION_DEPTH = 0.05


def decay_envelope(times, magnitude) -> tuple[np.ndarray, np.ndarray]:
    """Monotone upper hull of the local maxima of |L|.

    Between two local maxima the samples are candidate vertices only when the
    curve does not really oscillate there (rise after the dip below
    ``OSCILLATION_DEPTH`` of the earlier peak), so a smooth decay is its own
    envelope while the flanks of a genuine oscillation are bridged.  Each kept
    vertex exceeds all later candidates; ties keep the leftmost point.
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(magnitude, dtype=float)
    n = len(y)
    peaks = [0]
    if n > 2:
        peaks += list(np.flatnonzero((y[1:-1] >= y[:-2]) & (y[1:-1] >= y[2:])) + 1)
    cand = np.zeros(n, dtype=bool)
    cand[peaks] = True
    for p, q in zip(peaks[:-1], peaks[1:]):
        if y[q] - y[p : q + 1].min() < OSCILLATION_DEPTH * y[p]:
            cand[p:q] = True
    cand[peaks[-1] :] = True
    keep = []
    best = -np.inf
    for i in np.flatnonzero(cand)[::-1]:
        if y[i] >= best:
            if keep and y[keep[-1]] == y[i]:
                keep[-1] = i
            else:
                keep.append(i)
            best = y[i]
    keep = keep[::-1]
    return t[keep], y[keep]


def _tail_needed(n: int) -> int:
    return max(3, int(np.ceil(0.05 * n)))


def _unresolved(method, why) -> DecayFit:
    return DecayFit(float("nan"), None, method, None, resolved=False, reason=f"{UNRESOLVED}: {why}")


def _stretched(t, tc, n):
    return np.exp(-((t / tc) ** n))


def extract_decay_time(curve: CoherenceCurve, method=DecayMethod.ONE_OVER_E) -> DecayFit:
    method = DecayMethod(method)
    t = np.asarray(curve.times, dtype=float)
    if len(t) < 4 or np.any(np.diff(t) <= 0):
        raise ConfigurationError("decay extraction needs at least 4 strictly increasing time points")
    mag = np.abs(curve.values)
    vt, vy = decay_envelope(t, mag)
    env = np.interp(t, vt, vy)
    threshold = np.exp(-1.0)

    below = np.flatnonzero(env < threshold)
    if method is DecayMethod.ONE_OVER_E:
        if len(below) == 0:
            return _unresolved(method, f"envelope stays above 1/e (min {env.min():.3g})")
        i = below[0]
        if i == 0:
            return _unresolved(method, "curve starts below 1/e")
        if len(t) - i - 1 < _tail_needed(len(t)):
            return _unresolved(method, "crossing too close to the end of the window")
        # linear interpolation inside the segment that crosses
        t0, t1, y0, y1 = t[i - 1], t[i], env[i - 1], env[i]
        tc = t0 + (y0 - threshold) * (t1 - t0) / (y0 - y1)
        return DecayFit(float(tc), None, method, None)

    scale = env[0] if env[0] > 0 else 1.0
    target = env / scale
    t_max = t[-1]
    guess_t = t[below[0]] if len(below) else t_max
    with warnings.catch_warnings():
        warnings.simplefilter("error", OptimizeWarning)
        try:
            popt, _ = curve_fit(
                _stretched,
                t,
                target,
                p0=(guess_t, 1.5),
                bounds=((t[1] * 1e-3, EXPONENT_BOUNDS[0]), (np.inf, EXPONENT_BOUNDS[1])),
                maxfev=20000,
            )
        except (RuntimeError, OptimizeWarning, ValueError) as exc:
            return _unresolved(method, f"fit did not converge ({exc})")
    tc, n = map(float, popt)
    if tc > 2 * t_max:
        # a T beyond the window is an extrapolation, not a measurement
        return _unresolved(method, f"fitted T = {tc:.3g} us lies beyond the window")
    residual = float(np.sqrt(np.mean((_stretched(t, tc, n) - target) ** 2)))
    return DecayFit(tc, n, method, residual)


def adaptive_decay(
    evaluate: Callable[[np.ndarray], CoherenceCurve],
    t_max: float,
    n_points: int = 512,
    method=DecayMethod.ONE_OVER_E,
    max_doublings: int = 8,
    min_crossing_index: int = 64,
) -> tuple[DecayFit, CoherenceCurve]:
    """Decay time with a window that grows until the decay is seen.

    The window doubles while unresolved.  When the 1/e crossing lands in the
    first ``min_crossing_index`` samples it is shrunk once so the decay is
    sampled finely enough.
    """
    if t_max <= 0 or n_points < 8:
        raise ConfigurationError("adaptive window needs t_max > 0 and n_points >= 8")
    shrunk = False
    for _ in range(max_doublings + 1):
        times = np.linspace(0.0, t_max, n_points)
        curve = evaluate(times)
        fit = extract_decay_time(curve, method)
        if not fit.resolved:
            t_max *= 2
            continue
        if not shrunk and fit.t_char < t_max * min_crossing_index / n_points:
            shrunk = True
            t_max = 4 * fit.t_char
            continue
        return fit, curve
    log.info("decay unresolved after %d window doublings", max_doublings)
    return fit, curve

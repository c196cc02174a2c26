"""CSV and JSON artifacts.

Every file is written to a temporary sibling and renamed into place, so a
crashed run never leaves a half-written result behind.  Floats go through
``repr`` which round-trips exactly and does not depend on locale.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cce import CoherenceCurve
from .fields import LevelDiagram, OdmrSpectrum, SweepResult

__all__ = [
    "atomic_write_text",
    "write_json",
    "format_float",
    "write_csv",
    "write_curve",
    "write_sweep",
    "write_level_diagram",
    "write_odmr",
    "read_csv",
    "to_jsonable",
]


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def format_float(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def to_jsonable(obj):
    """Plain JSON types; non-finite floats become null."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return obj.value
    if hasattr(obj, "to_dict"):
        return to_jsonable(obj.to_dict())
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return to_jsonable(dataclasses.asdict(obj))
    return obj


def write_json(path, payload) -> Path:
    return atomic_write_text(path, json.dumps(to_jsonable(payload), indent=2, sort_keys=True) + "\n")


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return atomic_write_text(path, buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _sidecar(path) -> Path:
    return Path(path).with_suffix(".json")


def write_curve(path, curve: CoherenceCurve, extra: dict | None = None) -> Path:
    v = np.asarray(curve.values, dtype=complex)
    rows = zip(curve.times, v.real, v.imag, np.abs(v))
    write_csv(path, ("time_us", "re_L", "im_L", "abs_L"), rows)
    write_json(_sidecar(path), {**curve.metadata, **(extra or {})})
    return Path(path)


def write_sweep(path, sweep: SweepResult, extra: dict | None = None) -> Path:
    method = sweep.metadata.get("window", {}).get("method", "one_over_e")
    rows = (
        (float(b), float(t), method, int(ok), float(g))
        for b, t, ok, g in zip(sweep.b0, sweep.t2, sweep.resolved, sweep.gap_nearest_ct)
    )
    write_csv(path, ("b0_gauss", "t2_us", "method", "resolved_flag", "gap_mhz_nearest_ct"), rows)
    meta = {**sweep.metadata, "fits": [f.to_dict() for f in sweep.fits], **(extra or {})}
    write_json(_sidecar(path), meta)
    return Path(path)


def write_level_diagram(path, diagram: LevelDiagram, extra: dict | None = None) -> Path:
    n_b, n_lv = diagram.tracks.shape
    rows = ((float(diagram.b0[i]), k, float(diagram.tracks[i, k])) for i in range(n_b) for k in range(n_lv))
    write_csv(path, ("b_gauss", "track_id", "energy_mhz"), rows)
    meta = {"geometry": diagram.geometry, "splits": diagram.splits, "n_levels": n_lv, **(extra or {})}
    write_json(_sidecar(path), meta)
    return Path(path)


def write_odmr(path, spectrum: OdmrSpectrum, extra: dict | None = None) -> Path:
    write_csv(path, ("frequency_mhz", "intensity"), zip(spectrum.frequencies, spectrum.intensity))
    meta = {
        "linewidth_fwhm_mhz": spectrum.linewidth,
        "lines": [{"frequency_mhz": f, "amplitude": a} for f, a in zip(spectrum.line_freqs, spectrum.line_amps)],
        "peaks_mhz": spectrum.peaks(),
        "total_amplitude": spectrum.total_amplitude,
        **(extra or {}),
    }
    write_json(_sidecar(path), meta)
    return Path(path)

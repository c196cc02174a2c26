"""Run configuration: a versioned JSON schema and its translation into domain objects.

Units are fixed (G, MHz, us, angstrom).  Unknown keys are rejected so typos
never pass silently.  Bath files are resolved relative to the config file.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .bath import (
    C13_NATURAL_ABUNDANCE,
    DIAMOND_LATTICE_CONSTANT,
    BathSpin,
    LatticeConfig,
    SurfaceConfig,
    assign_hyperfine,
    bath_from_json,
    bath_to_json,
    generate_bulk_bath,
    generate_surface_bath,
    nitrogen_spin,
    read_hyperfine_table,
    sort_bath,
    truncate_bath,
)
from .cce import CceConfig, CoherenceProblem
from .errors import ConfigurationError
from .fields import FieldGeometry
from .protocol import PulseProtocol
from .pulses import DecayWindow
from .spin_core import CentralSpinModel

SCHEMA_VERSION = 1

Scenario = Literal["fid_sweep", "echo_depth_scan", "level_diagram", "clock_find", "odmr", "oracle_check"]


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CentralSection(_Model):
    D: float = 2870.0
    E: float = 0.0

    @model_validator(mode="after")
    def _check(self):
        if abs(self.E) > abs(self.D):
            raise ValueError("|E| must not exceed |D|")
        return self


class NitrogenSection(_Model):
    a_par: float = 3.03
    a_perp: float = 3.65


class SpinRecord(_Model):
    species: str
    position: tuple[float, float, float]
    tensor: tuple[tuple[float, float, float], tuple[float, float, float], tuple[float, float, float]]
    provenance: Literal["point_dipole", "tabulated"] = "tabulated"


class SurfaceSection(_Model):
    termination: Literal["fluorine", "hydrogen", "mixed"] = "mixed"
    depth: float = Field(12.0, gt=0)
    mix_ratio: float = Field(0.7, ge=0, le=1)
    lateral_extent: float = Field(60.0, gt=0)


class BathSection(_Model):
    """Composable bath: nitrogen, random bulk 13C, a termination layer, files and inline spins."""

    lattice_constant: float = Field(DIAMOND_LATTICE_CONSTANT, gt=0)
    abundance: float = Field(C13_NATURAL_ABUNDANCE, ge=0, le=1)
    r_bath: float = Field(30.0, gt=0)
    bulk: bool = False
    exclude_nitrogen_site: bool = True
    nitrogen: Optional[NitrogenSection] = None
    surface: Optional[SurfaceSection] = None
    files: list[str] = []
    spins: list[SpinRecord] = []
    hyperfine_table: Optional[str] = None
    match_tolerance: float = Field(0.1, gt=0)
    max_abs_azz: Optional[float] = Field(None, gt=0)
    gyro_overrides: dict[str, float] = {}


class CceSection(_Model):
    order: Literal[1, 2] = 1
    core_spins: Optional[list[int]] = None
    r_dip: Optional[float] = Field(None, gt=0)
    bath_state_policy: Literal["exact_mixed", "sampled_product"] = "exact_mixed"
    n_samples: int = Field(25, ge=1)
    include_pair_couplings: bool = True
    nuclear_zeeman: bool = True

    @model_validator(mode="after")
    def _check(self):
        if self.order == 2 and self.r_dip is None:
            raise ValueError("r_dip is required when order = 2")
        return self


class ProtocolSection(_Model):
    kind: Literal["ramsey", "hahn_echo"] = "ramsey"
    qubit_selector: Literal["ms0_to_lower_branch", "ms0_to_upper_branch"] = "ms0_to_lower_branch"


class DecaySection(_Model):
    t_max: float = Field(10.0, gt=0)
    n_points: int = Field(512, ge=8)
    max_doublings: int = Field(8, ge=0)
    method: Literal["one_over_e", "stretched_fit"] = "one_over_e"


class GeometrySection(_Model):
    theta0: float = 60.0
    br: float = Field(0.0, ge=0)
    theta_r: float = 120.0
    phi: float = 0.0


class SweepSection(_Model):
    b0_min: float
    b0_max: float
    n_points: int = Field(41, ge=1)
    extra_points: list[float] = []
    include_clock_points: bool = True
    clock_scan_points: int = Field(801, ge=3)
    phi_values: Optional[list[float]] = None

    @model_validator(mode="after")
    def _check(self):
        if self.b0_max < self.b0_min or (self.n_points > 1 and self.b0_max == self.b0_min):
            raise ValueError("need b0_min < b0_max (or a single point)")
        return self

    def grid(self) -> np.ndarray:
        g = np.linspace(self.b0_min, self.b0_max, self.n_points)
        return np.unique(np.concatenate([g, self.extra_points]))


class LevelSection(_Model):
    b0_min: float
    b0_max: float
    n_points: int = Field(401, ge=3)
    spin_ids: Optional[list[int]] = None

    @model_validator(mode="after")
    def _check(self):
        if not self.b0_max > self.b0_min:
            raise ValueError("need b0_min < b0_max")
        return self


class OdmrSection(_Model):
    b0: float = 0.0
    linewidth: float = Field(1.0, gt=0)
    f_min: Optional[float] = None
    f_max: Optional[float] = None
    n_points: int = Field(4001, ge=3)
    polarization: Literal["x", "y"] = "x"
    spin_ids: Optional[list[int]] = None


class DepthField(_Model):
    """A named field: either an explicit vector or the nitrogen clock transition on the NV axis."""

    label: str
    vector: Optional[tuple[float, float, float]] = None
    clock: bool = False

    @model_validator(mode="after")
    def _check(self):
        if (self.vector is None) == (not self.clock):
            raise ValueError("give exactly one of vector or clock=true")
        return self


class DepthScanSection(_Model):
    depths: list[float] = Field(min_length=1)
    terminations: list[Literal["fluorine", "hydrogen", "mixed"]] = Field(min_length=1)
    mix_ratio: float = Field(0.7, ge=0, le=1)
    lateral_extent: float = Field(60.0, gt=0)
    fields: list[DepthField] = Field(min_length=1)

    @model_validator(mode="after")
    def _check(self):
        if any(d <= 0 for d in self.depths):
            raise ValueError("depths must be positive")
        return self


class OracleSection(_Model):
    t_max: float = Field(10.0, gt=0)
    n_points: int = Field(201, ge=2)
    b0: float = 0.0


class OutputSection(_Model):
    dir: str = "out"
    formats: list[Literal["csv"]] = ["csv"]


_REQUIRED = {
    "fid_sweep": "sweep",
    "echo_depth_scan": "depth_scan",
    "level_diagram": "level",
    "clock_find": "level",
    "odmr": "odmr",
    "oracle_check": "oracle",
}


class RunConfig(_Model):
    schema_version: Literal[1]
    scenario: Scenario
    seed: int = Field(0, ge=0, lt=2**64)
    central: CentralSection = CentralSection()
    bath: BathSection = BathSection()
    cce: CceSection = CceSection()
    protocol: ProtocolSection = ProtocolSection()
    decay: DecaySection = DecaySection()
    geometry: GeometrySection = GeometrySection()
    sweep: Optional[SweepSection] = None
    level: Optional[LevelSection] = None
    odmr: Optional[OdmrSection] = None
    depth_scan: Optional[DepthScanSection] = None
    oracle: Optional[OracleSection] = None
    output: OutputSection = OutputSection()

    @model_validator(mode="after")
    def _scenario_section(self):
        need = _REQUIRED[self.scenario]
        if getattr(self, need) is None:
            raise ValueError(f"scenario {self.scenario!r} needs a {need!r} section")
        if self.scenario == "echo_depth_scan" and self.bath.surface is not None:
            raise ValueError("echo_depth_scan builds its own surfaces; drop bath.surface")
        return self

    # -- domain objects -------------------------------------------------

    def central_model(self) -> CentralSpinModel:
        return CentralSpinModel(D=self.central.D, E=self.central.E)

    def lattice(self) -> LatticeConfig:
        b = self.bath
        return LatticeConfig(b.lattice_constant, b.abundance, b.r_bath, self.seed, b.exclude_nitrogen_site)

    def nitrogen(self) -> Optional[BathSpin]:
        n = self.bath.nitrogen
        return None if n is None else nitrogen_spin(n.a_perp, n.a_par, self.bath.lattice_constant)

    def fixed_spins(self) -> list[BathSpin]:
        """Inline spins (file-loaded spins are inlined when the config is resolved)."""
        return bath_from_json([s.model_dump() for s in self.bath.spins], self.bath.gyro_overrides)

    def build_bath(self, surface: Optional[SurfaceConfig] = None) -> list[BathSpin]:
        b = self.bath
        if b.files:
            raise ConfigurationError("bath files must be inlined first (use resolve_config)")
        random_part = []
        if b.bulk:
            random_part += generate_bulk_bath(self.lattice())
        surf = surface
        if surf is None and b.surface is not None:
            surf = SurfaceConfig(b.surface.termination, b.surface.depth, b.surface.mix_ratio, b.surface.lateral_extent)
        if surf is not None:
            random_part += generate_surface_bath(surf, self.lattice())
        if b.hyperfine_table is not None:
            random_part = assign_hyperfine(random_part, read_hyperfine_table(b.hyperfine_table, b.match_tolerance))
        if b.max_abs_azz is not None:
            random_part = truncate_bath(random_part, b.max_abs_azz)
        n = self.nitrogen()
        return sort_bath(([n] if n is not None else []) + self.fixed_spins() + random_part)

    def cce_config(self, core_spins=None) -> CceConfig:
        c = self.cce
        core = c.core_spins if core_spins is None else core_spins
        return CceConfig(
            order=c.order,
            core_spins=None if core is None else tuple(core),
            r_dip=c.r_dip,
            bath_state_policy=c.bath_state_policy,
            n_samples=c.n_samples,
            seed=self.seed,
            include_pair_couplings=c.include_pair_couplings,
            nuclear_zeeman=c.nuclear_zeeman,
        )

    def problem(self, field=(0.0, 0.0, 0.0)) -> CoherenceProblem:
        return CoherenceProblem(self.central_model(), self.build_bath(), tuple(field), self.cce_config())

    def pulse_protocol(self) -> PulseProtocol:
        return PulseProtocol(self.protocol.kind, self.protocol.qubit_selector)

    def window(self) -> DecayWindow:
        d = self.decay
        return DecayWindow(d.t_max, d.n_points, d.max_doublings, d.method)

    def field_geometry(self, phi: Optional[float] = None) -> FieldGeometry:
        g = self.geometry
        return FieldGeometry(0.0, g.theta0, g.br, g.theta_r, g.phi if phi is None else phi)


def format_validation_error(exc: ValidationError) -> list[str]:
    """One 'path: message' line per problem, e.g. 'bath.abundance: ...'."""
    out = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        out.append(f"{path}: {err['msg']}")
    return out


def read_config_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc


def load_config(path) -> RunConfig:
    """Parse and validate; raises pydantic.ValidationError or ConfigurationError."""
    return RunConfig.model_validate(read_config_json(path))


def resolve_config(cfg: RunConfig, base_dir) -> RunConfig:
    """Inline bath files and make the hyperfine-table path absolute.

    The result is self-contained: running it reproduces the original run.
    """
    base = Path(base_dir)
    b = cfg.bath
    spins = list(b.spins)
    for name in b.files:
        p = Path(name)
        p = p if p.is_absolute() else base / p
        try:
            records = json.loads(p.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigurationError(f"bath.files: cannot read {p}: {exc}") from exc
        # round-trip through the domain type so malformed records fail here
        spins += [SpinRecord(**r) for r in bath_to_json(bath_from_json(records, b.gyro_overrides))]
    table = b.hyperfine_table
    if table is not None and not Path(table).is_absolute():
        table = str((base / table).resolve())
    bath = b.model_copy(update={"files": [], "spins": spins, "hyperfine_table": table})
    return cfg.model_copy(update={"bath": bath})

"""Nuclear spin baths: lattice ¹³C, surface-termination ¹⁹F/¹H, hyperfine tensors.

Positions are in Angstrom in the central-spin frame, whose z axis is the
NV symmetry axis ([111] in crystal coordinates) and whose origin is the
vacancy site.  Random placement uses numpy's counter-based Philox
generator so that a (seed, config) pair yields the same bath everywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError
from .spin_core import (
    C13,
    F19,
    GYRO_ELECTRON,
    H1,
    N15,
    HyperfineTensor,
    SpinSpecies,
    species_from_label,
)

RNG_ALGORITHM = "numpy.random.Philox(4x64-10)"

DIAMOND_LATTICE_CONSTANT = 3.567  # Angstrom
C13_NATURAL_ABUNDANCE = 0.0107
EXCLUSION_RADIUS = 0.5  # Angstrom

# mu0/(4 pi) * h in MHz * Angstrom^3 / (MHz/G)^2.
DIPOLAR_PREFACTOR = 1e-7 * 6.62607015e-34 * 1e44

# Rows are the NV-frame axes written in crystal coordinates.
CRYSTAL_TO_NV = np.array(
    [
        [1.0, 1.0, -2.0] / np.sqrt(6.0),
        [-1.0, 1.0, 0.0] / np.sqrt(2.0),
        [1.0, 1.0, 1.0] / np.sqrt(3.0),
    ]
)


def rng_from_seed(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))


class Provenance(str, Enum):
    POINT_DIPOLE = "point_dipole"
    TABULATED = "tabulated"


@dataclass(frozen=True)
class BathSpin:
    species: SpinSpecies
    position: tuple[float, float, float]
    hyperfine: HyperfineTensor
    provenance: Provenance = Provenance.POINT_DIPOLE

    @property
    def azz(self) -> float:
        return self.hyperfine.azz

    @property
    def r(self) -> float:
        return float(np.linalg.norm(self.position))


@dataclass(frozen=True)
class LatticeConfig:
    lattice_constant: float = DIAMOND_LATTICE_CONSTANT
    abundance: float = C13_NATURAL_ABUNDANCE
    r_bath: float = 30.0
    seed: int = 0
    exclude_nitrogen_site: bool = True

    def __post_init__(self):
        if not 0.0 <= self.abundance <= 1.0:
            raise ConfigurationError(f"abundance must lie in [0, 1], got {self.abundance}")
        if self.r_bath <= 0:
            raise ConfigurationError("r_bath must be positive")
        if self.lattice_constant <= 0:
            raise ConfigurationError("lattice_constant must be positive")


class Termination(str, Enum):
    FLUORINE = "fluorine"
    HYDROGEN = "hydrogen"
    MIXED = "mixed"


@dataclass(frozen=True)
class SurfaceConfig:
    termination: Termination = Termination.MIXED
    depth: float = 12.0
    mix_ratio: float = 0.7
    lateral_extent: float = 60.0

    def __post_init__(self):
        object.__setattr__(self, "termination", Termination(self.termination))
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ConfigurationError("mix_ratio must lie in [0, 1]")
        if self.depth <= 0:
            raise ConfigurationError("depth must be positive")


@dataclass(frozen=True)
class HyperfineTable:
    positions: np.ndarray
    tensors: tuple[HyperfineTensor, ...]
    match_tolerance: float = 0.1

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "tensors", tuple(self.tensors))
        if len(pos) != len(self.tensors):
            raise ConfigurationError("hyperfine table positions and tensors differ in length")
        for i in range(len(pos)):
            d = np.linalg.norm(pos[i + 1 :] - pos[i], axis=1)
            if np.any(d <= self.match_tolerance):
                raise ConfigurationError(f"hyperfine table entry {i} at {pos[i].tolist()} is not unique")

    def __len__(self):
        return len(self.tensors)


def read_hyperfine_table(path, match_tolerance: float = 0.1) -> HyperfineTable:
    """Parse ``x y z Axx Axy Axz Ayx Ayy Ayz Azx Azy Azz`` records (Angstrom, MHz)."""
    positions, tensors = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 12:
            raise ConfigurationError(f"{path}:{lineno}: expected 12 columns, found {len(fields)}")
        values = [float(f) for f in fields]
        positions.append(values[:3])
        tensors.append(HyperfineTensor(np.array(values[3:]).reshape(3, 3)))
    return HyperfineTable(np.array(positions).reshape(-1, 3), tuple(tensors), match_tolerance)


def write_hyperfine_table(table: HyperfineTable, path) -> None:
    lines = ["# x y z Axx Axy Axz Ayx Ayy Ayz Azx Azy Azz  (Angstrom, MHz)"]
    for p, t in zip(table.positions, table.tensors):
        lines.append(" ".join(repr(float(v)) for v in [*p, *t.a.ravel()]))
    Path(path).write_text("\n".join(lines) + "\n")


def _dipolar_form(r_vec: np.ndarray) -> tuple[np.ndarray, float]:
    r_vec = np.asarray(r_vec, dtype=float)
    r = np.linalg.norm(r_vec)
    if r < 1e-6:
        raise ConfigurationError(f"dipolar coupling requires distinct positions (separation {r:.3g} A)")
    n = r_vec / r
    return 3.0 * np.outer(n, n) - np.eye(3), r


def point_dipole_hyperfine(position, central_gyro: float = GYRO_ELECTRON, nuclear_gyro: float = C13.gyro) -> HyperfineTensor:
    """Far-field electron-nuclear tensor (C gamma_e gamma_n / r^3)(3 r r^T - 1)."""
    form, r = _dipolar_form(position)
    return HyperfineTensor(DIPOLAR_PREFACTOR * central_gyro * nuclear_gyro / r**3 * form)


def dipolar_coupling(pos_i, pos_j, gyro_i: float, gyro_j: float) -> np.ndarray:
    """Nuclear-nuclear tensor J with H = I_i^T J I_j, i.e. -(C g_i g_j / r^3)(3 r r^T - 1)."""
    form, r = _dipolar_form(np.asarray(pos_j, dtype=float) - np.asarray(pos_i, dtype=float))
    return -DIPOLAR_PREFACTOR * gyro_i * gyro_j / r**3 * form


def sort_bath(spins: Iterable[BathSpin]) -> list[BathSpin]:
    """Descending |A_zz|; ties broken by lexicographic position."""
    return sorted(spins, key=lambda s: (-abs(s.azz), tuple(s.position)))


def diamond_sites(lattice_constant: float, radius: float) -> np.ndarray:
    return _diamond_sites(float(lattice_constant), float(radius)).copy()


@lru_cache(maxsize=16)
def _diamond_sites(lattice_constant: float, radius: float) -> np.ndarray:
    """Diamond lattice sites within ``radius`` of the vacancy, in the NV frame.

    Sites are enumerated on integer coordinates in units of a/4 (both fcc
    sublattices) and returned in lexicographic order of those integers, which
    fixes the order in which random numbers are consumed.
    """
    q = lattice_constant / 4.0
    n = int(np.ceil(radius / q)) + 1
    grid = np.arange(-n, n + 1)
    ijk = np.stack(np.meshgrid(grid, grid, grid, indexing="ij"), axis=-1).reshape(-1, 3)
    parity = ijk % 2
    even = np.all(parity == 0, axis=1) & (ijk.sum(axis=1) % 4 == 0)
    odd = np.all(parity == 1, axis=1) & (ijk.sum(axis=1) % 4 == 3)
    ijk = ijk[even | odd]
    cart = ijk * q
    keep = np.linalg.norm(cart, axis=1) <= radius
    return cart[keep] @ CRYSTAL_TO_NV.T


def nitrogen_site(lattice_constant: float = DIAMOND_LATTICE_CONSTANT) -> np.ndarray:
    return CRYSTAL_TO_NV @ (np.ones(3) * lattice_constant / 4.0)


def _finalize(species: Sequence[SpinSpecies], positions: np.ndarray) -> list[BathSpin]:
    spins = []
    for sp, p in zip(species, positions):
        p = tuple(float(x) for x in p)
        spins.append(BathSpin(sp, p, point_dipole_hyperfine(p, GYRO_ELECTRON, sp.gyro)))
    return sort_bath(spins)


def generate_bulk_bath(cfg: LatticeConfig) -> list[BathSpin]:
    sites = diamond_sites(cfg.lattice_constant, cfg.r_bath)
    keep = np.linalg.norm(sites, axis=1) > EXCLUSION_RADIUS
    if cfg.exclude_nitrogen_site:
        keep &= np.linalg.norm(sites - nitrogen_site(cfg.lattice_constant), axis=1) > 1e-6
    sites = sites[keep]
    draws = rng_from_seed(cfg.seed).random(len(sites))
    occupied = sites[draws < cfg.abundance]
    return _finalize([C13] * len(occupied), occupied)


def surface_normal() -> np.ndarray:
    """(001) surface normal expressed in the NV frame."""
    return CRYSTAL_TO_NV @ np.array([0.0, 0.0, 1.0])


def surface_sites(depth: float, lattice_constant: float, radius: float, lateral_extent: float) -> np.ndarray:
    """Termination sites of an unreconstructed (001) face, one per surface carbon.

    The square net has spacing a/sqrt(2) (density 2/a^2) and lies in the plane
    at distance ``depth`` from the vacancy along the surface normal.
    """
    half = lattice_constant / 2.0
    extent = min(lateral_extent, np.sqrt(max(radius**2 - depth**2, 0.0)))
    n = int(np.ceil(extent / half)) + 1
    grid = np.arange(-n, n + 1)
    ij = np.stack(np.meshgrid(grid, grid, indexing="ij"), axis=-1).reshape(-1, 2)
    crystal = np.column_stack([half * (ij[:, 0] + ij[:, 1]), half * (ij[:, 0] - ij[:, 1]), np.full(len(ij), depth)])
    lateral = np.linalg.norm(crystal[:, :2], axis=1)
    keep = (lateral <= extent) & (np.linalg.norm(crystal, axis=1) <= radius)
    return crystal[keep] @ CRYSTAL_TO_NV.T


def generate_surface_bath(cfg: SurfaceConfig, lattice: LatticeConfig) -> list[BathSpin]:
    sites = surface_sites(cfg.depth, lattice.lattice_constant, lattice.r_bath, cfg.lateral_extent)
    if cfg.termination is Termination.FLUORINE:
        species = [F19] * len(sites)
    elif cfg.termination is Termination.HYDROGEN:
        species = [H1] * len(sites)
    else:
        draws = rng_from_seed(lattice.seed).random(len(sites))
        species = [F19 if u < cfg.mix_ratio else H1 for u in draws]
    return _finalize(species, sites)


def assign_hyperfine(bath: Sequence[BathSpin], table: HyperfineTable | None = None) -> list[BathSpin]:
    """Replace point-dipole tensors by tabulated ones wherever positions match."""
    out = []
    for spin in bath:
        tensor, prov = point_dipole_hyperfine(spin.position, GYRO_ELECTRON, spin.species.gyro), Provenance.POINT_DIPOLE
        if table is not None and len(table):
            d = np.linalg.norm(table.positions - np.asarray(spin.position), axis=1)
            hits = np.flatnonzero(d <= table.match_tolerance)
            if len(hits) > 1:
                where = [table.positions[h].tolist() for h in hits]
                raise ConfigurationError(f"bath spin at {list(spin.position)} matches several table entries: {where}")
            if len(hits) == 1:
                tensor, prov = table.tensors[hits[0]], Provenance.TABULATED
        out.append(BathSpin(spin.species, spin.position, tensor, prov))
    return sort_bath(out)


def truncate_bath(bath: Sequence[BathSpin], max_abs_azz: float) -> list[BathSpin]:
    """Drop spins whose |A_zz| is not strictly below ``max_abs_azz``."""
    return [s for s in bath if abs(s.azz) < max_abs_azz]


def nitrogen_spin(a_perp: float = 3.65, a_par: float = 3.03, lattice_constant: float = DIAMOND_LATTICE_CONSTANT) -> BathSpin:
    """The ¹⁵N of the defect with an axial contact tensor (defaults: bulk NV values)."""
    pos = tuple(float(x) for x in nitrogen_site(lattice_constant))
    return BathSpin(N15, pos, HyperfineTensor.axial(a_perp, a_par), Provenance.TABULATED)


def pair_tensor(a: BathSpin, b: BathSpin) -> np.ndarray:
    return dipolar_coupling(a.position, b.position, a.species.gyro, b.species.gyro)


def bath_to_json(bath: Sequence[BathSpin]) -> list[dict]:
    return [
        {
            "species": s.species.label,
            "position": [float(x) for x in s.position],
            "tensor": s.hyperfine.a.tolist(),
            "provenance": s.provenance.value,
        }
        for s in bath
    ]


def bath_from_json(records: Sequence[dict], gyro_overrides=None) -> list[BathSpin]:
    spins = []
    for rec in records:
        sp = species_from_label(rec["species"], gyro_overrides)
        spins.append(
            BathSpin(sp, tuple(float(x) for x in rec["position"]), HyperfineTensor(np.array(rec["tensor"])), Provenance(rec["provenance"]))
        )
    return spins


def save_bath(bath: Sequence[BathSpin], path) -> None:
    Path(path).write_text(json.dumps(bath_to_json(bath), indent=1) + "\n")


def load_bath(path, gyro_overrides=None) -> list[BathSpin]:
    return bath_from_json(json.loads(Path(path).read_text()), gyro_overrides)

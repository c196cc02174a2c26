"""Write the pinned six-spin 13C bath used by the example configs.

Six spins are drawn from a seeded natural-abundance bath among those with
|A_zz| <= 0.3 MHz; positions are then scaled uniformly so the strongest
point-dipole A_zz is exactly 0.3 MHz.
"""

import sys
from pathlib import Path

import numpy as np

from nvcce.bath import BathSpin, LatticeConfig, generate_bulk_bath, point_dipole_hyperfine, save_bath, sort_bath
from nvcce.spin_core import C13

TARGET = 0.3


def main(out):
    bath = [s for s in generate_bulk_bath(LatticeConfig(r_bath=20.0, seed=606)) if abs(s.azz) <= TARGET]
    picked = bath[:6]
    scale = (abs(picked[0].azz) / TARGET) ** (1 / 3)
    spins = []
    for s in picked:
        pos = tuple(float(x) for x in np.asarray(s.position) * scale)
        spins.append(BathSpin(C13, pos, point_dipole_hyperfine(pos)))
    spins = sort_bath(spins)
    save_bath(spins, out)
    print([round(s.azz, 4) for s in spins])


if __name__ == "__main__":
    main(Path(sys.argv[1] if len(sys.argv) > 1 else "configs/baths/c13x6.json"))

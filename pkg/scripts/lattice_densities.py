"""Rasterized bulk density of the three reference lattices."""
import argparse

from hardcrowd.analysis import LATTICE_DENSITIES, LatticeSpec, bulk_density, generate_lattice, jamming_report


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--count", type=int, default=2500)
    ap.add_argument("--radius", type=float, default=0.5)
    ap.add_argument("--resolution", type=float, default=0.618, help="cell size; keep it incommensurate with 2r")
    args = ap.parse_args()
    print(f"{'lattice':18s} {'measured':>9s} {'exact':>9s} {'jammed':>7s}")
    for kind, ref in LATTICE_DENSITIES.items():
        q = generate_lattice(LatticeSpec(kind, args.count, args.radius))
        d = bulk_density(q, args.resolution * args.radius / 0.5)
        jam = jamming_report(q).fraction
        print(f"{kind:18s} {d:9.4f} {ref:9.4f} {jam:7.2f}")


if __name__ == "__main__":
    main()

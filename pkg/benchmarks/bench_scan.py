"""Compare the compiled and numpy selective-scan kernels across sequence lengths.

    python benchmarks/bench_scan.py [--lengths 256,512,1024,2048] [--repeats 5]
"""

import argparse

from vmudiff.kernels import BACKENDS
from vmudiff.vmss import scan_benchmark


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--lengths", default="256,512,1024,2048")
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    lengths = [int(x) for x in args.lengths.split(",")]

    results = {name: scan_benchmark(lengths, repeats=args.repeats, backend=name) for name in sorted(BACKENDS)}
    names = sorted(results)
    print("L\t" + "\t".join(f"{n}_ns_per_elem" for n in names) + ("\tspeedup" if len(names) == 2 else ""))
    for i, L in enumerate(lengths):
        per = [results[n][i][2] for n in names]
        row = f"{L}\t" + "\t".join(f"{p:.1f}" for p in per)
        if len(names) == 2:
            row += f"\t{results['numpy'][i][2] / results['cython'][i][2]:.2f}x"
        print(row)
    for n in names:
        rows = results[n]
        ratios = [b[2] / a[2] for a, b in zip(rows, rows[1:])]
        print(f"# {n}: per-element ratio on doubling " + ", ".join(f"{r:.2f}" for r in ratios))


if __name__ == "__main__":
    main()

"""Launch N concurrent issue_ehic instances over five adapter processes and report."""

import argparse

from swarmbus.loadtest import LoadConfig, run_load


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("-n", "--instances", type=int, default=1000)
    ap.add_argument("--workers", type=int, default=32)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    r = run_load(LoadConfig(args.instances, args.workers, args.seed))
    print(f"instances        {r.instances}")
    print(f"wall clock       {r.wall_clock_s:.2f} s")
    print(f"statuses         {r.statuses}")
    print(f"non-terminal     {len(r.non_terminal)}")
    print(f"chain            {'intact' if r.first_bad_seq is None else f'broken at {r.first_bad_seq}'}")
    print(f"deliveries       {r.deliveries_checked} checked, {len(r.minimization_violations)} over-delivered")
    raise SystemExit(0 if r.ok and r.wall_clock_s < 60 else 1)


if __name__ == "__main__":
    main()

"""Print train/query cost for the shipped workloads, optionally with extra descriptors.

    python3 scripts/cost_tables.py [--pricing table.json] [workload.json ...]
"""

import argparse

from privadapt.costmodel import MethodDescriptor, load_pricing, method_cost_report, shipped_workload

SHIPPED = ("empty", "samsum_zeroshot_davinci", "samsum_dpicl_davinci", "privatelora_a40_5h")


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("workloads", nargs="*")
    p.add_argument("--pricing")
    args = p.parse_args()

    pricing = load_pricing(args.pricing)
    rows = [(name, shipped_workload(name)) for name in SHIPPED]
    rows += [(path, MethodDescriptor.from_json(path)) for path in args.workloads]
    print(f"{'workload':44s} {'train $':>10s} {'query $':>10s} {'all $':>10s} {'$/query':>10s}")
    for name, method in rows:
        r = method_cost_report(pricing, method)
        print(f"{name:44s} {r.train:10.2f} {r.query:10.2f} {r.total:10.2f} {r.per_query:10.6f}")


if __name__ == "__main__":
    main()

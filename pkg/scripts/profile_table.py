"""Print the parameter / FLOP / iteration-time table for the compared backbones.

    python scripts/profile_table.py                 # analytic columns only
    python scripts/profile_table.py --time          # also time batch-32 training steps at 224 px
"""
import argparse
import json

from assl.backbones import BackboneSpec
from assl.profiler import TABLE_REFERENCE, hardware_descriptor, profile

ROWS = [("resnet50", False), ("effnet-b3", False), ("effnet-b3", True)]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--resolution", type=int, default=224)
    ap.add_argument("--time", action="store_true")
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--micro-batch", type=int, default=16)
    ap.add_argument("--json")
    args = ap.parse_args()

    reports = []
    print(f"{'model':<16}{'params (M)':>12}{'ref':>9}{'GFLOPs':>9}{'ref':>8}{'s/iter':>9}{'ref':>8}")
    for family, cbam in ROWS:
        rep = profile(BackboneSpec(family, with_cbam=cbam), args.resolution,
                      args.batch_size if args.time else None, micro_batch=args.micro_batch)
        ref = TABLE_REFERENCE[(family, cbam)]
        secs = f"{rep.seconds_per_iter:9.3f}" if rep.seconds_per_iter else f"{'-':>9}"
        name = family + ("+cbam" if cbam else "")
        print(f"{name:<16}{rep.params / 1e6:12.3f}{ref['params_m']:9.3f}{rep.flops / 1e9:9.3f}{ref['gflops']:8.3f}"
              f"{secs}{ref['sec_per_iter']:8.4f}")
        reports.append(json.loads(rep.to_json()))
    if args.time:
        print("hardware:", json.dumps(hardware_descriptor()))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(reports, fh, indent=2)


if __name__ == "__main__":
    main()

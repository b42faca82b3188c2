import argparse
import json


def parser(description: str, default_seeds: int) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--seeds", type=int, default=default_seeds, help="number of seeds, starting at 0")
    p.add_argument("--out", help="write results as JSON here")
    return p


def finish(args, payload):
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

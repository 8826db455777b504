"""Run one exch-kit invocation and check its exit code and JSON output."""

import argparse
import json
import subprocess
import sys

import jsonschema


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--expect-exit", type=int, default=0)
    ap.add_argument("--schema", help="validate stdout against this schema")
    ap.add_argument("--repeat", action="store_true", help="run twice and require identical stdout")
    ap.add_argument("--expect", action="append", default=[], help="KEY=JSON that must equal the top-level field")
    ap.add_argument("cmd", nargs=argparse.REMAINDER)
    args = ap.parse_args()
    cmd = args.cmd[1:] if args.cmd and args.cmd[0] == "--" else args.cmd

    first = subprocess.run(cmd, capture_output=True, text=True)
    if first.returncode != args.expect_exit:
        print(f"exit {first.returncode}, wanted {args.expect_exit}\n{first.stdout}\n{first.stderr}")
        return 1
    if args.schema:
        doc = json.loads(first.stdout)
        with open(args.schema) as f:
            jsonschema.validate(doc, json.load(f))
        for item in args.expect:
            key, want = item.split("=", 1)
            if doc.get(key) != json.loads(want):
                print(f"{key} = {doc.get(key)!r}, wanted {want}")
                return 1
    if args.repeat:
        second = subprocess.run(cmd, capture_output=True, text=True)
        if second.stdout != first.stdout:
            print("output differs between identical runs")
            return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

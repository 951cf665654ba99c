#!/usr/bin/env python3
"""Run every (Stage-1 backend, Stage-2 backend, strategy) combination on one
annotation set with a shared response cache, then print one comparison table.

    python3 scripts/run_grid.py \\
        --annotations data/charades_sta_test.txt --frames-root data/frames \\
        --stage1 openai:configs/llava7b.toml --stage1 openai:configs/gpt4v.toml \\
        --stage2 openai:configs/gpt4.toml \\
        --subset-n 128 --out-root runs/sta_subset

Re-running the same command is served from the cache; only new
combinations reach the endpoints.
"""

from __future__ import annotations

import argparse
import re
import sys
from itertools import product
from pathlib import Path

from tal_llm.cli import main as cli


def slug(spec: str) -> str:
    stem = Path(spec.split(":", 1)[-1]).stem if ":" in spec else spec
    return re.sub(r"[^A-Za-z0-9._-]+", "_", stem)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--annotations", required=True)
    parser.add_argument("--frames-root", required=True)
    parser.add_argument("--stage1", action="append", required=True, help="repeatable image backend spec")
    parser.add_argument("--stage2", action="append", required=True, help="repeatable text backend spec")
    parser.add_argument("--strategy", action="append", choices=("activity", "general"))
    parser.add_argument("--subset-n", type=int)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out-root", type=Path, default=Path("runs/grid"))
    parser.add_argument("--max-in-flight", type=int, default=4)
    parser.add_argument("--with-reference", action="store_true")
    args = parser.parse_args()

    cache = args.out_root / "cache"
    summaries = []
    for s1, s2, strategy in product(args.stage1, args.stage2, args.strategy or ["activity"]):
        out = args.out_root / f"{slug(s1)}__{slug(s2)}__{strategy}"
        argv = [
            "run", "--annotations", args.annotations, "--frames-root", args.frames_root,
            "--stage1", s1, "--stage2", s2, "--strategy", strategy, "--seed", str(args.seed),
            "--cache-dir", str(cache), "--out-dir", str(out), "--max-in-flight", str(args.max_in_flight),
            "--stage1-label", f"{slug(s1)} ({strategy})", "--stage2-label", slug(s2),
        ]
        if args.subset_n is not None:
            argv += ["--subset-n", str(args.subset_n)]
        print(f"== {out.name}", file=sys.stderr)
        if cli(argv) != 0:
            print(f"   failed: {out.name}", file=sys.stderr)
            continue
        summaries.append(str(out / "summary.json"))

    if not summaries:
        return 1
    print()
    return cli(["report", *summaries, *(["--with-reference"] if args.with_reference else [])])


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""End-to-end replay demo: synthesize a workspace, then run every stage.

Runs, in order: ingest inputs (prebuilt), gen-align, gen-instruct (replay
teacher), clean, bench-build (vqa and chatbot), evaluate (vqa metrics and
replay-judged chatbot scores), and stats. Everything is deterministic; run
it twice and diff the outputs.

Usage: python scripts/run_replay_pipeline.py --work-dir /tmp/agro_demo
"""

import argparse
import json
import subprocess
import sys
from pathlib import Path

from agrocorpus.cli import dispatch
from agrocorpus.corpus_model import dumps_bytes, write_artifact

SCRIPT_DIR = Path(__file__).resolve().parent


def run(argv):
    argv = [str(a) for a in argv]
    print(f"$ agrocorpus {' '.join(argv)}", file=sys.stderr)
    code = dispatch(argv)
    if code != 0:
        raise SystemExit(f"stage failed with exit code {code}: {argv[0]}")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--work-dir", required=True)
    parser.add_argument("--images", type=int, default=60)
    parser.add_argument("--records", type=int, default=24)
    parser.add_argument("--seed", type=int, default=11)
    args = parser.parse_args()

    work = Path(args.work_dir)
    inputs = work / "inputs"
    out = work / "outputs"
    out.mkdir(parents=True, exist_ok=True)

    subprocess.run(
        [sys.executable, str(SCRIPT_DIR / "make_synthetic_pool.py"),
         "--out-dir", str(inputs), "--images", str(args.images),
         "--records", str(args.records), "--seed", str(args.seed)],
        check=True,
    )

    run(["gen-align", "--manifest", inputs / "manifest.json",
         "--knowledge", inputs / "knowledge.json",
         "--templates", inputs / "templates.json",
         "--seed", "7", "--out", out / "align.json"])

    run(["gen-instruct", "--manifest", inputs / "manifest.json",
         "--knowledge", inputs / "knowledge.json",
         "--backend", "replay", "--replay-dir", inputs / "replay",
         "--out", out / "instruct.json"])

    run(["clean", "--in", out / "instruct.json",
         "--knowledge", inputs / "knowledge.json", "--origin", "instruction",
         "--out", out / "kept.json", "--rejects", out / "rejects.json"])

    run(["bench-build", "vqa", "--pool", inputs / "vqa_pool.json",
         "--spec", inputs / "bench_spec_vqa.json",
         "--train-manifest", inputs / "train_manifest.json",
         "--seed", "3", "--out", out / "bench_vqa.json"])

    run(["evaluate", "vqa", "--bench", out / "bench_vqa.json",
         "--preds", inputs / "preds_vqa.json",
         "--out", out / "report_vqa.json"])

    # chatbot bench pool = training manifest + the cleaned conversations
    pool = {
        "manifest": json.loads((inputs / "manifest.json").read_text()),
        "conversations": json.loads((out / "kept.json").read_text()),
    }
    write_artifact(out / "chat_pool.json", dumps_bytes(pool))
    run(["bench-build", "chatbot", "--pool", out / "chat_pool.json",
         "--spec", inputs / "bench_spec_chatbot.json",
         "--train-manifest", inputs / "train_manifest.json",
         "--seed", "3", "--out", out / "bench_chat.json"])

    run(["evaluate", "chatbot", "--bench", out / "bench_chat.json",
         "--preds", inputs / "preds_chatbot.json",
         "--knowledge", inputs / "knowledge.json",
         "--backend", "replay", "--replay-dir", inputs / "replay",
         "--out", out / "report_chat.json"])

    run(["stats", "taxonomy", "--in", inputs / "manifest.json",
         "--out", out / "taxonomy.json"])
    run(["stats", "words", "--in", out / "kept.json",
         "--top", "15", "--out", out / "words.json"])
    run(["stats", "starters", "--in", out / "kept.json",
         "--out", out / "starters.json"])

    run(["validate", "--in", out / "align.json", "--origin", "alignment"])
    run(["validate", "--in", out / "bench_vqa.json"])

    print(f"\nall stages finished; outputs under {out}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())

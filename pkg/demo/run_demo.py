#!/usr/bin/env python3
"""Offline end-to-end demo: synthetic corpus, scripted endpoint, two setups.

Creates a small synthetic annotated corpus, serves a deterministic mock
chat endpoint for it, runs the naive and advanced setups against that
endpoint, and renders the comparison table.  No network, no credentials.

    python3 demo/run_demo.py [--samples 40] [--out demo/out]
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from clinex.corpus import dump_corpus
from clinex.experiment import config_from_dict, render_report, run_experiment
from clinex.testing import MockChatServer, compliant_behavior, synthetic_corpus


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--samples", type=int, default=40)
    parser.add_argument("--out", type=Path, default=Path(__file__).parent / "out")
    args = parser.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    corpus = synthetic_corpus(args.samples)
    corpus_path = args.out / "corpus.jsonl"
    dump_corpus(corpus, corpus_path)
    print(f"wrote {args.samples} synthetic samples -> {corpus_path}")

    report_paths = []
    with MockChatServer(compliant_behavior(corpus)) as server:
        for mode in ("naive", "advanced"):
            config = {
                "corpus": {"path": str(corpus_path)},
                "split": {"train_fraction": 0.5},
                "mode": mode,
                "endpoint": {"base_url": server.url, "model_name": "scripted-mock"},
                "scoring": {
                    "token_embedder": {"kind": "hashing", "dim": 64},
                    "entity_recognizer": {"kind": "lexicon"},
                },
                "concurrency": 4,
                "output_dir": str(args.out / mode),
                "seed": 7,
            }
            if mode == "advanced":
                config["retrieval"] = {"m": 3, "embedder": {"kind": "hashing", "dim": 256}}
            config_path = args.out / f"{mode}.json"
            config_path.write_text(json.dumps(config, indent=2), encoding="utf-8")
            outputs = run_experiment(config_from_dict(config, base_dir=args.out))
            report_paths.append(outputs.report_json_path)
            print(f"\n=== {mode} run ===")
            print(outputs.report_text_path.read_text(encoding="utf-8"))

    print("=== comparison ===")
    print(render_report(report_paths))


if __name__ == "__main__":
    main()

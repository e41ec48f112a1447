"""Smoke test for the hopweave Python extension.

Build and install the extension first:

    pip install maturin
    maturin develop --release -m crates/py/Cargo.toml

then run `python python/smoke_test.py` from the repository root.
"""

import json
import sys
import tempfile
from pathlib import Path

import hopweave_py as hw

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "crates" / "core" / "tests" / "fixtures"


def check(condition, message):
    if not condition:
        print(f"FAIL  {message}")
        sys.exit(1)
    print(f"ok    {message}")


def main():
    config = hw.Config.from_file(str(FIXTURES / "run" / "config.json"))
    check(config.seed == 7, "config loads with its seed")
    check(len(config.sha256()) == 64, "config hashes")

    try:
        hw.Config('{"hop_bounds": {"SP": {"min": 1, "max": 5}}}')
        check(False, "out-of-range hop bounds are rejected")
    except hw.HopweaveError:
        check(True, "out-of-range hop bounds are rejected")

    def run():
        pipe = hw.Pipeline(config)
        items = pipe.ingest_scenes([str(FIXTURES / "scenes" / "scenes.json")])
        for stage in (pipe.augment, pipe.gen_context, pipe.gen_qa, pipe.filter):
            items = stage(items)
        return pipe, items

    pipe, items = run()
    check(len(items) > 0 and items.live() > 0, f"{items.live()} of {len(items)} scene items survive the pipeline")
    samples = pipe.package(items)
    check(len(samples) > 0, f"{len(samples)} samples packaged")
    check(all(s["split"] in ("train", "test") for s in samples), "every sample has a split")

    _, again = run()
    check(pipe.package(again) == samples, "a second run with the same seed is identical")

    bundles = items.audit_bundles()
    check(all(len(b["checklist"]) == 7 for b in bundles), "audit bundles carry the full checklist")

    with tempfile.TemporaryDirectory() as tmp:
        count = pipe.write_package(items, tmp)
        stats = hw.dataset_stats(str(Path(tmp) / "dataset.jsonl"))
        total = sum(row["samples"] for row in stats["rows"])
        check(total == count, "stats cover every written sample")
        items.write(str(Path(tmp) / "items.jsonl"))
        reread = hw.Items.read([str(Path(tmp) / "items.jsonl")])
        check(reread.ids() == items.ids(), "items round-trip through JSONL")

    stats = hw.dataset_stats(str(FIXTURES / "dataset" / "stats10.jsonl"))
    ni_train = next(r for r in stats["rows"] if r["domain"] == "NI" and r["split"] == "train")
    check(ni_train["samples"] == 3 and ni_train["qa"] == 6, "NI train row of the ten-sample fixture")

    check(hw.exact_match("The Eiffel Tower!", "eiffel tower") == 1.0, "exact match normalises articles and punctuation")
    check(abs(hw.token_f1("red brick house", "red house") - 0.8) < 1e-12, "token F1")
    check(hw.extract_final_answer("Reasoning.\nAnswer: a red kite", "cot") == "a red kite", "final answer extraction")
    print(json.dumps({"smoke": "passed"}))


if __name__ == "__main__":
    main()

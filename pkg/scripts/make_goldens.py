"""Regenerate the committed golden directories under tests/goldens.

    python3 scripts/make_goldens.py [--root tests/goldens]

Writes ``fixtures/`` (seed 0, desk config) and ``forward/`` (that config run on
those fixtures). ``desk.json`` holds the config both were made with.
"""
import argparse
import json
import shutil
from pathlib import Path

from textmamba.cli import main

DESK = {"num_proposals": 8}


def make(root: Path) -> None:
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "desk.json"
    cfg.write_text(json.dumps(DESK, indent=2, sort_keys=True) + "\n")
    for sub in ("fixtures", "forward"):
        shutil.rmtree(root / sub, ignore_errors=True)
    if main(["gen-fixtures", "--seed", "0", "--config", str(cfg), "--out", str(root / "fixtures")]):
        raise SystemExit("gen-fixtures failed")
    if main(["forward", "--config", str(cfg), "--fixtures", str(root / "fixtures"),
             "--out", str(root / "forward")]):
        raise SystemExit("forward failed")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", default=str(Path(__file__).resolve().parent.parent / "tests" / "goldens"))
    make(Path(ap.parse_args().root))

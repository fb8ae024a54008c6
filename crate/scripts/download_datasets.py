"""Fetch dataset archives listed in a sources file and verify their SHA-256.

Usage:
  python3 scripts/download_datasets.py SOURCES.json DEST [--only NAME ...]

SOURCES.json maps a dataset name to a list of files:

  {
    "phenobench": [
      {"url": "https://...", "sha256": "<hex>", "file": "PhenoBench-v110.zip"}
    ]
  }

Each file is downloaded to DEST/<name>/<file> (skipped when already present
with the right digest), checked, and unpacked in place when it is a zip or tar
archive. Afterwards arrange the tree to the layout printed by
`plantseg datasets verify --dataset <name> --root DEST/<name>` and point
PLANTSEG_<NAME>_ROOT at it. The script exits non-zero if any digest mismatches.
"""

import argparse
import hashlib
import json
import shutil
import sys
import tarfile
import urllib.request
import zipfile
from pathlib import Path


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def fetch(url, target):
    partial = target.with_name(target.name + ".part")
    with urllib.request.urlopen(url) as resp, open(partial, "wb") as out:
        shutil.copyfileobj(resp, out)
    partial.replace(target)


def unpack(path, dest):
    if zipfile.is_zipfile(path):
        with zipfile.ZipFile(path) as z:
            z.extractall(dest)
    elif tarfile.is_tarfile(path):
        with tarfile.open(path) as t:
            try:
                t.extractall(dest, filter="data")
            except TypeError:  # python without extraction filters
                t.extractall(dest)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("sources", type=Path)
    parser.add_argument("dest", type=Path)
    parser.add_argument("--only", nargs="*", default=None)
    parser.add_argument("--no-unpack", action="store_true")
    args = parser.parse_args()

    sources = json.loads(args.sources.read_text())
    failures = []
    for name, files in sources.items():
        if args.only and name not in args.only:
            continue
        root = args.dest / name
        root.mkdir(parents=True, exist_ok=True)
        for entry in files:
            target = root / entry.get("file", entry["url"].rsplit("/", 1)[-1])
            want = entry["sha256"].lower()
            if not (target.exists() and sha256(target) == want):
                print(f"{name}: fetching {entry['url']}", file=sys.stderr)
                fetch(entry["url"], target)
            got = sha256(target)
            if got != want:
                failures.append(f"{target}: expected {want}, got {got}")
                continue
            print(f"{name}: {target.name} ok", file=sys.stderr)
            if not args.no_unpack:
                unpack(target, root)
    for f in failures:
        print(f"checksum mismatch: {f}", file=sys.stderr)
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())

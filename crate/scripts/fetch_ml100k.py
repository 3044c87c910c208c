#!/usr/bin/env python3
"""Fetch the MovieLens-100K rating log into data/ml-100k/u.data.

Tries the GroupLens archive first; if that host is unreachable, falls back to
the copy bundled (as `ml-100k.inter`) inside the `recbole` wheel on PyPI. Both
sources carry the same 100,000 `user\titem\trating\ttimestamp` rows.
"""
import io
import pathlib
import subprocess
import sys
import tempfile
import urllib.request
import zipfile

ROOT = pathlib.Path(__file__).resolve().parent.parent
DEST = ROOT / "data" / "ml-100k" / "u.data"
GROUPLENS = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"


def from_grouplens():
    with urllib.request.urlopen(GROUPLENS, timeout=30) as resp:
        z = zipfile.ZipFile(io.BytesIO(resp.read()))
    return z.read("ml-100k/u.data").decode()


def from_recbole():
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "recbole==1.2.1", "--no-deps", "-q", "-d", tmp],
            check=True,
        )
        wheel = next(pathlib.Path(tmp).glob("recbole-*.whl"))
        text = zipfile.ZipFile(wheel).read("recbole/dataset_example/ml-100k/ml-100k.inter").decode()
    lines = text.splitlines()[1:]  # drop the typed header row
    return "\n".join(lines) + "\n"


def main():
    if DEST.exists():
        print(f"{DEST} already present")
        return
    try:
        data = from_grouplens()
    except Exception as err:  # noqa: BLE001
        print(f"grouplens unavailable ({err}); using recbole wheel", file=sys.stderr)
        data = from_recbole()
    DEST.parent.mkdir(parents=True, exist_ok=True)
    DEST.write_text(data)
    print(f"wrote {DEST} ({len(data.splitlines())} rows)")


if __name__ == "__main__":
    main()

"""Locate or fetch MovieLens-100K as a ``movielens_tab`` file.

Looks in ``$SAGITTARIUS_DATA`` (default ``~/.cache/sagittarius``) for
``ml-100k/u.data``. If absent, tries the GroupLens archive, then the copy of
the same ratings shipped inside the RecBole wheel on PyPI.
"""

from __future__ import annotations

import glob
import io
import logging
import os
import subprocess
import sys
import tempfile
import urllib.request
import zipfile

log = logging.getLogger(__name__)

GROUPLENS_URL = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
RECBOLE_MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"
N_RATINGS = 100_000


def data_home() -> str:
    return os.environ.get("SAGITTARIUS_DATA", os.path.join(os.path.expanduser("~"), ".cache", "sagittarius"))


def _from_grouplens(timeout: float) -> str:
    with urllib.request.urlopen(GROUPLENS_URL, timeout=timeout) as resp:
        blob = resp.read()
    with zipfile.ZipFile(io.BytesIO(blob)) as zf:
        return zf.read("ml-100k/u.data").decode("utf-8")


def _from_recbole_wheel(timeout: float) -> str:
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "recbole==1.2.1", "--no-deps", "-q", "-d", tmp],
            check=True, timeout=timeout, capture_output=True,
        )
        (wheel,) = glob.glob(os.path.join(tmp, "*.whl"))
        with zipfile.ZipFile(wheel) as zf:
            lines = zf.read(RECBOLE_MEMBER).decode("utf-8").splitlines()
    # drop the typed header; rows are user, item, rating, timestamp like u.data
    return "\n".join(lines[1:]) + "\n"


def movielens_100k(download: bool = True, timeout: float = 120.0) -> str:
    path = os.path.join(data_home(), "ml-100k", "u.data")
    if os.path.exists(path):
        return path
    if not download:
        raise FileNotFoundError(path)
    errors = []
    for source in (_from_grouplens, _from_recbole_wheel):
        try:
            text = source(timeout)
        except Exception as exc:  # any failure falls through to the next mirror
            errors.append(f"{source.__name__}: {exc}")
            continue
        n = sum(1 for line in text.splitlines() if line.strip())
        if n != N_RATINGS:
            errors.append(f"{source.__name__}: expected {N_RATINGS} ratings, got {n}")
            continue
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
        return path
    raise FileNotFoundError(f"could not obtain MovieLens-100K: {'; '.join(errors)}")


if __name__ == "__main__":
    print(movielens_100k())

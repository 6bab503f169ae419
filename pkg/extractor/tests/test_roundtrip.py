"""Cross-component acceptance: extracted shards must validate and score in
the scoring pipeline with zero format errors, and re-extraction must be
checksum-stable.

The scorer is driven strictly through its command line — the two packages
share no code, only bytes — and the final test prints the same PASS/FAIL
checklist line the scorer's own acceptance battery uses.
"""

import hashlib
import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from chips_extractor import ExtractionJob, extract

SCORER = [shutil.which("chips")] if shutil.which("chips") else [
    sys.executable, "-m", "chips.cli"
]


def scorer(*args, cwd):
    return subprocess.run(
        [*SCORER, *args], cwd=cwd, capture_output=True, text=True, timeout=120
    )


def checksum(path):
    return hashlib.blake2b(Path(path).read_bytes(), digest_size=16).hexdigest()


def _write_dataset(root, entries, seed):
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for sample_id, caption, tags in entries:
        arr = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
        name = f"img-{sample_id}.png"
        Image.fromarray(arr, "RGB").save(root / name)
        lines.append(
            json.dumps(
                {"id": sample_id, "image": name, "caption": caption, "tags": tags}
            )
        )
    manifest = root / "manifest.jsonl"
    manifest.write_text("".join(line + "\n" for line in lines))
    return manifest


@pytest.fixture(scope="module")
def extracted(tmp_path_factory):
    """12-sample pool + 4-sample eval set, extracted with the builtin model."""
    root = tmp_path_factory.mktemp("roundtrip")
    pool_manifest = _write_dataset(
        root / "pool-data",
        [
            (i, f"synthetic pool image number {i}", ["even" if i % 2 == 0 else "odd"])
            for i in range(12)
        ],
        seed=11,
    )
    eval_manifest = _write_dataset(
        root / "eval-data",
        [(100 + i, f"held-out target image {i}", ["eval"]) for i in range(4)],
        seed=12,
    )
    pool = extract(
        ExtractionJob("toy-16", pool_manifest, root / "pool", shard_size=8)
    )
    evalr = extract(ExtractionJob("toy-16", eval_manifest, root / "eval"))
    empty_manifest = root / "none.jsonl"
    empty_manifest.write_text("")
    empty = extract(ExtractionJob("toy-16", empty_manifest, root / "empty"))
    return {
        "root": root,
        "pool_manifest": pool_manifest,
        "pool": pool,
        "eval": evalr,
        "empty": empty,
    }


def test_extractor_round_trip_criterion(extracted):
    root = extracted["root"]
    pool_shards = extracted["pool"]["shards"]
    eval_shard = extracted["eval"]["shards"][0]
    params = extracted["pool"]["params"]
    failures = []

    # score: every shard (the empty one included) through the scorer's reader
    for method in ("dot", "clipscore"):
        proc = scorer(
            "score",
            "--pool", *pool_shards, extracted["empty"]["shards"][0],
            "--eval", eval_shard,
            "--params", params,
            "--out", str(root / f"scores-{method}.chsc"),
            "--text-out", str(root / f"scores-{method}.tsv"),
            "--method", method,
            cwd=root,
        )
        if proc.returncode != 0:
            failures.append(f"score/{method} rc={proc.returncode}: {proc.stderr.strip()}")
            continue
        if "scored 12 samples" not in proc.stderr:
            failures.append(f"score/{method} did not see all 12 samples")
        rows = [
            line
            for line in (root / f"scores-{method}.tsv").read_text().splitlines()
            if not line.startswith("#")
        ]
        if len(rows) != 12:
            failures.append(f"score/{method} text twin has {len(rows)} rows")

    # select on the scored output closes the shard -> manifest chain
    proc = scorer(
        "select",
        "--scores", str(root / "scores-dot.chsc"),
        "--retention", "0.5",
        "--out", str(root / "sel.chmf"),
        cwd=root,
    )
    if proc.returncode != 0:
        failures.append(f"select rc={proc.returncode}: {proc.stderr.strip()}")
    elif not (root / "sel.chmf").exists():
        failures.append("select wrote no manifest")

    # re-extraction into a fresh directory reproduces every byte
    again = extract(
        ExtractionJob(
            "toy-16", extracted["pool_manifest"], root / "pool-again", shard_size=8
        )
    )
    stable = [checksum(p) for p in extracted["pool"]["shards"]] == [
        checksum(p) for p in again["shards"]
    ] and checksum(extracted["pool"]["params"]) == checksum(again["params"])
    if not stable:
        failures.append("re-extraction changed checksums")

    ok = not failures
    print(
        f"{'PASS' if ok else 'FAIL'} — extractor shards validate and score in "
        f"the scoring pipeline with zero format errors; re-extraction is "
        f"checksum-stable" + (f"  [{'; '.join(failures)}]" if failures else "")
    )
    assert ok, "; ".join(failures)

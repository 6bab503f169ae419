import json

import numpy as np
import pytest
from PIL import Image


def build_dataset(root, ids, *, seed=0, tagged=True, caption=None):
    """Seeded PNG + caption fixture; returns the manifest path."""
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for i in ids:
        arr = rng.integers(0, 256, size=(8, 6, 3), dtype=np.uint8)
        name = f"img-{i}.png"
        Image.fromarray(arr, "RGB").save(root / name)
        entry = {
            "id": i,
            "image": name,
            "caption": caption or f"a small synthetic test image number {i}",
        }
        if tagged:
            entry["tags"] = ["even" if i % 2 == 0 else "odd"]
        lines.append(json.dumps(entry))
    manifest = root / "manifest.jsonl"
    manifest.write_text("".join(line + "\n" for line in lines))
    return manifest


@pytest.fixture
def dataset(tmp_path):
    return build_dataset(tmp_path / "data", range(4))

import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from demenscan.data import CLASS_NAMES, DatasetIndex, Sample
from demenscan.model import ModelSpec

sys.path.insert(0, str(Path(__file__).parent))

# 16 x 16 input, filters [4, 4, 8, 4]: the gradient-check architecture.
REDUCED = ModelSpec(input_size=(16, 16, 3), filters=(4, 4, 8, 4), fc_widths=(256, 128))


def params64(params):
    return {k: v.astype(np.float64) for k, v in params.items()}


def write_png(path, array):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path)


def make_corpus(root, per_class=(1, 1, 1, 1), size=16, seed=0):
    """Class-per-directory grayscale PNG corpus; class c is brighter for larger c."""
    rng = np.random.default_rng(seed)
    for label, (name, n) in enumerate(zip(CLASS_NAMES, per_class)):
        for i in range(n):
            base = 40 + 50 * label
            img = np.clip(base + rng.integers(-20, 21, size=(size, size)), 0, 255)
            write_png(root / name / f"img{i:03d}.png", img)
    return root


def fake_index(counts):
    """Index of placeholder paths with the given per-class counts (no files)."""
    samples = [Sample(f"/fake/{CLASS_NAMES[c]}/{i:05d}.png", c)
               for c, n in enumerate(counts) for i in range(n)]
    return DatasetIndex(samples)


@pytest.fixture
def corpus4(tmp_path):
    return make_corpus(tmp_path / "corpus", (1, 1, 1, 1))


@pytest.fixture
def corpus_small(tmp_path):
    return make_corpus(tmp_path / "corpus", (6, 6, 6, 6))


ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}")

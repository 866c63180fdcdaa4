import numpy as np
import pytest
from PIL import Image

from feature_export.extract import build_backbone

CLASSES = ["bed", "chair", "kettle", "lamp", "mug"]


def make_image(path, seed, size=64):
    rng = np.random.default_rng(seed)
    Image.fromarray(rng.integers(0, 256, (size, size, 3), dtype=np.uint8)).save(path)


@pytest.fixture()
def fixture_tree(tmp_path):
    """The 20-image tree: 5 classes x 4 images, deterministic pixel content."""
    root = tmp_path / "domain_art"
    for c, name in enumerate(CLASSES):
        class_dir = root / name
        class_dir.mkdir(parents=True)
        for i in range(4):
            make_image(class_dir / f"img_{i}.png", seed=c * 100 + i)
    return root


@pytest.fixture(scope="session")
def backbone():
    """One seeded random-init backbone shared across tests (no weight download
    in CI; features are meaningless but deterministic)."""
    return build_backbone("random", seed=0)

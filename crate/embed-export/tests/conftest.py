import numpy as np
import pytest
from PIL import Image


@pytest.fixture
def job_dirs(tmp_path):
    images = tmp_path / "images"
    images.mkdir()
    rng = np.random.default_rng(3)
    for name in ("cat_01", "dog_02"):
        px = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
        Image.fromarray(px).save(images / f"{name}.png")
    cats = tmp_path / "categories.txt"
    cats.write_text("red solid\n# comment\n\ngreen stripes\nblue dots\n")
    return images, cats, tmp_path / "out"

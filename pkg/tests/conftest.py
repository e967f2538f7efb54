import numpy as np
import pytest
from PIL import Image
from skimage import data


def natural_patch(seed: int, n: int = 32, scale: int = 4) -> np.ndarray:
    """Deterministic downsampled crop of the cameraman image, values in [0, 1]."""
    img = Image.fromarray(data.camera())
    img = img.resize((img.width // scale, img.height // scale), Image.BOX)
    a = np.asarray(img, dtype=np.float64) / 255.0
    r = np.random.default_rng(seed)
    i, j = r.integers(0, a.shape[0] - n, 2)
    return a[i:i + n, j:j + n]


@pytest.fixture
def patch():
    return natural_patch


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

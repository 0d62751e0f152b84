import numpy as np
import pytest

from nifti_ref import write_nifti


@pytest.fixture
def make_image(tmp_path):
    """Write a small NIFTI file; 4D when n_volumes is given."""

    def _make(relpath, shape=(4, 4, 4), n_volumes=None, fill=None, seed=0):
        path = tmp_path / relpath
        path.parent.mkdir(parents=True, exist_ok=True)
        full_shape = shape + (n_volumes,) if n_volumes else shape
        if fill is not None:
            arr = np.full(full_shape, fill, dtype=np.float32)
        else:
            rng = np.random.default_rng(seed)
            arr = rng.uniform(0, 100, size=full_shape).astype(np.float32)
        return write_nifti(path, arr)

    return _make

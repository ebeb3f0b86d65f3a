import numpy as np
import pytest
import torch

from ganprotect.synthetic import make_shapes


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def shapes_small():
    return make_shapes(64, 16, 2, seed=3, name="small")


def read_record(path, index, record_size, label_offset, pixel_offset, npix):
    """Independent reader: seek straight to one record of a fixed-size layout."""
    with open(path, "rb") as fh:
        fh.seek(index * record_size)
        rec = fh.read(record_size)
    assert len(rec) == record_size
    label = rec[label_offset]
    pixels = np.frombuffer(rec, dtype=np.uint8, count=npix, offset=pixel_offset)
    return label, pixels


def read_stl10_image(x_path, y_path, index):
    """Independent STL-10 decoder: column-major planes, labels 1..10."""
    with open(x_path, "rb") as fh:
        fh.seek(index * 27648)
        raw = np.frombuffer(fh.read(27648), dtype=np.uint8)
    with open(y_path, "rb") as fh:
        fh.seek(index)
        label = fh.read(1)[0] - 1
    img = np.empty((3, 96, 96), dtype=np.uint8)
    for c in range(3):
        plane = raw[c * 9216:(c + 1) * 9216]
        for col in range(96):
            img[c, :, col] = plane[col * 96:(col + 1) * 96]
    return label, img

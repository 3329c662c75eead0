import pytest

from crossview_align.config import load_config
from crossview_align.data import SyntheticSpec, generate_dataset, load_dataset

TINY = [
    ("data.identities", "12"), ("data.samples_per_view", "4"), ("data.image_h", "32"), ("data.image_w", "16"),
    ("encoder.image_h", "32"), ("encoder.image_w", "16"), ("encoder.depth", "2"), ("encoder.dim", "16"),
    ("encoder.heads", "2"), ("optim.P", "3"), ("optim.K", "4"), ("optim.epochs", "2"),
]


def tiny_config(*extra):
    return load_config(overrides=TINY + list(extra))


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_data")
    generate_dataset(tiny_config().data, root)
    return root


@pytest.fixture(scope="session")
def tiny_dataset(tiny_data_dir):
    return load_dataset(tiny_data_dir)

import pytest

from lesionclass.synth import SynthConfig, synth_generate


@pytest.fixture(scope="session")
def mini_dataset(tmp_path_factory):
    """A small on-disk dataset shared by tests that just need real files."""
    root = tmp_path_factory.mktemp("mini_data")
    manifest = synth_generate(SynthConfig(class_sizes=(8, 6, 5, 4), seed=123), root)
    return manifest


@pytest.fixture(scope="session")
def full_dataset(tmp_path_factory):
    """The default 193-image long-tail fixture (100/50/25/12/6 at 64x64)."""
    root = tmp_path_factory.mktemp("full_data")
    manifest = synth_generate(SynthConfig(seed=0), root)
    return manifest

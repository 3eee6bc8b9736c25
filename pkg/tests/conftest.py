import pytest

from pipeline.synthgen import SynthSpec, generate, write_dataset

SMALL_SPEC = SynthSpec(n_workers=3, minutes_per_worker=0.25, holdout_worker="w3", sloppy_workers=[])


@pytest.fixture(scope="session")
def small_output():
    return generate(SMALL_SPEC, seed=7)


@pytest.fixture(scope="session")
def small_data_dir(tmp_path_factory, small_output):
    directory = tmp_path_factory.mktemp("synth")
    write_dataset(small_output, SMALL_SPEC, 7, str(directory))
    return str(directory)

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fateseg import DecoderSpec, EncoderSpec, PipelineConfig, build_library, default_spec, make_dataset  # noqa: E402


@pytest.fixture(scope="session")
def small_spec():
    return default_spec(dims=(32, 32, 32), noise_sigma=0.02, jitter=1)


@pytest.fixture(scope="session")
def small_cases(small_spec):
    return make_dataset(small_spec, 3, seed=5)


@pytest.fixture(scope="session")
def small_encoder():
    return EncoderSpec(input_size=32, patch=4, dim=16)


@pytest.fixture(scope="session")
def small_config(small_encoder):
    return PipelineConfig(j=2, encoder=small_encoder, decoder=DecoderSpec(patch=4))


@pytest.fixture(scope="session")
def small_library(small_cases, small_encoder):
    return build_library(small_cases, small_encoder)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(acceptance_log.LINES):
            terminalreporter.write_line(acceptance_log.LINES[number])

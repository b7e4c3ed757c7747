from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from autorig.synthetic import CharacterSpec, generate_character  # noqa: E402


@pytest.fixture(scope="session")
def character():
    return generate_character(CharacterSpec(head_to_body_ratio=6.0, seed=3))


@pytest.fixture(scope="session")
def clean_character():
    return generate_character(CharacterSpec(head_to_body_ratio=5.0, noise_sigma=0.0, seed=11))

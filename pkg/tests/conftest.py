import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from layerwarp.synth import generate_scene, scene_s1, scene_s2


@pytest.fixture(scope="session")
def s1():
    return generate_scene(scene_s1())


@pytest.fixture(scope="session")
def s2():
    return generate_scene(scene_s2())

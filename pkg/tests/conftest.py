import json
from pathlib import Path

import pytest

from qsplice.forge import Box, ForgeRecipe, forge, make_texture
from qsplice.jpeg import GridShift, quality_to_matrix

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def manifest():
    return json.loads((FIXTURES / "manifest.json").read_text())


@pytest.fixture(scope="session")
def texture_256():
    return make_texture(1000, (256, 256))


@pytest.fixture(scope="session")
def texture_128():
    return make_texture(1001, (128, 128))


@pytest.fixture(scope="session")
def adjpeg_65_90(texture_128):
    """Aligned double compression, QF1=65 then QF2=90."""
    from qsplice.jpeg import double_compress

    return double_compress(texture_128, quality_to_matrix(65), GridShift(0, 0),
                           quality_to_matrix(90))


@pytest.fixture(scope="session")
def forged_k2(texture_256):
    """Oracle-friendly two-source sample: QF1=95 background, QF1=65 donor."""
    recipe = ForgeRecipe(
        k=2, type="II", qf_background=95, qf_donors=[65], qf2=90,
        boxes=[Box(top=64, left=80, h=96, w=96)],
        shift_background=GridShift(2, 4), shift_donors=[GridShift(3, 1)],
        seed=77,
    )
    return forge(texture_256, [make_texture(1002, (256, 256))], recipe)


@pytest.fixture(scope="session")
def forged_k1():
    recipe = ForgeRecipe(k=1, type="I", qf_background=85, qf2=90, seed=78)
    return forge(make_texture(1003, (256, 256)), [], recipe)

import numpy as np
import pytest

from nucrobust.core import LabelledPatch


def make_patch(pid, inst, cls=None, image=None):
    inst = np.asarray(inst, dtype=np.int32)
    if cls is None:
        cls = (inst > 0).astype(np.int32)
    return LabelledPatch(pid, image, inst, np.asarray(cls, dtype=np.int32))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def he_bundle():
    from nucrobust.synthetic import make_he_bundle
    return make_he_bundle(n=6, size=96, seed=7)

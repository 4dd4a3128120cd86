import numpy as np
import pytest

from depthface.facemodel import build_from_corpus, marginalize, truncate
from depthface.synth import generate_corpus

from .helpers import render_intrinsics


@pytest.fixture(scope="session")
def corpus():
    meshes, tris = generate_corpus(12, 5, 2000, seed=20)
    return meshes, tris


@pytest.fixture(scope="session")
def full_model(corpus):
    meshes, tris = corpus
    return build_from_corpus(meshes, tris)


@pytest.fixture(scope="session")
def model(full_model):
    # the synthetic corpus has six independent identity fields and three
    # expression fields; truncating at those ranks keeps every retained
    # weight dimension geometrically observable
    return truncate(full_model, 6, 3)


@pytest.fixture(scope="session")
def generic_dist(model):
    return marginalize(model)


@pytest.fixture(scope="session")
def intrinsics():
    return render_intrinsics()

import pytest
import torch

from collabdistill.architectures import build_encoder, preset
from collabdistill.data import CONTENT_GENERATOR, load_corpus
from collabdistill.training import HyperParams, train_decoder

torch.set_num_threads(1)

# Lines recorded by the acceptance module, echoed in the terminal summary.
ACCEPTANCE_LINES = []

TOY_STEPS = 1000


def toy_corpus(seed=0, count=64):
    return load_corpus({"generator": CONTENT_GENERATOR, "count": count}, resize=48, crop=32, seed=seed)


def heldout_images(count=16, seed=1000):
    return toy_corpus(seed=seed, count=count).fixed_crops(seed=seed)


def train_toy_pair(seed: int, steps: int = TOY_STEPS, stage=None):
    encoder = build_encoder(preset("toy"), seed=seed)
    hp = HyperParams.desk(max_steps=steps, seed=seed)
    ckpt = train_decoder(encoder, toy_corpus(), hp, stage=stage)
    return ckpt.network("encoder"), ckpt.network("decoder"), ckpt


@pytest.fixture(scope="session")
def corpus():
    return toy_corpus()


@pytest.fixture(scope="session")
def heldout():
    return heldout_images()


@pytest.fixture(scope="session")
def toy_pair_a():
    return train_toy_pair(seed=1)


@pytest.fixture(scope="session")
def toy_pair_b():
    return train_toy_pair(seed=2)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

import io

import pytest
import torch
from rich.console import Console

from exp.analogy.config import ModelConfig
from exp.analogy.data import KGDataset, TripleStore, Vocab, make_synthetic_kg
from exp.analogy.model import KGEModel
from exp.analogy.observer import Observer


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def console_buffer() -> io.StringIO:
    return io.StringIO()


@pytest.fixture
def observer(console_buffer) -> Observer:
    return Observer(console=Console(file=console_buffer, width=200, force_terminal=False))


@pytest.fixture(scope="session")
def planted():
    return make_synthetic_kg(seed=0)


@pytest.fixture
def tiny_dataset() -> KGDataset:
    vocab = Vocab([f"e{i}" for i in range(6)], ["r0", "r1"])
    train = TripleStore(torch.tensor([[0, 0, 1], [1, 0, 2], [2, 1, 3], [3, 1, 4], [4, 0, 5], [5, 1, 0]]), "train")
    valid = TripleStore(torch.tensor([[0, 1, 2]]), "valid")
    test = TripleStore(torch.tensor([[1, 1, 3], [2, 0, 4]]), "test")
    return KGDataset(vocab, train, valid, test)


@pytest.fixture
def cyclic_hole_model() -> KGEModel:
    """HolE model on three one-hot entities; tail is the successor or predecessor mod 3."""
    return KGEModel.from_tables(
        ModelConfig(model_kind="hole", dim=3),
        torch.eye(3, dtype=torch.float64),
        torch.tensor([[0.0, 1.0, 1.0]], dtype=torch.float64),
    )


@pytest.fixture
def write_tsv(tmp_path):
    def write(name: str, rows: list[tuple[str, str, str]]):
        path = tmp_path / name
        path.write_text("".join(f"{s}\t{r}\t{o}\n" for s, r, o in rows), encoding="utf-8")
        return path

    return write

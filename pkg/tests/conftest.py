import pytest

from fdfl.config import TrainConfig, apply_overrides
from fdfl.data import synth_generate
from fdfl.trainer import load_corpus

TINY = [
    "data.image_size=32",
    'data.n_videos={"train": 6, "val": 4, "test": 4}',
    "data.frames_per_video=2",
    "model.widths=[4, 8, 8, 8, 8]",
    "model.afimb.grouped_conv_out=12",
    "model.afimb.mid_channels=8",
    "model.afimb.attention_reduction=4",
    "model.afimb.out_channels=8",
    "model.embedding_dim=8",
    "optim.lr=0.001",
    "run.batch_size=8",
    "run.max_steps=6",
    "run.eval_every=3",
]


def tiny_config(root, *extra) -> TrainConfig:
    return apply_overrides(TrainConfig(), TINY + [f"data.root={root}", *extra])


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    synth_generate(tiny_config(root).data.synthetic(), root)
    return root


@pytest.fixture(scope="session")
def tiny_corpus(tiny_root):
    return load_corpus(tiny_config(tiny_root))


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; the assertion is left to the test."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])

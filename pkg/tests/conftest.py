import time

import pytest
import torch

from gridvlp.model import ModelConfig, VLPModel
from gridvlp.pretrain import Trainer, desk_overfit_config
from gridvlp.text import default_vocabulary

TINY = dict(hidden_size=16, num_heads=2, ffn_size=32, dropout=0.0, encoder_layers=2,
            decoder_layers=2, num_queries=5, stem_width=8, stage_widths=(8, 8, 16, 16))


@pytest.fixture(scope="session")
def vocab():
    return default_vocabulary()


def make_tiny(vocab, seed=0, dtype=torch.float32, **overrides):
    torch.manual_seed(seed)
    return VLPModel(ModelConfig(**{**TINY, **overrides}), vocab).to(dtype).eval()


@pytest.fixture
def tiny_model(vocab):
    return make_tiny(vocab)


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """The shared 2000-step joint run on 16 scenes (several minutes on one CPU)."""
    out = tmp_path_factory.mktemp("overfit")
    trainer = Trainer(desk_overfit_config(out_dir=str(out)))
    t0 = time.perf_counter()
    trainer.fit()
    trainer.elapsed = time.perf_counter() - t0
    trainer.model.eval()
    return trainer


# acceptance criterion -> [(passed, detail)], printed once at the end of the session
ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


class Verdict:
    def __init__(self, number: int):
        self.number = number
        self.recorded = False

    def check(self, ok: bool, detail: str) -> None:
        self.recorded = True
        ACCEPTANCE.setdefault(self.number, []).append((bool(ok), detail))
        assert ok, f"criterion {self.number}: {detail}"


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    verdict = Verdict(marker.args[0])
    yield verdict
    if not verdict.recorded:
        ACCEPTANCE.setdefault(verdict.number, []).append((False, f"{request.node.name} errored"))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ACCEPTANCE):
        results = ACCEPTANCE[number]
        status = "PASS" if all(ok for ok, _ in results) else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {status}  "
                                    + "; ".join(detail for _, detail in results))

import os
from types import SimpleNamespace

import pytest

from diffunfold import experiment
from diffunfold.checkpoint import load_checkpoint
from diffunfold.config import Config

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def toy_dir(cfg: Config) -> str:
    return os.path.join(ROOT, ".cache", "toy-" + cfg.fingerprint[:12])


@pytest.fixture(scope="session")
def toy():
    """The default-config toy model (64x64 shapes, deblur + inpainting pool),
    trained on first use and cached under .cache/ keyed by config fingerprint."""
    cfg = Config()
    out = toy_dir(cfg)
    path = experiment.checkpoint_path(out)
    done = os.path.exists(path) and load_checkpoint(path).step >= cfg.training.total_steps
    if not done:
        experiment.train(cfg, out, log=lambda msg: None)
    den = experiment.load_model(cfg, path)
    _, held = experiment.build_datasets(cfg)
    return SimpleNamespace(cfg=cfg, den=den, held=held.items, checkpoint=path, out_dir=out)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])

import numpy as np
import pytest

from pluto.engine import EngineState
from pluto.selector import SelectorConfig, init_selector
from pluto.vit import VitConfig, init_params, quantize, random_module


@pytest.fixture(scope="session")
def cfg():
    return VitConfig()


@pytest.fixture(scope="session")
def params(cfg):
    return quantize(init_params(cfg, np.random.default_rng(0)))


@pytest.fixture(scope="session")
def modules(cfg):
    return [random_module(cfg, "vpt", 4, seed=j, module_id=f"vpt-{j:02d}", domain_label=f"dom{j}:sev1", scale=0.5)
            for j in range(4)]


@pytest.fixture(scope="session")
def state(params, modules, cfg):
    sel = init_selector(SelectorConfig(d=cfg.embed_dim, v=cfg.num_classes), seed=0)
    return EngineState.create(params, modules, sel)


@pytest.fixture
def images(cfg):
    def make(n, seed=0):
        return np.random.default_rng(seed).uniform(0, 1, size=(n, cfg.image_size, cfg.image_size, cfg.channels))

    return make


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

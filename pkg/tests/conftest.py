import os
import sys
from dataclasses import replace

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from mdiqa.config import desk_scale  # noqa: E402
from mdiqa.registry import ModelConfig  # noqa: E402


def tiny_model_cfg(**kw) -> ModelConfig:
    base = dict(backbone_widths=(4, 6, 8), backbone_strides=(4, 8, 16), stem_width=4, head_width=4,
                feature_width=4, semantic_width=4, weight_width=2, fusion_hidden=4, crop=32)
    base.update(kw)
    return ModelConfig(**base)


def tiny_run_cfg(**model_kw):
    cfg = desk_scale()
    cfg.model = tiny_model_cfg(**model_kw)
    cfg.data = replace(cfg.data, n_samples=24, size=32)
    cfg.stage1 = replace(cfg.stage1, epochs=2, aesthetic_epochs=1, batch_size=8, crop=32)
    cfg.stage2 = replace(cfg.stage2, epochs=2, batch_size=8, crop=32)
    cfg.restore = replace(cfg.restore, iterations=4, batch_size=2, crop=32, restorer_width=4,
                          n_train=4, n_val=2, val_every=2)
    return cfg


@pytest.fixture
def tiny_cfg():
    return tiny_model_cfg()


@pytest.fixture
def tiny_run():
    return tiny_run_cfg()


# acceptance results: criterion id -> list of (ok, detail); printed once at the end of the run
ACCEPTANCE = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE.setdefault(criterion, []).append((bool(ok), detail))
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[k]
        ok = all(p for p, _ in parts)
        tr.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'} | " + " ; ".join(d for _, d in parts))

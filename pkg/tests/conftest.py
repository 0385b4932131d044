import numpy as np
import pytest
import torch

from patchmix_reid import data as D
from patchmix_reid.model import ModelConfig
from patchmix_reid.runner.config import parse_config

torch.set_num_threads(1)

_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion for the summary."""

    def record(name: str, ok: bool, detail: str = ""):
        _CRITERIA.append(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f"  ({detail})" if detail else ""))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_index():
    spec = D.SynthSpec(identities=4, n_rgb=4, n_ir=3, height=48, width=24)
    return D.synth_dataset(spec, np.random.default_rng(7))


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(class_count=4, part_count=3, stem_width=8, stem_kernel=5, stem_stride=4, stem_pool=False,
                       stage_widths=(8, 8, 12, 16), stage_depths=(1, 1, 1, 1), stage_strides=(1, 2, 1, 1),
                       attention_after=(1, 2), attention_reduction=4, input_size=(48, 24))


def tiny_experiment(**over):
    """Seconds-scale training config on 48x24 synthetic images."""
    base = [
        "data.image_height=48", "data.image_width=24",
        "data.synth.identities=4", "data.synth.n_rgb=4", "data.synth.n_ir=2",
        "data.synth.test_identities=4", "data.synth.test_n_rgb=4", "data.synth.test_n_ir=2",
        "data.identities_per_batch=2", "data.images_per_identity=2", "data.steps_per_epoch=2",
        "model.part_count=3", "model.stem_width=8", "model.stage_widths=[8,8,12,16]",
        "model.attention_reduction=4", "mix.patch_height=8", "mix.patch_width=8",
        "train.epochs=2", "mu.ramp_epochs=1", "bank.start_epoch=1",
        "optim.warmup_epochs=1", "optim.milestones=[1]", "eval.trials=2",
    ]
    over_list = [f"{k}={v}" for k, v in over.items()]
    return parse_config(preset="toy", overrides=base + over_list)

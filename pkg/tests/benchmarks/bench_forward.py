import numpy as np
import pytest

import momlm
from momlm.model import MomModel, lm_forward, lm_loss, parse_chunk_plan, parse_mom_config
from momlm.modules import ModelConfig
from momlm.profiler import DIMS_PRESETS, PRESET_PLANS, profile

CONFIG = ModelConfig(d_model=64, n_heads=4, d_ff=256, max_len=128, vocab_size=256)


@pytest.fixture
def tokens():
    return np.random.default_rng(0).integers(0, 256, size=128)


def build(mom):
    plan = "[1-1-1-1]" if mom is None else "[1-2-1]"
    return MomModel.build(
        CONFIG, parse_chunk_plan(plan), None if mom is None else parse_mom_config(mom)
    )


@pytest.mark.benchmark(group="forward")
@pytest.mark.parametrize("mom", [None, "K1H2", "K2H2S", "K2H6S"])
def test_lm_forward(benchmark, tokens, mom):
    model = build(mom)
    benchmark.extra_info["version"] = momlm.__version__
    benchmark(lm_forward, model, tokens)


@pytest.mark.benchmark(group="backward")
@pytest.mark.parametrize("mom", [None, "K2H2S"])
def test_loss_backward(benchmark, tokens, mom):
    model = build(mom)

    def step():
        model.zero_grad()
        logits, _ = lm_forward(model, tokens[:-1])
        lm_loss(logits, tokens[1:]).backward()

    benchmark.extra_info["version"] = momlm.__version__
    benchmark(step)


@pytest.mark.benchmark(group="profile")
def test_profile_presets(benchmark):
    moms = [parse_mom_config(m) for m in ("K1H4", "K3H1S", "K2H6S", "K3H2S")]

    def run():
        for name, dims in DIMS_PRESETS.items():
            profile(dims, parse_chunk_plan(PRESET_PLANS[name]), moms)

    benchmark(run)

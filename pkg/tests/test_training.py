import math
from pathlib import Path
import re

import numpy as np
import pytest

from momlm.assembly import MomChunk
from momlm.checkpoint import load_model
from momlm.corpus import Batch, SequenceSampler, corpus_load, unigram_entropy
from momlm.errors import ConfigurationError, ContractError, TrainingError
from momlm.model import (
    ChunkPlan,
    MomModel,
    VanillaBlock,
    lm_forward,
    parse_chunk_plan,
    parse_mom_config,
)
from momlm.modules import ModelConfig
from momlm.tensor import Tensor, default_dtype, parameter
from momlm.training import (
    OptimizerState,
    StepMetrics,
    TrainConfig,
    batch_loss,
    clip_grad_norm,
    decompose_vanilla,
    evaluate,
    lr_at,
    optimizer_step,
    tie_pool_modules,
    train_phase,
)

CONFIG = ModelConfig(d_model=8, n_heads=2, d_ff=16, max_len=8, vocab_size=11)
BYTE_CONFIG = ModelConfig(d_model=16, n_heads=2, d_ff=32, max_len=16, vocab_size=256)
METRICS_LINE = re.compile(
    r"^step=\d+ phase=[12] loss=\d+\.\d{6} lr=\d\.\d{6}e[+-]\d+( val_loss=\d+\.\d{6})?$"
)


def vanilla(layers=8, seed=0, config=CONFIG):
    with default_dtype("float64"):
        return MomModel.build(config, ChunkPlan.vanilla(layers), seed=seed)


def sampler(seed=0, seq_len=8, batch_size=4):
    text = b"the quick brown fox jumps over the lazy dog. " * 40
    ids = np.frombuffer(text, dtype=np.uint8).astype(np.int64)
    return SequenceSampler([ids], seq_len, batch_size, seed)


def tiny_model(plan="[1-1]", mom=None, seed=0):
    return MomModel.build(
        BYTE_CONFIG,
        parse_chunk_plan(plan),
        None if mom is None else parse_mom_config(mom),
        seed=seed,
    )


class TestSchedule:
    config = TrainConfig(peak_lr=1e-3, warmup_ratio=0.1, total_steps=100)

    def test_examples(self):
        assert lr_at(0, self.config) == 0.0
        assert lr_at(5, self.config) == pytest.approx(5e-4)
        assert lr_at(10, self.config) == pytest.approx(1e-3)
        assert lr_at(100, self.config) == pytest.approx(1e-4)
        assert lr_at(55, self.config) == pytest.approx(1e-4 + 0.9e-3 * 0.5)

    def test_monotone_decay(self):
        rates = [lr_at(s, self.config) for s in range(10, 101)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))
        assert min(rates) >= 0

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            lr_at(101, self.config)
        with pytest.raises(ContractError):
            lr_at(-1, self.config)

    def test_no_decay_window(self):
        config = TrainConfig(peak_lr=2e-3, warmup_ratio=1.0, total_steps=10)
        assert lr_at(10, config) == pytest.approx(2e-3)
        assert lr_at(0, TrainConfig(total_steps=0)) == pytest.approx(1e-3)

    def test_warmup_steps_round(self):
        assert TrainConfig(warmup_ratio=0.1, total_steps=2000).warmup_steps == 200


def scalar_problem(value=1.0, decay=0.0):
    with default_dtype("float64"):
        p = parameter(np.array(value))
    params = {"p": p}
    state = OptimizerState.create(params, TrainConfig(weight_decay=decay))
    return p, params, state


class TestOptimizer:
    def test_zero_gradient_no_decay(self):
        p, params, state = scalar_problem(decay=0.0)
        for _ in range(3):
            optimizer_step(params, {"p": np.array(0.0)}, state, 1e-2)
        assert p.data == 1.0

    def test_sign_limit(self):
        p, params, state = scalar_problem(value=0.0)
        lr = 1e-3
        for _ in range(200):
            before = float(p.data)
            optimizer_step(params, {"p": np.array(3.0)}, state, lr)
        assert abs(before - float(p.data)) == pytest.approx(lr, rel=0.01)

    def test_scalar_trajectory(self):
        p, params, state = scalar_problem(value=1.0)
        lr, b1, b2, eps = 0.1, 0.9, 0.95, 1e-8
        x, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate([0.5, -1.0, 2.0], start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
            optimizer_step(params, {"p": np.array(g)}, state, lr)
            assert float(p.data) == pytest.approx(x, abs=1e-10)
        assert state.step == 3

    def test_decay_only_on_matrices(self):
        with default_dtype("float64"):
            w, b = parameter(np.ones((2, 2))), parameter(np.ones(2))
        params = {"w": w, "b": b}
        state = OptimizerState.create(params, TrainConfig(weight_decay=0.5))
        optimizer_step(params, {"w": np.zeros((2, 2)), "b": np.zeros(2)}, state, 0.1)
        assert np.allclose(w.data, 1.0 - 0.1 * 0.5)
        assert np.array_equal(b.data, np.ones(2))

    def test_non_finite_gradient_aborts(self):
        with default_dtype("float64"):
            a, b = parameter(np.ones(2)), parameter(np.ones(2))
        params = {"a": a, "b": b}
        state = OptimizerState.create(params)
        with pytest.raises(TrainingError, match="non-finite gradient in b"):
            optimizer_step(params, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, state, 0.1)
        assert np.array_equal(a.data, np.ones(2))
        assert state.step == 0

    def test_frozen_and_gradless_parameters(self):
        with default_dtype("float64"):
            frozen, idle = parameter(np.ones(2)), parameter(np.ones(2))
        frozen.requires_grad = False
        params = {"frozen": frozen, "idle": idle}
        state = OptimizerState.create(params)
        optimizer_step(params, {"frozen": np.ones(2), "idle": None}, state, 0.1)
        assert np.array_equal(frozen.data, np.ones(2))
        assert np.array_equal(idle.data, np.ones(2))

    def test_missing_moments(self):
        p, params, state = scalar_problem()
        with pytest.raises(ContractError):
            optimizer_step({**params, "q": p}, {"p": np.array(1.0)}, state, 0.1)

    def test_clip_grad_norm(self):
        a = Tensor(np.zeros(2), requires_grad=True)
        a.grad = np.array([3.0, 4.0])
        assert clip_grad_norm([a], 1.0) == pytest.approx(5.0)
        assert np.allclose(a.grad, [0.6, 0.8], atol=1e-6)
        assert clip_grad_norm([a], 10.0) == pytest.approx(1.0, abs=1e-5)


class TestDecompose:
    def test_pool_takes_middle_layers(self):
        source = vanilla(8)
        model = decompose_vanilla(source, parse_chunk_plan("[1-1-4-1-1]"), parse_mom_config("K2H2S"))
        chunk = model.blocks[2]
        assert isinstance(chunk, MomChunk)
        for k in range(4):
            donor = source.blocks[2 + k]
            for (name, got), (_, want) in zip(
                chunk.pool.attention[k].named_parameters(), donor.attention.named_parameters()
            ):
                assert np.array_equal(got.data, want.data), name
                assert got is not want
            for (name, got), (_, want) in zip(
                chunk.pool.ffn[k].named_parameters(), donor.ffn.named_parameters()
            ):
                assert np.array_equal(got.data, want.data), name
        for i, j in ((0, 0), (1, 1), (3, 6), (4, 7)):
            for (name, got), (_, want) in zip(
                model.blocks[i].named_parameters(), source.blocks[j].named_parameters()
            ):
                assert np.array_equal(got.data, want.data), name
        assert np.array_equal(model.token_embedding.data, source.token_embedding.data)
        assert np.array_equal(model.position_embedding.data, source.position_embedding.data)
        assert model.token_embedding.dtype == np.float64

    def test_norms_are_donor_means(self):
        source = vanilla(4)
        for i, block in enumerate(source.blocks):
            block.attention_norm.gain.data[:] = float(i)
        model = decompose_vanilla(source, parse_chunk_plan("[4]"), parse_mom_config("K1H4"))
        assert np.allclose(model.chunks[0].attention_norm.gain.data, 1.5)

    def test_routers_are_fresh_and_seeded(self):
        source = vanilla(8)
        plan, mom = parse_chunk_plan("[1-1-4-1-1]"), parse_mom_config("K2H2S")
        a = decompose_vanilla(source, plan, mom, seed=1)
        b = decompose_vanilla(source, plan, mom, seed=1)
        c = decompose_vanilla(source, plan, mom, seed=2)
        ra, rb, rc = (m.chunks[0].attention_router for m in (a, b, c))
        assert np.abs(ra.projection.data).sum() > 0
        assert np.array_equal(ra.projection.data, rb.projection.data)
        assert not np.array_equal(ra.projection.data, rc.projection.data)

    def test_all_vanilla_is_forward_equivalent(self):
        source = vanilla(3)
        model = decompose_vanilla(source, ChunkPlan.vanilla(3), None)
        tokens = np.arange(6) % CONFIG.vocab_size
        a, _ = lm_forward(source, tokens)
        b, _ = lm_forward(model, tokens)
        assert np.allclose(a.data, b.data, rtol=0, atol=1e-6)

    def test_layer_mismatch(self):
        with pytest.raises(ConfigurationError):
            decompose_vanilla(vanilla(4), parse_chunk_plan("[1-4]"), parse_mom_config("K1H4"))

    def test_needs_vanilla_source(self):
        routed = decompose_vanilla(vanilla(4), parse_chunk_plan("[4]"), parse_mom_config("K1H4"))
        with pytest.raises(ConfigurationError):
            decompose_vanilla(routed, parse_chunk_plan("[4]"), parse_mom_config("K1H4"))

    def test_tie_pool_modules(self):
        model = decompose_vanilla(vanilla(4), parse_chunk_plan("[4]"), parse_mom_config("K2H2S"))
        tie_pool_modules(model)
        pool = model.chunks[0].pool
        for module in pool.ffn[1:]:
            assert np.array_equal(module.w_up.data, pool.ffn[0].w_up.data)
            assert module.w_up is not pool.ffn[0].w_up


class TestTrainPhase:
    def test_zero_steps(self, tmp_path):
        model = tiny_model()
        before = model.token_embedding.data.copy()
        metrics = train_phase(
            model, sampler(), TrainConfig(total_steps=0), 1, checkpoint_dir=tmp_path
        )
        assert metrics == []
        assert np.array_equal(model.token_embedding.data, before)
        assert not list(tmp_path.iterdir())

    def test_bad_phase(self):
        with pytest.raises(ConfigurationError):
            train_phase(tiny_model(), sampler(), TrainConfig(total_steps=1), 3)

    def test_loss_decreases(self):
        model = tiny_model()
        config = TrainConfig(peak_lr=1e-2, total_steps=60, seq_len=8, batch_size=4)
        metrics = train_phase(model, sampler(), config, 1)
        first = np.mean([m.loss for m in metrics[:5]])
        last = np.mean([m.loss for m in metrics[-5:]])
        assert last < first

    def test_metrics_and_checkpoints(self, tmp_path):
        model = tiny_model()
        config = TrainConfig(
            total_steps=5, seq_len=8, batch_size=2, eval_interval=2, checkpoint_interval=4
        )
        val = [sampler(seed=9, batch_size=2).next_batch()]
        log = tmp_path / "metrics.log"
        metrics = train_phase(
            model, sampler(), config, 1, val_batches=val, metrics_path=log, checkpoint_dir=tmp_path
        )
        lines = log.read_text().splitlines()
        assert len(lines) == 5
        assert all(METRICS_LINE.match(line) for line in lines)
        assert [m.val_loss is not None for m in metrics] == [False, True, False, True, True]
        assert lines[1].endswith(f"val_loss={metrics[1].val_loss:.6f}")
        assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == [
            "phase1_final.ckpt",
            "phase1_step4.ckpt",
        ]
        restored, metadata = load_model(tmp_path / "phase1_final.ckpt")
        assert metadata["phase"] == "1" and metadata["step"] == "5"
        assert np.array_equal(restored.token_embedding.data, model.token_embedding.data)

    def test_metrics_line_format(self):
        line = StepMetrics(3, 2, 1.5, 2.5e-4, 1.25).to_line()
        assert line == "step=3 phase=2 loss=1.500000 lr=2.500000e-04 val_loss=1.250000"
        assert StepMetrics(1, 1, 2.0, 0.0).to_line() == "step=1 phase=1 loss=2.000000 lr=0.000000e+00"

    def test_deterministic(self):
        config = TrainConfig(total_steps=4, seq_len=8, batch_size=2)
        runs = []
        for _ in range(2):
            model = tiny_model("[1-2]", "K2H2S")
            runs.append([m.loss for m in train_phase(model, sampler(seed=3), config, 2)])
        assert runs[0] == runs[1]

    def test_phase_two_updates_routers(self):
        model = tiny_model("[1-2]", "K2H2S")
        router = model.chunks[0].ffn_router
        before = router.projection.data.copy()
        config = TrainConfig(total_steps=3, seq_len=8, batch_size=2)
        train_phase(model, sampler(), config, 2)
        assert not np.array_equal(router.projection.data, before)

    def test_tied_modules_stay_identical(self):
        model = tiny_model("[1-2]", "K2H2S")
        config = TrainConfig(total_steps=2, seq_len=8, batch_size=2)
        train_phase(model, sampler(), config, 2, tie_modules=True)
        pool = model.chunks[0].pool
        assert np.array_equal(pool.attention[0].w_q.data, pool.attention[1].w_q.data)

    def test_evaluate_and_batch_loss(self):
        model = tiny_model()
        batch = sampler().next_batch()
        loss = batch_loss(model, batch)
        assert loss.item() == pytest.approx(evaluate(model, [batch]))
        # an untrained byte model sits near the uniform loss
        assert abs(loss.item() - math.log(256)) < 0.5
        with pytest.raises(ContractError):
            batch_loss(model, Batch(np.zeros((0, 8), np.int64), np.zeros((0, 8), np.int64)))

    def test_vanilla_blocks_survive_phase_two_layout(self):
        model = tiny_model("[1-2]", "K2H2S")
        assert isinstance(model.blocks[0], VanillaBlock)


DESK_CORPUS = Path(__file__).parents[1].joinpath("data", "desk_corpus.txt")
SMOKE_CONFIG = ModelConfig(d_model=32, n_heads=2, d_ff=64, max_len=32, vocab_size=256)
SMOKE_PLAN = "[1-2-1]"
SMOKE_MOM = "K2H2S"


def smoke_train(steps):
    return TrainConfig(peak_lr=1e-2, total_steps=steps, batch_size=8, seq_len=32)


@pytest.fixture(scope="module")
def desk_corpus(tmp_path_factory):
    path = tmp_path_factory.mktemp("desk") / "corpus.txt"
    path.write_bytes(DESK_CORPUS.read_bytes()[:32768])
    return corpus_load(path, seq_len=32, val_fraction=0.05, seed=0)


@pytest.fixture(scope="module")
def phase_one(desk_corpus):
    model = MomModel.build(SMOKE_CONFIG, ChunkPlan.vanilla(4), seed=0)
    train_phase(model, desk_corpus.train_sampler(8, seed=1), smoke_train(200), 1)
    return model


def phase_two(phase_one, desk_corpus, tie_modules=False):
    model = decompose_vanilla(
        phase_one, parse_chunk_plan(SMOKE_PLAN), parse_mom_config(SMOKE_MOM), seed=0
    )
    train_phase(
        model,
        desk_corpus.train_sampler(8, seed=2),
        smoke_train(80),
        2,
        tie_modules=tie_modules,
    )
    return model


class TestSmallRuns:
    def test_vanilla_beats_unigram_baseline(self, phase_one, desk_corpus):
        val = desk_corpus.validation_batches(8, 4)
        baseline = unigram_entropy(np.concatenate(desk_corpus.train))
        assert evaluate(phase_one, val) < baseline

    def test_two_phase_beats_mom_from_scratch(self, phase_one, desk_corpus):
        val = desk_corpus.validation_batches(8, 4)
        scratch = MomModel.build(
            SMOKE_CONFIG,
            parse_chunk_plan(SMOKE_PLAN),
            parse_mom_config(SMOKE_MOM),
            seed=0,
        )
        train_phase(scratch, desk_corpus.train_sampler(8, seed=1), smoke_train(200), 1)
        two_phase = phase_two(phase_one, desk_corpus)
        assert evaluate(two_phase, val) < evaluate(scratch, val)

    def test_untied_modules_beat_tied(self, phase_one, desk_corpus):
        val = desk_corpus.validation_batches(8, 4)
        untied = phase_two(phase_one, desk_corpus)
        tied = phase_two(phase_one, desk_corpus, tie_modules=True)
        assert evaluate(untied, val) < evaluate(tied, val)

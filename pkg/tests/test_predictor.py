import gc

import numpy as np
import pytest
import torch

from partpolicy import MoEConfig, StatePredictor

from conftest import check_gradients


def tiny_predictor(dtype=torch.float64):
    torch.manual_seed(0)
    return StatePredictor(
        dim=8, horizon=2, num_slots=3, layers=1, heads=2, context_dim=4,
        moe=MoEConfig(num_routed=2, num_shared=1, top_k=1),
        expert_hidden_mult=2, dtype=dtype,
    )


def test_future_shape_and_token_count():
    pred = tiny_predictor(torch.float32)
    grid = torch.randn(3, 8)
    mem = torch.randn(5, 4)
    future, (rec_in, rec_out), aux = pred(grid, mem)
    assert future.shape == (2, 3, 8)
    assert pred.tokens_per_sample == 9
    assert rec_in.num_tokens == 9 and rec_out.num_tokens == 9
    assert rec_in.boundary == "input" and rec_out.boundary == "output"


def test_token_metadata_recount():
    pred = tiny_predictor(torch.float32)
    future, (rec_in, rec_out), _ = pred(torch.randn(2, 3, 8), torch.randn(2, 5, 4))
    # every (sample, time, slot) combination appears exactly once per boundary
    for rec in (rec_in, rec_out):
        combos = set(zip(rec.sample_index, rec.time_index, rec.slot_index))
        assert len(combos) == rec.num_tokens == 2 * 3 * 3


def test_empty_history_memory():
    pred = tiny_predictor(torch.float32)
    grid = torch.randn(3, 8)
    future, _, _ = pred(grid, torch.zeros(0, 4))
    assert future.shape == (2, 3, 8)
    future2, _, _ = pred(grid, None)
    assert future2.shape == (2, 3, 8)


def test_context_dim_mismatch():
    pred = tiny_predictor(torch.float32)
    with pytest.raises(ValueError):
        pred(torch.randn(3, 8), torch.randn(5, 7))
    with pytest.raises(ValueError):
        pred(torch.randn(4, 8), torch.randn(5, 4))


def test_reference_scale_shapes():
    # d = 768, 50-step horizon, 9 slots -> 459 flattened tokens and a
    # (50, 9, 768) future grid; expert count reduced to keep memory sane
    pred = StatePredictor(
        dim=768, horizon=50, num_slots=9, layers=1, heads=8, context_dim=32,
        moe=MoEConfig(num_routed=2, num_shared=1, top_k=1), expert_hidden_mult=1,
    )
    assert pred.tokens_per_sample == 459
    with torch.no_grad():
        future, (rec_in, rec_out), _ = pred(torch.randn(9, 768), torch.randn(4, 32))
    assert future.shape == (50, 9, 768)
    assert rec_in.num_tokens == 459 and rec_out.num_tokens == 459
    del pred
    gc.collect()


def test_gradients_match_finite_differences():
    pred = tiny_predictor(torch.float64)
    grid = torch.randn(3, 8, dtype=torch.float64)
    mem = torch.randn(4, 4, dtype=torch.float64)

    def scalar():
        future, _, aux = pred(grid, mem)
        return (future**2).sum() + aux

    worst = check_gradients(scalar, list(pred.named_parameters()), eps=1e-6, rtol=1e-4)
    assert worst <= 1e-4

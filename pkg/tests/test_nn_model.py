"""Encoder-decoder assembly: blocks, shape schedule, checkpointing, training."""

import numpy as np
import pytest

from cathseg.nn.checkpoint import load_checkpoint, save_checkpoint
from cathseg.nn.loss import dice_loss
from cathseg.nn.model import (
    ModelConfig,
    NConvBlock,
    SegModel,
    build_frame_stack,
    model_forward,
)
from cathseg.nn.optim import OptimizerState
from cathseg.nn.train import TrainSample, train

from conftest import central_diff_grad, rel_error


def tiny_model(levels=2, base=2, convs=1, dropout=0.0, dtype=np.float64, seed=0):
    cfg = ModelConfig(levels=levels, base_filters=base, convs_per_block=convs,
                      dropout_rate=dropout)
    return SegModel(cfg, rng=np.random.default_rng(seed), dtype=dtype)


# ---------------------------------------------------------------------------
# n-conv block
# ---------------------------------------------------------------------------

def test_nconv_zero_weights_is_identity(rng):
    blk = NConvBlock(3, 3, 2, np.random.default_rng(0), np.float64)
    for conv, bn, _ in blk.stages:
        conv.params["kernels"][:] = 0.0
        conv.params["bias"][:] = 0.0
        bn.params["gamma"][:] = 0.0
    x = rng.normal(size=(2, 3, 6, 6))
    assert np.array_equal(blk.forward(x, mode="infer"), x)


def test_nconv_n1_equals_manual_composition(rng):
    blk = NConvBlock(2, 2, 1, np.random.default_rng(4), np.float64)
    x = rng.normal(size=(1, 2, 5, 5))
    y = blk.forward(x, mode="infer")
    conv, bn, act = blk.stages[0]
    manual = act.forward(bn.forward(conv.forward(x), "infer"), "infer") + x
    assert np.array_equal(y, manual)


def test_nconv_projection_on_channel_change(rng):
    blk = NConvBlock(2, 5, 1, np.random.default_rng(4), np.float64)
    assert blk.proj is not None
    x = rng.normal(size=(1, 2, 5, 5))
    assert blk.forward(x, mode="infer").shape == (1, 5, 5, 5)


def test_nconv_gradient_check(rng):
    blk = NConvBlock(2, 2, 2, np.random.default_rng(7), np.float64)
    x = rng.normal(size=(1, 2, 5, 5))
    go = rng.normal(size=(1, 2, 5, 5))

    blk.forward(x, mode="train")
    gx = blk.backward(go)
    fd = central_diff_grad(
        lambda v: float((blk.forward(v, mode="train") * go).sum()), x)
    assert rel_error(gx, fd) < 1e-4

    # parameter gradients of the first stage conv kernel
    conv = blk.stages[0][0]
    kw = conv.params["kernels"]
    analytic = conv.grads["kernels"]

    def loss_of_kernel(kv):
        old = kw.copy()
        kw[:] = kv
        out = float((blk.forward(x, mode="train") * go).sum())
        kw[:] = old
        return out

    fd_k = central_diff_grad(loss_of_kernel, kw.copy())
    assert rel_error(analytic, fd_k) < 1e-4


# ---------------------------------------------------------------------------
# model assembly
# ---------------------------------------------------------------------------

def test_shape_schedule_64_3_levels():
    cfg = ModelConfig(levels=3, base_filters=8)
    m = SegModel(cfg, rng=np.random.default_rng(0), dtype=np.float32)
    assert m.shape_schedule(64, 64) == [
        (64, 64), (32, 32), (16, 16), (32, 32), (64, 64)]


def test_forward_output_in_unit_interval_and_same_dims(rng):
    m = tiny_model(levels=3, base=2)
    x = rng.normal(size=(1, 4, 16, 16))
    y = m.forward(x, mode="infer")
    assert y.shape == (1, 1, 16, 16)
    assert np.all(y > 0.0) and np.all(y < 1.0)


def test_forward_duplicated_batch_entries_identical(rng):
    m = tiny_model(levels=2, base=2)
    x = rng.normal(size=(1, 4, 8, 8))
    xx = np.concatenate([x, x], axis=0)
    y = m.forward(xx, mode="infer")
    assert np.array_equal(y[0], y[1])


def test_forward_indivisible_dims_error_names_padding():
    m = tiny_model(levels=3, base=2)
    with pytest.raises(ValueError, match=r"pad by 1 rows and 2 cols"):
        m.forward(np.zeros((1, 4, 63, 66)))


def test_forward_wrong_channel_count():
    m = tiny_model()
    with pytest.raises(ValueError, match="4"):
        m.forward(np.zeros((1, 3, 8, 8)))


def test_model_gradients_match_finite_differences(rng):
    # whole-network gradient spot check on a micro configuration
    m = tiny_model(levels=2, base=2, convs=1, dtype=np.float64, seed=3)
    x = rng.normal(size=(1, 4, 8, 8))
    t = (rng.random((1, 1, 8, 8)) < 0.3).astype(np.float64)

    def loss():
        y = m.forward(x, mode="infer")
        return dice_loss(t, y)

    _, grad = loss()
    m.backward(grad)
    grads = m.gradients()
    params = m.parameters()
    picked = [k for k in sorted(params) if "kernels" in k or "gamma" in k][:4]
    rng2 = np.random.default_rng(0)
    for key in picked:
        w = params[key]
        flat_idx = rng2.integers(0, w.size, size=min(4, w.size))
        for fi in flat_idx:
            orig = w.flat[fi]
            eps = 1e-6
            w.flat[fi] = orig + eps
            lp = loss()[0]
            w.flat[fi] = orig - eps
            lm = loss()[0]
            w.flat[fi] = orig
            fd = (lp - lm) / (2 * eps)
            an = grads[key].flat[fi]
            assert abs(an - fd) <= 1e-4 * max(1.0, abs(fd)), \
                f"{key}[{fi}]: analytic {an} vs fd {fd}"


def test_model_forward_wrapper_returns_probability_map(rng):
    m = tiny_model(levels=2, base=2)
    stack = rng.normal(size=(4, 8, 8))
    pm = model_forward(m, stack)
    assert pm.data.shape == (8, 8)
    assert pm.data.min() >= 0.0 and pm.data.max() <= 1.0


def test_build_frame_stack_replicates_history(rng):
    frames = [rng.random((5, 5)) for _ in range(4)]
    s0 = build_frame_stack(frames, 0)
    assert all(np.array_equal(s0[k], frames[0]) for k in range(4))
    s2 = build_frame_stack(frames, 2)
    for k, want in enumerate([2, 1, 0, 0]):
        assert np.array_equal(s2[k], frames[want])
    with pytest.raises(IndexError):
        build_frame_stack(frames, 4)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_bitwise(tmp_path, rng):
    m = tiny_model(levels=3, base=4, convs=2, dropout=0.5, dtype=np.float32, seed=9)
    x = rng.normal(size=(1, 4, 16, 16)).astype(np.float32)
    y_before = m.forward(x, mode="infer")
    p = tmp_path / "model.ckpt"
    save_checkpoint(m, p)
    back = load_checkpoint(p)
    assert back.config == m.config
    for (na, a), (nb, b) in zip(m.named_state(), back.named_state()):
        assert na == nb
        assert np.array_equal(a.astype(np.float32), b)
    assert np.array_equal(y_before, back.forward(x, mode="infer"))


def test_checkpoint_magic_and_validation(tmp_path):
    m = tiny_model(dtype=np.float32)
    p = tmp_path / "m.ckpt"
    save_checkpoint(m, p)
    assert p.read_bytes()[:5] == b"CATH1"
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE!" + p.read_bytes()[5:])
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(bad)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _toy_samples(rng, n=4, size=16):
    samples = []
    for _ in range(n):
        frames = rng.random((4, size, size)).astype(np.float32)
        mask = np.zeros((size, size), np.uint8)
        r = int(rng.integers(3, size - 6))
        mask[r:r + 3, 2:size - 2] = 1
        samples.append(TrainSample(frames, mask))
    return samples


def test_train_zero_epochs_is_noop(rng):
    m = tiny_model(dtype=np.float32)
    before = {k: v.copy() for k, v in m.parameters().items()}
    trace = train(_toy_samples(rng), m, OptimizerState(), epochs=0,
                  rng=np.random.default_rng(0))
    assert trace == []
    for k, v in m.parameters().items():
        assert np.array_equal(v, before[k])


def test_train_memorizes_single_sample(rng):
    m = tiny_model(levels=2, base=4, convs=1, dtype=np.float32, seed=21)
    sample = _toy_samples(rng, n=1)[0]
    trace = train([sample] * 4, m, OptimizerState(), epochs=200,
                  rng=np.random.default_rng(1))
    assert trace[-1] < -0.9, f"failed to memorize: final loss {trace[-1]}"


def test_train_seeded_runs_are_bitwise_identical(rng):
    samples = _toy_samples(rng, n=6)
    traces = []
    for _ in range(2):
        m = tiny_model(levels=2, base=2, convs=1, dtype=np.float32, seed=5)
        traces.append(train(samples, m, OptimizerState(), epochs=5,
                            rng=np.random.default_rng(11)))
    assert traces[0] == traces[1]


def test_train_overfit_trend_is_downward(rng):
    samples = _toy_samples(rng, n=10)
    m = tiny_model(levels=2, base=4, convs=1, dtype=np.float32, seed=13)
    trace = train(samples, m, OptimizerState(), epochs=40,
                  rng=np.random.default_rng(2))
    # after warm-up, every 10-epoch window ends at or below its start
    for i in range(5, len(trace) - 10):
        assert trace[i + 10] <= trace[i], \
            f"loss rose over window [{i}, {i + 10}]: {trace[i]} -> {trace[i + 10]}"


def test_train_empty_dataset_rejected():
    m = tiny_model(dtype=np.float32)
    with pytest.raises(ValueError):
        train([], m, OptimizerState(), epochs=1, rng=np.random.default_rng(0))

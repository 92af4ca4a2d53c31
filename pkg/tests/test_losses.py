import math

import numpy as np
import pytest
from conftest import tiny_model

from kdst import tensor as T
from kdst.errors import ConfigError, ContractError, InputError
from kdst.losses import TeacherCache, TeacherDistribution, combined_loss, kd_loss, st_loss, teacher_distributions
from kdst.models import forward
from kdst.tensor import Tensor
from kdst.text import BOS_ID


def loop_nll(logits, targets, keep):
    total, count = 0.0, 0
    for idx in np.ndindex(targets.shape):
        if not keep[idx]:
            continue
        row = logits[idx]
        lse = math.log(sum(math.exp(v) for v in row))
        total -= row[targets[idx]] - lse
        count += 1
    return total / count


def test_st_loss_matches_scalar_loop(rng):
    logits = rng.standard_normal((2, 4, 6))
    targets = rng.integers(0, 6, (2, 4))
    keep = np.array([[1, 1, 1, 0], [1, 1, 0, 0]], dtype=bool)
    assert float(st_loss(Tensor(logits), targets, keep).data) == pytest.approx(loop_nll(logits, targets, keep))


def test_kd_loss_matches_scalar_loop(rng):
    logits = rng.standard_normal((3, 5))
    q = rng.dirichlet(np.ones(5), size=3)
    ref = 0.0
    for t in range(3):
        lse = math.log(sum(math.exp(v) for v in logits[t]))
        ref -= sum(q[t, k] * (logits[t, k] - lse) for k in range(5))
    assert float(kd_loss(Tensor(logits), q).data) == pytest.approx(ref / 3)


def test_kd_with_one_hot_teacher_equals_st(rng):
    logits = Tensor(rng.standard_normal((2, 5, 7)))
    targets = rng.integers(0, 7, (2, 5))
    keep = rng.random((2, 5)) > 0.3
    keep[:, 0] = True
    onehot = np.eye(7)[targets]
    assert abs(float(kd_loss(logits, onehot, keep).data) - float(st_loss(logits, targets, keep).data)) < 1e-12


def test_loss_gradients(rng):
    logits = Tensor(rng.standard_normal((2, 3, 5)))
    targets = rng.integers(0, 5, (2, 3))
    q = rng.dirichlet(np.ones(5), size=(2, 3))
    keep = np.array([[1, 1, 0], [1, 1, 1]], dtype=bool)
    f = lambda z: combined_loss(st_loss(z, targets, keep), kd_loss(z, q, keep), 0.3).l_all  # noqa: E731
    assert T.grad_check(f, [logits], eps=1e-6) < 1e-7


def test_combined_loss_endpoints_and_errors(rng):
    a, b = Tensor(np.float64(2.0)), Tensor(np.float64(5.0))
    assert float(combined_loss(a, b, 0.0).l_all.data) == 2.0
    assert float(combined_loss(a, b, 1.0).l_all.data) == 5.0
    assert float(combined_loss(a, b, 0.25).l_all.data) == pytest.approx(2.75)
    assert combined_loss(a, None, 0.0).l_all is a
    with pytest.raises(ConfigError):
        combined_loss(a, b, 1.5)
    with pytest.raises(ContractError):
        combined_loss(a, None, 0.5)


def test_pad_only_batch_and_shape_errors():
    z = Tensor(np.zeros((1, 2, 5)))
    with pytest.raises(InputError):
        st_loss(z, np.zeros((1, 2), dtype=int), np.zeros((1, 2), dtype=bool))
    with pytest.raises(ContractError):
        st_loss(z, np.zeros((1, 3), dtype=int))
    with pytest.raises(ContractError):
        st_loss(z, np.full((1, 2), 9))
    with pytest.raises(ContractError):
        kd_loss(z, np.zeros((1, 2, 4)))


def test_teacher_distributions_are_normalized_and_constant(rng):
    teacher = tiny_model("MT", seed=1)
    x = np.array([[4, 5, 6, 2], [7, 8, 2, 0]])
    y = np.array([[BOS_ID, 5, 4], [BOS_ID, 8, 0]])
    q = teacher_distributions(teacher, x, y, np.array([4, 3]))
    assert isinstance(q, TeacherDistribution) and q.probs.dtype == np.float32
    np.testing.assert_allclose(q.probs.sum(-1), 1.0, atol=1e-6)
    with T.no_grad():
        logits, _ = forward(teacher, x, y, src_lengths=np.array([4, 3]))
    np.testing.assert_allclose(q.probs, T.softmax(Tensor(logits.data.astype(np.float64))).data, atol=1e-7)
    single = teacher_distributions(teacher, x[0], y[0])
    np.testing.assert_allclose(single.probs, q.probs[0], atol=1e-7)
    with pytest.raises(ConfigError):
        teacher_distributions(tiny_model("ASR"), x, y)


def test_teacher_temperature_flattens():
    teacher = tiny_model("MT", seed=1)
    x, y = np.array([4, 5, 2]), np.array([BOS_ID, 5])
    sharp = teacher_distributions(teacher, x, y, temperature=1.0).probs
    flat = teacher_distributions(teacher, x, y, temperature=4.0).probs
    assert (flat.max(-1) < sharp.max(-1)).all()


def test_teacher_cache(tmp_path, rng):
    cache = TeacherCache(tmp_path, 6)
    rows = rng.dirichlet(np.ones(6), size=4).astype(np.float32)
    assert cache.get("ex1") is None
    cache.put("ex1", rows)
    np.testing.assert_array_equal(cache.get("ex1"), rows)
    with pytest.raises(ContractError):
        cache.put("ex2", rows[:, :5])


def test_teacher_argmax_follows_its_greedy_choices(rng):
    from kdst.decoding import greedy_decode
    from kdst.text import PAD_ID

    for seed in range(5):
        teacher = tiny_model("MT", seed=seed)
        x = rng.integers(4, 9, size=5)
        tokens = greedy_decode(teacher, x, max_len=8).tokens
        q = teacher_distributions(teacher, x, np.array([BOS_ID, *tokens])).probs.copy()
        q[:, [PAD_ID, BOS_ID]] = -1.0
        assert list(q.argmax(axis=-1)[: len(tokens)]) == tokens

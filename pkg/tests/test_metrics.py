import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ptqlab import metrics as M
from ptqlab.metrics import MetricKind, Prediction
from ptqlab.tensor_core import ShapeError

from oracles import kl_sum, softmax


def pred(rows, t=1.0):
    return Prediction(torch.tensor(rows, dtype=torch.float32), t)


class TestLocal:
    def test_mse_identity(self):
        x = torch.randn(4, 3, 2, 2)
        assert M.local_mse(x, x).item() == 0.0

    def test_mse_single_sample(self):
        assert M.local_mse(torch.tensor([1.0, 2.0]), torch.tensor([1.0, 4.0])).item() == 4.0

    def test_mse_loop_oracle(self):
        g = torch.Generator().manual_seed(0)
        a, b = torch.randn(5, 3, 4, generator=g), torch.randn(5, 3, 4, generator=g)
        ref = sum(sum((x - y) ** 2 for x, y in zip(ra, rb)) for ra, rb in zip(a.reshape(5, -1).tolist(), b.reshape(5, -1).tolist())) / 5
        assert M.local_mse(a, b).item() == pytest.approx(ref, rel=1e-5)

    def test_mse_shape(self):
        with pytest.raises(ShapeError):
            M.local_mse(torch.ones(2, 3), torch.ones(3, 2))

    def test_cosine_identity_and_parallel(self):
        x = torch.randn(3, 8)
        assert M.local_cosine(x, x).item() == pytest.approx(0.0, abs=1e-6)
        assert M.local_cosine(x, 2 * x).item() == pytest.approx(0.0, abs=1e-6)

    def test_cosine_orthogonal(self):
        assert M.local_cosine(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])).item() == pytest.approx(1.0)

    def test_cosine_zero_vector(self, caplog):
        with caplog.at_level("WARNING"):
            d = M.local_cosine(torch.zeros(1, 4), torch.ones(1, 4)).item()
        assert d == 1.0
        assert "zero-norm" in caplog.text

    def test_cosine_loop_oracle(self):
        g = torch.Generator().manual_seed(1)
        a, b = torch.randn(4, 6, generator=g), torch.randn(4, 6, generator=g)
        ref = 0.0
        for x, y in zip(a.tolist(), b.tolist()):
            dot = sum(p * q for p, q in zip(x, y))
            ref += 1 - dot / (math.sqrt(sum(p * p for p in x)) * math.sqrt(sum(q * q for q in y)))
        assert M.local_cosine(a, b).item() == pytest.approx(ref / 4, rel=1e-5)


class TestGlobal:
    def test_probs_sum_to_one(self):
        p = pred([[1.0, 2.0, 3.0], [100.0, -100.0, 0.0]])
        torch.testing.assert_close(p.probs.sum(dim=1), torch.ones(2), atol=1e-6, rtol=0)
        assert bool((p.probs.clamp_min(M.PROB_FLOOR) > 0).all())

    def test_identical_zero(self):
        p = pred([[0.3, -1.2, 2.0]])
        assert M.pd_kl(p, p).item() == pytest.approx(0.0, abs=1e-7)
        assert M.pd_mse(p, p).item() == 0.0
        assert M.pd_cosine(p, p).item() == pytest.approx(0.0, abs=1e-6)

    def test_kl_saturated_against_uniform(self):
        fp = pred([[80.0, -80.0]])
        q = pred([[0.0, 0.0]])
        assert M.pd_kl(fp, q).item() == pytest.approx(math.log(2), rel=1e-5)

    def test_kl_direct_summation(self):
        g = torch.Generator().manual_seed(2)
        a, b = torch.randn(3, 4, generator=g), torch.randn(3, 4, generator=g)
        ref = sum(kl_sum(softmax(x), softmax(y)) for x, y in zip(a.tolist(), b.tolist())) / 3
        assert M.pd_kl(Prediction(a), Prediction(b)).item() == pytest.approx(ref, rel=1e-5)

    def test_kl_temperature_scaling(self):
        g = torch.Generator().manual_seed(3)
        a, b = torch.randn(2, 5, generator=g), torch.randn(2, 5, generator=g)
        t = 3.0
        ref = t * t * sum(kl_sum(softmax(x, t), softmax(y, t)) for x, y in zip(a.tolist(), b.tolist())) / 2
        assert M.pd_kl(Prediction(a, t), Prediction(b, t)).item() == pytest.approx(ref, rel=1e-5)

    def test_kl_is_asymmetric(self):
        p, q = pred([[2.0, 0.0, -1.0]]), pred([[0.0, 0.0, 0.0]])
        assert M.pd_kl(p, q).item() != pytest.approx(M.pd_kl(q, p).item(), rel=1e-3)

    def test_pd_mse_loop_oracle(self):
        a, b = [[1.0, 0.0, -1.0]], [[0.5, 0.5, 0.0]]
        ref = sum((x - y) ** 2 for x, y in zip(softmax(a[0]), softmax(b[0])))
        assert M.pd_mse(pred(a), pred(b)).item() == pytest.approx(ref, rel=1e-5)

    def test_pd_cosine_not_logit_scale_invariant(self):
        a = torch.tensor([[1.0, 0.0, -1.0]])
        assert M.pd_cosine(Prediction(a), Prediction(2 * a)).item() > 1e-3

    def test_class_mismatch(self):
        with pytest.raises(ShapeError):
            M.pd_kl(pred([[0.0, 1.0]]), pred([[0.0, 1.0, 2.0]]))

    def test_temperature_mismatch(self):
        with pytest.raises(ValueError):
            M.pd_kl(pred([[0.0, 1.0]], 1.0), pred([[0.0, 1.0]], 2.0))

    def test_task_loss_is_cross_entropy(self):
        p = pred([[2.0, 0.0], [0.0, 2.0]])
        ref = -math.log(softmax([2.0, 0.0])[0])
        assert M.task_loss(p, torch.tensor([0, 1])).item() == pytest.approx(ref, rel=1e-6)


def test_metric_kind_is_exhaustive():
    assert {m.value for m in MetricKind} == {"local_mse", "local_cosine", "pd_mse", "pd_cosine", "pd_kl"}
    assert set(M.LOCAL_METRICS) | set(M.GLOBAL_METRICS) == set(MetricKind)
    assert all(m.is_global for m in M.GLOBAL_METRICS) and not any(m.is_global for m in M.LOCAL_METRICS)


rows = st.lists(st.floats(-20, 20), min_size=3, max_size=3)


@settings(max_examples=100, deadline=None)
@given(a=st.lists(rows, min_size=1, max_size=4), b=st.lists(rows, min_size=1, max_size=4))
def test_non_negative_and_pure(a, b):
    n = min(len(a), len(b))
    x, y = torch.tensor(a[:n]), torch.tensor(b[:n])
    for fn in (M.local_mse, M.local_cosine):
        v = fn(x, y)
        assert v.item() >= 0 and torch.equal(v, fn(x, y))
    for fn in M.GLOBAL_METRICS.values():
        v = fn(Prediction(x), Prediction(y))
        assert v.item() >= -1e-7 and torch.equal(v, fn(Prediction(x), Prediction(y)))

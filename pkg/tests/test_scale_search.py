import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ptqlab import scale_search as ss
from ptqlab.harness.models import HEAVY_TAILED_LAYER, build_mlp, heavy_tailed_task
from ptqlab.model_graph import Block, Linear, ModelGraph, ReLU
from ptqlab.quantizer import ActQuantizer
from ptqlab.scale_search import ScaleGrid

from oracles import fake_quant_loop, kl_sum, range_scale_oracle, softmax


def integer_probe(dim=4, n=64, seed=0):
    """Head inputs that are exactly representable with S=1, Z=0 at 2 bits."""
    g = torch.Generator().manual_seed(seed)
    x = torch.randint(0, 4, (n, dim), generator=g).float()
    x[0] = 3.0
    stem = Block([Linear(torch.eye(dim), torch.zeros(dim)), ReLU()])
    head = Linear(torch.randn(3, dim, generator=g), torch.zeros(3))
    return ModelGraph(stem, [Block([head])], (dim,), 3).eval(), x


class TestGrid:
    def test_uniform(self):
        g = ScaleGrid.uniform(4)
        assert g.factors == (0.25, 0.5, 0.75, 1.0)
        assert len(ScaleGrid.uniform(64)) == 64

    @pytest.mark.parametrize("factors", [(), (0.0, 1.0), (0.5, 1.5), (0.5, 0.5), (0.8, 0.4)])
    def test_invalid(self, factors):
        with pytest.raises(ValueError):
            ScaleGrid(factors)

    def test_params_shrink_range(self):
        ps = ScaleGrid((0.5, 1.0)).params(torch.tensor(-1.0), torch.tensor(3.0), 2)
        assert ps[1].scale.item() == pytest.approx(4 / 3)
        assert ps[0].scale.item() == pytest.approx(2 / 3)


class TestNormalizeSelect:
    def test_divide_by_min(self):
        assert ss.normalize_min([4.0, 2.0, 3.0]) == [2.0, 1.0, 1.5]

    def test_zero_min_shifts(self):
        assert ss.normalize_min([0.0, 0.5, 2.0]) == [1.0, 1.5, 3.0]

    def test_ties_prefer_larger_factor(self):
        assert ss.select_index([3.0, 1.0, 1.0, 2.0]) == 2
        assert ss.select_index([5.0]) == 0

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 1e6), min_size=1, max_size=50))
    def test_min_is_exactly_one(self, values):
        out = ss.normalize_min(values)
        assert min(out) == 1.0
        assert out[ss.select_index(values)] == 1.0
        assert all(v >= 1.0 for v in out)


class TestActivationSearch:
    def test_lossless_picks_full_range(self):
        model, x = integer_probe()
        for metric in ("local_mse", "pd_kl", "pd_mse"):
            p = ss.search_activation_scale(model, HEAVY_TAILED_LAYER, x, ScaleGrid.uniform(4), metric, 2)
            assert p.scale.item() == 1.0 and p.zero_point.item() == 0.0

    def test_lossless_values_are_zero(self):
        model, x = integer_probe()
        recs = ss.sweep_metrics(model, HEAVY_TAILED_LAYER, x, ScaleGrid.uniform(4), ["local_mse", "pd_kl"], 2)
        assert recs[-1].values["local_mse"] == 0.0
        assert recs[-1].values["pd_kl"] == pytest.approx(0.0, abs=1e-7)
        assert all(r.values["local_mse"] > 0 for r in recs[:-1])

    def test_pd_kl_matches_brute_force(self):
        model, x, _ = heavy_tailed_task(0, n=128)
        grid = ScaleGrid((0.05, 0.2, 0.6, 1.0))
        recs = ss.sweep_metrics(model, HEAVY_TAILED_LAYER, x, grid, ["pd_kl", "local_mse"], 2)
        head = model.blocks[0].layers[0]
        w = head.weight.detach().double().numpy()
        b = head.bias.detach().double().numpy()
        h = np.maximum(x.numpy(), 0).astype(np.float32)
        ref_p = [softmax(row) for row in (h.astype(np.float64) @ w.T + b).tolist()]
        flat = h.reshape(-1)
        for f, rec in zip(grid.factors, recs):
            s, z = range_scale_oracle(float(flat.min()) * f, float(flat.max()) * f, 2)
            n = flat.size
            hq = fake_quant_loop(
                flat, np.full(n, s, np.float32), np.full(n, z, np.float32), np.full(n, 2, np.int64)
            ).reshape(h.shape)
            q_p = [softmax(row) for row in (hq.astype(np.float64) @ w.T + b).tolist()]
            kl = sum(kl_sum(p, q, floor=1e-12) for p, q in zip(ref_p, q_p)) / len(ref_p)
            mse = float(((hq.astype(np.float64) - h) ** 2).sum(axis=1).mean())
            assert rec.values["pd_kl"] == pytest.approx(kl, rel=1e-3, abs=1e-7)
            assert rec.values["local_mse"] == pytest.approx(mse, rel=1e-4)

    def test_heavy_tail_direction(self):
        model, x, y = heavy_tailed_task(3)
        recs = ss.sweep_metrics(model, HEAVY_TAILED_LAYER, x, ScaleGrid.uniform(64), ["local_mse", "pd_kl"], 2, labels=y)
        mse_f, kl_f = ss.argmin_factor(recs, "local_mse"), ss.argmin_factor(recs, "pd_kl")
        assert mse_f < kl_f
        task = {r.n_s: r.values[ss.TASK_LOSS] for r in recs}
        assert task[kl_f] <= task[mse_f]

    def test_single_candidate(self):
        model, x, _ = heavy_tailed_task(1, n=64)
        recs = ss.sweep_metrics(model, HEAVY_TAILED_LAYER, x, ScaleGrid((0.3,)), ["pd_kl"], 2)
        assert len(recs) == 1 and recs[0].normalized["pd_kl"] == 1.0

    def test_quantizer_state_restored(self):
        model, x, _ = heavy_tailed_task(2, n=64)
        head = model.blocks[0].layers[0]
        head.act_quantizer = ActQuantizer(4, scale=0.7, zero_point=2)
        head.quant_act = False
        before = model(x)
        ss.sweep_metrics(model, HEAVY_TAILED_LAYER, x, ScaleGrid.uniform(8), ["pd_kl", "local_cosine"], 2)
        assert head.act_quantizer.scale.item() == pytest.approx(0.7)
        assert head.act_quantizer.zero_point.item() == 2 and head.act_quantizer.bits == 4
        assert head.quant_act is False
        assert torch.equal(model(x), before)

    def test_non_quant_layer_rejected(self):
        model, x, _ = heavy_tailed_task(0, n=16)
        with pytest.raises(TypeError):
            ss.LayerProbe(model, "stem.layers.1", x)


class TestSweepOutputs:
    def test_rows_and_csv_round_trip(self, tmp_path):
        model = build_mlp(dim=6, hidden=8, num_classes=3, seed=0).eval()
        x = torch.randn(40, 6)
        grid = ScaleGrid.uniform(10)
        metrics = ["local_mse", "local_cosine", "pd_mse", "pd_cosine", "pd_kl"]
        recs = ss.sweep_metrics(model, "blocks.1.layers.0", x, grid, metrics, 2)
        path = tmp_path / "s.csv"
        ss.write_sweep_csv(recs, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == ",".join(ss.CSV_HEADER)
        assert len(lines) - 1 == len(grid) * len(metrics)
        back = ss.read_sweep_csv(path)
        assert [(r.layer, r.n_s, r.values, r.normalized) for r in back] == [
            (r.layer, r.n_s, r.values, r.normalized) for r in recs
        ]
        for m in metrics:
            assert min(r.normalized[m] for r in back) == 1.0

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            ss.read_sweep_csv(path)

    def test_weight_sweep(self):
        model = build_mlp(dim=6, hidden=8, num_classes=3, seed=1).eval()
        x = torch.randn(40, 6)
        layer = model.blocks[0].layers[0]
        w_before = layer.weight.detach().clone()
        grid = ScaleGrid.uniform(8)
        recs = ss.sweep_weight_scale(model, "blocks.0.layers.0", x, grid, ["local_mse", "pd_kl"], 2)
        assert len(recs) == 8
        assert torch.equal(layer.weight, w_before) and layer.weight_quantizer is None
        assert min(r.normalized["local_mse"] for r in recs) == 1.0
        assert all(math.isfinite(r.values["pd_kl"]) for r in recs)

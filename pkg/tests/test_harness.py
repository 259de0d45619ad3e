import csv
import json

import pytest
import torch

from ptqlab.harness import pipeline
from ptqlab.harness.data import ToyDataset, make_dataset, sample_calibration
from ptqlab.harness.pipeline import RunConfig, run_pipeline, summarize
from ptqlab.harness.train import TrainSpec, TrainingError, accuracy, predict_labels, train_toy_fp
from ptqlab.reconstruction import ConfigError

TINY = {"iterations": 20, "batch_size": 16, "act_init_grid": 8, "act_init_samples": 64, "log_every": 5, "dc_steps": 5}


class TestData:
    @pytest.mark.parametrize("task", ["gaussian", "shapes"])
    def test_seeded(self, task):
        kw = {"n_train": 200, "n_val": 100} if task == "shapes" else {"n_train": 800, "n_val": 200}
        a, b = make_dataset(task, 3, **kw), make_dataset(task, 3, **kw)
        c = make_dataset(task, 4, **kw)
        assert torch.equal(a.x_train, b.x_train) and torch.equal(a.y_val, b.y_val)
        assert not torch.equal(a.x_train, c.x_train)
        counts = torch.bincount(a.y_train, minlength=a.num_classes)
        assert bool((counts == counts[0]).all())

    def test_save_load(self, tmp_path):
        ds = make_dataset("gaussian", 0, n_train=80, n_val=16)
        ds.save(tmp_path / "d.npz")
        back = ToyDataset.load(tmp_path / "d.npz")
        assert back.name == "gaussian" and back.spec == ds.spec
        for k in ("x_train", "y_train", "x_val", "y_val"):
            assert torch.equal(getattr(back, k), getattr(ds, k))

    def test_unknown_task(self):
        with pytest.raises(ValueError):
            make_dataset("imagenet", 0)

    def test_calibration_sample(self):
        ds = make_dataset("gaussian", 0, n_train=800, n_val=80)
        x, y = sample_calibration(ds, 64, 1)
        assert len(x) == 64 and torch.equal(torch.bincount(y), torch.full((8,), 8))
        x2, _ = sample_calibration(ds, 64, 1)
        x3, _ = sample_calibration(ds, 64, 2)
        assert torch.equal(x, x2) and not torch.equal(x, x3)
        # rows come from the training split
        train_rows = {tuple(r.tolist()) for r in ds.x_train}
        assert all(tuple(r.tolist()) in train_rows for r in x)
        with pytest.raises(ValueError):
            sample_calibration(ds, 10_000, 0)


class TestTraining:
    def test_floor_error_carries_curve(self):
        ds = make_dataset("gaussian", 0, n_train=320, n_val=80)
        with pytest.raises(TrainingError) as info:
            train_toy_fp(ds, 0, TrainSpec(epochs=2, floor=101.0))
        assert [e["epoch"] for e in info.value.curve] == [0, 1]

    def test_teacher_reaches_floor(self, gaussian_task):
        ds, model = gaussian_task
        assert accuracy(model, ds.x_val, ds.y_val) >= 90.0

    def test_accuracy_recount(self, gaussian_task):
        ds, model = gaussian_task
        x, y = ds.x_val[:300], ds.y_val[:300]
        with torch.no_grad():
            hits = sum(int(model(x[i : i + 1]).argmax()) == int(y[i]) for i in range(len(y)))
        assert accuracy(model, x, y) == pytest.approx(100.0 * hits / len(y))

    def test_zeroed_head_is_chance(self, gaussian_task):
        import copy

        ds, model = gaussian_task
        m = copy.deepcopy(model)
        head = m.blocks[-1].layers[0]
        head.weight.data.zero_()
        head.bias.data.zero_()
        assert bool((predict_labels(m, ds.x_val) == 0).all())
        assert accuracy(m, ds.x_val, ds.y_val) == pytest.approx(100.0 / ds.num_classes)

    def test_empty_split(self, gaussian_task):
        _, model = gaussian_task
        with pytest.raises(ValueError):
            accuracy(model, torch.zeros(0, 16), torch.zeros(0, dtype=torch.long))


@pytest.fixture
def saved_task(gaussian_task, tmp_path):
    from ptqlab.model_graph import save_model

    ds, model = gaussian_task
    ds.save(tmp_path / "data.npz")
    save_model(model, tmp_path / "fp.ptqg")
    return tmp_path


class TestRunConfig:
    def test_round_trip(self):
        cfg = RunConfig(model="m", data="d", recon={"iterations": 5}, seed=3)
        assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_unknown_fields(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"model": "m", "data": "d", "bogus": 1})
        with pytest.raises(ConfigError):
            RunConfig(model="m", data="d", recon={"bogus": 1}).validate()

    @pytest.mark.parametrize("kw", [dict(metric="l1"), dict(calib_size=0), dict(workers=0), dict(w_bits=1)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            RunConfig(model="m", data="d", **kw).validate()

    def test_bits_feed_recon(self):
        rc = RunConfig(model="m", data="d", w_bits=2, a_bits=3, metric="pd_kl").recon_config()
        assert (rc.w_bits, rc.a_bits, rc.act_init_metric) == (2, 3, "pd_kl")


class TestPipeline:
    def test_artifacts(self, saved_task):
        out = saved_task / "run"
        cfg = RunConfig(model=str(saved_task / "fp.ptqg"), data=str(saved_task / "data.npz"), w_bits=2, a_bits=2,
                        recon=TINY, seed=1, out_dir=str(out), calib_size=64)
        rep = run_pipeline(cfg)
        assert not (out / pipeline.INCOMPLETE).exists()
        for name in (pipeline.MODEL_FILE, pipeline.REPORT_FILE, pipeline.PROGRESS_FILE, pipeline.TRAJECTORY_FILE, pipeline.CONFIG_FILE):
            assert (out / name).exists(), name
        report = json.loads((out / pipeline.REPORT_FILE).read_text())
        assert report["label"] == "PD+Reg+DC+Drop" and report["gap"] == pytest.approx(rep.gap)
        assert len(report["blocks"]) == 4
        progress = [json.loads(line) for line in (out / pipeline.PROGRESS_FILE).read_text().splitlines()]
        assert progress and {"iteration", "pd", "reg", "round", "beta"} <= set(progress[0])
        assert RunConfig.from_dict(json.loads((out / pipeline.CONFIG_FILE).read_text())) == cfg

    def test_failure_leaves_marker(self, tmp_path):
        out = tmp_path / "run"
        cfg = RunConfig(model=str(tmp_path / "missing.ptqg"), data=str(tmp_path / "missing.npz"), out_dir=str(out))
        with pytest.raises(FileNotFoundError):
            run_pipeline(cfg)
        assert "run failed" in (out / pipeline.INCOMPLETE).read_text()

    def test_summarize(self):
        rows = [
            {"option": "A", "seed": 0, "calib_acc": 90.0, "val_acc": 80.0, "gap": 10.0},
            {"option": "A", "seed": 1, "calib_acc": 92.0, "val_acc": 84.0, "gap": 8.0},
            {"option": "B", "seed": 0, "calib_acc": 70.0, "val_acc": 70.0, "gap": 0.0},
        ]
        a, b = summarize(rows)
        assert (a["option"], a["runs"], a["val_mean"], a["gap_mean"], a["calib_mean"]) == ("A", 2, 82.0, 9.0, 91.0)
        assert a["val_std"] == pytest.approx(2 ** 0.5 * 2)
        assert b["val_std"] == 0.0

    def test_ablate_csvs(self, saved_task):
        base = RunConfig(model=str(saved_task / "fp.ptqg"), data=str(saved_task / "data.npz"), w_bits=2, a_bits=2,
                         recon=TINY, out_dir=str(saved_task / "abl"), calib_size=32)
        rows, summary = pipeline.ablate(base, [0, 1], ["Reg", "PD"])
        assert len(rows) == 4 and [s["option"] for s in summary] == ["Reg", "PD"]
        with open(saved_task / "abl" / "ablation_runs.csv") as fh:
            assert len(list(csv.DictReader(fh))) == 4
        assert (saved_task / "abl" / "PD_seed1" / pipeline.MODEL_FILE).exists()
        with pytest.raises(ConfigError):
            pipeline.ablate(base, [0], ["Nope"])

    def test_dc_preview_rejects_stage_without_bn(self, gaussian_task, tmp_path):
        ds, model = gaussian_task
        with pytest.raises(ConfigError):
            pipeline.dc_preview(model, ds.x_val[:32], 3, tmp_path)
        with pytest.raises(ValueError):
            pipeline.dc_preview(model, ds.x_val[:32], 9, tmp_path)

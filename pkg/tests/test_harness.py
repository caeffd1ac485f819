import numpy as np
import pytest

from lle.data import synthetic_dataset
from lle.downstream import RefMSETask, Task
from lle.harness import (
    ALL_ORDERS,
    SUBSETS,
    GridSpec,
    TrainConfig,
    TrainingError,
    ablate,
    derive_seed,
    evaluate,
    grid_losses,
    grid_search,
    predict_params,
    psnr,
    train,
)
from lle.isp import LLEParams, PipelineSpec, pipeline_apply
from lle.predictor import LayerSpec, PredictorArch, checkpoint_bytes, init_predictor

SMALL = PredictorArch(
    layers=(LayerSpec(3, 2, 4, bn=True), LayerSpec(3, 2, 8), LayerSpec(3, 2, 8, act=False)),
    dropout_after=2,
    input_size=16,
)


@pytest.fixture(scope="module")
def tiny_data():
    train_set, _ = synthetic_dataset(6, 20, attenuation=0.01, seed=1, n_blobs=2)
    test_set, _ = synthetic_dataset(3, 20, attenuation=0.01, seed=50, n_blobs=2)
    return train_set, test_set


def _cfg(**kw):
    base = dict(epochs=2, batch_size=4, crop_size=16, seed=3, lr=1e-3)
    base.update(kw)
    return TrainConfig(**base)


class _ConstantTask(Task):
    name = "constant"

    def target(self, bright, meta=None):
        return None

    def loss(self, img, target, tangents=None):
        return 1.0, None if tangents is None else np.zeros(8)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr, cfg.epochs, cfg.batch_size, cfg.crop_size) == (1e-4, 10, 8, 256)
        assert cfg.spec == PipelineSpec(("E", "G", "S"))

    def test_roundtrip_and_validation(self):
        cfg = TrainConfig(seed=5, spec="GES")
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict({"learning_rate": 1})
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)


class TestTrain:
    def test_zero_images_leaves_model_unchanged(self):
        model, history = train(_cfg(epochs=1), [], arch=SMALL)
        assert history == []
        assert model.digest() == init_predictor(SMALL, 3).digest()

    def test_same_seed_bit_identical(self, tiny_data):
        a, ha = train(_cfg(), tiny_data[0], arch=SMALL)
        b, hb = train(_cfg(), tiny_data[0], arch=SMALL)
        assert checkpoint_bytes(a) == checkpoint_bytes(b)
        assert ha == hb
        c, _ = train(_cfg(seed=4), tiny_data[0], arch=SMALL)
        assert c.digest() != a.digest()

    def test_history_and_steps(self, tiny_data):
        model, history = train(_cfg(), tiny_data[0], arch=SMALL)
        assert [h["epoch"] for h in history] == [0, 1]
        assert history[-1]["step"] == 4  # 2 epochs x ceil(6 / 4) batches
        assert all(np.isfinite(h["train_loss"]) for h in history)
        assert not model.training

    def test_non_finite_loss_aborts_with_context(self, tiny_data):
        class Bad(RefMSETask):
            def loss(self, img, target, tangents=None):
                return float("nan"), np.zeros(8)

        with pytest.raises(TrainingError, match="image"):
            train(_cfg(epochs=1), tiny_data[0], task=Bad(), arch=SMALL)

    def test_derive_seed_depends_on_every_key(self):
        seeds = {derive_seed(0, e, i) for e in range(3) for i in range(3)}
        assert len(seeds) == 9


class TestGridSearch:
    def test_default_grid(self):
        g = GridSpec()
        assert g.size == 9 * 7 * 5 * 5
        assert g.a[0] == 1.0 and g.a[-1] == 256.0
        assert g.gamma[0] == pytest.approx(0.2) and g.gamma[-1] == pytest.approx(5.0)
        assert 1.0 in g.gamma

    def test_grid_validation(self):
        with pytest.raises(ValueError, match="bounds"):
            GridSpec(a=(1.0, 512.0))
        with pytest.raises(ValueError, match="identity"):
            GridSpec(a=(2.0, 4.0))

    def test_identity_only_grid(self, tiny_data):
        s = tiny_data[1][0]
        task = RefMSETask()
        params, loss = grid_search(s.dark, s.bright, task, GridSpec.identity_only())
        assert params == LLEParams.identity()
        ident = task.loss(pipeline_apply(s.dark, LLEParams.identity()), s.bright)[0]
        assert loss == ident

    def test_never_worse_than_identity(self, tiny_data):
        task = RefMSETask()
        grid = GridSpec(sigma1=(0.1, 1.0), sigma2=(0.01, 0.1))
        for spec in (PipelineSpec(), PipelineSpec(("G", "E")), PipelineSpec(("S",))):
            for s in tiny_data[1]:
                _, loss = grid_search(s.dark, s.bright, task, grid, spec)
                ident = task.loss(pipeline_apply(s.dark, LLEParams.identity(), spec), s.bright)[0]
                assert loss <= ident

    def test_ties_go_to_first_index(self, tiny_data):
        s = tiny_data[1][0]
        params, _ = grid_search(s.dark, None, _ConstantTask(), GridSpec())
        g = GridSpec()
        assert params == LLEParams(g.a[0], g.gamma[0], (g.sigma1[0],) * 3, (g.sigma2[0],) * 3)

    def test_prefix_sharing_matches_direct_evaluation(self, tiny_data):
        s = tiny_data[1][1]
        task = RefMSETask()
        grid = GridSpec(a=(1.0, 64.0), gamma=(1.0, 0.5), sigma1=(0.1, 2.0), sigma2=(0.01, 0.5))
        for spec in (PipelineSpec(), PipelineSpec(("S", "G", "E"))):
            losses = grid_losses(s.dark, s.bright, task, grid, spec)
            for idx in np.ndindex(losses.shape):
                p = LLEParams(grid.a[idx[0]], grid.gamma[idx[1]], grid.sigma1[idx[2]], grid.sigma2[idx[3]])
                assert losses[idx] == task.loss(pipeline_apply(s.dark, p, spec), s.bright)[0]

    def test_absent_operators_report_identity(self, tiny_data):
        s = tiny_data[1][0]
        params, _ = grid_search(s.dark, s.bright, RefMSETask(), GridSpec(), PipelineSpec(("E",)))
        assert params.gamma == 1.0 and params.sigma1 == (0.1,) * 3


class TestEvaluate:
    def test_psnr(self):
        ref = np.full((4, 4, 3), 0.5)
        assert psnr(ref, np.round(ref * 255) / 255) == float("inf")
        assert psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == pytest.approx(0.0)

    def test_report_columns_and_oracle(self, tiny_data):
        model = init_predictor(SMALL, 0)
        grid = GridSpec(sigma1=(0.1, 1.0), sigma2=(0.01, 0.1))
        rep = evaluate(model, tiny_data[1], RefMSETask(), repeats=2, crop_size=16, oracle=grid)
        assert rep.meta["n_images"] == 3
        for row in rep.images:
            assert row["oracle_loss"] <= row["identity_loss"]
            assert {"loss", "loss_center", "psnr", "identity_psnr", "params"} <= set(row)
        assert "identity_loss" in rep.aggregate

    def test_table_is_byte_stable(self, tiny_data):
        model = init_predictor(SMALL, 0)
        a = evaluate(model, tiny_data[1], RefMSETask(), repeats=1, crop_size=16)
        b = evaluate(model, tiny_data[1], RefMSETask(), repeats=1, crop_size=16)
        assert a.table() == b.table()
        assert a.images == b.images

    def test_repeat_order_invariance(self, tiny_data):
        model = init_predictor(SMALL, 0)
        s = tiny_data[1][0]
        task = RefMSETask()
        rep = evaluate(model, [s], task, repeats=3, crop_size=16, seed=7)
        per = [task.loss(pipeline_apply(s.dark, predict_params(model, s.dark, 16, derive_seed(7, r, 0))),
                         s.bright)[0] for r in range(3)]
        assert rep.images[0]["loss"] == pytest.approx(np.mean(per[::-1]), rel=1e-14)

    def test_no_model_reports_baseline_only(self, tiny_data):
        rep = evaluate(None, tiny_data[1], RefMSETask(), repeats=1)
        assert "loss" not in rep.aggregate and "identity_loss" in rep.aggregate

    def test_rejects_zero_repeats(self, tiny_data):
        with pytest.raises(ValueError):
            evaluate(None, tiny_data[1], RefMSETask(), repeats=0)


class TestAblate:
    def test_variant_sets(self):
        assert sorted(s.name for s in ALL_ORDERS) == ["EGS", "ESG", "GES", "GSE", "SEG", "SGE"]
        assert [s.name for s in SUBSETS] == ["EG", "ES", "GS", "EGS"]

    def test_single_variant_equals_train_plus_evaluate(self, tiny_data):
        cfg = _cfg(epochs=1)
        tab = ablate(tiny_data[0], {"LL-E": tiny_data[1]}, cfg, [PipelineSpec()], arch=SMALL)
        model, _ = train(cfg, tiny_data[0], arch=SMALL)
        rep = evaluate(model, tiny_data[1], RefMSETask(), PipelineSpec(), repeats=1, crop_size=16, seed=cfg.seed)
        assert tab.columns == ["LL-E", "ALL"]
        assert tab.loss("EGS", "LL-E") == rep.aggregate["loss"]
        assert len(tab.text().splitlines()) == 2

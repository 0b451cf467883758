import numpy as np
import pytest

from t1dtwin.datagen import default_prior, generate_dataset
from t1dtwin.errors import ProvenanceError, ValidationError
from t1dtwin.flow import TrainConfig
from t1dtwin.npe import (
    PosteriorModel,
    infer,
    read_posterior_csv,
    train_npe,
    write_posterior_csv,
)
from t1dtwin.physiology import PopulationConstants, SensorModel
from t1dtwin.scenario import canonical_scenario

SMALL_FLOW = {"n_blocks": 2, "hidden_sizes": (16, 16)}
SMALL_CFG = TrainConfig(batch_size=32, max_epochs=8, patience=4, min_dataset_rows=10)


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(80, default_prior(), PopulationConstants(),
                            canonical_scenario(), SensorModel(noise_sd=2.0),
                            seed=21, batch_size=64)


@pytest.fixture(scope="module")
def trained(dataset):
    model, history = train_npe(dataset, SMALL_CFG, SMALL_FLOW, seed=2,
                               prior=default_prior())
    return model, history


class TestTrainNpe:
    def test_trains_and_stamps_provenance(self, dataset, trained):
        model, history = trained
        assert model.prior_hash == dataset.meta["prior_hash"]
        assert model.scenario_hash == dataset.meta["scenario_hash"]
        assert model.dataset_hash == dataset.hash()
        assert history.best_val_loss <= history.initial_val_loss

    def test_small_dataset_flags_warning(self, dataset):
        from t1dtwin.datagen import Dataset
        tiny = Dataset(dataset.thetas[:10].copy(), dataset.observations[:10].copy(),
                       dict(dataset.meta, n=10))
        cfg = TrainConfig(batch_size=4, max_epochs=2, patience=2)
        _, history = train_npe(tiny, cfg, SMALL_FLOW, seed=2, prior=default_prior())
        assert any("insufficient data" in w for w in history.warnings)

    def test_wrong_prior_refused(self, dataset):
        from t1dtwin.datagen import ParamPrior, PriorSpec
        from t1dtwin.physiology import THETA_NAMES
        other = PriorSpec(tuple(
            ParamPrior("normal", 100.0, 1.0, 90.0, 110.0) if n == "Gb"
            else ParamPrior("lognormal", -4.0, 0.1, 0.005, 0.08)
            for n in THETA_NAMES))
        with pytest.raises(ProvenanceError):
            train_npe(dataset, SMALL_CFG, SMALL_FLOW, seed=2, prior=other)

    def test_retraining_is_bit_identical(self, dataset):
        a, _ = train_npe(dataset, SMALL_CFG, SMALL_FLOW, seed=5, prior=default_prior())
        b, _ = train_npe(dataset, SMALL_CFG, SMALL_FLOW, seed=5, prior=default_prior())
        assert a.to_bytes() == b.to_bytes()


class TestCheckpoint:
    def test_round_trip(self, trained, tmp_path, dataset):
        model, _ = trained
        path = tmp_path / "model.ckpt"
        model.save(path)
        again = PosteriorModel.load(path)
        assert again.to_bytes() == model.to_bytes()
        assert again.model_id() == model.model_id()
        y = dataset.observations[0]
        s1 = infer(model, y, n=32, seed=3)
        s2 = infer(again, y, n=32, seed=3)
        assert np.array_equal(s1.samples, s2.samples)

    def test_magic_checked(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTAMODEL")
        with pytest.raises(ValidationError):
            PosteriorModel.load(path)


class TestInfer:
    def test_sample_matrix_shape_and_support(self, trained, dataset):
        model, _ = trained
        ps = infer(model, dataset.observations[1], n=200, seed=7)
        assert ps.samples.shape == (200, 17)
        low, high, reject = (model.support_policy().low,
                             model.support_policy().high,
                             model.support_policy().reject_mask)
        assert np.all(ps.samples >= low - 1e-12)
        assert np.all(ps.samples <= high + 1e-12)
        assert ps.model_id == model.model_id()
        assert ps.elapsed_s >= 0.0

    def test_single_draw(self, trained, dataset):
        model, _ = trained
        ps = infer(model, dataset.observations[2], n=1, seed=8)
        assert ps.samples.shape == (1, 17)

    def test_same_seed_identical(self, trained, dataset):
        model, _ = trained
        a = infer(model, dataset.observations[3], n=64, seed=9)
        b = infer(model, dataset.observations[3], n=64, seed=9)
        assert np.array_equal(a.samples, b.samples)
        assert a.observation_id == b.observation_id

    def test_wrong_length_rejected(self, trained):
        model, _ = trained
        with pytest.raises(ValidationError, match="264"):
            infer(model, np.full(263, 120.0), n=4, seed=0)

    def test_out_of_range_rejected(self, trained):
        model, _ = trained
        y = np.full(264, 120.0)
        y[10] = 1000.0
        with pytest.raises(ValidationError):
            infer(model, y, n=4, seed=0)

    def test_scenario_hash_mismatch_refused(self, trained, dataset):
        model, _ = trained
        with pytest.raises(ProvenanceError):
            infer(model, dataset.observations[0], n=4, seed=0,
                  scenario_hash="deadbeef")

    def test_matching_scenario_hash_accepted(self, trained, dataset):
        model, _ = trained
        ps = infer(model, dataset.observations[0], n=4, seed=0,
                   scenario_hash=model.scenario_hash)
        assert ps.samples.shape == (4, 17)

    def test_summary_schema(self, trained, dataset):
        model, _ = trained
        ps = infer(model, dataset.observations[4], n=100, seed=11)
        summ = ps.summary()
        assert len(summ) == 17
        for row in summ.values():
            assert row["q2.5"] <= row["median"] <= row["q97.5"]


class TestPosteriorCsv:
    def test_round_trip(self, trained, dataset, tmp_path):
        model, _ = trained
        ps = infer(model, dataset.observations[5], n=16, seed=12)
        path = tmp_path / "post.csv"
        write_posterior_csv(path, ps.samples)
        names, arr = read_posterior_csv(path)
        assert len(names) == 17 and names[0] == "Gb"
        assert np.array_equal(arr, ps.samples)

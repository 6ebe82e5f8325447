import numpy as np
import pytest

from ndcert.denoiser import WeightScheme
from ndcert.mlp import (
    BadMagicError,
    MlpDenoiser,
    TrainingDivergedError,
    TruncatedCheckpointError,
    VersionMismatchError,
    load_checkpoint,
    save_checkpoint,
    train_denoiser,
)
from ndcert.schedule import build_geometric_schedule


def small_model(seed=0):
    return MlpDenoiser.init(2, 2, hidden=(16, 16), emb_dim=4, sigma_data=1.0, seed=seed)


def models_equal(a, b):
    return (
        all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
        and all(np.array_equal(x, y) for x, y in zip(a.biases, b.biases))
        and np.array_equal(a.embedding, b.embedding)
    )


class TestMlpDenoiser:
    def test_deterministic_evaluation(self):
        model = small_model()
        x = np.array([[0.4, -1.1]])
        out1 = model.denoise(x, 0.7, 1)
        out2 = model.denoise(x, 0.7, 1)
        np.testing.assert_array_equal(out1, out2)

    def test_output_dim_matches_input(self):
        model = small_model()
        assert model.denoise(np.zeros((5, 2)), 1.0, 0).shape == (5, 2)

    def test_shape_chain_validation(self):
        model = small_model()
        with pytest.raises(ValueError, match="chain"):
            MlpDenoiser(
                [model.weights[0], np.zeros((3, 2))],
                model.biases,
                model.embedding,
                1.0,
            )


class TestTraining:
    def test_zero_epochs_is_noop(self):
        sched = build_geometric_schedule(0.05, 5.0, 16)
        model = small_model()
        rng = np.random.default_rng(0)
        trained, log = train_denoiser(
            model, rng.standard_normal((20, 2)), np.zeros(20, dtype=int), sched, epochs=0
        )
        assert models_equal(model, trained)
        assert log.epoch_losses == []

    def test_input_model_not_mutated(self):
        sched = build_geometric_schedule(0.05, 5.0, 16)
        model = small_model()
        snapshot = model.copy()
        rng = np.random.default_rng(0)
        train_denoiser(
            model, rng.standard_normal((20, 2)), np.zeros(20, dtype=int), sched, epochs=3
        )
        assert models_equal(model, snapshot)

    def test_single_point_overfit(self):
        # a lone training point becomes the reconstruction target
        sched = build_geometric_schedule(0.2, 0.4, 8)
        point = np.array([[0.8, -0.6]])
        model = small_model(seed=1)
        trained, _ = train_denoiser(
            model,
            point,
            np.array([0]),
            sched,
            scheme=WeightScheme.uniform(),
            lr=0.1,
            epochs=2000,
            seed=1,
        )
        rng = np.random.default_rng(2)
        sigma = 0.3
        x_t = point + sigma * rng.standard_normal((64, 2))
        err = np.linalg.norm(trained.denoise(x_t, sigma, 0) - point, axis=1)
        assert float(err.mean()) <= 0.05

    def test_seed_determinism(self):
        sched = build_geometric_schedule(0.05, 5.0, 16)
        rng = np.random.default_rng(3)
        x = rng.standard_normal((50, 2))
        y = rng.integers(0, 2, 50)
        a, la = train_denoiser(small_model(), x, y, sched, epochs=5, seed=9)
        b, lb = train_denoiser(small_model(), x, y, sched, epochs=5, seed=9)
        assert models_equal(a, b)
        assert la.epoch_losses == lb.epoch_losses

    def test_empty_data_rejected(self):
        sched = build_geometric_schedule(0.05, 5.0, 16)
        with pytest.raises(ValueError, match="empty"):
            train_denoiser(small_model(), np.zeros((0, 2)), np.zeros(0, dtype=int), sched)

    @pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
    def test_divergence_aborts_with_diagnostic(self):
        sched = build_geometric_schedule(0.05, 5.0, 16)
        rng = np.random.default_rng(4)
        x = 100.0 * rng.standard_normal((64, 2))
        model = MlpDenoiser.init(
            2, 2, hidden=(16, 16), emb_dim=4, sigma_data=1.0, activation="relu"
        )
        with pytest.raises(TrainingDivergedError, match="epoch"):
            train_denoiser(
                model,
                x,
                np.zeros(64, dtype=int),
                sched,
                scheme=WeightScheme.uniform(),
                lr=1e9,
                grad_clip=float("inf"),
                epochs=200,
            )

    def test_loss_decreases_on_mixture(self, gm2):
        sched = build_geometric_schedule(0.1, 10.0, 32)
        rng = np.random.default_rng(5)
        x, y = gm2.sample(800, rng)
        _, log = train_denoiser(
            small_model(),
            x,
            y,
            sched,
            scheme=WeightScheme.uniform(),
            lr=0.03,
            epochs=60,
            seed=5,
        )
        assert log.epoch_losses[-1] < log.epoch_losses[0]
        assert log.trailing_nonincreasing(window=10)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = small_model(seed=7)
        p1, p2 = tmp_path / "a.ndc", tmp_path / "b.ndc"
        save_checkpoint(model, str(p1))
        loaded = load_checkpoint(str(p1))
        assert models_equal(model, loaded)
        assert loaded.sigma_data == model.sigma_data
        assert loaded.activation == model.activation
        save_checkpoint(loaded, str(p2))
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ndc"
        save_checkpoint(small_model(), str(path))
        raw = bytearray(path.read_bytes())
        raw[0] = ord("X")
        path.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            load_checkpoint(str(path))

    def test_version_mismatch_names_both(self, tmp_path):
        path = tmp_path / "m.ndc"
        save_checkpoint(small_model(), str(path))
        raw = bytearray(path.read_bytes())
        raw[4] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(VersionMismatchError, match="9.*1"):
            load_checkpoint(str(path))

    def test_truncation(self, tmp_path):
        path = tmp_path / "m.ndc"
        save_checkpoint(small_model(), str(path))
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(TruncatedCheckpointError):
            load_checkpoint(str(path))

import numpy as np
import pytest

from flowage.errors import NumericalError, ValidationError
from flowage.flow import FlowConfig, MixingTransform, build_flow
from flowage.training import TrainConfig, TrainRecord, grad, nll_loss, train, write_train_log


def randomize(model, scale=0.15, seed=0):
    rng = np.random.default_rng(seed)
    for _, p in model.parameters():
        p += rng.standard_normal(p.shape) * scale
    return model


class TestNllLoss:
    def test_all_terms_vanish(self):
        assert nll_loss(1.7, np.zeros(5), 1.7, 0.14, 0.0) == 0.0

    def test_sigma_boundary_case(self):
        # residual equal to sigma makes the age term exactly 1/2
        assert abs(nll_loss(0.14, np.zeros(3), 0.0, 0.14, 0.0) - 0.5) <= 1e-12

    def test_log_det_cancels_z_term(self):
        assert nll_loss(0.0, np.array([1.0, 1.0]), 0.0, 0.14, 1.0) == pytest.approx(0.0, abs=1e-15)

    def test_rejects_bad_sigma_and_nonfinite(self):
        with pytest.raises(ValidationError):
            nll_loss(0.0, np.zeros(2), 0.0, 0.0, 0.0)
        with pytest.raises(NumericalError):
            nll_loss(np.inf, np.zeros(2), 0.0, 0.1, 0.0)


class TestGrad:
    def test_identity_init_closed_form(self):
        """At zero-init only the final head layer of each coupling has gradient.

        The flow is the identity, so the loss cotangent on the output is
        [a / sigma^2, z] / B; the head gradient follows in closed form from
        the cached hidden activations, and everything upstream is zero
        because it backpropagates through zero head weights.
        """
        cfg = TrainConfig(sigma=0.5)
        model = build_flow(FlowConfig(n_sub=6, n_lay=1, n_hid=2, hidden_width=8), seed=4)
        layer = model.coupling_layers()[0]
        rng = np.random.default_rng(5)
        B = 12
        X = rng.standard_normal((B, 6))
        ages = np.zeros(B)
        _, grads = grad(model, X, ages, cfg)

        for name, g in grads.items():
            if not name.endswith("W2") and not name.endswith("b2"):
                assert np.all(g == 0.0), name

        u1, u2 = X[:, :3], X[:, 3:]
        h = np.maximum(u2 @ layer.weights[0] + layer.biases[0], 0.0)
        h = np.maximum(h @ layer.weights[1] + layer.biases[1], 0.0)
        g_out = X / B
        g_out[:, 0] = X[:, 0] / (cfg.sigma**2 * B)
        g_s = g_out[:, :3] * u1 - 1.0 / B
        g_raw = np.concatenate([g_s, g_out[:, :3]], axis=1)
        assert np.abs(grads["layer01.W2"] - h.T @ g_raw).max() <= 1e-12
        assert np.abs(grads["layer01.b2"] - g_raw.sum(axis=0)).max() <= 1e-12

    def test_every_parameter_matches_finite_differences(self):
        """Central-difference oracle over every entry of every tensor.

        The 4-layer toy contains every stage kind: orthogonal and reverse
        mixing plus the closure stage.
        """
        from flowage.training import _loss_terms

        cfg = TrainConfig(sigma=0.14)
        model = randomize(build_flow(FlowConfig(n_sub=8, n_lay=4, n_hid=2, hidden_width=8), 7), 0.2, seed=8)
        kinds = {s.kind for s in model.stages if isinstance(s, MixingTransform)}
        assert kinds == {"reverse", "orthogonal"}
        rng = np.random.default_rng(9)
        coords = rng.standard_normal((16, 8))
        ages = rng.standard_normal(16)
        _, grads = grad(model, coords, ages, cfg)

        h = 1e-6
        for name, p in model.parameters():
            flat, gf = p.reshape(-1), grads[name].reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + h
                Y, ld, _ = model.forward_batch(coords)
                lp = _loss_terms(Y, ld, ages, cfg.sigma)[0]
                flat[idx] = orig - h
                Y, ld, _ = model.forward_batch(coords)
                lm = _loss_terms(Y, ld, ages, cfg.sigma)[0]
                flat[idx] = orig
                fd = (lp - lm) / (2 * h)
                assert abs(gf[idx] - fd) <= 1e-4 * max(1.0, abs(fd)), f"{name}[{idx}]"

    def test_gradients_equal_under_z_permutation(self):
        """Permuting z slots after the chain leaves loss and gradients intact."""
        cfg = TrainConfig(sigma=0.14)
        base = randomize(build_flow(FlowConfig(n_sub=6, n_lay=2, n_hid=1, hidden_width=6), 10), 0.2, seed=11)
        rng = np.random.default_rng(12)
        coords = rng.standard_normal((10, 6))
        ages = rng.standard_normal(10)
        (loss_a, *_), grads_a = grad(base, coords, ages, cfg)

        perm = np.eye(6)[[0, 3, 1, 4, 2, 5]]  # fixes the age slot, shuffles z
        permuted = build_flow(FlowConfig(n_sub=6, n_lay=2, n_hid=1, hidden_width=6), 10)
        for (_, p), (_, q) in zip(permuted.parameters(), base.parameters()):
            p[...] = q
        permuted.stages.append(MixingTransform("orthogonal", perm))
        (loss_b, *_), grads_b = grad(permuted, coords, ages, cfg)

        assert loss_b == pytest.approx(loss_a, abs=1e-12)
        for name in grads_a:
            assert np.abs(grads_a[name] - grads_b[name]).max() <= 1e-12

    def test_nonfinite_gradient_names_parameter(self):
        cfg = TrainConfig()
        model = build_flow(FlowConfig(n_sub=4, n_lay=1, n_hid=1, hidden_width=4), 0)
        model.coupling_layers()[0].weights[0][0, 0] = 1e308
        with np.errstate(all="ignore"), pytest.raises(NumericalError):
            grad(model, np.full((4, 4), 2.0), np.zeros(4), cfg)


class TestTrain:
    def make_linear_cohort(self, n, seed, noise=0.1):
        """Age drives coordinate 0 linearly; the rest is unit nuisance noise."""
        rng = np.random.default_rng(seed)
        ages = rng.uniform(20, 90, n)
        coords = rng.standard_normal((n, 8))
        signal = (ages - 55.0) / 35.0
        coords[:, 0] = (signal + rng.standard_normal(n) * noise) / np.sqrt(signal.var() + noise**2)
        return list(zip(coords, ages)), ages

    def test_monotone_loss_decrease_smoke(self):
        rng = np.random.default_rng(13)
        base = rng.standard_normal(6)
        data = [(base.copy(), 30.0 + 5.0 * i) for i in range(8)]
        model = build_flow(FlowConfig(n_sub=6, n_lay=2, n_hid=1, hidden_width=4), 14)
        cfg = TrainConfig(sigma=0.5, epochs=100, learning_rate=1e-3, weight_decay=0.0, seed=14, record_every=1)
        _, records = train(model, data, cfg)
        losses = [r.loss for r in records]
        assert len(losses) == 100
        assert all(b < a + 1e-12 for a, b in zip(losses, losses[1:]))

    def test_loss_decomposition_identity(self):
        data, _ = self.make_linear_cohort(64, 15)
        model = build_flow(FlowConfig(n_sub=8, n_lay=4, n_hid=1, hidden_width=8), 16)
        cfg = TrainConfig(sigma=0.3, epochs=60, learning_rate=3e-3, weight_decay=1e-3, seed=16, record_every=20)
        _, records = train(model, data, cfg)
        for r in records:
            recon = 0.5 * (r.age_mse / cfg.sigma**2 + r.z_norm_mean) - r.log_det_mean
            assert abs(r.loss - recon) <= 1e-10

    def test_deterministic_same_seed(self):
        data, _ = self.make_linear_cohort(32, 17)
        runs = []
        for _ in range(2):
            model = build_flow(FlowConfig(n_sub=8, n_lay=2, n_hid=1, hidden_width=6), 18)
            cfg = TrainConfig(sigma=0.3, epochs=40, learning_rate=1e-3, seed=18, record_every=40)
            model, records = train(model, data, cfg)
            runs.append((dict((n, p.copy()) for n, p in model.parameters()), records[-1].loss))
        params_a, loss_a = runs[0]
        params_b, loss_b = runs[1]
        assert loss_a == loss_b
        for name in params_a:
            assert np.array_equal(params_a[name], params_b[name])

    def test_minibatch_mode_runs_deterministically(self):
        data, _ = self.make_linear_cohort(40, 19)
        outs = []
        for _ in range(2):
            model = build_flow(FlowConfig(n_sub=8, n_lay=2, n_hid=1, hidden_width=6), 20)
            cfg = TrainConfig(sigma=0.3, epochs=15, learning_rate=1e-3, seed=20, batch=16, record_every=15)
            model, records = train(model, data, cfg)
            outs.append(records[-1].loss)
        assert outs[0] == outs[1]

    def test_grad_check_mode(self):
        data, _ = self.make_linear_cohort(24, 21)
        model = build_flow(FlowConfig(n_sub=8, n_lay=2, n_hid=1, hidden_width=6), 22)
        cfg = TrainConfig(sigma=0.3, epochs=2, learning_rate=1e-3, seed=22, grad_check=True, record_every=2)
        train(model, data, cfg)  # must not raise

    def test_nan_loss_aborts_with_last_good_epoch(self):
        data, _ = self.make_linear_cohort(16, 23)
        model = build_flow(FlowConfig(n_sub=8, n_lay=1, n_hid=1, hidden_width=4), 24)
        model.coupling_layers()[0].weights[-1][0, :] = 1e308
        cfg = TrainConfig(sigma=0.3, epochs=5, learning_rate=1e-3, seed=24)
        with np.errstate(all="ignore"), pytest.raises(NumericalError, match="last good epoch"):
            train(model, data, cfg)

    def test_age_normalization_stored(self):
        data, ages = self.make_linear_cohort(32, 25)
        model = build_flow(FlowConfig(n_sub=8, n_lay=1, n_hid=1, hidden_width=4), 26)
        cfg = TrainConfig(sigma=0.3, epochs=1, learning_rate=1e-4, seed=26)
        model, _ = train(model, data, cfg)
        assert model.age_norm[0] == pytest.approx(ages.mean())
        assert model.age_norm[1] == pytest.approx(ages.std())

    def test_years_mode_skips_normalization(self):
        data, _ = self.make_linear_cohort(32, 27)
        model = build_flow(FlowConfig(n_sub=8, n_lay=1, n_hid=1, hidden_width=4), 28)
        cfg = TrainConfig(sigma=5.0, epochs=1, learning_rate=1e-4, seed=28, age_units="years")
        model, _ = train(model, data, cfg)
        assert model.age_norm == (0.0, 1.0)

    def test_rejects_degenerate_inputs(self):
        model = build_flow(FlowConfig(n_sub=8, n_lay=1), 0)
        with pytest.raises(ValidationError):
            train(model, [(np.zeros(8), 50.0)], TrainConfig())
        with pytest.raises(ValidationError):
            TrainConfig(sigma=-1.0).validate()
        with pytest.raises(ValidationError):
            TrainConfig(batch=0).validate()
        with pytest.raises(ValidationError):
            TrainConfig(age_units="decades").validate()

    def test_write_train_log(self, tmp_path):
        records = [TrainRecord(0, 1.5, 0.2, 5.0, -0.1), TrainRecord(9, 0.7, 0.1, 4.0, 0.2)]
        path = tmp_path / "log.csv"
        write_train_log(records, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,loss,age_mse,z_norm_mean,log_det_mean"
        assert lines[1].startswith("0,1.5,")
        assert len(lines) == 3

import numpy as np
import pytest

from flowage.cohort import ConfigReader, ManifestRow, load_cohort, read_kv_config, read_manifest, split_rows, write_manifest
from flowage.container import (
    decode_tensor,
    encode_tensor,
    load_aging_model,
    load_subspace,
    read_deformation,
    read_tensor,
    read_velocity,
    read_volume,
    save_aging_model,
    save_subspace,
    write_deformation,
    write_tensor,
    write_velocity,
    write_volume,
)
from flowage.errors import ValidationError
from flowage.flow import FlowConfig, MixingTransform, build_flow
from flowage.geometry import DeformationField, VelocityField, Volume
from flowage.subspace import fit
from flowage.synth import GeneratorRecord, SynthConfig, bayes_mae_quadrature, mean_path_factor0, synth_cohort, write_cohort


class TestTensorContainer:
    def test_velocity_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        v = VelocityField(rng.standard_normal((5, 6, 7, 3)), (1.0, 1.25, 2.0))
        path = tmp_path / "field.vf"
        write_velocity(path, v)
        back = read_velocity(path)
        assert np.array_equal(back.data, v.data)
        assert back.spacing == v.spacing

    def test_write_read_write_byte_identical(self, tmp_path):
        rng = np.random.default_rng(1)
        vol = Volume(rng.standard_normal((4, 5, 6)), (2.0, 1.0, 0.5))
        p1, p2 = tmp_path / "a.vol", tmp_path / "b.vol"
        write_volume(p1, vol)
        write_volume(p2, read_volume(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_unknown_header_keys_preserved(self):
        blob = encode_tensor(np.arange(6.0).reshape(2, 3), "matrix", extra={"note": "hello", "zeta": "9"})
        rec = decode_tensor(blob)
        assert rec.header["note"] == "hello"
        blob2 = encode_tensor(rec.data, rec.role, extra={"note": rec.header["note"], "zeta": rec.header["zeta"]})
        assert blob == blob2

    def test_payload_is_x_fastest_on_disk(self):
        vol = np.arange(8.0).reshape(2, 2, 2)  # value = 4x + 2y + z
        blob = encode_tensor(vol, "volume", spacing=(1, 1, 1))
        rec = decode_tensor(blob)
        (hlen,) = np.frombuffer(blob[8:12], dtype="<u4")
        payload = np.frombuffer(blob[12 + int(hlen) :], dtype="<f8")
        # x varies fastest: first two entries differ in x only
        assert payload[0] == vol[0, 0, 0] and payload[1] == vol[1, 0, 0]
        assert np.array_equal(rec.data, vol)

    def test_f32_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        data = rng.standard_normal((3, 3, 3, 3))
        path = tmp_path / "f32.vf"
        write_tensor(path, data, "velocity", (1, 1, 1))
        blob = encode_tensor(data, "velocity", (1, 1, 1), dtype="f32")
        rec = decode_tensor(blob)
        assert np.abs(rec.data - data).max() <= 1e-6

    def test_roles_and_shapes_validated(self):
        with pytest.raises(ValidationError, match="role"):
            encode_tensor(np.zeros(3), "picture")
        with pytest.raises(ValidationError, match="spacing"):
            encode_tensor(np.zeros((2, 2, 2)), "volume")
        with pytest.raises(ValidationError, match="expects"):
            encode_tensor(np.zeros((2, 2)), "vector")

    def test_malformed_files_name_the_problem(self, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"NOTMAGIC" + b"\x00" * 20)
        with pytest.raises(ValidationError, match="magic"):
            read_tensor(bad)
        with pytest.raises(ValidationError, match="not found"):
            read_tensor(tmp_path / "missing.bin")
        blob = encode_tensor(np.zeros((2, 2, 2)), "volume", (1, 1, 1))
        (tmp_path / "trunc.bin").write_bytes(blob[:-8])
        with pytest.raises(ValidationError, match="payload"):
            read_tensor(tmp_path / "trunc.bin")

    def test_role_checked_readers(self, tmp_path):
        path = tmp_path / "d.def"
        write_deformation(path, DeformationField(np.zeros((3, 3, 3, 3))))
        read_deformation(path)
        with pytest.raises(ValidationError, match="velocity"):
            read_velocity(path)


class TestCheckpoints:
    @pytest.fixture()
    def subspace_model(self):
        rng = np.random.default_rng(3)
        fields = [VelocityField(rng.standard_normal((6, 6, 6, 3)), (1.0, 1.0, 2.0)) for _ in range(12)]
        return fit(fields, 4)

    def test_subspace_round_trip(self, tmp_path, subspace_model):
        path = tmp_path / "subspace.ckpt"
        save_subspace(path, subspace_model)
        back = load_subspace(path)
        assert np.array_equal(back.basis, subspace_model.basis)
        assert np.array_equal(back.mean.data, subspace_model.mean.data)
        assert np.array_equal(back.coord_scale, subspace_model.coord_scale)
        assert back.n_pop == subspace_model.n_pop
        assert back.standardize == subspace_model.standardize
        assert back.variance_captured == subspace_model.variance_captured

    def test_aging_round_trip_bit_exact(self, tmp_path, subspace_model):
        flow = build_flow(FlowConfig(n_sub=4, n_lay=5, n_hid=1, hidden_width=6), seed=7)
        rng = np.random.default_rng(8)
        for _, p in flow.parameters():
            p += rng.standard_normal(p.shape) * 0.1
        flow.age_norm = (52.5, 17.25)
        path = tmp_path / "model.ckpt"
        prov = {"config_hash": "abc123", "train_seed": 7}
        save_aging_model(path, subspace_model, flow, prov)
        sub, flow2, prov2 = load_aging_model(path)
        for (na, pa), (nb, pb) in zip(flow.parameters(), flow2.parameters()):
            assert na == nb and np.array_equal(pa, pb)
        assert flow2.age_norm == flow.age_norm
        assert prov2 == {"config_hash": "abc123", "train_seed": "7"}
        mixes_a = [s for s in flow.stages if isinstance(s, MixingTransform)]
        mixes_b = [s for s in flow2.stages if isinstance(s, MixingTransform)]
        assert [m.kind for m in mixes_a] == [m.kind for m in mixes_b]
        for ma, mb in zip(mixes_a, mixes_b):
            if ma.kind == "orthogonal":
                assert np.array_equal(ma.matrix, mb.matrix)
        # behavioural equality on a random batch
        X = rng.standard_normal((20, 4))
        Ya, lda, _ = flow.forward_batch(X)
        Yb, ldb, _ = flow2.forward_batch(X)
        assert np.array_equal(Ya, Yb) and np.array_equal(lda, ldb)

    def test_checkpoint_kind_mismatch(self, tmp_path, subspace_model):
        path = tmp_path / "subspace.ckpt"
        save_subspace(path, subspace_model)
        with pytest.raises(ValidationError, match="aging"):
            load_aging_model(path)


class TestManifest:
    def write_field(self, path):
        write_velocity(path, VelocityField(np.zeros((3, 3, 3, 3))))

    def test_round_trip_and_split(self, tmp_path):
        for i in range(3):
            self.write_field(tmp_path / f"s{i}.vf")
        rows = [
            ManifestRow("s0", 31.5, tmp_path / "s0.vf", "train"),
            ManifestRow("s1", 44.0, tmp_path / "s1.vf", "train"),
            ManifestRow("s2", 61.25, tmp_path / "s2.vf", "test"),
        ]
        path = tmp_path / "manifest.csv"
        write_manifest(path, rows)
        back = read_manifest(path)
        assert [r.subject_id for r in back] == ["s0", "s1", "s2"]
        assert back[0].age_years == 31.5
        train, test = split_rows(back)
        assert len(train) == 2 and len(test) == 1
        cohort = load_cohort(test)
        assert cohort[0][1] == 61.25

    def test_errors_name_file_and_line(self, tmp_path):
        self.write_field(tmp_path / "a.vf")
        path = tmp_path / "manifest.csv"

        path.write_text("subject_id,age_years\nx,30\n")
        with pytest.raises(ValidationError, match="velocity_path"):
            read_manifest(path)

        path.write_text("subject_id,age_years,velocity_path\na,thirty,a.vf\n")
        with pytest.raises(ValidationError, match="line 2"):
            read_manifest(path)

        path.write_text("subject_id,age_years,velocity_path\na,30,a.vf\na,35,a.vf\n")
        with pytest.raises(ValidationError, match="duplicate"):
            read_manifest(path)

        path.write_text("subject_id,age_years,velocity_path\na,30,gone.vf\n")
        with pytest.raises(ValidationError, match="does not resolve"):
            read_manifest(path)

        path.write_text("subject_id,age_years,velocity_path,split\na,30,a.vf,validation\n")
        with pytest.raises(ValidationError, match="split"):
            read_manifest(path)

    def test_grid_consistency_checked(self, tmp_path):
        write_velocity(tmp_path / "a.vf", VelocityField(np.zeros((3, 3, 3, 3))))
        write_velocity(tmp_path / "b.vf", VelocityField(np.zeros((4, 3, 3, 3))))
        rows = [ManifestRow("a", 30, tmp_path / "a.vf"), ManifestRow("b", 40, tmp_path / "b.vf")]
        with pytest.raises(ValidationError, match="grid"):
            load_cohort(rows)


class TestKvConfig:
    def test_parse_with_comments(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("# comment\nalpha = 3\n\nbeta = hello world\n")
        entries = read_kv_config(path)
        assert entries == {"alpha": "3", "beta": "hello world"}

    def test_errors_carry_line_numbers(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("alpha = 1\nnot a pair\n")
        with pytest.raises(ValidationError, match="line 2"):
            read_kv_config(path)
        path.write_text("alpha = 1\nalpha = 2\n")
        with pytest.raises(ValidationError, match="duplicate"):
            read_kv_config(path)

    def test_reader_types_and_unknown_keys(self):
        r = ConfigReader({"n": "5", "x": "1.5", "flag": "true", "dims": "2,3,4"}, "test.cfg")
        assert r.get_int("n") == 5
        assert r.get_float("x") == 1.5
        assert r.get_bool("flag") is True
        assert r.get_tuple("dims", 3, int) == (2, 3, 4)
        r2 = ConfigReader({"unknown_key": "1"}, "test.cfg")
        r2.get_int("n", 3)
        with pytest.raises(ValidationError, match="unknown_key"):
            r2.reject_unknown()
        with pytest.raises(ValidationError, match="integer"):
            ConfigReader({"n": "five"}, "t").get_int("n")


class TestSynth:
    def test_bit_identical_for_same_config(self):
        cfg = SynthConfig(n_subjects=6, n_test=2, dims=(8, 8, 8), n_factors=2, seed=3)
        fields_a, rec_a = synth_cohort(cfg)
        fields_b, rec_b = synth_cohort(cfg)
        for (va, aa), (vb, ab) in zip(fields_a, fields_b):
            assert aa == ab and np.array_equal(va.data, vb.data)
        assert np.array_equal(rec_a.factors, rec_b.factors)

    def test_default_age_range_and_split(self):
        cfg = SynthConfig(n_subjects=40, n_test=10, dims=(8, 8, 8), n_factors=2, seed=4)
        fields, rec = synth_cohort(cfg)
        ages = np.array([a for _, a in fields])
        assert cfg.age_range == (20.0, 90.0)
        assert ages.min() >= 20.0 and ages.max() <= 90.0
        assert rec.splits.count("train") == 30 and rec.splits.count("test") == 10

    def test_noiseless_linear_coordinates_collinear_with_age(self):
        cfg = SynthConfig(
            n_subjects=30, n_test=0, dims=(8, 8, 8), generator="linear",
            n_factors=1, noise_std=0.0, voxel_noise_std=1e-9, seed=5,
        )
        fields, rec = synth_cohort(cfg)
        model = fit([v for v, _ in fields], 1)
        coords = np.array([np.squeeze((model.basis.T @ (v.data.reshape(-1) - model.mean.data.reshape(-1)))) for v, _ in fields])
        ages = np.array([a for _, a in fields])
        corr = abs(np.corrcoef(coords, mean_path_factor0(cfg, ages))[0, 1])
        assert corr >= 0.999

    def test_generator_record_json_round_trip(self, tmp_path):
        cfg = SynthConfig(n_subjects=5, n_test=1, dims=(8, 8, 8), n_factors=2, seed=6)
        _, rec = synth_cohort(cfg)
        rec.bayes_mae_years = 2.5
        path = tmp_path / "generator.json"
        path.write_text(rec.to_json())
        back = GeneratorRecord.from_json(path)
        assert back.config == cfg
        assert np.array_equal(back.factors, rec.factors)
        assert np.array_equal(back.bump_centers_mm, rec.bump_centers_mm)

    def test_true_mean_field_matches_factor_sum(self):
        cfg = SynthConfig(n_subjects=4, n_test=0, dims=(8, 8, 8), n_factors=3, seed=7)
        _, rec = synth_cohort(cfg)
        age = 64.0
        g = rec.mean_path([age])[0]
        expected = sum(g[j] * rec.basis_field(j) for j in range(3))
        assert np.abs(rec.true_mean_field(age).data - expected).max() <= 1e-12

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            SynthConfig(n_factors=0).validate()
        with pytest.raises(ValidationError):
            SynthConfig(dims=(4, 8, 8)).validate()
        with pytest.raises(ValidationError):
            SynthConfig(generator="cubic").validate()
        with pytest.raises(ValidationError):
            SynthConfig(n_test=5000).validate()

    def test_write_cohort_artifacts(self, tmp_path):
        cfg = SynthConfig(n_subjects=4, n_test=1, dims=(8, 8, 8), n_factors=1, seed=8)
        manifest, rec = write_cohort(cfg, tmp_path)
        assert manifest.is_file()
        assert (tmp_path / "generator.json").is_file()
        rows = read_manifest(manifest)
        assert len(rows) == 4
        assert rows[0].velocity_path.is_file()
        assert np.isfinite(rec.bayes_mae_years)


class TestBayesOracle:
    def test_noiseless_is_zero(self):
        assert bayes_mae_quadrature(SynthConfig(noise_std=0.0)) == 0.0

    def test_linear_close_to_closed_form(self):
        # untruncated closed form sqrt(2/pi)*sigma_noise/slope; truncation at
        # the age boundaries can only shrink the optimal error
        cfg = SynthConfig(generator="linear", noise_std=0.1)
        quad = bayes_mae_quadrature(cfg)
        closed = np.sqrt(2.0 / np.pi) * 0.1 * 35.0
        assert quad <= closed * 1.001
        assert quad >= closed * 0.9

    def test_monte_carlo_agreement(self):
        cfg = SynthConfig(generator="sigmoid", noise_std=0.12)
        quad = bayes_mae_quadrature(cfg)
        rng = np.random.default_rng(9)
        n = 40_000
        ages = rng.uniform(20, 90, n)
        obs = mean_path_factor0(cfg, ages) + rng.standard_normal(n) * cfg.noise_std
        T = np.linspace(20, 90, 2801)
        G = mean_path_factor0(cfg, T)
        med = np.empty(n)
        for s in range(0, n, 4096):
            W = np.exp(-0.5 * ((obs[s : s + 4096, None] - G[None, :]) / cfg.noise_std) ** 2)
            inc = 0.5 * (W[:, 1:] + W[:, :-1])
            cum = np.cumsum(inc, axis=1)
            half = 0.5 * cum[:, -1:]
            idx = np.argmax(cum >= half, axis=1)
            r = np.arange(W.shape[0])
            prev = np.where(idx > 0, cum[r, np.maximum(idx - 1, 0)], 0.0)
            seg = np.maximum(cum[r, idx] - prev, 1e-300)
            med[s : s + 4096] = T[idx] + (half[:, 0] - prev) / seg * (T[1] - T[0])
        errs = np.abs(med - ages)
        se = errs.std() / np.sqrt(n)
        assert abs(errs.mean() - quad) <= 4 * se + 0.01

import json
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from app.errors import ConfigurationError, ContractError, DataFormatError, TopologyError
from app.services.flow_model import (
    build_model,
    check_round_trip,
    count_parameters,
    load_checkpoint,
    sample,
    save_checkpoint,
)

LOG_2PI = math.log(2.0 * math.pi)


def _normal_ll(x: np.ndarray) -> np.ndarray:
    flat = x.reshape(len(x), -1)
    return -0.5 * (flat**2).sum(axis=1) - 0.5 * flat.shape[1] * LOG_2PI


class TestConfigValidation:
    @pytest.mark.parametrize(
        "overrides",
        [
            {"embedding_dim": None},
            {"groups": 3},
            {"per_flow_projection": True, "injection": ["gate"]},
            {"injection": []},
            {"shared_layers": 3},
            {"layout": "image"},
        ],
        ids=["no-embedding", "indivisible-groups", "projection-without-additive",
             "no-injection", "too-many-shared-layers", "rank-mismatch"],
    )
    def test_nanoflow_rejections(self, make_config, overrides):
        with pytest.raises(ConfigurationError):
            build_model(make_config("nanoflow", **overrides))

    def test_non_nanoflow_rejects_embeddings(self, make_config):
        with pytest.raises(ConfigurationError):
            build_model(make_config("decomp", embedding_dim=4))

    def test_baseline_shares_nothing(self, make_config):
        with pytest.raises(ConfigurationError):
            build_model(make_config("baseline", shared_layers=1))

    def test_concat_embedding_must_tile_every_scale(self, make_image_config):
        with pytest.raises(ConfigurationError):
            build_model(make_image_config("nanoflow", embedding_dim=6))

    def test_image_spatial_size_must_survive_every_squeeze(self, make_image_config):
        with pytest.raises(ConfigurationError):
            build_model(make_image_config("decomp", data_shape=[1, 6, 6]))

    def test_dict_configs_are_validated(self):
        with pytest.raises(ConfigurationError):
            build_model({"scheme": "nanoflow", "unknown_field": 1})


class TestLedger:
    def test_exact_counts(self, make_config):
        ledgers = {s: count_parameters(build_model(make_config(s))) for s in ("baseline", "naive", "decomp", "nanoflow")}
        assert ledgers["naive"].model_dump() == dict(
            trunk=1338, heads=0, embeddings=0, injection=0, flow_layers=0, total=1338, buffers=0
        )
        assert ledgers["baseline"].total == ledgers["baseline"].trunk == 4014
        assert (ledgers["decomp"].trunk, ledgers["decomp"].heads, ledgers["decomp"].total) == (1320, 54, 1374)
        nano = ledgers["nanoflow"]
        assert (nano.trunk, nano.heads, nano.embeddings, nano.injection, nano.total) == (1320, 54, 12, 112, 1498)

    @pytest.mark.parametrize("flows", [2, 5])
    def test_decomposition_identity(self, make_config, flows):
        naive = count_parameters(build_model(make_config("naive", flows=flows)))
        decomp = count_parameters(build_model(make_config("decomp", flows=flows)))
        baseline = count_parameters(build_model(make_config("baseline", flows=flows)))
        assert naive.total == decomp.trunk + decomp.heads // flows
        assert baseline.trunk == flows * naive.trunk

    @pytest.mark.parametrize("draw", range(50))
    def test_identities_over_random_configs(self, make_config, draw):
        rng = np.random.default_rng(draw)
        groups = int(rng.choice([2, 4]))
        length = groups * int(rng.integers(1, 4))
        dims = dict(
            data_shape=[length], groups=groups, flows=int(rng.integers(2, 6)),
            hidden=int(rng.integers(2, 6)), depth=int(rng.integers(1, 4)),
        )
        modes = [m for m in ("additive", "gate", "concat") if rng.random() < 0.5] or ["additive"]
        embedding = length * int(rng.integers(1, 3))

        naive, decomp, baseline = (count_parameters(build_model(make_config(s, **dims))) for s in ("naive", "decomp", "baseline"))
        nano = count_parameters(build_model(make_config("nanoflow", embedding_dim=embedding, injection=modes, **dims)))
        assert baseline.trunk == dims["flows"] * naive.trunk
        assert nano.embeddings == dims["flows"] * embedding
        assert nano.total - decomp.total == nano.embeddings + nano.injection

    def test_nanoflow_growth_in_k_is_embeddings_gates_and_heads(self, make_config):
        small = count_parameters(build_model(make_config("nanoflow", flows=2)))
        large = count_parameters(build_model(make_config("nanoflow", flows=4)))
        assert large.trunk == small.trunk
        assert large.total - small.total == 2 * (18 + 4 + 2 * 8)

    def test_image_models_count_flow_layers(self, make_image_config):
        ledger = count_parameters(build_model(make_image_config("decomp")))
        # actnorm (2C) and 1x1 conv (C^2) per flow at C=4 then C=8, two flows per scale
        assert ledger.flow_layers == 2 * (8 + 16) + 2 * (16 + 64)
        assert ledger.estimator == ledger.trunk + ledger.heads


class TestIdentityAtInit:
    @pytest.mark.parametrize("scheme", ["baseline", "naive", "decomp", "nanoflow"])
    def test_flat_affine(self, make_config, batch, scheme):
        model = build_model(make_config(scheme))
        assert_allclose(model.log_likelihood(batch).data, _normal_ll(batch), atol=1e-12)

    def test_flat_spline(self, make_config, batch):
        model = build_model(make_config("nanoflow", coupling="rq_spline", bins=6))
        assert_allclose(model.log_likelihood(batch).data, _normal_ll(batch), atol=1e-9)

    def test_image(self, make_image_config):
        x = np.random.default_rng(1).standard_normal((3, 1, 4, 4))
        model = build_model(make_image_config("nanoflow", embedding_dim=4))
        assert_allclose(model.log_likelihood(x).data, _normal_ll(x), atol=1e-9)


class TestRoundTrip:
    @pytest.mark.parametrize("scheme", ["baseline", "naive", "decomp", "nanoflow"])
    @pytest.mark.parametrize("coupling", ["affine", "rq_spline"])
    def test_flat(self, make_config, perturb, batch, scheme, coupling):
        model = perturb(build_model(make_config(scheme, coupling=coupling, bins=4)))
        assert check_round_trip(model, batch) < 1e-9

    def test_sequence_layout(self, make_config, perturb):
        model = perturb(build_model(make_config("nanoflow", layout="seq", data_shape=[12], groups=3)))
        x = np.random.default_rng(2).standard_normal((5, 12))
        assert check_round_trip(model, x) < 1e-9

    @pytest.mark.parametrize("scheme", ["decomp", "nanoflow"])
    def test_image(self, make_image_config, perturb, scheme):
        model = perturb(build_model(make_image_config(scheme, **({"embedding_dim": 4} if scheme == "nanoflow" else {}))))
        x = np.random.default_rng(3).uniform(0.0, 1.0, (4, 1, 4, 4))
        model = model.initialize_actnorm(x)
        assert check_round_trip(model, x) < 1e-9

    def test_empty_batch(self, flat_model):
        assert check_round_trip(flat_model, np.zeros((0, 4))) == 0.0

    def test_wrong_record_shape(self, flat_model):
        with pytest.raises(ContractError):
            flat_model.log_likelihood(np.zeros((2, 5)))


class TestLayout:
    def test_sequence_grid_groups_interleave(self, make_config):
        model = build_model(make_config("decomp", layout="seq", data_shape=[6], groups=2))
        x = np.arange(6.0)[None]
        grid = model.to_grid(x)
        assert grid.shape == (1, 1, 2, 3)
        assert_array_equal(grid[0, 0, 0], [0.0, 2.0, 4.0])
        assert_array_equal(model.from_grid(grid), x)


class TestSampling:
    def test_shapes_and_determinism(self, flat_model):
        a = flat_model.sample(7, temperature=0.8, seed=3)
        assert a.shape == (7, 4)
        assert_array_equal(a, sample(flat_model, 7, 0.8, 3))
        assert not np.array_equal(a, flat_model.sample(7, 0.8, seed=4))

    def test_zero_samples(self, flat_model):
        assert flat_model.sample(0).shape == (0, 4)

    def test_temperature_must_be_positive(self, flat_model):
        with pytest.raises(ContractError):
            flat_model.sample(3, temperature=0.0)

    def test_identity_model_samples_scale_with_temperature(self, make_config):
        model = build_model(make_config("decomp"))
        draws = model.sample(4000, temperature=0.5, seed=0)
        assert draws.std() == pytest.approx(0.5, rel=0.05)

    def test_image_samples(self, make_image_config, perturb):
        model = perturb(build_model(make_image_config("decomp")))
        assert model.sample(3, seed=1).shape == (3, 1, 4, 4)


class TestBiasCaching:
    def test_cached_model_is_exact_and_smaller(self, make_config, perturb, batch):
        model = perturb(build_model(make_config("nanoflow")))
        before = count_parameters(model)
        cached = model.cache_additive_biases()
        after = count_parameters(cached)
        assert cached.cached
        assert before.injection - after.injection == 2 * 8 * 4
        assert after.buffers == 3 * 2 * 8
        assert_allclose(cached.log_likelihood(batch).data, model.log_likelihood(batch).data, rtol=0, atol=1e-12)

    def test_per_flow_projection_drops_every_projection(self, make_config):
        model = build_model(make_config("nanoflow", per_flow_projection=True))
        cached = model.cache_additive_biases()
        assert count_parameters(model).injection - count_parameters(cached).injection == 3 * 2 * 8 * 4

    def test_caching_is_a_no_op_without_additive(self, make_config):
        model = build_model(make_config("decomp"))
        assert not model.cache_additive_biases().cached


class TestCheckpoints:
    def test_save_and_load(self, tmp_path, flat_model, batch):
        path = save_checkpoint(flat_model, tmp_path / "ckpt")
        manifest = json.loads((path / "manifest.json").read_text())
        assert manifest["format"] == "nanoflow-checkpoint"
        restored = load_checkpoint(path)
        assert_array_equal(restored.log_likelihood(batch).data, flat_model.log_likelihood(batch).data)

    def test_cached_checkpoint_keeps_buffers(self, tmp_path, flat_model, batch):
        cached = flat_model.cache_additive_biases()
        restored = load_checkpoint(save_checkpoint(cached, tmp_path / "cached"))
        assert restored.cached
        assert set(restored.store.buffers) == set(cached.store.buffers)
        assert_allclose(restored.log_likelihood(batch).data, cached.log_likelihood(batch).data, atol=1e-12)

    def test_image_checkpoint_keeps_actnorm_state(self, tmp_path, make_image_config):
        x = np.random.default_rng(4).uniform(0.0, 1.0, (6, 1, 4, 4))
        model = build_model(make_image_config("decomp")).initialize_actnorm(x)
        restored = load_checkpoint(save_checkpoint(model, tmp_path / "img"))
        assert restored.actnorm_initialized
        assert_allclose(restored.log_likelihood(x).data, model.log_likelihood(x).data)

    def test_corrupt_manifest(self, tmp_path, flat_model):
        path = save_checkpoint(flat_model, tmp_path / "ckpt")
        (path / "manifest.json").write_text('{"format": "something-else"}')
        with pytest.raises(DataFormatError):
            load_checkpoint(path)

    def test_shape_disagreement(self, tmp_path, flat_model):
        path = save_checkpoint(flat_model, tmp_path / "ckpt")
        manifest = json.loads((path / "manifest.json").read_text())
        manifest["tensors"][0]["shape"] = [999]
        (path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(DataFormatError):
            load_checkpoint(path)

    def test_incompatible_arrays(self, flat_model):
        with pytest.raises(TopologyError):
            flat_model.with_arrays({"s1.embed.f1": np.zeros(4)})


class TestActNormInit:
    def test_first_actnorm_standardizes_the_batch(self, make_image_config):
        x = np.random.default_rng(5).uniform(0.0, 1.0, (32, 1, 4, 4))
        model = build_model(make_image_config("decomp")).initialize_actnorm(x)
        assert model.actnorm_initialized
        scale = model.store.arrays["s1.actnorm.f1.scale"]
        bias = model.store.arrays["s1.actnorm.f1.bias"]
        squeezed = x.reshape(32, 1, 2, 2, 2, 2).transpose(0, 1, 3, 5, 2, 4).reshape(32, 4, 2, 2)
        z = (squeezed + bias[None, :, None, None]) * scale[None, :, None, None]
        assert_allclose(z.mean(axis=(0, 2, 3)), np.zeros(4), atol=1e-12)
        assert_allclose(z.std(axis=(0, 2, 3)), np.ones(4), atol=1e-9)

    def test_flat_models_skip_actnorm(self, flat_model, batch):
        out = flat_model.initialize_actnorm(batch)
        assert out.actnorm_initialized
        assert not any("actnorm" in name for name in out.store)


class TestSaturationReport:
    def test_reports_each_flow(self, flat_model, batch):
        report = flat_model.saturation_report(batch)
        assert sorted(report) == [1, 2, 3]
        assert all(values["saturated"] == 0 for values in report.values())


def _latent(model, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    out = model.forward(x)
    parts = [out.z.numpy(), *(f.numpy() for f in out.factored)]
    return np.concatenate([p.reshape(len(x), -1) for p in parts], axis=1), out.log_det.numpy()


def _dense_log_det(model, record: np.ndarray, step: float = 1e-6) -> float:
    flat = record.reshape(-1)
    jac = np.zeros((flat.size, flat.size))
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += step
        minus[i] -= step
        z_plus, _ = _latent(model, plus.reshape(1, *record.shape))
        z_minus, _ = _latent(model, minus.reshape(1, *record.shape))
        jac[:, i] = (z_plus[0] - z_minus[0]) / (2.0 * step)
    return float(np.linalg.slogdet(jac)[1])


class TestLogDetAgainstDenseJacobian:
    @pytest.mark.parametrize("coupling", ["affine", "rq_spline"])
    @pytest.mark.parametrize("scheme", ["baseline", "nanoflow"])
    def test_flat(self, make_config, perturb, scheme, coupling):
        model = perturb(build_model(make_config(scheme, coupling=coupling, bins=4)), std=0.3)
        x = np.random.default_rng(6).standard_normal((3, 4))
        _, log_det = _latent(model, x)
        for record, expected in zip(x, log_det):
            assert _dense_log_det(model, record) == pytest.approx(expected, rel=1e-4, abs=1e-6)

    def test_sequence(self, make_config, perturb):
        model = perturb(build_model(make_config("decomp", layout="seq", data_shape=[8], groups=4)), std=0.3)
        x = np.random.default_rng(7).standard_normal((2, 8))
        _, log_det = _latent(model, x)
        for record, expected in zip(x, log_det):
            assert _dense_log_det(model, record) == pytest.approx(expected, rel=1e-4, abs=1e-6)

    def test_image_with_actnorm_and_inv_conv(self, make_image_config, perturb):
        x = np.random.default_rng(8).uniform(0.0, 1.0, (8, 1, 4, 4))
        model = perturb(build_model(make_image_config("nanoflow", embedding_dim=4)), std=0.3).initialize_actnorm(x)
        assert any("invconv" in name for name in model.store)
        _, log_det = _latent(model, x[:2])
        for record, expected in zip(x[:2], log_det):
            assert _dense_log_det(model, record) == pytest.approx(expected, rel=1e-4, abs=1e-6)


class TestSchemeReductions:
    def test_nanoflow_with_silent_injection_is_decomp(self, make_config, perturb, batch):
        decomp = perturb(build_model(make_config("decomp")), std=0.3)
        nano = build_model(make_config("nanoflow", injection=["additive", "gate", "concat"]))
        arrays = {
            name: decomp.store.arrays[name] if name in decomp.store.arrays else (
                arr if nano.store.categories[name] == "embedding" else np.zeros_like(arr)
            )
            for name, arr in nano.store.arrays.items()
        }
        nano = nano.with_arrays(arrays)
        assert_array_equal(nano.log_likelihood(batch).data, decomp.log_likelihood(batch).data)

    def test_naive_is_decomp_with_tied_heads(self, make_config, perturb, batch):
        naive = perturb(build_model(make_config("naive")), std=0.3)
        decomp = build_model(make_config("decomp"))
        arrays = {}
        for name in decomp.store.arrays:
            tied = name.replace(".head.f1.", ".head.shared.").replace(".head.f2.", ".head.shared.").replace(
                ".head.f3.", ".head.shared."
            )
            arrays[name] = naive.store.arrays[tied]
        decomp = decomp.with_arrays(arrays)
        assert_array_equal(decomp.log_likelihood(batch).data, naive.log_likelihood(batch).data)

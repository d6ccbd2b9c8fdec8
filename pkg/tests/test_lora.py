import numpy as np
import pytest

from peft_forge import lora, shapes
from peft_forge.errors import ConfigError


def toy_shape(n_layers=1, d_in=3, d_out=2, targets=("q",)):
    return shapes.ModelShape(
        name="toy",
        n_layers=n_layers,
        d_model=d_in,
        vocab_size=7,
        context_len=8,
        projections={t: (d_in, d_out) for t in targets},
    )


class TestInit:
    def test_b_zero_and_deterministic(self):
        shape = toy_shape(n_layers=2, targets=("q", "v"))
        cfg = lora.LoraConfig(rank=4, alpha=8, targets=("q", "v"), seed=42)
        first = lora.lora_init(shape, cfg)
        second = lora.lora_init(shape, cfg)
        assert set(first) == {(0, "q"), (0, "v"), (1, "q"), (1, "v")}
        for key, ad in first.items():
            assert (ad.b == 0).all()
            assert (ad.a == second[key].a).all()
            assert ad.scaling == 2.0

    def test_adapter_count_layers_times_targets(self):
        d = 16
        shape = shapes.ModelShape(
            name="toy4",
            n_layers=4,
            d_model=d,
            vocab_size=7,
            context_len=8,
            projections={t: (d, d) for t in shapes.TARGET_ORDER},
        )
        cfg = lora.LoraConfig(rank=8, targets=shapes.TARGET_ORDER)
        assert len(lora.lora_init(shape, cfg)) == 28

    def test_unknown_target_rejected(self):
        with pytest.raises(ConfigError):
            lora.LoraConfig(targets=("q", "bogus"))

    def test_invalid_rank_and_alpha(self):
        with pytest.raises(ConfigError):
            lora.LoraConfig(rank=0)
        with pytest.raises(ConfigError):
            lora.LoraConfig(alpha=0)
        with pytest.raises(ConfigError):
            lora.LoraConfig(targets=())


class TestContribution:
    def test_zero_b_gives_zero_delta(self):
        ad = lora.LoraAdapter(
            a=np.ones((2, 3), dtype=np.float32),
            b=np.zeros((4, 2), dtype=np.float32),
            scaling=2.0,
        )
        x = np.random.default_rng(0).normal(size=(5, 3))
        assert (lora.lora_contribution(ad, x) == 0).all()

    def test_scalar_hand_arithmetic(self):
        # r = d_in = d_out = 1, A=[2], B=[3], alpha=4 -> delta = 4 * 3 * 2 * x
        ad = lora.LoraAdapter(
            a=np.array([[2.0]], dtype=np.float32),
            b=np.array([[3.0]], dtype=np.float32),
            scaling=4.0 / 1,
        )
        x = np.array([[1.5]])
        assert lora.lora_contribution(ad, x)[0, 0] == pytest.approx(24 * 1.5)

    def test_linearity(self):
        rng = np.random.default_rng(1)
        ad = lora.LoraAdapter(
            a=rng.normal(size=(3, 6)).astype(np.float32),
            b=rng.normal(size=(4, 3)).astype(np.float32),
            scaling=1.25,
        )
        x1, x2 = rng.normal(size=(2, 6)), rng.normal(size=(2, 6))
        lhs = lora.lora_contribution(ad, x1 + x2)
        rhs = lora.lora_contribution(ad, x1) + lora.lora_contribution(ad, x2)
        assert np.abs(lhs - rhs).max() < 1e-6

    def test_alpha_scales_delta(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(3, 6)).astype(np.float32)
        b = rng.normal(size=(4, 3)).astype(np.float32)
        x = rng.normal(size=(2, 6))
        one = lora.lora_contribution(lora.LoraAdapter(a, b, scaling=16 / 8), x)
        two = lora.lora_contribution(lora.LoraAdapter(a, b, scaling=32 / 8), x)
        assert np.allclose(two, 2 * one)

    def test_dim_mismatch(self):
        ad = lora.LoraAdapter(
            a=np.zeros((2, 3), dtype=np.float32),
            b=np.zeros((4, 2), dtype=np.float32),
            scaling=1.0,
        )
        with pytest.raises(ConfigError):
            lora.lora_contribution(ad, np.zeros((5, 4)))


class TestMerge:
    def test_zero_b_identity(self):
        w = np.random.default_rng(3).normal(size=(4, 3))
        ad = lora.LoraAdapter(
            a=np.ones((2, 3), dtype=np.float32),
            b=np.zeros((4, 2), dtype=np.float32),
            scaling=2.0,
        )
        assert (lora.lora_merge(w, ad) == w).all()

    def test_scalar_case(self):
        ad = lora.LoraAdapter(
            a=np.array([[2.0]], dtype=np.float32),
            b=np.array([[3.0]], dtype=np.float32),
            scaling=4.0,
        )
        merged = lora.lora_merge(np.array([[10.0]]), ad)
        assert merged[0, 0] == pytest.approx(34.0)

    def test_merged_matches_adapted_forward(self):
        rng = np.random.default_rng(4)
        w = rng.normal(size=(5, 6))
        ad = lora.LoraAdapter(
            a=rng.normal(0, 0.5, size=(3, 6)).astype(np.float32),
            b=rng.normal(0, 0.5, size=(5, 3)).astype(np.float32),
            scaling=2.0,
        )
        x = rng.normal(size=(7, 6))
        adapted = x @ w.T + lora.lora_contribution(ad, x)
        merged = x @ lora.lora_merge(w, ad).T
        denom = max(1.0, np.abs(adapted).max())
        assert np.abs(adapted - merged).max() / denom <= 1e-5

    def test_shape_mismatch(self):
        ad = lora.LoraAdapter(
            a=np.zeros((2, 3), dtype=np.float32),
            b=np.zeros((4, 2), dtype=np.float32),
            scaling=1.0,
        )
        with pytest.raises(ConfigError):
            lora.lora_merge(np.zeros((3, 3)), ad)


class TestParamCount:
    def test_mistral7b_shape_rank16(self):
        shape = shapes.mistral7b_shape()
        cfg = lora.LoraConfig(rank=16, targets=shapes.TARGET_ORDER)
        # independent recount of the per-layer sum
        dims = shape.projections
        per_layer = 16 * sum(di + do for di, do in dims.values())
        assert per_layer == 16 * 81920
        result = lora.lora_param_count(shape, cfg, nominal_total=shapes.NOMINAL_7B)
        assert result["trainable"] == 41_943_040
        assert result["trainable"] == 32 * per_layer
        assert 0.00599 <= result["ratio_vs_nominal"] <= 0.0060

    def test_nominal_default_is_shape_total(self):
        shape = shapes.mistral7b_shape()
        assert shape.total_params() == pytest.approx(7.24e9, rel=0.01)

    def test_single_tiny_target(self):
        shape = toy_shape(n_layers=1, d_in=1, d_out=1)
        cfg = lora.LoraConfig(rank=1, targets=("q",))
        out = lora.lora_param_count(shape, cfg, nominal_total=100)
        assert out["trainable"] == 2


class TestSerialization:
    def test_roundtrip(self):
        shape = shapes.ModelShape(
            name="toy",
            n_layers=2,
            d_model=6,
            vocab_size=7,
            context_len=8,
            projections={"q": (6, 6), "v": (6, 4)},
        )
        cfg = lora.LoraConfig(rank=3, alpha=6, targets=("q", "v"), seed=9)
        adapters = lora.lora_init(shape, cfg)
        adapters[(1, "v")].b[:] = 0.25
        blob = lora.serialize_adapters(adapters)
        back, consumed = lora.deserialize_adapters(blob, shape)
        assert consumed == len(blob)
        assert set(back) == set(adapters)
        for key in adapters:
            assert (back[key].a == adapters[key].a).all()
            assert (back[key].b == adapters[key].b).all()
            assert back[key].scaling == adapters[key].scaling

    def test_serialize_stable(self):
        shape = toy_shape(n_layers=1, d_in=4, d_out=4)
        adapters = lora.lora_init(shape, lora.LoraConfig(rank=2, targets=("q",)))
        blob = lora.serialize_adapters(adapters)
        back, _ = lora.deserialize_adapters(blob, shape)
        assert lora.serialize_adapters(back) == blob

import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixrank import (
    BundleFormatError,
    LayerRecord,
    ModelBundle,
    NonFiniteError,
    ProxyDataset,
    ValidationError,
    gen_synthetic,
    load_bundle,
    representative_input,
    save_bundle,
)
from mixrank.errors import DimensionMismatchError


def small_bundle(seed=0, samples=4):
    rng = np.random.default_rng(seed)
    layers = [
        LayerRecord(name="a", weight=rng.standard_normal((5, 3)),
                    bias=rng.standard_normal(3), kind="qkv"),
        LayerRecord(name="b", weight=rng.standard_normal((4, 6)), kind="mlp1"),
    ]
    proxy = ProxyDataset(samples={
        "a": rng.standard_normal((samples, 7, 5)),
        "b": rng.standard_normal((samples, 7, 4)),
    })
    return ModelBundle(layers=layers, proxy=proxy, metadata={"note": "test"})


class TestRoundTrip:
    def test_bit_exact(self, tmp_path):
        bundle = small_bundle()
        path = str(tmp_path / "b")
        save_bundle(bundle, path)
        loaded = load_bundle(path)
        assert len(loaded.layers) == 2
        for orig, back in zip(bundle.layers, loaded.layers):
            assert np.array_equal(orig.weight, back.weight)
            assert back.kind == orig.kind
            if orig.bias is None:
                assert back.bias is None
            else:
                assert np.array_equal(orig.bias, back.bias)
        for name in bundle.proxy.samples:
            assert np.array_equal(bundle.proxy.samples[name], loaded.proxy.samples[name])
        assert loaded.metadata == bundle.metadata

    def test_empty_layer_list(self, tmp_path):
        path = str(tmp_path / "empty")
        save_bundle(ModelBundle(layers=[]), path)
        assert load_bundle(path).layers == []

    def test_overwrite_replaces_previous_content(self, tmp_path):
        path = str(tmp_path / "b")
        save_bundle(small_bundle(seed=1), path)
        save_bundle(ModelBundle(layers=[LayerRecord(name="only", weight=np.eye(2))]), path)
        loaded = load_bundle(path)
        assert [l.name for l in loaded.layers] == ["only"]
        assert not os.path.exists(path + ".staging")
        assert not os.path.exists(path + ".old")


@settings(deadline=None, max_examples=25)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 8), d=st.integers(2, 8),
       samples=st.integers(1, 4), with_bias=st.booleans())
def test_roundtrip_property(tmp_path_factory, seed, n, d, samples, with_bias):
    rng = np.random.default_rng(seed)
    layer = LayerRecord(
        name="x", weight=rng.standard_normal((n, d)),
        bias=rng.standard_normal(d) if with_bias else None,
    )
    proxy = ProxyDataset(samples={"x": rng.standard_normal((samples, 3, n))})
    bundle = ModelBundle(layers=[layer], proxy=proxy)
    path = str(tmp_path_factory.mktemp("rt") / "b")
    save_bundle(bundle, path)
    loaded = load_bundle(path)
    assert np.array_equal(loaded.layers[0].weight, layer.weight)
    assert np.array_equal(loaded.proxy.samples["x"], proxy.samples["x"])


class TestLoadErrors:
    def test_missing_manifest(self, tmp_path):
        with pytest.raises(BundleFormatError):
            load_bundle(str(tmp_path / "missing"))

    def test_missing_tensor_file(self, tmp_path):
        path = str(tmp_path / "b")
        save_bundle(small_bundle(), path)
        os.remove(os.path.join(path, "a.weight.mrt"))
        with pytest.raises(BundleFormatError, match="'a'"):
            load_bundle(path)

    def test_manifest_dimension_mismatch(self, tmp_path):
        path = str(tmp_path / "b")
        save_bundle(small_bundle(), path)
        manifest = json.load(open(os.path.join(path, "manifest.json")))
        manifest["layers"][0]["n"] = 4  # tensor file still holds 5 rows
        json.dump(manifest, open(os.path.join(path, "manifest.json"), "w"))
        with pytest.raises(DimensionMismatchError, match="'a'"):
            load_bundle(path)

    def test_non_finite_tensor(self, tmp_path):
        bundle = small_bundle()
        path = str(tmp_path / "b")
        save_bundle(bundle, path)
        # corrupt the payload in place with a NaN
        fname = os.path.join(path, "b.weight.mrt")
        raw = bytearray(open(fname, "rb").read())
        raw[16:24] = np.array([np.nan]).tobytes()
        open(fname, "wb").write(bytes(raw))
        with pytest.raises(NonFiniteError, match="'b'"):
            load_bundle(path)

    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "b")
        save_bundle(small_bundle(), path)
        fname = os.path.join(path, "a.weight.mrt")
        raw = bytearray(open(fname, "rb").read())
        raw[0] = 0
        open(fname, "wb").write(bytes(raw))
        with pytest.raises(BundleFormatError, match="magic"):
            load_bundle(path)


class TestValidation:
    def test_duplicate_layer_names(self):
        layers = [LayerRecord(name="a", weight=np.eye(2)),
                  LayerRecord(name="a", weight=np.eye(2))]
        with pytest.raises(ValidationError):
            ModelBundle(layers=layers)

    def test_bias_length_checked(self):
        with pytest.raises(DimensionMismatchError):
            LayerRecord(name="a", weight=np.eye(3), bias=np.zeros(2))

    def test_activation_width_checked(self):
        layer = LayerRecord(name="a", weight=np.eye(3))
        proxy = ProxyDataset(samples={"a": np.zeros((2, 4, 5))})
        with pytest.raises(DimensionMismatchError):
            ModelBundle(layers=[layer], proxy=proxy)

    def test_sample_count_must_match_across_layers(self):
        layers = [LayerRecord(name="a", weight=np.eye(3)),
                  LayerRecord(name="b", weight=np.eye(3))]
        proxy = ProxyDataset(samples={"a": np.zeros((2, 4, 3)), "b": np.zeros((3, 4, 3))})
        with pytest.raises(ValidationError):
            ModelBundle(layers=layers, proxy=proxy)


class TestGenSynthetic:
    def test_deterministic(self):
        a = gen_synthetic(seed=5, layers=3, n=8, d=6, s=5, samples=4)
        b = gen_synthetic(seed=5, layers=3, n=8, d=6, s=5, samples=4)
        for la, lb in zip(a.layers, b.layers):
            assert np.array_equal(la.weight, lb.weight)
        for name in a.proxy.samples:
            assert np.array_equal(a.proxy.samples[name], b.proxy.samples[name])

    def test_flat_spectrum(self):
        bundle = gen_synthetic(seed=1, layers=2, n=7, d=7, s=5, samples=2, spectrum_decay=1.0)
        s = np.linalg.svd(bundle.layers[0].weight, compute_uv=False)
        assert s.max() <= 1.05 * s.min()

    def test_decaying_spectrum(self):
        bundle = gen_synthetic(seed=1, layers=1, n=6, d=6, s=5, samples=2, spectrum_decay=0.5)
        s = np.linalg.svd(bundle.layers[0].weight, compute_uv=False)
        assert np.allclose(s, 0.5 ** np.arange(6), atol=1e-10)

    def test_activations_repropagate_exactly(self):
        bundle = gen_synthetic(seed=9, layers=3, n=8, d=6, s=5, samples=3)
        for i in range(3):
            for prev, cur in zip(bundle.layers[:-1], bundle.layers[1:]):
                expected = np.maximum(
                    bundle.proxy.samples[prev.name][i] @ prev.weight, 0.0
                )
                assert np.array_equal(bundle.proxy.samples[cur.name][i], expected)

    def test_rejects_bad_dims(self):
        with pytest.raises(ValidationError):
            gen_synthetic(seed=0, layers=0, n=8, d=6, s=5, samples=2)
        with pytest.raises(ValidationError):
            gen_synthetic(seed=0, layers=2, n=1, d=6, s=5, samples=2)
        with pytest.raises(ValidationError):
            gen_synthetic(seed=0, layers=2, n=8, d=6, s=5, samples=2, spectrum_decay=0.0)


class TestRepresentativeInput:
    def test_single_sample(self):
        x = np.arange(12.0).reshape(1, 3, 4)
        proxy = ProxyDataset(samples={"a": x})
        assert np.array_equal(representative_input(proxy, "a"), x[0])

    def test_symmetric_samples_cancel(self):
        x = np.random.default_rng(0).standard_normal((3, 4))
        proxy = ProxyDataset(samples={"a": np.stack([x, -x])})
        assert np.allclose(representative_input(proxy, "a"), 0.0)

    def test_matches_naive_mean(self):
        stack = np.random.default_rng(1).standard_normal((4, 3, 5))
        proxy = ProxyDataset(samples={"a": stack})
        naive = sum(stack[i] for i in range(4)) / 4
        assert np.allclose(representative_input(proxy, "a"), naive, atol=1e-12)

    def test_permutation_invariant(self):
        stack = np.random.default_rng(2).standard_normal((5, 2, 3))
        shuffled = stack[np.random.default_rng(3).permutation(5)]
        a = representative_input(ProxyDataset(samples={"a": stack}), "a")
        b = representative_input(ProxyDataset(samples={"a": shuffled}), "a")
        assert np.allclose(a, b, atol=1e-12)

    def test_unknown_layer(self):
        with pytest.raises(ValidationError):
            representative_input(ProxyDataset(), "ghost")

import numpy as np
import pytest

from flowscale.params import (
    FormatError,
    ParameterStore,
    adam_step,
    load_checkpoint,
    save_checkpoint,
)


def scripted_adam(w0, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Independent scalar Adam recurrence for trajectory oracles."""
    w, m, v = w0, 0.0, 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        w = w - lr * mh / (vh**0.5 + eps)
        out.append(w)
    return out


class TestAdam:
    def test_zero_gradient_leaves_parameters_fixed(self):
        store = ParameterStore()
        store.add("w", np.array([1.0, -2.0]))
        adam_step(store, {"w": np.zeros(2)}, lr=0.1)
        assert np.array_equal(store["w"].data, [1.0, -2.0])
        assert store.step_count("w") == 1

    def test_first_step_hand_recurrence(self):
        # w=1, g=1, lr=0.1: mhat=1, vhat=1 -> w = 1 - 0.1/(1+eps)
        store = ParameterStore()
        store.add("w", np.array(1.0))
        adam_step(store, {"w": np.array(1.0)}, lr=0.1)
        assert store["w"].data == pytest.approx(1.0 - 0.1 * (1.0 / (1.0 + 1e-8)), abs=1e-12)

    def test_trajectory_matches_scripted_oracle(self):
        store = ParameterStore()
        store.add("w", np.array(0.7))
        expected = scripted_adam(0.7, [0.3, 0.3], lr=0.05)
        got = []
        for _ in range(2):
            adam_step(store, {"w": np.array(0.3)}, lr=0.05)
            got.append(float(store["w"].data))
        assert np.allclose(got, expected, atol=1e-12)

    def test_missing_parameter_rejected(self):
        store = ParameterStore()
        store.add("w", np.zeros(1))
        with pytest.raises(KeyError):
            adam_step(store, {"nope": np.zeros(1)}, lr=0.1)

    def test_nonfinite_gradient_rejected(self):
        store = ParameterStore()
        store.add("w", np.zeros(1))
        with pytest.raises(ArithmeticError):
            adam_step(store, {"w": np.array([np.nan])}, lr=0.1)

    def test_only_named_parameters_move(self):
        store = ParameterStore()
        store.add("a", np.array(1.0))
        store.add("b", np.array(1.0))
        adam_step(store, {"a": np.array(1.0)}, lr=0.1)
        assert store["b"].data == 1.0
        assert store.step_count("b") == 0


class TestSerialization:
    def test_roundtrip_bit_exact(self, rng, tmp_path):
        store = ParameterStore()
        store.add("flow/w", rng.normal(size=(3, 4)))
        store.add("flow/b", rng.normal(size=4))
        store.add("scalar", np.array(3.14159))
        adam_step(store, {"flow/w": rng.normal(size=(3, 4))}, lr=1e-3)
        path = tmp_path / "store.facp"
        store.save(path)
        loaded = ParameterStore.load(path)
        assert loaded.names() == store.names()
        for name in store.names():
            assert np.array_equal(loaded[name].data, store[name].data)
            assert np.array_equal(loaded._m1[name], store._m1[name])
            assert np.array_equal(loaded._m2[name], store._m2[name])
            assert loaded.step_count(name) == store.step_count(name)
        loaded.save(tmp_path / "again.facp")
        assert (tmp_path / "store.facp").read_bytes() == (tmp_path / "again.facp").read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.facp"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            ParameterStore.load(path)

    def test_truncation_rejected(self, tmp_path):
        store = ParameterStore()
        store.add("w", np.ones(8))
        blob = store.to_bytes()
        path = tmp_path / "trunc.facp"
        path.write_bytes(blob[:-5])
        with pytest.raises(FormatError, match="truncated"):
            ParameterStore.load(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        store = ParameterStore()
        store.add("w", np.ones(2))
        path = tmp_path / "trail.facp"
        path.write_bytes(store.to_bytes() + b"xx")
        with pytest.raises(FormatError, match="trailing"):
            ParameterStore.load(path)

    def test_duplicate_names_rejected(self):
        store = ParameterStore()
        store.add("w", np.zeros(1))
        with pytest.raises(ValueError, match="duplicate"):
            store.add("w", np.zeros(1))

    def test_reserved_suffix_rejected(self):
        store = ParameterStore()
        with pytest.raises(ValueError, match="reserved"):
            store.add("w#m1", np.zeros(1))


class TestCheckpointContainer:
    def test_header_plus_store_roundtrip(self, rng, tmp_path):
        store = ParameterStore()
        store.add("w", rng.normal(size=(2, 2)))
        header = {"kind": "alignflow", "levels": 2, "nested": {"a": [1, 2]}}
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, header, store)
        got_header, got_store = load_checkpoint(path)
        assert got_header == header
        assert np.array_equal(got_store["w"].data, store["w"].data)

    def test_corrupt_header_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"\x05\x00\x00\x00not-json-at-all")
        with pytest.raises(FormatError):
            load_checkpoint(path)

import numpy as np
import pytest

from conftest import REDUCED, params64
from demenscan.model import CorruptCheckpointError, ModelSpec, checkpoint_bytes, \
    checkpoint_load, checkpoint_save, init_parameters, model_backward, model_forward, \
    softmax_cross_entropy
from demenscan.tensor import ParameterError, ShapeError, make_rng
from oracles import numerical_grad, rel_error


class TestModelSpec:
    def test_defaults(self):
        spec = ModelSpec()
        assert spec.filters == (32, 64, 128, 64)
        assert spec.input_size == (128, 128, 3)
        assert spec.flatten_dim == 8 * 8 * 64 == 4096
        assert [spec.activation_size(i) for i in (1, 2, 3, 4)] == \
            [(128, 128), (64, 64), (32, 32), (16, 16)]

    def test_parameter_count_pinned(self):
        # conv: F*C*9 + F; dense: out*in + out
        expected = (32 * 3 * 9 + 32) + (64 * 32 * 9 + 64) + (128 * 64 * 9 + 128) \
            + (64 * 128 * 9 + 64) + (4096 * 256 + 256) + (256 * 128 + 128) + (128 * 4 + 4)
        assert expected == 1249284
        assert ModelSpec().param_count() == 1249284

    @pytest.mark.parametrize("kwargs", [
        {"filters": (32, 64, 128)}, {"input_size": (100, 128, 3)}, {"kernel": 4},
        {"fc_widths": (256,)}, {"dropout_rate": 1.0}, {"num_classes": 1}])
    def test_invalid(self, kwargs):
        with pytest.raises(ParameterError):
            ModelSpec(**kwargs)

    def test_dict_round_trip(self):
        spec = ModelSpec(input_size=(32, 32, 3), filters=(8, 16, 32, 16))
        assert ModelSpec.from_dict(spec.to_dict()) == spec


class TestInit:
    def test_biases_zero_and_deterministic(self):
        a = init_parameters(ModelSpec(), make_rng(11))
        b = init_parameters(ModelSpec(), make_rng(11))
        for name, p in a.items():
            assert p.dtype == np.float32
            assert p.tobytes() == b[name].tobytes()
            if name.endswith(".bias"):
                assert not p.any()

    def test_he_uniform_bounds(self):
        w = init_parameters(ModelSpec(), make_rng(0))["conv1.weight"].astype(np.float64)
        limit = np.sqrt(6 / 27)
        assert limit == pytest.approx(0.4714, abs=1e-4)
        assert np.abs(w).max() <= limit
        # uniform(-L, L) has sigma = 2L / sqrt(12) = sqrt(2 / fan_in)
        sigma = 2 * limit / np.sqrt(12)
        assert sigma == pytest.approx(np.sqrt(2 / 27))
        assert abs(w.std() / sigma - 1) < 0.05


class TestForward:
    def test_logits_shape_and_determinism(self):
        params = init_parameters(REDUCED, make_rng(0))
        x = make_rng(1).random((3, 16, 16)).astype(np.float32)
        t1 = model_forward(REDUCED, params, x)
        t2 = model_forward(REDUCED, params, x)
        assert t1.logits.shape == (4,)
        assert t1.logits.tobytes() == t2.logits.tobytes()
        assert [a.shape[1:] for a in t1.conv_acts] == [(4, 16, 16), (4, 8, 8), (8, 4, 4),
                                                       (4, 2, 2)]

    def test_batched_matches_single(self):
        params = params64(init_parameters(REDUCED, make_rng(0)))
        x = make_rng(1).random((3, 3, 16, 16))
        batched = model_forward(REDUCED, params, x).logits
        for i in range(3):
            np.testing.assert_allclose(batched[i], model_forward(REDUCED, params, x[i]).logits,
                                       atol=1e-12)

    def test_default_spec_logits(self):
        params = init_parameters(ModelSpec(), make_rng(0))
        x = make_rng(1).random((3, 128, 128)).astype(np.float32)
        assert model_forward(ModelSpec(), params, x).logits.shape == (4,)

    def test_wrong_input_shape(self):
        params = init_parameters(REDUCED, make_rng(0))
        with pytest.raises(ShapeError):
            model_forward(REDUCED, params, np.zeros((3, 32, 32), np.float32))


def end_to_end_check(seed, mode):
    """Max relative error of 50 sampled weight gradients against central differences."""
    rng = make_rng(seed)
    params = params64(init_parameters(REDUCED, rng))
    for name in params:
        if name.endswith(".bias"):
            params[name] += rng.normal(scale=0.05, size=params[name].shape)
    x = rng.random((2, 3, 16, 16))
    labels = rng.integers(4, size=2)

    def loss():
        trace = model_forward(REDUCED, params, x, mode, make_rng(seed + 1))
        return softmax_cross_entropy(trace.logits, labels)[0]

    trace = model_forward(REDUCED, params, x, mode, make_rng(seed + 1))
    _, dlogits = softmax_cross_entropy(trace.logits, labels)
    grads, _ = model_backward(REDUCED, params, trace, dlogits)
    names = list(params)
    sizes = np.array([params[n].size for n in names])
    picks = rng.choice(sizes.sum(), size=50, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        i = int(flat - offsets[k])
        num = numerical_grad(loss, params[names[k]], eps=1e-6, entries=[i])[i]
        worst = max(worst, float(rel_error(grads[names[k]].reshape(-1)[i], num)))
    return worst


@pytest.mark.parametrize("seed", range(20))
def test_end_to_end_gradient_eval(seed):
    assert end_to_end_check(seed, "eval") < 1e-3


@pytest.mark.parametrize("seed", range(3))
def test_end_to_end_gradient_train_mode(seed):
    assert end_to_end_check(seed, "train") < 1e-3


def test_input_gradient_finite_differences():
    rng = make_rng(5)
    params = params64(init_parameters(REDUCED, rng))
    x = rng.random((3, 16, 16))
    trace = model_forward(REDUCED, params, x)
    _, dlogits = softmax_cross_entropy(trace.logits, 2)
    _, dx = model_backward(REDUCED, params, trace, dlogits)
    loss = lambda: softmax_cross_entropy(model_forward(REDUCED, params, x).logits, 2)[0]
    entries = list(rng.choice(x.size, 30, replace=False))
    num = numerical_grad(loss, x, entries=entries)
    for i in entries:
        assert rel_error(dx.reshape(-1)[i], num[i]) < 1e-3


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        spec = REDUCED
        params = init_parameters(spec, make_rng(3))
        path = tmp_path / "m.ckpt"
        checkpoint_save(spec, params, path)
        spec2, params2 = checkpoint_load(path)
        assert spec2 == spec
        assert list(params2) == list(params)
        for name in params:
            assert params2[name].tobytes() == params[name].tobytes()
        assert checkpoint_bytes(spec2, params2) == path.read_bytes()
        x = make_rng(4).random((3, 16, 16)).astype(np.float32)
        assert model_forward(spec, params, x).logits.tobytes() == \
            model_forward(spec2, params2, x).logits.tobytes()

    def test_layout(self):
        blob = checkpoint_bytes(REDUCED, init_parameters(REDUCED, make_rng(0)))
        assert blob[:4] == b"DMSC"
        assert int.from_bytes(blob[4:8], "little") == 1
        header_len = int.from_bytes(blob[8:12], "little")
        payload = len(blob) - 12 - header_len - 4
        assert payload == 4 * REDUCED.param_count()

    def test_truncated(self, tmp_path):
        blob = checkpoint_bytes(REDUCED, init_parameters(REDUCED, make_rng(0)))
        for cut in (0, 3, 11, 200, len(blob) - 1):
            (tmp_path / "t.ckpt").write_bytes(blob[:cut])
            with pytest.raises(CorruptCheckpointError):
                checkpoint_load(tmp_path / "t.ckpt")

    def test_payload_flip_is_crc_error(self, tmp_path):
        blob = bytearray(checkpoint_bytes(REDUCED, init_parameters(REDUCED, make_rng(0))))
        blob[len(blob) // 2] ^= 0x01
        (tmp_path / "c.ckpt").write_bytes(bytes(blob))
        with pytest.raises(CorruptCheckpointError) as err:
            checkpoint_load(tmp_path / "c.ckpt")
        assert err.value.field == "crc"

    def test_bad_magic(self, tmp_path):
        blob = bytearray(checkpoint_bytes(REDUCED, init_parameters(REDUCED, make_rng(0))))
        blob[0:4] = b"XXXX"
        (tmp_path / "m.ckpt").write_bytes(bytes(blob))
        with pytest.raises(CorruptCheckpointError) as err:
            checkpoint_load(tmp_path / "m.ckpt")
        assert err.value.field == "magic"

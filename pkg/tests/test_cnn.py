import json
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from faultsim.cnn import (LENET_SMALL_LAYERS, Conv, Dense, MaxPool, Model, Relu, Softmax,
                          compile_layer, compile_model, infer, load_idx, load_model,
                          reference_infer, reference_layer, random_model, save_model, write_idx)
from faultsim.errors import BadMagic, CountMismatch, FormatError, ShapeMismatch, UnsupportedShape
from faultsim.faults import RegisterFault, make_hook
from faultsim.simt import DeviceConfig, execute_kernel

U32 = np.uint32
F32 = np.float32
FIXTURES = Path(__file__).parent / "fixtures"


def run_layer(layer, x, w=None, b=None):
    cl = compile_layer(layer, x.shape)
    L = cl.layout
    mem = np.zeros(DeviceConfig().global_mem_words, U32)
    mem[L.input.base:L.input.end] = np.asarray(x, F32).reshape(-1).view(U32)
    if w is not None:
        mem[L.weights.base:L.weights.end] = np.asarray(w, F32).view(U32)
    if b is not None:
        mem[L.bias.base:L.bias.end] = np.asarray(b, F32).view(U32)
    for k, launch in cl.kernels:
        mem = execute_kernel(k, launch, DeviceConfig(), mem).memory
    return mem[L.output.base:L.output.end].view(F32), cl


# -- model loading ------------------------------------------------------------------

def test_shipped_lenet(lenet):
    # conv, relu, pool, conv, relu, pool, dense, softmax
    assert len(lenet.layers) == 8
    assert lenet.layers == LENET_SMALL_LAYERS
    assert lenet.shapes[-1] == (10,)


def test_model_save_load_roundtrip(tmp_path):
    m = random_model("rt", (1, 12, 12), (Conv(3, 3, 1, 1), Relu(), MaxPool(2, 2), Dense(10), Softmax()), 4)
    save_model(m, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert back.layers == m.layers
    for a, b in zip(m.weights + m.biases, back.weights + back.biases):
        assert (a is None and b is None) or np.array_equal(a, b)


def test_dense_weight_count_off_by_one(tmp_path):
    m = random_model("x", (1, 4, 4), (Dense(10), Softmax()))
    save_model(m, tmp_path / "m.json")
    man = json.loads((tmp_path / "m.json").read_text())
    man["layers"][0]["weight_len"] -= 1
    (tmp_path / "m.json").write_text(json.dumps(man))
    with pytest.raises(ShapeMismatch) as e:
        load_model(tmp_path / "m.json")
    assert (e.value.layer, e.value.expected, e.value.found) == (0, 160, 159)


@pytest.mark.parametrize("patch", [
    {"layers": []}, {"layers": [{"kind": "lstm"}]}, {"weights_file": "missing.bin"},
])
def test_bad_manifests(tmp_path, patch):
    m = random_model("x", (1, 4, 4), (Dense(10), Softmax()))
    save_model(m, tmp_path / "m.json")
    man = json.loads((tmp_path / "m.json").read_text())
    man.update(patch)
    (tmp_path / "m.json").write_text(json.dumps(man))
    with pytest.raises(FormatError):
        load_model(tmp_path / "m.json")


def test_softmax_must_be_last():
    with pytest.raises(FormatError):
        Model("x", (4,), (Softmax(), Dense(4)), [None, np.zeros(16)], [None, None])


def test_unsupported_shapes():
    with pytest.raises(UnsupportedShape):
        compile_layer(Conv(1, 7), (1, 5, 5))
    with pytest.raises(UnsupportedShape):
        compile_layer(MaxPool(2, 2), (10,))


# -- IDX ----------------------------------------------------------------------------

def test_idx_zeros(tmp_path):
    write_idx(tmp_path / "i", tmp_path / "l", np.zeros((3, 28, 28)), [1, 2, 3])
    d = load_idx(tmp_path / "i", tmp_path / "l")
    assert len(d) == 3
    assert d.images.shape == (3, 1, 28, 28) and not d.images.any()
    assert d.labels.tolist() == [1, 2, 3]


def test_idx_scaling(tmp_path):
    write_idx(tmp_path / "i", tmp_path / "l", np.full((1, 2, 2), 255), [0])
    assert load_idx(tmp_path / "i", tmp_path / "l").images.max() == 1.0


def test_idx_bad_magic(tmp_path):
    (tmp_path / "i").write_bytes(struct.pack(">IIII", 0x801, 1, 1, 1) + b"\0")
    (tmp_path / "l").write_bytes(struct.pack(">II", 0x801, 1) + b"\0")
    with pytest.raises(BadMagic):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_idx_count_mismatch(tmp_path):
    write_idx(tmp_path / "i", tmp_path / "l", np.zeros((3, 4, 4)), [0, 0])
    with pytest.raises(CountMismatch):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_shipped_digits(digits, lenet):
    assert len(digits) == 200
    assert digits.images.shape[1:] == lenet.input_shape
    assert 0 <= digits.images.min() and digits.images.max() <= 1


# -- compiler examples ------------------------------------------------------------

def test_relu_kernel_shape():
    cl = compile_layer(Relu(), (1, 4, 4))
    (k, launch), = cl.kernels
    assert len(k) <= 8
    assert (launch.grid_blocks, launch.threads_per_block) == (1, 16)
    x = np.linspace(-2, 2, 16, dtype=F32).reshape(1, 4, 4)
    out, _ = run_layer(Relu(), x)
    assert np.array_equal(out, np.maximum(x, 0).reshape(-1))


def test_identity_conv_echoes_input(rng):
    x = rng.normal(size=(1, 6, 5)).astype(F32)
    out, _ = run_layer(Conv(1, 1), x, [1.0], [0.0])
    # 1*x + 0 is exact except that -0.0 + 0.0 gives +0.0
    assert np.array_equal(out.view(U32), (x.reshape(-1) + F32(0)).view(U32))


def test_maxpool_example():
    out, _ = run_layer(MaxPool(2, 2), np.array([[[1, 2], [3, 4]]], F32))
    assert out.tolist() == [4.0]


def test_softmax_is_two_kernels():
    cl = compile_layer(Softmax(), (10,))
    assert [k.name for k, _ in cl.kernels] == ["softmax_exp", "softmax_norm"]
    text = "\n".join(str(i.srcs) for k, _ in cl.kernels for i in k.instructions)
    assert "0x3FB8AA3B".lower() in text.lower() or "1069066811" in text


def test_lenet_uses_r0_to_r9(lenet_cm):
    used = set()
    for k, _ in lenet_cm.kernels:
        used |= {i.dst for i in k.instructions if i.dst is not None}
    assert set(range(10)) <= used


# -- oracle equivalence -------------------------------------------------------------

ARCHS = [
    ((1, 8, 8), (Conv(2, 3), Relu(), MaxPool(2, 2), Dense(5), Softmax())),
    ((2, 7, 7), (Conv(3, 3, 2, 1), Relu(), Dense(4), Softmax())),
    ((1, 6, 6), (Conv(2, 2, 1, 1), MaxPool(3, 1), Relu(), Dense(10), Softmax())),
    ((12,), (Dense(7), Relu(), Dense(3), Softmax())),
    ((3, 5, 5), (MaxPool(2, 1), Dense(6))),
]


@settings(max_examples=15)
@given(st.sampled_from(range(len(ARCHS))), st.integers(0, 2**16))
def test_random_models_match_reference(arch, seed):
    shape, layers = ARCHS[arch]
    m = random_model("r", shape, layers, seed)
    x = np.random.default_rng(seed).normal(size=shape).astype(F32)
    got = infer(m, x).probs
    assert np.array_equal(got.view(U32), reference_infer(m, x).view(U32))


def test_layer_outputs_match_reference_layerwise(rng):
    for layer, shape in [(Conv(3, 3, 2, 1), (2, 7, 9)), (Dense(6), (2, 3, 3)), (MaxPool(3, 2), (2, 7, 7))]:
        x = rng.normal(size=shape).astype(F32)
        m = random_model("l", shape, (layer,) if len(shape) == 1 else (layer, Dense(2)), 1)
        out, _ = run_layer(layer, x, m.weights[0], m.biases[0])
        want = reference_layer(layer, x, m.weights[0], m.biases[0])
        assert np.array_equal(out.view(U32), want.reshape(-1).view(U32))


def test_softmax_properties(rng):
    for scale in (0.1, 1.0, 3.0, 5.0, 40.0):
        logits = (rng.normal(size=10) * scale).astype(F32)
        out, _ = run_layer(Softmax(), logits)
        if scale <= 5:
            assert np.all(out > 0) and np.all(out < 1)
        else:
            # wide logit spreads underflow to 0 and saturate to 1 in binary32
            assert np.all(out >= 0) and np.all(out <= 1)
        assert abs(float(out.sum(dtype=np.float64)) - 1) < 1e-5
        assert out.argmax() == logits.argmax()


def test_zero_model_is_uniform():
    m = Model("z", (1, 28, 28), (Dense(10), Softmax()), [np.zeros(7840), None], [np.zeros(10), None])
    img = np.zeros((1, 28, 28), F32)
    want = reference_infer(m, img)
    assert np.allclose(want, 0.1, atol=1e-7)
    assert np.array_equal(infer(m, img).probs, want)


def test_lenet_golden_fixture(lenet, lenet_cm, digits):
    fx = json.loads((FIXTURES / "lenet_small_golden_0.json").read_text())
    want = np.array([int(h, 16) for h in fx["probs_bits"]], U32)
    assert np.array_equal(reference_infer(lenet, digits.image(0)).view(U32), want)
    res = infer(lenet_cm, digits.image(0))
    assert np.array_equal(res.probs.view(U32), want)
    assert abs(float(res.probs.sum(dtype=np.float64)) - 1) < 1e-5


def test_never_written_register_fault_is_bit_identical(lenet_cm, digits):
    golden = infer(lenet_cm, digits.image(1))
    hook = make_hook(RegisterFault(0, 0, 40, 3, 1))
    res = infer(lenet_cm, digits.image(1), hook=hook)
    assert res.stats.corrupted_writes == 0
    assert np.array_equal(res.probs.view(U32), golden.probs.view(U32))


def test_compiled_model_memory_budget():
    from faultsim.errors import ConfigError
    m = random_model("big", (1, 28, 28), LENET_SMALL_LAYERS)
    with pytest.raises(ConfigError):
        compile_model(m, DeviceConfig(global_mem_words=1024))

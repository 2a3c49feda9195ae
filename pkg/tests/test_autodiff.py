"""Test the reverse-mode autodiff engine."""

import numpy as np
import pytest

from dbarf.core.autodiff import (
    GRU_KEYS,
    Tape,
    Tensor,
    backward,
    bilinear_sample,
    clip,
    concat,
    conv2d,
    default_dtype,
    exp,
    forward_eval,
    get_default_dtype,
    gradient,
    gradient_check,
    gru_cell,
    log,
    matmul,
    max_,
    sigmoid,
    softplus,
    stack,
    tanh,
    upsample2x,
)
from dbarf.core.errors import NonFiniteError, ShapeError, TapeStateError

from .conftest import GRADIENT_SEEDS, PRIMITIVE_TOL

TOL = PRIMITIVE_TOL


def _rng(seed=0):
    return np.random.default_rng(seed)


@pytest.mark.parametrize("seed", GRADIENT_SEEDS)
def test_elementwise_gradients(seed):
    rng = _rng(seed)
    a = rng.uniform(0.5, 2.0, (3, 4))
    b = rng.uniform(0.5, 2.0, (4,))
    assert gradient_check(lambda x, y: x * y + x / y - y, [a, b]) < TOL
    assert gradient_check(lambda x: exp(x) + log(x) + tanh(x) + sigmoid(x), [a]) < TOL
    assert gradient_check(lambda x: softplus(x - 1.0) ** 1.5, [a]) < TOL


@pytest.mark.parametrize("seed", GRADIENT_SEEDS)
def test_matmul_and_reduction_gradients(seed):
    rng = _rng(seed)
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((4, 5))
    assert gradient_check(lambda x, y: matmul(x, y).sum(axis=1), [a, b]) < TOL
    assert gradient_check(lambda x: x.mean(axis=(0, 2), keepdims=True), [a]) < TOL
    # Entries at least 0.5 apart.
    spread = rng.permutation(24).reshape(2, 3, 4) + rng.uniform(0.0, 0.5, (2, 3, 4))
    assert gradient_check(lambda x: max_(x, axis=2), [spread]) < TOL


@pytest.mark.parametrize("seed", GRADIENT_SEEDS)
def test_structural_gradients(seed):
    rng = _rng(seed)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    assert gradient_check(lambda x, y: concat([x, y], axis=1)[:, 2:6], [a, b]) < TOL
    assert gradient_check(lambda x, y: stack([x, y]).transpose(2, 0, 1), [a, b]) < TOL
    assert gradient_check(lambda x: x[np.array([0, 2, 0]), 1:3], [a]) < TOL


@pytest.mark.parametrize("seed", GRADIENT_SEEDS)
@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_gradient(stride, seed):
    rng = _rng(seed)
    x = rng.standard_normal((1, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    assert gradient_check(lambda a, b: conv2d(a, b, stride=stride, padding=1), [x, w]) < TOL


def test_conv2d_matches_direct_sum():
    rng = _rng(4)
    x = rng.standard_normal((1, 1, 4, 4))
    w = rng.standard_normal((1, 1, 3, 3))
    out = conv2d(Tensor(x), Tensor(w)).data
    expected = sum(w[0, 0, i, j] * x[0, 0, i : i + 2, j : j + 2] for i in range(3) for j in range(3))
    np.testing.assert_allclose(out[0, 0], expected, atol=1e-12)


@pytest.mark.parametrize("seed", GRADIENT_SEEDS)
def test_upsample_gradient(seed):
    x = _rng(seed).standard_normal((1, 2, 2, 3))
    assert gradient_check(upsample2x, [x]) < TOL


@pytest.mark.parametrize("seed", GRADIENT_SEEDS)
def test_bilinear_sample_gradient(seed):
    rng = _rng(seed)
    fmap = rng.standard_normal((5, 6, 2))
    base = np.stack([rng.integers(0, 5, 7), rng.integers(0, 4, 7)], axis=1)
    coords = base + rng.uniform(0.2, 0.8, (7, 2))
    assert gradient_check(lambda f, c: bilinear_sample(f, c)[0], [fmap, coords]) < TOL


def test_bilinear_sample_out_of_bounds():
    fmap = Tensor(np.ones((4, 4, 1)), requires_grad=True)
    coords = Tensor(np.array([[1.5, 1.5], [-0.5, 1.0], [1.0, 3.5]]), requires_grad=True)
    with Tape() as tape:
        out, valid = bilinear_sample(fmap, coords)
        total = out.sum()
    np.testing.assert_array_equal(valid, [True, False, False])
    np.testing.assert_array_equal(out.data[:, 0], [1.0, 0.0, 0.0])
    g_map, g_coords = backward(tape, total, inputs=[fmap, coords])
    assert np.all(g_coords[1:] == 0.0)
    assert g_map.sum() == pytest.approx(1.0)


def test_bilinear_sample_exact_on_integer_coordinates():
    fmap = _rng(7).standard_normal((4, 5, 3))
    out, valid = bilinear_sample(Tensor(fmap), Tensor(np.array([[2.0, 1.0], [4.0, 3.0]])))
    assert valid.all()
    np.testing.assert_array_equal(out.data, fmap[[1, 3], [2, 4]])


def test_bilinear_sample_rejects_nan():
    with pytest.raises(NonFiniteError):
        bilinear_sample(Tensor(np.ones((3, 3, 1))), Tensor(np.array([[0.0, np.nan]])))


@pytest.mark.parametrize("seed", GRADIENT_SEEDS)
def test_gru_cell_gradient(seed):
    rng = _rng(seed)
    h = rng.standard_normal((2, 3))
    x = rng.standard_normal((2, 4))
    shapes = {"w": (4, 3), "u": (3, 3), "b": (3,)}
    weights = [rng.standard_normal(shapes[k[0]]) * 0.5 for k in GRU_KEYS]

    def fn(hidden, inputs, *ws):
        return gru_cell(hidden, inputs, dict(zip(GRU_KEYS, ws)))

    assert gradient_check(fn, [h, x, *weights]) < TOL


def test_gru_cell_shape_error():
    rng = _rng(9)
    params = {k: Tensor(rng.standard_normal((3, 3) if k[0] != "b" else (3,))) for k in GRU_KEYS}
    with pytest.raises(ShapeError):
        gru_cell(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), params)


def test_clip_passes_inside_values_exactly():
    x = Tensor(np.array([-2.0, 0.25, 0.5, 3.0]), requires_grad=True)
    out, (g,) = gradient(lambda t: clip(t, 0.0, 1.0).sum(), [x])
    np.testing.assert_array_equal(g, [0.0, 1.0, 1.0, 0.0])
    assert out.item() == 1.75


def test_no_recording_without_tape_or_grad():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3))
    a * 2.0
    with Tape() as tape:
        b * 2.0 + b
        assert len(tape) == 0
        a * b
    assert tape.ops() == ["mul"]


def test_backward_before_forward_finished():
    a = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        out = (a * a).sum()
        with pytest.raises(TapeStateError):
            backward(tape, out)


def test_tape_is_single_use():
    tape = Tape()
    with tape:
        pass
    with pytest.raises(TapeStateError):
        with tape:
            pass


def test_forward_eval_unbound_input():
    with pytest.raises(TapeStateError):
        forward_eval(lambda x: x, [None])


def test_broadcast_mismatch():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_unused_input_gets_zero_gradient():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    _, grads = gradient(lambda x, y: (x * 3.0).sum(), [a, b])
    np.testing.assert_array_equal(grads[0], [3.0, 3.0])
    np.testing.assert_array_equal(grads[1], np.zeros(3))


def test_backward_is_repeatable_and_seeded():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        out = a * a
    (g1,) = backward(tape, out, seed=np.array([1.0, 0.5]), inputs=[a])
    (g2,) = backward(tape, out, seed=np.array([1.0, 0.5]), inputs=[a])
    np.testing.assert_array_equal(g1, [2.0, 2.0])
    np.testing.assert_array_equal(g1, g2)
    with pytest.raises(ShapeError):
        backward(tape, out)


def test_ndarray_on_left_dispatches_to_tensor():
    out = np.ones(3) - Tensor(np.array([1.0, 2.0, 3.0]))
    assert isinstance(out, Tensor)
    np.testing.assert_array_equal(out.data, [0.0, -1.0, -2.0])


def test_default_dtype_context():
    before = get_default_dtype()
    with default_dtype("float32"):
        assert Tensor([1.0]).dtype == np.float32
    assert get_default_dtype() is before

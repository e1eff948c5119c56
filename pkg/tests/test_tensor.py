import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from symcorr import tensor as T

from helpers import numeric_grad, rel_error


def test_add_relu_examples():
    np.testing.assert_array_equal(T.forward_op("add", [[1, 2], [3, 4]]).data, [4, 6])
    np.testing.assert_array_equal(T.forward_op("relu", [[-1, 0, 2]]).data, [0, 0, 2])


def test_identity_conv_kernel():
    rng = np.random.default_rng(0)
    img = rng.random((2, 7, 5, 3))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0] = np.eye(3)
    np.testing.assert_array_equal(T.conv2d(img, w).data, img)
    # 3x3 kernel with only a centre tap behaves the same
    w3 = np.zeros((3, 3, 3, 3))
    w3[1, 1] = np.eye(3)
    np.testing.assert_allclose(T.conv2d(img, w3).data, img, atol=0)


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 5, 6, 2))
    w = rng.standard_normal((3, 3, 2, 4))
    b = rng.standard_normal(4)
    out = T.conv2d(x, w, b).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 5, 6, 4))
    for r in range(5):
        for c in range(6):
            patch = xp[0, r:r + 3, c:c + 3, :]
            ref[0, r, c] = np.einsum("ijc,ijcd->d", patch, w) + b
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_shape_errors_name_op():
    with pytest.raises(T.ShapeError, match="add"):
        T.add(np.ones(3), np.ones(4))
    with pytest.raises(T.ShapeError, match="matmul"):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(T.ShapeError, match="conv2d"):
        T.conv2d(np.ones((1, 4, 4, 2)), np.ones((3, 3, 3, 1)))
    with pytest.raises(T.ShapeError, match="reshape"):
        T.reshape(np.ones(6), (4, 2))


def test_backward_linear_and_quadratic():
    x = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.sum(x).backward()
    np.testing.assert_array_equal(x.grad, [1, 1, 1])

    y = T.Tensor([1.0, 2.0], requires_grad=True)
    T.sum(y * y).backward()
    np.testing.assert_array_equal(y.grad, [2, 4])


def test_backward_errors():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(T.ShapeError):
        T.backward(x * 2.0)
    loss = T.sum(x * x)
    loss.backward()
    with pytest.raises(T.GraphError):
        loss.backward()
    with pytest.raises(T.GraphError):
        T.sum(T.Tensor(np.ones(3))).backward()


def test_grad_accumulates_over_shared_inputs():
    x = T.Tensor([3.0], requires_grad=True)
    T.sum(x * x + x).backward()
    np.testing.assert_allclose(x.grad, [7.0])


def _check_op(build, shapes, rng, positive=False, tol=1e-4):
    arrays = [rng.uniform(0.5, 2.0, s) if positive else rng.standard_normal(s) for s in shapes]
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = build(*leaves)
    probe = T.Tensor(rng.standard_normal(out.shape))
    loss = T.sum(T.mul(out, probe))
    loss.backward()
    num = numeric_grad(lambda: float(np.sum(build(*[T.Tensor(a) for a in arrays]).data * probe.data)), arrays)
    for leaf, n in zip(leaves, num):
        assert rel_error(leaf.grad, n).max() < tol


OP_CASES = {
    "add": (lambda a, b: T.add(a, b), [(3, 4), (1, 4)], False),
    "sub": (lambda a, b: T.sub(a, b), [(2, 3, 4), (3, 1)], False),
    "mul": (lambda a, b: T.mul(a, b), [(3, 4), (3, 4)], False),
    "neg": (lambda a: T.neg(a), [(5,)], False),
    "scale": (lambda a: T.scale(a, -2.5), [(2, 3)], False),
    "shift": (lambda a: T.shift(a, 0.7), [(2, 3)], False),
    "relu": (lambda a: T.relu(a), [(4, 5)], False),
    "log": (lambda a: T.log(a), [(6,)], True),
    "sqrt": (lambda a: T.sqrt(a), [(6,)], True),
    "matmul": (lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)], False),
    "conv2d": (lambda x, w, b: T.conv2d(x, w, b), [(2, 5, 4, 3), (3, 3, 3, 2), (2,)], False),
    "reshape": (lambda a: T.reshape(a, (6, 2)), [(3, 4)], False),
    "transpose": (lambda a: T.transpose(a, (2, 0, 1)), [(2, 3, 4)], False),
    "index": (lambda a: T.index(a, (np.array([0, 2, 2]), np.array([1, 0, 1]))), [(3, 2, 2)], False),
    "sum": (lambda a: T.sum(a, axis=1), [(3, 4)], False),
    "sq_norm": (lambda a: T.sq_norm(a, axis=-1), [(4, 5, 3)], False),
    "softmax": (lambda a: T.softmax(a, axis=-1), [(3, 7)], False),
    "log_softmax": (lambda a: T.log_softmax(a, axis=-1), [(3, 7)], False),
}


@pytest.mark.parametrize("kind", sorted(T.OPS))
def test_gradcheck_every_op(kind):
    build, shapes, positive = OP_CASES[kind]
    rng = np.random.default_rng(zlib.crc32(kind.encode()))
    _check_op(build, shapes, rng, positive)


def test_every_op_kind_is_covered():
    assert set(OP_CASES) == set(T.OPS)


def test_forward_op_unknown_kind():
    with pytest.raises(ValueError, match="unknown op"):
        T.forward_op("bogus", [1.0])


def test_two_layer_conv_net_gradcheck():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 6, 6, 2))
    w1 = rng.standard_normal((3, 3, 2, 4)) * 0.5
    b1 = rng.standard_normal(4) * 0.1
    w2 = rng.standard_normal((3, 3, 4, 3)) * 0.5
    params = [w1, b1, w2]

    def loss_of(ps, track=False):
        tw1, tb1, tw2 = [T.Tensor(p, requires_grad=track) for p in ps]
        h = T.relu(T.conv2d(T.Tensor(x), tw1, tb1))
        out = T.conv2d(h, tw2)
        return T.sum(T.sq_norm(out)), (tw1, tb1, tw2)

    loss, leaves = loss_of(params, track=True)
    loss.backward()
    num = numeric_grad(lambda: loss_of(params)[0].item(), params)
    for leaf, n in zip(leaves, num):
        assert rel_error(leaf.grad, n).max() < 1e-4


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 30)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_normalized(x):
    p = T.softmax(x).data
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)
    assert np.all(np.isfinite(T.log_softmax(x).data))


def test_forward_deterministic():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 8, 8, 3))
    w = rng.standard_normal((3, 3, 3, 4))
    a = T.conv2d(x, w).data
    b = T.conv2d(x, w).data
    assert a.tobytes() == b.tobytes()


# ------------------------------------------------------------- optimizer


def test_adam_minimizes_quadratic():
    x = T.Tensor([0.0], requires_grad=True)
    opt = T.Adam([x], lr=0.05)
    losses = []
    for _ in range(500):
        opt.zero_grad()
        loss = T.sum((x - 3.0) * (x - 3.0))
        losses.append(loss.item())
        loss.backward()
        opt.step()
    assert abs(x.data[0] - 3.0) < 1e-2
    assert opt.step_count == 500
    # monotone after warmup while still far from the optimum
    assert all(b <= a for a, b in zip(losses[5:40], losses[6:41]))


def test_adam_zero_grad_and_zero_lr_leave_params():
    x = T.Tensor([1.0, -2.0], requires_grad=True)
    opt = T.Adam([x], lr=0.1)
    x.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(x.data, [1.0, -2.0])

    y = T.Tensor([1.0, -2.0], requires_grad=True)
    opt = T.Adam([y], lr=0.0)
    y.grad = np.array([0.3, -4.0])
    opt.step()
    np.testing.assert_array_equal(y.data, [1.0, -2.0])
    assert opt.m[0].shape == y.shape and opt.v[0].shape == y.shape


def test_adam_missing_grad():
    opt = T.Adam([T.Tensor([1.0], requires_grad=True)])
    with pytest.raises(T.GraphError):
        opt.step()


# ------------------------------------------------------------- checkpoint


def test_checkpoint_roundtrip_and_layout(tmp_path):
    rng = np.random.default_rng(0)
    params = {"conv0.weight": rng.standard_normal((3, 3, 3, 4)), "conv0.bias": rng.standard_normal(4)}
    path = tmp_path / "m.sckp"
    T.save_checkpoint(path, params, {"hello": [1, 2]})
    raw = path.read_bytes()
    assert raw[:4] == b"SCKP"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 2
    loaded, meta = T.load_checkpoint(path)
    assert meta == {"hello": [1, 2]}
    for k in params:
        assert loaded[k].tobytes() == params[k].tobytes()


def test_checkpoint_rejects_bad_magic_and_version(tmp_path):
    path = tmp_path / "m.sckp"
    T.save_checkpoint(path, {"a": np.ones(2)})
    raw = bytearray(path.read_bytes())
    bad = tmp_path / "bad.sckp"
    bad.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(T.CheckpointError, match="magic"):
        T.load_checkpoint(bad)
    raw[4:8] = (99).to_bytes(4, "little")
    bad.write_bytes(bytes(raw))
    with pytest.raises(T.CheckpointError, match="version"):
        T.load_checkpoint(bad)

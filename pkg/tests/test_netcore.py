import numpy
import pytest

from flowalign import ConfigurationError, InputError, NumericError, ShapeError, VersionError
from flowalign.netcore import (AdamState, Net, NetSpec, adam_step, dump_checkpoint, finite_diff_check,
                               fit, load_checkpoint, minibatches, net_forward, net_grads, net_init,
                               parse_checkpoint, save_checkpoint)


def test_param_count():
    net = net_init(NetSpec([2, 4, 1], seed=0))
    assert net.param_count == 17


def test_init_deterministic():
    a = net_init(NetSpec([3, 5, 2], "silu", seed=7))
    b = net_init(NetSpec([3, 5, 2], "silu", seed=7))
    assert numpy.array_equal(a.params, b.params)
    assert not numpy.array_equal(a.params, net_init(NetSpec([3, 5, 2], "silu", seed=8)).params)


def test_init_biases_zero():
    net = net_init(NetSpec([3, 5, 2], seed=1))
    for W, b in net.layers():
        assert (b == 0).all()
        assert numpy.abs(W).max() <= numpy.sqrt(6/sum(W.shape))


@pytest.mark.parametrize("widths", [[3], [2, 0, 1], []])
def test_bad_widths(widths):
    with pytest.raises(ConfigurationError):
        NetSpec(widths)


def test_bad_activation():
    with pytest.raises(ConfigurationError):
        NetSpec([1, 1], "sigmoid")


def test_zero_net_gives_zero():
    spec = NetSpec([3, 4, 2])
    net = Net(spec, numpy.zeros(spec.param_count))
    assert (net_forward(net, [1.0, -2.0, 3.0]) == 0).all()


def test_identity_layer():
    spec = NetSpec([2, 2])
    net = Net(spec, [1, 0, 0, 1, 0, 0])
    x = numpy.array([0.3, -1.7])
    assert net_forward(net, x) == pytest.approx(x)


def test_hand_computed_tanh():
    # 1-2-1: h = tanh(x*[1, -2] + [0.5, 0]), y = h @ [3, 1] + 0.25
    net = Net(NetSpec([1, 2, 1], "tanh"), [1, -2, 0.5, 0, 3, 1, 0.25])
    x = 0.4
    expected = 3*numpy.tanh(x + 0.5) + numpy.tanh(-2*x) + 0.25
    assert net_forward(net, [x])[0] == pytest.approx(expected, rel=1e-14)


def test_batch_matches_rows():
    net = net_init(NetSpec([3, 6, 2], "silu", seed=3))
    x = numpy.random.default_rng(0).standard_normal((5, 3))
    batch = net_forward(net, x)
    for row, out in zip(x, batch):
        assert net_forward(net, row) == pytest.approx(out)


def test_shape_mismatch():
    net = net_init(NetSpec([3, 2]))
    with pytest.raises(ShapeError):
        net_forward(net, [1.0, 2.0])
    with pytest.raises(ShapeError):
        net_grads(net, [1.0, 2.0, 3.0], [1.0])


def test_forward_does_not_mutate():
    net = net_init(NetSpec([2, 3, 1], seed=2))
    before = net.params.copy()
    net_forward(net, [1.0, 1.0])
    net_grads(net, [1.0, 1.0], [1.0])
    assert numpy.array_equal(before, net.params)
    with pytest.raises(ValueError):
        net.params[0] = 1.0


def test_linear_adjoint():
    W = numpy.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    net = Net(NetSpec([2, 3]), numpy.concatenate([W.ravel(), numpy.zeros(3)]))
    upstream = numpy.array([1.0, -1.0, 0.5])
    _, input_grad = net_grads(net, [0.2, 0.1], upstream)
    assert input_grad == pytest.approx(W @ upstream)


def test_zero_upstream():
    net = net_init(NetSpec([2, 4, 2], seed=5))
    param_grad, input_grad = net_grads(net, [0.5, -0.5], [0.0, 0.0])
    assert (param_grad == 0).all()
    assert (input_grad == 0).all()


@pytest.mark.parametrize("activation", ["tanh", "relu", "silu"])
def test_grads_finite_differences(activation):
    rng = numpy.random.default_rng(11)
    net = net_init(NetSpec([2, 8, 1], activation, seed=4))
    x = rng.standard_normal(2)
    upstream = numpy.array([1.3])

    def f_params(p):
        return (net.with_params(p)(x) @ upstream, net_grads(net.with_params(p), x, upstream)[0])

    def f_input(z):
        return net(z) @ upstream, net_grads(net, z, upstream)[1]

    assert finite_diff_check(f_params, net.params, h=1e-5) < 1e-4
    assert finite_diff_check(f_input, x, h=1e-5) < 1e-4


def test_batch_grads_are_summed():
    rng = numpy.random.default_rng(1)
    net = net_init(NetSpec([3, 4, 2], seed=9))
    x = rng.standard_normal((4, 3))
    g = rng.standard_normal((4, 2))
    total, input_grad = net_grads(net, x, g)
    rows = sum(net_grads(net, xi, gi)[0] for xi, gi in zip(x, g))
    assert total == pytest.approx(rows)
    assert input_grad.shape == x.shape


def test_finite_diff_quadratic():
    A = numpy.array([[2.0, 0.5], [0.5, 1.0]])
    err = finite_diff_check(lambda x: (x @ A @ x, 2*A @ x), [0.3, -0.8])
    assert err < 1e-8


def test_finite_diff_constant():
    assert finite_diff_check(lambda x: (4.0, numpy.zeros_like(x)), [1.0, 2.0]) == 0.0


def test_finite_diff_errors():
    with pytest.raises(ConfigurationError):
        finite_diff_check(lambda x: (0.0, x), [1.0], h=0)
    with pytest.raises(NumericError):
        finite_diff_check(lambda x: (numpy.nan, x), [1.0])


def test_adam_zero_grad():
    net = net_init(NetSpec([2, 2], seed=0))
    state = AdamState.for_params(net.param_count, lr=0.1)
    newstate, newnet = adam_step(state, net, numpy.zeros(net.param_count))
    assert numpy.array_equal(newnet.params, net.params)
    assert newstate.step == 1


def test_adam_first_step():
    net = Net(NetSpec([1, 1]), [0.5, 0.0])
    state = AdamState.for_params(2, lr=0.1)
    _, newnet = adam_step(state, net, [1.0, 0.0])
    # bias correction makes the first step lr*g/(|g| + eps)
    assert newnet.params[0] == pytest.approx(0.4, abs=1e-6)
    assert newnet.params[1] == 0.0


def test_adam_is_stateful():
    net = Net(NetSpec([1, 1]), [0.5, 0.0])
    state = AdamState.for_params(2, lr=0.1)
    state, first = adam_step(state, net, [1.0, 0.5])
    state, second = adam_step(state, first, [-1.0, 0.5])
    assert state.step == 2
    # momentum from the first step damps the reversed gradient
    assert 0 < second.params[0] - first.params[0] < 0.1
    fresh, _ = adam_step(AdamState.for_params(2, lr=0.2), net, [1.0, 0.5])
    assert not numpy.allclose(state.m, fresh.m)


def test_adam_rejects_bad_gradients():
    net = Net(NetSpec([1, 1]), [0.5, 0.0])
    state = AdamState.for_params(2)
    with pytest.raises(NumericError, match="index 1"):
        adam_step(state, net, [0.0, numpy.inf])
    with pytest.raises(ShapeError):
        adam_step(state, net, [0.0])
    with pytest.raises(ConfigurationError):
        AdamState.for_params(2, beta1=1.0)


def test_checkpoint_bytes_exact(tmp_path):
    nets = [net_init(NetSpec([3, 4, 2], "silu", seed=2**40)), net_init(NetSpec([2, 1], "relu", seed=1))]
    header = {"role": "test", "stats": [1.5, 2.5]}
    path = save_checkpoint(tmp_path/"model.faln", nets, header)
    loaded, loaded_header = load_checkpoint(path)
    assert loaded_header == header
    for a, b in zip(nets, loaded):
        assert a.spec == b.spec
        assert numpy.array_equal(a.params, b.params)
    assert dump_checkpoint(loaded, loaded_header) == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    data = dump_checkpoint([net_init(NetSpec([2, 1]))])
    with pytest.raises(InputError, match="not a flowalign checkpoint"):
        parse_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(InputError, match="truncated"):
        parse_checkpoint(data[:-3])
    with pytest.raises(InputError, match="trailing"):
        parse_checkpoint(data + b"\0")
    with pytest.raises(VersionError):
        parse_checkpoint(data[:4] + b"\x63\x00" + data[6:])
    with pytest.raises(InputError):
        load_checkpoint(tmp_path/"missing.faln")


def test_minibatches_cover_each_epoch():
    rng = numpy.random.default_rng(0)
    batches = list(minibatches(10, 4, 2, rng))
    assert [len(b) for b in batches] == [4, 4, 2, 4, 4, 2]
    assert sorted(numpy.concatenate(batches[:3])) == list(range(10))
    with pytest.raises(InputError):
        list(minibatches(0, 4, 1, rng))


def test_fit_reduces_quadratic():
    # fit a single linear layer to y = 2x - 1
    net = Net(NetSpec([1, 1]), [0.0, 0.0])
    x = numpy.linspace(-1, 1, 20)[:, None]
    y = 2*x - 1

    def loss_and_grad(model, batch):
        residual = model(batch[0]) - batch[1]
        grad, _ = net_grads(model, batch[0], 2*residual/len(residual))
        return float(numpy.mean(residual**2)), grad

    model, curve = fit(net, loss_and_grad, [(x, y)]*500, lr=0.05, log_every=0)
    assert list(curve.columns) == ["step", "loss", "grad_norm"]
    assert len(curve) == 500
    assert curve["loss"].iloc[-1] < 1e-2*curve["loss"].iloc[0]
    assert model.params == pytest.approx([2.0, -1.0], abs=0.1)

"""Small feed-forward networks with exact reverse-mode gradients

A network is an immutable value: a :class:`NetSpec` plus one flat float64
parameter vector. The flat layout is layer-major, weights then bias. The
weight block of layer ``k`` is stored row-major with shape
``(fan_in, fan_out)`` so that a layer computes ``h @ W + b``. Hidden layers
apply the activation, the output layer is linear.

Everything here accepts a single input vector or a batch with a leading axis.
"""

import dataclasses
import json
import logging
import pathlib
import struct

import numpy
import pandas

from . import ConfigurationError, InputError, NumericError, ShapeError, VersionError
from .io import atomic_write_bytes, canonical_json

logger = logging.getLogger(__name__)

ACTIVATIONS = ("tanh", "relu", "silu")

MAGIC = b"FALN"
FORMAT_VERSION = 1


def _sigmoid(z):
    return 0.5*(1 + numpy.tanh(0.5*z))


def _activate(name, z):
    if name == "tanh":
        return numpy.tanh(z)
    elif name == "relu":
        return numpy.maximum(z, 0)
    else:
        return z*_sigmoid(z)


def _activate_grad(name, z, a):
    """Derivative of the activation given pre-activation z and output a"""
    if name == "tanh":
        return 1 - a**2
    elif name == "relu":
        return (z > 0).astype(float)
    else:
        s = _sigmoid(z)
        return s*(1 + z*(1 - s))


@dataclasses.dataclass(frozen=True)
class NetSpec:
    layer_widths: tuple
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ConfigurationError(f"A network needs at least 2 layer widths, got {list(widths)}")
        if any(w < 1 for w in widths):
            raise ConfigurationError(f"All layer widths must be positive, got {list(widths)}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"Unknown activation '{self.activation}', "
                                     f"expected one of {ACTIVATIONS}")
        if int(self.seed) < 0:
            raise ConfigurationError("seed must be unsigned")

    @property
    def n_inputs(self):
        return self.layer_widths[0]

    @property
    def n_outputs(self):
        return self.layer_widths[-1]

    @property
    def param_count(self):
        w = self.layer_widths
        return sum(fan_in*fan_out + fan_out for fan_in, fan_out in zip(w[:-1], w[1:]))


class Net:
    """A network value: spec plus flat parameters"""

    def __init__(self, spec, params):
        params = numpy.array(params, dtype=numpy.float64)
        if params.shape != (spec.param_count,):
            raise ShapeError(f"{spec.param_count} parameters expected, got shape {params.shape}")
        if not numpy.isfinite(params).all():
            raise NumericError(f"non-finite parameter at index {int(numpy.flatnonzero(~numpy.isfinite(params))[0])}")
        params.flags.writeable = False
        self.spec = spec
        self.params = params

    @property
    def param_count(self):
        return self.params.size

    def with_params(self, params):
        return Net(self.spec, params)

    def layers(self):
        """List of (W, b) views into the flat parameter vector"""
        result = []
        offset = 0
        w = self.spec.layer_widths
        for fan_in, fan_out in zip(w[:-1], w[1:]):
            W = self.params[offset:offset + fan_in*fan_out].reshape(fan_in, fan_out)
            offset += fan_in*fan_out
            b = self.params[offset:offset + fan_out]
            offset += fan_out
            result.append((W, b))
        return result

    def __call__(self, x):
        return net_forward(self, x)

    def __repr__(self):
        widths = "-".join(str(w) for w in self.spec.layer_widths)
        return f"Net({widths}, {self.spec.activation}, seed={self.spec.seed})"


def net_init(spec):
    """Initialise a network

    Weights are uniform in ±sqrt(6/(fan_in + fan_out)), biases are zero.
    The draw is a pure function of ``spec.seed``.
    """
    rng = numpy.random.default_rng(spec.seed)
    chunks = []
    w = spec.layer_widths
    for fan_in, fan_out in zip(w[:-1], w[1:]):
        limit = numpy.sqrt(6/(fan_in + fan_out))
        chunks.append(rng.uniform(-limit, limit, size=fan_in*fan_out))
        chunks.append(numpy.zeros(fan_out))
    return Net(spec, numpy.concatenate(chunks))


def _as_batch(net, x, width, what="input"):
    x = numpy.asarray(x, dtype=numpy.float64)
    single = x.ndim == 1
    x2 = numpy.atleast_2d(x)
    if x2.ndim != 2 or x2.shape[1] != width:
        raise ShapeError(f"{net!r}: {what} of width {width} expected, got shape {x.shape}")
    return x2, single


def _forward_cache(net, x):
    pre = []
    post = [x]
    h = x
    layers = net.layers()
    for k, (W, b) in enumerate(layers):
        z = h @ W + b
        if k < len(layers) - 1:
            h = _activate(net.spec.activation, z)
        else:
            h = z
        pre.append(z)
        post.append(h)
    return pre, post


def net_forward(net, x):
    """Evaluate the network on a vector or a batch of row vectors"""
    x2, single = _as_batch(net, x, net.spec.n_inputs)
    out = _forward_cache(net, x2)[1][-1]
    return out[0] if single else out


def net_grads(net, x, upstream):
    """Reverse-mode gradients of ``sum(upstream * net(x))``

    :param net: the network
    :param x: input vector or batch
    :param upstream: cotangent with the shape of the output
    :return param_grad: flat gradient with the parameter layout, summed over the batch
    :return input_grad: gradient with respect to x, same shape as x
    """
    x2, single = _as_batch(net, x, net.spec.n_inputs)
    g, _ = _as_batch(net, upstream, net.spec.n_outputs, what="upstream")
    if g.shape[0] != x2.shape[0]:
        raise ShapeError(f"batch of {x2.shape[0]} inputs but {g.shape[0]} upstream rows")

    pre, post = _forward_cache(net, x2)
    layers = net.layers()
    grads = []
    for k in reversed(range(len(layers))):
        W, _ = layers[k]
        if k < len(layers) - 1:
            g = g*_activate_grad(net.spec.activation, pre[k], post[k + 1])
        grads.append((post[k].T @ g).ravel())
        grads.append(g.sum(axis=0))
        g = g @ W.T
    # grads were collected output-first as (dW, db) pairs
    ordered = []
    for dW, db in zip(grads[-2::-2], grads[-1::-2]):
        ordered.extend([dW, db])
    param_grad = numpy.concatenate(ordered)
    input_grad = g[0] if single else g
    return param_grad, input_grad


@dataclasses.dataclass(frozen=True)
class AdamState:
    m: numpy.ndarray
    v: numpy.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigurationError("Adam betas must lie in (0, 1)")
        if self.step < 0:
            raise ConfigurationError("Adam step count must be non-negative")

    @classmethod
    def for_params(cls, n, **kwargs):
        return cls(numpy.zeros(n), numpy.zeros(n), **kwargs)


def adam_step(state, model, grad):
    """One Adam update with bias correction

    `model` is anything with a flat ``params`` vector and ``with_params``.
    Returns the new state and the updated model; neither input is modified.
    """
    grad = numpy.asarray(grad, dtype=numpy.float64)
    if grad.shape != model.params.shape:
        raise ShapeError(f"gradient of shape {grad.shape} for {model.params.size} parameters")
    if state.m.shape != grad.shape:
        raise ShapeError(f"optimiser state sized for {state.m.size} parameters, got {grad.size}")
    bad = ~numpy.isfinite(grad)
    if bad.any():
        raise NumericError(f"non-finite gradient at index {int(numpy.flatnonzero(bad)[0])}")

    step = state.step + 1
    m = state.beta1*state.m + (1 - state.beta1)*grad
    v = state.beta2*state.v + (1 - state.beta2)*grad**2
    mhat = m/(1 - state.beta1**step)
    vhat = v/(1 - state.beta2**step)
    params = model.params - state.lr*mhat/(numpy.sqrt(vhat) + state.eps)
    newstate = dataclasses.replace(state, m=m, v=v, step=step)
    return newstate, model.with_params(params)


def finite_diff_check(f, x, h=1e-5, floor=1e-6):
    """Worst relative error between an analytic gradient and central differences

    :param f: callable returning ``(value, gradient)`` for a vector x
    :param x: point of evaluation
    :param h: difference step
    :param floor: magnitude below which errors are measured absolutely
    :return: max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, floor)
    """
    if h <= 0:
        raise ConfigurationError("finite difference step must be positive")
    x = numpy.array(x, dtype=numpy.float64)
    value, analytic = f(x)
    if not numpy.isfinite(value):
        raise NumericError(f"function value {value} is not finite")
    analytic = numpy.asarray(analytic, dtype=numpy.float64).ravel()

    numeric = numpy.empty(x.size)
    flat = x.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fplus = f(flat.reshape(x.shape))[0]
        flat[i] = old - h
        fminus = f(flat.reshape(x.shape))[0]
        flat[i] = old
        if not (numpy.isfinite(fplus) and numpy.isfinite(fminus)):
            raise NumericError(f"function is not finite near coordinate {i}")
        numeric[i] = (fplus - fminus)/(2*h)

    scale = numpy.maximum(numpy.maximum(abs(analytic), abs(numeric)), floor)
    return float(numpy.max(abs(analytic - numeric)/scale, initial=0.0))


# Checkpoints

def _pack_net(net):
    spec = net.spec
    parts = [struct.pack("<H", len(spec.layer_widths)),
             struct.pack(f"<{len(spec.layer_widths)}I", *spec.layer_widths),
             struct.pack("<BQQ", ACTIVATIONS.index(spec.activation), spec.seed, net.param_count),
             net.params.astype("<f8").tobytes()]
    return b"".join(parts)


def dump_checkpoint(nets, header=None):
    """Serialise nets and a JSON header into the FALN byte format"""
    header_bytes = canonical_json(header or {}).encode("utf-8")
    parts = [MAGIC,
             struct.pack("<HI", FORMAT_VERSION, len(header_bytes)),
             header_bytes,
             struct.pack("<H", len(nets))]
    parts.extend(_pack_net(net) for net in nets)
    return b"".join(parts)


def parse_checkpoint(data, source="<bytes>"):
    """Inverse of :func:`dump_checkpoint`, returns ``(nets, header)``"""
    view = memoryview(data)
    offset = 0

    def take(n):
        nonlocal offset
        if offset + n > len(view):
            raise InputError(f"{source}: truncated checkpoint")
        chunk = view[offset:offset + n]
        offset += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise InputError(f"{source}: not a flowalign checkpoint")
    version, header_len = struct.unpack("<HI", take(6))
    if version > FORMAT_VERSION:
        raise VersionError(f"{source}: checkpoint format {version} is newer than "
                           f"supported format {FORMAT_VERSION}")
    header = json.loads(bytes(take(header_len)).decode("utf-8"))
    (count,) = struct.unpack("<H", take(2))
    nets = []
    for _ in range(count):
        (nwidths,) = struct.unpack("<H", take(2))
        widths = struct.unpack(f"<{nwidths}I", take(4*nwidths))
        act, seed, nparams = struct.unpack("<BQQ", take(17))
        if act >= len(ACTIVATIONS):
            raise InputError(f"{source}: unknown activation id {act}")
        spec = NetSpec(widths, ACTIVATIONS[act], seed)
        params = numpy.frombuffer(bytes(take(8*nparams)), dtype="<f8").astype(numpy.float64)
        nets.append(Net(spec, params))
    if offset != len(view):
        raise InputError(f"{source}: {len(view) - offset} trailing bytes in checkpoint")
    return nets, header


def save_checkpoint(path, nets, header=None):
    path = atomic_write_bytes(path, dump_checkpoint(nets, header))
    logger.info("wrote checkpoint %s", path)
    return path


def load_checkpoint(path):
    path = pathlib.Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise InputError(f"cannot read checkpoint '{path}': {e.strerror}") from e
    return parse_checkpoint(data, source=str(path))


def flat_params(nets):
    return numpy.concatenate([net.params for net in nets])


def split_params(nets, params):
    """Rebuild nets from one flat vector laid out as :func:`flat_params`"""
    params = numpy.asarray(params, dtype=numpy.float64)
    total = sum(net.param_count for net in nets)
    if params.shape != (total,):
        raise ShapeError(f"{total} parameters expected, got shape {params.shape}")
    result = []
    offset = 0
    for net in nets:
        result.append(net.with_params(params[offset:offset + net.param_count]))
        offset += net.param_count
    return result


# Training loop

def minibatches(n, batch_size, epochs, rng):
    """Index arrays covering ``range(n)`` once per epoch in shuffled order"""
    if n < 1:
        raise InputError("cannot iterate over an empty dataset")
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]


def fit(model, loss_and_grad, batches, lr=1e-3, log_every=100, desc="training", progress=False):
    """Adam over a stream of batches

    :param model: anything :func:`adam_step` accepts
    :param loss_and_grad: callable ``(model, batch) -> (loss, grad)``
    :param batches: iterable of batches, consumed once
    :param lr: learning rate
    :param log_every: emit an INFO line every this many steps, 0 to disable
    :param desc: label for logs and the progress bar
    :param progress: display progress bar
    :return: the trained model and a DataFrame with columns step, loss, grad_norm
    """
    state = AdamState.for_params(model.params.size, lr=lr)
    if progress:
        from tqdm.auto import tqdm
        batches = tqdm(batches, desc=desc)
    rows = []
    for step, batch in enumerate(batches):
        loss, grad = loss_and_grad(model, batch)
        state, model = adam_step(state, model, grad)
        grad_norm = float(numpy.linalg.norm(grad))
        rows.append((step, float(loss), grad_norm))
        if log_every and step % log_every == 0:
            logger.info("%s step %d loss %.5g grad_norm %.4g", desc, step, loss, grad_norm)
        logger.debug("%s step %d loss %.6g", desc, step, loss)
    return model, pandas.DataFrame(rows, columns=["step", "loss", "grad_norm"])

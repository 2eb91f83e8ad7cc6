import contextlib

import numpy as np
import pytest

from segagg import numerics as nx
from segagg.model import ModelConfig

FD_STEP = 1e-5
FD_RTOL = 1e-4


def numeric_grad(f, arrays, index, eps=FD_STEP):
    """Central differences of scalar ``f(*arrays)`` w.r.t. ``arrays[index]``."""
    x = arrays[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f(*arrays)
        x[i] = old - eps
        fm = f(*arrays)
        x[i] = old
        grad[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic, numeric):
    scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-8)
    return np.linalg.norm(analytic - numeric) / scale


def check_gradients(build, arrays, rtol=FD_RTOL):
    """Compare autodiff gradients of ``build(*tensors)`` with central differences.

    ``build`` maps tensors to a scalar Tensor and is also evaluated on plain
    arrays (wrapped without grad) for the numeric side.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [nx.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(*tensors)
    loss.backward()

    def f(*xs):
        with nx.no_grad():
            return build(*[nx.Tensor(x) for x in xs]).item()

    errors = []
    for i, t in enumerate(tensors):
        num = numeric_grad(f, arrays, i)
        errors.append(relative_error(t.grad, num))
        assert errors[-1] < rtol, f"input {i}: relative error {errors[-1]:.2e}"
    return errors


def weighted_sum(out, rng):
    """Scalar probe touching every output element with a distinct weight."""
    return (out * nx.Tensor(rng.standard_normal(out.shape))).sum()


@pytest.fixture
def tiny_config():
    # downsampling 3^(1+2) = 27
    return ModelConfig(
        input_length=81,
        first_conv_channels=2,
        block_group_specs=[(1, 2), (1, 3)],
        gru_hidden=3,
        embedding_dim=4,
        num_speakers=3,
        num_segment_output_layers=0,
    )


@contextlib.contextmanager
def record_switches():
    """Record which branch every LeakyReLU and max-pool took during a forward.

    Two evaluations with equal records lie on the same smooth piece of the
    network, so a central difference between them estimates the derivative.
    """
    record = []
    leaky, pool = nx.leaky_relu, nx.maxpool1d

    def leaky_spy(a, slope=0.3):
        record.append(a.data >= 0)
        return leaky(a, slope)

    def pool_spy(x, window):
        record.append(x.data.reshape(*x.shape[:-1], -1, window).argmax(axis=-1))
        return pool(x, window)

    nx.leaky_relu, nx.maxpool1d = leaky_spy, pool_spy
    try:
        yield record
    finally:
        nx.leaky_relu, nx.maxpool1d = leaky, pool


def same_switches(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def network_fd_check(loss_fn, params, rng, coords=6, eps=FD_STEP):
    """Central differences on a random subset of each parameter's coordinates.

    Coordinates whose +-eps stencil crosses a LeakyReLU or max-pool switch are
    skipped: the loss is not differentiable across that interval.  Returns
    ``(errors by parameter name, number skipped, number checked)``.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    errors, skipped, checked = {}, 0, 0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = rng.choice(flat.size, min(coords, flat.size), replace=False)
        ana, num = [], []
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            with nx.no_grad(), record_switches() as up:
                fp = loss_fn().item()
            flat[i] = old - eps
            with nx.no_grad(), record_switches() as down:
                fm = loss_fn().item()
            flat[i] = old
            if not same_switches(up, down):
                skipped += 1
                continue
            ana.append(p.grad.reshape(-1)[i])
            num.append((fp - fm) / (2 * eps))
        checked += len(num)
        if num:
            errors[name] = relative_error(np.array(ana), np.array(num))
    return errors, skipped, checked

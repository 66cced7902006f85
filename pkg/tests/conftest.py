import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_homography(rng, size=16, jitter=0.15):
    """Corner-jitter homography on a ``size`` grid (thermal -> RGB)."""
    from pcnet.core import image_corners
    from pcnet.geometry import solve_dlt

    c = image_corners(size, size)
    return solve_dlt(c, c + rng.uniform(-jitter, jitter, size=(4, 2)) * size)


def finite_difference_error(loss_fn, tensors, h=1e-6):
    """Relative error between autograd and central differences of ``loss_fn()``.

    ``tensors`` are double-precision leaves that ``loss_fn`` reads; every
    element of each is perturbed in turn. Returns ``max`` over tensors of
    ``|g_auto - g_fd| / max(|g_fd|, tiny)`` in the infinity norm.
    """
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    worst = 0.0
    for t in tensors:
        auto = t.grad.detach().clone()
        fd = torch.zeros_like(t)
        flat, fd_flat = t.data.view(-1), fd.view(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                fd_flat[i] = (up - down) / (2 * h)
        scale = max(fd.abs().max().item(), auto.abs().max().item(), 1e-12)
        worst = max(worst, (auto - fd).abs().max().item() / scale)
    return worst


def attention_oracle(q_in, kv_in, wq, wk, wv):
    """Token-by-token softmax attention with a query residual, in numpy."""
    q = q_in @ wq.T
    k = kv_in @ wk.T
    v = kv_in @ wv.T
    out = np.zeros_like(q)
    for i in range(len(q)):
        s = np.array([q[i] @ k[j] for j in range(len(k))]) / np.sqrt(q.shape[1])
        w = np.exp(s - s.max())
        w /= w.sum()
        out[i] = sum(w[j] * v[j] for j in range(len(k))) + q[i]
    return out


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance")
        for line in RESULTS:
            terminalreporter.write_line(line)

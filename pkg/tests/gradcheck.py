"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np

from rltta.nn_core import Network


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-6)
    return float(np.linalg.norm(a - b) / denom)


def check_network(net: Network, x, weights, h=1e-3):
    """Compare analytic gradients of ``sum(weights * net(x))`` against central
    differences. Returns a dict of relative errors keyed by parameter / 'input'."""

    def loss(inp):
        out, _ = net.forward(inp, mode="train")
        return float(np.sum(out * weights))

    out, cache = net.forward(x, mode="train")
    _, dx = net.backward(cache, weights)
    analytic = {f"{i}.{k}": net.layers[i].grads[k].copy() for i, k, _ in net.parameters()}

    errors = {}
    for i, k, p in net.parameters():
        num = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            up = loss(x)
            p[idx] = old - h
            down = loss(x)
            p[idx] = old
            num[idx] = (up - down) / (2 * h)
        errors[f"{i}.{k}"] = rel_err(analytic[f"{i}.{k}"], num)

    num_x = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        up = loss(x)
        x[idx] = old - h
        down = loss(x)
        x[idx] = old
        num_x[idx] = (up - down) / (2 * h)
    errors["input"] = rel_err(dx, num_x)
    return errors

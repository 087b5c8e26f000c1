"""Central finite differences in float64, used as the gradient oracle."""

import torch


def numeric_grad(fn, x, h=1e-6):
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = fn(x).item()
        flat[i] = old - h
        down = fn(x).item()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def analytic_grad(fn, x):
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    return x.grad.detach()


def rel_error(a, b):
    return float((a - b).norm() / max(a.norm(), b.norm(), 1e-12))

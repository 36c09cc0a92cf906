"""Central finite-difference oracle for scalar torch functions."""
import numpy as np
import torch


def numeric_gradient(fn, inputs, step=1e-5):
    grads = []
    with torch.no_grad():
        for k, x in enumerate(inputs):
            g = np.zeros(x.numel())
            flat = x.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + step
                up = float(fn(*inputs))
                flat[j] = orig - step
                down = float(fn(*inputs))
                flat[j] = orig
                g[j] = (up - down) / (2 * step)
            grads.append(g)
    return grads


def analytic_gradient(fn, inputs):
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*leaves)
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    return [np.zeros(x.numel()) if g is None else g.detach().reshape(-1).numpy() for g, x in zip(grads, leaves)]


def finite_difference_check(fn, inputs, step=1e-5) -> float:
    """Norm-wise relative error ||g_autograd - g_fd|| / max(||g_fd||, 1e-12) over all inputs."""
    inputs = [x.detach().clone().to(torch.float64) for x in inputs]
    num = np.concatenate(numeric_gradient(fn, inputs, step))
    ana = np.concatenate(analytic_gradient(fn, inputs))
    return float(np.linalg.norm(ana - num) / max(np.linalg.norm(num), 1e-12))

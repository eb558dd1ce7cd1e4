from __future__ import annotations

import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def central_difference(fn, tensors, eps=1e-5):
    """Numerical gradient of scalar ``fn()`` w.r.t. each tensor, perturbing in place."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(fn())
                flat[i] = orig - eps
                down = float(fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * eps)
            grads.append(g)
    return grads


def rel_err(a, b) -> float:
    """Norm-relative error ``|a-b| / max(|a|, |b|)``, 0 when both vanish."""
    a, b = torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(b, dtype=torch.float64)
    denom = max(a.norm().item(), b.norm().item())
    return 0.0 if denom == 0 else (a - b).norm().item() / denom


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

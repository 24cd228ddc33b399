"""Central finite-difference gradient checking used across the loss tests."""
import numpy as np
import torch


def check_gradients(fn, x: torch.Tensor, rng: np.random.Generator, n_sample: int = 10,
                    eps: float = 1e-5, rtol: float = 1e-4) -> None:
    """Compare autograd gradients of scalar fn(x) against central differences.

    Runs in float64; samples up to n_sample coordinates of x and asserts the
    relative error of each stays below rtol.
    """
    x = x.detach().clone().double().requires_grad_(True)
    fn(x).backward()
    grad = x.grad.detach()

    flat = x.detach().clone().reshape(-1)
    n_coords = flat.numel()
    coords = rng.choice(n_coords, size=min(n_sample, n_coords), replace=False)
    for c in coords:
        for sign, store in ((+1, "plus"), (-1, "minus")):
            bumped = flat.clone()
            bumped[c] += sign * eps
            value = fn(bumped.reshape(x.shape))
            if store == "plus":
                f_plus = float(value)
            else:
                f_minus = float(value)
        numeric = (f_plus - f_minus) / (2 * eps)
        analytic = float(grad.reshape(-1)[c])
        rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-6)
        assert rel < rtol, f"coord {c}: analytic {analytic:.8g} vs numeric {numeric:.8g} (rel {rel:.2e})"

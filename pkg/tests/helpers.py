import numpy as np
import torch


def finite_difference_error(fn, x: torch.Tensor, h: float = 1e-5, n_coords: int | None = None,
                            seed: int = 0) -> float:
    """Relative error between autograd and central differences of scalar ``fn`` at ``x``.

    Uses float64 throughout. With ``n_coords`` only a random subset of
    coordinates is probed.
    """
    x = x.detach().double().clone().requires_grad_(True)
    y = fn(x)
    (grad,) = torch.autograd.grad(y, x)
    flat = x.detach().reshape(-1)
    coords = np.arange(flat.numel())
    if n_coords is not None and n_coords < flat.numel():
        coords = np.random.default_rng(seed).choice(flat.numel(), n_coords, replace=False)
    analytic = grad.reshape(-1)[coords].numpy()
    numeric = np.empty(len(coords))
    with torch.no_grad():
        for k, c in enumerate(coords):
            xp = flat.clone()
            xp[c] += h
            xm = flat.clone()
            xm[c] -= h
            numeric[k] = (fn(xp.view_as(x)).item() - fn(xm.view_as(x)).item()) / (2 * h)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)

import torch


def central_difference(fn, x: torch.Tensor, step: float = 1e-5, indices=None) -> torch.Tensor:
    """Numerical gradient of scalar ``fn()`` w.r.t. entries of ``x`` (perturbed in place)."""
    flat = x.data.view(-1)
    idx = range(flat.numel()) if indices is None else indices
    grad = torch.zeros(flat.numel(), dtype=torch.float64)
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + step
            hi = float(fn())
            flat[i] = orig - step
            lo = float(fn())
            flat[i] = orig
            grad[i] = (hi - lo) / (2 * step)
    return grad.view(x.shape)


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    a = a.double().flatten()
    b = b.double().flatten()
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom

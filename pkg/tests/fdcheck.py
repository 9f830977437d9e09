"""Central finite-difference gradient checks in float64."""
import torch


def rel_err(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def fd_check(fn, tensors, n_entries=8, h=1e-6, seed=0):
    """Compare autograd with central differences for a scalar ``fn()``.

    Checks up to ``n_entries`` random coordinates of every tensor plus one random
    joint direction. Relative errors are floored at 1e-3 of the tensor's largest
    analytic gradient entry, so coordinates whose gradient is orders of magnitude
    below the tensor's scale are judged against that scale instead of against
    float64 rounding noise. Returns the max relative error.
    """
    g = torch.Generator().manual_seed(seed)
    for t in tensors:
        t.grad = None
    fn().backward()
    grads = [t.grad.detach().clone() for t in tensors]
    worst = 0.0
    with torch.no_grad():
        for t, grad in zip(tensors, grads):
            flat = t.view(-1)
            idx = torch.randperm(flat.numel(), generator=g)[:n_entries]
            nums, anas = [], []
            for i in idx.tolist():
                old = flat[i].item()
                flat[i] = old + h
                fp = fn().item()
                flat[i] = old - h
                fm = fn().item()
                flat[i] = old
                nums.append((fp - fm) / (2 * h))
                anas.append(grad.view(-1)[i].item())
            floor = max(1e-3 * float(grad.abs().max()), 1e-12)
            worst = max(worst, *(rel_err(a, n, floor) for a, n in zip(anas, nums)))
        dirs = [torch.randn(t.shape, generator=g, dtype=t.dtype) for t in tensors]
        ana = sum(float((gr * d).sum()) for gr, d in zip(grads, dirs))
        for t, d in zip(tensors, dirs):
            t.add_(h * d)
        fp = fn().item()
        for t, d in zip(tensors, dirs):
            t.sub_(2 * h * d)
        fm = fn().item()
        for t, d in zip(tensors, dirs):
            t.add_(h * d)
        num = (fp - fm) / (2 * h)
        worst = max(worst, rel_err(ana, num, 1e-12))
    return worst

"""Central finite-difference oracles shared by the gradient-check tests.

Checks run in float64 with the step fixed at 1e-3; agreement is relative
1e-3 with a small absolute floor for entries whose true gradient is zero.
"""

import torch

STEP = 1e-3
REL_TOL = 1e-3
ABS_FLOOR = 1e-6


def _tolerance(fd: float, an: float, scale: float) -> float:
    return REL_TOL * max(abs(fd), abs(an)) + ABS_FLOOR * scale


def fd_input_gradcheck(func, inputs, n_samples=10, seed=0):
    """Autograd vs central FD for a scalar func of tensor inputs.

    Samples n entries per input; inputs are cloned to float64 leaves.
    """
    gen = torch.Generator().manual_seed(seed)
    leaves = [t.detach().clone().double().requires_grad_(True) for t in inputs]
    out = func(*leaves)
    out.backward()
    scale = max(1.0, abs(float(out.detach())))
    failures = []
    for t in leaves:
        flat = t.detach().reshape(-1)
        grad = t.grad.reshape(-1)
        n = min(n_samples, flat.numel())
        idx = torch.randperm(flat.numel(), generator=gen)[:n]
        for i in idx.tolist():
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + STEP
                f_plus = float(func(*leaves))
                flat[i] = orig - STEP
                f_minus = float(func(*leaves))
                flat[i] = orig
            fd = (f_plus - f_minus) / (2 * STEP)
            an = float(grad[i])
            if abs(fd - an) > _tolerance(fd, an, scale):
                failures.append((i, fd, an))
    assert not failures, f"input-gradient mismatches (index, fd, autograd): {failures}"


def fd_param_gradcheck(scalar_fn, module, n_params=10, seed=0):
    """Autograd vs central FD over a sampled subset of module parameters.

    scalar_fn() must evaluate the scalar head (e.g. output sum) from the
    module's current parameters.
    """
    params = [p for p in module.parameters() if p.requires_grad]
    module.zero_grad()
    out = scalar_fn()
    out.backward()
    scale = max(1.0, abs(float(out.detach())))
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    gen = torch.Generator().manual_seed(seed)
    chosen = torch.randperm(total, generator=gen)[: min(n_params, total)].tolist()
    failures = []
    for flat_index in chosen:
        p_idx, offset = 0, flat_index
        while offset >= sizes[p_idx]:
            offset -= sizes[p_idx]
            p_idx += 1
        param = params[p_idx]
        view = param.detach().reshape(-1)
        orig = float(view[offset])
        with torch.no_grad():
            view[offset] = orig + STEP
            f_plus = float(scalar_fn())
            view[offset] = orig - STEP
            f_minus = float(scalar_fn())
            view[offset] = orig
        fd = (f_plus - f_minus) / (2 * STEP)
        grad = param.grad.reshape(-1)[offset] if param.grad is not None else 0.0
        an = float(grad)
        if abs(fd - an) > _tolerance(fd, an, scale):
            failures.append((flat_index, fd, an))
    assert not failures, f"parameter-gradient mismatches (index, fd, autograd): {failures}"

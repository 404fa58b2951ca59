import torch


def fd_relative_errors(named_params, loss_fn, h: float = 1e-6) -> dict[str, float]:
    """Relative error between autograd and central-difference gradients for
    each named parameter; ``loss_fn`` returns a scalar tensor."""
    named_params = list(named_params)
    for _, p in named_params:
        p.grad = None
    loss_fn().backward()
    out = {}
    for name, p in named_params:
        analytic = p.grad.clone()
        numeric = torch.zeros_like(p)
        flat, nflat = p.data.view(-1), numeric.view(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                nflat[i] = (up - down) / (2 * h)
        out[name] = float((analytic - numeric).norm() / max(analytic.norm(), numeric.norm(), 1e-12))
    return out

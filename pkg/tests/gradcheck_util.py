"""Central finite-difference check of parameter gradients."""

import torch


def gradient_pair(model, loss_closure, eps=1e-6):
    """Autograd and central-difference gradients, each flattened over all parameters."""
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    loss_closure().backward()
    analytic = torch.cat([(p.grad if p.grad is not None else torch.zeros_like(p)).detach().reshape(-1)
                          for p in params])
    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + eps
                up = loss_closure().item()
                flat[k] = orig - eps
                down = loss_closure().item()
                flat[k] = orig
                numeric.append((up - down) / (2 * eps))
    return analytic, torch.tensor(numeric, dtype=analytic.dtype)


def max_relative_error(model, loss_closure, eps=1e-6):
    """``|g_fd - g_an| / max(|g_fd|, |g_an|)`` over the full parameter gradient (Euclidean norms)."""
    analytic, numeric = gradient_pair(model, loss_closure, eps)
    denom = max(analytic.norm().item(), numeric.norm().item(), 1e-300)
    return (analytic - numeric).norm().item() / denom

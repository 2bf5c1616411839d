"""Central finite-difference gradient checking for the verifier network."""

import numpy as np
import torch
import torch.nn as nn

# Smallest gradient magnitude worth a relative comparison.  The loss is
# O(1); with eps=1e-4 the finite difference carries ~1e-7 of absolute noise
# (fp64 cancellation plus occasional max-pool argmax flips), so relative
# error is meaningless below this scale.
GRAD_FLOOR = 1e-4


def finite_difference_check(model, inputs, targets, n_params=24, eps=1e-4, seed=0):
    """Compare autograd gradients against central differences in fp64.

    Samples ``n_params`` scalar parameters spread across every parameter
    tensor of the model (conv, attention, fc, norm).  Returns a list of
    (name, index, analytic, numeric, relative_error) tuples, where the
    relative error is |a - n| / max(|a|, |n|, GRAD_FLOOR).
    """
    model = model.double()
    inputs = inputs.double()
    targets = targets.double()
    model.eval()  # freeze batchnorm stats so loss is smooth in the params
    loss_fn = nn.BCEWithLogitsLoss()

    def compute_loss():
        return loss_fn(model(inputs), targets)

    model.zero_grad()
    loss = compute_loss()
    loss.backward()

    named = [(n, p) for n, p in model.named_parameters() if p.grad is not None]
    rng = np.random.default_rng(seed)
    per_tensor = max(1, int(np.ceil(n_params / len(named))))
    results = []
    with torch.no_grad():
        for name, param in named:
            flat = param.view(-1)
            grad_flat = param.grad.view(-1)
            count = min(per_tensor, flat.numel())
            for idx in rng.choice(flat.numel(), size=count, replace=False):
                idx = int(idx)
                original = flat[idx].item()
                flat[idx] = original + eps
                loss_plus = compute_loss().item()
                flat[idx] = original - eps
                loss_minus = compute_loss().item()
                flat[idx] = original
                numeric = (loss_plus - loss_minus) / (2 * eps)
                analytic = grad_flat[idx].item()
                denom = max(abs(analytic), abs(numeric), GRAD_FLOOR)
                results.append((name, idx, analytic, numeric, abs(analytic - numeric) / denom))
    return results

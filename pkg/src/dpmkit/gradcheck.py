"""Central finite-difference checks on a random subset of parameter entries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class GradCheckResult:
    names: list
    analytic: np.ndarray
    numeric: np.ndarray
    floor: float = 1e-6

    @property
    def rel_errors(self) -> np.ndarray:
        # entries whose true gradient is ~0 are judged against ``floor`` instead
        scale = np.maximum(np.maximum(np.abs(self.analytic), np.abs(self.numeric)), self.floor)
        return np.abs(self.analytic - self.numeric) / scale

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_errors.max()) if len(self.names) else 0.0


def sample_entries(params: dict, count: int, rng: np.random.Generator) -> list[tuple[str, int]]:
    """Pick ``count`` distinct ``(name, flat_index)`` pairs, uniformly over all entries."""
    names = list(params)
    sizes = np.array([params[n].numel() for n in names])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(count, total), replace=False)
    bounds = np.cumsum(sizes)
    out = []
    for p in sorted(picks):
        k = int(np.searchsorted(bounds, p, side="right"))
        out.append((names[k], int(p - (bounds[k - 1] if k else 0))))
    return out


def _central(reference_fn, flat, idx, eps, order) -> float:
    orig = flat[idx].item()
    offsets = (1, -1) if order == 2 else (2, 1, -1, -2)
    values, steps = [], []
    with torch.no_grad():
        for k in offsets:
            flat[idx] = orig + k * eps
            # use the step actually stored, which differs from k*eps in float32
            steps.append(flat[idx].item() - orig)
            values.append(float(reference_fn()))
        flat[idx] = orig
    if order == 2:
        return (values[0] - values[1]) / (steps[0] - steps[1])
    h = (steps[1] - steps[2]) / 2
    return (-values[0] + 8 * values[1] - 8 * values[2] + values[3]) / (12 * h)


def check_gradients(loss_fn, params: dict, count: int = 16, eps: float = 1e-5, seed: int = 0,
                    reference_fn=None, floor: float = 1e-6, order: int = 2) -> GradCheckResult:
    """Compare autograd against central differences.

    ``loss_fn()`` returns a scalar tensor built from the tensors in ``params``
    (``name -> leaf tensor with requires_grad``). The numeric side uses
    ``reference_fn`` when given, so a float32 analytic gradient can be
    checked against a float64 difference quotient. ``order`` selects the
    2-point or 4-point central stencil.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    reference_fn = reference_fn or loss_fn
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    chosen = sample_entries(params, count, np.random.default_rng(seed))
    analytic, numeric = [], []
    for name, idx in chosen:
        p = params[name]
        grad = p.grad.reshape(-1)[idx].item() if p.grad is not None else 0.0
        analytic.append(grad)
        numeric.append(_central(reference_fn, p.data.view(-1), idx, eps, order))
    return GradCheckResult(chosen, np.array(analytic), np.array(numeric), floor)

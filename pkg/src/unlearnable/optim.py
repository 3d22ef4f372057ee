"""Learning-rate schedule and the SGD-with-momentum update."""
import math

import numpy as np

from .errors import NumericError


def cosine_lr(epoch, total_epochs, lr0):
    """Cosine annealing without restarts, evaluated once per epoch."""
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def sgd_momentum_step(params, grads, velocity, lr, momentum):
    """In place: ``v <- momentum * v + g`` then ``theta <- theta - lr * v``.

    All three arguments are dicts keyed by parameter name; missing velocity
    entries start at zero.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    for name, g in grads.items():
        v = velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        velocity[name] = v
        params[name] -= lr * v
    return params, velocity

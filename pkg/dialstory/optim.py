"""
Adam optimizer with bias correction, plus global-norm gradient clipping.
Parameters and gradients are addressed by name so optimizer state can be checkpointed
next to the model parameters.
"""

# =============================================================================
# GLOBAL CONFIGURATION VARIABLES
# =============================================================================

DEFAULT_BETA1 = 0.9                       # First-moment decay
DEFAULT_BETA2 = 0.999                     # Second-moment decay
DEFAULT_EPSILON = 1e-8                    # Added to sqrt(v_hat)

# =============================================================================

import logging
from dataclasses import dataclass, field

import numpy as np

from dialstory.errors import ShapeError

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    """
    Optimizer state. Moments share the shapes of their parameters; step counts updates.
    """
    learning_rate: float
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    epsilon: float = DEFAULT_EPSILON
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """
    Apply one Adam update.
    Args:
        params (dict[str, np.ndarray]): Parameter values, updated in place
        grads (dict[str, np.ndarray | None]): Gradients by name; missing or None counts as zero
        state (AdamState): Optimizer state, updated in place
    Returns:
        tuple: (params, state)
    Raises:
        ShapeError: when a gradient's shape differs from its parameter's
    """
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(value)
        elif grad.shape != value.shape:
            raise ShapeError(f"gradient for {name} has shape {grad.shape}, parameter has {value.shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(value)
            v = np.zeros_like(value)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first_moment[name] = m.astype(value.dtype, copy=False)
        state.second_moment[name] = v.astype(value.dtype, copy=False)
        m_hat = m / correction1
        v_hat = v / correction2
        value -= (state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(value.dtype, copy=False)
    return params, state


def clip_grad_norm(grads, max_norm):
    """
    Rescale gradients so their global L2 norm is at most max_norm.
    Returns:
        tuple: (grads, norm before clipping, whether clipping was applied)
    """
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values() if g is not None)))
    if total <= max_norm or total == 0.0:
        return grads, total, False
    scale = max_norm / total
    return {name: (g * scale if g is not None else None) for name, g in grads.items()}, total, True


class Adam:
    """
    Stateful wrapper binding adam_step to a named parameter collection.
    """

    def __init__(self, named_params, learning_rate, beta1=DEFAULT_BETA1, beta2=DEFAULT_BETA2,
                 epsilon=DEFAULT_EPSILON, clip_norm=None):
        """
        Args:
            named_params (dict[str, Tensor]): Trainable tensors by name
            learning_rate (float): Step size
            clip_norm (float, optional): Global gradient-norm cap, disabled when None
        """
        self.params = named_params
        self.state = AdamState(learning_rate=learning_rate, beta1=beta1, beta2=beta2, epsilon=epsilon)
        self.clip_norm = clip_norm
        self.clipped_steps = 0

    def step(self):
        """Update every parameter from its accumulated .grad, then clear the gradients."""
        grads = {name: p.grad for name, p in self.params.items()}
        if self.clip_norm is not None:
            grads, norm, clipped = clip_grad_norm(grads, self.clip_norm)
            if clipped:
                self.clipped_steps += 1
                log.warning("Gradient clipping active at step %d: norm %.4f -> %.4f",
                            self.state.step + 1, norm, self.clip_norm)
        values = {name: p.data for name, p in self.params.items()}
        adam_step(values, grads, self.state)
        self.zero_grad()

    def zero_grad(self):
        for param in self.params.values():
            param.grad = None

    def state_arrays(self):
        """Flatten the moments into name -> array for checkpointing."""
        arrays = {}
        for name, m in self.state.first_moment.items():
            arrays[f"adam.m.{name}"] = m
        for name, v in self.state.second_moment.items():
            arrays[f"adam.v.{name}"] = v
        return arrays

    def state_header(self):
        s = self.state
        return {"step": s.step, "learning_rate": s.learning_rate, "beta1": s.beta1,
                "beta2": s.beta2, "epsilon": s.epsilon}

    def load_state(self, header, arrays):
        """Restore from state_header()/state_arrays() output."""
        self.state.step = int(header["step"])
        self.state.learning_rate = float(header["learning_rate"])
        self.state.beta1 = float(header["beta1"])
        self.state.beta2 = float(header["beta2"])
        self.state.epsilon = float(header["epsilon"])
        for key, value in arrays.items():
            if key.startswith("adam.m."):
                self.state.first_moment[key[len("adam.m."):]] = value
            elif key.startswith("adam.v."):
                self.state.second_moment[key[len("adam.v."):]] = value

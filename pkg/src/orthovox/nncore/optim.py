"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Parameter


class TrainingError(RuntimeError):
    """Raised when an update would consume non-finite values."""


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def tensors(self, prefix: str) -> dict[str, np.ndarray]:
        """Flat name -> array view for checkpointing."""
        out = {f"{prefix}/step": np.array([self.step], dtype=np.float32)}
        for name in self.m:
            out[f"{prefix}/m/{name}"] = self.m[name]
            out[f"{prefix}/v/{name}"] = self.v[name]
        return out

    def load_tensors(self, prefix: str, tensors: dict[str, np.ndarray]):
        self.step = int(tensors[f"{prefix}/step"][0])
        self.m, self.v = {}, {}
        for key, arr in tensors.items():
            if key.startswith(f"{prefix}/m/"):
                self.m[key[len(prefix) + 3:]] = arr.copy()
            elif key.startswith(f"{prefix}/v/"):
                self.v[key[len(prefix) + 3:]] = arr.copy()


def adam_step(state: AdamState, params: dict[str, Parameter], grads: dict[str, np.ndarray] | None = None):
    """One Adam update applied in place to ``params``.

    ``grads`` defaults to each parameter's ``.grad``. Every gradient is checked
    before anything is modified, so a failing step leaves the model untouched.
    """
    grads = grads if grads is not None else {n: p.grad for n, p in params.items()}
    for name, g in grads.items():
        if g.shape != params[name].data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {params[name].data.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype)
    return params

"""AdamW with decoupled weight decay and per-parameter state.

Moment buffers and step counts live per parameter, not per optimizer step,
so callers may update different parameter subsets on different iterations
(current-batch updates touch the decoder, replay updates do not) and each
parameter's bias correction stays consistent with how often it was actually
stepped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .tensor import Parameter


@dataclass
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05


@dataclass
class _ParamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam over named parameters."""

    params: list
    config: AdamWConfig = field(default_factory=AdamWConfig)

    def __post_init__(self):
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names in optimizer")
        self._by_name = {p.name: p for p in self.params}
        self.state = {
            p.name: _ParamState(np.zeros_like(p.data), np.zeros_like(p.data))
            for p in self.params
        }

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr, subset=None):
        """Apply one update at rate ``lr`` to ``subset`` (default: all params).

        Only the named subset's moments and step counts advance; everything
        else is untouched, including its weight decay.
        """
        cfg = self.config
        todo = self.params if subset is None else list(subset)
        for p in todo:
            st = self.state.get(p.name)
            if st is None or self._by_name.get(p.name) is not p:
                raise KeyError(f"parameter {p.name!r} is not managed by this optimizer")
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient for parameter {p.name!r}")
            st.step += 1
            kernels.adamw_update(p.data, p.grad, st.m, st.v, lr,
                                 cfg.beta1, cfg.beta2, cfg.eps,
                                 cfg.weight_decay, st.step)

    def state_arrays(self):
        """Flat view of optimizer state for checkpointing: name -> arrays/step."""
        out = {}
        for name, st in self.state.items():
            out[name] = {"m": st.m, "v": st.v, "step": st.step}
        return out

    def load_state_arrays(self, payload):
        for name, entry in payload.items():
            st = self.state.get(name)
            if st is None:
                raise KeyError(f"optimizer state for unknown parameter {name!r}")
            st.m[...] = entry["m"]
            st.v[...] = entry["v"]
            st.step = int(entry["step"])


def clip_grad_norm(params, max_norm):
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    sq = 0.0
    for p in params:
        g = p.grad
        sq += float(np.dot(g.ravel(), g.ravel()))
    norm = float(np.sqrt(sq))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm

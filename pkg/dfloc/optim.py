#!/usr/bin/env python3
"""
Optim - Adam with decoupled weight decay over named numpy parameters

Parameters are a flat {name: array} dict. Every name is assigned to a group
that carries its own learning rate; betas, eps and weight decay are shared.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from .errors import ContractError

logger = logging.getLogger(__name__)


@dataclass
class AdamWState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class AdamW:
    """
    m_t = b1 m + (1 - b1) g,  v_t = b2 v + (1 - b2) g^2
    p  <- p * (1 - lr * wd)
    p  <- p - lr * m_hat / (sqrt(v_hat) + eps)

    Args:
        group_of: maps a parameter name to its group name
        lrs: learning rate per group
        betas: moment decay rates
        eps: denominator floor
        weight_decay: decoupled decay coefficient, applied to every parameter
    """

    def __init__(self, group_of: Callable[[str], str], lrs: Dict[str, float],
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-2, state: Optional[AdamWState] = None):
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ContractError(f"betas must lie in [0, 1), got {betas}")
        self.group_of = group_of
        self.lrs = dict(lrs)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.state = state or AdamWState()

    def lr_for(self, name: str) -> float:
        group = self.group_of(name)
        if group not in self.lrs:
            raise ContractError(f"parameter '{name}' maps to unknown group '{group}'")
        return self.lrs[group]

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        """Return updated copies of `params`; names missing from `grads` get a zero gradient."""
        beta1, beta2 = self.betas
        self.state.step += 1
        t = self.state.step
        bias1 = 1.0 - beta1 ** t
        bias2 = 1.0 - beta2 ** t
        updated = {}
        for name in sorted(params):
            p = params[name]
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            elif g.shape != p.shape:
                raise ContractError(f"gradient of '{name}' has shape {g.shape}, parameter {p.shape}")
            m = self.state.m.get(name)
            v = self.state.v.get(name)
            if m is None:
                m = np.zeros_like(p)
                v = np.zeros_like(p)
            m = beta1 * m + (1.0 - beta1) * g
            v = beta2 * v + (1.0 - beta2) * (g * g)
            self.state.m[name] = m
            self.state.v[name] = v
            lr = self.lr_for(name)
            new = p * (1.0 - lr * self.weight_decay)
            new = new - lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            updated[name] = new
        return updated

"""Adam with externally controlled learning rate and flat, checkpointable state."""

from __future__ import annotations

import math

import torch


class Adam:
    """Adam over a list of ``(name, parameter)`` pairs.

    With ``second_moment=False`` the update is the bias-corrected first moment
    alone (momentum SGD); on the first step that is exactly ``-lr * grad``.
    """

    def __init__(self, named_params, lr=2e-4, betas=(0.5, 0.999), eps=1e-8, second_moment=True):
        self.named_params = list(named_params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.second_moment = second_moment
        self.step_count = 0
        self.exp_avg = [torch.zeros_like(p) for _, p in self.named_params]
        self.exp_avg_sq = [torch.zeros_like(p) for _, p in self.named_params]

    @property
    def params(self):
        return [p for _, p in self.named_params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self):
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.exp_avg, self.exp_avg_sq):
            if p.grad is None:
                continue
            g = p.grad
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            if self.second_moment:
                v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
                denom = (v.sqrt() / math.sqrt(bc2)).add_(self.eps)
                p.addcdiv_(m, denom, value=-self.lr / bc1)
            else:
                p.add_(m, alpha=-self.lr / bc1)

    def state_tensors(self, prefix):
        out = {}
        for (name, _), m, v in zip(self.named_params, self.exp_avg, self.exp_avg_sq):
            out[f"{prefix}/exp_avg/{name}"] = m
            out[f"{prefix}/exp_avg_sq/{name}"] = v
        return out

    def load_state_tensors(self, prefix, tensors, step_count):
        with torch.no_grad():
            for (name, _), m, v in zip(self.named_params, self.exp_avg, self.exp_avg_sq):
                m.copy_(tensors[f"{prefix}/exp_avg/{name}"])
                v.copy_(tensors[f"{prefix}/exp_avg_sq/{name}"])
        self.step_count = int(step_count)

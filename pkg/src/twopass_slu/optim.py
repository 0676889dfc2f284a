"""Adaptive-moment optimizer with warmup / inverse-sqrt learning-rate schedule."""

import math
from array import array

from twopass_slu import backend


class OptimizerError(RuntimeError):
    pass


class Adam:
    """Adam over a named parameter dict, with warmup and global-norm clipping.

    The effective learning rate at step t (1-based) is
    ``peak_lr * min(t / warmup_steps, sqrt(warmup_steps / t))``.
    """

    def __init__(self, params, peak_lr=1e-3, warmup_steps=400, beta1=0.9,
                 beta2=0.999, eps=1e-8, clip_norm=5.0):
        if warmup_steps < 1:
            raise ValueError(f"warmup_steps must be >= 1, got {warmup_steps}")
        self.params = dict(params)
        self.peak_lr = peak_lr
        self.warmup_steps = warmup_steps
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {name: array("d", bytes(8 * p.size)) for name, p in self.params.items()}
        self.v = {name: array("d", bytes(8 * p.size)) for name, p in self.params.items()}

    def lr_at(self, t):
        return self.peak_lr * min(t / self.warmup_steps, math.sqrt(self.warmup_steps / t))

    def grad_norm(self):
        total = 0.0
        for name, p in self.params.items():
            if p.grad is None:
                raise OptimizerError(f"parameter {name!r} has no gradient buffer")
            total += backend.K.sum_sq(p.grad, p.size)
        return math.sqrt(total)

    def step(self):
        """Apply one update in place; increments the step counter."""
        norm = self.grad_norm()
        if self.clip_norm is not None and norm > self.clip_norm:
            shrink = self.clip_norm / norm
            for p in self.params.values():
                backend.K.vec_scale(p.grad, shrink, p.grad, p.size)
        self.step_count += 1
        lr = self.lr_at(self.step_count)
        for name, p in self.params.items():
            backend.K.adam_step(p.data, p.grad, self.m[name], self.v[name],
                                p.size, lr, self.beta1, self.beta2, self.eps,
                                self.step_count)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self):
        """Moment buffers and schedule state for checkpointing."""
        return {
            "step": self.step_count,
            "peak_lr": self.peak_lr,
            "warmup_steps": self.warmup_steps,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "clip_norm": self.clip_norm,
            "m": self.m,
            "v": self.v,
        }

    def load_state_dict(self, state):
        self.step_count = state["step"]
        self.peak_lr = state["peak_lr"]
        self.warmup_steps = state["warmup_steps"]
        self.beta1 = state["beta1"]
        self.beta2 = state["beta2"]
        self.eps = state["eps"]
        self.clip_norm = state["clip_norm"]
        for name in self.params:
            self.m[name] = array("d", state["m"][name])
            self.v[name] = array("d", state["v"][name])

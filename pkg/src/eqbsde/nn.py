"""Per-time-step feedforward networks with batch normalisation, and Adam.

All ``S`` step networks share one architecture and are stored stacked on a
leading axis. Activations are laid out batch-last: ``W1`` has shape
``(S, h1, in_dim)`` and an input batch has shape ``(S, in_dim, batch)``, so
batch-norm reductions run over the contiguous axis. Each layer is affine ->
batch norm -> ReLU, followed by an affine output layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import batch_norm, bn_relu, relu


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int = 1
    hidden_dims: tuple = (11, 11)
    out_dim: int = 1
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9
    out_scale: float = 0.1

    def n_params(self) -> int:
        dims = (self.in_dim, *self.hidden_dims)
        n = sum(a * b + 3 * b for a, b in zip(dims[:-1], dims[1:]))
        return n + dims[-1] * self.out_dim + self.out_dim


def init_mlp(spec: MlpSpec, steps: int, rng: np.random.Generator) -> tuple[dict, dict]:
    """Fan-in scaled uniform weights; returns ``(params, running_stats)``."""
    params, stats = {}, {}
    dims = (spec.in_dim, *spec.hidden_dims)
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]), start=1):
        bound = 1.0 / np.sqrt(a)
        params[f"W{i}"] = rng.uniform(-bound, bound, (steps, b, a))
        params[f"b{i}"] = rng.uniform(-bound, bound, (steps, b, 1))
        params[f"bn{i}_g"] = np.ones((steps, b, 1))
        params[f"bn{i}_b"] = np.zeros((steps, b, 1))
        stats[f"bn{i}_mean"] = np.zeros((steps, b, 1))
        stats[f"bn{i}_var"] = np.ones((steps, b, 1))
    k = len(dims)
    bound = spec.out_scale / np.sqrt(dims[-1])
    params[f"W{k}"] = rng.uniform(-bound, bound, (steps, spec.out_dim, dims[-1]))
    params[f"b{k}"] = rng.uniform(-bound, bound, (steps, spec.out_dim, 1))
    return params, stats


def mlp_forward(params: dict, x, spec: MlpSpec, mode: str = "train", stats: dict | None = None,
                batch_stats: dict | None = None, fused: bool = True):
    """Evaluate every step network on its own input slice.

    ``x`` has shape ``(S, in_dim, batch)``; the result is ``(S, out_dim, batch)``. In ``train`` mode batch norm uses
    batch statistics (written into ``batch_stats`` when given); in ``eval``
    mode it uses ``stats``. ``fused=False`` builds batch norm and ReLU from
    separate tape nodes (slower; kept as a cross-check of the fused kernel).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and np.shape(x)[-1] < 2:
        raise ValueError("batch norm in train mode needs a batch of at least 2")
    if mode == "eval" and stats is None:
        raise ValueError("eval mode needs running statistics")
    h = x
    n_hidden = len(spec.hidden_dims)
    for i in range(1, n_hidden + 1):
        h = params[f"W{i}"] @ h + params[f"b{i}"]
        g, b = params[f"bn{i}_g"], params[f"bn{i}_b"]
        if mode == "train":
            if fused:
                h, mu, var = bn_relu(h, g, b, spec.bn_eps)
            else:
                h, mu, var = batch_norm(h, g, b, spec.bn_eps, axis=-1)
                h = relu(h)
            if batch_stats is not None:
                batch_stats[f"bn{i}_mean"] = mu
                batch_stats[f"bn{i}_var"] = var
        else:
            scale = g / np.sqrt(stats[f"bn{i}_var"] + spec.bn_eps)
            h = relu((h - stats[f"bn{i}_mean"]) * scale + b)
    k = n_hidden + 1
    return params[f"W{k}"] @ h + params[f"b{k}"]


def update_running_stats(stats: dict, batch_stats: dict, momentum: float) -> None:
    for key, val in batch_stats.items():
        stats[key] = momentum * stats[key] + (1.0 - momentum) * val


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, lr: float) -> None:
        """In-place bias-corrected Adam update of ``params``."""
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            p = params[k]
            if np.shape(g) != np.shape(p):
                raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(p)} for {k}")
            if k not in self.m:
                self.m[k] = np.zeros_like(p, dtype=float)
                self.v[k] = np.zeros_like(p, dtype=float)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] = p - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


DEFAULT_LR_STAGES = ((8e-4, 5e-4), (5e-4, 2e-4), (2e-4, 5e-5), (5e-5, 1e-5))


def lr_at(epoch: int, epochs: int, stages=DEFAULT_LR_STAGES, boundaries=None) -> float:
    """Piecewise-linear decay; stage ``k`` covers epochs ``[b_k, b_{k+1})``.

    ``boundaries`` lists the interior stage starts as fractions of
    ``epochs``; the default splits the budget into equal parts.
    """
    n = len(stages)
    if boundaries is None:
        boundaries = [k / n for k in range(1, n)]
    edges = [0.0, *[b * epochs for b in boundaries], float(epochs)]
    for k, (lo, hi) in enumerate(stages):
        a, b = edges[k], edges[k + 1]
        if epoch < b or k == n - 1:
            frac = 0.0 if b <= a else min(max((epoch - a) / (b - a), 0.0), 1.0)
            return lo + (hi - lo) * frac
    return stages[-1][1]

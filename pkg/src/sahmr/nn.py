"""Small layer library and optimizers on top of :mod:`sahmr.autodiff`."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ConfigError


class Module:
    """Container whose ``Tensor`` attributes requiring grad are parameters."""

    def named_parameters(self, prefix=""):
        out = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, ad.Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
                    elif isinstance(item, ad.Tensor) and item.requires_grad:
                        out[f"{name}.{i}"] = item
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise ConfigError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ConfigError(f"shape mismatch for {k}: {state[k].shape} vs {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def save(self, path):
        ad.save_checkpoint(path, self.state_dict())

    def load(self, path):
        self.load_state_dict(ad.load_checkpoint(path))


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, gain=1.0):
        scale = gain * np.sqrt(2.0 / (n_in + n_out))
        self.W = ad.parameter(rng.normal(0.0, scale, (n_in, n_out)))
        self.b = ad.parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x):
        y = ad.matmul(x, self.W)
        return y + self.b if self.b is not None else y


class LayerNorm(Module):
    def __init__(self, d):
        self.gamma = ad.parameter(np.ones(d))
        self.beta = ad.parameter(np.zeros(d))

    def __call__(self, x):
        return ad.layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    def __init__(self, sizes, rng, act=ad.relu, final_gain=1.0):
        self.layers = [Linear(a, b, rng, gain=final_gain if i == len(sizes) - 2 else 1.0)
                       for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.act = act

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.act(x)
        return x


class SGD:
    """Gradient descent with (heavy-ball) momentum."""

    def __init__(self, params, lr, momentum=0.9, clip=None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.clip is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > self.clip:
                grads = [g * (self.clip / norm) for g in grads]
        for p, g, v in zip(self.params, grads, self.velocity):
            v *= self.momentum
            v -= self.lr * g
            p.data = p.data + v

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad ** 2
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

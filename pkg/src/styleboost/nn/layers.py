"""Minimal layer framework with explicit forward/backward passes.

Every layer's ``forward`` returns ``(y, cache)`` and ``backward(gy, cache)``
returns the gradient w.r.t. the input while accumulating parameter
gradients. Caches live outside the layers, so one set of weights can run
several concurrent forward passes (needed when a network is applied twice
inside a single training step).
"""

import hashlib

import numpy as np

from . import backend


class Parameter:
    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.ascontiguousarray(data)
        self.grad = np.zeros_like(self.data)


class Module:
    """Base class: parameter discovery, state dicts, content hashing."""

    def named_parameters(self, prefix=""):
        for name, attr in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(attr, Parameter):
                yield full, attr
            elif isinstance(attr, Module):
                yield from attr.named_parameters(f"{full}.")
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad[...] = 0.0

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = set(own) ^ set(state)
            raise KeyError(f"state dict mismatch on keys: {sorted(missing)}")
        for name, p in own.items():
            arr = state[name]
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{arr.shape} vs {p.data.shape}")
            p.data[...] = arr

    def param_hash(self):
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(str(p.data.shape).encode())
            h.update(str(p.data.dtype).encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def kaiming(rng, shape, fan_in, dtype=np.float32):
    scale = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * scale).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, k=3, stride=1, pad=None, rng=None,
                 dtype=np.float32):
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        self.k = k
        self.w = Parameter(kaiming(rng, (cout, cin, k, k), cin * k * k, dtype))
        self.b = Parameter(np.zeros(cout, dtype))

    def forward(self, x):
        y = backend.conv2d_forward(x, self.w.data, self.b.data,
                                   self.stride, self.pad)
        return y, x

    def backward(self, gy, cache):
        x = cache
        self.w.grad += backend.conv2d_backward_weights(
            x, gy, self.stride, self.pad, self.k, self.k)
        self.b.grad += gy.sum(axis=(0, 2, 3))
        return backend.conv2d_backward_input(
            gy, self.w.data, self.stride, self.pad, x.shape[2], x.shape[3])


class Linear(Module):
    def __init__(self, fin, fout, rng=None, dtype=np.float32):
        self.w = Parameter(kaiming(rng, (fout, fin), fin, dtype))
        self.b = Parameter(np.zeros(fout, dtype))

    def forward(self, x):
        return x @ self.w.data.T + self.b.data, x

    def backward(self, gy, cache):
        x = cache
        self.w.grad += gy.T @ x
        self.b.grad += gy.sum(axis=0)
        return gy @ self.w.data


class GroupNorm(Module):
    def __init__(self, groups, channels, eps=1e-5, dtype=np.float32):
        if channels % groups != 0:
            raise ValueError(f"channels {channels} not divisible by {groups}")
        self.groups = groups
        self.eps = eps
        self.g = Parameter(np.ones(channels, dtype))
        self.b = Parameter(np.zeros(channels, dtype))

    def _grouped(self, x):
        n, c, h, w = x.shape
        return x.reshape(n, self.groups, (c // self.groups) * h * w)

    def forward(self, x):
        n, c, h, w = x.shape
        xg = self._grouped(x)
        mu = xg.mean(axis=2, keepdims=True)
        var = xg.var(axis=2, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = ((xg - mu) * inv).reshape(n, c, h, w)
        y = xhat * self.g.data.reshape(1, c, 1, 1) + self.b.data.reshape(1, c, 1, 1)
        return y, (xhat, inv)

    def backward(self, gy, cache):
        xhat, inv = cache
        n, c, h, w = gy.shape
        self.g.grad += (gy * xhat).sum(axis=(0, 2, 3))
        self.b.grad += gy.sum(axis=(0, 2, 3))
        gxhat = gy * self.g.data.reshape(1, c, 1, 1)
        gg = self._grouped(gxhat)
        xg = self._grouped(xhat)
        m1 = gg.mean(axis=2, keepdims=True)
        m2 = (gg * xg).mean(axis=2, keepdims=True)
        gx = (gg - m1 - xg * m2) * inv
        return gx.reshape(n, c, h, w)


class ReLU(Module):
    def forward(self, x):
        y = np.maximum(x, 0)
        return y, x > 0

    def backward(self, gy, cache):
        return gy * cache


class LeakyReLU(Module):
    def __init__(self, slope=0.2):
        self.slope = slope

    def forward(self, x):
        y = np.where(x > 0, x, self.slope * x)
        return y, x > 0

    def backward(self, gy, cache):
        return np.where(cache, gy, self.slope * gy)


class SiLU(Module):
    def forward(self, x):
        s = 1.0 / (1.0 + np.exp(-x))
        return x * s, (x, s)

    def backward(self, gy, cache):
        x, s = cache
        return gy * (s + x * s * (1.0 - s))


class Tanh(Module):
    def forward(self, x):
        y = np.tanh(x)
        return y, y

    def backward(self, gy, cache):
        return gy * (1.0 - cache * cache)


class Upsample2x(Module):
    """Nearest-neighbour 2x upsampling."""

    def forward(self, x):
        y = x.repeat(2, axis=2).repeat(2, axis=3)
        return y, x.shape

    def backward(self, gy, cache):
        n, c, h, w = cache
        return gy.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, gy, caches):
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            gy = layer.backward(gy, cache)
        return gy

"""Projector parameter container shared by clients and the server."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("identity", "tanh")


@dataclass
class Layer:
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)


@dataclass
class ProjectorParams:
    """Ordered MLP layers computing x @ W + b, with `activation` between layers."""

    layers: list[Layer]
    activation: str = "identity"

    def __post_init__(self):
        if not self.layers:
            raise ValueError("projector needs at least one layer")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; choose from {ACTIVATIONS}")
        for i, layer in enumerate(self.layers):
            layer.weight = np.asarray(layer.weight, dtype=np.float64)
            layer.bias = np.asarray(layer.bias, dtype=np.float64)
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.weight.shape[1],):
                raise ValueError(f"layer {i}: weight {layer.weight.shape} and bias {layer.bias.shape} disagree")
            if i and self.layers[i - 1].weight.shape[1] != layer.weight.shape[0]:
                raise ValueError(f"layer {i}: input dim does not chain with previous layer")
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                raise ValueError(f"layer {i} has non-finite values")

    @classmethod
    def init(cls, dims: Sequence[int], rng: np.random.Generator, activation: str = "identity",
             scale: float = 1.0) -> "ProjectorParams":
        """Gaussian weights with std scale/sqrt(fan_in), zero biases."""
        layers = [
            Layer(rng.standard_normal((d_in, d_out)) * scale / np.sqrt(d_in), np.zeros(d_out))
            for d_in, d_out in zip(dims[:-1], dims[1:])
        ]
        return cls(layers, activation)

    @classmethod
    def zeros(cls, dims: Sequence[int], activation: str = "identity") -> "ProjectorParams":
        layers = [Layer(np.zeros((a, b)), np.zeros(b)) for a, b in zip(dims[:-1], dims[1:])]
        return cls(layers, activation)

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].weight.shape[0]] + [l.weight.shape[1] for l in self.layers]

    @property
    def size(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def same_shape(self, other: "ProjectorParams") -> bool:
        return len(self.layers) == len(other.layers) and all(
            a.weight.shape == b.weight.shape for a, b in zip(self.layers, other.layers)
        )

    def check_shape(self, other: "ProjectorParams", what: str = "params"):
        if not self.same_shape(other):
            raise ValueError(f"{what} have dims {other.dims}, expected {self.dims}")

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.weight.ravel(), l.bias]) for l in self.layers])

    def unflatten(self, vec: np.ndarray) -> "ProjectorParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ValueError(f"expected flat vector of length {self.size}, got {vec.shape}")
        layers, pos = [], 0
        for l in self.layers:
            n = l.weight.size
            w = vec[pos:pos + n].reshape(l.weight.shape)
            pos += n
            b = vec[pos:pos + l.bias.size]
            pos += l.bias.size
            layers.append(Layer(w.copy(), b.copy()))
        return ProjectorParams(layers, self.activation)

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ProjectorParams":
        return ProjectorParams([Layer(fn(l.weight), fn(l.bias)) for l in self.layers], self.activation)

    def copy(self) -> "ProjectorParams":
        return self.map(np.copy)

    def save(self, path: str | Path):
        arrays = {}
        for i, l in enumerate(self.layers):
            arrays[f"weight_{i}"] = l.weight
            arrays[f"bias_{i}"] = l.bias
        np.savez(path, activation=np.array(self.activation), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "ProjectorParams":
        with np.load(path) as z:
            n = sum(1 for k in z.files if k.startswith("weight_"))
            layers = [Layer(z[f"weight_{i}"], z[f"bias_{i}"]) for i in range(n)]
            return cls(layers, str(z["activation"]))


def squared_distance(a: ProjectorParams, b: ProjectorParams) -> float:
    """Squared Euclidean distance over all weights and biases."""
    a.check_shape(b)
    return float(sum(np.sum((x.weight - y.weight) ** 2) + np.sum((x.bias - y.bias) ** 2)
                     for x, y in zip(a.layers, b.layers)))


def weighted_sum(arrays: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """sum_k w_k * arrays[k], accumulated in a fixed pairwise order."""
    terms = [w * np.asarray(a, dtype=np.float64) for a, w in zip(arrays, weights)]
    while len(terms) > 1:
        paired = [terms[i] + terms[i + 1] for i in range(0, len(terms) - 1, 2)]
        if len(terms) % 2:
            paired.append(terms[-1])
        terms = paired
    return terms[0]


def weighted_average(params: Sequence[ProjectorParams], weights: Sequence[float]) -> ProjectorParams:
    first = params[0]
    for p in params[1:]:
        first.check_shape(p)
    layers = []
    for i in range(len(first.layers)):
        w = weighted_sum([p.layers[i].weight for p in params], weights)
        b = weighted_sum([p.layers[i].bias for p in params], weights)
        layers.append(Layer(w, b))
    return ProjectorParams(layers, first.activation)

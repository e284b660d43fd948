"""Training losses L(w, theta, t) and meta-objectives f(w).

Every loss is written with :mod:`revlearn.autodiff` primitives, so gradients
and both Hessian-vector products come from the same code. Parameters ``w`` and
hyperparameters ``theta`` are flat vectors; :class:`ParamLayout` and
:class:`HyperLayout` name their pieces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .data import BatchSchedule, Dataset, rng_for

TRANSFORMS = ("log", "logit", "identity")


@dataclass
class ParamLayout:
    """Named groups of the flat parameter vector, in order."""

    shapes: dict[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        self.offsets = {}
        off = 0
        for name, shape in self.shapes.items():
            self.offsets[name] = off
            off += int(np.prod(shape, dtype=np.int64))
        self.size = off

    @property
    def names(self) -> list[str]:
        return list(self.shapes)

    @property
    def num_groups(self) -> int:
        return len(self.shapes)

    def slice(self, name) -> slice:
        off = self.offsets[name]
        return slice(off, off + int(np.prod(self.shapes[name], dtype=np.int64)))

    def view(self, w, name):
        """Group ``name`` of ``w`` in its natural shape (works on Vars)."""
        piece = w[self.slice(name)]
        shape = self.shapes[name]
        return piece.reshape(shape) if len(shape) != 1 else piece

    def group_ids(self) -> np.ndarray:
        """Group index of every element of the flat vector."""
        ids = np.empty(self.size, dtype=np.int64)
        for g, name in enumerate(self.shapes):
            ids[self.slice(name)] = g
        return ids

    @classmethod
    def chunks(cls, size: int, num_groups: int, prefix="g") -> "ParamLayout":
        """``num_groups`` nearly equal contiguous groups covering ``size`` elements."""
        parts = np.array_split(np.arange(size), num_groups)
        return cls({f"{prefix}{k}": (len(p),) for k, p in enumerate(parts)})


@dataclass
class HyperBlock:
    name: str
    size: int
    transform: str = "identity"

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ValueError(f"block {self.name}: unknown transform {self.transform!r}")


class HyperLayout:
    def __init__(self, blocks: Sequence[HyperBlock] = ()):
        self.blocks = {}
        self.offsets = {}
        off = 0
        for b in blocks:
            if b.name in self.blocks:
                raise ValueError(f"duplicate hyperparameter block {b.name!r}")
            self.blocks[b.name] = b
            self.offsets[b.name] = off
            off += b.size
        self.size = off

    def __contains__(self, name):
        return name in self.blocks

    def slice(self, name) -> slice:
        off = self.offsets[name]
        return slice(off, off + self.blocks[name].size)

    def get(self, theta, name):
        return theta[self.slice(name)]

    def zeros(self) -> np.ndarray:
        return np.zeros(self.size)


# --- architectures -----------------------------------------------------------

class LogisticRegression:
    """Softmax regression: a network with no hidden layer."""

    def __init__(self, num_features: int, num_classes: int):
        self.num_features = num_features
        self.num_classes = num_classes
        self.layout = ParamLayout({"weights": (num_features, num_classes),
                                   "biases": (num_classes,)})
        self.fan_in = {"weights": num_features, "biases": num_features}

    def logits(self, w, x):
        return ad.matmul(x, self.layout.view(w, "weights")) + self.layout.view(w, "biases")


class MLP:
    """tanh hidden layers, linear output layer."""

    def __init__(self, sizes: Sequence[int]):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        shapes = {}
        self.fan_in = {}
        for k, (m, n) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            shapes[f"weights{k}"] = (m, n)
            shapes[f"biases{k}"] = (n,)
            self.fan_in[f"weights{k}"] = m
            self.fan_in[f"biases{k}"] = m
        self.layout = ParamLayout(shapes)
        self.num_features = self.sizes[0]
        self.num_classes = self.sizes[-1]

    @property
    def num_layers(self):
        return len(self.sizes) - 1

    def logits(self, w, x):
        h = x
        for k in range(self.num_layers):
            h = ad.matmul(h, self.layout.view(w, f"weights{k}")) + self.layout.view(w, f"biases{k}")
            if k < self.num_layers - 1:
                h = ad.tanh(h)
        return h


# --- losses and penalties ----------------------------------------------------

def per_param_l2(w, log_penalty):
    """``0.5 * sum(exp(log_penalty) * w**2)``."""
    if np.shape(ad.value(log_penalty)) != np.shape(ad.value(w)):
        raise ValueError("one log-penalty per parameter required")
    return 0.5 * ad.vsum(ad.exp(log_penalty) * w * w)


def tied_penalty(task_weights, A_blocks):
    """Pairwise weight-tying penalty across tasks.

    ``task_weights[layer][task]`` is that task's weight array for the layer and
    ``A_blocks[layer]`` a symmetric nonnegative tasks x tasks matrix. Each
    unordered pair contributes ``A[a, b] * ||w_a - w_b||^2`` and the diagonal
    ``A[a, a] * ||w_a||^2``.
    """
    total = 0.0
    for weights, A in zip(task_weights, A_blocks):
        A_val = ad.value(A)
        m = len(weights)
        if A_val.shape != (m, m):
            raise ValueError(f"penalty matrix shape {A_val.shape} does not match {m} tasks")
        if not np.allclose(A_val, A_val.T, rtol=0, atol=0):
            raise ValueError("penalty matrix must be symmetric")
        if (A_val < 0).any():
            raise ValueError("penalty matrix entries must be nonnegative")
        for a in range(m):
            for b in range(a, m):
                diff = weights[a] if a == b else weights[a] - weights[b]
                total = total + A[a, b] * ad.vsum(diff * diff)
    return total


def tied_matrix(log_entries, num_tasks):
    """Symmetric matrix from log upper-triangle entries (diagonal included)."""
    iu = np.triu_indices(num_tasks)
    pos = np.empty((num_tasks, num_tasks), dtype=np.int64)
    pos[iu] = np.arange(len(iu[0]))
    pos[iu[1], iu[0]] = np.arange(len(iu[0]))
    return ad.exp(log_entries)[pos.ravel()].reshape((num_tasks, num_tasks))


def num_tied_entries(num_tasks):
    return num_tasks * (num_tasks + 1) // 2


def logistic_loss(w, theta, batch: Dataset, model: LogisticRegression,
                  log_l2=None):
    """Mean softmax cross-entropy plus optional per-parameter L2."""
    loss = ad.softmax_cross_entropy(model.logits(w, batch.inputs), batch.labels)
    if log_l2 is not None:
        loss = loss + per_param_l2(w, log_l2)
    return loss


def mlp_loss(w, theta, batch: Dataset, model: MLP, log_l2=None):
    loss = ad.softmax_cross_entropy(model.logits(w, batch.inputs), batch.labels)
    if log_l2 is not None:
        loss = loss + per_param_l2(w, log_l2)
    return loss


def data_hyper_loss(w, pixels, labels, model):
    """Training loss where the training inputs themselves are hyperparameters."""
    labels = np.asarray(labels)
    x = pixels.reshape((len(labels), model.num_features))
    return ad.softmax_cross_entropy(model.logits(w, x), labels)


# --- initialization --------------------------------------------------------

def init_normals(layout: ParamLayout, seed: int) -> np.ndarray:
    """Standard-normal draws, one counter-based stream per (seed, group)."""
    z = np.empty(layout.size)
    for g, name in enumerate(layout.names):
        sl = layout.slice(name)
        z[sl] = rng_for(seed, 3, g).standard_normal(sl.stop - sl.start)
    return z


def init_weights(log_scales, layout: ParamLayout, seed: int) -> np.ndarray:
    """``exp(log_scale[group]) * N(0, 1)`` per group."""
    log_scales = np.asarray(log_scales, dtype=np.float64)
    if log_scales.shape != (layout.num_groups,):
        raise ValueError(f"need {layout.num_groups} log scales, got {log_scales.shape}")
    return np.exp(log_scales)[layout.group_ids()] * init_normals(layout, seed)


def init_scale_grad(d_w1, w1, layout: ParamLayout) -> np.ndarray:
    """Chain ``d f / d w1`` to the per-group log init scales (normals held fixed)."""
    return np.bincount(layout.group_ids(), weights=d_w1 * w1, minlength=layout.num_groups)


def heuristic_log_scales(model) -> np.ndarray:
    """``log(1/sqrt(fan_in))`` for every group."""
    return np.array([-0.5 * np.log(model.fan_in[name]) for name in model.layout.names])


# --- problem bundles -------------------------------------------------------

class TrainingLoss:
    """``L(w, theta, t)``: minibatch loss on fixed data with optional regularizers.

    ``theta`` layout may include ``log_l2`` (one entry per parameter).
    """

    def __init__(self, model, train: Dataset, batches: BatchSchedule, hyper: HyperLayout):
        if train.num_classes != model.num_classes or train.num_features != model.num_features:
            raise ValueError("dataset shape does not match model")
        self.model = model
        self.train = train
        self.batches = batches
        self.hyper = hyper
        self._cache = {}

    def batch(self, t) -> Dataset:
        if t not in self._cache:
            self._cache[t] = self.train.subset(self.batches[t])
        return self._cache[t]

    def __call__(self, w, theta, t):
        b = self.batch(t)
        loss = ad.softmax_cross_entropy(self.model.logits(w, b.inputs), b.labels)
        if "log_l2" in self.hyper:
            loss = loss + per_param_l2(w, self.hyper.get(theta, "log_l2"))
        return loss


class LearnedDataLoss:
    """Training set = hyperparameter block ``pixels``; labels fixed."""

    def __init__(self, model, labels, hyper: HyperLayout):
        self.model = model
        self.labels = np.asarray(labels)
        self.hyper = hyper

    def __call__(self, w, theta, t):
        return data_hyper_loss(w, self.hyper.get(theta, "pixels"), self.labels, self.model)


class MultitaskLoss:
    """Separate nets per task, coupled only by the learned tying penalty.

    ``w`` is the concatenation of the task nets (same architecture). The
    ``log_tie{layer}`` blocks hold log upper-triangle entries of each layer's
    task-pair penalty matrix.
    """

    def __init__(self, model, tasks: Sequence[Dataset], hyper: HyperLayout, batches=None):
        self.model = model
        self.tasks = list(tasks)
        self.hyper = hyper
        self.batches = batches
        self.per_task = model.layout.size
        self.layout = ParamLayout({f"task{k}/{name}": shape
                                   for k in range(len(self.tasks))
                                   for name, shape in model.layout.shapes.items()})

    @property
    def num_tasks(self):
        return len(self.tasks)

    def task_slice(self, k):
        return slice(k * self.per_task, (k + 1) * self.per_task)

    def layer_names(self):
        return [n for n in self.model.layout.names if n.startswith("weights")]

    def __call__(self, w, theta, t):
        loss = 0.0
        nets = [w[self.task_slice(k)] for k in range(self.num_tasks)]
        for k, data in enumerate(self.tasks):
            if self.batches is not None:
                data = data.subset(self.batches[t])
            loss = loss + ad.softmax_cross_entropy(self.model.logits(nets[k], data.inputs),
                                                   data.labels)
        loss = loss / self.num_tasks
        task_weights, A_blocks = [], []
        for layer, name in enumerate(self.layer_names()):
            block = f"log_tie{layer}"
            if block not in self.hyper:
                continue
            task_weights.append([self.model.layout.view(net, name) for net in nets])
            A_blocks.append(tied_matrix(self.hyper.get(theta, block), self.num_tasks))
        if A_blocks:
            loss = loss + tied_penalty(task_weights, A_blocks)
        return loss


class MultitaskValidation:
    def __init__(self, model, tasks: Sequence[Dataset]):
        self.model = model
        self.tasks = list(tasks)
        self.per_task = model.layout.size

    def __call__(self, w):
        loss = 0.0
        for k, data in enumerate(self.tasks):
            net = w[k * self.per_task:(k + 1) * self.per_task]
            loss = loss + ad.softmax_cross_entropy(self.model.logits(net, data.inputs),
                                                   data.labels)
        return loss / len(self.tasks)


class ValidationLoss:
    """``f(w)``: mean cross-entropy on a fixed dataset, no regularizer."""

    def __init__(self, model, data: Dataset):
        self.model = model
        self.data = data

    def __call__(self, w):
        return ad.softmax_cross_entropy(self.model.logits(w, self.data.inputs), self.data.labels)

    def error_rate(self, w) -> float:
        z = ad.value(self.model.logits(np.asarray(w, dtype=np.float64), self.data.inputs))
        return float(np.mean(np.argmax(z, axis=1) != self.data.labels))


def objective_value_and_grad(f: Callable, w):
    return ad.value_and_grad(f, np.asarray(w, dtype=np.float64))

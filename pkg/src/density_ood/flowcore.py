"""
Numerical substrate for normalizing flows.

A reverse-mode automatic-differentiation tape over numpy arrays, a small
module system with named parameters, MADE masks, an invertible batch-norm
flow layer, Adam, and an early-stopping training loop.
"""

import collections
import dataclasses
import logging
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.special
from tqdm import tqdm

from density_ood.config import TrainingConfig
from density_ood.errors import ModelError, NonFiniteError
from density_ood.models import Dataset

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)

ArrayLike = Union[np.ndarray, float, int]
VJP = Callable[[np.ndarray], np.ndarray]


class Node:
    """One value on the tape, with the vector-Jacobian products to its parents."""

    __slots__ = ("value", "parents", "op", "tape", "index")
    # ndarray on the left defers to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, value: np.ndarray, op: str, tape: "Tape", index: int,
                 parents: Sequence[Tuple["Node", VJP]] = ()):
        self.value = value
        self.op = op
        self.tape = tape
        self.index = index
        self.parents = tuple(parents)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def T(self) -> "Node":
        return transpose(self)

    def reshape(self, *shape) -> "Node":
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, index): return getitem(self, index)

    def __repr__(self):
        return f"Node({self.op}, shape={self.value.shape})"


class Parameter:
    """A trainable float64 array."""

    def __init__(self, value: np.ndarray, name: str = ""):
        self.value = np.array(value, dtype=np.float64)
        self.name = name

    @property
    def size(self) -> int:
        return self.value.size


class Tape:
    """Ordered record of primitive operations with cached forward values.

    With ``record=False`` no parent links are kept, which is how models are
    evaluated. With ``check_finite=True`` any NaN or infinity aborts the
    forward pass and names the node that produced it.
    """

    def __init__(self, record: bool = True, check_finite: bool = True):
        self.record_grads = record
        self.check_finite = check_finite
        self.nodes: List[Node] = []
        self._leaves: Dict[int, Node] = {}

    def _push(self, value: np.ndarray, op: str,
              parents: Sequence[Tuple[Node, VJP]] = ()) -> Node:
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(
                "non-finite value in forward pass",
                where=f"node {len(self.nodes)} ({op})",
            )
        node = Node(value, op, self, len(self.nodes),
                    parents if self.record_grads else ())
        if self.record_grads:
            self.nodes.append(node)
        else:
            node.index = -1
        return node

    def constant(self, value: ArrayLike) -> Node:
        return self._push(np.asarray(value, dtype=np.float64), "const")

    def param(self, parameter: Parameter) -> Node:
        """Leaf node for ``parameter``, created once per tape."""
        key = id(parameter)
        if key not in self._leaves:
            self._leaves[key] = self._push(parameter.value, f"param:{parameter.name}")
        return self._leaves[key]

    def leaf_for(self, parameter: Parameter) -> Optional[Node]:
        return self._leaves.get(id(parameter))

    def backward(self, loss: Node) -> Dict[int, np.ndarray]:
        """Adjoints of every node reachable from ``loss``, keyed by node index."""
        if loss.tape is not self or not self.record_grads:
            raise ModelError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise ModelError(f"loss must be a scalar, got shape {loss.value.shape}")
        if not np.all(np.isfinite(loss.value)):
            raise NonFiniteError("loss is not finite", where=f"node {loss.index} ({loss.op})")

        adjoints: Dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = adjoints.get(node.index)
            if g is None:
                continue
            for parent, vjp in node.parents:
                contribution = vjp(g)
                if parent.index in adjoints:
                    adjoints[parent.index] = adjoints[parent.index] + contribution
                else:
                    adjoints[parent.index] = contribution
        return adjoints


def grad(loss: Node, params: Sequence[Parameter]) -> List[np.ndarray]:
    """Exact reverse-mode gradients of ``loss`` for each parameter.

    Parameters the loss does not depend on get zero gradients.
    """
    tape = loss.tape
    adjoints = tape.backward(loss)
    grads = []
    for p in params:
        leaf = tape.leaf_for(p)
        if leaf is None or leaf.index not in adjoints:
            grads.append(np.zeros_like(p.value))
        else:
            grads.append(np.asarray(adjoints[leaf.index], dtype=np.float64).reshape(p.value.shape))
    return grads


# Primitives

def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    raise ModelError("at least one operand must be a tape node")


def _lift(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else tape.constant(x)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    return tape._push(a.value + b.value, "add", [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    return tape._push(a.value - b.value, "sub", [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: -_unbroadcast(g, b.shape)),
    ])


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    return tape._push(a.value * b.value, "mul", [
        (a, lambda g: _unbroadcast(g * b.value, a.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.shape)),
    ])


def div(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    return tape._push(a.value / b.value, "div", [
        (a, lambda g: _unbroadcast(g / b.value, a.shape)),
        (b, lambda g: _unbroadcast(-g * a.value / b.value ** 2, b.shape)),
    ])


def neg(a: Node) -> Node:
    return a.tape._push(-a.value, "neg", [(a, lambda g: -g)])


def matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    return tape._push(a.value @ b.value, "matmul", [
        (a, lambda g: g @ b.value.T),
        (b, lambda g: a.value.T @ g),
    ])


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)
    return a.tape._push(y, "tanh", [(a, lambda g: g * (1.0 - y ** 2))])


def relu(a: Node) -> Node:
    active = a.value > 0
    return a.tape._push(np.where(active, a.value, 0.0), "relu",
                        [(a, lambda g: g * active)])


def exp(a: Node) -> Node:
    y = np.exp(a.value)
    return a.tape._push(y, "exp", [(a, lambda g: g * y)])


def log(a: Node) -> Node:
    return a.tape._push(np.log(a.value), "log", [(a, lambda g: g / a.value)])


def sqrt(a: Node) -> Node:
    y = np.sqrt(a.value)
    return a.tape._push(y, "sqrt", [(a, lambda g: 0.5 * g / y)])


def softplus(a: Node) -> Node:
    return a.tape._push(np.logaddexp(0.0, a.value), "softplus",
                        [(a, lambda g: g * scipy.special.expit(a.value))])


def reduce_sum(a: Node, axis: Optional[Union[int, Tuple[int, ...]]] = None,
               keepdims: bool = False) -> Node:
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return a.tape._push(np.sum(a.value, axis=axis, keepdims=keepdims), "sum", [(a, vjp)])


def reduce_mean(a: Node, axis: Optional[int] = None, keepdims: bool = False) -> Node:
    count = a.value.size if axis is None else a.value.shape[axis]
    return reduce_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def logsumexp(a: Node, axis: int = -1, keepdims: bool = False) -> Node:
    kept = scipy.special.logsumexp(a.value, axis=axis, keepdims=True)
    weights = np.exp(a.value - kept)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return g * weights

    value = kept if keepdims else np.squeeze(kept, axis=axis)
    return a.tape._push(value, "logsumexp", [(a, vjp)])


def reshape(a: Node, shape) -> Node:
    original = a.shape
    return a.tape._push(a.value.reshape(shape), "reshape",
                        [(a, lambda g: g.reshape(original))])


def transpose(a: Node, axes: Optional[Sequence[int]] = None) -> Node:
    if axes is None:
        axes = tuple(reversed(range(a.value.ndim)))
    inverse_axes = tuple(np.argsort(axes))
    return a.tape._push(np.transpose(a.value, axes), "transpose",
                        [(a, lambda g: np.transpose(g, inverse_axes))])


def getitem(a: Node, index) -> Node:
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return out

    return a.tape._push(a.value[index], "getitem", [(a, vjp)])


def standard_normal_log_prob(z: Node) -> Node:
    """Row-wise log N(z; 0, I)."""
    d = z.shape[1]
    return reduce_sum(z * z, axis=1) * -0.5 - 0.5 * d * LOG_2PI


# Modules

class Module:
    """Base class for layers and models: a tree of named parameters and buffers."""

    def __init__(self):
        object.__setattr__(self, "_parameters", collections.OrderedDict())
        object.__setattr__(self, "_modules", collections.OrderedDict())
        object.__setattr__(self, "_buffers", collections.OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            if not value.name:
                value.name = name
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, (list, tuple)) and value and all(
                isinstance(v, Module) for v in value):
            for i, module in enumerate(value):
                self._modules[f"{name}.{i}"] = module
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = name
        object.__setattr__(self, name, np.array(value, dtype=np.float64))

    def named_parameters(self, prefix: str = "") -> Iterable[Tuple[str, Parameter]]:
        for name, p in self._parameters.items():
            yield prefix + name, p
        for name, module in self._modules.items():
            yield from module.named_parameters(prefix + name + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterable[Tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, module in self._modules.items():
            yield from module.named_buffers(prefix + name + ".")

    def modules(self) -> Iterable["Module"]:
        yield self
        for module in self._modules.values():
            yield from module.modules()

    def train(self) -> "Module":
        for module in self.modules():
            object.__setattr__(module, "training", True)
        return self

    def eval(self) -> "Module":
        for module in self.modules():
            object.__setattr__(module, "training", False)
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = collections.OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.value.copy()
        for name, buf in self.named_buffers():
            state[name] = np.array(buf, copy=True)
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        expected = set(params) | {name for name, _ in self.named_buffers()}
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ModelError(f"state mismatch; missing {missing}, unexpected {extra}")
        for name, value in state.items():
            if name in params:
                if params[name].value.shape != np.shape(value):
                    raise ModelError(f"shape mismatch for {name}")
                params[name].value = np.array(value, dtype=np.float64)
            else:
                owner, attr = self._locate(name)
                object.__setattr__(owner, attr, np.array(value, dtype=np.float64))

    def _locate(self, dotted: str) -> Tuple["Module", str]:
        module = self
        parts = dotted.split(".")
        i = 0
        while i < len(parts) - 1:
            # list members are registered as "<name>.<index>"
            pair = f"{parts[i]}.{parts[i + 1]}"
            if i + 1 < len(parts) - 1 and pair in module._modules:
                module, i = module._modules[pair], i + 2
            else:
                module, i = module._modules[parts[i]], i + 1
        return module, parts[-1]


@dataclasses.dataclass
class MadeMask:
    """Degrees per layer and the binary masks they induce."""
    ordering: np.ndarray
    degrees: List[np.ndarray]
    hidden_masks: List[np.ndarray]
    output_mask: np.ndarray


def build_made_masks(d: int, hidden_sizes: Sequence[int], ordering: Sequence[int],
                     seed: int = 0) -> MadeMask:
    """MADE connectivity for inputs visited in ``ordering``.

    ``ordering[p]`` is the input dimension at autoregressive position p. Hidden
    degrees are drawn in [1, d - 1] from ``seed``; a unit of degree k sees only
    inputs of degree <= k, and output i sees only hidden units of degree < i.
    """
    if d < 2:
        raise ModelError(f"MADE needs at least two dimensions, got {d}")
    ordering = np.asarray(ordering, dtype=np.int64)
    if sorted(ordering.tolist()) != list(range(d)):
        raise ModelError("ordering must be a permutation of 0..d-1")

    input_degrees = np.empty(d, dtype=np.int64)
    input_degrees[ordering] = np.arange(1, d + 1)
    degrees = [input_degrees]
    rng = np.random.default_rng(seed)
    for size in hidden_sizes:
        low = min(int(degrees[-1].min()), d - 1)
        degrees.append(rng.integers(low, d, size=size))

    hidden_masks = [
        (prev[:, None] <= cur[None, :]).astype(np.float64)
        for prev, cur in zip(degrees[:-1], degrees[1:])
    ]
    output_mask = (degrees[-1][:, None] < input_degrees[None, :]).astype(np.float64)
    return MadeMask(ordering, degrees, hidden_masks, output_mask)


class MaskedLinear(Module):
    """Dense layer ``x @ (W * mask) + b``."""

    def __init__(self, mask: np.ndarray, rng: np.random.Generator, zero: bool = False):
        super().__init__()
        n_in, n_out = mask.shape
        self.mask = np.asarray(mask, dtype=np.float64)
        if zero:
            self.weight = Parameter(np.zeros((n_in, n_out)))
        else:
            self.weight = Parameter(rng.standard_normal((n_in, n_out)) / np.sqrt(n_in + 1))
        self.bias = Parameter(np.zeros(n_out))

    def forward(self, tape: Tape, x: Node) -> Node:
        return x @ (tape.param(self.weight) * self.mask) + tape.param(self.bias)


class Made(Module):
    """Masked autoencoder emitting per-dimension (shift, raw log-scale)."""

    def __init__(self, d: int, hidden_sizes: Sequence[int], ordering: Sequence[int],
                 seed: int = 0):
        super().__init__()
        self.d = d
        self.masks = build_made_masks(d, hidden_sizes, ordering, seed)
        rng = np.random.default_rng(seed + 1)
        self.hidden = [MaskedLinear(m, rng) for m in self.masks.hidden_masks]
        # Zero output layer: shift = 0, log-scale = 0 at initialization.
        self.head = MaskedLinear(np.hstack([self.masks.output_mask] * 2), rng, zero=True)

    def forward(self, tape: Tape, x: Node) -> Tuple[Node, Node]:
        h = x
        for layer in self.hidden:
            h = relu(layer.forward(tape, h))
        out = self.head.forward(tape, h)
        return out[:, : self.d], out[:, self.d:]


class BatchNormLayer(Module):
    """Invertible batch normalization: y = exp(log_gamma) * (x - mean) / sqrt(var + eps) + beta.

    Training mode normalizes with batch statistics and updates running ones;
    evaluation mode uses the frozen running statistics.
    """

    def __init__(self, d: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.log_gamma = Parameter(np.zeros(d))
        self.beta = Parameter(np.zeros(d))
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", np.zeros(d))
        self.register_buffer("running_var", np.ones(d))

    def forward(self, tape: Tape, x: Node) -> Tuple[Node, Node]:
        log_gamma = tape.param(self.log_gamma)
        if self.training:
            mean = reduce_mean(x, axis=0)
            centered = x - mean
            var = reduce_mean(centered * centered, axis=0)
            self.running_mean = (self.momentum * self.running_mean
                                 + (1.0 - self.momentum) * mean.value)
            self.running_var = (self.momentum * self.running_var
                                + (1.0 - self.momentum) * var.value)
            inv_std = 1.0 / sqrt(var + self.eps)
            log_var = log(var + self.eps)
        else:
            centered = x - self.running_mean
            inv_std = tape.constant(1.0 / np.sqrt(self.running_var + self.eps))
            log_var = tape.constant(np.log(self.running_var + self.eps))
        y = exp(log_gamma) * centered * inv_std + tape.param(self.beta)
        log_det = reduce_sum(log_gamma - 0.5 * log_var)
        return y, log_det * np.ones(x.shape[0])

    def inverse(self, y: np.ndarray) -> np.ndarray:
        std = np.sqrt(self.running_var + self.eps)
        return (y - self.beta.value) * np.exp(-self.log_gamma.value) * std + self.running_mean

    def set_statistics(self, x: np.ndarray) -> None:
        self.running_mean = x.mean(axis=0)
        self.running_var = x.var(axis=0)


class Adam:
    """Adam with bias correction."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.value = p.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_by_global_norm(grads: List[np.ndarray], max_norm: float) -> Tuple[List[np.ndarray], float]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


def dense_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                   step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``fn`` at the vector ``x``; row i is d out_i."""
    x = np.asarray(x, dtype=np.float64)
    columns = []
    for j in range(x.shape[0]):
        e = np.zeros_like(x)
        e[j] = step
        columns.append((fn(x + e) - fn(x - e)) / (2.0 * step))
    return np.stack(columns, axis=1)


# Training

@dataclasses.dataclass
class CurvePoint:
    epoch: int
    train_ll: float
    val_ll: float
    ood_ll: Optional[float]


@dataclasses.dataclass
class TrainState:
    """Optimizer state, early-stopping bookkeeping and the per-epoch curve."""
    optimizer: Adam
    learning_rate: float
    best_val_ll: float = -np.inf
    best_epoch: int = 0
    patience_counter: int = 0
    curve: List[CurvePoint] = dataclasses.field(default_factory=list)
    diverged: bool = False
    last_finite_epoch: int = 0
    best_state: Optional[Dict[str, np.ndarray]] = None

    @property
    def step(self) -> int:
        return self.optimizer.step_count


def mean_log_prob(model, x: np.ndarray, batch_size: int) -> float:
    """Mean of ``model.log_prob`` over rows, evaluated in batches."""
    total = 0.0
    for start in range(0, x.shape[0], batch_size):
        total += float(np.sum(model.log_prob(x[start:start + batch_size])))
    return total / x.shape[0]


def train(model: Module, train_data: Dataset, val_data: Dataset,
          ood_data: Optional[Dataset], config: TrainingConfig) -> TrainState:
    """Maximize mean training log-likelihood with minibatch Adam.

    Validation LL decides early stopping; OoD LL, when given, is only recorded.
    The best-validation parameters are restored before returning.
    """
    x_train = np.asarray(train_data.features, dtype=np.float64)
    x_val = np.asarray(val_data.features, dtype=np.float64)
    x_ood = None if ood_data is None else np.asarray(ood_data.features, dtype=np.float64)
    params = model.parameters()
    state = TrainState(optimizer=Adam(params, lr=config.learning_rate),
                       learning_rate=config.learning_rate)
    rng = np.random.default_rng(config.seed)

    def evaluate(epoch: int, train_ll: float) -> float:
        model.eval()
        val_ll = mean_log_prob(model, x_val, config.eval_batch_size)
        ood_ll = None if x_ood is None else mean_log_prob(model, x_ood, config.eval_batch_size)
        state.curve.append(CurvePoint(epoch, train_ll, val_ll, ood_ll))
        logger.debug("epoch %d train %.3f val %.3f ood %s", epoch, train_ll, val_ll, ood_ll)
        return val_ll

    initial_val = evaluate(0, mean_log_prob(model.eval(), x_train, config.eval_batch_size))
    state.best_val_ll = initial_val
    state.best_state = model.state_dict()

    epochs = tqdm(range(1, config.max_epochs + 1), desc="epochs",
                  disable=not config.progress)
    for epoch in epochs:
        model.train()
        order = rng.permutation(x_train.shape[0])
        batch_lls = []
        try:
            for start in range(0, len(order), config.batch_size):
                batch = x_train[order[start:start + config.batch_size]]
                tape = Tape()
                ll = model.log_prob_node(tape, tape.constant(batch))
                loss = -reduce_mean(ll)
                grads, _ = clip_by_global_norm(grad(loss, params), config.clip_norm)
                state.optimizer.step(grads)
                batch_lls.append(-float(loss.value))
            val_ll = evaluate(epoch, float(np.mean(batch_lls)))
        except NonFiniteError as exc:
            logger.error("Training diverged in epoch %d: %s", epoch, exc)
            state.diverged = True
            break

        if np.isnan(val_ll):
            logger.error("Validation LL is NaN after epoch %d", epoch)
            state.diverged = True
            break
        state.last_finite_epoch = epoch
        epochs.set_postfix(val_ll=f"{val_ll:.2f}")

        if val_ll > state.best_val_ll:
            state.best_val_ll = val_ll
            state.best_epoch = epoch
            state.best_state = model.state_dict()
            state.patience_counter = 0
        else:
            state.patience_counter += 1
            if state.patience_counter >= config.patience:
                logger.info("Early stopping after epoch %d (best %d)", epoch, state.best_epoch)
                break

    model.load_state_dict(state.best_state)
    model.eval()
    logger.info("Training finished: best validation LL %.3f at epoch %d",
                state.best_val_ll, state.best_epoch)
    return state

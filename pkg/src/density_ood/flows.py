"""
Normalizing-flow density models: MAF and BNAF.

Both models map data x to a base variable z ~ N(0, I) through a stack of
invertible layers and score x by log N(z) plus the summed log-determinants.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from density_ood.config import ModelFamily, ModelSpec
from density_ood.errors import ModelError, NonFiniteError
from density_ood.flowcore import (
    BatchNormLayer,
    Made,
    Module,
    Node,
    Parameter,
    Tape,
    exp,
    getitem,
    log,
    logsumexp,
    reduce_sum,
    reshape,
    softplus,
    sqrt,
    standard_normal_log_prob,
    tanh,
)
from density_ood.models import Dataset, DensityModel

logger = logging.getLogger(__name__)

LOG_SCALE_BOUND = 7.0
# exp(30) keeps inverted samples finite while flagging runaway scales.
MAX_INVERSE_LOG_SCALE = 30.0

# tag -> (flows, hidden layer widths)
MAF_ARCHITECTURES: Dict[str, Tuple[int, List[int]]] = {
    "maf5": (5, [100]),
    "maf10": (10, [1024, 1024]),
}


def _rows(x: np.ndarray, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    rows = x.reshape(1, -1) if x.ndim == 1 else x
    if rows.ndim != 2 or rows.shape[1] != d:
        raise ModelError(f"expected {d}-dimensional input, got shape {x.shape}")
    if not np.all(np.isfinite(rows)):
        raise NonFiniteError("non-finite input to log_prob")
    return rows


class ReversePermutation(Module):
    """Order reversal between flows; volume preserving."""

    def forward(self, tape: Tape, x: Node) -> Tuple[Node, Optional[Node]]:
        return x[:, ::-1], None

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return y[:, ::-1]


class MafFlow(Module):
    """One affine autoregressive step z = (x - shift) * exp(-log_scale)."""

    def __init__(self, d: int, hidden_sizes: Sequence[int], seed: int,
                 bounded: bool = True):
        super().__init__()
        self.d = d
        self.bounded = bounded
        self.made = Made(d, hidden_sizes, ordering=np.arange(d), seed=seed)

    def _log_scale(self, raw: Node) -> Node:
        if not self.bounded:
            return raw
        return tanh(raw * (1.0 / LOG_SCALE_BOUND)) * LOG_SCALE_BOUND

    def forward(self, tape: Tape, x: Node) -> Tuple[Node, Node]:
        shift, raw = self.made.forward(tape, x)
        log_scale = self._log_scale(raw)
        z = (x - shift) * exp(-log_scale)
        return z, -reduce_sum(log_scale, axis=1)

    def conditionals(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Shift and log-scale for numpy rows, without recording."""
        tape = Tape(record=False, check_finite=False)
        shift, raw = self.made.forward(tape, tape.constant(x))
        return shift.value, self._log_scale(raw).value

    def inverse(self, z: np.ndarray) -> np.ndarray:
        """Recover x one dimension at a time, following the MADE ordering."""
        x = np.zeros_like(z)
        clamped = False
        for i in self.made.masks.ordering:
            shift, log_scale = self.conditionals(x)
            scale = log_scale[:, i]
            if np.any(scale > MAX_INVERSE_LOG_SCALE):
                clamped = True
                scale = np.minimum(scale, MAX_INVERSE_LOG_SCALE)
            x[:, i] = z[:, i] * np.exp(scale) + shift[:, i]
        if clamped:
            logger.warning("Clamped log-scale at %.1f while inverting a MAF flow",
                           MAX_INVERSE_LOG_SCALE)
        return x


class FlowModel(Module, DensityModel):
    """Shared plumbing for stacked flows over a standard Normal base."""

    def __init__(self, d: int):
        super().__init__()
        self.d = d
        self.layers: List[Module] = []

    @property
    def dim(self) -> int:
        return self.d

    def push_forward(self, tape: Tape, x: Node) -> Tuple[Node, Node]:
        z = x
        log_det = tape.constant(np.zeros(x.shape[0]))
        for layer in self.layers:
            z, layer_log_det = layer.forward(tape, z)
            if layer_log_det is not None:
                log_det = log_det + layer_log_det
        return z, log_det

    def log_prob_node(self, tape: Tape, x: Node) -> Node:
        z, log_det = self.push_forward(tape, x)
        return standard_normal_log_prob(z) + log_det

    def transform(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Base variable and log-determinant for numpy rows (evaluation mode)."""
        rows = _rows(x, self.d)
        tape = Tape(record=False, check_finite=True)
        z, log_det = self.push_forward(tape, tape.constant(rows))
        return z.value, log_det.value

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        rows = _rows(x, self.d)
        tape = Tape(record=False)
        return self.log_prob_node(tape, tape.constant(rows)).value

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def metadata(self) -> Dict[str, object]:
        raise NotImplementedError


class MafModel(FlowModel):
    """Masked autoregressive flow.

    Layers run [flow, batch norm, reversal] per flow, with the last flow's
    batch norm and reversal omitted.
    """

    tag = "maf"
    supports_sampling = True

    def __init__(self, d: int, n_flows: int, hidden_sizes: Sequence[int],
                 batch_norm: bool = True, bounded_log_scale: bool = True,
                 seed: int = 0, architecture: Optional[str] = None):
        super().__init__(d)
        if n_flows < 1:
            raise ModelError(f"MAF needs at least one flow, got {n_flows}")
        self.n_flows = n_flows
        self.hidden_sizes = list(hidden_sizes)
        self.batch_norm = batch_norm
        self.bounded_log_scale = bounded_log_scale
        self.seed = seed
        self.architecture = architecture
        if architecture:
            self.tag = architecture

        layers: List[Module] = []
        for i in range(n_flows):
            layers.append(MafFlow(d, hidden_sizes, seed=seed + 2 * i,
                                  bounded=bounded_log_scale))
            if i < n_flows - 1:
                if batch_norm:
                    layers.append(BatchNormLayer(d))
                layers.append(ReversePermutation())
        self.layers = layers
        self.eval()

    def push_forward(self, tape: Tape, x: Node) -> Tuple[Node, Node]:
        evaluating = not tape.record_grads
        dead = np.zeros(x.shape[0], dtype=bool)
        z = x
        log_det = tape.constant(np.zeros(x.shape[0]))
        flow_index = 0
        with np.errstate(over="ignore", invalid="ignore"):
            for layer in self.layers:
                z, layer_log_det = layer.forward(tape, z)
                if layer_log_det is not None:
                    log_det = log_det + layer_log_det
                if not isinstance(layer, MafFlow):
                    continue
                if evaluating:
                    z, log_det, dead = self._screen(tape, z, log_det, dead, flow_index)
                flow_index += 1
        if evaluating and dead.any():
            log_det = tape.constant(np.where(dead, -np.inf, log_det.value))
        return z, log_det

    def _screen(self, tape: Tape, z: Node, log_det: Node, dead: np.ndarray,
                flow_index: int):
        values = np.column_stack([z.value, log_det.value])
        nan_rows = np.isnan(values).any(axis=1) & ~dead
        if self.bounded_log_scale:
            if not np.all(np.isfinite(values[~dead])):
                raise NonFiniteError("non-finite intermediate", where=f"flow {flow_index}")
            return z, log_det, dead
        if nan_rows.any():
            raise NonFiniteError("NaN intermediate", where=f"flow {flow_index}")
        overflow = ~np.isfinite(values).all(axis=1)
        if not overflow.any():
            return z, log_det, dead
        # Overflowed rows score -inf; zero them so later flows stay finite.
        dead = dead | overflow
        z = tape.constant(np.where(dead[:, None], 0.0, z.value))
        log_det = tape.constant(np.where(dead, 0.0, log_det.value))
        return z, log_det, dead

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        rows = _rows(x, self.d)
        tape = Tape(record=False, check_finite=False)
        z, log_det = self.push_forward(tape, tape.constant(rows))
        with np.errstate(over="ignore", invalid="ignore"):
            ll = -0.5 * np.sum(z.value ** 2, axis=1) - 0.5 * self.d * np.log(2 * np.pi)
            ll = ll + log_det.value
        if self.bounded_log_scale and not np.all(np.isfinite(ll)):
            raise NonFiniteError("non-finite log-likelihood", where=f"flow {self.n_flows - 1}")
        return np.where(np.isfinite(ll), ll, -np.inf)

    def transform(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        rows = _rows(x, self.d)
        tape = Tape(record=False, check_finite=False)
        z, log_det = self.push_forward(tape, tape.constant(rows))
        return z.value, log_det.value

    def inverse(self, z: np.ndarray) -> np.ndarray:
        """Map base rows back to data space, layer by layer in reverse."""
        x = np.asarray(z, dtype=np.float64)
        for layer in reversed(self.layers):
            x = layer.inverse(x)
        return x

    def sample(self, n: int, seed: int) -> Dataset:
        if n < 1:
            raise ModelError(f"sample size must be positive, got {n}")
        self.eval()
        z = np.random.default_rng(seed).standard_normal((n, self.d))
        return Dataset(features=self.inverse(z), name=f"{self.tag}-samples")

    def metadata(self) -> Dict[str, object]:
        return {
            "family": ModelFamily.MAF.value,
            "d": self.d,
            "n_flows": self.n_flows,
            "hidden_sizes": list(self.hidden_sizes),
            "batch_norm": self.batch_norm,
            "bounded_log_scale": self.bounded_log_scale,
            "seed": self.seed,
            "architecture": self.architecture,
        }


def maf_log_prob(model: MafModel, x: np.ndarray):
    """Exact MAF log-likelihood; a float for one vector, an array for rows."""
    out = model.log_prob(x)
    return float(out[0]) if np.asarray(x).ndim == 1 else out


def maf_sample(model: MafModel, n: int, seed: int) -> Dataset:
    return model.sample(n, seed)


class MaskedWeight(Module):
    """Block lower-triangular linear map from d*a_in to d*a_out units.

    Diagonal blocks are exp-parameterized so they stay positive, and each
    output row is weight-normalized with a learned log-gain.
    """

    def __init__(self, d: int, a_in: int, a_out: int, rng: np.random.Generator):
        super().__init__()
        self.d, self.a_in, self.a_out = d, a_in, a_out
        n_in, n_out = d * a_in, d * a_out
        block_row = np.repeat(np.arange(d), a_out)[:, None]
        block_col = np.repeat(np.arange(d), a_in)[None, :]
        self.mask_d = (block_row == block_col).astype(np.float64)
        self.mask_o = (block_row > block_col).astype(np.float64)

        bound = np.sqrt(6.0 / (n_in + n_out))
        self.weight = Parameter(rng.uniform(-bound, bound, (n_out, n_in)))
        # Zero log-gain gives unit-norm rows at initialization.
        self.diag_weight = Parameter(np.zeros((n_out, 1)))
        bias_bound = 1.0 / np.sqrt(n_out)
        self.bias = Parameter(rng.uniform(-bias_bound, bias_bound, n_out))

        rows = (np.arange(d)[:, None, None] * a_out
                + np.arange(a_out)[None, :, None])
        cols = (np.arange(d)[:, None, None] * a_in
                + np.arange(a_in)[None, None, :])
        self._block_index = (np.broadcast_to(rows, (d, a_out, a_in)),
                             np.broadcast_to(cols, (d, a_out, a_in)))

    def forward(self, tape: Tape, x: Node, log_jac: Node) -> Tuple[Node, Node]:
        raw = tape.param(self.weight)
        diag = tape.param(self.diag_weight)
        w = exp(raw) * self.mask_d + raw * self.mask_o
        sq_norm = reduce_sum(w * w, axis=1, keepdims=True)
        weight = exp(diag) * w / sqrt(sq_norm)
        y = x @ weight.T + tape.param(self.bias)

        log_weight = diag + raw - 0.5 * log(sq_norm)
        blocks = getitem(log_weight, self._block_index)
        batch = x.shape[0]
        combined = (reshape(blocks, (1, self.d, self.a_out, self.a_in))
                    + reshape(log_jac, (batch, self.d, 1, self.a_in)))
        return y, logsumexp(combined, axis=3)

    def param_count(self) -> int:
        triangle = self.d * (self.d + 1) // 2
        return self.a_out * self.a_in * triangle + 2 * self.d * self.a_out


class BnafTanh(Module):
    """Element-wise tanh that adds log tanh' to each block's log-Jacobian."""

    def __init__(self, d: int, units: int):
        super().__init__()
        self.d = d
        self.units = units

    def forward(self, tape: Tape, x: Node, log_jac: Node) -> Tuple[Node, Node]:
        # log(1 - tanh(x)^2) = -2 * (x - log 2 + softplus(-2x))
        log_grad = (x - np.log(2.0) + softplus(x * -2.0)) * -2.0
        log_grad = reshape(log_grad, (x.shape[0], self.d, self.units))
        return tanh(x), log_jac + log_grad


class BnafFlow(Module):
    """One BNAF transform with a gated residual around the block stack.

    ``y = sigmoid(gate) * f(x) + (1 - sigmoid(gate)) * x`` where ``f`` is the
    block-triangular tanh network ending at width 1 per dimension. The residual
    term keeps the map onto all of R^d.
    """

    def __init__(self, d: int, units: int, hidden_layers: int, rng: np.random.Generator):
        super().__init__()
        self.d = d
        widths = [1] + [units] * hidden_layers + [1]
        blocks: List[Module] = []
        for i, (a_in, a_out) in enumerate(zip(widths[:-1], widths[1:])):
            blocks.append(MaskedWeight(d, a_in, a_out, rng))
            if i < len(widths) - 2:
                blocks.append(BnafTanh(d, a_out))
        self.blocks = blocks
        self.gate = Parameter(np.zeros(1))

    def forward(self, tape: Tape, x: Node) -> Tuple[Node, Node]:
        log_jac = tape.constant(np.zeros((x.shape[0], self.d, 1)))
        h = x
        for block in self.blocks:
            h, log_jac = block.forward(tape, h, log_jac)
        log_f = reshape(log_jac, (x.shape[0], self.d))

        gate = tape.param(self.gate)
        log_keep = -softplus(-gate)
        log_skip = -softplus(gate)
        keep = exp(log_keep)
        y = keep * h + (1.0 - keep) * x
        # log(e^a + e^b) = a + softplus(b - a)
        log_diag = log_keep + log_f
        log_diag = log_diag + softplus(log_skip - log_diag)
        return y, reduce_sum(log_diag, axis=1)

    def param_count(self) -> int:
        blocks = sum(b.param_count() for b in self.blocks if isinstance(b, MaskedWeight))
        return blocks + self.gate.size


class BnafModel(FlowModel):
    """Block neural autoregressive flow; no analytic inverse, so no sampling."""

    tag = "bnaf"
    supports_sampling = False

    def __init__(self, d: int, n_flows: int = 6, units_per_dim: int = 12,
                 hidden_layers: int = 1, seed: int = 0):
        super().__init__(d)
        if n_flows < 1 or units_per_dim < 1 or hidden_layers < 1:
            raise ModelError("BNAF needs positive flows, units and hidden layers")
        self.n_flows = n_flows
        self.units_per_dim = units_per_dim
        self.hidden_layers = hidden_layers
        self.seed = seed
        rng = np.random.default_rng(seed)
        layers: List[Module] = []
        for i in range(n_flows):
            layers.append(BnafFlow(d, units_per_dim, hidden_layers, rng))
            if i < n_flows - 1:
                layers.append(ReversePermutation())
        self.layers = layers
        self.eval()

    def param_count(self) -> int:
        """Trainable scalars in the block-triangular weights plus one gate per flow."""
        return sum(layer.param_count() for layer in self.layers
                   if isinstance(layer, BnafFlow))

    def metadata(self) -> Dict[str, object]:
        return {
            "family": ModelFamily.BNAF.value,
            "d": self.d,
            "n_flows": self.n_flows,
            "units_per_dim": self.units_per_dim,
            "hidden_layers": self.hidden_layers,
            "seed": self.seed,
        }


def bnaf_log_prob(model: BnafModel, x: np.ndarray):
    out = model.log_prob(x)
    return float(out[0]) if np.asarray(x).ndim == 1 else out


def param_count(model: DensityModel) -> int:
    return int(model.param_count())


def calibrate_batch_norm(model: MafModel, x: np.ndarray, batch_size: int = 4096) -> None:
    """Re-estimate every batch-norm layer's running statistics on ``x``.

    Layers are calibrated in order, each on the data as transformed by the
    already-calibrated layers before it.
    """
    rows = np.asarray(x, dtype=np.float64)
    model.eval()
    current = rows
    for layer in model.layers:
        if isinstance(layer, BatchNormLayer):
            layer.set_statistics(current)
        parts = []
        for start in range(0, current.shape[0], batch_size):
            tape = Tape(record=False, check_finite=False)
            out, _ = layer.forward(tape, tape.constant(current[start:start + batch_size]))
            parts.append(out.value)
        current = np.vstack(parts)
    logger.info("Calibrated batch norm on %d rows", rows.shape[0])


def build_flow(spec: ModelSpec, d: int):
    """Construct an untrained MAF or BNAF for ``d``-dimensional data."""
    if spec.family is ModelFamily.MAF:
        n_flows, hidden = MAF_ARCHITECTURES.get(spec.architecture or "maf5",
                                                (None, None))
        if n_flows is None:
            raise ModelError(f"unknown MAF architecture '{spec.architecture}'")
        return MafModel(
            d,
            n_flows=spec.n_flows or n_flows,
            hidden_sizes=spec.hidden_sizes or hidden,
            batch_norm=spec.batch_norm,
            bounded_log_scale=spec.bounded_log_scale,
            seed=spec.seed,
            architecture=spec.architecture or "maf5",
        )
    if spec.family is ModelFamily.BNAF:
        return BnafModel(
            d,
            n_flows=spec.n_flows or 6,
            units_per_dim=spec.units_per_dim or 12,
            hidden_layers=spec.hidden_layers,
            seed=spec.seed,
        )
    raise ModelError(f"{spec.family.value} is not a flow family")


def flow_from_metadata(meta: Dict[str, object]):
    """Rebuild an untrained flow with the shapes recorded in ``meta``."""
    family = meta.get("family")
    if family == ModelFamily.MAF.value:
        return MafModel(
            int(meta["d"]),
            n_flows=int(meta["n_flows"]),
            hidden_sizes=[int(h) for h in meta["hidden_sizes"]],
            batch_norm=bool(meta["batch_norm"]),
            bounded_log_scale=bool(meta["bounded_log_scale"]),
            seed=int(meta["seed"]),
            architecture=meta.get("architecture"),
        )
    if family == ModelFamily.BNAF.value:
        return BnafModel(
            int(meta["d"]),
            n_flows=int(meta["n_flows"]),
            units_per_dim=int(meta["units_per_dim"]),
            hidden_layers=int(meta["hidden_layers"]),
            seed=int(meta["seed"]),
        )
    raise ModelError(f"no flow family '{family}'")


def maf_param_count(d: int, n_flows: int, hidden_sizes: Sequence[int],
                    batch_norm: bool = True) -> int:
    """Parameter count of a MAF without building it (for full-scale presets)."""
    widths = [d] + list(hidden_sizes) + [2 * d]
    per_flow = sum(n_in * n_out + n_out for n_in, n_out in zip(widths[:-1], widths[1:]))
    norm = 2 * d * (n_flows - 1) if batch_norm else 0
    return n_flows * per_flow + norm

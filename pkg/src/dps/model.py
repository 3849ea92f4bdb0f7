"""Deep P-spline network: structure, parameters, forward pass and model files.

Layer 1 is linear in the standardised inputs.  Its outputs are squashed by the
logistic map when consumed by the next layer, so every spline layer sees
arguments in (0, 1).  A spline layer with ``p`` neurons expands the squashed
previous-layer outputs in one shared B-spline basis, summing over inputs,
and combines the ``N`` summed basis features with one coefficient row per
neuron.  The output layer is affine, followed by softmax for classification.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numba import njit

from .basis import KnotVector, difference_op, local_basis, make_uniform_knots

FORMAT_VERSION = "1"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    """Network structure.

    ``neurons`` has one entry per layer; the last entry is the number of
    outputs (1 for regression, number of classes for classification).
    ``knots_per_layer`` gives the basis dimension of each spline layer
    (layers ``2 .. L-1``).
    """

    input_dim: int
    neurons: tuple[int, ...]
    knots_per_layer: tuple[int, ...]
    degree: int = 3
    penalty_order: int = 2
    output_kind: str = "identity"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "neurons", tuple(int(v) for v in self.neurons))
        object.__setattr__(self, "knots_per_layer", tuple(int(v) for v in self.knots_per_layer))
        self.validate()

    @property
    def num_layers(self) -> int:
        return len(self.neurons)

    @property
    def num_spline_layers(self) -> int:
        return len(self.neurons) - 2

    def validate(self) -> None:
        L = len(self.neurons)
        if self.input_dim < 1:
            raise ModelError("input_dim must be >= 1")
        if L < 2:
            raise ModelError(f"num_layers must be >= 2, got {L}")
        if any(v < 1 for v in self.neurons):
            raise ModelError(f"all neuron counts must be >= 1, got {self.neurons}")
        if len(self.knots_per_layer) != L - 2:
            raise ModelError(f"knots_per_layer needs {L - 2} entries (one per spline layer), got {len(self.knots_per_layer)}")
        if self.degree < 0:
            raise ModelError("degree must be >= 0")
        for N in self.knots_per_layer:
            if N < self.degree + 1:
                raise ModelError(f"knots_per_layer entry {N} must be >= degree+1 = {self.degree + 1}")
            if not 1 <= self.penalty_order <= N - 1:
                raise ModelError(f"penalty_order {self.penalty_order} must lie in [1, {N - 1}]")
        if self.output_kind not in ("identity", "softmax"):
            raise ModelError(f"unknown output_kind {self.output_kind!r}")
        if self.output_kind == "identity" and self.neurons[-1] != 1:
            raise ModelError("identity output requires a single output neuron")
        if self.output_kind == "softmax" and self.neurons[-1] < 2:
            raise ModelError("softmax output requires at least 2 classes")

    @classmethod
    def regression(cls, input_dim, spline_layers=2, neurons=50, knots=15, **kw) -> "NetworkSpec":
        """Uniform-width regression network with ``spline_layers`` hidden spline layers."""
        return cls(input_dim, (neurons,) * (spline_layers + 1) + (1,), (knots,) * spline_layers, **kw)

    def num_parameters(self) -> int:
        p = self.neurons
        count = p[0] * (self.input_dim + 1)
        for ell, N in enumerate(self.knots_per_layer, start=1):
            count += p[ell] * N
        return count + p[-1] * (p[-2] + 1)


@dataclass
class DpsModel:
    spec: NetworkSpec
    first_layer_weights: np.ndarray
    spline_weights: list[np.ndarray]
    knot_vectors: list[KnotVector]
    last_layer_weights: np.ndarray
    lambdas: np.ndarray
    x_mean: np.ndarray
    x_scale: np.ndarray

    def __post_init__(self):
        if len(self.knot_vectors) != self.spec.num_spline_layers:
            raise ModelError("one knot vector per spline layer required")
        for kv, N in zip(self.knot_vectors, self.spec.knots_per_layer):
            if kv.num_basis != N:
                raise ModelError("knot vector size does not match knots_per_layer")
        if np.any(np.asarray(self.lambdas) < 0):
            raise ModelError("lambdas must be non-negative")

    def params(self) -> list[np.ndarray]:
        return [self.first_layer_weights, *self.spline_weights, self.last_layer_weights]

    def with_params(self, params: Sequence[np.ndarray]) -> "DpsModel":
        k = self.spec.num_spline_layers
        return replace(
            self,
            first_layer_weights=params[0],
            spline_weights=list(params[1 : 1 + k]),
            last_layer_weights=params[1 + k],
        )

    def with_lambdas(self, lambdas) -> "DpsModel":
        return replace(self, lambdas=np.asarray(lambdas, dtype=float).copy())

    def copy(self) -> "DpsModel":
        return replace(
            self.with_params([p.copy() for p in self.params()]),
            lambdas=self.lambdas.copy(),
            x_mean=self.x_mean.copy(),
            x_scale=self.x_scale.copy(),
        )

    def standardized(self, X) -> "DpsModel":
        """Copy with input standardisation fitted to ``X``."""
        X = np.asarray(X, dtype=float)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        return replace(self, x_mean=X.mean(axis=0), x_scale=scale)

    def penalty_ops(self):
        return [difference_op(kv.num_basis, self.spec.penalty_order) for kv in self.knot_vectors]

    def predict(self, X) -> np.ndarray:
        return forward(self, X)[0]


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre: list[np.ndarray] = field(default_factory=list)
    hidden: list[np.ndarray] = field(default_factory=list)
    squashed: list[np.ndarray] = field(default_factory=list)
    features: list[np.ndarray] = field(default_factory=list)
    spans: list[np.ndarray] = field(default_factory=list)
    basis_values: list[np.ndarray] = field(default_factory=list)
    basis_derivs: list[np.ndarray] = field(default_factory=list)
    logits: np.ndarray | None = None
    output: np.ndarray | None = None

    @property
    def last_hidden(self) -> np.ndarray:
        """Input to the output layer (without intercept column)."""
        if self.hidden[1:]:
            return self.hidden[-1]
        return self.squashed[0]


def squash(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def _glorot(rng, fan_out, fan_in):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_out, fan_in))


def init_model(spec: NetworkSpec, rng_seed: int | None = None) -> DpsModel:
    """Fresh model with deterministic initial weights.

    First and last layers are Glorot-uniform (intercept column included).
    Every spline neuron starts as a linear ramp in the knot index, with a
    random slope and offset per neuron, scaled so its output stays within
    unit range; such rows lie in the null space of the order-2 penalty.
    """
    spec.validate()
    seed = spec.seed if rng_seed is None else rng_seed
    rng = np.random.default_rng(seed)
    p = spec.neurons
    d = spec.input_dim
    W1 = _glorot(rng, p[0], d + 1)
    knot_vectors = [make_uniform_knots(N, spec.degree) for N in spec.knots_per_layer]
    spline = []
    for ell, N in enumerate(spec.knots_per_layer, start=1):
        ramp = np.arange(N) / max(N - 1, 1) - 0.5
        slope = rng.uniform(-1.0, 1.0, size=p[ell]) * 2.0
        offset = rng.uniform(-0.5, 0.5, size=p[ell])
        spline.append((offset[:, None] + slope[:, None] * ramp[None, :]) / p[ell - 1])
    WL = _glorot(rng, p[-1], p[-2] + 1)
    return DpsModel(
        spec=spec,
        first_layer_weights=W1,
        spline_weights=spline,
        knot_vectors=knot_vectors,
        last_layer_weights=WL,
        lambdas=np.ones(spec.num_spline_layers),
        x_mean=np.zeros(d),
        x_scale=np.ones(d),
    )


def _spline_layer_index(model: DpsModel, layer: int) -> int:
    k = layer - 2
    if not 0 <= k < model.spec.num_spline_layers:
        raise ModelError(f"layer {layer} is not a spline layer (valid: 2..{model.spec.num_layers - 1})")
    return k


@njit(cache=True)
def _summed_kernel(span, vals, n, m, D, N):
    F = np.zeros((n, N))
    for i in range(n):
        for j in range(m):
            q = i * m + j
            base = span[q] - D
            for r in range(D + 1):
                F[i, base + r] += vals[q, r]
    return F


def _summed_features(kv: KnotVector, span: np.ndarray, vals: np.ndarray, n: int, m: int) -> np.ndarray:
    # feature[i, k] = sum over inputs of B_k; span/vals are row-major over (n, m).
    return _summed_kernel(span, vals, n, m, kv.degree, kv.num_basis)


def spline_features(model: DpsModel, layer: int, h_prev) -> np.ndarray:
    """Summed basis features ``F[i, k] = sum_m B_k(squash(h_prev[i, m]))``."""
    k = _spline_layer_index(model, layer)
    h_prev = np.asarray(h_prev, dtype=float)
    if not np.all(np.isfinite(h_prev)):
        raise ModelError(f"non-finite input to spline layer {layer}")
    kv = model.knot_vectors[k]
    n, m = h_prev.shape
    span, vals = local_basis(kv, squash(h_prev).ravel())
    return _summed_features(kv, span, vals, n, m)


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(model: DpsModel, X, need_derivs: bool = False) -> tuple[np.ndarray, ForwardCache]:
    """Network output and intermediates.

    Regression output is a length-n vector; softmax output is n x C.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    d = model.spec.input_dim
    if X.shape[1] != d:
        raise ModelError(f"expected {d} input columns, got {X.shape[1]}")
    Xs = (X - model.x_mean) / model.x_scale
    cache = ForwardCache(inputs=Xs)
    W1 = model.first_layer_weights
    u = Xs @ W1[:, 1:].T + W1[:, 0]
    cache.pre.append(u)
    cache.hidden.append(u)
    h = u
    for k, (kv, w) in enumerate(zip(model.knot_vectors, model.spline_weights)):
        if not np.all(np.isfinite(h)):
            raise ModelError(f"non-finite values entering spline layer {k + 2}")
        n, m = h.shape
        z = squash(h)
        cache.squashed.append(z)
        if need_derivs:
            span, vals, dvals = local_basis(kv, z.ravel(), derivative=True)
            cache.basis_derivs.append(dvals)
        else:
            span, vals = local_basis(kv, z.ravel())
        F = _summed_features(kv, span, vals, n, m)
        cache.spans.append(span)
        cache.basis_values.append(vals)
        cache.features.append(F)
        h = F @ w.T
        cache.pre.append(h)
        cache.hidden.append(h)
    if model.spec.num_spline_layers == 0:
        cache.squashed.append(squash(u))
    H = cache.last_hidden
    WL = model.last_layer_weights
    logits = H @ WL[:, 1:].T + WL[:, 0]
    cache.logits = logits
    if not np.all(np.isfinite(logits)):
        bad = next((i + 1 for i, a in enumerate(cache.hidden) if not np.all(np.isfinite(a))), model.spec.num_layers)
        raise ModelError(f"non-finite output; first offending layer {bad}")
    out = softmax(logits) if model.spec.output_kind == "softmax" else logits[:, 0]
    cache.output = out
    return out, cache


# -- persistence -------------------------------------------------------------


def _num(v: float) -> str:
    v = float(v)
    if not np.isfinite(v):
        raise ModelError("non-finite value in model payload")
    return format(v, ".17g")


def _emit(obj, indent=0) -> str:
    pad = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{pad}  {json.dumps(k)}: {_emit(v, indent + 1)}' for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, np.ndarray):
        return "[" + ", ".join(_num(v) for v in obj.ravel()) + "]"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_emit(v, indent + 1) for v in obj) + "]"
    if isinstance(obj, bool) or obj is None or isinstance(obj, (str, int, np.integer)):
        return json.dumps(obj if not isinstance(obj, np.integer) else int(obj))
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    raise TypeError(type(obj))


def _matrix(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": a}


def serialize(model: DpsModel) -> bytes:
    """Model file: JSON text with 17-significant-digit reals."""
    s = model.spec
    tree = {
        "format_version": FORMAT_VERSION,
        "spec": {
            "input_dim": s.input_dim,
            "neurons": list(s.neurons),
            "knots_per_layer": list(s.knots_per_layer),
            "degree": s.degree,
            "penalty_order": s.penalty_order,
            "output_kind": s.output_kind,
            "seed": s.seed,
        },
        "first_layer_weights": _matrix(model.first_layer_weights),
        "spline_weights": [_matrix(w) for w in model.spline_weights],
        "knot_vectors": [{"domain": list(kv.domain), "knots": np.asarray(kv.knots)} for kv in model.knot_vectors],
        "last_layer_weights": _matrix(model.last_layer_weights),
        "lambdas": np.asarray(model.lambdas, dtype=float),
        "input_standardization": {"mean": model.x_mean, "scale": model.x_scale},
    }
    return (_emit(tree) + "\n").encode("utf-8")


def _reject_constant(name):
    raise ModelError(f"invalid numeric constant {name} in model payload")


def _get(tree, key):
    try:
        return tree[key]
    except (KeyError, TypeError):
        raise ModelError(f"missing field {key!r}") from None


def _load_matrix(obj) -> np.ndarray:
    shape = tuple(_get(obj, "shape"))
    data = np.asarray(_get(obj, "data"), dtype=float)
    if data.size != int(np.prod(shape)):
        raise ModelError("matrix data does not match shape")
    return data.reshape(shape)


def deserialize(payload: bytes | str) -> DpsModel:
    if isinstance(payload, bytes):
        payload = payload.decode("utf-8")
    try:
        tree = json.loads(payload, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise ModelError(f"malformed model file: {exc}") from None
    version = _get(tree, "format_version")
    if version != FORMAT_VERSION:
        raise ModelError(f"unsupported format_version {version!r}")
    s = _get(tree, "spec")
    spec = NetworkSpec(
        input_dim=int(_get(s, "input_dim")),
        neurons=tuple(_get(s, "neurons")),
        knots_per_layer=tuple(_get(s, "knots_per_layer")),
        degree=int(_get(s, "degree")),
        penalty_order=int(_get(s, "penalty_order")),
        output_kind=_get(s, "output_kind"),
        seed=int(_get(s, "seed")),
    )
    kvs = []
    for item, N in zip(_get(tree, "knot_vectors"), spec.knots_per_layer):
        kvs.append(KnotVector(spec.degree, N, tuple(_get(item, "domain")), np.asarray(_get(item, "knots"), dtype=float)))
    std = _get(tree, "input_standardization")
    model = DpsModel(
        spec=spec,
        first_layer_weights=_load_matrix(_get(tree, "first_layer_weights")),
        spline_weights=[_load_matrix(w) for w in _get(tree, "spline_weights")],
        knot_vectors=kvs,
        last_layer_weights=_load_matrix(_get(tree, "last_layer_weights")),
        lambdas=np.asarray(_get(tree, "lambdas"), dtype=float),
        x_mean=np.asarray(_get(std, "mean"), dtype=float),
        x_scale=np.asarray(_get(std, "scale"), dtype=float),
    )
    _check_shapes(model)
    return model


def _check_shapes(model: DpsModel) -> None:
    s = model.spec
    p = s.neurons
    if model.first_layer_weights.shape != (p[0], s.input_dim + 1):
        raise ModelError("first_layer_weights has wrong shape")
    if len(model.spline_weights) != s.num_spline_layers:
        raise ModelError("wrong number of spline layers")
    for ell, (w, N) in enumerate(zip(model.spline_weights, s.knots_per_layer), start=1):
        if w.shape != (p[ell], N):
            raise ModelError(f"spline weights of layer {ell + 1} have wrong shape")
    if model.last_layer_weights.shape != (p[-1], p[-2] + 1):
        raise ModelError("last_layer_weights has wrong shape")
    if model.lambdas.shape != (s.num_spline_layers,):
        raise ModelError("lambdas has wrong length")

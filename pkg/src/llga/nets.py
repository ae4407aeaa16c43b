"""Small fully-connected Q-networks: a shared ReLU trunk with one linear
output head per controlled parameter, trained with a Huber loss on the taken
action of each head.  Everything is plain numpy in float64; networks here are
tiny, so clarity and exact reproducibility beat BLAS tricks."""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass

import numpy as np

from .bitstrings import ContractViolationError, as_generator

MODEL_FORMAT_VERSION = 1
HUBER_DELTA = 1.0
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ModelFormatError(ValueError):
    """A model file is unreadable or inconsistent."""


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden: tuple[int, ...]
    heads: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.input_dim < 1:
            raise ContractViolationError("input_dim must be >= 1")
        if not self.hidden or any(w < 1 for w in self.hidden):
            raise ContractViolationError("hidden widths must be positive")
        if not self.heads or any(k < 1 for k in self.heads):
            raise ContractViolationError("head sizes must be positive")


class NetworkParams:
    """Trunk and head weights; layout mirrors NetworkSpec."""

    __slots__ = ("trunk_w", "trunk_b", "head_w", "head_b")

    def __init__(self, trunk_w, trunk_b, head_w, head_b) -> None:
        self.trunk_w = trunk_w
        self.trunk_b = trunk_b
        self.head_w = head_w
        self.head_b = head_b

    def arrays(self) -> list[np.ndarray]:
        return [*self.trunk_w, *self.trunk_b, *self.head_w, *self.head_b]

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            [w.copy() for w in self.trunk_w],
            [b.copy() for b in self.trunk_b],
            [w.copy() for w in self.head_w],
            [b.copy() for b in self.head_b],
        )

    def copy_from(self, other: "NetworkParams") -> None:
        for dst, src in zip(self.arrays(), other.arrays()):
            np.copyto(dst, src)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def init_params(spec: NetworkSpec, rng) -> NetworkParams:
    """Fan-in scaled uniform weights (variance 1/fan_in), zero biases."""
    g = as_generator(rng)
    trunk_w, trunk_b = [], []
    fan_in = spec.input_dim
    for width in spec.hidden:
        bound = np.sqrt(3.0 / fan_in)
        trunk_w.append(g.uniform(-bound, bound, size=(fan_in, width)))
        trunk_b.append(np.zeros(width))
        fan_in = width
    head_w, head_b = [], []
    bound = np.sqrt(3.0 / fan_in)
    for k in spec.heads:
        head_w.append(g.uniform(-bound, bound, size=(fan_in, k)))
        head_b.append(np.zeros(k))
    return NetworkParams(trunk_w, trunk_b, head_w, head_b)


def _trunk_forward(params: NetworkParams, x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    h = x
    for w, b in zip(params.trunk_w, params.trunk_b):
        h = np.maximum(h @ w + b, 0.0)
        acts.append(h)
    return acts


def forward(params: NetworkParams, x: np.ndarray) -> list[np.ndarray]:
    """Per-head Q-values for a batch of inputs (B, input_dim)."""
    h = _trunk_forward(params, x)[-1]
    return [h @ w + b for w, b in zip(params.head_w, params.head_b)]


def backward(
    params: NetworkParams,
    x: np.ndarray,
    actions: np.ndarray,
    targets: np.ndarray,
) -> tuple[NetworkParams, float]:
    """Gradient of the mean Huber loss over taken actions.

    actions and targets are (B, n_heads); the loss averages over batch rows
    and heads, touching only each head's taken entry.  Returns grads shaped
    like params, plus the loss value.
    """
    batch, n_heads = actions.shape
    if targets.shape != actions.shape:
        raise ContractViolationError("actions and targets must have equal shape")
    if n_heads != len(params.head_w):
        raise ContractViolationError("actions second dim must match head count")
    acts = _trunk_forward(params, x)
    h_last = acts[-1]
    rows = np.arange(batch)

    denom = float(batch * n_heads)
    loss = 0.0
    grad_head_w, grad_head_b = [], []
    d_hidden = np.zeros_like(h_last)
    for d, (w, b) in enumerate(zip(params.head_w, params.head_b)):
        q = h_last @ w + b
        err = q[rows, actions[:, d]] - targets[:, d]
        abs_err = np.abs(err)
        small = abs_err <= HUBER_DELTA
        loss += float(
            np.sum(np.where(small, 0.5 * err * err,
                            HUBER_DELTA * (abs_err - 0.5 * HUBER_DELTA)))
        )
        dq_taken = np.clip(err, -HUBER_DELTA, HUBER_DELTA) / denom
        dq = np.zeros_like(q)
        dq[rows, actions[:, d]] = dq_taken
        grad_head_w.append(h_last.T @ dq)
        grad_head_b.append(dq.sum(axis=0))
        d_hidden += dq @ w.T
    loss /= denom

    grad_trunk_w = [None] * len(params.trunk_w)
    grad_trunk_b = [None] * len(params.trunk_b)
    delta = d_hidden
    for i in range(len(params.trunk_w) - 1, -1, -1):
        delta = delta * (acts[i + 1] > 0.0)
        grad_trunk_w[i] = acts[i].T @ delta
        grad_trunk_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ params.trunk_w[i].T
    grads = NetworkParams(grad_trunk_w, grad_trunk_b, grad_head_w, grad_head_b)
    return grads, loss


class AdamState:
    __slots__ = ("m", "v", "t")

    def __init__(self, m: list[np.ndarray], v: list[np.ndarray], t: int) -> None:
        self.m = m
        self.v = v
        self.t = t

    @classmethod
    def zeros_like(cls, params: NetworkParams) -> "AdamState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays],
                   [np.zeros_like(a) for a in arrays], 0)


def adam_step(
    params: NetworkParams,
    grads: NetworkParams,
    state: AdamState,
    lr: float,
) -> None:
    """One bias-corrected Adam update, in place."""
    state.t += 1
    t = state.t
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


def save_model(path, spec: NetworkSpec, params: NetworkParams) -> None:
    meta = {
        "format_version": MODEL_FORMAT_VERSION,
        "input_dim": spec.input_dim,
        "hidden": list(spec.hidden),
        "heads": list(spec.heads),
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for i, (w, b) in enumerate(zip(params.trunk_w, params.trunk_b)):
        arrays[f"trunk_w{i}"] = w
        arrays[f"trunk_b{i}"] = b
    for i, (w, b) in enumerate(zip(params.head_w, params.head_b)):
        arrays[f"head_w{i}"] = w
        arrays[f"head_b{i}"] = b
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path) -> tuple[NetworkSpec, NetworkParams]:
    """Inverse of save_model; raises ModelFormatError on any inconsistency."""
    try:
        with np.load(path) as data:
            if "meta" not in data:
                raise ModelFormatError(f"{path}: missing metadata record")
            try:
                meta = json.loads(bytes(data["meta"]).decode())
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise ModelFormatError(f"{path}: bad metadata: {exc}") from None
            if meta.get("format_version") != MODEL_FORMAT_VERSION:
                raise ModelFormatError(
                    f"{path}: unsupported format version {meta.get('format_version')!r}"
                )
            try:
                spec = NetworkSpec(
                    input_dim=int(meta["input_dim"]),
                    hidden=tuple(int(w) for w in meta["hidden"]),
                    heads=tuple(int(k) for k in meta["heads"]),
                )
            except (KeyError, TypeError, ContractViolationError) as exc:
                raise ModelFormatError(f"{path}: bad spec: {exc}") from None
            try:
                trunk_w = [data[f"trunk_w{i}"] for i in range(len(spec.hidden))]
                trunk_b = [data[f"trunk_b{i}"] for i in range(len(spec.hidden))]
                head_w = [data[f"head_w{i}"] for i in range(len(spec.heads))]
                head_b = [data[f"head_b{i}"] for i in range(len(spec.heads))]
            except KeyError as exc:
                raise ModelFormatError(f"{path}: missing array {exc}") from None
    except (OSError, zipfile.BadZipFile, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"{path}: unreadable model file: {exc}") from None

    params = NetworkParams(trunk_w, trunk_b, head_w, head_b)
    expected = _expected_shapes(spec)
    got = [a.shape for a in params.arrays()]
    if got != expected:
        raise ModelFormatError(
            f"{path}: array shapes {got} do not match spec {expected}"
        )
    return spec, params


def _expected_shapes(spec: NetworkSpec) -> list[tuple[int, ...]]:
    shapes_w, shapes_b = [], []
    fan_in = spec.input_dim
    for width in spec.hidden:
        shapes_w.append((fan_in, width))
        shapes_b.append((width,))
        fan_in = width
    head_shapes_w = [(fan_in, k) for k in spec.heads]
    head_shapes_b = [(k,) for k in spec.heads]
    return [*shapes_w, *shapes_b, *head_shapes_w, *head_shapes_b]

"""Coordinate MLP with Fourier-feature inputs, hand-rolled backprop and Adam.

The network maps encoded spatial coordinates to scalar intensities.  Every
fully-connected layer except the last is followed by either a scaled sine
(periodic) activation or a ReLU.  Forward passes return an activation tape
so gradients can be computed exactly without an autodiff framework.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("sine", "relu")
DEFAULT_OMEGA0 = 30.0


class OptimizerError(RuntimeError):
    """Raised when training produces non-finite gradients or losses."""


@dataclass(frozen=True)
class FourierEncoding:
    """Random projection for the cos/sin coordinate embedding.

    ``matrix_b`` has shape (m, n): m feature rows over n input dimensions,
    entries in cycles per unit coordinate.  The matrix is immutable; equal
    (m, n, sigma, seed) always reproduce it exactly.
    """

    matrix_b: np.ndarray
    sigma: float
    seed: int

    def __post_init__(self):
        b = np.asarray(self.matrix_b, dtype=np.float64)
        if b.ndim != 2:
            raise ValueError("matrix_b must be 2D (features x input dims)")
        b = b.copy()
        b.setflags(write=False)
        object.__setattr__(self, "matrix_b", b)

    @property
    def num_features(self) -> int:
        return 2 * self.matrix_b.shape[0]

    @property
    def input_dim(self) -> int:
        return self.matrix_b.shape[1]


def make_fourier_encoding(m: int, n: int, sigma: float, seed: int) -> FourierEncoding:
    """Sample an (m, n) Gaussian projection matrix with std ``sigma``."""
    if m < 1 or n < 1:
        raise ValueError("encoding dimensions must be positive")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    rng = np.random.default_rng(seed)
    return FourierEncoding(rng.normal(0.0, sigma, size=(m, n)), float(sigma), int(seed))


def fourier_features(coords, enc: FourierEncoding) -> np.ndarray:
    """Encode coordinates in [0, 1]^n as [cos(2*pi*B*c), sin(2*pi*B*c)].

    Output rows have length 2m and entries in [-1, 1].  Computation is done
    in the dtype of ``coords`` (float32 coordinates give float32 features).
    """
    coords = np.asarray(coords)
    if coords.ndim != 2 or coords.shape[1] != enc.input_dim:
        raise ValueError(
            f"expected coords of shape (batch, {enc.input_dim}), got {coords.shape}"
        )
    if coords.size and (coords.min() < 0.0 or coords.max() > 1.0):
        raise ValueError("coordinates must lie in [0, 1]")
    b = enc.matrix_b.astype(coords.dtype, copy=False)
    phase = (2.0 * np.pi) * (coords @ b.T)
    return np.concatenate([np.cos(phase), np.sin(phase)], axis=1)


@dataclass
class MlpParams:
    """Weights of a fully-connected network.

    ``layers`` is an ordered list of (weight, bias) pairs with weight shape
    (fan_out, fan_in).  The final layer is linear with output dimension 1.
    """

    layers: list[tuple[np.ndarray, np.ndarray]]
    activation: str = "sine"
    omega0: float = DEFAULT_OMEGA0

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def width(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def dtype(self):
        return self.layers[0][0].dtype

    def copy(self) -> "MlpParams":
        return MlpParams(
            [(w.copy(), b.copy()) for w, b in self.layers],
            activation=self.activation,
            omega0=self.omega0,
        )


@dataclass
class Tape:
    """Activation cache from one forward pass; consumed by mlp_backward."""

    params: MlpParams
    inputs: list[np.ndarray] = field(repr=False, default_factory=list)
    preacts: list[np.ndarray] = field(repr=False, default_factory=list)


def init_params(
    depth: int,
    width: int,
    input_dim: int,
    activation: str = "sine",
    seed: int = 0,
    omega0: float = DEFAULT_OMEGA0,
    dtype=np.float64,
) -> MlpParams:
    """Deterministically initialize ``depth`` weight layers.

    Sine networks use the uniform range +-1/fan_in for the first layer and
    +-sqrt(6/fan_in)/omega0 elsewhere; ReLU networks use +-sqrt(6/fan_in)
    everywhere.  Biases start at zero.
    """
    if depth < 2:
        raise ValueError("depth must be at least 2")
    if width < 1 or input_dim < 1:
        raise ValueError("width and input_dim must be positive")
    if activation not in ACTIVATIONS:
        raise ValueError(f"activation must be one of {ACTIVATIONS}")
    rng = np.random.default_rng(seed)
    dims = [input_dim] + [width] * (depth - 1) + [1]
    layers = []
    for i in range(depth):
        fan_in, fan_out = dims[i], dims[i + 1]
        if activation == "sine":
            bound = 1.0 / fan_in if i == 0 else np.sqrt(6.0 / fan_in) / omega0
        else:
            bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)
        b = np.zeros(fan_out, dtype=dtype)
        layers.append((w, b))
    return MlpParams(layers, activation=activation, omega0=float(omega0))


def mlp_forward(params: MlpParams, encoded) -> tuple[np.ndarray, Tape]:
    """Evaluate the network on a batch of encoded coordinates.

    Returns the scalar outputs (shape (batch,); the last layer has no
    activation) and the tape needed for an exact backward pass.
    """
    x = np.asarray(encoded)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(
            f"expected encoded batch of shape (batch, {params.input_dim}), got {x.shape}"
        )
    tape = Tape(params)
    a = x
    last = params.depth - 1
    for i, (w, b) in enumerate(params.layers):
        tape.inputs.append(a)
        z = a @ w.T + b
        if i < last:
            tape.preacts.append(z)
            if params.activation == "sine":
                a = np.sin(params.omega0 * z)
            else:
                a = np.maximum(z, 0.0)
        else:
            a = z
    return a[:, 0], tape


def mlp_backward(params: MlpParams, tape: Tape, output_grads) -> list:
    """Gradients of sum_i output_grads[i] * output[i] w.r.t. every weight and bias."""
    if tape.params is not params:
        raise ValueError("tape was produced by a different parameter set")
    g = np.asarray(output_grads, dtype=params.dtype)
    batch = tape.inputs[0].shape[0]
    if g.shape != (batch,):
        raise ValueError(f"expected output_grads of shape ({batch},), got {g.shape}")
    dz = g[:, None]
    grads = [None] * params.depth
    for i in range(params.depth - 1, -1, -1):
        w, _ = params.layers[i]
        a_in = tape.inputs[i]
        grads[i] = (dz.T @ a_in, dz.sum(axis=0))
        if i > 0:
            da = dz @ w
            z = tape.preacts[i - 1]
            if params.activation == "sine":
                dz = da * (params.omega0 * np.cos(params.omega0 * z))
            else:
                dz = da * (z > 0.0)
    return grads


@dataclass
class AdamState:
    """Moment estimates and hyperparameters for the Adam optimizer."""

    first_moment: list
    second_moment: list
    step_count: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_init(params: MlpParams, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              epsilon: float = 1e-8) -> AdamState:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    zeros = lambda: [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers]
    return AdamState(zeros(), zeros(), 0, float(lr), float(beta1), float(beta2),
                     float(epsilon))


def adam_step(params: MlpParams, grads, state: AdamState) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    if len(grads) != params.depth:
        raise ValueError("gradient list does not match parameter layers")
    t = state.step_count + 1
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    new_layers = []
    new_m = []
    new_v = []
    for (w, b), (gw, gb), (mw, mb), (vw, vb) in zip(
        params.layers, grads, state.first_moment, state.second_moment
    ):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ValueError("gradient shapes do not match parameter shapes")
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise OptimizerError(f"non-finite gradient at step {t}")
        mw = state.beta1 * mw + (1.0 - state.beta1) * gw
        mb = state.beta1 * mb + (1.0 - state.beta1) * gb
        vw = state.beta2 * vw + (1.0 - state.beta2) * gw**2
        vb = state.beta2 * vb + (1.0 - state.beta2) * gb**2
        new_w = w - state.lr * (mw / c1) / (np.sqrt(vw / c2) + state.epsilon)
        new_b = b - state.lr * (mb / c1) / (np.sqrt(vb / c2) + state.epsilon)
        new_layers.append((new_w, new_b))
        new_m.append((mw, mb))
        new_v.append((vw, vb))
    new_params = MlpParams(new_layers, activation=params.activation, omega0=params.omega0)
    new_state = AdamState(new_m, new_v, t, state.lr, state.beta1, state.beta2,
                          state.epsilon)
    return new_params, new_state

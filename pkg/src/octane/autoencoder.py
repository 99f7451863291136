"""Continuous-depth autoencoder: encoder/decoder state sweeps, adjoint sweeps, gradients.

Layer ``j`` maps ``f_j -> f_{j+1} = T_r(f_j + tau * T_s(sigma(K_j f_j + b_j)))``
where ``K_j`` acts on the row mode of every frontal slice and ``b_j`` is a
scalar. States live in TT format; pointwise nonlinearities and Hadamard
products are evaluated on the dense array and recompressed by the
subsequent truncation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import StepFailure, Trajectory, TruncationBudget, integrate
from .tt import TtTensor, tt_add_scalar, tt_from_dense, tt_mode1_matmul, tt_norm, tt_rank, tt_scale, tt_to_dense

MACHINE_EPS = float(np.finfo(np.float64).eps)


@dataclass
class LayerParams:
    K: np.ndarray
    b: float

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        self.b = float(self.b)
        if self.K.ndim != 2 or self.K.shape[0] != self.K.shape[1]:
            raise ValueError(f"layer weight must be square, got {self.K.shape}")
        if not (np.all(np.isfinite(self.K)) and np.isfinite(self.b)):
            raise ValueError("layer parameters must be finite")


@dataclass
class NetworkParams:
    encoder: list
    decoder: list

    def __post_init__(self):
        if len(self.encoder) < 1 or len(self.encoder) != len(self.decoder):
            raise ValueError(
                f"need a symmetric network with >= 1 layer per half, got "
                f"{len(self.encoder)} encoder / {len(self.decoder)} decoder layers"
            )
        sides = {p.K.shape[0] for p in self.encoder + self.decoder}
        if len(sides) != 1:
            raise ValueError(f"all layers must share the row dimension, got {sorted(sides)}")

    @property
    def n_layers(self) -> int:
        return len(self.encoder) + len(self.decoder)

    @property
    def n_enc(self) -> int:
        return len(self.encoder)

    @property
    def n_fr(self) -> int:
        return self.encoder[0].K.shape[0]

    @classmethod
    def zeros(cls, n_layers: int, n_fr: int) -> "NetworkParams":
        if n_layers < 2 or n_layers % 2:
            raise ValueError("layer count must be even and >= 2")
        half = n_layers // 2
        return cls([LayerParams(np.zeros((n_fr, n_fr)), 0.0) for _ in range(half)],
                   [LayerParams(np.zeros((n_fr, n_fr)), 0.0) for _ in range(half)])


@dataclass(frozen=True)
class RegWeights:
    lam1: float = 0.0
    lam2: float = 0.0
    lam3: float = 0.0
    lam4: float = 0.0

    def __post_init__(self):
        if min(self.lam1, self.lam2, self.lam3, self.lam4) < 0:
            raise ValueError("regularization weights must be nonnegative")


@dataclass
class RankProfile:
    forward_encoder: list
    forward_decoder: list
    backward_decoder: list = field(default_factory=list)
    backward_encoder: list = field(default_factory=list)


# --- activations -----------------------------------------------------------

@dataclass(frozen=True)
class Activation:
    name: str
    value: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray]


def _dtanh(x):
    return 1.0 - np.tanh(x) ** 2


TANH = Activation("tanh", np.tanh, _dtanh)


@dataclass(frozen=True)
class SmoothedRelu:
    """C1 ReLU with a quadratic knee on ``(0, delta)``."""

    delta: float = 0.1

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")

    def value(self, x):
        x = np.asarray(x, dtype=np.float64)
        d = self.delta
        return np.where(x <= 0, 0.0, np.where(x < d, x * x / (2 * d), x - d / 2))

    def derivative(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.clip(x / self.delta, 0.0, 1.0)


def _dense(t) -> np.ndarray:
    return tt_to_dense(t) if isinstance(t, TtTensor) else np.asarray(t, dtype=np.float64)


def act_tanh(t: TtTensor, tol: float = MACHINE_EPS) -> TtTensor:
    return tt_from_dense(np.tanh(tt_to_dense(t)), tol)


def act_tanh_prime(t: TtTensor, tol: float = MACHINE_EPS) -> TtTensor:
    return tt_from_dense(_dtanh(tt_to_dense(t)), tol)


def act_out(t: TtTensor, delta: float = 0.1, tol: float = MACHINE_EPS) -> TtTensor:
    return tt_from_dense(SmoothedRelu(delta).value(tt_to_dense(t)), tol)


def act_out_prime(t: TtTensor, delta: float = 0.1, tol: float = MACHINE_EPS) -> TtTensor:
    return tt_from_dense(SmoothedRelu(delta).derivative(tt_to_dense(t)), tol)


# --- layer maps ------------------------------------------------------------

def _preactivation(p: LayerParams, state: TtTensor) -> np.ndarray:
    if p.K.shape[1] != state.dims[0]:
        raise ValueError(f"weight of side {p.K.shape[0]} cannot act on row mode {state.dims[0]}")
    return tt_to_dense(tt_add_scalar(tt_mode1_matmul(p.K, state), p.b))


def layer_rhs(p: LayerParams, state: TtTensor, act: Activation = TANH, tol: float = MACHINE_EPS) -> TtTensor:
    """``act(K state + b)`` recompressed at ``tol``."""
    return tt_from_dense(act.value(_preactivation(p, state)), tol)


def _state_rhs(p: LayerParams, act: Activation):
    # dense output: the step's inner truncation does the recompression
    return lambda y: act.value(_preactivation(p, y))


def _adjoint_rhs(p: LayerParams, slope: np.ndarray):
    kt = p.K.T

    def rhs(z: TtTensor) -> np.ndarray:
        return np.einsum("pq,qci->pci", kt, tt_to_dense(z) * slope)

    return rhs


# --- sweeps ----------------------------------------------------------------

def forward_encoder(f0: TtTensor, params: NetworkParams, budget: TruncationBudget,
                    prescribed: Optional[Sequence] = None, act: Activation = TANH, strict: bool = True) -> Trajectory:
    """Encoder half. Without ``prescribed`` every step is capped at ``rank(f0)``;
    otherwise ``prescribed[j]`` caps ``f_j``."""
    if prescribed is None:
        caps = [tt_rank(f0)] * params.n_enc
    else:
        if len(prescribed) != params.n_enc + 1:
            raise ValueError("prescribed encoder ranks must have one entry per encoder state")
        caps = list(prescribed[1:])
    return integrate(f0, [_state_rhs(p, act) for p in params.encoder], budget, caps, strict=strict)


def forward_decoder(g_start: TtTensor, params: NetworkParams, budget: TruncationBudget,
                    prescribed: Sequence, act: Activation = TANH, strict: bool = True) -> Trajectory:
    """Decoder half starting from the latent state; ``prescribed[q]`` caps ``g_{N_e+q}``."""
    if len(prescribed) != len(params.decoder) + 1:
        raise ValueError("prescribed decoder ranks must have one entry per decoder state")
    return integrate(g_start, [_state_rhs(p, act) for p in params.decoder], budget, list(prescribed[1:]),
                     strict=strict)


def _backward(p_end: TtTensor, states: Sequence[TtTensor], layers: Sequence[LayerParams],
              budget: TruncationBudget, prescribed: Sequence, act: Activation, linearize: str,
              strict: bool) -> Trajectory:
    if linearize not in ("current", "next"):
        raise ValueError("linearize must be 'current' or 'next'")
    m = len(layers)
    if len(states) != m + 1 or len(prescribed) != m + 1:
        raise ValueError(f"need {m + 1} states and rank caps for {m} layers")
    rhs, caps = [], []
    for j in range(m - 1, -1, -1):
        at = states[j] if linearize == "current" else states[j + 1]
        slope = act.derivative(_preactivation(layers[j], at))
        rhs.append(_adjoint_rhs(layers[j], slope))
        caps.append(prescribed[j])
    try:
        traj = integrate(p_end, rhs, budget, caps, reverse=True, strict=strict)
    except StepFailure as exc:
        t = exc.trajectory
        exc.trajectory = Trajectory(t.states[::-1], t.ranks[::-1], t.records[::-1])
        raise
    return Trajectory(traj.states[::-1], traj.ranks[::-1], traj.records[::-1])


def backward_decoder(p_end: TtTensor, g_states: Sequence[TtTensor], params: NetworkParams,
                     budget: TruncationBudget, prescribed: Sequence, act: Activation = TANH,
                     linearize: str = "current", strict: bool = True) -> Trajectory:
    """Decoder adjoint from ``P~_N`` down to ``P~_{N_e}``; states are returned in layer order.

    ``linearize="current"`` evaluates the activation slope at ``g_j``, which
    makes the sweep the exact adjoint of the forward map. ``"next"`` uses
    ``g_{j+1}`` instead (first-order consistent only).
    """
    return _backward(p_end, g_states, params.decoder, budget, prescribed, act, linearize, strict)


def backward_encoder(p_latent: TtTensor, f_states: Sequence[TtTensor], params: NetworkParams,
                     budget: TruncationBudget, prescribed: Sequence, act: Activation = TANH,
                     linearize: str = "current", strict: bool = True) -> Trajectory:
    return _backward(p_latent, f_states, params.encoder, budget, prescribed, act, linearize, strict)


# --- objective -------------------------------------------------------------

def _check_pair(x, g):
    x, g = _dense(x), _dense(g)
    if x.shape != g.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {g.shape}")
    return x, g


def loss_fidelity(x, g_end, n: int, out_act: SmoothedRelu = SmoothedRelu(), weight: float = 1.0) -> float:
    """``weight / (2n) * ||out_act(g_end) - x||_F^2``.

    ``weight`` is the quadrature weight of one pixel; 1 gives the plain
    Frobenius norm, ``1/(rows*cols)`` the mean over the unit square.
    """
    x, g = _check_pair(x, g_end)
    r = out_act.value(g) - x
    return float(weight / (2 * n) * np.sum(r * r))


def terminal_adjoint(x, g_end, n: int, out_act: SmoothedRelu = SmoothedRelu(), weight: float = 1.0,
                     tol: float = MACHINE_EPS) -> TtTensor:
    """Negative gradient of the data term with respect to the network output."""
    x, g = _check_pair(x, g_end)
    p = -(weight / n) * out_act.derivative(g) * (out_act.value(g) - x)
    return tt_from_dense(p, tol)


def regularizer(params: NetworkParams, w: RegWeights) -> float:
    ne, nd = len(params.encoder), len(params.decoder)
    return float(
        w.lam1 / (2 * ne) * sum(np.sum(p.K**2) for p in params.encoder)
        + w.lam2 / (2 * nd) * sum(np.sum(p.K**2) for p in params.decoder)
        + w.lam3 / (2 * ne) * sum(p.b**2 for p in params.encoder)
        + w.lam4 / (2 * nd) * sum(p.b**2 for p in params.decoder)
    )


@dataclass
class Gradients:
    """Per-layer gradients, same layout as NetworkParams."""

    encoder: list
    decoder: list


def reg_grads(params: NetworkParams, w: RegWeights) -> Gradients:
    ne, nd = len(params.encoder), len(params.decoder)
    return Gradients(
        [(w.lam1 / ne * p.K, w.lam3 / ne * p.b) for p in params.encoder],
        [(w.lam2 / nd * p.K, w.lam4 / nd * p.b) for p in params.decoder],
    )


def objective(params: NetworkParams, x, g_end, w: RegWeights, n: int, out_act: SmoothedRelu = SmoothedRelu(),
              weight: float = 1.0) -> float:
    return loss_fidelity(x, g_end, n, out_act, weight) + regularizer(params, w)


def _layer_grads(states, adjoints, layers, tau, act):
    out = []
    for j, p in enumerate(layers):
        f = _dense(states[j])
        a = _dense(adjoints[j + 1]) * act.derivative(np.einsum("pq,qci->pci", p.K, f) + p.b)
        out.append((-tau * np.einsum("pci,qci->pq", a, f), -tau * float(np.sum(a))))
    return out


def design_gradients(f_states, g_states, p_states, pt_states, params: NetworkParams, w: RegWeights,
                     tau: float, act: Activation = TANH) -> Gradients:
    """Gradients of the objective with respect to every ``K_j, b_j, K~_j, b~_j``.

    Layer ``j`` pairs state ``j`` with adjoint ``j + 1``. The weight gradient
    sums ``A_i F_i^T`` over samples, with ``A = P_{j+1} * sigma'(K_j f_j + b_j)``.
    """
    ne, nd = len(params.encoder), len(params.decoder)
    if len(f_states) != ne + 1 or len(p_states) != ne + 1:
        raise ValueError("encoder states and adjoints must both cover layers 0..N_e")
    if len(g_states) != nd + 1 or len(pt_states) != nd + 1:
        raise ValueError("decoder states and adjoints must both cover layers N_e..N")
    reg = reg_grads(params, w)
    enc = _layer_grads(f_states, p_states, params.encoder, tau, act)
    dec = _layer_grads(g_states, pt_states, params.decoder, tau, act)
    return Gradients(
        [(gk + rk, gb + rb) for (gk, gb), (rk, rb) in zip(enc, reg.encoder)],
        [(gk + rk, gb + rb) for (gk, gb), (rk, rb) in zip(dec, reg.decoder)],
    )


# --- one full pass ---------------------------------------------------------

def flip(ranks: Sequence) -> list:
    return list(ranks)[::-1]


@dataclass
class Evaluation:
    value: float
    loss: float
    reg: float
    output: np.ndarray
    forward: Trajectory
    decoder: Trajectory
    profile: RankProfile
    prescribed_encoder: list
    prescribed_decoder: list
    grads: Optional[Gradients] = None
    adjoint_encoder: Optional[Trajectory] = None
    adjoint_decoder: Optional[Trajectory] = None

    @property
    def violations(self) -> int:
        """Steps whose truncation bound could not be met within the rank cap."""
        trajs = (self.forward, self.decoder, self.adjoint_decoder, self.adjoint_encoder)
        return sum(t.violations for t in trajs if t is not None)


def evaluate(params: NetworkParams, x_in: np.ndarray, x_ref: np.ndarray, budget: TruncationBudget,
             reg: RegWeights = RegWeights(), out_act: SmoothedRelu = SmoothedRelu(), weight: float = 1.0,
             encoder_caps: Optional[Sequence] = None, need_grad: bool = True, linearize: str = "current",
             input_tol: float = MACHINE_EPS, strict: bool = True,
             adjoint_norm=None) -> Evaluation:
    """Forward sweep, and optionally the adjoint sweeps and gradients, for one batch.

    ``x_in``/``x_ref`` are dense ``(rows, cols, samples)`` arrays. With
    ``encoder_caps=None`` the encoder is capped at the input rank and the
    decoder at the flipped encoder profile (training); otherwise the given
    profile prescribes both (testing). Raises StepFailure from any sweep
    unless ``strict=False``.

    The adjoint sweeps are linear in the terminal value. With
    ``adjoint_norm`` set (a number, or ``"state"`` for the norm of the
    network output) they run on the terminal adjoint rescaled to that
    Frobenius norm and are scaled back afterwards, so the absolute
    truncation bounds act at the scale of the states rather than at the
    (much smaller) scale of the loss gradient.
    """
    x_in = np.asarray(x_in, dtype=np.float64)
    n = x_in.shape[2]
    f0 = tt_from_dense(x_in, input_tol)
    fwd = forward_encoder(f0, params, budget, encoder_caps, strict=strict)
    r_e = list(fwd.ranks) if encoder_caps is None else list(encoder_caps)
    r_d = flip(r_e)
    dec = forward_decoder(fwd.states[-1], params, budget, r_d, strict=strict)
    g_end = tt_to_dense(dec.states[-1])
    loss = loss_fidelity(x_ref, g_end, n, out_act, weight)
    rv = regularizer(params, reg)
    ev = Evaluation(loss + rv, loss, rv, out_act.value(g_end), fwd, dec,
                    RankProfile(list(fwd.ranks), list(dec.ranks)), r_e, r_d)
    if not need_grad:
        return ev
    p_end = terminal_adjoint(x_ref, g_end, n, out_act, weight)
    scale = 1.0
    if adjoint_norm == "state":
        adjoint_norm = float(np.linalg.norm(g_end))
    if adjoint_norm is not None:
        pn = tt_norm(p_end)
        if pn > 0:
            scale = adjoint_norm / pn
            p_end = tt_scale(p_end, scale)
    adj_d = backward_decoder(p_end, dec.states, params, budget, r_d, linearize=linearize, strict=strict)
    adj_e = backward_encoder(adj_d.states[0], fwd.states, params, budget, r_e, linearize=linearize, strict=strict)
    if scale != 1.0:
        adj_d = Trajectory([tt_scale(p, 1 / scale) for p in adj_d.states], adj_d.ranks, adj_d.records)
        adj_e = Trajectory([tt_scale(p, 1 / scale) for p in adj_e.states], adj_e.ranks, adj_e.records)
    ev.profile.backward_decoder = list(adj_d.ranks)
    ev.profile.backward_encoder = list(adj_e.ranks)
    ev.adjoint_decoder, ev.adjoint_encoder = adj_d, adj_e
    ev.grads = design_gradients(fwd.states, dec.states, adj_e.states, adj_d.states, params, reg, budget.tau)
    return ev

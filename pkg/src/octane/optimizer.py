"""Parameter initialization, flattening, and a BFGS solver with Armijo backtracking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .autoencoder import Gradients, LayerParams, NetworkParams

CURVATURE_GUARD = 1e-12
MIN_STEP = 1e-14


def xavier_init(rows: int, cols: int, rng_seed) -> np.ndarray:
    """Uniform on ``[-sqrt(6/(rows+cols)), sqrt(6/(rows+cols))]``."""
    if rows < 1 or cols < 1:
        raise ValueError("dims must be >= 1")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    a = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-a, a, size=(rows, cols))


def init_params(n_layers: int, n_fr: int, seed, bias: str = "xavier") -> NetworkParams:
    """Xavier weights for every layer; biases use the 1x1 Xavier range or zero."""
    if n_layers < 2 or n_layers % 2:
        raise ValueError("layer count must be even and >= 2")
    if bias not in ("xavier", "zero"):
        raise ValueError("bias must be 'xavier' or 'zero'")
    rng = np.random.default_rng(seed)
    layers = []
    for _ in range(n_layers):
        k = xavier_init(n_fr, n_fr, rng)
        b = float(xavier_init(1, 1, rng)[0, 0])
        layers.append(LayerParams(k, b if bias == "xavier" else 0.0))
    half = n_layers // 2
    return NetworkParams(layers[:half], layers[half:])


# --- flat vectors ----------------------------------------------------------

@dataclass(frozen=True)
class Layout:
    n_enc: int
    n_dec: int
    n_fr: int

    @property
    def size(self) -> int:
        return (self.n_enc + self.n_dec) * (self.n_fr**2 + 1)

    def segments(self):
        """Yield ``(offset, half, layer, kind)`` for every block in vector order."""
        off, m = 0, self.n_fr**2
        for half, count in (("encoder", self.n_enc), ("decoder", self.n_dec)):
            for j in range(count):
                yield off, half, j, "K"
                yield off + m, half, j, "b"
                off += m + 1


@dataclass
class FlatParams:
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.layout.size,):
            raise ValueError(f"vector of length {self.values.size} does not match layout size {self.layout.size}")


def _pack(enc_pairs, dec_pairs, layout: Layout) -> np.ndarray:
    out = np.empty(layout.size)
    m = layout.n_fr**2
    off = 0
    for k, b in list(enc_pairs) + list(dec_pairs):
        out[off : off + m] = np.asarray(k).ravel()
        out[off + m] = b
        off += m + 1
    return out


def flatten(params: NetworkParams) -> FlatParams:
    if not params.decoder:
        raise ValueError("decoder must not be empty")
    layout = Layout(len(params.encoder), len(params.decoder), params.n_fr)
    pairs = lambda ls: [(p.K, p.b) for p in ls]
    return FlatParams(_pack(pairs(params.encoder), pairs(params.decoder), layout), layout)


def flatten_gradients(g: Gradients, layout: Layout) -> np.ndarray:
    return _pack(g.encoder, g.decoder, layout)


def unflatten(flat: FlatParams) -> NetworkParams:
    lay = flat.layout
    m = lay.n_fr**2
    layers = []
    for off, _, _, kind in lay.segments():
        if kind == "K":
            k = flat.values[off : off + m].reshape(lay.n_fr, lay.n_fr).copy()
        else:
            layers.append(LayerParams(k, float(flat.values[off])))
    return NetworkParams(layers[: lay.n_enc], layers[lay.n_enc :])


# --- BFGS ------------------------------------------------------------------

@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 30
    grad_tol: float = 1e-5
    armijo_c: float = 1e-4
    backtrack_factor: float = 0.5
    initial_step: float = 1.0
    scale_h0: bool = False

    def __post_init__(self):
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if not self.grad_tol > 0 or not self.initial_step > 0:
            raise ValueError("grad_tol and initial_step must be positive")
        if not (0 < self.armijo_c < 1 and 0 < self.backtrack_factor < 1):
            raise ValueError("armijo_c and backtrack_factor must lie in (0, 1)")


class InverseHessian:
    """BFGS inverse-Hessian approximation with ``H_0 = I``.

    Kept as the list of accepted ``(s, y)`` pairs and applied by the
    two-loop recursion, which reproduces the dense update exactly without
    storing an ``n x n`` matrix.
    """

    def __init__(self, n: int, scale_h0: bool = False):
        self.n = n
        self.pairs: list = []
        self.scale_h0 = scale_h0
        self.gamma = 1.0

    def update(self, s: np.ndarray, y: np.ndarray) -> bool:
        """Add a pair; returns False (and skips) if the curvature guard trips."""
        sy = float(s @ y)
        if sy <= CURVATURE_GUARD * np.linalg.norm(s) * np.linalg.norm(y):
            return False
        if self.scale_h0 and not self.pairs:
            self.gamma = sy / float(y @ y)
        self.pairs.append((s.copy(), y.copy(), 1.0 / sy))
        return True

    def apply(self, v: np.ndarray) -> np.ndarray:
        q = np.array(v, dtype=np.float64)
        alphas = []
        for s, y, rho in reversed(self.pairs):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        q *= self.gamma
        for (s, y, rho), a in zip(self.pairs, reversed(alphas)):
            q += (a - rho * (y @ q)) * s
        return q

    def dense(self) -> np.ndarray:
        return np.column_stack([self.apply(e) for e in np.eye(self.n)])


@dataclass
class SolveResult:
    x: np.ndarray
    value: float
    iterations: int
    converged: bool
    history: list
    skipped_updates: int = 0
    message: str = ""


def bfgs_minimize(evaluate: Callable[[np.ndarray], tuple], x0: np.ndarray, cfg: SolverConfig = SolverConfig(),
                  value_only: Optional[Callable[[np.ndarray], float]] = None) -> SolveResult:
    """Minimize with BFGS and Armijo backtracking.

    ``evaluate(x) -> (value, gradient)``. ``value_only`` is an optional
    cheaper objective used for rejected line-search trials. A non-finite
    trial value counts as a failed Armijo test. Stops when the gradient
    norm drops below ``grad_tol``, after ``max_iters`` iterations, or when
    the step underflows ``1e-14`` (then ``converged`` is False).
    """
    x = np.array(x0, dtype=np.float64)
    f, g = evaluate(x)
    f = float(f)
    g = np.asarray(g, dtype=np.float64)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise ValueError("objective must be finite at the starting point")
    h = InverseHessian(x.size, cfg.scale_h0)
    history = [f]
    skipped = 0
    it = 0
    while True:
        if np.linalg.norm(g) < cfg.grad_tol:
            return SolveResult(x, f, it, True, history, skipped, "gradient tolerance reached")
        if it >= cfg.max_iters:
            return SolveResult(x, f, it, False, history, skipped, "iteration limit reached")
        d = -h.apply(g)
        slope = float(g @ d)
        if slope >= 0:
            # lost descent (roundoff in H); restart from steepest descent
            h = InverseHessian(x.size, cfg.scale_h0)
            d, slope = -g, -float(g @ g)
        step = cfg.initial_step
        while True:
            xt = x + step * d
            if value_only is not None:
                ft = float(value_only(xt))
                gt = None
            else:
                ft, gt = evaluate(xt)
                ft = float(ft)
            if np.isfinite(ft) and ft <= f + cfg.armijo_c * step * slope:
                break
            step *= cfg.backtrack_factor
            if step < MIN_STEP:
                return SolveResult(x, f, it, False, history, skipped, "line search step underflow")
        if gt is None:
            ft, gt = evaluate(xt)
            ft = float(ft)
        gt = np.asarray(gt, dtype=np.float64)
        if not np.all(np.isfinite(gt)):
            return SolveResult(x, f, it, False, history, skipped, "non-finite gradient at accepted point")
        if not h.update(xt - x, gt - g):
            skipped += 1
        x, f, g = xt, ft, gt
        history.append(f)
        it += 1

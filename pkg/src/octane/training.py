"""Training and testing loops, memory accounting, gradient checks, and the tau-N sweep."""
from __future__ import annotations

import copy
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from .autoencoder import (
    Evaluation,
    LayerParams,
    NetworkParams,
    RegWeights,
    SmoothedRelu,
    evaluate,
    loss_fidelity,
)
from .dynamics import StepFailure, TruncationBudget
from .metrics import SsimConfig, mse, psnr_from_mse, ssim
from .optimizer import SolverConfig, bfgs_minimize, flatten, flatten_gradients, init_params, unflatten
from .tt import tt_to_dense

log = logging.getLogger(__name__)

Budget = Union[float, str]


def _resolve(rule: Budget, tau: float, power: int) -> float:
    if isinstance(rule, str):
        want = "1/tau" if power == 1 else "1/tau^2"
        if rule.replace(" ", "") != want:
            raise ValueError(f"unknown budget rule {rule!r}, expected {want!r} or a number")
        return tau ** (-power)
    return float(rule)


@dataclass(frozen=True)
class TrainConfig:
    N: int = 12
    T: float = 10.0
    m1: int = 3
    m2: int = 30
    reg: RegWeights = RegWeights(1e-5, 1e-5, 1.0, 1.0)
    M_s: Budget = "1/tau"
    M_r: Budget = "1/tau^2"
    seed: int = 0
    delta: float = 0.1
    batch_fraction: float = 0.5
    grad_tol: float = 1e-5
    test_batch: int = 20
    l2_measure: str = "area"
    linearize: str = "current"
    adjoint_norm: Union[float, str, None] = "state"
    strict: bool = False
    scale_h0: bool = True
    bias_init: str = "xavier"

    def __post_init__(self):
        if self.N < 2 or self.N % 2:
            raise ValueError(f"N must be even and >= 2, got {self.N}")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.m1 < 1 or self.m2 < 0:
            raise ValueError("need m1 >= 1 and m2 >= 0")
        if not 0 < self.batch_fraction <= 1:
            raise ValueError("batch_fraction must lie in (0, 1]")
        if self.test_batch < 1:
            raise ValueError("test_batch must be >= 1")
        if self.l2_measure not in ("area", "unit"):
            raise ValueError("l2_measure must be 'area' or 'unit'")
        if isinstance(self.adjoint_norm, str):
            if self.adjoint_norm != "state":
                raise ValueError("adjoint_norm must be 'state', a positive number, or None")
        elif self.adjoint_norm is not None and not self.adjoint_norm > 0:
            raise ValueError("adjoint_norm must be positive")
        self.budget  # validates M_s, M_r

    @property
    def tau(self) -> float:
        return self.T / self.N

    @property
    def budget(self) -> TruncationBudget:
        return TruncationBudget(self.tau, _resolve(self.M_s, self.tau, 1), _resolve(self.M_r, self.tau, 2))

    @property
    def out_act(self) -> SmoothedRelu:
        return SmoothedRelu(self.delta)

    def weight(self, shape) -> float:
        """Quadrature weight of one pixel in the data term."""
        return 1.0 / (shape[0] * shape[1]) if self.l2_measure == "area" else 1.0

    def solver(self) -> SolverConfig:
        return SolverConfig(max_iters=self.m2, grad_tol=self.grad_tol, scale_h0=self.scale_h0)


@dataclass
class Metrics:
    alpha: float
    mse: float
    psnr_db: float
    ssim: float
    tt_bytes_per_layer: list = field(default_factory=list)
    dense_bytes_per_layer: list = field(default_factory=list)
    wall_time_s: float = 0.0
    violations: int = 0

    @property
    def savings(self) -> float:
        return 1.0 - sum(self.tt_bytes_per_layer) / sum(self.dense_bytes_per_layer)


@dataclass
class TrainedModel:
    params: NetworkParams
    encoder_ranks: list
    config: TrainConfig
    batch_size: int
    image_shape: tuple

    def __post_init__(self):
        if len(self.encoder_ranks) != self.params.n_enc + 1:
            raise ValueError("need one encoder rank entry per encoder state")


@dataclass
class RoundLog:
    round: int
    alpha_train: float
    iterations: int
    converged: bool
    violations: int
    message: str = ""
    aborted: bool = False


@dataclass
class TrainResult:
    model: TrainedModel
    rounds: list
    profiles: list
    initial_alpha: float
    wall_time_s: float

    @property
    def alpha_train(self) -> list:
        return [r.alpha_train for r in self.rounds]


# --- helpers ---------------------------------------------------------------

def _seeds(seed: int, m1: int):
    """Init seed plus one mini-batch seed per round, all from one master seed."""
    children = np.random.SeedSequence(seed).spawn(m1 + 1)
    return children[0], children[1:]


def minibatch_sample(n: int, fraction: float = 0.5, rng=None) -> np.ndarray:
    """Sorted indices of a uniform subset of size ``ceil(fraction * n)`` without replacement."""
    if n < 1:
        raise ValueError("cannot sample from an empty dataset")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    k = math.ceil(fraction * n - 1e-12)
    return np.sort(rng.choice(n, size=k, replace=False))


def _check_pair(x_in, x_ref):
    x_in = np.asarray(x_in, dtype=np.float64)
    x_ref = np.asarray(x_ref, dtype=np.float64)
    if x_in.ndim != 3 or x_in.shape != x_ref.shape:
        raise ValueError(f"inputs and targets must be matching (rows, cols, samples) arrays, "
                         f"got {x_in.shape} and {x_ref.shape}")
    if x_in.shape[2] < 1:
        raise ValueError("dataset is empty")
    return x_in, x_ref


def _run(params, x_in, x_ref, cfg: TrainConfig, caps=None, need_grad=True) -> Evaluation:
    return evaluate(params, x_in, x_ref, cfg.budget, cfg.reg, cfg.out_act, cfg.weight(x_in.shape),
                    encoder_caps=caps, need_grad=need_grad, linearize=cfg.linearize, strict=cfg.strict,
                    adjoint_norm=cfg.adjoint_norm)


def transfer_caps(ranks: Sequence, dims: tuple, trained_samples: int) -> list:
    """Adapt encoder rank caps learned on batches of ``trained_samples`` to ``dims``.

    The row-mode rank carries over unchanged. The sample-mode rank is
    rescaled by the batch-size ratio (identity when sizes match) and then
    clamped to what the unfoldings of ``dims`` allow.
    """
    n_fr, n_fc, n = dims
    out = []
    for r1, r2 in ranks:
        r1 = min(int(r1), n_fr, n_fc * n)
        r2 = math.ceil(int(r2) * n / trained_samples - 1e-12) if n != trained_samples else int(r2)
        out.append((r1, max(1, min(r2, n, r1 * n_fc))))
    return out


# --- training --------------------------------------------------------------

def train(x_in, x_ref, cfg: TrainConfig, params: Optional[NetworkParams] = None) -> TrainResult:
    """Mini-batch rounds of BFGS on the regularized reconstruction objective.

    Each round draws a fresh mini-batch, restarts BFGS from the current
    weights with an identity inverse Hessian, and records the final
    objective on that mini-batch as ``alpha_train``. With ``scale_h0`` the
    first BFGS update rescales the identity by ``s'y / y'y``. A round whose first
    evaluation breaks a truncation bound (strict mode) is skipped with a
    diagnostic and the weights are left unchanged.
    """
    t0 = time.perf_counter()
    x_in, x_ref = _check_pair(x_in, x_ref)
    n_fr = x_in.shape[0]
    init_seed, round_seeds = _seeds(cfg.seed, cfg.m1)
    if params is None:
        params = init_params(cfg.N, n_fr, np.random.default_rng(init_seed), cfg.bias_init)
    elif params.n_layers != cfg.N or params.n_fr != n_fr:
        raise ValueError("initial parameters do not match the configuration")
    rounds, profiles = [], []
    initial_alpha = None
    last_eval = None
    for k, rs in enumerate(round_seeds):
        idx = minibatch_sample(x_in.shape[2], cfg.batch_fraction, np.random.default_rng(rs))
        xb, rb = x_in[:, :, idx], x_ref[:, :, idx]
        x0 = flatten(params)
        layout = x0.layout
        cache = {}

        def run(v, need_grad):
            key = (v.tobytes(), need_grad)
            if key not in cache:
                cache.clear()
                cache[key] = _run(unflatten(type(x0)(v, layout)), xb, rb, cfg, need_grad=need_grad)
            return cache[key]

        def fg(v):
            try:
                ev = run(v, True)
            except StepFailure:
                return np.inf, np.full(v.size, np.nan)
            return ev.value, flatten_gradients(ev.grads, layout)

        def f_only(v):
            try:
                return run(v, False).value
            except StepFailure:
                return np.inf

        try:
            start = _run(params, xb, rb, cfg, need_grad=True)
        except StepFailure as exc:
            log.warning("round %d aborted: %s (step %s)", k, exc, exc.step)
            rounds.append(RoundLog(k, float("nan"), 0, False, 1, str(exc), aborted=True))
            continue
        if initial_alpha is None:
            initial_alpha = start.value
        cache[(x0.values.tobytes(), True)] = start
        res = bfgs_minimize(fg, x0.values, cfg.solver(), value_only=f_only)
        params = unflatten(type(x0)(res.x, layout))
        try:
            last_eval = run(res.x, True)
        except StepFailure:
            last_eval = run(res.x, False)
        profiles.append(last_eval.profile)
        rounds.append(RoundLog(k, res.value, res.iterations, res.converged, last_eval.violations, res.message))
        log.info("round %d: alpha_train=%.6g after %d iterations (%s)", k, res.value, res.iterations, res.message)
    if last_eval is None:
        raise StepFailure("every training round was aborted", None)
    model = TrainedModel(params, list(last_eval.prescribed_encoder), cfg, len(idx), x_in.shape[:2])
    return TrainResult(model, rounds, profiles, float(initial_alpha), time.perf_counter() - t0)


# --- testing ---------------------------------------------------------------

@dataclass
class TestResult:
    metrics: Metrics
    alphas: list
    encoder_ranks: list
    decoder_ranks: list
    prescribed_encoder: list
    prescribed_decoder: list
    reconstructions: np.ndarray


def _batches(n: int, size: int):
    return [np.arange(lo, min(lo + size, n)) for lo in range(0, n, size)]


def test(model: TrainedModel, x_in, x_ref, batch_size: Optional[int] = None, ssim_cfg: SsimConfig = SsimConfig()
         ) -> TestResult:
    """Forward passes over consecutive batches with the trained rank profile prescribed.

    ``alpha`` is the mean of the per-batch objectives; MSE, PSNR and SSIM
    are computed on the full set of reconstructions. Rank and memory
    figures refer to the first batch.
    """
    t0 = time.perf_counter()
    x_in, x_ref = _check_pair(x_in, x_ref)
    if x_in.shape[:2] != tuple(model.image_shape):
        raise ValueError(f"image shape {x_in.shape[:2]} does not match the trained shape {tuple(model.image_shape)}")
    cfg = model.config
    size = batch_size or cfg.test_batch
    recon = np.empty_like(x_in)
    alphas, first, violations = [], None, 0
    for idx in _batches(x_in.shape[2], size):
        xb, rb = x_in[:, :, idx], x_ref[:, :, idx]
        caps = transfer_caps(model.encoder_ranks, xb.shape, model.batch_size)
        ev = _run(model.params, xb, rb, cfg, caps=caps, need_grad=False)
        alphas.append(ev.value)
        recon[:, :, idx] = ev.output
        violations += ev.violations
        if first is None:
            first = ev
    tt_b, dense_b, _ = memory_report(state_ranks(first), x_in.shape[:2] + (len(_batches(x_in.shape[2], size)[0]),))
    e = mse(recon, x_ref)
    metrics = Metrics(float(np.mean(alphas)), e, psnr_from_mse(e), ssim(recon, x_ref, 1.0, ssim_cfg), tt_b, dense_b,
                      time.perf_counter() - t0, violations)
    return TestResult(metrics, alphas, list(first.profile.forward_encoder), list(first.profile.forward_decoder),
                      first.prescribed_encoder, first.prescribed_decoder, recon)


def state_ranks(ev) -> list:
    """Ranks of ``f_0 .. f_{N_e} = g_{N_e} .. g_N``, one entry per layer index.

    Accepts an ``Evaluation`` or a bare ``RankProfile``.
    """
    prof = getattr(ev, "profile", ev)
    return list(prof.forward_encoder) + list(prof.forward_decoder[1:])


def memory_report(ranks: Sequence, dims: tuple, bytes_per_element: int = 8):
    """Per-layer TT and dense storage for 3-way states, and the total savings fraction."""
    if bytes_per_element < 1:
        raise ValueError("bytes_per_element must be >= 1")
    n1, n2, n3 = dims
    tt_b = [int((n1 * r1 + r1 * n2 * r2 + r2 * n3) * bytes_per_element) for r1, r2 in ranks]
    dense_b = [int(n1 * n2 * n3 * bytes_per_element)] * len(ranks)
    return tt_b, dense_b, 1.0 - sum(tt_b) / sum(dense_b)


def evaluate_split(params: NetworkParams, x_in, x_ref, cfg: TrainConfig, ssim_cfg: SsimConfig = SsimConfig()
                   ) -> Metrics:
    """Train-path forward pass (ranks adapted to the data) on a whole split."""
    x_in, x_ref = _check_pair(x_in, x_ref)
    ev = _run(params, x_in, x_ref, cfg, need_grad=False)
    e = mse(ev.output, x_ref)
    tt_b, dense_b, _ = memory_report(state_ranks(ev), x_in.shape)
    return Metrics(ev.value, e, psnr_from_mse(e), ssim(ev.output, x_ref, 1.0, ssim_cfg), tt_b, dense_b, 0.0,
                   ev.violations)


# --- sweep -----------------------------------------------------------------

@dataclass
class SweepRow:
    N: int
    T: float
    tau: float
    alpha_train: float
    alpha_valid: float
    alpha_test: float
    psnr: float
    ssim: float
    status: str = "ok"


def _sweep_cell(args):
    N, T, base, splits = args
    cfg = replace(base, N=N, T=float(T))
    nan = float("nan")
    try:
        res = train(*splits["train"], cfg)
        m = res.model
        a_valid = test(m, *splits["valid"]).metrics.alpha if "valid" in splits else nan
        tm = test(m, *splits["test"]).metrics if "test" in splits else None
    except StepFailure as exc:
        return SweepRow(N, float(T), cfg.tau, nan, nan, nan, nan, nan, f"failed: {exc}")
    return SweepRow(N, float(T), cfg.tau, res.alpha_train[-1], a_valid,
                    tm.alpha if tm else nan, tm.psnr_db if tm else nan, tm.ssim if tm else nan)


def sweep(splits: dict, N_list: Sequence[int], T_list: Sequence[float], base: TrainConfig, jobs: int = 1) -> list:
    """Independent train+test for every ``(N, T)`` cell; rows ordered by ``T`` then ``N``.

    ``splits`` maps ``"train"`` (required), ``"valid"`` and ``"test"`` to
    ``(x_in, x_ref)`` pairs.
    """
    if "train" not in splits:
        raise ValueError("a training split is required")
    cells = [(int(N), float(T), base, splits) for T in T_list for N in N_list]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_cell, cells))
    return [_sweep_cell(c) for c in cells]


# --- gradient check --------------------------------------------------------

GROUPS = ("K", "b", "Kt", "bt", "g")


@dataclass
class GradCheckInstance:
    params: NetworkParams
    x_in: np.ndarray
    x_ref: np.ndarray
    cfg: TrainConfig


def streak_instance(seed: int = 0, n_fr: int = 6, n: int = 3, N: int = 4, T: float = 1.0, residual: float = 1e-5,
                    lam: float = 1e-7, weight_scale: float = 0.5, delta: float = 1.0) -> GradCheckInstance:
    """Small smooth instance for finite-difference checks.

    Inputs are images of a few bright vertical streaks on a gray background
    with mild pixel noise, so every state has full rank. Truncation is
    switched off (budgets of 1e-12) and the target is the network output
    plus a ``residual``-sized perturbation: a small residual keeps the
    objective, and with it the roundoff in finite differences, small.
    """
    rng = np.random.default_rng(seed)
    x_in = np.full((n_fr, n_fr, n), 0.3)
    for i in range(n):
        cols = rng.choice(n_fr, 2, replace=False)
        x_in[:, cols, i] = 0.5 + 0.4 * rng.random(2)
    x_in += 0.05 * rng.random(x_in.shape)
    half = N // 2
    mk = lambda: LayerParams(weight_scale * rng.standard_normal((n_fr, n_fr)), weight_scale * rng.standard_normal())
    params = NetworkParams([mk() for _ in range(half)], [mk() for _ in range(half)])
    tau = T / N
    cfg = TrainConfig(N=N, T=T, reg=RegWeights(lam, lam, lam, lam), M_s=1e-12 / tau, M_r=1e-12 / tau**2,
                      delta=delta, l2_measure="unit", strict=True)
    out = _run(params, x_in, x_in, cfg, need_grad=False).output
    return GradCheckInstance(params, x_in, out + residual * rng.standard_normal(x_in.shape), cfg)


@dataclass
class GradCheckResult:
    rows: list  # (group, h, err_fwd, err_central)
    slopes: dict  # group -> (one-sided slope, central slope)

    def passed(self, fwd_band=(0.8, 1.2), central_band=(1.8, 2.2)) -> bool:
        return all(fwd_band[0] <= s1 <= fwd_band[1] and central_band[0] <= s2 <= central_band[1]
                   for s1, s2 in self.slopes.values())


def _perturbed(params: NetworkParams, group: str, direction: list, h: float) -> NetworkParams:
    p = copy.deepcopy(params)
    layers = p.encoder if group in ("K", "b") else p.decoder
    for layer, d in zip(layers, direction):
        if group in ("K", "Kt"):
            layer.K = layer.K + h * d
        else:
            layer.b = layer.b + h * d
    return p


def fitted_slope(hs, errs) -> float:
    """Least-squares slope of log10(err) against log10(h)."""
    errs = np.maximum(np.asarray(errs, dtype=np.float64), np.finfo(np.float64).tiny)
    return float(np.polyfit(np.log10(hs), np.log10(errs), 1)[0])


def gradient_check(inst: Optional[GradCheckInstance] = None, hs: Sequence[float] = tuple(10.0 ** -np.arange(1, 7)),
                   seed: int = 0, probe_scale: float = 2.0) -> GradCheckResult:
    """Compare analytic directional derivatives with one-sided and central differences.

    Groups: encoder weights ``K``, encoder biases ``b``, decoder weights
    ``Kt``, decoder biases ``bt``, and ``g``, the gradient of the data term
    with respect to the network output. Each group is probed along one
    random direction of norm ``probe_scale``; the errors are those of the
    difference quotients, so the expected slopes are 1 and 2.
    """
    inst = inst or streak_instance(seed)
    rng = np.random.default_rng(seed + 1)
    cfg, params = inst.cfg, inst.params
    ev = _run(params, inst.x_in, inst.x_ref, cfg)
    objective = lambda p: _run(p, inst.x_in, inst.x_ref, cfg, need_grad=False).value
    n = inst.x_in.shape[2]
    g_end = tt_to_dense(ev.decoder.states[-1])
    weight = cfg.weight(inst.x_in.shape)
    rows, slopes = [], {}
    for group in GROUPS:
        if group == "g":
            d = rng.standard_normal(g_end.shape)
            d *= probe_scale / np.linalg.norm(d)
            exact = -float(np.sum(tt_to_dense(ev.adjoint_decoder.states[-1]) * d))
            f = lambda h: loss_fidelity(inst.x_ref, g_end + h * d, n, cfg.out_act, weight)
        else:
            m = params.n_enc
            shape = (params.n_fr, params.n_fr) if group in ("K", "Kt") else ()
            d = [rng.standard_normal(shape) for _ in range(m)]
            norm = math.sqrt(sum(float(np.sum(np.square(x))) for x in d))
            d = [x * probe_scale / norm for x in d]
            grads = ev.grads.encoder if group in ("K", "b") else ev.grads.decoder
            which = 0 if group in ("K", "Kt") else 1
            exact = sum(float(np.sum(g[which] * x)) for g, x in zip(grads, d))
            f = lambda h, d=d, group=group: objective(_perturbed(params, group, d, h))
        f0 = f(0.0)
        e1, e2 = [], []
        for h in hs:
            fp, fm = f(h), f(-h)
            e1.append(abs((fp - f0) / h - exact))
            e2.append(abs((fp - fm) / (2 * h) - exact))
            rows.append((group, float(h), e1[-1], e2[-1]))
        slopes[group] = (fitted_slope(hs, e1), fitted_slope(hs, e2))
    return GradCheckResult(rows, slopes)


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["reg"] = asdict(cfg.reg)
    return d

"""Priors, likelihoods, MCMC sampling and posterior summaries for both dose models.

The toxicity and efficacy posteriors are sampled with an adaptive random-walk
Metropolis kernel on unconstrained coordinates (logit / log transforms with
Jacobian corrections), one block per model. Proposal scales follow a
Robbins-Monro recursion toward a target acceptance rate during burn-in and are
frozen afterwards. Chains are seeded independently from (seed, model, chain),
so serial and parallel execution agree draw for draw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit, logit

from .models import (
    PROB_CLIP,
    EfficacyParams,
    InvalidParamsError,
    StandardDoseGrid,
    ToxicityParams,
    UtilityTradeoff,
    _clip_prob,
)

NEG_INF = float("-inf")

# Gamma prior on the synergy parameter (shape, rate); mean 1, very diffuse.
ETA_PRIOR_SHAPE = 0.1
ETA_PRIOR_RATE = 0.1
_GAMMA_PRIOR_CONST = (ETA_PRIOR_SHAPE * math.log(ETA_PRIOR_RATE)
                      - math.lgamma(ETA_PRIOR_SHAPE))
# Normal prior scale on every spline coefficient.
BETA_PRIOR_SD = 10.0

TOX_PARAM_NAMES = ("rho00", "rho01", "rho10", "eta")
EFF_PARAM_NAMES = tuple(f"beta{i}" for i in range(12)) + ("kappa2", "kappa3", "kappa5", "kappa6")


class InitializationError(RuntimeError):
    """No finite starting point found for a chain."""


@dataclass(frozen=True)
class PatientRecord:
    """One enrolled patient: standardized doses, binary outcomes, bookkeeping."""

    x: float
    y: float
    z_t: int
    z_e: int
    stage: int
    cohort_index: int

    def __post_init__(self):
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ValueError(f"doses must be standardized to [0, 1]: ({self.x}, {self.y})")
        if self.z_t not in (0, 1) or self.z_e not in (0, 1):
            raise ValueError(f"outcomes must be binary: z_t={self.z_t}, z_e={self.z_e}")


class TrialData:
    """Enrollment-ordered patient records."""

    def __init__(self, records=()):
        self.records: list[PatientRecord] = list(records)

    def append(self, record: PatientRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def n_dlt(self) -> int:
        return sum(r.z_t for r in self.records)

    def arrays(self) -> dict[str, np.ndarray]:
        x = np.array([r.x for r in self.records], dtype=float)
        y = np.array([r.y for r in self.records], dtype=float)
        return {
            "x": x,
            "y": y,
            "xy": x * y,
            "z_t": np.array([r.z_t for r in self.records], dtype=float),
            "z_e": np.array([r.z_e for r in self.records], dtype=float),
        }


@dataclass(frozen=True)
class McmcConfig:
    n_burn: int = 2000
    n_keep: int = 2000
    thin: int = 2
    n_chains: int = 2
    target_accept: float = 0.35
    seed: int = 0

    def validate(self) -> "McmcConfig":
        if min(self.n_burn, self.n_keep, self.thin, self.n_chains) < 1:
            raise ValueError("MCMC sizes must be positive")
        if not (0.2 <= self.target_accept <= 0.5):
            raise ValueError(f"target_accept must be in [0.2, 0.5], got {self.target_accept}")
        return self

    def doubled(self) -> "McmcConfig":
        """Budget used for the final recommendation fit."""
        return McmcConfig(self.n_burn * 2, self.n_keep * 2, self.thin,
                          self.n_chains, self.target_accept, self.seed)


@dataclass
class Diagnostics:
    accept_tox: tuple[float, ...] = ()
    accept_eff: tuple[float, ...] = ()
    split_rhat: dict[str, float] = field(default_factory=dict)

    def max_rhat(self) -> float:
        return max(self.split_rhat.values()) if self.split_rhat else float("nan")


@dataclass
class ChainSet:
    """Posterior draws of both marginal models, stacked across chains.

    tox_draws columns follow TOX_PARAM_NAMES; eff_draws columns follow
    EFF_PARAM_NAMES (efficacy may be absent when only the toxicity model was
    fit). Immutable by convention once returned from sample_chains.
    """

    tox_draws: np.ndarray
    eff_draws: np.ndarray | None
    n_chains: int
    n_keep: int
    diagnostics: Diagnostics

    @property
    def size(self) -> int:
        return self.tox_draws.shape[0]

    def tox_param(self, i: int) -> ToxicityParams:
        r00, r01, r10, eta = self.tox_draws[i]
        return ToxicityParams(rho00=float(r00), rho01=float(r01), rho10=float(r10), eta=float(eta))

    def eff_param(self, i: int) -> EfficacyParams:
        if self.eff_draws is None:
            raise ValueError("efficacy draws were not sampled")
        row = self.eff_draws[i]
        return EfficacyParams.from_named(beta=row[:12], kappa2=row[12], kappa3=row[13],
                                         kappa5=row[14], kappa6=row[15])

    @classmethod
    def from_params(cls, tox_params, eff_params=None) -> "ChainSet":
        """Assemble a ChainSet from explicit parameter draws (tests, fixtures)."""
        tox = np.array([[p.rho00, p.rho01, p.rho10, p.eta] for p in tox_params], dtype=float)
        eff = None
        if eff_params is not None:
            eff = np.array(
                [list(p.beta) + [p.knots[1], p.knots[2], p.knots[4], p.knots[5]] for p in eff_params],
                dtype=float,
            )
            if eff.shape[0] != tox.shape[0]:
                raise ValueError("toxicity and efficacy draw counts must match for pairing")
        return cls(tox_draws=tox, eff_draws=eff, n_chains=1, n_keep=tox.shape[0],
                   diagnostics=Diagnostics())


@dataclass
class PosteriorSummary:
    """Posterior-mean surfaces on the dose grid plus a fine utility lattice."""

    pi_t_hat: np.ndarray
    pi_e_hat: np.ndarray
    u_hat: np.ndarray
    lattice_u_hat: np.ndarray
    lattice_resolution: int
    safe_set: list[tuple[int, int]]
    theta_T: float


# ---------------------------------------------------------------------------
# Log densities (constrained parameterization)
# ---------------------------------------------------------------------------

def _gamma_logpdf(eta: float) -> float:
    a, b = ETA_PRIOR_SHAPE, ETA_PRIOR_RATE
    return a * math.log(b) - math.lgamma(a) + (a - 1.0) * math.log(eta) - b * eta


_BETA_NORM_CONST = -math.log(BETA_PRIOR_SD * math.sqrt(2.0 * math.pi))


def _tox_loglik(a0, a1, a2, eta, arr) -> float:
    u = a0 + a1 * arr["x"] + a2 * arr["y"] + eta * arr["xy"]
    zt = arr["z_t"]
    return float(zt @ log_expit(u) + (1.0 - zt) @ log_expit(-u))


def log_posterior_toxicity(p: ToxicityParams, data: TrialData) -> float:
    """Unnormalized log posterior of the toxicity model; -inf outside support.

    Priors: rho01 and rho10 uniform on (0, 1); rho00 / min(rho01, rho10)
    uniform on (0, 1) conditionally (density 1/min after change of variables);
    eta gamma-distributed with mean 1.
    """
    m = min(p.rho01, p.rho10)
    if not (0.0 < p.rho01 < 1.0 and 0.0 < p.rho10 < 1.0 and 0.0 < p.rho00 <= m and p.eta > 0.0):
        return NEG_INF
    log_prior = -math.log(m) + _gamma_logpdf(p.eta)
    a0, a1, a2 = p.alphas()
    return _tox_loglik(a0, a1, a2, p.eta, data.arrays()) + log_prior


def _eff_basis(arr) -> dict[str, np.ndarray]:
    x, y = arr["x"], arr["y"]
    return {
        "x": x, "x2": x * x, "x3": x**3,
        "y": y, "y2": y * y, "y3": y**3,
        "xy": arr["xy"], "z_e": arr["z_e"],
    }


def _eff_loglik(beta, k2, k3, k5, k6, basis) -> float:
    b = beta
    x, y = basis["x"], basis["y"]
    u = (b[0] + b[1] * x + b[2] * basis["x2"] + b[3] * basis["x3"]
         + b[4] * np.maximum(x - k2, 0.0) ** 3 + b[5] * np.maximum(x - k3, 0.0) ** 3
         + b[6] * y + b[7] * basis["y2"] + b[8] * basis["y3"]
         + b[9] * np.maximum(y - k5, 0.0) ** 3 + b[10] * np.maximum(y - k6, 0.0) ** 3
         + b[11] * basis["xy"])
    ze = basis["z_e"]
    return float(ze @ log_expit(u) + (1.0 - ze) @ log_expit(-u))


def log_posterior_efficacy(p: EfficacyParams, data: TrialData) -> float:
    """Unnormalized log posterior of the efficacy model; -inf outside support.

    Priors: every spline coefficient N(0, 10^2); each ordered knot pair
    uniform on the triangle 0 <= lower < upper <= 1 (density 2).
    """
    if not p.is_valid():
        return NEG_INF
    beta = np.asarray(p.beta, dtype=float)
    log_prior = float(np.sum(-0.5 * (beta / BETA_PRIOR_SD) ** 2 + _BETA_NORM_CONST))
    log_prior += 2.0 * math.log(2.0)
    k = p.knots
    basis = _eff_basis(data.arrays())
    return _eff_loglik(p.beta, k[1], k[2], k[4], k[5], basis) + log_prior


# ---------------------------------------------------------------------------
# Unconstrained-space targets used by the sampler
# ---------------------------------------------------------------------------

def _log_expit_scalar(v: float) -> float:
    if v >= 0.0:
        return -math.log1p(math.exp(-v))
    return v - math.log1p(math.exp(v))


def _make_tox_target(arr):
    """Log density over t = (logit rho01, logit rho10, logit ratio, log eta)."""
    x, y, xy, zt = arr["x"], arr["y"], arr["xy"], arr["z_t"]
    onemz = 1.0 - zt
    has_data = x.size > 0

    def target(t):
        t0, t1, t2, t3 = t
        l01 = _log_expit_scalar(t0)
        l01c = _log_expit_scalar(-t0)
        l10 = _log_expit_scalar(t1)
        l10c = _log_expit_scalar(-t1)
        lr = _log_expit_scalar(t2)
        lrc = _log_expit_scalar(-t2)
        log_m = min(l01, l10)
        # log rho00 = log r + log m; clamp away from 0 and 1 via logs
        log_rho00 = lr + log_m
        if log_rho00 < -700.0 or t3 > 700.0:
            return NEG_INF
        rho00 = math.exp(log_rho00)
        eta = math.exp(t3)
        # log prior (constrained) + log |Jacobian|
        lp = -log_m + (_GAMMA_PRIOR_CONST + ETA_PRIOR_SHAPE * t3 - ETA_PRIOR_RATE * eta)
        lp += (l01 + l01c) + (l10 + l10c) + log_m + (lr + lrc)
        if has_data:
            r00 = min(max(rho00, PROB_CLIP), 1.0 - PROB_CLIP)
            a0 = math.log(r00 / (1.0 - r00))
            a1 = t1 - a0
            a2 = t0 - a0
            u = a0 + a1 * x + a2 * y + eta * xy
            lp += float(zt @ log_expit(u) + onemz @ log_expit(-u))
        return lp

    def to_params(t_rows: np.ndarray) -> np.ndarray:
        r01 = expit(t_rows[:, 0])
        r10 = expit(t_rows[:, 1])
        r = expit(t_rows[:, 2])
        eta = np.exp(t_rows[:, 3])
        rho00 = r * np.minimum(r01, r10)
        return np.column_stack([rho00, r01, r10, eta])

    return target, to_params


def _make_eff_target(arr):
    """Log density over t = (beta0..beta11, 4 transformed ordered-knot coords)."""
    basis = _eff_basis(arr)
    x, y = basis["x"], basis["y"]
    x2, x3, y2, y3, xy = basis["x2"], basis["x3"], basis["y2"], basis["y3"], basis["xy"]
    ze = basis["z_e"]
    onemz = 1.0 - ze
    has_data = x.size > 0
    prior_const = 12.0 * _BETA_NORM_CONST + 2.0 * math.log(2.0)

    def target(t):
        b = t[:12]
        lp = prior_const - 0.5 * float(b @ b) / (BETA_PRIOR_SD * BETA_PRIOR_SD)
        for j in (12, 14):
            tk, ts = t[j], t[j + 1]
            lk = _log_expit_scalar(tk)
            lkc = _log_expit_scalar(-tk)
            ls = _log_expit_scalar(ts)
            lsc = _log_expit_scalar(-ts)
            lp += lk + 2.0 * lkc + ls + lsc
        if has_data:
            k2 = expit(t[12])
            k3 = k2 + expit(t[13]) * (1.0 - k2)
            k5 = expit(t[14])
            k6 = k5 + expit(t[15]) * (1.0 - k5)
            u = (b[0] + b[1] * x + b[2] * x2 + b[3] * x3
                 + b[4] * np.maximum(x - k2, 0.0) ** 3 + b[5] * np.maximum(x - k3, 0.0) ** 3
                 + b[6] * y + b[7] * y2 + b[8] * y3
                 + b[9] * np.maximum(y - k5, 0.0) ** 3 + b[10] * np.maximum(y - k6, 0.0) ** 3
                 + b[11] * xy)
            lp += float(ze @ log_expit(u) + onemz @ log_expit(-u))
        return lp

    def to_params(t_rows: np.ndarray) -> np.ndarray:
        k2 = expit(t_rows[:, 12])
        k3 = k2 + expit(t_rows[:, 13]) * (1.0 - k2)
        k5 = expit(t_rows[:, 14])
        k6 = k5 + expit(t_rows[:, 15]) * (1.0 - k5)
        return np.column_stack([t_rows[:, :12], k2, k3, k5, k6])

    return target, to_params


# ---------------------------------------------------------------------------
# Adaptive random-walk Metropolis
# ---------------------------------------------------------------------------

def _run_chain(target, t0: np.ndarray, cfg: McmcConfig, rng: np.random.Generator):
    """One chain; returns (kept unconstrained draws, post-burn acceptance rate)."""
    dim = t0.size
    n_post = cfg.n_keep * cfg.thin
    iters = cfg.n_burn + n_post
    noise = rng.standard_normal((iters, dim))
    accept_u = rng.random(iters)

    cur = t0.astype(float).copy()
    cur_lp = target(cur)
    if not math.isfinite(cur_lp):
        raise InitializationError("chain started at a non-finite log posterior")

    log_scale = math.log(2.38 / math.sqrt(dim))
    mean = cur.copy()
    m2 = np.zeros(dim)
    sd = np.ones(dim)
    step = math.exp(log_scale) * sd
    kept = np.empty((cfg.n_keep, dim))
    accepts_post = 0

    for i in range(iters):
        prop = cur + step * noise[i]
        lp = target(prop)
        ratio = lp - cur_lp
        if ratio >= 0.0:
            accepted = True
            acc_prob = 1.0
        else:
            acc_prob = math.exp(ratio) if ratio > -50.0 else 0.0
            accepted = accept_u[i] < acc_prob
        if accepted:
            cur = prop
            cur_lp = lp

        if i < cfg.n_burn:
            # Robbins-Monro on the global scale, Welford on per-coordinate spread.
            log_scale += (acc_prob - cfg.target_accept) / (i + 1.0) ** 0.6
            delta = cur - mean
            mean += delta / (i + 2.0)
            m2 += delta * (cur - mean)
            if i >= 50:
                sd = np.sqrt(np.maximum(m2 / (i + 1.0), 1e-6))
            step = math.exp(log_scale) * sd
        else:
            j = i - cfg.n_burn
            if accepted:
                accepts_post += 1
            if (j + 1) % cfg.thin == 0:
                kept[(j + 1) // cfg.thin - 1] = cur

    return kept, accepts_post / n_post


def _split_rhat(per_chain: np.ndarray) -> float:
    """Split-Rhat over a (n_chains, n_keep) array of one parameter."""
    n_keep = per_chain.shape[1]
    half = n_keep // 2
    if half < 2:
        return float("nan")
    seqs = np.concatenate([per_chain[:, :half], per_chain[:, n_keep - half:]], axis=0)
    w = seqs.var(axis=1, ddof=1).mean()
    if w <= 1e-300:
        return 1.0
    b = half * seqs.mean(axis=1).var(ddof=1)
    var_plus = (half - 1) / half * w + b / half
    return float(math.sqrt(var_plus / w))


def _init_tox_state(rng: np.random.Generator, target) -> np.ndarray:
    for _ in range(100):
        r01 = rng.uniform()
        r10 = rng.uniform()
        ratio = rng.uniform()
        eta = rng.gamma(ETA_PRIOR_SHAPE, 1.0 / ETA_PRIOR_RATE)
        if min(r01, r10, ratio, eta) <= 0.0 or max(r01, r10, ratio) >= 1.0:
            continue
        t0 = np.array([float(logit(r01)), float(logit(r10)), float(logit(ratio)), math.log(eta)])
        if math.isfinite(target(t0)):
            return t0
    raise InitializationError("no finite toxicity starting point after 100 prior draws")


_EFF_INIT = np.concatenate([
    np.zeros(12),
    # knots at (1/3, 2/3) for both axes: logit(1/3) and logit(0.5) per pair
    np.array([math.log(0.5), 0.0, math.log(0.5), 0.0]),
])


def sample_chains(data: TrialData, cfg: McmcConfig, models: str = "both") -> ChainSet:
    """Sample both posteriors; deterministic given cfg.seed.

    models="toxicity" skips the efficacy model (stage-I fits never read it).
    """
    cfg.validate()
    arr = data.arrays()
    tox_target, tox_to_params = _make_tox_target(arr)
    want_eff = models == "both"
    if models not in ("both", "toxicity"):
        raise ValueError(f"models must be 'both' or 'toxicity', got {models!r}")
    eff_target, eff_to_params = _make_eff_target(arr) if want_eff else (None, None)

    tox_kept, eff_kept, acc_tox, acc_eff = [], [], [], []
    for c in range(cfg.n_chains):
        rng_t = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0, c)))
        t0 = _init_tox_state(rng_t, tox_target)
        kept, acc = _run_chain(tox_target, t0, cfg, rng_t)
        tox_kept.append(tox_to_params(kept))
        acc_tox.append(acc)
        if want_eff:
            rng_e = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1, c)))
            if not math.isfinite(eff_target(_EFF_INIT)):
                raise InitializationError("efficacy starting point has non-finite log posterior")
            kept_e, acc_e = _run_chain(eff_target, _EFF_INIT, cfg, rng_e)
            eff_kept.append(eff_to_params(kept_e))
            acc_eff.append(acc_e)

    rhat: dict[str, float] = {}
    tox_stack = np.stack(tox_kept)  # (n_chains, n_keep, 4)
    for k, name in enumerate(TOX_PARAM_NAMES):
        rhat[name] = _split_rhat(tox_stack[:, :, k])
    eff_arr = None
    if want_eff:
        eff_stack = np.stack(eff_kept)
        for k, name in enumerate(EFF_PARAM_NAMES):
            rhat[name] = _split_rhat(eff_stack[:, :, k])
        eff_arr = eff_stack.reshape(-1, 16)

    return ChainSet(
        tox_draws=tox_stack.reshape(-1, 4),
        eff_draws=eff_arr,
        n_chains=cfg.n_chains,
        n_keep=cfg.n_keep,
        diagnostics=Diagnostics(accept_tox=tuple(acc_tox), accept_eff=tuple(acc_eff),
                                split_rhat=rhat),
    )


# ---------------------------------------------------------------------------
# Posterior summaries on dose grids and lattices
# ---------------------------------------------------------------------------

def _tox_alpha_columns(tox_draws: np.ndarray):
    a0 = logit(_clip_prob(tox_draws[:, 0]))
    a1 = logit(_clip_prob(tox_draws[:, 2])) - a0
    a2 = logit(_clip_prob(tox_draws[:, 1])) - a0
    return a0, a1, a2, tox_draws[:, 3]


def _cube(v: np.ndarray) -> np.ndarray:
    return v * v * v


def _axis_terms(eff: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Per-draw additive spline contributions along each axis: (S, len) arrays."""
    b = eff
    k2, k3 = eff[:, 12:13], eff[:, 13:14]
    k5, k6 = eff[:, 14:15], eff[:, 15:16]
    gx = (b[:, 1:2] * xs[None, :] + b[:, 2:3] * (xs * xs)[None, :]
          + b[:, 3:4] * (xs**3)[None, :]
          + b[:, 4:5] * _cube(np.maximum(xs[None, :] - k2, 0.0))
          + b[:, 5:6] * _cube(np.maximum(xs[None, :] - k3, 0.0)))
    gy = (b[:, 6:7] * ys[None, :] + b[:, 7:8] * (ys * ys)[None, :]
          + b[:, 8:9] * (ys**3)[None, :]
          + b[:, 9:10] * _cube(np.maximum(ys[None, :] - k5, 0.0))
          + b[:, 10:11] * _cube(np.maximum(ys[None, :] - k6, 0.0)))
    return gx, gy


def _utility_from_probs(pt, pe, tradeoff: UtilityTradeoff):
    scale = (1.0 - tradeoff.eta0) / tradeoff.theta_T
    gain = tradeoff.eta1 * np.exp(tradeoff.eta2 * pe) + tradeoff.eta3
    return np.where(pt <= tradeoff.theta_T, (1.0 - scale * pt) * gain, 0.0)


def surfaces_at_points(chains: ChainSet, xs: np.ndarray, ys: np.ndarray,
                       tradeoff: UtilityTradeoff, chunk: int = 64):
    """Posterior means of (pi_T, pi_E, U) at arbitrary standardized points.

    U is averaged per paired draw (the indicator is applied inside the mean),
    not evaluated at the posterior means.
    """
    if chains.eff_draws is None:
        raise ValueError("efficacy draws required for utility summaries")
    xs = np.asarray(xs, dtype=float).ravel()
    ys = np.asarray(ys, dtype=float).ravel()
    n_pts = xs.size
    a0, a1, a2, eta = _tox_alpha_columns(chains.tox_draws)
    eff = chains.eff_draws
    s = chains.size
    sum_t = np.zeros(n_pts)
    sum_e = np.zeros(n_pts)
    sum_u = np.zeros(n_pts)
    xy = xs * ys
    for lo in range(0, s, chunk):
        hi = min(lo + chunk, s)
        sl = slice(lo, hi)
        ut = (a0[sl, None] + a1[sl, None] * xs[None, :] + a2[sl, None] * ys[None, :]
              + eta[sl, None] * xy[None, :])
        pt = expit(ut)
        gx, gy = _axis_terms(eff[sl], xs, ys)
        ue = eff[sl, 0:1] + gx + gy + eff[sl, 11:12] * xy[None, :]
        pe = expit(ue)
        u = _utility_from_probs(pt, pe, tradeoff)
        sum_t += pt.sum(axis=0)
        sum_e += pe.sum(axis=0)
        sum_u += u.sum(axis=0)
    return sum_t / s, sum_e / s, sum_u / s


def utility_on_lattice(chains: ChainSet, resolution: int, tradeoff: UtilityTradeoff,
                       chunk: int = 128) -> np.ndarray:
    """Posterior-mean utility on a resolution x resolution lattice over [0,1]^2.

    Exploits the separable structure of both surfaces along the dose axes;
    equivalent to surfaces_at_points on the meshgrid but far cheaper.
    """
    if chains.eff_draws is None:
        raise ValueError("efficacy draws required for utility summaries")
    ax = np.linspace(0.0, 1.0, resolution)
    a0, a1, a2, eta = _tox_alpha_columns(chains.tox_draws)
    eff = chains.eff_draws
    s = chains.size
    out = np.zeros((resolution, resolution))
    xy = ax[:, None] * ax[None, :]
    for lo in range(0, s, chunk):
        hi = min(lo + chunk, s)
        sl = slice(lo, hi)
        tx = a1[sl, None] * ax[None, :]  # (C, R)
        ty = a2[sl, None] * ax[None, :]
        ut = (a0[sl, None, None] + tx[:, :, None] + ty[:, None, :]
              + eta[sl, None, None] * xy[None, :, :])
        pt = expit(ut)
        gx, gy = _axis_terms(eff[sl], ax, ax)
        ue = (eff[sl, 0:1, None] + gx[:, :, None] + gy[:, None, :]
              + eff[sl, 11:12, None] * xy[None, :, :])
        pe = expit(ue)
        out += _utility_from_probs(pt, pe, tradeoff).sum(axis=0)
    return out / s


def summarize_on_grid(chains: ChainSet, grid: StandardDoseGrid, tradeoff: UtilityTradeoff,
                      lattice_resolution: int = 101) -> PosteriorSummary:
    """Posterior-mean estimates per grid combination plus a fine utility lattice."""
    if chains.size == 0:
        raise ValueError("empty ChainSet")
    gx = np.array(grid.x_levels)
    gy = np.array(grid.y_levels)
    xx, yy = np.meshgrid(gx, gy, indexing="ij")
    pt, pe, u = surfaces_at_points(chains, xx.ravel(), yy.ravel(), tradeoff)
    shape = (grid.n_x, grid.n_y)
    pi_t_hat = pt.reshape(shape)
    pi_e_hat = pe.reshape(shape)
    u_hat = u.reshape(shape)

    r = lattice_resolution
    lat_u = utility_on_lattice(chains, r, tradeoff)

    safe = [(i, j) for i in range(shape[0]) for j in range(shape[1])
            if pi_t_hat[i, j] <= tradeoff.theta_T]
    return PosteriorSummary(
        pi_t_hat=pi_t_hat, pi_e_hat=pi_e_hat, u_hat=u_hat,
        lattice_u_hat=lat_u, lattice_resolution=r,
        safe_set=safe, theta_T=tradeoff.theta_T,
    )


def summarize_grid_only(chains: ChainSet, grid: StandardDoseGrid,
                        tradeoff: UtilityTradeoff) -> PosteriorSummary:
    """Grid-level summary without the fine lattice (the in-trial decision path)."""
    gx = np.array(grid.x_levels)
    gy = np.array(grid.y_levels)
    xx, yy = np.meshgrid(gx, gy, indexing="ij")
    pt, pe, u = surfaces_at_points(chains, xx.ravel(), yy.ravel(), tradeoff)
    shape = (grid.n_x, grid.n_y)
    pi_t_hat = pt.reshape(shape)
    safe = [(i, j) for i in range(shape[0]) for j in range(shape[1])
            if pi_t_hat[i, j] <= tradeoff.theta_T]
    return PosteriorSummary(
        pi_t_hat=pi_t_hat, pi_e_hat=pe.reshape(shape), u_hat=u.reshape(shape),
        lattice_u_hat=np.zeros((0, 0)), lattice_resolution=0,
        safe_set=safe, theta_T=tradeoff.theta_T,
    )


def conditional_mtd_percentile(chains: ChainSet, fixed_axis: str, fixed_dose: float,
                               alpha: float, theta_T: float) -> float:
    """EWOC percentile of the conditional maximum tolerated dose.

    With one compound held at fixed_dose, each toxicity draw implies the dose
    of the other compound at which the surface crosses theta_T. Draws whose
    surface is flat along the free axis (zero denominator) are treated as
    never reaching theta_T, i.e., +inf before clamping to [0, 1]. Returns the
    empirical alpha-quantile of the clamped samples.
    """
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if not (0.0 <= fixed_dose <= 1.0):
        raise ValueError(f"fixed dose must be in [0, 1], got {fixed_dose}")
    a0, a1, a2, eta = _tox_alpha_columns(chains.tox_draws)
    target = float(logit(theta_T))
    if fixed_axis == "y":
        num = target - a0 - a2 * fixed_dose
        den = a1 + eta * fixed_dose
    elif fixed_axis == "x":
        num = target - a0 - a1 * fixed_dose
        den = a2 + eta * fixed_dose
    else:
        raise ValueError(f"fixed_axis must be 'x' or 'y', got {fixed_axis!r}")
    mtd = np.full_like(num, np.inf)
    np.divide(num, den, out=mtd, where=den != 0.0)
    mtd = np.where(den != 0.0, mtd, np.inf)
    clamped = np.clip(mtd, 0.0, 1.0)
    return float(np.quantile(clamped, alpha))


def export_chains(chains: ChainSet, path) -> None:
    """Write draws to a columnar text file (one row per draw, header first)."""
    names = ["chain", "draw"] + list(TOX_PARAM_NAMES)
    if chains.eff_draws is not None:
        names += list(EFF_PARAM_NAMES)
    with open(path, "w") as fh:
        fh.write(",".join(names) + "\n")
        for i in range(chains.size):
            chain_idx = i // chains.n_keep
            draw_idx = i % chains.n_keep
            row = [str(chain_idx), str(draw_idx)]
            row += [format(v, ".17g") for v in chains.tox_draws[i]]
            if chains.eff_draws is not None:
                row += [format(v, ".17g") for v in chains.eff_draws[i]]
            fh.write(",".join(row) + "\n")

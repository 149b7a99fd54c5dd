"""Score models, denoising score matching and the DDPM epsilon objective.

Time terms are indexed by forward nodes k = 1..n of the schedule grid with
weight D(t_k) (t_k - t_{k-1}): node k is where the reverse process evaluates
the score when stepping from t_k to t_{k-1}. Node 0 (zero noise) is never
used. A batch element draws k uniformly, so the unbiased estimate of the
weighted sum multiplies the batch mean by n.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .analytic_kernels import ou_moments
from .exact_mixture import MixturePath
from .schedule import NoiseSchedule, schedule_from_dict

CHECKPOINT_FORMAT = "actiondiff-score-model"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


# -- noise levels ---------------------------------------------------------------------


_MOMENT_CACHE: dict = {}


def _moment_table(schedule: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    key = id(schedule)
    hit = _MOMENT_CACHE.get(key)
    if hit is not None and hit[0] is schedule:
        return hit[1], hit[2]
    nodes = schedule.grid.nodes
    if schedule.kind == "ddpm":
        factor, var = np.sqrt(schedule.alpha_bar), 1.0 - schedule.alpha_bar
    elif schedule.kind == "pure_diffusion":
        factor = np.ones(nodes.size)
        var = np.array([schedule.integrated_diffusion(float(nodes[0]), float(t)) for t in nodes])
    else:
        pairs = [ou_moments(float(nodes[0]), float(t), schedule) if j else (1.0, 0.0) for j, t in enumerate(nodes)]
        factor, var = (np.array(v, dtype=float) for v in zip(*pairs))
    if len(_MOMENT_CACHE) > 32:
        _MOMENT_CACHE.clear()
    _MOMENT_CACHE[key] = (schedule, factor, var)
    return factor, var


def kernel_moments(schedule: NoiseSchedule, k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean factor and variance of the noising kernel from node 0 to node k.

    DDPM schedules use the discrete alpha-bar product; OU schedules the
    closed-form moments; pure diffusion the integrated diffusion.
    """
    k = np.asarray(k, dtype=int)
    if np.any(k < 1) or np.any(k > schedule.grid.n):
        raise TrainingError("node index outside 1..n (zero noise is excluded)")
    factor, var = _moment_table(schedule)
    return factor[k], var[k]


def node_weights(schedule: NoiseSchedule) -> np.ndarray:
    """D(t_k) (t_k - t_{k-1}) for k = 1..n (index 0 of the result is node 1)."""
    nodes = schedule.grid.nodes
    return schedule.diffusion_at(nodes[1:]) * np.diff(nodes)


class TimeEmbedding:
    """Schedule-aware time features from the noising kernel at time t.

    ``u`` is the log kernel variance mapped to [-1, 1] over the grid; the
    kernel mean factor and variance are interpolated between nodes.
    """

    def __init__(self, schedule: NoiseSchedule):
        self.schedule = schedule
        nodes = schedule.grid.nodes
        factor, var = kernel_moments(schedule, np.arange(1, nodes.size))
        self._t = nodes
        self._var = np.concatenate([[0.5 * var[0]], var])
        self._factor = np.concatenate([[1.0], factor])
        lv = np.log(self._var)
        self.lo, self.hi = float(lv.min()), float(lv.max())

    def _check(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if np.any(t < self._t[0] - 1e-12) or np.any(t > self._t[-1] + 1e-12):
            raise TrainingError("time outside the schedule range")
        return t

    def variance(self, t) -> np.ndarray:
        return np.interp(self._check(t), self._t, self._var)

    def factor(self, t) -> np.ndarray:
        return np.interp(self._check(t), self._t, self._factor)

    def features(self, t) -> tuple[np.ndarray, np.ndarray]:
        """(u in [-1, 1], kernel std) per time."""
        var = self.variance(t)
        u = 2.0 * (np.log(var) - self.lo) / max(self.hi - self.lo, 1e-12) - 1.0
        return u, np.sqrt(var)


# -- models -------------------------------------------------------------------------------


class ScoreModel:
    kind = "base"

    def __init__(self, schedule: NoiseSchedule, dim: int, params: np.ndarray):
        self.schedule = schedule
        self.dim = dim
        self.embedding = TimeEmbedding(schedule)
        self.params = np.asarray(params, dtype=float).copy()

    def __call__(self, x, t) -> np.ndarray:
        return self.evaluate(x, t)

    def _prep(self, x, t):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None] if self.dim == 1 else x[None, :]
        t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        return x, t

    def evaluate(self, x, t) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, x, t, g) -> np.ndarray:
        """Gradient of sum(g * S(x, t)) with respect to the parameters."""
        raise NotImplementedError

    def evaluate_with_vjp(self, x, t):
        """S(x, t) and a function g -> gradient of sum(g * S), sharing one forward pass."""
        return self.evaluate(x, t), lambda g: self.vjp(x, t, g)

    def architecture(self) -> dict:
        raise NotImplementedError

    def copy_with(self, params) -> "ScoreModel":
        raise NotImplementedError

    def save(self, path) -> None:
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "kind": self.kind,
            "dim": self.dim,
            "architecture": self.architecture(),
            "schedule": self.schedule.to_dict(),
            "params": [repr(float(p)) for p in self.params],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)


def load_model(path) -> ScoreModel:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise TrainingError("unrecognized checkpoint format")
    schedule = schedule_from_dict(doc["schedule"])
    params = np.array([float(p) for p in doc["params"]])
    arch = doc["architecture"]
    if doc["kind"] == "rbf":
        return RBFModel(schedule, doc["dim"], params=params, **arch)
    if doc["kind"] == "mlp":
        return MLPModel(schedule, doc["dim"], params=params, **arch)
    raise TrainingError(f"unknown model kind {doc['kind']!r}")


class RBFModel(ScoreModel):
    """Linear model in theta: time bumps times spatial bumps, scaled by 1/v(t).

    For coordinate j the features are B_k(u(t)) * {x_j, 1, g_c(x_j, t)} / v(t)
    with v(t) = m(t)^2 w^2 + var(t), m and var the kernel mean factor and
    variance. Spatial bumps have center c s(t) and width w s(t), where
    s(t) = sqrt(m^2 + var) is the spread of unit-variance data, so the ratio of
    width to spacing (and the conditioning) is the same at every t.
    ``normalized`` divides the bumps by their sum (a partition of unity) and
    then drops the constant feature.
    """

    kind = "rbf"

    def __init__(
        self, schedule, dim=1, n_time=14, centers=(-2.0, 2.0, 21), width=0.12, time_width=None, normalized=True, params=None
    ):
        self.normalized = bool(normalized)
        # normalized bumps sum to one, so the constant feature would be redundant
        self._n_fixed = 1 if self.normalized else 2
        self.n_time = int(n_time)
        self.centers = (float(centers[0]), float(centers[1]), int(centers[2]))
        c = np.linspace(*self.centers)
        self._c = c
        self.width = float(width if width is not None else (c[1] - c[0]) if c.size > 1 else 1.0)
        self._tc = np.linspace(-1.0, 1.0, self.n_time)
        self.time_width = float(time_width if time_width is not None else (2.0 / max(self.n_time - 1, 1)))
        nf = self.n_time * (self._n_fixed + c.size)
        super().__init__(schedule, dim, np.zeros(dim * nf) if params is None else params)
        if self.params.size != dim * nf:
            raise TrainingError("parameter vector does not match the rbf architecture")

    @property
    def n_features(self) -> int:
        return self.n_time * (self._n_fixed + self._c.size)

    def architecture(self) -> dict:
        return {
            "n_time": self.n_time,
            "centers": list(self.centers),
            "width": self.width,
            "time_width": self.time_width,
            "normalized": self.normalized,
        }

    def copy_with(self, params) -> "RBFModel":
        return RBFModel(
            self.schedule, self.dim, self.n_time, self.centers, self.width, self.time_width, self.normalized, params
        )

    def design(self, x, t) -> np.ndarray:
        """Features phi[b, j, f] for coordinate j of sample b."""
        x, t = self._prep(x, t)
        u, std = self.embedding.features(t)
        m = self.embedding.factor(t)
        v = (m * self.width) ** 2 + std**2
        tb = np.exp(-0.5 * ((u[:, None] - self._tc[None, :]) / self.time_width) ** 2)  # (B, K)
        scale = np.sqrt(m**2 + std**2)[:, None, None]
        logb = -0.5 * ((x[..., None] - scale * self._c) / (scale * self.width)) ** 2  # (B, d, J)
        if self.normalized:
            sb = np.exp(logb - logb.max(axis=-1, keepdims=True))
            sb /= sb.sum(axis=-1, keepdims=True)
        else:
            sb = np.exp(logb)
        fixed = [x[..., None]] if self.normalized else [x[..., None], np.ones_like(x)[..., None]]
        space = np.concatenate(fixed + [sb], axis=-1)
        phi = tb[:, None, :, None] * space[:, :, None, :]  # (B, d, K, J+2)
        return phi.reshape(x.shape[0], x.shape[1], -1) / v[:, None, None]

    def evaluate(self, x, t) -> np.ndarray:
        phi = self.design(x, t)
        theta = self.params.reshape(self.dim, -1)
        return np.einsum("bjf,jf->bj", phi, theta)

    def vjp(self, x, t, g) -> np.ndarray:
        return self.evaluate_with_vjp(x, t)[1](g)

    def evaluate_with_vjp(self, x, t):
        phi = self.design(x, t)
        theta = self.params.reshape(self.dim, -1)
        out = np.einsum("bjf,jf->bj", phi, theta)
        return out, lambda g: np.einsum("bjf,bj->jf", phi, np.asarray(g).reshape(phi.shape[0], -1)).reshape(-1)


class MLPModel(ScoreModel):
    """Two tanh hidden layers on inputs (x, u(t), std(t)); S = output / std(t)."""

    kind = "mlp"

    def __init__(self, schedule, dim=1, width=64, seed=0, params=None):
        self.width = int(width)
        self.seed = int(seed)
        din = dim + 2
        self._shapes = [(self.width, din), (self.width,), (self.width, self.width), (self.width,), (dim, self.width), (dim,)]
        sizes = [int(np.prod(s)) for s in self._shapes]
        self._offsets = np.cumsum([0] + sizes)
        if params is None:
            rng = np.random.default_rng(seed)
            parts = []
            for shp in self._shapes:
                if len(shp) == 2:
                    parts.append(rng.standard_normal(shp).ravel() * math.sqrt(1.0 / shp[1]))
                else:
                    parts.append(np.zeros(shp))
            params = np.concatenate(parts)
        super().__init__(schedule, dim, params)
        if self.params.size != self._offsets[-1]:
            raise TrainingError("parameter vector does not match the mlp architecture")

    def architecture(self) -> dict:
        return {"width": self.width, "seed": self.seed}

    def copy_with(self, params) -> "MLPModel":
        return MLPModel(self.schedule, self.dim, self.width, self.seed, params)

    def _unpack(self, flat):
        return [flat[a:b].reshape(s) for a, b, s in zip(self._offsets[:-1], self._offsets[1:], self._shapes)]

    def _forward(self, x, t):
        x, t = self._prep(x, t)
        u, std = self.embedding.features(t)
        z = np.concatenate([x, u[:, None], std[:, None]], axis=1)
        W1, b1, W2, b2, W3, b3 = self._unpack(self.params)
        h1 = np.tanh(z @ W1.T + b1)
        h2 = np.tanh(h1 @ W2.T + b2)
        out = h2 @ W3.T + b3
        return out / std[:, None], (z, h1, h2, std)

    def evaluate(self, x, t) -> np.ndarray:
        return self._forward(x, t)[0]

    def vjp(self, x, t, g) -> np.ndarray:
        return self.evaluate_with_vjp(x, t)[1](g)

    def evaluate_with_vjp(self, x, t):
        out, cache = self._forward(x, t)
        return out, lambda g: self._backward(cache, g)

    def _backward(self, cache, g) -> np.ndarray:
        z, h1, h2, std = cache
        W1, b1, W2, b2, W3, b3 = self._unpack(self.params)
        go = np.asarray(g).reshape(z.shape[0], -1) / std[:, None]
        dW3 = go.T @ h2
        db3 = go.sum(axis=0)
        ga2 = (go @ W3) * (1.0 - h2**2)
        dW2 = ga2.T @ h1
        db2 = ga2.sum(axis=0)
        ga1 = (ga2 @ W2) * (1.0 - h1**2)
        dW1 = ga1.T @ z
        db1 = ga1.sum(axis=0)
        return np.concatenate([a.ravel() for a in (dW1, db1, dW2, db2, dW3, db3)])


def make_model(kind: str, schedule: NoiseSchedule, dim: int = 1, **kw) -> ScoreModel:
    if kind == "rbf":
        return RBFModel(schedule, dim, **kw)
    if kind == "mlp":
        return MLPModel(schedule, dim, **kw)
    raise TrainingError(f"unknown model kind {kind!r}")


# -- batches and losses -------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingBatch:
    x_d: np.ndarray  # (B, d) data points
    k: np.ndarray  # (B,) node indices in 1..n
    eps: np.ndarray  # (B, d) Gaussian draws
    factor: np.ndarray  # (B,) kernel mean factor
    std: np.ndarray  # (B,) kernel std

    @property
    def x_s(self) -> np.ndarray:
        return self.factor[:, None] * self.x_d + self.std[:, None] * self.eps

    @property
    def target(self) -> np.ndarray:
        """Conditional score d/dx ln P(x_s, t_k | x_d, 0) = -eps / std."""
        return -self.eps / self.std[:, None]

    def times(self, schedule: NoiseSchedule) -> np.ndarray:
        return schedule.grid.nodes[self.k]


def make_batch(
    data: np.ndarray, schedule: NoiseSchedule, batch_size: int, rng: np.random.Generator, antithetic: bool = False
) -> TrainingBatch:
    """Draw (x_d, k, eps) with x_d uniform over the data, k uniform over 1..n.

    With ``antithetic`` the second half of the batch repeats (x_d, k) of the
    first half with -eps. Each element is still an exact draw, so the loss
    stays unbiased, while the O(1/std) target noise largely cancels between
    the two members of a pair at small noise.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    if data.shape[0] == 0:
        raise TrainingError("empty data set")
    if antithetic:
        if batch_size % 2:
            raise TrainingError("antithetic batches need an even size")
        half = make_batch(data, schedule, batch_size // 2, rng)
        return TrainingBatch(
            np.concatenate([half.x_d, half.x_d]),
            np.concatenate([half.k, half.k]),
            np.concatenate([half.eps, -half.eps]),
            np.concatenate([half.factor, half.factor]),
            np.concatenate([half.std, half.std]),
        )
    idx = rng.integers(0, data.shape[0], size=batch_size)
    k = rng.integers(1, schedule.grid.n + 1, size=batch_size)
    eps = rng.standard_normal((batch_size, data.shape[1]))
    factor, var = kernel_moments(schedule, k)
    return TrainingBatch(data[idx], k, eps, factor, np.sqrt(var))


def _check_batch(batch: TrainingBatch, schedule: NoiseSchedule) -> None:
    if np.any(batch.k < 1):
        raise TrainingError("batch contains zero-noise node t_0; the conditional score is undefined there")
    if np.any(batch.k > schedule.grid.n):
        raise TrainingError("batch node index beyond the schedule grid")


def dsm_loss(model: ScoreModel, batch: TrainingBatch, schedule: NoiseSchedule, weighting: Callable | None = None):
    """n * mean_b 1/2 w_k |S(x_s, t_k) - (-eps / std)|^2 and its parameter gradient.

    ``weighting`` maps node indices to per-term weights; default D(t_k) (t_k - t_{k-1}).
    """
    _check_batch(batch, schedule)
    w_all = node_weights(schedule)
    w = w_all[batch.k - 1] if weighting is None else np.asarray(weighting(batch.k), dtype=float)
    n, B = schedule.grid.n, batch.k.size
    t = batch.times(schedule)
    S, pullback = model.evaluate_with_vjp(batch.x_s, t)
    resid = S - batch.target
    scale = n / B
    loss = scale * float(np.sum(0.5 * w * np.sum(resid**2, axis=1)))
    grad = pullback(scale * w[:, None] * resid)
    return loss, grad


def ddpm_loss(model: ScoreModel, batch: TrainingBatch, schedule: NoiseSchedule):
    """n * mean_b beta_k / (2 (1 - abar_k)) |eps - eps_theta|^2 with eps_theta = -sqrt(1 - abar_k) S."""
    if schedule.kind != "ddpm":
        raise TrainingError("ddpm_loss needs a DDPM schedule")
    _check_batch(batch, schedule)
    nodes = schedule.grid.nodes
    beta = schedule.beta_at(nodes[batch.k]) * (nodes[batch.k] - nodes[batch.k - 1])
    one_minus = 1.0 - schedule.alpha_bar[batch.k]
    root = np.sqrt(one_minus)
    n, B = schedule.grid.n, batch.k.size
    t = batch.times(schedule)
    S, pullback = model.evaluate_with_vjp(batch.x_s, t)
    eps_theta = -root[:, None] * S
    coef = beta / (2.0 * one_minus)
    diff = batch.eps - eps_theta
    scale = n / B
    loss = scale * float(np.sum(coef * np.sum(diff**2, axis=1)))
    # d/dS of coef |eps + root S|^2 = 2 coef root (eps + root S)
    grad = pullback(scale * (2.0 * coef * root)[:, None] * diff)
    return loss, grad


# -- least squares ----------------------------------------------------------------------------


def rbf_least_squares(model: RBFModel, batch: TrainingBatch, schedule: NoiseSchedule, target: np.ndarray | None = None) -> np.ndarray:
    """Normal-equations minimizer of the batch DSM objective (or of a supplied regression target)."""
    if not isinstance(model, RBFModel):
        raise TrainingError("least squares only applies to the linear rbf model")
    w = node_weights(schedule)[batch.k - 1]
    t = batch.times(schedule)
    phi = model.design(batch.x_s, t)  # (B, d, F)
    y = batch.target if target is None else np.asarray(target, dtype=float).reshape(phi.shape[:2])
    theta = []
    for j in range(phi.shape[1]):
        A = phi[:, j, :]
        G = A.T @ (w[:, None] * A)
        r = A.T @ (w * y[:, j])
        theta.append(np.linalg.lstsq(G, r, rcond=1e-13)[0])
    return np.concatenate(theta)


def _quadrature(x_grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x_grid, dtype=float)
    w = np.full(x.size, x[1] - x[0])
    w[0] = w[-1] = 0.5 * (x[1] - x[0])
    return x, w


def rbf_score_projection(model: RBFModel, path: MixturePath, schedule: NoiseSchedule, x_grid: np.ndarray) -> np.ndarray:
    """Normal-equations minimizer of the population DSM objective (1-D).

    By the denoising identity this is the weighted least-squares projection
    of the true marginal score onto the basis, with weight w_k P(x, t_k) dx
    taken by quadrature on ``x_grid``.
    """
    if not isinstance(model, RBFModel) or model.dim != 1:
        raise TrainingError("the projection needs a 1-D rbf model")
    x, wx = _quadrature(x_grid)
    pts = x[:, None]
    G = 0.0
    r = 0.0
    for k, wk in enumerate(node_weights(schedule), start=1):
        t = float(schedule.grid.nodes[k])
        mix = path.at(t)
        phi = model.design(pts, np.full(x.size, t))[:, 0, :]
        wt = wk * wx * mix.pdf(pts)
        G = G + phi.T @ (wt[:, None] * phi)
        r = r + phi.T @ (wt * mix.score(pts)[:, 0])
    return np.linalg.lstsq(G, r, rcond=1e-13)[0]


def dsm_population_constant(path: MixturePath, schedule: NoiseSchedule, x_grid: np.ndarray) -> float:
    """The model-independent part C of the population DSM loss, which equals C + delta_action (1-D).

    C = sum_k w_k / 2 (1 / var_k - E |d/dx ln P(x, t_k)|^2), var_k the kernel variance at node k.
    """
    x, wx = _quadrature(x_grid)
    pts = x[:, None]
    k = np.arange(1, schedule.grid.n + 1)
    _, var = kernel_moments(schedule, k)
    total = 0.0
    for kk, wk, vk in zip(k, node_weights(schedule), var):
        mix = path.at(float(schedule.grid.nodes[kk]))
        total += 0.5 * wk * (1.0 / vk - float(wx @ (mix.pdf(pts) * mix.score(pts)[:, 0] ** 2)))
    return total


def score_error_l2(model_score: Callable, path: MixturePath, schedule: NoiseSchedule, x_grid: np.ndarray) -> tuple[float, float]:
    """(delta_action, L2(P) error) where L2 = sqrt(2 delta_action / sum_k w_k)."""
    from .action import delta_action

    da = delta_action(model_score, path, schedule, schedule.grid, x_grid=x_grid)
    return da, math.sqrt(2.0 * da / float(node_weights(schedule).sum()))


# -- optimizer -------------------------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    batch_size: int = 512
    steps: int = 2000
    seed: int = 0
    optimizer: str = "adam"
    momentum: float = 0.9
    beta2: float = 0.999
    decay: str = "cosine"
    final_lr_fraction: float = 0.01
    eval_interval: int = 100
    objective: str = "dsm"
    antithetic: bool = True
    average_fraction: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise TrainingError(f"unknown training options: {sorted(unknown)}")
        return cls(**known)


@dataclass
class TrainResult:
    model: ScoreModel
    log: list = field(default_factory=list)

    def write_log(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.log:
                fh.write(json.dumps(row) + "\n")


def _lr(cfg: TrainConfig, step: int) -> float:
    if cfg.decay == "none":
        return cfg.learning_rate
    if cfg.decay == "cosine":
        frac = step / max(cfg.steps - 1, 1)
        lo = cfg.final_lr_fraction
        return cfg.learning_rate * (lo + (1 - lo) * 0.5 * (1 + math.cos(math.pi * frac)))
    raise TrainingError(f"unknown decay {cfg.decay!r}")


def train(
    model: ScoreModel,
    data: np.ndarray,
    schedule: NoiseSchedule,
    config: TrainConfig,
    oracle: MixturePath | None = None,
    x_grid: np.ndarray | None = None,
) -> TrainResult:
    """Minibatch training with fresh (x_d, k, eps) draws per step.

    With an exact mixture ``oracle`` the log also records delta_action and
    the L2(P) score error at every evaluation interval.
    """
    data = np.asarray(data, dtype=float)
    if data.size == 0:
        raise TrainingError("empty data set")
    loss_fn = {"dsm": dsm_loss, "ddpm": ddpm_loss}.get(config.objective)
    if loss_fn is None:
        raise TrainingError(f"unknown objective {config.objective!r}")
    rng = np.random.default_rng(config.seed)
    theta = model.params.copy()
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    log = []
    initial = None
    running = []
    cur = model
    avg_start = int(round(config.steps * (1.0 - config.average_fraction))) if config.average_fraction > 0 else config.steps
    avg = np.zeros_like(theta)
    n_avg = 0
    for step in range(config.steps):
        batch = make_batch(data, schedule, config.batch_size, rng, antithetic=config.antithetic)
        loss, grad = loss_fn(cur, batch, schedule)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}")
        if initial is None:
            initial = max(loss, 1e-300)
        if loss > 1e3 * initial:
            raise TrainingError(f"training diverged at step {step}: loss {loss:.4g} vs initial {initial:.4g}")
        running.append(loss)
        lr = _lr(config, step)
        if config.optimizer == "adam":
            m1 = config.momentum * m1 + (1 - config.momentum) * grad
            m2 = config.beta2 * m2 + (1 - config.beta2) * grad**2
            mh = m1 / (1 - config.momentum ** (step + 1))
            vh = m2 / (1 - config.beta2 ** (step + 1))
            theta = theta - lr * mh / (np.sqrt(vh) + 1e-8)
        elif config.optimizer == "sgd":
            m1 = config.momentum * m1 + grad
            theta = theta - lr * m1
        else:
            raise TrainingError(f"unknown optimizer {config.optimizer!r}")
        if step >= avg_start:
            n_avg += 1
            avg += (theta - avg) / n_avg
        cur = model.copy_with(theta)
        if (step + 1) % config.eval_interval == 0 or step + 1 == config.steps:
            report = model.copy_with(avg) if n_avg else cur
            row = {"step": step + 1, "loss": float(np.mean(running))}
            running = []
            if oracle is not None and x_grid is not None:
                da, err = score_error_l2(report, oracle, schedule, x_grid)
                row["delta_action"] = da
                row["score_err"] = err
            log.append(row)
    return TrainResult(model.copy_with(avg) if n_avg else cur, log)

"""Unrolled learned solvers (LISTA, LISTA-CP, LISTA-VM, LISTA-VM-SS).

Every model maps an instance to iterates ``beta^(1) = 0, ..., beta^(K+1)``
via ``beta^(k+1) = S_{theta_k}(u_k)`` where the pre-activation ``u_k`` is

* LISTA:     ``W1_k y + W2_k beta``
* LISTA-CP:  ``beta - D_k^T (X beta - y)``
* LISTA-VM:  ``beta - (1/m) M_k X^T (X beta - y)``  (``X``, ``y`` are the
  in-context prefix, so the effective ``D`` moves with the instance)

Gradients of ``sum_j ||beta_hat_j - beta*_j||^2`` are computed by hand-written
reverse mode through the unrolled iterations.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .classical import DEFAULT_ALPHA, SolverTrace, soft_threshold, spectral_norm_sq
from .container import pack_arrays, unpack_arrays
from .errors import ConfigError, DomainError, TrainingError
from .instances import InstanceConfig, derive_seed, restrict_columns, sample_batch

log = logging.getLogger(__name__)

GAMMA_MAX = 1.5
KINDS = ("lista", "lista_cp", "lista_vm", "lista_vm_ss")


# -- parameter containers ------------------------------------------------------

@dataclass
class ListaVmParams:
    M: np.ndarray      # (K, d, d)
    theta: np.ndarray  # (K,)
    kind = "lista_vm"

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        if self.M.ndim != 3 or self.M.shape[1] != self.M.shape[2] or self.M.shape[0] != self.theta.shape[0]:
            raise DomainError(f"bad LISTA-VM parameter shapes M{self.M.shape}, theta{self.theta.shape}")

    @property
    def K(self) -> int:
        return self.theta.shape[0]

    def arrays(self) -> dict:
        return {"M": self.M, "theta": self.theta}


@dataclass
class ListaCpParams:
    D: np.ndarray      # (K, N, d)
    theta: np.ndarray
    kind = "lista_cp"

    def __post_init__(self):
        self.D = np.asarray(self.D, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        if self.D.ndim != 3 or self.D.shape[0] != self.theta.shape[0]:
            raise DomainError(f"bad LISTA-CP parameter shapes D{self.D.shape}, theta{self.theta.shape}")

    @property
    def K(self) -> int:
        return self.theta.shape[0]

    def arrays(self) -> dict:
        return {"D": self.D, "theta": self.theta}


@dataclass
class ListaParams:
    W1: np.ndarray     # (K, d, N)
    W2: np.ndarray     # (K, d, d)
    theta: np.ndarray
    kind = "lista"

    def __post_init__(self):
        self.W1 = np.asarray(self.W1, dtype=float)
        self.W2 = np.asarray(self.W2, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        K = self.theta.shape[0]
        if self.W1.ndim != 3 or self.W2.ndim != 3 or self.W1.shape[0] != K or self.W2.shape[0] != K:
            raise DomainError("bad LISTA parameter shapes")

    @property
    def K(self) -> int:
        return self.theta.shape[0]

    def arrays(self) -> dict:
        return {"W1": self.W1, "W2": self.W2, "theta": self.theta}


_PARAM_TYPES = {"lista": ListaParams, "lista_cp": ListaCpParams, "lista_vm": ListaVmParams}


def params_type(kind: str):
    if kind == "lista_vm_ss":
        return ListaVmParams
    try:
        return _PARAM_TYPES[kind]
    except KeyError:
        raise ConfigError(f"unknown model kind {kind!r}; expected one of {KINDS}") from None


def flatten(params) -> np.ndarray:
    return np.concatenate([a.ravel() for a in params.arrays().values()])


def unflatten(params, vec: np.ndarray):
    out, pos = {}, 0
    for name, a in params.arrays().items():
        out[name] = np.asarray(vec[pos:pos + a.size]).reshape(a.shape).copy()
        pos += a.size
    return type(params)(**out)


def serialize_params(params, kind: str | None = None) -> bytes:
    return pack_arrays(kind or params.kind, params.arrays())


def deserialize_params(payload: bytes):
    kind, arrays = unpack_arrays(payload)
    return kind, params_type(kind)(**arrays)


# -- forward -------------------------------------------------------------------

def _check_theta(theta):
    if np.any(theta < 0):
        raise DomainError("thresholds must be >= 0")


def _stack(batch, support=None):
    X = np.stack([inst.X for inst in batch])
    if support is not None:
        X = restrict_columns(X, support)
    y = np.stack([inst.y for inst in batch])
    beta_star = np.stack([inst.beta_star for inst in batch])
    return X, y, beta_star


def _unroll(kind, params, X, y, m=None):
    """Batched forward. ``X`` is (B, n, d), ``y`` is (B, n).

    Returns the iterate stack (K+1, B, d) and per-layer caches for backprop.
    """
    _check_theta(params.theta)
    B, n, d = X.shape
    beta = np.zeros((B, d))
    betas = [beta]
    cache = []
    for k in range(params.K):
        if kind in ("lista_vm", "lista_vm_ss"):
            r = np.einsum("bnd,bd->bn", X, beta) - y
            g = np.einsum("bnd,bn->bd", X, r)
            u = beta - (g @ params.M[k].T) / m
            cache.append((u, r, g))
        elif kind == "lista_cp":
            r = np.einsum("bnd,bd->bn", X, beta) - y
            u = beta - r @ params.D[k]
            cache.append((u, r, None))
        else:
            u = y @ params.W1[k].T + beta @ params.W2[k].T
            cache.append((u, None, None))
        beta = soft_threshold(u, params.theta[k])
        betas.append(beta)
    return np.stack(betas), cache


def _validate_shapes(kind, params, X, y):
    B, n, d = X.shape
    if y.shape != (B, n):
        raise DomainError(f"y shape {y.shape} does not match X {X.shape}")
    if kind in ("lista_vm", "lista_vm_ss"):
        if params.M.shape[1] != d:
            raise DomainError(f"M is {params.M.shape[1]}x{params.M.shape[2]} but d = {d}")
    elif kind == "lista_cp":
        if params.D.shape[1:] != (n, d):
            raise DomainError(f"LISTA-CP trained for X of shape {params.D.shape[1:]}, got {(n, d)}")
    else:
        if params.W1.shape[1:] != (d, n) or params.W2.shape[1:] != (d, d):
            raise DomainError(f"LISTA trained for (d, N) = {params.W1.shape[1:]}, got {(d, n)}")


def _trace(betas, beta_star, t0):
    errors = None if beta_star is None else np.linalg.norm(betas - beta_star, axis=1)
    return SolverTrace(betas, None, errors, time.perf_counter() - t0)


def lista_vm_forward(params: ListaVmParams, X_prefix, y_prefix, m=None, beta_star=None) -> SolverTrace:
    """LISTA-VM on an ``n``-row prefix; normalizer ``m`` defaults to ``2n + 1``."""
    t0 = time.perf_counter()
    X = np.asarray(X_prefix, dtype=float)[None]
    y = np.asarray(y_prefix, dtype=float)[None]
    if X.shape[1] < 1:
        raise DomainError("prefix must contain at least one row")
    m = 2 * X.shape[1] + 1 if m is None else m
    _validate_shapes("lista_vm", params, X, y)
    betas, _ = _unroll("lista_vm", params, X, y, m)
    return _trace(betas[:, 0], beta_star, t0)


def lista_vm_ss_forward(params: ListaVmParams, support, X_prefix, y_prefix, m=None,
                        beta_star=None) -> SolverTrace:
    """LISTA-VM with measurement columns outside ``support`` zeroed."""
    support = np.asarray(support, dtype=int)
    if support.size == 0:
        raise DomainError("support set must be nonempty")
    X = np.asarray(X_prefix, dtype=float)
    if support.min() < 0 or support.max() >= X.shape[1]:
        raise DomainError("support indices out of range")
    return lista_vm_forward(params, restrict_columns(X, support), y_prefix, m, beta_star)


def lista_cp_forward(params: ListaCpParams, X, y, beta_star=None) -> SolverTrace:
    t0 = time.perf_counter()
    X = np.asarray(X, dtype=float)[None]
    y = np.asarray(y, dtype=float)[None]
    _validate_shapes("lista_cp", params, X, y)
    betas, _ = _unroll("lista_cp", params, X, y)
    return _trace(betas[:, 0], beta_star, t0)


def lista_forward(params: ListaParams, X, y, beta_star=None) -> SolverTrace:
    t0 = time.perf_counter()
    X = np.asarray(X, dtype=float)[None]
    y = np.asarray(y, dtype=float)[None]
    _validate_shapes("lista", params, X, y)
    betas, _ = _unroll("lista", params, X, y)
    return _trace(betas[:, 0], beta_star, t0)


def predict_batch(kind, params, batch, m=None, support=None) -> np.ndarray:
    """Final iterates ``beta^(K+1)`` for every instance, shape (B, d)."""
    if kind == "lista_vm_ss" and support is None:
        raise ConfigError("lista_vm_ss needs a support set")
    X, y, _ = _stack(batch, support if kind == "lista_vm_ss" else None)
    _validate_shapes(kind, params, X, y)
    m = 2 * X.shape[1] + 1 if m is None else m
    betas, _ = _unroll(kind, params, X, y, m)
    return betas[-1]


# -- reverse mode ----------------------------------------------------------------

def grad_unrolled(kind, params, batch, m=None, support=None):
    """Loss ``sum_j ||beta_hat_j - beta*_j||^2`` and its exact gradient.

    The soft-threshold derivative is 1 where ``|u| > theta`` and 0 elsewhere
    (kink included). Returns ``(grads, loss)`` where ``grads`` has the same
    type and shapes as ``params``.
    """
    if not batch:
        raise DomainError("batch must be nonempty")
    if kind == "lista_vm_ss" and support is None:
        raise ConfigError("lista_vm_ss needs a support set")
    X, y, beta_star = _stack(batch, support if kind == "lista_vm_ss" else None)
    _validate_shapes(kind, params, X, y)
    m = 2 * X.shape[1] + 1 if m is None else m
    betas, cache = _unroll(kind, params, X, y, m)

    diff = betas[-1] - beta_star
    loss = float(np.sum(diff * diff))
    dbeta = 2.0 * diff
    grads = {name: np.zeros_like(a) for name, a in params.arrays().items()}
    for k in reversed(range(params.K)):
        u, r, g = cache[k]
        du = dbeta * (np.abs(u) > params.theta[k])
        grads["theta"][k] = -np.sum(np.sign(u) * du)
        if kind in ("lista_vm", "lista_vm_ss"):
            Mk = params.M[k]
            grads["M"][k] = -(du.T @ g) / m
            v = du @ Mk                                   # M_k^T du, row-wise
            Xv = np.einsum("bnd,bd->bn", X, v)
            dbeta = du - np.einsum("bnd,bn->bd", X, Xv) / m
        elif kind == "lista_cp":
            Dk = params.D[k]
            grads["D"][k] = -(r.T @ du)
            dbeta = du - np.einsum("bnd,bn->bd", X, du @ Dk.T)
        else:
            grads["W1"][k] = du.T @ y
            grads["W2"][k] = du.T @ betas[k]
            dbeta = du @ params.W2[k]
    return type(params)(**grads), loss


def loss_value(kind, params, batch, m=None, support=None) -> float:
    X, y, beta_star = _stack(batch, support if kind == "lista_vm_ss" else None)
    m = 2 * X.shape[1] + 1 if m is None else m
    betas, _ = _unroll(kind, params, X, y, m)
    return float(np.sum((betas[-1] - beta_star) ** 2))


# -- parameterizations ------------------------------------------------------------

def theory_params(sigma_d: float, gamma: float, b_beta: float, mu_hat: float, rho: float,
                  K: int, d: int) -> ListaVmParams:
    """Constant ``M_k = gamma * (2 / sigma_d^2) I`` with geometric thresholds.

    ``theta_k = gamma * mu_hat * b_beta * rho^(k-1)``; ``mu_hat`` stands in for
    the off-diagonal coherence and ``b_beta`` for the unknown ``||beta*||_1``.
    """
    if not 0 < gamma <= GAMMA_MAX:
        raise DomainError(f"gamma must lie in (0, {GAMMA_MAX}], got {gamma}")
    if K < 1:
        raise DomainError("K must be >= 1")
    M = np.broadcast_to(gamma * (2.0 / sigma_d**2) * np.eye(d), (K, d, d)).copy()
    theta = gamma * mu_hat * b_beta * rho ** np.arange(K, dtype=float)
    return ListaVmParams(M, theta)


def ista_params(kind, X, K, alpha=DEFAULT_ALPHA, L=None, m=None):
    """Parameters under which ``kind`` reproduces ISTA on ``X`` (or starts near it)."""
    X = np.asarray(X, dtype=float)
    N, d = X.shape
    L = spectral_norm_sq(X) if L is None else L
    theta = np.full(K, alpha / L)
    if kind in ("lista_vm", "lista_vm_ss"):
        m = 2 * N + 1 if m is None else m
        return ListaVmParams(np.broadcast_to(np.eye(d) * (m / L), (K, d, d)).copy(), theta)
    if kind == "lista_cp":
        return ListaCpParams(np.broadcast_to(X / L, (K, N, d)).copy(), theta)
    if kind == "lista":
        W1 = np.broadcast_to(X.T / L, (K, d, N)).copy()
        W2 = np.broadcast_to(np.eye(d) - X.T @ X / L, (K, d, d)).copy()
        return ListaParams(W1, W2, theta)
    raise ConfigError(f"unknown model kind {kind!r}")


# -- meta-training -------------------------------------------------------------

@dataclass
class TrainConfig:
    kind: str = "lista_vm"
    K: int = 12
    epochs: int = 20
    matrices_per_epoch: int = 20
    instances_per_matrix: int = 100
    learning_rate: float = 1e-3
    optimizer: str = "momentum"      # "gd" | "momentum" | "adam"
    momentum: float = 0.9
    adam_betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    fixed_x: bool = False
    support_set: tuple[int, ...] | None = None
    alpha: float = DEFAULT_ALPHA
    clip_norm: float | None = 10.0
    test_instances: int = 200
    instance: InstanceConfig = field(default_factory=InstanceConfig)

    def __post_init__(self):
        params_type(self.kind)
        if min(self.epochs, self.matrices_per_epoch, self.instances_per_matrix, self.K) < 1:
            raise ConfigError("epochs, matrices_per_epoch, instances_per_matrix and K must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.optimizer not in ("gd", "momentum", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.kind == "lista_vm_ss" and self.support_set is None:
            raise ConfigError("lista_vm_ss training needs support_set")


@dataclass
class TrainResult:
    params: object
    history: list[dict]
    train_X: np.ndarray | None

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,test_err_fixed_x,test_err_varying_x"]
        for row in self.history:
            lines.append(",".join(repr(float(row[k])) if k != "epoch" else str(row[k])
                                  for k in ("epoch", "train_loss", "test_err_fixed_x",
                                            "test_err_varying_x")))
        return "\n".join(lines) + "\n"


def _pilot_L(cfg: TrainConfig, fixed_X):
    """Average ``L`` over pilot matrices (columns restricted for LISTA-VM-SS)."""
    if fixed_X is not None:
        Xs = [fixed_X]
    else:
        inst_cfg = cfg.instance
        rng = np.random.default_rng(derive_seed(cfg.seed, 10**6))
        Xs = [rng.standard_normal((inst_cfg.n_measurements, inst_cfg.d)) * np.sqrt(inst_cfg.variances)
              for _ in range(16)]
    if cfg.kind == "lista_vm_ss":
        Xs = [restrict_columns(X, cfg.support_set) for X in Xs]
    return float(np.mean([spectral_norm_sq(X) for X in Xs])), Xs[0]


def mean_beta_error(kind, params, batch, support=None) -> float:
    beta_hat = predict_batch(kind, params, batch, support=support)
    beta_star = np.stack([inst.beta_star for inst in batch])
    return float(np.mean(np.sum((beta_hat - beta_star) ** 2, axis=1)))


def meta_train(cfg: TrainConfig, init=None) -> TrainResult:
    """Gradient-descent training on freshly sampled instances each epoch.

    Each (matrix, instances) group is one minibatch step on the mean
    per-instance loss. With ``fixed_x`` every group reuses one matrix.
    """
    inst_cfg = cfg.instance
    if cfg.support_set is not None:
        inst_cfg = replace(inst_cfg, support_set=tuple(cfg.support_set))
    fixed_X = None
    if cfg.fixed_x:
        fixed_X = sample_batch(inst_cfg, 1, derive_seed(cfg.seed, -7), fixed_x=True)[0].X
    L, X_init = _pilot_L(cfg, fixed_X)
    support = cfg.support_set if cfg.kind == "lista_vm_ss" else None
    params = init if init is not None else ista_params(cfg.kind, X_init, cfg.K, cfg.alpha, L=L)

    test_seed = derive_seed(cfg.seed, -3)
    held_X = fixed_X if fixed_X is not None else sample_batch(inst_cfg, 1, test_seed, fixed_x=True)[0].X
    test_fixed = sample_batch(inst_cfg, cfg.test_instances, test_seed, X=held_X)
    test_vary = sample_batch(inst_cfg, cfg.test_instances, derive_seed(cfg.seed, -4))

    vec = flatten(params)
    velocity = np.zeros_like(vec)
    second = np.zeros_like(vec)
    step = 0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        epoch_loss, count = 0.0, 0
        for j in range(cfg.matrices_per_epoch):
            group_seed = derive_seed(derive_seed(cfg.seed, epoch), j)
            batch = sample_batch(inst_cfg, cfg.instances_per_matrix, group_seed,
                                 fixed_x=True, X=fixed_X)
            with np.errstate(over="ignore", invalid="ignore"):
                grads, loss = grad_unrolled(cfg.kind, params, batch, support=support)
            g = flatten(grads) / len(batch)
            if not (np.isfinite(loss) and np.all(np.isfinite(g))):
                raise TrainingError("training loss or gradient is not finite", epoch)
            if cfg.clip_norm is not None:
                norm = np.linalg.norm(g)
                if norm > cfg.clip_norm:
                    g *= cfg.clip_norm / norm
            step += 1
            if cfg.optimizer == "momentum":
                velocity = cfg.momentum * velocity - cfg.learning_rate * g
                vec = vec + velocity
            elif cfg.optimizer == "adam":
                b1, b2 = cfg.adam_betas
                velocity = b1 * velocity + (1 - b1) * g
                second = b2 * second + (1 - b2) * g * g
                m_hat = velocity / (1 - b1**step)
                v_hat = second / (1 - b2**step)
                vec = vec - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + 1e-8)
            else:
                vec = vec - cfg.learning_rate * g
            params = unflatten(params, vec)
            params.theta = np.maximum(params.theta, 0.0)
            vec = flatten(params)
            epoch_loss += loss
            count += len(batch)
        row = {
            "epoch": epoch,
            "train_loss": epoch_loss / count,
            "test_err_fixed_x": _safe_error(cfg.kind, params, test_fixed, support),
            "test_err_varying_x": _safe_error(cfg.kind, params, test_vary, support),
        }
        if not np.isfinite(row["train_loss"]):
            raise TrainingError("training loss is not finite", epoch)
        history.append(row)
        log.info("%s epoch %d: train %.4g fixed %.4g varying %.4g", cfg.kind, epoch,
                 row["train_loss"], row["test_err_fixed_x"], row["test_err_varying_x"])
    return TrainResult(params, history, fixed_X)


def _safe_error(kind, params, batch, support):
    with np.errstate(over="ignore", invalid="ignore"):
        return mean_beta_error(kind, params, batch, support)

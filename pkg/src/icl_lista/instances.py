"""Sampling and serialization of in-context sparse-recovery instances.

An instance is a measurement matrix ``X`` (rows are demonstration inputs),
an ``S``-sparse ground truth ``beta_star``, observations ``y = X beta_star``
and a held-out query pair ``(x_query, y_query)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError

MAGIC = b"ICLI"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIII")  # magic, version, d, N, S


@dataclass(frozen=True)
class InstanceConfig:
    d: int = 20
    n_measurements: int = 10
    sparsity: int = 3
    support_set: tuple[int, ...] | None = None  # 0-based indices
    noise_std: float = 0.0
    x_variances: tuple[float, ...] | None = None
    beta_l1_bound: float = 10.0
    x_norm_bound: float = 5.0

    def __post_init__(self):
        if self.d < 1 or self.n_measurements < 1:
            raise ConfigError("d and n_measurements must be positive")
        if self.sparsity < 0:
            raise ConfigError("sparsity must be non-negative")
        if self.support_set is not None:
            supp = tuple(int(i) for i in self.support_set)
            if len(set(supp)) != len(supp) or any(i < 0 or i >= self.d for i in supp):
                raise ConfigError(f"support_set must be distinct indices in [0, {self.d})")
            if not 1 <= self.sparsity <= len(supp):
                raise ConfigError(
                    f"sparsity {self.sparsity} must satisfy 1 <= S <= |support| = {len(supp)}"
                )
            object.__setattr__(self, "support_set", tuple(sorted(supp)))
        elif self.sparsity > self.d:
            raise ConfigError(f"sparsity {self.sparsity} exceeds d = {self.d}")
        if self.x_variances is not None:
            var = tuple(float(v) for v in self.x_variances)
            if len(var) != self.d or min(var) <= 0:
                raise ConfigError("x_variances needs d strictly positive entries")
            object.__setattr__(self, "x_variances", var)
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")

    @property
    def variances(self) -> np.ndarray:
        if self.x_variances is None:
            return np.ones(self.d)
        return np.asarray(self.x_variances, dtype=float)

    @property
    def sigma_d(self) -> float:
        """Smallest per-coordinate standard deviation."""
        return float(np.sqrt(self.variances.min()))

    @property
    def candidates(self) -> np.ndarray:
        if self.support_set is None:
            return np.arange(self.d)
        return np.asarray(self.support_set)

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "n_measurements": self.n_measurements,
            "sparsity": self.sparsity,
            "support_set": None if self.support_set is None else list(self.support_set),
            "noise_std": self.noise_std,
            "x_variances": None if self.x_variances is None else list(self.x_variances),
            "beta_l1_bound": self.beta_l1_bound,
            "x_norm_bound": self.x_norm_bound,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "InstanceConfig":
        data = dict(data)
        for key in ("support_set", "x_variances"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(eq=False)
class SparseInstance:
    X: np.ndarray
    beta_star: np.ndarray
    y: np.ndarray
    x_query: np.ndarray
    y_query: float
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def sparsity(self) -> int:
        return int(np.count_nonzero(self.beta_star))

    @property
    def X_tilde(self) -> np.ndarray:
        """Measurement rows with the query row appended, shape (N+1, d)."""
        return np.vstack([self.X, self.x_query])

    @property
    def y_tilde(self) -> np.ndarray:
        return np.append(self.y, self.y_query)

    def __eq__(self, other):
        if not isinstance(other, SparseInstance):
            return NotImplemented
        return (
            np.array_equal(self.X, other.X)
            and np.array_equal(self.beta_star, other.beta_star)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.x_query, other.x_query)
            and self.y_query == other.y_query
        )


def derive_seed(seed: int, index: int) -> int:
    """Independent 63-bit sub-seed for element ``index`` of a seeded batch."""
    index = int(index)
    key = (0, index) if index >= 0 else (1, -index)  # negative indices name auxiliary streams
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    hi, lo = ss.generate_state(2, dtype=np.uint32)
    return int((int(hi) << 31) ^ int(lo))


def sample_measurements(config: InstanceConfig, rng: np.random.Generator, rows: int) -> np.ndarray:
    std = np.sqrt(config.variances)
    return rng.standard_normal((rows, config.d)) * std


def sample_instance(config: InstanceConfig, seed: int, X: np.ndarray | None = None) -> SparseInstance:
    """Draw one instance; passing ``X`` reuses a fixed measurement matrix."""
    rng = np.random.default_rng(seed)
    N, d = config.n_measurements, config.d
    if X is None:
        X = sample_measurements(config, rng, N)
    else:
        X = np.array(X, dtype=float)
        if X.shape != (N, d):
            raise ConfigError(f"fixed X has shape {X.shape}, expected {(N, d)}")
    x_query = sample_measurements(config, rng, 1)[0]

    beta = np.zeros(d)
    if config.sparsity > 0:
        idx = rng.choice(config.candidates, size=config.sparsity, replace=False)
        beta[idx] = rng.standard_normal(config.sparsity)

    y = X @ beta
    if config.noise_std > 0:
        y = y + config.noise_std * rng.standard_normal(N)
    return SparseInstance(X=X, beta_star=beta, y=y, x_query=x_query, y_query=float(x_query @ beta))


def sample_batch(config: InstanceConfig, count: int, seed: int, fixed_x: bool = False,
                 X: np.ndarray | None = None) -> list[SparseInstance]:
    """``count`` independent instances; element i uses ``derive_seed(seed, i)``.

    With ``fixed_x`` every instance shares one measurement matrix (drawn from
    ``derive_seed(seed, -1)`` unless ``X`` is given) and only ``beta_star`` and
    the query vary.
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    if fixed_x and X is None:
        X = sample_measurements(config, np.random.default_rng(derive_seed(seed, -1)),
                                config.n_measurements)
    shared = X if (fixed_x or X is not None) else None
    return [sample_instance(config, derive_seed(seed, i), X=shared) for i in range(count)]


def restrict_columns(X: np.ndarray, support) -> np.ndarray:
    """Copy of ``X`` with every column outside ``support`` set to zero."""
    keep = np.zeros(X.shape[-1], dtype=bool)
    keep[np.asarray(support, dtype=int)] = True
    return np.where(keep, X, 0.0)


# -- binary form -------------------------------------------------------------

def serialize_instance(inst: SparseInstance) -> bytes:
    N, d = inst.X.shape
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, d, N, inst.sparsity)
    body = np.concatenate([
        inst.X.ravel(order="C"), inst.beta_star, inst.y, inst.x_query, [inst.y_query],
    ]).astype("<f8")
    return header + body.tobytes()


def deserialize_instance(payload: bytes) -> SparseInstance:
    if len(payload) < _HEADER.size:
        raise ParseError(f"payload shorter than the {_HEADER.size}-byte header", len(payload))
    magic, version, d, N, S = _HEADER.unpack_from(payload, 0)
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported version {version}", 4)
    n_floats = N * d + d + N + d + 1
    expected = _HEADER.size + 8 * n_floats
    if len(payload) != expected:
        offset = min(len(payload), expected)
        raise ParseError(
            f"body length {len(payload) - _HEADER.size} does not match header d={d}, N={N} "
            f"(expected {8 * n_floats} bytes)", offset)
    body = np.frombuffer(payload, dtype="<f8", offset=_HEADER.size).astype(float)
    pos = 0

    def take(count):
        nonlocal pos
        out = body[pos:pos + count]
        pos += count
        return out

    X = take(N * d).reshape(N, d).copy()
    beta = take(d).copy()
    y = take(N).copy()
    x_query = take(d).copy()
    y_query = float(take(1)[0])
    if np.count_nonzero(beta) != S:
        raise ParseError(f"header sparsity {S} disagrees with body ({np.count_nonzero(beta)})",
                         _HEADER.size + 8 * N * d)
    return SparseInstance(X=X, beta_star=beta, y=y, x_query=x_query, y_query=y_query)


# -- JSON form ---------------------------------------------------------------

def instance_to_json(inst: SparseInstance) -> str:
    return json.dumps({
        "d": inst.d,
        "n": inst.n,
        "s": inst.sparsity,
        "x": inst.X.tolist(),
        "beta_star": inst.beta_star.tolist(),
        "y": inst.y.tolist(),
        "x_query": inst.x_query.tolist(),
        "y_query": inst.y_query,
    })


def instance_from_json(text: str) -> SparseInstance:
    try:
        data = json.loads(text)
        X = np.asarray(data["x"], dtype=float).reshape(data["n"], data["d"])
        inst = SparseInstance(
            X=X,
            beta_star=np.asarray(data["beta_star"], dtype=float),
            y=np.asarray(data["y"], dtype=float),
            x_query=np.asarray(data["x_query"], dtype=float),
            y_query=float(data["y_query"]),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"malformed instance JSON: {exc}") from exc
    if inst.beta_star.shape != (inst.d,) or inst.y.shape != (inst.n,) or inst.x_query.shape != (inst.d,):
        raise ParseError("vector lengths disagree with d / n")
    return inst

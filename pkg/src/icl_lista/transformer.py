"""Decoder Transformer with ReLU masked attention, and weights that run LISTA-VM.

Token layout (0-based rows, ``D = 2d + 2``)::

    rows 0..d-1    x_i
    row  d         y_i (even columns) / 0
    rows d+1..2d   beta slot
    row  2d+1      indicator, 1 on odd (1-based) columns

Column ``2n+1`` (1-based) carries ``x_{n+1}`` and, after each layer, the
LISTA-VM iterate computed from the ``n``-row prefix.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .container import pack_arrays, unpack_arrays
from .errors import DomainError, NumericError, ParseError
from .learned import GAMMA_MAX, ListaVmParams

HEAD_TAGS = ("+1", "-1", "+2", "-2")


@dataclass
class AttentionHead:
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        self.Q, self.K, self.V = (np.asarray(a, dtype=float) for a in (self.Q, self.K, self.V))
        D = self.Q.shape[0]
        for a in (self.Q, self.K, self.V):
            if a.shape != (D, D):
                raise DomainError("head matrices must be square and share D")

    @property
    def D(self) -> int:
        return self.Q.shape[0]


@dataclass
class MlpWeights:
    W1: np.ndarray  # (D', D)
    W2: np.ndarray  # (D, D')
    b: np.ndarray   # (D',)

    def __post_init__(self):
        self.W1, self.W2, self.b = (np.asarray(a, dtype=float) for a in (self.W1, self.W2, self.b))
        Dp, D = self.W1.shape
        if self.W2.shape != (D, Dp) or self.b.shape != (Dp,):
            raise DomainError(f"MLP shapes W1{self.W1.shape} W2{self.W2.shape} b{self.b.shape}")


@dataclass
class Layer:
    heads: list[AttentionHead]
    mlp: MlpWeights


@dataclass
class TransformerWeights:
    layers: list[Layer]
    d: int
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    M_V: np.ndarray | None = None
    B: float = 0.0
    theta: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        D = 2 * self.d + 2
        for layer in self.layers:
            if any(h.D != D for h in layer.heads) or layer.mlp.W1.shape[1] != D:
                raise DomainError(f"every layer must act on D = {D}")

    @property
    def K(self) -> int:
        return len(self.layers)

    @property
    def D(self) -> int:
        return 2 * self.d + 2


@dataclass
class EmbeddingSequence:
    H: np.ndarray
    d: int
    N: int


@dataclass
class ReadOutSpec:
    kind: str  # "linear" | "query" | "query_theory"
    v: np.ndarray | None = None
    V: np.ndarray | None = None


# -- primitives ----------------------------------------------------------------

def _relu(x):
    return np.maximum(x, 0.0)


def causal_mask(T: int) -> np.ndarray:
    """``mask[i, j] = 1/j`` (1-based ``j``) when ``i <= j``, else 0."""
    i, j = np.indices((T, T))
    return np.where(i <= j, 1.0 / (j + 1.0), 0.0)


def masked_attention(H, heads) -> np.ndarray:
    """``H + sum_m (V_m H) mask(relu((K_m H)^T (Q_m H)))``; scores are [key, query]."""
    H = np.asarray(H, dtype=float)
    D, T = H.shape
    if T < 1:
        raise DomainError("sequence must contain at least one token")
    mask = causal_mask(T)
    out = H.copy()
    for head in heads:
        if head.D != D:
            raise DomainError(f"head acts on D = {head.D}, sequence has D = {D}")
        scores = _relu((head.K @ H).T @ (head.Q @ H))
        out += (head.V @ H) @ (scores * mask)
    return out


def mlp_apply(H, mlp: MlpWeights) -> np.ndarray:
    H = np.asarray(H, dtype=float)
    if H.shape[0] != mlp.W1.shape[1]:
        raise DomainError(f"MLP expects D = {mlp.W1.shape[1]}, got {H.shape[0]}")
    return H + mlp.W2 @ _relu(mlp.W1 @ H + mlp.b[:, None])


def forward(weights: TransformerWeights, H1) -> list[np.ndarray]:
    """All hidden states ``[H^(1), ..., H^(K+1)]``."""
    H = np.asarray(H1, dtype=float)
    if H.shape[0] != weights.D:
        raise DomainError(f"input has D = {H.shape[0]}, weights expect {weights.D}")
    states = [H]
    with np.errstate(over="ignore", invalid="ignore"):
        for k, layer in enumerate(weights.layers, start=1):
            H = mlp_apply(masked_attention(H, layer.heads), layer.mlp)
            if not np.all(np.isfinite(H)):
                raise NumericError(f"non-finite hidden state after layer {k}", layer=k)
            states.append(H)
    return states


# -- embedding and construction -------------------------------------------------

def embed_instance(inst) -> EmbeddingSequence:
    """Interleave ``(x_i, 0, 0, 1)`` and ``(x_i, y_i, 0, 0)``, then the query token."""
    N, d = inst.X.shape
    H = np.zeros((2 * d + 2, 2 * N + 1))
    X_tilde = np.vstack([inst.X, inst.x_query])
    H[:d, 0::2] = X_tilde.T
    H[:d, 1::2] = inst.X.T
    H[d, 1::2] = inst.y
    H[2 * d + 1, 0::2] = 1.0
    return EmbeddingSequence(H, d, N)


def _beta_rows(d):
    return slice(d + 1, 2 * d + 1)


def constructed_mlp(d: int, theta: float) -> MlpWeights:
    """Four stacked blocks giving ``beta -> S_theta(beta)`` on the beta slot only.

    ``relu(b-theta) - relu(-b-theta) - (relu(b) - relu(-b))`` is added to ``b``.
    """
    D = 2 * d + 2
    P = np.zeros((D, D))
    P[_beta_rows(d), _beta_rows(d)] = np.eye(d)
    W1 = np.vstack([P, -P, P, -P])
    W2 = np.hstack([-P, P, P, -P])
    b = np.zeros(4 * D)
    sel = np.diag(P) > 0
    b[2 * D:3 * D][sel] = -theta
    b[3 * D:4 * D][sel] = -theta
    return MlpWeights(W1, W2, b)


def _attention_heads(d: int, M: np.ndarray, B: float) -> list[AttentionHead]:
    """Heads (+1, -1, +2, -2) adding ``(1/j) M sum_i x_i (y_i - x_i^T beta_j)``."""
    D = 2 * d + 2
    br, xr = _beta_rows(d), slice(0, d)
    heads = []
    for sign in (1.0, -1.0):
        Q = np.zeros((D, D))
        Q[br, br] = -sign * np.eye(d)
        Q[D - 1, D - 1] = -B
        K = np.zeros((D, D))
        K[br, xr] = np.eye(d)
        K[D - 1, D - 1] = 1.0
        V = np.zeros((D, D))
        V[br, xr] = sign * M
        heads.append(AttentionHead(Q, K, V))
    for sign in (1.0, -1.0):
        Q = np.zeros((D, D))
        Q[d, D - 1] = sign
        K = np.zeros((D, D))
        K[d, d] = 1.0
        V = np.zeros((D, D))
        V[br, xr] = sign * M
        heads.append(AttentionHead(Q, K, V))
    return heads


def default_B(d: int, K: int, M_V: np.ndarray, b_beta: float, b_x: float,
              gamma_max: float = GAMMA_MAX) -> float:
    """Worst-case gating constant ``b_beta b_x + b_x sqrt(d) (b_beta + C^K)``."""
    norm_mv = float(np.linalg.norm(M_V, 2))
    C = 1.0 + b_x**2 * d * gamma_max * norm_mv + b_beta * b_x * gamma_max * norm_mv
    with np.errstate(over="ignore"):
        B = b_beta * b_x + b_x * np.sqrt(d) * (b_beta + np.float64(C) ** K)
    if not np.isfinite(B):
        raise NumericError(f"default gating constant overflows at K = {K}; pass B explicitly "
                           "or use calibrate_B")
    return float(B)


def weights_from_params(params: ListaVmParams, B: float) -> TransformerWeights:
    """Transformer whose layer ``k`` applies the LISTA-VM step with matrix ``M_k``."""
    K, d, _ = params.M.shape
    if not np.isfinite(B) or B <= 0:
        raise DomainError("gating constant B must be positive and finite")
    layers = [Layer(_attention_heads(d, params.M[k], B), constructed_mlp(d, params.theta[k]))
              for k in range(K)]
    return TransformerWeights(layers, d, np.ones(K), None, float(B), np.array(params.theta))


def build_constructed_weights(d: int, K: int, gamma, sigma_d: float, theta_schedule,
                              B: float | None = None, b_beta: float = 10.0, b_x: float = 5.0,
                              M_V: np.ndarray | None = None) -> TransformerWeights:
    """Weights emulating LISTA-VM with ``M_k = gamma_k M^V``, ``M^V = (2/sigma_d^2) I``.

    ``gamma`` may be a scalar or a length-``K`` schedule; each entry must lie
    in ``(0, 1.5]``. ``B`` defaults to the worst-case bound of :func:`default_B`.
    """
    if K < 1:
        raise DomainError("K must be >= 1")
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), (K,)).copy()
    if np.any(gamma <= 0) or np.any(gamma > GAMMA_MAX):
        raise DomainError(f"gamma must lie in (0, {GAMMA_MAX}]")
    theta = np.asarray(theta_schedule, dtype=float)
    if theta.shape != (K,):
        raise DomainError(f"theta schedule needs length {K}, got {theta.shape}")
    if np.any(theta < 0):
        raise DomainError("thresholds must be >= 0")
    M_V = (2.0 / sigma_d**2) * np.eye(d) if M_V is None else np.asarray(M_V, dtype=float)
    if B is None:
        B = default_B(d, K, M_V, b_beta, b_x)
    params = ListaVmParams(gamma[:, None, None] * M_V, theta)
    w = weights_from_params(params, B)
    w.gamma, w.M_V = gamma, M_V
    return w


def calibrate_B(weights: TransformerWeights, instances, factor: float = 10.0) -> float:
    """``factor`` times the largest ``|beta_j^T x_i|`` met in a pilot forward pass.

    The pilot uses the weights' own ``B`` (pass huge-B weights); only the gated
    pairs (odd key ``i`` up to odd query ``j``) matter.
    """
    d = weights.d
    peak = 0.0
    for inst in instances:
        states = forward(weights, embed_instance(inst).H)
        X_tilde = inst.X_tilde
        for H in states[:-1]:
            betas = H[_beta_rows(d), 0::2].T          # (N+1, d), prefix n = row n
            G = np.abs(betas @ X_tilde.T)             # [query n, key row]
            peak = max(peak, float(np.max(np.tril(G))))
    return factor * max(peak, 1e-300)


# -- probing and read-outs ------------------------------------------------------

def extract_beta(H, n: int, d: int | None = None) -> np.ndarray:
    """Beta slot of 1-based column ``2n + 1``, the iterate built from an ``n``-row prefix."""
    H = np.asarray(H)
    d = (H.shape[0] - 2) // 2 if d is None else d
    col = 2 * n
    if not 0 <= col < H.shape[1]:
        raise DomainError(f"prefix length {n} outside 0..{(H.shape[1] - 1) // 2}")
    return H[_beta_rows(d), col].copy()


def extract_column(H, col: int, d: int | None = None) -> np.ndarray:
    """Beta slot of an arbitrary 1-based column; only odd columns carry iterates."""
    if col % 2 == 0:
        raise DomainError(f"column {col} is an even (label) column; only odd columns hold iterates")
    return extract_beta(H, (col - 1) // 2, d)


def readout_query(H_last, inst, n: int) -> float:
    """``y_hat_n = x_n^T beta`` read from column ``2n - 1`` (prefix ``n - 1``).

    ``n = N + 1`` selects the query row.
    """
    N = inst.X.shape[0]
    if not 1 <= n <= N + 1:
        raise DomainError(f"n must lie in 1..{N + 1}")
    d = inst.X.shape[1]
    D = 2 * d + 2
    V = np.zeros((D, d))
    V[_beta_rows(d)] = np.eye(d)
    h = np.asarray(H_last)[:, 2 * (n - 1)]
    return float(inst.X_tilde[n - 1] @ (V.T @ h))


def final_average_layer(H_last, d: int | None = None) -> np.ndarray:
    """Two-head layer writing ``(2/j) sum_{odd i<=j} beta_i^T x_j`` into row ``d``.

    At 1-based column ``2n+1`` this is ``(2/(2n+1)) sum_{i=1..n} beta_{2i+1}^T x_{n+1}``.
    """
    H = np.asarray(H_last, dtype=float)
    d = (H.shape[0] - 2) // 2 if d is None else d
    D = 2 * d + 2
    br, xr = _beta_rows(d), slice(0, d)
    heads = []
    for sign in (1.0, -1.0):
        Q = np.zeros((D, D))
        Q[br, xr] = sign * np.eye(d)
        K = np.zeros((D, D))
        K[br, br] = np.eye(d)
        V = np.zeros((D, D))
        V[d, D - 1] = 2.0 * sign
        heads.append(AttentionHead(Q, K, V))
    return masked_attention(H, heads)


def readout_linear(H_aug, n: int, v=None) -> float:
    """``v^T h`` on column ``2n + 1``; ``v`` defaults to the label coordinate."""
    H = np.asarray(H_aug)
    if v is None:
        v = np.zeros(H.shape[0])
        v[(H.shape[0] - 2) // 2] = 1.0
    if not 0 <= 2 * n < H.shape[1]:
        raise DomainError(f"prefix length {n} out of range")
    return float(np.asarray(v) @ H[:, 2 * n])


# -- external formats -------------------------------------------------------------

def serialize_weights(w: TransformerWeights) -> bytes:
    arrays = {
        "d": np.array([w.d]),
        "K": np.array([w.K]),
        "B": np.array([w.B]),
        "gamma": np.asarray(w.gamma, dtype=float),
        "theta": np.asarray(w.theta, dtype=float),
    }
    if w.M_V is not None:
        arrays["M_V"] = w.M_V
    for k, layer in enumerate(w.layers):
        for tag, head in zip(HEAD_TAGS, layer.heads):
            for name in "QKV":
                arrays[f"L{k}.h{tag}.{name}"] = getattr(head, name)
        arrays[f"L{k}.mlp.W1"] = layer.mlp.W1
        arrays[f"L{k}.mlp.W2"] = layer.mlp.W2
        arrays[f"L{k}.mlp.b"] = layer.mlp.b
    return pack_arrays("transformer", arrays)


def deserialize_weights(payload: bytes) -> TransformerWeights:
    _, a = unpack_arrays(payload, expect_kind="transformer")
    try:
        d, K = int(a["d"][0]), int(a["K"][0])
        layers = []
        for k in range(K):
            heads = [AttentionHead(*(a[f"L{k}.h{tag}.{n}"] for n in "QKV")) for tag in HEAD_TAGS]
            mlp = MlpWeights(a[f"L{k}.mlp.W1"], a[f"L{k}.mlp.W2"], a[f"L{k}.mlp.b"])
            layers.append(Layer(heads, mlp))
        return TransformerWeights(layers, d, a["gamma"], a.get("M_V"), float(a["B"][0]), a["theta"])
    except (KeyError, DomainError) as exc:
        raise ParseError(f"incomplete transformer container: {exc}") from exc


def hidden_states_csv(states) -> str:
    """Long-format dump ``layer,column,coordinate,value`` (all 1-based)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "column", "coordinate", "value"])
    for k, H in enumerate(states, start=1):
        for c in range(H.shape[1]):
            for r in range(H.shape[0]):
                writer.writerow([k, c + 1, r + 1, repr(float(H[r, c]))])
    return buf.getvalue()

"""Config-driven experiments producing CSV curves, SVG charts and a hashed manifest.

Every experiment returns a list of ``Curve`` objects. ``x`` is the prefix length
``n``, the layer index ``k`` or the training epoch, depending on the kind.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .classical import DEFAULT_ALPHA, LassoProblem, fista_solve, ista_solve, spectral_norm_sq
from .errors import ConfigError, DomainError, ParseError
from .instances import InstanceConfig, derive_seed, restrict_columns, sample_batch
from .learned import TrainConfig, _unroll, meta_train, theory_params
from .transformer import (calibrate_B, embed_instance, final_average_layer, forward,
                          readout_linear, readout_query, weights_from_params)
from .verification import check_condition, coherence_stats

EXPERIMENTS = ("fig1a", "fig1b", "fig1c", "convergence_k", "coherence_decay", "meta_train_compare")
SOLVERS = ("ista", "fista", "lista", "lista_cp", "lista_meta", "lista_cp_meta", "lista_vm",
           "lista_vm_ss", "transformer")
_FIXED_SHAPE = ("lista", "lista_cp", "lista_meta", "lista_cp_meta")
METRIC_NOTE = ("label prediction loss (y_{n+1} - x_{n+1}^T beta_hat)^2 averaged (mean) over test "
               "instances; stderr is the standard error of the per-seed means")


@dataclass
class ExperimentConfig:
    experiment: str
    instance: InstanceConfig = field(default_factory=InstanceConfig)
    solvers: list[str] = field(default_factory=lambda: ["ista", "fista", "lista_vm"])
    solver_params: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "out"
    desk_scale: float = 1.0
    K: int = 12
    test_instances: int = 500
    train: dict = field(default_factory=dict)
    n_values: list[int] | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        if not self.solvers:
            raise ConfigError("solver roster must be nonempty")
        unknown = [s for s in self.solvers if s not in SOLVERS]
        if unknown:
            raise ConfigError(f"unknown solver(s) {unknown}; known: {SOLVERS}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if not self.desk_scale > 0:
            raise ConfigError("desk_scale must be > 0")
        if self.K < 1 or self.test_instances < 1:
            raise ConfigError("K and test_instances must be positive")
        bad = set(self.train) - {f for f in TrainConfig.__dataclass_fields__}
        if bad:
            raise ConfigError(f"unknown training fields {sorted(bad)}")

    def scaled(self, value: int) -> int:
        return max(1, int(round(value * self.desk_scale)))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["instance"] = self.instance.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        data = dict(data)
        data["instance"] = InstanceConfig.from_dict(data.get("instance", {}))
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown config fields {sorted(extra)}")
        if "experiment" not in data:
            raise ConfigError("config lacks 'experiment'")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(data)


@dataclass
class Curve:
    series: str
    x: list
    value: list
    stderr: list


# -- CSV / SVG ---------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def emit_csv(curves, path) -> None:
    """Write ``x,series,value,stderr`` rows, full float precision."""
    if not curves or not any(len(c.x) for c in curves):
        raise DomainError("no curves to write")
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "series", "value", "stderr"])
            for c in curves:
                for x, v, s in zip(c.x, c.value, c.stderr):
                    w.writerow([_fmt(x), c.series, _fmt(v), _fmt(s)])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def read_csv(path) -> list[Curve]:
    curves: dict[str, Curve] = {}
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["x", "series", "value", "stderr"]:
        raise ParseError(f"{path}: missing x,series,value,stderr header")
    for row in rows[1:]:
        x, series, value, err = row
        c = curves.setdefault(series, Curve(series, [], [], []))
        c.x.append(int(x) if x.lstrip("-").isdigit() else float(x))
        c.value.append(float(value))
        c.stderr.append(float(err))
    return list(curves.values())


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
            "#7f7f7f", "#bcbd22", "#17becf")


def emit_svg(curves, path, title: str = "", xlabel: str = "x", ylabel: str = "value") -> None:
    """Self-contained line chart with a log10 y axis; non-positive values are skipped."""
    if not curves:
        raise DomainError("no curves to draw")
    pts = [(float(x), float(v)) for c in curves for x, v in zip(c.x, c.value)
           if v > 0 and math.isfinite(v)]
    if not pts:
        raise DomainError("no positive finite values to draw on a log scale")
    W, H, left, right, top, bottom = 640, 420, 70, 170, 40, 50
    xs = [p[0] for p in pts]
    ys = [math.log10(p[1]) for p in pts]
    x0, x1 = min(xs), max(xs)
    if x0 == x1:
        x0, x1 = x0 - 1, x1 + 1
    y0, y1 = math.floor(min(ys)), math.ceil(max(ys))
    if y0 == y1:
        y1 += 1

    def px(x):
        return left + (x - x0) / (x1 - x0) * (W - left - right)

    def py(ly):
        return H - bottom - (ly - y0) / (y1 - y0) * (H - top - bottom)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
           f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" font-size="13">{title}</text>',
           f'<line x1="{left}" y1="{H - bottom}" x2="{W - right}" y2="{H - bottom}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{H - bottom}" stroke="black"/>']
    step = max(1, (y1 - y0) // 8)
    for e in range(y0, y1 + 1, step):
        y = py(e)
        out.append(f'<line x1="{left - 4}" y1="{y:.1f}" x2="{W - right}" y2="{y:.1f}" '
                   f'stroke="#dddddd"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end">1e{e}</text>')
    for x in sorted(set(xs))[:: max(1, len(set(xs)) // 10)]:
        out.append(f'<text x="{px(x):.1f}" y="{H - bottom + 15}" text-anchor="middle">{x:g}</text>')
    out.append(f'<text x="{(left + W - right) / 2:.1f}" y="{H - 10}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="15" y="{(top + H - bottom) / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 15 {(top + H - bottom) / 2:.1f})">{ylabel}</text>')
    for i, c in enumerate(curves):
        color = _PALETTE[i % len(_PALETTE)]
        coords = [(px(float(x)), py(math.log10(v))) for x, v in zip(c.x, c.value)
                  if v > 0 and math.isfinite(v)]
        if len(coords) > 1:
            d = " ".join(f"{a:.1f},{b:.1f}" for a, b in coords)
            out.append(f'<polyline points="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for a, b in coords:
            out.append(f'<circle cx="{a:.1f}" cy="{b:.1f}" r="2.5" fill="{color}"/>')
        ly = top + 14 * i
        out.append(f'<rect x="{W - right + 10}" y="{ly}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{W - right + 24}" y="{ly + 9}">{c.series}</text>')
    out.append("</svg>")
    try:
        with open(path, "w") as fh:
            fh.write("\n".join(out) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


# -- solver evaluation ----------------------------------------------------------------

def _train_config(cfg: ExperimentConfig, kind: str, seed: int, fixed_x: bool,
                  inst_cfg: InstanceConfig) -> TrainConfig:
    base = dict(epochs=20, matrices_per_epoch=20, instances_per_matrix=100, test_instances=50)
    base.update(cfg.train)
    base.update(cfg.solver_params.get(kind, {}).get("train", {}))
    for key in ("epochs", "matrices_per_epoch"):
        base[key] = cfg.scaled(base[key])
    support = inst_cfg.support_set if kind == "lista_vm_ss" else None
    return TrainConfig(kind=kind, K=cfg.K, seed=seed, fixed_x=fixed_x, support_set=support,
                       instance=inst_cfg, **base)


def _proximal_batch(solver, X, y, K, alpha):
    """ISTA / FISTA final iterates for a stack of problems, power-iteration ``L`` each."""
    out = np.empty((X.shape[0], X.shape[2]))
    solve = ista_solve if solver == "ista" else fista_solve
    for b in range(X.shape[0]):
        out[b] = solve(LassoProblem(X[b], y[b], alpha), K).final
    return out


class _Model:
    """A trained or parameter-free solver that maps (X prefix, y prefix) to beta_hat."""

    def __init__(self, name, params=None, support=None, weights=None, alpha=DEFAULT_ALPHA):
        self.name, self.params, self.support, self.weights, self.alpha = name, params, support, weights, alpha

    @property
    def prefix_capable(self) -> bool:
        return self.name not in _FIXED_SHAPE

    def betas(self, X, y, K):
        n = X.shape[1]
        if self.name in ("ista", "fista"):
            return _proximal_batch(self.name, X, y, K, self.alpha)
        if self.name in ("lista_vm", "lista_vm_ss", "transformer"):
            if self.name == "lista_vm_ss":
                X = restrict_columns(X, self.support)
            with np.errstate(over="ignore", invalid="ignore"):
                return _unroll("lista_vm", self.params, X, y, 2 * n + 1)[0][-1]
        kind = self.name.replace("_meta", "")
        with np.errstate(over="ignore", invalid="ignore"):
            return _unroll(kind, self.params, X, y)[0][-1]


def _build_models(cfg, seed, inst_cfg, fixed_x_mode):
    """Train every learned solver in the roster for one seed."""
    models, trained = {}, {}
    fixed_X = None
    for name in cfg.solvers:
        alpha = cfg.solver_params.get(name, {}).get("alpha", DEFAULT_ALPHA)
        if name in ("ista", "fista"):
            models[name] = _Model(name, alpha=alpha)
            continue
        kind = {"transformer": "lista_vm"}.get(name, name.replace("_meta", ""))
        fixed = fixed_x_mode and name in ("lista", "lista_cp")
        if (kind, fixed) not in trained:
            trained[kind, fixed] = meta_train(_train_config(cfg, kind, seed, fixed, inst_cfg))
        res = trained[kind, fixed]
        if fixed:
            fixed_X = res.train_X
        models[name] = _Model(name, res.params, inst_cfg.support_set)
    return models, fixed_X


def _label_losses(model, batch, n, K):
    """Squared error of predicting ``y_{n+1}`` from the first ``n`` rows."""
    X = np.stack([b.X_tilde for b in batch])
    y = np.stack([b.y_tilde for b in batch])
    beta = model.betas(X[:, :n], y[:, :n], K)
    with np.errstate(over="ignore", invalid="ignore"):
        pred = np.einsum("bd,bd->b", X[:, n], beta)
    return (y[:, n] - pred) ** 2


def _transformer_losses(weights, batch, n_values):
    """Query read-out losses of the Transformer, one forward per instance."""
    out = {n: [] for n in n_values}
    for inst in batch:
        H = forward(weights, embed_instance(inst).H)[-1]
        for n in n_values:
            out[n].append((inst.y_tilde[n] - readout_query(H, inst, n + 1)) ** 2)
    return {n: np.asarray(v) for n, v in out.items()}


def _aggregate(per_seed: dict) -> list[Curve]:
    """``{series: {x: [seed means]}}`` to curves with standard errors."""
    curves = []
    for series, table in per_seed.items():
        xs = sorted(table)
        vals = [float(np.mean(table[x])) for x in xs]
        errs = [float(np.std(table[x], ddof=1) / np.sqrt(len(table[x]))) if len(table[x]) > 1 else 0.0
                for x in xs]
        curves.append(Curve(series, xs, vals, errs))
    return curves


def _run_fig1(cfg: ExperimentConfig, support_mode: bool) -> list[Curve]:
    inst_cfg = cfg.instance
    if support_mode and inst_cfg.support_set is None:
        inst_cfg = replace(inst_cfg, support_set=tuple(range(min(10, inst_cfg.d))))
    N = inst_cfg.n_measurements
    n_values = cfg.n_values or list(range(1, N + 1))
    if any(not 1 <= n <= N for n in n_values):
        raise ConfigError(f"n_values must lie in 1..{N}")
    tests = cfg.scaled(cfg.test_instances)
    regimes = ("varying_x",) if support_mode else ("fixed_x", "varying_x")
    table: dict = {}
    for seed in cfg.seeds:
        models, fixed_X = _build_models(cfg, seed, inst_cfg, fixed_x_mode=not support_mode)
        for regime in regimes:
            eval_seed = derive_seed(seed, -20 if regime == "fixed_x" else -21)
            if regime == "fixed_x":
                if fixed_X is None:
                    fixed_X = sample_batch(inst_cfg, 1, derive_seed(seed, -7), fixed_x=True)[0].X
                batch = sample_batch(inst_cfg, tests, eval_seed, X=fixed_X)
            else:
                batch = sample_batch(inst_cfg, tests, eval_seed)
            for name, model in models.items():
                series = f"{name}:{regime}"
                if name == "transformer":
                    B = calibrate_B(weights_from_params(model.params, 1e300), batch[:20])
                    losses = _transformer_losses(weights_from_params(model.params, B), batch, n_values)
                    for n in n_values:
                        table.setdefault(series, {}).setdefault(n, []).append(float(np.mean(losses[n])))
                    continue
                ns = n_values if model.prefix_capable else [N]
                for n in ns:
                    loss = float(np.mean(_label_losses(model, batch, n, cfg.K)))
                    table.setdefault(series, {}).setdefault(n, []).append(loss)
    return _aggregate(table)


def _readout_weights(cfg, seed, inst_cfg):
    """Weights for the read-out comparison: theory schedule or a meta-trained LISTA-VM."""
    p = cfg.params
    if p.get("weights", "theory") == "trained":
        res = meta_train(_train_config(cfg, "lista_vm", seed, False, inst_cfg))
        params = res.params
    else:
        gamma = float(p.get("gamma", 0.25))
        params = theory_params(inst_cfg.sigma_d, gamma, float(p.get("b_beta", 1.0)),
                               float(p.get("mu_hat", 0.1)), float(p.get("rho", 0.8)), cfg.K, inst_cfg.d)
    return params


def readout_errors(weights, batch, n_values):
    """Mean ``|y_{n+1} - y_hat|`` for the query and the averaged linear read-outs."""
    q = {n: [] for n in n_values}
    lin = {n: [] for n in n_values}
    for inst in batch:
        H = forward(weights, embed_instance(inst).H)[-1]
        Haug = final_average_layer(H)
        for n in n_values:
            target = inst.y_tilde[n]
            q[n].append(abs(target - readout_query(H, inst, n + 1)))
            lin[n].append(abs(target - readout_linear(Haug, n)))
    return ({n: float(np.mean(v)) for n, v in q.items()},
            {n: float(np.mean(v)) for n, v in lin.items()})


def _run_fig1c(cfg: ExperimentConfig) -> list[Curve]:
    inst_cfg = cfg.instance
    N = inst_cfg.n_measurements
    n_values = cfg.n_values or list(range(1, N + 1))
    tests = cfg.scaled(cfg.test_instances)
    table: dict = {}
    for seed in cfg.seeds:
        params = _readout_weights(cfg, seed, inst_cfg)
        batch = sample_batch(inst_cfg, tests, derive_seed(seed, -21))
        B = calibrate_B(weights_from_params(params, 1e300), batch[:20])
        q, lin = readout_errors(weights_from_params(params, B), batch, n_values)
        for n in n_values:
            table.setdefault("query", {}).setdefault(n, []).append(q[n])
            table.setdefault("linear", {}).setdefault(n, []).append(lin[n])
    return _aggregate(table)


def _run_convergence(cfg: ExperimentConfig) -> list[Curve]:
    """Mean ``||beta^(k) - beta*||`` against ``k`` on condition-checked instances."""
    inst_cfg = cfg.instance
    gamma = float(cfg.params.get("gamma", 0.8))
    tests = cfg.scaled(cfg.test_instances)
    table: dict = {}
    for seed in cfg.seeds:
        batch = sample_batch(inst_cfg, tests, derive_seed(seed, -22))
        errs = {name: [] for name in cfg.solvers}
        for inst in batch:
            M_V = (2.0 / inst_cfg.sigma_d**2) * np.eye(inst.d)
            supp = np.flatnonzero(inst.beta_star)
            stats = coherence_stats(inst.X, M_V, support=supp if supp.size else None)
            rep = check_condition(stats, gamma, max(1, inst.sparsity))
            rho = min(rep.lhs, 1.0)
            L = spectral_norm_sq(inst.X)
            for name in cfg.solvers:
                if name in ("ista", "fista"):
                    solve = ista_solve if name == "ista" else fista_solve
                    betas = solve(LassoProblem(inst.X, inst.y, cfg.solver_params.get(name, {}).get(
                        "alpha", DEFAULT_ALPHA)), cfg.K, L=L).betas
                elif name in ("lista_vm", "transformer"):
                    p = theory_params(inst_cfg.sigma_d, gamma, float(np.abs(inst.beta_star).sum()),
                                      stats.mu_offdiag, rho, cfg.K, inst.d)
                    betas = _unroll("lista_vm", p, inst.X[None], inst.y[None], 2 * inst.n + 1)[0][:, 0]
                else:
                    raise ConfigError(f"solver {name!r} is not part of convergence_k")
                errs[name].append(np.linalg.norm(betas - inst.beta_star, axis=1))
        for name, e in errs.items():
            mean = np.mean(e, axis=0)
            for k in range(cfg.K + 1):
                table.setdefault(name, {}).setdefault(k, []).append(float(mean[k]))
    return _aggregate(table)


def coherence_sweep(inst_cfg: InstanceConfig, n_values, trials: int, seed: int) -> dict:
    """Median ``mu_offdiag`` (and diagonal extremes) of ``D_n^T X`` for each ``n``."""
    M_V = (2.0 / inst_cfg.sigma_d**2) * np.eye(inst_cfg.d)
    out = {}
    for n in n_values:
        rng = np.random.default_rng(derive_seed(seed, n))
        mus, lo, hi = [], [], []
        for _ in range(trials):
            X = rng.standard_normal((n, inst_cfg.d)) * np.sqrt(inst_cfg.variances)
            s = coherence_stats(X, M_V)
            mus.append(s.mu_offdiag)
            lo.append(s.sigma_min)
            hi.append(s.sigma_max_diag)
        out[n] = {"mu_offdiag": float(np.median(mus)), "sigma_min": float(np.median(lo)),
                  "sigma_max_diag": float(np.median(hi))}
    return out


def loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])


def _run_coherence(cfg: ExperimentConfig) -> list[Curve]:
    n_values = cfg.n_values or [50, 100, 200, 400, 800, 1600, 3200]
    trials = cfg.scaled(int(cfg.params.get("trials", 200)))
    table: dict = {}
    for seed in cfg.seeds:
        sweep = coherence_sweep(cfg.instance, n_values, trials, seed)
        for n, row in sweep.items():
            for key, val in row.items():
                table.setdefault(key, {}).setdefault(n, []).append(val)
    return _aggregate(table)


def _run_meta_compare(cfg: ExperimentConfig) -> list[Curve]:
    table: dict = {}
    for seed in cfg.seeds:
        for name in cfg.solvers:
            if name in ("ista", "fista", "transformer"):
                raise ConfigError(f"solver {name!r} has no training curve")
            kind = name.replace("_meta", "")
            res = meta_train(_train_config(cfg, kind, seed, False, cfg.instance))
            for row in res.history:
                table.setdefault(name, {}).setdefault(row["epoch"], []).append(row["test_err_varying_x"])
    return _aggregate(table)


_RUNNERS = {
    "fig1a": lambda c: _run_fig1(c, False),
    "fig1b": lambda c: _run_fig1(c, True),
    "fig1c": _run_fig1c,
    "convergence_k": _run_convergence,
    "coherence_decay": _run_coherence,
    "meta_train_compare": _run_meta_compare,
}

_AXES = {
    "fig1a": ("n (in-context examples)", "label prediction loss"),
    "fig1b": ("n (in-context examples)", "label prediction loss"),
    "fig1c": ("n (in-context examples)", "mean |y - y_hat|"),
    "convergence_k": ("k (layer)", "||beta^(k) - beta*||"),
    "coherence_decay": ("n (rows)", "median statistic"),
    "meta_train_compare": ("epoch", "test error, varying X"),
}


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run ``cfg`` and write CSV, SVG, metadata and a manifest into ``cfg.output_dir``."""
    curves = _RUNNERS[cfg.experiment](cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    stem = os.path.join(cfg.output_dir, cfg.experiment)
    csv_path, svg_path, meta_path = stem + ".csv", stem + ".svg", stem + ".meta.json"
    emit_csv(curves, csv_path)
    xlabel, ylabel = _AXES[cfg.experiment]
    emit_svg(curves, svg_path, title=cfg.experiment, xlabel=xlabel, ylabel=ylabel)
    meta = {"config": cfg.to_dict(), "metric": METRIC_NOTE if cfg.experiment in ("fig1a", "fig1b")
            else ylabel, "aggregation": "mean over instances, stderr over seeds"}
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    summary = {c.series: {"x": _last(c.x), "value": c.value[-1]} for c in curves}
    files = [{"path": os.path.basename(p), "sha256": _sha256(p)} for p in (csv_path, svg_path, meta_path)]
    manifest = {"experiment": cfg.experiment, "files": files, "summary": summary}
    manifest_path = os.path.join(cfg.output_dir, "manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest["manifest_path"] = manifest_path
    manifest["curves"] = curves
    return manifest


def _last(xs):
    x = xs[-1]
    return int(x) if isinstance(x, (int, np.integer)) else float(x)

"""Adam training on fresh in-context n-gram tasks, with metric logging and plateau labelling."""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .estimators import EstimatorKind, estimator_ce
from .grad import GradientSet, loss_grad_batch
from .seqmodel import NGramSpec, PROB_FLOOR, entropy, make_rng, sample_task_batch, truth_at_positions
from .transformer import ModelConfig, ModelParams, forward_batch, lag_mass, masked_softmax, predict_batch

GROUPS = ModelParams.GROUPS
# Q2 = 0 makes the second layer uniform at step 0, so the initial model is exactly the unigram
# estimator; V1 and K2 carry the small random scale that lets the first steps move Q2.
DEFAULT_INIT = {"A1": ["zeros"], "V1": ["gaussian", 0.02], "K2": ["gaussian", 0.02], "Q2": ["zeros"]}


class NumericalDivergence(RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


class InsufficientSeeds(ValueError):
    """A seed sweep needs at least two seeds."""


def worker_count(n_tasks: int) -> int:
    """Data-parallel width: ``SUBGRAM_THREADS`` if set, else the CPU count."""
    env = os.environ.get("SUBGRAM_THREADS")
    limit = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(limit, n_tasks))


@dataclass
class TrainConfig:
    model: ModelConfig
    task: NGramSpec
    T: int
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 128
    iters: int = 2 ** 14
    eval_every: int = 64
    loss_mode: str = "final_position"
    start_t: Optional[int] = None
    seed: int = 0
    snapshot_iters: list = field(default_factory=list)
    test_set_size: int = 2 ** 16
    init: dict = field(default_factory=lambda: {g: list(v) for g, v in DEFAULT_INIT.items()})

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("eps must be positive and weight_decay nonnegative")
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        if self.batch_size < 1 or self.eval_every < 1 or self.test_set_size < 1:
            raise ValueError("batch_size, eval_every and test_set_size must be >= 1")
        if self.T > self.model.T_max or self.T < max(self.task.n - 1, 1):
            raise ValueError(f"T={self.T} must lie in [n-1, T_max={self.model.T_max}]")
        if self.model.S != self.task.S:
            raise ValueError("model and task alphabet sizes differ")
        if self.loss_mode == "averaged_positions":
            if self.start_t is None:
                self.start_t = self.task.n
            if not self.task.n <= self.start_t <= self.T:
                raise ValueError(f"start_t must lie in [n={self.task.n}, T={self.T}]")
        elif self.loss_mode != "final_position":
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")
        for g in GROUPS:
            spec = self.init.get(g, DEFAULT_INIT[g])
            if spec[0] not in ("zeros", "gaussian") or (spec[0] == "gaussian" and not float(spec[1]) >= 0):
                raise ValueError(f"bad init for {g}: {spec}")

    def queries(self) -> Optional[list]:
        if self.loss_mode == "final_position":
            return None
        return list(range(self.start_t - 1, self.T))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["model"] = self.model.to_dict()
        out["task"] = self.task.to_dict()
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        obj["model"] = ModelConfig(**obj["model"])
        obj["task"] = NGramSpec(**obj["task"])
        return cls(**obj)


def init_params(config: TrainConfig) -> ModelParams:
    params = ModelParams.zeros(config.model)
    rng = make_rng(config.seed, "init")
    for g in GROUPS:
        spec = config.init.get(g, DEFAULT_INIT[g])
        arr = getattr(params, g)
        if spec[0] == "gaussian":
            arr[...] = rng.normal(0.0, float(spec[1]), arr.shape)
    return params


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls({g: np.zeros_like(a) for g, a in params.groups().items()},
                   {g: np.zeros_like(a) for g, a in params.groups().items()})


def adam_step(params: ModelParams, grads: GradientSet, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> tuple:
    """Bias-corrected Adam with decoupled weight decay; returns ``(params, state)``."""
    t = state.t + 1
    new, m, v = {}, {}, {}
    gg = grads.groups()
    for g, p in params.groups().items():
        grad = gg[g]
        m[g] = beta1 * state.m[g] + (1 - beta1) * grad
        v[g] = beta2 * state.v[g] + (1 - beta2) * grad * grad
        mhat = m[g] / (1 - beta1 ** t)
        vhat = v[g] / (1 - beta2 ** t)
        new[g] = p * (1 - lr * weight_decay) - lr * mhat / (np.sqrt(vhat) + eps)
    return params.with_groups(**new), AdamState(m, v, t)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)  # one dict per evaluation
    trace: list = field(default_factory=list)  # one dict per optimisation step
    snapshots: list = field(default_factory=list)  # (iter, a1 (m,T,T), a2 (T,T))
    baselines: dict = field(default_factory=dict)
    entropy: float = float("nan")
    plateaus: list = field(default_factory=list)

    def iters(self) -> np.ndarray:
        return np.array([r["iter"] for r in self.rows])

    def test_ce(self) -> np.ndarray:
        return np.array([r["test_ce"] for r in self.rows])

    def metric_columns(self) -> list:
        if not self.rows:
            return []
        return list(self.rows[0].keys())

    def write(self, out_dir) -> None:
        """CSV files: ``metrics.csv`` (per eval), ``trace.csv`` (per step), ``baselines.csv``,
        ``plateaus.csv`` and ``snapshots/`` (one CSV matrix per head and iteration)."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / "metrics.csv", self.rows)
        write_rows(out / "trace.csv", self.trace)
        write_rows(out / "baselines.csv", [{"k": k, "ce": v} for k, v in sorted(self.baselines.items())])
        write_rows(out / "plateaus.csv", self.plateaus,
                    fields=["start_iter", "end_iter", "mean_loss", "label"])
        snap = out / "snapshots"
        snap.mkdir(exist_ok=True)
        for it, a1, a2 in self.snapshots:
            for h in range(a1.shape[0]):
                write_matrix(snap / f"a1_head{h + 1}_iter{it}.csv", a1[h])
            write_matrix(snap / f"a2_iter{it}.csv", a2)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return v


def write_rows(path, rows, fields=None) -> None:
    fields = fields or (list(rows[0].keys()) if rows else [])
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in fields})


def write_matrix(path, mat: np.ndarray) -> None:
    """Attention matrix as CSV: header ``query,key0,key1,...``, one row per query."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["query"] + [f"key{j}" for j in range(mat.shape[1])])
        for i, row in enumerate(mat):
            w.writerow([i] + [repr(float(x)) for x in row])


def read_matrix(path) -> np.ndarray:
    with open(path) as f:
        rows = list(csv.reader(f))[1:]
    return np.array([[float(x) for x in r[1:]] for r in rows])


# ---------------------------------------------------------------------------
# plateau detection


def detect_plateaus(loss_series, baselines: dict, window: int, slope_tol: float, match_tol: float,
                    iters=None) -> list:
    """Label near-flat stretches of a loss curve.

    The least-squares slope (per unit of ``iters``; default one unit per
    sample) is computed on every length-``window`` sliding window. Runs of
    consecutive flat windows merge into one segment covering all their
    samples, and segments that share samples are merged too. A segment is labelled with the baseline key whose value is
    closest to its mean loss, provided it lies within ``match_tol``.
    """
    y = np.asarray(loss_series, dtype=np.float64)
    x = np.arange(y.size, dtype=np.float64) if iters is None else np.asarray(iters, dtype=np.float64)
    if window < 2:
        raise ValueError("window must be >= 2")
    if y.size < window:
        raise ValueError(f"series length {y.size} shorter than window {window}")
    n_win = y.size - window + 1
    flat = np.empty(n_win, dtype=bool)
    for s in range(n_win):
        xs, ys = x[s:s + window], y[s:s + window]
        xc = xs - xs.mean()
        slope = float(np.dot(xc, ys - ys.mean()) / np.dot(xc, xc))
        flat[s] = abs(slope) <= slope_tol
    spans = []
    s = 0
    while s < n_win:
        if not flat[s]:
            s += 1
            continue
        e = s
        while e + 1 < n_win and flat[e + 1]:
            e += 1
        lo, hi = s, e + window - 1
        # runs split by a few steep windows still share samples; keep them as one segment
        if spans and lo <= spans[-1][1]:
            spans[-1] = (spans[-1][0], hi)
        else:
            spans.append((lo, hi))
        s = e + 1
    segments = []
    for lo, hi in spans:
        mean = float(y[lo:hi + 1].mean())
        label = None
        if baselines:
            key, val = min(baselines.items(), key=lambda kv: abs(kv[1] - mean))
            if abs(val - mean) <= match_tol:
                label = key
        segments.append({"start_iter": int(x[lo]), "end_iter": int(x[hi]), "start_index": lo, "end_index": hi,
                         "mean_loss": mean, "label": label})
    return segments


# ---------------------------------------------------------------------------
# training


@dataclass
class TestSet:
    sequences: np.ndarray
    truth: np.ndarray
    entropy: float


def make_test_set(config: TrainConfig) -> TestSet:
    data = sample_task_batch(config.task, config.T, config.test_set_size, make_rng(config.seed, "test"))
    H = float(np.mean([entropy(t) for t in data.truth]))
    return TestSet(data.sequences, data.truth, H)


def test_ce(params: ModelParams, test: TestSet) -> float:
    pred = predict_batch(params, test.sequences)
    return float(np.mean(-np.sum(test.truth * np.log(np.maximum(pred, PROB_FLOOR)), axis=1)))


def baseline_ces(test: TestSet, S: int, n: int) -> dict:
    return {k: estimator_ce(EstimatorKind.kgram(k), test.sequences, test.truth, S)[0] for k in range(1, n + 1)}


def _snapshot(params: ModelParams, test: TestSet, T: int) -> tuple:
    a1 = masked_softmax(params.A1[:, :T, :T])
    a2 = forward_batch(params, test.sequences[:1], queries=range(T)).a2[0]
    return a1, a2


@dataclass
class TrainResult:
    params: ModelParams
    log: MetricsLog
    config: TrainConfig


def train(config: TrainConfig, params: Optional[ModelParams] = None, plateau_kwargs: Optional[dict] = None,
          test: Optional[TestSet] = None) -> TrainResult:
    """Run Adam on fresh batches; evaluates every ``eval_every`` steps and at the end."""
    params = init_params(config) if params is None else params.copy()
    state = AdamState.zeros(params)
    test = test or make_test_set(config)
    log = MetricsLog(baselines=baseline_ces(test, config.task.S, config.task.n), entropy=test.entropy)
    queries = config.queries()
    snap_at = set(int(i) for i in config.snapshot_iters)
    last_train, last_norms = float("nan"), None

    def evaluate(it):
        row = {"iter": it, "train_ce": last_train, "test_ce": test_ce(params, test)}
        norms = last_norms or {g: float("nan") for g in GROUPS}
        row["grad_norm_total"] = float(np.sqrt(sum(v * v for v in norms.values())))
        for g in GROUPS:
            row[f"grad_norm_{g}"] = norms[g]
        for k, v in log.baselines.items():
            row[f"baseline_k{k}"] = v
        lm = lag_mass(masked_softmax(params.A1[:, :config.T, :config.T]), max_lag=min(4, config.T - 1))
        for h in range(lm.shape[0]):
            for lag in range(lm.shape[1]):
                row[f"head{h + 1}_lag{lag}"] = float(lm[h, lag])
        row["plateau_label"] = None
        log.rows.append(row)

    for it in range(config.iters + 1):
        if it in snap_at:
            a1, a2 = _snapshot(params, test, config.T)
            log.snapshots.append((it, a1, a2))
        if it % config.eval_every == 0 or it == config.iters:
            evaluate(it)
        if it == config.iters:
            break
        batch = sample_task_batch(config.task, config.T, config.batch_size, make_rng(config.seed, "train", it))
        truth = batch.truth if queries is None else truth_at_positions(batch, config.task, queries)
        grads = loss_grad_batch(params, batch.sequences, truth, queries)
        if not np.isfinite(grads.loss) or not np.all(np.isfinite(grads.flat())):
            raise NumericalDivergence(it, grads.loss)
        last_train, last_norms = grads.loss, grads.norms()
        log.trace.append({"iter": it, "train_loss": grads.loss, "grad_norm_total": grads.total_norm(),
                          **{f"grad_norm_{g}": v for g, v in last_norms.items()}})
        params, state = adam_step(params, grads, state, config.lr, config.beta1, config.beta2, config.eps,
                                  config.weight_decay)

    label_plateaus(log, config, **(plateau_kwargs or {}))
    return TrainResult(params, log, config)


PLATEAU_DEFAULTS = {"window_iters": 256, "slope_tol": 1e-5, "match_tol": 0.1}


def label_plateaus(log: MetricsLog, config: TrainConfig, window_iters: int = 256, slope_tol: float = 1e-5,
                   match_tol: float = 0.1) -> list:
    """Run ``detect_plateaus`` on the test-CE curve; the window spans ``window_iters`` iterations."""
    window = max(3, int(round(window_iters / config.eval_every)) + 1)
    if len(log.rows) < window:
        log.plateaus = []
        return []
    segs = detect_plateaus(log.test_ce(), log.baselines, window, slope_tol, match_tol, iters=log.iters())
    for seg in segs:
        for r in log.rows[seg["start_index"]:seg["end_index"] + 1]:
            r["plateau_label"] = seg["label"] if seg["label"] is not None else "unlabeled"
    log.plateaus = segs
    return segs


def plateau_grad_medians(log: MetricsLog) -> tuple:
    """Median per-step gradient norm inside detected plateaus and in the rest of the run."""
    its = np.array([r["iter"] for r in log.trace])
    norms = np.array([r["grad_norm_total"] for r in log.trace])
    inside = np.zeros(its.size, dtype=bool)
    for seg in log.plateaus:
        inside |= (its >= seg["start_iter"]) & (its <= seg["end_iter"])
    med_in = float(np.median(norms[inside])) if inside.any() else float("nan")
    med_out = float(np.median(norms[~inside])) if (~inside).any() else float("nan")
    return med_in, med_out


def write_run(result: TrainResult, out_dir) -> None:
    out = Path(out_dir)
    result.log.write(out)
    result.params.save(out / "params.json")
    manifest = {
        "config": result.config.to_dict(),
        "version": __version__,
        "version_hash": hashlib.sha256(__version__.encode()).hexdigest(),
        "plateau_defaults": PLATEAU_DEFAULTS,
        "true_conditional_entropy": result.log.entropy,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# seed sweeps


def _run_seed(args) -> TrainResult:
    config, seed, plateau_kwargs = args
    cfg = TrainConfig.from_dict({**config.to_dict(), "seed": int(seed)})
    return train(cfg, plateau_kwargs=plateau_kwargs)


def run_seeds(config: TrainConfig, seeds: Sequence[int], plateau_kwargs: Optional[dict] = None) -> list:
    """Train once per seed, in a process pool capped by ``SUBGRAM_THREADS``; results in seed order."""
    jobs = [(config, s, plateau_kwargs) for s in seeds]
    workers = worker_count(len(jobs))
    if workers == 1:
        return [_run_seed(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_run_seed, jobs))


def summarize_run(result: TrainResult) -> dict:
    """Plateau label sequence and per-head lag attention at the second plateau."""
    log = result.log
    labels = [seg["label"] for seg in log.plateaus]
    second = None
    if len(log.plateaus) >= 2:
        seg = log.plateaus[1]
        mid = log.rows[(seg["start_index"] + seg["end_index"]) // 2]
        heads = sorted({k.split("_")[0] for k in mid if k.startswith("head")})
        second = {
            "iter": mid["iter"],
            "lag_mass": {h: {k.split("_")[1]: mid[k] for k in mid if k.startswith(h + "_")} for h in heads},
        }
        second["dominant_lag"] = {h: max(v, key=v.get) for h, v in second["lag_mass"].items()}
    return {"seed": result.config.seed, "plateau_labels": labels, "second_plateau": second,
            "final_test_ce": log.rows[-1]["test_ce"] if log.rows else None}


def seed_sweep(config: TrainConfig, seeds: Sequence[int], plateau_kwargs: Optional[dict] = None,
               results: Optional[list] = None) -> list:
    seeds = list(seeds)
    if len(seeds) < 2:
        raise InsufficientSeeds("seed_sweep needs at least two seeds")
    results = results or run_seeds(config, seeds, plateau_kwargs)
    return [summarize_run(r) for r in results]


def reference_config(seed: int = 0, **overrides) -> TrainConfig:
    """S=5 trigram task at T=32 with two heads, Adam at lr 0.01, batch 128 for 2^14 steps."""
    base = dict(model=ModelConfig(S=5, m=2, T_max=32), task=NGramSpec(5, 3, 0.5, seed), T=32, lr=0.01,
                batch_size=128, iters=2 ** 14, eval_every=64, test_set_size=2 ** 16, seed=seed,
                snapshot_iters=[0, 2 ** 12, 2 ** 13, 2 ** 14])
    base.update(overrides)
    return TrainConfig(**base)

"""Batch command line: ``subgram <command> [flags]``.

Every command accepts ``--config file.json``; explicit flags override the
file. Exit codes: 0 success, 1 failed check or internal error, 2 invalid input.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .constructions import build_kgram_params, padded_match_positions, stationarity_probe, verify_attention_pattern
from .estimators import EstimatorKind, estimator_ce, kgram_predict, match_positions
from .grad import fd_check
from .seqmodel import (NGramSpec, SequenceBatch, TransitionTensor, make_rng, sample_task_batch)
from .svg import heatmap, line_chart
from .training import (TrainConfig, plateau_grad_medians, read_matrix, run_seeds, summarize_run, write_rows,
                       train, write_run)
from .transformer import ModelConfig, ModelParams, predict_batch


class UsageError(ValueError):
    pass


DEFAULTS = {
    "S": 5, "n": 3, "alpha": 0.5, "T": 32, "seed": 0, "batch": 128, "out": "out",
    "test_size": 4096, "kmax": None,
    "m": 2, "scale": 0.3, "step": 1e-2, "order": 4, "threshold": 1e-5, "n_configs": 10,
    "k": 2, "c": 50.0, "n_seqs": 100, "strict": False,
    "c_values": [6, 8, 10, 12, 14], "T_values": [64], "probe_batch": 512,
    "lr": 0.01, "iters": 2 ** 14, "eval_every": 64, "loss_mode": "final_position", "start_t": None,
    "weight_decay": 0.0, "snapshot_iters": None, "seeds": [0, 1, 2, 3, 4],
    "input": None, "kind": "line", "x": None, "y": None, "log_y": False,
}


def _add(p, *names, **kw):
    kw.setdefault("default", None)
    p.add_argument(*names, **kw)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="subgram", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, task=True):
        _add(p, "--config", help="JSON file with default values for any flag")
        _add(p, "--seed", type=int)
        _add(p, "--out", help="output file or directory")
        if task:
            _add(p, "--S", type=int, help="alphabet size")
            _add(p, "--n", type=int, help="order of the source")
            _add(p, "--alpha", type=float, help="Dirichlet concentration")
            _add(p, "--T", type=int, help="sequence length")

    p = sub.add_parser("gen", help="sample LMs and sequences")
    common(p)
    _add(p, "--batch", type=int)

    p = sub.add_parser("baselines", help="k-gram estimator CE on a frozen test set")
    common(p)
    _add(p, "--test-size", dest="test_size", type=int)
    _add(p, "--kmax", type=int)

    p = sub.add_parser("gradcheck", help="analytic gradients vs central differences")
    common(p)
    _add(p, "--m", type=int)
    _add(p, "--scale", type=float, help="std of the random parameters")
    _add(p, "--step", type=float)
    _add(p, "--order", type=int, choices=[2, 4])
    _add(p, "--threshold", type=float)
    _add(p, "--n-configs", dest="n_configs", type=int)

    p = sub.add_parser("verify", help="check the k-gram construction against the estimator")
    common(p)
    _add(p, "--m", type=int)
    _add(p, "--k", type=int)
    _add(p, "--c", type=float)
    _add(p, "--n-seqs", dest="n_seqs", type=int)
    _add(p, "--strict", action="store_true", default=None, help="exit 1 on any violation")

    p = sub.add_parser("probe", help="gradient norm at the k-gram construction")
    common(p)
    _add(p, "--m", type=int)
    _add(p, "--k", type=int)
    _add(p, "--c-values", dest="c_values", type=float, nargs="+")
    _add(p, "--T-values", dest="T_values", type=int, nargs="+")
    _add(p, "--batch", dest="probe_batch", type=int)

    for name in ("train", "sweep"):
        p = sub.add_parser(name, help="Adam training run" if name == "train" else "training over several seeds")
        common(p)
        _add(p, "--m", type=int)
        _add(p, "--lr", type=float)
        _add(p, "--batch", type=int)
        _add(p, "--iters", type=int)
        _add(p, "--eval-every", dest="eval_every", type=int)
        _add(p, "--test-size", dest="test_size", type=int)
        _add(p, "--loss-mode", dest="loss_mode", choices=["final_position", "averaged_positions"])
        _add(p, "--start-t", dest="start_t", type=int)
        _add(p, "--weight-decay", dest="weight_decay", type=float)
        _add(p, "--snapshot-iters", dest="snapshot_iters", type=int, nargs="*")
        if name == "sweep":
            _add(p, "--seeds", type=int, nargs="+")

    p = sub.add_parser("render", help="SVG from an existing CSV")
    _add(p, "--config")
    _add(p, "--input", help="CSV file")
    _add(p, "--out")
    _add(p, "--kind", choices=["line", "heatmap"])
    _add(p, "--x", help="x column (line charts)")
    _add(p, "--y", nargs="+", help="y columns (line charts)")
    _add(p, "--log-y", dest="log_y", action="store_true", default=None)
    return ap


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the JSON config file, then explicit flags."""
    cfg = dict(DEFAULTS)
    if args.command in ("train", "sweep"):
        cfg["test_size"] = 2 ** 16
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                cfg.update(json.load(f))
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}")
    for k, v in vars(args).items():
        if v is not None and k not in ("config", "command"):
            cfg[k] = v
    return cfg


def _spec(cfg) -> NGramSpec:
    spec = NGramSpec(int(cfg["S"]), int(cfg["n"]), float(cfg["alpha"]), int(cfg["seed"]))
    if int(cfg["T"]) < max(spec.n - 1, 1):
        raise UsageError(f"T={cfg['T']} is shorter than the history length")
    return spec


def _positive(cfg, *keys):
    for k in keys:
        if not cfg[k] or cfg[k] <= 0:
            raise UsageError(f"{k} must be positive")


def cmd_gen(cfg) -> int:
    spec = _spec(cfg)
    _positive(cfg, "batch")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    data = sample_task_batch(spec, int(cfg["T"]), int(cfg["batch"]), make_rng(spec.seed, "gen"))
    tensors = [TransitionTensor(spec, r).to_json() for r in data.rows]
    with open(out / "tensors.json", "w") as f:
        json.dump(tensors, f)
    SequenceBatch(data.sequences).to_csv(out / "sequences.csv")
    print(json.dumps({"tensors": str(out / "tensors.json"), "sequences": str(out / "sequences.csv"),
                      "batch": int(cfg["batch"])}))
    return 0


def cmd_baselines(cfg) -> int:
    spec = _spec(cfg)
    _positive(cfg, "test_size")
    T = int(cfg["T"])
    kmax = int(cfg["kmax"] or spec.n)
    data = sample_task_batch(spec, T, int(cfg["test_size"]), make_rng(spec.seed, "test"))
    rows = []
    for k in range(1, kmax + 1):
        mean, se = estimator_ce(EstimatorKind.kgram(k), data.sequences, data.truth, spec.S)
        rows.append({"kind": "kgram", "k_or_lags": k, "T": T, "mean_ce": mean, "stderr": se,
                     "n_sequences": data.sequences.shape[0]})
    out = Path(cfg["out"])
    path = out if out.suffix == ".csv" else out / "baselines.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_rows(path, rows)
    for r in rows:
        print(f"k={r['k_or_lags']}  ce={r['mean_ce']:.4f} ± {r['stderr']:.4f}")
    return 0


def cmd_gradcheck(cfg) -> int:
    _positive(cfg, "step", "threshold", "n_configs", "S", "m", "T")
    rng = make_rng(int(cfg["seed"]), "gradcheck")
    S, m, T, sc = int(cfg["S"]), int(cfg["m"]), int(cfg["T"]), float(cfg["scale"])
    worst = None
    for _ in range(int(cfg["n_configs"])):
        mc = ModelConfig(S=S, m=m, T_max=T)
        params = ModelParams(mc, rng.normal(0, sc, (m, T, T)), rng.normal(0, sc, (m, S, S)),
                             rng.normal(0, sc, (mc.D1, mc.D1)), rng.normal(0, sc, (mc.D1, mc.D1)))
        rep = fd_check(params, rng.integers(0, S, T), rng.dirichlet(np.ones(S)), float(cfg["step"]),
                       order=int(cfg["order"]))
        if worst is None or rep.max_rel_err > worst.max_rel_err:
            worst = rep
    print(worst.to_json())
    return 0 if worst.max_rel_err <= float(cfg["threshold"]) else 1


def cmd_verify(cfg) -> int:
    S, m, T, k, c = int(cfg["S"]), int(cfg["m"]), int(cfg["T"]), int(cfg["k"]), float(cfg["c"])
    _positive(cfg, "c", "n_seqs")
    if not 1 <= k <= m + 1:
        raise UsageError(f"k must lie in [1, m+1={m + 1}]")
    mc = ModelConfig(S=S, m=m, T_max=T)
    params = build_kgram_params(mc, k, c)
    seqs = make_rng(int(cfg["seed"]), "verify").integers(0, S, (int(cfg["n_seqs"]), T))
    outs = predict_batch(params, seqs)
    n_checked = n_pattern_bad = n_est_bad = 0
    max_est = max_pad = 0.0
    for seq, o in zip(seqs, outs):
        if match_positions(seq, k).size == 0:
            continue
        n_checked += 1
        err = float(np.abs(o - kgram_predict(seq, k, S)).max())
        max_est = max(max_est, err)
        n_est_bad += err > 1e-8
        pm = padded_match_positions(seq, k)
        max_pad = max(max_pad, float(np.abs(o - np.bincount(seq[pm], minlength=S) / pm.size).max()))
        n_pattern_bad += not verify_attention_pattern(params, seq, k, c).ok
    report = {"S": S, "m": m, "T": T, "k": k, "c": c, "n_sequences": n_checked,
              "estimator_max_abs_err": max_est, "estimator_mismatches": int(n_est_bad),
              "padded_match_max_abs_err": max_pad, "pattern_violating_sequences": int(n_pattern_bad)}
    text = json.dumps(report, indent=2)
    if cfg["out"] and cfg["out"] != DEFAULTS["out"]:
        Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
        Path(cfg["out"]).write_text(text)
    print(text)
    failed = n_est_bad or n_pattern_bad
    return 1 if (cfg["strict"] and failed) else 0


def cmd_probe(cfg) -> int:
    S, m, k = int(cfg["S"]), int(cfg["m"]), int(cfg["k"])
    Ts = [int(t) for t in cfg["T_values"]]
    cs = [float(c) for c in cfg["c_values"]]
    spec = NGramSpec(S, int(cfg["n"]), float(cfg["alpha"]), int(cfg["seed"]))
    if not 1 <= k <= m + 1:
        raise UsageError(f"k must lie in [1, m+1={m + 1}]")
    mc = ModelConfig(S=S, m=m, T_max=max(Ts))
    rep = stationarity_probe(mc, k, cs, Ts, int(cfg["probe_batch"]), int(cfg["seed"]), spec)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    rep.to_csv(out / "probe.csv")
    series = []
    for T in Ts:
        c_arr, norms = rep.norms_for(T)
        series.append({"label": f"T={T}", "x": c_arr, "y": norms})
    (out / "probe.svg").write_text(line_chart(series, f"gradient norm at k={k} construction", "c",
                                              "grad norm", log_y=True))
    for r in rep.records():
        print(f"T={r['T']} c={r['c']:g} grad_norm={r['grad_norm_total']:.4e} tv={r['mean_residual_tv']:.4f}")
    return 0


def _train_config(cfg, seed=None) -> TrainConfig:
    seed = int(cfg["seed"] if seed is None else seed)
    S, n, T, m = int(cfg["S"]), int(cfg["n"]), int(cfg["T"]), int(cfg["m"])
    snaps = cfg["snapshot_iters"]
    iters = int(cfg["iters"])
    if snaps is None:
        snaps = sorted({0, iters // 4, iters // 2, iters})
    return TrainConfig(model=ModelConfig(S=S, m=m, T_max=T), task=NGramSpec(S, n, float(cfg["alpha"]), seed),
                       T=T, lr=float(cfg["lr"]), batch_size=int(cfg["batch"]), iters=iters,
                       eval_every=int(cfg["eval_every"]), loss_mode=cfg["loss_mode"], start_t=cfg["start_t"],
                       seed=seed, snapshot_iters=list(snaps), test_set_size=int(cfg["test_size"]),
                       weight_decay=float(cfg["weight_decay"]), **({"init": cfg["init"]} if cfg.get("init") else {}))


def render_run(out: Path, result) -> None:
    log = result.log
    its = log.iters()
    series = [{"label": "test CE", "x": its, "y": log.test_ce()}]
    for k, v in sorted(log.baselines.items()):
        series.append({"label": f"{k}-gram", "x": [its[0], its[-1]], "y": [v, v], "dashed": True})
    (out / "loss.svg").write_text(line_chart(series, "test loss", "iteration", "CE (nats)"))
    tr_it = [r["iter"] for r in log.trace]
    if tr_it:
        gn = [r["grad_norm_total"] for r in log.trace]
        (out / "grad_norm.svg").write_text(line_chart([{"label": "grad norm", "x": tr_it, "y": gn}],
                                                      "gradient norm", "iteration", "norm", log_y=True))
    for it, a1, a2 in log.snapshots:
        for h in range(a1.shape[0]):
            (out / f"attn_head{h + 1}_iter{it}.svg").write_text(
                heatmap(a1[h], f"layer 1 head {h + 1}, iter {it}", 0.0, 1.0))
        (out / f"attn_layer2_iter{it}.svg").write_text(heatmap(a2, f"layer 2, iter {it}", 0.0, 1.0))


def cmd_train(cfg) -> int:
    tc = _train_config(cfg)
    result = train(tc)
    out = Path(cfg["out"])
    write_run(result, out)
    render_run(out, result)
    med_in, med_out = plateau_grad_medians(result.log)
    print(json.dumps({"final_test_ce": result.log.rows[-1]["test_ce"], "baselines": result.log.baselines,
                      "plateaus": [{k: s[k] for k in ("start_iter", "end_iter", "mean_loss", "label")}
                                   for s in result.log.plateaus],
                      "median_grad_norm_plateau": med_in, "median_grad_norm_transition": med_out}, default=str))
    return 0


def cmd_sweep(cfg) -> int:
    seeds = [int(s) for s in cfg["seeds"]]
    if len(seeds) < 2:
        raise UsageError("sweep needs at least two seeds")
    base = _train_config(cfg, seeds[0])
    results = run_seeds(base, seeds)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    summaries = []
    for r in results:
        write_run(r, out / f"seed{r.config.seed}")
        summaries.append(summarize_run(r))
    with open(out / "sweep.json", "w") as f:
        json.dump(summaries, f, indent=2, default=str)
    rows = []
    for s in summaries:
        sp = s["second_plateau"] or {}
        row = {"seed": s["seed"], "plateau_labels": " ".join(str(x) for x in s["plateau_labels"]),
               "final_test_ce": s["final_test_ce"]}
        for h, lag in (sp.get("dominant_lag") or {}).items():
            row[f"{h}_second_plateau_lag"] = lag
        rows.append(row)
    fields = sorted({k for r in rows for k in r}, key=lambda k: (k != "seed", k))
    write_rows(out / "sweep.csv", rows, fields)
    print(json.dumps(summaries, default=str))
    return 0


def _read_csv(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def cmd_render(cfg) -> int:
    src = cfg["input"]
    if not src or not Path(src).is_file():
        raise UsageError(f"input file not found: {src}")
    out = Path(cfg["out"] if cfg["out"] != DEFAULTS["out"] else Path(src).with_suffix(".svg"))
    if cfg["kind"] == "heatmap":
        mat = read_matrix(src)
        out.write_text(heatmap(mat, Path(src).stem, 0.0, max(1.0, float(mat.max()))))
    else:
        rows = _read_csv(src)
        if not rows:
            raise UsageError("input CSV has no data rows")
        cols = list(rows[0].keys())
        x = cfg["x"] or cols[0]
        ys = cfg["y"] or [c for c in cols if c != x][:1]
        for c in [x] + list(ys):
            if c not in cols:
                raise UsageError(f"column {c!r} not in {cols}")
        xs = [float(r[x]) for r in rows]
        series = [{"label": c, "x": xs, "y": [float(r[c]) if r[c] != "" else float("nan") for r in rows]}
                  for c in ys]
        out.write_text(line_chart(series, Path(src).stem, x, ", ".join(ys), log_y=bool(cfg["log_y"])))
    print(str(out))
    return 0


COMMANDS = {"gen": cmd_gen, "baselines": cmd_baselines, "gradcheck": cmd_gradcheck, "verify": cmd_verify,
            "probe": cmd_probe, "train": cmd_train, "sweep": cmd_sweep, "render": cmd_render}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except (UsageError, ValueError, TypeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # pragma: no cover - surfaced as exit code 1
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

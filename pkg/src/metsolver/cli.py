"""Command-line front end.

Every command reads an optional JSON run configuration (flags override
file values), writes its artifacts under --out together with a manifest
(command, config hash, build id, wall time, artifact hashes), and holds
an exclusive lock on the output directory while running.  Exit codes:
0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import hellinger_padded, write_metrics_csv
from .diff import Schedule, finite_difference_check
from .errors import ConfigError, DivergedLoss, MetsolverError, UnstableStep
from .met import METConfig, METModel, TrainHyper, build_prompt, met_sample, parameter_count, train_met
from .model import load_model, parse_model
from .reward import RewardHyper, RewardModelSet, train_reward_grid
from .ssa import TrajectoryEnsemble, simulate
from .statespace import ProbabilityVector, build_generator, evolve_exact
from .tasks import infer_rates, sample_trajectories_iterative, sweep_bimodality, write_sweep_csv
from .util import config_hash, worker_count

CONFIG_VERSION = 1


def _build_id() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
        if out.returncode == 0:
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _parse_assignments(pairs, cast=float) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"expected name=value, got {pair!r}")
        name, value = pair.split("=", 1)
        out[name.strip()] = cast(value)
    return out


def _parse_floats(text) -> list[float]:
    return [float(v) for v in str(text).replace(";", ",").split(",") if v != ""]


def _parse_grid(spec: str) -> np.ndarray:
    """lo:hi:n[:log] -> linear or log-spaced grid."""
    parts = str(spec).split(":")
    if len(parts) not in (3, 4):
        raise ConfigError(f"grid spec {spec!r}, want lo:hi:n[:log]")
    lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
    if len(parts) == 4 and parts[3] == "log":
        return np.geomspace(lo, hi, n)
    return np.linspace(lo, hi, n)


class _OutputDir:
    """Exclusive ownership of one output directory via a lock file."""

    def __init__(self, path):
        self.path = Path(path)
        self.lock = self.path / ".lock"

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(
                f"{self.path} is locked by another run (remove {self.lock} if stale)"
            )
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self.path

    def __exit__(self, *exc):
        self.lock.unlink(missing_ok=True)
        return False


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, cfg: dict, t0: float, artifacts: list[Path]):
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config_version": CONFIG_VERSION,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "build": _build_id(),
        "wall_time_s": round(time.time() - t0, 3),
        "artifacts": {str(p.relative_to(out)): _sha256(p) for p in artifacts if p.exists()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _merged_config(args, keys) -> dict:
    """File config overlaid by any explicitly-given flags."""
    cfg = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        cfg = json.loads(path.read_text())
        if cfg.get("config_version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ConfigError(f"unsupported config_version {cfg.get('config_version')}")
    for key in keys:
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            cfg[key] = val
    return cfg


def _load_net(cfg):
    model_path = cfg.get("model")
    if not model_path:
        raise ConfigError("--model (a .cme file) is required")
    path = Path(model_path)
    if not path.exists():
        raise ConfigError(f"model file not found: {path}")
    net = load_model(path)
    if cfg.get("bound") is not None:
        net = net.with_bounds(int(cfg["bound"]))
    return net


def _rates_for(net, cfg):
    rates = dict(net.default_rates)
    rates.update({k: float(v) for k, v in cfg.get("rates", {}).items()})
    return rates


def _init_for(net, cfg):
    x0 = np.array(net.default_init)
    for name, v in cfg.get("init", {}).items():
        x0[net.species_index(name)] = int(v)
    return x0


def _require_seed(cfg):
    if cfg.get("seed") is None:
        raise ConfigError("--seed is required (stochastic commands never self-seed)")
    return int(cfg["seed"])


# --- commands -----------------------------------------------------------------


def _cmd_solve_exact(args) -> int:
    cfg = _merged_config(args, ["model", "out", "bound"])
    cfg["rates"] = {**cfg.get("rates", {}), **_parse_assignments(args.rate)}
    cfg["init"] = {**cfg.get("init", {}), **_parse_assignments(args.init, cast=int)}
    cfg["times"] = _parse_floats(args.t) if args.t else cfg.get("times")
    if not cfg.get("times"):
        raise ConfigError("--t is required (comma-separated times)")
    net = _load_net(cfg)
    rates = _rates_for(net, cfg)
    x0 = _init_for(net, cfg)
    t0 = time.time()
    with _OutputDir(cfg.get("out", "runs/solve")) as out:
        gen = build_generator(net, rates)
        p = ProbabilityVector.delta(gen.space, x0)
        artifacts = []
        prev_t = 0.0
        names = list(net.species_names)
        for t in cfg["times"]:
            p = evolve_exact(gen, p, t - prev_t)
            prev_t = t
            path = out / f"p_t{t:g}.csv"
            p.to_csv(path, gen.space, names=names)
            artifacts.append(path)
            if not args.no_figures:
                from . import report

                for i, name in enumerate(names):
                    marg = p.marginal(gen.space, i)
                    fig = report.marginal_comparison(
                        out / f"marginal_{name}_t{t:g}.png",
                        np.arange(len(marg)),
                        {"exact": marg},
                        f"{name} at t={t:g}",
                    )
                    artifacts.append(fig)
        _write_manifest(out, "solve-exact", cfg, t0, artifacts)
    return 0


def _cmd_simulate(args) -> int:
    cfg = _merged_config(args, ["model", "out", "bound", "n", "seed"])
    cfg["rates"] = {**cfg.get("rates", {}), **_parse_assignments(args.rate)}
    cfg["init"] = {**cfg.get("init", {}), **_parse_assignments(args.init, cast=int)}
    cfg["grid"] = _parse_floats(args.grid) if args.grid else cfg.get("grid")
    if not cfg.get("grid"):
        raise ConfigError("--grid is required (comma-separated times)")
    net = _load_net(cfg)
    rates = _rates_for(net, cfg)
    x0 = _init_for(net, cfg)
    seed = _require_seed(cfg)
    n = int(cfg.get("n", 1000))
    t0 = time.time()
    with _OutputDir(cfg.get("out", "runs/simulate")) as out:
        ens = simulate(net, rates, x0, cfg["grid"], n_traj=n, seed=seed,
                       workers=worker_count())
        bin_path = out / "ensemble.bin"
        csv_path = out / "ensemble.csv"
        ens.save(bin_path)
        ens.to_csv(csv_path, names=list(net.species_names))
        artifacts = [bin_path, csv_path]
        if not args.no_figures:
            from . import report

            artifacts.append(
                report.trajectory_fan(out / "trajectories.png", ens, title="SSA ensemble")
            )
        _write_manifest(out, "simulate", cfg, t0, artifacts)
    return 0


def _cmd_train_reward(args) -> int:
    cfg = _merged_config(
        args,
        ["model", "out", "bound", "dt", "t-final", "seed", "width", "batch", "epochs", "lr"],
    )
    cfg["rates"] = {**cfg.get("rates", {}), **_parse_assignments(args.rate)}
    cfg["save-times"] = _parse_floats(args.save_times) if args.save_times else cfg.get("save-times")
    if args.inits:
        cfg["inits"] = [[int(v) for v in grp.split(",")] for grp in args.inits.split(";")]
    if not cfg.get("save-times"):
        raise ConfigError("--save-times is required")
    net = _load_net(cfg)
    rates = _rates_for(net, cfg)
    seed = _require_seed(cfg)
    inits = cfg.get("inits") or [[int(v) for v in net.default_init]]
    hyper = RewardHyper(
        width=int(cfg.get("width", 32)),
        batch=int(cfg.get("batch", 1000)),
        epochs=int(cfg.get("epochs", 100)),
        lr=float(cfg.get("lr", 1e-3)),
        seed=seed,
    )
    t0 = time.time()
    with _OutputDir(cfg.get("out", "runs/reward")) as out:
        combos = [(rates, x0) for x0 in inits]
        ms = train_reward_grid(
            net, combos, float(cfg["dt"]), float(cfg["t-final"]), cfg["save-times"],
            hyper, out, workers=worker_count(),
        )
        artifacts = [out / "manifest.jsonl"]
        _write_manifest(out, "train-reward", cfg, t0, artifacts)
    return 0


def _cmd_train_met(args) -> int:
    cfg = _merged_config(
        args,
        ["model", "out", "bound", "reward-set", "seed", "d-emb", "d-ff", "d-l", "heads",
         "d-p", "s-batch", "m-acc", "epochs", "lr", "warmup", "weight-decay"],
    )
    if not cfg.get("reward-set"):
        raise ConfigError("--reward-set (manifest path) is required")
    reward_path = Path(cfg["reward-set"])
    if not reward_path.exists():
        raise ConfigError(f"reward-set manifest not found: {reward_path}")
    net = _load_net(cfg)
    seed = _require_seed(cfg)
    reward_set = RewardModelSet.load(reward_path)
    config = METConfig(
        d_emb=int(cfg.get("d-emb", 64)),
        d_ff=int(cfg.get("d-ff", 1024)),
        d_l=int(cfg.get("d-l", 8)),
        h=int(cfg.get("heads", 8)),
        d_p=int(cfg.get("d-p", 16)),
    )
    hyper = TrainHyper(
        s_batch=int(cfg.get("s-batch", 1000)),
        m_acc=int(cfg.get("m-acc", 100)),
        epochs=int(cfg.get("epochs", 100)),
        schedule=Schedule(
            float(cfg.get("lr", 1e-3)), int(cfg.get("warmup", 200)), "inv_sqrt"
        ),
        weight_decay=float(cfg.get("weight-decay", 0.0)),
        seed=seed,
    )
    t0 = time.time()
    with _OutputDir(cfg.get("out", "runs/met")) as out:
        model = METModel(net, config, seed=seed, normalization=reward_set.prompt_stats(net))
        trace = train_met(model, reward_set, net, hyper)
        ckpt = out / "met.ckpt"
        model.save(ckpt, {"reward_set": str(reward_path)}, training_step=trace.rows[-1][0])
        trace_path = out / "loss_trace.csv"
        trace.to_csv(trace_path)
        artifacts = [ckpt, Path(str(ckpt) + ".json"), trace_path]
        if not args.no_figures:
            from . import report

            steps = [r[0] for r in trace.rows]
            artifacts.append(
                report.loss_trace(out / "loss_trace.png", steps, trace.kl_series(),
                                  [r[3] for r in trace.rows])
            )
        _write_manifest(out, "train-met", cfg, t0, artifacts)
    return 0


def _load_met(cfg) -> tuple[METModel, dict]:
    path = cfg.get("checkpoint")
    if not path:
        raise ConfigError("--checkpoint (a METCKPT1 file) is required")
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return METModel.load(path)


def _cmd_sample(args) -> int:
    cfg = _merged_config(args, ["checkpoint", "out", "n", "seed", "t"])
    cfg["rates"] = {**cfg.get("rates", {}), **_parse_assignments(args.rate)}
    cfg["init"] = {**cfg.get("init", {}), **_parse_assignments(args.init, cast=int)}
    model, _ = _load_met(cfg)
    net = model.net
    rates = _rates_for(net, cfg)
    x0 = _init_for(net, cfg)
    seed = _require_seed(cfg)
    if cfg.get("t") is None:
        raise ConfigError("--t is required")
    t0 = time.time()
    with _OutputDir(cfg.get("out", "runs/sample")) as out:
        prompt = build_prompt(net, rates, x0, float(cfg["t"]))
        samples = met_sample(model, prompt, int(cfg.get("n", 10_000)), seed)
        path = out / "samples.csv"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(net.species_names) + "\n")
            for row in samples:
                fh.write(",".join(str(int(v)) for v in row) + "\n")
        artifacts = [path]
        if not args.no_figures:
            from . import report

            for i, name in enumerate(net.species_names):
                freq = np.bincount(samples[:, i], minlength=int(net.bounds[i]) + 1)
                artifacts.append(
                    report.marginal_comparison(
                        out / f"marginal_{name}.png",
                        np.arange(len(freq)),
                        {"model": freq / freq.sum()},
                        f"{name} at t={cfg['t']}",
                    )
                )
        _write_manifest(out, "sample", cfg, t0, artifacts)
    return 0


def _cmd_trajectories(args) -> int:
    cfg = _merged_config(args, ["checkpoint", "out", "n", "seed", "dt", "steps"])
    cfg["rates"] = {**cfg.get("rates", {}), **_parse_assignments(args.rate)}
    cfg["init"] = {**cfg.get("init", {}), **_parse_assignments(args.init, cast=int)}
    model, _ = _load_met(cfg)
    net = model.net
    rates = _rates_for(net, cfg)
    x0 = _init_for(net, cfg)
    seed = _require_seed(cfg)
    if cfg.get("dt") is None or cfg.get("steps") is None:
        raise ConfigError("--dt and --steps are required")
    t0 = time.time()
    with _OutputDir(cfg.get("out", "runs/trajectories")) as out:
        ens = sample_trajectories_iterative(
            model, net, rates, x0, float(cfg["dt"]), int(cfg["steps"]),
            int(cfg.get("n", 1000)), seed,
        )
        bin_path = out / "ensemble.bin"
        csv_path = out / "ensemble.csv"
        ens.save(bin_path)
        ens.to_csv(csv_path, names=list(net.species_names))
        artifacts = [bin_path, csv_path]
        if not args.no_figures:
            from . import report

            artifacts.append(
                report.trajectory_fan(out / "trajectories.png", ens, title="MET ensemble")
            )
        _write_manifest(out, "trajectories", cfg, t0, artifacts)
    return 0


def _cmd_analyze(args) -> int:
    cfg = _merged_config(args, ["out"])
    cfg["ensembles"] = args.ensemble or cfg.get("ensembles")
    if not cfg.get("ensembles") or len(cfg["ensembles"]) < 1:
        raise ConfigError("at least one --ensemble is required")
    cfg["times"] = _parse_floats(args.t) if args.t else cfg.get("times")
    species = int(args.species) if args.species is not None else 0
    t0 = time.time()
    with _OutputDir(cfg.get("out", "runs/analyze")) as out:
        ensembles = {}
        for path in cfg["ensembles"]:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"ensemble not found: {p}")
            ens = TrajectoryEnsemble.load(p)
            label = f"{ens.method}:{p.stem}"
            k = 2
            while label in ensembles:
                label = f"{ens.method}:{p.stem}#{k}"
                k += 1
            ensembles[label] = ens
        rows, artifacts = [], []
        first = next(iter(ensembles.values()))
        times = cfg.get("times") or [float(first.grid[-1])]
        labels = list(ensembles)
        for t in times:
            series = {}
            for label, ens in ensembles.items():
                ti = int(np.argmin(np.abs(ens.grid - t)))
                series[label] = ens.marginal_at(ti, species)
                mean, std = ens.mean_std()
                rows.append((f"mean_s{species}_t{t:g}", label, mean[ti, species]))
                rows.append((f"std_s{species}_t{t:g}", label, std[ti, species]))
            for a in range(len(labels)):
                for b in range(a + 1, len(labels)):
                    h = hellinger_padded(series[labels[a]], series[labels[b]])
                    rows.append((f"hellinger_s{species}_t{t:g}", f"{labels[a]}|{labels[b]}", h))
            if not args.no_figures:
                from . import report

                support = np.arange(max(len(v) for v in series.values()))
                padded = {
                    k: np.pad(v, (0, len(support) - len(v))) for k, v in series.items()
                }
                artifacts.append(
                    report.marginal_comparison(
                        out / f"compare_s{species}_t{t:g}.png", support, padded,
                        f"species {species} at t={t:g}",
                    )
                )
        csv_path = out / "metrics.csv"
        write_metrics_csv(csv_path, rows)
        artifacts.append(csv_path)
        _write_manifest(out, "analyze", cfg, t0, artifacts)
    return 0


def _cmd_sweep(args) -> int:
    cfg = _merged_config(args, ["checkpoint", "out", "seed", "t", "n-samples", "species"])
    cfg["rates"] = {**cfg.get("rates", {}), **_parse_assignments(args.rate)}
    cfg["init"] = {**cfg.get("init", {}), **_parse_assignments(args.init, cast=int)}
    model, _ = _load_met(cfg)
    net = model.net
    seed = _require_seed(cfg)
    if not args.names or "," not in args.names:
        raise ConfigError("--names sym_x,sym_y is required")
    name_x, name_y = [s.strip() for s in args.names.split(",")]
    grid_x = _parse_grid(args.grid_x)
    grid_y = _parse_grid(args.grid_y)
    rates = _rates_for(net, cfg)
    x0 = _init_for(net, cfg)
    t0 = time.time()
    with _OutputDir(cfg.get("out", "runs/sweep")) as out:
        values = sweep_bimodality(
            model, net, rates, (name_x, name_y), grid_x, grid_y, x0,
            float(cfg.get("t", net.t_final)), int(cfg.get("n-samples", 1000)),
            int(cfg.get("species", net.n_species - 1)), seed,
        )
        csv_path = out / "sweep.csv"
        write_sweep_csv(csv_path, grid_x, grid_y, values, (name_x, name_y))
        artifacts = [csv_path]
        if not args.no_figures:
            from . import report

            artifacts.append(
                report.heatmap(out / "sweep.png", grid_x, grid_y, values,
                               name_x, name_y, "bimodality coefficient")
            )
        _write_manifest(out, "sweep", cfg, t0, artifacts)
    return 0


def _cmd_infer(args) -> int:
    cfg = _merged_config(args, ["checkpoint", "out", "seed", "data", "steps", "batch", "log-mean"])
    cfg["rates"] = {**cfg.get("rates", {}), **_parse_assignments(args.rate)}
    model, _ = _load_met(cfg)
    net = model.net
    seed = _require_seed(cfg)
    if not cfg.get("data"):
        raise ConfigError("--data (an ensemble .bin) is required")
    data_path = Path(cfg["data"])
    if not data_path.exists():
        raise ConfigError(f"data ensemble not found: {data_path}")
    std = _parse_assignments(args.std) if args.std else cfg.get("proposal_std", 0.05)
    t0 = time.time()
    with _OutputDir(cfg.get("out", "runs/infer")) as out:
        data = TrajectoryEnsemble.load(data_path)
        chain = infer_rates(
            model, net, data, int(cfg.get("steps", 1000)), std,
            int(cfg.get("batch", 1000)), seed,
            init_rates=_rates_for(net, cfg),
            log_mean=bool(cfg.get("log-mean", False)),
        )
        csv_path = out / "chain.csv"
        chain.to_csv(csv_path)
        artifacts = [csv_path]
        if not args.no_figures:
            from . import report

            artifacts.append(report.chain_histograms(out / "chain.png", chain))
        _write_manifest(out, "infer", cfg, t0, artifacts)
    return 0


def _gradcheck_impl(args) -> int:
    cfg = _merged_config(args, ["out", "model"])
    t0 = time.time()
    from . import diff as D

    rows = []
    with _OutputDir(cfg.get("out", "runs/gradcheck")) as out:
        rng = np.random.default_rng(0)

        # representative op chain
        store = D.ParameterStore()
        a = store.add("a", rng.standard_normal((4, 6)))
        g = store.add("g", np.ones(6))
        b = store.add("b", np.zeros(6))
        rows.append(
            ("ops:layernorm+softmax",
             finite_difference_check(
                 lambda: D.sum_(D.softmax(D.layer_norm(a, g, b))), store))
        )

        net = parse_model(
            "species X\nbound 6\nreaction kb : 0 -> X\nreaction kd : X -> 0\n"
            "rate kb 1\nrate kd 0.5\ntime 0 1\n"
        ) if not cfg.get("model") else _load_net(cfg)
        model = METModel(net, METConfig(d_emb=16, d_ff=64, d_l=2, h=2, d_p=4), seed=1)
        x = np.minimum(np.arange(net.n_species) + 1, net.bounds)
        prompt = build_prompt(net, net.default_rates, net.default_init, 0.7)
        rows.append(
            ("met:logprob",
             finite_difference_check(
                 lambda: D.sum_(model.logprob_tensor(prompt[None, :], x[None, :])),
                 model.store, max_per_param=8))
        )
        worst = max(r[1] for r in rows)
        csv_path = out / "gradcheck.csv"
        write_metrics_csv(csv_path, [(name, "max_rel_err", val) for name, val in rows])
        _write_manifest(out, "gradcheck", cfg, t0, [csv_path])
        print(f"gradcheck worst relative error: {worst:.2e}")
        if worst >= 1e-4:
            raise DivergedLoss(f"gradcheck failed: {worst:.2e} >= 1e-4")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="metsolver",
        description="Solve chemical master equations exactly, by simulation, "
                    "or with prompt-conditioned neural models.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, model=True):
        p.add_argument("--config", help="JSON run configuration (flags override)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="RNG seed (required for stochastic commands)")
        p.add_argument("--no-figures", action="store_true", help="skip figure rendering")
        p.add_argument("--rate", action="append", metavar="SYM=VAL", help="rate override")
        p.add_argument("--init", action="append", metavar="SPECIES=N", help="initial count override")
        if model:
            p.add_argument("--model", help="reaction network (.cme)")
            p.add_argument("--bound", type=int, help="override truncation bound")
        if checkpoint:
            p.add_argument("--checkpoint", help="MET checkpoint (METCKPT1)")

    p = sub.add_parser("solve-exact", help="exact truncated-space solution")
    common(p)
    p.add_argument("--t", help="comma-separated output times")
    p.set_defaults(fn=_cmd_solve_exact)

    p = sub.add_parser("simulate", help="Gillespie trajectory ensemble")
    common(p)
    p.add_argument("--grid", help="comma-separated record times")
    p.add_argument("--n", type=int, help="number of trajectories")
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("train-reward", help="train a reward-model set")
    common(p)
    p.add_argument("--dt", type=float)
    p.add_argument("--t-final", type=float)
    p.add_argument("--save-times", help="comma-separated checkpoint times")
    p.add_argument("--inits", help="initial states, e.g. '0;1;2' or '0,0;1,0'")
    p.add_argument("--width", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(fn=_cmd_train_reward)

    p = sub.add_parser("train-met", help="train the transformer against a reward set")
    common(p)
    p.add_argument("--reward-set", help="reward-set manifest path")
    p.add_argument("--d-emb", type=int)
    p.add_argument("--d-ff", type=int)
    p.add_argument("--d-l", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--d-p", type=int)
    p.add_argument("--s-batch", type=int)
    p.add_argument("--m-acc", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--weight-decay", type=float)
    p.set_defaults(fn=_cmd_train_met)

    p = sub.add_parser("sample", help="draw states from a trained model")
    common(p, checkpoint=True, model=False)
    p.add_argument("--t", type=float)
    p.add_argument("--n", type=int)
    p.set_defaults(fn=_cmd_sample)

    p = sub.add_parser("trajectories", help="iterative-prompt trajectory ensemble")
    common(p, checkpoint=True, model=False)
    p.add_argument("--dt", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--n", type=int)
    p.set_defaults(fn=_cmd_trajectories)

    p = sub.add_parser("analyze", help="compare ensembles: metrics and figures")
    common(p, model=False)
    p.add_argument("--ensemble", action="append", help="ensemble .bin (repeatable)")
    p.add_argument("--t", help="comma-separated comparison times")
    p.add_argument("--species", type=int)
    p.set_defaults(fn=_cmd_analyze)

    p = sub.add_parser("sweep", help="bimodality over a rate-pair grid")
    common(p, checkpoint=True, model=False)
    p.add_argument("--names", help="swept rate symbols: sym_x,sym_y")
    p.add_argument("--grid-x", help="lo:hi:n[:log]")
    p.add_argument("--grid-y", help="lo:hi:n[:log]")
    p.add_argument("--t", type=float)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--species", type=int)
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("infer", help="greedy rate inference from trajectory data")
    common(p, checkpoint=True, model=False)
    p.add_argument("--data", help="observed ensemble .bin")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--std", action="append", metavar="SYM=STD", help="proposal std per rate")
    p.add_argument("--log-mean", action="store_true", help="compare mean log-probability")
    p.set_defaults(fn=_cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of the tensor engine")
    common(p)
    p.set_defaults(fn=_gradcheck_impl)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (UnstableStep, DivergedLoss) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (MetsolverError, FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

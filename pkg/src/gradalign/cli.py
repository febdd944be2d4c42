"""Command-line runner: training, attacks, metric sweeps, surfaces, bound sweeps and heatmaps.

Every command writes into ``--out``: CSV tables, PNG figures, raw dumps and a
``manifest.json`` with the fully resolved configuration and output checksums.
Options may come from a key=value config file (``--config``); flags win.
Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import os
import platform
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
COMMANDS = ("train", "attack", "eval-rps", "eval-insertion", "surface", "bound-sweep", "attribute")
ATTACK_COLUMNS = ("sample", "label", "prediction", "final_loss", "ssim_target", "pcc_target", "cossim_target",
                  "ssim_original", "pcc_original", "cossim_original", "linf", "preserved")
SURFACE_COLUMNS = ("x1", "x2", "logit_diff", "grad_x1", "grad_x2")
PAIR_COLUMNS = ("ax1", "ax2", "bx1", "bx2", "label", "l2_distance", "cossim", "grad_norm_a", "grad_norm_b")
BOUND_COLUMNS = ("epsilon", "mean_crc", "mean_bound", "fraction_within", "points")


class CliConfigError(Exception):
    """Bad option or config value; reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliConfigError(message)


# -- option parsing ---------------------------------------------------------------


def parse_fraction(text) -> float:
    """'8/255' -> 8/255 exactly as a float; plain decimals are accepted too."""
    try:
        return float(Fraction(str(text).strip()))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number or fraction: {text!r}") from None


def parse_fraction_list(text) -> list[float]:
    return [parse_fraction(t) for t in str(text).split(",") if t.strip()]


def parse_int_list(text) -> list[int]:
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated integer list: {text!r}") from None


def parse_str_list(text) -> list[str]:
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _bool(text) -> bool:
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _add_data_options(p: argparse.ArgumentParser, default_data: str = "digits") -> None:
    g = p.add_argument_group("data")
    g.add_argument("--data", choices=("moons", "digits", "cifar"), default=default_data)
    g.add_argument("--data-path", default=None, help="CIFAR binary batch file")
    g.add_argument("--n", type=int, default=1200, help="generated sample count")
    g.add_argument("--noise", type=float, default=None, help="generator noise level")
    g.add_argument("--side", type=int, default=16)
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--channels", type=int, default=1)
    g.add_argument("--class-subset", type=parse_int_list, default=None)
    g.add_argument("--per-class-limit", type=int, default=None)
    g.add_argument("--standardize", type=_bool, default=False)
    g.add_argument("--test-fraction", type=float, default=0.25)
    g.add_argument("--data-seed", type=int, default=0)
    g.add_argument("--split", choices=("train", "test", "all"), default="test")
    g.add_argument("--count", type=int, default=None, help="use only the first COUNT samples of the split")


def _add_attack_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("attack")
    g.add_argument("--mode", choices=("targeted", "untargeted"), default="targeted")
    g.add_argument("--attack-eps", type=parse_fraction, default=parse_fraction("4/255"))
    g.add_argument("--step", type=parse_fraction, default=None, help="default: eps / 10")
    g.add_argument("--iters", type=int, default=100)
    g.add_argument("--attack-method", choices=("grad", "xgrad", "gbp"), default="grad")
    g.add_argument("--frame-width", type=int, default=2)
    g.add_argument("--revert-on-increase", type=_bool, default=False)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gradalign", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gradalign {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="key=value file or a previous manifest.json")
        p.add_argument("--out", required=False, default=None, help="run directory")
        p.add_argument("--seed", type=int, default=0)
        return p

    t = command("train", "train a network")
    _add_data_options(t)
    t.add_argument("--arch", choices=("mlp", "mini_lenet", "lenet", "linear"), default="mini_lenet")
    t.add_argument("--hidden", type=parse_int_list, default=[32, 32], help="mlp hidden widths")
    t.add_argument("--width", type=int, default=8, help="mini_lenet channel width")
    t.add_argument("--pool", choices=("max", "avg"), default="max", help="conv net pooling")
    t.add_argument("--activation", choices=("softplus", "relu", "identity"), default="softplus")
    t.add_argument("--beta", type=float, default=3.0)
    t.add_argument("--reg", choices=("ce", "l2", "cos", "l2cos", "hessian", "maxent", "atex", "iga"), default="ce")
    t.add_argument("--lambda-cos", type=float, default=1.0)
    t.add_argument("--lambda-l2", type=float, default=0.1)
    t.add_argument("--lam", type=float, default=1e-3, help="hessian/maxent/atex/iga weight")
    t.add_argument("--eps", type=parse_fraction, default=parse_fraction("8/255"))
    t.add_argument("--optimizer", choices=("sgd", "adam", "adamw"), default="adam")
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--weight-decay", type=float, default=4e-5)
    t.add_argument("--momentum", type=float, default=0.0)
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--batch-size", type=int, default=128)
    t.add_argument("--milestones", type=parse_int_list, default=[100, 150])
    t.add_argument("--lr-decay", type=float, default=0.1)
    t.add_argument("--detach", type=_bool, default=False, help="treat the base input-gradient as a constant")
    t.add_argument("--hessian-probes", type=int, default=1)
    t.add_argument("--atex-eps", type=float, default=2.0)
    t.add_argument("--iga-eps", type=parse_fraction, default=parse_fraction("8/255"))
    t.add_argument("--iga-steps", type=int, default=3)
    t.add_argument("--teacher", default=None, help="teacher checkpoint for --reg atex")

    a = command("attack", "manipulate attributions with PGD")
    a.add_argument("--checkpoint", required=False)
    _add_data_options(a)
    _add_attack_options(a)
    a.add_argument("--dump", type=_bool, default=True, help="write raw x / x_adv / maps per sample")

    r = command("eval-rps", "random perturbation similarity table")
    r.add_argument("--checkpoint", required=False)
    _add_data_options(r)
    r.add_argument("--methods", type=parse_str_list, default=["grad", "xgrad", "gbp", "lrp"])
    r.add_argument("--measures", type=parse_str_list, default=["cossim", "pcc", "ssim"])
    r.add_argument("--eps-list", type=parse_fraction_list, default=parse_fraction_list("4/255,8/255,16/255"))
    r.add_argument("--samples", type=int, default=10)

    i = command("eval-insertion", "insertion and adversarial insertion curves")
    i.add_argument("--checkpoint", required=False)
    _add_data_options(i)
    _add_attack_options(i)
    i.add_argument("--methods", type=parse_str_list, default=["grad", "xgrad", "gbp", "lrp"])
    i.add_argument("--adversarial", type=_bool, default=True)
    i.add_argument("--reconstruct", choices=("clean", "adversarial"), default="clean")

    s = command("surface", "decision surface and gradient field of a 2-input network")
    s.add_argument("--checkpoint", required=False)
    _add_data_options(s, default_data="moons")
    s.add_argument("--grid", type=int, default=41)
    s.add_argument("--range", type=parse_fraction_list, default=[-1.5, 2.5, -1.0, 1.5],
                   help="xmin,xmax,ymin,ymax")
    s.add_argument("--pair", type=parse_fraction_list, default=None, help="ax1,ax2,bx1,bx2 (default: near-boundary)")
    s.add_argument("--pair-distance", type=float, default=0.1)

    b = command("bound-sweep", "measured cosine criterion vs its Hessian bound term")
    b.add_argument("--checkpoint", required=False)
    _add_data_options(b)
    b.add_argument("--eps-list", type=parse_fraction_list, default=[1e-4, 1e-3, 1e-2])
    b.add_argument("--points", type=int, default=100)

    h = command("attribute", "export attribution heatmaps")
    h.add_argument("--checkpoint", required=False)
    _add_data_options(h)
    h.add_argument("--methods", type=parse_str_list, default=["grad", "xgrad", "gbp", "lrp"])
    h.add_argument("--normalize", choices=("none", "l2_unit", "abs_sum_1", "minmax_255"), default="none")
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:  # noqa: SLF001 - argparse has no public accessor
        if name in action.choices:
            return action.choices[name]
    raise CliConfigError(f"unknown command {name!r}")


def _config_values(path: str, command: str) -> dict[str, str]:
    """Flat options from a key=value file ([DEFAULT] and [<command>]) or a manifest."""
    p = Path(path)
    if not p.is_file():
        raise CliConfigError(f"config: file not found: {path}")
    if p.suffix == ".json":
        data = json.loads(p.read_text())
        if data.get("command") != command:
            raise CliConfigError(f"config: manifest is for {data.get('command')!r}, not {command!r}")
        return {k: v for k, v in data["config"].items() if k not in ("command", "config", "out")}
    text = p.read_text()
    if not text.lstrip().startswith("["):
        text = "[DEFAULT]\n" + text
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise CliConfigError(f"config: {exc}") from None
    values = dict(cp.defaults())
    if cp.has_section(command):
        values.update({k: v for k, v in cp.items(command)})
    return values


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = _subparser(parser, args.command)
        known = {a.dest: a for a in sub._actions}  # noqa: SLF001
        overrides = {}
        for key, raw in _config_values(args.config, args.command).items():
            dest = key.replace("-", "_")
            if dest not in known:
                raise CliConfigError(f"config: unknown option {key!r} for {args.command}")
            action = known[dest]
            if isinstance(raw, str) and action.type is not None:
                try:
                    overrides[dest] = action.type(raw)
                except (argparse.ArgumentTypeError, ValueError) as exc:
                    raise CliConfigError(f"config: {key}: {exc}") from None
            else:
                overrides[dest] = raw
            if action.choices is not None and overrides[dest] not in action.choices:
                raise CliConfigError(f"config: {key}: {overrides[dest]!r} not in {list(action.choices)}")
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    if args.out is None:
        raise CliConfigError("out: an output directory is required (--out)")
    if args.command != "train" and not args.checkpoint:
        raise CliConfigError("checkpoint: required for this command (--checkpoint)")
    return args


# -- run directory ----------------------------------------------------------------------


class RunDirectory:
    """Output directory held under an exclusive lock file for the duration of a run."""

    def __init__(self, path):
        self.path = Path(path)
        self.lock = self.path / ".lock"
        self.artifacts: list[Path] = []

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(f"{self.path} is locked by another run ({self.lock} exists)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.lock.unlink(missing_ok=True)
        return False

    def add(self, *paths) -> None:
        for p in paths:
            if isinstance(p, dict):
                self.add(*p.values())
            elif p is not None:
                self.artifacts.append(Path(p))


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(run: RunDirectory, args: argparse.Namespace, wall_time: float, extra: dict | None = None) -> Path:
    """Manifest of existing artifacts only, with sha256 checksums."""
    config = {k: v for k, v in vars(args).items() if k not in ("config",)}
    artifacts = {}
    for p in run.artifacts:
        if p.exists():
            artifacts[str(p.relative_to(run.path))] = sha256(p)
    manifest = {
        "command": args.command,
        "config": config,
        "seed": args.seed,
        "tool_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "wall_time_seconds": wall_time,
        "artifacts": artifacts,
    }
    if extra:
        manifest.update(extra)
    path = run.path / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


# -- shared helpers ---------------------------------------------------------------------


def load_data(args):
    from .datahub import load_cifar_binary, make_moons_2d, make_synthetic_digits, train_test_split

    if args.data == "moons":
        ds = make_moons_2d(args.n, 0.1 if args.noise is None else args.noise, args.data_seed)
    elif args.data == "digits":
        ds = make_synthetic_digits(args.n, args.classes, args.side, args.data_seed, channels=args.channels,
                                   noise=0.1 if args.noise is None else args.noise)
    else:
        if not args.data_path:
            raise CliConfigError("data_path: required for --data cifar")
        ds = load_cifar_binary(args.data_path, args.class_subset, args.per_class_limit, args.standardize)
    train_ds, test_ds = train_test_split(ds, args.test_fraction, args.data_seed)
    return train_ds, test_ds


def eval_split(args):
    train_ds, test_ds = load_data(args)
    ds = {"train": train_ds, "test": test_ds}.get(args.split)
    if ds is None:
        from .datahub import Dataset
        ds = Dataset(np.concatenate([train_ds.inputs, test_ds.inputs]),
                     np.concatenate([train_ds.labels, test_ds.labels]), train_ds.class_count)
    if args.count is not None:
        ds = ds.subset(np.arange(min(args.count, len(ds))))
    return ds


def load_net(args, ds=None):
    from .netzoo import load_checkpoint

    net = load_checkpoint(args.checkpoint)
    if ds is not None and ds.input_shape != net.input_shape:
        raise CliConfigError(f"data: input shape {ds.input_shape} does not match the network {net.input_shape}")
    return net


def _attack_config(args, ds, net):
    from .attack import AttackConfig, make_frame_target

    target = None
    if args.mode == "targeted":
        target = make_frame_target(net.input_shape, args.frame_width).scores
    return AttackConfig(mode=args.mode, epsilon=args.attack_eps, step_size=args.step, iterations=args.iters,
                        target=target, method=args.attack_method, revert_on_increase=args.revert_on_increase,
                        bounds=(ds.low, ds.high), seed=args.seed)


def _write_csv(path, columns, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


# -- commands ----------------------------------------------------------------------------


def cmd_train(args, run: RunDirectory) -> dict:
    from .netzoo import linear_net, lenet, load_checkpoint, mini_lenet, mlp, save_checkpoint
    from .plotting import plot_loss_curves
    from .trainer import RunConfig, train

    train_ds, test_ds = load_data(args)
    shape = train_ds.input_shape
    classes = train_ds.class_count
    if args.arch in ("mlp", "linear"):
        if len(shape) != 1:
            raise CliConfigError(f"arch: {args.arch} needs flat inputs, data has shape {shape}")
        net = (mlp(shape[0], args.hidden, classes, args.activation, args.beta, args.seed) if args.arch == "mlp"
               else linear_net(shape[0], classes, args.seed))
    else:
        if len(shape) != 3:
            raise CliConfigError(f"arch: {args.arch} needs image inputs, data has shape {shape}")
        if args.arch == "lenet":
            net = lenet(shape[0], shape[1], classes, args.activation, args.beta, args.seed, pool=args.pool)
        else:
            net = mini_lenet(shape[0], shape[1], classes, args.activation, args.beta, args.seed, width=args.width,
                             pool=args.pool)
    teacher = load_checkpoint(args.teacher) if args.teacher else None
    try:
        cfg = RunConfig(regularizer=args.reg, lambda_cos=args.lambda_cos, lambda_l2=args.lambda_l2, lam=args.lam,
                        epsilon=args.eps, optimizer=args.optimizer, lr=args.lr, weight_decay=args.weight_decay,
                        momentum=args.momentum, epochs=args.epochs, batch_size=args.batch_size,
                        milestones=tuple(args.milestones), lr_decay=args.lr_decay, beta=args.beta,
                        detach_base_gradient=args.detach, hessian_probes=args.hessian_probes,
                        atex_epsilon=args.atex_eps, iga_epsilon=args.iga_eps, iga_steps=args.iga_steps,
                        seed=args.seed)
    except ValueError as exc:
        raise CliConfigError(str(exc)) from None
    if args.reg == "atex" and teacher is None:
        raise CliConfigError("teacher: --reg atex needs --teacher CHECKPOINT")
    net, report = train(net, train_ds, cfg, test_ds, run_dir=run.path, teacher=teacher)
    if report.checkpoint is None:
        report.checkpoint = save_checkpoint(net, run.path / "checkpoint.bin")
    run.add(report.checkpoint, report.log_path)
    if report.epochs:
        run.add(plot_loss_curves(report.epochs, run.path / "loss_curve.png"))
    return {
        "train_report": {
            "final_accuracy": report.final_accuracy if report.epochs else None,
            "epoch_seconds": [e.seconds for e in report.epochs],
            "peak_memory_kb": report.peak_memory_kb,
            "loss_curves": [{k: getattr(e, k) for k in ("epoch", "ce", "l2_term", "cos_term", "other_term",
                                                         "total", "acc", "lr")} for e in report.epochs],
        }
    }


def cmd_attack(args, run: RunDirectory) -> dict:
    from .attack import run_attack
    from .attributions import export_heatmap
    from .metrics import batch_similarity
    from .plotting import plot_maps

    ds = eval_split(args)
    net = load_net(args, ds)
    cfg = _attack_config(args, ds, net)
    res = run_attack(net, ds.inputs, ds.labels, cfg)
    n = len(ds)
    target = np.broadcast_to(cfg.target, ds.inputs.shape) if cfg.target is not None else None
    sims = {}
    for kind in ("ssim", "pcc", "cossim"):
        sims[f"{kind}_original"] = _safe_batch(batch_similarity, res.map_adv.scores, res.map_clean.scores, kind)
        sims[f"{kind}_target"] = (_safe_batch(batch_similarity, res.map_adv.scores, target, kind)
                                  if target is not None else np.full(n, np.nan))
    axes = tuple(range(1, ds.inputs.ndim))
    linf = np.abs(res.x_adv - res.x).max(axis=axes) if n else np.zeros(0)
    rows = [(k, int(ds.labels[k]), int(res.prediction[k]), float(res.loss_trace[-1, k]),
             sims["ssim_target"][k], sims["pcc_target"][k], sims["cossim_target"][k],
             sims["ssim_original"][k], sims["pcc_original"][k], sims["cossim_original"][k],
             float(linf[k]), int(res.prediction_preserved[k])) for k in range(n)]
    run.add(_write_csv(run.path / "attack_summary.csv", ATTACK_COLUMNS, rows))
    if args.dump:
        dump = run.path / "samples"
        dump.mkdir(exist_ok=True)
        for k in range(n):
            for name, arr in (("x", res.x), ("x_adv", res.x_adv)):
                p = dump / f"{k:04d}_{name}.f64"
                p.write_bytes(arr[k].astype("<f8").tobytes())
                run.add(p)
            run.add(export_heatmap(res.map_clean, k, dump / f"{k:04d}_map"))
            run.add(export_heatmap(res.map_adv, k, dump / f"{k:04d}_map_adv"))
    if ds.inputs.ndim == 4 and n:
        show = min(n, 4)
        run.add(plot_maps(res.x_adv[:show], [res.map_clean.scores[:show], res.map_adv.scores[:show]],
                          ["h(x)", "h(x_adv)"], run.path / "attack_examples.png"))
    return {"attack": {"preserved_fraction": float(res.prediction_preserved.mean()) if n else 1.0,
                       "mean_final_loss": float(res.loss_trace[-1].mean()) if n else 0.0}}


def _safe_batch(fn, a, b, kind):
    from .metrics import UndefinedSimilarityError

    out = []
    for ai, bi in zip(a, b):
        try:
            out.append(fn(ai[None], bi[None], kind)[0])
        except UndefinedSimilarityError:
            out.append(float("nan"))
    return np.array(out)


def cmd_eval_rps(args, run: RunDirectory) -> dict:
    from .metrics import MEASURES, RPS_COLUMNS, rps_values, write_rps_table
    from .plotting import plot_rps

    ds = eval_split(args)
    net = load_net(args, ds)
    bad = [m for m in args.measures if m not in MEASURES]
    if bad:
        raise CliConfigError(f"measures: unknown {bad}; choose from {list(MEASURES)}")
    rows = []
    for method in args.methods:
        for measure in args.measures:
            for eps in args.eps_list:
                value = rps_values(net, ds, method, measure, eps, args.samples, args.seed).mean()
                rows.append({"method": method, "measure": measure, "epsilon": float(eps), "rps": float(value),
                             "n_samples": args.samples, "seed": args.seed})
    run.add(write_rps_table(rows, run.path / "rps.csv"))
    run.add(plot_rps(rows, run.path / "rps.png"))
    return {"columns": list(RPS_COLUMNS)}


def cmd_eval_insertion(args, run: RunDirectory) -> dict:
    from .metrics import adv_insertion_curve, insertion_curve, write_insertion_csv
    from .plotting import plot_insertion

    ds = eval_split(args)
    net = load_net(args, ds)
    curves = {}
    for method in args.methods:
        curves[f"ins/{method}"] = insertion_curve(net, ds, method)
        if args.adversarial:
            cfg = _attack_config(args, ds, net)
            attack_method = method if method in ("grad", "xgrad", "gbp") else args.attack_method
            curves[f"a-ins/{method}"] = adv_insertion_curve(net, ds, method, cfg, reconstruct=args.reconstruct,
                                                            attack_method=attack_method)
    run.add(write_insertion_csv(curves, run.path / "insertion.csv"))
    summary = [(name, c.mean_over_gamma, c.display()) for name, c in curves.items()]
    run.add(_write_csv(run.path / "insertion_summary.csv", ("curve", "mean_probability", "percent"), summary))
    run.add(plot_insertion(curves, run.path / "insertion.png"))
    return {}


def surface_grid(net, grid: int, bounds):
    """Logit difference g1 - g0 and its input gradient on a regular grid (row-major, x1 fastest)."""
    from .autodiff import Tensor, grad, ops, set_grad_enabled

    xmin, xmax, ymin, ymax = bounds
    xs = np.linspace(xmin, xmax, grid)
    ys = np.linspace(ymin, ymax, grid)
    xx, yy = np.meshgrid(xs, ys)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    xin = Tensor(pts, requires_grad=True)
    with set_grad_enabled(True):
        logits = net.forward(xin)
        diff = ops.sub(ops.getitem(logits, (slice(None), 1)), ops.getitem(logits, (slice(None), 0)))
        total = ops.sum(diff)
        g = grad(total, [xin], allow_unused=True)[0] if total.node is not None else None
    grads = np.zeros_like(pts) if g is None else g.data
    return xs, ys, pts, diff.data, grads


def boundary_pair(net, ds, distance: float, seed: int = 0) -> np.ndarray:
    """Two points ``distance`` apart straddling-near the decision boundary: the data point with the
    smallest |g1 - g0| and its neighbour along a random direction."""
    from .autodiff import no_grad

    with no_grad():
        logits = net.forward(ds.inputs).data
    k = int(np.argmin(np.abs(logits[:, 1] - logits[:, 0])))
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(2)
    u /= np.linalg.norm(u)
    a = ds.inputs[k]
    return np.stack([a, a + distance * u])


def pair_statistics(net, pair: np.ndarray, label: int | None = None) -> dict:
    from .criteria import input_gradient

    label = int(net.predict(pair[:1])[0]) if label is None else label
    g = input_gradient(net, pair, [label, label]).data
    na, nb = np.linalg.norm(g[0]), np.linalg.norm(g[1])
    cs = float(g[0] @ g[1] / (na * nb)) if na > 0 and nb > 0 else float("nan")
    return {"label": label, "l2_distance": float(np.linalg.norm(g[0] - g[1])), "cossim": cs,
            "grad_norm_a": float(na), "grad_norm_b": float(nb)}


def cmd_surface(args, run: RunDirectory) -> dict:
    from .plotting import plot_surface

    net = load_net(args)
    if net.input_shape != (2,) or net.class_count != 2:
        raise CliConfigError(f"checkpoint: surface needs a 2-input, 2-class network, got input "
                             f"{net.input_shape} and {net.class_count} classes")
    if len(args.range) != 4 or args.grid < 2:
        raise CliConfigError("range: needs xmin,xmax,ymin,ymax and grid >= 2")
    xs, ys, pts, values, grads = surface_grid(net, args.grid, args.range)
    rows = [(p[0], p[1], v, g[0], g[1]) for p, v, g in zip(pts, values, grads)]
    run.add(_write_csv(run.path / "surface.csv", SURFACE_COLUMNS, rows))
    if args.pair is not None:
        if len(args.pair) != 4:
            raise CliConfigError("pair: needs ax1,ax2,bx1,bx2")
        pair = np.asarray(args.pair, dtype=np.float64).reshape(2, 2)
    else:
        pair = boundary_pair(net, eval_split(args), args.pair_distance, args.seed)
    stats = pair_statistics(net, pair)
    run.add(_write_csv(run.path / "pair.csv", PAIR_COLUMNS,
                       [(*pair.ravel(), stats["label"], stats["l2_distance"], stats["cossim"],
                         stats["grad_norm_a"], stats["grad_norm_b"])]))
    points = eval_split(args).inputs if args.data == "moons" else None
    title = f"l2 {stats['l2_distance']:.3g}  cossim {stats['cossim']:.3f}"
    run.add(plot_surface(xs, ys, values.reshape(args.grid, args.grid), grads.reshape(args.grid, args.grid, 2),
                         run.path / "surface.png", points, pair, title))
    return {"pair": stats}


def cmd_bound_sweep(args, run: RunDirectory) -> dict:
    from .criteria import crc_upper_bound, sample_perturbation
    from .plotting import plot_bound_sweep

    ds = eval_split(args)
    net = load_net(args, ds)
    rng = np.random.default_rng(args.seed)
    idx = rng.integers(0, len(ds), size=args.points)
    x, y = ds.inputs[idx], ds.labels[idx]
    rows = []
    for eps in args.eps_list:
        d = sample_perturbation(x.shape, 1.0, "unit_direction", rng)
        lhs, rhs = crc_upper_bound(net, x, y, d, eps)
        within = lhs <= rhs * (1 + 1e-2) + 1e-8
        rows.append({"epsilon": float(eps), "mean_crc": float(lhs.mean()), "mean_bound": float(rhs.mean()),
                     "fraction_within": float(within.mean()), "points": int(args.points)})
    run.add(_write_csv(run.path / "bound_sweep.csv", BOUND_COLUMNS, [[r[c] for c in BOUND_COLUMNS] for r in rows]))
    run.add(plot_bound_sweep(rows, run.path / "bound_sweep.png"))
    return {}


def cmd_attribute(args, run: RunDirectory) -> dict:
    from .attributions import attribute, export_heatmap, normalize_map
    from .plotting import plot_maps

    ds = eval_split(args)
    net = load_net(args, ds)
    maps = []
    for method in args.methods:
        kwargs = {"bounds": (ds.low, ds.high)} if method == "lrp" else {}
        amap = attribute(net, ds.inputs, ds.labels, method, **kwargs)
        if args.normalize != "none":
            amap = normalize_map(amap, args.normalize)
        maps.append(amap.scores)
        for k in range(len(ds)):
            run.add(export_heatmap(amap, k, run.path / f"{method}_{k:04d}"))
    if ds.inputs.ndim == 4 and len(ds):
        show = min(len(ds), 6)
        run.add(plot_maps(ds.inputs[:show], [m[:show] for m in maps], args.methods, run.path / "attributions.png"))
    return {}


HANDLERS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "eval-rps": cmd_eval_rps,
    "eval-insertion": cmd_eval_insertion,
    "surface": cmd_surface,
    "bound-sweep": cmd_bound_sweep,
    "attribute": cmd_attribute,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if any(a in ("-h", "--help", "--version") for a in argv):
        try:
            build_parser().parse_args(argv)
        except SystemExit as exc:
            return int(exc.code or 0)
    try:
        args = parse_args(argv)
    except CliConfigError as exc:
        print(f"gradalign: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    start = time.perf_counter()
    try:
        with RunDirectory(args.out) as run:
            extra = HANDLERS[args.command](args, run)
            write_manifest(run, args, time.perf_counter() - start, extra)
    except CliConfigError as exc:
        print(f"gradalign: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure inside a run maps to exit code 2
        print(f"gradalign: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK

"""Command line entry point: ``lorenzcg <subcommand> [flags]``.

Settings come from built-in defaults, then an optional ``--config`` file of
``key = value`` lines, then command-line flags (flags win).  Numbers stay
decimal strings until they reach a precision context.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from typing import Optional

from . import __version__
from .errormodel import (
    ErrorModel,
    SweepPoint,
    calibrate,
    computability,
    eval_model,
    load_model,
    optimal_timestep,
    save_model,
)
from .errors import ConfigError, LorenzCGError, TrajectoryFormatError
from .galerkin import Checkpointer, SolverConfig, integrate, n_intervals, read_checkpoint
from .harness import (
    RefSpec,
    ResultTable,
    build_problem,
    pair_divergence,
    stability_study,
    sweep_k,
)
from .precision import format_raw, make_context
from .quadrature import table as quad_table
from .trajectory import TrajectoryWriter, load, read_header, stream_meta

log = logging.getLogger("lorenzcg")

DEFAULTS = {
    "solve": {"problem": "lorenz", "digits": "16", "order": "2", "dt": "0.01", "tmax": "10", "u0": "1,0,0",
              "out": None, "checkpoint_every": None, "checkpoint": None, "resume": False, "unattended": False,
              "guess": "constant", "param": None},
    "pair-converge": {"problem": "lorenz", "digits": "16", "order": "2,4", "dt": "0.001", "dt_high": None,
                      "tmax": "60", "u0": "1,0,0", "tol": None, "sample_dt": "0.25", "out": None, "param": None,
                      "samples_out": None},
    "sweep-k": {"problem": "lorenz", "digits": "16", "order": "1", "dt": "0.1,0.01", "tmax": "30", "u0": "1,0,0",
                "ref_order": None, "ref_digits": None, "ref_dt": "0.01", "cache_dir": None, "workers": "1",
                "out": None, "param": None},
    "stability": {"problem": "lorenz", "digits": "64", "order": "10", "dt": "0.02", "t_list": "10,20,30,40,50",
                  "u0": "1,0,0", "z_t": "1,0,0", "dual_order": None, "dual_dt": None, "p": "0", "workers": "1",
                  "primal": None, "out": None, "param": None},
    "calibrate": {"sweeps": None, "gamma": "0.388", "saturation": "1", "out": None},
    "predict": {"model": None, "order": "100", "digits": "420", "eps": None, "dt": None, "tmax": None,
                "target": None, "data_err": "0", "out": None},
    "quad-table": {"family": "legendre", "points": "5", "digits": "32", "out": None},
    "replay": {"source": None, "out": None},
}


def _load_config_file(path: str) -> dict:
    cfg = {}
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for n, ln in enumerate(lines, 1):
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        key, sep, val = ln.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{n}: expected key = value")
        cfg[key.strip().replace("-", "_")] = val.strip()
    return cfg


def _csv(text) -> list[str]:
    if isinstance(text, (list, tuple)):
        return [str(x) for x in text]
    return [x.strip() for x in str(text).split(",") if x.strip()]


def _params(cfg: dict) -> dict:
    p = cfg.get("param") or cfg.get("params")
    if not p:
        return {}
    if isinstance(p, dict):
        return p
    out = {}
    for item in p if isinstance(p, list) else _csv(p):
        k, sep, v = item.partition("=")
        if not sep:
            raise ConfigError(f"--param expects key=value, got {item!r}")
        out[k.strip()] = v.strip()
    return out


def _bool(v) -> bool:
    return v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes", "on")


def _int(cfg, key) -> int:
    try:
        return int(cfg[key])
    except (TypeError, ValueError):
        raise ConfigError(f"{key} must be an integer, got {cfg[key]!r}")


def _recorded(cfg: dict) -> dict:
    """Config as embedded in outputs: where the output goes is not part of the run."""
    return {k: v for k, v in cfg.items() if k not in ("out", "resume", "unattended")}


def _emit(lines: list[str], out) -> None:
    text = "\n".join(lines) + "\n"
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(out, "w") as fh:
            fh.write(text)


# -- subcommands -------------------------------------------------------------------

def cmd_solve(cfg: dict) -> int:
    digits, q = _int(cfg, "digits"), _int(cfg, "order")
    ctx, system = build_problem(cfg["problem"], digits, _params(cfg))
    u0 = _csv(cfg["u0"])
    T = cfg["tmax"]
    scfg = SolverConfig(q, cfg["dt"], ctx, guess=cfg["guess"])
    out = cfg.get("out")
    record = _recorded(cfg)
    every = cfg.get("checkpoint_every")
    if _bool(cfg.get("unattended")) and not every:
        every = "1000"
    ckpt_path = cfg.get("checkpoint") or (f"{out}.ckpt" if out else None)
    checkpoint = None
    if every:
        if not ckpt_path:
            raise ConfigError("checkpointing needs --out or --checkpoint")
        checkpoint = Checkpointer(ckpt_path, every_steps=int(every))
    resume = None
    if (_bool(cfg.get("resume")) or _bool(cfg.get("unattended"))) and ckpt_path and os.path.exists(ckpt_path):
        resume = read_checkpoint(ckpt_path)
        if resume["config"] != scfg.as_dict():
            raise ConfigError("checkpoint was written with a different solver configuration")
    writer = None
    if out:
        M = n_intervals(T, scfg)
        problem = {"name": system.name, "params": system.params,
                   "u0": [format_raw(ctx.raw(v), ctx.repr_digits) for v in u0]}
        meta = stream_meta(problem, q, ctx, 0, scfg.dt.value, T, M, system.dimension, record)
        offset = resume.get("writer_offset") if resume else None
        if resume and offset is None:
            raise ConfigError("checkpoint has no trajectory file offset")
        writer = TrajectoryWriter(out, meta, ctx, offset)
    started = time.monotonic()
    traj = integrate(system, u0, T, scfg, checkpoint=checkpoint, writer=writer, resume=resume,
                     keep=writer is None, progress_every=1000 if _bool(cfg.get("unattended")) else 0)
    if writer is not None:
        writer.close()
    if checkpoint is not None and os.path.exists(ckpt_path):
        os.remove(ckpt_path)
    n = ctx.repr_digits
    fin = traj.nodes[-1][-1]
    lines = [f"# lorenzcg {__version__} solve", f"# config = {json.dumps(record, sort_keys=True)}",
             f"t_end = {format_raw(traj.t_end, n)}"]
    lines += [f"u[{i}] = {format_raw(v, n)}" for i, v in enumerate(fin)]
    lines += [f"steps = {traj.stats['steps']}", f"newton_iterations = {traj.stats['newton_iterations']}",
              f"wall_time = {time.monotonic() - started:.3f}"]
    if out:
        lines.append(f"trajectory = {out}")
    _emit(lines, None)
    return 0


def cmd_pair_converge(cfg: dict) -> int:
    qs = [int(x) for x in _csv(cfg["order"])]
    if len(qs) != 2:
        raise ConfigError("pair-converge needs --order q_low,q_high")
    digits = _int(cfg, "digits")
    table = pair_divergence(qs[0], qs[1], cfg["dt"], digits, cfg["tmax"], cfg.get("tol"), cfg["problem"],
                            _params(cfg), _csv(cfg["u0"]), cfg.get("sample_dt"), cfg.get("dt_high"),
                            record=bool(cfg.get("samples_out")))
    table.config = {**table.config, **{k: v for k, v in _recorded(cfg).items() if k not in table.config}}
    table.write(cfg.get("out"))
    if cfg.get("samples_out"):
        st = ResultTable("pair-converge-samples", ["t", "gap"], table.config)
        for t, g in table.samples:
            st.add(t, g)
        st.write(cfg["samples_out"])
    return 0


def cmd_sweep_k(cfg: dict) -> int:
    q, digits = _int(cfg, "order"), _int(cfg, "digits")
    ref = RefSpec(int(cfg.get("ref_order") or max(q + 3, 10)), cfg.get("ref_dt") or "0.01",
                  int(cfg.get("ref_digits") or max(2 * digits, 64)), cfg["tmax"], cfg["problem"],
                  _params(cfg), tuple(_csv(cfg["u0"])))
    table = sweep_k(q, _csv(cfg["dt"]), digits, cfg["tmax"], ref, cfg["problem"], _params(cfg),
                    _csv(cfg["u0"]), cfg.get("cache_dir"), _int(cfg, "workers"))
    table.config = {**table.config, **{k: v for k, v in _recorded(cfg).items() if k not in table.config}}
    table.write(cfg.get("out"))
    return 0


def cmd_stability(cfg: dict) -> int:
    primal = load(cfg["primal"]) if cfg.get("primal") else None
    table = stability_study(_csv(cfg["t_list"]), _int(cfg, "digits"), _int(cfg, "order"), cfg["dt"],
                            _csv(cfg["z_t"]), int(cfg["dual_order"]) if cfg.get("dual_order") else None,
                            cfg.get("dual_dt"), _int(cfg, "p"), cfg["problem"], _params(cfg), _csv(cfg["u0"]),
                            primal, _int(cfg, "workers"))
    table.config = {**table.config, **{k: v for k, v in _recorded(cfg).items() if k not in table.config}}
    table.write(cfg.get("out"))
    return 0


def _sweep_points(path: str) -> list[SweepPoint]:
    t = ResultTable.read(path)
    if t.command != "sweep-k":
        raise TrajectoryFormatError(f"{path}: expected a sweep-k table, found {t.command}")
    c = t.config
    q, T, eps = int(c["q"]), c["tmax"], f"1e-{int(c['digits'])}"
    return [SweepPoint(q, dt, eps, T, err) for dt, err in zip(t.column("dt"), t.column("error"))]


def cmd_calibrate(cfg: dict) -> int:
    if not cfg.get("sweeps"):
        raise ConfigError("calibrate needs --sweeps table[,table...]")
    points = []
    for path in _csv(cfg["sweeps"]):
        points += _sweep_points(path)
    model = calibrate(points, cfg["gamma"], saturation=float(cfg["saturation"]))
    if cfg.get("out"):
        save_model(model, cfg["out"])
    lines = [f"C1 = {model.C1}", f"beta = {model.beta}", f"gamma = {model.gamma}"]
    for q in sorted(model.C2):
        lines.append(f"q = {q}: C2 = {model.C2[q]} C3 = {model.C3[q]} alpha = {model.alpha.get(q, 'n/a')}")
    _emit(lines, None)
    return 0


def cmd_predict(cfg: dict) -> int:
    model = load_model(cfg["model"]) if cfg.get("model") else ErrorModel.paper_default()
    q = _int(cfg, "order")
    eps_text = cfg.get("eps") or f"1e-{_int(cfg, 'digits')}"
    ctx = make_context(32)
    eps = ctx.scalar(eps_text)
    n = int(round(-float(eps.log10())))
    k_opt = optimal_timestep(q, eps)
    dt = ctx.scalar(cfg["dt"]) if cfg.get("dt") else k_opt
    lines = [f"# lorenzcg {__version__} predict", f"# config = {json.dumps(_recorded(cfg), sort_keys=True)}",
             f"model = {model.source}", f"q = {q}", f"eps_mach = {format_raw(eps.value, 6)}",
             f"optimal_dt = {format_raw(k_opt.value, 6)}",
             f"horizon_T = {format_raw(computability(eps).value, 8)}"]
    if cfg.get("target"):
        # recalibrated models supply their own round-off prefactor
        pref = model.c3(q, ctx) if model.source == "calibrated" else "0.002"
        lines.append(f"horizon_T_eps = {format_raw(computability(eps, ctx.scalar(cfg['target']), pref).value, 8)}")
        lines.append(f"horizon_prefactor = {pref}")
    if cfg.get("tmax"):
        E = eval_model(model, ctx.scalar(cfg["data_err"]), q, dt, eps, ctx.scalar(cfg["tmax"]))
        lines.append(f"expected_error = {format_raw(E.value, 6)} at dt = {format_raw(dt.value, 6)}, "
                     f"T = {cfg['tmax']}")
    lines.append(f"n_mach = {n}")
    _emit(lines, cfg.get("out"))
    return 0


def cmd_quad_table(cfg: dict) -> int:
    digits = _int(cfg, "digits")
    rule = quad_table(cfg["family"], _int(cfg, "points"), digits)
    t = ResultTable("quad-table", ["i", "point", "weight"], _recorded(cfg))
    for i, (x, w) in enumerate(zip(rule.points, rule.weights)):
        t.add(str(i), format_raw(x, digits), format_raw(w, digits))
    t.meta["exactness_degree"] = str(rule.exactness_degree)
    t.write(cfg.get("out"))
    return 0


def _config_from_output(path: str) -> dict:
    """The config recorded in a table, a solve report or a trajectory header."""
    with open(path) as fh:
        head = fh.readline()
        if head.startswith("# lorenzcg trajectory"):
            meta = read_header(path)
            if not meta.get("config"):
                raise ConfigError(f"{path}: trajectory carries no run config")
            return json.loads(meta["config"])
        for ln in [head] + fh.readlines(64 * 1024):
            if ln.startswith("# config = "):
                return json.loads(ln[len("# config = "):])
    raise ConfigError(f"{path}: no config header found")


def cmd_replay(cfg: dict) -> int:
    if not cfg.get("source"):
        raise ConfigError("replay needs an output file")
    rec = _config_from_output(cfg["source"])
    command = rec.get("command")
    if command not in HANDLERS or command == "replay":
        raise ConfigError(f"cannot replay command {command!r}")
    rec = {**DEFAULTS[command], **rec, "out": cfg.get("out")}
    return HANDLERS[command](rec)


HANDLERS = {
    "solve": cmd_solve,
    "pair-converge": cmd_pair_converge,
    "sweep-k": cmd_sweep_k,
    "stability": cmd_stability,
    "calibrate": cmd_calibrate,
    "predict": cmd_predict,
    "quad-table": cmd_quad_table,
    "replay": cmd_replay,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lorenzcg", description="Arbitrary-precision cG(q) toolkit for the Lorenz system")
    ap.add_argument("--version", action="version", version=f"lorenzcg {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def common(p, *flags):
        p.add_argument("--config", default=S, help="key = value file; flags override it")
        p.add_argument("--out", default=S)
        for f in flags:
            if f == "order":
                p.add_argument("-q", "--order", default=S)
            elif f == "param":
                p.add_argument("--param", action="append", default=S, help="problem parameter key=value")
            else:
                p.add_argument(f"--{f.replace('_', '-')}", default=S)

    p = sub.add_parser("solve", help="integrate and write a trajectory file")
    common(p, "problem", "digits", "order", "dt", "tmax", "u0", "checkpoint_every", "checkpoint", "guess", "param")
    p.add_argument("--resume", action="store_true", default=S)
    p.add_argument("--unattended", action="store_true", default=S)
    p = sub.add_parser("pair-converge", help="divergence time of two discretizations")
    common(p, "problem", "digits", "order", "dt", "dt_high", "tmax", "u0", "tol", "sample_dt", "samples_out",
           "param")
    p = sub.add_parser("sweep-k", help="final-time error against a reference over a list of steps")
    common(p, "problem", "digits", "order", "dt", "tmax", "u0", "ref_order", "ref_digits", "ref_dt",
           "cache_dir", "workers", "param")
    p = sub.add_parser("stability", help="stability factors for a list of end times")
    common(p, "problem", "digits", "order", "dt", "t_list", "u0", "z_t", "dual_order", "dual_dt", "p",
           "workers", "primal", "param")
    p = sub.add_parser("calibrate", help="fit model constants from sweep tables")
    common(p, "sweeps", "gamma", "saturation")
    p = sub.add_parser("predict", help="optimal step, expected error and computability horizon")
    common(p, "model", "order", "digits", "eps", "dt", "tmax", "target", "data_err")
    p = sub.add_parser("quad-table", help="print a Gauss rule")
    common(p, "family", "points", "digits")
    p = sub.add_parser("replay", help="re-run the configuration recorded in an output file")
    p.add_argument("source")
    p.add_argument("--out", default=S)
    return ap


def resolve_config(command: str, ns: argparse.Namespace) -> dict:
    flags = {k: v for k, v in vars(ns).items() if k not in ("command", "verbose", "config")}
    file_cfg = _load_config_file(ns.config) if getattr(ns, "config", None) else {}
    unknown = set(file_cfg) - set(DEFAULTS[command])
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
    cfg = {**DEFAULTS[command], **file_cfg, **flags}
    cfg["command"] = command
    return cfg


def main(argv: Optional[list] = None) -> int:
    ap = build_parser()
    try:
        ns = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if exc.code not in (None, 0) else 0
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(ns.command, ns)
        return HANDLERS[ns.command](cfg)
    except LorenzCGError as exc:
        print(f"lorenzcg: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"lorenzcg: I/O error: {exc}", file=sys.stderr)
        return TrajectoryFormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())

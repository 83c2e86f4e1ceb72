"""Command-line front end: ``riskwadc {model,train,eval,modes,sweep}``.

Every command writes ``manifest.json`` next to its outputs before producing
them and rewrites it (atomically) when done. Timestamps live only there,
so result files are byte-identical across re-runs with the same inputs.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io as _io
import os
import sys

import numpy as np

from . import __version__
from .analysis import closed_loop_modes, format_modes, scenario_sweep, summarize
from .comms import CommGraph, PacketLossModel, SparsityMask, mask_from_graph
from .errors import DegenerateOperatingPointError, InfeasibleGainError, RiskWadcError, UnknownSystemError
from .io import (
    atomic_write_text,
    bundle_to_system,
    dump_json,
    load_network,
    read_json,
    scenario_from_json,
    scenario_to_json,
    sha256_file,
    system_to_bundle,
)
from .netmodel import build_continuous, discretize
from .risklqr import compute_moments, load_moments, spectral_radius
from .sgdmax import AnalyticEvaluator, McEvaluator, TrainConfig, ZopgConfig, load_checkpoint, save_checkpoint, train
from .sim import NoiseModel, ScenarioConfig, rollout, write_trajectory_csv
from .systems import builtin_areas, builtin_system

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class Manifest:
    def __init__(self, outdir, command, argv, inputs, seed, outputs):
        self.path = os.path.join(outdir, "manifest.json")
        self.doc = {
            "command": command,
            "argv": list(argv),
            "inputs": {str(p): sha256_file(p) for p in inputs},
            "seed": seed,
            "version": __version__,
            "outputs": sorted(outputs),
            "started_at": _now(),
            "finished_at": None,
            "status": "running",
        }
        atomic_write_text(self.path, dump_json(self.doc))

    def finish(self, status="ok"):
        self.doc["finished_at"] = _now()
        self.doc["status"] = status
        atomic_write_text(self.path, dump_json(self.doc))


def _outdir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _csv_text(header, rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _f(x) -> str:
    return repr(float(x))


def _load_model(path):
    doc = read_json(path)
    return bundle_to_system(doc, str(path)), doc


def _model_network(doc):
    src = doc.get("source", {})
    if "builtin" in src:
        net, op, _ = builtin_system(src["builtin"])
        return net, op
    if "network" in src:
        from .io import network_from_json

        net, op, _ = network_from_json(src["network"], "model.source.network")
        return net, op
    return None, None


def _mask_for(sys_, doc, comm_path, actuators):
    ng, nv = sys_.n_sg, sys_.n_vsc
    comm = read_json(comm_path) if comm_path else {}
    if comm:
        areas = comm.get("areas")
        if areas is None:
            graph = CommGraph.complete(ng, nv)
            if comm.get("edges") is not None:
                graph = CommGraph(ng, nv, frozenset(map(tuple, comm["edges"])))
        else:
            graph = CommGraph.from_areas(ng, nv, areas, comm.get("area_links", []), comm.get("edges", []))
    else:
        src = doc.get("source", {})
        if "builtin" in src:
            areas, links = builtin_areas(src["builtin"])
            graph = CommGraph.from_areas(ng, nv, areas, links)
        else:
            graph = CommGraph.complete(ng, nv)
    return mask_from_graph(graph, comm.get("actuators", actuators)), comm


def _scenario(args, cfg_doc, comm, n_states, seed):
    doc = dict(cfg_doc.get("scenario", {}))
    for key in ("max_delay_s", "loss_p"):
        if key in comm:
            doc.setdefault(key, comm[key])
    flags = {"horizon": args.horizon, "impulse_scale": args.impulse, "max_delay_s": args.max_delay, "loss_p": args.loss_p}
    doc.update({k: v for k, v in flags.items() if v is not None})
    if args.noise_std is not None:
        doc["noise"] = {"kind": "gaussian", "std": args.noise_std}
    doc.setdefault("noise", {"kind": "gaussian", "std": 0.01})
    doc["seed"] = seed
    return scenario_from_json(doc, n_states, "scenario")


def _weights(cfg_doc, sys_):
    q = np.asarray(cfg_doc.get("q_diag", np.ones(sys_.n_states)), float)
    r = np.asarray(cfg_doc.get("r_diag", np.ones(sys_.n_inputs)), float)
    return np.diag(np.broadcast_to(q, (sys_.n_states,))), np.diag(np.broadcast_to(r, (sys_.n_inputs,)))


def _pick(flag, cfg_doc, key, default):
    if flag is not None:
        return flag
    return cfg_doc.get(key, default)


# --- model -------------------------------------------------------------------

def cmd_model(args, argv):
    if args.inspect:
        sys_, doc = _load_model(args.inspect)
        rho = spectral_radius(sys_.A)
        print(f"states {sys_.n_states}  inputs {sys_.n_inputs}  SGs {sys_.n_sg}  VSCs {sys_.n_vsc}  dt {sys_.dt}")
        print(f"open-loop spectral radius {rho:.12g}")
        return EXIT_OK
    if not args.output:
        raise UsageError("model: -o/--output is required unless --inspect is given")
    if bool(args.builtin) == bool(args.network):
        raise UsageError("model: give exactly one of --builtin or --network")
    if args.builtin:
        net, op, _ = builtin_system(args.builtin)
        source = {"builtin": args.builtin}
        inputs = []
    else:
        net, op, _ = load_network(args.network)
        source = {"network": read_json(args.network)}
        inputs = [args.network]
    sys_ = discretize(build_continuous(net, op), args.dt)
    modes = closed_loop_modes(sys_, None, band_hz=None)
    outdir = _outdir(os.path.dirname(os.path.abspath(args.output)))
    report_path = os.path.splitext(args.output)[0] + ".modes.txt"
    man = Manifest(outdir, "model", argv, inputs, None, [args.output, report_path])
    doc = system_to_bundle(sys_, source, {"spectral_radius": spectral_radius(sys_.A)})
    atomic_write_text(args.output, dump_json(doc))
    atomic_write_text(report_path, f"open-loop modes (dt = {sys_.dt} s)\n" + format_modes(modes) + "\n")
    man.finish()
    return EXIT_OK


# --- train -------------------------------------------------------------------

def cmd_train(args, argv):
    cfg_doc = read_json(args.config) if args.config else {}
    sys_, mdoc = _load_model(args.model)
    seed = int(_pick(args.seed, cfg_doc, "seed", 0))
    mask, comm = _mask_for(sys_, mdoc, args.comm, _pick(args.actuators, cfg_doc, "actuators", "all"))
    scen = _scenario(args, cfg_doc, comm, sys_.n_states, seed)
    Q, R = _weights(cfg_doc, sys_)
    c = float(_pick(args.risk_c, cfg_doc, "risk_c", 0.5))
    risk_on = _pick(args.risk, cfg_doc, "risk", "on") == "on"
    lam_max = float(_pick(args.lambda_max, cfg_doc, "lambda_max", 100.0)) if risk_on else 0.0
    iters = int(_pick(args.iters, cfg_doc, "iters", 15000))
    zopg = ZopgConfig(float(_pick(args.radius, cfg_doc, "radius", 0.1)), int(_pick(args.zopg_samples, cfg_doc, "zopg_samples", 100)),
                      estimator=_pick(args.estimator, cfg_doc, "estimator", "one-point"))
    tcfg = TrainConfig(eta=float(_pick(args.eta, cfg_doc, "eta", 1e-4)), iters=iters, seed=seed,
                       log_every=int(_pick(args.log_every, cfg_doc, "log_every", 1)))
    moments = load_moments(args.moments) if args.moments else compute_moments(scen.noise, Q, c, seed=seed)
    if args.moments:
        moments = moments.with_tolerance(c)
    backend = _pick(args.backend, cfg_doc, "backend", "mc")
    if backend == "mc":
        ev = McEvaluator(sys_, moments, Q, R, scen, lam_max)
    else:
        ev = AnalyticEvaluator(sys_, moments, Q, R, lam_max)

    out = _outdir(args.output)
    paths = {k: os.path.join(out, f) for k, f in
             (("ckpt", "checkpoint.json"), ("log", "trainlog.csv"), ("mom", "moments.json"), ("scen", "scenario.json"))}
    inputs = [args.model] + [p for p in (args.config, args.comm, args.moments) if p]
    man = Manifest(out, "train", argv, inputs, seed, list(paths.values()))
    log = train(ev, mask, tcfg, zopg, sys=sys_)
    atomic_write_text(paths["mom"], dump_json(log.moments.to_json()))
    atomic_write_text(paths["scen"], dump_json(scenario_to_json(scen)))
    save_checkpoint(paths["ckpt"], log.K, mask, iters, seed, "moments.json", {
        "n_sg": sys_.n_sg, "n_vsc": sys_.n_vsc, "risk": "on" if risk_on else "off", "lambda_max": lam_max,
        "risk_c": c, "eta": tcfg.eta, "radius": zopg.radius, "zopg_samples": zopg.samples,
        "estimator": zopg.estimator, "backend": backend, "model_sha256": sha256_file(args.model),
    })
    log.write_csv(paths["log"])
    man.finish()
    if not np.isfinite(log.K).all() or spectral_radius(sys_.A - sys_.B @ log.K) >= 1.0:
        print("training ended with a destabilizing gain", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


# --- eval / modes / sweep -----------------------------------------------------

def _load_design(path, sys_):
    K, mask, doc = load_checkpoint(path)
    if K.shape != (sys_.n_inputs, sys_.n_states):
        raise RiskWadcError(f"{path}: gain is {K.shape[0]}x{K.shape[1]} but the model needs "
                            f"{sys_.n_inputs}x{sys_.n_states}")
    return K, doc


def _eval_setup(args):
    cfg_doc = read_json(args.config) if args.config else {}
    sys_, mdoc = _load_model(args.model)
    seed = int(_pick(args.seed, cfg_doc, "seed", 0))
    comm = read_json(args.comm) if args.comm else {}
    scen = _scenario(args, cfg_doc, comm, sys_.n_states, seed)
    Q, R = _weights(cfg_doc, sys_)
    return cfg_doc, sys_, mdoc, seed, scen, Q, R


def _moments_for(scen, Q, cfg_doc, seed):
    if scen.noise is None:
        return None
    return compute_moments(scen.noise, Q, float(cfg_doc.get("risk_c", 0.5)), seed=seed)


def cmd_eval(args, argv):
    cfg_doc, sys_, mdoc, seed, scen, Q, R = _eval_setup(args)
    K, _ = _load_design(args.checkpoint, sys_)
    mom = _moments_for(scen, Q, cfg_doc, seed)
    res = scenario_sweep(sys_, {"design": K}, "delay", [scen.max_delay_s], args.scenarios, scen, Q, R,
                         moments=mom, msfd_sg=args.msfd_sg)
    st = res.stats[0]
    out = _outdir(args.output)
    paths = [os.path.join(out, "eval.csv"), os.path.join(out, "summary.json")]
    if args.trajectory is not None:
        paths.append(os.path.join(out, f"trajectory_{args.trajectory}.csv"))
    man = Manifest(out, "eval", argv, [args.model, args.checkpoint] + ([args.config] if args.config else []), seed, paths)
    rows = [[int(i), *(_f(st.values[m][k]) for m in ("objective", "state_cost", "risk_sample", "msfd"))]
            for k, i in enumerate(st.scenario)]
    atomic_write_text(paths[0], _csv_text(["scenario", "objective", "state_cost", "risk_sample", "msfd"], rows))
    summ = {m: summarize(st.values[m]).as_dict() for m in ("objective", "state_cost", "risk_sample", "msfd")
            if not np.isnan(st.values[m]).any()}
    atomic_write_text(paths[1], dump_json({"scenarios": args.scenarios, "seed": seed, **summ}))
    if args.trajectory is not None:
        write_trajectory_csv(rollout(sys_, K, scen, index=args.trajectory, Q=Q, R=R), paths[2])
    man.finish()
    return EXIT_DIVERGED if np.any(st.values["objective"] >= 1e9) else EXIT_OK


def cmd_modes(args, argv):
    sys_, _ = _load_model(args.model)
    K = None
    inputs = [args.model]
    if args.checkpoint:
        K, _ = _load_design(args.checkpoint, sys_)
        inputs.append(args.checkpoint)
    band = None if args.band == "all" else tuple(float(v) for v in args.band.split(","))
    if band is not None and len(band) != 2:
        raise UsageError("modes: --band takes 'lo,hi' or 'all'")
    modes = closed_loop_modes(sys_, K, band)
    print(format_modes(modes))
    if args.output:
        out = _outdir(os.path.dirname(os.path.abspath(args.output)))
        man = Manifest(out, "modes", argv, inputs, None, [args.output])
        rows = [[_f(m.lambda_d.real), _f(m.lambda_d.imag), _f(m.lambda_c.real), _f(m.lambda_c.imag),
                 _f(m.freq_hz), _f(m.damping), int(m.branch_warning)] for m in modes]
        atomic_write_text(args.output, _csv_text(["re_discrete", "im_discrete", "sigma", "omega", "freq_hz", "damping", "branch_warning"], rows))
        man.finish()
    return EXIT_OK


def _parse_levels(text):
    if text is None or not text.strip():
        raise UsageError("sweep: --levels must list at least one value")
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"sweep: bad --levels ({exc})") from exc


def cmd_sweep(args, argv):
    levels = _parse_levels(args.levels)
    if not levels:
        raise UsageError("sweep: --levels must list at least one value")
    cfg_doc, sys_, mdoc, seed, scen, Q, R = _eval_setup(args)
    designs = {}
    inputs = [args.model]
    for spec in args.checkpoint:
        name, _, path = spec.rpartition("=")
        name = name or os.path.splitext(os.path.basename(path))[0]
        designs[name], _ = _load_design(path, sys_)
        inputs.append(path)
    net = op = None
    if args.axis == "op-perturb":
        net, op = _model_network(mdoc)
        if net is None:
            raise RiskWadcError("op-perturb needs a model built from a network description")
    mom = _moments_for(scen, Q, cfg_doc, seed)
    out = _outdir(args.output)
    paths = [os.path.join(out, "sweep.csv"), os.path.join(out, "summary.json")]
    man = Manifest(out, "sweep", argv, inputs + ([args.config] if args.config else []), seed, paths)
    res = scenario_sweep(sys_, designs, args.axis, levels, args.scenarios, scen, Q, R, moments=mom,
                         msfd_sg=args.msfd_sg, network=net, op=op, jobs=args.jobs)
    res.write_csv(paths[0])
    res.write_summary(paths[1])
    man.finish()
    return EXIT_OK


# --- parser ---------------------------------------------------------------------

def _sg_selector(text):
    return None if text == "all" else int(text)


def _scenario_flags(p):
    p.add_argument("--config", help="JSON config; flags override its keys")
    p.add_argument("--comm", help="communication-graph JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--horizon", type=int, help="rollout length in steps")
    p.add_argument("--impulse", type=float, help="initial speed-impulse scale")
    p.add_argument("--noise-std", type=float, help="isotropic Gaussian noise standard deviation")
    p.add_argument("--max-delay", type=float, help="maximum measurement delay in seconds")
    p.add_argument("--loss-p", type=float, help="packet-loss probability")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="riskwadc", description="Risk-constrained wide-area damping control toolkit.")
    ap.add_argument("--version", action="version", version=f"riskwadc {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("model", help="build and discretize a linearized model")
    p.add_argument("--builtin", help="'two-area' or 'ring(Ng,Nv,seed)'")
    p.add_argument("--network", help="network description JSON")
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("-o", "--output")
    p.add_argument("--inspect", metavar="MODEL", help="summarize an existing bundle")

    p = sub.add_parser("train", help="train a structured gain with SGDmax")
    p.add_argument("--model", required=True)
    p.add_argument("-o", "--output", required=True, help="output directory")
    _scenario_flags(p)
    p.add_argument("--eta", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--zopg-samples", type=int)
    p.add_argument("--radius", type=float)
    p.add_argument("--estimator", choices=("one-point", "antithetic"))
    p.add_argument("--risk-c", type=float)
    p.add_argument("--lambda-max", type=float)
    p.add_argument("--risk", choices=("on", "off"))
    p.add_argument("--backend", choices=("mc", "analytic"))
    p.add_argument("--actuators", choices=("all", "sg", "vsc"))
    p.add_argument("--moments", help="moments cache JSON to use instead of the noise model")
    p.add_argument("--log-every", type=int)

    p = sub.add_parser("eval", help="evaluate one design over seeded scenarios")
    p.add_argument("--model", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-o", "--output", required=True)
    _scenario_flags(p)
    p.add_argument("--scenarios", type=int, default=100)
    p.add_argument("--msfd-sg", type=_sg_selector, default=None, help="generator index or 'all'")
    p.add_argument("--trajectory", type=int, help="also export the trajectory of this scenario")

    p = sub.add_parser("modes", help="closed-loop modal damping report")
    p.add_argument("--model", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--band", default="0.1,2", help="'lo,hi' in Hz or 'all'")
    p.add_argument("-o", "--output", help="CSV output path")

    p = sub.add_parser("sweep", help="scenario sweep over delay, loss, risk-c or op-perturb")
    p.add_argument("--model", required=True)
    p.add_argument("--checkpoint", action="append", required=True, help="[name=]path; repeatable")
    p.add_argument("--axis", required=True, choices=("delay", "loss", "risk-c", "op-perturb"))
    p.add_argument("--levels", required=True)
    p.add_argument("--scenarios", type=int, default=100)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--msfd-sg", type=_sg_selector, default=None)
    p.add_argument("-o", "--output", required=True)
    _scenario_flags(p)
    return ap


COMMANDS = {"model": cmd_model, "train": cmd_train, "eval": cmd_eval, "modes": cmd_modes, "sweep": cmd_sweep}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleGainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (RiskWadcError, UnknownSystemError, DegenerateOperatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

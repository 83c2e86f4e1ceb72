"""File formats: network descriptions, model bundles, noise and scenario configs."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

import numpy as np

from .errors import ValidationError
from .netmodel import (
    Branch,
    DiscreteSystem,
    Generator,
    NetworkDescription,
    OperatingPoint,
    SgParams,
    Vsc,
    input_labels,
    state_labels,
)
from .sim import NoiseModel, ScenarioConfig
from .comms import PacketLossModel

MODEL_FORMAT = "riskwadc-model/1"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def read_json(path):
    """Parse a JSON file; syntax errors are reported with line and column."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ValidationError(f"{path}: {exc.strerror or exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc


def _field(doc, key, where, cast=float, default=None):
    if key not in doc:
        if default is not None:
            return default
        raise ValidationError(f"{where}: missing field {key!r}")
    try:
        return cast(doc[key])
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{where}.{key}: {exc}") from exc


def _vec(doc, key, where, n=None):
    try:
        v = np.asarray(doc[key], dtype=float).ravel()
    except KeyError:
        raise ValidationError(f"{where}: missing field {key!r}") from None
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{where}.{key}: {exc}") from exc
    if n is not None and v.size != n:
        raise ValidationError(f"{where}.{key}: expected {n} entries, got {v.size}")
    return v


def network_from_json(doc, where="network"):
    """Build ``(network, operating_point, sg_params)`` from a network document.

    Sections: ``buses`` (``id``, optional ``gs``/``bs`` shunt), ``branches``
    (``from``, ``to``, series ``g``/``b``), ``generators`` (``bus`` plus the
    machine parameters), ``vscs`` (``bus``, ``Pv``, optional ``Qv``) and
    ``operating_point`` with either a full solution (``E``, ``delta``, ``V``,
    ``theta``) or ``E`` with ``p_targets`` to be solved. Missing ``Pm``/``Vbar``
    are set so the operating point is an equilibrium.
    """
    from .systems import equilibrium_params, solve_operating_point

    if not isinstance(doc, dict):
        raise ValidationError(f"{where}: expected an object")
    buses = doc.get("buses")
    if not isinstance(buses, list) or not buses:
        raise ValidationError(f"{where}.buses: expected a nonempty list")
    ids = {}
    shunts = np.zeros(len(buses), dtype=complex)
    for k, b in enumerate(buses):
        w = f"{where}.buses[{k}]"
        bid = b.get("id", k) if isinstance(b, dict) else k
        if bid in ids:
            raise ValidationError(f"{w}: duplicate bus id {bid!r}")
        ids[bid] = k
        if isinstance(b, dict):
            shunts[k] = complex(_field(b, "gs", w, default=0.0), _field(b, "bs", w, default=0.0))

    def bus(ref, w):
        if ref not in ids:
            raise ValidationError(f"{w}: unknown bus {ref!r}")
        return ids[ref]

    branches = []
    for k, br in enumerate(doc.get("branches", [])):
        w = f"{where}.branches[{k}]"
        branches.append(Branch(bus(br.get("from"), w), bus(br.get("to"), w), _field(br, "g", w), _field(br, "b", w)))
    gens = []
    explicit = []
    for k, g in enumerate(doc.get("generators", [])):
        w = f"{where}.generators[{k}]"
        kw = {k: _field(g, k, w) for k in ("H", "D", "xd", "xdp", "Tdp", "Ta", "Ka")}
        kw.update(Pm=_field(g, "Pm", w, default=0.0), Vbar=_field(g, "Vbar", w, default=1.0))
        try:
            p = SgParams(**kw)
        except ValidationError as exc:
            raise ValidationError(f"{w}: {exc}") from exc
        gens.append(Generator(bus(g.get("bus"), w), p))
        explicit.append("Pm" in g and "Vbar" in g)
    vscs = []
    for k, v in enumerate(doc.get("vscs", [])):
        w = f"{where}.vscs[{k}]"
        vscs.append(Vsc(bus(v.get("bus"), w), _field(v, "Pv", w), _field(v, "Qv", w, default=0.0)))
    try:
        net = NetworkDescription(len(buses), branches, gens, vscs, shunts)
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from exc

    opd = doc.get("operating_point")
    if not isinstance(opd, dict):
        raise ValidationError(f"{where}.operating_point: required")
    w = f"{where}.operating_point"
    ng, nv = net.n_sg, net.n_vsc
    E = _vec(opd, "E", w, ng)
    if "delta" in opd:
        op = OperatingPoint(E, _vec(opd, "delta", w, ng), _vec(opd, "V", w, nv), _vec(opd, "theta", w, nv))
    else:
        op = solve_operating_point(net, E, _vec(opd, "p_targets", w, ng - 1))
    if all(explicit):
        params = net.sg_params
    else:
        params = equilibrium_params(net, op)
        net = net.with_params(params)
    return net, op, params


def load_network(path):
    return network_from_json(read_json(path), where=str(path))


def system_to_bundle(sys: DiscreteSystem, source: dict, extra=None) -> dict:
    doc = {
        "format": MODEL_FORMAT,
        "dt": sys.dt,
        "n_sg": sys.n_sg,
        "n_vsc": sys.n_vsc,
        "states": state_labels(sys.n_sg),
        "inputs": input_labels(sys.n_sg, sys.n_vsc),
        "A": sys.A.tolist(),
        "B": sys.B.tolist(),
        "source": source,
    }
    if extra:
        doc.update(extra)
    return doc


def bundle_to_system(doc, where="model") -> DiscreteSystem:
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ValidationError(f"{where}: not a model bundle (format {MODEL_FORMAT!r} expected)")
    try:
        return DiscreteSystem(np.asarray(doc["A"], float), np.asarray(doc["B"], float), float(doc["dt"]),
                              int(doc["n_sg"]), int(doc["n_vsc"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{where}: malformed bundle ({exc})") from exc


def noise_from_json(doc, n_states: int, where="noise", base_dir=".") -> NoiseModel:
    """``{"kind": "gaussian", "std": s | [..], "cov": [[..]], "mean": [..]}`` or
    ``{"kind": "empirical", "samples": [[..]] | "samples_csv": path}``."""
    kind = doc.get("kind", "gaussian")
    if kind == "gaussian":
        if "cov" in doc:
            cov = np.asarray(doc["cov"], dtype=float)
        else:
            std = np.broadcast_to(np.asarray(doc.get("std", 0.0), dtype=float), (n_states,))
            cov = np.diag(std**2)
        if cov.shape != (n_states, n_states):
            raise ValidationError(f"{where}: covariance must be {n_states}x{n_states}")
        mean = np.asarray(doc.get("mean", np.zeros(n_states)), dtype=float)
        return NoiseModel.gaussian(cov, mean)
    if kind == "empirical":
        if "samples" in doc:
            samples = np.asarray(doc["samples"], dtype=float)
        elif "samples_csv" in doc:
            samples = np.loadtxt(os.path.join(base_dir, doc["samples_csv"]), delimiter=",", ndmin=2)
        else:
            raise ValidationError(f"{where}: empirical noise needs 'samples' or 'samples_csv'")
        if samples.ndim != 2 or samples.shape[1] != n_states:
            raise ValidationError(f"{where}: samples must have {n_states} columns")
        return NoiseModel.empirical(samples)
    raise ValidationError(f"{where}.kind: unknown noise kind {kind!r}")


def noise_to_json(noise: NoiseModel) -> dict:
    if noise.kind == "empirical":
        return {"kind": "empirical", "samples": noise.samples.tolist()}
    return {"kind": "gaussian", "cov": noise.cov.tolist(), "mean": noise.mean.tolist()}


def scenario_from_json(doc, n_states: int, where="scenario", base_dir=".") -> ScenarioConfig:
    """Scenario template; keys mirror :class:`ScenarioConfig` plus ``loss_p``/``loss_per_link``."""
    noise = doc.get("noise")
    loss = None
    if doc.get("loss_p", 0.0):
        loss = PacketLossModel(float(doc["loss_p"]), per_link=bool(doc.get("loss_per_link", False)))
    try:
        return ScenarioConfig(
            horizon=int(doc.get("horizon", 2000)),
            impulse_scale=float(doc.get("impulse_scale", 0.0)),
            noise=None if noise is None else noise_from_json(noise, n_states, f"{where}.noise", base_dir),
            max_delay_s=float(doc.get("max_delay_s", 0.0)),
            loss=loss,
            seed=int(doc.get("seed", 0)),
        )
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{where}: {exc}") from exc


def scenario_to_json(cfg: ScenarioConfig) -> dict:
    return {
        "horizon": cfg.horizon,
        "impulse_scale": cfg.impulse_scale,
        "noise": None if cfg.noise is None else noise_to_json(cfg.noise),
        "max_delay_s": cfg.max_delay_s,
        "loss_p": cfg.loss.p if cfg.loss is not None else 0.0,
        "loss_per_link": cfg.loss.per_link if cfg.loss is not None else False,
        "seed": cfg.seed,
    }

"""
Experiment Harness
Reads an INI experiment config, runs one verification pipeline, writes its
CSV artifacts, a repeatable run manifest and a summary table of constants.

Every subcommand returns an exit code: 0 pass, 1 usage error,
2 verification failure, 3 inconclusive.
"""

import configparser
import csv
import logging
import math
import os
import time
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

import certify
from dynamics import (
    SQRT2, PhaseState, SimConfig, TangentFlow, block_rng, simulate_ensemble, step, step_tangent,
)
from gamma2 import QuadraticObservable, c_m, gamma, verify_gradient_bound
from hypocert_base import (
    FORMAT_VERSION, TOOL_VERSION, CertificateError, ConfigError, ExitCode,
    HypocertError, InconclusiveError, InvalidArgumentError, NumericalBlowupError, Provenance,
    SchemaError,
)
from lyapunov import default_z_grid, derive_params, verify_drift
from malliavin import (
    Pairing, alpha_reference_bound, commutator_direction, coupling_probability,
)
from metric import MetricParams, wasserstein1, wasserstein1_1d_euclidean
from potential_factory import available_potentials, create_potential
from potentials import make_quadratic

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("simulate", "lyapunov", "gradient", "coupling", "rate", "certify", "selftest")
KNOWN_SECTIONS = ("experiment", "potential", "simulation", "simulate", "lyapunov", "gradient",
                  "metric", "coupling", "rate", "certify", "manifest")

# Column lists of every CSV artifact; "{state}" expands to the phase coordinates.
SCHEMAS: Dict[str, Tuple[str, ...]] = {
    "drift": ("t", "{state}", "lhs_estimate", "lhs_ucb", "rhs", "slack", "pass"),
    "gradient": ("t", "{state}", "fn", "lhs", "rhs", "se", "margin", "pass"),
    "coupling": ("t", "z1", "z2", "delta", "n", "p_hat", "ci_lo", "ci_hi",
                 "rho_p_hat", "rho_ci_lo", "rho_ci_hi", "alpha_ref", "status"),
    "decay": ("t", "w1", "floor", "w1_rho"),
    "constants": ("constant", "value", "provenance", "status"),
    "selftest": ("check", "passed"),
}


@dataclass
class ExperimentConfig:
    """Parsed config plus the raw parser, kept for the manifest echo."""
    parser: configparser.ConfigParser
    source: Optional[str]
    text: str
    out: str

    def _line(self, section: str, key: str) -> Optional[int]:
        current = None
        for number, line in enumerate(self.text.splitlines(), start=1):
            stripped = line.strip()
            if stripped.startswith("[") and stripped.endswith("]"):
                current = stripped[1:-1].strip()
            elif current == section and stripped.split("=", 1)[0].strip().lower() == key.lower():
                return number
        return None

    def error(self, section: str, key: str, message: str) -> ConfigError:
        return ConfigError(message, field=f"{section}.{key}", line=self._line(section, key))

    def get(self, section: str, key: str, cast: Callable = str, default=None, required: bool = False):
        if not self.parser.has_option(section, key):
            if required:
                raise self.error(section, key, f"missing required field '{section}.{key}'")
            return default
        raw = self.parser.get(section, key)
        try:
            return cast(raw)
        except (ValueError, InvalidArgumentError) as err:
            raise self.error(section, key, f"invalid value {raw!r}: {err}")

    def floats(self, section: str, key: str, default: Sequence[float]) -> List[float]:
        return self.get(section, key, _parse_floats, list(default))

    def potential(self):
        name = self.get("potential", "name", str, required=True)
        params = {k: self.get("potential", k, float) for k in self.parser.options("potential") if k != "name"}
        try:
            return create_potential(name, params)
        except InvalidArgumentError as err:
            known = ", ".join(n for n, _ in available_potentials())
            raise self.error("potential", "name", f"{err} (known: {known})")

    def sim(self) -> SimConfig:
        workers = self.get("simulation", "workers", int, 0)
        try:
            return SimConfig(
                dt=self.get("simulation", "dt", float, 0.01),
                t_final=self.get("simulation", "t_final", float, 10.0),
                n_paths=self.get("simulation", "n_paths", int, 10000),
                master_seed=self.get("simulation", "seed", int, 0),
                scheme=self.get("simulation", "scheme", str, "euler_maruyama"),
                sigma=self.get("simulation", "sigma", float, SQRT2),
                workers=workers or None,
                chunk_size=self.get("simulation", "chunk_size", int, 4096),
            )
        except InvalidArgumentError as err:
            raise ConfigError(str(err), field="simulation")

    def metric_values(self) -> Dict[str, float]:
        return {
            "r": self.get("metric", "r", float, 0.5),
            "delta": self.get("metric", "delta", float, 0.1),
            "beta_w": self.get("metric", "beta_w", float, 0.5),
        }


def _parse_floats(raw: str) -> List[float]:
    """'a,b,c' or 'linspace:start:stop:num'."""
    raw = raw.strip()
    if raw.startswith("linspace:"):
        start, stop, num = raw.split(":")[1:]
        return [float(v) for v in np.linspace(float(start), float(stop), int(num))]
    return [float(v) for v in raw.split(",") if v.strip()]


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def load_config(path: Optional[str], overrides: Iterable[str] = (), seed: Optional[int] = None,
                out: Optional[str] = None) -> ExperimentConfig:
    """Parse a config file and apply --set, --seed and --out overrides."""
    text = ""
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=path or "<defaults>")
    except configparser.Error as err:
        raise ConfigError(f"unreadable config: {err}", line=getattr(err, "lineno", None))

    for section in parser.sections():
        if section not in KNOWN_SECTIONS:
            raise ConfigError(f"unknown section [{section}]", field=section,
                              line=_section_line(text, section))
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, option = key.strip().partition(".")
        if not sep or not dot or section not in KNOWN_SECTIONS:
            raise ConfigError(f"override must be SECTION.KEY=VALUE, got {item!r}", field=key.strip())
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, option.strip(), value.strip())
    if seed is not None:
        if not parser.has_section("simulation"):
            parser.add_section("simulation")
        parser.set("simulation", "seed", str(seed))
    if not parser.has_section("experiment"):
        parser.add_section("experiment")
    if out is not None:
        parser.set("experiment", "out", out)

    cfg = ExperimentConfig(parser, path, text, "")
    version = cfg.get("experiment", "format_version", str, FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise cfg.error("experiment", "format_version",
                        f"unsupported format_version {version!r}, expected {FORMAT_VERSION!r}")
    cfg.out = cfg.get("experiment", "out", str, "runs/latest")
    return cfg


def _section_line(text: str, section: str) -> Optional[int]:
    for number, line in enumerate(text.splitlines(), start=1):
        if line.strip() == f"[{section}]":
            return number
    return None


def expand_columns(schema: str, dim: int) -> List[str]:
    cols = []
    for col in SCHEMAS[schema]:
        if col == "{state}":
            cols += [f"x_{i + 1}" for i in range(dim)] + [f"v_{i + 1}" for i in range(dim)]
        else:
            cols.append(col)
    return cols


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Append rows, writing the header for a new file and checking it otherwise."""
    header = list(header)
    if os.path.exists(path) and os.path.getsize(path) > 0:
        with open(path, encoding="utf-8", newline="") as fh:
            existing = next(csv.reader(fh), [])
        if existing != header:
            raise SchemaError(f"{path}: header {existing} does not match schema {header}")
        mode = "a"
    else:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        mode = "w"
    with open(path, mode, encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if mode == "w":
            writer.writerow(header)
        writer.writerows(rows)


def write_schema_csv(out: str, schema: str, rows: Iterable[Sequence], dim: int = 1) -> str:
    path = os.path.join(out, f"{schema}.csv")
    write_csv(path, expand_columns(schema, dim), rows)
    return path


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.ndarray):
        return " ".join(repr(float(v)) for v in value)
    return str(value)


def record_constants(out: str, rows: Iterable[Tuple[str, object, str, str]]) -> None:
    write_schema_csv(out, "constants", [(k, _fmt(v), prov, status) for k, v, prov, status in rows])


def _run_simulate(cfg: ExperimentConfig) -> int:
    p = cfg.potential()
    sim = cfg.sim()
    law = certify.InitialLaw.parse(cfg.get("simulate", "z0", str, "point:" + ",".join(["1"] + ["0"] * (2 * p.dim - 1))), p.dim)
    times = cfg.floats("simulate", "record_times", [0.0, sim.t_final])
    with_jac = cfg.get("simulate", "include_jacobian", _parse_bool, False)
    Z0 = law.sample(sim.n_paths, block_rng(sim.master_seed, 50, 0))
    ens = simulate_ensemble(Z0, p, sim, times, record_jacobian=with_jac)
    write_csv(os.path.join(cfg.out, "ensemble.csv"), ens.csv_header(with_jac), ens.csv_rows(with_jac))
    record_constants(cfg.out, [("n_paths", sim.n_paths, Provenance.CONFIGURED, "ok"),
                               ("dt", sim.dt, Provenance.CONFIGURED, "ok")])
    return ExitCode.OK


def _run_lyapunov(cfg: ExperimentConfig) -> int:
    p = cfg.potential()
    sim = cfg.sim()
    lp = derive_params(p)
    grid = default_z_grid(p.dim, cfg.get("lyapunov", "radius", float, 3.0), cfg.get("lyapunov", "grid", int, 5))
    failed = inconclusive = False
    for t in cfg.floats("lyapunov", "times", (0.25, 0.5, 1.0)):
        rep = verify_drift(p, lp, t, grid, sim)
        write_schema_csv(cfg.out, "drift", [
            [_fmt(t)] + [_fmt(c) for c in np.concatenate([r.x, r.v])]
            + [_fmt(r.lhs_estimate), _fmt(r.lhs_ucb), _fmt(r.rhs), _fmt(r.slack), _fmt(r.passed)]
            for r in rep.rows], p.dim)
        inconclusive |= rep.inconclusive
        failed |= any(not r.passed and not r.inconclusive for r in rep.rows)
        status = "pass" if rep.passed else ("fallback" if rep.fallback_passed else "fail")
        record_constants(cfg.out, [(f"drift_form_t={t:g}", rep.tightest_form or "none", Provenance.MEASURED, status)])
    record_constants(cfg.out, [
        ("beta", lp.beta, Provenance.DERIVED, "ok"), ("a_upper", lp.a_upper, Provenance.DERIVED, "ok"),
        ("a_star", lp.a_star, Provenance.DERIVED, "ok"), ("kappa", lp.kappa, Provenance.DERIVED, "ok"),
        ("C_kappa", lp.c_kappa, Provenance.DERIVED, "ok"),
    ])
    if failed:
        return ExitCode.FAILED
    return ExitCode.INCONCLUSIVE if inconclusive else ExitCode.OK


def _run_gradient(cfg: ExperimentConfig) -> int:
    p = cfg.potential()
    sim = cfg.sim()
    grid = default_z_grid(p.dim, cfg.get("gradient", "radius", float, 1.0), cfg.get("gradient", "grid", int, 3))
    fns = [QuadraticObservable.linear(np.eye(2 * p.dim)[i]) for i in range(2 * p.dim)]
    rng = block_rng(sim.master_seed, 900, 0)
    fns += [QuadraticObservable.random(rng, p.dim, 0.5)
            for _ in range(cfg.get("gradient", "random_observables", int, 2))]
    passed = True
    for t in cfg.floats("gradient", "times", (0.5, 1.0, 2.0, 10.0)):
        rep = verify_gradient_bound(p, t, fns, grid, sim)
        passed &= rep.passed
        write_schema_csv(cfg.out, "gradient", [
            [_fmt(t)] + [_fmt(c) for c in r.z] + [r.fn_index, _fmt(r.lhs), _fmt(r.rhs), _fmt(r.se),
                                                  _fmt(r.margin), _fmt(r.passed)]
            for r in rep.rows], p.dim)
    record_constants(cfg.out, [("C_M", c_m(p.M), Provenance.DERIVED, "pass" if passed else "fail")])
    return ExitCode.OK if passed else ExitCode.FAILED


def _metric_params(cfg: ExperimentConfig, p) -> MetricParams:
    try:
        return MetricParams(lp=derive_params(p), p=p, **cfg.metric_values())
    except InvalidArgumentError as err:
        raise ConfigError(str(err), field="metric")


def _run_coupling(cfg: ExperimentConfig) -> int:
    p = cfg.potential()
    sim = cfg.sim()
    mp = _metric_params(cfg, p)
    R = cfg.get("coupling", "R", float, 2.0)
    delta = cfg.get("coupling", "delta", float, 0.5)
    t = cfg.get("coupling", "t", float, 1.0)
    pairing = cfg.get("coupling", "pairing", str, Pairing.INDEPENDENT)
    sim = sim.replace(n_paths=cfg.get("coupling", "n_pairs", int, sim.n_paths))
    # Pairs start at most R apart.
    anchors = certify.coupling_anchors(p.dim, R / 2.0)
    rows, lows, inconclusive = [], [], False
    for i, z1 in enumerate(anchors):
        for j, z2 in enumerate(anchors):
            est = coupling_probability(p, z1, z2, t, delta, sim, mp, R=R * (1 + 1e-9),
                                       pairing=pairing, stream=700 + 2 * (3 * i + j))
            ref = alpha_reference_bound(t, delta, R)
            inconclusive |= est.inconclusive
            lows.append(min(est.ci_lo, est.rho_ci_lo))
            rows.append([_fmt(t), _fmt(est.z1), _fmt(est.z2), _fmt(delta), est.n, _fmt(est.p_hat),
                         _fmt(est.ci_lo), _fmt(est.ci_hi), _fmt(est.rho_p_hat), _fmt(est.rho_ci_lo),
                         _fmt(est.rho_ci_hi), _fmt(ref), "inconclusive" if est.inconclusive else "ok"])
    write_schema_csv(cfg.out, "coupling", rows)
    status = "inconclusive" if inconclusive else "ok"
    record_constants(cfg.out, [("a_coupling", min(lows), Provenance.MEASURED, status),
                               ("delta", delta, Provenance.CONFIGURED, "ok")])
    return ExitCode.INCONCLUSIVE if inconclusive else ExitCode.OK


def _decay(cfg: ExperimentConfig, p, sim, mp=None) -> certify.DecayCurve:
    law_a = certify.InitialLaw.parse(cfg.get("rate", "law_a", str, "point:3,0"), p.dim)
    law_b = certify.InitialLaw.parse(cfg.get("rate", "law_b", str, "point:-3,0"), p.dim)
    t_grid = cfg.floats("rate", "t_grid", np.linspace(0.0, 8.0, 17))
    sim = sim.replace(n_paths=cfg.get("rate", "n", int, min(sim.n_paths, 4096)))
    curve = certify.measure_decay(p, law_a, law_b, t_grid, sim, mp, cfg.get("rate", "rho_n", int, 256))
    rows = [[_fmt(t), _fmt(w), _fmt(f), _fmt(curve.w1_rho[k]) if curve.w1_rho is not None else ""]
            for k, (t, w, f) in enumerate(zip(curve.t, curve.w1, curve.floor))]
    write_schema_csv(cfg.out, "decay", rows)
    status = "inconclusive" if curve.inconclusive else "ok"
    record_constants(cfg.out, [("lambda_hat", curve.lambda_hat, Provenance.MEASURED, status),
                               ("lambda_hat_ci", curve.ci, Provenance.MEASURED, status)])
    return curve


def _run_rate(cfg: ExperimentConfig) -> int:
    p = cfg.potential()
    sim = cfg.sim()
    mp = _metric_params(cfg, p) if cfg.get("rate", "weighted", _parse_bool, False) else None
    curve = _decay(cfg, p, sim, mp)
    return ExitCode.INCONCLUSIVE if curve.inconclusive else ExitCode.OK


def certify_config(cfg: ExperimentConfig) -> certify.CertifyConfig:
    m = cfg.metric_values()
    return certify.CertifyConfig(
        r=m["r"], delta=m["delta"], beta_w=m["beta_w"],
        alpha_target=cfg.get("certify", "alpha_target", float, 0.5),
        hypothesis_radius=cfg.get("certify", "hypothesis_radius", float, 20.0),
        drift_times=tuple(cfg.floats("lyapunov", "times", (0.25, 0.5, 1.0))),
        drift_radius=cfg.get("lyapunov", "radius", float, 3.0),
        drift_grid=cfg.get("lyapunov", "grid", int, 5),
        gradient_times=tuple(cfg.floats("certify", "gradient_times", (1.0,))),
        n_random_observables=cfg.get("gradient", "random_observables", int, 2),
        coupling_pairs=cfg.get("certify", "coupling_pairs", int, 20000),
        pairing=cfg.get("certify", "pairing", str, Pairing.ALL_PAIRS),
        drift_fallback=cfg.get("certify", "drift_fallback", _parse_bool, True),
        t_cert=cfg.get("certify", "t_cert", float),
    )


def write_certificate(path: str, cert: certify.HarrisCertificate, extra: Sequence[Tuple[str, object]] = ()):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"format_version={FORMAT_VERSION}\n")
        for key, value, _ in cert.items():
            fh.write(f"{key}={_fmt(value)}\n")
        for key, value in extra:
            fh.write(f"{key}={_fmt(value)}\n")


def read_certificate(path: str) -> Dict[str, str]:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            key, sep, value = line.strip().partition("=")
            if sep:
                values[key] = value
    return values


def _run_certify(cfg: ExperimentConfig) -> int:
    p = cfg.potential()
    sim = cfg.sim()
    cert = certify.assemble(p, sim, certify_config(cfg))
    extra = []
    if cfg.parser.has_section("rate"):
        curve = _decay(cfg, p, sim, None)
        if not curve.inconclusive:
            sound = cert.lambda_final <= curve.lambda_hat + curve.ci
            extra = [("lambda_hat", curve.lambda_hat), ("lambda_hat_ci", curve.ci), ("soundness", sound)]
    write_certificate(os.path.join(cfg.out, "certificate.txt"), cert, extra)
    flagged = {"drift_fallback": "fallback", "mid_degenerate": "degenerate"}
    record_constants(cfg.out, [(k, v, prov, flagged[k] if k in flagged and v else "ok")
                               for k, v, prov in cert.items()])
    write_schema_csv(cfg.out, "coupling", [
        [_fmt(est.t), _fmt(est.z1), _fmt(est.z2), _fmt(est.delta), est.n, _fmt(est.p_hat), _fmt(est.ci_lo),
         _fmt(est.ci_hi), _fmt(est.rho_p_hat), _fmt(est.rho_ci_lo), _fmt(est.rho_ci_hi), "",
         "inconclusive" if est.inconclusive else "ok"] for est in cert.coupling])
    return ExitCode.OK if cert.lambda_final > 0 else ExitCode.FAILED


def selftest_checks() -> List[Tuple[str, bool]]:
    """Tautological checks that need no sampling."""
    q1 = make_quadratic(1)
    origin = PhaseState.origin(1)
    lp = derive_params(q1)
    mp = MetricParams(lp=lp, p=q1)
    a, b = np.array([[0.0, 0.0], [1.0, 2.0]]), np.array([[0.0, 0.0], [1.0, 2.0]])
    checks = [
        ("quadratic minimum at origin", float(q1.eval(np.zeros((1, 1)))[0]) == 0.0),
        ("step keeps the origin fixed", np.all(step(origin, q1, 0.01, [0.0]).as_vector() == 0.0)),
        ("zero tangent step is identity", np.array_equal(step_tangent(TangentFlow.identity(1), [0.0], q1, 0.0).J, np.eye(2))),
        ("commutator direction (1, -1)", np.allclose(commutator_direction(q1, origin), [1.0, -1.0])),
        ("gamma of x is 2", math.isclose(gamma(QuadraticObservable.linear([1, 0]), QuadraticObservable.linear([1, 0]), origin), 2.0)),
        ("C_M at M=1 is 23", c_m(1.0) == 23.0),
        ("W1 of identical samples is 0", wasserstein1(a, b) == 0.0),
        ("1D W1 of {0},{1} is 1", wasserstein1_1d_euclidean([0.0], [1.0]) == 1.0),
        ("small-region factor is 3/4",
         certify.small_region_factor(23.0, mp, certify.small_region_threshold(lp, mp.r)).factor == 0.75),
        ("alpha bound vanishes as t -> 0", alpha_reference_bound(1e-3, 0.5, 2.0) == 0.0),
        ("mid factor for a = 0.2 is 0.95", math.isclose(math.exp(math.log1p(-0.2 / 4)), 0.95)),
    ]
    return [(name, bool(ok)) for name, ok in checks]


def _run_selftest(cfg: ExperimentConfig) -> int:
    checks = selftest_checks()
    write_schema_csv(cfg.out, "selftest", [(name, _fmt(ok)) for name, ok in checks])
    for name, ok in checks:
        logger.info("selftest %-40s %s", name, "ok" if ok else "FAILED")
    return ExitCode.OK if all(ok for _, ok in checks) else ExitCode.FAILED


RUNNERS: Dict[str, Callable[[ExperimentConfig], int]] = {
    "simulate": _run_simulate,
    "lyapunov": _run_lyapunov,
    "gradient": _run_gradient,
    "coupling": _run_coupling,
    "rate": _run_rate,
    "certify": _run_certify,
    "selftest": _run_selftest,
}


def write_manifest(cfg: ExperimentConfig, subcommand: str, code: int, wall_time: float) -> str:
    """Echo the effective config plus run metadata; loadable as a config."""
    manifest = configparser.ConfigParser(interpolation=None)
    manifest.read_dict({s: dict(cfg.parser.items(s)) for s in cfg.parser.sections() if s != "manifest"})
    manifest["manifest"] = {
        "subcommand": subcommand,
        "seed": cfg.get("simulation", "seed", str, "0"),
        "tool_version": TOOL_VERSION,
        "wall_time_s": f"{wall_time:.3f}",
        "exit_code": str(code),
    }
    path = os.path.join(cfg.out, "manifest.cfg")
    os.makedirs(cfg.out, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        manifest.write(fh)
    return path


def run(subcommand: str, config_path: Optional[str] = None, overrides: Sequence[str] = (),
        seed: Optional[int] = None, out: Optional[str] = None) -> int:
    """Execute one subcommand and return its exit code."""
    if subcommand not in RUNNERS:
        logger.error("unknown subcommand %r (choose from %s)", subcommand, ", ".join(SUBCOMMANDS))
        return ExitCode.USAGE
    try:
        cfg = load_config(config_path, overrides, seed, out)
    except ConfigError as err:
        logger.error("config error: %s", err)
        return ExitCode.USAGE

    start = time.perf_counter()
    try:
        code = RUNNERS[subcommand](cfg)
    except ConfigError as err:
        logger.error("config error: %s", err)
        return ExitCode.USAGE
    except InconclusiveError as err:
        logger.warning("certificate stage '%s' inconclusive: %s", err.stage, err)
        record_constants(cfg.out, [(f"stage_{err.stage}", err.constant or "", Provenance.MEASURED, "inconclusive")])
        code = ExitCode.INCONCLUSIVE
    except CertificateError as err:
        logger.error("certificate stage '%s' failed: %s", err.stage, err)
        record_constants(cfg.out, [(f"stage_{err.stage}", err.constant or "", Provenance.MEASURED, "failed")])
        code = ExitCode.FAILED
    except NumericalBlowupError as err:
        logger.error("numerical blowup on path %s at t=%s: %s", err.path_index, err.time, err)
        code = ExitCode.FAILED
    except (InvalidArgumentError, SchemaError) as err:
        logger.error("%s", err)
        return ExitCode.USAGE
    except HypocertError as err:
        logger.error("%s failed: %s", subcommand, err)
        code = ExitCode.FAILED
    write_manifest(cfg, subcommand, code, time.perf_counter() - start)
    return code


def emit_report(out_dir: str) -> str:
    """Summary table of the constants recorded in out_dir, with provenance."""
    path = os.path.join(out_dir, "constants.csv")
    if not os.path.exists(path):
        return "no artifacts"
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return "no artifacts"
    cert_path = os.path.join(out_dir, "certificate.txt")
    if os.path.exists(cert_path):
        cert = read_certificate(cert_path)
        seen = {r["constant"] for r in rows}
        for key in ("lambda_hat", "soundness"):
            if key in cert and key not in seen:
                rows.append({"constant": key, "value": cert[key], "provenance": Provenance.MEASURED, "status": "ok"})
    widths = [max(len(h), *(len(r[h]) for r in rows)) for h in SCHEMAS["constants"]]
    lines = ["  ".join(h.ljust(w) for h, w in zip(SCHEMAS["constants"], widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(r[h].ljust(w) for h, w in zip(SCHEMAS["constants"], widths)))
    return "\n".join(lines)

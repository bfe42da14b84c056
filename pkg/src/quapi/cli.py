"""Command-line front end: run, oracle, spectrum, eta, sweep."""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bath as _bath
from . import distributed as _distributed
from . import engine as _engine
from . import oracle as _oracle
from . import system as _system
from .config import ConfigError, parse_config_file
from .pathstore import dense_mask, full_mask

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _load(path, eta_cache=None):
    return parse_config_file(path, eta_cache=eta_cache)


def _run_trajectory(spec, options):
    if options.workers > 1:
        return _distributed.run_distributed(spec, options.workers, options.backend)
    return _engine.run(spec)


def _population_series(parsed, trajectory):
    """Observable P(t): sigma_z difference, traced over vibrational states
    for reaction-coordinate systems."""
    sys_sec = parsed.sections.get("system", {})
    if "rc_nvib" in sys_sec:
        op = _system.sigma_z_observable(int(sys_sec["rc_nvib"]))
    else:
        m = parsed.spec.system.m
        op = np.diag([1.0, -1.0] + [0.0] * (m - 2)).astype(complex)
    return _engine.expectation(trajectory, op)


def cmd_run(args):
    parsed = _load(args.config)
    options = parsed.options
    if args.workers is not None:
        options.workers = args.workers
    if args.backend is not None:
        options.backend = args.backend
    if args.out is not None:
        options.output_dir = args.out
    spec = parsed.spec
    traj = _run_trajectory(spec, options)
    if not np.all(np.isfinite(traj.rho.view(float))):
        print("error: propagation produced non-finite density matrices", file=sys.stderr)
        return EXIT_NUMERICAL
    outdir = Path(options.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "trajectory.csv", "w") as fh:
        _engine.write_trajectory_csv(traj, fh)
    with open(outdir / "telemetry.csv", "w") as fh:
        _engine.write_telemetry_csv(traj, fh)
    if args.spectrum:
        p = _population_series(parsed, traj)
        om, s = _engine.spectrum(p, spec.dt)
        with open(outdir / "spectrum.csv", "w") as fh:
            _engine.write_spectrum_csv(om, s, fh)
    print(f"wrote {outdir}/trajectory.csv ({spec.n_steps + 1} rows, "
          f"{traj.path_counts.max()} peak configurations)")
    return EXIT_OK


def cmd_oracle(args):
    parsed = _load(args.config)
    spec = parsed.spec
    try:
        reference = _oracle.direct_path_sum(spec.system, spec.eta, spec.rho0,
                                            spec.n_steps)
    except _oracle.OracleLimitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    traj = _engine.run(spec)
    dev = float(np.max(np.abs(traj.rho[-1] - reference)))
    print(f"max |engine - direct path sum| at step {spec.n_steps}: {dev:.3e}")
    return EXIT_OK if np.isfinite(dev) else EXIT_NUMERICAL


def cmd_spectrum(args):
    with open(args.traj) as fh:
        traj = _engine.read_trajectory_csv(fh)
    dt = float(traj.times[1] - traj.times[0])
    if args.config:
        parsed = _load(args.config)
        p = _population_series(parsed, traj)
    else:
        p = np.real(traj.rho[:, 0, 0] - traj.rho[:, 1, 1])
    om, s = _engine.spectrum(p, dt)
    out = Path(args.out) if args.out else Path(args.traj).with_name("spectrum.csv")
    with open(out, "w") as fh:
        _engine.write_spectrum_csv(om, s, fh)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eta(args):
    parsed = _load(args.config)
    eta = parsed.spec.eta
    sd, kbt = _bath_from_sections(parsed)
    _bath.write_eta_table(args.out, eta, _bath.sd_content_hash(sd))
    print(f"wrote {args.out} (dk_max={eta.dk_max}, dt={eta.dt:g})")
    return EXIT_OK


def _bath_from_sections(parsed):
    from .config import _build_bath
    raw = {s: {k: (v, None) for k, v in kv.items()} for s, kv in parsed.sections.items()}
    return _build_bath(raw)


def _sweep_values(raw):
    return [v.strip() for v in raw.split(",") if v.strip()]


def cmd_sweep(args):
    parsed = _load(args.config)
    base = parsed.spec
    param = args.param
    values = _sweep_values(args.values)

    def spec_for(value):
        if param == "theta":
            return replace(base, theta=float(value)), None
        if param == "dk_max":
            dk = int(value)
            sd, kbt = _bath_from_sections(parsed)
            eta = _bath.compute_eta_table(sd, kbt, base.dt, dk,
                                          cache_dir=os.environ.get("QUAPI_ETA_CACHE"))
            mask = base.mask
            if max(mask.lags) > dk:
                mask = full_mask(dk)
            return replace(base, eta=eta, mask=mask), None
        if param == "dk_eff":
            return replace(base, mask=dense_mask(int(value), base.dk_max)), None
        if param == "n_vib":
            sys_sec = dict(parsed.sections["system"])
            if "rc_nvib" not in sys_sec:
                raise ConfigError("n_vib sweeps need an rc_* system")
            sd, kbt = _bath_from_sections(parsed)
            rc = _system.RCModelSpec(delta=float(sys_sec["rc_delta"]),
                                     omega=float(sys_sec["rc_omega"]),
                                     g=float(sys_sec["rc_g"]) if "rc_g" in sys_sec
                                     else _system.map_structured_to_rc(
                                         float(sys_sec["rc_alpha"]),
                                         float(sys_sec["rc_omega"]),
                                         float(sys_sec["rc_kappa"])),
                                     n_vib=int(value))
            model = _system.build_reaction_coordinate_model(rc, base.dt, sd)
            rho0 = _system.tls_up_vib_ground_density(rc.n_vib)
            return replace(base, system=model, rho0=rho0), rc
        raise ConfigError(f"unknown sweep parameter `{param}`")

    ref_spec, _ = spec_for(args.reference)
    ref_traj = _run_trajectory(ref_spec, parsed.options)
    rows = []
    for value in values:
        spec, _ = spec_for(value)
        traj = _run_trajectory(spec, parsed.options)
        k = min(traj.rho.shape[1], ref_traj.rho.shape[1])
        dev = float(np.max(np.abs(traj.rho[:, :k, :k] - ref_traj.rho[:, :k, :k])))
        rows.append((value, dev))
        print(f"{param}={value}: max deviation from reference {dev:.6g}")
    out = Path(args.out) if args.out else Path("sweep.csv")
    with open(out, "w") as fh:
        fh.write(f"{param},max_abs_deviation\n")
        for value, dev in rows:
            fh.write(f"{value},{dev:.17g}\n")
    print(f"wrote {out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="quapi",
                                     description="Path-integral propagation of open quantum systems "
                                                 "with masked path merging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="propagate and write trajectory/telemetry CSVs")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--workers", type=int, default=None)
    p_run.add_argument("--backend", choices=("thread", "process"), default=None)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--spectrum", action="store_true",
                       help="also write spectrum.csv of the population difference")
    p_run.set_defaults(func=cmd_run)

    p_or = sub.add_parser("oracle", help="compare the engine against the direct path sum")
    p_or.add_argument("--config", required=True)
    p_or.set_defaults(func=cmd_oracle)

    p_sp = sub.add_parser("spectrum", help="spectrum of a stored trajectory")
    p_sp.add_argument("--traj", required=True)
    p_sp.add_argument("--config", default=None,
                      help="rebuild the observable from a config (needed for rc systems)")
    p_sp.add_argument("--out", default=None)
    p_sp.set_defaults(func=cmd_spectrum)

    p_eta = sub.add_parser("eta", help="precompute the influence-coefficient sidecar")
    p_eta.add_argument("--config", required=True)
    p_eta.add_argument("--out", required=True)
    p_eta.set_defaults(func=cmd_eta)

    p_sw = sub.add_parser("sweep", help="convergence sweep of one parameter")
    p_sw.add_argument("--config", required=True)
    p_sw.add_argument("--param", required=True,
                      choices=("dk_max", "dk_eff", "n_vib", "theta"))
    p_sw.add_argument("--values", required=True, help="comma list of trial values")
    p_sw.add_argument("--reference", required=True, help="reference parameter value")
    p_sw.add_argument("--out", default=None)
    p_sw.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (_bath.QuadratureError, _oracle.OracleLimitError, RuntimeError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def console_main():
    raise SystemExit(main())

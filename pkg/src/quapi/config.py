"""INI-style run configuration: parsing, validation, assembly into a RunSpec."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bath as _bath
from . import system as _system
from .engine import RunSpec
from .pathstore import Mask, dense_mask, full_mask

__all__ = ["ConfigError", "RunOptions", "ParsedConfig", "parse_config",
           "parse_config_file", "emit_config"]


class ConfigError(ValueError):
    """Configuration problem, annotated with the offending line number."""

    def __init__(self, message, line=None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
        self.line = line


@dataclass
class RunOptions:
    workers: int = 1
    backend: str = "thread"
    output_dir: str = "out"
    deterministic: bool = True


@dataclass
class ParsedConfig:
    spec: RunSpec
    options: RunOptions
    sections: dict = field(default_factory=dict)


_KNOWN_KEYS = {
    "system": {"hamiltonian", "coordinates", "initial_state", "rc_delta",
               "rc_omega", "rc_g", "rc_alpha", "rc_kappa", "rc_nvib", "rc_epsilon"},
    "bath": {"variant", "gamma", "kappa", "omega_c", "alpha", "omega", "file", "kbt"},
    "propagation": {"dt", "n_steps", "dk_max", "mask", "theta", "mode"},
    "run": {"workers", "backend", "output_dir", "deterministic"},
}
_REQUIRED_SECTIONS = ("system", "bath", "propagation")


def _parse_sections(text):
    """Flat `key = value` lines grouped by [section]; returns
    {section: {key: (value, line_no)}}."""
    sections = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip().lower()
            if name not in _KNOWN_KEYS:
                raise ConfigError(f"unknown section [{name}]", lineno)
            current = sections.setdefault(name, {})
            continue
        if "=" not in line:
            raise ConfigError("expected `key = value`", lineno)
        if current is None:
            raise ConfigError("key outside of any [section]", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.lower()
        section_name = [s for s, d in sections.items() if d is current][0]
        if key not in _KNOWN_KEYS[section_name]:
            raise ConfigError(f"unknown key `{key}` in [{section_name}]", lineno)
        if key in current:
            raise ConfigError(f"duplicate key `{key}`", lineno)
        current[key] = (value, lineno)
    return sections


def _get(sections, section, key, default=None, required=False):
    entry = sections.get(section, {}).get(key)
    if entry is None:
        if required:
            raise ConfigError(f"missing `{key}` in [{section}]")
        return default, None
    return entry


def _as_float(value, line, key):
    try:
        out = float(value)
    except ValueError:
        raise ConfigError(f"`{key}` is not a number: {value!r}", line) from None
    if not np.isfinite(out):
        raise ConfigError(f"`{key}` must be finite", line)
    return out


def _as_int(value, line, key):
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"`{key}` is not an integer: {value!r}", line) from None


def _as_bool(value, line, key):
    lowered = value.strip().lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ConfigError(f"`{key}` is not a boolean: {value!r}", line)


def _as_float_list(value, line, key):
    try:
        return [float(x) for x in value.split(",") if x.strip() != ""]
    except ValueError:
        raise ConfigError(f"`{key}` is not a comma list of numbers: {value!r}", line) from None


def _build_bath(sections):
    variant, vline = _get(sections, "bath", "variant", required=True)
    kbt_raw, kline = _get(sections, "bath", "kbt", required=True)
    kbt = _as_float(kbt_raw, kline, "kbt")
    if kbt <= 0:
        raise ConfigError("`kbt` must be positive", kline)
    variant = variant.lower()
    if variant == "ohmic":
        wc_raw, wline = _get(sections, "bath", "omega_c", required=True)
        wc = _as_float(wc_raw, wline, "omega_c")
        gam_raw, gline = _get(sections, "bath", "gamma")
        kap_raw, kline2 = _get(sections, "bath", "kappa")
        if (gam_raw is None) == (kap_raw is None):
            raise ConfigError("ohmic bath needs exactly one of `gamma` or `kappa`", wline)
        if gam_raw is not None:
            gamma = _as_float(gam_raw, gline, "gamma")
        else:
            gamma = np.pi * _as_float(kap_raw, kline2, "kappa")
        return _bath.OhmicSD(gamma=gamma, omega_c=wc), kbt
    if variant == "structured":
        alpha, al = _get(sections, "bath", "alpha", required=True)
        omega, ol = _get(sections, "bath", "omega", required=True)
        kappa, kl = _get(sections, "bath", "kappa", required=True)
        return _bath.StructuredPeakSD(alpha=_as_float(alpha, al, "alpha"),
                                      omega0=_as_float(omega, ol, "omega"),
                                      kappa=_as_float(kappa, kl, "kappa")), kbt
    if variant == "tabulated":
        fname, fl = _get(sections, "bath", "file", required=True)
        path = Path(fname)
        if not path.is_file():
            raise ConfigError(f"tabulated bath file not found: {fname}", fl)
        data = np.genfromtxt(path, delimiter=",", names=True)
        try:
            omega, j = data["omega"], data["J"]
        except (KeyError, ValueError):
            raise ConfigError("tabulated file needs `omega,J` columns", fl) from None
        return _bath.TabulatedSD(omega=omega, j=j), kbt
    raise ConfigError(f"unknown bath variant `{variant}`", vline)


def _build_system(sections, sd, dt):
    sys_sec = sections.get("system", {})
    has_explicit = "hamiltonian" in sys_sec
    has_rc = any(k.startswith("rc_") for k in sys_sec)
    if has_explicit == has_rc:
        raise ConfigError("[system] needs either `hamiltonian`+`coordinates` or rc_* keys")
    if has_explicit:
        ham_raw, hline = _get(sections, "system", "hamiltonian", required=True)
        coords_raw, cline = _get(sections, "system", "coordinates", required=True)
        vals = _as_float_list(ham_raw, hline, "hamiltonian")
        if len(vals) % 2 != 0:
            raise ConfigError("`hamiltonian` must list re,im pairs", hline)
        flat = np.array(vals[0::2]) + 1j * np.array(vals[1::2])
        m = int(round(np.sqrt(flat.size)))
        if m * m != flat.size:
            raise ConfigError("`hamiltonian` must be a square row-major matrix", hline)
        coords = np.array(_as_float_list(coords_raw, cline, "coordinates"))
        if coords.size != m:
            raise ConfigError("`coordinates` length must match the Hamiltonian", cline)
        try:
            model = _system.build_system_model(flat.reshape(m, m), coords, sd, dt)
        except ValueError as exc:
            raise ConfigError(str(exc), hline) from None
        return model, None
    delta, dl = _get(sections, "system", "rc_delta", required=True)
    omega, ol = _get(sections, "system", "rc_omega", required=True)
    nvib, nl = _get(sections, "system", "rc_nvib", required=True)
    kappa_raw, kl = _get(sections, "system", "rc_kappa")
    g_raw, gl = _get(sections, "system", "rc_g")
    alpha_raw, al = _get(sections, "system", "rc_alpha")
    eps_raw, el = _get(sections, "system", "rc_epsilon")
    delta = _as_float(delta, dl, "rc_delta")
    omega = _as_float(omega, ol, "rc_omega")
    if (g_raw is None) == (alpha_raw is None):
        raise ConfigError("[system] rc model needs exactly one of `rc_g` or `rc_alpha`")
    if g_raw is not None:
        g = _as_float(g_raw, gl, "rc_g")
    else:
        if kappa_raw is None:
            raise ConfigError("`rc_alpha` needs `rc_kappa` for the coupling map", al)
        g = _system.map_structured_to_rc(_as_float(alpha_raw, al, "rc_alpha"),
                                         omega, _as_float(kappa_raw, kl, "rc_kappa"))
    rc = _system.RCModelSpec(delta=delta, omega=omega, g=g,
                             n_vib=_as_int(nvib, nl, "rc_nvib"),
                             epsilon=_as_float(eps_raw, el, "rc_epsilon") if eps_raw else 0.0)
    return _system.build_reaction_coordinate_model(rc, dt, sd), rc


def _build_rho0(sections, model, rc):
    raw, line = _get(sections, "system", "initial_state")
    m = model.m
    if raw is None:
        if rc is not None:
            return _system.tls_up_vib_ground_density(rc.n_vib)
        rho0 = np.zeros((m, m), dtype=complex)
        rho0[0, 0] = 1.0
        return rho0
    raw = raw.strip()
    if raw.startswith("state:"):
        k = _as_int(raw[len("state:"):], line, "initial_state")
        if not 0 <= k < m:
            raise ConfigError(f"initial state index out of range 0..{m - 1}", line)
        rho0 = np.zeros((m, m), dtype=complex)
        rho0[k, k] = 1.0
        return rho0
    if raw.startswith("matrix:"):
        vals = _as_float_list(raw[len("matrix:"):], line, "initial_state")
        if len(vals) != 2 * m * m:
            raise ConfigError(f"initial_state matrix needs {2 * m * m} numbers", line)
        return (np.array(vals[0::2]) + 1j * np.array(vals[1::2])).reshape(m, m)
    if raw == "tls_up" and rc is not None:
        return _system.tls_up_vib_ground_density(rc.n_vib)
    raise ConfigError(f"unrecognized initial_state {raw!r}", line)


def _build_mask(sections, dk_max):
    raw, line = _get(sections, "propagation", "mask", default="full")
    raw = raw.strip().lower()
    if raw == "full":
        return full_mask(dk_max)
    if raw.startswith("dense:"):
        size = _as_int(raw[len("dense:"):], line, "mask")
        try:
            return dense_mask(size, dk_max)
        except ValueError as exc:
            raise ConfigError(str(exc), line) from None
    lags = [_as_int(x, line, "mask") for x in raw.split(",") if x.strip()]
    try:
        return Mask(lags)
    except ValueError as exc:
        raise ConfigError(str(exc), line) from None


def parse_config(text, eta_cache=None):
    """Parse configuration text into a validated RunSpec plus run options."""
    sections = _parse_sections(text)
    for name in _REQUIRED_SECTIONS:
        if name not in sections:
            raise ConfigError(f"missing required section [{name}]")

    dt_raw, dl = _get(sections, "propagation", "dt", required=True)
    dt = _as_float(dt_raw, dl, "dt")
    if dt <= 0:
        raise ConfigError("`dt` must be positive", dl)
    n_raw, nl = _get(sections, "propagation", "n_steps", required=True)
    n_steps = _as_int(n_raw, nl, "n_steps")
    if n_steps < 1:
        raise ConfigError("`n_steps` must be positive", nl)
    dk_raw, kl = _get(sections, "propagation", "dk_max", required=True)
    dk_max = _as_int(dk_raw, kl, "dk_max")
    if dk_max < 1:
        raise ConfigError("`dk_max` must be at least 1", kl)
    theta_raw, tl = _get(sections, "propagation", "theta", default="0")
    theta = _as_float(theta_raw, tl, "theta")
    if theta < 0:
        raise ConfigError("`theta` must be non-negative", tl)
    mode_raw, ml = _get(sections, "propagation", "mode", default="premerge")
    mode = mode_raw.strip().lower()
    if mode not in ("premerge", "postmerge_reference", "full_quapi"):
        raise ConfigError(f"unknown mode `{mode}`", ml)

    sd, kbt = _build_bath(sections)
    model, rc = _build_system(sections, sd, dt)
    rho0 = _build_rho0(sections, model, rc)
    mask = _build_mask(sections, dk_max)

    if eta_cache is None:
        eta_cache = os.environ.get("QUAPI_ETA_CACHE")
    eta = _bath.compute_eta_table(sd, kbt, dt, dk_max, cache_dir=eta_cache)
    try:
        spec = RunSpec(system=model, eta=eta, rho0=rho0, dt=dt, n_steps=n_steps,
                       mask=mask, theta=theta, mode=mode)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    w_raw, wl = _get(sections, "run", "workers", default="1")
    workers = _as_int(w_raw, wl, "workers")
    if workers < 1:
        raise ConfigError("`workers` must be at least 1", wl)
    b_raw, bl = _get(sections, "run", "backend", default="thread")
    backend = b_raw.strip().lower()
    if backend not in ("thread", "process"):
        raise ConfigError(f"backend must be `thread` or `process`", bl)
    out_raw, _ = _get(sections, "run", "output_dir", default="out")
    det_raw, dl2 = _get(sections, "run", "deterministic", default="true")
    options = RunOptions(workers=workers, backend=backend, output_dir=out_raw,
                         deterministic=_as_bool(det_raw, dl2, "deterministic"))
    plain = {s: {k: v for k, (v, _l) in kv.items()} for s, kv in sections.items()}
    return ParsedConfig(spec=spec, options=options, sections=plain)


def parse_config_file(path, eta_cache=None):
    return parse_config(Path(path).read_text(), eta_cache=eta_cache)


def emit_config(parsed):
    """Regenerate configuration text; parse(emit(x)) is equivalent to x."""
    lines = []
    for section in ("system", "bath", "propagation", "run"):
        if section not in parsed.sections:
            continue
        lines.append(f"[{section}]")
        for key, value in parsed.sections[section].items():
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)

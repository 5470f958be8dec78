"""Configuration-driven command line: runs, studies, certificates, particle
experiments.

Subcommands
    run       local | nonlocal-torus | general-domain | kolmogorov scenarios
    study     convergence-study scenario (kernel-width sweep)
    certify   certify scenario (entropy-structure certificate)
    particle  particle scenario (stochastic lattice vs mean field)

Every invocation reads one YAML config, writes its artifacts into the output
directory, and exits 0 exactly when all enabled checks pass.  Identical
config + seed reproduce every artifact byte for byte except the manifest's
wall-time line.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import yaml

from . import backends, diagnostics, particles
from .entropy import (
    SktCoefficients,
    certify_structure,
    default_sample_grid,
    make_skt_structure,
    skt_rates,
)
from .grids import BoxGrid, Field, TorusGrid, save_field_csv, load_field_csv
from .kernels import (
    MOLLIFIER_SHAPES,
    make_domain_kernel,
    make_torus_mollifier,
)
from .solver import Penalisation, SolverError, SystemSpec, run as run_system
from . import solver as _solver

SCENARIOS = (
    "local",
    "nonlocal-torus",
    "general-domain",
    "kolmogorov",
    "particle",
    "convergence-study",
    "certify",
)

COMMAND_SCENARIOS = {
    "run": ("local", "nonlocal-torus", "general-domain", "kolmogorov"),
    "study": ("convergence-study",),
    "certify": ("certify",),
    "particle": ("particle",),
}


class ConfigError(ValueError):
    """Carries every violation found in a config file, not just the first."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("\n".join(self.violations))


@dataclass(frozen=True)
class RunConfig:
    """A validated scenario description with all defaults filled in.

    ``data`` is the plain nested mapping (echoed verbatim into the manifest
    and into config_echo.yaml, from which it reloads to the same config).
    """

    scenario: str
    seed: int
    output: str
    data: dict

    def echo_text(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True, default_flow_style=False)

    def with_overrides(self, output: Optional[str] = None,
                       seed: Optional[int] = None) -> "RunConfig":
        data = dict(self.data)
        new_out = self.output if output is None else str(output)
        new_seed = self.seed if seed is None else int(seed)
        data["output"] = new_out
        data["seed"] = new_seed
        return replace(self, output=new_out, seed=new_seed, data=data)


# ---------------------------------------------------------------------------
# schema validation
# ---------------------------------------------------------------------------

_MISSING = object()


class _Validator:
    def __init__(self):
        self.errors = []

    def error(self, path: str, message: str):
        self.errors.append(f"{path}: {message}")


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _take(v: _Validator, section: dict, path: str, key: str, convert,
          default=_MISSING, check: Optional[Callable] = None):
    full = f"{path}.{key}" if path else key
    if key not in section:
        if default is _MISSING:
            v.error(full, "missing required key")
            return None
        return default
    raw = section.pop(key)
    val = convert(v, full, raw)
    if val is None:
        return None
    if check is not None:
        msg = check(val)
        if msg:
            v.error(full, msg)
            return None
    return val


def _as_float(v, path, raw):
    if not _is_number(raw):
        v.error(path, f"expected a number, got {raw!r}")
        return None
    return float(raw)


def _as_int(v, path, raw):
    if isinstance(raw, bool) or not isinstance(raw, int):
        if _is_number(raw) and float(raw).is_integer():
            return int(raw)
        v.error(path, f"expected an integer, got {raw!r}")
        return None
    return int(raw)


def _as_str(v, path, raw):
    if not isinstance(raw, str):
        v.error(path, f"expected a string, got {raw!r}")
        return None
    return raw


def _choice(options):
    def check(val):
        if val not in options:
            return f"must be one of {', '.join(options)}; got {val!r}"
        return None
    return check


def _float_list(v, path, raw, length=None, predicate=None, what=""):
    if not isinstance(raw, (list, tuple)):
        v.error(path, f"expected a list of numbers, got {raw!r}")
        return None
    out = []
    ok = True
    for k, item in enumerate(raw):
        if not _is_number(item):
            v.error(f"{path}[{k}]", f"expected a number, got {item!r}")
            ok = False
            continue
        item = float(item)
        if predicate is not None and not predicate(item):
            v.error(f"{path}[{k}]", what)
            ok = False
            continue
        out.append(item)
    if not ok:
        return None
    if length is not None and len(out) != length:
        v.error(path, f"expected {length} entries, got {len(out)}")
        return None
    return out


def _int_list(v, path, raw, predicate=None, what=""):
    if not isinstance(raw, (list, tuple)):
        v.error(path, f"expected a list of integers, got {raw!r}")
        return None
    out = []
    ok = True
    for k, item in enumerate(raw):
        val = _as_int(v, f"{path}[{k}]", item)
        if val is None:
            ok = False
            continue
        if predicate is not None and not predicate(val):
            v.error(f"{path}[{k}]", what)
            ok = False
            continue
        out.append(val)
    return out if ok else None


def _section(v: _Validator, parent: dict, path: str, required: bool = True):
    if path not in parent:
        if required:
            v.error(path, "missing required section")
        return None
    raw = parent.pop(path)
    if not isinstance(raw, dict):
        v.error(path, f"expected a mapping, got {raw!r}")
        return None
    return dict(raw)


def _reject_unknown(v: _Validator, section: dict, path: str):
    for key in sorted(section):
        full = f"{path}.{key}" if path else key
        v.error(full, "unknown key")


def _validate_grid(v, parent, periodic_only=False) -> Optional[dict]:
    sec = _section(v, parent, "grid")
    if sec is None:
        return None
    out = {
        "dim": _take(v, sec, "grid", "dim", _as_int, default=1,
                     check=lambda d: None if d in (1, 2) else "must be 1 or 2"),
        "n": _take(v, sec, "grid", "n", _as_int,
                   check=lambda n: None if n >= 4 else "must be at least 4"),
        "length": _take(v, sec, "grid", "length", _as_float, default=1.0,
                        check=lambda L: None if L > 0 else "must be positive"),
    }
    _reject_unknown(v, sec, "grid")
    return out


def _validate_system(v, parent) -> Optional[dict]:
    sec = _section(v, parent, "system")
    if sec is None:
        return None
    species = _take(v, sec, "system", "species", _as_int,
                    check=lambda n: None if n >= 1 else "must be at least 1")
    entropy = _take(v, sec, "system", "entropy", _as_str, default="log",
                    check=_choice(("log",)))
    rates = _section(v, sec, "rates", required=True)
    out = {"species": species, "entropy": entropy}
    if rates is not None:
        family = _take(v, rates, "system.rates", "family", _as_str,
                       check=_choice(("skt",)))
        d = rates.pop("d", _MISSING)
        if d is _MISSING:
            v.error("system.rates.d", "missing required key")
            d = None
        else:
            d = _float_list(v, "system.rates.d", d,
                            length=species,
                            predicate=lambda x: x >= 0,
                            what="must be nonnegative")
        cross_raw = rates.pop("d_cross", _MISSING)
        cross = None
        if cross_raw is _MISSING:
            v.error("system.rates.d_cross", "missing required key")
        elif not isinstance(cross_raw, (list, tuple)) or (
                species is not None and len(cross_raw) != species):
            v.error("system.rates.d_cross",
                    f"expected a {species}x{species} matrix of numbers")
        else:
            cross = []
            for i, row in enumerate(cross_raw):
                vals = _float_list(v, f"system.rates.d_cross[{i}]", row,
                                   length=species,
                                   predicate=lambda x: x >= 0,
                                   what="must be nonnegative")
                if vals is None:
                    cross = None
                    break
                cross.append(vals)
        pi = rates.pop("pi", _MISSING)
        if pi is _MISSING:
            pi = [1.0] * (species or 0)
        else:
            pi = _float_list(v, "system.rates.pi", pi, length=species,
                             predicate=lambda x: x > 0,
                             what="must be positive")
        _reject_unknown(v, rates, "system.rates")
        out["rates"] = {"family": family, "d": d, "d_cross": cross, "pi": pi}
    _reject_unknown(v, sec, "system")
    if any(val is None for val in out.values()) or "rates" not in out:
        return None
    if any(val is None for val in out["rates"].values()):
        return None
    return out


def _validate_time(v, parent) -> Optional[dict]:
    sec = _section(v, parent, "time")
    if sec is None:
        return None
    T = _take(v, sec, "time", "T", _as_float,
              check=lambda x: None if x > 0 else "must be positive")
    dt_default = (T / 1000.0) if T else None
    dt = _take(v, sec, "time", "dt", _as_float, default=dt_default,
               check=lambda x: None if x is None or x > 0 else "must be positive")
    cadence = _take(v, sec, "time", "cadence", _as_int, default=10,
                    check=lambda c: None if c >= 1 else "must be at least 1")
    _reject_unknown(v, sec, "time")
    if T is not None and dt is not None and dt > T:
        v.error("time.dt", "must not exceed time.T")
        return None
    if T is None or dt is None or cadence is None:
        return None
    return {"T": T, "dt": dt, "cadence": cadence}


def _validate_initial(v, parent, species, base_dir: Path) -> Optional[dict]:
    sec = _section(v, parent, "initial")
    if sec is None:
        return None
    kind = _take(v, sec, "initial", "kind", _as_str,
                 check=_choice(("constant", "cosine", "file")))
    out = {"kind": kind}
    ok = kind is not None
    if kind in ("constant", "cosine"):
        vals = sec.pop("values", _MISSING)
        if vals is _MISSING:
            v.error("initial.values", "missing required key")
            ok = False
        else:
            vals = _float_list(v, "initial.values", vals, length=species,
                               predicate=lambda x: x > 0, what="must be positive")
            ok = ok and vals is not None
            out["values"] = vals
    if kind == "cosine":
        amp = sec.pop("amplitude", _MISSING)
        if amp is _MISSING:
            v.error("initial.amplitude", "missing required key")
            ok = False
        else:
            if _is_number(amp):
                amp = [float(amp)] * (species or 0)
            else:
                amp = _float_list(v, "initial.amplitude", amp, length=species)
            out["amplitude"] = amp
            ok = ok and amp is not None
        modes = sec.pop("modes", 1)
        if _is_number(modes) and not isinstance(modes, bool):
            modes = [int(modes)] * (species or 0)
        else:
            modes = _int_list(v, "initial.modes", modes,
                              predicate=lambda m: m >= 1, what="must be at least 1")
            if modes is not None and species is not None and len(modes) != species:
                v.error("initial.modes", f"expected {species} entries")
                modes = None
        out["modes"] = modes
        ok = ok and modes is not None
        if ok and out.get("values") is not None:
            for i, (b, a) in enumerate(zip(out["values"], out["amplitude"])):
                if abs(a) >= b:
                    v.error(f"initial.amplitude[{i}]",
                            "|amplitude| must stay below the base value so the data is positive")
                    ok = False
    if kind == "file":
        paths = sec.pop("paths", _MISSING)
        if paths is _MISSING:
            v.error("initial.paths", "missing required key")
            ok = False
        elif not isinstance(paths, (list, tuple)) or (
                species is not None and len(paths) != species):
            v.error("initial.paths", f"expected {species} file paths")
            ok = False
        else:
            resolved = []
            for k, p in enumerate(paths):
                s = _as_str(v, f"initial.paths[{k}]", p)
                if s is None:
                    ok = False
                    continue
                full = Path(s)
                if not full.is_absolute():
                    full = base_dir / full
                if not full.is_file():
                    v.error(f"initial.paths[{k}]", f"file not found: {full}")
                    ok = False
                resolved.append(str(full))
            out["paths"] = resolved
    _reject_unknown(v, sec, "initial")
    return out if ok else None


def _validate_penalisation(v, parent, species, dim, length) -> Optional[dict]:
    if "penalisation" not in parent:
        return None
    sec = _section(v, parent, "penalisation")
    if sec is None:
        return None
    eps = _take(v, sec, "penalisation", "epsilon", _as_float,
                check=lambda x: None if x > 0 else "must be positive")
    targets = sec.pop("targets", _MISSING)
    if targets is _MISSING:
        v.error("penalisation.targets", "missing required key")
        targets = None
    else:
        targets = _float_list(v, "penalisation.targets", targets, length=species,
                              predicate=lambda x: x >= 0, what="must be nonnegative")
    mask = _section(v, sec, "mask", required=True)
    mask_out = None
    if mask is not None:
        def _axis_bounds(key):
            raw = mask.pop(key, _MISSING)
            if raw is _MISSING:
                v.error(f"penalisation.mask.{key}", "missing required key")
                return None
            if _is_number(raw):
                return [float(raw)] * dim
            return _float_list(v, f"penalisation.mask.{key}", raw, length=dim)

        kind = _take(v, mask, "penalisation.mask", "kind", _as_str, default="box",
                     check=_choice(("box",)))
        lo = _axis_bounds("lo")
        hi = _axis_bounds("hi")
        _reject_unknown(v, mask, "penalisation.mask")
        if kind is not None and lo is not None and hi is not None:
            good = True
            for ax in range(dim):
                if not (0.0 <= lo[ax] < hi[ax] <= length):
                    v.error("penalisation.mask",
                            f"axis {ax}: need 0 <= lo < hi <= {length}")
                    good = False
            if good:
                mask_out = {"kind": kind, "lo": lo, "hi": hi}
    _reject_unknown(v, sec, "penalisation")
    if eps is None or targets is None or mask_out is None:
        return None
    return {"epsilon": eps, "targets": targets, "mask": mask_out}


def _validate_torus_kernel(v, parent) -> Optional[dict]:
    sec = _section(v, parent, "kernel")
    if sec is None:
        return None
    out = {
        "shape": _take(v, sec, "kernel", "shape", _as_str, default="smooth-bump",
                       check=_choice(MOLLIFIER_SHAPES)),
        "width": _take(v, sec, "kernel", "width", _as_float,
                       check=lambda w: None if w > 0 else "must be positive"),
    }
    _reject_unknown(v, sec, "kernel")
    if any(val is None for val in out.values()):
        return None
    return out


def _validate_domain_kernel(v, parent) -> Optional[dict]:
    sec = _section(v, parent, "kernel")
    if sec is None:
        return None
    out = {
        "diag_radius": _take(v, sec, "kernel", "diag_radius", _as_float,
                             check=lambda r: None if r > 0 else "must be positive"),
        "boundary_margin": _take(v, sec, "kernel", "boundary_margin", _as_float,
                                 check=lambda m: None if m > 0 else "must be positive"),
    }
    _reject_unknown(v, sec, "kernel")
    if any(val is None for val in out.values()):
        return None
    return out


def _validate_study(v, parent) -> Optional[dict]:
    sec = _section(v, parent, "study")
    if sec is None:
        return None
    widths = sec.pop("widths", _MISSING)
    if widths is _MISSING:
        v.error("study.widths", "missing required key")
        widths = None
    else:
        widths = _float_list(v, "study.widths", widths,
                             predicate=lambda w: w >= 0, what="must be nonnegative")
        if widths is not None:
            if len(widths) < 2:
                v.error("study.widths", "need at least two widths")
                widths = None
            elif any(b >= a for a, b in zip(widths, widths[1:])):
                v.error("study.widths", "must be strictly decreasing")
                widths = None
    shape = _take(v, sec, "study", "shape", _as_str, default="smooth-bump",
                  check=_choice(MOLLIFIER_SHAPES))
    _reject_unknown(v, sec, "study")
    if widths is None or shape is None:
        return None
    return {"widths": widths, "shape": shape}


def _validate_kolmogorov(v, parent) -> Optional[dict]:
    sec = _section(v, parent, "kolmogorov")
    if sec is None:
        return None
    sizes = sec.pop("sizes", [32, 64, 128])
    sizes = _int_list(v, "kolmogorov.sizes", sizes,
                      predicate=lambda n: n >= 4, what="must be at least 4")
    if sizes is not None and any(b <= a for a, b in zip(sizes, sizes[1:])):
        v.error("kolmogorov.sizes", "must be strictly increasing")
        sizes = None
    T = _take(v, sec, "kolmogorov", "T", _as_float, default=1.0,
              check=lambda x: None if x > 0 else "must be positive")
    dt = _take(v, sec, "kolmogorov", "dt", _as_float,
               default=(T / 100.0 if T else None),
               check=lambda x: None if x is None or x > 0 else "must be positive")
    out = {
        "dim": _take(v, sec, "kolmogorov", "dim", _as_int, default=1,
                     check=lambda d: None if d in (1, 2) else "must be 1 or 2"),
        "length": _take(v, sec, "kolmogorov", "length", _as_float, default=1.0,
                        check=lambda L: None if L > 0 else "must be positive"),
        "sizes": sizes,
        "T": T,
        "dt": dt,
        "trials": _take(v, sec, "kolmogorov", "trials", _as_int, default=200,
                        check=lambda t: None if t >= 1 else "must be at least 1"),
        "dt_min": _take(v, sec, "kolmogorov", "dt_min", _as_float, default=1e-2,
                        check=lambda x: None if x > 0 else "must be positive"),
        "dt_max": _take(v, sec, "kolmogorov", "dt_max", _as_float, default=1e-1,
                        check=lambda x: None if x > 0 else "must be positive"),
        "mu_low": _take(v, sec, "kolmogorov", "mu_low", _as_float, default=0.05,
                        check=lambda x: None if x > 0 else "must be positive"),
        "mu_high": _take(v, sec, "kolmogorov", "mu_high", _as_float, default=3.0,
                         check=lambda x: None if x > 0 else "must be positive"),
        "stability_tolerance": _take(v, sec, "kolmogorov", "stability_tolerance",
                                     _as_float, default=0.2,
                                     check=lambda x: None if x > 0 else "must be positive"),
    }
    _reject_unknown(v, sec, "kolmogorov")
    if any(val is None for val in out.values()):
        return None
    if out["dt_max"] < out["dt_min"]:
        v.error("kolmogorov.dt_max", "must be at least kolmogorov.dt_min")
        return None
    if out["mu_high"] < out["mu_low"]:
        v.error("kolmogorov.mu_high", "must be at least kolmogorov.mu_low")
        return None
    if out["dt"] > out["T"]:
        v.error("kolmogorov.dt", "must not exceed kolmogorov.T")
        return None
    return out


def _validate_profile(v, parent, key, sites) -> Optional[dict]:
    if key not in parent:
        return {"kind": "uniform"}
    sec = _section(v, parent, key)
    if sec is None:
        return None
    kind = _take(v, sec, key, "kind", _as_str,
                 check=_choice(("uniform", "cosine", "values")))
    out = {"kind": kind}
    ok = kind is not None
    if kind == "cosine":
        base = _take(v, sec, key, "base", _as_float, default=1.0,
                     check=lambda x: None if x > 0 else "must be positive")
        amp = _take(v, sec, key, "amplitude", _as_float, default=0.5)
        mode = _take(v, sec, key, "mode", _as_int, default=1,
                     check=lambda m: None if m >= 1 else "must be at least 1")
        out.update({"base": base, "amplitude": amp, "mode": mode})
        ok = ok and None not in (base, amp, mode)
        if ok and abs(amp) >= base:
            v.error(f"{key}.amplitude",
                    "|amplitude| must stay below the base value so the profile is positive")
            ok = False
    elif kind == "values":
        vals = sec.pop("values", _MISSING)
        if vals is _MISSING:
            v.error(f"{key}.values", "missing required key")
            ok = False
        else:
            vals = _float_list(v, f"{key}.values", vals, length=sites,
                               predicate=lambda x: x >= 0, what="must be nonnegative")
            if vals is not None and sum(vals) <= 0:
                v.error(f"{key}.values", "must have positive total weight")
                vals = None
            out["values"] = vals
            ok = ok and vals is not None
    _reject_unknown(v, sec, key)
    return out if ok else None


def _validate_particle(v, parent, base_dir: Path) -> Optional[dict]:
    sec = _section(v, parent, "particle")
    if sec is None:
        return None
    sites = _take(v, sec, "particle", "sites", _as_int,
                  check=lambda n: None if n >= 2 else "must be at least 2")
    T = _take(v, sec, "particle", "T", _as_float, default=1.0,
              check=lambda x: None if x > 0 else "must be positive")
    k_values = sec.pop("k_values", _MISSING)
    if k_values is _MISSING:
        v.error("particle.k_values", "missing required key")
        k_values = None
    else:
        k_values = _int_list(v, "particle.k_values", k_values,
                             predicate=lambda k: k >= 1, what="must be at least 1")
        if k_values is not None and any(b <= a for a, b in zip(k_values, k_values[1:])):
            v.error("particle.k_values", "must be strictly increasing")
            k_values = None
    batches = _take(v, sec, "particle", "batches", _as_int, default=10,
                    check=lambda b: None if b >= 1 else "must be at least 1")
    table = _section(v, sec, "table", required=True)
    table_out = None
    if table is not None:
        kind = _take(v, table, "particle.table", "kind", _as_str,
                     check=_choice(("random-uniform", "convolution", "file")))
        table_out = {"kind": kind}
        ok = kind is not None
        if kind == "random-uniform":
            low = _take(v, table, "particle.table", "low", _as_float, default=0.2,
                        check=lambda x: None if x >= 0 else "must be nonnegative")
            high = _take(v, table, "particle.table", "high", _as_float, default=1.0,
                         check=lambda x: None if x >= 0 else "must be nonnegative")
            table_out.update({"low": low, "high": high})
            ok = ok and None not in (low, high)
            if ok and high < low:
                v.error("particle.table.high", "must be at least particle.table.low")
                ok = False
        elif kind == "convolution":
            weights = table.pop("weights", _MISSING)
            if weights is _MISSING:
                v.error("particle.table.weights", "missing required key")
                ok = False
            else:
                weights = _float_list(v, "particle.table.weights", weights,
                                      length=sites,
                                      predicate=lambda x: x >= 0,
                                      what="must be nonnegative")
                table_out["weights"] = weights
                ok = ok and weights is not None
        elif kind == "file":
            p = _take(v, table, "particle.table", "path", _as_str)
            if p is not None:
                full = Path(p)
                if not full.is_absolute():
                    full = base_dir / full
                if not full.is_file():
                    v.error("particle.table.path", f"file not found: {full}")
                    ok = False
                table_out["path"] = str(full)
            else:
                ok = False
        _reject_unknown(v, table, "particle.table")
        if not ok:
            table_out = None
    profile_1 = _validate_profile(v, sec, "profile_1", sites)
    profile_2 = _validate_profile(v, sec, "profile_2", sites)
    _reject_unknown(v, sec, "particle")
    parts = {"sites": sites, "T": T, "k_values": k_values, "batches": batches,
             "table": table_out, "profile_1": profile_1, "profile_2": profile_2}
    if any(val is None for val in parts.values()):
        return None
    return parts


def _validate_certify(v, parent) -> Optional[dict]:
    if "certify" not in parent:
        return {"lo": 1e-3, "hi": 1e3, "points_per_axis": 10}
    sec = _section(v, parent, "certify")
    if sec is None:
        return None
    out = {
        "lo": _take(v, sec, "certify", "lo", _as_float, default=1e-3,
                    check=lambda x: None if x > 0 else "must be positive"),
        "hi": _take(v, sec, "certify", "hi", _as_float, default=1e3,
                    check=lambda x: None if x > 0 else "must be positive"),
        "points_per_axis": _take(v, sec, "certify", "points_per_axis", _as_int,
                                 default=10,
                                 check=lambda p: None if p >= 2 else "must be at least 2"),
    }
    _reject_unknown(v, sec, "certify")
    if any(val is None for val in out.values()):
        return None
    if out["hi"] <= out["lo"]:
        v.error("certify.hi", "must exceed certify.lo")
        return None
    return out


def validate_config(raw: dict, base_dir: Path = Path(".")) -> RunConfig:
    """Check the whole mapping against the schema; every violation is
    collected and reported together (ConfigError)."""
    v = _Validator()
    if not isinstance(raw, dict):
        raise ConfigError(["top level: expected a mapping of sections"])
    parent = dict(raw)

    scenario = _take(v, parent, "", "scenario", _as_str, check=_choice(SCENARIOS))
    seed = _take(v, parent, "", "seed", _as_int, default=0,
                 check=lambda s: None if 0 <= s < 2**64 else "must fit in an unsigned 64-bit integer")
    output = _take(v, parent, "", "output", _as_str, default="out")

    data: dict = {"scenario": scenario, "seed": seed, "output": output}

    if scenario in ("local", "nonlocal-torus", "general-domain", "convergence-study"):
        grid = _validate_grid(v, parent)
        system = _validate_system(v, parent)
        species = system["species"] if system else None
        tcfg = _validate_time(v, parent)
        init = _validate_initial(v, parent, species, base_dir)
        data.update({"grid": grid, "system": system, "time": tcfg, "initial": init})
        if scenario == "nonlocal-torus":
            data["kernel"] = _validate_torus_kernel(v, parent)
        if scenario == "general-domain":
            data["kernel"] = _validate_domain_kernel(v, parent)
            data["epsilon"] = _take(v, parent, "", "epsilon", _as_float,
                                    check=lambda x: None if x >= 0 else "must be nonnegative")
            if grid and data["kernel"]:
                margin = data["kernel"]["boundary_margin"]
                if margin > grid["length"] / 4.0:
                    v.error("kernel.boundary_margin",
                            "must not exceed a quarter of the domain length")
        if scenario in ("local", "nonlocal-torus") and "penalisation" in parent:
            dim = grid["dim"] if grid else 1
            length = grid["length"] if grid else 1.0
            data["penalisation"] = _validate_penalisation(v, parent, species, dim, length)
        if scenario == "convergence-study":
            data["study"] = _validate_study(v, parent)
            if data["study"] and grid:
                h = grid["length"] / grid["n"]
                for k, w in enumerate(data["study"]["widths"]):
                    if 0 < w < 2 * h:
                        v.error(f"study.widths[{k}]",
                                f"positive widths must be at least two grid spacings (2h = {2 * h})")
        if scenario == "nonlocal-torus" and data.get("kernel") and grid:
            if data["kernel"]["width"] < 2 * grid["length"] / grid["n"]:
                v.error("kernel.width",
                        "must be at least two grid spacings to be resolvable")
    elif scenario == "kolmogorov":
        data["kolmogorov"] = _validate_kolmogorov(v, parent)
    elif scenario == "particle":
        data["particle"] = _validate_particle(v, parent, base_dir)
    elif scenario == "certify":
        data["system"] = _validate_system(v, parent)
        data["certify"] = _validate_certify(v, parent)

    _reject_unknown(v, parent, "")
    if v.errors:
        raise ConfigError(sorted(v.errors))
    return RunConfig(scenario=scenario, seed=seed, output=output, data=data)


def load_config(path) -> RunConfig:
    """Parse and validate a YAML config file.

    Raises ConfigError listing either the parse position or every semantic
    violation found (dotted key paths)."""
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"{p}: cannot read config file ({exc})"]) from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError([f"{p}: parse error{where}: {getattr(exc, 'problem', exc)}"]) from exc
    if raw is None:
        raw = {}
    return validate_config(raw, base_dir=p.resolve().parent)


# ---------------------------------------------------------------------------
# building blocks shared by the scenario executors
# ---------------------------------------------------------------------------

def _build_grid(gcfg: dict, periodic: bool):
    cls = TorusGrid if periodic else BoxGrid
    return cls(dim=gcfg["dim"], n=gcfg["n"], length=gcfg["length"])


def _build_system(scfg: dict):
    r = scfg["rates"]
    coeffs = SktCoefficients(d=tuple(r["d"]),
                             d_cross=np.array(r["d_cross"], dtype=np.float64),
                             pi=tuple(r["pi"]))
    structure = make_skt_structure(coeffs)
    rates = skt_rates(coeffs)
    return coeffs, structure, rates


def _cosine_field(grid, base, amplitude, mode) -> Field:
    freq = (2.0 if grid.periodic else 1.0) * np.pi * mode / grid.length
    axes = grid.coords()
    prod = np.ones(grid.shape)
    for ax in axes:
        prod = prod * np.cos(freq * ax)
    return Field(grid, base + amplitude * prod)


def _build_initial_fields(icfg: dict, grid, n: int) -> list:
    kind = icfg["kind"]
    if kind == "constant":
        return [grid.constant(val) for val in icfg["values"]]
    if kind == "cosine":
        return [
            _cosine_field(grid, b, a, m)
            for b, a, m in zip(icfg["values"], icfg["amplitude"], icfg["modes"])
        ]
    return [load_field_csv(path, grid) for path in icfg["paths"]]


def _build_penalisation(pcfg: dict, grid) -> Penalisation:
    lo, hi = pcfg["mask"]["lo"], pcfg["mask"]["hi"]
    axes = grid.coords()
    inside = np.ones(grid.shape, dtype=bool)
    for ax in range(grid.dim):
        inside &= (axes[ax] >= lo[ax]) & (axes[ax] <= hi[ax])
    mask = Field(grid, inside.astype(np.float64))
    return Penalisation(epsilon=pcfg["epsilon"], targets=tuple(pcfg["targets"]),
                        mask=mask)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


class _Artifacts:
    """Tracks every file written under the output directory."""

    def __init__(self, out_dir: Path):
        self.out = out_dir
        self.paths = []

    def write_text(self, rel: str, text: str):
        full = self.out / rel
        full.parent.mkdir(parents=True, exist_ok=True)
        with open(full, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        self.paths.append(rel)

    def save_field(self, rel: str, field: Field):
        full = self.out / rel
        full.parent.mkdir(parents=True, exist_ok=True)
        save_field_csv(field, full)
        self.paths.append(rel)


def _fmt(x: float) -> str:
    return f"{x:.6e}"


# ---------------------------------------------------------------------------
# scenario executors (each returns a list of Check, writing artifacts as it goes)
# ---------------------------------------------------------------------------

def _trajectory_checks(traj, penalised: bool) -> list:
    checks = []
    recs = traj.records
    pos_ok = all(r.flags.get("positive", False) and r.flags.get("finite", False)
                 for r in recs)
    worst_min = min(min(r.mins) for r in recs)
    checks.append(Check("positivity", pos_ok,
                        f"smallest recorded value {_fmt(worst_min)}"))

    if not penalised:
        m0 = recs[0].masses
        drift = max(
            abs(r.masses[i] - m0[i]) / abs(m0[i])
            for r in recs for i in range(len(m0))
        )
        checks.append(Check("mass-conservation", drift <= 1e-10,
                            f"max relative drift {_fmt(drift)} (tolerance 1.0e-10)"))
        ent = diagnostics.check_entropy_inequality(traj)
        checks.append(Check(
            "entropy-dissipation", ent.passed,
            f"worst margin {_fmt(ent.worst_margin)} at t={_fmt(ent.worst_time)} "
            f"(per-step tolerance {_fmt(ent.tolerance_per_step)})"))

    if recs[0].envelope_lower is not None:
        env_ok = all(r.flags.get("within_envelope", False) for r in recs)
        lo = recs[-1].envelope_lower
        hi = recs[-1].envelope_upper
        checks.append(Check("growth-envelope", env_ok,
                            f"final envelope [{_fmt(lo)}, {_fmt(hi)}], slack factor 1.1"))
    return checks


def _execute_run(config: RunConfig, art: _Artifacts) -> list:
    data = config.data
    scenario = config.scenario
    periodic = scenario != "general-domain"
    grid = _build_grid(data["grid"], periodic=periodic)
    _, structure, rates = _build_system(data["system"])
    n = data["system"]["species"]

    kernel = None
    if scenario == "nonlocal-torus":
        kernel = make_torus_mollifier(grid, data["kernel"]["width"],
                                      data["kernel"]["shape"])
    elif scenario == "general-domain":
        kernel = make_domain_kernel(grid, n, data["kernel"]["diag_radius"],
                                    data["kernel"]["boundary_margin"])

    pen = None
    if data.get("penalisation"):
        pen = _build_penalisation(data["penalisation"], grid)

    spec = SystemSpec(
        n=n, rates=rates, structure=structure, kernel=kernel,
        epsilon_viscosity=data.get("epsilon", 0.0),
        boundary="neumann" if scenario == "general-domain" else "periodic",
        penalisation=pen,
    )
    fields = _build_initial_fields(data["initial"], grid, n)
    tcfg = data["time"]
    traj = run_system(spec, fields, tcfg["T"], dt=tcfg["dt"], cadence=tcfg["cadence"])

    art.write_text("diagnostics.csv", diagnostics.trajectory_csv_text(traj))
    for i in range(n):
        art.save_field(f"snapshots/u{i + 1}_initial.csv", traj.snapshots[0][i])
        art.save_field(f"snapshots/u{i + 1}_final.csv", traj.snapshots[-1][i])

    checks = _trajectory_checks(traj, penalised=pen is not None)
    if pen is not None:
        on = pen.mask.values > 0
        gap = max(
            float(np.max(np.abs(f.values[on] - b)))
            for f, b in zip(traj.final_fields, pen.targets)
        )
        checks.append(Check("penalisation-gap", True,
                            f"sup |u_i - target_i| on the mask at T: {_fmt(gap)}"))
    return checks


def _execute_study(config: RunConfig, art: _Artifacts) -> list:
    data = config.data
    grid = _build_grid(data["grid"], periodic=True)
    _, structure, rates = _build_system(data["system"])
    n = data["system"]["species"]
    spec = SystemSpec(n=n, rates=rates, structure=structure, kernel=None)
    fields = _build_initial_fields(data["initial"], grid, n)
    tcfg = data["time"]

    report = diagnostics.convergence_study(
        spec, data["study"]["widths"], fields, tcfg["T"],
        dt=tcfg["dt"], cadence=tcfg["cadence"], shape=data["study"]["shape"])

    art.write_text("convergence.csv", report.csv_text())
    art.write_text("convergence.gp", report.gnuplot_script("convergence.csv"))
    art.write_text("verdict.txt", report.verdict_text())

    first_l1, last_l1 = report.rows[0][1], report.rows[-1][1]
    checks = [
        Check("width-monotonicity", report.monotone,
              f"L1(Q_T) distances nonincreasing within {report.slack:.0%} slack"),
        Check("width-contraction", last_l1 < 0.5 * first_l1 or first_l1 == 0.0,
              f"distance({report.rows[-1][0]:g}) / distance({report.rows[0][0]:g}) = "
              f"{_fmt(last_l1 / first_l1 if first_l1 else 0.0)} (< 0.5 required)"),
    ]
    return checks


def _execute_kolmogorov(config: RunConfig, art: _Artifacts) -> list:
    kcfg = config.data["kolmogorov"]
    dim, L = kcfg["dim"], kcfg["length"]

    def profiles(grid):
        lo, hi = kcfg["mu_low"], kcfg["mu_high"]
        mu = _cosine_field(grid, (hi + lo) / 2.0, (hi - lo) / 2.0, 1)
        z0 = _cosine_field(grid, 1.0, 0.5, 2)
        return mu, z0

    rows = []
    for size in kcfg["sizes"]:
        grid = TorusGrid(dim=dim, n=size, length=L)
        mu, z0 = profiles(grid)
        rep = diagnostics.kolmogorov_duality(z0, mu, kcfg["T"], kcfg["dt"])
        rows.append((size, rep.lhs, rep.rhs_bound, rep.ratio))

    lines = ["n,lhs,rhs_bound,ratio"]
    for size, lhs, rhs, ratio in rows:
        lines.append(f"{size},{lhs!r},{rhs!r},{ratio!r}")
    art.write_text("diagnostics.csv", "\n".join(lines) + "\n")

    base_grid = TorusGrid(dim=dim, n=kcfg["sizes"][0], length=L)
    mu, z0 = profiles(base_grid)
    z = z0
    steps = int(round(kcfg["T"] / kcfg["dt"]))
    for _ in range(steps):
        z = _solver.step_kolmogorov(z, mu, kcfg["dt"])
    art.save_field("snapshots/z_initial.csv", z0)
    art.save_field("snapshots/z_final.csv", z)

    rng = np.random.default_rng(config.seed)
    violations = 0
    worst = np.inf
    for _ in range(kcfg["trials"]):
        zr = Field(base_grid, rng.uniform(0.0, 1.0, base_grid.shape))
        mur = Field(base_grid, rng.uniform(kcfg["mu_low"], kcfg["mu_high"],
                                           base_grid.shape))
        dtr = rng.uniform(kcfg["dt_min"], kcfg["dt_max"])
        z1 = _solver.step_kolmogorov(zr, mur, dtr)
        m = float(z1.values.min())
        worst = min(worst, m)
        if m < 0:
            violations += 1

    tol = kcfg["stability_tolerance"]
    base_ratio = rows[0][3]
    spread = max(abs(r[3] / base_ratio - 1.0) for r in rows)
    return [
        Check("kolmogorov-positivity", violations == 0,
              f"{violations} negative results in {kcfg['trials']} random implicit "
              f"steps (smallest value {_fmt(worst)})"),
        Check("duality-stability", spread <= tol,
              f"duality ratio spread {spread:.3%} across sizes "
              f"{kcfg['sizes']} (tolerance {tol:.0%})"),
    ]


def _build_rate_table(tcfg: dict, sites: int, seed: int) -> particles.RateTable:
    kind = tcfg["kind"]
    if kind == "random-uniform":
        rng = np.random.default_rng(seed)
        draws = rng.uniform(tcfg["low"], tcfg["high"], (sites, sites))
        return particles.make_rate_table(sites, lambda i, j: draws[i, j])
    if kind == "convolution":
        return particles.convolution_rate_table(np.array(tcfg["weights"]))
    return particles.load_rate_table_csv(tcfg["path"])


def _build_profile(pcfg: dict, sites: int) -> np.ndarray:
    kind = pcfg["kind"]
    if kind == "uniform":
        return np.full(sites, 1.0 / sites)
    if kind == "cosine":
        x = np.arange(sites)
        vals = pcfg["base"] + pcfg["amplitude"] * np.cos(
            2.0 * np.pi * pcfg["mode"] * x / sites)
        return vals / vals.sum()
    vals = np.array(pcfg["values"], dtype=np.float64)
    return vals / vals.sum()


def _execute_particle(config: RunConfig, art: _Artifacts) -> list:
    pcfg = config.data["particle"]
    sites = pcfg["sites"]
    table = _build_rate_table(pcfg["table"], sites, config.seed)
    p1 = _build_profile(pcfg["profile_1"], sites)
    p2 = _build_profile(pcfg["profile_2"], sites)
    seeds = [config.seed + b for b in range(pcfg["batches"])]

    errors = particles.particle_vs_meanfield(table, p1, p2, pcfg["k_values"],
                                             pcfg["T"], seeds)
    art.write_text("diagnostics.csv", errors.csv_text())

    full = art.out / "rate_table.csv"
    particles.save_rate_table_csv(table, full)
    art.paths.append("rate_table.csv")

    final = particles.integrate_meanfield(
        particles.MeanFieldState(u_1=p1.copy(), u_2=p2.copy()), table, pcfg["T"])
    for name, u in (("meanfield_u1_final", final.u_1), ("meanfield_u2_final", final.u_2)):
        rows = ["i,value"] + [f"{i},{float(val)!r}" for i, val in enumerate(u)]
        art.write_text(f"snapshots/{name}.csv", "\n".join(rows) + "\n")

    means = [float(np.mean(errors.errors_for(k))) for k in pcfg["k_values"]]
    decreasing = all(b < a for a, b in zip(means, means[1:]))
    detail = ", ".join(
        f"K={k}: mean L1 error {_fmt(m)}" for k, m in zip(pcfg["k_values"], means))
    return [
        Check("pair-reversibility", True,
              "rate table satisfies the left/right shift identity by construction"),
        Check("error-decreases-with-particles", decreasing, detail),
    ]


def _execute_certify(config: RunConfig, art: _Artifacts) -> list:
    data = config.data
    ccfg = data["certify"]
    n = data["system"]["species"]
    try:
        _, structure, rates = _build_system(data["system"])
    except ValueError as exc:
        art.write_text("certificate.txt", f"REJECTED\n{exc}\n")
        return [Check("detailed-balance", False, str(exc))]

    samples = default_sample_grid(n, ccfg["lo"], ccfg["hi"], ccfg["points_per_axis"])
    cert = certify_structure(structure, rates, samples)

    header = [f"v{i + 1}" for i in range(n)]
    header += ["min_eig_cone", "min_eig_quantised", "min_eig_quantised_alt", "tolerance"]
    lines = [",".join(header)]
    for state, eig_cone, eig_quant, eig_alt, tol in cert.rows:
        row = [repr(float(x)) for x in np.atleast_1d(state)]
        row += [repr(float(eig_cone)), repr(float(eig_quant))]
        row.append("" if eig_alt is None else repr(float(eig_alt)))
        row.append(repr(float(tol)))
        lines.append(",".join(row))
    art.write_text("certificate.csv", "\n".join(lines) + "\n")
    art.write_text("certificate.txt", cert.report_text())

    checks = [
        Check("psd-cone", cert.passed_cone,
              f"smallest symmetrised eigenvalue {_fmt(cert.worst_cone[1])}"),
        Check("quantised-dissipation", cert.passed_quantised,
              f"smallest margin eigenvalue {_fmt(cert.worst_quantised[1])}"),
    ]
    if cert.passed_quantised_alt is not None:
        checks.append(Check("quantised-dissipation-alt", cert.passed_quantised_alt,
                            "square-root dissipation family"))
    return checks


_EXECUTORS = {
    "local": _execute_run,
    "nonlocal-torus": _execute_run,
    "general-domain": _execute_run,
    "kolmogorov": _execute_kolmogorov,
    "particle": _execute_particle,
    "convergence-study": _execute_study,
    "certify": _execute_certify,
}


# ---------------------------------------------------------------------------
# artifact plumbing: report and manifest
# ---------------------------------------------------------------------------

def _versions_text() -> list:
    import scipy
    rows = [
        f"  python: {sys.version.split()[0]}",
        f"  numpy: {np.__version__}",
        f"  scipy: {scipy.__version__}",
    ]
    if backends.USING_NUMBA:
        import numba
        rows.append(f"  numba: {numba.__version__} (active)")
    else:
        rows.append("  numba: disabled (pure-numpy backend)")
    rows.append("  crossdiff: 0.1.0")
    return rows


def _report_text(config: RunConfig, checks: list) -> str:
    lines = [
        f"scenario: {config.scenario}",
        f"seed: {config.seed}",
        "",
    ]
    lines += [c.line() for c in checks]
    lines += ["", f"RESULT {'PASS' if all(c.passed for c in checks) else 'FAIL'}"]
    return "\n".join(lines) + "\n"


def _manifest_text(config: RunConfig, art: _Artifacts, exit_code: int,
                   wall_seconds: float) -> str:
    lines = [
        "crossdiff run manifest",
        f"scenario: {config.scenario}",
        f"seed: {config.seed}",
        f"exit-code: {exit_code}",
        "versions:",
        *_versions_text(),
        f"wall-time-seconds: {wall_seconds:.3f}",
        "artifacts:",
    ]
    for rel in art.paths:
        lines.append(f"  {rel}")
    lines.append("  manifest.txt")
    lines.append("config: |")
    for row in config.echo_text().splitlines():
        lines.append(f"  {row}")
    return "\n".join(lines) + "\n"


def execute(config: RunConfig, quiet: bool = False) -> int:
    """Run the scenario, write every artifact, and return the exit status
    (0 exactly when all enabled checks pass)."""
    start = time.perf_counter()
    out_dir = Path(config.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    art = _Artifacts(out_dir)
    art.write_text("config_echo.yaml", config.echo_text())

    try:
        checks = _EXECUTORS[config.scenario](config, art)
    except (SolverError, ValueError, OSError) as exc:
        checks = [Check("scenario-execution", False,
                        f"{type(exc).__name__}: {exc}")]

    exit_code = 0 if all(c.passed for c in checks) else 1
    art.write_text("report.txt", _report_text(config, checks))
    wall = time.perf_counter() - start
    manifest = _manifest_text(config, art, exit_code, wall)
    with open(out_dir / "manifest.txt", "w", encoding="utf-8", newline="") as fh:
        fh.write(manifest)

    if not quiet:
        for c in checks:
            print(c.line())
        print(f"RESULT {'PASS' if exit_code == 0 else 'FAIL'} "
              f"({len(art.paths) + 1} artifacts in {out_dir})")
    return exit_code


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossdiff",
        description="Structure-preserving cross-diffusion experiments, "
                    "driven by YAML configs.")
    sub = parser.add_subparsers(dest="command", required=True)
    descriptions = {
        "run": "simulate one scenario (local, nonlocal-torus, general-domain, kolmogorov)",
        "study": "kernel-width convergence study against the local reference",
        "certify": "entropy-structure certificate for a rate family",
        "particle": "stochastic lattice runs against the mean-field equations",
    }
    for name, desc in descriptions.items():
        sp = sub.add_parser(name, help=desc, description=desc)
        sp.add_argument("--config", required=True, metavar="PATH",
                        help="YAML configuration file")
        sp.add_argument("--out", default=None, metavar="DIR",
                        help="output directory (overrides the config)")
        sp.add_argument("--seed", default=None, metavar="U64",
                        help="seed override (unsigned 64-bit integer)")
        sp.add_argument("--quiet", action="store_true",
                        help="suppress progress output")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)

    seed = None
    if args.seed is not None:
        try:
            seed = int(args.seed, 0)
        except ValueError:
            print(f"error: --seed must be an integer, got {args.seed!r}",
                  file=sys.stderr)
            return 2
        if not 0 <= seed < 2**64:
            print("error: --seed must fit in an unsigned 64-bit integer",
                  file=sys.stderr)
            return 2

    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print("invalid configuration:", file=sys.stderr)
        for violation in exc.violations:
            print(f"  {violation}", file=sys.stderr)
        return 2

    allowed = COMMAND_SCENARIOS[args.command]
    if config.scenario not in allowed:
        print(f"error: scenario {config.scenario!r} is not handled by "
              f"'crossdiff {args.command}' (expected one of: {', '.join(allowed)})",
              file=sys.stderr)
        return 2

    config = config.with_overrides(output=args.out, seed=seed)
    return execute(config, quiet=args.quiet)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end for the inspection scenario.

    safe-rta run   [--config PATH] [--out DIR] [overrides...]
    safe-rta bench [--config PATH] [--repeats N] [--fixed-seed] [overrides...]

Configs are INI files with the sections ``scenario``, ``filter``, ``backup``
and ``qp``; every ``InspectionConfig`` field has exactly one home section.
Exit codes: 0 run completed and safe, 1 completed but unsafe, 2 config
error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import math
import os
import re
import statistics
import sys
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from . import qp
from .scenario import PHI_KEYS, FILTER_KINDS, InspectionConfig, LogRow, ScenarioError, SimulationLog, run_simulation

__all__ = [
    "ConfigError",
    "EXIT_SAFE",
    "EXIT_UNSAFE",
    "EXIT_CONFIG",
    "EXIT_RUNTIME",
    "SAFETY_TOL",
    "OUT_ENV",
    "CSV_COLUMNS",
    "SECTIONS",
    "load_config",
    "parse_config_text",
    "write_config",
    "write_log_csv",
    "read_log_csv",
    "summarize_rows",
    "main",
]

log = logging.getLogger("safe_rta")

EXIT_SAFE, EXIT_UNSAFE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
SAFETY_TOL = 1e-6
OUT_ENV = "SAFE_RTA_OUT"
DEFAULT_OUT = "safe_rta_out"

CSV_COLUMNS = (
    ["time_s", "deputy", "x", "y", "z", "xdot", "ydot", "zdot"]
    + ["udes_x", "udes_y", "udes_z", "uact_x", "uact_y", "uact_z", "intervening"]
    + list(PHI_KEYS)
    + ["qp_status"]
)

# one home section per InspectionConfig field; alpha tables use dotted keys
SECTIONS: dict[str, tuple[str, ...]] = {
    "scenario": (
        "u_max", "mass", "mean_motion", "r_d", "r_c", "nu0", "nu1", "e_s", "theta_s", "v_max",
        "num_deputies", "duration", "dt", "seed", "lqr_q", "lqr_r", "target_distance",
        "init_radius", "init_speed_scale",
    ),
    "filter": ("filter", "phi1_form", "brake_fraction", "alpha", "hocbf_alpha"),
    "backup": ("backup_horizon", "backup_dt", "backup_lqr_r", "implicit_stride", "include_minima"),
    "qp": ("relax_weight",),
}
_TABLE_FIELDS = ("alpha", "hocbf_alpha")


class ConfigError(ValueError):
    """Malformed or invalid configuration; the message names the line or field."""


# -- config ---------------------------------------------------------------


def _field_types() -> dict[str, str]:
    return {f.name: str(f.type) for f in dataclasses.fields(InspectionConfig)}


def _parse_value(name: str, text: str, ftype: str) -> Any:
    text = text.strip()
    if name == "nu1" and text.lower() in ("", "auto", "none"):
        return None
    if ftype == "bool":
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if ftype == "int":
        return int(text)
    if ftype == "str":
        return text
    if ftype.startswith("tuple"):
        return tuple(float(p) for p in text.split(","))
    return float(text)


def _line_of(lines: Sequence[str], section: str, key: str) -> Optional[int]:
    current = None
    for no, raw in enumerate(lines, start=1):
        line = raw.strip()
        m = re.fullmatch(r"\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
        elif current == section and re.match(rf"{re.escape(key)}\s*[=:]", line):
            return no
    return None


def _where(source: str, lines: Sequence[str], section: str, key: str) -> str:
    no = _line_of(lines, section, key)
    return f"{source}:{no}: [{section}] {key}" if no else f"{source}: [{section}] {key}"


def parse_config_text(text: str, source: str = "<config>", base: Optional[InspectionConfig] = None) -> InspectionConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case sensitive
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}".replace("\n", " ")) from exc
    lines = text.splitlines()
    types = _field_types()
    kw: dict[str, Any] = {}
    tables: dict[str, dict[str, tuple[float, float]]] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]; expected one of {', '.join(SECTIONS)}")
        allowed = SECTIONS[section]
        for key, value in parser.items(section):
            where = _where(source, lines, section, key)
            head, _, sub = key.partition(".")
            if head in _TABLE_FIELDS and sub:
                if head not in allowed:
                    raise ConfigError(f"{where}: belongs in a different section")
                try:
                    pair = tuple(float(p) for p in value.split(","))
                except ValueError:
                    raise ConfigError(f"{where}: expected two numbers 'a, b', got {value!r}") from None
                if len(pair) != 2:
                    raise ConfigError(f"{where}: expected two numbers 'a, b', got {value!r}")
                tables.setdefault(head, {})[sub] = pair
                continue
            if key not in types:
                raise ConfigError(f"{where}: unknown field")
            if key not in allowed:
                home = next(s for s, names in SECTIONS.items() if key in names)
                raise ConfigError(f"{where}: field belongs in section [{home}]")
            try:
                kw[key] = _parse_value(key, value, types[key])
            except ValueError as exc:
                raise ConfigError(f"{where}: {exc}") from None
    base = base or InspectionConfig()
    for head, entries in tables.items():
        kw[head] = {**getattr(base, head), **entries}
    try:
        return base.with_overrides(**kw)
    except ScenarioError as exc:
        field_name, _, msg = str(exc).partition(":")
        field_name = field_name.split(".")[0]
        home = next((s for s, names in SECTIONS.items() if field_name in names), None)
        if home is not None and _line_of(lines, home, field_name):
            raise ConfigError(f"{_where(source, lines, home, field_name)}:{msg}") from None
        raise ConfigError(f"{source}: {exc}") from None


def packaged_config(name: str) -> str:
    ref = resources.files("safe_rta").joinpath("configs", f"{name}.ini")
    if not ref.is_file():
        raise ConfigError(f"no packaged config named {name!r}")
    return ref.read_text(encoding="utf-8")


def load_config(path: Optional[str]) -> InspectionConfig:
    """Read a config file; ``None`` or a bare packaged name (``default``, ``hocbf``) uses the shipped files."""
    if path is None:
        return parse_config_text(packaged_config("default"), "default.ini")
    p = Path(path)
    if not p.exists() and re.fullmatch(r"[A-Za-z0-9_-]+", path):
        return parse_config_text(packaged_config(path), f"{path}.ini")
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from exc
    return parse_config_text(text, str(path))


def _format_value(v: Any) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(float(p)) for p in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_config(cfg: InspectionConfig) -> str:
    """Serialise ``cfg`` as INI text that :func:`parse_config_text` reads back to an equal config."""
    out = []
    for section, names in SECTIONS.items():
        out.append(f"[{section}]")
        for name in names:
            value = getattr(cfg, name)
            if name in _TABLE_FIELDS:
                for k in sorted(value):
                    out.append(f"{name}.{k} = {_format_value(tuple(value[k]))}")
            else:
                out.append(f"{name} = {_format_value(value)}")
        out.append("")
    return "\n".join(out)


# -- log I/O --------------------------------------------------------------


def _num(v: float) -> str:
    return format(float(v), ".17g")


def write_log_csv(rows: Iterable[LogRow], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow(
                [_num(r.time), str(r.deputy)]
                + [_num(v) for v in (*r.state, *r.u_des, *r.u_act)]
                + ["1" if r.intervening else "0"]
                + [_num(v) for v in r.phi]
                + [r.qp_status]
            )


def read_log_csv(path: Path) -> list[LogRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected CSV header")
        rows = []
        for rec in reader:
            f = [float(v) for v in rec[2:14]]
            rows.append(
                LogRow(
                    float(rec[0]),
                    int(rec[1]),
                    tuple(f[0:6]),
                    tuple(f[6:9]),
                    tuple(f[9:12]),
                    rec[14] == "1",
                    tuple(float(v) for v in rec[15:22]),
                    rec[22],
                )
            )
    return rows


def summarize_rows(rows: Sequence[LogRow]) -> dict:
    """Summary record computed from log rows only."""
    phi = np.array([r.phi for r in rows], dtype=float).reshape(-1, len(PHI_KEYS))
    mins = {k: float(phi[:, i].min()) if len(phi) else math.inf for i, k in enumerate(PHI_KEYS)}
    u = np.array([r.u_act for r in rows], dtype=float).reshape(-1, 3)
    return {
        "rows": len(rows),
        "min_phi": min(mins.values()),
        "min_phi_by_constraint": mins,
        "interventions": int(sum(r.intervening for r in rows)),
        "qp_relaxations": int(sum(r.qp_status == qp.QpStatus.RELAXED.value for r in rows)),
        "max_abs_u_act": float(np.abs(u).max()) if len(u) else 0.0,
    }


def _json_safe(obj: Any) -> Any:
    # JSON has no infinities; phi_2 is +inf with a single deputy
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    return obj


# -- commands -------------------------------------------------------------


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    kw = {}
    for flag, name in (("filter", "filter"), ("seed", "seed"), ("duration", "duration"), ("dt", "dt"), ("deputies", "num_deputies")):
        v = getattr(args, flag, None)
        if v is not None:
            kw[name] = v
    return kw


def _resolve_config(args: argparse.Namespace) -> InspectionConfig:
    cfg = load_config(args.config)
    try:
        return cfg.with_overrides(**_overrides(args))
    except ScenarioError as exc:
        raise ConfigError(f"command line: {exc}") from None


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run_summary(sim: SimulationLog) -> dict:
    summary = summarize_rows(sim.rows)
    summary["final_min_phi"] = float(np.min(sim.final_phi)) if sim.final_phi.size else math.inf
    summary["wall_clock_s"] = sim.wall_clock_s
    summary["cpu_time_s"] = sim.cpu_time_s
    summary["safe"] = min(summary["min_phi"], summary["final_min_phi"]) >= -SAFETY_TOL
    return summary


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    log.info("running %s, %d deputies, %g s", cfg.filter, cfg.num_deputies, cfg.duration)
    sim = run_simulation(cfg)
    summary = _run_summary(sim)
    log_path = out / "log.csv"
    write_log_csv(sim.rows, log_path)
    (out / "config.ini").write_text(write_config(cfg), encoding="utf-8")
    summary["log"] = str(log_path)
    (out / "summary.json").write_text(json.dumps(_json_safe(summary), indent=2) + "\n", encoding="utf-8")
    print(
        f"min_phi={summary['min_phi']:.6g} interventions={summary['interventions']} "
        f"relaxations={summary['qp_relaxations']} wall_clock={summary['wall_clock_s']:.2f}s "
        f"{'SAFE' if summary['safe'] else 'UNSAFE'} -> {out}"
    )
    return EXIT_SAFE if summary["safe"] else EXIT_UNSAFE


def cmd_bench(args: argparse.Namespace) -> int:
    if args.repeats < 1:
        raise ConfigError("command line: --repeats must be >= 1")
    cfg = _resolve_config(args)
    records = []
    for k in range(args.repeats):
        seed = cfg.seed if args.fixed_seed else cfg.seed + k
        sim = run_simulation(cfg.with_overrides(seed=seed))
        s = _run_summary(sim)
        records.append(
            {"seed": seed, "wall_clock_s": s["wall_clock_s"], "cpu_time_s": s["cpu_time_s"], "min_phi": s["min_phi"], "safe": s["safe"]}
        )
        print(f"seed={seed} wall_clock={s['wall_clock_s']:.3f}s min_phi={s['min_phi']:.6g}")
    times = [r["wall_clock_s"] for r in records]
    report = {
        "filter": cfg.filter,
        "repeats": len(records),
        "mean_s": statistics.fmean(times),
        "min_s": min(times),
        "max_s": max(times),
        "runs": records,
    }
    print(f"mean={report['mean_s']:.3f}s min={report['min_s']:.3f}s max={report['max_s']:.3f}s over {len(records)} runs")
    if args.out or os.environ.get(OUT_ENV):
        (_out_dir(args) / "bench.json").write_text(json.dumps(_json_safe(report), indent=2) + "\n", encoding="utf-8")
    return EXIT_SAFE if all(r["safe"] for r in records) else EXIT_UNSAFE


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file, or the name of a packaged config (default, hocbf)")
    common.add_argument("--out", help=f"output directory (env {OUT_ENV}; default ./{DEFAULT_OUT})")
    common.add_argument("--filter", choices=FILTER_KINDS)
    common.add_argument("--seed", type=int)
    common.add_argument("--duration", type=float, help="seconds")
    common.add_argument("--dt", type=float, help="seconds")
    common.add_argument("--deputies", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="safe-rta", description="Run-time assurance inspection simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="run one simulation and write log.csv + summary.json")
    run.set_defaults(func=cmd_run)
    bench = sub.add_parser("bench", parents=[common], help="time repeated simulations")
    bench.add_argument("--repeats", type=int, default=1)
    bench.add_argument("--fixed-seed", action="store_true", help="reuse the config seed for every repeat")
    bench.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, which matches the config-error code
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure maps to the runtime exit code
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

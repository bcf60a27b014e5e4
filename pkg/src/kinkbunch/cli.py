"""Command-line front end: simulate, estimate and policy-scan.

Exit codes: 0 success, 2 input error, 3 estimation failure, 4 no
convergence (outputs are still written).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import __version__
from .density import parallel_shift_baseline
from .effects import bootstrap_pipeline, run_pipeline
from .extensions import estimate_bunch_up, policy_scan
from .model_core import BunchingError, EstimationConfig, InputError, KinkPolicy, Samples
from .outcome import Calibration
from .simulator import ROLES, SimulationConfig, ground_truth, simulate

EXIT_OK, EXIT_INPUT, EXIT_ESTIMATION, EXIT_NONCONVERGED = 0, 2, 3, 4
UNIDENTIFIED = "unidentified (100% marginal rate)"
SAMPLE_HEADER = ("agent_id", "z", "y", "group")

_POLICY_KEYS = {"z_star": float, "t": float, "delta_t": float, "u1": float, "u2": float}


# ---------------------------------------------------------------------------
# serialization


def fmt(x: float) -> str:
    """15 significant digits; non-finite values spelled out."""
    return format(float(x), ".15g")


def _clean(obj: Any) -> Any:
    """JSON-ready copy with floats cut to 15 significant digits and NaN/inf as null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return float(fmt(x)) if math.isfinite(x) else None
    return obj


def dump_json(obj: Any) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=False, allow_nan=False) + "\n"


def _open_out(path: str):
    if path == "-":
        return _Stdout()
    p = Path(path)
    if p.parent and not p.parent.exists():
        raise InputError(f"output directory {p.parent} does not exist")
    return open(p, "w", newline="", encoding="utf-8")


class _Stdout:
    def __enter__(self):
        return sys.stdout

    def __exit__(self, *exc):
        sys.stdout.flush()
        return False


def _write_text(path: str, text: str) -> None:
    try:
        with _open_out(path) as fh:
            fh.write(text)
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# manifest and config


@dataclass
class RunManifest:
    """Provenance of one command: enough to rerun it."""

    command: str
    input_path: Optional[str]
    policy: dict
    config: dict
    seed: Optional[int]
    timestamp: Optional[str] = None
    version: str = __version__
    outputs: list = field(default_factory=list)

    @staticmethod
    def stamp() -> Optional[str]:
        """UTC time from ``SOURCE_DATE_EPOCH``, else ``None`` so reruns diff cleanly."""
        epoch = os.environ.get("SOURCE_DATE_EPOCH")
        if epoch is None:
            return None
        try:
            return datetime.fromtimestamp(int(epoch), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
        except ValueError as exc:
            raise InputError(f"SOURCE_DATE_EPOCH must be an integer, got {epoch!r}") from exc


def read_config_file(path: Optional[str]) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    out: dict[str, str] = {}
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{i}: expected key = value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _parse_overrides(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise InputError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(";", ",").split(",") if x.strip())


def _optional_float(text: str) -> Optional[float]:
    return None if text.lower() in ("", "none", "null") else float(text)


def _convert(name: str, text: str, default: Any) -> Any:
    if name == "ability":
        parts = [p for p in text.replace(",", ":").split(":") if p]
        return (parts[0],) + tuple(float(p) for p in parts[1:])
    if name == "e":
        vals = _floats(text)
        return vals[0] if len(vals) == 1 else vals
    if name in ("group_shares", "y_pre_coeffs", "reference_multiples"):
        return _floats(text)
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if default is None:
        return _optional_float(text)
    return text


def _build(cls, values: dict[str, str], base: Optional[dict] = None):
    kw = dict(base or {})
    defaults = {f.name: getattr(cls(), f.name) for f in fields(cls) if f.name != "extra"}
    for k, v in values.items():
        if k in defaults:
            kw[k] = _convert(k, v, defaults[k])
    return cls(**kw)


def _split_config(values: dict[str, str]) -> tuple[dict, dict, dict]:
    values = dict(values)
    if "lambda" in values:
        values["lam"] = values.pop("lambda")
    sim_keys = {f.name for f in fields(SimulationConfig)}
    est_keys = {f.name for f in fields(EstimationConfig)} - {"extra"}
    unknown = set(values) - sim_keys - est_keys - set(_POLICY_KEYS)
    if unknown:
        raise InputError(f"unknown config keys: {', '.join(sorted(unknown))}")
    pol = {k: _POLICY_KEYS[k](values[k]) for k in _POLICY_KEYS if k in values}
    sim = {k: values[k] for k in values if k in sim_keys}
    est = {k: values[k] for k in values if k in est_keys}
    return pol, sim, est


def _policy(values: dict, args: argparse.Namespace) -> KinkPolicy:
    merged = {"z_star": None, "t": None, "delta_t": None, "u1": 0.0, "u2": 0.0}
    merged.update(values)
    for k in merged:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = v
    missing = [k for k in ("z_star", "t", "delta_t") if merged[k] is None]
    if missing:
        raise InputError(f"policy parameters missing: {', '.join(missing)}")
    return KinkPolicy(**merged)


def _gather(args: argparse.Namespace) -> tuple[dict, dict, dict]:
    values = read_config_file(args.config)
    values.update(_parse_overrides(args.set))
    return _split_config(values)


# ---------------------------------------------------------------------------
# sample CSV


def read_samples(path: str) -> Samples:
    """Agents from a ``agent_id,z,y[,group]`` CSV; every bad row is listed in the error."""
    try:
        fh = sys.stdin if path == "-" else open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InputError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if header[:3] != list(SAMPLE_HEADER[:3]) or header[3:] not in ([], ["group"]):
            raise InputError(f"{path}: header must be agent_id,z,y[,group], got {','.join(header)}")
        width = len(header)
        z, y, g, bad = [], [], [], []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != width:
                bad.append(f"line {lineno}: expected {width} fields, got {len(row)}")
                continue
            try:
                zi, yi = float(row[1]), float(row[2])
            except ValueError:
                bad.append(f"line {lineno}: non-numeric z or y")
                continue
            if not (math.isfinite(zi) and zi > 0):
                bad.append(f"line {lineno}: z must be positive and finite, got {row[1]}")
                continue
            if not math.isfinite(yi):
                bad.append(f"line {lineno}: y must be finite, got {row[2]}")
                continue
            z.append(zi)
            y.append(yi)
            if width == 4:
                g.append(row[3])
    if bad:
        shown = "\n  ".join(bad[:20])
        more = f"\n  ... and {len(bad) - 20} more" if len(bad) > 20 else ""
        raise InputError(f"{path}: {len(bad)} invalid rows\n  {shown}{more}")
    if not z:
        raise InputError(f"{path}: no agents")
    return Samples.from_arrays(z, y, group=np.array(g, dtype=object) if g else None)


def samples_csv(tagged) -> str:
    buf = io.StringIO()
    buf.write(",".join(SAMPLE_HEADER) + "\n")
    for i, (zi, yi, gi) in enumerate(zip(tagged.z.tolist(), tagged.y.tolist(), tagged.group.tolist())):
        buf.write(f"{i},{fmt(zi)},{fmt(yi)},{gi}\n")
    return buf.getvalue()


def _table_csv(header: Sequence[str], cols: Sequence[np.ndarray]) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in zip(*[np.asarray(c, dtype=float).tolist() for c in cols]):
        buf.write(",".join("" if not math.isfinite(v) else fmt(v) for v in row) + "\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args: argparse.Namespace) -> int:
    pol_vals, sim_vals, _ = _gather(args)
    if args.seed is not None:
        sim_vals["seed"] = str(args.seed)
    if args.n_agents is not None:
        sim_vals["n_agents"] = str(args.n_agents)
    cfg = _build(SimulationConfig, sim_vals)
    policy = _policy(pol_vals, args)
    tagged = simulate(cfg, policy)
    truth = ground_truth(cfg, policy, tagged)
    truth_path = args.truth or (str(Path(args.out).with_name("truth.json")) if args.out != "-" else None)
    manifest = RunManifest("simulate", None, asdict(policy), _sim_echo(cfg), cfg.seed, RunManifest.stamp(),
                           outputs=[args.out] + ([truth_path] if truth_path else []))
    _write_text(args.out, samples_csv(tagged))
    if truth_path:
        doc = {"manifest": asdict(manifest), "truth": truth.as_dict(),
               "roles": [ROLES[r] for r in tagged.role.tolist()]}
        _write_text(truth_path, dump_json(doc))
    return EXIT_OK


def _sim_echo(cfg: SimulationConfig) -> dict:
    d = asdict(cfg)
    d["ability"] = list(cfg.ability)
    return d


def _est_echo(cfg: EstimationConfig) -> dict:
    d = asdict(cfg)
    d.pop("extra", None)
    return d


def _elasticity(cal: Optional[Calibration], policy: KinkPolicy) -> Any:
    if policy.t + policy.delta_t >= 1:
        return UNIDENTIFIED
    return cal.e if cal is not None else None


def cmd_estimate(args: argparse.Namespace) -> int:
    pol_vals, _, est_vals = _gather(args)
    cfg = _build(EstimationConfig, est_vals)
    policy = _policy(pol_vals, args)
    samples = read_samples(args.input)
    out_dir = Path(args.out_dir)
    if out_dir.exists() and not out_dir.is_dir():
        raise InputError(f"{out_dir} exists and is not a directory")
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = args.report or str(out_dir / "report.json")
    density_path, outcome_path = str(out_dir / "density_bins.csv"), str(out_dir / "outcome_bins.csv")

    if cfg.counterfactual_side == "high_rate":
        up = estimate_bunch_up(samples, policy, cfg)
        cal = up.calibration
        report = {
            "delta_z_star": up.delta_z_star_act, "excess_bunching": up.excess_bunching,
            "elasticity": _elasticity(cal, policy),
            "mu": cal.mu if cal else None, "lambda": cal.lam if cal else None,
            "te_shifter": up.te_shifter, "te_buncher": up.te_buncher,
            "never_taker_te": up.never_taker_te, "se": {},
            "converged": up.converged, "iterations": up.density.iterations_used,
            "notes": up.warnings,
        }
        density, outcome, sign = up.density, up.outcome, -1.0
        converged = up.converged
    else:
        res = run_pipeline(samples, policy, cfg)
        cal = res.calibration
        report = {
            "delta_z_star": res.density.delta_z_star, "excess_bunching": res.density.excess_bunching,
            "elasticity": _elasticity(cal, policy),
            "mu": cal.mu if cal else None, "lambda": cal.lam if cal else None,
            "te_shifter": res.te_shifter, "te_buncher": res.te_buncher,
            "te_buncher_structural": res.te_buncher_structural, "mode": res.mode,
            "se": {}, "converged": res.converged, "iterations": res.density.iterations_used,
            "notes": res.notes,
        }
        if args.bootstrap:
            rep = bootstrap_pipeline(samples, policy, cfg, reps=args.bootstrap, seed=args.seed,
                                     workers=max(1, args.threads))
            report["se"] = {"delta_z_star": rep.se_delta_z, "mu": rep.se_mu, "lambda": rep.se_lambda,
                            "te_shifter": rep.se_te_shifter, "te_buncher": rep.se_te_buncher,
                            "reps": rep.bootstrap_reps, "failures": rep.failures}
        density, outcome, sign = res.density, res.outcome, 1.0
        converged = res.converged

    if args.baseline:
        base = parallel_shift_baseline(samples, policy, cfg)
        report["baseline"] = {"delta_z_star": base.delta_z_star, "excess_bunching": base.excess_bunching,
                              "converged": base.converged, "iterations": base.iterations_used}

    manifest = RunManifest("estimate", args.input, asdict(policy), _est_echo(cfg), args.seed,
                           RunManifest.stamp(), outputs=[report_path, density_path, outcome_path])
    report["manifest"] = asdict(manifest)

    shift = np.full(density.bin_centers.size, math.nan)
    if density.shifter_diffuse_counts.size:
        i0 = density.at(1)
        shift[i0:i0 + density.shifter_diffuse_counts.size] = density.shifter_diffuse_counts
    _write_text(density_path, _table_csv(
        ("bin_center", "observed", "counterfactual", "shifter_extrapolated"),
        (sign * density.bin_centers, density.observed_counts, density.counterfactual_counts, shift)))
    _write_text(outcome_path, _table_csv(
        ("bin_center", "observed", "auxiliary", "counterfactual"),
        (sign * outcome.bin_centers, outcome.observed_outcomes, outcome.auxiliary_outcomes,
         outcome.counterfactual_outcomes)))
    _write_text(report_path, dump_json(report))
    if not converged:
        print("warning: response fixed point did not converge", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def _load_calibration(path: str) -> tuple[Calibration, dict]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read calibration {path}: {exc}") from exc
    src = doc.get("truth", doc)
    mu, lam, e = src.get("mu"), src.get("lambda"), src.get("elasticity")
    if not all(isinstance(v, (int, float)) for v in (mu, lam, e)):
        raise InputError(f"{path} holds no calibrated (mu, lambda, elasticity)")
    policy = doc.get("manifest", {}).get("policy", {})
    return Calibration(float(mu), float(lam), float(e), "log_share"), policy


def _parse_alternative(text: str, base: KinkPolicy) -> KinkPolicy:
    kw = asdict(base)
    for part in text.split(","):
        if "=" not in part:
            raise InputError(f"--alt expects key=value pairs, got {text!r}")
        k, v = (s.strip() for s in part.split("=", 1))
        if k not in _POLICY_KEYS:
            raise InputError(f"unknown policy key {k!r} in --alt")
        kw[k] = float(v)
    return KinkPolicy(**kw)


def cmd_policy_scan(args: argparse.Namespace) -> int:
    pol_vals, _, _ = _gather(args)
    cal, stored = _load_calibration(args.calibration)
    policy = _policy({**{k: v for k, v in stored.items() if k in _POLICY_KEYS}, **pol_vals}, args)
    samples = read_samples(args.input)
    alts = [_parse_alternative(a, policy) for a in args.alt or ()]
    rows = policy_scan(samples, policy, cal, alts)
    header = ("z_star", "t", "delta_t", "total_z", "total_payment", "reimbursement",
              "mean_outcome", "sd_outcome", "mean_z", "sd_z", "n_agents")
    cols = [np.array([getattr(r, h) for r in rows], dtype=float) for h in header]
    _write_text(args.out, _table_csv(header, cols))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--z-star", dest="z_star", type=float)
    p.add_argument("--t", type=float, help="marginal rate below the threshold")
    p.add_argument("--delta-t", dest="delta_t", type=float, help="rate increase above the threshold")
    p.add_argument("--u1", type=float, help="diffuse window below the threshold")
    p.add_argument("--u2", type=float, help="diffuse window above the threshold")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kinkbunch", description="Treatment effects under a kinked schedule.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="draw a synthetic population")
    _add_common(s)
    s.add_argument("--out", default="-", help="sample CSV path, '-' for stdout")
    s.add_argument("--truth", help="truth sidecar path (default: truth.json next to --out)")
    s.add_argument("--seed", type=int)
    s.add_argument("--n-agents", dest="n_agents", type=int)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("estimate", help="estimate response, calibration and effects")
    _add_common(e)
    e.add_argument("input", help="sample CSV path, '-' for stdin")
    e.add_argument("--out-dir", default=".", help="directory for the plot CSVs")
    e.add_argument("--report", help="report path, '-' for stdout (default: OUT_DIR/report.json)")
    e.add_argument("--baseline", action="store_true", help="add the parallel-shift estimate")
    e.add_argument("--bootstrap", type=int, default=0, metavar="REPS", help="bootstrap replicates")
    e.add_argument("--threads", type=int, default=1, help="bootstrap workers")
    e.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    e.set_defaults(func=cmd_estimate)

    p = sub.add_parser("policy-scan", help="recompute totals under alternative schedules")
    _add_common(p)
    p.add_argument("input", help="sample CSV observed under the current schedule")
    p.add_argument("--calibration", required=True, help="report.json or truth.json with mu, lambda, elasticity")
    p.add_argument("--alt", action="append", metavar="KEY=VALUE,...", help="alternative policy, e.g. z_star=120")
    p.add_argument("--out", default="-", help="scenario table path, '-' for stdout")
    p.set_defaults(func=cmd_policy_scan)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (BunchingError, np.linalg.LinAlgError) as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: synth | analyze | fit | oracle | scan.

Every output carries the config hash, seed and tool version. Nothing that
varies between runs (timestamps, paths, worker counts) is written, so equal
inputs give byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .container import (
    config_hash,
    read_container,
    read_csv,
    write_container,
    write_csv,
    write_matrix_csv,
    write_truth_csv,
)
from .errors import ConfigError, DataError, DcsqzError, EmptySelectionError, LowCorrelationError
from .fit import STATS_FIXED, Amplitudes, FitOptions, fit_variance_model, initial_guess, power_scan, start_grid
from .pipeline import PipelineOptions, analyze
from .synth import AcqConfig, Calibration, CombConfig, ngm_kernel_power, synthesize_ensemble

log = logging.getLogger("dcsqz")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DEFAULT_POWERS = [50e-6, 70e-6, 100e-6, 130e-6, 170e-6, 220e-6, 300e-6, 400e-6, 570e-6]


def _schema(name: str) -> dict:
    return json.loads(resources.files("dcsqz").joinpath("data", name).read_text())


@dataclass(frozen=True)
class RunConfig:
    comb: CombConfig = field(default_factory=CombConfig)
    acq: AcqConfig = field(default_factory=AcqConfig)
    pipeline: PipelineOptions = field(default_factory=PipelineOptions)
    fit: FitOptions = field(default_factory=lambda: FitOptions(fixed=STATS_FIXED))
    powers: tuple = tuple(DEFAULT_POWERS)
    db_tolerance: float = 0.0
    out: str = "out"
    jobs: int = 1

    @property
    def seed(self) -> int:
        return self.acq.seed

    def hashable(self) -> dict:
        """Everything that determines the outputs; excludes ``out`` and ``jobs``."""
        pipe = asdict(self.pipeline)
        pipe.pop("jobs")
        return {
            "comb": asdict(self.comb),
            "acq": asdict(self.acq),
            "pipeline": pipe,
            "fit": asdict(self.fit),
            "powers": list(self.powers),
            "db_tolerance": self.db_tolerance,
        }

    @property
    def hash(self) -> str:
        return config_hash(self.hashable())


def _tuples(d: dict, keys) -> dict:
    return {k: tuple(v) if k in keys and v is not None else v for k, v in d.items()}


def load_config(path: str | None, args: argparse.Namespace | None = None) -> RunConfig:
    """Defaults, then the JSON file, then command-line flags."""
    raw = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(raw, _schema("config.schema.json"))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {where}: {exc.message}") from exc

    comb_kw = _tuples(raw.get("comb", {}), {"ceo_phases"})
    acq_kw = dict(raw.get("acq", {}))
    pipe_kw = _tuples(raw.get("pipeline", {}), {"igm_band", "hist_bins"})
    fit_kw = _tuples(raw.get("fit", {}), {"fixed"})
    scan = raw.get("scan", {})
    jobs = raw.get("jobs", 1)
    out = raw.get("out", "out")
    if "seed" in raw:
        acq_kw["seed"] = raw["seed"]

    if args is not None:
        if getattr(args, "seed", None) is not None:
            acq_kw["seed"] = args.seed
        if getattr(args, "records", None) is not None:
            acq_kw["n_igms"] = args.records
        if getattr(args, "jobs", None) is not None:
            jobs = args.jobs
        if getattr(args, "out", None) is not None:
            out = args.out
    if jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    try:
        comb = CombConfig(**comb_kw)
        acq = AcqConfig(**acq_kw)
        pipe = PipelineOptions(**{**pipe_kw, "jobs": jobs})
        fit = FitOptions(**{"fixed": STATS_FIXED, **fit_kw})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    powers = tuple(float(p) for p in scan.get("powers", DEFAULT_POWERS))
    return RunConfig(comb, acq, pipe, fit, powers, float(scan.get("db_tolerance", 0.0)), out, jobs)


def _meta(cfg: RunConfig, kind: str, **extra) -> dict:
    meta = {"kind": kind, "config_hash": cfg.hash, "seed": cfg.seed, "tool_version": __version__}
    meta.update(extra)
    return meta


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1, default=_default) + "\n")


def _default(x):
    if isinstance(x, (np.generic,)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(type(x))


def _finite(x):
    """JSON has no inf/nan; map them to None."""
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_finite(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ens = synthesize_ensemble(cfg.comb, cfg.acq, jobs=cfg.jobs)
    write_container(ens, out / "ensemble.dcsqz")
    write_truth_csv(out / "truth.csv", ens, _meta(cfg, "truth", calibration=ens.calibration.to_dict()))
    log.info("wrote %d records to %s", len(ens.records), out / "ensemble.dcsqz")
    return EXIT_OK


def _stats_columns(stats) -> dict:
    cols = {
        "phi": stats.phi_axis,
        "sigma_ngm": stats.sigma_ngm,
        "sigma_snl": np.full_like(stats.sigma_ngm, stats.sigma_snl),
        "v_sqz_db": stats.v_sqz_db,
        "igm_envelope": stats.igm_envelope,
    }
    if stats.sigma_diff is not None:
        cols["sigma_diff"] = stats.sigma_diff
    return cols


def cmd_analyze(args, cfg: RunConfig) -> int:
    ens = read_container(args.container)
    # the container is authoritative for what was synthesized
    cfg = replace(cfg, comb=ens.comb, acq=ens.acq)
    stats = analyze(ens, cfg.pipeline)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = _meta(
        cfg,
        "noise_stats",
        sigma_floor=stats.sigma_floor,
        sigma_snl=stats.sigma_snl,
        n_selected=stats.n_records,
        rejected=stats.rejected,
        calibration=ens.calibration.to_dict(),
        acq=asdict(ens.acq),
        comb=asdict(ens.comb),
    )
    write_csv(out / "noise_stats.csv", _stats_columns(stats), meta)
    write_matrix_csv(out / "histogram.csv", stats.histogram.counts, _meta(
        cfg, "histogram",
        phase_edges=stats.histogram.phase_edges.tolist(),
        volt_edges=stats.histogram.volt_edges.tolist(),
    ))
    if ens.partners is not None:
        write_csv(out / "sum_diff.csv", {
            "phi": stats.phi_axis, "sigma_sum": stats.sigma_ngm, "sigma_diff": stats.sigma_diff,
        }, _meta(cfg, "sum_diff"))
    region = stats.region
    summary = _meta(
        cfg,
        "analyze_summary",
        min_v_sqz_db=float(np.nanmin(stats.v_sqz_db[region])),
        max_v_sqz_db=float(np.nanmax(stats.v_sqz_db[region])),
        snl_segment_db=float(np.nanmean(stats.v_sqz_db[stats.snl_mask])),
        n_selected=stats.n_records,
        rejected=stats.rejected,
    )
    _write_json(out / "summary.json", _finite(summary))
    return EXIT_OK


def _amplitudes_from_csv(cols: dict, meta: dict) -> Amplitudes:
    try:
        cal = Calibration(**meta["calibration"])
        acq = AcqConfig(**meta["acq"])
    except (KeyError, TypeError) as exc:
        raise DataError("noise-stats metadata lacks calibration/acquisition blocks") from exc
    split = 2.0 if acq.detector_mode == "dual_balanced" else 1.0
    denom = 2 * cal.alpha * cal.beta * cal.volts_per_photon / split
    env = cols["igm_envelope"]
    return Amplitudes(cal.alpha, cal.beta, env / denom, cal.volts_per_photon * cal.ngm_gain,
                      kernel=ngm_kernel_power(len(env), acq))


def cmd_fit(args, cfg: RunConfig) -> int:
    cols, meta = read_csv(args.stats)
    missing = {"phi", "sigma_ngm", "igm_envelope"} - set(cols)
    if missing:
        raise DataError(f"{args.stats}: missing columns {sorted(missing)}")
    amps = _amplitudes_from_csv(cols, meta)
    floor0 = float(meta.get("sigma_floor", 0.0))
    guess = initial_guess(cols["phi"], cols["sigma_ngm"], amps, floor0)
    starts = start_grid(guess) if cfg.fit.multistart else guess
    res = fit_variance_model(cols["phi"], cols["sigma_ngm"], amps, starts, opts=cfg.fit)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    report = _meta(cfg, "fit", source_config_hash=meta.get("config_hash"), fit=res.to_dict())
    _write_json(out / "fit.json", _finite(report))
    names = ["r", "phi", "eta", "gamma_scale", "floor"]
    values = [res.r_hat, res.phi_hat, res.eta_hat, res.gamma_scale_hat, res.floor_hat]
    write_csv(out / "fit.csv", {
        "index": np.arange(5),
        "value": values,
        "uncertainty": [res.uncertainty[n] for n in names],
    }, _meta(cfg, "fit_table", parameters=names, converged=res.converged))
    return EXIT_OK if res.converged else EXIT_NUMERIC


def oracle_report(params: dict, jobs: int = 1) -> dict:
    from .fock import apply_kerr_exact, build_displaced_squeezed, ladder_moments, min_quadrature_variance, number_moments
    from .fock import apply_loss, wigner_mc_moments
    from .gaussian import (QuantumParams, SqueezeSpec, haus_squeeze_estimate, kerr_squeeze_angle,
                           photon_moments, photon_moments_full)

    nu = complex(params.get("nu_re", 0.0), params.get("nu_im", 0.0))
    s = SqueezeSpec(params["r"], params.get("phi", 0.0))
    eta = params.get("eta", 1.0)
    q = QuantumParams(alpha=0.0, beta=nu, squeeze=s, eta=eta)
    state = build_displaced_squeezed(nu, s, params.get("truncation"))
    fock = apply_loss(number_moments(state), eta)
    mc = wigner_mc_moments(q, params.get("mc_samples", 200_000), params.get("seed", 0), jobs)
    full = photon_moments_full(q)
    simple = photon_moments(q)
    rows = [
        {"method": "closed_form_full", "mean": float(full.mean), "variance": float(full.variance)},
        {"method": "closed_form_bright", "mean": float(simple.mean), "variance": float(simple.variance)},
        {"method": "fock", "mean": fock.mean, "variance": fock.variance,
         "truncation": state.truncation, "truncation_error": fock.truncation_error},
        {"method": "wigner_mc", "mean": mc.mean, "variance": mc.variance,
         "mean_se": mc.mean_se, "variance_se": mc.variance_se},
    ]
    rel = abs(full.variance - fock.variance) / max(abs(fock.variance), 1e-300)
    kerr = []
    beta = params.get("kerr_beta")
    if beta is not None:
        for g in params.get("kerr_g", [0.001, 0.005, 0.01]):
            kstate = apply_kerr_exact(beta, g)
            vmin, angle = min_quadrature_variance(kstate)
            r = float(haus_squeeze_estimate(2 * g, beta))
            # a positive Kerr phase gives the mirrored branch about the mean field
            theta = float(np.angle(ladder_moments(kstate)[0]))
            offset = kerr_squeeze_angle(beta, r) if r > 0 else 0.0
            kerr.append({
                "g": g,
                "exact_min_variance": vmin,
                "exact_angle": angle,
                "gaussian_r": r,
                "gaussian_min_variance": 0.5 * math.exp(-2 * r),
                "gaussian_angle": float(np.mod(theta - offset, np.pi)),
                "relative_difference": abs(vmin - 0.5 * math.exp(-2 * r)) / vmin,
            })
    return {"moments": rows, "relative_variance_difference": rel, "kerr": kerr}


def cmd_oracle(args, cfg: RunConfig) -> int:
    try:
        params = json.loads(Path(args.params).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {args.params}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{args.params} is not valid JSON") from exc
    try:
        jsonschema.validate(params, _schema("oracle.schema.json"))
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"oracle parameters: {exc.message}") from exc
    report = oracle_report(params, cfg.jobs)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = _meta(cfg, "oracle", params=params, params_hash=config_hash(params))
    _write_json(out / "oracle.json", _finite({**meta, **report}))
    return EXIT_OK


def scan_table(result) -> dict:
    def num(x):
        return float("nan") if x is None else float(x)

    rows = result.rows
    return {
        "power": [r.power for r in rows],
        "ratio": [r.ratio for r in rows],
        "extrema_count": [num(r.extrema_count) for r in rows],
        "extrema_count_direct": [num(r.extrema_count_direct) for r in rows],
        "extrema_count_model": [num(r.extrema_count_model) for r in rows],
        "min_db": [r.min_db for r in rows],
        "max_db": [r.max_db for r in rows],
        "r_hat": [num(r.fit and r.fit.r_hat) for r in rows],
        "phi_hat": [num(r.fit and r.fit.phi_hat) for r in rows],
        "eta_hat": [num(r.fit and r.fit.eta_hat) for r in rows],
        "r_unc": [num(r.fit and r.fit.uncertainty["r"]) for r in rows],
        "eta_unc": [num(r.fit and r.fit.uncertainty["eta"]) for r in rows],
        "failed": [1.0 if r.error else 0.0 for r in rows],
    }


def cmd_scan(args, cfg: RunConfig) -> int:
    powers = args.powers if args.powers else list(cfg.powers)
    cfg = replace(cfg, powers=tuple(float(p) for p in powers))
    res = power_scan(cfg.comb, cfg.acq, cfg.powers, cfg.pipeline, cfg.fit, cfg.jobs, cfg.db_tolerance)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = _meta(
        cfg,
        "power_scan",
        anti_squeezing_monotone=res.anti_squeezing_monotone,
        transition_consistent=res.transition_consistent,
        threshold_measured=res.threshold_measured,
        threshold_model=res.threshold_model,
        errors={str(i): r.error for i, r in enumerate(res.rows) if r.error},
    )
    write_csv(out / "scan.csv", scan_table(res), meta)
    _write_json(out / "scan.json", _finite({**meta, "rows": [
        {"power": r.power, "error": r.error, "fit": r.fit.to_dict() if r.fit else None}
        for r in res.rows
    ]}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--jobs", type=int, help="worker threads; outputs do not depend on it")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dcsqz", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"dcsqz {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="synthesize an IGM/NGM ensemble")
    s.add_argument("--records", type=int, help="number of records (overrides config)")
    s.set_defaults(func=cmd_synth)

    a = sub.add_parser("analyze", parents=[common], help="reduce a container to noise statistics")
    a.add_argument("container")
    a.set_defaults(func=cmd_analyze)

    f = sub.add_parser("fit", parents=[common], help="fit the variance model to noise_stats.csv")
    f.add_argument("stats")
    f.set_defaults(func=cmd_fit)

    o = sub.add_parser("oracle", parents=[common], help="closed form vs Fock-space vs Monte Carlo")
    o.add_argument("params")
    o.set_defaults(func=cmd_oracle)

    c = sub.add_parser("scan", parents=[common], help="coherent-power scan")
    c.add_argument("--records", type=int, help="records per scan row")
    c.add_argument("--powers", type=float, nargs="+", help="coherent powers in watts")
    c.set_defaults(func=cmd_scan)
    return p


NUMERIC = (FloatingPointError, np.linalg.LinAlgError, ArithmeticError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, EmptySelectionError, LowCorrelationError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DcsqzError, ValueError, *NUMERIC) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

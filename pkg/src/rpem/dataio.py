"""Data ingestion, run-configuration parsing, and result serialization.

Dataset format: CSV with header ``ID,TIME,DOSE,DUR,OUT,<covariates...>``, one
row per event. A row with DOSE set (and OUT empty) is a dose event carrying a
DUR; a row with OUT set (and DOSE and DUR empty) is an observation. Rows are
grouped by ID, times non-decreasing within a subject, covariates constant per
subject. Missing values are empty cells only. Floats are serialized with 17
significant digits so every file round-trips exactly.
"""

from __future__ import annotations

import configparser
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import (
    ConfigError,
    DatasetFormatError,
    DoseEvent,
    MixtureParams,
    Model,
    PolynomialError,
    SubjectRecord,
)
from .driver import FitConfig, FitResult
from .gmm import align_components
from .mstep import MStepConfig, ParamErrors, ThinnedSamples
from .odesolve import SolverConfig
from .pkmodels import OneCompartmentModel, VoriconazoleModel
from .sim import SimSpec


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def _atomic_write(path: Path, text: str) -> None:
    """Write via a temp file in the target directory, then rename into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

_BASE_COLUMNS = ("ID", "TIME", "DOSE", "DUR", "OUT")


def parse_dataset(path: str | Path) -> list[SubjectRecord]:
    """Read a dose/observation CSV into subject records (first-appearance order)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DatasetFormatError("empty file")
    header = [c.strip() for c in lines[0].split(",")]
    if tuple(header[:5]) != _BASE_COLUMNS:
        raise DatasetFormatError(f"header must start with {','.join(_BASE_COLUMNS)}", line=1)
    cov_names = header[5:]
    if len(set(cov_names)) != len(cov_names):
        raise DatasetFormatError("duplicate covariate columns", line=1)

    def parse_float(cell: str, line_no: int, column: str) -> float:
        try:
            value = float(cell)
        except ValueError:
            raise DatasetFormatError(f"malformed numeric field {column}={cell!r}", line=line_no) from None
        if not math.isfinite(value):
            raise DatasetFormatError(f"non-finite value in column {column}", line=line_no)
        return value

    order: list[str] = []
    doses: dict[str, list[DoseEvent]] = {}
    obs: dict[str, list[tuple[float, float]]] = {}
    covs: dict[str, dict[str, float]] = {}
    last_time: dict[str, float] = {}
    closed: set[str] = set()

    for line_no, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        cells = [c.strip() for c in raw.split(",")]
        if len(cells) != len(header):
            raise DatasetFormatError(f"expected {len(header)} columns, got {len(cells)}", line=line_no)
        sid = cells[0]
        if not sid:
            raise DatasetFormatError("empty ID", line=line_no)
        if sid not in order:
            order.append(sid)
            doses[sid] = []
            obs[sid] = []
            covs[sid] = {}
            last_time[sid] = -math.inf
        elif sid in closed:
            raise DatasetFormatError(f"rows for subject {sid} are not contiguous", line=line_no)
        if order[-1] != sid:
            raise DatasetFormatError(f"rows for subject {sid} are not contiguous", line=line_no)
        for other in order[:-1]:
            closed.add(other)

        time = parse_float(cells[1], line_no, "TIME")
        if time < 0:
            raise DatasetFormatError("TIME must be non-negative", line=line_no)
        if time < last_time[sid]:
            raise DatasetFormatError(f"TIME not sorted within subject {sid}", line=line_no)
        last_time[sid] = time
        dose_cell, dur_cell, out_cell = cells[2], cells[3], cells[4]
        if dose_cell and out_cell:
            raise DatasetFormatError("a row cannot carry both DOSE and OUT", line=line_no)
        if dose_cell:
            amount = parse_float(dose_cell, line_no, "DOSE")
            if not dur_cell:
                raise DatasetFormatError("dose rows must carry DUR (0 for a bolus)", line=line_no)
            duration = parse_float(dur_cell, line_no, "DUR")
            try:
                doses[sid].append(DoseEvent(time=time, amount=amount, duration=duration))
            except ValueError as exc:
                raise DatasetFormatError(str(exc), line=line_no) from None
        elif out_cell:
            if dur_cell:
                raise DatasetFormatError("observation rows must leave DUR empty", line=line_no)
            obs[sid].append((time, parse_float(out_cell, line_no, "OUT")))
        else:
            raise DatasetFormatError("a row must carry either DOSE or OUT", line=line_no)
        for name, cell in zip(cov_names, cells[5:]):
            if not cell:
                raise DatasetFormatError(f"missing covariate {name}", line=line_no)
            value = parse_float(cell, line_no, name)
            if name in covs[sid] and covs[sid][name] != value:
                raise DatasetFormatError(
                    f"covariate {name} varies within subject {sid}", line=line_no
                )
            covs[sid][name] = value

    subjects = []
    for sid in order:
        try:
            subjects.append(
                SubjectRecord(id=sid, doses=tuple(doses[sid]), observations=tuple(obs[sid]), covariates=covs[sid])
            )
        except ValueError as exc:
            raise DatasetFormatError(str(exc)) from None
    return subjects


def format_dataset(subjects: Sequence[SubjectRecord]) -> str:
    cov_names: list[str] = []
    for s in subjects:
        for name in s.covariates:
            if name not in cov_names:
                cov_names.append(name)
    rows = [",".join(_BASE_COLUMNS + tuple(cov_names))]
    for s in subjects:
        cov_cells = [_fmt(s.covariates[name]) for name in cov_names]
        events: list[tuple[float, int, list[str]]] = []
        for d in s.doses:
            events.append((d.time, 0, [s.id, _fmt(d.time), _fmt(d.amount), _fmt(d.duration), ""]))
        for t, y in s.observations:
            events.append((t, 1, [s.id, _fmt(t), "", "", _fmt(y)]))
        events.sort(key=lambda e: (e[0], e[1]))  # dose precedes observation at equal time
        for _, _, cells in events:
            rows.append(",".join(cells + cov_cells))
    return "\n".join(rows) + "\n"


def write_dataset(subjects: Sequence[SubjectRecord], path: str | Path) -> None:
    _atomic_write(Path(path), format_dataset(subjects))


def write_thetas(ids: Sequence[str], thetas: np.ndarray, names: Sequence[str], path: str | Path) -> None:
    """Per-subject parameter-vector table (simulation truth)."""
    rows = [",".join(("ID",) + tuple(names))]
    for sid, theta in zip(ids, np.asarray(thetas, dtype=float)):
        rows.append(",".join([sid] + [_fmt(v) for v in theta]))
    _atomic_write(Path(path), "\n".join(rows) + "\n")


def parse_thetas(path: str | Path) -> tuple[list[str], np.ndarray, list[str]]:
    """Returns (ids, thetas, parameter names)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    if header[0] != "ID":
        raise DatasetFormatError("theta table must start with an ID column", line=1)
    names = header[1:]
    ids, rows = [], []
    for line_no, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        cells = raw.split(",")
        if len(cells) != len(header):
            raise DatasetFormatError("wrong column count", line=line_no)
        ids.append(cells[0])
        try:
            rows.append([float(c) for c in cells[1:]])
        except ValueError as exc:
            raise DatasetFormatError(str(exc), line=line_no) from None
    return ids, np.array(rows), names


# ---------------------------------------------------------------------------
# Parameter tables
# ---------------------------------------------------------------------------


def format_params(
    params: MixtureParams, names: Sequence[str], errors: ParamErrors | None = None
) -> str:
    """parameter,component,estimate,error rows; structural metadata in
    comment lines so the table re-parses to an equal MixtureParams."""
    if len(names) != params.p:
        raise ValueError("coordinate name count does not match parameter dimension")
    lines = [
        f"# theta: {' '.join(names)}",
        f"# shared: {' '.join(names[j] for j in params.shared)}",
        "parameter,component,estimate,error",
    ]

    def err_cell(value: float | None) -> str:
        return "" if value is None else _fmt(value)

    for k in range(params.K):
        e = None
        if errors is not None:
            e = errors.weights[k]
        elif params.weight_se is not None:
            e = params.weight_se[k]
        lines.append(f"w,{k + 1},{_fmt(params.weights[k])},{err_cell(e)}")
    for k in range(params.K):
        for j, name in enumerate(names):
            e = errors.means[k, j] if errors is not None else None
            lines.append(f"mu[{name}],{k + 1},{_fmt(params.means[k, j])},{err_cell(e)}")
    for k in range(params.K):
        for i in range(params.p):
            for j in range(i, params.p):
                e = errors.covariances[k, i, j] if errors is not None else None
                lines.append(
                    f"cov[{names[i]};{names[j]}],{k + 1},{_fmt(params.covariances[k, i, j])},{err_cell(e)}"
                )
    if params.sigma is not None:
        e = errors.sigma if errors is not None else None
        lines.append(f"sigma_resid,,{_fmt(params.sigma)},{err_cell(e)}")
    return "\n".join(lines) + "\n"


def write_params(
    params: MixtureParams, names: Sequence[str], path: str | Path, errors: ParamErrors | None = None
) -> None:
    _atomic_write(Path(path), format_params(params, names, errors))


def parse_params(path: str | Path) -> tuple[MixtureParams, list[str]]:
    """Inverse of :func:`write_params`; returns (params, coordinate names)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    names: list[str] = []
    shared_names: list[str] = []
    body: list[tuple[int, str]] = []
    for line_no, raw in enumerate(lines, start=1):
        if raw.startswith("# theta:"):
            names = raw.split(":", 1)[1].split()
        elif raw.startswith("# shared:"):
            shared_names = raw.split(":", 1)[1].split()
        elif raw.startswith("#") or not raw.strip():
            continue
        else:
            body.append((line_no, raw))
    if not names:
        raise DatasetFormatError("missing '# theta:' names line")
    if not body or body[0][1] != "parameter,component,estimate,error":
        raise DatasetFormatError("missing parameter table header")
    p = len(names)
    index = {name: j for j, name in enumerate(names)}
    weights: dict[int, float] = {}
    weight_err: dict[int, float] = {}
    means: dict[tuple[int, int], float] = {}
    covs: dict[tuple[int, int, int], float] = {}
    sigma = None
    for line_no, raw in body[1:]:
        cells = raw.split(",")
        if len(cells) != 4:
            raise DatasetFormatError("expected 4 columns", line=line_no)
        name, comp_cell, est_cell, err_cell = cells
        try:
            value = float(est_cell)
        except ValueError:
            raise DatasetFormatError(f"malformed estimate {est_cell!r}", line=line_no) from None
        if name == "sigma_resid":
            sigma = value
            continue
        try:
            k = int(comp_cell) - 1
        except ValueError:
            raise DatasetFormatError(f"malformed component {comp_cell!r}", line=line_no) from None
        if name == "w":
            weights[k] = value
            if err_cell:
                weight_err[k] = float(err_cell)
        elif name.startswith("mu[") and name.endswith("]"):
            means[(k, index[name[3:-1]])] = value
        elif name.startswith("cov[") and name.endswith("]"):
            a, b = name[4:-1].split(";")
            covs[(k, index[a], index[b])] = value
        else:
            raise DatasetFormatError(f"unknown parameter row {name!r}", line=line_no)
    K = max(weights) + 1
    w = np.array([weights[k] for k in range(K)])
    mu = np.zeros((K, p))
    for (k, j), value in means.items():
        mu[k, j] = value
    cov = np.zeros((K, p, p))
    for (k, i, j), value in covs.items():
        cov[k, i, j] = value
        cov[k, j, i] = value
    w_se = None
    if weight_err:
        w_se = np.array([weight_err.get(k, 0.0) for k in range(K)])
    params = MixtureParams(
        weights=w,
        means=mu,
        covariances=cov,
        sigma=sigma,
        shared=tuple(index[s] for s in shared_names),
        weight_se=w_se,
    )
    return params, names


# ---------------------------------------------------------------------------
# Result files and reporting
# ---------------------------------------------------------------------------


def format_trace(trace: np.ndarray, accept_rates: np.ndarray) -> str:
    rows = ["iteration,loglik,accept_rate"]
    for r, (ll, ar) in enumerate(zip(trace, accept_rates)):
        rows.append(f"{r},{_fmt(ll)},{_fmt(ar)}")
    return "\n".join(rows) + "\n"


def parse_trace(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "iteration,loglik,accept_rate":
        raise DatasetFormatError("bad trace header")
    ll, ar = [], []
    for raw in lines[1:]:
        if not raw.strip():
            continue
        cells = raw.split(",")
        ll.append(float(cells[1]))
        ar.append(float(cells[2]))
    return np.array(ll), np.array(ar)


def format_samples(samples: ThinnedSamples, names: Sequence[str]) -> str:
    rows = [",".join(("subject", "component") + tuple(names))]
    for i in range(len(samples)):
        cells = [str(int(samples.subject[i]) + 1), str(int(samples.component[i]) + 1)]
        cells += [_fmt(v) for v in samples.theta[i]]
        rows.append(",".join(cells))
    return "\n".join(rows) + "\n"


def percentage_errors(
    estimate: MixtureParams, truth: MixtureParams
) -> dict[str, "np.ndarray | float"]:
    """Per-coordinate percentage errors |est - true| / true, with the
    estimate's components aligned to the truth by nearest means.

    ``mu`` collects every (component, coordinate) mean error; ``sigma`` the
    errors of the square roots of the covariance diagonals; means over the two
    groups summarize the reconstruction quality.
    """
    if estimate.K != truth.K or estimate.p != truth.p:
        raise ValueError("estimate and truth shapes differ")
    est = align_components(estimate, truth) if truth.K > 1 else estimate
    mu_err = np.abs(est.means - truth.means) / np.abs(truth.means)
    sig_est = np.sqrt(np.diagonal(est.covariances, axis1=1, axis2=2))
    sig_true = np.sqrt(np.diagonal(truth.covariances, axis1=1, axis2=2))
    sigma_err = np.abs(sig_est - sig_true) / np.abs(sig_true)
    out: dict[str, np.ndarray | float] = {
        "mu": mu_err,
        "sigma": sigma_err,
        "w": np.abs(est.weights - truth.weights),
        "mean_mu": float(mu_err.mean()),
        "mean_sigma": float(sigma_err.mean()),
    }
    if estimate.sigma is not None and truth.sigma is not None:
        out["sigma_resid"] = abs(estimate.sigma - truth.sigma) / abs(truth.sigma)
    return out


def format_summary(
    result: FitResult,
    names: Sequence[str],
    truth: MixtureParams | None = None,
) -> str:
    lines = [
        f"converged: {result.converged}",
        f"iterations: {result.iterations}",
        f"final loglik: {_fmt(result.trace[-1])}",
        f"stabilized samples: {len(result.samples)}",
        f"mean acceptance rate: {_fmt(float(np.mean(result.diagnostics.accept_rates)))}",
    ]
    for variant, params in (("", result.params), ("gmm ", result.gmm_params)):
        if params is None:
            continue
        if truth is not None:
            pe = percentage_errors(params, truth)
            lines.append(f"{variant}percentage errors vs truth:")
            for k in range(params.K):
                for j, name in enumerate(names):
                    lines.append(f"  {variant}mu[{name}] c{k + 1}: {100 * pe['mu'][k, j]:.2f}%")
                for j, name in enumerate(names):
                    lines.append(f"  {variant}sigma[{name}] c{k + 1}: {100 * pe['sigma'][k, j]:.2f}%")
            if "sigma_resid" in pe:
                lines.append(f"  {variant}sigma_resid: {100 * pe['sigma_resid']:.2f}%")
            lines.append(f"  {variant}mean mu error: {100 * pe['mean_mu']:.2f}%")
            lines.append(f"  {variant}mean sigma error: {100 * pe['mean_sigma']:.2f}%")
    return "\n".join(lines) + "\n"


def write_result(
    result: FitResult,
    outdir: str | Path,
    names: Sequence[str],
    truth: MixtureParams | None = None,
) -> dict[str, Path]:
    """Emit params.csv, trace.csv, samples.csv, gmm_params.csv and summary.txt.

    All files are rendered first and renamed into place afterwards, so an
    interrupted run leaves no partially-written outputs.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    texts = {
        "params.csv": format_params(result.params, names, result.errors),
        "trace.csv": format_trace(result.trace, result.diagnostics.accept_rates),
        "samples.csv": format_samples(result.samples, names),
        "summary.txt": format_summary(result, names, truth),
    }
    if result.gmm_params is not None:
        texts["gmm_params.csv"] = format_params(result.gmm_params, names)
    paths = {}
    for name, text in texts.items():
        path = outdir / name
        _atomic_write(path, text)
        paths[name] = path
    return paths


# ---------------------------------------------------------------------------
# Run-configuration files
# ---------------------------------------------------------------------------

_FIT_SECTIONS = ("model", "error", "init", "estep", "mstep", "stopping", "seed")
_SIM_SECTIONS = ("model", "error", "truth", "sim")
_SECTION_KEYS = {
    "model": {"kind", "rtol", "atol", "max_steps", "weight_covariate"},
    "error": {"kind", "c0", "c1", "c2", "c3"},
    "estep": {"m_gauss"},
    "mstep": {"trials", "thin", "burn_in", "noisy"},
    "stopping": {"window", "max_iterations"},
    "seed": {"value"},
    "sim": {"n", "obs_times", "doses"},
}
_KNOWN_SECTIONS = set(_SECTION_KEYS) | {"init", "truth", "covariates"}


@dataclass
class RunConfig:
    """Parsed configuration file; fit and simulation workflows may share one."""

    model: Model
    names: tuple[str, ...]
    init: MixtureParams | None
    truth: MixtureParams | None
    m_gauss: int
    mstep: MStepConfig
    window: int
    max_iterations: int
    seed: int
    sim_n: int | None
    sim_doses: tuple[DoseEvent, ...] | None
    sim_obs_times: tuple[float, ...] | None
    sim_covariates: dict[str, float]


def _floats(text: str) -> list[float]:
    return [float(tok) for tok in text.replace(",", " ").split()]


def _mixture_from_section(
    section: configparser.SectionProxy, names: Sequence[str], section_name: str, proportional: bool
) -> MixtureParams:
    keys = set(section.keys())
    try:
        K = int(section["k"])
    except KeyError:
        raise ConfigError(f"[{section_name}] requires k") from None
    allowed = {"k", "weights", "shared"} | {f"mean.{c + 1}" for c in range(K)} | {
        f"sd.{c + 1}" for c in range(K)
    }
    if proportional:
        allowed.add("sigma")
    unknown = keys - allowed
    if unknown:
        raise ConfigError(f"[{section_name}] unknown keys: {sorted(unknown)}")
    p = len(names)
    try:
        weights = np.array(_floats(section["weights"]))
        means = np.array([_floats(section[f"mean.{c + 1}"]) for c in range(K)])
        sds = np.array([_floats(section[f"sd.{c + 1}"]) for c in range(K)])
    except KeyError as exc:
        raise ConfigError(f"[{section_name}] missing key {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"[{section_name}] malformed value: {exc}") from None
    if means.shape != (K, p) or sds.shape != (K, p) or weights.shape != (K,):
        raise ConfigError(f"[{section_name}] needs {p} values per component and {K} weights")
    shared: tuple[int, ...] = ()
    if "shared" in section and section["shared"].strip():
        index = {name: j for j, name in enumerate(names)}
        try:
            shared = tuple(index[tok] for tok in section["shared"].split())
        except KeyError as exc:
            raise ConfigError(f"[{section_name}] unknown shared coordinate {exc}") from None
    sigma = None
    if proportional:
        try:
            sigma = float(section["sigma"])
        except KeyError:
            raise ConfigError(f"[{section_name}] requires sigma for proportional error") from None
    covs = np.array([np.diag(sd**2) for sd in sds])
    try:
        return MixtureParams(weights=weights, means=means, covariances=covs, sigma=sigma, shared=shared)
    except ValueError as exc:
        raise ConfigError(f"[{section_name}] invalid mixture: {exc}") from None


def _check_keys(parser: configparser.ConfigParser, section: str) -> None:
    if section in _SECTION_KEYS and section in parser:
        unknown = set(parser[section].keys()) - _SECTION_KEYS[section]
        if unknown:
            raise ConfigError(f"[{section}] unknown keys: {sorted(unknown)}")


def load_config(path: str | Path) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    unknown_sections = set(parser.sections()) - _KNOWN_SECTIONS
    if unknown_sections:
        raise ConfigError(f"unknown sections: {sorted(unknown_sections)}")
    for section in _SECTION_KEYS:
        _check_keys(parser, section)
    for required in ("model", "error", "seed"):
        if required not in parser:
            raise ConfigError(f"missing [{required}] section")

    model_sec = parser["model"]
    error_sec = parser["error"]
    kind = model_sec.get("kind")
    err_kind = error_sec.get("kind")
    try:
        if kind == "one_compartment":
            if err_kind != "proportional":
                raise ConfigError("one_compartment requires [error] kind = proportional")
            for key in ("rtol", "atol", "max_steps", "weight_covariate"):
                if key in model_sec:
                    raise ConfigError(f"[model] key {key} only applies to voriconazole")
            model: Model = OneCompartmentModel()
            proportional = True
        elif kind == "voriconazole":
            if err_kind != "polynomial":
                raise ConfigError("voriconazole requires [error] kind = polynomial")
            noise = PolynomialError(
                c0=error_sec.getfloat("c0", 0.0),
                c1=error_sec.getfloat("c1", 0.0),
                c2=error_sec.getfloat("c2", 0.0),
                c3=error_sec.getfloat("c3", 0.0),
            )
            solver = SolverConfig(
                rtol=model_sec.getfloat("rtol", 1e-6),
                atol=model_sec.getfloat("atol", 1e-6),
                max_steps=model_sec.getint("max_steps", 100_000),
            )
            model = VoriconazoleModel(
                noise=noise, solver=solver, weight_covariate=model_sec.get("weight_covariate", "wt")
            )
            proportional = False
        else:
            raise ConfigError(f"unknown model kind {kind!r}")
        if proportional and any(key in error_sec for key in ("c0", "c1", "c2", "c3")):
            raise ConfigError("polynomial coefficients are not valid for proportional error")
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    names = model.param_names
    init = truth = None
    if "init" in parser:
        init = _mixture_from_section(parser["init"], names, "init", proportional)
    if "truth" in parser:
        truth = _mixture_from_section(parser["truth"], names, "truth", proportional)

    try:
        m_gauss = parser.getint("estep", "m_gauss", fallback=1000)
        mstep_sec = parser["mstep"] if "mstep" in parser else {}
        mstep = MStepConfig(
            trials=int(mstep_sec["trials"]) if "trials" in mstep_sec else None,
            thin=int(mstep_sec.get("thin", 80)),
            burn_in=int(mstep_sec["burn_in"]) if "burn_in" in mstep_sec else None,
            noisy=str(mstep_sec.get("noisy", "true")).strip().lower() in ("1", "true", "yes", "on"),
        )
        window = parser.getint("stopping", "window", fallback=30)
        max_iterations = parser.getint("stopping", "max_iterations", fallback=200)
        seed = parser.getint("seed", "value")
    except (ValueError, configparser.NoOptionError) as exc:
        raise ConfigError(str(exc)) from None

    sim_n = sim_doses = sim_obs = None
    covariates: dict[str, float] = {}
    if "sim" in parser:
        sim_sec = parser["sim"]
        try:
            sim_n = int(sim_sec["n"])
            sim_obs = tuple(_floats(sim_sec["obs_times"]))
            sim_doses = tuple(
                DoseEvent(time=float(t), amount=float(a), duration=float(d))
                for t, a, d in (tok.split(":") for tok in sim_sec["doses"].split())
            )
        except KeyError as exc:
            raise ConfigError(f"[sim] missing key {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"[sim] malformed value: {exc}") from None
    if "covariates" in parser:
        try:
            covariates = {name: float(value) for name, value in parser["covariates"].items()}
        except ValueError as exc:
            raise ConfigError(f"[covariates] malformed value: {exc}") from None

    return RunConfig(
        model=model,
        names=names,
        init=init,
        truth=truth,
        m_gauss=m_gauss,
        mstep=mstep,
        window=window,
        max_iterations=max_iterations,
        seed=seed,
        sim_n=sim_n,
        sim_doses=sim_doses,
        sim_obs_times=sim_obs,
        sim_covariates=covariates,
    )


def build_fit_config(
    cfg: RunConfig, seed: int | None = None, workers: int = 1
) -> FitConfig:
    if cfg.init is None:
        raise ConfigError("fitting requires an [init] section")
    return FitConfig(
        model=cfg.model,
        initial=cfg.init,
        m_gauss=cfg.m_gauss,
        mstep=cfg.mstep,
        max_iterations=cfg.max_iterations,
        window=cfg.window,
        seed=cfg.seed if seed is None else seed,
        workers=workers,
    )


def build_sim_spec(cfg: RunConfig, seed: int | None = None) -> SimSpec:
    if cfg.truth is None or cfg.sim_n is None:
        raise ConfigError("simulation requires [truth] and [sim] sections")
    return SimSpec(
        model=cfg.model,
        truth=cfg.truth,
        n=cfg.sim_n,
        doses=cfg.sim_doses,
        obs_times=cfg.sim_obs_times,
        covariates=cfg.sim_covariates,
        seed=cfg.seed if seed is None else seed,
    )

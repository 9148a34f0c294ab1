"""Ensemble experiment protocol: build/train/rank many RCs per spectral radius.

A sweep trains `ensemble_size` reservoirs per spectral-radius grid point,
ranks the closed-loop reconstructions by the mean square error between the
power spectra of the predicted and true first state component, retains the
best, and attaches conditional and autonomous Lyapunov spectra plus
Kaplan-Yorke dimensions to every record. Tables are CSV, records are JSON
lines, plots are SVG.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .lyapunov import (KYResult, LyapunovSpectrum, cle_spectrum, kaplan_yorke,
                       rc_spectrum, spectrum_json_row)
from .reservoir import (FeatureMap, ReservoirParams, RolloutDivergenceError,
                        apply_feature_map, build_reservoir, drive, rollout)
from .systems import (SystemSpec, Trajectory, downsample, integrate,
                      true_lyapunov_spectrum)
from .training import fit_readout

logger = logging.getLogger(__name__)

FLAG_DIVERGED = "diverged"
FLAG_NO_GS = "no_gs"
FLAG_SATURATED_KY = "saturated_ky"


class ConfigError(ValueError):
    """Invalid sweep configuration (CLI exit code 2)."""


@dataclass
class SweepConfig:
    """Everything a sweep needs; serializable to/from a JSON document."""

    system: SystemSpec
    dt: float = 0.001
    downsample: int = 20
    n_train: int = 40000
    n_ranking: int = 20000
    n_rc_spectrum_steps: int = 100000
    ensemble_size: int = 20
    retain_top: int = 10
    spectral_radius_grid: tuple = tuple(np.round(np.arange(0.1, 1.21, 0.1), 2))
    sigma_in_range: tuple = (0.0, 0.2)
    n_nodes: int = 300
    feature_map: str = "stacked"
    ridge: float = 0.0
    master_seed: int = 0
    avg_degree: float = 6.0
    discard: int = 1000
    transient_time: float = 10.0
    x0: Optional[tuple] = None
    cle_k: Optional[int] = None
    rc_k: Optional[int] = None
    divergence_threshold: float = 1e6
    true_spectrum_steps: int = 1000000
    n_workers: int = 1

    def __post_init__(self):
        if self.retain_top > self.ensemble_size:
            raise ConfigError("retain_top must not exceed ensemble_size")
        if any(v < 0 for v in self.spectral_radius_grid):
            raise ConfigError("spectral radius grid values must be >= 0")
        lo, hi = self.sigma_in_range
        if lo < 0 or not hi > lo:
            raise ConfigError("sigma_in_range must satisfy 0 <= lo < hi")
        if self.downsample < 1 or self.dt <= 0:
            raise ConfigError("need dt > 0 and downsample >= 1")
        if self.n_train <= self.discard + 1:
            raise ConfigError("n_train must exceed discard + 1")
        if self.n_ranking < 256:
            raise ConfigError("n_ranking must be >= 256 for the spectral score")

    @property
    def tau(self) -> float:
        return self.dt * self.downsample

    def feature_map_obj(self) -> FeatureMap:
        return FeatureMap(self.feature_map, self.n_nodes)

    def effective_cle_k(self) -> int:
        return self.cle_k if self.cle_k is not None else min(self.n_nodes, 20)

    def effective_rc_k(self) -> int:
        return self.rc_k if self.rc_k is not None else self.system.dim + 4

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["system"] = {k: v for k, v in dataclasses.asdict(self.system).items()
                         if v is not None}
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "SweepConfig":
        doc = dict(doc)
        try:
            system = SystemSpec(**doc.pop("system"))
            known = {f.name for f in dataclasses.fields(cls)}
            unknown = set(doc) - known
            if unknown:
                raise ConfigError(f"unknown config fields: {sorted(unknown)}")
            for name in ("spectral_radius_grid", "sigma_in_range", "x0"):
                if doc.get(name) is not None:
                    doc[name] = tuple(doc[name])
            return cls(system=system, **doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def lorenz_desk_config(**overrides) -> SweepConfig:
    """Desk-scale standard-Lorenz sweep (full-scale uses ensemble_size=1000)."""
    base = dict(system=SystemSpec.lorenz(noise_amplitude=0.01))
    base.update(overrides)
    return SweepConfig(**base)


def qi_desk_config(**overrides) -> SweepConfig:
    """Desk-scale Qi sweep: 400 nodes, plain linear readout, ridge 1e-8."""
    base = dict(system=SystemSpec.qi(noise_amplitude=0.01), dt=0.0001,
                downsample=100, n_nodes=400, feature_map="identity",
                ridge=1e-8, sigma_in_range=(0.0, 1.0),
                spectral_radius_grid=(0.2, 0.6, 1.0, 1.2))
    base.update(overrides)
    return SweepConfig(**base)


@dataclass
class ExperimentRecord:
    """One trained RC: provenance, ranking score, spectra, dimensions."""

    system: str
    spectral_radius: float
    sigma_in: float
    seed: int
    score: float
    cle: Optional[LyapunovSpectrum]
    rc: Optional[LyapunovSpectrum]
    ky_true: Optional[KYResult]
    ky_rc: Optional[KYResult]
    flags: tuple = ()
    target_exponents: tuple = ()
    train_mse: float = float("nan")

    @property
    def diverged(self) -> bool:
        return FLAG_DIVERGED in self.flags

    @property
    def lambda_r_max(self) -> float:
        return self.cle.max_exponent if self.cle is not None else float("nan")


def member_seed(master_seed: int, sr_index: int, member_index: int) -> int:
    """Deterministic per-member seed, independent of worker scheduling."""
    seq = np.random.SeedSequence((master_seed, sr_index, member_index))
    return int(seq.generate_state(1)[0])


def generate_training_data(config: SweepConfig) -> Trajectory:
    """Integrate the target system and downsample to the training rate.

    Yields n_train + n_ranking samples at tau = dt * downsample; the
    ranking segment continues seamlessly from the training segment.
    """
    n_samples = config.n_train + config.n_ranking
    n_raw = (n_samples - 1) * config.downsample + 1
    x0 = config.x0 if config.x0 is not None else config.system.default_x0()
    raw = integrate(config.system, np.asarray(x0, dtype=float), config.dt,
                    n_raw, seed=config.master_seed,
                    transient=config.transient_time)
    return downsample(raw, config.downsample)


def power_spectrum(series, tau: float, n_segments: int = 8):
    """Welch power spectral density in decibels.

    Eight equal segments with 50% overlap, Hann window, averaged one-sided
    periodograms; power is floored at -300 dB. Returns (frequencies, dB).
    """
    x = np.asarray(series, dtype=float).ravel()
    if x.size < 256:
        raise ValueError("need at least 256 samples for the spectral estimate")
    m = (2 * x.size) // (n_segments + 1)
    hop = m // 2
    window = np.hanning(m)
    norm = 1.0 / (np.sum(window ** 2) / tau)
    acc = np.zeros(m // 2 + 1)
    for i in range(n_segments):
        seg = x[i * hop:i * hop + m]
        spec = np.fft.rfft(window * seg)
        acc += np.abs(spec) ** 2
    psd = acc * (norm / n_segments)
    psd[1:] *= 2.0
    if m % 2 == 0:
        psd[-1] *= 0.5
    freqs = np.fft.rfftfreq(m, d=tau)
    return freqs, 10.0 * np.log10(np.maximum(psd, 1e-30))


def psd_mse(a, b, tau: float) -> float:
    """Mean squared difference of the two dB power spectra."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("sequences must have equal length")
    _, pa = power_spectrum(a, tau)
    _, pb = power_spectrum(b, tau)
    return float(np.mean((pa - pb) ** 2))


def run_single(config: SweepConfig, spectral_radius: float, seed: int,
               data: Optional[Trajectory] = None,
               true_spectrum: Optional[LyapunovSpectrum] = None) -> ExperimentRecord:
    """Train, rank, and analyze one ensemble member.

    Any divergence shows up as record flags, never as an exception. data
    and true_spectrum may be passed in to share work across members; when
    omitted they are recomputed from the config (identical results).
    """
    if data is None:
        data = generate_training_data(config)
    if true_spectrum is None:
        true_spectrum = true_lyapunov_spectrum(
            config.system, config.dt,
            min(config.true_spectrum_steps, 200000), seed=config.master_seed,
            transient=config.transient_time)
    rng = np.random.default_rng([seed])
    lo, hi = config.sigma_in_range
    sigma_in = hi - rng.random() * (hi - lo)
    params = ReservoirParams(n_nodes=config.n_nodes, input_dim=config.system.dim,
                             spectral_radius=spectral_radius,
                             input_strength=sigma_in,
                             avg_degree=config.avg_degree, seed=seed)
    res = build_reservoir(params)
    fm = config.feature_map_obj()

    train_traj = Trajectory(data.samples[:config.n_train], data.tau)
    states = drive(res, train_traj, discard=config.discard)
    feats = apply_feature_map(fm, states[:-1])
    targets = train_traj.samples[config.discard + 1:]
    readout = fit_readout(feats, targets, config.ridge, fm)
    train_mse = float(np.mean((feats @ readout.W_out.T - targets) ** 2))

    flags = []
    score = float("nan")
    rc_spec = None
    ky_rc = None
    r_final = states[-1]
    roll = rollout(res, readout, r_final, config.n_ranking,
                   divergence_threshold=config.divergence_threshold)
    if roll.diverged:
        flags.append(FLAG_DIVERGED)
    else:
        truth = data.samples[config.n_train:, 0]
        score = psd_mse(roll.outputs[:, 0], truth, data.tau)

    cle = cle_spectrum(res, train_traj, k=config.effective_cle_k(),
                       discard=config.discard)
    if cle.max_exponent >= 0:
        flags.append(FLAG_NO_GS)

    if not roll.diverged:
        try:
            rc_spec = rc_spectrum(res, readout, config.n_rc_spectrum_steps,
                                  k=config.effective_rc_k(), tau=data.tau,
                                  r0=r_final,
                                  divergence_threshold=config.divergence_threshold)
            ky_rc = kaplan_yorke(rc_spec)
            if ky_rc.saturated:
                flags.append(FLAG_SATURATED_KY)
        except RolloutDivergenceError:
            flags.append(FLAG_DIVERGED)

    return ExperimentRecord(
        system=config.system.kind,
        spectral_radius=float(spectral_radius),
        sigma_in=float(sigma_in),
        seed=int(seed),
        score=score,
        cle=cle,
        rc=rc_spec,
        ky_true=kaplan_yorke(true_spectrum),
        ky_rc=ky_rc,
        flags=tuple(flags),
        target_exponents=tuple(float(v) for v in true_spectrum.exponents),
        train_mse=train_mse,
    )


def _run_member(args):
    config, sr, seed, data, true_spec = args
    return run_single(config, sr, seed, data=data, true_spectrum=true_spec)


def run_sweep(config: SweepConfig, output_dir=None):
    """Run the full grid; return the retained (best-ranked) records.

    Per grid point, non-diverged members are sorted by psd_mse ascending
    and the retain_top best are kept. With output_dir set, the full results
    table (results.csv), all records (records.jsonl), and the retained
    records (retained.jsonl) are written there.
    """
    data = generate_training_data(config)
    true_spec = true_lyapunov_spectrum(config.system, config.dt,
                                       config.true_spectrum_steps,
                                       seed=config.master_seed,
                                       transient=config.transient_time)
    tasks = [(config, sr, member_seed(config.master_seed, si, mi), data, true_spec)
             for si, sr in enumerate(config.spectral_radius_grid)
             for mi in range(config.ensemble_size)]
    if config.n_workers > 1:
        with ProcessPoolExecutor(max_workers=config.n_workers) as pool:
            records = list(pool.map(_run_member, tasks, chunksize=1))
    else:
        records = [_run_member(t) for t in tasks]

    retained = []
    for si, sr in enumerate(config.spectral_radius_grid):
        members = records[si * config.ensemble_size:(si + 1) * config.ensemble_size]
        ranked = sorted((r for r in members if not r.diverged),
                        key=lambda r: r.score)
        if not ranked:
            logger.warning("all %d members diverged at spectral radius %g",
                           config.ensemble_size, sr)
        retained.extend(ranked[:config.retain_top])

    if output_dir is not None:
        os.makedirs(output_dir, exist_ok=True)
        write_results_csv(records, os.path.join(output_dir, "results.csv"))
        write_records_jsonl(records, os.path.join(output_dir, "records.jsonl"))
        write_records_jsonl(retained, os.path.join(output_dir, "retained.jsonl"))
    return retained


def trusted_exponent_mask(record: ExperimentRecord, margin: float = 0.0):
    """Trust rule: RC exponents at or below the maximal CLE are untrusted."""
    if record.rc is None or record.cle is None:
        raise ValueError("record has no spectra to compare")
    return record.rc.exponents > record.cle.max_exponent + margin


def _fmt(value) -> str:
    if value is None:
        return ""
    return f"{value:.17g}"


def write_results_csv(records: Sequence[ExperimentRecord], path) -> None:
    """Full results table, one row per member."""
    k = max((r.rc.n_exponents for r in records if r.rc is not None), default=0)
    header = (["system", "spectral_radius", "sigma_in", "seed", "score",
               "lambda_r_max"]
              + [f"lambda_rc_{i + 1}" for i in range(k)]
              + ["ky_rc", "ky_true", "flags"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in records:
            rc_vals = [""] * k
            if r.rc is not None:
                for i, v in enumerate(r.rc.exponents):
                    rc_vals[i] = _fmt(v)
            writer.writerow(
                [r.system, _fmt(r.spectral_radius), _fmt(r.sigma_in), r.seed,
                 _fmt(r.score), _fmt(r.lambda_r_max)]
                + rc_vals
                + [_fmt(r.ky_rc.dimension) if r.ky_rc else "",
                   _fmt(r.ky_true.dimension) if r.ky_true else "",
                   ";".join(r.flags)])


def _spectrum_to_dict(spec: Optional[LyapunovSpectrum]):
    if spec is None:
        return None
    return {"kind": spec.kind, "exponents": list(map(float, spec.exponents)),
            "n_steps": spec.n_steps, "tau": spec.tau,
            "n_collapsed": spec.n_collapsed}


def _spectrum_from_dict(doc) -> Optional[LyapunovSpectrum]:
    if doc is None:
        return None
    return LyapunovSpectrum(np.asarray(doc["exponents"]), doc["n_steps"],
                            doc["tau"], doc["kind"], doc["n_collapsed"])


def record_to_dict(record: ExperimentRecord) -> dict:
    doc = {
        "system": record.system,
        "spectral_radius": record.spectral_radius,
        "sigma_in": record.sigma_in,
        "seed": record.seed,
        "score": record.score,
        "cle": _spectrum_to_dict(record.cle),
        "rc": _spectrum_to_dict(record.rc),
        "ky_true": dataclasses.asdict(record.ky_true) if record.ky_true else None,
        "ky_rc": dataclasses.asdict(record.ky_rc) if record.ky_rc else None,
        "flags": list(record.flags),
        "target_exponents": list(record.target_exponents),
        "train_mse": record.train_mse,
    }
    return doc


def record_from_dict(doc: dict) -> ExperimentRecord:
    return ExperimentRecord(
        system=doc["system"], spectral_radius=doc["spectral_radius"],
        sigma_in=doc["sigma_in"], seed=doc["seed"], score=doc["score"],
        cle=_spectrum_from_dict(doc["cle"]), rc=_spectrum_from_dict(doc["rc"]),
        ky_true=KYResult(**doc["ky_true"]) if doc["ky_true"] else None,
        ky_rc=KYResult(**doc["ky_rc"]) if doc["ky_rc"] else None,
        flags=tuple(doc["flags"]),
        target_exponents=tuple(doc["target_exponents"]),
        train_mse=doc.get("train_mse", float("nan")),
    )


def write_records_jsonl(records: Sequence[ExperimentRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(record_to_dict(r)) + "\n")


def read_records_jsonl(path):
    with open(path) as fh:
        return [record_from_dict(json.loads(line)) for line in fh if line.strip()]


def report(records: Sequence[ExperimentRecord], output_dir):
    """Emit figure-ready tables and SVG scatter plots for a record set.

    Writes records.csv, spectra.jsonl, and four plots: RC exponents vs the
    maximal CLE (with target lines and the lambda = lambda_max^(r)
    diagonal), maximal CLE vs spectral radius, RC exponents vs spectral
    radius, and Kaplan-Yorke dimension vs maximal CLE.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to report")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(output_dir, exist_ok=True)
    written = []

    table = os.path.join(output_dir, "records.csv")
    write_results_csv(records, table)
    written.append(table)

    spectra = os.path.join(output_dir, "spectra.jsonl")
    with open(spectra, "w") as fh:
        for r in records:
            for spec in (r.cle, r.rc):
                if spec is not None:
                    fh.write(spectrum_json_row(spec, seed=r.seed,
                                               spectral_radius=r.spectral_radius,
                                               sigma_in=r.sigma_in) + "\n")
    written.append(spectra)

    targets = max((r.target_exponents for r in records), key=len)
    n_show = len(targets)
    with_rc = [r for r in records if r.rc is not None and r.cle is not None]
    cle_max = np.array([r.lambda_r_max for r in with_rc])
    rc_mat = np.array([r.rc.exponents[:n_show] for r in with_rc])
    rho = np.array([r.spectral_radius for r in with_rc])
    markers = ["o", "s", "^", "D", "v", "P"]

    def _new_axes():
        fig, ax = plt.subplots(figsize=(5.0, 3.6), constrained_layout=True)
        return fig, ax

    fig, ax = _new_axes()
    finite = np.isfinite(cle_max)
    for i in range(n_show):
        ax.scatter(cle_max[finite], rc_mat[finite, i], s=14,
                   marker=markers[i % len(markers)],
                   label=rf"$\lambda_{{{i + 1}}}^{{(RC)}}$")
    for t in targets:
        ax.axhline(t, color="0.6", lw=0.8)
    if np.any(finite):
        lo = np.min(cle_max[finite])
        hi = np.max(cle_max[finite])
        ax.plot([lo, hi], [lo, hi], ls="--", color="0.6", lw=0.8)
    ax.set_xlabel(r"$\lambda_{max}^{(r)}$ (1/time)")
    ax.set_ylabel(r"$\lambda_i^{(RC)}$ (1/time)")
    ax.legend(fontsize=7)
    path = os.path.join(output_dir, "lambda_rc_vs_cle.svg")
    fig.savefig(path)
    plt.close(fig)
    written.append(path)

    fig, ax = _new_axes()
    ax.scatter(rho, cle_max, s=14)
    ax.set_xlabel("spectral radius")
    ax.set_ylabel(r"$\lambda_{max}^{(r)}$ (1/time)")
    path = os.path.join(output_dir, "cle_vs_spectral_radius.svg")
    fig.savefig(path)
    plt.close(fig)
    written.append(path)

    fig, ax = _new_axes()
    for i in range(n_show):
        ax.scatter(rho, rc_mat[:, i], s=14, marker=markers[i % len(markers)],
                   label=rf"$\lambda_{{{i + 1}}}^{{(RC)}}$")
    for t in targets:
        ax.axhline(t, color="0.6", lw=0.8)
    ax.set_xlabel("spectral radius")
    ax.set_ylabel(r"$\lambda_i^{(RC)}$ (1/time)")
    ax.legend(fontsize=7)
    path = os.path.join(output_dir, "lambda_rc_vs_spectral_radius.svg")
    fig.savefig(path)
    plt.close(fig)
    written.append(path)

    fig, ax = _new_axes()
    ky = np.array([r.ky_rc.dimension if r.ky_rc else np.nan for r in with_rc])
    ax.scatter(cle_max, ky, s=14)
    ky_true = next((r.ky_true.dimension for r in records if r.ky_true), None)
    if ky_true is not None:
        ax.axhline(ky_true, color="0.6", lw=0.8)
    ax.set_xlabel(r"$\lambda_{max}^{(r)}$ (1/time)")
    ax.set_ylabel(r"$D_{KY}$ of the autonomous RC")
    path = os.path.join(output_dir, "ky_vs_cle.svg")
    fig.savefig(path)
    plt.close(fig)
    written.append(path)
    return written

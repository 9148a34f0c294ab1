"""Command-line entry points.

Subcommands: generate-data, train, rollout, spectrum, sweep, report.
Exit codes: 0 success, 2 configuration error, 3 sweep grid point with all
members diverged.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import harness, model_io
from .harness import ConfigError, SweepConfig
from .lyapunov import (cle_spectrum, kaplan_yorke, rc_spectrum,
                       spectrum_json_row)
from .reservoir import (FeatureMap, ReservoirParams, build_reservoir, drive,
                        rollout)
from .systems import (SystemSpec, downsample, integrate, read_trajectory_csv,
                      true_lyapunov_spectrum, write_trajectory_csv)
from .training import fit_readout, one_step_mse
from .reservoir import apply_feature_map

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ALL_DIVERGED = 3


def _system_from_args(args) -> SystemSpec:
    if args.system == "lorenz":
        return SystemSpec.lorenz(sigma=args.sigma, beta=args.beta,
                                 rho_lorenz=args.rho_lorenz,
                                 noise_amplitude=args.noise)
    if args.system == "qi":
        return SystemSpec.qi(p1=args.p1, p2=args.p2, p3=args.p3, p4=args.p4,
                             noise_amplitude=args.noise)
    return SystemSpec.lorenz_plus_filter(sigma=args.sigma, beta=args.beta,
                                         rho_lorenz=args.rho_lorenz,
                                         eta=args.eta,
                                         noise_amplitude=args.noise)


def _add_system_args(parser):
    parser.add_argument("--system", choices=["lorenz", "qi", "lorenz_filter"],
                        default="lorenz")
    parser.add_argument("--sigma", type=float, default=10.0)
    parser.add_argument("--beta", type=float, default=8.0 / 3.0)
    parser.add_argument("--rho-lorenz", type=float, default=28.0)
    parser.add_argument("--p1", type=float, default=35.0)
    parser.add_argument("--p2", type=float, default=10.0)
    parser.add_argument("--p3", type=float, default=1.0)
    parser.add_argument("--p4", type=float, default=10.0)
    parser.add_argument("--eta", type=float, default=1.0)
    parser.add_argument("--noise", type=float, default=0.0,
                        help="additive noise amplitude a")


def _cmd_generate_data(args) -> int:
    spec = _system_from_args(args)
    x0 = spec.default_x0() if args.x0 is None else np.asarray(args.x0)
    traj = integrate(spec, x0, args.dt, args.n_steps, seed=args.seed,
                     transient=args.transient)
    if args.downsample > 1:
        traj = downsample(traj, args.downsample)
    write_trajectory_csv(traj, args.out)
    print(f"wrote {traj.n_steps} samples (tau={traj.tau:g}) to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    data = read_trajectory_csv(args.data)
    params = ReservoirParams(n_nodes=args.n_nodes, input_dim=data.dim,
                             spectral_radius=args.spectral_radius,
                             input_strength=args.sigma_in,
                             avg_degree=args.avg_degree, seed=args.seed)
    res = build_reservoir(params)
    fm = FeatureMap(args.feature_map, args.n_nodes)
    states = drive(res, data, discard=args.discard)
    feats = apply_feature_map(fm, states[:-1])
    targets = data.samples[args.discard + 1:]
    readout = fit_readout(feats, targets, args.ridge, fm)
    mse = one_step_mse(readout, states[:-1], targets)
    model_io.save_model(args.out, res, readout)
    print(f"trained readout (one-step mse {mse:.3e}); model saved to {args.out}")
    return EXIT_OK


def _warmup_state(res, readout, data, discard):
    states = drive(res, data, discard=discard)
    return states[-1]


def _cmd_rollout(args) -> int:
    res, readout = model_io.load_model(args.model)
    data = read_trajectory_csv(args.data)
    r0 = _warmup_state(res, readout, data, args.discard)
    result = rollout(res, readout, r0, args.n_steps)
    if result.diverged:
        print(f"rollout diverged at step {result.diverged_at}", file=sys.stderr)
    from .systems import Trajectory
    traj = Trajectory(result.outputs, data.tau,
                      t0=data.t0 + data.tau * data.n_steps)
    write_trajectory_csv(traj, args.out)
    print(f"wrote {traj.n_steps} rollout steps to {args.out}")
    return EXIT_OK


def _cmd_spectrum(args) -> int:
    rows = []
    if args.kind == "true":
        spec = _system_from_args(args)
        lam = true_lyapunov_spectrum(spec, args.dt, args.n_steps,
                                     seed=args.seed, transient=args.transient)
        rows.append(spectrum_json_row(lam, seed=args.seed))
        ky = kaplan_yorke(lam)
        print(f"exponents: {np.array2string(lam.exponents, precision=4)}  "
              f"D_KY={ky.dimension:.4f}", file=sys.stderr)
    else:
        res, readout = model_io.load_model(args.model)
        data = read_trajectory_csv(args.data)
        if args.kind == "cle":
            lam = cle_spectrum(res, data, k=args.k, discard=args.discard)
        else:
            r0 = _warmup_state(res, readout, data, args.discard)
            lam = rc_spectrum(res, readout, args.n_steps, k=args.k,
                              tau=data.tau, r0=r0)
        rows.append(spectrum_json_row(
            lam, seed=res.params.seed,
            spectral_radius=res.params.spectral_radius,
            sigma_in=res.params.input_strength))
        print(f"exponents: {np.array2string(lam.exponents, precision=4)}",
              file=sys.stderr)
    out = "\n".join(rows)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(out + "\n")
    else:
        print(out)
    return EXIT_OK


def _cmd_sweep(args) -> int:
    with open(args.config) as fh:
        doc = json.load(fh)
    if args.seed is not None:
        doc["master_seed"] = args.seed
    config = SweepConfig.from_dict(doc)
    retained = harness.run_sweep(config, output_dir=args.out)
    kept_radii = {r.spectral_radius for r in retained}
    missing = [sr for sr in config.spectral_radius_grid if sr not in kept_radii]
    print(f"retained {len(retained)} records across "
          f"{len(config.spectral_radius_grid)} grid points; results in {args.out}")
    if missing:
        print(f"all members diverged at spectral radii {missing}",
              file=sys.stderr)
        return EXIT_ALL_DIVERGED
    return EXIT_OK


def _cmd_report(args) -> int:
    records = harness.read_records_jsonl(args.records)
    written = harness.report(records, args.out)
    print("wrote " + ", ".join(written))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="esnlyap",
        description="Echo-state-network attractor reconstruction with "
                    "conditional-Lyapunov-exponent diagnostics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="integrate a target system to CSV")
    _add_system_args(p)
    p.add_argument("--dt", type=float, default=0.001)
    p.add_argument("--n-steps", type=int, default=60000)
    p.add_argument("--downsample", type=int, default=1)
    p.add_argument("--transient", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--x0", type=float, nargs="+", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_generate_data)

    p = sub.add_parser("train", help="train a reservoir on a CSV trajectory")
    p.add_argument("--data", required=True)
    p.add_argument("--n-nodes", type=int, default=300)
    p.add_argument("--spectral-radius", type=float, default=0.4)
    p.add_argument("--sigma-in", type=float, default=0.1)
    p.add_argument("--avg-degree", type=float, default=6.0)
    p.add_argument("--feature-map", default="stacked",
                   choices=["identity", "squared_half", "stacked"])
    p.add_argument("--ridge", type=float, default=0.0)
    p.add_argument("--discard", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("rollout", help="run a trained model closed-loop")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True,
                   help="trajectory CSV used to warm the reservoir up")
    p.add_argument("--discard", type=int, default=1000)
    p.add_argument("--n-steps", type=int, default=20000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_rollout)

    p = sub.add_parser("spectrum", help="compute a Lyapunov spectrum")
    p.add_argument("--kind", choices=["true", "cle", "rc"], required=True)
    _add_system_args(p)
    p.add_argument("--dt", type=float, default=0.001)
    p.add_argument("--n-steps", type=int, default=1000000)
    p.add_argument("--transient", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--discard", type=int, default=1000)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_spectrum)

    p = sub.add_parser("sweep", help="run the ensemble experiment protocol")
    p.add_argument("--config", required=True, help="SweepConfig JSON document")
    p.add_argument("--seed", type=int, default=None,
                   help="override master_seed from the config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("report", help="tables and plots from sweep records")
    p.add_argument("--records", required=True, help="records JSONL file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

    nvensemble simulate {propi,t1,rabi,fid,echo} --config run.json --out DIR
    nvensemble spectra odmr --group B [--coupling 130] [--out FILE]
    nvensemble layer stats [--config run.json] [--out DIR]
    nvensemble layer fit [--config run.json] [--target FILE] [--out DIR]
    nvensemble dsl check FILE.pseq
    nvensemble dsl expand FILE.pseq [--param NAME=VALUE ...]
    nvensemble version

Exit status: 0 on success, 1 on a domain error (bad physics input, invalid
program, failed fit), 2 on a usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np

from . import dsl, lattice, protocols
from .fitting import FitError
from .io import ConfigError, RunConfig, build_system, dumps, result_document, write_artifacts


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:  # pragma: no cover - source checkout without install
        return "0.0.0"


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors: synopsis to stderr, exit 2
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nvensemble", description="NV / 13C ensemble simulator and analysis toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sim = sub.add_parser("simulate", help="run a protocol")
    sim.add_argument("protocol", choices=["propi", "t1", "rabi", "fid", "echo"])
    sim.add_argument("--config", type=Path, help="run configuration JSON")
    sim.add_argument("--out", type=Path, default=Path("."), help="output directory")

    spec = sub.add_parser("spectra", help="ODMR stick spectra")
    spec.add_argument("kind", choices=["odmr"])
    spec.add_argument("--group", required=True, choices=list("ABCD"))
    spec.add_argument("--coupling", type=float, default=None, help="first-shell coupling (MHz)")
    spec.add_argument("--out", type=Path, help="CSV file (default: stdout)")

    lay = sub.add_parser("layer", help="layer-profile statistics and fits")
    lay.add_argument("action", choices=["stats", "fit"])
    lay.add_argument("--config", type=Path)
    lay.add_argument("--target", type=Path, help="CSV with group,delta_nu_MHz,std_dev_MHz,n_samples")
    lay.add_argument("--samples", type=int, default=10_000)
    lay.add_argument("--out", type=Path, default=Path("."))

    d = sub.add_parser("dsl", help="pulse-sequence programs")
    d.add_argument("action", choices=["check", "expand"])
    d.add_argument("file", type=Path)
    d.add_argument("--param", action="append", default=[], metavar="NAME=VALUE")

    sub.add_parser("version", help="print the package version")
    return p


def _meta(command: str) -> dict:
    return {"command": command, "version": _version(),
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds")}


def _run_config(path: Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.from_json(path.read_text())


_DEFAULT_SYSTEM = {"sites": [{"A_parallel": 50.0, "A_perpendicular": 50.0}]}


def _simulate(args) -> int:
    run = _run_config(args.config)
    const = run.load_constants()
    system = build_system(run.system or _DEFAULT_SYSTEM, const, run.seed)
    cfg = run.propi_config(args.protocol, const)
    prm = run.protocol
    kind = args.protocol
    if kind == "propi":
        if isinstance(system, protocols.Ensemble):
            raise ConfigError("simulate propi takes a single spin system, not an ensemble")
        result = protocols.run_propi(system, cfg, const)
    elif kind == "t1":
        delays = prm.get("delays_ms", [0, 10, 25, 50, 100, 150, 200, 300, 400, 500])
        result = protocols.run_t1_measurement(system, cfg, delays, const)
    elif kind == "rabi":
        rf = float(prm.get("rf_rabi", cfg.rf_rabi))
        taus = prm.get("tau_rf_us", np.linspace(0, 3e3 / rf, 61).tolist())
        result = protocols.run_nuclear_rabi(system, cfg, taus, rf, const)
    elif kind == "fid":
        state = prm.get("nv_state", "ms0")
        default = np.linspace(0, 0.3, 151) if state == "ms-1" else np.linspace(0, 5.0, 51)
        result = protocols.run_fid(system, cfg, prm.get("taus_ms", default.tolist()), state, const,
                                   fit=prm.get("fit", "auto"), envelope=prm.get("envelope", "exponential"))
    else:
        result = protocols.run_hahn_echo(system, cfg, prm.get("taus_ms", np.linspace(0, 0.3, 31).tolist()),
                                         prm.get("nv_state", "ms-1"), const)
    prefix = run.output.get("prefix", kind)
    paths = write_artifacts(args.out, prefix, result_document(result, run), result.to_csv(), _meta(f"simulate {kind}"))
    for path in paths:
        print(path)
    return 0


def _spectra(args) -> int:
    const = RunConfig().load_constants()
    coupling = const.first_shell_coupling_mhz if args.coupling is None else args.coupling
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["offset_MHz", "weight"])
    for off, weight in lattice.odmr_stick_spectrum(args.group, coupling):
        w.writerow([repr(off), repr(weight)])
    if args.out:
        args.out.write_text(buf.getvalue())
        print(args.out)
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def _profile(run: RunConfig, const) -> lattice.LayerProfile:
    spec = run.system.get("layer_profile", {}).get("profile", {}) if run.system else {}
    return lattice.LayerProfile.from_constants(const, **spec)


def _read_target(path: Path) -> list[lattice.LinewidthEstimate]:
    out = []
    for row in csv.DictReader(io.StringIO(path.read_text())):
        out.append(lattice.LinewidthEstimate(lattice.GroupLabel(row["group"]), float(row["delta_nu_MHz"]),
                                             float(row["std_dev_MHz"]), int(row["n_samples"])))
    return out


def _layer(args) -> int:
    run = _run_config(args.config)
    const = run.load_constants()
    prof = _profile(run, const)
    args.out.mkdir(parents=True, exist_ok=True)
    if args.action == "stats":
        window = lattice.default_depth_window(prof, const)
        probs = lattice.depth_averaged_group_probabilities(prof, lattice.uniform_depth_distribution(*window))
        fits = {}
        for column, values in lattice.REFERENCE_GROUP_PERCENT.items():
            obs = lattice.GroupProbabilities.from_percent(*values)
            fits[column] = {m: lattice.fit_group_model(obs, m).to_dict()
                            for m in ("single-c", "two-region", "profile")}
        doc = {"seed": run.seed, "profile": dict(prof.__dict__), "depth_window_nm": list(window),
               "group_probabilities": probs.as_array().tolist(), "reference_fits": fits}
        paths = write_artifacts(args.out, "layer_stats", doc, probs.to_csv(), _meta("layer stats"))
    else:
        if args.target is not None:
            target = _read_target(args.target)
        else:
            target = list(lattice.simulate_linewidths(prof, args.samples, run.seed + 1, const=const).values())
        fit = lattice.fit_layer_profile(target, n_samples=args.samples, seed=run.seed, template=prof, const=const)
        doc = {"seed": run.seed, "n_samples": args.samples, "fit": fit.to_dict(),
               "target": [{"group": t.group.value, "delta_nu_MHz": t.delta_nu, "std_dev_MHz": t.std_dev}
                          for t in target]}
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "delta_nu_MHz", "std_dev_MHz", "n_samples"])
        for g, e in fit.model.items():
            w.writerow([g.value, repr(e.delta_nu), repr(e.std_dev), e.n_samples])
        paths = write_artifacts(args.out, "layer_fit", doc, buf.getvalue(), _meta("layer fit"))
    for path in paths:
        print(path)
    return 0


def _dsl(args) -> int:
    params = {}
    for item in args.param:
        name, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--param expects NAME=VALUE, got {item!r}")
        params[name] = float(value)
    source = args.file.read_text()
    timeline = dsl.compile_program(source, params or None)
    if args.action == "check":
        print(f"{args.file}: ok ({len(timeline.events)} events, {timeline.total_duration:g} us)")
    else:
        sys.stdout.write(timeline.to_csv())
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "version":
            print(_version())
            return 0
        if args.command == "simulate":
            return _simulate(args)
        if args.command == "spectra":
            return _spectra(args)
        if args.command == "layer":
            return _layer(args)
        return _dsl(args)
    except dsl.DslError as exc:
        name = getattr(args, "file", "")
        print(f"{name}:{exc}", file=sys.stderr)
        return 1
    except (ConfigError, FitError, ValueError, KeyError, OSError, lattice.ConditionUnreachable) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

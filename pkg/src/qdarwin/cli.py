"""Config-driven experiment runner.

Usage::

    qdarwin nogo-unitary|nogo-measure|props|darwin [--config PATH] [--seed N]
            [--out DIR] [--epsilon X] [--trials N] [--cap-dim N]

The config is an INI file. Every output file embeds the resolved config and
seed; timestamps go only to ``run.log`` so repeated runs produce identical
result files.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import math
import os
import re
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from qdarwin import analysis, darwinism, nogo
from qdarwin.errors import InvariantError, ResourceCapError
from qdarwin.qmath import DEFAULT_CAP_DIM, bloch_vector, kron, partial_trace_matrix, qubit_from_bloch
from qdarwin.spin import CouplingSpec, interaction_unitary, random_direction, random_observable

COMMANDS = ("nogo-unitary", "nogo-measure", "props", "darwin")
EXIT_OK, EXIT_CONFIG, EXIT_CAP, EXIT_INVARIANT = 0, 2, 3, 4
PROPS_TOL = 1e-9


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass(frozen=True)
class RunConfig:
    command: str
    seed: int = 0
    out: str = "results"
    cap_dim: int = DEFAULT_CAP_DIM
    # nogo
    alpha: float = 1.0
    sigma: float = 1e-3
    # props
    props_trials: int = 1000
    # darwin
    d: int = 2
    per_site: tuple[int, ...] = (40,)
    theta_min: float = 0.3
    theta_max: float = math.pi - 0.3
    max_bloch: float = 0.9
    discard_fraction: float = 0.25
    amplitudes: tuple[float, ...] | None = None
    n_fragments: int = 3
    fragment_seed: int | None = None
    epsilon: float = analysis.DEFAULT_EPSILON
    holevo_members: int = analysis.DEFAULT_HOLEVO_MEMBERS
    born_trials: int = 10_000

    def validate(self) -> "RunConfig":
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        checks = [
            ("seed", self.seed >= 0, "seed must be >= 0"),
            ("cap_dim", self.cap_dim >= 2, "cap_dim must be >= 2"),
            ("alpha", self.alpha > 0, "alpha must be positive"),
            ("sigma", self.sigma > 0, "sigma must be positive"),
            ("props_trials", self.props_trials >= 1, "props trials must be >= 1"),
            ("d", self.d >= 2, "d must be >= 2"),
            ("per_site", len(self.per_site) in (1, self.d), "per_site needs 1 or d entries"),
            ("per_site", all(m >= 0 for m in self.per_site), "per_site counts must be >= 0"),
            ("theta_max", self.theta_min <= self.theta_max, "theta_min must not exceed theta_max"),
            ("max_bloch", 0.0 <= self.max_bloch <= 1.0, "max_bloch must lie in [0, 1]"),
            ("discard_fraction", 0.0 <= self.discard_fraction <= 1.0, "discard_fraction must lie in [0, 1]"),
            ("n_fragments", self.n_fragments >= 1, "n_fragments must be >= 1"),
            ("fragment_seed", self.fragment_seed is None or self.fragment_seed >= 0, "fragment_seed must be >= 0"),
            ("epsilon", self.epsilon >= 0, "epsilon must be >= 0"),
            ("holevo_members", self.holevo_members >= 0, "holevo_members must be >= 0"),
            ("born_trials", self.born_trials >= 1, "born_trials must be >= 1"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(msg, field=name)
        if self.amplitudes is not None:
            if len(self.amplitudes) != self.d:
                raise ConfigError(f"amplitudes needs {self.d} entries", field="amplitudes")
            if abs(sum(a * a for a in self.amplitudes) - 1.0) > 1e-12:
                raise ConfigError("amplitudes must be normalized", field="amplitudes")
        return self

    def resolved(self) -> dict:
        out = asdict(self)
        out["per_site"] = list(self.per_site)
        out["amplitudes"] = None if self.amplitudes is None else list(self.amplitudes)
        out.pop("out")
        return out


# section -> key -> (field, parser)
def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


SCHEMA = {
    "run": {"seed": ("seed", int), "cap_dim": ("cap_dim", int)},
    "nogo": {"alpha": ("alpha", float), "sigma": ("sigma", float)},
    "props": {"trials": ("props_trials", int)},
    "model": {
        "d": ("d", int),
        "per_site": ("per_site", _ints),
        "theta_min": ("theta_min", float),
        "theta_max": ("theta_max", float),
        "max_bloch": ("max_bloch", float),
        "discard_fraction": ("discard_fraction", float),
        "amplitudes": ("amplitudes", _floats),
    },
    "analysis": {
        "n_fragments": ("n_fragments", int),
        "fragment_seed": ("fragment_seed", int),
        "epsilon": ("epsilon", float),
        "holevo_members": ("holevo_members", int),
        "born_trials": ("born_trials", int),
    },
}


def _line_of(text: str, section: str, key: str | None = None) -> int | None:
    current = None
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if key is None and current == section:
                return n
        elif key is not None and current == section:
            name = re.split(r"[=:]", line, maxsplit=1)[0].strip().lower()
            if name == key:
                return n
    return None


def parse_config(text: str, command: str) -> RunConfig:
    """Parse INI text into a :class:`RunConfig`; unknown sections or keys are errors."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside any [section]", exc.lineno) from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r} in [{exc.section}]", exc.lineno) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", exc.lineno) from None
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else None
        raise ConfigError("unparseable line", lineno) from None
    values: dict = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", _line_of(text, section))
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", _line_of(text, section, key))
            name, conv = SCHEMA[section][key]
            try:
                values[name] = conv(raw)
            except (ValueError, SyntaxError):
                raise ConfigError(f"bad value {raw!r} for {key}", _line_of(text, section, key)) from None
    try:
        return RunConfig(command, **values).validate()
    except ConfigError as exc:
        raise ConfigError(str(exc), _field_line(text, exc.field), exc.field) from None


def _field_line(text: str, name: str | None) -> int | None:
    for section, keys in SCHEMA.items():
        for key, (field_name, _) in keys.items():
            if field_name == name:
                line = _line_of(text, section, key)
                if line is not None:
                    return line
    return None


# --------------------------------------------------------------------------
# output


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _provenance(cfg: RunConfig) -> dict:
    return {"command": cfg.command, "seed": cfg.seed, "config": cfg.resolved()}


def _json(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _csv(cfg: RunConfig, header: list[str], rows) -> str:
    buf = io.StringIO()
    buf.write("# " + json.dumps(_provenance(cfg), sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in row])
    return buf.getvalue()


# --------------------------------------------------------------------------
# commands


def _nogo(cfg: RunConfig, kind: str) -> dict[str, str]:
    state = nogo.TwoLabState(alpha=cfg.alpha, sigma=cfg.sigma)
    run = nogo.run_unitary_protocol if kind == "unitary" else nogo.run_measurement_protocol
    results = {"nonlocal": run(False, state), "localized": run(True, state)}
    doc = _provenance(cfg)
    doc["overlap"] = state.overlap
    doc["amplitudes"] = [a.real for a in state.amplitudes]
    for name, res in results.items():
        doc[name] = res.to_dict()
    doc["I_nonlocal"] = results["nonlocal"].mutual_info_bits
    doc["I_localized"] = results["localized"].mutual_info_bits
    rows = [
        (name, str(a), str(b), p)
        for name, res in results.items()
        for (a, b), p in sorted(res.joint.table.items(), key=lambda kv: (str(kv[0][0]), str(kv[0][1])))
    ]
    stem = f"nogo_{kind}"
    return {f"{stem}.json": _json(doc), f"{stem}_joint.csv": _csv(cfg, ["variant", "a", "b", "p"], rows)}


def _random_qubit(rng: np.random.Generator, max_norm: float = 1.0) -> np.ndarray:
    return rng.uniform(0.0, max_norm) ** (1.0 / 3.0) * random_direction(rng)


def props_deviations(trials: int, seed: int) -> dict:
    """Compare the single-step laws with two-qubit oracles on random instances.

    Returns the worst absolute deviation of each check.
    """
    rng = np.random.default_rng(seed)
    worst = {"bloch_vector": 0.0, "bloch_norm": 0.0, "bloch_norm_sin_theta": 0.0, "omega_norm": 0.0, "omega_matrix": 0.0}
    for _ in range(trials):
        r = _random_qubit(rng)
        b = _random_qubit(rng)
        s_obs, e_obs = random_observable(rng), random_observable(rng)
        theta = rng.uniform(-math.pi, math.pi)
        coupling = CouplingSpec(theta, s_obs, e_obs)
        u = interaction_unitary(coupling)
        rho_e = qubit_from_bloch(b)
        e_exp = float(np.dot(e_obs.vector, b))

        # Bloch recursion against U (rho_S x rho_E) U^dagger traced over E
        joint = u @ kron(qubit_from_bloch(r), rho_e) @ u.conj().T
        r_oracle = bloch_vector(partial_trace_matrix(joint, (2, 2), [0]))
        inp = darwinism.PropositionInputs(tuple(r), s_obs, coupling.theta, e_exp)
        r_new = darwinism.bloch_update(inp)
        n2 = float(np.dot(r_oracle, r_oracle))
        _, sin_phi = inp.angle()
        literal = float(np.dot(r, r)) * (1.0 - inp.delta * math.sin(coupling.theta) ** 2 * sin_phi**2)
        worst["bloch_vector"] = max(worst["bloch_vector"], float(np.max(np.abs(r_new - r_oracle))))
        worst["bloch_norm"] = max(worst["bloch_norm"], abs(darwinism.bloch_norm_sq_law(inp) - n2))
        worst["bloch_norm_sin_theta"] = max(worst["bloch_norm_sin_theta"], abs(literal - n2))

        # one-sided block update against Tr_E(U (c x rho_E))
        c = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
        c_oracle = partial_trace_matrix(u @ kron(c, rho_e), (2, 2), [0])
        c_new, normsq = darwinism.omega_update_normsq(c, coupling.theta, e_exp, s_obs)
        law = darwinism.omega_norm_law(float(np.sum(np.abs(c) ** 2)), coupling.theta, e_exp)
        worst["omega_matrix"] = max(worst["omega_matrix"], float(np.max(np.abs(c_new - c_oracle))))
        worst["omega_norm"] = max(worst["omega_norm"], abs(law - float(np.sum(np.abs(c_oracle) ** 2))))
    return worst


def _props(cfg: RunConfig) -> tuple[dict[str, str], bool]:
    dev = props_deviations(cfg.props_trials, cfg.seed)
    checked = {k: v for k, v in dev.items() if k != "bloch_norm_sin_theta"}
    doc = _provenance(cfg)
    doc["trials"] = cfg.props_trials
    doc["deviations"] = dev
    doc["max_deviation"] = max(checked.values())
    doc["tolerance"] = PROPS_TOL
    doc["passed"] = doc["max_deviation"] < PROPS_TOL
    doc["notes"] = [
        "bloch_norm uses the sin^2(2 theta) law that matches the oracle;"
        " bloch_norm_sin_theta evaluates the sin^2(theta) form for comparison and is not part of max_deviation"
    ]
    rows = [(k, v) for k, v in dev.items()]
    files = {"props.json": _json(doc), "props.csv": _csv(cfg, ["check", "max_abs_deviation"], rows)}
    return files, doc["passed"]


def _model_config(cfg: RunConfig) -> darwinism.ModelConfig:
    per_site = cfg.per_site[0] if len(cfg.per_site) == 1 else cfg.per_site
    return darwinism.ModelConfig(
        d=cfg.d,
        per_site=per_site,
        theta_range=(cfg.theta_min, cfg.theta_max),
        max_bloch=cfg.max_bloch,
        discard_fraction=cfg.discard_fraction,
        amplitudes=cfg.amplitudes,
        seed=cfg.seed,
    )


def _brute_force_check(model: darwinism.DarwinModel, ens_full, cap_dim: int) -> dict:
    dim = model.d * 2 ** (model.n_ensubs + 1)
    if dim > cap_dim:
        return {"ran": False, "reason": f"brute-force Hilbert dimension {dim} exceeds cap-dim {cap_dim}"}
    state = darwinism.brute_force_evolve(model, cap_dim)
    n = model.n_ensubs
    worst_marg = 0.0
    for p, j in enumerate(ens_full.ensub_ids):
        h = ens_full.home_sites[p]
        fast = sum(
            prob * (ens_full.perturbed_states[p] if h == i else ens_full.initial_states[p])
            for i, prob in enumerate(ens_full.branch_probs)
        )
        exact = partial_trace_matrix(state.matrix, state.dims, [2 + j])
        worst_marg = max(worst_marg, float(np.max(np.abs(fast - exact))))
    probs = np.real(np.diag(partial_trace_matrix(state.matrix, state.dims, [0])))
    return {
        "ran": True,
        "dimension": dim,
        "max_marginal_deviation": worst_marg,
        "max_branch_prob_deviation": float(np.max(np.abs(probs - ens_full.branch_probs))),
        "exact_for_fast_path": model.system_is_maximally_mixed,
        "n_ensubs": n,
    }


def _darwin(cfg: RunConfig) -> dict[str, str]:
    model = darwinism.build_model(_model_config(cfg))
    full = darwinism.branch_evolve_fast(model)
    frag_seed = cfg.seed if cfg.fragment_seed is None else cfg.fragment_seed
    ens, spec, report = analysis.analyze(
        model,
        cfg.n_fragments,
        epsilon=cfg.epsilon,
        fragment_seed=frag_seed,
        holevo_members=cfg.holevo_members,
        cap_dim=cfg.cap_dim,
    )
    born = analysis.born_sample(ens, cfg.born_trials, cfg.seed, cfg.n_fragments)
    report = replace(report, born_freqs=born.freqs.tolist())
    curves = [analysis.holevo_curve(ens, spec, k, cfg.holevo_members, cfg.cap_dim) for k in range(cfg.n_fragments)]

    doc = _provenance(cfg)
    doc["report"] = report.to_dict()
    doc["fragments"] = [
        {"index": k, "members": spec.members(k), "site_counts": spec.site_counts(k, model.d)}
        for k in range(cfg.n_fragments)
    ]
    doc["coherence_after_discard"] = ens.coherence.tolist()
    doc["diagnostics"] = list(model.diagnostics())
    doc["brute_force"] = _brute_force_check(model, full, cfg.cap_dim)

    model_doc = darwinism.model_to_dict(model)
    model_doc["provenance"] = _provenance(cfg)
    p = np.asarray(ens.branch_probs)
    born_rows = [(i, float(p[i]), int(born.counts[i]), float(born.freqs[i])) for i in range(model.d)]
    curve_rows = [(k, n, bits) for k, curve in enumerate(curves) for n, bits in curve]
    return {
        "model.json": json.dumps(model_doc, indent=1, sort_keys=True) + "\n",
        "sbs_report.json": _json(doc),
        "fidelity.csv": _csv(cfg, ["fragment", "i", "i_prime", "fidelity"], report.fidelity_rows()),
        "holevo_curve.csv": _csv(cfg, ["fragment", "size", "bits"], curve_rows),
        "born.csv": _csv(cfg, ["site", "probability", "count", "frequency"], born_rows),
    }


def run(cfg: RunConfig) -> int:
    """Execute one command and write its artifacts under ``cfg.out``."""
    out = Path(cfg.out)
    ok = True
    if cfg.command == "nogo-unitary":
        files = _nogo(cfg, "unitary")
    elif cfg.command == "nogo-measure":
        files = _nogo(cfg, "measurement")
    elif cfg.command == "props":
        files, ok = _props(cfg)
    else:
        files = _darwin(cfg)
    for name, text in files.items():
        _atomic_write(out / name, text)
    _log(out, f"{cfg.command} seed={cfg.seed} wrote {', '.join(sorted(files))}")
    if not ok:
        raise InvariantError("props deviation above tolerance")
    return EXIT_OK


def _log(out: Path, message: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    with open(out / "run.log", "a", encoding="utf-8") as fh:
        fh.write(f"{stamp} {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qdarwin", description="Signaling and decoherence experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="INI file with [run] [nogo] [props] [model] [analysis] sections")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=None, help="output directory (default: results)")
    p.add_argument("--epsilon", type=float, help="SBS fidelity and residual threshold")
    p.add_argument("--trials", type=int, help="props instances, or Born samples for darwin")
    p.add_argument("--cap-dim", type=int, dest="cap_dim", help="largest dense dimension allowed")
    return p


def resolve(args: argparse.Namespace) -> RunConfig:
    if args.config is not None:
        try:
            text = args.config.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        cfg = parse_config(text, args.command)
    else:
        cfg = RunConfig(args.command)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = args.out
    if args.epsilon is not None:
        over["epsilon"] = args.epsilon
    if args.cap_dim is not None:
        over["cap_dim"] = args.cap_dim
    if args.trials is not None:
        over["props_trials" if args.command == "props" else "born_trials"] = args.trials
    return replace(cfg, **over).validate()


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
    except ConfigError as exc:
        where = f"{args.config}:" if args.config is not None else ""
        print(f"config error: {where}{exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        status = run(cfg)
    except ResourceCapError as exc:
        print(f"resource cap: {exc}", file=sys.stderr)
        return EXIT_CAP
    except InvariantError as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except ValueError as exc:
        # parameter combinations only detectable while building (e.g. too few en-subs)
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps({"command": cfg.command, "out": str(Path(cfg.out))}))
    return status


if __name__ == "__main__":
    sys.exit(main())

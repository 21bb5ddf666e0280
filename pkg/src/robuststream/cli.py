"""Experiment runner: config parsing, seeded batches, CSV outputs, space accounting."""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import math
import os
import re
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .adversary import (
    STRATEGIES,
    NaiveMeanAMS,
    gram_attack,
    gram_probe_budget,
    run_game,
)
from .core_types import SizingError, child_seed
from .heavy_hitters import ExactF2, find_heavy, updates_per_report
from .robust_f2 import TreeState, size_parameters
from .tri_framework import (
    FAMILIES,
    LossSpec,
    TriEstimator,
    check_bernstein_derivative,
    check_beta_triangle,
    tri_function,
    tri_params,
)

ENV_OUT = "ROBUSTSTREAM_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    task: str = "f2"
    n: int = 1024
    m: int = 20000
    eps: float = 0.2
    seeds: list = field(default_factory=lambda: [1])
    master_seed: int = 0
    mode: str = "streaming"
    output_dir: str = ""
    workers: int = 1
    write_transcripts: bool = True
    adversary: str = "oblivious_random"
    max_delta: int = 10
    delete_prob: float = 0.6
    gram_k: int = 32
    gram_M: int = 1000
    profile: str = "desk"
    c_B: float = 1.0
    c_L: float = 1.0
    c_delta: float = 1.0
    c_eta: float | None = None
    H: int | None = None
    sketch_c: float = 3.0
    sketch_delta: float = 1.0 / 3.0
    operator: str = "ams"
    kappa: float | None = None
    C: float = 2.0
    family: str = "lp_p"
    tau: float = 1.0
    p: float = 1.0
    power: float = 0.5
    eps_hh: float = 0.5
    eps_f2: float | None = None
    hh_operator: str = "exact"
    planted: bool = True
    sweep_n: list = field(default_factory=lambda: [1024, 4096, 16384])

    def validate(self) -> None:
        if self.task not in ("f2", "heavy_hitters", "tri"):
            raise ConfigError(f"experiment.task: unknown task {self.task!r}")
        if self.n < 2 or self.m < 0:
            raise ConfigError(f"experiment: need n >= 2 and m >= 0 (n={self.n}, m={self.m})")
        if not 0 < self.eps < 1:
            raise ConfigError(f"experiment.eps={self.eps} outside (0, 1)")
        if self.mode not in ("streaming", "reference"):
            raise ConfigError(f"experiment.mode: unknown mode {self.mode!r}")
        if self.adversary not in STRATEGIES:
            raise ConfigError(f"adversary.kind: unknown strategy {self.adversary!r}")
        if self.workers < 1:
            raise ConfigError("experiment.workers must be >= 1")
        if self.family not in FAMILIES:
            raise ConfigError(f"loss.family: unknown family {self.family!r}")
        if self.task == "tri":
            loss = self.loss()
            kappa = self.kappa if self.kappa is not None else 2 * loss.beta + 2
            if not kappa > 2 * loss.beta + 1:
                raise ConfigError(f"constants.kappa={kappa} must exceed 2*beta+1 = {2 * loss.beta + 1}")
            if self.C <= 1:
                raise ConfigError(f"constants.C={self.C} must exceed 1")
        if not 0 < self.eps_hh < 1:
            raise ConfigError(f"heavy.eps_hh={self.eps_hh} outside (0, 1)")

    def loss(self) -> LossSpec:
        try:
            return LossSpec(self.family, tau=self.tau, p=self.p, power=self.power)
        except ValueError as exc:
            raise ConfigError(f"loss: {exc}") from None

    def out_dir(self) -> Path:
        return Path(self.output_dir or os.environ.get(ENV_OUT, "out"))


# (section, key) -> (attribute, parser)
def _int_list(text: str) -> list:
    out = []
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1) if not part.startswith("-") else (part, part)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


def _opt_int(text: str):
    return None if text.strip().lower() in ("", "none", "auto") else int(text)


SCHEMA = {
    "experiment": {
        "task": ("task", str), "n": ("n", int), "m": ("m", int), "eps": ("eps", float),
        "seeds": ("seeds", _int_list), "master_seed": ("master_seed", int), "mode": ("mode", str),
        "output_dir": ("output_dir", str), "workers": ("workers", int),
        "write_transcripts": ("write_transcripts", _bool),
    },
    "adversary": {
        "kind": ("adversary", str), "max_delta": ("max_delta", int),
        "delete_prob": ("delete_prob", float), "gram_k": ("gram_k", int), "gram_M": ("gram_M", int),
    },
    "constants": {
        "profile": ("profile", str), "c_B": ("c_B", float), "c_L": ("c_L", float),
        "c_delta": ("c_delta", float), "c_eta": ("c_eta", _opt_float), "H": ("H", _opt_int),
        "sketch_c": ("sketch_c", float), "sketch_delta": ("sketch_delta", float),
        "operator": ("operator", str), "kappa": ("kappa", _opt_float), "C": ("C", float),
    },
    "loss": {
        "family": ("family", str), "tau": ("tau", float), "p": ("p", float), "power": ("power", float),
    },
    "heavy": {
        "eps_hh": ("eps_hh", float), "eps_f2": ("eps_f2", _opt_float),
        "operator": ("hh_operator", str), "planted": ("planted", _bool),
    },
    "sweep": {"n": ("sweep_n", _int_list)},
}


def _line_of(text: str, section: str | None, key: str | None = None) -> int:
    current = None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        m = re.match(r"\[([^\]]+)\]", stripped)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return lineno
            continue
        if key is not None and current == section:
            m = re.match(r"([^=:]+)[=:]", stripped)
            if m and m.group(1).strip().lower() == key.lower():
                return lineno
    return 0


def load_config(path: str | Path | None = None, overrides: list[str] | None = None,
                text: str | None = None) -> ExperimentConfig:
    """Parse an INI config plus `section.key=value` overrides into a validated config."""
    if text is None:
        if path is not None:
            try:
                text = Path(path).read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
        else:
            text = ""
    where = str(path) if path is not None else "<config>"
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=where)
    except configparser.Error as exc:
        raise ConfigError(f"{where}: {exc}") from None
    cfg = ExperimentConfig()
    items: list[tuple[str, str, str, str]] = []
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{where}:{_line_of(text, section)}: unknown section [{section}]")
        for key, value in parser.items(section):
            items.append((section, key, value, f"{where}:{_line_of(text, section, key)}"))
    for ov in overrides or []:
        m = re.fullmatch(r"\s*([A-Za-z_]+)\.([A-Za-z_]+)\s*=(.*)", ov)
        if not m:
            raise ConfigError(f"--set {ov!r}: expected section.key=value")
        items.append((m.group(1), m.group(2), m.group(3).strip(), f"--set {ov}"))
    for section, key, value, origin in items:
        spec = SCHEMA.get(section, {}).get(key)
        if spec is None:
            raise ConfigError(f"{origin}: unknown key {section}.{key}")
        attr, conv = spec
        try:
            setattr(cfg, attr, conv(value))
        except ValueError as exc:
            raise ConfigError(f"{origin}: bad value for {section}.{key}: {exc}") from None
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- runs


@dataclass
class RunRecord:
    seed: int
    max_rel_err: float | None
    iterate_updates: list
    peak_words: int
    break_time: int | None
    failure: str | None = None
    violations: int = 0
    max_update_count: int = 0
    L_max: int = 0
    transcript_csv: str = ""
    extra: dict = field(default_factory=dict)


def space_report(state) -> dict:
    """Word counts per component of a live TreeState; shadows are excluded."""
    return state.space_words()


def f2_params(cfg: ExperimentConfig, m: int | None = None, n: int | None = None):
    return size_parameters(
        cfg.n if n is None else n, cfg.m if m is None else m, cfg.eps,
        profile=cfg.profile, c_B=cfg.c_B, c_L=cfg.c_L, c_delta=cfg.c_delta, c_eta=cfg.c_eta,
        H=cfg.H, sketch_c=cfg.sketch_c, sketch_delta=cfg.sketch_delta, mode=cfg.mode)


def _strategy(cfg: ExperimentConfig, seed: int, n: int | None = None):
    n = cfg.n if n is None else n
    cls = STRATEGIES[cfg.adversary]
    sseed = child_seed(cfg.master_seed, seed, 2)
    if cfg.adversary == "oblivious_random":
        return cls(n, sseed, max_delta=cfg.max_delta)
    if cfg.adversary == "deletion_heavy":
        return cls(n, sseed, max_delta=cfg.max_delta, delete_prob=cfg.delete_prob)
    return cls(n, sseed)


def run_f2_seed(cfg: ExperimentConfig, seed: int, params=None) -> RunRecord:
    params = params or f2_params(cfg)
    state = TreeState(params, child_seed(cfg.master_seed, seed, 1), operator=cfg.operator)
    tr = run_game(state, _strategy(cfg, seed), cfg.m, eps=cfg.eps, reference=True)
    return RunRecord(
        seed=seed, max_rel_err=tr.max_rel_err, iterate_updates=list(state.iterate_updates[1:]),
        peak_words=state.peak_words, break_time=tr.break_time, failure=tr.failure,
        violations=state.violations, max_update_count=state.max_update_count(),
        L_max=params.L_max, transcript_csv=tr.to_csv() if cfg.write_transcripts else "",
        extra={"guard_events": state.guard_events, "rejects": list(state.rejects[1:])})


def run_tri_seed(cfg: ExperimentConfig, seed: int) -> RunRecord:
    loss = cfg.loss()
    fn = tri_function(loss, cfg.n, cfg.m)
    tp = tri_params(cfg.n, cfg.m, loss.beta, C=cfg.C, kappa=cfg.kappa, H=cfg.H)
    op = "oracle" if cfg.operator in ("exact", "oracle") else "cauchy"
    est = TriEstimator(fn, tp, child_seed(cfg.master_seed, seed, 1), operator=op)
    tr = run_game(est, _strategy(cfg, seed), cfg.m, eps=cfg.eps, reference=True, truth=fn.eval)
    pairs = list(zip(tr.responses, tr.truths))
    ratios = [r / t for r, t in pairs if t > 0]
    # a tri run breaks when it leaves [F, kappa^(3H+1) F], not (1 +- eps) F
    misses = [k + 1 for k, (r, t) in enumerate(pairs)
              if not (t * (1 - 1e-9) - 1e-12 <= r <= tp.envelope * t * (1 + 1e-9) + 1e-12)]
    return RunRecord(
        seed=seed, max_rel_err=tr.max_rel_err,
        iterate_updates=list(est.resets[1:]), peak_words=0,
        break_time=misses[0] if misses else None,
        failure=tr.failure, violations=est.violations,
        max_update_count=max(est.max_node_resets), L_max=tp.L_max_tri,
        transcript_csv=tr.to_csv() if cfg.write_transcripts else "",
        extra={"envelope_misses": len(misses), "envelope": tp.envelope,
               "min_ratio": min(ratios) if ratios else None,
               "max_ratio": max(ratios) if ratios else None})


def run_heavy_seed(cfg: ExperimentConfig, seed: int) -> RunRecord:
    n, eps_hh = cfg.n, cfg.eps_hh
    rng = np.random.default_rng(child_seed(cfg.master_seed, seed, 2))
    x, planted = planted_vector(n, eps_hh, rng) if cfg.planted else (None, None)
    stream_len = n if cfg.planted else cfg.m
    m = stream_len + updates_per_report(n)
    if cfg.hh_operator == "oracle":
        state = ExactF2(n)
    else:
        eps_f2 = cfg.eps_f2 if cfg.eps_f2 is not None else eps_hh**2 / 50
        params = size_parameters(n, m, eps_f2, c_eta=cfg.c_eta, H=cfg.H, mode=cfg.mode,
                                 memory_cap=2**40 if cfg.hh_operator == "exact" else 1 << 27)
        op = "exact" if cfg.hh_operator == "exact" else "ams"
        state = TreeState(params, child_seed(cfg.master_seed, seed, 1), operator=op)
    if cfg.planted:
        for i in rng.permutation(n):
            state.process(int(i) + 1, int(x[i]))
    else:
        strat = _strategy(cfg, seed)
        run_game(state, strat, stream_len, eps=cfg.eps, reference=False)
    report = find_heavy(state, eps_hh)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "i", "S2", "T2", "margin"])
    for row in report.rows():
        w.writerow([row[0], row[1], repr(row[2]), repr(row[3]), repr(row[4])])
    extra = {"hits": sorted(report.hits), "planted": planted, "X": report.X}
    if x is not None:
        norm = math.sqrt(float(x @ x))
        extra["contains_planted"] = planted in report.hits
        extra["light_excluded"] = all(abs(x[i - 1]) > 0.5 * eps_hh * norm for i in report.hits)
    return RunRecord(seed=seed, max_rel_err=None, iterate_updates=[], peak_words=0,
                     break_time=None, transcript_csv=buf.getvalue(), extra=extra)


def planted_vector(n: int, eps_hh: float, rng: np.random.Generator, factor: float = 1.01):
    """Flat background of random signs plus one coordinate at factor * eps_hh * ||x||."""
    b = int(rng.integers(5, 21))
    k = n - 1
    r2 = (factor * eps_hh) ** 2
    h = math.ceil(b * math.sqrt(r2 * k / (1.0 - r2)))
    x = b * rng.choice(np.array([-1, 1], dtype=np.int64), size=n)
    j = int(rng.integers(n))
    x[j] = h * int(rng.choice([-1, 1]))
    return x, j + 1


SUMMARY_BASE = ["seed", "max_rel_err"]


def summary_csv(records: list[RunRecord]) -> str:
    levels = max((len(r.iterate_updates) for r in records), default=0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "max_rel_err"] + [f"iter_level_{i + 1}" for i in range(levels)]
               + ["peak_words", "break_time"])
    for r in records:
        err = "" if r.max_rel_err is None else repr(float(r.max_rel_err))
        its = list(r.iterate_updates) + [0] * (levels - len(r.iterate_updates))
        bt = "" if r.break_time is None else r.break_time
        w.writerow([r.seed, err] + its + [r.peak_words, bt])
    return buf.getvalue()


def run_batch(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> list[RunRecord]:
    """Run every seed, then write transcripts and the summary in seed order."""
    runner = {"f2": run_f2_seed, "tri": run_tri_seed, "heavy_hitters": run_heavy_seed}[cfg.task]
    if cfg.task == "f2":
        params = f2_params(cfg)
        job = lambda s: run_f2_seed(cfg, s, params)  # noqa: E731
    else:
        job = lambda s: runner(cfg, s)  # noqa: E731
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            records = list(pool.map(job, cfg.seeds))
    else:
        records = [job(s) for s in cfg.seeds]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for r in records:
            if cfg.write_transcripts:
                (out / f"{cfg.task}_seed{r.seed:04d}.csv").write_text(r.transcript_csv, encoding="ascii")
        (out / "summary.csv").write_text(summary_csv(records), encoding="ascii")
    return records


# ---------------------------------------------------------------- subcommands


def cmd_run(cfg: ExperimentConfig, args) -> int:
    out = cfg.out_dir()
    t0 = time.perf_counter()
    records = run_batch(cfg, out)
    failures = [r for r in records if r.failure]
    print(f"{cfg.task}: {len(records)} runs in {time.perf_counter() - t0:.1f}s -> {out}")
    if cfg.task == "f2":
        ok = sum(1 for r in records if r.max_rel_err is not None and r.max_rel_err <= cfg.eps)
        print(f"runs within eps={cfg.eps}: {ok}/{len(records)}")
    for r in failures:
        print(f"seed {r.seed}: algorithm failure: {r.failure}")
    # accuracy verdicts are data; an aborted run means the batch did not complete
    return EXIT_RUNTIME if failures else EXIT_OK


def cmd_attack_demo(cfg: ExperimentConfig, args) -> int:
    n, k, M = cfg.n, cfg.gram_k, cfg.gram_M
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    rows = [["seed", "target", "feasible", "reported", "true", "ratio", "probe_rounds",
             "max_rel_err", "break_time"]]
    for seed in cfg.seeds:
        naive = NaiveMeanAMS(n, k, child_seed(cfg.master_seed, seed, 1))
        cert, tr = gram_attack(naive, n, k, M=M, eps=cfg.eps)
        rows.append([seed, "naive", cert.feasible, repr(cert.reported), repr(cert.true),
                     repr(cert.ratio), cert.probe_rounds, repr(tr.max_rel_err), tr.break_time or ""])
        params = size_parameters(n, gram_probe_budget(n), cfg.eps, c_eta=cfg.c_eta, H=cfg.H)
        robust = TreeState(params, child_seed(cfg.master_seed, seed, 1))
        cert_r, tr_r = gram_attack(robust, n, k, M=M, force=True, eps=cfg.eps)
        rows.append([seed, "robust", cert_r.feasible, repr(cert_r.reported), repr(cert_r.true),
                     repr(cert_r.ratio), cert_r.probe_rounds, repr(tr_r.max_rel_err),
                     tr_r.break_time or ""])
        print(f"seed {seed}: naive ratio {cert.ratio:.3g}, robust max rel err {tr_r.max_rel_err:.4f}")
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    (out / "attack_demo.csv").write_text(buf.getvalue(), encoding="ascii")
    return EXIT_OK


def cmd_heavy(cfg: ExperimentConfig, args) -> int:
    cfg.task = "heavy_hitters"
    out = cfg.out_dir()
    records = run_batch(cfg, out)
    for r in records:
        print(f"seed {r.seed}: hits {r.extra['hits']} planted {r.extra['planted']}")
    return EXIT_OK


def tri_check_suite(samples: int = 10_000, seed: int = 0) -> list[tuple[str, str, bool, str]]:
    specs = [LossSpec("lp_p", p=p) for p in (0.0, 0.5, 1.0, 1.5, 2.0)]
    specs += [LossSpec(f) for f in ("pseudo_huber", "cauchy_loss", "charbonnier", "welsch",
                                    "geman_mcclure")]
    rows = []
    for spec in specs:
        rep = check_beta_triangle(spec, samples, seed)
        rows.append(("beta_triangle", spec.label, rep.passed,
                     f"beta={rep.beta:g} worst={rep.worst_ratio:.6g}"))
    for spec in specs:
        if spec.bernstein:
            rep = check_bernstein_derivative(spec, seed=seed)
            rows.append(("bernstein_derivative", spec.label, rep.passed,
                         f"grid={rep.grid_points} failures={len(rep.failures)}"))
    return rows


def cmd_tri_check(cfg: ExperimentConfig, args) -> int:
    for check, label, ok, detail in tri_check_suite(args.samples, cfg.master_seed):
        print(f"{'PASS' if ok else 'FAIL'} {check} {label} {detail}")
    return EXIT_OK


def space_sweep(cfg: ExperimentConfig, ns: list[int] | None = None) -> list[dict]:
    rows = []
    for n in ns or cfg.sweep_n:
        params = f2_params(cfg, n=n)
        state = TreeState(params, child_seed(cfg.master_seed, n, 1), operator=cfg.operator)
        run_game(state, _strategy(cfg, 0, n=n), cfg.m, eps=cfg.eps, reference=False)
        rep = space_report(state)
        rows.append({"n": n, "peak_words": state.peak_words, **{k: rep[k] for k in
                     ("sketch_state", "ledger", "hash_coefficients", "counters", "total")}})
    return rows


def cmd_space_sweep(cfg: ExperimentConfig, args) -> int:
    rows = space_sweep(cfg)
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    cols = ["n", "peak_words", "sketch_state", "ledger", "hash_coefficients", "counters", "total"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([r[c] for c in cols])
    (out / "space_sweep.csv").write_text(buf.getvalue(), encoding="ascii")
    sys.stdout.write(buf.getvalue())
    growth = rows[-1]["peak_words"] / rows[0]["peak_words"]
    print(f"peak words growth {rows[0]['n']} -> {rows[-1]['n']}: {growth:.3f}x")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "attack-demo": cmd_attack_demo,
    "heavy": cmd_heavy,
    "tri-check": cmd_tri_check,
    "space-sweep": cmd_space_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robuststream", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", nargs="?", help="INI config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="override a config value")
        p.add_argument("--out", help="output directory (default: $%s or ./out)" % ENV_OUT)
        if name == "tri-check":
            p.add_argument("--samples", type=int, default=10_000)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = load_config(args.config, args.overrides)
        if args.out:
            cfg.output_dir = args.out
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg, args)
    except SizingError as exc:
        print(f"sizing error: {exc} {exc.diagnostics}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

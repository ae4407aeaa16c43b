"""Command-line front end: evaluate policies, train agents, build tables.

Subcommands
    run      evaluate policies on seeded run batches, one file pair per cell
    train    train a Q-learning policy (repeated, best-of selection)
    compare  evaluate several policies and mark statistical significance
    ablate   symbolic schedule ablation or per-mask training ablation
    export   policy lookup tables and normalized-ERT-vs-n plot data
    table    presets of compare: "baselines" or "ablation"

Every experiment is described by an ExperimentManifest.  Manifests live in
JSON files (--manifest); any command-line flag overrides the corresponding
manifest field.  Outputs land under --output-dir, the LLGA_OUTPUT_ROOT
environment variable, or ./results, with file names embedding policy id,
problem size, seed count, and package version.  Identical manifests and
master seeds produce byte-identical outputs.

Exit codes: 0 success, 2 usage error, 3 invalid manifest or input file,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields as dataclass_fields
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .bitstrings import ContractViolationError
from .ddqn import (
    PARAM_ORDER,
    TrainConfig,
    TrainingArtifact,
    TrainingDivergedError,
    best_artifact,
    export_learned_policy,
    train_repetitions,
)
from .engine import Policy, default_cutoff
from .nets import ModelFormatError, load_model, save_model
from .policies import (
    ABLATION_ROWS,
    CompositePolicy,
    SelfAdjustConfig,
    SelfAdjustingPolicy,
    TableFormatError,
    TablePolicy,
    TheoryPolicy,
    TwoPhasePolicy,
    UShapeAlphaPolicy,
    ablation_policies,
    one_fifth_policy,
    tuned_policy,
    write_policy_table,
)
from .stats import (
    comparison_table,
    evaluate_policy,
    render_table_csv,
    render_table_json,
    render_table_text,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_RUNTIME = 4

OUTPUT_ROOT_ENV = "LLGA_OUTPUT_ROOT"
VERSION_TAG = f"v{__version__}"

POLICY_FORMS = (
    "theory",
    "two_phase",
    "ushape",
    "tuned",
    "one_fifth[:F]",
    "self_adjusting:key=value,...",
    "composite:lambda_m=...,alpha=...,lambda_c=...,beta=...",
    "ablation:<row>",
    "table:<csv path>",
    "model:<training rep directory>",
)


class UsageError(Exception):
    """Bad command usage: unknown policy, zero seeds, missing arguments."""


@dataclass
class ExperimentManifest:
    """Everything a command needs; JSON keys match the field names."""

    command: str = ""
    ns: tuple[int, ...] = ()
    policies: tuple[str, ...] = ()
    runs: int = 1000
    master_seed: int = 1
    output_dir: Optional[str] = None
    parallel: int = 0  # 0 means all available cores
    level: float = 0.01
    repetitions: Optional[int] = None
    train: dict = field(default_factory=dict)
    ablation: str = "symbolic"
    masks: tuple[tuple[str, ...], ...] = ()
    which: str = "baselines"

    def validate(self) -> None:
        if self.runs < 1:
            raise UsageError("need at least one seed (runs >= 1)")
        if self.master_seed < 0:
            raise ContractViolationError("master_seed must be >= 0")
        if self.parallel < 0:
            raise ContractViolationError("parallel must be >= 0")
        if not (0.0 < self.level < 1.0):
            raise ContractViolationError("level must lie in (0, 1)")
        if any(n < 2 for n in self.ns):
            raise ContractViolationError("problem sizes must be >= 2")
        if self.ablation not in ("symbolic", "rl"):
            raise ContractViolationError("ablation must be 'symbolic' or 'rl'")
        if self.which not in ("baselines", "ablation"):
            raise ContractViolationError("which must be 'baselines' or 'ablation'")
        if self.repetitions is not None and self.repetitions < 1:
            raise ContractViolationError("repetitions must be >= 1")

    def effective_parallel(self) -> int:
        return self.parallel if self.parallel > 0 else (os.cpu_count() or 1)

    def output_root(self) -> Path:
        root = self.output_dir or os.environ.get(OUTPUT_ROOT_ENV) or "results"
        path = Path(root)
        path.mkdir(parents=True, exist_ok=True)
        return path


_MANIFEST_FIELDS = {f.name for f in dataclass_fields(ExperimentManifest)}


def load_manifest(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ContractViolationError(f"{path}: not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ContractViolationError(f"{path}: manifest must be a JSON object")
    unknown = sorted(set(raw) - _MANIFEST_FIELDS)
    if unknown:
        raise ContractViolationError(
            f"{path}: unknown manifest fields {unknown}; "
            f"known fields: {sorted(_MANIFEST_FIELDS)}"
        )
    return raw


def _normalize(man: ExperimentManifest) -> ExperimentManifest:
    man.ns = tuple(int(n) for n in man.ns)
    man.policies = tuple(str(p) for p in man.policies)
    man.masks = tuple(tuple(str(m) for m in mask) for mask in man.masks)
    return man


# ---------------------------------------------------------------------------
# Policy resolution


def _parse_kv(body: str, what: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for piece in body.split(","):
        piece = piece.strip()
        if not piece:
            continue
        if "=" not in piece:
            raise UsageError(f"{what}: expected key=value, got {piece!r}")
        key, _, value = piece.partition("=")
        out[key.strip()] = value.strip()
    return out


def _source_of(token: str):
    if token in ("theory", "staged"):
        return token
    try:
        return float(token)
    except ValueError:
        raise UsageError(
            f"composite source must be 'theory', 'staged', or a number, got {token!r}"
        ) from None


def load_artifact_policy(rep_dir) -> TablePolicy:
    """Greedy table of the model stored in one training repetition directory."""
    rep = Path(rep_dir)
    meta = json.loads((rep / "meta.json").read_text())
    config = TrainConfig(**{
        key: tuple(v) if isinstance(v, list) else v
        for key, v in meta["config"].items()
    })
    _, params = load_model(rep / "model.npz")
    return export_learned_policy(params, config.codec(), config.n)


def resolve_policy(spec: str) -> Policy:
    """Build a policy from its command-line identifier."""
    head, _, body = spec.partition(":")
    if head == "theory":
        return TheoryPolicy()
    if head == "two_phase":
        return TwoPhasePolicy()
    if head == "ushape":
        return UShapeAlphaPolicy()
    if head == "tuned":
        return tuned_policy()
    if head == "one_fifth":
        try:
            forget = float(body) if body else 1.5
        except ValueError:
            raise UsageError(f"one_fifth expects a number, got {body!r}") from None
        return one_fifth_policy(forget)
    if head == "self_adjusting":
        kv = _parse_kv(body, "self_adjusting")
        keys = {
            "alpha": float, "beta": float, "crossover_ratio": float,
            "inc_factor": float, "dec_factor": float, "lambda_init": float,
            "plateau": str,
        }
        unknown = sorted(set(kv) - set(keys))
        if unknown:
            raise UsageError(
                f"self_adjusting: unknown keys {unknown}; known: {sorted(keys)}"
            )
        return SelfAdjustingPolicy(
            SelfAdjustConfig(**{k: keys[k](v) for k, v in kv.items()})
        )
    if head == "composite":
        kv = _parse_kv(body, "composite")
        unknown = sorted(set(kv) - set(PARAM_ORDER))
        if unknown:
            raise UsageError(
                f"composite: unknown parameters {unknown}; known: {list(PARAM_ORDER)}"
            )
        return CompositePolicy(**{k: _source_of(v) for k, v in kv.items()})
    if head == "ablation":
        rows = dict(ABLATION_ROWS)
        if body not in rows:
            raise UsageError(
                f"unknown ablation row {body!r}; known: {list(rows)}"
            )
        return CompositePolicy(*rows[body])
    if head == "table":
        if not body:
            raise UsageError("table policy needs a CSV path: table:<path>")
        return TablePolicy.from_csv(body)
    if head == "model":
        if not body:
            raise UsageError("model policy needs a directory: model:<rep dir>")
        return load_artifact_policy(body)
    raise UsageError(
        f"unknown policy {spec!r}; known forms: {', '.join(POLICY_FORMS)}"
    )


def _slug(text: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "._" else "-" for ch in text)


def _json_safe(v: Optional[float]) -> Optional[float]:
    if v is None or math.isnan(v) or math.isinf(v):
        return None
    return v


def _write(path: Path, text: str) -> None:
    path.write_text(text)
    print(f"wrote {path}")


# ---------------------------------------------------------------------------
# Commands


def cmd_run(man: ExperimentManifest) -> int:
    ns = man.ns or (100,)
    if not man.policies:
        raise UsageError("run needs at least one --policy")
    out = man.output_root()
    for spec in man.policies:
        policy = resolve_policy(spec)
        pid = _slug(spec)
        for n in ns:
            summary = evaluate_policy(
                policy, n, man.runs, man.master_seed,
                parallel=man.effective_parallel(),
            )
            stem = f"run_{pid}_n{n}_s{man.runs}_{VERSION_TAG}"
            payload = {
                "policy": spec,
                "n": n,
                "runs": summary.runs,
                "successes": summary.successes,
                "ert": _json_safe(summary.ert),
                "normalized_ert": _json_safe(summary.normalized_ert),
                "std": _json_safe(summary.std),
                "master_seed": man.master_seed,
                "cutoff": default_cutoff(n),
                "per_seed_evaluations": list(summary.evaluations),
                "per_seed_success": list(summary.success_flags),
            }
            _write(out / f"{stem}.json",
                   json.dumps(payload, indent=2, allow_nan=False) + "\n")
            lines = ["seed,evaluations,success"]
            lines += [
                f"{seed},{ev},{int(ok)}"
                for seed, (ev, ok) in enumerate(
                    zip(summary.evaluations, summary.success_flags)
                )
            ]
            _write(out / f"{stem}.csv", "\n".join(lines) + "\n")
            print(
                f"{spec} n={n}: normalized ERT "
                f"{summary.normalized_ert:.3f} "
                f"({summary.successes}/{summary.runs} successes)"
            )
    return EXIT_OK


def _compare_once(man: ExperimentManifest, specs: Sequence[str],
                  ns: Sequence[int], stem: str) -> int:
    policies = [(spec, resolve_policy(spec)) for spec in specs]
    cells = comparison_table(
        policies, ns, man.runs, man.master_seed,
        level=man.level, parallel=man.effective_parallel(),
    )
    out = man.output_root()
    _write(out / f"{stem}.csv", render_table_csv(cells))
    _write(out / f"{stem}.json", render_table_json(cells, level=man.level))
    text = render_table_text(cells)
    _write(out / f"{stem}.txt", text)
    print(text, end="")
    return EXIT_OK


def cmd_compare(man: ExperimentManifest) -> int:
    if not man.policies:
        raise UsageError("compare needs at least one --policy")
    ns = man.ns or (100,)
    ids = "+".join(_slug(s) for s in man.policies)
    nstr = "-".join(str(n) for n in ns)
    return _compare_once(
        man, man.policies, ns, f"compare_{ids}_n{nstr}_s{man.runs}_{VERSION_TAG}"
    )


def cmd_table(man: ExperimentManifest) -> int:
    if man.which == "baselines":
        specs = ("theory", "one_fifth:1.5", "tuned", "two_phase")
        ns = man.ns or (100, 500, 2000)
    else:
        specs = tuple(f"ablation:{name}" for name, _ in ABLATION_ROWS)
        ns = man.ns or (3000,)
    nstr = "-".join(str(n) for n in ns)
    return _compare_once(
        man, specs, ns, f"table_{man.which}_n{nstr}_s{man.runs}_{VERSION_TAG}"
    )


def _write_artifact(art: TrainingArtifact, rep_dir: Path) -> None:
    rep_dir.mkdir(parents=True, exist_ok=True)
    lines = ["step,eval_ert_mean,eval_ert_std"]
    for step, mean, std in art.learning_curve():
        std_txt = "nan" if math.isnan(std) else f"{std:.6f}"
        mean_txt = "inf" if math.isinf(mean) else f"{mean:.6f}"
        lines.append(f"{step},{mean_txt},{std_txt}")
    _write(rep_dir / "learning_curve.csv", "\n".join(lines) + "\n")

    spec = art.config.codec().network_spec(art.config.hidden)
    save_model(rep_dir / "model.npz", spec, art.best_params)
    print(f"wrote {rep_dir / 'model.npz'}")
    write_policy_table(art.best_table(), art.config.n, rep_dir / "policy.csv")
    print(f"wrote {rep_dir / 'policy.csv'}")

    meta = {
        "config": asdict(art.config),
        "master_seed": art.master_seed,
        "repetition": art.repetition,
        "bias": art.bias,
        "best_step": art.best_step,
        "best_ert": _json_safe(art.best_ert),
        "reevaluated": [
            [step, _json_safe(ert)] for step, ert in art.reevaluated
        ],
    }
    _write(rep_dir / "meta.json",
           json.dumps(meta, indent=2, allow_nan=False) + "\n")


def _train_config(man: ExperimentManifest) -> TrainConfig:
    overrides = dict(man.train)
    if "controlled" in overrides:
        overrides["controlled"] = tuple(overrides["controlled"])
    if "hidden" in overrides:
        overrides["hidden"] = tuple(overrides["hidden"])
    if man.ns and "n" not in overrides:
        overrides["n"] = man.ns[0]
    if man.repetitions is not None:
        overrides["repetitions"] = man.repetitions
    try:
        return TrainConfig(**overrides)
    except TypeError as exc:
        raise ContractViolationError(f"invalid train config: {exc}") from None


def cmd_train(man: ExperimentManifest) -> int:
    config = _train_config(man)
    arts = train_repetitions(
        config, man.master_seed, config.repetitions,
        parallel=man.effective_parallel(),
    )
    out = man.output_root()
    stem = (
        f"train_{config.mode}_{config.reward_mode}_n{config.n}"
        f"_s{man.master_seed}_{VERSION_TAG}"
    )
    run_dir = out / stem
    for art in arts:
        _write_artifact(art, run_dir / f"rep{art.repetition}")
    best = best_artifact(arts)
    summary = {
        "best_repetition": best.repetition,
        "best_step": best.best_step,
        "best_ert": _json_safe(best.best_ert),
        "repetitions": [
            {"repetition": a.repetition, "best_step": a.best_step,
             "best_ert": _json_safe(a.best_ert)}
            for a in arts
        ],
    }
    _write(run_dir / "best.json",
           json.dumps(summary, indent=2, allow_nan=False) + "\n")
    write_policy_table(best.best_table(), config.n, run_dir / "best_policy.csv")
    print(f"wrote {run_dir / 'best_policy.csv'}")
    ert = "inf" if math.isinf(best.best_ert) else f"{best.best_ert:.3f}"
    print(
        f"best repetition {best.repetition} (step {best.best_step}): "
        f"normalized ERT {ert}"
    )
    return EXIT_OK


def cmd_ablate(man: ExperimentManifest) -> int:
    if man.ablation == "symbolic":
        specs = tuple(f"ablation:{name}" for name, _ in ABLATION_ROWS)
        ns = man.ns or (3000,)
        nstr = "-".join(str(n) for n in ns)
        return _compare_once(
            man, specs, ns, f"ablate_symbolic_n{nstr}_s{man.runs}_{VERSION_TAG}"
        )
    if not man.masks:
        raise UsageError(
            "rl ablation needs at least one --mask, e.g. --mask lambda_m,alpha"
        )
    out = man.output_root()
    rows = []
    for mask in man.masks:
        overrides = dict(man.train)
        overrides["controlled"] = mask
        sub = ExperimentManifest(**{**asdict(man), "train": overrides})
        _normalize(sub)
        config = _train_config(sub)
        arts = train_repetitions(
            config, man.master_seed, config.repetitions,
            parallel=man.effective_parallel(),
        )
        best = best_artifact(arts)
        mask_dir = (
            out / f"ablate_rl_{_slug('-'.join(mask))}_n{config.n}"
                  f"_s{man.master_seed}_{VERSION_TAG}"
        )
        for art in arts:
            _write_artifact(art, mask_dir / f"rep{art.repetition}")
        write_policy_table(best.best_table(), config.n,
                           mask_dir / "best_policy.csv")
        print(f"wrote {mask_dir / 'best_policy.csv'}")
        rows.append({
            "mask": list(mask),
            "best_repetition": best.repetition,
            "best_step": best.best_step,
            "best_ert": _json_safe(best.best_ert),
        })
        ert = "inf" if math.isinf(best.best_ert) else f"{best.best_ert:.3f}"
        print(f"mask {','.join(mask)}: best normalized ERT {ert}")
    n_used = rows and _train_config(man).n
    _write(
        out / f"ablate_rl_n{n_used}_s{man.master_seed}_{VERSION_TAG}.json",
        json.dumps({"masks": rows}, indent=2, allow_nan=False) + "\n",
    )
    return EXIT_OK


def cmd_export(man: ExperimentManifest) -> int:
    if not man.policies:
        raise UsageError("export needs at least one --policy")
    ns = man.ns or (100,)
    out = man.output_root()
    series = []
    for spec in man.policies:
        policy = resolve_policy(spec)
        pid = _slug(spec)
        for n in ns:
            if not isinstance(policy, SelfAdjustingPolicy):
                path = out / f"policy_{pid}_n{n}_{VERSION_TAG}.csv"
                write_policy_table(policy, n, path)
                print(f"wrote {path}")
            else:
                print(f"{spec}: no per-fitness table (history-dependent); "
                      f"skipping table export")
            summary = evaluate_policy(
                policy, n, man.runs, man.master_seed,
                parallel=man.effective_parallel(),
            )
            series.append((spec, n, summary.normalized_ert))
    lines = ["policy,n,normalized_ert"]
    lines += [
        f"{spec},{n}," + ("inf" if math.isinf(e) else f"{e:.6f}")
        for spec, n, e in series
    ]
    nstr = "-".join(str(n) for n in ns)
    _write(out / f"plotdata_n{nstr}_s{man.runs}_{VERSION_TAG}.csv",
           "\n".join(lines) + "\n")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "train": cmd_train,
    "compare": cmd_compare,
    "ablate": cmd_ablate,
    "export": cmd_export,
    "table": cmd_table,
}


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="llga",
        description="Evaluate, train, and compare parameter-control policies "
                    "for the four-parameter crossover GA on OneMax.",
    )
    parser.add_argument("--version", action="version", version=VERSION_TAG)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--manifest", help="JSON manifest file; flags override it")
        p.add_argument("--n", type=int, action="append", dest="ns",
                       help="problem size (repeatable)")
        p.add_argument("--policy", action="append", dest="policies",
                       help="policy identifier (repeatable); "
                            f"forms: {', '.join(POLICY_FORMS)}")
        p.add_argument("--runs", type=int, help="seeds per (policy, n) cell")
        p.add_argument("--master-seed", type=int, dest="master_seed")
        p.add_argument("--output-dir", dest="output_dir")
        p.add_argument("--parallel", type=int,
                       help="worker processes (0 = all cores)")
        p.add_argument("--level", type=float, help="significance level")

    for name in ("run", "compare", "export"):
        common(sub.add_parser(name))

    p_train = sub.add_parser("train")
    common(p_train)
    p_train.add_argument("--repetitions", type=int)
    p_train.add_argument("--budget-steps", type=int, dest="budget_steps")
    p_train.add_argument("--gamma", type=float)
    p_train.add_argument("--epsilon", type=float)
    p_train.add_argument("--mode", choices=("factored", "combinatorial"))
    p_train.add_argument("--reward-mode", dest="reward_mode",
                         choices=("naive", "adaptive_shift"))
    p_train.add_argument("--controlled",
                         help="comma-separated parameter names under RL control")

    p_ablate = sub.add_parser("ablate")
    common(p_ablate)
    p_ablate.add_argument("--ablation", choices=("symbolic", "rl"))
    p_ablate.add_argument("--mask", action="append", dest="masks",
                          help="comma-separated controlled set (repeatable, rl only)")
    p_ablate.add_argument("--repetitions", type=int)
    p_ablate.add_argument("--budget-steps", type=int, dest="budget_steps")
    p_ablate.add_argument("--gamma", type=float)

    p_table = sub.add_parser("table")
    common(p_table)
    p_table.add_argument("--which", choices=("baselines", "ablation"))

    return parser


_TRAIN_FLAGS = ("budget_steps", "gamma", "epsilon", "mode", "reward_mode")


def manifest_from_args(args: argparse.Namespace) -> ExperimentManifest:
    data: dict = {}
    if getattr(args, "manifest", None):
        data.update(load_manifest(args.manifest))
    data["command"] = args.command

    for key in ("ns", "policies", "runs", "master_seed", "output_dir",
                "parallel", "level", "repetitions", "ablation", "which"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value

    train = dict(data.get("train", {}))
    for key in _TRAIN_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            train[key] = value
    controlled = getattr(args, "controlled", None)
    if controlled is not None:
        train["controlled"] = tuple(
            s.strip() for s in controlled.split(",") if s.strip()
        )
    if train:
        data["train"] = train

    masks = getattr(args, "masks", None)
    if masks is not None:
        data["masks"] = tuple(
            tuple(s.strip() for s in m.split(",") if s.strip()) for m in masks
        )

    try:
        man = ExperimentManifest(**data)
    except TypeError as exc:
        raise ContractViolationError(f"invalid manifest: {exc}") from None
    _normalize(man)
    man.validate()
    return man


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles --help and usage errors
        return int(exc.code or 0)
    try:
        man = manifest_from_args(args)
        return COMMANDS[man.command](man)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractViolationError, TableFormatError, ModelFormatError,
            FileNotFoundError, NotADirectoryError, PermissionError,
            KeyError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingDivergedError, OSError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

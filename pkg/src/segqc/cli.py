"""Command-line entry point: ``segqc <subcommand> ...``.

Subcommands
-----------
metrics    structure-wise uncertainty metrics (and Dice against a reference)
simulate   synthetic cohort of phantoms, MC sample sets and a cohort CSV
degrade    Rician-corrupted copies of an intensity volume
regress    weighted group regression of one structure volume on covariates
stability  change of the entropy map as MC samples are added

Exit status is 0 on success and 2 on any usage or input error.  Nothing is
written when an error is detected: reports are assembled in memory (or in a
scratch directory for ``simulate``) and only then moved into place.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Sequence


from . import __version__
from .degradation import DEFAULT_LEVELS_DB, NoiseSpec, rician_corrupt
from .errors import DegenerateInput, SegQCError
from .group import WeightScheme, group_analysis
from .io import (
    EVAL_COLUMNS,
    METRIC_COLUMNS,
    REGRESSION_COLUMNS,
    STABILITY_COLUMNS,
    load_svol,
    read_cohort_csv,
    read_table_json,
    save_svol,
    write_cohort_csv,
    write_svol,
    write_table_csv,
    write_table_json,
)
from .phantom import CovariateModel, SamplerSpec, draw_subject, icv_fractions, simulate_subject
from .quality import EvalRecord, METRIC_NAMES, classify, iou_proxy_mae, pearson, proxy_accuracy
from .uncertainty import StructureMetrics, entropy_stability, structure_metrics
from .volume import IntensityVolume, LabelVolume, McSampleSet, ProbStack, aggregate_mean_argmax, dice, majority_vote

log = logging.getLogger("segqc")

JOBS_ENV = "SEGQC_JOBS"
SVOL_SUFFIX = ".svol"


class InputError(Exception):
    """Bad user input; reported on stderr with exit status 2."""

    def __init__(self, message: str, details: Sequence[str] = ()):
        super().__init__(message)
        self.details = list(details)

    def __reduce__(self):
        return type(self), (str(self), self.details)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _pair(text: str) -> tuple[float, float]:
    vals = _float_list(text)
    if len(vals) != 2 or vals[0] > vals[1]:
        raise argparse.ArgumentTypeError(f"expected 'low,high' with low <= high, got {text!r}")
    return vals[0], vals[1]


def _dims(text: str) -> tuple[int, int, int]:
    vals = _int_list(text)
    if len(vals) == 1:
        vals *= 3
    if len(vals) != 3 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected 'X,Y,Z' or a single edge length, got {text!r}")
    return tuple(vals)  # type: ignore[return-value]


def _resolve_jobs(jobs: int | None) -> int:
    if jobs is None:
        env = os.environ.get(JOBS_ENV, "").strip()
        if not env:
            return 1
        try:
            jobs = int(env)
        except ValueError:
            raise InputError(f"{JOBS_ENV}={env!r} is not an integer") from None
    if jobs < 1:
        raise InputError(f"--jobs must be >= 1, got {jobs}")
    return jobs


def _parallel_map(fn: Callable, items: Sequence, jobs: int) -> list:
    # results come back in input order, so output never depends on ``jobs``
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


def _prepare_out_dir(path: Path) -> None:
    if path.exists() and not path.is_dir():
        raise InputError(f"output path {path} exists and is not a directory")
    parent = path.parent if not path.exists() else path
    probe = parent
    while not probe.exists():
        probe = probe.parent
    if not os.access(probe, os.W_OK):
        raise InputError(f"output location {path} is not writable")


def _write_files(out_dir: Path, files: dict[str, str | bytes]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, content in files.items():
        target = out_dir / name
        if isinstance(content, bytes):
            target.write_bytes(content)
        else:
            target.write_text(content)


def _svol_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix == SVOL_SUFFIX)


def _load_many(paths: Iterable[Path]) -> tuple[list, list[str]]:
    vols, problems = [], []
    for p in paths:
        try:
            vols.append(load_svol(p))
        except (SegQCError, ValueError, OSError) as exc:
            problems.append(f"{p}: {exc}")
    return vols, problems


def _sample_set(paths: Sequence[Path], subject_id: str) -> McSampleSet:
    vols, problems = _load_many(paths)
    if problems:
        raise InputError(f"could not read samples of {subject_id}", problems)
    kinds = {type(v) for v in vols}
    if kinds == {ProbStack}:
        return McSampleSet.from_probs(vols, subject_id=subject_id)
    if kinds == {LabelVolume}:
        return McSampleSet.from_labels(vols, subject_id=subject_id)
    raise InputError(f"{subject_id}: samples must be all prob or all labels files, got {sorted(k.__name__ for k in kinds)}")


def _discover_subjects(samples: Path) -> list[tuple[str, list[Path]]]:
    """``samples`` holds either one subject's files or one subdirectory per subject."""
    if not samples.is_dir():
        raise InputError(f"samples directory {samples} does not exist")
    direct = _svol_files(samples)
    if direct:
        return [(samples.name, direct)]
    subjects = []
    for sub in sorted(p for p in samples.iterdir() if p.is_dir()):
        files = _svol_files(sub)
        if files:
            subjects.append((sub.name, files))
    if not subjects:
        raise InputError(f"no {SVOL_SUFFIX} files found under {samples}")
    return subjects


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _metrics_job(task: tuple[str, list[Path], Path | None, list[int] | None]) -> tuple[list[dict], list[dict]]:
    subject_id, paths, truth_path, structures = task
    samples = _sample_set(paths, subject_id)
    final = aggregate_mean_argmax(samples) if samples.has_probs else majority_vote(samples)
    truth = None
    if truth_path is not None:
        truth = load_svol(truth_path)
        if not isinstance(truth, LabelVolume):
            raise InputError(f"{truth_path}: reference must be a labels volume")
        if truth.dims != samples.dims:
            raise InputError(f"{truth_path}: dims {truth.dims} differ from sample dims {samples.dims}")
    wanted = structures if structures is not None else list(range(1, samples.num_classes))
    bad = [s for s in wanted if not 1 <= s < samples.num_classes]
    if bad:
        raise InputError(f"{subject_id}: structures {bad} outside 1..{samples.num_classes - 1}")
    metrics = structure_metrics(samples, wanted, final_seg=final)

    fractions = icv_fractions(final)
    rows, evals = [], []
    for m in metrics:
        rows.append(
            {
                "subject_id": subject_id,
                "structure": m.structure,
                "cv": m.cv,
                "dmc": m.dmc,
                "iou": m.iou,
                "mean_entropy": m.mean_entropy,
                "volume_fraction": fractions[str(m.structure)],
                "quality_class": None if m.iou is None else classify(m.iou).label,
                "mean_volume": m.mean_volume,
                "volume_std": m.volume_std,
            }
        )
        if truth is not None:
            d = dice(final, truth, m.structure)
            evals.append(
                {
                    "subject_id": subject_id,
                    "structure": m.structure,
                    "dice": d,
                    "iou": m.iou,
                    "dmc": m.dmc,
                    "cv": m.cv,
                    "mean_entropy": m.mean_entropy,
                    "dice_class": None if d is None else classify(d).label,
                    "iou_class": None if m.iou is None else classify(m.iou).label,
                }
            )
    return rows, evals


def _eval_summary(evals: list[dict]) -> dict:
    records = [
        EvalRecord(
            e["subject_id"],
            e["structure"],
            e["dice"],
            StructureMetrics(e["structure"], e["cv"], e["dmc"], e["iou"], e["mean_entropy"], 0.0, 0.0),
        )
        for e in evals
    ]
    summary: dict = {"n_records": len(records), "correlation_with_dice": {}}
    for name in METRIC_NAMES:
        try:
            summary["correlation_with_dice"][name] = pearson([r.metric(name) for r in records], [r.dice_vs_truth for r in records])
        except DegenerateInput:
            summary["correlation_with_dice"][name] = None
    try:
        summary["iou_proxy_mae"] = iou_proxy_mae(records)
        summary["proxy_accuracy"] = proxy_accuracy(records)
    except SegQCError:
        summary["iou_proxy_mae"] = summary["proxy_accuracy"] = None
    return summary


def _truth_for(truth: Path | None, subject_id: str, single: bool) -> Path | None:
    if truth is None:
        return None
    if truth.is_file():
        if not single:
            raise InputError("--truth must be a directory when --samples holds several subjects")
        return truth
    if truth.is_dir():
        candidate = truth / f"{subject_id}{SVOL_SUFFIX}"
        if not candidate.is_file():
            raise InputError(f"no reference {candidate} for subject {subject_id}")
        return candidate
    raise InputError(f"reference {truth} does not exist")


def cmd_metrics(args: argparse.Namespace) -> int:
    subjects = _discover_subjects(args.samples)
    tasks = [(sid, paths, _truth_for(args.truth, sid, len(subjects) == 1), args.structures) for sid, paths in subjects]
    _prepare_out_dir(args.out)
    results = _parallel_map(_metrics_job, tasks, _resolve_jobs(args.jobs))
    rows = [r for rs, _ in results for r in rs]
    evals = [e for _, es in results for e in es]

    files: dict[str, str] = {
        "metrics.csv": write_table_csv(rows, METRIC_COLUMNS),
        "metrics.json": write_table_json(rows, METRIC_COLUMNS + ("mean_volume", "volume_std")),
    }
    if args.truth is not None:
        files["eval.csv"] = write_table_csv(evals, EVAL_COLUMNS)
        files["eval.json"] = write_table_json(evals, EVAL_COLUMNS)
        files["summary.json"] = json.dumps(_eval_summary(evals), indent=2) + "\n"
    _write_files(args.out, files)
    print(f"{len(subjects)} subject(s), {len(rows)} structure record(s) -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _simulate_job(task: tuple) -> tuple[int, dict, dict]:
    index, seed, model, rho_range, corrupt_fraction, corrupt_rho_range, dims, sampler, kind, staging = task
    draw = draw_subject(index, seed, model, rho_range, corrupt_fraction, corrupt_rho_range)
    sub = simulate_subject(draw, dims, sampler)
    sid = draw.subject_id
    sample_dir = Path(staging) / "samples" / sid
    sample_dir.mkdir(parents=True, exist_ok=True)
    width = max(2, len(str(sub.samples.n_samples - 1)))
    if kind == "prob":
        vols = sub.samples.require_probs()
    else:
        vols = sub.samples.label_volumes
    for i, v in enumerate(vols):
        save_svol(sample_dir / f"sample_{i:0{width}d}{SVOL_SUFFIX}", v)
    save_svol(Path(staging) / "truth" / f"{sid}{SVOL_SUFFIX}", sub.truth)
    save_svol(Path(staging) / "images" / f"{sid}{SVOL_SUFFIX}", sub.image)
    seg_volumes = icv_fractions(sub.final_segmentation())
    truth_volumes = icv_fractions(sub.truth)
    return index, {"row": sub.row(seg_volumes), "truth_row": sub.row(truth_volumes)}, {
        "subject_id": sid,
        "rho": draw.rho,
        "age": draw.age,
        "sex": draw.sex,
        "diagnosis": draw.diagnosis,
        "site": draw.site,
        "target_fractions": list(draw.fractions),
    }


def cmd_simulate(args: argparse.Namespace) -> int:
    if args.subjects < 1:
        raise InputError("--subjects must be >= 1")
    if args.n_samples < 1:
        raise InputError("--n-samples must be >= 1")
    if not 0.0 <= args.corrupt_fraction <= 1.0:
        raise InputError("--corrupt-fraction must lie in [0, 1]")
    if args.rho_range[0] < 0:
        raise InputError("--rho-range must be non-negative")
    jobs = _resolve_jobs(args.jobs)
    out: Path = args.out
    _prepare_out_dir(out)
    if out.is_dir() and any(out.iterdir()):
        raise InputError(f"output directory {out} is not empty")

    model = CovariateModel(sites=tuple(args.sites))
    sampler = SamplerSpec(n_samples=args.n_samples)
    out.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{out.name}-", dir=out.parent))
    try:
        for sub in ("samples", "truth", "images"):
            (staging / sub).mkdir()
        tasks = [
            (i, args.seed, model, args.rho_range, args.corrupt_fraction, args.corrupt_rho_range,
             args.dims, sampler, args.sample_kind, str(staging))
            for i in range(args.subjects)
        ]
        results = sorted(_parallel_map(_simulate_job, tasks, jobs), key=lambda r: r[0])
        rows = [r[1]["row"] for r in results]
        truth_rows = [r[1]["truth_row"] for r in results]
        (staging / "cohort.csv").write_text(write_cohort_csv(rows))
        (staging / "cohort_truth.csv").write_text(write_cohort_csv(truth_rows))
        manifest = {
            "seed": args.seed,
            "dims": list(args.dims),
            "n_samples": args.n_samples,
            "rho_range": list(args.rho_range),
            "corrupt_fraction": args.corrupt_fraction,
            "corrupt_rho_range": list(args.corrupt_rho_range),
            "sample_kind": args.sample_kind,
            "planted": model.planted(),
            "subjects": [r[2] for r in results],
        }
        (staging / "simulation.json").write_text(json.dumps(manifest, indent=2) + "\n")
        if out.exists():
            out.rmdir()
        os.replace(staging, out)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    print(f"simulated {args.subjects} subject(s) -> {out}")
    return 0


# ---------------------------------------------------------------------------
# degrade
# ---------------------------------------------------------------------------


def _level_tag(level: float) -> str:
    return f"{level:g}dB".replace("-", "m")


def cmd_degrade(args: argparse.Namespace) -> int:
    if not args.img.is_file():
        raise InputError(f"image {args.img} does not exist")
    img = load_svol(args.img)
    if not isinstance(img, IntensityVolume):
        raise InputError(f"{args.img}: expected an intensity volume")
    levels = args.levels
    if not levels:
        raise InputError("--levels must name at least one level")
    if any(not math.isfinite(l) for l in levels):
        raise InputError("--levels must be finite")
    if len(set(levels)) != len(levels):
        raise InputError("--levels contains duplicates")
    _prepare_out_dir(args.out)
    stem = args.img.name[: -len(SVOL_SUFFIX)] if args.img.name.endswith(SVOL_SUFFIX) else args.img.stem
    files = {
        f"{stem}_{_level_tag(level)}{SVOL_SUFFIX}": write_svol(rician_corrupt(img, NoiseSpec(level, args.seed)))
        for level in levels
    }
    _write_files(args.out, files)
    print(f"{len(files)} corrupted volume(s) -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# regress
# ---------------------------------------------------------------------------


def _metrics_from_json(path: Path) -> dict[str, dict[str, StructureMetrics]]:
    """``{structure: {subject_id: metrics}}`` from a ``metrics.json`` report."""
    try:
        records = read_table_json(path.read_text())
    except (OSError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from None
    out: dict[str, dict[str, StructureMetrics]] = {}
    for i, r in enumerate(records):
        try:
            m = StructureMetrics(
                structure=int(r["structure"]),
                cv=r.get("cv"),
                dmc=r.get("dmc"),
                iou=r.get("iou"),
                mean_entropy=r.get("mean_entropy"),
                mean_volume=float(r.get("mean_volume") or 0.0),
                volume_std=float(r.get("volume_std") or 0.0),
            )
            out.setdefault(str(m.structure), {})[str(r["subject_id"])] = m
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{path}: record {i}: {exc!r}") from None
    return out


def cmd_regress(args: argparse.Namespace) -> int:
    if not args.cohort.is_file():
        raise InputError(f"cohort {args.cohort} does not exist")
    rows = read_cohort_csv(args.cohort.read_text())
    scheme = WeightScheme(args.scheme)
    metrics = None
    if scheme is not WeightScheme.UNIFORM:
        if args.metrics is None:
            raise InputError(f"--scheme {scheme.value} needs --metrics")
        metrics = _metrics_from_json(args.metrics)
    available = sorted({s for r in rows for s in r.volumes}, key=lambda s: (len(s), s))
    structures = [str(s) for s in args.structure] if args.structure else available
    missing = [s for s in structures if s not in available]
    if missing:
        raise InputError(f"structures {missing} have no vol_ column in {args.cohort}")

    results = []
    for s in structures:
        per_subject = None if metrics is None else metrics.get(s, {})
        results.append(group_analysis(rows, s, scheme, per_subject))
    table = [r.as_row() for r in results]
    if args.out is not None:
        _prepare_out_dir(args.out)
        _write_files(args.out, {
            "regression.csv": write_table_csv(table, REGRESSION_COLUMNS),
            "regression.json": write_table_json(table, REGRESSION_COLUMNS),
        })
    for row in table:
        print(f"structure {row['structure']} [{row['scheme']}]: beta_D={row['beta_D']:.6g} p_D={row['p_D']:.4g} "
              f"(n={row['n_used']}, excluded={row['n_excluded']})")
    return 0


# ---------------------------------------------------------------------------
# stability
# ---------------------------------------------------------------------------


def cmd_stability(args: argparse.Namespace) -> int:
    subjects = _discover_subjects(args.samples)
    if len(subjects) != 1:
        raise InputError("stability expects the samples of a single subject")
    sid, paths = subjects[0]
    samples = _sample_set(paths, sid)
    if not samples.has_probs:
        raise InputError("stability needs prob samples, got labels")
    if args.counts[-1] > samples.n_samples:
        raise InputError(f"count {args.counts[-1]} exceeds the {samples.n_samples} available samples")
    transitions = entropy_stability(samples, args.counts, normalize=not args.raw)
    table = write_table_csv(
        [{"from_n": t.from_n, "to_n": t.to_n, "mean_abs_change": t.mean_abs_change} for t in transitions],
        STABILITY_COLUMNS,
    )
    if args.out is None:
        sys.stdout.write(table)
    else:
        if args.out.is_dir():
            raise InputError(f"--out {args.out} is a directory")
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(table)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segqc", description="Segmentation quality control from MC dropout samples.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def jobs(sp):
        sp.add_argument("--jobs", type=int, default=None, help=f"worker processes (default ${JOBS_ENV} or 1)")

    m = sub.add_parser("metrics", help="structure-wise uncertainty metrics")
    m.add_argument("--samples", type=Path, required=True, help="subject directory of SVOL samples, or a directory of subject directories")
    m.add_argument("--out", type=Path, required=True, help="report directory")
    m.add_argument("--truth", type=Path, help="reference labels: a file, or a directory of <subject>.svol")
    m.add_argument("--structures", type=_int_list, default=None, help="comma-separated structure labels")
    jobs(m)
    m.set_defaults(func=cmd_metrics)

    s = sub.add_parser("simulate", help="synthetic phantom cohort")
    s.add_argument("--subjects", type=int, required=True, help="number of subjects")
    s.add_argument("--rho-range", type=_pair, default=(0.2, 3.0), help="perturbation range lo,hi (default 0.2,3.0)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True, help="output directory, must not exist or be empty")
    s.add_argument("--dims", type=_dims, default=(32, 32, 32), help="X,Y,Z or a single edge length (default 32)")
    s.add_argument("--n-samples", type=int, default=15, help="MC samples per subject")
    s.add_argument("--sample-kind", choices=("prob", "labels"), default="prob")
    s.add_argument("--corrupt-fraction", type=float, default=0.0, help="share of subjects drawn from --corrupt-rho-range")
    s.add_argument("--corrupt-rho-range", type=_pair, default=(2.5, 3.5))
    s.add_argument("--sites", type=lambda t: [x for x in t.split(",") if x], default=["site0"], help="comma-separated site names")
    jobs(s)
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("degrade", help="Rician noise at several dB levels")
    d.add_argument("--img", type=Path, required=True, help="intensity SVOL")
    d.add_argument("--levels", type=_float_list, default=list(DEFAULT_LEVELS_DB), help="dB levels (default 3,5,7,9)")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", type=Path, required=True, help="directory for <stem>_<level>dB.svol")
    d.set_defaults(func=cmd_degrade)

    r = sub.add_parser("regress", help="weighted group regression")
    r.add_argument("--cohort", type=Path, required=True, help="cohort CSV")
    r.add_argument("--metrics", type=Path, help="metrics.json written by 'segqc metrics'")
    r.add_argument("--structure", type=_int_list, default=None, help="structure label(s); default all")
    r.add_argument("--scheme", choices=[w.value for w in WeightScheme], default="uniform")
    r.add_argument("--out", type=Path, help="directory for regression.csv/json")
    r.set_defaults(func=cmd_regress)

    st = sub.add_parser("stability", help="entropy-map change between sample counts")
    st.add_argument("--samples", type=Path, required=True, help="subject directory of probability SVOLs")
    st.add_argument("--counts", type=_int_list, default=[3, 6, 9, 12, 15], help="increasing sample counts")
    st.add_argument("--out", type=Path, help="CSV path (default stdout)")
    st.add_argument("--raw", action="store_true", help="use the un-normalised entropy sum")
    st.set_defaults(func=cmd_stability)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"segqc {args.command}: error: {exc}", file=sys.stderr)
        for line in exc.details:
            print(f"  {line}", file=sys.stderr)
        return 2
    except (SegQCError, ValueError, OSError) as exc:
        print(f"segqc {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

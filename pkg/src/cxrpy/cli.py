"""
    cxrpy.cli
    ~~~~~~~~~

    Command line entry point: adapt, zeroshot, fewshot, eval, report and
    fixture subcommands.

    Every command writes into ``output_dir`` only, and every artifact it
    emits carries the run seed and config digest.

    :copyright: 2024 by cxrpy Authors, see AUTHORS for more details.
    :license: BSD, see LICENSE for more details.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import pathlib
import sys
from collections import Counter
from typing import Any, Sequence

import pandas as pd

from . import constants
from .backend import EncoderBackend, apply_freeze_policy
from .checkpoint import Checkpoint
from .common import provenance_line
from .config import RunConfig, load_run_config
from .constants import ExitCode, ScoreSource, Split
from .error import ConfigError, MissingInputError, ModelError, get_exit_code
from .head import ClassificationHead, build_head, head_score_matrix
from .imaging import AugmentationSpec, FolderImageSource, XrayDataset
from .manifest import DatasetManifest, assign_splits, parse_manifest, read_id_list
from .metrics import EvalReport, ScoreMatrix, evaluate
from .prompts import zero_shot_score_matrix
from .report import (
    comparison_table,
    load_baselines,
    per_class_gains,
    render_text,
    shots_curve,
    write_csv,
    write_curve,
)
from .sampling import export_subset, sample_few_shot
from .synthetic import make_fixture
from .train import adapt, fewshot_finetune

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "checkpoint.pt"
TRACE_FILE = "trace.jsonl"
RUN_CONFIG_FILE = "run_config.yaml"


def _input_files(config: RunConfig) -> list[pathlib.Path]:
    root = config.data_root
    return [
        root / constants.MANIFEST_FILE,
        root / constants.TRAIN_VAL_FILE,
        root / constants.TEST_FILE,
    ]


def check_inputs(config: RunConfig) -> None:
    """Fail before any compute when the manifest or a split list is missing."""
    missing = [str(p) for p in _input_files(config) if not p.is_file()]
    if not (config.data_root / constants.IMAGES_DIR).is_dir():
        missing.append(str(config.data_root / constants.IMAGES_DIR))
    if missing:
        raise MissingInputError(tuple(missing))


def load_data(config: RunConfig) -> tuple[DatasetManifest, FolderImageSource]:
    check_inputs(config)
    manifest_path, train_val_path, test_path = _input_files(config)
    manifest = parse_manifest(manifest_path.read_text(encoding="utf-8"))
    manifest = assign_splits(
        manifest,
        read_id_list(train_val_path.read_text(encoding="utf-8")),
        read_id_list(test_path.read_text(encoding="utf-8")),
        val_fraction=config.val_fraction,
        seed=config.seed,
    )
    return manifest, FolderImageSource(config.data_root)


def split_dataset(
    manifest: DatasetManifest,
    split: Split,
    source: FolderImageSource,
    config: RunConfig,
    augmentation: AugmentationSpec | None = None,
) -> XrayDataset:
    return XrayDataset(
        manifest.restrict(split), source, config.preprocess, augmentation, config.seed
    )


def _prepare_output(config: RunConfig) -> pathlib.Path:
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / RUN_CONFIG_FILE).write_text(config.to_yaml(), encoding="utf-8")
    return out


def _evaluate(
    matrix: ScoreMatrix, config: RunConfig, n_shots: int, **metadata: Any
) -> EvalReport:
    return evaluate(
        matrix,
        n_shots=n_shots,
        seed=config.seed,
        config_digest=config.digest,
        metadata=metadata,
    )


def _load_checkpoint(
    path: str | pathlib.Path,
) -> tuple[Checkpoint, EncoderBackend, ClassificationHead]:
    checkpoint = Checkpoint.load(path)
    return checkpoint, checkpoint.restore_backend(), checkpoint.restore_head()


def cmd_adapt(config: RunConfig) -> tuple[pathlib.Path, pathlib.Path, pathlib.Path]:
    """Adapt the encoder on the train split and score the test split.

    Writes the checkpoint, the training trace and ``adapt_report.json``.
    """
    manifest, source = load_data(config)
    out = _prepare_output(config)

    backend = config.build_backend()
    head = build_head(config.head_config_for(backend), init_seed=config.seed)
    summary = apply_freeze_policy(backend, config.freeze, head)

    train_set = split_dataset(
        manifest, Split.TRAIN, source, config, config.adaptation.augmentation
    )
    val_set = split_dataset(manifest, Split.VAL, source, config)
    result = adapt(
        backend,
        head,
        train_set,
        val_set,
        config.adaptation,
        freeze_policy=config.freeze,
        prompts=config.prompts,
    )

    checkpoint = dataclasses.replace(result.checkpoint, config_digest=config.digest)
    checkpoint_path = checkpoint.save(out / CHECKPOINT_FILE)
    trace = dataclasses.replace(result.trace, metadata=config.provenance)
    trace_path = trace.save(out / TRACE_FILE)

    test_set = split_dataset(manifest, Split.TEST, source, config)
    report = _evaluate(
        head_score_matrix(backend, head, test_set, config.eval_batch_size),
        config,
        0,
        stage="adapt",
        best_epoch=result.best_epoch,
        best_val_auc=result.best_val_auc,
        trainable_parameters=summary.trainable_count,
        total_parameters=summary.total_count,
        encoder_digest=result.checkpoint.encoder_digest,
    )
    report_path = report.save(out / "adapt_report.json")
    logger.info("Adapted test mean AUC %.4f", report.mean_auc)
    return checkpoint_path, trace_path, report_path


def cmd_zeroshot(
    config: RunConfig, checkpoint: str | pathlib.Path | None = None
) -> EvalReport:
    """Prompt-based scores of the test split.

    Without a checkpoint the unadapted backend is used, and the report
    says so.
    """
    if checkpoint is not None:
        ckpt, backend, _ = _load_checkpoint(checkpoint)
        adapted = ckpt.adapted
    else:
        backend, adapted = config.build_backend(), False
    if not backend.has_text_encoder:
        raise ModelError(f"{type(backend).__name__} has no text encoder")

    manifest, source = load_data(config)
    out = _prepare_output(config)
    test_set = split_dataset(manifest, Split.TEST, source, config)
    matrix = zero_shot_score_matrix(
        backend,
        test_set,
        config.prompts,
        config.zero_shot_temperature,
        config.eval_batch_size,
    )
    report = _evaluate(
        matrix,
        config,
        0,
        stage="zeroshot",
        adapted=adapted,
        prompts=config.prompts.render(),
        negative_prompt=config.prompts.negative_text,
        temperature=config.zero_shot_temperature or backend.logit_scale,
    )
    report.save(out / "zeroshot_report.json")
    logger.info("Zero-shot test mean AUC %.4f (adapted=%s)", report.mean_auc, adapted)
    return report


def cmd_eval(
    config: RunConfig, checkpoint: str | pathlib.Path, name: str = "eval"
) -> EvalReport:
    """Score the test split with the head of a checkpoint."""
    ckpt, backend, head = _load_checkpoint(checkpoint)
    manifest, source = load_data(config)
    out = _prepare_output(config)
    test_set = split_dataset(manifest, Split.TEST, source, config)
    report = _evaluate(
        head_score_matrix(backend, head, test_set, config.eval_batch_size),
        config,
        0,
        stage="eval",
        adapted=ckpt.adapted,
        head_digest=ckpt.head_digest,
    )
    report.save(out / f"{name}_report.json")
    return report


def _validate_shots(shots: Sequence[int]) -> tuple[int, ...]:
    problems = []
    bad = [n for n in shots if n <= 0]
    if bad:
        problems.append(
            f"shots must be positive, got {bad}; the 0-shot baseline is produced automatically"
        )
    dups = sorted(n for n, c in Counter(shots).items() if c > 1)
    if dups:
        problems.append(f"duplicate shots {dups}")
    if not shots:
        problems.append("at least one shot count is required")
    if problems:
        raise ConfigError(tuple(problems))
    return tuple(shots)


def cmd_fewshot(
    config: RunConfig,
    checkpoint: str | pathlib.Path,
    shots: Sequence[int] | None = None,
    *,
    allow_unadapted: bool = False,
) -> list[EvalReport]:
    """Few-shot fine-tune the head for every N in shots and score the test split.

    Besides one report per N, writes the shot-0 baseline report, the
    sampled subsets, the shots curve and the per-class gains of the
    largest N over the baseline.
    """
    shots = _validate_shots(config.shots if shots is None else shots)
    ckpt, backend, head = _load_checkpoint(checkpoint)
    if not ckpt.adapted and not allow_unadapted:
        raise ModelError(
            f"{checkpoint} was not produced by adaptation; pass --allow-unadapted"
        )
    manifest, source = load_data(config)
    out = _prepare_output(config)
    test_set = split_dataset(manifest, Split.TEST, source, config)

    if config.baseline_source is ScoreSource.ZERO_SHOT_PROMPTS:
        if not backend.has_text_encoder:
            raise ModelError(f"{type(backend).__name__} has no text encoder")
        base_matrix = zero_shot_score_matrix(
            backend,
            test_set,
            config.prompts,
            config.zero_shot_temperature,
            config.eval_batch_size,
        )
    else:
        base_matrix = head_score_matrix(backend, head, test_set, config.eval_batch_size)
    baseline = _evaluate(base_matrix, config, 0, stage="fewshot", subset_size=0)
    baseline.save(out / "fewshot_00_report.json")

    pool = manifest.restrict(Split.TRAIN)
    reports: list[EvalReport] = []
    for n in shots:
        subset = sample_few_shot(pool, n, config.seed)
        export_subset(subset, out / "subsets" / f"shots_{n:02d}", config.provenance)
        result = fewshot_finetune(
            ckpt,
            subset,
            pool,
            source,
            config.fewshot,
            preprocess_spec=config.preprocess,
            allow_unadapted=allow_unadapted,
        )
        tuned = result.checkpoint.restore_head()
        report = _evaluate(
            head_score_matrix(backend, tuned, test_set, config.eval_batch_size),
            config,
            n,
            stage="fewshot",
            subset_size=len(subset),
            skipped_classes=list(subset.skipped_classes),
            final_train_loss=result.trace.records[-1].train_loss,
            head_digest=result.checkpoint.head_digest,
        )
        report.save(out / f"fewshot_{n:02d}_report.json")
        logger.info("%d-shot test mean AUC %.4f", n, report.mean_auc)
        reports.append(report)

    write_curve(shots_curve([baseline, *reports]), out, "curve")
    largest = max(reports, key=lambda r: r.n_shots)
    write_csv(per_class_gains(baseline, largest), out / "gains.csv")
    return reports


def cmd_report(
    config: RunConfig,
    report_paths: Sequence[str | pathlib.Path],
    baselines: str | pathlib.Path | None = None,
    *,
    use_baselines: bool = True,
) -> pd.DataFrame:
    """Comparison table of the given reports, next to the baselines.

    Writes ``comparison.csv`` and ``comparison.txt``.
    """
    if not report_paths:
        raise ConfigError(("at least one report is required",))
    columns: dict[str, Any] = {}
    if use_baselines:
        table = load_baselines(baselines)
        for name in table.columns:
            columns[str(name)] = table[name].tolist()
    for path in report_paths:
        path = pathlib.Path(path)
        report = EvalReport.load(path)
        label = str(report.metadata.get("label") or path.stem)
        while label in columns:
            label += "'"
        columns[label] = list(report.per_class_auc)

    df = comparison_table(columns)
    df.attrs.update(config.provenance)
    out = config.output_dir
    write_csv(df, out / "comparison.csv")
    header = provenance_line(config.digest, config.seed)
    (out / "comparison.txt").write_text(f"{header}\n{render_text(df)}", encoding="utf-8")
    return df


def cmd_fixture(
    directory: str | pathlib.Path, n_images: int = 64, seed: int = constants.DEFAULT_SEED
) -> DatasetManifest:
    return make_fixture(directory, n_images=n_images, seed=seed)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        type=pathlib.Path,
        default=argparse.SUPPRESS,
        help="YAML run configuration",
    )
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument(
        "--data-root",
        type=pathlib.Path,
        default=argparse.SUPPRESS,
        help=f"Dataset directory (overrides ${constants.DATA_ROOT_ENV})",
    )
    common.add_argument("--output-dir", type=pathlib.Path, default=argparse.SUPPRESS)
    common.add_argument(
        "--backend",
        choices=[k.value for k in constants.BackendKind],
        default=argparse.SUPPRESS,
    )
    common.add_argument("--weights-path", type=pathlib.Path, default=argparse.SUPPRESS)
    common.add_argument(
        "-v", "--verbose", action="store_true", default=argparse.SUPPRESS
    )

    parser = argparse.ArgumentParser(
        prog="cxrpy",
        description="Label-efficient chest X-ray classification toolkit.",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("adapt", parents=[common], help="partial fine-tuning of the encoder")

    p = sub.add_parser("zeroshot", parents=[common], help="prompt zero-shot scoring")
    p.add_argument("--checkpoint", type=pathlib.Path, default=None)

    p = sub.add_parser("fewshot", parents=[common], help="head-only few-shot fine-tuning")
    p.add_argument("--checkpoint", type=pathlib.Path, required=True)
    p.add_argument("--shots", type=int, nargs="+", default=None)
    p.add_argument("--allow-unadapted", action="store_true")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint head")
    p.add_argument("--checkpoint", type=pathlib.Path, required=True)
    p.add_argument("--name", default="eval")

    p = sub.add_parser("report", parents=[common], help="compare reports with baselines")
    p.add_argument("reports", type=pathlib.Path, nargs="+")
    p.add_argument("--baselines", type=pathlib.Path, default=None)
    p.add_argument("--no-baselines", action="store_true")

    p = sub.add_parser("fixture", parents=[common], help="write the synthetic dataset")
    p.add_argument("directory", type=pathlib.Path)
    p.add_argument("--n-images", type=int, default=64)

    return parser


def run(args: argparse.Namespace) -> None:
    overrides = {
        "seed": getattr(args, "seed", None),
        "data_root": getattr(args, "data_root", None),
        "output_dir": getattr(args, "output_dir", None),
        "backend": getattr(args, "backend", None),
        "weights_path": getattr(args, "weights_path", None),
    }
    if args.command == "fixture":
        seed = overrides["seed"]
        cmd_fixture(
            args.directory,
            args.n_images,
            constants.DEFAULT_SEED if seed is None else seed,
        )
        return

    config = load_run_config(getattr(args, "config", None), overrides)
    if args.command == "adapt":
        cmd_adapt(config)
    elif args.command == "zeroshot":
        cmd_zeroshot(config, args.checkpoint)
    elif args.command == "fewshot":
        cmd_fewshot(
            config, args.checkpoint, args.shots, allow_unadapted=args.allow_unadapted
        )
    elif args.command == "eval":
        cmd_eval(config, args.checkpoint, args.name)
    elif args.command == "report":
        cmd_report(
            config, args.reports, args.baselines, use_baselines=not args.no_baselines
        )


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        run(args)
    except Exception as ex:
        code = get_exit_code(ex)
        logger.error("%s", ex)
        return int(code)
    return int(ExitCode.OK)


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main(sys.argv[1:]))

"""
Command line interface.

    stereovol ingest        frame sequences -> train/test manifests
    stereovol build-priors  train manifest -> volume prior table
    stereovol train         train manifest + priors -> checkpoints
    stereovol predict       checkpoint + manifest -> predictions
    stereovol evaluate      predictions -> metrics and error distributions
    stereovol report        metrics files -> comparison table
    stereovol baseline      dataset-mean or category-mean predictions
    stereovol ablate        train and evaluate ablation variants
    stereovol nutrition     predictions + nutrient database -> nutrient errors
    stereovol vlm-baseline  chat-completion model predictions

Errors are reported on stderr as one line ``error: <ErrorClass>: <message>``
and the exit code identifies the error family (2 data, 3 encoder, 4 model,
5 VLM, 6 configuration, 1 anything else).
"""

import argparse
import logging
import sys
from pathlib import Path

from stereovol import __version__
from stereovol.config import GlobalConfig, load_config
from stereovol.encoders import create_image_encoder, create_text_encoder
from stereovol.evaluation import (
    baseline_category_mean,
    baseline_dataset_mean,
    comparison_table,
    compute_metrics,
    error_distribution_series,
    item_volumes,
    read_metrics,
    run_ablation,
    write_error_distribution,
    write_metrics,
)
from stereovol.exceptions import DataError, StereoVolError
from stereovol.ingestion import build_manifest
from stereovol.models import ClassVocabulary
from stereovol.nutrition import (
    estimate_nutrients,
    load_nutrient_database,
    nutrition_report,
)
from stereovol.priors import VolumePriorTable, build_prior_table
from stereovol.serialization import (
    read_json,
    read_manifest,
    read_predictions,
    read_sequences,
    read_vocabulary,
    write_json,
    write_manifest,
    write_predictions,
    write_vocabulary,
)
from stereovol.training import (
    BEST_CHECKPOINT,
    load_checkpoint,
    predict_samples,
    train,
)
from stereovol.vlm import (
    VLM_MODES,
    OpenAIChatTransport,
    RecordingTransport,
    ReplayTransport,
    run_vlm_baseline,
)

logger = logging.getLogger(__name__)


def _image_encoder(config: GlobalConfig, settings=None):
    settings = settings or {
        "name": config.image_encoder.name,
        "dim": config.image_encoder.dim,
        "seed": config.image_encoder.seed,
    }
    return create_image_encoder(cache_dir=config.cache_dir, **settings)


def _text_encoder(config: GlobalConfig, settings=None):
    settings = settings or {
        "name": config.text_encoder.name,
        "dim": config.text_encoder.dim,
        "seed": config.text_encoder.seed,
    }
    return create_text_encoder(cache_dir=config.cache_dir, **settings)


def _write_run_record(out, args, config: GlobalConfig, **extra):
    """Store the command, its arguments and the configuration next to its output."""
    out = Path(out)
    path = out / "run.json" if out.suffix == "" else out.with_suffix(".run.json")
    arguments = {k: v for k, v in vars(args).items() if k != "handler"}
    write_json(
        path,
        {
            "version": __version__,
            "command": args.command,
            "arguments": arguments,
            "config": config.to_dict(),
            **extra,
        },
    )


def _load_vocab(args, samples):
    if getattr(args, "vocab", None):
        return read_vocabulary(args.vocab)
    return ClassVocabulary.from_labels(sample.class_label for sample in samples)


def _load_priors(args, samples, vocab):
    if getattr(args, "priors", None):
        return VolumePriorTable.load(args.priors)
    return build_prior_table(samples, vocab)


def cmd_ingest(args, config):
    sequences = read_sequences(args.sequences, config.data_root)
    split_ids = None
    if args.split_file:
        split = read_json(args.split_file)
        split_ids = (split["train"], split["test"])
    train_samples, test_samples = build_manifest(
        sequences,
        train_fraction=args.train_fraction,
        seed=config.train.seed,
        max_pairs=config.train.max_pairs,
        min_gap=config.train.min_gap,
        split_ids=split_ids,
        unit_scale_to_cm=args.unit_scale,
        n_images=config.train.n_images,
    )
    out = Path(args.out)
    write_manifest(out / "train.jsonl", train_samples)
    write_manifest(out / "test.jsonl", test_samples)
    write_vocabulary(
        out / "vocabulary.txt",
        ClassVocabulary.from_labels(seq.class_label for seq in sequences),
    )
    _write_run_record(out, args, config)


def cmd_build_priors(args, config):
    if args.external:
        table = VolumePriorTable.load(args.external)
        table = VolumePriorTable(table.entries, source="external")
    elif not args.train_manifest:
        raise DataError("build-priors needs --train-manifest or --external")
    else:
        samples = read_manifest(args.train_manifest, config.data_root)
        table = build_prior_table(samples, _load_vocab(args, samples))
    table.save(args.out)
    _write_run_record(args.out, args, config, source=table.source)


def cmd_train(args, config):
    samples = read_manifest(args.train_manifest, config.data_root)
    vocab = _load_vocab(args, samples)
    validation = None
    if args.validation_manifest:
        validation = read_manifest(args.validation_manifest, config.data_root)
    _, manifest = train(
        config.train,
        samples,
        _image_encoder(config),
        _text_encoder(config),
        _load_priors(args, samples, vocab),
        vocab,
        out_dir=args.out,
        validation=validation,
    )
    _write_run_record(args.out, args, config, best_epoch=manifest.best_epoch)


def cmd_predict(args, config):
    checkpoint_path = Path(args.checkpoint)
    if checkpoint_path.is_dir():
        checkpoint_path = checkpoint_path / BEST_CHECKPOINT
    data = load_checkpoint(checkpoint_path)
    image_encoder = _image_encoder(config, data.image_encoder)
    text_encoder = _text_encoder(config, data.text_encoder)
    checkpoint = load_checkpoint(checkpoint_path, image_encoder, text_encoder)
    samples = read_manifest(args.manifest, config.data_root)
    preds = predict_samples(
        checkpoint, samples, image_encoder, text_encoder, args.method
    )
    write_predictions(args.out, preds)
    _write_run_record(args.out, args, config)


def cmd_evaluate(args, config):
    preds = read_predictions(args.predictions, method=args.method)
    out = Path(args.out)
    vocab = read_vocabulary(args.vocab) if args.vocab else None
    report = compute_metrics(preds, vocab)
    write_metrics(out / "metrics.json", report)
    write_error_distribution(out, error_distribution_series(preds))
    _write_run_record(out, args, config, n_clipped=report.n_clipped)
    print(comparison_table([report]), end="")


def cmd_report(args, config):
    reports = [read_metrics(path) for path in args.metrics]
    table = comparison_table(reports, ours=args.ours)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.md").write_text(table, encoding="utf-8")
    if args.predictions:
        preds = read_predictions(args.predictions)
        write_error_distribution(out, error_distribution_series(preds))
    _write_run_record(out, args, config, methods=[r.method for r in reports])
    print(table, end="")


def cmd_baseline(args, config):
    train_samples = read_manifest(args.train_manifest, config.data_root)
    test_samples = read_manifest(args.test_manifest, config.data_root)
    if args.kind == "dataset-mean":
        preds = baseline_dataset_mean(item_volumes(train_samples), test_samples)
    else:
        vocab = _load_vocab(args, train_samples)
        preds = baseline_category_mean(
            _load_priors(args, train_samples, vocab), test_samples
        )
    out = Path(args.out)
    write_predictions(out / "predictions.jsonl", preds)
    write_metrics(out / "metrics.json", compute_metrics(preds))
    _write_run_record(out, args, config)


def cmd_ablate(args, config):
    train_samples = read_manifest(args.train_manifest, config.data_root)
    test_samples = read_manifest(args.test_manifest, config.data_root)
    image_encoder, text_encoder = _image_encoder(config), _text_encoder(config)
    vocab = _load_vocab(args, train_samples)
    priors = _load_priors(args, train_samples, vocab)
    out = Path(args.out)
    reports = []
    for variant in args.variant:
        report = run_ablation(
            variant,
            train_samples,
            test_samples,
            image_encoder,
            text_encoder,
            config.train,
            priors,
            vocab,
        )
        write_metrics(out / f"{variant}.json", report)
        reports.append(report)
    table = comparison_table(reports)
    (out / "ablation.md").write_text(table, encoding="utf-8")
    _write_run_record(out, args, config)
    print(table, end="")


def cmd_nutrition(args, config):
    preds = read_predictions(args.predictions)
    estimates = estimate_nutrients(
        preds, load_nutrient_database(args.db), args.volume_floor
    )
    report = nutrition_report(estimates)
    write_json(args.out, report)
    _write_run_record(args.out, args, config)


def cmd_vlm_baseline(args, config):
    samples = read_manifest(args.manifest, config.data_root)
    if args.replay:
        transport = ReplayTransport(args.replay)
    else:
        transport = OpenAIChatTransport(model=args.model, temperature=args.temperature)
        if args.record:
            transport = RecordingTransport(transport, args.record)
    result = run_vlm_baseline(
        samples,
        args.mode,
        transport,
        max_workers=args.max_workers,
        max_attempts=args.max_attempts,
        backoff_s=args.backoff,
    )
    write_predictions(args.out, result.predictions)
    _write_run_record(args.out, args, config, vlm=result.summary())


def _train_overrides(args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if getattr(args, "deterministic", None) is not None:
        overrides["deterministic"] = args.deterministic
    if getattr(args, "n_images", None) is not None:
        overrides["n_images"] = args.n_images
    if getattr(args, "log_level", None) is not None:
        overrides["log_level"] = args.log_level
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stereovol",
        description="Text-guided stereo volume estimation.",
        epilog=(
            "Configuration files are flat JSON objects with the keys epochs, "
            "batch_size, learning_rate, adam_beta1, adam_beta2, adam_eps, "
            "lambda_mse, mu_ce, seed, projection_dim, classifier_hidden, "
            "regressor_hidden, n_images, fusion_inputs, teacher_forcing, "
            "standardize_targets, deterministic, template_id, volume_decimals, "
            "max_pairs, min_gap, data_root, cache_dir, output_dir, "
            "image_encoder.name, image_encoder.dim, image_encoder.seed, "
            "text_encoder.name, text_encoder.dim, text_encoder.seed and "
            "log_level. Command line flags win over the file. STEREOVOL_CACHE_DIR "
            "sets the pretrained weight cache."
        ),
    )
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--seed", type=int)

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="build manifests")
    p.add_argument("--sequences", required=True, help="frame sequence JSON lines")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--split-file", help='JSON {"train": [...], "test": [...]}')
    p.add_argument("--unit-scale", type=float, default=1.0, help="mesh unit in cm")
    p.add_argument("--n-images", type=int)
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("build-priors", parents=[common], help="volume prior table")
    p.add_argument("--train-manifest")
    p.add_argument("--vocab")
    p.add_argument("--external", help="use this table instead of training means")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_build_priors)

    p = sub.add_parser("train", parents=[common], help="train the fusion model")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--validation-manifest")
    p.add_argument("--vocab")
    p.add_argument("--priors")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--epochs", type=int)
    p.add_argument(
        "--deterministic", action=argparse.BooleanOptionalAction, default=None
    )
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="predict volumes")
    p.add_argument("--checkpoint", required=True, help="checkpoint file or directory")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="predictions JSON lines")
    p.add_argument("--method", default="ours")
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="metrics of predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", default="ours")
    p.add_argument("--vocab", help="classes of the predicting model")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="compare metrics files")
    p.add_argument("--metrics", nargs="+", required=True)
    p.add_argument("--ours", help="method compared against the others")
    p.add_argument("--predictions", help="also write error distributions of these")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("baseline", parents=[common], help="mean baselines")
    p.add_argument("--kind", choices=["dataset-mean", "category-mean"], required=True)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--vocab")
    p.add_argument("--priors")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_baseline)

    p = sub.add_parser("ablate", parents=[common], help="ablation variants")
    p.add_argument("--variant", action="append", required=True)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--vocab")
    p.add_argument("--priors")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("nutrition", parents=[common], help="nutrient errors")
    p.add_argument("--predictions", required=True)
    p.add_argument("--db", required=True, help="nutrient database JSON")
    p.add_argument("--volume-floor", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_nutrition)

    p = sub.add_parser("vlm-baseline", parents=[common], help="chat model baseline")
    p.add_argument("--mode", choices=VLM_MODES, required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="predictions JSON lines")
    p.add_argument("--model")
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-workers", type=int, default=4)
    p.add_argument("--max-attempts", type=int, default=3)
    p.add_argument("--backoff", type=float, default=1.0)
    tape = p.add_mutually_exclusive_group()
    tape.add_argument("--replay", help="answer from a recorded tape")
    tape.add_argument("--record", help="record live answers to a tape")
    p.set_defaults(handler=cmd_vlm_baseline)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, _train_overrides(args))
        logging.basicConfig(
            level=config.log_level,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        args.handler(args, config)
    except StereoVolError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return err.exit_code
    except ValueError as err:
        # Argument checks from stereovol.utils raise plain ValueError
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return DataError.exit_code
    except Exception as err:  # noqa: BLE001
        logger.exception("Unexpected failure")
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

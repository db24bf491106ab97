"""Command-line entry point: ``ipa-asr <subcommand> ...``."""

import argparse
import logging
import sys
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError as PydanticValidationError

from app import __version__
from app.models.schemas import IngestConfig, RemapMode, RunConfig, Split
from app.services.ipa_service import DEFAULT_DIACRITICS
from app.services.metrics_service import format_p_value
from app.services.pipeline_service import PipelineService
from app.utils.config import VALID_LOG_LEVELS, get_settings, load_config_file, merge_overrides, validate_settings
from app.utils.errors import EXIT_INTERNAL, EXIT_OK, ToolkitError, UsageError, exit_code_for
from app.utils.logger import setup_logging

logger = logging.getLogger(__name__)


class ToolkitArgumentParser(argparse.ArgumentParser):
    """Argument errors raise UsageError (exit 1) instead of exiting with status 2."""

    def error(self, message):
        raise UsageError(message)


def _with_config(cli_values: Dict[str, Any], path: Optional[str], model):
    values = merge_overrides(load_config_file(path), cli_values)
    known = {k: v for k, v in values.items() if k in model.model_fields}
    unknown = sorted(set(values) - set(model.model_fields))
    if unknown:
        logger.warning(f"Ignoring unknown config keys: {', '.join(unknown)}")
    try:
        return model(**known)
    except PydanticValidationError as e:
        first = e.errors()[0]
        raise UsageError(f"invalid {'.'.join(str(p) for p in first['loc'])}: {first['msg']}") from e


def _run_config(args) -> RunConfig:
    flags = {key: getattr(args, key, None) for key in RunConfig.model_fields}
    return _with_config(flags, args.config, RunConfig)


def _splits(args) -> List[Split]:
    return [Split(s) for s in (args.split or [Split.TEST.value])]


def cmd_ingest(service: PipelineService, args) -> None:
    flags = {
        "language": args.language,
        "tier_pattern": args.tier_pattern,
        "strip_chars": args.strip_chars,
        "split_seed": args.split_seed,
        "val_ratio": args.val_ratio,
        "test_pattern": args.test_pattern,
    }
    config = _with_config(flags, args.config, IngestConfig)
    records, summary = service.cmd_ingest(
        args.inputs,
        inventory=args.inventory,
        manifest_out=args.out,
        config=config,
        tables=args.table or [],
        cyrillic_table=args.cyrillic_table,
        rejects_out=args.rejects,
        subset=args.subset,
    )
    print(f"Wrote {len(records)} records to {args.out}")
    print(summary)


def cmd_vocab(service: PipelineService, args) -> None:
    diacritics = tuple(DEFAULT_DIACRITICS) + tuple(args.diacritic or ())
    inv = service.cmd_vocab(args.manifest, args.out, language=args.language, diacritics=diacritics)
    print(f"Wrote {len(inv)} vocabulary entries to {args.out}")


def cmd_decode(service: PipelineService, args) -> None:
    config = _run_config(args)
    hypotheses = service.cmd_decode(
        config,
        out=args.out,
        logits_dir=args.logits_dir,
        lm_path=args.lm,
        train_lm=args.train_lm,
        save_lm=args.save_lm,
        greedy=args.greedy,
        raw=args.raw,
        allow_missing=args.allow_missing,
        splits=_splits(args),
        nbest_out=args.nbest_out,
    )
    print(f"Decoded {len(hypotheses)} utterances into {args.out}")


def cmd_score(service: PipelineService, args) -> None:
    config = _run_config(args)
    result = service.cmd_score(
        config,
        hypotheses=args.hyp,
        names=args.name,
        translit=args.translit,
        splits=_splits(args),
        worst_k=args.worst_k,
    )
    for summary in result.error_rates:
        print(f"{summary.level.value.upper()[0]}ER {100 * summary.rate:6.2f}%  ({summary.edits}/{summary.ref_tokens})")
    print(f"Pearson r (complexity vs F1): {result.complexity_r:.3f}")
    print(f"Worst phonemes: {result.worst}")
    if result.wilcoxon is not None:
        print(result.wilcoxon.map(format_p_value).to_string())


def cmd_analyze(service: PipelineService, args) -> None:
    config = _run_config(args)
    fit, low = service.cmd_analyze(config, phoneme_report=args.report, svg=args.svg, weighted=args.weighted)
    se_L, se_k, se_x0 = fit.standard_errors
    print(f"L  = {fit.L:.4f} +/- {se_L:.4f}")
    print(f"k  = {fit.k:.4f} +/- {se_k:.4f}")
    print(f"x0 = {fit.x0:.4f} +/- {se_x0:.4f}")
    print(f"R2 = {fit.r2:.4f}  (n = {fit.n_points}, converged = {fit.converged})")
    print(f"Low-support phonemes: {low.n_low} ({low.n_low_good} with F1 > 0.8), matched {len(low.pairs)}")


def cmd_remap(service: PipelineService, args) -> None:
    table = service.cmd_remap(
        args.weights, args.vocab, args.out, mode=RemapMode(args.mode), seed=args.seed, table_out=args.table_out
    )
    print(table.to_string(index=False))


def cmd_serve(service: PipelineService, args) -> None:
    import uvicorn

    settings = get_settings()
    uvicorn.run("app.main:app", host=args.host or settings.host, port=args.port or settings.port)


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--manifest", help="Manifest (JSON Lines)")
    parser.add_argument("--inventory", help="Phoneme inventory file")
    parser.add_argument("--report-dir", dest="report_dir", help="Directory for report files")
    parser.add_argument("--split", action="append", choices=[s.value for s in Split], help="Splits to use (default test)")


def build_parser() -> argparse.ArgumentParser:
    formatter = argparse.ArgumentDefaultsHelpFormatter
    parser = ToolkitArgumentParser(prog="ipa-asr", description="IPA ASR toolkit", formatter_class=formatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="Flat TOML config file; flags override its values")
    parser.add_argument("--jobs", type=int, help="Worker processes (default IPA_ASR_JOBS)")
    parser.add_argument("--log-level", dest="log_level", type=str.upper, choices=VALID_LOG_LEVELS, help="Logging level")
    parser.add_argument("--log-file", dest="log_file", help="Also log to this file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="Parse TextGrid/EAF files into a manifest", formatter_class=formatter)
    p.add_argument("inputs", nargs="+", help="Annotation files or directories")
    p.add_argument("--inventory", required=True)
    p.add_argument("--out", required=True, help="Manifest output path")
    p.add_argument("--rejects", help="Rejects output path (default <manifest>.rejects.jsonl)")
    p.add_argument("--table", action="append", help="Transliteration table applied during normalization")
    p.add_argument("--cyrillic-table", dest="cyrillic_table", help="Table used to render a Cyrillic field")
    p.add_argument("--subset", help="Subset label attached to every record")
    p.add_argument("--language")
    p.add_argument("--tier-pattern", dest="tier_pattern")
    p.add_argument("--strip-chars", dest="strip_chars")
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--val-ratio", dest="val_ratio", type=float)
    p.add_argument("--test-pattern", dest="test_pattern")
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("vocab", help="Build a vocabulary from a manifest's train split", formatter_class=formatter)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--language", default="und")
    p.add_argument("--diacritic", action="append", help="Extra diacritic mark")
    p.set_defaults(handler=cmd_vocab)

    p = sub.add_parser("decode", help="Decode CTC logits into hypotheses", formatter_class=formatter)
    _add_run_options(p)
    p.add_argument("--logits-dir", dest="logits_dir", help="Directory of <id>.ctl files")
    p.add_argument("--out", required=True, help="Hypothesis file")
    p.add_argument("--lm", help="ARPA language model")
    p.add_argument("--train-lm", dest="train_lm", action="store_true", help="Train a word LM on the train split")
    p.add_argument("--save-lm", dest="save_lm", help="Export the trained LM as ARPA")
    p.add_argument("--order", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--beam", type=int)
    p.add_argument("--nbest", type=int)
    p.add_argument("--nbest-out", dest="nbest_out", help="TSV with the n-best list of every utterance")
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--raw", action="store_true", help="Logits are unnormalized")
    p.add_argument("--allow-missing", dest="allow_missing", action="store_true")
    p.set_defaults(handler=cmd_decode)

    p = sub.add_parser("score", help="Score hypotheses against the manifest", formatter_class=formatter)
    _add_run_options(p)
    p.add_argument("--hyp", action="append", required=True, help="Hypothesis file (repeat to compare models)")
    p.add_argument("--name", action="append", help="Model name per --hyp")
    p.add_argument("--translit", help="Convert Cyrillic hypotheses to IPA with this table")
    p.add_argument("--worst-k", dest="worst_k", type=int, default=10)
    p.set_defaults(handler=cmd_score)

    p = sub.add_parser("analyze", help="Fit F1 against training frequency", formatter_class=formatter)
    _add_run_options(p)
    p.add_argument("--report", required=True, help="Per-phoneme CSV written by score")
    p.add_argument("--svg", help="Write a scatter plot with the fitted curve")
    p.add_argument(
        "--weight-by-test-freq", dest="weighted", action="store_true", help="Weight points by test frequency + 1"
    )
    p.set_defaults(handler=cmd_analyze)

    p = sub.add_parser("remap", help="Initialize a new output layer", formatter_class=formatter)
    p.add_argument("--old", dest="weights", required=True, help="Pretrained WGT1 file")
    p.add_argument("--new-vocab", dest="vocab", required=True, help="New vocabulary inventory")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=[m.value for m in RemapMode], default=RemapMode.AVG.value)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--table-out", dest="table_out", help="CSV composition table")
    p.set_defaults(handler=cmd_remap)

    p = sub.add_parser("serve", help="Run the HTTP API", formatter_class=formatter)
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(handler=cmd_serve)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        settings = get_settings()
        validate_settings(settings)
        setup_logging(args.log_level, args.log_file)
        service = PipelineService(jobs=args.jobs or settings.jobs)
        args.handler(service, args)
    except ToolkitError as e:
        print(f"error: {e.message}", file=sys.stderr)
        return exit_code_for(e)
    except Exception as e:
        logger.exception("Unexpected failure")
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Pipeline service: one method per CLI stage (ingest, vocab, decode, score, analyze, remap)."""

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd

from app.models.schemas import (
    Direction,
    ErrorLevel,
    ErrorRateSummary,
    FreqF1Point,
    IngestConfig,
    LowSupportReport,
    MatchedPair,
    PhonemeInventory,
    PhonemeReportRow,
    RemapMode,
    RunConfig,
    SigmoidFit,
    Smoothing,
    Split,
    UtteranceRecord,
)
from app.services import analysis_service, metrics_service
from app.services.decode_service import DecodeService
from app.services.ingest_service import build_manifest, parse_annotation_file, summarize_corpus
from app.services.ipa_service import (
    DEFAULT_DIACRITICS,
    decompose,
    load_inventory,
    load_transliteration_table,
    segment,
    transliterate,
    write_inventory,
)
from app.services.lm_service import export_arpa, import_arpa, train_ngram
from app.services.persistence_service import (
    PersistenceConfig,
    PersistenceService,
    read_hypotheses,
    read_manifest,
    read_phoneme_report,
    write_hypotheses,
    write_manifest,
    write_phoneme_report,
    write_rejects,
)
from app.services.remap_service import build_vocab, composition_table, derive_composition, read_weights, remap, write_weights
from app.utils.errors import IdMismatch, InsufficientPoints, MissingLogits, UsageError, handle_service_error
from app.utils.helpers import parallel_map
from app.utils.logger import LogExecution, LoggerMixin, log_data_warning, log_pipeline_event

PathLike = Union[str, Path]

ANNOTATION_SUFFIXES = (".textgrid", ".eaf")
LOGITS_SUFFIX = ".ctl"


@dataclass
class ScoreResult:
    """Everything cmd_score computed for the primary hypothesis file"""

    error_rates: List[ErrorRateSummary]
    rows: List[PhonemeReportRow]
    complexity_r: float
    worst: str
    wilcoxon: Optional[pd.DataFrame] = None
    reports: List[Path] = field(default_factory=list)


def _require(path: Optional[PathLike], what: str) -> Path:
    if not path:
        raise UsageError(f"{what} is required")
    resolved = Path(path)
    if not resolved.exists():
        raise UsageError(f"{what} not found: {resolved}")
    return resolved


def collect_annotation_files(inputs: Sequence[PathLike]) -> List[Path]:
    """Annotation files named directly or found under directories, sorted by path."""
    files = []
    for item in inputs:
        path = _require(item, "annotation input")
        if path.is_dir():
            files.extend(p for p in path.rglob("*") if p.is_file() and p.suffix.lower() in ANNOTATION_SUFFIXES)
        else:
            files.append(path)
    return sorted(set(files))


def hypothesis_text(tokens: Sequence[int], inv: PhonemeInventory) -> str:
    """Render decoder output as IPA; reserved tokens other than the separator are dropped."""
    pieces = []
    for i in tokens:
        if i == inv.separator_index:
            pieces.append(" ")
        elif not inv.is_special(i):
            pieces.append(inv.surfaces[i])
    return " ".join("".join(pieces).split())


def train_frequencies(records: Sequence[UtteranceRecord], inv: PhonemeInventory) -> Dict[str, int]:
    counts: Counter = Counter()
    for record in records:
        if record.split == Split.TRAIN:
            counts.update(inv.surfaces[i] for i in segment(record.ipa, inv) if i != inv.separator_index)
    return dict(counts)


def format_summary(rows) -> str:
    frame = pd.DataFrame([row.model_dump() for row in rows])
    if frame.empty:
        return ""
    frame["minutes"] = frame["minutes"].map(lambda v: f"{v:.2f}")
    frame["composite_pct"] = frame["composite_pct"].map(lambda v: f"{v:.1f}")
    return frame.to_string(index=False)


class PipelineService(LoggerMixin):
    """Runs the toolkit's pipeline stages against files on disk."""

    def __init__(self, jobs: int = 1):
        self.jobs = max(1, jobs)

    @handle_service_error
    def cmd_ingest(
        self,
        inputs: Sequence[PathLike],
        inventory: PathLike,
        manifest_out: PathLike,
        config: Optional[IngestConfig] = None,
        tables: Sequence[PathLike] = (),
        cyrillic_table: Optional[PathLike] = None,
        rejects_out: Optional[PathLike] = None,
        subset: Optional[str] = None,
    ) -> Tuple[List[UtteranceRecord], str]:
        """Parse annotation files into a manifest; returns the records and a per-split corpus summary."""
        config = config or IngestConfig()
        inv = load_inventory(_require(inventory, "inventory"))
        files = collect_annotation_files(inputs)
        if not files:
            raise UsageError("no TextGrid or EAF files found in the given inputs")

        with LogExecution(self.logger, "ingest"):
            parsed = parallel_map(parse_annotation_file, files, self.jobs)
            loaded_tables = [load_transliteration_table(_require(t, "transliteration table")) for t in tables]
            cyr = load_transliteration_table(_require(cyrillic_table, "Cyrillic table")) if cyrillic_table else None
            records, rejects = build_manifest(
                list(zip(files, parsed)), inv, tables=loaded_tables, config=config, cyrillic_table=cyr, subset=subset
            )
            write_manifest(records, manifest_out)
            if rejects_out is None:
                rejects_out = Path(manifest_out).with_suffix(".rejects.jsonl")
            write_rejects(rejects, rejects_out)

        summary = format_summary(summarize_corpus(records, inv))
        log_pipeline_event("ingest", "manifest written", {"path": str(manifest_out), "files": len(files)})
        return records, summary

    @handle_service_error
    def cmd_vocab(
        self,
        manifest: PathLike,
        out: PathLike,
        language: str = "und",
        diacritics: Sequence[str] = DEFAULT_DIACRITICS,
    ) -> PhonemeInventory:
        """Build a vocabulary from the train split of a manifest."""
        records = read_manifest(_require(manifest, "manifest"))
        train = [r.ipa for r in records if r.split == Split.TRAIN]
        if not train:
            log_data_warning("vocab", "manifest has no train records, using every record")
            train = [r.ipa for r in records]
        inv = build_vocab(train, diacritics=diacritics, language=language)
        write_inventory(inv, out)
        return inv

    def _language_model(self, config: RunConfig, records: Sequence[UtteranceRecord], lm_path, train_lm, save_lm):
        if lm_path:
            return import_arpa(_require(lm_path, "language model"))
        if not train_lm:
            return None
        transcripts = [r.ipa for r in records if r.split == Split.TRAIN]
        model = train_ngram(transcripts, order=config.order, smoothing=Smoothing.KNESER_NEY)
        if save_lm:
            export_arpa(model, save_lm)
        return model

    def _logits_path(self, record: UtteranceRecord, manifest_dir: Path, logits_dir: Optional[Path]) -> Path:
        if record.logits_path:
            path = Path(record.logits_path)
            return path if path.is_absolute() else manifest_dir / path
        base = logits_dir if logits_dir is not None else manifest_dir
        return base / f"{record.id}{LOGITS_SUFFIX}"

    @handle_service_error
    def cmd_decode(
        self,
        config: RunConfig,
        out: PathLike,
        logits_dir: Optional[PathLike] = None,
        lm_path: Optional[PathLike] = None,
        train_lm: bool = False,
        save_lm: Optional[PathLike] = None,
        greedy: bool = False,
        raw: bool = False,
        allow_missing: bool = False,
        splits: Sequence[Split] = (Split.TEST,),
        nbest_out: Optional[PathLike] = None,
    ) -> Dict[str, str]:
        """Decode the logit file of every selected utterance into one hypothesis line."""
        manifest_path = _require(config.manifest, "manifest")
        inv = load_inventory(_require(config.inventory, "inventory"))
        records = read_manifest(manifest_path)
        lm = self._language_model(config, records, lm_path, train_lm, save_lm)

        selected = [r for r in records if r.split in set(splits)]
        directory = Path(logits_dir) if logits_dir else None
        jobs, missing = [], []
        for record in selected:
            path = self._logits_path(record, manifest_path.parent, directory)
            if path.exists():
                jobs.append((record.id, path))
            else:
                missing.append(record.id)
        if missing:
            if not allow_missing:
                raise MissingLogits(missing)
            log_data_warning("decode", "skipping utterances without logits", {"count": len(missing)})

        decoder = DecodeService(
            inv=inv,
            lm=lm,
            alpha=config.alpha,
            beta=config.beta,
            beam=config.beam,
            nbest=config.nbest,
            greedy=greedy,
            raw=raw,
        )
        with LogExecution(self.logger, f"decode of {len(jobs)} utterances"):
            results = parallel_map(decoder.decode_file, jobs, self.jobs)

        hypotheses = {}
        nbest_rows = []
        for utt_id, hyps in results:
            hypotheses[utt_id] = hypothesis_text(hyps[0].tokens, inv) if hyps else ""
            for rank, hyp in enumerate(hyps, start=1):
                nbest_rows.append(
                    {
                        "id": utt_id,
                        "rank": rank,
                        "score": hyp.score,
                        "ctc": hyp.ctc,
                        "lm": hyp.lm,
                        "words": hyp.words,
                        "text": hypothesis_text(hyp.tokens, inv),
                    }
                )
        write_hypotheses(hypotheses, out)
        if nbest_out:
            columns = ["id", "rank", "score", "ctc", "lm", "words", "text"]
            pd.DataFrame(nbest_rows, columns=columns).to_csv(nbest_out, sep="\t", index=False, encoding="utf-8")
        log_pipeline_event("decode", "hypotheses written", {"path": str(out), "utterances": len(hypotheses)})
        return hypotheses

    def _pairs(
        self,
        refs: Sequence[UtteranceRecord],
        hyp_path: PathLike,
        table=None,
    ) -> List[Tuple[str, str]]:
        hyps = read_hypotheses(_require(hyp_path, "hypothesis file"))
        ref_ids = [r.id for r in refs]
        missing = [i for i in ref_ids if i not in hyps]
        unexpected = sorted(set(hyps) - set(ref_ids))
        if missing or unexpected:
            raise IdMismatch(missing, unexpected)
        pairs = []
        for record in refs:
            hyp = hyps[record.id]
            if table is not None:
                hyp = transliterate(hyp, table, Direction.CYR_TO_IPA)
            pairs.append((record.ipa, hyp))
        return pairs

    @handle_service_error
    def cmd_score(
        self,
        config: RunConfig,
        hypotheses: Sequence[PathLike],
        names: Optional[Sequence[str]] = None,
        translit: Optional[PathLike] = None,
        splits: Sequence[Split] = (Split.TEST,),
        worst_k: int = 10,
    ) -> ScoreResult:
        """Error rates, per-phoneme report, complexity table, confusion and Wilcoxon matrix."""
        if not hypotheses:
            raise UsageError("at least one hypothesis file is required")
        inv = load_inventory(_require(config.inventory, "inventory"))
        records = read_manifest(_require(config.manifest, "manifest"))
        refs = [r for r in records if r.split in set(splits)]
        table = load_transliteration_table(_require(translit, "transliteration table")) if translit else None
        store = PersistenceService(PersistenceConfig(report_dir=config.report_dir or "reports"))
        names = list(names) if names else [Path(h).stem for h in hypotheses]
        if len(names) != len(hypotheses) or len(set(names)) != len(names):
            raise UsageError("model names must be unique, one per hypothesis file")

        with LogExecution(self.logger, "score"):
            pairs = self._pairs(refs, hypotheses[0], table)
            summaries = []
            for level in ErrorLevel:
                edits, ref_tokens, rate = metrics_service.corpus_error_rate(level, pairs, inv)
                summaries.append(ErrorRateSummary(level=level, edits=edits, ref_tokens=ref_tokens, rate=rate))
            store.save_rows("error_rates.csv", summaries)

            scripts = [
                metrics_service.align(
                    metrics_service.tokenize(ErrorLevel.PHONEME, ref, inv),
                    metrics_service.tokenize(ErrorLevel.PHONEME, hyp, inv),
                )
                for ref, hyp in pairs
            ]
            rows = metrics_service.report_rows(metrics_service.tally(scripts), inv, train_frequencies(records, inv))
            store.written.append(write_phoneme_report(rows, store.path_for("phonemes.csv")))

            categories, r = metrics_service.complexity_table(rows, inv)
            store.save_rows("complexity.csv", categories)
            matrix = metrics_service.confusion(scripts)
            store.save_table("confusion.csv", metrics_service.confusion_frame(matrix), index=True)

            scored = [row for row in rows if row.test_freq > 0]
            worst = analysis_service.format_triplets(analysis_service.worst_phonemes(scored, k=worst_k))
            store.save_text("worst.txt", worst)
            self._score_subsets(refs, pairs, inv, store)

            wilcoxon = None
            if len(hypotheses) > 1:
                rates = {
                    name: metrics_service.utterance_error_rates(ErrorLevel.PHONEME, self._pairs(refs, path, table), inv)
                    for name, path in zip(names, hypotheses)
                }
                wilcoxon = metrics_service.pairwise_wilcoxon(rates)
                store.save_table("wilcoxon.csv", wilcoxon, index=True)

        log_pipeline_event("score", "reports written", {"dir": str(store.report_dir), "utterances": len(pairs)})
        return ScoreResult(
            error_rates=summaries,
            rows=rows,
            complexity_r=r,
            worst=worst,
            wilcoxon=wilcoxon,
            reports=list(store.written),
        )

    def _score_subsets(self, refs, pairs, inv, store: PersistenceService) -> None:
        labels = sorted({r.subset for r in refs if r.subset})
        if not labels:
            return
        rows = []
        for label in labels:
            chosen = [pair for record, pair in zip(refs, pairs) if record.subset == label]
            row = {"subset": label, "utterances": len(chosen)}
            for level in ErrorLevel:
                row[level.value] = metrics_service.corpus_error_rate(level, chosen, inv)[2]
            rows.append(row)
        store.save_table("subsets.csv", pd.DataFrame(rows))

    @handle_service_error
    def cmd_analyze(
        self,
        config: RunConfig,
        phoneme_report: PathLike,
        svg: Optional[PathLike] = None,
        weighted: bool = False,
    ) -> Tuple[SigmoidFit, LowSupportReport]:
        """Sigmoid fit of F1 against log training frequency plus low-support matching."""
        rows = read_phoneme_report(_require(phoneme_report, "phoneme report"))
        inv = load_inventory(_require(config.inventory, "inventory")) if config.inventory else None
        diacritics = inv.recognized_diacritics if inv is not None else DEFAULT_DIACRITICS
        train_freq = None
        if config.manifest and inv is not None:
            train_freq = train_frequencies(read_manifest(_require(config.manifest, "manifest")), inv)

        points = []
        for row in rows:
            phoneme = decompose(row.surface, diacritics)
            points.append(
                FreqF1Point(
                    surface=row.surface,
                    base=phoneme.base,
                    complexity=phoneme.complexity,
                    train_freq=train_freq.get(row.surface, 0) if train_freq is not None else row.train_freq,
                    test_freq=row.test_freq,
                    f1=row.f1,
                )
            )
        used, excluded = analysis_service.split_fit_points(points)
        store = PersistenceService(PersistenceConfig(report_dir=config.report_dir or "reports"))
        sidecar = pd.DataFrame(
            [
                {
                    "surface": p.surface,
                    "train_freq": p.train_freq,
                    "test_freq": p.test_freq,
                    "reason": "zero train frequency" if p.train_freq == 0 else "zero test frequency",
                }
                for p in excluded
            ],
            columns=["surface", "train_freq", "test_freq", "reason"],
        )
        store.save_table("excluded.csv", sidecar)

        with LogExecution(self.logger, "frequency analysis"):
            try:
                fit = analysis_service.fit_sigmoid(used, weight_by_test_freq=weighted)
            except InsufficientPoints:
                self.logger.error(
                    "Too few phonemes with distinct non-zero training frequency for a sigmoid fit; "
                    "score a larger test set or include more training data"
                )
                raise
            store.save_table("fit.csv", analysis_service.fit_report(fit))
            if fit.covariance is None:
                log_data_warning("analyze", "covariance unavailable, curve written without band")
            store.save_table("curve.csv", analysis_service.curve_table(fit, used))
            store.save_table(
                "points.csv",
                pd.DataFrame(
                    {
                        "surface": [p.surface for p in used],
                        "x": [p.x for p in used],
                        "f1": [p.f1 for p in used],
                        "point_size": [analysis_service.point_size(p) for p in used],
                    }
                ),
            )
            if svg:
                analysis_service.render_svg(used, fit, svg)

            low = analysis_service.match_low_support(points)
            store.save_rows("low_support.csv", low.pairs, columns=list(MatchedPair.model_fields))
            store.save_json(
                "low_support.json",
                {
                    "spearman": None if pd.isna(low.spearman) else low.spearman,
                    "n_low": low.n_low,
                    "n_low_good": low.n_low_good,
                    "unmatched": low.unmatched,
                },
            )

        log_pipeline_event("analyze", "fit written", {"converged": fit.converged, "r2": fit.r2, "n": fit.n_points})
        return fit, low

    @handle_service_error
    def cmd_remap(
        self,
        weights: PathLike,
        vocab: PathLike,
        out: PathLike,
        mode: RemapMode = RemapMode.AVG,
        seed: int = 0,
        table_out: Optional[PathLike] = None,
    ) -> pd.DataFrame:
        """Initialize a new output layer from a pretrained one; returns the composition table."""
        old = read_weights(_require(weights, "weights"))
        new_vocab = load_inventory(_require(vocab, "vocabulary"))
        with LogExecution(self.logger, f"remap ({RemapMode(mode).value})"):
            cmap = derive_composition(new_vocab, old.vocab)
            bundle = remap(old, cmap, mode=mode, seed=seed)
            write_weights(bundle, out)
        table = composition_table(cmap)
        if table_out:
            table.to_csv(table_out, index=False, encoding="utf-8")
        return table

"""
Corpus ingestion: Praat TextGrid and ELAN EAF parsing, transcript
normalization, manifest construction and split-wise corpus statistics.
"""

import bisect
import logging
import re
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from lxml import etree

from app.models.schemas import (
    AnnotationInterval,
    CorpusSummaryRow,
    Direction,
    IngestConfig,
    PhonemeInventory,
    RejectRecord,
    Split,
    TransliterationTable,
    UtteranceRecord,
)
from app.services.ipa_service import segment, transliterate
from app.utils.errors import EmptyCorpus, InventoryError, ParseError, SegmentationError
from app.utils.helpers import nfc
from app.utils.logger import log_data_warning, log_pipeline_event

logger = logging.getLogger(__name__)

_TEXTGRID_TOKEN = re.compile(
    r'(?P<string>"(?:[^"]|"")*")'
    r"|(?P<comment>![^\n]*)"
    r"|(?P<index>\[\d*\])"
    r"|(?P<flag><exists>|<absent>)"
    r"|(?P<number>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)"
)

_WHITESPACE = re.compile(r"\s+")


def _decode(data: bytes, source: str) -> str:
    if data.startswith((b"\xff\xfe", b"\xfe\xff")):
        encoding = "utf-16"
    elif data.startswith(b"\xef\xbb\xbf"):
        encoding = "utf-8-sig"
    else:
        encoding = "utf-8"
    try:
        return data.decode(encoding)
    except UnicodeDecodeError as exc:
        raise ParseError(f"cannot decode as {encoding}: {exc}", source=source)


class _TokenStream:
    """Value tokens of a TextGrid file, shared by the long and short text formats."""

    def __init__(self, text: str, source: str):
        self.source = source
        line_starts = [0] + [m.end() for m in re.finditer(r"\n", text)]
        self.last_line = len(line_starts)
        self.tokens: List[Tuple[str, object, int]] = []
        for match in _TEXTGRID_TOKEN.finditer(text):
            kind = match.lastgroup
            if kind in ("comment", "index"):
                continue
            line = bisect.bisect_right(line_starts, match.start())
            raw = match.group()
            if kind == "string":
                value = raw[1:-1].replace('""', '"')
            elif kind == "number":
                value = float(raw)
            else:
                value = raw == "<exists>"
            self.tokens.append((kind, value, line))
        self.pos = 0

    def take(self, kind: str, what: str):
        if self.pos >= len(self.tokens):
            raise ParseError(f"unexpected end of file while reading {what}", line=self.last_line, source=self.source)
        found, value, line = self.tokens[self.pos]
        if found != kind:
            raise ParseError(f"expected {what}, found {found} {value!r}", line=line, source=self.source)
        self.pos += 1
        return value, line

    def number(self, what: str) -> Tuple[float, int]:
        return self.take("number", what)

    def string(self, what: str) -> Tuple[str, int]:
        return self.take("string", what)


def _check_bounds(stream: _TokenStream, what: str, source: str) -> Tuple[float, float]:
    xmin, line = stream.number(f"{what} xmin")
    xmax, _ = stream.number(f"{what} xmax")
    if xmin > xmax:
        raise ParseError(f"{what} xmin {xmin} > xmax {xmax}", line=line, source=source)
    return xmin, xmax


def parse_textgrid(path: Union[str, Path]) -> List[AnnotationInterval]:
    """Intervals of every IntervalTier in a long- or short-format TextGrid."""
    source = str(path)
    stream = _TokenStream(_decode(Path(path).read_bytes(), source), source)

    file_type, line = stream.string("file type")
    if file_type != "ooTextFile":
        raise ParseError(f"not a Praat text file: {file_type!r}", line=line, source=source)
    object_class, line = stream.string("object class")
    if object_class != "TextGrid":
        raise ParseError(f"expected a TextGrid, found {object_class!r}", line=line, source=source)
    _check_bounds(stream, "grid", source)
    exists, _ = stream.take("flag", "tier flag")
    if not exists:
        return []
    n_tiers, _ = stream.number("tier count")

    intervals: List[AnnotationInterval] = []
    for _ in range(int(n_tiers)):
        tier_class, line = stream.string("tier class")
        name, _ = stream.string("tier name")
        _check_bounds(stream, f"tier {name!r}", source)
        count, _ = stream.number("item count")

        if tier_class == "TextTier":
            for _ in range(int(count)):
                stream.number("point time")
                stream.string("point mark")
            log_data_warning("ingest", "skipping point tier", {"tier": name, "source": source})
            continue
        if tier_class != "IntervalTier":
            raise ParseError(f"unknown tier class {tier_class!r}", line=line, source=source)

        previous_end = None
        for _ in range(int(count)):
            start, line = stream.number("interval xmin")
            end, _ = stream.number("interval xmax")
            text, _ = stream.string("interval text")
            if start > end:
                raise ParseError(f"interval xmin {start} > xmax {end} in tier {name!r}", line=line, source=source)
            if previous_end is not None and start < previous_end:
                raise ParseError(f"overlapping intervals in tier {name!r}", line=line, source=source)
            previous_end = end
            if start == end:
                logger.debug(f"Skipping zero-length interval at {start} in tier {name!r}")
                continue
            intervals.append(AnnotationInterval(tier_name=name, t_start=start, t_end=end, text=text))

    logger.debug(f"Parsed {len(intervals)} intervals from {source}")
    return intervals


def parse_eaf(path: Union[str, Path]) -> List[AnnotationInterval]:
    """Time-aligned annotations of an ELAN file; TIME_VALUE is in milliseconds."""
    source = str(path)
    try:
        tree = etree.parse(str(path))
    except etree.XMLSyntaxError as exc:
        raise ParseError(f"invalid EAF XML: {exc.msg}", line=exc.lineno, source=source)
    except OSError as exc:
        raise ParseError(f"cannot read EAF file: {exc}", source=source)

    slots: Dict[str, Optional[float]] = {}
    for slot in tree.iterfind(".//TIME_ORDER/TIME_SLOT"):
        value = slot.get("TIME_VALUE")
        slots[slot.get("TIME_SLOT_ID")] = float(value) / 1000.0 if value is not None else None

    def resolve(ref: Optional[str], element) -> float:
        if ref not in slots:
            raise ParseError(f"dangling TIME_SLOT_REF {ref!r}", line=element.sourceline, source=source)
        value = slots[ref]
        if value is None:
            raise ParseError(f"time slot {ref!r} is not aligned", line=element.sourceline, source=source)
        return value

    aligned_spans: Dict[str, Tuple[float, float]] = {}
    for annotation in tree.iterfind(".//TIER/ANNOTATION/ALIGNABLE_ANNOTATION"):
        start = resolve(annotation.get("TIME_SLOT_REF1"), annotation)
        end = resolve(annotation.get("TIME_SLOT_REF2"), annotation)
        if start > end:
            raise ParseError("annotation starts after it ends", line=annotation.sourceline, source=source)
        aligned_spans[annotation.get("ANNOTATION_ID", "")] = (start, end)
    parents = {
        el.get("ANNOTATION_ID", ""): el.get("ANNOTATION_REF") for el in tree.iterfind(".//TIER/ANNOTATION/REF_ANNOTATION")
    }

    def span_of(annotation_id: Optional[str], element) -> Tuple[float, float]:
        # REF_ANNOTATION chains end at an ALIGNABLE_ANNOTATION whose span they inherit
        seen = set()
        while annotation_id not in aligned_spans:
            if annotation_id in seen or annotation_id not in parents:
                raise ParseError(f"unresolvable ANNOTATION_REF {annotation_id!r}", line=element.sourceline, source=source)
            seen.add(annotation_id)
            annotation_id = parents[annotation_id]
        return aligned_spans[annotation_id]

    intervals: List[AnnotationInterval] = []
    for tier in tree.iterfind(".//TIER"):
        name = tier.get("TIER_ID", "")
        spans = []
        for annotation in tier.findall("ANNOTATION/ALIGNABLE_ANNOTATION"):
            start = resolve(annotation.get("TIME_SLOT_REF1"), annotation)
            end = resolve(annotation.get("TIME_SLOT_REF2"), annotation)
            text = annotation.findtext("ANNOTATION_VALUE") or ""
            spans.append((start, end, text, annotation.sourceline))

        # symbolic subdivisions share their parent's span: join them in document order
        by_span: Dict[Tuple[float, float], List[Tuple[str, int]]] = {}
        for annotation in tier.findall("ANNOTATION/REF_ANNOTATION"):
            span = span_of(annotation.get("ANNOTATION_REF"), annotation)
            by_span.setdefault(span, []).append((annotation.findtext("ANNOTATION_VALUE") or "", annotation.sourceline))
        for (start, end), parts in by_span.items():
            text = " ".join(t for t, _ in parts if t.strip())
            spans.append((start, end, text, parts[0][1]))

        if not spans:
            logger.debug(f"Skipping empty tier {name!r}")
            continue
        spans.sort(key=lambda s: (s[0], s[1]))

        previous_end = None
        for start, end, text, line in spans:
            if previous_end is not None and start < previous_end:
                raise ParseError(f"overlapping annotations in tier {name!r}", line=line, source=source)
            previous_end = end
            if start == end:
                continue
            intervals.append(AnnotationInterval(tier_name=name, t_start=start, t_end=end, text=text))

    logger.debug(f"Parsed {len(intervals)} annotations from {source}")
    return intervals


def parse_annotation_file(path: Union[str, Path]) -> List[AnnotationInterval]:
    suffix = Path(path).suffix.lower()
    if suffix == ".textgrid":
        return parse_textgrid(path)
    if suffix == ".eaf":
        return parse_eaf(path)
    raise ParseError(f"unsupported annotation format {suffix!r}", source=str(path))


def normalize(raw: str, tables: Sequence[TransliterationTable] = (), strip_chars: str = "") -> str:
    """Map a raw transcript to clean IPA: tables in priority order, NFC, strip-set, single spaces."""
    text = nfc(raw)
    for table in tables:
        text = transliterate(text, table, Direction.CYR_TO_IPA)
    text = nfc(text)
    if strip_chars:
        text = text.translate({ord(ch): None for ch in strip_chars})
    return _WHITESPACE.sub(" ", text).strip()


def _assign_splits(records: List[dict], config: IngestConfig) -> None:
    test_pattern = re.compile(config.test_pattern) if config.test_pattern else None
    train_positions = []
    for i, record in enumerate(records):
        if test_pattern is not None and test_pattern.search(Path(record["source_file"]).name):
            record["split"] = Split.TEST
        else:
            record["split"] = Split.TRAIN
            train_positions.append(i)

    if config.val_ratio <= 0 or not train_positions:
        return
    stride = max(int(round(1.0 / config.val_ratio)), 1)
    order = np.random.default_rng(config.split_seed).permutation(len(train_positions))
    for rank, j in enumerate(order):
        if rank % stride == stride - 1:
            records[train_positions[int(j)]]["split"] = Split.VAL


def build_manifest(
    sources: Sequence[Tuple[Union[str, Path], Sequence[AnnotationInterval]]],
    inv: PhonemeInventory,
    tables: Sequence[TransliterationTable] = (),
    config: Optional[IngestConfig] = None,
    cyrillic_table: Optional[TransliterationTable] = None,
    subset: Optional[str] = None,
) -> Tuple[List[UtteranceRecord], List[RejectRecord]]:
    """Normalize, validate and split annotation intervals into manifest records.

    Ids are ``<file stem>_<index>`` where the index counts tier-selected
    intervals of that file. Untranscribable intervals become reject records.
    """
    config = config or IngestConfig()
    tier_pattern = re.compile(config.tier_pattern)
    pending: List[dict] = []
    rejects: List[RejectRecord] = []
    empty = 0

    for source_file, intervals in sources:
        source = str(source_file)
        stem = Path(source).stem
        selected = [iv for iv in intervals if tier_pattern.search(iv.tier_name)]
        for idx, interval in enumerate(selected):
            utt_id = f"{stem}_{idx:04d}"
            try:
                ipa = normalize(interval.text, tables, config.strip_chars)
                if not ipa:
                    empty += 1
                    continue
                segment(ipa, inv)
            except (SegmentationError, InventoryError) as exc:
                rejects.append(RejectRecord(id=utt_id, source=source, raw=interval.text, reason=exc.message))
                log_data_warning("ingest", "rejected utterance", {"id": utt_id, "reason": exc.message})
                continue

            record = {
                "id": utt_id,
                "ipa": ipa,
                "duration_s": interval.t_end - interval.t_start,
                "source_file": source,
                "tier": interval.tier_name,
                "subset": subset,
            }
            if cyrillic_table is not None:
                record["cyrillic"] = transliterate(ipa, cyrillic_table, Direction.IPA_TO_CYR)
            pending.append(record)

    if not pending:
        raise EmptyCorpus("usable intervals")
    _assign_splits(pending, config)
    records = [UtteranceRecord(**record) for record in pending]

    counts = {split.value: sum(1 for r in records if r.split == split) for split in Split}
    log_pipeline_event(
        "ingest", "manifest built", {"records": len(records), "rejects": len(rejects), "empty": empty, **counts}
    )
    return records, rejects


def summarize_corpus(records: Iterable[UtteranceRecord], inv: PhonemeInventory) -> List[CorpusSummaryRow]:
    """Split-wise sentence, duration, word, phoneme and composite counts plus an overall row."""
    groups: Dict[str, List[UtteranceRecord]] = {split.value: [] for split in Split}
    everything: List[UtteranceRecord] = []
    for record in records:
        groups[record.split.value].append(record)
        everything.append(record)
    groups["all"] = everything

    rows = []
    for name, members in groups.items():
        if not members:
            continue
        words = set()
        phonemes = set()
        for record in members:
            words.update(record.ipa.split())
            phonemes.update(i for i in segment(record.ipa, inv) if i != inv.separator_index)
        composites = sum(1 for i in phonemes if inv.phonemes[i].is_composite)
        rows.append(
            CorpusSummaryRow(
                split=name,
                sentences=len(members),
                minutes=sum(r.duration_s for r in members) / 60.0,
                unique_words=len(words),
                unique_phonemes=len(phonemes),
                composites=composites,
                composite_pct=100.0 * composites / len(phonemes) if phonemes else 0.0,
            )
        )
    return rows

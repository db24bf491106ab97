"""
Persistence Service for pipeline artifacts
Reads and writes manifests, rejects, hypothesis files and tabular reports
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Type, TypeVar, Union

import pandas as pd
from pydantic import BaseModel
from pydantic import ValidationError as PydanticValidationError

from app.models.schemas import PhonemeReportRow, RejectRecord, UtteranceRecord
from app.utils.errors import ParseError
from app.utils.logger import LoggerMixin

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)

PathLike = Union[str, Path]

PHONEME_REPORT_COLUMNS = list(PhonemeReportRow.model_fields)


# JSON Lines
def write_jsonl(items: Iterable[BaseModel], path: PathLike) -> int:
    """One object per line in field declaration order; returns the number of lines written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for item in items:
            fh.write(item.model_dump_json())
            fh.write("\n")
            count += 1
    logger.debug(f"Wrote {count} lines to {path}")
    return count


def read_jsonl(path: PathLike, model: Type[ModelT]) -> List[ModelT]:
    source = str(path)
    items: List[ModelT] = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as e:
        raise ParseError(f"cannot read JSON Lines file: {e}", source=source) from e

    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            items.append(model.model_validate_json(line))
        except PydanticValidationError as e:
            first = e.errors()[0]
            where = ".".join(str(p) for p in first.get("loc", ())) or "record"
            raise ParseError(f"invalid {model.__name__} ({where}: {first.get('msg')})", line=lineno, source=source) from e
    return items


def write_manifest(records: Iterable[UtteranceRecord], path: PathLike) -> int:
    return write_jsonl(records, path)


def read_manifest(path: PathLike) -> List[UtteranceRecord]:
    """Manifest records in file order; duplicate ids are a ParseError."""
    records = read_jsonl(path, UtteranceRecord)
    seen = set()
    for lineno, record in enumerate(records, start=1):
        if record.id in seen:
            raise ParseError(f"duplicate utterance id {record.id!r}", line=lineno, source=str(path))
        seen.add(record.id)
    return records


def write_rejects(rejects: Iterable[RejectRecord], path: PathLike) -> int:
    return write_jsonl(rejects, path)


def read_rejects(path: PathLike) -> List[RejectRecord]:
    return read_jsonl(path, RejectRecord)


# Hypothesis transcripts
def write_hypotheses(hypotheses: Dict[str, str], path: PathLike) -> None:
    """``<id>\\t<transcript>`` per line, in mapping order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for utt_id, text in hypotheses.items():
            fh.write(f"{utt_id}\t{text}\n")


def read_hypotheses(path: PathLike) -> Dict[str, str]:
    source = str(path)
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as e:
        raise ParseError(f"cannot read hypothesis file: {e}", source=source) from e

    hypotheses: Dict[str, str] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ParseError("expected '<id>\\t<transcript>'", line=lineno, source=source)
        utt_id, text = line.split("\t", 1)
        if utt_id in hypotheses:
            raise ParseError(f"duplicate utterance id {utt_id!r}", line=lineno, source=source)
        hypotheses[utt_id] = text
    return hypotheses


# Tabular reports
def write_table(frame: pd.DataFrame, path: PathLike, index: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=index, encoding="utf-8", lineterminator="\n")
    return path


def read_table(path: PathLike, required: Sequence[str] = (), text_columns: Sequence[str] = ()) -> pd.DataFrame:
    """Read a CSV report; ``text_columns`` are kept as strings, empty cells elsewhere become NaN."""
    source = str(path)
    try:
        frame = pd.read_csv(
            path,
            encoding="utf-8",
            dtype={c: str for c in text_columns},
            keep_default_na=False,
            na_values=[""],
        )
    except FileNotFoundError as e:
        raise ParseError("report file not found", source=source) from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ParseError(f"unreadable CSV: {e}", source=source) from e

    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise ParseError(f"missing columns {missing}", line=1, source=source)
    return frame


def rows_frame(rows: Sequence[BaseModel], columns: Optional[Sequence[str]] = None) -> pd.DataFrame:
    records = [row.model_dump(mode="json") for row in rows]
    if columns is None and rows:
        columns = list(type(rows[0]).model_fields)
    return pd.DataFrame(records, columns=columns)


def write_phoneme_report(rows: Sequence[PhonemeReportRow], path: PathLike) -> Path:
    return write_table(rows_frame(rows, PHONEME_REPORT_COLUMNS), path)


def read_phoneme_report(path: PathLike) -> List[PhonemeReportRow]:
    required = ["surface", "N", "S", "I", "D", "f1"]
    frame = read_table(path, required=required, text_columns=["surface"])
    rows = []
    for offset, record in enumerate(frame.to_dict(orient="records"), start=2):
        record = {k: v for k, v in record.items() if k in PhonemeReportRow.model_fields and not pd.isna(v)}
        record.setdefault("S_hyp", record["S"])
        record.setdefault("complexity", 1)
        for key in ("precision", "recall"):
            record.setdefault(key, record["f1"])
        try:
            rows.append(PhonemeReportRow(**record))
        except PydanticValidationError as e:
            raise ParseError(f"invalid report row: {e.errors()[0].get('msg')}", line=offset, source=str(path)) from e
    return rows


def write_json(payload: dict, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


@dataclass
class PersistenceConfig:
    """Configuration for the report directory"""

    report_dir: str = "reports"
    prefix: str = ""


class PersistenceService(LoggerMixin):
    """Writes the named reports of one pipeline run into a single directory"""

    def __init__(self, config: Optional[PersistenceConfig] = None):
        self.config = config or PersistenceConfig()
        self.report_dir = Path(self.config.report_dir)
        self.written: List[Path] = []
        self._ensure_directories()

    def _ensure_directories(self):
        self.report_dir.mkdir(parents=True, exist_ok=True)

    def path_for(self, name: str) -> Path:
        return self.report_dir / f"{self.config.prefix}{name}"

    def save_table(self, name: str, frame: pd.DataFrame, index: bool = False) -> Path:
        path = write_table(frame, self.path_for(name), index=index)
        self.written.append(path)
        self.logger.info(f"Saved report {path} ({len(frame)} rows)")
        return path

    def save_rows(self, name: str, rows: Sequence[BaseModel], columns: Optional[Sequence[str]] = None) -> Path:
        return self.save_table(name, rows_frame(rows, columns))

    def save_text(self, name: str, text: str) -> Path:
        path = self.path_for(name)
        path.write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")
        self.written.append(path)
        self.logger.info(f"Saved report {path}")
        return path

    def save_json(self, name: str, payload: dict) -> Path:
        path = write_json(payload, self.path_for(name))
        self.written.append(path)
        self.logger.info(f"Saved report {path}")
        return path

    def load_table(self, name: str, index: bool = False) -> pd.DataFrame:
        frame = read_table(self.path_for(name))
        if index:
            frame = frame.set_index(frame.columns[0])
        return frame

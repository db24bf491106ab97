"""
Test suite for the corpus ingestion service
Covers TextGrid and EAF parsing, normalization, manifests and corpus summaries
"""

from collections import Counter
from pathlib import Path

import pytest

from app.models.schemas import AnnotationInterval, IngestConfig, Split
from app.services.ingest_service import (
    build_manifest,
    normalize,
    parse_annotation_file,
    parse_eaf,
    parse_textgrid,
    summarize_corpus,
)
from app.services.ipa_service import load_inventory, load_transliteration_table, segment
from app.utils.errors import EmptyCorpus, ParseError

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def archi():
    return load_inventory(FIXTURES / "archi_inventory.txt")


@pytest.fixture
def romanized():
    return load_transliteration_table(FIXTURES / "archi_romanized.tsv")


@pytest.fixture
def cyrillic():
    return load_transliteration_table(FIXTURES / "archi_cyrillic.tsv")


def short_grid(intervals, tier="sentence", xmax=10.0):
    lines = ['File type = "ooTextFile"', 'Object class = "TextGrid"', "", "0", str(xmax), "<exists>", "1"]
    lines += ['"IntervalTier"', f'"{tier}"', "0", str(xmax), str(len(intervals))]
    for start, end, text in intervals:
        lines += [str(start), str(end), f'"{text}"']
    return "\n".join(lines) + "\n"


def intervals_of(texts, tier="sentence", step=1.0):
    return [
        AnnotationInterval(tier_name=tier, t_start=i * step, t_end=(i + 1) * step, text=text) for i, text in enumerate(texts)
    ]


class TestTextGrid:
    """Praat TextGrid parsing"""

    def test_long_format(self):
        intervals = parse_textgrid(FIXTURES / "sample_long.TextGrid")
        assert [(iv.tier_name, iv.t_start, iv.t_end, iv.text) for iv in intervals] == [
            ("sentence", 0.0, 1.25, "kʷa qʼan"),
            ("sentence", 1.25, 2.0, ""),
            ("sentence", 2.0, 4.5, "ʃab t͡ʃʼa"),
            ("notes", 0.0, 4.5, 'speaker said "hello"'),
        ]

    def test_short_and_long_formats_agree(self):
        assert parse_textgrid(FIXTURES / "sample_short.TextGrid") == parse_textgrid(FIXTURES / "sample_long.TextGrid")

    def test_point_tier_skipped(self):
        intervals = parse_textgrid(FIXTURES / "sample_long.TextGrid")
        assert "events" not in {iv.tier_name for iv in intervals}

    def test_utf16_with_bom(self, tmp_path):
        text = (FIXTURES / "sample_long.TextGrid").read_text(encoding="utf-8")
        path = tmp_path / "utf16.TextGrid"
        path.write_bytes(text.encode("utf-16"))
        assert parse_textgrid(path) == parse_textgrid(FIXTURES / "sample_long.TextGrid")

    def test_utf8_with_bom(self, tmp_path):
        text = (FIXTURES / "sample_short.TextGrid").read_text(encoding="utf-8")
        path = tmp_path / "bom.TextGrid"
        path.write_bytes(b"\xef\xbb\xbf" + text.encode("utf-8"))
        assert parse_textgrid(path) == parse_textgrid(FIXTURES / "sample_short.TextGrid")

    def test_minimal_grid(self, tmp_path):
        path = tmp_path / "one.TextGrid"
        path.write_text(short_grid([(0.5, 2.25, "kʷa")]), encoding="utf-8")
        assert parse_textgrid(path) == [AnnotationInterval(tier_name="sentence", t_start=0.5, t_end=2.25, text="kʷa")]

    def test_truncated_file(self, tmp_path):
        text = (FIXTURES / "sample_long.TextGrid").read_text(encoding="utf-8")
        path = tmp_path / "cut.TextGrid"
        path.write_text(text[: len(text) // 2], encoding="utf-8")
        with pytest.raises(ParseError):
            parse_textgrid(path)

    def test_reversed_interval_reports_line(self, tmp_path):
        path = tmp_path / "bad.TextGrid"
        path.write_text(short_grid([(0, 1, "a"), (3, 2, "b")]), encoding="utf-8")
        with pytest.raises(ParseError) as exc:
            parse_textgrid(path)
        assert exc.value.line == 16

    def test_reversed_grid_bounds(self, tmp_path):
        lines = short_grid([(0.5, 1.0, "a")]).split("\n")
        lines[3], lines[4] = "5", "1"
        path = tmp_path / "grid.TextGrid"
        path.write_text("\n".join(lines), encoding="utf-8")
        with pytest.raises(ParseError) as exc:
            parse_textgrid(path)
        assert exc.value.line == 4
        assert "grid xmin" in exc.value.message

    def test_reversed_tier_bounds(self, tmp_path):
        lines = short_grid([(0.5, 1.0, "a")]).split("\n")
        lines[9], lines[10] = "5", "1"
        path = tmp_path / "tier.TextGrid"
        path.write_text("\n".join(lines), encoding="utf-8")
        with pytest.raises(ParseError) as exc:
            parse_textgrid(path)
        assert exc.value.line == 10
        assert "tier 'sentence'" in exc.value.message

    def test_overlapping_intervals(self, tmp_path):
        path = tmp_path / "overlap.TextGrid"
        path.write_text(short_grid([(0, 2, "a"), (1, 3, "b")]), encoding="utf-8")
        with pytest.raises(ParseError):
            parse_textgrid(path)

    def test_zero_length_interval_skipped(self, tmp_path):
        path = tmp_path / "zero.TextGrid"
        path.write_text(short_grid([(0, 1, "a"), (1, 1, ""), (1, 2, "b")]), encoding="utf-8")
        assert [iv.text for iv in parse_textgrid(path)] == ["a", "b"]

    def test_not_a_textgrid(self, tmp_path):
        path = tmp_path / "pitch.TextGrid"
        path.write_text('File type = "ooTextFile"\nObject class = "Pitch 1"\n', encoding="utf-8")
        with pytest.raises(ParseError) as exc:
            parse_textgrid(path)
        assert exc.value.line == 2


class TestEaf:
    """ELAN EAF parsing"""

    def test_millisecond_conversion(self):
        intervals = parse_eaf(FIXTURES / "sample.eaf")
        assert [(iv.tier_name, iv.t_start, iv.t_end, iv.text) for iv in intervals] == [
            ("ipa", 0.0, 1.5, "kʷa qʼan"),
            ("ipa", 1.5, 2.25, ""),
            ("ipa", 2.25, 3.0, "ʃab"),
            ("translation", 0.0, 1.5, "the hand"),
        ]

    def test_dangling_slot_reference(self, tmp_path):
        text = (FIXTURES / "sample.eaf").read_text(encoding="utf-8").replace('TIME_SLOT_REF2="ts4"', 'TIME_SLOT_REF2="ts9"')
        path = tmp_path / "dangling.eaf"
        path.write_text(text, encoding="utf-8")
        with pytest.raises(ParseError) as exc:
            parse_eaf(path)
        assert "ts9" in exc.value.message

    def test_unaligned_slot(self, tmp_path):
        text = (FIXTURES / "sample.eaf").read_text(encoding="utf-8").replace(' TIME_VALUE="3000"', "")
        path = tmp_path / "unaligned.eaf"
        path.write_text(text, encoding="utf-8")
        with pytest.raises(ParseError):
            parse_eaf(path)

    def test_ref_annotations_inherit_parent_span(self, tmp_path):
        subdivided = (
            '<TIER LINGUISTIC_TYPE_REF="gloss-lt" PARENT_REF="translation" TIER_ID="gloss">\n'
            '<ANNOTATION><REF_ANNOTATION ANNOTATION_ID="a5" ANNOTATION_REF="a4">'
            "<ANNOTATION_VALUE>the</ANNOTATION_VALUE></REF_ANNOTATION></ANNOTATION>\n"
            '<ANNOTATION><REF_ANNOTATION ANNOTATION_ID="a6" ANNOTATION_REF="a4" PREVIOUS_ANNOTATION="a5">'
            "<ANNOTATION_VALUE>hand</ANNOTATION_VALUE></REF_ANNOTATION></ANNOTATION>\n"
            '<ANNOTATION><REF_ANNOTATION ANNOTATION_ID="a7" ANNOTATION_REF="a3">'
            "<ANNOTATION_VALUE>rope</ANNOTATION_VALUE></REF_ANNOTATION></ANNOTATION>\n"
            "</TIER>\n"
        )
        text = (FIXTURES / "sample.eaf").read_text(encoding="utf-8")
        text = text.replace("<LINGUISTIC_TYPE ", subdivided + "<LINGUISTIC_TYPE ", 1)
        path = tmp_path / "gloss.eaf"
        path.write_text(text, encoding="utf-8")
        gloss = [(iv.t_start, iv.t_end, iv.text) for iv in parse_eaf(path) if iv.tier_name == "gloss"]
        assert gloss == [(0.0, 1.5, "the hand"), (2.25, 3.0, "rope")]

    def test_unresolvable_ref_annotation(self, tmp_path):
        text = (FIXTURES / "sample.eaf").read_text(encoding="utf-8").replace('ANNOTATION_REF="a1"', 'ANNOTATION_REF="a9"')
        path = tmp_path / "orphan.eaf"
        path.write_text(text, encoding="utf-8")
        with pytest.raises(ParseError) as exc:
            parse_eaf(path)
        assert "a9" in exc.value.message

    def test_malformed_xml(self, tmp_path):
        path = tmp_path / "broken.eaf"
        path.write_text("<ANNOTATION_DOCUMENT><TIER></ANNOTATION_DOCUMENT>", encoding="utf-8")
        with pytest.raises(ParseError):
            parse_eaf(path)

    def test_dispatch_by_suffix(self, tmp_path):
        assert parse_annotation_file(FIXTURES / "sample.eaf") == parse_eaf(FIXTURES / "sample.eaf")
        path = tmp_path / "notes.txt"
        path.write_text("x", encoding="utf-8")
        with pytest.raises(ParseError):
            parse_annotation_file(path)


class TestNormalize:
    """Transcript normalization"""

    def test_romanized_letters(self, romanized):
        assert normalize("šab", [romanized]) == "ʃab"

    def test_pharyngealization_bar(self, romanized):
        assert normalize("q|a", [romanized]) == "qˤa"

    def test_clean_ipa_unchanged(self, romanized, cyrillic):
        assert normalize("kʷa qʼan", [cyrillic, romanized]) == "kʷa qʼan"

    def test_cyrillic_notation(self, cyrillic):
        assert normalize("кӏа", [cyrillic]) == "kʼa"

    def test_whitespace_and_strip_set(self):
        assert normalize("  kʷa,   qʼan. ", strip_chars=".,") == "kʷa qʼan"

    def test_decomposed_input_is_composed(self):
        assert normalize("á") == "á"

    def test_idempotent(self, romanized, cyrillic):
        tables = [cyrillic, romanized]
        for raw in ["šab q|a", "кӏа  хьи", "kʷa, qʼan!", "x̌ab", "  "]:
            once = normalize(raw, tables, IngestConfig().strip_chars)
            assert normalize(once, tables, IngestConfig().strip_chars) == once


class TestBuildManifest:
    """Manifest records and split assignment"""

    def test_five_percent_validation(self, archi):
        sources = [("rec_a.TextGrid", intervals_of(["kʷa qʼan"] * 100))]
        records, rejects = build_manifest(sources, archi)
        counts = Counter(r.split for r in records)

        assert rejects == []
        assert counts[Split.TRAIN] == 95
        assert counts[Split.VAL] == 5

    def test_split_is_seeded(self, archi):
        sources = [("rec_a.TextGrid", intervals_of(["kʷa"] * 100))]
        first, _ = build_manifest(sources, archi, config=IngestConfig(split_seed=3))
        second, _ = build_manifest(sources, archi, config=IngestConfig(split_seed=3))
        other, _ = build_manifest(sources, archi, config=IngestConfig(split_seed=4))

        assert [r.split for r in first] == [r.split for r in second]
        assert [r.id for r in first if r.split == Split.VAL] != [r.id for r in other if r.split == Split.VAL]

    def test_ids_count_empty_intervals(self, archi):
        sources = [("speaker1.TextGrid", intervals_of(["kʷa", "", "qʼan"]))]
        records, _ = build_manifest(sources, archi, config=IngestConfig(val_ratio=0.0))
        assert [r.id for r in records] == ["speaker1_0000", "speaker1_0002"]
        assert records[1].duration_s == pytest.approx(1.0)
        assert records[1].source_file == "speaker1.TextGrid"

    def test_test_pattern_on_file_name(self, archi):
        sources = [
            ("corpus/story_train.TextGrid", intervals_of(["kʷa"] * 3)),
            ("corpus/story_test.TextGrid", intervals_of(["qʼan"] * 2)),
        ]
        records, _ = build_manifest(sources, archi, config=IngestConfig(val_ratio=0.0))
        assert [r.split for r in records] == [Split.TRAIN] * 3 + [Split.TEST] * 2

    def test_rejects_are_reported(self, archi):
        sources = [("rec.TextGrid", intervals_of(["kʷa", "kʷa ы", "qʼan"]))]
        records, rejects = build_manifest(sources, archi)
        assert len(records) == 2
        assert len(rejects) == 1
        assert rejects[0].id == "rec_0001"
        assert rejects[0].raw == "kʷa ы"
        assert rejects[0].reason

    def test_tier_pattern(self, archi):
        intervals = intervals_of(["kʷa", "qʼan"], tier="ipa") + intervals_of(["hello"], tier="translation")
        records, rejects = build_manifest([("rec.eaf", intervals)], archi, config=IngestConfig(tier_pattern="^ipa$"))
        assert [r.tier for r in records] == ["ipa", "ipa"]
        assert rejects == []

    def test_empty_corpus(self, archi):
        with pytest.raises(EmptyCorpus):
            build_manifest([("rec.TextGrid", intervals_of(["", "  "]))], archi)
        with pytest.raises(EmptyCorpus):
            build_manifest([], archi)

    def test_cyrillic_rendering(self, archi, cyrillic):
        records, _ = build_manifest([("rec.TextGrid", intervals_of(["kʼa ħi"]))], archi, cyrillic_table=cyrillic)
        assert records[0].cyrillic == "кӏа хьи"

    def test_normalization_applied(self, archi, romanized):
        records, _ = build_manifest([("rec.TextGrid", intervals_of(["šab, q|a."]))], archi, tables=[romanized])
        assert records[0].ipa == "ʃab qˤa"

    def test_from_parsed_files(self, archi):
        sources = [(FIXTURES / "sample_long.TextGrid", parse_textgrid(FIXTURES / "sample_long.TextGrid"))]
        records, rejects = build_manifest(sources, archi, config=IngestConfig(tier_pattern="sentence", val_ratio=0.0))
        assert [r.id for r in records] == ["sample_long_0000", "sample_long_0002"]
        assert [r.ipa for r in records] == ["kʷa qʼan", "ʃab t͡ʃʼa"]
        assert rejects == []


class TestSummary:
    """Split-wise corpus statistics"""

    def test_matches_brute_force(self, archi):
        texts = ["kʷa qʼan", "ʃab t͡ʃʼa", "kʷa ʃab", "qʼːˤa aː", "t͡sʼʷi kʼʷa", "kʷa"] * 5
        records, _ = build_manifest([("rec.TextGrid", intervals_of(texts, step=6.0))], archi)
        rows = {row.split: row for row in summarize_corpus(records, archi)}

        for split in ["train", "val", "all"]:
            members = [r for r in records if split == "all" or r.split.value == split]
            words = {w for r in members for w in r.ipa.split()}
            phonemes = {archi.surfaces[i] for r in members for i in segment(r.ipa, archi) if i != archi.separator_index}
            composites = {p for p in phonemes if archi.phonemes[archi.index[p]].diacritics}
            row = rows[split]

            assert row.sentences == len(members)
            assert row.minutes == pytest.approx(len(members) * 6.0 / 60.0)
            assert row.unique_words == len(words)
            assert row.unique_phonemes == len(phonemes)
            assert row.composites == len(composites)
            assert row.composite_pct == pytest.approx(100.0 * len(composites) / len(phonemes))

    def test_missing_splits_omitted(self, archi):
        records, _ = build_manifest([("rec.TextGrid", intervals_of(["kʷa"]))], archi, config=IngestConfig(val_ratio=0.0))
        assert [row.split for row in summarize_corpus(records, archi)] == ["train", "all"]

"""
Tests for the ipa-asr command line
"""

import logging

import numpy as np
import pandas as pd
import pytest
from scipy.special import expit

from app.cli import main
from app.models.schemas import Split, UtteranceRecord
from app.services.decode_service import write_logits
from app.services.ipa_service import load_inventory, parse_inventory, segment
from app.services.persistence_service import read_hypotheses, read_manifest, write_manifest
from app.services.remap_service import WeightBundle, read_weights, write_weights

INVENTORY = "!blank <pad>\n!special <s>\n!special </s>\n!unk <unk>\n!sep |\na\ni\nk\nkʷ\nq\nqʼ\nn\n"


def grid_text(texts, step=1.0):
    total = step * len(texts)
    lines = ['File type = "ooTextFile"', 'Object class = "TextGrid"', "", "0", str(total), "<exists>", "1"]
    lines += ['"IntervalTier"', '"sentence"', "0", str(total), str(len(texts))]
    for i, text in enumerate(texts):
        lines += [str(i * step), str((i + 1) * step), f'"{text}"']
    return "\n".join(lines) + "\n"


def record(utt_id, ipa, split=Split.TEST):
    return UtteranceRecord(id=utt_id, ipa=ipa, split=split, duration_s=1.0, source_file="story.TextGrid")


def peaked_logits(targets, size, blank, peak=0.9):
    frames = []
    for token in targets:
        frames += [token, blank]
    probs = np.full((len(frames), size), (1.0 - peak) / (size - 1))
    probs[np.arange(len(frames)), frames] = peak
    return np.log(probs).astype(np.float32)


@pytest.fixture(autouse=True)
def reset_logging():
    """main() points the root handler at the captured stderr of the current test."""
    yield
    logging.getLogger().handlers.clear()


@pytest.fixture
def workspace(tmp_path):
    inventory = tmp_path / "inventory.txt"
    inventory.write_text(INVENTORY, encoding="utf-8")
    manifest = tmp_path / "manifest.jsonl"
    write_manifest(
        [record("u1", "kʷa qʼan"), record("u2", "kan ni"), record("u3", "qa nik", split=Split.TRAIN)],
        manifest,
    )
    return tmp_path, inventory, manifest


class TestExitCodes:
    """Exit code mapping of main()"""

    def test_missing_subcommand_is_usage_error(self, capsys):
        assert main([]) == 1
        assert capsys.readouterr().err.startswith("error:")

    def test_unknown_option_is_usage_error(self):
        assert main(["vocab", "--manifest", "m", "--out", "o", "--bogus"]) == 1

    def test_invalid_log_level(self, workspace):
        root, _, manifest = workspace
        assert main(["--log-level", "verbose", "vocab", "--manifest", str(manifest), "--out", str(root / "v")]) == 1

    def test_missing_input_file(self, workspace, capsys):
        root, inventory, _ = workspace
        code = main(
            ["score", "--manifest", str(root / "absent.jsonl"), "--inventory", str(inventory), "--hyp", "h.tsv"]
        )
        assert code == 1
        assert "manifest not found" in capsys.readouterr().err

    def test_out_of_range_config_value(self, workspace):
        root, inventory, _ = workspace
        (root / "story.TextGrid").write_text(grid_text(["ka"]), encoding="utf-8")
        args = ["ingest", str(root / "story.TextGrid"), "--inventory", str(inventory), "--out", str(root / "m.jsonl")]
        assert main(args + ["--val-ratio", "2"]) == 1

    def test_empty_corpus_is_data_error(self, workspace, capsys):
        root, inventory, _ = workspace
        (root / "story.TextGrid").write_text(grid_text(["", ""]), encoding="utf-8")
        args = ["ingest", str(root / "story.TextGrid"), "--inventory", str(inventory), "--out", str(root / "m.jsonl")]
        assert main(args) == 2
        assert "No usable data" in capsys.readouterr().err

    def test_unexpected_failure_is_internal_error(self, workspace, monkeypatch, capsys):
        root, _, manifest = workspace

        def explode(*args, **kwargs):
            raise RuntimeError("boom")

        monkeypatch.setattr("app.services.pipeline_service.build_vocab", explode)
        assert main(["vocab", "--manifest", str(manifest), "--out", str(root / "vocab.txt")]) == 3
        assert "boom" in capsys.readouterr().err


class TestIngest:
    """ingest subcommand with config files"""

    def test_config_file_and_flag_override(self, workspace):
        root, inventory, _ = workspace
        (root / "speaker.TextGrid").write_text(grid_text(["ka", "ki", "na", "ni"]), encoding="utf-8")
        config = root / "run.toml"
        config.write_text('val_ratio = 0.5\ntest_pattern = "zzz"\n', encoding="utf-8")
        base = ["--config", str(config), "ingest", str(root / "speaker.TextGrid"), "--inventory", str(inventory)]

        assert main(base + ["--out", str(root / "a.jsonl")]) == 0
        splits = [r.split for r in read_manifest(root / "a.jsonl")]
        assert splits.count(Split.VAL) == 2
        assert splits.count(Split.TRAIN) == 2

        assert main(base + ["--out", str(root / "b.jsonl"), "--val-ratio", "0"]) == 0
        assert {r.split for r in read_manifest(root / "b.jsonl")} == {Split.TRAIN}

    def test_nested_config_rejected(self, workspace):
        root, inventory, _ = workspace
        (root / "story.TextGrid").write_text(grid_text(["ka"]), encoding="utf-8")
        config = root / "run.toml"
        config.write_text("[ingest]\nval_ratio = 0.5\n", encoding="utf-8")
        args = ["--config", str(config), "ingest", str(root / "story.TextGrid"), "--inventory", str(inventory)]
        assert main(args + ["--out", str(root / "m.jsonl")]) == 2


class TestScore:
    """score subcommand"""

    def test_perfect_hypotheses(self, workspace, capsys):
        root, inventory, manifest = workspace
        for name in ("greedy", "beam"):
            (root / f"{name}.tsv").write_text("u1\tkʷa qʼan\nu2\tkan ni\n", encoding="utf-8")
        reports = root / "reports"
        args = ["score", "--manifest", str(manifest), "--inventory", str(inventory), "--report-dir", str(reports)]
        assert main(args + ["--hyp", str(root / "greedy.tsv"), "--hyp", str(root / "beam.tsv")]) == 0

        out = capsys.readouterr().out
        assert "PER   0.00%" in out
        assert "WER   0.00%" in out

        phonemes = pd.read_csv(reports / "phonemes.csv")
        assert (phonemes.loc[phonemes["test_freq"] > 0, "f1"] == 1.0).all()
        wilcoxon = pd.read_csv(reports / "wilcoxon.csv", index_col="model")
        assert list(wilcoxon.columns) == ["greedy", "beam"]
        assert (wilcoxon.to_numpy() == 1.0).all()

    def test_id_mismatch(self, workspace, capsys):
        root, inventory, manifest = workspace
        (root / "hyp.tsv").write_text("u1\tkʷa qʼan\nu2\tkan ni\nu9\tka\n", encoding="utf-8")
        args = ["score", "--manifest", str(manifest), "--inventory", str(inventory), "--hyp", str(root / "hyp.tsv")]
        assert main(args + ["--report-dir", str(root / "reports")]) == 2
        assert "0 missing, 1 unexpected" in capsys.readouterr().err

    def test_malformed_hypothesis_file(self, workspace):
        root, inventory, manifest = workspace
        (root / "hyp.tsv").write_text("u1 kʷa\n", encoding="utf-8")
        args = ["score", "--manifest", str(manifest), "--inventory", str(inventory), "--hyp", str(root / "hyp.tsv")]
        assert main(args + ["--report-dir", str(root / "reports")]) == 2


class TestDecode:
    """decode subcommand"""

    @pytest.fixture
    def logits_dir(self, workspace):
        root, inventory, _ = workspace
        inv = load_inventory(inventory)
        directory = root / "logits"
        directory.mkdir()
        write_logits(directory / "u1.ctl", peaked_logits(segment("kʷa qʼan", inv), len(inv), inv.blank_index))
        return directory

    def test_missing_logits(self, workspace, logits_dir, capsys):
        root, inventory, manifest = workspace
        args = ["decode", "--manifest", str(manifest), "--inventory", str(inventory), "--logits-dir", str(logits_dir)]
        assert main(args + ["--out", str(root / "hyp.tsv")]) == 2
        assert "u2" in capsys.readouterr().err

    def test_allow_missing(self, workspace, logits_dir):
        root, inventory, manifest = workspace
        args = ["decode", "--manifest", str(manifest), "--inventory", str(inventory), "--logits-dir", str(logits_dir)]
        assert main(args + ["--out", str(root / "hyp.tsv"), "--allow-missing"]) == 0
        assert read_hypotheses(root / "hyp.tsv") == {"u1": "kʷa qʼan"}

    def test_neutral_lm_weights_match_plain_search(self, workspace, logits_dir):
        root, inventory, manifest = workspace
        args = ["decode", "--manifest", str(manifest), "--inventory", str(inventory), "--logits-dir", str(logits_dir)]
        args += ["--allow-missing", "--nbest", "3"]
        assert main(args + ["--out", str(root / "plain.tsv"), "--nbest-out", str(root / "plain_nbest.tsv")]) == 0
        lm_args = ["--train-lm", "--alpha", "0", "--beta", "0", "--save-lm", str(root / "lm.arpa")]
        assert main(args + lm_args + ["--out", str(root / "lm.tsv"), "--nbest-out", str(root / "lm_nbest.tsv")]) == 0

        assert (root / "lm.tsv").read_bytes() == (root / "plain.tsv").read_bytes()
        plain = pd.read_csv(root / "plain_nbest.tsv", sep="\t")
        fused = pd.read_csv(root / "lm_nbest.tsv", sep="\t")
        assert list(fused["text"]) == list(plain["text"])
        assert np.allclose(fused["score"], plain["score"])
        assert (root / "lm.arpa").read_text(encoding="utf-8").startswith("\\data\\")


class TestVocabAndRemap:
    """vocab and remap subcommands"""

    OLD_INVENTORY = "!blank <pad>\n!special <s>\n!special </s>\n!unk <unk>\n!sep |\na\ni\nk\nq\nn\nʷ\nʼ\n"

    @pytest.fixture
    def vocab_file(self, tmp_path, capsys):
        manifest = tmp_path / "train.jsonl"
        write_manifest(
            [record("t1", "kʷa qʼan", split=Split.TRAIN), record("t2", "kan ni", split=Split.TRAIN), record("u1", "qi")],
            manifest,
        )
        vocab = tmp_path / "vocab.txt"
        assert main(["vocab", "--manifest", str(manifest), "--out", str(vocab), "--language", "demo"]) == 0
        assert "Wrote 11 vocabulary entries" in capsys.readouterr().out
        return vocab

    @pytest.fixture
    def old_weights(self, tmp_path):
        old_inv = parse_inventory(self.OLD_INVENTORY, language="pretrained")
        rng = np.random.default_rng(3)
        bundle = WeightBundle(
            W=rng.normal(size=(4, len(old_inv))).astype(np.float32),
            b=rng.normal(size=len(old_inv)).astype(np.float32),
            vocab=old_inv,
        )
        path = tmp_path / "old.wgt"
        write_weights(bundle, path)
        return bundle, path

    def remap(self, tmp_path, old_path, vocab, mode, *extra):
        out = tmp_path / f"{mode}.wgt"
        table = tmp_path / f"{mode}.csv"
        args = ["remap", "--mode", mode, "--old", str(old_path), "--new-vocab", str(vocab), "--out", str(out)]
        assert main(args + ["--table-out", str(table), *extra]) == 0
        return read_weights(out), pd.read_csv(table)

    def test_vocab_from_train_split(self, vocab_file):
        inv = load_inventory(vocab_file)
        assert inv.surfaces == ["<pad>", "<s>", "</s>", "<unk>", "|", "a", "n", "i", "k", "kʷ", "qʼ"]
        assert inv.language == "demo"

    def test_avg_and_cpy1_differ_only_on_multi_component_columns(self, tmp_path, vocab_file, old_weights):
        old, old_path = old_weights
        avg, table = self.remap(tmp_path, old_path, vocab_file, "avg")
        cpy1, _ = self.remap(tmp_path, old_path, vocab_file, "cpy1")

        multi = table.loc[table["k"] > 1, "index"].tolist()
        single = table.loc[table["k"] == 1, "index"].tolist()
        assert sorted(table.loc[table["k"] > 1, "surface"]) == ["kʷ", "qʼ"]
        assert np.array_equal(avg.W[:, single], cpy1.W[:, single])
        assert np.array_equal(avg.b[single], cpy1.b[single])

        for _, row in table[table["k"] > 1].iterrows():
            parts = [old.vocab.index[p] for p in row["components"].split(" + ")]
            i = int(row["index"])
            assert np.allclose(avg.W[:, i], old.W[:, parts].mean(axis=1), atol=1e-6)
            assert np.array_equal(cpy1.W[:, i], old.W[:, parts[0]])
            assert not np.allclose(avg.W[:, i], cpy1.W[:, i])
        assert len(multi) == 2

    def test_random_mode_is_seeded(self, tmp_path, vocab_file, old_weights):
        _, old_path = old_weights
        for name in ("first", "second"):
            args = ["remap", "--mode", "random", "--old", str(old_path), "--new-vocab", str(vocab_file)]
            assert main(args + ["--out", str(tmp_path / f"{name}.wgt"), "--seed", "5"]) == 0
        assert (tmp_path / "first.wgt").read_bytes() == (tmp_path / "second.wgt").read_bytes()

    def test_old_flag_names_rejected(self, tmp_path, vocab_file, old_weights):
        _, old_path = old_weights
        args = ["remap", "--weights", str(old_path), "--vocab", str(vocab_file), "--out", str(tmp_path / "x.wgt")]
        assert main(args) == 1


class TestAnalyze:
    """analyze subcommand"""

    def test_recovers_logistic_curve(self, tmp_path, capsys):
        L, k, x0 = 0.9, 2.5, 1.8
        train = np.round(10 ** np.linspace(0.0, 3.5, 15)).astype(int)
        surfaces = list("abcdefghijklmno")
        f1 = L * expit(k * (np.log10(train) - x0))
        report = pd.DataFrame(
            {
                "surface": surfaces + ["p"],
                "N": 10,
                "S": 0,
                "I": 0,
                "D": 0,
                "f1": list(f1) + [0.0],
                "train_freq": list(train) + [0],
                "test_freq": 50,
            }
        )
        report.to_csv(tmp_path / "phonemes.csv", index=False)
        reports = tmp_path / "reports"

        args = ["analyze", "--report", str(tmp_path / "phonemes.csv"), "--report-dir", str(reports)]
        assert main(args + ["--svg", str(reports / "fit.svg")]) == 0

        fit = pd.read_csv(reports / "fit.csv").iloc[0]
        assert fit["L"] == pytest.approx(L, abs=1e-3)
        assert fit["k"] == pytest.approx(k, abs=1e-3)
        assert fit["x0"] == pytest.approx(x0, abs=1e-3)
        assert fit["n_points"] == 15
        assert "Low-support phonemes:" in capsys.readouterr().out

        excluded = pd.read_csv(reports / "excluded.csv")
        assert list(excluded["surface"]) == ["p"]
        assert excluded.loc[0, "reason"] == "zero train frequency"
        assert "phoneme-points" in (reports / "fit.svg").read_text(encoding="utf-8")
        assert len(pd.read_csv(reports / "points.csv")) == 15

    def test_weight_by_test_freq_flag(self, tmp_path):
        train = np.round(10 ** np.linspace(0.0, 3.0, 8)).astype(int)
        report = pd.DataFrame(
            {
                "surface": list("abcdefgh"),
                "N": 10,
                "S": 0,
                "I": 0,
                "D": 0,
                "f1": 0.8 * expit(2.0 * (np.log10(train) - 1.5)),
                "train_freq": train,
                "test_freq": np.arange(1, 9) * 7,
            }
        )
        report.to_csv(tmp_path / "phonemes.csv", index=False)
        args = ["analyze", "--report", str(tmp_path / "phonemes.csv"), "--report-dir", str(tmp_path / "reports")]

        assert main(args + ["--weight-by-test-freq"]) == 0
        fit = pd.read_csv(tmp_path / "reports" / "fit.csv").iloc[0]
        assert fit["k"] == pytest.approx(2.0, abs=1e-4)
        assert fit["x0"] == pytest.approx(1.5, abs=1e-4)
        assert main(args + ["--weighted"]) == 1

    def test_too_few_points(self, tmp_path):
        report = pd.DataFrame(
            {"surface": ["a", "b"], "N": 1, "S": 0, "I": 0, "D": 0, "f1": [0.5, 0.7], "train_freq": [3, 30], "test_freq": 5}
        )
        report.to_csv(tmp_path / "phonemes.csv", index=False)
        args = ["analyze", "--report", str(tmp_path / "phonemes.csv"), "--report-dir", str(tmp_path / "reports")]
        assert main(args) == 2

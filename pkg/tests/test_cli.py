import numpy as np
import pytest

from helpers import make_corpus, tiny_model

from tinyqat import cli
from tinyqat.checkpoint import load_checkpoint, save_checkpoint
from tinyqat.cli import EOS_ID, VOCAB_SIZE, detokenize, main, tokenize
from tinyqat.datagen import read_dataset
from tinyqat.errors import CheckpointError, InputError
from tinyqat.quant import QuantScheme, rtn_apply


class TestTokenizer:
    def test_vocab_constants(self):
        assert VOCAB_SIZE == 96
        assert EOS_ID == 95

    def test_ascii_mapping(self):
        ids = tokenize("Ab z~")
        # 'A'=0x41 -> 33, 'b'=0x62 -> 66, ' ' -> 0, 'z' -> 90, '~' -> 94
        assert ids.tolist() == [33, 66, 0, 90, 94, EOS_ID]

    def test_documents_end_with_eos(self):
        ids = tokenize("one\n\ntwo")
        assert ids.tolist().count(EOS_ID) == 2
        assert ids[-1] == EOS_ID

    def test_newlines_become_spaces(self):
        assert tokenize("a\nb").tolist() == tokenize("a b").tolist()

    def test_non_ascii_dropped(self):
        assert tokenize("aéb").tolist() == tokenize("ab").tolist()

    def test_roundtrip_printable(self):
        text = "Hello, world! 0123 #$%"
        ids = tokenize(text)
        assert detokenize(ids[:-1]) == text

    def test_empty_rejected(self):
        with pytest.raises(InputError):
            tokenize("éé")


class TestCheckpoint:
    def test_roundtrip_values_and_metadata(self, tmp_path):
        m = tiny_model(seed=1)
        m.trained_scheme = "4-8-8"
        m.smoothing["head"] = np.linspace(0.5, 2.0, m.cfg.dim)
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(m, path)
        back = load_checkpoint(path)
        assert back.cfg == m.cfg
        assert back.trained_scheme == "4-8-8"
        for name in m.params:
            np.testing.assert_array_equal(
                back.params[name].value.data,
                m.params[name].value.data.astype(np.float32))
        np.testing.assert_allclose(back.smoothing["head"],
                                   m.smoothing["head"].astype(np.float32))

    def test_save_load_save_byte_identical(self, tmp_path):
        m = tiny_model(seed=2)
        a, b = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        save_checkpoint(m, a)
        save_checkpoint(load_checkpoint(a), b)
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_loaded_model_is_trainable(self, tmp_path):
        m = tiny_model(seed=3)
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(m, path)
        back = load_checkpoint(path)
        back.params["head"].value.data += 1.0  # must be writable

    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "x.ckpt")
        open(path, "wb").write(b"NOPE" + bytes(32))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncation_names_field(self, tmp_path):
        m = tiny_model(seed=4)
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(m, path)
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[: len(raw) - 10])
        with pytest.raises(CheckpointError, match="truncated.*data"):
            load_checkpoint(path)

    def test_unknown_version(self, tmp_path):
        m = tiny_model(seed=5)
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(m, path)
        raw = bytearray(open(path, "rb").read())
        raw[4] = 9
        open(path, "wb").write(bytes(raw))
        with pytest.raises(CheckpointError, match="version 9"):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="cannot read"):
            load_checkpoint(str(tmp_path / "absent.ckpt"))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One small teacher checkpoint shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus.txt"
    corpus.write_text(make_corpus(30_000, seed=5))
    ckpt = root / "teacher.ckpt"
    rc = main(["teacher-train", "--corpus", str(corpus), "--out", str(ckpt),
               "--steps", "20", "--dim", "16", "--n-layers", "2", "--n-heads", "2",
               "--ffn-hidden", "24", "--max-seq-len", "32", "--seq", "16",
               "--batch", "2"])
    assert rc == 0
    return root, ckpt, corpus


class TestCommands:
    def test_kv_mem_prints_table_value(self, capsys):
        assert main(["kv-mem", "--preset", "llama-7b", "--seq", "1024",
                     "--bits", "16"]) == 0
        assert capsys.readouterr().out.strip() == "0.25 GB"

    def test_kv_mem_pair_mode(self, capsys):
        assert main(["kv-mem", "--preset", "llama-7b", "--seq", "1024",
                     "--bits", "16", "--pair"]) == 0
        assert capsys.readouterr().out.strip() == "0.50 GB"

    def test_gen_data_deterministic(self, trained, tmp_path, capsys):
        _, ckpt, _ = trained
        outs = [str(tmp_path / f"d{i}.bin") for i in (0, 1)]
        for out in outs:
            assert main(["gen-data", "--ckpt", str(ckpt), "--out", out,
                         "--count", "6", "--seed", "3", "--max-len", "12"]) == 0
        assert open(outs[0], "rb").read() == open(outs[1], "rb").read()
        vocab, recs = read_dataset(outs[0])
        assert vocab == 96 and len(recs) == 6

    def test_ptq_then_eval(self, trained, tmp_path, capsys):
        root, ckpt, corpus = trained
        out = str(tmp_path / "rtn.ckpt")
        assert main(["ptq", "--ckpt", str(ckpt), "--scheme", "4-8-8",
                     "--out", out]) == 0
        m = load_checkpoint(out)
        assert m.trained_scheme == "4-8-8"
        assert main(["eval", "--ckpt", out, "--corpus", str(corpus),
                     "--method", "rtn"]) == 0
        line = capsys.readouterr().out.strip().splitlines()[-1]
        assert line.startswith("rtn,4-8-8,")

    def test_ptq_identity_is_noop(self, trained, tmp_path):
        _, ckpt, _ = trained
        out = str(tmp_path / "id.ckpt")
        assert main(["ptq", "--ckpt", str(ckpt), "--scheme", "16-16-16",
                     "--out", out]) == 0
        a, b = load_checkpoint(str(ckpt)), load_checkpoint(out)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].value.data,
                                          b.params[name].value.data)

    def test_ptq_smooth_requires_calib(self, trained, tmp_path):
        _, ckpt, _ = trained
        rc = main(["ptq", "--ckpt", str(ckpt), "--scheme", "8-8-8",
                   "--out", str(tmp_path / "s.ckpt"), "--smooth"])
        assert rc == 1

    def test_ptq_smooth_preserves_fp_outputs(self, trained, tmp_path):
        root, ckpt, corpus = trained
        out = str(tmp_path / "s.ckpt")
        assert main(["ptq", "--ckpt", str(ckpt), "--scheme", "16-16-16",
                     "--out", out, "--smooth", "--calib", str(corpus)]) == 0
        plain = load_checkpoint(str(ckpt))
        smoothed = load_checkpoint(out)
        assert smoothed.smoothing
        toks = tokenize(make_corpus(2_000, seed=6))[:12]
        a = plain.forward_train(toks, "16-16-16").data
        b = smoothed.forward_train(toks, "16-16-16").data
        np.testing.assert_allclose(a, b, atol=1e-4)  # f32 checkpoint precision

    def test_qat_runs_and_saves(self, trained, tmp_path, capsys):
        _, ckpt, _ = trained
        data = str(tmp_path / "d.bin")
        assert main(["gen-data", "--ckpt", str(ckpt), "--out", data,
                     "--count", "4", "--seed", "1", "--max-len", "10"]) == 0
        out = str(tmp_path / "qat.ckpt")
        metrics = str(tmp_path / "m.csv")
        assert main(["qat", "--teacher", str(ckpt), "--data", data,
                     "--scheme", "4-8-8", "--out", out, "--seed", "0",
                     "--steps", "3", "--lr", "1e-4", "--metrics", metrics]) == 0
        assert load_checkpoint(out).trained_scheme == "4-8-8"
        lines = open(metrics).read().splitlines()
        assert lines[0] == "step,lr,loss,loss_variant,scheme"
        assert len(lines) == 4

    def test_eval_appends_csv(self, trained, tmp_path, capsys):
        _, ckpt, corpus = trained
        out = str(tmp_path / "rows.csv")
        for _ in range(2):
            assert main(["eval", "--ckpt", str(ckpt), "--corpus", str(corpus),
                         "--scheme", "16-16-16", "--out", out]) == 0
        lines = open(out).read().splitlines()
        assert lines[0] == "method,scheme,corpus,ppl,acc,tokens"
        assert len(lines) == 3

    def test_report_renders_markdown(self, trained, tmp_path, capsys):
        _, ckpt, corpus = trained
        rows = str(tmp_path / "rows.csv")
        assert main(["eval", "--ckpt", str(ckpt), "--corpus", str(corpus),
                     "--scheme", "16-16-16", "--out", rows]) == 0
        capsys.readouterr()
        assert main(["report", "--input", rows]) == 0
        out = capsys.readouterr().out
        assert out.startswith("| method | scheme |")
        assert "**" in out


class TestConfigPrecedence:
    def test_defaults_then_file_then_flags(self, trained, tmp_path):
        _, ckpt, _ = trained
        cfg = tmp_path / "gen.cfg"
        cfg.write_text("count=5\nmax_len=8\n")
        out = str(tmp_path / "d.bin")
        # count from file, max_len overridden by flag
        assert main(["gen-data", "--ckpt", str(ckpt), "--out", out, "--seed", "2",
                     "--config", str(cfg), "--max-len", "6"]) == 0
        _, recs = read_dataset(out)
        assert len(recs) == 5
        assert max(len(r) for r in recs) <= 6

    def test_unknown_config_key_exits_1(self, trained, tmp_path):
        _, ckpt, _ = trained
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("no_such_key=1\n")
        rc = main(["gen-data", "--ckpt", str(ckpt), "--out",
                   str(tmp_path / "d.bin"), "--seed", "2", "--config", str(cfg)])
        assert rc == 1

    def test_comments_and_blanks_ignored(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("# comment\n\ncount=3\n")
        assert cli._load_config_file(str(cfg)) == {"count": "3"}


class TestExitCodes:
    def test_missing_checkpoint_exits_2(self, tmp_path):
        rc = main(["eval", "--ckpt", str(tmp_path / "no.ckpt"),
                   "--corpus", str(tmp_path / "no.txt")])
        assert rc == 2

    def test_bad_scheme_exits_1(self, trained, tmp_path):
        _, ckpt, _ = trained
        rc = main(["ptq", "--ckpt", str(ckpt), "--scheme", "9-9-9",
                   "--out", str(tmp_path / "x.ckpt")])
        assert rc == 1

    def test_usage_error_exits_1(self):
        assert main(["kv-mem", "--preset", "llama-7b"]) == 1

    def test_missing_corpus_exits_2(self, trained, tmp_path):
        _, ckpt, _ = trained
        rc = main(["eval", "--ckpt", str(ckpt),
                   "--corpus", str(tmp_path / "absent.txt")])
        assert rc == 2

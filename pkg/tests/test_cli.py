import pytest

from momlm import __version__
from momlm.cli import main

TINY_CONFIG = """\
d_model = 16
n_heads = 2
d_ff = 32
max_len = 16
vocab_size = 128
layers = 3
plan = [1-2]
mom = K2H2S
seq_len = 16
batch_size = 2
steps = 4
phase2_steps = 3
eval_interval = 2
eval_batches = 1
val_fraction = 0.05
corpus = corpus.txt
out_dir = out
"""


@pytest.fixture
def run_dir(tmp_path):
    sentence = b"a small corpus of plain ascii text for routing experiments. "
    tmp_path.joinpath("corpus.txt").write_bytes(sentence * 50)
    tmp_path.joinpath("run.conf").write_text(TINY_CONFIG)
    return tmp_path


def exit_code(args):
    with pytest.raises(SystemExit) as info:
        main(args)
    return info.value.code


def test_version(capsys):
    assert exit_code(["--version"]) == 0
    assert capsys.readouterr().out.strip() == f"momlm {__version__}"


def test_list_presets(capsys):
    assert exit_code(["-lp"]) == 0
    out = capsys.readouterr().out
    assert "MoM_P = K2H6S" in out
    assert "gpt2-small plan [1-1-4-1-4-1]" in out


class TestUsage:
    def test_subcommand_required(self, capsys):
        assert exit_code([]) == 1
        assert "usage: momlm" in capsys.readouterr().err

    def test_phase_two_needs_checkpoint(self, capsys, run_dir):
        assert exit_code(["train", "-c", str(run_dir / "run.conf"), "--phase", "2"]) == 1
        assert "--phase 2 requires --init-from" in capsys.readouterr().err

    def test_init_from_needs_phase_two(self, capsys, run_dir):
        code = exit_code(
            ["train", "-c", str(run_dir / "run.conf"), "--init-from", "x.ckpt"]
        )
        assert code == 1
        assert "only valid with --phase 2" in capsys.readouterr().err

    def test_scratch_only_in_phase_one(self, run_dir):
        args = ["train", "-c", str(run_dir / "run.conf"), "--phase", "2"]
        assert exit_code([*args, "--init-from", "x.ckpt", "--mom-from-scratch"]) == 1

    def test_unknown_router(self):
        assert exit_code(["profile", "--router", "lstm"]) == 1


class TestProfile:
    def test_table_against_baseline(self, capsys):
        main(
            [
                "profile",
                "--dims",
                "gpt2-small",
                "--mom",
                "K1H4",
                "--mom",
                "K3H1S",
                "--baseline",
                "K1H4",
            ]
        )
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].startswith("dims gpt2-small plan [1-1-4-1-4-1]")
        assert lines[0].endswith("baseline K1H4")
        row = next(line for line in lines if line.startswith("K3H1S"))
        assert "(-18.4%)" in row
        assert "(+0.0%)" in row

    def test_csv(self, tmp_path, capsys):
        out = tmp_path / "report.csv"
        main(["profile", "--mom", "MoM_E", "--mom", "MoM_P", "--csv", str(out)])
        lines = out.read_text().splitlines()
        assert lines[0] == "config,params,flops,weight_bytes,act_bytes"
        assert [line.split(",")[0] for line in lines[1:]] == ["K3H1S", "K2H6S"]

    def test_expected_assumption(self, capsys):
        main(["profile", "--assume", "expected:0.25"])
        assert "assume expected:0.25" in capsys.readouterr().out

    def test_custom_dims_need_plan(self, capsys):
        dims = "d_model=8,n_heads=2,d_ff=16,vocab_size=11,max_len=8,layers=3"
        assert exit_code(["profile", "--dims", dims]) == 2
        assert "--plan is required" in capsys.readouterr().err
        main(["profile", "--dims", dims, "--plan", "[1-2]"])

    def test_bad_mom(self, capsys):
        assert exit_code(["profile", "--mom", "K2X"]) == 2
        assert "momlm: error: expected 'H'" in capsys.readouterr().err


class TestPipeline:
    def test_two_phases_trace_and_analyze(self, run_dir, capsys):
        config = str(run_dir / "run.conf")
        out = run_dir / "out"

        main(["train", "-c", config])
        printed = capsys.readouterr().out
        assert "phase 1 final val_loss=" in printed
        assert (out / "phase1_final.ckpt").is_file()
        assert len((out / "metrics.log").read_text().splitlines()) == 4

        main(["train", "-c", config, "--phase", "2", "--init-from", str(out / "phase1_final.ckpt")])
        printed = capsys.readouterr().out
        assert "phase 2 final val_loss=" in printed
        lines = (out / "metrics.log").read_text().splitlines()
        assert len(lines) == 7
        assert all(" phase=2 " in line for line in lines[4:])

        text = run_dir / "input.txt"
        text.write_bytes(b"routing decisions for forty bytes of text")
        trace = run_dir / "trace.csv"
        main(["trace", "--ckpt", str(out / "phase2_final.ckpt"), "--input", str(text), "--out", str(trace)])
        assert f"for {len(text.read_bytes())} tokens" in capsys.readouterr().out
        assert trace.read_text().startswith("seq,chunk,pos,step,kind,pool,indices,gates")

        main(["analyze", "--trace", str(trace), "--out-dir", str(run_dir / "analysis")])
        printed = capsys.readouterr().out.splitlines()
        assert printed[0].startswith("A: skip_rate=")
        assert printed[1].startswith("F: skip_rate=")
        assert (run_dir / "analysis" / "transitions.csv").is_file()
        assert (run_dir / "analysis" / "loads.csv").is_file()

        # the decomposed model is not vanilla, so it cannot seed phase 2
        args = ["train", "-c", config, "--phase", "2", "--init-from", str(out / "phase2_final.ckpt")]
        assert exit_code(args) == 2

    def test_phase_one_is_repeatable(self, run_dir, capsys):
        config = str(run_dir / "run.conf")
        main(["train", "-c", config, "-v"])
        first = (run_dir / "out" / "metrics.log").read_text()
        main(["train", "-c", config])
        assert (run_dir / "out" / "metrics.log").read_text() == first

    def test_mom_from_scratch(self, run_dir, capsys):
        main(["train", "-c", str(run_dir / "run.conf"), "--mom-from-scratch"])
        assert (run_dir / "out" / "phase1_final.ckpt").is_file()


class TestFailures:
    def test_missing_config(self, tmp_path, capsys):
        assert exit_code(["train", "-c", str(tmp_path / "nope.conf")]) == 2
        assert "cannot read config" in capsys.readouterr().err

    @pytest.mark.parametrize(("line", "value"), [("plan = [1-2]", "plan = [1-?]"), ("mom = K2H2S", "mom = K2H")])
    def test_unparsable_layout_in_file(self, run_dir, capsys, line, value):
        path = run_dir / "run.conf"
        path.write_text(TINY_CONFIG.replace(line, value))
        assert exit_code(["train", "-c", str(path)]) == 2
        assert "plan or mom" in capsys.readouterr().err

    def test_trace_vocab_overflow(self, run_dir, capsys):
        main(["train", "-c", str(run_dir / "run.conf")])
        text = run_dir / "wide.txt"
        text.write_bytes(bytes([200, 201]))
        args = [
            "trace",
            "--ckpt",
            str(run_dir / "out" / "phase1_final.ckpt"),
            "--input",
            str(text),
            "--out",
            str(run_dir / "t.csv"),
        ]
        assert exit_code(args) == 3
        assert "overflows vocab of 128" in capsys.readouterr().err

    def test_analyze_empty_trace(self, tmp_path, capsys):
        empty = tmp_path / "empty.csv"
        empty.write_text("")
        assert exit_code(["analyze", "--trace", str(empty)]) == 3

    def test_missing_checkpoint(self, tmp_path):
        args = ["trace", "--ckpt", str(tmp_path / "x.ckpt"), "--input", str(tmp_path), "--out", "t.csv"]
        assert exit_code(args) == 3

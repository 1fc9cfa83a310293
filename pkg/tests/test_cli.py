import json
import os
from pathlib import Path

import jsonschema
import pytest

from proxylesskd.cli import main
from proxylesskd.config import parse_config_text
from proxylesskd.model import load_checkpoint
from proxylesskd.runner import emit_plot_data, plot_file_names, run_experiment, without_timing

SCHEMA = json.loads((Path(__file__).resolve().parents[1] / "docs" / "metrics.schema.json").read_text())

TINY = """
[data]
source = synthetic
classes = 5
per_class = 12
d_in = 6
kappa = 20
genuine_per_class = 3
impostor_pairs = 40
distractors = 3

[teacher]
hidden = 16
embed_dim = 4
epochs = 2
batch_size = 8
s = 16
lr0 = 0.05

[student]
hidden = 8
epochs = 2
batch_size = 8
s = 16

[distill]
s = 16
margins = 0.2, 0.5

[run]
seeds = 0, 1
"""


def files_under(root):
    return sorted(str(p.relative_to(root)) for p in Path(root).rglob("*") if p.is_file())


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    doc = run_experiment(parse_config_text(TINY), str(out))
    return doc, out


class TestRunner:
    def test_schema_valid(self, tiny_run):
        doc, out = tiny_run
        jsonschema.validate(doc, SCHEMA)
        jsonschema.validate(json.loads((out / "metrics.json").read_text()), SCHEMA)

    def test_three_method_sections(self, tiny_run):
        doc, _ = tiny_run
        for run in doc["runs"]:
            assert set(run["methods"]) == {"proxyless", "l2kd", "scratch"}
            for entry in run["methods"].values():
                assert entry["single"]["mode"] == "single" and entry["multiple"]["mode"] == "multiple"

    def test_manifest_lists_every_file(self, tiny_run):
        doc, out = tiny_run
        assert doc["manifest"] == files_under(out)

    def test_documented_plot_files(self, tiny_run):
        doc, out = tiny_run
        names = plot_file_names(doc)
        assert sorted(names) == [f for f in files_under(out) if f.startswith("plots/")]
        # teacher + 3 methods x 2 modes, intra and inter, per seed; plus two sweep files
        assert len(names) == 2 * (1 + 3 * 2) * 2 + 2

    def test_histogram_counts_are_conserved(self, tiny_run):
        doc, out = tiny_run
        ds = doc["runs"][0]["dataset"]
        held = ds["gallery"] + ds["probe"]
        per_class = held // ds["classes"]
        intra_pairs = ds["classes"] * per_class * (per_class - 1)
        inter_pairs = held * (held - 1) - intra_pairs
        for kind, expected in (("intra", intra_pairs), ("inter", inter_pairs)):
            lines = (out / "plots" / f"hist_proxyless_multiple_{kind}_seed0.csv").read_text().splitlines()
            assert lines[0] == "bin_left,bin_right,count"
            assert len(lines) == 51
            assert sum(int(line.split(",")[2]) for line in lines[1:]) == expected

    def test_sweep(self, tiny_run):
        doc, out = tiny_run
        assert [p["m"] for p in doc["runs"][0]["sweep"]] == [0.2, 0.5]
        rows = (out / "plots" / "margin_sweep.csv").read_text().splitlines()
        assert len(rows) == 1 + 2 * 2

    def test_config_echo_round_trip(self, tiny_run):
        doc, _ = tiny_run
        assert parse_config_text(doc["config_text"]) == parse_config_text(TINY)

    def test_determinism_and_plot_rerun(self, tiny_run, tmp_path):
        doc, out = tiny_run
        again = run_experiment(parse_config_text(TINY), str(tmp_path))
        assert json.dumps(without_timing(again), sort_keys=True) == json.dumps(without_timing(doc), sort_keys=True)
        for name in plot_file_names(doc):
            assert (tmp_path / name).read_bytes() == (out / name).read_bytes()
        redo = tmp_path / "redo"
        emit_plot_data(doc, str(redo))
        for name in plot_file_names(doc):
            assert (redo / name).read_bytes() == (out / name).read_bytes()

    def test_checkpoints_load(self, tiny_run):
        doc, out = tiny_run
        rel = doc["runs"][0]["methods"]["proxyless"]["train"]["checkpoint"]
        model, clf, meta = load_checkpoint(out / rel)
        assert clf.frozen and model.embed_dim == 4
        teacher_rel = doc["runs"][0]["teacher"]["train"][0]["checkpoint"]
        _, t_clf, _ = load_checkpoint(out / teacher_rel)
        assert t_clf.tobytes() == clf.tobytes()

    def test_fusion_pipeline(self, tmp_path):
        text = TINY.replace("[teacher]\n", "[teacher]\ncount = 2\n").replace(
            "[run]\nseeds = 0, 1", "[fusion]\nmethod = pca\nepochs = 2\n[run]\nseeds = 0")
        doc = run_experiment(parse_config_text(text), str(tmp_path))
        jsonschema.validate(doc, SCHEMA)
        fusion = doc["runs"][0]["fusion"]
        assert fusion["method"] == "pca" and len(fusion["explained_variance"]) == 8
        assert "checkpoints/fusion_seed0.pxkd" in doc["manifest"]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_failure_removes_partial_outputs(self, tmp_path):
        bad = TINY.replace("[student]\n", "[student]\nlr0 = 1e300\n")
        with pytest.raises(Exception) as info:
            run_experiment(parse_config_text(bad), str(tmp_path))
        assert info.value.stage == "scratch"
        assert files_under(tmp_path) == []


class TestCli:
    def write(self, tmp_path, text):
        path = tmp_path / "exp.cfg"
        path.write_text(text)
        return str(path)

    def test_success_with_overrides(self, tmp_path, capsys):
        cfg = self.write(tmp_path, TINY)
        out = tmp_path / "out"
        assert main(["run", cfg, "--out", str(out), "--seed", "3", "--methods", "proxyless,scratch"]) == 0
        doc = json.loads((out / "metrics.json").read_text())
        assert [r["seed"] for r in doc["runs"]] == [3]
        assert set(doc["runs"][0]["methods"]) == {"proxyless", "scratch"}
        assert "wrote" in capsys.readouterr().out

    def test_config_error_exit_code(self, tmp_path, capsys):
        cfg = self.write(tmp_path, TINY.replace("kappa = 20", "kappa = banana"))
        assert main(["run", cfg, "--out", str(tmp_path / "o")]) == 2
        assert "line 7" in capsys.readouterr().err

    def test_bad_methods_flag(self, tmp_path):
        cfg = self.write(tmp_path, TINY)
        assert main(["run", cfg, "--out", str(tmp_path / "o"), "--methods", "magic"]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_code(self, tmp_path, capsys):
        cfg = self.write(tmp_path, TINY.replace("lr0 = 0.05", "lr0 = 1e300"))
        out = tmp_path / "o"
        assert main(["run", cfg, "--out", str(out)]) == 3
        assert "stage teacher" in capsys.readouterr().err
        assert files_under(out) == []

    def test_io_error_exit_code(self, tmp_path):
        cfg = self.write(tmp_path, TINY)
        blocker = tmp_path / "file"
        blocker.write_text("not a directory")
        assert main(["run", cfg, "--out", str(blocker / "sub")]) == 4
        assert main(["run", str(tmp_path / "nope.cfg"), "--out", str(tmp_path / "o")]) == 4

    def test_entry_point_declared(self):
        text = (Path(__file__).resolve().parents[1] / "pyproject.toml").read_text()
        assert 'proxylesskd = "proxylesskd.cli:main"' in text
        assert os.path.isfile(Path(__file__).resolve().parents[1] / "src" / "proxylesskd" / "cli.py")

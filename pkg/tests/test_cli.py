"""End-to-end pipeline through the command-line entry point."""

import csv
import json

import pytest

from cbirnet.cli import EXIT_CONFIG, EXIT_INPUT, RunConfig, main
from cbirnet.network import load_checkpoint
from cbirnet.retrieval import load_index

DESK = ["--image-size", "64", "--scale", "0.05", "--epochs", "3",
        "--lr", "0.01", "--k", "10"]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """prepare -> train -> index, shared by the read-only tests below."""
    root = tmp_path_factory.mktemp("pipeline")
    data, run_dir = root / "data", root / "run"
    assert main(["prepare", "--synthetic", "--classes", "3",
                 "--per-class", "12", "--size", "64", "--seed", "5",
                 "--out", str(data)]) == 0
    assert main(["train", "--data-dir", str(data), "--out", str(run_dir),
                 *DESK]) == 0
    assert main(["index", "--out", str(run_dir)]) == 0
    return data, run_dir


class TestPrepare:
    def test_writes_corpus_and_manifest(self, tmp_path, capsys):
        out = tmp_path / "corpus"
        code, stdout, _ = run(capsys, "prepare", "--synthetic",
                              "--classes", "3", "--per-class", "10",
                              "--size", "16", "--seed", "7",
                              "--out", str(out))
        assert code == 0
        assert "30 images" in stdout
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["num_files"] == 30
        assert sum(manifest["class_counts"].values()) == 30
        assert manifest["seed"] == 7
        pgms = list(out.rglob("*.pgm"))
        assert len(pgms) == 30

    def test_manifest_stable_across_runs(self, tmp_path, capsys):
        shas = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            code, stdout, _ = run(capsys, "prepare", "--synthetic",
                                  "--classes", "2", "--per-class", "10",
                                  "--size", "16", "--seed", "3",
                                  "--out", str(out))
            assert code == 0
            shas.append(json.loads(
                (out / "manifest.json").read_text())["sha256"])
        assert shas[0] == shas[1]

    def test_refuses_nonempty_dir_without_force(self, tmp_path, capsys):
        out = tmp_path / "corpus"
        out.mkdir()
        (out / "keep.txt").write_text("x")
        code, _, stderr = run(capsys, "prepare", "--synthetic",
                              "--out", str(out))
        assert code == EXIT_INPUT
        assert (out / "keep.txt").read_text() == "x"  # untouched
        code, _, _ = run(capsys, "prepare", "--synthetic", "--classes", "2",
                         "--per-class", "10", "--size", "16",
                         "--out", str(out), "--force")
        assert code == 0


class TestTrain:
    def test_checkpoint_loadable(self, pipeline):
        _, run_dir = pipeline
        net, metadata = load_checkpoint(run_dir / "model.ckpt")
        assert metadata["class_names"] == ["c00_grating", "c01_polygon",
                                           "c02_blobs"]
        assert metadata["image_size"] == 64
        assert net.spec.input_shape == (1, 64, 64)

    def test_train_report_written(self, pipeline):
        _, run_dir = pipeline
        lines = (run_dir / "train_report.tsv").read_text().splitlines()
        assert lines[0] == "epoch\tmean_loss\tseconds"
        assert len(lines) == 4  # 3 epochs

    def test_rerun_identical_checkpoint_bytes(self, pipeline, tmp_path,
                                              capsys):
        data, run_dir = pipeline
        other = tmp_path / "rerun"
        code, _, _ = run(capsys, "train", "--data-dir", str(data),
                         "--out", str(other), *DESK)
        assert code == 0
        assert (other / "model.ckpt").read_bytes() == \
            (run_dir / "model.ckpt").read_bytes()

    def test_config_materialized_and_canonical(self, pipeline):
        _, run_dir = pipeline
        text = (run_dir / "config.json").read_text()
        parsed = json.loads(text)
        assert parsed["scale"] == 0.05
        assert parsed["layer"] == "fc1"  # default materialized
        assert RunConfig(**parsed).to_json() == text

    def test_unknown_config_field_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"no_such_knob": 1}))
        code, _, stderr = run(capsys, "train", "--config", str(cfg),
                              "--out", str(tmp_path / "o"))
        assert code == EXIT_CONFIG
        assert "no_such_knob" in stderr

    def test_invalid_learning_rate_is_config_error(self, pipeline, tmp_path,
                                                   capsys):
        data, _ = pipeline
        code, _, _ = run(capsys, "train", "--data-dir", str(data),
                         "--out", str(tmp_path / "o"), "--image-size", "64",
                         "--scale", "0.05", "--lr", "-1")
        assert code == EXIT_CONFIG

    def test_init_std_flag_materialized(self, pipeline, tmp_path, capsys):
        data, _ = pipeline
        out = tmp_path / "o"
        code, _, _ = run(capsys, "train", "--data-dir", str(data),
                         "--out", str(out), "--init-std", "0.15", *DESK)
        assert code == 0
        cfg = json.loads((out / "config.json").read_text())
        assert cfg["init_std"] == 0.15

    def test_nonpositive_init_std_is_config_error(self, pipeline, tmp_path,
                                                  capsys):
        data, _ = pipeline
        code, _, _ = run(capsys, "train", "--data-dir", str(data),
                         "--out", str(tmp_path / "o"), "--init-std", "0",
                         *DESK)
        assert code == EXIT_CONFIG

    def test_missing_data_dir_is_input_error(self, tmp_path, capsys):
        code, _, _ = run(capsys, "train", "--data-dir",
                         str(tmp_path / "nope"),
                         "--out", str(tmp_path / "o"), *DESK)
        assert code == EXIT_INPUT


class TestIndex:
    def test_counts_match_training_split(self, pipeline):
        _, run_dir = pipeline
        index = load_index(run_dir / "features.idx")
        # floor(12 * 0.7) = 8 training images per class, 3 classes
        assert len(index) == 24

    def test_fingerprint_matches_checkpoint(self, pipeline):
        _, run_dir = pipeline
        net, _ = load_checkpoint(run_dir / "model.ckpt")
        index = load_index(run_dir / "features.idx",
                           expected_fingerprint=net.fingerprint())
        assert index.network_fingerprint == net.fingerprint()

    def test_rerun_identical_index_bytes(self, pipeline, tmp_path, capsys):
        data, run_dir = pipeline
        other = tmp_path / "rerun"
        assert run(capsys, "train", "--data-dir", str(data),
                   "--out", str(other), *DESK)[0] == 0
        assert run(capsys, "index", "--out", str(other))[0] == 0
        assert (other / "features.idx").read_bytes() == \
            (run_dir / "features.idx").read_bytes()

    def test_class_mismatch_is_staleness(self, pipeline, tmp_path, capsys):
        _, run_dir = pipeline
        other_data = tmp_path / "other_data"
        assert run(capsys, "prepare", "--synthetic", "--classes", "4",
                   "--per-class", "10", "--size", "64", "--seed", "1",
                   "--out", str(other_data))[0] == 0
        code, _, stderr = run(capsys, "index", "--out", str(run_dir),
                              "--data-dir", str(other_data))
        assert code == EXIT_INPUT
        assert "classes" in stderr

    def test_missing_checkpoint_is_input_error(self, tmp_path, capsys):
        code, _, _ = run(capsys, "index", "--out", str(tmp_path / "empty"),
                         "--data-dir", str(tmp_path))
        assert code == EXIT_INPUT


class TestQuery:
    def probe(self, pipeline):
        data, run_dir = pipeline
        index = load_index(run_dir / "features.idx")
        return data / index.records[0].source_id

    def test_indexed_image_rank_one_distance_zero(self, pipeline, capsys):
        data, run_dir = pipeline
        image = self.probe(pipeline)
        code, stdout, _ = run(capsys, "query", "--out", str(run_dir),
                              "--image", str(image), "--no-filter")
        assert code == 0
        first = stdout.splitlines()[1].split("\t")
        assert first[0] == "1"
        assert first[1] == str(image.relative_to(data))
        assert float(first[2]) == 0.0

    def test_repeated_invocations_identical(self, pipeline, capsys):
        _, run_dir = pipeline
        image = self.probe(pipeline)
        outputs = {run(capsys, "query", "--out", str(run_dir),
                       "--image", str(image), "--k", "5")[1]
                   for _ in range(3)}
        assert len(outputs) == 1

    def test_k_exceeding_candidates_returns_all(self, pipeline, capsys):
        _, run_dir = pipeline
        image = self.probe(pipeline)
        code, stdout, _ = run(capsys, "query", "--out", str(run_dir),
                              "--image", str(image), "--k", "5000",
                              "--no-filter")
        assert code == 0
        assert len(stdout.splitlines()) == 1 + 24  # header + whole index

    def test_json_lines_parse(self, pipeline, capsys):
        _, run_dir = pipeline
        image = self.probe(pipeline)
        code, stdout, _ = run(capsys, "query", "--out", str(run_dir),
                              "--image", str(image), "--k", "3",
                              "--json-lines")
        assert code == 0
        lines = [json.loads(l) for l in stdout.splitlines()]
        assert "predicted_class" in lines[0]
        assert lines[1]["rank"] == 1
        assert {"rank", "source_id", "distance", "true_class"} <= set(lines[1])

    def test_unreadable_image_is_input_error(self, pipeline, capsys):
        _, run_dir = pipeline
        code, _, _ = run(capsys, "query", "--out", str(run_dir),
                         "--image", "/no/such/file.pgm")
        assert code == EXIT_INPUT


@pytest.fixture(scope="module")
def evaluated(pipeline):
    _, run_dir = pipeline
    assert main(["evaluate", "--out", str(run_dir), "--k", "10"]) == 0
    return run_dir


class TestEvaluate:
    def test_map_table_six_rows(self, evaluated):
        lines = (evaluated / "map_table.tsv").read_text().splitlines()
        assert lines[0] == "layer\tfilter\tmap\tvalid_queries"
        assert len(lines) == 7
        combos = {tuple(l.split("\t")[:2]) for l in lines[1:]}
        assert combos == {(l, m) for l in ("fc1", "fc2", "fc3")
                          for m in ("off", "on")}

    def test_printed_accuracy_equals_confusion_trace(self, pipeline, capsys):
        _, run_dir = pipeline
        code, stdout, _ = run(capsys, "evaluate", "--out", str(run_dir),
                              "--k", "10")
        assert code == 0
        accuracy = float(stdout.splitlines()[0].split()[2])
        rows = (run_dir / "confusion_matrix.tsv").read_text().splitlines()[1:]
        counts = [[int(v) for v in r.split("\t")[1:]] for r in rows]
        trace = sum(counts[i][i] for i in range(len(counts)))
        total = sum(sum(r) for r in counts)
        assert accuracy == pytest.approx(trace / total, abs=1e-6)

    def test_pr_curves_have_six_series(self, evaluated):
        rows = list(csv.reader((evaluated / "pr_curves.csv").open()))[1:]
        series = {(r[0], r[1]) for r in rows}
        assert series == {(l, m) for l in ("fc1", "fc2", "fc3")
                          for m in ("off", "on")}

    def test_classification_report_file(self, evaluated):
        text = (evaluated / "classification_report.tsv").read_text()
        assert text.startswith("class\tprecision\trecall")
        assert "\nf1\t" in text

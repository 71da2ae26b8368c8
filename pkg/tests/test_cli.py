"""End-to-end CLI tests: command flow, exit codes, artifact hygiene."""

import csv
from pathlib import Path

import pytest

from jobcast import cli, model
from jobcast.dataio import write_records_csv
from jobcast.errors import TrainingError
from jobcast.synthetic import context_records, make_contexts

DATA = Path(__file__).parent / "data"

PROPS = ["dataset_size=8000000000", "dataset_characteristics=uniform",
         "job_parameters=--sort-buffer 64m", "node_type=m5.xlarge",
         "memory_mb=16384", "cpu_cores=4", "job_name=sort"]


@pytest.fixture(scope="module")
def trained_model(tmp_path_factory):
    """One quick pre-training run shared by the read-only CLI tests."""
    out = tmp_path_factory.mktemp("cli") / "sort.jcm"
    code = cli.main([
        "pretrain", "--data", str(DATA / "sort_runs.csv"),
        "--manifest", str(DATA / "sort_manifest.txt"),
        "--epochs", "150", "--search-samples", "2", "--seed", "1",
        "--out", str(out),
    ])
    assert code == 0
    return out


class TestPretrain:
    def test_writes_model_and_search_log(self, trained_model, capsys):
        assert trained_model.exists()
        assert trained_model.with_suffix(".search.csv").exists()
        state = model.load(trained_model)
        assert state.schema.essential_count == 4

    def test_missing_manifest_is_config_error(self, tmp_path, capsys):
        out = tmp_path / "m.jcm"
        code = cli.main([
            "pretrain", "--data", str(DATA / "sort_runs.csv"),
            "--manifest", str(tmp_path / "absent.txt"), "--out", str(out),
        ])
        assert code == cli.EXIT_CONFIG
        assert not out.exists()  # no partial artifact

    def test_local_variant_rejected(self, tmp_path):
        code = cli.main([
            "pretrain", "--data", str(DATA / "sort_runs.csv"),
            "--manifest", str(DATA / "sort_manifest.txt"),
            "--variant", "local", "--out", str(tmp_path / "m.jcm"),
        ])
        assert code == cli.EXIT_CONFIG

    def test_deterministic_fingerprints(self, tmp_path, capsys):
        fingerprints = []
        for name in ("a.jcm", "b.jcm"):
            code = cli.main([
                "pretrain", "--data", str(DATA / "sort_runs.csv"),
                "--manifest", str(DATA / "sort_manifest.txt"),
                "--epochs", "40", "--search-samples", "2", "--seed", "7",
                "--out", str(tmp_path / name),
            ])
            assert code == 0
            stdout = capsys.readouterr().out
            fingerprints.append(_grab(stdout, "fingerprint: "))
        assert fingerprints[0] == fingerprints[1]
        assert (tmp_path / "a.jcm").read_bytes() == (tmp_path / "b.jcm").read_bytes()

    def test_target_context_filtering(self, tmp_path, capsys):
        out = tmp_path / "filtered.jcm"
        code = cli.main([
            "pretrain", "--data", str(DATA / "sort_runs.csv"),
            "--manifest", str(DATA / "sort_manifest.txt"),
            "--variant", "full",
            "--target-context",
            "dataset_size=8000,dataset_characteristics=uniform,"
            "job_parameters=--sort-buffer 64m,node_type=m5.xlarge",
            "--epochs", "40", "--search-samples", "2",
            "--out", str(out),
        ])
        assert code == 0
        assert "30 records after filtering" in capsys.readouterr().out


class TestPredict:
    def test_prediction_deterministic(self, trained_model, capsys):
        outputs = []
        for _ in range(2):
            code = cli.main(["predict", "--model", str(trained_model),
                             "--scale-out", "6", "--props", *PROPS])
            assert code == 0
            outputs.append(_grab(capsys.readouterr().out,
                                 "predicted_runtime_seconds: "))
        assert outputs[0] == outputs[1]

    def test_missing_essential_is_schema_error(self, trained_model, capsys):
        code = cli.main(["predict", "--model", str(trained_model),
                         "--scale-out", "6",
                         "--props", "node_type=m5.xlarge"])
        assert code == cli.EXIT_SCHEMA

    def test_props_file(self, trained_model, tmp_path, capsys):
        pf = tmp_path / "ctx.props"
        pf.write_text("\n".join(p for p in PROPS) + "\n")
        code = cli.main(["predict", "--model", str(trained_model),
                         "--scale-out", "6", "--props-file", str(pf)])
        assert code == 0

    def test_corrupt_model_is_data_error(self, trained_model, tmp_path):
        broken = tmp_path / "broken.jcm"
        blob = bytearray(trained_model.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        broken.write_bytes(bytes(blob))
        code = cli.main(["predict", "--model", str(broken),
                         "--scale-out", "6", "--props", *PROPS])
        assert code == cli.EXIT_DATA


class TestRecommend:
    def test_recommendation_matches_curve(self, trained_model, capsys):
        """The recommended scale-out must be the smallest candidate whose
        own predicted runtime is under the target, derived directly from
        the emitted curve."""
        code = cli.main(["recommend", "--model", str(trained_model),
                         "--target", "1e9", "--range", "2:12:2",
                         "--props", *PROPS])
        assert code == 0
        out = capsys.readouterr().out
        curve = _parse_curve(out)
        assert len(curve) == 6
        assert _grab(out, "recommended_scale_out: ") == "2"  # huge target

        target = sorted(r for _, r in curve)[len(curve) // 2]
        code = cli.main(["recommend", "--model", str(trained_model),
                         "--target", str(target), "--range", "2:12:2",
                         "--props", *PROPS])
        assert code == 0
        out = capsys.readouterr().out
        expect = min(x for x, r in curve if r <= target)
        assert int(_grab(out, "recommended_scale_out: ")) == expect

    def test_unachievable_target_still_emits_curve(self, trained_model, capsys):
        code = cli.main(["recommend", "--model", str(trained_model),
                         "--target", "-5", "--range", "2:12:2",
                         "--props", *PROPS])
        assert code == 0
        out = capsys.readouterr().out
        assert "none (target not achievable)" in out
        assert len(_parse_curve(out)) == 6

    def test_bad_range_is_config_error(self, trained_model):
        code = cli.main(["recommend", "--model", str(trained_model),
                         "--target", "100", "--range", "12:2:2",
                         "--props", *PROPS])
        assert code == cli.EXIT_CONFIG


class TestFinetune:
    def test_finetune_flow(self, trained_model, tmp_path, capsys):
        ctx = make_contexts(1, seed=21)[0]
        samples = context_records(ctx, repetitions=1, seed=21)[:3]
        samples_csv = tmp_path / "samples.csv"
        write_records_csv(samples, samples_csv)
        out = tmp_path / "tuned.jcm"
        code = cli.main(["finetune", "--model", str(trained_model),
                         "--samples", str(samples_csv),
                         "--reuse", "partial-unfreeze", "--seed", "3",
                         "--out", str(out)])
        assert code == 0
        stdout = capsys.readouterr().out
        assert "stopped:" in stdout
        tuned = model.load(out)
        assert tuned.fingerprint() != model.load(trained_model).fingerprint()


class TestEvaluate:
    def test_emits_metrics_and_ecdf(self, tmp_path, capsys):
        out_dir = tmp_path / "results"
        code = cli.main([
            "evaluate", "--data", str(DATA / "sort_runs.csv"),
            "--manifest", str(DATA / "sort_manifest.txt"),
            "--methods", "nnls,bell", "--n-train", "2-3",
            "--max-splits", "4", "--contexts", "2",
            "--out-dir", str(out_dir),
        ])
        assert code == 0
        with open(out_dir / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert {r["n_train"] for r in rows} == {"2", "3"}
        assert (out_dir / "ecdf.csv").exists()
        with open(out_dir / "contexts.csv") as fh:
            assert len(list(csv.DictReader(fh))) == 2


class TestExitCodeMapping:
    def test_training_error_maps_to_4(self, monkeypatch, tmp_path):
        def boom(args):
            raise TrainingError("synthetic failure")

        monkeypatch.setattr(cli, "cmd_predict", boom)
        code = cli.main(["predict", "--model", "x", "--scale-out", "2"])
        assert code == cli.EXIT_TRAINING


def _grab(text: str, prefix: str) -> str:
    for line in text.splitlines():
        if line.startswith(prefix):
            return line[len(prefix):].strip()
    raise AssertionError(f"no line starting with {prefix!r} in:\n{text}")


def _parse_curve(text: str):
    curve = []
    seen_header = False
    for line in text.splitlines():
        if line.startswith("scale_out,"):
            seen_header = True
            continue
        if seen_header and "," in line:
            x, runtime = line.split(",")
            curve.append((int(x), float(runtime)))
        elif seen_header:
            break
    return curve
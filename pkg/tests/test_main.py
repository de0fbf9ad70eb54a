"""Command-line smoke tests on a tiny phantom cohort."""

import shutil

import pandas as pd
import pytest

from weakseg.main import main

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "short.txt").write_text("epochs = 2\n", encoding="utf-8")
    assert main(["phantom", "--n", "3", "--out", str(root / "data"), "--seed", "5"]) == 0
    return root


def test_phantom_command(workspace):
    data = workspace / "data"
    assert (data / "clinical.csv").exists()
    assert (data / "phantom-0005_image.nii").exists()
    assert (data / "phantom-0007_tumor.nii").exists()
    assert "epochs = 60" in (data / "config.txt").read_text()


def test_train_segment_evaluate_report(workspace):
    data, out = workspace / "data", workspace / "out"
    config = str(workspace / "short.txt")
    for task in ("liver", "tumor"):
        assert main(["train", "--task", task, "--data", str(data), "--out", str(out),
                     "--config", config]) == 0
        assert (out / f"{task}.params").exists()
        curves = pd.read_csv(out / f"{task}_curves.csv")
        assert len(curves) == 2

    params = ["--liver-params", str(out / "liver.params"), "--tumor-params", str(out / "tumor.params")]
    assert main(["segment", "--image", str(data / "phantom-0005_image.nii"), "--out", str(out),
                 "--config", config, *params]) == 0
    assert (out / "seg_liver.nii").exists()
    assert (out / "seg_overlay.png").read_bytes().startswith(PNG_MAGIC)

    assert main(["evaluate", "--data", str(data), "--out", str(out), "--config", config,
                 "--no-contour", *params]) == 0
    table = pd.read_csv(out / "evaluation.csv")
    assert list(table.columns) == ["method", "class", "accuracy", "dice", "sensitivity", "iou"]

    assert main(["report", "--liver", str(data / "phantom-0005_liver.nii"),
                 "--tumor", str(data / "phantom-0005_tumor.nii"),
                 "--clinical", str(data / "clinical.csv"), "--patient", "phantom-0005",
                 "--out", str(out / "report")]) == 0
    text = (out / "report" / "report.txt").read_text(encoding="utf-8")
    assert text.startswith("Patient: phantom-0005")
    assert "Tumor-to-liver volume ratio" in text


def test_clinical_fit_command(workspace):
    out = workspace / "clinical"
    assert main(["clinical-fit", "--data", str(workspace / "data"), "--out", str(out)]) == 0
    assert (out / "clinical_model.json").exists()
    assert (out / "clinical_coefficients.csv").read_text().startswith("feature,coefficient")


def test_errors_exit_with_status_two(workspace, capsys):
    assert main(["report", "--liver", str(workspace / "missing.nii"),
                 "--tumor", str(workspace / "missing.nii"), "--out", str(workspace / "x")]) == 2
    assert capsys.readouterr().err.startswith("error: ")
    bad = workspace / "bad.txt"
    bad.write_text("epochs = -1\n", encoding="utf-8")
    assert main(["phantom", "--n", "1", "--config", str(bad), "--out", str(workspace / "y")]) == 2


def test_unknown_patient(workspace):
    data = workspace / "data"
    assert main(["report", "--liver", str(data / "phantom-0005_liver.nii"),
                 "--tumor", str(data / "phantom-0005_tumor.nii"),
                 "--clinical", str(data / "clinical.csv"), "--patient", "nobody",
                 "--out", str(workspace / "z")]) == 2


@pytest.fixture(scope="module")
def models(workspace):
    out = workspace / "models"
    assert main(["train", "--task", "both", "--data", str(workspace / "data"), "--out", str(out),
                 "--config", str(workspace / "short.txt")]) == 0
    return out


def _params(models):
    return ["--liver-params", str(models / "liver.params"), "--tumor-params", str(models / "tumor.params")]


def _same_files(first, second):
    names = sorted(p.name for p in first.iterdir())
    assert names == sorted(p.name for p in second.iterdir())
    for name in names:
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_train_both(models):
    for task in ("liver", "tumor"):
        assert (models / f"{task}.params").stat().st_size > 0
        assert len(pd.read_csv(models / f"{task}_curves.csv")) == 2


def test_fixed_seed_artifacts_are_byte_identical(workspace, models, tmp_path):
    config = str(workspace / "short.txt")
    for run in ("a", "b"):
        root = tmp_path / run
        assert main(["phantom", "--n", "2", "--seed", "11", "--out", str(root / "data")]) == 0
        assert main(["train", "--task", "tumor", "--seed", "3", "--data", str(root / "data"),
                     "--out", str(root / "train"), "--config", config]) == 0
        assert main(["segment", "--image", str(root / "data" / "phantom-0011_image.nii"),
                     "--seed", "3", "--out", str(root / "seg"), "--config", config, *_params(models)]) == 0
    for folder in ("data", "train", "seg"):
        _same_files(tmp_path / "a" / folder, tmp_path / "b" / folder)


def test_segment_ignores_clinical_table(workspace, models, tmp_path):
    corrupted = tmp_path / "corrupted"
    shutil.copytree(workspace / "data", corrupted)
    (corrupted / "clinical.csv").write_text("patient_id,afp\nphantom-0005,not a number,7\n",
                                            encoding="utf-8")
    assert main(["clinical-fit", "--data", str(corrupted), "--out", str(tmp_path / "fit")]) == 2

    config = str(workspace / "short.txt")
    for source, out in ((workspace / "data", "clean"), (corrupted, "dirty")):
        assert main(["segment", "--image", str(source / "phantom-0006_image.nii"),
                     "--out", str(tmp_path / out), "--config", config, *_params(models)]) == 0
    _same_files(tmp_path / "clean", tmp_path / "dirty")


def test_allow_extra(workspace, tmp_path):
    extra = tmp_path / "extra"
    shutil.copytree(workspace / "data", extra)
    table = pd.read_csv(extra / "clinical.csv", dtype=str, keep_default_na=False)
    table["scanner"] = "ct-1"
    table.to_csv(extra / "clinical.csv", index=False)

    out = str(tmp_path / "out")
    assert main(["clinical-fit", "--data", str(extra), "--out", out]) == 2
    assert main(["clinical-fit", "--data", str(extra), "--out", out, "--allow-extra"]) == 0

    report = ["report", "--liver", str(extra / "phantom-0005_liver.nii"),
              "--tumor", str(extra / "phantom-0005_tumor.nii"),
              "--clinical", str(extra / "clinical.csv"), "--patient", "phantom-0005", "--out", out]
    assert main(report) == 2
    assert main(report + ["--allow-extra"]) == 0


def test_out_defaults_to_configured_folder(tmp_path):
    target = tmp_path / "configured"
    config = tmp_path / "run.txt"
    config.write_text(f"out_dir = {target}\n", encoding="utf-8")
    assert main(["phantom", "--n", "1", "--config", str(config)]) == 0
    assert (target / "clinical.csv").exists()

import numpy as np
import pytest

from lesioncam.cli import main
from lesioncam.data import decode_image, encode_image, read_manifest


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("syn")
    assert main(["--seed", "3", "synth", "--out", str(out), "--per-class", "4", "--size", "64",
                 "--hair-density", "1", "--val-fraction", "0.25"]) == 0
    return out


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "c.toml"
    path.write_text('[augment]\nrotations = [0]\n[train]\nepochs = 1\nbatch_size = 4\n'
                    '[pipeline]\nstage1_weights = "w1.bin"\nstage2_weights = "w2.bin"\n')
    return path


@pytest.fixture(scope="module")
def trained(synth_dir, config_file):
    assert main(["--config", str(config_file), "train", "--manifest", str(synth_dir / "train_manifest.csv")]) == 0
    return config_file.parent


def test_synth_layout(synth_dir):
    assert len(read_manifest(synth_dir / "manifest.csv")) == 12
    assert len(read_manifest(synth_dir / "train_manifest.csv")) == 9
    assert (synth_dir / "val_labels.csv").read_text().count("\n") == 4


def test_eval_prints_report(tmp_path, capsys):
    (tmp_path / "t.csv").write_text("image_id,melanoma,seborrheic_keratosis\na,1,0\nb,0,1\nc,0,0\n")
    (tmp_path / "p.csv").write_text("image_id,p_mel,p_sk,p_nevus\na,0.7,0.2,0.1\nb,0.1,0.6,0.3\nc,0.2,0.1,0.7\n")
    assert main(["eval", "--pred", str(tmp_path / "p.csv"), "--truth", str(tmp_path / "t.csv"),
                 "--out", str(tmp_path / "r.csv")]) == 0
    assert "AVG_AUC 1.000" in capsys.readouterr().out
    assert (tmp_path / "r.csv").read_text() == "M_AUC,SK_AUC,AVG_AUC\n1.000000,1.000000,1.000000\n"


@pytest.mark.parametrize("argv", [["frobnicate"], [], ["eval", "--bogus"], ["eval", "--pred", "p.csv"]])
def test_usage_errors_exit_1(argv):
    assert main(argv) == 1


def test_missing_file_exit_2(tmp_path):
    assert main(["eval", "--pred", str(tmp_path / "no.csv"), "--truth", str(tmp_path / "no.csv")]) == 2


def test_train_without_weights_path_exit_1(synth_dir):
    assert main(["train", "--manifest", str(synth_dir / "manifest.csv")]) == 1


def test_divergent_training_exit_3(synth_dir, tmp_path):
    with np.errstate(all="ignore"):
        code = main(["train", "--manifest", str(synth_dir / "train_manifest.csv"), "--stage", "1",
                     "--stage1-weights", str(tmp_path / "w.bin"), "--epochs", "3", "--lr", "1e30"])
    assert code == 3


def test_pipeline_one_row(trained, config_file, synth_dir, tmp_path):
    img = sorted((synth_dir / "images").glob("*.png"))[0]
    out = tmp_path / "pred.csv"
    assert main(["--config", str(config_file), "pipeline", "--in", str(img), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "image_id,p_mel,p_sk,p_nevus" and len(lines) == 2
    fields = lines[1].split(",")
    assert fields[0] == img.stem
    assert abs(sum(float(v) for v in fields[1:]) - 1) <= 3e-6


def test_pipeline_manifest_then_eval(trained, config_file, synth_dir, tmp_path, capsys):
    out = tmp_path / "pred.csv"
    assert main(["--config", str(config_file), "pipeline", "--manifest", str(synth_dir / "val_manifest.csv"),
                 "--out", str(out)]) == 0
    assert main(["eval", "--pred", str(out), "--truth", str(synth_dir / "val_labels.csv")]) == 0
    assert "M_AUC" in capsys.readouterr().out


def test_infer_stdout(trained, synth_dir, capsys):
    img = sorted((synth_dir / "images").glob("*.png"))[1]
    assert main(["infer", "--weights", str(trained / "w1.bin"), "--in", str(img)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "image_id,p_mel,p_sk,p_nevus" and lines[1].startswith(img.stem + ",")


def test_cam_outputs(trained, synth_dir, tmp_path):
    img = sorted((synth_dir / "images").glob("*.png"))[2]
    args = ["cam", "--weights", str(trained / "w1.bin"), "--in", str(img), "--heatmap", str(tmp_path / "h.pgm"),
            "--overlay", str(tmp_path / "o.png"), "--bbox", str(tmp_path / "b.txt"), "--crop", str(tmp_path / "c.png"),
            "--mask", str(tmp_path / "m.pgm")]
    assert main(args) == 0
    assert decode_image(tmp_path / "h.pgm").shape == (64, 64)
    assert decode_image(tmp_path / "o.png").shape == (64, 64, 3)
    x0, y0, x1, y1 = map(int, (tmp_path / "b.txt").read_text().split())
    np.testing.assert_array_equal(decode_image(tmp_path / "c.png"), decode_image(img)[y0:y1, x0:x1])
    assert set(np.unique(decode_image(tmp_path / "m.pgm"))) <= {0, 255}


def test_preprocess(tmp_path, capsys):
    img = np.full((40, 40, 3), 200, np.uint8)
    img[20, 2:38] = 20
    encode_image(img, tmp_path / "in.ppm")
    assert main(["preprocess", "--in", str(tmp_path / "in.ppm"), "--out", str(tmp_path / "out.ppm"),
                 "--mask", str(tmp_path / "m.pgm")]) == 0
    assert "hair pixels replaced" in capsys.readouterr().out
    assert decode_image(tmp_path / "m.pgm")[20, 10] == 255
    assert np.abs(decode_image(tmp_path / "out.ppm")[20, 10].astype(int) - 200).max() <= 1


def test_augment_manifest(synth_dir, tmp_path):
    assert main(["augment", "--manifest", str(synth_dir / "val_manifest.csv"), "--out", str(tmp_path / "aug"),
                 "--rotations", "0,1,2,3", "--hflip"]) == 0
    m = read_manifest(tmp_path / "aug" / "manifest.csv")
    assert len(m) == 3 * 8
    assert m.entries[1].image_id.endswith("_r0_f")

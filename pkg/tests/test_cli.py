import pytest

from ppf.cli import main
from ppf.data import generate, write_pnm

TINY_CFG = """\
# small enough for a unit test
epochs = 1
batch_size = 16
image_size = 16
patch_size = 4
depth = 2
embed_dim = 8
k = 8
n_classes = 3
protos_global_per_class = 1
protos_local_per_class = 2
n_train = 32
n_test = 12
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY_CFG)
    assert main(["train", "--config", str(root / "tiny.cfg"), "--out", str(root / "out")]) == 0
    write_pnm(root / "img.ppm", generate(9, 1, 3, 16).images[0])
    return root


def test_train_outputs(run):
    out = run / "out"
    assert (out / "checkpoint.ppfk").exists()
    assert (out / "metrics.log").read_text().startswith("epoch=1 loss=")
    assert len((out / "test" / "labels.txt").read_text().splitlines()) == 12


def test_resume_appends_log(run, tmp_path):
    cfg = run / "two.cfg"
    cfg.write_text(TINY_CFG.replace("epochs = 1", "epochs = 2"))
    ckpt = run / "out" / "checkpoint.ppfk"
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path),
                 "--resume", str(ckpt)]) == 0
    assert (tmp_path / "metrics.log").read_text().startswith("epoch=2 ")


def test_eval(run, capsys):
    for branch in ("global", "local", "total"):
        assert main(["eval", "--ckpt", str(run / "out" / "checkpoint.ppfk"),
                     "--data", str(run / "out" / "test"), "--branch", branch]) == 0
        assert f"branch={branch} accuracy=" in capsys.readouterr().out


def test_rollout(run, capsys):
    assert main(["rollout", "--ckpt", str(run / "out" / "checkpoint.ppfk"),
                 "--image", str(run / "img.ppm")]) == 0
    text = capsys.readouterr().out
    assert "foreground mask (K=8)" in text
    mask_rows = text.split("foreground mask (K=8):\n")[1].split()
    assert sum(int(v) for v in mask_rows) == 8


def test_visualize(run, tmp_path, capsys):
    assert main(["visualize", "--ckpt", str(run / "out" / "checkpoint.ppfk"),
                 "--image", str(run / "img.ppm"), "--rank", "2", "--out", str(tmp_path)]) == 0
    assert "rank=2" in capsys.readouterr().out
    assert {p.name for p in tmp_path.iterdir()} == {"heatmap.ppm", "bbox.ppm", "render.txt"}


def test_inspect(run, capsys):
    ckpt = str(run / "out" / "checkpoint.ppfk")
    assert main(["inspect", "--ckpt", ckpt]) == 0
    assert "class 0: global [0] local [0, 1]" in capsys.readouterr().out
    assert main(["inspect", "--ckpt", ckpt, "--image", str(run / "img.ppm")]) == 0
    text = capsys.readouterr().out
    assert "[global branch]" in text and "prediction: class" in text


def test_errors_return_nonzero(run, tmp_path, capsys):
    assert main(["eval", "--ckpt", str(tmp_path / "missing"), "--data", str(tmp_path)]) == 1
    bad = tmp_path / "bad.ppfk"
    bad.write_bytes(b"junk")
    assert main(["inspect", "--ckpt", str(bad)]) == 1
    assert "offset" in capsys.readouterr().err
    (tmp_path / "bad.cfg").write_text("epochz = 3\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path)]) == 1

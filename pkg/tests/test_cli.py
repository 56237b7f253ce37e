import pytest

from byol.cli import main

SMALL = ["--set", "dataset.n_classes=2", "--set", "dataset.n_per_class=16", "--set", "dataset.n_test_per_class=4",
         "--set", "dataset.image_size=8", "--set", "arch.encoder_hidden=[16]", "--set", "arch.repr_dim=8",
         "--set", "arch.proj_hidden=16", "--set", "arch.proj_dim=4", "--set", "optim.batch_size=8",
         "--set", "optim.total_steps=4", "--set", "probe.epochs=2", "--set", "probe.lrs=[0.1]"]


def test_unknown_key_exits_two(capsys):
    assert main(["train", "--set", "loss.bta=1"]) == 2
    assert "loss.beta" in capsys.readouterr().err


def test_missing_config_file_exits_two(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.cfg")]) == 2


def test_train_probe_inspect(tmp_path, capsys):
    out = str(tmp_path / "run")
    assert main(["train", *SMALL, "--out", out]) == 0
    assert main(["probe", f"{out}/final.ckpt", "--out", out]) == 0
    assert "top1 = " in capsys.readouterr().out
    assert main(["inspect-checkpoint", f"{out}/final.ckpt"]) == 0
    lines = capsys.readouterr().out.splitlines()
    count = int(next(s for s in lines if s.startswith("online parameters")).split()[-1])
    assert lines[-1] == f"expected from architecture {count}"


def test_grid_unknown_name(tmp_path):
    assert main(["grid", "nonsense", "--out", str(tmp_path)]) == 2


def test_augment_preview(tmp_path):
    assert main(["augment-preview", *SMALL, "--count", "2", "--scale", "2", "--out", str(tmp_path)]) == 0
    data = (tmp_path / "preview" / "sample_000.ppm").read_bytes()
    assert data.startswith(b"P6 48 16 255\n") and len(data) == len(b"P6 48 16 255\n") + 48 * 16 * 3


@pytest.mark.parametrize("argv", [[], ["fly"]])
def test_bad_subcommand(argv):
    with pytest.raises(SystemExit):
        main(argv)

"""End-to-end command-line behavior: exit codes, outputs, idempotence."""

import numpy as np
import pytest
from PIL import Image

from graph_iqa.cli import main

BASE_CONFIG = """
# desk-scale settings
patch_size = 8
grid_n = 4
d = 6
k = 3
layers = 2
epochs = 2
batch_size = 2
gate_hidden = 3
head_hidden = 4
seed = 7
"""


def write_config(tmp_path, extra="", name="run.cfg"):
    path = tmp_path / name
    path.write_text(BASE_CONFIG + extra)
    return str(path)


def write_image(path, rng, size=32, blur=0):
    from scipy.ndimage import gaussian_filter

    arr = rng.random((size, size, 3))
    if blur:
        arr = gaussian_filter(arr, sigma=(blur, blur, 0))
    img = Image.fromarray((np.clip(arr, 0, 1) * 255).astype(np.uint8))
    if str(path).endswith(".ppm"):
        img.save(path, format="PPM")
    else:
        img.save(path, format="PNG")
    return path


def write_manifest(tmp_path, rows, name="manifest.csv"):
    path = tmp_path / name
    lines = ["path,mos,split"] + [f"{p},{m},{s}" for p, m, s in rows]
    path.write_text("\n".join(lines) + "\n")
    return str(path)


@pytest.fixture
def dataset(tmp_path, rng):
    rows = []
    for i in range(6):
        ext = ".ppm" if i % 2 else ".png"
        img = write_image(tmp_path / f"img{i}{ext}", rng, blur=i % 3)
        split = "train" if i < 4 else "val"
        rows.append((str(img), round(0.3 + 0.1 * i, 2), split))
    return write_manifest(tmp_path, rows)


class TestManifestValidation:
    def test_bad_split_rejected(self, tmp_path, rng):
        img = write_image(tmp_path / "a.png", rng)
        manifest = write_manifest(tmp_path, [(str(img), 0.5, "validation")])
        cfg = write_config(tmp_path)
        assert main(["train", "--config", cfg, "--manifest", manifest, "--out", str(tmp_path / "o")]) == 2

    def test_bad_mos_rejected(self, tmp_path, rng):
        img = write_image(tmp_path / "a.png", rng)
        manifest = write_manifest(tmp_path, [(str(img), "not-a-number", "train")])
        cfg = write_config(tmp_path)
        assert main(["train", "--config", cfg, "--manifest", manifest, "--out", str(tmp_path / "o")]) == 2

    def test_wrong_header_rejected(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("file,score,fold\nx.png,0.5,train\n")
        cfg = write_config(tmp_path)
        assert main(["train", "--config", cfg, "--manifest", str(bad), "--out", str(tmp_path / "o")]) == 2


class TestConfigValidation:
    def test_unknown_key_rejected(self, tmp_path):
        cfg = write_config(tmp_path, "mystery_knob = 3\n")
        out = tmp_path / "out"
        code = main(["cost", "--config", cfg])
        assert code == 1
        assert not out.exists()

    def test_out_of_range_value_rejected(self, tmp_path):
        cfg = write_config(tmp_path, "alpha = 1.5\n")
        assert main(["cost", "--config", cfg]) == 1

    def test_missing_required_flag(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["train", "--config", cfg]) == 1

    def test_k_bounded_by_grid(self, tmp_path):
        cfg = write_config(tmp_path, "k = 4\n")  # grid_n = 4 allows k <= 3
        assert main(["cost", "--config", cfg]) == 1


class TestEncode:
    def test_writes_one_cache_per_sample(self, tmp_path, dataset):
        cfg = write_config(tmp_path)
        out = tmp_path / "caches"
        assert main(["encode", "--config", cfg, "--manifest", dataset, "--out", str(out)]) == 0
        caches = sorted(out.glob("*.ugqf"))
        assert len(caches) == 6
        assert (out / "encoded_manifest.csv").exists()

    def test_idempotent_rerun(self, tmp_path, dataset):
        cfg = write_config(tmp_path)
        out = tmp_path / "caches"
        main(["encode", "--config", cfg, "--manifest", dataset, "--out", str(out)])
        stamps = {p.name: p.stat().st_mtime_ns for p in out.glob("*.ugqf")}
        assert main(["encode", "--config", cfg, "--manifest", dataset, "--out", str(out)]) == 0
        again = {p.name: p.stat().st_mtime_ns for p in out.glob("*.ugqf")}
        assert stamps == again  # hash hit: nothing rewritten

    def test_config_change_changes_names(self, tmp_path, dataset):
        cfg_a = write_config(tmp_path, name="a.cfg")
        cfg_b = write_config(tmp_path, "patch_size = 16\n", name="b.cfg")
        out_a = tmp_path / "ca"
        out_b = tmp_path / "cb"
        main(["encode", "--config", cfg_a, "--manifest", dataset, "--out", str(out_a)])
        main(["encode", "--config", cfg_b, "--manifest", dataset, "--out", str(out_b)])
        names_a = {p.name for p in out_a.glob("*.ugqf")}
        names_b = {p.name for p in out_b.glob("*.ugqf")}
        assert names_a.isdisjoint(names_b)

    def test_corrupt_image_listed_others_encoded(self, tmp_path, rng, capsys):
        imgs = [write_image(tmp_path / f"ok{i}.png", rng) for i in range(3)]
        broken = tmp_path / "broken.png"
        broken.write_bytes(b"this is not a png")
        rows = [(str(p), 0.5, "train") for p in imgs] + [(str(broken), 0.5, "train")]
        manifest = write_manifest(tmp_path, rows)
        cfg = write_config(tmp_path)
        out = tmp_path / "caches"
        code = main(["encode", "--config", cfg, "--manifest", manifest, "--out", str(out)])
        assert code == 2
        assert len(list(out.glob("*.ugqf"))) == 3
        assert "broken.png" in capsys.readouterr().err

    def test_no_stray_temp_files(self, tmp_path, dataset):
        cfg = write_config(tmp_path)
        out = tmp_path / "caches"
        main(["encode", "--config", cfg, "--manifest", dataset, "--out", str(out)])
        assert not [p for p in out.iterdir() if p.name.startswith(".tmp-")]


class TestTrainCommand:
    def test_outputs_written(self, tmp_path, dataset):
        cfg = write_config(tmp_path)
        out = tmp_path / "run"
        assert main(["train", "--config", cfg, "--manifest", dataset, "--out", str(out)]) == 0
        for name in (
            "best.ckpt",
            "best.ckpt.txt",
            "train_log.csv",
            "epoch_log.csv",
            "train_predictions.csv",
            "val_predictions.csv",
        ):
            assert (out / name).exists(), name
        header = (out / "train_log.csv").read_text().splitlines()[0]
        assert header == (
            "step,raw_mse,raw_corr,raw_rank,raw_var,"
            "mu_mse,mu_corr,mu_rank,mu_var,total"
        )

    def test_missing_split_rejected(self, tmp_path, rng):
        img = write_image(tmp_path / "only.png", rng)
        manifest = write_manifest(tmp_path, [(str(img), 0.5, "train")])
        cfg = write_config(tmp_path)
        code = main(["train", "--config", cfg, "--manifest", manifest, "--out", str(tmp_path / "r")])
        assert code == 2

    def test_training_from_caches(self, tmp_path, dataset):
        cfg = write_config(tmp_path)
        caches = tmp_path / "caches"
        main(["encode", "--config", cfg, "--manifest", dataset, "--out", str(caches)])
        encoded_manifest = str(caches / "encoded_manifest.csv")
        out = tmp_path / "run-cached"
        assert main(["train", "--config", cfg, "--manifest", encoded_manifest, "--out", str(out)]) == 0
        assert (out / "best.ckpt").exists()


class TestEvalCommand:
    def test_predictions_file_scoring(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        pred_file = tmp_path / "preds.csv"
        pred_file.write_text(
            "path,mos,pred\n"
            "a.png,0.1,0.1\n"
            "b.png,0.4,0.4\n"
            "c.png,0.9,0.9\n"
        )
        assert main(["eval", "--config", cfg, "--manifest", str(pred_file)]) == 0
        out = capsys.readouterr().out
        first = out.splitlines()[0].split(",")
        assert float(first[0]) == pytest.approx(1.0)  # PLCC
        assert float(first[1]) == pytest.approx(1.0)  # SRCC
        assert float(first[2]) == pytest.approx(0.0)  # RMSE

    def test_scoring_training_predictions_reproduces_logged_metrics(
        self, tmp_path, dataset, capsys
    ):
        cfg = write_config(tmp_path)
        out = tmp_path / "run"
        main(["train", "--config", cfg, "--manifest", dataset, "--out", str(out)])
        capsys.readouterr()
        best_epoch = int(
            (out / "best.ckpt.txt").read_text().splitlines()[0].split("=")[1]
        )
        logged = None
        for line in (out / "epoch_log.csv").read_text().splitlines()[1:]:
            cells = line.split(",")
            if int(cells[0]) == best_epoch:
                logged = tuple(float(c) for c in cells[1:4])  # train plcc/srcc/rmse
        assert logged is not None
        assert main([
            "eval", "--config", cfg, "--manifest", str(out / "train_predictions.csv"),
        ]) == 0
        scored = tuple(
            float(c) for c in capsys.readouterr().out.splitlines()[0].split(",")[:3]
        )
        for got, want in zip(scored, logged):
            assert abs(got - want) < 1e-9

    def test_empty_test_split_rejected(self, tmp_path, dataset):
        cfg = write_config(tmp_path)
        out = tmp_path / "run"
        main(["train", "--config", cfg, "--manifest", dataset, "--out", str(out)])
        code = main([
            "eval", "--config", cfg, "--manifest", dataset,
            "--checkpoint", str(out / "best.ckpt"),
        ])
        assert code == 2

    def test_eval_on_test_split(self, tmp_path, rng, dataset, capsys):
        cfg = write_config(tmp_path)
        out = tmp_path / "run"
        main(["train", "--config", cfg, "--manifest", dataset, "--out", str(out)])
        test_img = write_image(tmp_path / "t0.png", rng)
        test_img2 = write_image(tmp_path / "t1.png", rng, blur=2)
        manifest = write_manifest(
            tmp_path,
            [(str(test_img), 0.3, "test"), (str(test_img2), 0.8, "test")],
            name="test_manifest.csv",
        )
        code = main([
            "eval", "--config", cfg, "--manifest", manifest,
            "--checkpoint", str(out / "best.ckpt"),
        ])
        assert code == 0
        assert "PLCC" in capsys.readouterr().out


class TestPredictCommand:
    @pytest.fixture
    def trained(self, tmp_path, dataset):
        cfg = write_config(tmp_path)
        out = tmp_path / "run"
        main(["train", "--config", cfg, "--manifest", dataset, "--out", str(out)])
        return cfg, str(out / "best.ckpt")

    def test_repeatable_score(self, tmp_path, rng, trained, capsys):
        cfg, ckpt = trained
        img = write_image(tmp_path / "query.png", rng)
        assert main(["predict", "--config", cfg, "--input", str(img), "--checkpoint", ckpt]) == 0
        first = capsys.readouterr().out.strip()
        main(["predict", "--config", cfg, "--input", str(img), "--checkpoint", ckpt])
        assert capsys.readouterr().out.strip() == first

    def test_tta_toggle_changes_score(self, tmp_path, rng, trained, capsys):
        cfg, ckpt = trained
        img = write_image(tmp_path / "query.png", rng)
        main(["predict", "--config", cfg, "--input", str(img), "--checkpoint", ckpt, "--tta", "on"])
        on = float(capsys.readouterr().out.strip())
        main(["predict", "--config", cfg, "--input", str(img), "--checkpoint", ckpt, "--tta", "off"])
        off = float(capsys.readouterr().out.strip())
        assert on != off

    def test_cache_dimension_mismatch(self, tmp_path, rng, trained, capsys):
        import struct

        cfg, ckpt = trained
        # cache with d_raw=9 against a checkpoint trained on d_raw=128
        n, d_raw = 4, 9
        blob = b"UGQF" + struct.pack("<III", 1, n, d_raw)
        blob += np.zeros((n, d_raw), dtype="<f4").tobytes()
        blob += np.random.default_rng(0).random((n, 2)).astype("<f4").tobytes()
        cache = tmp_path / "wrong.ugqf"
        cache.write_bytes(blob)
        code = main(["predict", "--config", cfg, "--input", str(cache), "--checkpoint", ckpt])
        assert code == 2
        err = capsys.readouterr().err
        assert "128" in err and "9" in err


class TestCostCommand:
    def test_reference_numbers(self, tmp_path, capsys):
        cfg = tmp_path / "defaults.cfg"
        cfg.write_text("")  # all defaults
        assert main(["cost", "--config", str(cfg)]) == 0
        out = capsys.readouterr().out
        assert "2654208 per layer" in out
        assert "56623104 per layer" in out


class TestInspectGraph:
    def test_two_node_dump(self, tmp_path, rng, capsys):
        cfg_path = tmp_path / "two.cfg"
        cfg_path.write_text(
            "patch_size = 8\ngrid_n = 2\nd = 6\nk = 1\nlayers = 1\n"
            "gate_hidden = 3\nhead_hidden = 4\n"
        )
        cfg = str(cfg_path)
        img = write_image(tmp_path / "img.png", rng)
        assert main(["inspect-graph", "--config", cfg, "--input", str(img)]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 4  # 2 knn edges + 2 self-loops
        pairs = [tuple(map(int, line.split()[:2])) for line in lines]
        assert pairs == sorted(pairs)
        assert set(pairs) == {(0, 0), (0, 1), (1, 0), (1, 1)}

    def test_dump_stable_across_runs(self, tmp_path, rng, capsys):
        cfg = write_config(tmp_path)
        img = write_image(tmp_path / "img.png", rng)
        main(["inspect-graph", "--config", cfg, "--input", str(img)])
        first = capsys.readouterr().out
        main(["inspect-graph", "--config", cfg, "--input", str(img)])
        assert capsys.readouterr().out == first

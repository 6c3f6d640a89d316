import numpy as np
import pytest

from diffclip import cli
from diffclip.config import ConfigError, dump, parse_config_text, resolve
from diffclip.data import Corpus, build_corpus
from diffclip.evaluate import read_report
from diffclip.train import TrainConfig, file_sha256

TINY = ["epochs=1", "batch_size=16", "vision_dim=16", "vision_depth=1", "vision_heads=2",
        "text_dim=16", "text_depth=1", "text_heads=2", "mlp_ratio=1.0", "context_length=8",
        "embed_dim=8"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_data")
    assert cli.main(["gen-data", "--n", "400", "--seed", "1", "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def checkpoint(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run")
    code = cli.main(["train", "--variant", "diffclip", f"dataset={dataset}", f"out_dir={out}", *TINY])
    assert code == 0
    return out / "model.ckpt"


def last_error(capsys):
    return capsys.readouterr().err.strip().splitlines()[-1]


class TestConfig:
    def test_parse_with_comments(self):
        got = parse_config_text("# run\nepochs = 3  # short\n\nvariant=clip\nlambda_per_head=yes\n")
        assert got == {"epochs": 3, "variant": "clip", "lambda_per_head": True}

    def test_unknown_key_names_line(self):
        with pytest.raises(ConfigError, match=r"run.cfg:2: unknown key 'epoch'"):
            parse_config_text("lr=0.1\nepoch=3\n", "run.cfg")

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="int"):
            parse_config_text("epochs=three")

    def test_overrides_win(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("epochs=7\nlr=0.01\n")
        cfg = resolve(path, {"epochs": 2})
        assert cfg.epochs == 2 and cfg.lr == 0.01

    def test_dump_round_trip(self):
        cfg = TrainConfig(epochs=4, variant="clip")
        assert resolve(None, parse_config_text(dump(cfg))) == cfg


class TestExitCodes:
    def test_missing_dataset(self, tmp_path, capsys):
        code = cli.main(["train", f"dataset={tmp_path / 'none'}", f"out_dir={tmp_path}"])
        assert code == cli.EXIT_MISSING
        assert last_error(capsys).startswith("ERROR 2:")

    def test_missing_checkpoint(self, dataset, tmp_path, capsys):
        code = cli.main(["eval", "--checkpoint", str(tmp_path / "x.ckpt"), "--dataset", str(dataset),
                         "--task", "zeroshot"])
        assert code == 2

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("epochs=1\nbogus=2\n")
        assert cli.main(["train", "--config", str(cfg)]) == cli.EXIT_CONFIG
        assert "bad.cfg:2: unknown key" in last_error(capsys)

    def test_existing_output_needs_overwrite(self, dataset, checkpoint, capsys):
        code = cli.main(["train", f"dataset={dataset}", f"out_dir={checkpoint.parent}", *TINY])
        assert code == 3 and "--overwrite" in last_error(capsys)

    def test_numerical_abort(self, dataset, tmp_path, capsys):
        code = cli.main(["train", "--variant", "diffclip", f"dataset={dataset}",
                         f"out_dir={tmp_path}", *TINY, "lr=1e30", "grad_clip=0"])
        assert code == cli.EXIT_NUMERIC
        assert last_error(capsys).startswith("ERROR 4:")

    def test_bad_image_id(self, dataset, checkpoint, tmp_path):
        code = cli.main(["attn-map", "--checkpoint", str(checkpoint), "--dataset", str(dataset),
                         "--image-id", "5000", "--query", "red", "--out", str(tmp_path / "m")])
        assert code == 3


class TestCommands:
    def test_gen_data_deterministic(self, dataset, tmp_path, capsys):
        assert cli.main(["gen-data", "--n", "400", "--seed", "1", "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        assert "seed=1" in out
        assert (tmp_path / "manifest.tsv").read_bytes() == (dataset / "manifest.tsv").read_bytes()

    def test_train_prints_config_and_is_reproducible(self, dataset, checkpoint, tmp_path, capsys):
        assert cli.main(["train", "--variant", "diffclip", f"dataset={dataset}",
                         f"out_dir={tmp_path}", *TINY]) == 0
        out = capsys.readouterr().out
        assert "variant=diffclip" in out and "epochs=1" in out
        assert file_sha256(tmp_path / "model.ckpt") == file_sha256(checkpoint)
        assert file_sha256(tmp_path / "metrics.tsv") == file_sha256(checkpoint.parent / "metrics.tsv")

    @pytest.mark.parametrize("task,keys", [
        ("zeroshot", ["zeroshot_accuracy"]),
        ("retrieval", ["i2t_recall@1", "t2i_recall@5"]),
        ("probe", ["probe_accuracy"]),
        ("fewshot", ["fewshot_1_accuracy", "fewshot_5_accuracy"]),
    ])
    def test_eval_reports(self, dataset, checkpoint, tmp_path, task, keys):
        out = tmp_path / f"{task}.txt"
        assert cli.main(["eval", "--checkpoint", str(checkpoint), "--dataset", str(dataset),
                         "--task", task, "--out", str(out)]) == 0
        report = read_report(out)
        for k in keys:
            assert 0.0 <= float(report[k]) <= 1.0

    def test_eval_rigged_identity_model(self, dataset):
        corpus = Corpus(dataset)
        caps = corpus.captions(corpus.indices("test"))
        keep = [i for i, c in zip(corpus.indices("test"), caps) if caps.count(c) == 1]
        images = corpus.images[keep]
        corpus.samples = [corpus.samples[i] for i in keep]
        corpus._images = images
        lookup_img = {im.tobytes(): i for i, im in enumerate(images)}
        lookup_cap = {c: i for i, c in enumerate(corpus.captions(range(len(keep))))}

        class Rigged:
            def encode_images(self, batch):
                return np.eye(len(keep))[[lookup_img[im.tobytes()] for im in batch]]

            def encode_texts(self, captions):
                return np.eye(len(keep))[[lookup_cap[c] for c in captions]]

        metrics = cli.evaluate_task(Rigged(), corpus, "retrieval", "test")
        assert metrics["num_pairs"] == len(keep) >= 5
        assert metrics["i2t_recall@1"] == 1.0 and metrics["t2i_recall@1"] == 1.0

    def test_audit(self, tmp_path, capsys):
        assert cli.main(["audit", "--shape", "b16", "--out", str(tmp_path / "a.txt")]) == 0
        out = capsys.readouterr().out
        assert "extra_params=3072" in out
        report = read_report(tmp_path / "a.txt")
        assert 1e-5 <= float(report["overhead_ratio"]) <= 1e-4

    def test_attn_map(self, dataset, checkpoint, tmp_path, capsys):
        prefix = tmp_path / "maps" / "m0"
        assert cli.main(["attn-map", "--checkpoint", str(checkpoint), "--dataset", str(dataset),
                         "--image-id", "0", "--query", "a red circle", "--out", str(prefix)]) == 0
        assert (tmp_path / "maps" / "m0.pgm").read_bytes().startswith(b"P5\n32 32\n255\n")
        heat = np.loadtxt(tmp_path / "maps" / "m0.csv", delimiter=",")
        assert heat.shape == (4, 4) and heat.max() == 1.0
        assert "peak_patch=" in capsys.readouterr().out

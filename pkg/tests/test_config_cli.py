import csv
import io
import textwrap

import numpy as np
import pytest

from stochhf import cli
from stochhf.config import ConfigError, dump_config, parse_config
from stochhf.modelio import ModelFormatError, load_model, save_model
from stochhf.net import Network, sparse_init
from stochhf.training import METRIC_COLUMNS, metrics_csv, run

from .conftest import MNIST_DIR, mnist_available

MNIST_SHF = textwrap.dedent("""\
    [run]
    task = classify
    optimizer = shf
    seed = 0

    [data]
    train_images = a
    train_labels = b
    test_images = c
    test_labels = d

    [model]
    layers = 784, 1200, 1200, 10

    [shf]
    grad_batch = 1000
    curv_batch = 100
    cg_iters = 3
    lambda0 = 1
    weight_decay = 5e-4
    c = 1.0
    """)

CURVES_AE = textwrap.dedent("""\
    [run]
    task = autoencode
    optimizer = shf
    seed = 0

    [data]
    source = synth-curves

    [model]
    layers = 784, 400, 200, 100, 50, 25, 6, 25, 50, 100, 200, 400, 784

    [shf]
    grad_batch = 2000
    curv_batch = 2000
    cg_iters = 25
    lambda0 = 10
    c = 1.0
    """)


def blobs_config(optimizer="shf", epochs=3, seed=0, extra=""):
    body = f"""\
        [run]
        task = classify
        optimizer = {optimizer}
        epochs = {epochs}
        seed = {seed}

        [data]
        source = synth-blobs
        n_train = 200
        n_test = 100
        n_features = 6
        n_classes = 3

        [model]
        layers = 6, 10, 3
        init_fan_in = 4
        init_scale = 0.5

        [shf]
        grad_batch = 50
        curv_batch = 25
        c = 1.0

        [sgd]
        lr0 = 0.5
        lr_decay = 0.99
        batch_size = 20
        """
    return textwrap.dedent(body) + textwrap.dedent(extra)


class TestConfig:
    def test_paper_classification_config_resolves(self):
        cfg = parse_config(MNIST_SHF)
        echo = dump_config(cfg)
        for line in ("grad_batch = 1000", "curv_batch = 100", "cg_iters = 3", "lambda0 = 1.0",
                     "weight_decay = 0.0005", "gamma1 = 0.5", "omega = 60", "xi = 0.75",
                     "hidden_transfer = relu", "standardize = feature", "damping_mode = soft"):
            assert line in echo

    def test_echo_round_trips(self):
        cfg = parse_config(MNIST_SHF)
        again = parse_config(dump_config(cfg))
        assert again.values == cfg.values

    def test_echo_lists_every_key(self):
        from stochhf.config import SCHEMA
        echo = dump_config(parse_config(MNIST_SHF))
        for key in SCHEMA:
            assert f"\n{key.name} = " in "\n" + echo

    def test_curves_autoencoder_config(self):
        cfg = parse_config(CURVES_AE)
        assert cfg["shf.lambda0"] == 10.0
        assert cfg["model.hidden_transfer"] == "logistic"
        assert cfg["data.standardize"] == "none"

    def test_divisibility_rejected(self):
        text = MNIST_SHF.replace("curv_batch = 100", "curv_batch = 300")
        with pytest.raises(ConfigError) as info:
            parse_config(text)
        assert any("curv_batch" in p for p in info.value.problems)

    def test_every_problem_reported(self):
        text = MNIST_SHF.replace("curv_batch = 100", "curv_batch = 300").replace(
            "lambda0 = 1", "lambda0 = 0").replace("c = 1.0", "c = 2.0")
        with pytest.raises(ConfigError) as info:
            parse_config(text)
        keys = " ".join(info.value.problems)
        for key in ("shf.curv_batch", "shf.lambda0", "shf.c"):
            assert key in keys

    def test_missing_seed_and_unknown_key(self):
        text = MNIST_SHF.replace("seed = 0", "colour = red")
        with pytest.raises(ConfigError) as info:
            parse_config(text)
        assert "run.colour: unknown key" in info.value.problems
        assert "run.seed: required" in info.value.problems

    def test_decay_required_for_shf(self):
        with pytest.raises(ConfigError, match="shf.c"):
            parse_config(MNIST_SHF.replace("c = 1.0\n", ""))

    def test_lr_decay_required_for_first_order(self):
        text = blobs_config("momentum").replace("lr_decay = 0.99\n", "")
        with pytest.raises(ConfigError, match="sgd.lr_decay"):
            parse_config(text)

    def test_dsgd_requires_max_norm(self):
        with pytest.raises(ConfigError, match="sgd.max_norm"):
            parse_config(blobs_config("dsgd", extra="dropout = 0.2, 0.5\n"))

    def test_bad_number(self):
        with pytest.raises(ConfigError, match="run.epochs"):
            parse_config(MNIST_SHF.replace("seed = 0", "seed = 0\nepochs = many"))

    def test_seed_override(self):
        assert parse_config(MNIST_SHF, {"run.seed": 17})["run.seed"] == 17


class TestModelFile:
    def test_round_trip(self, tmp_path):
        net = sparse_init(np.random.default_rng(0), (5, 4, 3), ("relu", "softmax"))
        save_model(tmp_path / "m.bin", net)
        back = load_model(tmp_path / "m.bin", ("relu", "softmax"))
        assert back.params.tobytes() == net.params.tobytes()
        assert back.layer_sizes == net.layer_sizes

    def test_layout(self, tmp_path):
        net = Network((1, 1), ("linear",), [2.0, -1.0])
        save_model(tmp_path / "m.bin", net)
        raw = (tmp_path / "m.bin").read_bytes()
        assert raw == (b"SHFNET01" + (2).to_bytes(4, "little") + (1).to_bytes(4, "little") * 2
                       + np.array([2.0, -1.0], dtype="<f8").tobytes())

    def test_bad_files(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"NOTAMODEL")
        with pytest.raises(ModelFormatError):
            load_model(tmp_path / "x.bin", ("linear",))
        net = Network((2, 1), ("linear",))
        save_model(tmp_path / "m.bin", net)
        raw = (tmp_path / "m.bin").read_bytes()
        (tmp_path / "m.bin").write_bytes(raw[:-8])
        with pytest.raises(ModelFormatError):
            load_model(tmp_path / "m.bin", ("linear",))


class TestRun:
    def test_metrics_schema(self):
        _, rows = run(parse_config(blobs_config()), reproducible=True)
        text = metrics_csv(rows)
        parsed = list(csv.reader(io.StringIO(text)))
        assert tuple(parsed[0]) == METRIC_COLUMNS
        assert [r[0] for r in parsed[1:]] == ["0", "1", "2", "3"]
        assert all(r[-1] == "0.0" for r in parsed[1:])
        assert float(parsed[-1][3]) < float(parsed[1][3])

    @pytest.mark.parametrize("optimizer", ["sgd", "momentum", "nag"])
    def test_first_order_runs(self, optimizer):
        _, rows = run(parse_config(blobs_config(optimizer)), reproducible=True)
        assert rows[-1]["train_loss"] < rows[0]["train_loss"]
        assert "lambda" not in rows[-1]

    def test_dropout_shf_runs(self):
        cfg = parse_config(blobs_config().replace("c = 1.0", "c = 1.0\ndropout_hidden = 0.5"))
        _, rows = run(cfg, reproducible=True)
        assert np.isfinite(rows[-1]["test_loss"])

    def test_layer_mismatch(self):
        with pytest.raises(ConfigError, match="model.layers"):
            run(parse_config(blobs_config().replace("layers = 6, 10, 3", "layers = 5, 10, 3")))


class TestCli:
    def test_train_writes_outputs(self, tmp_path, capsys):
        cfg = tmp_path / "run.ini"
        cfg.write_text(blobs_config())
        out = tmp_path / "out"
        assert cli.main(["train", "--config", str(cfg), "--out", str(out), "--seed", "4",
                         "--reproducible", "--quiet"]) == 0
        echo = capsys.readouterr().out
        assert "seed = 4" in echo
        assert (out / "resolved.ini").read_text() == echo
        assert (out / "metrics.csv").read_text().startswith("epoch,train_loss")
        net = load_model(out / "model.bin", ("relu", "softmax"))
        assert net.layer_sizes == (6, 10, 3)

    def test_train_reports_config_errors(self, tmp_path, capsys):
        cfg = tmp_path / "bad.ini"
        cfg.write_text(MNIST_SHF.replace("curv_batch = 100", "curv_batch = 300"))
        assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
        assert "curv_batch" in capsys.readouterr().err

    def test_reproducible_metrics_are_byte_identical(self, tmp_path):
        cfg = tmp_path / "run.ini"
        cfg.write_text(blobs_config())
        for name in ("a", "b"):
            cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / name), "--reproducible", "--quiet"])
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_gradcheck_passes(self, capsys):
        assert cli.main(["gradcheck", "--seed", "0"]) == 0
        first = capsys.readouterr().out
        assert "PASS" in first
        cli.main(["gradcheck", "--seed", "0"])
        assert capsys.readouterr().out == first

    def test_gradcheck_detects_corruption(self, capsys):
        assert cli.main(["gradcheck", "--corrupt-backprop"]) == 1
        assert "FAIL" in capsys.readouterr().out

    def test_compare_empty_dir(self, tmp_path, capsys):
        assert cli.main(["compare", "--config", str(tmp_path)]) == 0
        assert capsys.readouterr().out == "run_name,epoch,metric,value\n"

    def test_compare_two_optimizers(self, tmp_path, capsys):
        (tmp_path / "a_shf.ini").write_text(blobs_config("shf", epochs=2))
        (tmp_path / "b_nag.ini").write_text(blobs_config("nag", epochs=2))
        assert cli.main(["compare", "--config", str(tmp_path), "--reproducible", "--quiet"]) == 0
        rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
        groups = {}
        for r in rows:
            groups.setdefault(r["run_name"], set()).add(r["epoch"])
        assert set(groups) == {"a_shf", "b_nag"}
        assert groups["a_shf"] == groups["b_nag"] == {"0", "1", "2"}

    def test_compare_continues_after_failure(self, tmp_path, capsys):
        (tmp_path / "a_bad.ini").write_text(blobs_config().replace("curv_batch = 25", "curv_batch = 30"))
        (tmp_path / "b_ok.ini").write_text(blobs_config(epochs=1))
        assert cli.main(["compare", "--config", str(tmp_path), "--quiet"]) == 1
        captured = capsys.readouterr()
        rows = list(csv.DictReader(io.StringIO(captured.out)))
        assert rows[0]["run_name"] == "a_bad" and rows[0]["metric"] == "failed"
        assert any(r["run_name"] == "b_ok" for r in rows)
        assert "a_bad failed" in captured.err


DESK_MNIST = """\
    [run]
    task = classify
    optimizer = {optimizer}
    epochs = 20
    seed = 3

    [data]
    train_images = {dir}/train-images-idx3-ubyte
    train_labels = {dir}/train-labels-idx1-ubyte
    test_images = {dir}/t10k-images-idx3-ubyte
    test_labels = {dir}/t10k-labels-idx1-ubyte
    train_limit = 5000
    test_limit = 2000

    [model]
    layers = 784, 200, 10
    init_scale = 0.1

    [shf]
    grad_batch = 1000
    curv_batch = 100
    weight_decay = 2e-5
    dropout_input = 0.2
    dropout_hidden = 0.5
    c = 1.0

    [sgd]
    lr0 = 1.0
    lr_decay = 0.998
    max_norm = 15
    dropout = 0.2, 0.5
    """


@pytest.mark.slow
@pytest.mark.skipif(not mnist_available(), reason="MNIST files not available")
def test_compare_dropout_sgd_and_dropout_shf_on_mnist(tmp_path, capsys):
    for name, opt in (("dshf", "shf"), ("dsgd_l", "dsgd")):
        (tmp_path / f"{name}.ini").write_text(textwrap.dedent(DESK_MNIST).format(optimizer=opt, dir=MNIST_DIR))
    assert cli.main(["compare", "--config", str(tmp_path), "--reproducible", "--quiet"]) == 0
    err = {}
    for r in csv.DictReader(io.StringIO(capsys.readouterr().out)):
        if r["metric"] == "test_error":
            err[(r["run_name"], int(r["epoch"]))] = float(r["value"])
    for name in ("dshf", "dsgd_l"):
        assert err[(name, 20)] < err[(name, 1)]

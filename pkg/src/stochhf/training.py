"""Run orchestration shared by the CLI commands: data, network, optimizer,
per-epoch evaluation and the metrics CSV."""

from __future__ import annotations

import contextlib
import csv
import io
import time

import numpy as np

from . import net as nn
from .baselines import FirstOrderConfig, train_first_order
from .config import ConfigError
from .data import (Dataset, load_csv, load_idx_dataset, standardize, synth_blobs,
                   synth_curves)
from .shf import ShfConfig, train_epochs

METRIC_COLUMNS = (
    "epoch", "train_loss", "train_error", "test_loss", "test_error", "lambda", "gamma",
    "beta", "mean_rho", "mean_alpha", "rejected_steps", "wall_seconds",
)


def load_datasets(cfg):
    task, src = cfg.task, cfg["data.source"]
    if src in ("mnist", "idx"):
        k = 10 if src == "mnist" else cfg["data.n_classes"]
        train = load_idx_dataset(cfg["data.train_images"], cfg["data.train_labels"], task, "train",
                                 cfg["data.train_limit"], k)
        test = load_idx_dataset(cfg["data.test_images"], cfg["data.test_labels"], task, "test",
                                cfg["data.test_limit"], k)
    elif src == "csv":
        train = load_csv(cfg["data.train_csv"], task, "train")
        k = train.targets.shape[1] if task == "classify" else None
        test = load_csv(cfg["data.test_csv"], task, "test", k)
        train, test = train.take(slice(cfg["data.train_limit"])), test.take(slice(cfg["data.test_limit"]))
    elif src == "synth-curves":
        rng = np.random.default_rng([cfg["run.seed"], 3])
        train = synth_curves(rng, cfg["data.n_train"])
        test = synth_curves(rng, cfg["data.n_test"])
        test.split = "test"
    else:
        rng = np.random.default_rng([cfg["run.seed"], 3])
        kw = dict(n_features=cfg["data.n_features"], k=cfg["data.n_classes"])
        train, centers = synth_blobs(rng, cfg["data.n_train"], **kw)
        test, _ = synth_blobs(rng, cfg["data.n_test"], centers=centers, **kw)
        test.split = "test"
    if cfg["data.standardize"] != "none":
        Xtr, Xte, _ = standardize(train.inputs, test.inputs, cfg["data.standardize"] == "feature")
        train = Dataset(Xtr, train.targets, "train", train.labels)
        test = Dataset(Xte, test.targets, "test", test.labels)
    return train, test


def loss_spec_for(cfg, n_out):
    if cfg.task == "classify":
        return nn.LossSpec("softmax-cross-entropy", n_out)
    return nn.LossSpec("binary-cross-entropy", n_out)


def build_network(cfg, train):
    layers = cfg["model.layers"]
    n_out = train.targets.shape[1]
    problems = []
    if layers[0] != train.n_features:
        problems.append(f"model.layers: input size {layers[0]} but data has {train.n_features} features")
    if layers[-1] != n_out:
        problems.append(f"model.layers: output size {layers[-1]} but targets have {n_out} columns")
    if problems:
        raise ConfigError(problems)
    spec = loss_spec_for(cfg, n_out)
    transfers = [cfg["model.hidden_transfer"]] * (len(layers) - 2) + [spec.output_transfer]
    rng = np.random.default_rng([cfg["run.seed"], 0])
    net = nn.sparse_init(rng, layers, transfers, cfg["model.init_fan_in"], cfg["model.init_bias"],
                         cfg["model.init_scale"])
    return net, spec


def shf_config(cfg):
    return ShfConfig(
        decay_c=cfg["shf.c"],
        grad_batch=cfg["shf.grad_batch"],
        curv_batch=cfg["shf.curv_batch"],
        cg_iters=cfg["shf.cg_iters"],
        lambda0=cfg["shf.lambda0"],
        gamma1=cfg["shf.gamma1"],
        gamma_shutoff_epoch=cfg["shf.gamma_shutoff_epoch"],
        omega=cfg["shf.omega"],
        xi=cfg["shf.xi"],
        weight_decay=cfg["shf.weight_decay"],
        damping_mode=cfg["shf.damping_mode"],
        cg_termination=cfg["shf.cg_termination"],
        cg_epsilon=cfg["shf.cg_epsilon"],
        dropout_input=cfg["shf.dropout_input"],
        dropout_hidden=cfg["shf.dropout_hidden"],
    )


def first_order_config(cfg):
    method = {"sgd": "sgd", "momentum": "momentum", "dsgd": "momentum", "nag": "nag"}[cfg.optimizer]
    return FirstOrderConfig(
        lr_decay=cfg["sgd.lr_decay"],
        method=method,
        lr0=cfg["sgd.lr0"],
        p0=cfg["sgd.p0"],
        p_final=cfg["sgd.p_final"],
        momentum_epochs=cfg["sgd.momentum_epochs"],
        batch_size=cfg["sgd.batch_size"],
        max_norm=cfg["sgd.max_norm"],
        dropout=list(cfg["sgd.dropout"]),
        weight_decay=cfg["sgd.weight_decay"],
    )


def mean_network(cfg, net):
    """Network used for evaluation: dropout-trained weights are scaled."""
    if cfg.optimizer == "shf":
        if cfg["shf.dropout_input"] or cfg["shf.dropout_hidden"]:
            return nn.inference_net(net, cfg["shf.dropout_hidden"], cfg["shf.dropout_input"])
        return net
    probs = {i: p for i, p in enumerate(cfg["sgd.dropout"]) if p}
    return nn.scale_for_dropout(net, probs) if probs else net


def evaluate(net, ds, spec, task, batch=2000):
    """Mean data loss (no weight decay) and error: misclassification rate for
    classification, per-example summed squared reconstruction error for
    autoencoders."""
    total_loss, total_err = 0.0, 0.0
    for s in range(0, len(ds), batch):
        X, T = ds.inputs[s:s + batch], ds.targets[s:s + batch]
        cache = nn.forward(net, X)
        total_loss += float(nn.example_losses(cache, T, spec).sum())
        out = cache.output.T
        if task == "classify":
            total_err += float((out.argmax(axis=1) != T.argmax(axis=1)).sum())
        else:
            total_err += float(((out - T) ** 2).sum())
    return total_loss / len(ds), total_err / len(ds)


@contextlib.contextmanager
def reproducible_threads(enabled):
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1):
        yield


def run(cfg, reproducible=False, log=None, data=None):
    """Train per ``cfg``; returns ``(net, rows)`` with one metrics dict per
    epoch, epoch 0 being the initial network."""
    with reproducible_threads(reproducible):
        train, test = data if data is not None else load_datasets(cfg)
        net, spec = build_network(cfg, train)
        rows = []

        def record(epoch, net, extra, wall):
            ev = mean_network(cfg, net)
            tr_loss, tr_err = evaluate(ev, train, spec, cfg.task)
            te_loss, te_err = evaluate(ev, test, spec, cfg.task)
            row = dict(epoch=epoch, train_loss=tr_loss, train_error=tr_err, test_loss=te_loss,
                       test_error=te_err, wall_seconds=0.0 if reproducible else wall)
            row.update(extra)
            rows.append(row)
            if log is not None:
                log(format_progress(row))

        epochs, seed = cfg["run.epochs"], cfg["run.seed"]
        t_start = time.perf_counter()
        if cfg.optimizer == "shf":
            scfg = shf_config(cfg)
            record(0, net, dict(**{"lambda": scfg.lambda0}, gamma=scfg.gamma1, beta=1.0), 0.0)

            def on_epoch(net, s, state):
                record(s.epoch, net, {"lambda": s.damping, "gamma": s.gamma, "beta": s.beta,
                                      "mean_rho": s.mean_rho, "mean_alpha": s.mean_alpha,
                                      "rejected_steps": s.rejected_steps},
                       time.perf_counter() - t_start)

            train_epochs(net, train, scfg, spec, epochs, seed, on_epoch)
        else:
            fcfg = first_order_config(cfg)
            record(0, net, {}, 0.0)

            def on_epoch(net, rec, state):
                record(rec.epoch, net, {}, time.perf_counter() - t_start)

            train_first_order(net, train, fcfg, spec, epochs, seed, on_epoch)
    return net, rows


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_progress(row):
    parts = [f"epoch {row['epoch']:4d}",
             f"train_loss {row['train_loss']:.5f}", f"train_err {row['train_error']:.5f}",
             f"test_loss {row['test_loss']:.5f}", f"test_err {row['test_error']:.5f}"]
    if "lambda" in row:
        parts.append(f"lambda {row['lambda']:.4g}")
    return "  ".join(parts)


def metrics_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in METRIC_COLUMNS])
    return buf.getvalue()

"""Threshold and sequence-length sweeps.

A threshold sweep evaluates one set of weights with the change-based cell
at several thresholds and reports accuracy next to sparsity and operation
counts.  A sequence-length sweep trains one model per clip length.
"""

from __future__ import annotations

from dataclasses import replace

from .cells import CHANGE_BASED
from .metrics import SparsityTrace, detection_rates, sparsity_summary
from .model import Model, ModelConfig, build_model
from .tensor import OpsCounter
from .training import TrainConfig, evaluate_streams, prepare_streams, sub_seed, train

THETA_COLUMNS = [
    "theta", "p3", "p5", "p10", "inp_sp", "hid_sp", "tot_sp", "net_tot_sp",
    "dense_macs_per_frame", "effective_macs_per_frame", "conv_effective_macs_per_frame",
]
LAYER_COLUMNS = ["theta", "layer", "inp_sp", "hid_sp", "tot_sp", "dense_macs", "effective_macs"]
SEQLEN_COLUMNS = ["seq_len", "p3", "p5", "p10"]


def evaluate_with_stats(model: Model, streams, seq_len, region="val", batch=16):
    """Detection rates plus sparsity and per-frame MACs over one region."""
    counter, trace = OpsCounter(), SparsityTrace()
    preds, labels = evaluate_streams(model, streams, seq_len, region, batch, counter, trace)
    frames = len(preds)
    summary = sparsity_summary(trace)
    row = dict(detection_rates(preds, labels))
    conv = summary["conv"]
    row.update(
        inp_sp=conv["inp_sp"],
        hid_sp=conv["hid_sp"],
        tot_sp=conv["tot_sp"],
        net_tot_sp=summary["network"]["tot_sp"],
        dense_macs_per_frame=counter.dense_macs / frames,
        effective_macs_per_frame=counter.effective_macs / frames,
        conv_effective_macs_per_frame=conv["effective_macs"] / frames,
    )
    return row, summary, preds


def sweep_theta(model: Model, datasets, thetas, seq_len=None, region="val", split=0.8, batch=16):
    """Evaluate ``model``'s weights with the change-based cell at each threshold.

    Returns ``(rows, layer_rows)``: one summary row per threshold and one
    row per threshold and layer.
    """
    seq_len = seq_len or model.config.seq_len
    streams = prepare_streams(datasets, split, model.config.np_dtype)
    rows, layer_rows = [], []
    for theta in thetas:
        m = model.with_cell(CHANGE_BASED, theta)
        row, summary, _ = evaluate_with_stats(m, streams, seq_len, region, batch)
        rows.append({"theta": float(theta), **row})
        for lr in summary["layers"]:
            layer_rows.append({"theta": float(theta), **lr})
    return rows, layer_rows


def sweep_sequence_length(datasets, seq_lens, train_config: TrainConfig, model_config: ModelConfig,
                          progress=None):
    """Train one model per clip length with otherwise identical settings."""
    rows = []
    for T in seq_lens:
        if T < 2:
            raise ValueError("sequence lengths must be at least 2")
        cfg = replace(model_config, seq_len=T)
        model = build_model(cfg, sub_seed(train_config.seed, "init"))
        tc = replace(train_config, seq_len=T)
        train(model, datasets, tc)
        streams = prepare_streams(datasets, tc.split, cfg.np_dtype)
        preds, labels = evaluate_streams(model, streams, T, "val", tc.eval_batch)
        row = {"seq_len": T, **detection_rates(preds, labels)}
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows

"""Detection rate, activation sparsity and operation accounting."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .tensor import OpsCounter

INPUT = "input"
HIDDEN = "hidden"


def detection_rate(predictions, labels, p):
    """Fraction of frames whose predicted centre is strictly closer than ``p`` pixels."""
    pred = np.asarray(predictions, dtype=np.float64).reshape(-1, 2)
    lab = np.asarray(labels, dtype=np.float64).reshape(-1, 2)
    if pred.shape != lab.shape:
        raise ValueError(f"{len(pred)} predictions vs {len(lab)} labels")
    if len(pred) == 0:
        raise ValueError("detection rate of an empty set")
    if p <= 0:
        raise ValueError("p must be positive")
    dist = np.hypot(pred[:, 0] - lab[:, 0], pred[:, 1] - lab[:, 1])
    return float(np.mean(dist < p))


def detection_rates(predictions, labels, ps=(3, 5, 10)):
    return {f"p{p}": detection_rate(predictions, labels, p) for p in ps}


@dataclass
class SparsityTrace:
    """Zero counts and MAC counts per ``(layer, path)`` per timestep.

    Each record is ``[zeros, numel, dense_macs, effective_macs]`` summed over
    whatever batch of clips was evaluated at that timestep.
    """

    steps: dict = field(default_factory=lambda: defaultdict(list))

    def record(self, t, key, zeros, numel, dense, effective):
        rows = self.steps[key]
        while len(rows) <= t:
            rows.append([0, 0, 0, 0])
        row = rows[t]
        row[0] += int(zeros)
        row[1] += int(numel)
        row[2] += int(dense)
        row[3] += int(effective)

    def merge(self, other: "SparsityTrace"):
        for key, rows in other.steps.items():
            for t, r in enumerate(rows):
                self.record(t, key, *r)

    def totals(self, key):
        rows = self.steps.get(key)
        if not rows:
            return np.zeros(4, dtype=np.int64)
        return np.asarray(rows, dtype=np.int64).sum(axis=0)

    def per_step(self, key):
        """Zero fraction at each timestep."""
        rows = np.asarray(self.steps[key], dtype=np.float64)
        return rows[:, 0] / np.maximum(rows[:, 1], 1)

    @property
    def layers(self):
        seen = []
        for layer, _ in self.steps:
            if layer not in seen:
                seen.append(layer)
        return seen

    def __bool__(self):
        return bool(self.steps)


def _frac(num, den):
    return float(num) / float(den) if den else 0.0


def sparsity_summary(trace: SparsityTrace):
    """Per-layer and network sparsity figures.

    ``inp_sp``/``hid_sp`` are element-weighted zero fractions of the tensors
    feeding each path.  ``tot_sp`` is MAC-weighted: one minus effective over
    dense MACs across the paths involved, so effective MACs always equal
    dense MACs times ``1 - tot_sp``.
    """
    if not trace:
        raise ValueError("empty sparsity trace")
    rows = []
    conv = {"zeros_in": 0, "numel_in": 0, "zeros_h": 0, "numel_h": 0, "dense": 0, "eff": 0}
    net_dense = net_eff = 0
    layer_inp, layer_hid = [], []
    for layer in trace.layers:
        zi, ni, di, ei = trace.totals((layer, INPUT))
        zh, nh, dh, eh = trace.totals((layer, HIDDEN))
        is_conv = (layer, HIDDEN) in trace.steps
        row = {
            "layer": layer,
            "inp_sp": _frac(zi, ni),
            "hid_sp": _frac(zh, nh) if is_conv else float("nan"),
            "tot_sp": 1.0 - _frac(ei + eh, di + dh),
            "dense_macs": int(di + dh),
            "effective_macs": int(ei + eh),
        }
        rows.append(row)
        net_dense += di + dh
        net_eff += ei + eh
        if is_conv:
            conv["zeros_in"] += zi
            conv["numel_in"] += ni
            conv["zeros_h"] += zh
            conv["numel_h"] += nh
            conv["dense"] += di + dh
            conv["eff"] += ei + eh
            layer_inp.append(row["inp_sp"])
            layer_hid.append(row["hid_sp"])
    conv_row = {
        "layer": "conv",
        "inp_sp": _frac(conv["zeros_in"], conv["numel_in"]),
        "hid_sp": _frac(conv["zeros_h"], conv["numel_h"]),
        "tot_sp": 1.0 - _frac(conv["eff"], conv["dense"]),
        "inp_sp_layer_avg": float(np.mean(layer_inp)) if layer_inp else float("nan"),
        "hid_sp_layer_avg": float(np.mean(layer_hid)) if layer_hid else float("nan"),
        "dense_macs": int(conv["dense"]),
        "effective_macs": int(conv["eff"]),
    }
    network = {
        "tot_sp": 1.0 - _frac(net_eff, net_dense),
        "dense_macs": int(net_dense),
        "effective_macs": int(net_eff),
    }
    return {"layers": rows, "conv": conv_row, "network": network}


def layer_resolutions(config):
    """Spatial ``(H, W)`` at which each recurrent layer runs."""
    h, w = config.height, config.width
    res = []
    for _ in config.channels:
        res.append((h, w))
        h, w = h // 2, w // 2
    return res


def count_dense_macs(config):
    """Closed-form dense MACs per timestep, keyed like the runtime counters."""
    k2 = config.kernel * config.kernel
    out = {}
    in_ch = config.in_channels
    for l, ((h, w), hid) in enumerate(zip(layer_resolutions(config), config.channels), 1):
        out[(f"layer{l}", INPUT)] = k2 * in_ch * 4 * hid * h * w
        out[(f"layer{l}", HIDDEN)] = k2 * hid * 4 * hid * h * w
        in_ch = hid
    out[("fc1", INPUT)] = config.flat_features * config.fc_hidden
    out[("fc2", INPUT)] = config.fc_hidden * config.outputs
    return out


@dataclass
class OpsReport:
    per_layer: dict  # (layer, path) -> (dense, effective)
    timesteps: int
    sequences: int

    @classmethod
    def from_counter(cls, counter: OpsCounter, timesteps, sequences=1):
        return cls({k: tuple(v) for k, v in counter.per_layer.items()}, timesteps, sequences)

    @property
    def dense_macs(self):
        return sum(d for d, _ in self.per_layer.values())

    @property
    def effective_macs(self):
        return sum(e for _, e in self.per_layer.values())

    def conv_totals(self):
        d = sum(v[0] for k, v in self.per_layer.items() if k[0].startswith("layer"))
        e = sum(v[1] for k, v in self.per_layer.items() if k[0].startswith("layer"))
        return d, e

    def per_frame(self):
        return self.dense_macs / self.timesteps, self.effective_macs / self.timesteps

    def per_sequence(self):
        return self.dense_macs / self.sequences, self.effective_macs / self.sequences


def reduction_ratio(baseline: OpsReport, candidate: OpsReport):
    """Baseline effective MACs per frame over the candidate's."""
    return baseline.per_frame()[1] / candidate.per_frame()[1]


def to_csv(rows, columns):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row.get(k, "")) for k in columns})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}" if np.isfinite(v) else ""
    return v


def pretty_table(rows, columns):
    cells = [[str(_fmt(r.get(c, ""))) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)

"""The pupil-tracking network: stacked recurrent conv layers and an FC head.

Each recurrent layer runs cell -> batch norm -> ReLU -> 2x2 max pool per
timestep; the last layer's pooled map is flattened into FC(128) + ReLU and
a linear FC(2) that regresses the pupil centre in normalised ``[0, 1]``
coordinates.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .cells import CHANGE_BASED, VANILLA, CellParams, CellState, cell_backward, cell_step
from .errors import ShapeError, WeightFileError
from .metrics import HIDDEN, INPUT, SparsityTrace

WEIGHT_MAGIC = b"3ETW0001"


@dataclass(frozen=True)
class ModelConfig:
    width: int = 80
    height: int = 60
    in_channels: int = 1
    channels: tuple = (8, 16, 32, 64)
    kernel: int = 3
    fc_hidden: int = 128
    outputs: int = 2
    cell: str = VANILLA
    theta: float = 0.0
    seq_len: int = 40
    dtype: str = "float32"
    signed_threshold: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.cell not in (VANILLA, CHANGE_BASED):
            raise ValueError(f"cell must be '{VANILLA}' or '{CHANGE_BASED}'")
        if self.theta < 0:
            raise ValueError("theta must be non-negative")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        h, w = self.height, self.width
        for n, _ in enumerate(self.channels, 1):
            if h < 2 or w < 2:
                raise ValueError(
                    f"{self.width}x{self.height} input collapses before pool {n}"
                )
            h, w = h // 2, w // 2

    @property
    def pooled_size(self):
        h, w = self.height, self.width
        for _ in self.channels:
            h, w = h // 2, w // 2
        return h, w

    @property
    def flat_features(self):
        h, w = self.pooled_size
        return self.channels[-1] * h * w

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_items(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_items(cls, items):
        kw = {}
        for f in fields(cls):
            if f.name not in items:
                continue
            raw = items[f.name]
            default = f.default
            if isinstance(default, tuple):
                kw[f.name] = tuple(int(v) for v in raw.split(",") if v)
            elif isinstance(default, bool):
                kw[f.name] = raw == "True"
            elif isinstance(default, int):
                kw[f.name] = int(raw)
            elif isinstance(default, float):
                kw[f.name] = float(raw)
            else:
                kw[f.name] = raw
        return cls(**kw)


def parameter_count(config: ModelConfig):
    """Closed-form count of trainable parameters."""
    k2 = config.kernel ** 2
    total = 0
    in_ch = config.in_channels
    for h in config.channels:
        total += 4 * k2 * (in_ch + h) * h + 4 * h + 2 * h
        in_ch = h
    total += config.flat_features * config.fc_hidden + config.fc_hidden
    total += config.fc_hidden * config.outputs + config.outputs
    return total


@dataclass
class ModelOutput:
    predictions: np.ndarray  # [T, 2] or [B, T, 2] in pixels
    normalized: np.ndarray
    trace: SparsityTrace | None = None


@dataclass
class ForwardCache:
    steps: list = field(default_factory=list)


class Model:
    """Weights plus the forward/backward passes over clip batches."""

    def __init__(self, config: ModelConfig, params: dict, bn_stats: list):
        self.config = config
        self.params = params
        self.bn_stats = bn_stats

    # -- parameter plumbing -------------------------------------------------

    @property
    def num_layers(self):
        return len(self.config.channels)

    def cell_params(self, l):
        p = self.params
        return CellParams(p[f"layer{l}.wx"], p[f"layer{l}.wh"], p[f"layer{l}.b"])

    def trainable_names(self):
        return list(self.params)

    def num_parameters(self):
        return int(sum(v.size for v in self.params.values()))

    def state_dict(self):
        """All tensors that go into a weight file, in file order."""
        out = {}
        for name, value in self.params.items():
            out[name] = value
            if name.endswith(".beta"):
                l = int(name[2:].split(".")[0])
                out[f"bn{l}.running_mean"] = self.bn_stats[l - 1].running_mean
                out[f"bn{l}.running_var"] = self.bn_stats[l - 1].running_var
        return out

    def copy(self):
        return Model(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            [
                T.BatchNormStats(s.running_mean.copy(), s.running_var.copy(), s.momentum, s.eps)
                for s in self.bn_stats
            ],
        )

    def with_cell(self, cell=None, theta=None):
        """A model sharing these weights but running a different cell kind or threshold."""
        cfg = replace(
            self.config,
            cell=self.config.cell if cell is None else cell,
            theta=self.config.theta if theta is None else float(theta),
        )
        return Model(cfg, self.params, self.bn_stats)

    # -- forward ------------------------------------------------------------

    def forward(self, frames, mode="eval", counter=None, trace=None, keep_cache=False):
        """Run a batch of clips.

        ``frames`` is ``[B, T, H, W]`` (or ``[T, H, W]``).  States start at
        zero for every clip.  Returns normalised predictions ``[B, T, 2]``
        and, with ``keep_cache``, the tensors needed by :meth:`backward`.
        """
        cfg = self.config
        dt = cfg.np_dtype
        frames = np.asarray(frames)
        if frames.ndim == 3:
            frames = frames[None]
        if frames.ndim != 4 or frames.shape[2:] != (cfg.height, cfg.width):
            raise ShapeError(
                f"frames must be [B, T, {cfg.height}, {cfg.width}], got {frames.shape}"
            )
        B, steps = frames.shape[:2]
        states = []
        h, w = cfg.height, cfg.width
        for hid in cfg.channels:
            states.append(CellState.zeros((B, hid, h, w), dt))
            h, w = h // 2, w // 2
        preds = np.empty((B, steps, cfg.outputs), dtype=dt)
        cache = ForwardCache() if keep_cache else None
        count = counter is not None or trace is not None
        for t in range(steps):
            step_counter = T.OpsCounter() if count else None
            x = frames[:, t, None].astype(dt)
            layer_caches = []
            for l in range(1, self.num_layers + 1):
                params = self.cell_params(l)
                H, states[l - 1], cell_cache = cell_step(
                    params, x, states[l - 1], cfg.cell, cfg.theta, step_counter,
                    f"layer{l}", cfg.signed_threshold,
                )
                if trace is not None:
                    for path, operand in ((INPUT, cell_cache.x), (HIDDEN, cell_cache.rec)):
                        d, e = step_counter.per_layer[(f"layer{l}", path)]
                        trace.record(t, (f"layer{l}", path), operand.size - np.count_nonzero(operand),
                                     operand.size, d, e)
                y, bn_cache = T.batchnorm_forward(
                    H, self.params[f"bn{l}.gamma"], self.params[f"bn{l}.beta"],
                    self.bn_stats[l - 1], mode,
                )
                r = T.relu(y)
                x, pool_cache = T.maxpool2x2_forward(r)
                if keep_cache:
                    layer_caches.append((cell_cache, bn_cache, y, pool_cache))
            flat = x.reshape(B, -1)
            z1 = T.fc_forward(flat, self.params["fc1.w"], self.params["fc1.b"], step_counter, ("fc1", INPUT))
            a1 = T.relu(z1)
            out = T.fc_forward(a1, self.params["fc2.w"], self.params["fc2.b"], step_counter, ("fc2", INPUT))
            preds[:, t] = out
            if trace is not None:
                for key, operand in ((("fc1", INPUT), flat), (("fc2", INPUT), a1)):
                    d, e = step_counter.per_layer[key]
                    trace.record(t, key, operand.size - np.count_nonzero(operand), operand.size, d, e)
            if counter is not None:
                counter.merge(step_counter)
            if keep_cache:
                cache.steps.append((layer_caches, x.shape, flat, z1, a1))
        return preds, cache

    def backward(self, cache: ForwardCache, grad_preds):
        """Backpropagate through time.  Returns gradients keyed like ``params``."""
        if cache is None or not cache.steps:
            raise ValueError("backward needs a forward cache (keep_cache=True)")
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        carried = [None] * self.num_layers
        for t in range(len(cache.steps) - 1, -1, -1):
            layer_caches, pooled_shape, flat, z1, a1 = cache.steps[t]
            g = grad_preds[:, t]
            d_a1, gw, gb = T.fc_backward(a1, self.params["fc2.w"], g)
            grads["fc2.w"] += gw
            grads["fc2.b"] += gb
            d_z1 = T.relu_backward(z1, d_a1)
            d_flat, gw, gb = T.fc_backward(flat, self.params["fc1.w"], d_z1)
            grads["fc1.w"] += gw
            grads["fc1.b"] += gb
            d_x = d_flat.reshape(pooled_shape)
            for l in range(self.num_layers, 0, -1):
                cell_cache, bn_cache, y, pool_cache = layer_caches[l - 1]
                d_r = T.maxpool2x2_backward(pool_cache, d_x)
                d_y = T.relu_backward(y, d_r)
                d_H, g_gamma, g_beta = T.batchnorm_backward(bn_cache, d_y)
                grads[f"bn{l}.gamma"] += g_gamma
                grads[f"bn{l}.beta"] += g_beta
                if carried[l - 1] is None:
                    gs = CellState(d_H, np.zeros_like(d_H), np.zeros_like(d_H))
                else:
                    c = carried[l - 1]
                    gs = CellState(c.H + d_H, c.C, c.H_prev)
                d_x, pg, carried[l - 1] = cell_backward(
                    self.cell_params(l), cell_cache, gs, need_input_grad=l > 1
                )
                grads[f"layer{l}.wx"] += pg.wx
                grads[f"layer{l}.wh"] += pg.wh
                grads[f"layer{l}.b"] += pg.b
        for name, g in grads.items():
            T.check_finite(g, f"gradient of {name}")
        return grads


def build_model(config: ModelConfig, seed=0):
    """Uniform(+-1/sqrt(fan_in)) weights, forget-gate bias 1, other biases 0."""
    rng = np.random.default_rng(seed)
    dt = config.np_dtype
    k = config.kernel
    params = {}

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dt)

    in_ch = config.in_channels
    for l, h in enumerate(config.channels, 1):
        params[f"layer{l}.wx"] = uniform((4 * h, in_ch, k, k), in_ch * k * k)
        params[f"layer{l}.wh"] = uniform((4 * h, h, k, k), h * k * k)
        b = np.zeros(4 * h, dtype=dt)
        b[h : 2 * h] = 1.0
        params[f"layer{l}.b"] = b
        params[f"bn{l}.gamma"] = np.ones(h, dtype=dt)
        params[f"bn{l}.beta"] = np.zeros(h, dtype=dt)
        in_ch = h
    params["fc1.w"] = uniform((config.fc_hidden, config.flat_features), config.flat_features)
    params["fc1.b"] = np.zeros(config.fc_hidden, dtype=dt)
    params["fc2.w"] = uniform((config.outputs, config.fc_hidden), config.fc_hidden)
    params["fc2.b"] = np.zeros(config.outputs, dtype=dt)
    bn = [T.BatchNormStats.fresh(h, dt) for h in config.channels]
    model = Model(config, params, bn)
    assert model.num_parameters() == parameter_count(config)
    return model


def to_pixels(normalized, config: ModelConfig):
    scale = np.array([config.width, config.height], dtype=np.float64)
    return np.asarray(normalized, dtype=np.float64) * scale


def to_normalized(pixels, config: ModelConfig):
    scale = np.array([config.width, config.height], dtype=np.float64)
    return np.asarray(pixels, dtype=np.float64) / scale


def forward_sequence(model: Model, sample, counter=None, trace=True):
    """Evaluate one clip (a ``SequenceSample`` or a ``[T, H, W]`` array) in eval mode."""
    frames = getattr(sample, "frames", sample)
    tr = SparsityTrace() if trace is True else (trace or None)
    norm, _ = model.forward(np.asarray(frames)[None], "eval", counter, tr)
    return ModelOutput(to_pixels(norm[0], model.config), norm[0], tr)


# ---------------------------------------------------------------------------
# weight files


def _header_text(model: Model):
    lines = [f"config {k}={v}" for k, v in model.config.to_items().items()]
    offset = 0
    for name, value in model.state_dict().items():
        nbytes = value.size * 4
        shape = ",".join(map(str, value.shape))
        lines.append(f"tensor {name} shape={shape} offset={offset} nbytes={nbytes}")
        offset += nbytes
    return ("\n".join(lines) + "\n").encode()


def encode_weights(model: Model) -> bytes:
    header = _header_text(model)
    payload = b"".join(
        np.ascontiguousarray(v, dtype="<f4").tobytes() for v in model.state_dict().values()
    )
    return WEIGHT_MAGIC + struct.pack("<I", len(header)) + header + payload


def save_weights(model: Model, path):
    from .events import _atomic_write

    _atomic_write(Path(path), encode_weights(model))


def _parse_header(text):
    items, tensors = {}, []
    for line in text.splitlines():
        if not line.strip():
            continue
        kind, _, rest = line.partition(" ")
        if kind == "config":
            k, _, v = rest.partition("=")
            items[k] = v
        elif kind == "tensor":
            name, *attrs = rest.split(" ")
            kv = dict(a.split("=", 1) for a in attrs)
            shape = tuple(int(s) for s in kv["shape"].split(",") if s)
            tensors.append((name, shape, int(kv["offset"]), int(kv["nbytes"])))
        else:
            raise WeightFileError(f"unknown header line {line!r}")
    return items, tensors


def decode_weights(raw: bytes, config: ModelConfig | None = None) -> Model:
    if len(raw) < 12 or raw[:4] != WEIGHT_MAGIC[:4]:
        raise WeightFileError("not a weight file (bad magic)")
    if raw[:8] != WEIGHT_MAGIC:
        raise WeightFileError(
            f"weight file version {raw[4:8].decode(errors='replace')} is not supported "
            f"(expected {WEIGHT_MAGIC[4:].decode()})"
        )
    (hlen,) = struct.unpack("<I", raw[8:12])
    if 12 + hlen > len(raw):
        raise WeightFileError("truncated header")
    try:
        items, tensors = _parse_header(raw[12 : 12 + hlen].decode())
    except (UnicodeDecodeError, ValueError, KeyError) as exc:
        raise WeightFileError(f"malformed header: {exc}") from None
    file_config = ModelConfig.from_items(items)
    target = config if config is not None else file_config
    model = build_model(target, seed=0)
    expected = model.state_dict()
    payload = memoryview(raw)[12 + hlen :]
    found = {name: (shape, off, nb) for name, shape, off, nb in tensors}
    for name, value in expected.items():
        if name not in found:
            raise WeightFileError("missing tensor in weight file", tensor=name)
        shape, off, nb = found[name]
        if shape != value.shape:
            raise WeightFileError(
                f"shape {shape} in file does not match {value.shape} in the running config",
                tensor=name,
            )
        if nb != value.size * 4 or off + nb > len(payload):
            raise WeightFileError("payload truncated or mis-sized", tensor=name)
        value[...] = np.frombuffer(payload[off : off + nb], "<f4").reshape(shape)
    extra = [n for n in found if n not in expected]
    if extra:
        raise WeightFileError("weight file has tensors the config does not", tensor=extra[0])
    return model


def load_weights(path, config: ModelConfig | None = None) -> Model:
    """Load a model; with ``config`` given, shapes are checked against it."""
    return decode_weights(Path(path).read_bytes(), config)

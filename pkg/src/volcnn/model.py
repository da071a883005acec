"""Volumetric classifier: four conv blocks, two fully connected layers,
optional age conditioning.

Every block is conv -> norm -> ReLU -> max pool. Widths scale with a single
widening factor f: the blocks carry 4f, 32f, 64f, 64f channels. Optional
extra blocks (conv k3 s1 p1, instance norm, ReLU) sit between block4 and the
classifier head and preserve both extent and channel count.

Age conditioning modes:
  none     ignore age
  encoded  sinusoidal age embedding -> Linear -> LayerNorm -> Linear, added
           to the first fully connected layer's output before its ReLU
  concat   age / 120 appended to the flattened features as one extra input

Small-input adaptation: when a crop is too small for a block's printed
hyperparameters, dilation shrinks to the largest value that keeps at least
two output positions (falling back to one), and pooling windows shrink to
the input extent. Keeping two positions matters because a 1-voxel feature
map makes the following instance norm degenerate (its output collapses to
the channel bias). Kernel sizes are never reduced, so genuinely undersized
inputs still fail with a layer-named ShapeError. The full-size crop of 96
never triggers any adaptation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import ops, tensor
from .tensor import Rng, ShapeError, Tensor

FIRST_LAYER_VARIANTS = {
    # name: (kernel, stride, padding, dilation)
    "K1S1": (1, 1, 0, 1),
    "K3S2": (3, 2, 0, 1),
    "K7S4": (7, 4, 3, 1),
}

FC1_WIDTH = 1024
AGE_HIDDEN = 512
AGE_DIVISOR = 120.0


@dataclass(frozen=True)
class ModelConfig:
    widening_factor: int = 1
    norm: str = "instance"       # instance | batch
    first_layer: str = "K1S1"
    extra_blocks: int = 0
    age_mode: str = "none"       # none | encoded | concat
    crop_extent: int = 96
    num_classes: int = 3
    d_model: int = 128
    eps: float = 1e-5

    def __post_init__(self):
        if self.widening_factor < 1:
            raise ValueError(f"widening_factor must be >= 1, got {self.widening_factor}")
        if self.norm not in ("instance", "batch"):
            raise ValueError(f"norm must be instance or batch, got {self.norm!r}")
        if self.first_layer not in FIRST_LAYER_VARIANTS:
            raise ValueError(
                f"first_layer must be one of {sorted(FIRST_LAYER_VARIANTS)}, "
                f"got {self.first_layer!r}")
        if self.extra_blocks < 0:
            raise ValueError(f"extra_blocks must be >= 0, got {self.extra_blocks}")
        if self.age_mode not in ("none", "encoded", "concat"):
            raise ValueError(f"unknown age_mode {self.age_mode!r}")
        if self.crop_extent < 1:
            raise ValueError(f"crop_extent must be >= 1, got {self.crop_extent}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.d_model < 2 or self.d_model % 2:
            raise ValueError(f"d_model must be even and >= 2, got {self.d_model}")


@dataclass(frozen=True)
class BlockPlan:
    name: str
    conv: ops.ConvSpec
    norm: str
    pool: tuple[int, int] | None   # (window, stride) after clamping
    in_channels: int
    conv_extent: int
    out_extent: int


@dataclass(frozen=True)
class ModelPlan:
    blocks: tuple[BlockPlan, ...]
    final_channels: int
    final_extent: int
    flat_features: int
    fc1_in: int


def _fit_dilation(name: str, extent: int, k: int, p: int, s: int, d: int) -> int:
    """Largest dilation <= d that keeps the conv output at two or more
    positions; falls back to a single position before rejecting."""
    padded = extent + 2 * p
    if k > padded:
        raise ShapeError(
            f"{name}: kernel {k} exceeds padded input extent {padded}")
    if k == 1:
        return 1
    roomy = (padded - s - 1) // (k - 1)   # effective kernel <= padded - s
    if roomy >= 1:
        return min(d, roomy)
    return min(d, (padded - 1) // (k - 1))


def layer_plan(config: ModelConfig) -> ModelPlan:
    f = config.widening_factor
    fk, fs, fp, fd = FIRST_LAYER_VARIANTS[config.first_layer]
    stages = [
        ("block1", fk, 4 * f, fp, fs, fd, (3, 2)),
        ("block2", 3, 32 * f, 0, 1, 2, (3, 2)),
        ("block3", 5, 64 * f, 2, 1, 2, (3, 2)),
        ("block4", 3, 64 * f, 1, 1, 2, (5, 2)),
    ]
    for i in range(config.extra_blocks):
        stages.append((f"extra{i + 1}", 3, 64 * f, 1, 1, 1, None))

    blocks = []
    e, c = config.crop_extent, 1
    for name, k, c_out, p, s, d, pool in stages:
        d_eff = _fit_dilation(f"{name}.conv", e, k, p, s, d)
        spec = ops.ConvSpec(k=k, c_out=c_out, p=p, s=s, d=d_eff)
        ce = ops.conv_out_extent(e, k, p, s, d_eff)
        if ce < 1:
            raise ShapeError(f"{name}.conv: no output positions for extent {e}")
        oe = ce
        pool_eff = None
        if pool is not None:
            pk, ps = pool
            pool_eff = (min(pk, ce), ps)
            oe = ops.pool_out_extent(ce, *pool_eff)
        norm = "instance" if name.startswith("extra") else config.norm
        blocks.append(BlockPlan(name, spec, norm, pool_eff, c, ce, oe))
        e, c = oe, c_out

    flat = c * e ** 3
    fc1_in = flat + (1 if config.age_mode == "concat" else 0)
    return ModelPlan(tuple(blocks), c, e, flat, fc1_in)


def infer_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Per-sample output shape of every layer, in forward order."""
    plan = layer_plan(config)
    rows = [("input", (1, config.crop_extent, config.crop_extent,
                       config.crop_extent))]
    for bp in plan.blocks:
        c = bp.conv.c_out
        rows.append((f"{bp.name}.conv", (c, bp.conv_extent, bp.conv_extent,
                                         bp.conv_extent)))
        if bp.pool is not None:
            rows.append((f"{bp.name}.pool", (c, bp.out_extent, bp.out_extent,
                                             bp.out_extent)))
    rows.append(("flatten", (plan.fc1_in,)))
    if config.age_mode == "encoded":
        rows.append(("age.fc1", (AGE_HIDDEN,)))
        rows.append(("age.fc2", (FC1_WIDTH,)))
    rows.append(("fc1", (FC1_WIDTH,)))
    rows.append(("fc2", (config.num_classes,)))
    return rows


@dataclass
class Model:
    config: ModelConfig
    plan: ModelPlan
    params: dict[str, Tensor]
    buffers: dict[str, Tensor]
    dtype: np.dtype
    version: int = 0

    def note_update(self):
        """Called after any in-place parameter mutation; invalidates tapes."""
        self.version += 1


def build(config: ModelConfig, rng: Rng, dtype=tensor.F32) -> Model:
    """Construct a model with kaiming-uniform weights, zero biases, and unit
    gains. Every tensor draws from its own named substream, so adding an age
    head or extra blocks never shifts the backbone initialization."""
    plan = layer_plan(config)
    params: dict[str, Tensor] = {}
    buffers: dict[str, Tensor] = {}
    for bp in plan.blocks:
        k, c_out, c_in = bp.conv.k, bp.conv.c_out, bp.in_channels
        params[f"{bp.name}.conv.weight"] = tensor.kaiming_uniform(
            (c_out, c_in, k, k, k), rng.stream(bp.name, "conv", "weight"), dtype)
        params[f"{bp.name}.conv.bias"] = tensor.zeros((c_out,), dtype)
        params[f"{bp.name}.norm.gamma"] = tensor.ones((c_out,), dtype)
        params[f"{bp.name}.norm.beta"] = tensor.zeros((c_out,), dtype)
        if bp.norm == "batch":
            buffers[f"{bp.name}.norm.running_mean"] = tensor.zeros((c_out,), dtype)
            buffers[f"{bp.name}.norm.running_var"] = tensor.ones((c_out,), dtype)
    params["fc1.weight"] = tensor.kaiming_uniform(
        (FC1_WIDTH, plan.fc1_in), rng.stream("fc1", "weight"), dtype)
    params["fc1.bias"] = tensor.zeros((FC1_WIDTH,), dtype)
    if config.age_mode == "encoded":
        params["age.fc1.weight"] = tensor.kaiming_uniform(
            (AGE_HIDDEN, config.d_model), rng.stream("age", "fc1", "weight"), dtype)
        params["age.fc1.bias"] = tensor.zeros((AGE_HIDDEN,), dtype)
        params["age.norm.gamma"] = tensor.ones((AGE_HIDDEN,), dtype)
        params["age.norm.beta"] = tensor.zeros((AGE_HIDDEN,), dtype)
        params["age.fc2.weight"] = tensor.kaiming_uniform(
            (FC1_WIDTH, AGE_HIDDEN), rng.stream("age", "fc2", "weight"), dtype)
        params["age.fc2.bias"] = tensor.zeros((FC1_WIDTH,), dtype)
    params["fc2.weight"] = tensor.kaiming_uniform(
        (config.num_classes, FC1_WIDTH), rng.stream("fc2", "weight"), dtype)
    params["fc2.bias"] = tensor.zeros((config.num_classes,), dtype)
    return Model(config, plan, params, buffers, np.dtype(dtype))


@dataclass
class Tape:
    """Saved forward state consumed exactly once by backward."""
    model_version: int
    entries: list


def _validate_ages(config: ModelConfig, ages, n: int) -> np.ndarray | None:
    if config.age_mode == "none":
        return None
    if ages is None:
        raise ValueError(f"age_mode {config.age_mode!r} requires ages")
    arr = np.asarray(ages, dtype=np.float64)
    if arr.shape != (n,):
        raise ShapeError(f"ages shape {arr.shape}, expected ({n},)")
    return arr


def forward(model: Model, x: Tensor, ages=None,
            mode: str = "train") -> tuple[Tensor, Tape]:
    """Run the network. Returns pre-softmax logits [N, num_classes] and the
    tape needed for backward. Train mode updates batch-norm running stats."""
    cfg = model.config
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    e = cfg.crop_extent
    if x.data.ndim != 5 or x.shape[1] != 1 or x.shape[2:] != (e, e, e):
        raise ShapeError(f"input shape {x.shape}, expected (N, 1, {e}, {e}, {e})")
    n = x.shape[0]
    ages_arr = _validate_ages(cfg, ages, n)

    entries = []
    h = x
    for bp in model.plan.blocks:
        w = model.params[f"{bp.name}.conv.weight"]
        b = model.params[f"{bp.name}.conv.bias"]
        entries.append(("conv", bp.name, h, bp.conv))
        h = ops.conv3d_forward(h, w, b, bp.conv)
        gamma = model.params[f"{bp.name}.norm.gamma"]
        beta = model.params[f"{bp.name}.norm.beta"]
        if bp.norm == "batch":
            rm_key = f"{bp.name}.norm.running_mean"
            rv_key = f"{bp.name}.norm.running_var"
            h, cache, nm, nv = ops.batch_norm_forward(
                h, gamma, beta, model.buffers[rm_key], model.buffers[rv_key],
                mode, eps=cfg.eps)
            if mode == "train":
                model.buffers[rm_key] = nm
                model.buffers[rv_key] = nv
        else:
            h, cache = ops.instance_norm_forward(h, gamma, beta, cfg.eps)
        entries.append(("norm", bp.name, cache))
        entries.append(("relu", h))
        h = ops.relu(h)
        if bp.pool is not None:
            pooled, idx = ops.maxpool3d_forward(h, *bp.pool)
            entries.append(("pool", idx, h.shape))
            h = pooled

    entries.append(("flatten", h.shape))
    h = h.reshape((n, model.plan.flat_features))
    if cfg.age_mode == "concat":
        col = (ages_arr / AGE_DIVISOR).astype(model.dtype).reshape(n, 1)
        h = Tensor(np.concatenate([h.data, col], axis=1))
        entries.append(("drop_age_column",))
    entries.append(("fc1", h))
    z = ops.linear_forward(h, model.params["fc1.weight"], model.params["fc1.bias"])
    if cfg.age_mode == "encoded":
        ae = Tensor(np.stack([
            ops.age_encode(a, cfg.d_model, model.dtype).data for a in ages_arr]))
        a1 = ops.linear_forward(ae, model.params["age.fc1.weight"],
                                model.params["age.fc1.bias"])
        a1n, ln_cache = ops.layer_norm_forward(
            a1, model.params["age.norm.gamma"], model.params["age.norm.beta"],
            cfg.eps)
        a2 = ops.linear_forward(a1n, model.params["age.fc2.weight"],
                                model.params["age.fc2.bias"])
        z = Tensor(z.data + a2.data)
        entries.append(("age_head", ae, ln_cache, a1n))
    entries.append(("relu_head", z))
    h2 = ops.relu(z)
    entries.append(("fc2", h2))
    logits = ops.linear_forward(h2, model.params["fc2.weight"],
                                model.params["fc2.bias"])
    return logits, Tape(model.version, entries)


def backward(model: Model, tape: Tape,
             grad_logits: Tensor) -> tuple[dict[str, Tensor], Tensor]:
    """Gradients of a scalar loss w.r.t. every parameter and the input
    volumes, given the loss gradient at the logits. Rejects tapes recorded
    before the parameters were last updated."""
    if tape.model_version != model.version:
        raise ValueError(
            f"stale tape: recorded at parameter version {tape.model_version}, "
            f"model is at {model.version}")
    grads: dict[str, Tensor] = {}
    g = grad_logits
    for entry in reversed(tape.entries):
        kind = entry[0]
        if kind == "fc2":
            _, h2 = entry
            g, gw, gb = ops.linear_backward(g, h2, model.params["fc2.weight"])
            grads["fc2.weight"], grads["fc2.bias"] = gw, gb
        elif kind == "relu_head":
            g = ops.relu_backward(g, entry[1])
        elif kind == "age_head":
            _, ae, ln_cache, a1n = entry
            ga, gw, gb = ops.linear_backward(g, a1n, model.params["age.fc2.weight"])
            grads["age.fc2.weight"], grads["age.fc2.bias"] = gw, gb
            ga, dgm, dbt = ops.norm_backward(ga, ln_cache)
            grads["age.norm.gamma"], grads["age.norm.beta"] = dgm, dbt
            _, gw, gb = ops.linear_backward(ga, ae, model.params["age.fc1.weight"])
            grads["age.fc1.weight"], grads["age.fc1.bias"] = gw, gb
            # g itself continues down the fc1 branch of the sum unchanged
        elif kind == "fc1":
            _, h = entry
            g, gw, gb = ops.linear_backward(g, h, model.params["fc1.weight"])
            grads["fc1.weight"], grads["fc1.bias"] = gw, gb
        elif kind == "drop_age_column":
            g = Tensor(np.ascontiguousarray(g.data[:, :-1]))
        elif kind == "flatten":
            g = g.reshape(entry[1])
        elif kind == "pool":
            _, idx, shape = entry
            g = ops.maxpool3d_backward(g, idx, shape)
        elif kind == "relu":
            g = ops.relu_backward(g, entry[1])
        elif kind == "norm":
            _, name, cache = entry
            g, dgm, dbt = ops.norm_backward(g, cache)
            grads[f"{name}.norm.gamma"] = dgm
            grads[f"{name}.norm.beta"] = dbt
        elif kind == "conv":
            _, name, x_in, spec = entry
            g, gw, gb = ops.conv3d_backward(
                g, x_in, model.params[f"{name}.conv.weight"], spec)
            grads[f"{name}.conv.weight"] = gw
            grads[f"{name}.conv.bias"] = gb
        else:
            raise RuntimeError(f"unknown tape entry {kind!r}")
    missing = set(model.params) - set(grads)
    if missing:
        raise RuntimeError(f"backward left parameters without gradients: "
                           f"{sorted(missing)}")
    return grads, g


# checkpoint format:
#   8 bytes magic, u32 version, u32 config length + "key=value\n" lines,
#   u32 tensor count, then per tensor (sorted by name):
#   u16 name length + name, u8 rank, rank x u64 extents, float32 LE payload
CKPT_MAGIC = b"VCNNCKPT"
CKPT_VERSION = 1


def _config_text(config: ModelConfig, extra: dict[str, str]) -> str:
    items = {f.name: getattr(config, f.name) for f in fields(ModelConfig)}
    for k, v in extra.items():
        if k in items:
            raise ValueError(f"extra checkpoint key {k!r} collides with config")
        items[k] = v
    return "".join(f"{k}={items[k]}\n" for k in sorted(items))


def _parse_config_text(text: str) -> tuple[ModelConfig, dict[str, str]]:
    known = {f.name: f.type for f in fields(ModelConfig)}
    kwargs, extra = {}, {}
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed checkpoint config line {line!r}")
        if key in known:
            typ = {"int": int, "float": float, "str": str}[known[key]]
            kwargs[key] = typ(value)
        else:
            extra[key] = value
    return ModelConfig(**kwargs), extra


def save_checkpoint(path, model: Model, extra: dict[str, str] | None = None,
                    velocity: dict[str, Tensor] | None = None) -> None:
    """Serialize config, parameters, buffers, and optional momentum state.
    Byte-identical for identical inputs: tensors are sorted by name and the
    payload is always little-endian float32."""
    named: dict[str, Tensor] = {}
    named.update(model.params)
    named.update(model.buffers)
    if velocity:
        for k, t in velocity.items():
            named[f"velocity/{k}"] = t
    cfg_bytes = _config_text(model.config, extra or {}).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", len(named)))
        for name in sorted(named):
            arr = named[name].data.astype("<f4", copy=False)
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError(f"checkpoint truncated while reading {what}")
    return buf


def load_checkpoint(path) -> tuple[Model, dict[str, str], dict[str, Tensor]]:
    """Rebuild a model from a checkpoint. Returns (model, extra config
    entries, momentum state). The tensor set must match the architecture
    recorded in the config exactly."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 8, "magic") != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, cfg_len = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        config, extra = _parse_config_text(
            _read_exact(fh, cfg_len, "config").decode())
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors: dict[str, Tensor] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "tensor name"))
            name = _read_exact(fh, nlen, "tensor name").decode()
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, name))
            shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, name))
            n_items = int(np.prod(shape)) if rank else 1
            raw = _read_exact(fh, 4 * n_items, f"tensor {name!r} payload")
            tensors[name] = Tensor(
                np.frombuffer(raw, dtype="<f4").reshape(shape).copy())
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after last tensor")

    model = build(config, Rng(0))
    velocity: dict[str, Tensor] = {}
    expected = set(model.params) | set(model.buffers)
    for name, t in tensors.items():
        if name.startswith("velocity/"):
            pname = name[len("velocity/"):]
            if pname not in model.params:
                raise ValueError(f"{path}: momentum for unknown parameter {pname!r}")
            velocity[pname] = t
            continue
        if name in model.params:
            slot = model.params
        elif name in model.buffers:
            slot = model.buffers
        else:
            raise ValueError(f"{path}: unexpected tensor {name!r}")
        if slot[name].shape != t.shape:
            raise ValueError(
                f"{path}: tensor {name!r} has shape {t.shape}, architecture "
                f"expects {slot[name].shape}")
        slot[name] = t
        expected.discard(name)
    if expected:
        raise ValueError(f"{path}: checkpoint missing tensors {sorted(expected)}")
    if velocity and set(velocity) != set(model.params):
        raise ValueError(f"{path}: momentum state is partial")
    return model, extra, velocity

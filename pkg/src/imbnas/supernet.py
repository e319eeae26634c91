"""Weight-sharing super-network, training loop, subnet extraction, checkpoints."""

from __future__ import annotations

import copy
import hashlib
import json
import math
import struct
import zlib
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from imbnas.errors import CheckpointError, ConfigError, NumericError
from imbnas.imbalance import LabeledDataset, ReweightPolicy, drw_weights, weighted_cross_entropy
from imbnas.space import Genotype, MixtureParams, SearchSpace, random_genotype


class BatchNorm(nn.Module):
    """Per-channel normalization with explicit control over running statistics.

    ``freeze_stats`` keeps running statistics fixed in training mode;
    ``calibrating`` overwrites them with the statistics of the current batch.
    """

    def __init__(self, channels: int, affine: bool = True, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.affine = affine
        if affine:
            self.weight = nn.Parameter(torch.ones(channels))
            self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))
        self.freeze_stats = False
        self.calibrating = False

    def forward(self, x):
        weight = self.weight if self.affine else None
        bias = self.bias if self.affine else None
        if self.calibrating:
            with torch.no_grad():
                self.running_mean.copy_(x.mean(dim=(0, 2, 3)))
                self.running_var.copy_(x.var(dim=(0, 2, 3), unbiased=False))
            return F.batch_norm(x, None, None, weight, bias, True, 0.0, self.eps)
        if self.training:
            if self.freeze_stats:
                return F.batch_norm(x, None, None, weight, bias, True, 0.0, self.eps)
            return F.batch_norm(
                x, self.running_mean, self.running_var, weight, bias, True, self.momentum, self.eps
            )
        return F.batch_norm(x, self.running_mean, self.running_var, weight, bias, False, 0.0, self.eps)


class Zero(nn.Module):
    def forward(self, x):
        return torch.zeros_like(x)


class Identity(nn.Module):
    def forward(self, x):
        return x


class SepConv(nn.Module):
    def __init__(self, channels: int, kernel: int):
        super().__init__()
        self.depthwise = nn.Conv2d(channels, channels, kernel, padding=kernel // 2, groups=channels, bias=False)
        self.pointwise = nn.Conv2d(channels, channels, 1, bias=False)
        self.bn = BatchNorm(channels)

    def forward(self, x):
        return self.bn(self.pointwise(self.depthwise(F.relu(x))))


class Pool(nn.Module):
    def __init__(self, channels: int, kind: str):
        super().__init__()
        self.kind = kind
        self.bn = BatchNorm(channels, affine=False)

    def forward(self, x):
        if self.kind == "avg":
            out = F.avg_pool2d(x, 3, stride=1, padding=1, count_include_pad=False)
        else:
            out = F.max_pool2d(x, 3, stride=1, padding=1)
        return self.bn(out)


def make_op(name: str, channels: int) -> nn.Module:
    if name == "zero":
        return Zero()
    if name == "skip_connect":
        return Identity()
    if name == "sep_conv_3x3":
        return SepConv(channels, 3)
    if name == "sep_conv_5x5":
        return SepConv(channels, 5)
    if name == "avg_pool_3x3":
        return Pool(channels, "avg")
    if name == "max_pool_3x3":
        return Pool(channels, "max")
    raise ConfigError(f"unknown op {name!r}")


class _CellNetwork(nn.Module):
    """Shared forward machinery: stem -> cells of summed edges -> pooled linear head."""

    space: SearchSpace

    def _build_stem_and_head(self, space: SearchSpace):
        self.stem = nn.Sequential(
            nn.Conv2d(space.in_channels, space.channel_width, 3, padding=1, bias=False),
            BatchNorm(space.channel_width),
        )
        self.classifier = nn.Linear(space.channel_width, space.num_classes)
        self._edge_index = {edge: i for i, edge in enumerate(space.choice_edges)}

    def features(self, x, edge_fn):
        space = self.space
        h = self.stem(x)
        for cell in range(space.num_cells):
            nodes = [h]
            for dst in range(1, space.nodes_per_cell):
                acc = None
                for src in range(dst):
                    out = edge_fn(self._edge_index[(cell, src, dst)], nodes[src])
                    if out is not None:
                        acc = out if acc is None else acc + out
                nodes.append(acc if acc is not None else torch.zeros_like(h))
            h = nodes[-1]
        return h.mean(dim=(2, 3))

    def _head(self, x, edge_fn, detach_backbone: bool):
        if detach_backbone:
            with torch.no_grad():
                feats = self.features(x, edge_fn)
        else:
            feats = self.features(x, edge_fn)
        return self.classifier(feats)

    def backbone_modules(self) -> list[nn.Module]:
        return [m for name, m in self.named_children() if name != "classifier"]

    def backbone_parameters(self) -> list[nn.Parameter]:
        return [p for m in self.backbone_modules() for p in m.parameters()]

    def reset_classifier(self, num_classes: int, rng: np.random.Generator) -> None:
        self.space = self.space.with_num_classes(num_classes)
        self.classifier = nn.Linear(self.space.channel_width, num_classes)
        _init_module(self.classifier, rng)


class SuperNetwork(_CellNetwork):
    def __init__(self, space: SearchSpace):
        super().__init__()
        self.space = space
        self._build_stem_and_head(space)
        self.blocks = nn.ModuleList(
            nn.ModuleList(make_op(name, space.channel_width) for name in space.candidate_ops)
            for _ in space.choice_edges
        )
        self.epoch_counter = 0
        self.rng_state: dict | None = None
        self.schedule_fingerprint = ""

    def forward(self, x, genotype: Genotype | None = None, mixture=None, detach_backbone: bool = False):
        if mixture is not None:
            return forward_with_mixture(self, mixture, x)
        if genotype is None:
            raise ConfigError("a genotype or mixture is required for a super-network forward pass")
        return self._head(x, self._path_fn(genotype), detach_backbone)

    def _path_fn(self, genotype: Genotype):
        genotype.check(self.space)
        zero = self.space.candidate_ops.index("zero") if "zero" in self.space.candidate_ops else -1

        def edge_fn(e, h):
            op = genotype[e]
            return None if op == zero else self.blocks[e][op](h)

        return edge_fn

    def path_modules(self, genotype: Genotype) -> list[nn.Module]:
        return [self.stem] + [self.blocks[e][op] for e, op in enumerate(genotype)]


class SubNetwork(_CellNetwork):
    """Standalone single-path model; holds copies of only the chosen blocks."""

    def __init__(self, space: SearchSpace, genotype: Genotype):
        super().__init__()
        self.space = space
        self.genotype = genotype.check(space)
        self._build_stem_and_head(space)
        self.edges = nn.ModuleList(make_op(space.candidate_ops[op], space.channel_width) for op in genotype)
        self.epoch_counter = 0
        self.rng_state: dict | None = None
        self.schedule_fingerprint = ""

    def forward(self, x, genotype: Genotype | None = None, detach_backbone: bool = False):
        def edge_fn(e, h):
            op = self.edges[e]
            return None if isinstance(op, Zero) else op(h)

        return self._head(x, edge_fn, detach_backbone)


def _init_module(module: nn.Module, rng: np.random.Generator) -> None:
    """Uniform fan-in init U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for conv/linear weights."""
    for sub in module.modules():
        if isinstance(sub, (nn.Conv2d, nn.Linear)):
            w = sub.weight
            fan_in = w[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                w.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(w.shape))))
                if sub.bias is not None:
                    sub.bias.zero_()


def init_supernet(space: SearchSpace, rng: np.random.Generator) -> SuperNetwork:
    net = SuperNetwork(space)
    _init_module(net, rng)
    return net


def init_subnet(space: SearchSpace, genotype: Genotype, rng: np.random.Generator) -> SubNetwork:
    net = SubNetwork(space, genotype)
    _init_module(net, rng)
    return net


def extract_subnet(net: SuperNetwork, genotype: Genotype) -> SubNetwork:
    sub = SubNetwork(net.space, genotype)
    sub.stem = copy.deepcopy(net.stem)
    sub.classifier = copy.deepcopy(net.classifier)
    sub.edges = nn.ModuleList(copy.deepcopy(net.blocks[e][op]) for e, op in enumerate(genotype))
    sub.train(net.training)
    return sub


def forward_with_path(net: SuperNetwork, genotype: Genotype, batch) -> torch.Tensor:
    return net(_as_tensor(batch), genotype)


def forward_with_mixture(net: SuperNetwork, mixture, batch) -> torch.Tensor:
    """Edge output = sum_o softmax(alpha_edge)[o] * op_o(x)."""
    alpha = mixture.alpha if isinstance(mixture, MixtureParams) else mixture
    x = _as_tensor(batch)
    if not torch.is_tensor(alpha):
        alpha = torch.as_tensor(np.array(alpha), dtype=x.dtype)
    if torch.isnan(alpha).any():
        raise NumericError("NaN in mixture logits")
    if alpha.shape != (net.space.num_edges, net.space.num_ops):
        raise ConfigError(f"alpha shape {tuple(alpha.shape)} does not match the space")
    weights = torch.softmax(alpha.to(x.dtype), dim=1)
    ops = net.space.candidate_ops

    def edge_fn(e, h):
        acc = None
        for o, block in enumerate(net.blocks[e]):
            if ops[o] == "zero":
                continue
            term = weights[e, o] * block(h)
            acc = term if acc is None else acc + term
        return acc

    return net.classifier(net.features(x, edge_fn))


def _as_tensor(batch) -> torch.Tensor:
    if torch.is_tensor(batch):
        return batch
    return torch.from_numpy(np.ascontiguousarray(batch))


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 200
    initial_lr: float = 0.1
    milestones: tuple[int, ...] = (160, 180)
    decay_factor: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.initial_lr < 0:
            raise ConfigError("initial_lr must be non-negative")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError(f"milestones must be strictly increasing, got {list(ms)}")
        if ms and (ms[0] < 0 or ms[-1] >= self.epochs):
            raise ConfigError(f"milestones {list(ms)} must lie in [0, {self.epochs})")
        if not 0.0 < self.decay_factor < 1.0:
            raise ConfigError("decay_factor must lie in (0, 1)")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or self.batch_size < 1:
            raise ConfigError("weight_decay must be >= 0 and batch_size >= 1")

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def lr_at_epoch(schedule: TrainSchedule, epoch: int) -> float:
    if not 0 <= epoch < schedule.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {schedule.epochs})")
    passed = sum(1 for m in schedule.milestones if m <= epoch)
    return schedule.initial_lr * schedule.decay_factor**passed


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)

    @property
    def updates(self) -> int:
        return sum(e["updates"] for e in self.epochs)

    def __len__(self):
        return len(self.epochs)


@contextmanager
def frozen_stats(modules: Iterable[nn.Module]):
    bns = [m for mod in modules for m in mod.modules() if isinstance(m, BatchNorm)]
    previous = [bn.freeze_stats for bn in bns]
    for bn in bns:
        bn.freeze_stats = True
    try:
        yield
    finally:
        for bn, prev in zip(bns, previous):
            bn.freeze_stats = prev


def train_model(
    model: _CellNetwork,
    data: LabeledDataset,
    schedule: TrainSchedule,
    policy: ReweightPolicy,
    rng: np.random.Generator,
    *,
    train_backbone: bool = True,
) -> TrainLog:
    """SGD with momentum over ``schedule``; a super-network samples one uniform path per step.

    With ``train_backbone=False`` only the classifier is optimised and the
    backbone's normalization statistics stay fixed.
    """
    if len(data) == 0:
        raise ConfigError("cannot train on an empty dataset")
    if data.num_classes != model.space.num_classes:
        raise ConfigError(
            f"dataset has {data.num_classes} classes but the model head has {model.space.num_classes}"
        )
    log = TrainLog()
    if schedule.epochs == 0:
        return log
    batch_rng, path_rng = rng.spawn(2)
    params = list(model.parameters()) if train_backbone else list(model.classifier.parameters())
    opt = torch.optim.SGD(
        params, lr=schedule.initial_lr, momentum=schedule.momentum, weight_decay=schedule.weight_decay
    )
    x_all = torch.from_numpy(np.ascontiguousarray(data.features))
    y_all = torch.from_numpy(data.labels)
    counts = data.class_counts()
    is_super = isinstance(model, SuperNetwork)
    model.train()
    frozen = [] if train_backbone else model.backbone_modules()
    with frozen_stats(frozen):
        for epoch in range(schedule.epochs):
            lr = lr_at_epoch(schedule, epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            weights = drw_weights(epoch, policy, counts)
            perm = batch_rng.permutation(len(data))
            total, updates = 0.0, 0
            for start in range(0, len(perm), schedule.batch_size):
                idx = torch.from_numpy(perm[start : start + schedule.batch_size])
                genotype = random_genotype(model.space, path_rng) if is_super else None
                logits = model(x_all[idx], genotype, detach_backbone=not train_backbone)
                loss = weighted_cross_entropy(logits, y_all[idx], weights)
                if not torch.isfinite(loss):
                    raise NumericError(f"non-finite training loss at epoch {epoch}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                updates += sum(p.numel() for p in params if p.grad is not None)
                opt.step()
                total += loss.item() * len(idx)
            model.epoch_counter += 1
            log.epochs.append({"epoch": epoch, "loss": total / len(data), "lr": lr, "updates": updates})
    model.rng_state = rng.bit_generator.state
    model.schedule_fingerprint = schedule.fingerprint()
    return log


def train_supernet(net: SuperNetwork, data, schedule, policy, rng, *, train_backbone: bool = True):
    log = train_model(net, data, schedule, policy, rng, train_backbone=train_backbone)
    return net, log


@contextmanager
def _calibrating(modules: Iterable[nn.Module]):
    bns = [m for mod in modules for m in mod.modules() if isinstance(m, BatchNorm)]
    for bn in bns:
        bn.calibrating = True
    try:
        yield
    finally:
        for bn in bns:
            bn.calibrating = False


def recalibrate_norm_stats(net: _CellNetwork, genotype: Genotype, calib: LabeledDataset):
    """Reset running statistics on the genotype's path to full-batch statistics of ``calib``."""
    if len(calib) == 0:
        raise ConfigError("calibration set is empty")
    modules = net.path_modules(genotype) if isinstance(net, SuperNetwork) else net.backbone_modules()
    was_training = net.training
    net.eval()
    with torch.no_grad(), _calibrating(modules):
        net(_as_tensor(calib.features), genotype)
    net.train(was_training)
    return net


def norm_state(modules: Iterable[nn.Module]) -> list[tuple[torch.Tensor, torch.Tensor]]:
    bns = [m for mod in modules for m in mod.modules() if isinstance(m, BatchNorm)]
    return [(bn.running_mean.clone(), bn.running_var.clone()) for bn in bns]


def restore_norm_state(modules: Iterable[nn.Module], state) -> None:
    bns = [m for mod in modules for m in mod.modules() if isinstance(m, BatchNorm)]
    for bn, (mean, var) in zip(bns, state):
        bn.running_mean.copy_(mean)
        bn.running_var.copy_(var)


def predict(model: _CellNetwork, features, genotype: Genotype | None = None, batch_size: int = 1024) -> np.ndarray:
    model.eval()
    x = _as_tensor(features)
    outs = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            outs.append(model(x[start : start + batch_size], genotype).argmax(dim=1))
    return torch.cat(outs).numpy() if outs else np.empty(0, dtype=np.int64)


def accuracy(model: _CellNetwork, data: LabeledDataset, genotype: Genotype | None = None) -> float:
    if len(data) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(model, data.features, genotype) == data.labels))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_hash(tensors: Iterable[torch.Tensor]) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def backbone_hash(model: _CellNetwork) -> str:
    """Hash of backbone parameters and normalization buffers."""
    tensors = []
    for m in model.backbone_modules():
        tensors.extend(m.parameters())
        tensors.extend(m.buffers())
    return parameter_hash(tensors)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"IMBNASCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<III")  # version, header length, header crc32


def save_checkpoint(model: _CellNetwork) -> bytes:
    state = model.state_dict()
    blocks = [[name, list(t.shape)] for name, t in state.items()]
    payload = b"".join(t.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes() for t in state.values())
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "supernet" if isinstance(model, SuperNetwork) else "subnet",
        "space": model.space.describe(),
        "genotype": model.genotype.token if isinstance(model, SubNetwork) else None,
        "epoch": model.epoch_counter,
        "rng_state": model.rng_state,
        "schedule_fingerprint": model.schedule_fingerprint,
        "blocks": blocks,
        "payload_crc32": zlib.crc32(payload),
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + _PREFIX.pack(FORMAT_VERSION, len(text), zlib.crc32(text)) + text + payload


def load_checkpoint(data: bytes, space: SearchSpace | None = None) -> _CellNetwork:
    from imbnas.space import decode_genotype

    if len(data) < len(MAGIC) + _PREFIX.size:
        raise CheckpointError("file truncated before header", "magic")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic bytes", "magic")
    version, hlen, hcrc = _PREFIX.unpack_from(data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported version {version}, expected {FORMAT_VERSION}", "format_version")
    start = len(MAGIC) + _PREFIX.size
    text = data[start : start + hlen]
    if len(text) != hlen:
        raise CheckpointError("file truncated inside header", "header")
    if zlib.crc32(text) != hcrc:
        raise CheckpointError("header checksum mismatch", "header")
    try:
        header = json.loads(text.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header ({exc})", "header") from None
    for key in ("format_version", "kind", "space", "epoch", "blocks", "payload_crc32"):
        if key not in header:
            raise CheckpointError("missing header field", key)
    if header["format_version"] != FORMAT_VERSION:
        raise CheckpointError("header/prefix version disagree", "format_version")
    saved_space = SearchSpace.from_description(header["space"])
    if space is not None and space != saved_space:
        raise CheckpointError(f"checkpoint space {header['space']} does not match {space.describe()}", "space")
    payload = data[start + hlen :]
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise CheckpointError("payload checksum mismatch or truncated payload", "payload")
    if header["kind"] == "supernet":
        model: _CellNetwork = SuperNetwork(saved_space)
    elif header["kind"] == "subnet":
        model = SubNetwork(saved_space, decode_genotype(header["genotype"], saved_space))
    else:
        raise CheckpointError(f"unknown model kind {header['kind']!r}", "kind")
    expected = model.state_dict()
    state, offset = {}, 0
    for name, shape in header["blocks"]:
        if name not in expected or list(expected[name].shape) != shape:
            raise CheckpointError(f"unexpected block with shape {shape}", name)
        n = int(np.prod(shape)) * 4
        chunk = payload[offset : offset + n]
        if len(chunk) != n:
            raise CheckpointError("payload truncated", name)
        state[name] = torch.from_numpy(np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(shape))
        offset += n
    missing = set(expected) - set(state)
    if missing:
        raise CheckpointError("block missing from checkpoint", sorted(missing)[0])
    if offset != len(payload):
        raise CheckpointError(f"{len(payload) - offset} trailing bytes", "payload")
    model.load_state_dict(state)
    model.epoch_counter = int(header["epoch"])
    model.rng_state = header.get("rng_state")
    model.schedule_fingerprint = header.get("schedule_fingerprint", "")
    model.eval()
    return model


def save_checkpoint_file(model: _CellNetwork, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save_checkpoint(model))


def load_checkpoint_file(path, space: SearchSpace | None = None) -> _CellNetwork:
    with open(path, "rb") as fh:
        return load_checkpoint(fh.read(), space)

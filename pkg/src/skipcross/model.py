"""Two-stream encoder with skip-cross fusion, fused decoder, and checkpoint I/O.

Layout of a two-stream network with S stages (defaults in brackets)::

    stem      3x3 stride-2 conv + ReLU              -> H/2,  C0   [32]
    stage s   B_s BasicBlocks with cross-modal adds, then 2x2 max-pool
    between   1x1 conv + ReLU to the next stage width
    merge     E = g_rgb * E_rgb + g_lid * E_lid      -> H/2^(S+1)
    decoder   S+1 transposed convs (3x3, stride 2); level i adds
              s_rgb_i * skip_rgb + s_lid_i * skip_lid at equal resolution
    head      1x1 conv -> 2 logits

Inside stage s the feature recurrence is

    F^m_j = Block^m_j(F^m_{j-1}) + sum_{k=1..j} w^{m'}_{kj} * F^{m'}_{k-1}

where ``w`` are rank-0 learnable scalars (``L`` for LiDAR->RGB, ``R`` for
RGB->LiDAR) and F_0 is the stage input.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor, no_grad

STRATEGIES = ("skipcross", "early", "middle", "late", "cross")
SINGLE_STREAM = ("camera", "lidar")
ALL_STRATEGIES = STRATEGIES + SINGLE_STREAM

MAGIC = b"SKXC"
VERSION = 1
TOPOLOGY_KEY = "topology"


class TopologyError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class FusionTopology:
    stage_blocks: tuple = (2, 3, 3)
    stage_channels: tuple = (32, 64, 128)
    rgb_in_channels: int = 3
    lidar_in_channels: int = 1
    encoder_mask: tuple | None = None
    decoder_fusion_enabled: bool = True
    strategy: str = "skipcross"
    head_channels: int = 16

    def __post_init__(self):
        object.__setattr__(self, "stage_blocks", tuple(int(b) for b in self.stage_blocks))
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        mask = self.encoder_mask
        mask = (True,) * len(self.stage_blocks) if mask is None else tuple(bool(m) for m in mask)
        object.__setattr__(self, "encoder_mask", mask)
        self.validate()

    def validate(self):
        if not self.stage_blocks:
            raise TopologyError("at least one stage is required")
        if len(self.stage_blocks) != len(self.stage_channels):
            raise TopologyError(
                f"stage_blocks has {len(self.stage_blocks)} entries but stage_channels has {len(self.stage_channels)}"
            )
        if any(b < 1 for b in self.stage_blocks):
            raise TopologyError("every stage needs at least one block")
        if any(c < 1 for c in self.stage_channels) or self.head_channels < 1:
            raise TopologyError("channel counts must be positive")
        if len(self.encoder_mask) != len(self.stage_blocks):
            raise TopologyError("encoder_mask must have one entry per stage")
        if self.strategy not in ALL_STRATEGIES:
            raise TopologyError(f"unknown strategy {self.strategy!r}; expected one of {ALL_STRATEGIES}")

    @property
    def n_stages(self) -> int:
        return len(self.stage_blocks)

    @property
    def downsample(self) -> int:
        return 2 ** (self.n_stages + 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_blocks"] = list(self.stage_blocks)
        d["stage_channels"] = list(self.stage_channels)
        d["encoder_mask"] = list(self.encoder_mask)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FusionTopology":
        return cls(**d)


def configure_strategy(strategy: str, base: FusionTopology | None = None) -> FusionTopology:
    """Topology realizing a fusion strategy on top of ``base`` (default widths/blocks)."""
    if strategy not in ALL_STRATEGIES:
        raise TopologyError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    base = base or FusionTopology()
    return replace(base, strategy=strategy)


def count_cross_weights(topology_or_blocks) -> int:
    blocks = topology_or_blocks.stage_blocks if isinstance(topology_or_blocks, FusionTopology) else topology_or_blocks
    return sum(b * (b + 1) for b in blocks)


def cross_scalar_names(topology: FusionTopology) -> dict:
    """Map (stage, direction, k, j) -> parameter name, or None when the connection is frozen at zero.

    Directions: ``"L"`` LiDAR block k -> RGB block j, ``"R"`` RGB block k -> LiDAR block j.
    """
    out = {}
    strat = topology.strategy
    for s, nb in enumerate(topology.stage_blocks):
        for j in range(1, nb + 1):
            for k in range(1, j + 1):
                for d in ("L", "R"):
                    name = None
                    if topology.encoder_mask[s]:
                        if strat == "skipcross":
                            name = f"fuse.s{s}.{d}.{k}.{j}"
                        elif strat == "cross" and k == j:
                            name = f"fuse.s{s}.diag.{k}"
                        elif strat == "middle" and s == 0 and k == j == nb:
                            name = "fuse.mid"
                    out[(s, d, k, j)] = name
    return out


def _streams(topology: FusionTopology) -> list[tuple[str, int]]:
    strat = topology.strategy
    if strat == "early":
        return [("enc", topology.rgb_in_channels + topology.lidar_in_channels)]
    if strat == "camera":
        return [("rgb", topology.rgb_in_channels)]
    if strat == "lidar":
        return [("lid", topology.lidar_in_channels)]
    return [("rgb", topology.rgb_in_channels), ("lid", topology.lidar_in_channels)]


def _decoder_prefixes(topology: FusionTopology) -> list[str]:
    if topology.strategy == "late":
        return ["rgb.dec", "lid.dec"]
    return ["dec"]


def decoder_channels(topology: FusionTopology) -> list[int]:
    ch = topology.stage_channels
    s = topology.n_stages
    out = []
    for i in range(1, s + 1):
        q = s - i
        out.append(ch[0] if q == 0 else ch[q - 1])
    out.append(topology.head_channels)
    return out


@dataclass
class NetworkOutput:
    logits: Tensor
    road_confidence: np.ndarray = field(repr=False)


def fuse_stage(f0: dict, blocks: dict, scalar: Callable) -> dict:
    """Run one fusion stage.

    ``f0`` maps stream name to the stage input, ``blocks`` maps stream name to
    the list of block callables, and ``scalar(direction, k, j)`` returns the
    rank-0 tensor for that connection or None when it is absent.
    Returns the per-stream history [F_0, F_1, ..., F_B].
    """
    hist = {m: [f] for m, f in f0.items()}
    two = "rgb" in hist and "lid" in hist
    nb = len(next(iter(blocks.values())))
    for j in range(1, nb + 1):
        new = {m: blocks[m][j - 1](hist[m][-1]) for m in hist}
        if two:
            for k in range(1, j + 1):
                w = scalar("L", k, j)
                if w is not None:
                    new["rgb"] = ops.scale_add(new["rgb"], w, hist["lid"][k - 1])
                w = scalar("R", k, j)
                if w is not None:
                    new["lid"] = ops.scale_add(new["lid"], w, hist["rgb"][k - 1])
        for m in hist:
            hist[m].append(new[m])
    return hist


class SkipcrossNet:
    def __init__(self, topology: FusionTopology, params: dict, dtype=np.float32):
        self.topology = topology
        self.params = params
        self.dtype = np.dtype(dtype)
        self._cross = cross_scalar_names(topology)

    # -- registry -----------------------------------------------------------
    def named_parameters(self):
        return list(self.params.items())

    def parameters(self) -> list[Tensor]:
        """Trainable tensors, each listed once."""
        return [p for p in self.params.values() if p.requires_grad]

    def cross_scalars(self) -> dict:
        names = sorted({n for n in self._cross.values() if n is not None})
        return {n: self.params[n] for n in names}

    def fusion_scalars(self) -> dict:
        return {n: p for n, p in self.params.items() if n.startswith("fuse.") or ".skip." in n or ".g." in n}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def freeze(self):
        for p in self.params.values():
            p.set_requires_grad(False)

    def state_dict(self) -> dict:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict):
        if set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise CheckpointError(f"parameter names differ (missing={missing[:5]}, unexpected={extra[:5]})")
        for n, p in self.params.items():
            arr = np.asarray(state[n])
            if arr.shape != p.shape:
                raise CheckpointError(f"shape mismatch for {n}: {arr.shape} vs {p.shape}")
            p.data[...] = arr

    def astype(self, dtype) -> "SkipcrossNet":
        params = {n: Tensor(p.data.astype(dtype), requires_grad=p.requires_grad, name=n) for n, p in self.params.items()}
        return SkipcrossNet(self.topology, params, dtype=dtype)

    # -- layers -------------------------------------------------------------
    def _conv(self, name, x, stride=1, padding=1):
        return ops.conv2d(x, self.params[name + ".w"], self.params[name + ".b"], stride=stride, padding=padding)

    def _block(self, prefix):
        def run(x):
            h = ops.relu(self._conv(prefix + ".c1", x))
            h = self._conv(prefix + ".c2", h)
            return ops.relu(ops.add(h, x))

        return run

    def _scalar(self, s):
        def get(d, k, j):
            name = self._cross[(s, d, k, j)]
            return None if name is None else self.params[name]

        return get

    def encode(self, inputs: dict):
        """Return (bottleneck features per stream, skip features per stream)."""
        topo = self.topology
        f = {m: ops.relu(self._conv(f"{m}.stem", x, stride=2)) for m, x in inputs.items()}
        skips = {m: [f[m]] for m in f}
        bottleneck = {}
        for s, nb in enumerate(topo.stage_blocks):
            blocks = {m: [self._block(f"{m}.s{s}.b{j}") for j in range(1, nb + 1)] for m in f}
            hist = fuse_stage(f, blocks, self._scalar(s))
            for m in f:
                pooled, _ = ops.maxpool2d(hist[m][-1])
                if s < topo.n_stages - 1:
                    skips[m].append(pooled)
                    f[m] = ops.relu(self._conv(f"{m}.t{s}", pooled, padding=0))
                else:
                    bottleneck[m] = pooled
        return bottleneck, skips

    def decode(self, prefix: str, x: Tensor, skips: dict) -> Tensor:
        topo = self.topology
        n_levels = topo.n_stages + 1
        for i in range(1, n_levels + 1):
            x = ops.transposed_conv2d(
                x, self.params[f"{prefix}.t{i}.w"], self.params[f"{prefix}.t{i}.b"],
                stride=2, padding=1, output_padding=1,
            )
            q = topo.n_stages - i
            if topo.decoder_fusion_enabled and q >= 0:
                for m, feats in skips.items():
                    x = ops.scale_add(x, self.params[f"{prefix}.skip.{m}.{i}"], feats[q])
            x = ops.relu(x)
        head = prefix.replace("dec", "cls")
        return ops.conv2d(x, self.params[head + ".w"], self.params[head + ".b"], padding=0)

    def forward(self, rgb, adi) -> NetworkOutput:
        rgb = rgb if isinstance(rgb, Tensor) else Tensor(np.asarray(rgb, dtype=self.dtype))
        adi = adi if isinstance(adi, Tensor) else Tensor(np.asarray(adi, dtype=self.dtype))
        topo = self.topology
        if rgb.ndim != 4 or adi.ndim != 4:
            raise ShapeError("inputs must be N,C,H,W", dim="rank")
        for d, a, b in zip("NHW", (rgb.shape[0], rgb.shape[2], rgb.shape[3]), (adi.shape[0], adi.shape[2], adi.shape[3])):
            if a != b:
                raise ShapeError(f"rgb and adi disagree in dimension {d}: {rgb.shape} vs {adi.shape}", dim=d)
        if rgb.shape[1] != topo.rgb_in_channels:
            raise ShapeError(f"rgb has {rgb.shape[1]} channels, expected {topo.rgb_in_channels}", dim="C")
        if adi.shape[1] != topo.lidar_in_channels:
            raise ShapeError(f"adi has {adi.shape[1]} channels, expected {topo.lidar_in_channels}", dim="C")
        h, w = rgb.shape[2:]
        step = topo.downsample
        if h % step or w % step:
            raise ShapeError(f"spatial size {h}x{w} is not divisible by {step}", dim="H" if h % step else "W")

        strat = topo.strategy
        if strat == "early":
            inputs = {"enc": ops.concat([rgb, adi], axis=1)}
        elif strat == "camera":
            inputs = {"rgb": rgb}
        elif strat == "lidar":
            inputs = {"lid": adi}
        else:
            inputs = {"rgb": rgb, "lid": adi}
        bottleneck, skips = self.encode(inputs)

        if strat == "late":
            lr = self.decode("rgb.dec", bottleneck["rgb"], {"rgb": skips["rgb"]})
            ll = self.decode("lid.dec", bottleneck["lid"], {"lid": skips["lid"]})
            logits = ops.scale(ops.add(lr, ll), 0.5)
        elif len(inputs) == 2:
            e = ops.mul(self.params["dec.g.rgb"], bottleneck["rgb"])
            e = ops.scale_add(e, self.params["dec.g.lid"], bottleneck["lid"])
            logits = self.decode("dec", e, skips)
        else:
            (m,) = inputs
            logits = self.decode("dec", bottleneck[m], skips)
        conf = ops.softmax(logits.data, axis=1)[:, 1]
        return NetworkOutput(logits=logits, road_confidence=conf)

    __call__ = forward

    def predict(self, rgb, adi, batch_size: int = 8) -> np.ndarray:
        """Road confidence (N, H, W) without recording a tape."""
        rgb = np.asarray(rgb, dtype=self.dtype)
        adi = np.asarray(adi, dtype=self.dtype)
        out = []
        with no_grad():
            for i in range(0, rgb.shape[0], batch_size):
                out.append(self.forward(rgb[i : i + batch_size], adi[i : i + batch_size]).road_confidence)
        return np.concatenate(out, axis=0)


# -- construction -----------------------------------------------------------


def _param_specs(topology: FusionTopology):
    """Yield (name, shape, kind) in a fixed order; kind in {conv, tconv, bias, cross, skip, gate}."""
    ch = topology.stage_channels
    specs = []

    def conv(name, cout, cin, k):
        specs.append((name + ".w", (cout, cin, k, k), "conv"))
        specs.append((name + ".b", (cout,), "bias"))

    for m, cin in _streams(topology):
        conv(f"{m}.stem", ch[0], cin, 3)
        for s, nb in enumerate(topology.stage_blocks):
            for j in range(1, nb + 1):
                conv(f"{m}.s{s}.b{j}.c1", ch[s], ch[s], 3)
                conv(f"{m}.s{s}.b{j}.c2", ch[s], ch[s], 3)
            if s < topology.n_stages - 1:
                conv(f"{m}.t{s}", ch[s + 1], ch[s], 1)
    seen = set()
    for name in cross_scalar_names(topology).values():
        if name is not None and name not in seen:
            seen.add(name)
            specs.append((name, (), "cross"))
    two_merged = topology.strategy in ("skipcross", "cross", "middle")
    if two_merged:
        specs.append(("dec.g.rgb", (), "gate"))
        specs.append(("dec.g.lid", (), "gate"))
    dch = decoder_channels(topology)
    for prefix in _decoder_prefixes(topology):
        cin = ch[-1]
        if topology.strategy == "late":
            dstreams = [prefix.split(".")[0]]
        else:
            dstreams = [m for m, _ in _streams(topology)]
        for i, cout in enumerate(dch, start=1):
            specs.append((f"{prefix}.t{i}.w", (cin, cout, 3, 3), "tconv"))
            specs.append((f"{prefix}.t{i}.b", (cout,), "bias"))
            if topology.decoder_fusion_enabled and i <= topology.n_stages:
                for m in dstreams:
                    specs.append((f"{prefix}.skip.{m}.{i}", (), "skip"))
            cin = cout
        head = prefix.replace("dec", "cls")
        specs.append((head + ".w", (2, dch[-1], 1, 1), "conv"))
        specs.append((head + ".b", (2,), "bias"))
    return specs


def build(topology: FusionTopology | None = None, seed: int = 0, dtype=np.float32) -> SkipcrossNet:
    """Deterministically initialize a network: fan-in scaled normal weights, zero biases and fusion scalars, gates 0.5."""
    topology = topology or FusionTopology()
    topology.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, kind in _param_specs(topology):
        if kind == "conv":
            fan_in = shape[1] * shape[2] * shape[3]
            arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            if name.endswith(".c2.w"):
                # residual branch output starts small so identity shortcuts dominate at init
                arr *= 0.5 / np.sqrt(max(topology.stage_blocks))
        elif kind == "tconv":
            fan_in = shape[0] * shape[2] * shape[3] / 4.0  # stride 2: a quarter of the taps hit each output
            arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif kind == "gate":
            arr = np.array(0.5)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return SkipcrossNet(topology, params, dtype=dtype)


def param_count(net: SkipcrossNet) -> int:
    return int(sum(p.data.size for p in net.params.values()))


# -- checkpoint format --------------------------------------------------------


def save_weights(net: SkipcrossNet, path):
    """Write the ``SKXC`` v1 checkpoint: topology record first, then float32 tensors in registry order."""
    topo_bytes = json.dumps(net.topology.to_dict(), sort_keys=True).encode("utf-8")
    records = [(TOPOLOGY_KEY, None, topo_bytes)] + [(n, p.data, None) for n, p in net.params.items()]
    buf = bytearray()
    buf += MAGIC + struct.pack("<II", VERSION, len(records))
    for name, arr, raw in records:
        nb = name.encode("utf-8")
        buf += struct.pack("<H", len(nb)) + nb
        if raw is not None:
            buf += struct.pack("<BI", 1, len(raw)) + raw
        else:
            a = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote rank-0 to rank-1
            buf += struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes()
    Path(path).write_bytes(bytes(buf))


def _read_checkpoint(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a SKXC checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    topo = None
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt tensor name") from exc
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        if name == TOPOLOGY_KEY:
            if rank != 1:
                raise CheckpointError(f"{path}: topology record must be rank 1")
            try:
                topo = json.loads(take(shape[0]).decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise CheckpointError(f"{path}: corrupt topology record") from exc
            continue
        n = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    if topo is None:
        raise CheckpointError(f"{path}: missing topology record")
    return topo, tensors


def load_weights(path, topology: FusionTopology | None = None) -> SkipcrossNet:
    """Rebuild the recorded network. If ``topology`` is given it must equal the recorded one."""
    topo_dict, tensors = _read_checkpoint(path)
    try:
        recorded = FusionTopology.from_dict(topo_dict)
    except (TypeError, TopologyError) as exc:
        raise CheckpointError(f"{path}: invalid topology record: {exc}") from exc
    if topology is not None and topology != recorded:
        raise TopologyError(
            f"checkpoint topology {recorded.to_dict()} does not match requested {topology.to_dict()}"
        )
    net = build(recorded, seed=0)
    net.load_state_dict(tensors)
    return net

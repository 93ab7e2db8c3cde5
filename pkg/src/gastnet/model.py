"""Network assembly, inference modes, parameter accounting and checkpoints."""
import json
import struct
from collections import deque
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as tn
from .errors import CheckpointError, ConfigError, ShapeError
from .graph import GraphAttentionBlock
from .nn import Module, glorot
from .skeleton import SKELETONS, build_skeleton
from .temporal import TemporalBlock, num_blocks_for
from .tensor import BatchNormState, Tensor

DEFAULT_CHANNELS = {9: 128, 27: 128, 81: 64, 243: 32}


@dataclass
class GastNetConfig:
    skeleton: str = "h36m17"
    receptive_field: int = 27
    kernel_size: int = 3
    channels: int = None
    heads: int = 4
    causal: bool = False
    dropout: float = 0.05
    use_kinematic: bool = True
    use_symmetric: bool = True
    use_bk: bool = True
    use_ck: bool = True
    residual_gab: bool = True
    output_scale: float = 1000.0  # millimetres per network output unit

    def __post_init__(self):
        if self.channels is None:
            self.channels = DEFAULT_CHANNELS.get(self.receptive_field, 128)
        self.validate()

    @property
    def num_blocks(self):
        return num_blocks_for(self.receptive_field, self.kernel_size)

    @property
    def streams(self):
        s = []
        if self.use_symmetric:
            s.append("sym")
        s.append("kin")
        if self.use_bk or self.use_ck:
            s.append("global")
        return tuple(s)

    def validate(self):
        if self.skeleton not in SKELETONS:
            raise ConfigError(f"unknown skeleton {self.skeleton!r}")
        if self.kernel_size < 2 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel size must be odd and >= 3")
        nb = num_blocks_for(self.receptive_field, self.kernel_size)
        if nb is None or nb < 1:
            raise ConfigError(
                f"receptive field {self.receptive_field} is not k**(B+1) with B >= 1 "
                f"for k={self.kernel_size}")
        if self.channels < 1 or self.heads < 1 or self.channels % self.heads:
            raise ConfigError(f"channels ({self.channels}) must be divisible by heads ({self.heads})")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")

    @classmethod
    def baseline(cls, **kw):
        """First-order SemGCN-only configuration (ablation baseline)."""
        kw.update(use_kinematic=False, use_symmetric=False, use_bk=False, use_ck=False)
        return cls(**kw)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class GastNet(Module):
    """Input layer, then alternating graph attention and temporal blocks.

    For B temporal blocks the layout is::

        BN -> conv(2->C, k x 1) -> BN/ReLU -> GAB
           -> [TCB(d=k) -> GAB] -> ... -> [TCB(d=k**B) -> GAB] -> conv(C->3, 1x1)

    Input poses are (batch, T, N, 2); outputs are (batch, T', N, 3) in millimetres.
    """

    def __init__(self, cfg, seed=0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.skeleton = build_skeleton(cfg.skeleton)
        rng = np.random.default_rng(seed)
        C, k = cfg.channels, cfg.kernel_size
        gab = dict(streams=cfg.streams,
                   kin_kernel="kinematic" if cfg.use_kinematic else "first_order",
                   use_bk=cfg.use_bk, use_ck=cfg.use_ck, residual=cfg.residual_gab, dtype=dtype)

        self.input_bn = BatchNormState(2, dtype)
        self.input_conv = glorot(rng, (C, 2, k, 1), 2 * k, C * k, dtype)
        self.input_conv_bn = BatchNormState(C, dtype)
        self.gab = [GraphAttentionBlock(C, self.skeleton, cfg.heads, rng, **gab)]
        self.tcb = []
        for b in range(1, cfg.num_blocks + 1):
            self.tcb.append(TemporalBlock(C, k, k ** b, rng, cfg.dropout, cfg.causal, dtype))
            self.gab.append(GraphAttentionBlock(C, self.skeleton, cfg.heads, rng, **gab))
        # zero start: predictions begin at the origin instead of at random metre-scale offsets
        self.output_conv = Tensor(np.zeros((3, C, 1, 1), dtype=dtype), requires_grad=True)
        self.output_bias = Tensor(np.zeros(3, dtype=dtype), requires_grad=True)

    # parameter names: input.*, block{i}.{stream}.*, temporal{i}.*, output.*
    def named_parameters(self, prefix=""):
        yield "input.bn.gamma", self.input_bn.gamma
        yield "input.bn.beta", self.input_bn.beta
        yield "input.conv", self.input_conv
        yield "input.conv_bn.gamma", self.input_conv_bn.gamma
        yield "input.conv_bn.beta", self.input_conv_bn.beta
        for i, g in enumerate(self.gab):
            yield from g.named_parameters(f"block{i}.")
            if i < len(self.tcb):
                yield from self.tcb[i].named_parameters(f"temporal{i + 1}.")
        yield "output.conv", self.output_conv
        yield "output.bias", self.output_bias

    def named_buffers(self, prefix=""):
        for name, bn in (("input.bn", self.input_bn), ("input.conv_bn", self.input_conv_bn)):
            yield name + ".running_mean", bn.running_mean
            yield name + ".running_var", bn.running_var
        for i, g in enumerate(self.gab):
            yield from g.named_buffers(f"block{i}.")
            if i < len(self.tcb):
                yield from self.tcb[i].named_buffers(f"temporal{i + 1}.")

    @property
    def receptive_field(self):
        return self.cfg.receptive_field

    @property
    def dtype(self):
        return self.input_conv.dtype

    def _stem(self, x, strided):
        x = tn.batchnorm2d(x, self.input_bn, self.training)
        k = self.cfg.kernel_size
        x = tn.conv2d(x, self.input_conv, stride_t=k if strided else 1)
        # dropout lives only in the temporal blocks' second convolution
        return tn.relu(tn.batchnorm2d(x, self.input_conv_bn, self.training))

    def _head(self, x):
        y = tn.conv2d(x, self.output_conv, self.output_bias)
        return y.transpose(0, 2, 3, 1) * self.cfg.output_scale

    def __call__(self, poses, strided=False, rng=None, record=None):
        """Run the network on (batch, T, N, 2) poses.

        ``strided`` selects the single-frame variant: every window of exactly
        ``receptive_field`` frames collapses to one output frame. Otherwise the
        dilated network maps T frames to T - receptive_field + 1 frames.
        ``record`` (a list) receives each block's attention matrices.
        """
        x = poses if isinstance(poses, Tensor) else Tensor(np.asarray(poses, dtype=self.dtype))
        if x.ndim != 4 or x.shape[-1] != 2 or x.shape[2] != self.skeleton.n_joints:
            raise ShapeError(f"expected (batch, T, {self.skeleton.n_joints}, 2) poses, got {x.shape}")
        if x.shape[1] < self.receptive_field:
            raise ShapeError(f"need at least {self.receptive_field} frames, got {x.shape[1]}")
        x = x.transpose(0, 3, 1, 2)
        x = self._stem(x, strided)
        x = self.gab[0](x, record)
        for tcb, gab in zip(self.tcb, self.gab[1:]):
            x = gab(tcb(x, strided, rng), record)
        return self._head(x)

    def predict(self, poses, strided=False, record=None):
        """Inference without graph recording; returns a numpy array."""
        with tn.no_grad():
            was = self.training
            self.eval()
            try:
                return self(poses, strided=strided, record=record).data
            finally:
                self.train(was)


def build_model(cfg, seed=0, dtype=np.float32):
    return GastNet(cfg, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# inference over sequences
# ---------------------------------------------------------------------------

def pad_frames(frames, receptive, causal):
    """Replicate boundary frames so the network emits one output per input frame."""
    if receptive % 2 == 0:
        raise ValueError("receptive field must be odd")
    pad = receptive - 1
    if pad == 0:
        return frames
    widths = [(pad, 0) if causal else (pad // 2, pad // 2)] + [(0, 0)] * (frames.ndim - 1)
    return np.pad(frames, widths, mode="edge")


def root_relative(poses, root):
    return poses - poses[..., root:root + 1, :]


def predict_frames(model, frames, mode="layer_by_layer"):
    """Map normalised 2D frames (T, N, 2) to root-relative 3D frames (T, N, 3)."""
    frames = np.asarray(frames, dtype=model.dtype)
    if frames.ndim != 3 or len(frames) == 0:
        raise ShapeError("expected a non-empty (T, N, 2) frame array")
    rf = model.receptive_field
    padded = pad_frames(frames, rf, model.cfg.causal)
    if mode in ("layer_by_layer", "layer"):
        out = model.predict(padded[None])[0]
    elif mode in ("single_frame", "frame"):
        out = np.concatenate([model.predict(padded[None, t:t + rf], strided=True)[0]
                              for t in range(len(frames))])
    else:
        raise ValueError(f"unknown inference mode {mode!r}")
    return root_relative(out, model.skeleton.root)


def predict_frames_flip(model, frames, mode="layer_by_layer"):
    """Average the direct prediction with the mirrored prediction of mirrored input."""
    perm = model.skeleton.flip_map()
    direct = predict_frames(model, frames, mode)
    mirrored = np.array(frames, dtype=model.dtype)[:, perm]
    mirrored[..., 0] *= -1
    back = predict_frames(model, mirrored, mode)[:, perm]
    back[..., 0] *= -1
    return 0.5 * (direct + back)


def infer_sequence(model, seq, mode="layer_by_layer", flip=False):
    """Lift a :class:`~gastnet.data.Pose2DSequence` to a Pose3DSequence."""
    from .data import Pose3DSequence, normalize
    if seq.skeleton != model.cfg.skeleton:
        raise ConfigError(f"sequence skeleton {seq.skeleton!r} does not match model "
                          f"skeleton {model.cfg.skeleton!r}")
    if seq.n_frames == 0:
        raise ShapeError("empty sequence")
    seq = normalize(seq) if not seq.normalized else seq
    fn = predict_frames_flip if flip else predict_frames
    out = fn(model, seq.frames, mode).astype(np.float64)
    return Pose3DSequence(seq.skeleton, seq.fps, out, seq_id=seq.seq_id)


class StreamingPredictor:
    """Frame-by-frame causal inference with one cached buffer per stage.

    Each pushed 2D frame yields the 3D pose of that frame, computed from the
    current and past frames only. The first frame is replicated to fill the
    receptive field, matching :func:`pad_frames` in causal mode.
    """

    def __init__(self, model):
        if not model.cfg.causal:
            raise ConfigError("streaming inference needs a causal model")
        self.model = model
        k = model.cfg.kernel_size
        self._inputs = deque(maxlen=k)
        # stage b keeps the (k-1)*k**b + 1 latest outputs of stage b-1
        self._stages = [deque(maxlen=(k - 1) * t.dilation + 1) for t in model.tcb]
        self._started = False

    def _advance(self, frame):
        m = self.model
        self._inputs.append(frame)
        if len(self._inputs) < self._inputs.maxlen:
            return None
        with tn.no_grad():
            x = Tensor(np.stack(self._inputs)[None]).transpose(0, 3, 1, 2)
            h = m.gab[0](m._stem(x, True))
            for stage, tcb, gab in zip(self._stages, m.tcb, m.gab[1:]):
                stage.append(h.data)
                if len(stage) < stage.maxlen:
                    return None
                window = Tensor(np.concatenate(stage, axis=2))
                h = gab(tcb(window, False, None))
            return m._head(h).data[0, 0]

    def push(self, frame):
        """Feed one normalised (N, 2) frame; returns its (N, 3) root-relative pose."""
        frame = np.asarray(frame, dtype=self.model.dtype)
        was = self.model.training
        self.model.eval()
        try:
            if not self._started:
                self._started = True
                for _ in range(self.model.receptive_field - 1):
                    self._advance(frame)
            out = self._advance(frame)
        finally:
            self.model.train(was)
        return root_relative(out, self.model.skeleton.root)

    def run(self, frames):
        return np.stack([self.push(f) for f in frames])


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

def param_count(model, per_module=False):
    """Total learnable element count, optionally with a per-module breakdown."""
    total, groups = 0, {}
    for name, p in model.named_parameters():
        total += p.size
        key = name.split(".")[0]
        groups[key] = groups.get(key, 0) + p.size
    return (total, groups) if per_module else total


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"GASTCKPT"
FORMAT_VERSION = 1


def _state_arrays(model):
    for name, p in model.named_parameters():
        yield name, p.data
    for name, buf in model.named_buffers():
        yield name, buf


def checkpoint_bytes(model):
    entries, chunks, offset = [], [], 0
    for name, arr in _state_arrays(model):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "config": model.cfg.to_dict(),
                "seed": model.seed, "tensors": entries}
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    header = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(text))
    return header + text + b"".join(chunks)


def save_checkpoint(model, path):
    data = checkpoint_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def parse_checkpoint(data):
    """Split checkpoint bytes into (manifest dict, payload bytes), validating lengths."""
    head = len(MAGIC) + 12
    if len(data) < head or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a GAST checkpoint (bad magic bytes)")
    version, mlen = struct.unpack("<IQ", data[len(MAGIC):head])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint version {version} != supported {FORMAT_VERSION}")
    if head + mlen > len(data):
        raise CheckpointError("checkpoint truncated inside the manifest")
    try:
        manifest = json.loads(data[head:head + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from exc
    payload = data[head + mlen:]
    expected, offset = 0, 0
    for e in manifest["tensors"]:
        if e["offset"] != offset:
            raise CheckpointError(f"tensor {e['name']} offset {e['offset']} != {offset}")
        offset += 4 * int(np.prod(e["shape"], dtype=np.int64))
    expected = offset
    if len(payload) != expected:
        raise CheckpointError(
            f"payload length {len(payload)} bytes disagrees with manifest ({expected} bytes)")
    return manifest, payload


def load_checkpoint(path, dtype=np.float32):
    with open(path, "rb") as fh:
        data = fh.read()
    return model_from_bytes(data, dtype)


def model_from_bytes(data, dtype=np.float32):
    manifest, payload = parse_checkpoint(data)
    cfg = GastNetConfig.from_dict(manifest["config"])
    model = GastNet(cfg, seed=manifest.get("seed", 0), dtype=dtype)
    params = dict(model.named_parameters())
    bns = {}
    for prefix, bn in _named_batchnorms(model):
        bns[prefix + ".running_mean"] = (bn, "running_mean")
        bns[prefix + ".running_var"] = (bn, "running_var")
    seen = set()
    for e in manifest["tensors"]:
        name, shape = e["name"], tuple(e["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=e["offset"]).reshape(shape)
        arr = arr.astype(dtype)
        if name in params:
            if params[name].shape != shape:
                raise CheckpointError(f"{name}: shape {shape} != model {params[name].shape}")
            params[name].data = arr
        elif name in bns:
            bn, attr = bns[name]
            setattr(bn, attr, arr.copy())
        else:
            raise CheckpointError(f"unknown tensor {name!r} in checkpoint")
        seen.add(name)
    missing = (set(params) | set(bns)) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    return model


def _named_batchnorms(model):
    # buffer names come in (running_mean, running_var) pairs, one per batchnorm,
    # in the same order as the batchnorm objects are visited below
    names = [n[:-len(".running_mean")] for n, _ in model.named_buffers()
             if n.endswith(".running_mean")]
    bns = [model.input_bn, model.input_conv_bn]
    for i, g in enumerate(model.gab):
        bns.extend(layer.bn for layer in g.streams)
        if i < len(model.tcb):
            bns.extend([model.tcb[i].bn1, model.tcb[i].bn2])
    return list(zip(names, bns))

"""Toy encoder-decoder segmentation network and its checkpoint format.

The network downsamples by 4 (two stride-2 stages), widens 3 -> 16 ->
32 -> 64, runs two parallel context convolutions with dilations 1 and 2,
then decodes through a skip concatenation of the half-resolution
encoder feature back up to full resolution and a 1x1 classifier head.
Every convolution sits behind a ConvBlock ``.conv`` attribute and is
addressable as encoder-side or decoder-side (the head counts as
decoder), which is what the placement ablations rewrite.

Checkpoint layout (all integers little-endian):
  magic ``WADP`` | version u16 | descriptor length u32 | descriptor text
  | tensor count u32 | per tensor: name (u16 length + UTF-8), dtype tag
  u8 (0 = f64), frozen flag u8, rank u8, shape dims u32 each, payload
  f64 LE.  The descriptor text carries arch id, class count, placement
  token and the offsets-enabled flag.
"""

from __future__ import annotations

import struct

import numpy as np

from . import layers as L
from . import tensor as T
from .tensor import Tensor

N_CLASSES_DEFAULT = 6
VOID_ID = 255

_ARCH_ID = "segmodel-v1"
_CKPT_MAGIC = b"WADP"
_CKPT_VERSION = 1

ENCODER_BLOCKS = ("enc1", "enc2", "enc3", "ctx_a", "ctx_b")
DECODER_BLOCKS = ("fuse", "dec1", "head")
BLOCK_ORDER = ENCODER_BLOCKS + DECODER_BLOCKS


class SegModel:
    """Encoder-decoder segmentation network with a /2 skip connection."""

    def __init__(self, n_classes=N_CLASSES_DEFAULT, rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.n_classes = n_classes
        self.placement = None          # deformable placement token, if converted
        self.blocks = {
            "enc1": L.ConvBlock(3, 16, rng=rng),
            "enc2": L.ConvBlock(16, 32, stride=2, rng=rng),
            "enc3": L.ConvBlock(32, 64, stride=2, rng=rng),
            "ctx_a": L.ConvBlock(64, 32, dilation=1, rng=rng),
            "ctx_b": L.ConvBlock(64, 32, dilation=2, rng=rng),
            "fuse": L.ConvBlock(96, 32, rng=rng),
            "dec1": L.ConvBlock(32, 16, rng=rng),
            "head": L.ConvBlock(16, n_classes, kernel_size=1, rng=rng,
                                use_bn=False, use_relu=False),
        }

    # -- forward --------------------------------------------------------------

    def forward(self, x, training=False):
        """Logits [B, n_classes, H, W]; H and W must be divisible by 4."""
        B, C, H, W = x.shape
        if H % 4 or W % 4:
            raise ValueError(f"input size {H}x{W} must be divisible by 4")
        b = self.blocks
        e1 = b["enc1"](x, training)
        e2 = b["enc2"](e1, training)
        e3 = b["enc3"](e2, training)
        ctx = T.concat([b["ctx_a"](e3, training), b["ctx_b"](e3, training)], axis=1)
        up = T.upsample_bilinear2x(ctx)
        fused = b["fuse"](T.concat([up, e2], axis=1), training)
        d1 = b["dec1"](T.upsample_bilinear2x(fused), training)
        return b["head"](d1, training)

    __call__ = forward

    def predict(self, x):
        """Eval-mode argmax labels [B, H, W] (uint8), no graph recorded."""
        with T.no_grad():
            logits = self.forward(x, training=False)
        return np.argmax(logits.data, axis=1).astype(np.uint8)

    # -- parameter bookkeeping ------------------------------------------------

    def named_parameters(self):
        out = []
        for name in BLOCK_ORDER:
            out.extend(self.blocks[name].named_parameters(name))
        return out

    def named_buffers(self):
        out = []
        for name in BLOCK_ORDER:
            out.extend(self.blocks[name].named_buffers(name))
        return out

    def named_tensors(self):
        """Parameters and buffers with their frozen flags, in saved order."""
        entries = []
        for name, param in self.named_parameters():
            entries.append((name, param.data, not param.requires_grad))
        frozen_stats = {name: self.blocks[name].bn.stats_frozen
                        for name in BLOCK_ORDER if self.blocks[name].bn is not None}
        for name, buf in self.named_buffers():
            entries.append((name, buf, frozen_stats[name.split(".")[0]]))
        return entries

    def trainable_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def blocks_for_placement(self, placement):
        if placement not in L.PLACEMENTS:
            raise ValueError(f"unknown placement {placement!r}")
        if placement == L.PLACEMENT_ENCODER:
            names = ENCODER_BLOCKS
        elif placement == L.PLACEMENT_DECODER:
            names = DECODER_BLOCKS
        else:
            names = BLOCK_ORDER
        return [self.blocks[n] for n in names]

    def deformable_convs(self):
        return [(name, blk.conv) for name, blk in
                ((n, self.blocks[n]) for n in BLOCK_ORDER)
                if isinstance(blk.conv, L.DeformableConv2d)]

    def convert_to_deformable(self, placement):
        """Wrap the selected convs and remember the placement token."""
        L.convert_to_deformable(self, placement)
        self.placement = placement
        return self

    def set_offsets_enabled(self, flag):
        for _, conv in self.deformable_convs():
            L.set_offsets_enabled(conv, flag)

    @property
    def offsets_enabled(self):
        convs = self.deformable_convs()
        return bool(convs) and all(c.offsets_enabled for _, c in convs)

    def parameter_count(self):
        return sum(p.data.size for _, p in self.named_parameters())


def partition_parameters(model):
    """Classify every tensor name into exactly one adaptation family.

    Families: ``base`` (conv weights/biases), ``offset`` (offset
    predictor weights/biases), ``bn_affine`` (gamma/beta), ``bn_running``
    (running statistics).  The partition is exhaustive and disjoint by
    construction; used to enforce the freeze contract.
    """
    groups = {"base": [], "offset": [], "bn_affine": [], "bn_running": []}
    for name, _ in model.named_parameters():
        if ".offset." in name:
            groups["offset"].append(name)
        elif name.endswith(".bn.gamma") or name.endswith(".bn.beta"):
            groups["bn_affine"].append(name)
        else:
            groups["base"].append(name)
    for name, _ in model.named_buffers():
        groups["bn_running"].append(name)
    return groups


# ---------------------------------------------------------------------------
# checkpoint IO
# ---------------------------------------------------------------------------


def _descriptor_text(model):
    lines = [
        f"arch = {_ARCH_ID}",
        f"n_classes = {model.n_classes}",
        f"placement = {model.placement or 'NONE'}",
        f"offsets_enabled = {int(model.offsets_enabled)}",
    ]
    return "\n".join(lines) + "\n"


def _parse_descriptor(text):
    fields = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    return fields


def save_checkpoint(model, path):
    """Serialize all named tensors plus structure flags (format above)."""
    entries = model.named_tensors()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<H", _CKPT_VERSION))
        desc = _descriptor_text(model).encode("utf-8")
        fh.write(struct.pack("<I", len(desc)))
        fh.write(desc)
        fh.write(struct.pack("<I", len(entries)))
        for name, data, frozen in entries:
            arr = np.ascontiguousarray(data, dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BBB", 0, int(frozen), arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_checkpoint(path):
    """Parse a checkpoint into (descriptor dict, {name: (array, frozen)})."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {blob[:4]!r})")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 6
    (desc_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    desc = _parse_descriptor(blob[pos:pos + desc_len].decode("utf-8"))
    pos += desc_len
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    tensors = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            dtype_tag, frozen, rank = struct.unpack_from("<BBB", blob, pos)
            pos += 3
            if dtype_tag != 0:
                raise ValueError(f"{path}: unknown dtype tag {dtype_tag} for {name}")
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape)
            pos += 8 * n
            tensors[name] = (arr.astype(np.float64), bool(frozen))
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    if pos != len(blob):
        raise ValueError(f"{path}: trailing bytes after tensor payload")
    return desc, tensors


def load_checkpoint(path):
    """Rebuild a SegModel from a checkpoint; strict name and flag match."""
    desc, tensors = read_checkpoint(path)
    if desc.get("arch") != _ARCH_ID:
        raise ValueError(f"{path}: unknown architecture {desc.get('arch')!r}")
    model = SegModel(n_classes=int(desc["n_classes"]))
    placement = desc.get("placement", "NONE")
    if placement != "NONE":
        model.convert_to_deformable(placement)
    expected = {name for name, _, _ in model.named_tensors()}
    got = set(tensors)
    if expected != got:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise ValueError(
            f"{path}: tensor names do not match the declared structure "
            f"(placement={placement}); missing={missing[:4]} extra={extra[:4]}")
    for name, param in model.named_parameters():
        arr, frozen = tensors[name]
        if arr.shape != param.data.shape:
            raise ValueError(f"{path}: shape mismatch for {name}")
        param.data = arr.copy()
        param.requires_grad = not frozen
    for name, buf in model.named_buffers():
        arr, frozen = tensors[name]
        buf[:] = arr
        block = model.blocks[name.split(".")[0]]
        block.bn.stats_frozen = frozen
        if name.endswith("running_var") and not np.all(arr > 0):
            raise ValueError(f"{path}: non-positive running variance in {name}")
    if placement != "NONE":
        model.set_offsets_enabled(desc.get("offsets_enabled", "1") == "1")
    return model


def diff_checkpoints(path_a, path_b):
    """Names whose payloads differ bitwise, plus one-sided names."""
    _, ta = read_checkpoint(path_a)
    _, tb = read_checkpoint(path_b)
    changed = [n for n in sorted(set(ta) & set(tb))
               if not np.array_equal(ta[n][0], tb[n][0])]
    only_a = sorted(set(ta) - set(tb))
    only_b = sorted(set(tb) - set(ta))
    return {"changed": changed, "only_first": only_a, "only_second": only_b}

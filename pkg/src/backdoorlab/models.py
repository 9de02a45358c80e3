"""Shared-trunk classifiers with a main head and a shallow-attached second head.

The backbone is a plain stack of conv+relu(+pool) blocks feeding a global
average pool and an affine head; the second head branches off after a
configurable block with two extra conv layers and its own affine output of
the same class count. Valid convolutions shrink the feature map, so kernel
sizes are clamped to the remaining spatial extent when the map gets small.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, affine, conv1d, conv2d, global_average_pool, max_pool1d, max_pool2d, relu
from .container import FileFormatError, Reader, Writer, parse_ints

CHECKPOINT_MAGIC = b"ABLC"

SECOND_BRANCH_WIDTHS = (32, 64)


@dataclass(frozen=True)
class BlockSpec:
    channels: int
    kernel: int = 3
    pool: bool = False


@dataclass(frozen=True)
class BackboneSpec:
    kind: str  # "image" | "series"
    input_shape: tuple[int, ...]  # (C, H, W) or (C, T)
    num_classes: int
    blocks: tuple[BlockSpec, ...]

    def __post_init__(self):
        if self.kind not in ("image", "series"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        want = 3 if self.kind == "image" else 2
        if len(self.input_shape) != want:
            raise ValueError(f"{self.kind} input shape must have {want} axes, got {self.input_shape}")
        if not self.blocks:
            raise ValueError("backbone needs at least one block")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")


def image_backbone(num_classes: int, input_shape: tuple[int, int, int] = (1, 16, 16)) -> BackboneSpec:
    """Default 4-block image trunk, widths 16/32/64/64, one early pool."""
    blocks = (
        BlockSpec(16, pool=True),
        BlockSpec(32),
        BlockSpec(64),
        BlockSpec(64),
    )
    return BackboneSpec("image", tuple(input_shape), num_classes, blocks)


def series_backbone(num_classes: int, input_shape: tuple[int, int] = (2, 64)) -> BackboneSpec:
    """Default 4-block series trunk, 1D analogue of the image stack."""
    blocks = (
        BlockSpec(16, pool=True),
        BlockSpec(32, pool=True),
        BlockSpec(64, pool=True),
        BlockSpec(64),
    )
    return BackboneSpec("series", tuple(input_shape), num_classes, blocks)


def _conv_out(n: int, k: int) -> int:
    return n - k + 1


def _trunk_plan(spec: BackboneSpec):
    """Per-block (in_ch, out_ch, kernel, pooled, out_extents) with clamped kernels."""
    extents = list(spec.input_shape[1:])
    in_ch = spec.input_shape[0]
    plan = []
    for blk in spec.blocks:
        k = min(blk.kernel, min(extents))
        if k < 1:
            raise ValueError(f"feature map exhausted before block with extents {extents}")
        extents = [_conv_out(e, k) for e in extents]
        pooled = blk.pool and min(extents) >= 2
        if pooled:
            extents = [(e - 2) // 2 + 1 for e in extents]
        plan.append((in_ch, blk.channels, k, pooled, tuple(extents)))
        in_ch = blk.channels
    return plan


def _branch_plan(in_ch: int, extents: tuple[int, ...]):
    """Second-branch conv sizing from the attachment point's feature map."""
    plan = []
    ext = list(extents)
    for width in SECOND_BRANCH_WIDTHS:
        k = min(3, min(ext))
        ext = [_conv_out(e, k) for e in ext]
        plan.append((in_ch, width, k))
        in_ch = width
    return plan


def _he_kernel(rng, shape) -> Parameter:
    fan_in = int(np.prod(shape[1:]))
    return Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))


def _batched(n: int, size: int = 256):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


class _Backbone:
    """Parameter containers and forward passes shared by both model classes."""

    def __init__(self, spec: BackboneSpec):
        self.spec = spec
        self.num_classes = spec.num_classes
        self._is_image = spec.kind == "image"

    def _block_forward(self, x: Tensor, kernel: Parameter, pooled: bool) -> Tensor:
        h = relu(conv2d(x, kernel) if self._is_image else conv1d(x, kernel))
        if pooled:
            h = max_pool2d(h) if self._is_image else max_pool1d(h)
        return h


class DualHeadModel(_Backbone):
    """Trunk with main head h1 plus a second head h2 attached after `attach` blocks."""

    def __init__(self, spec: BackboneSpec, attach: int, seed: int):
        super().__init__(spec)
        if not 1 <= attach <= len(spec.blocks):
            raise ValueError(f"attachment point {attach} out of range [1,{len(spec.blocks)}]")
        self.attach = attach
        self.seed = seed
        rng = np.random.default_rng(seed)

        plan = _trunk_plan(spec)
        self._plan = plan
        kdims = 2 if self._is_image else 1
        self.trunk = [
            (_he_kernel(rng, (out_ch, in_ch) + (k,) * kdims), pooled)
            for in_ch, out_ch, k, pooled, _ in plan
        ]
        feat = plan[-1][1]
        self.head_weight = _he_kernel(rng, (feat, spec.num_classes))
        self.head_bias = Parameter(np.zeros(spec.num_classes))

        attach_ch, attach_ext = plan[attach - 1][1], plan[attach - 1][4]
        branch = _branch_plan(attach_ch, attach_ext)
        self.branch = [_he_kernel(rng, (out_ch, in_ch) + (k,) * kdims) for in_ch, out_ch, k in branch]
        self.branch_head_weight = _he_kernel(rng, (branch[-1][1], spec.num_classes))
        self.branch_head_bias = Parameter(np.zeros(spec.num_classes))

    # parameter groups ------------------------------------------------
    def shared_parameters(self) -> list[Parameter]:
        return [k for k, _ in self.trunk[: self.attach]]

    def main_trunk_parameters(self) -> list[Parameter]:
        return [k for k, _ in self.trunk[self.attach :]]

    def main_parameters(self) -> list[Parameter]:
        """Everything a main-head loss can reach: shared trunk, deep trunk, h1."""
        return self.shared_parameters() + self.main_trunk_parameters() + [self.head_weight, self.head_bias]

    def second_parameters(self) -> list[Parameter]:
        """Everything a second-head loss can reach: shared trunk plus the branch."""
        return self.shared_parameters() + self.branch_only_parameters()

    def branch_only_parameters(self) -> list[Parameter]:
        return list(self.branch) + [self.branch_head_weight, self.branch_head_bias]

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        named = [(f"trunk.{i}.kernel", k) for i, (k, _) in enumerate(self.trunk)]
        named += [("head.weight", self.head_weight), ("head.bias", self.head_bias)]
        named += [(f"second.conv{i}.kernel", k) for i, k in enumerate(self.branch)]
        named += [("second.fc.weight", self.branch_head_weight), ("second.fc.bias", self.branch_head_bias)]
        return named

    def parameter_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    # forward passes ----------------------------------------------------
    def forward_shared(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        for kernel, pooled in self.trunk[: self.attach]:
            h = self._block_forward(h, kernel, pooled)
        return h

    def forward_main_from(self, shared: Tensor) -> Tensor:
        h = shared
        for kernel, pooled in self.trunk[self.attach :]:
            h = self._block_forward(h, kernel, pooled)
        return affine(global_average_pool(h), self.head_weight, self.head_bias)

    def forward_second_from(self, shared: Tensor) -> Tensor:
        h = shared
        for kernel in self.branch:
            h = relu(conv2d(h, kernel) if self._is_image else conv1d(h, kernel))
        return affine(global_average_pool(h), self.branch_head_weight, self.branch_head_bias)

    def forward_main(self, x) -> Tensor:
        return self.forward_main_from(self.forward_shared(x))

    def forward_second(self, x) -> Tensor:
        return self.forward_second_from(self.forward_shared(x))

    def forward_dual(self, x) -> tuple[Tensor, Tensor]:
        shared = self.forward_shared(x)
        return self.forward_main_from(shared), self.forward_second_from(shared)

    # inference helpers ---------------------------------------------------
    def predict_logits(self, features: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return np.concatenate(
                [self.forward_main(features[s]).data for s in _batched(len(features))]
            )

    def predict_dual_logits(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        main, second = [], []
        with ad.no_grad():
            for s in _batched(len(features)):
                lm, ls = self.forward_dual(features[s])
                main.append(lm.data)
                second.append(ls.data)
        return np.concatenate(main), np.concatenate(second)


class SingleHeadModel(_Backbone):
    """Trunk plus main head only (standard baseline and exported artifact)."""

    def __init__(self, spec: BackboneSpec, seed: int):
        super().__init__(spec)
        self.seed = seed
        rng = np.random.default_rng(seed)
        plan = _trunk_plan(spec)
        self._plan = plan
        kdims = 2 if self._is_image else 1
        self.trunk = [
            (_he_kernel(rng, (out_ch, in_ch) + (k,) * kdims), pooled)
            for in_ch, out_ch, k, pooled, _ in plan
        ]
        self.head_weight = _he_kernel(rng, (plan[-1][1], spec.num_classes))
        self.head_bias = Parameter(np.zeros(spec.num_classes))

    def parameters(self) -> list[Parameter]:
        return [k for k, _ in self.trunk] + [self.head_weight, self.head_bias]

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        named = [(f"trunk.{i}.kernel", k) for i, (k, _) in enumerate(self.trunk)]
        named += [("head.weight", self.head_weight), ("head.bias", self.head_bias)]
        return named

    def parameter_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def forward(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        for kernel, pooled in self.trunk:
            h = self._block_forward(h, kernel, pooled)
        return affine(global_average_pool(h), self.head_weight, self.head_bias)

    def predict_logits(self, features: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return np.concatenate([self.forward(features[s]).data for s in _batched(len(features))])


class DetectorModel(DualHeadModel):
    """Independent shallow net for the two-model ablation: shared-prefix
    architecture plus the second branch, but no weight sharing with the
    main model. Only the second head path is ever used."""

    def __init__(self, spec: BackboneSpec, attach: int, seed: int):
        prefix = BackboneSpec(spec.kind, spec.input_shape, spec.num_classes, spec.blocks[:attach])
        super().__init__(prefix, attach, seed)


def build_model(spec: BackboneSpec, attach: int, seed: int) -> DualHeadModel:
    return DualHeadModel(spec, attach, seed)


def export_main(model: DualHeadModel) -> SingleHeadModel:
    """Copy the trunk and main head into a standalone single-head classifier."""
    out = SingleHeadModel(model.spec, model.seed)
    for (kernel, _), (src, _) in zip(out.trunk, model.trunk):
        kernel.data[...] = src.data
    out.head_weight.data[...] = model.head_weight.data
    out.head_bias.data[...] = model.head_bias.data
    return out


# ---------------------------------------------------------------------------
# checkpoints

def _spec_fields(spec: BackboneSpec) -> dict[str, str]:
    blocks = ",".join(f"{b.channels}:{b.kernel}:{int(b.pool)}" for b in spec.blocks)
    return {
        "kind": spec.kind,
        "input_shape": ",".join(str(v) for v in spec.input_shape),
        "num_classes": str(spec.num_classes),
        "blocks": blocks,
    }


def _spec_from_fields(fields: dict[str, str]) -> BackboneSpec:
    blocks = tuple(
        BlockSpec(int(c), int(k), bool(int(p)))
        for c, k, p in (part.split(":") for part in fields["blocks"].split(","))
    )
    return BackboneSpec(
        fields["kind"],
        tuple(int(v) for v in parse_ints(fields["input_shape"])),
        int(fields["num_classes"]),
        blocks,
    )


def save_checkpoint(model: DualHeadModel | SingleHeadModel, path: str):
    w = Writer()
    w.magic(CHECKPOINT_MAGIC)
    is_dual = isinstance(model, DualHeadModel)
    w.u8(1 if is_dual else 2)
    named = model.named_parameters()
    w.u32(len(named))
    for name, param in named:
        encoded = name.encode("utf-8")
        w.u16(len(encoded))
        w.parts.append(encoded)
        w.array(param.data)
    fields = _spec_fields(model.spec)
    fields["seed"] = str(model.seed)
    if is_dual:
        fields["attach"] = str(model.attach)
    w.text_block(fields)
    with open(path, "wb") as fh:
        fh.write(w.tobytes())


def load_checkpoint(path: str) -> DualHeadModel | SingleHeadModel:
    with open(path, "rb") as fh:
        reader = Reader(fh.read(), path=path)
    reader.magic(CHECKPOINT_MAGIC)
    tag = reader.u8()
    count = reader.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = reader.u16()
        name = reader.take(name_len).decode("utf-8")
        tensors[name] = reader.array()
    fields = reader.text_block()
    spec = _spec_from_fields(fields)
    seed = int(fields["seed"])
    if tag == 1:
        model = DualHeadModel(spec, int(fields["attach"]), seed)
    elif tag == 2:
        model = SingleHeadModel(spec, seed)
    else:
        raise FileFormatError(f"{path}: unknown model tag {tag}")
    for name, param in model.named_parameters():
        if name not in tensors:
            raise FileFormatError(f"{path}: checkpoint missing tensor {name!r}")
        if tensors[name].shape != param.data.shape:
            raise FileFormatError(
                f"{path}: tensor {name!r} has shape {tensors[name].shape}, expected {param.data.shape}"
            )
        param.data[...] = tensors[name]
    return model

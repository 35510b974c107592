"""Two-branch multi-scale feature extractor.

Satellite and ground branches share one U-Net-lite architecture but never
share weights. Each branch is an encoder (three stride-2 convs) plus a decoder
(two convs after nearest-upsampling with skip concatenation) and three 1x1
projection heads that read the bottleneck and the two decoder stages. The
pyramid is coarse to fine with 8 channels at every level; a 64x64 input yields
8x8, 16x16 and 32x32 maps.

Parameter names are flat ("sat.enc.conv1.weight", ...). Everything under
``enc.`` is the "encoder" group (shared in partial federation); decoder convs
and heads form the "decoder" group (private).
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

BRANCHES = ("sat", "grd")
PYRAMID_CHANNELS = 8
LEVEL_SCALES = (8, 4, 2)  # coarse -> fine, divisors of the input dims
N_LEVELS = len(LEVEL_SCALES)

# layer name, out channels, in channels, kernel, stride, padding
BRANCH_LAYERS = (
    ("enc.conv1", 8, 3, 3, 2, 1),
    ("enc.conv2", 16, 8, 3, 2, 1),
    ("enc.conv3", 32, 16, 3, 2, 1),
    ("dec.conv1", 16, 48, 3, 1, 1),  # up(e3) 32ch + skip e2 16ch
    ("dec.conv2", 8, 24, 3, 1, 1),  # up(d1) 16ch + skip e1 8ch
    ("head.l1", 8, 8, 1, 1, 0),  # reads dec.conv2 out (finest level)
    ("head.l2", 8, 16, 1, 1, 0),  # reads dec.conv1 out
    ("head.l3", 8, 32, 1, 1, 0),  # reads enc.conv3 out (coarsest level)
)

GROUPS = ("encoder", "decoder")


def group_of(name: str) -> str:
    return "encoder" if ".enc." in name else "decoder"


@dataclass
class FeaturePyramid:
    """Per-branch feature maps, coarsest first; dims strictly increase."""

    levels: list

    def __post_init__(self):
        dims = [lv.shape[-1] for lv in self.levels]
        if dims != sorted(dims) or len(set(dims)) != len(dims):
            raise ValueError(f"pyramid levels must go coarse to fine, got widths {dims}")

    def __len__(self) -> int:
        return len(self.levels)


class ModelParams:
    """Flat named-parameter store for both branches."""

    def __init__(self, tensors: dict):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list:
        return sorted(self.tensors)

    def branch(self, branch: str) -> dict:
        if branch not in BRANCHES:
            raise KeyError(f"unknown branch {branch!r}, expected one of {BRANCHES}")
        prefix = branch + "."
        return {n[len(prefix):]: t for n, t in self.tensors.items() if n.startswith(prefix)}

    def clone(self) -> "ModelParams":
        return ModelParams({n: Tensor(t.data.copy(), requires_grad=True) for n, t in self.tensors.items()})

    def replace(self, updates: dict) -> None:
        """Swap in new values (fresh leaf tensors) for the given names."""
        for name, data in updates.items():
            if name not in self.tensors:
                raise KeyError(f"unknown parameter {name!r}")
            if tuple(data.shape) != self.tensors[name].shape:
                raise T.ShapeError(
                    f"parameter {name}: shape {tuple(data.shape)} != {self.tensors[name].shape}"
                )
            self.tensors[name] = Tensor(data, requires_grad=True)

    def state_bytes(self) -> bytes:
        blob = b"".join(self.tensors[n].data.tobytes() for n in self.names())
        return blob


def _param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def init_params(seed: int) -> ModelParams:
    """Kaiming-uniform fan-in weights (variance 2/fan_in), zero biases.

    Deterministic per seed and per parameter name, independent of iteration
    order.
    """
    tensors = {}
    for branch in BRANCHES:
        for layer, cout, cin, k, _, _ in BRANCH_LAYERS:
            wname = f"{branch}.{layer}.weight"
            fan_in = cin * k * k
            bound = np.sqrt(6.0 / fan_in)
            w = _param_rng(seed, wname).uniform(-bound, bound, size=(cout, cin, k, k))
            tensors[wname] = Tensor(w.astype(np.float32), requires_grad=True)
            tensors[f"{branch}.{layer}.bias"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
    return ModelParams(tensors)


def param_partition(params: ModelParams, group: str) -> list:
    """Deterministically ordered (name, tensor) list for a parameter group."""
    if group == "all":
        names = params.names()
    elif group in GROUPS:
        names = [n for n in params.names() if group_of(n) == group]
    else:
        raise ValueError(f"unknown group {group!r}, expected encoder/decoder/all")
    return [(n, params.tensors[n]) for n in names]


def count_params(params: ModelParams, group: str = "all") -> int:
    return sum(t.numel for _, t in param_partition(params, group))


def _layer(branch: dict, x: Tensor, name: str, stride: int, pad: int, act: bool) -> Tensor:
    out = T.conv2d(x, branch[f"{name}.weight"], branch[f"{name}.bias"], stride=stride, padding=pad)
    return T.relu(out) if act else out


def forward_pyramid(image: Tensor, branch: dict) -> FeaturePyramid:
    """Run one branch. ``image`` is 3 x H x W or N x 3 x H x W with H, W
    divisible by 8; levels come back coarse to fine with matching rank."""
    squeeze = image.data.ndim == 3
    x = T.stack_batch([image]) if squeeze else image
    h, w = x.shape[2], x.shape[3]
    if h % 8 or w % 8:
        raise T.ShapeError(f"input dims must be divisible by 8, got {h}x{w}")
    e1 = _layer(branch, x, "enc.conv1", 2, 1, act=True)
    e2 = _layer(branch, e1, "enc.conv2", 2, 1, act=True)
    e3 = _layer(branch, e2, "enc.conv3", 2, 1, act=True)
    d1 = _layer(branch, T.concat_channels([T.upsample2x_nearest(e3), e2]), "dec.conv1", 1, 1, act=True)
    d2 = _layer(branch, T.concat_channels([T.upsample2x_nearest(d1), e1]), "dec.conv2", 1, 1, act=True)
    levels = [
        _layer(branch, e3, "head.l3", 1, 0, act=False),
        _layer(branch, d1, "head.l2", 1, 0, act=False),
        _layer(branch, d2, "head.l1", 1, 0, act=False),
    ]
    if squeeze:
        levels = [T.select_batch(lv, 0) for lv in levels]
    return FeaturePyramid(levels)


_IDENTITY_CHANNELS = (0, 1, 2, 0, 1, 2, 0, 1)


def identity_pyramid(image) -> FeaturePyramid:
    """Fixed feature extractor for solver-exactness tests: replicate RGB into
    8 channels and decimate to each level's grid (map[::s, ::s]), which equals
    rendering at the level's rescaled intrinsics."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim != 3 or data.shape[0] != 3:
        raise T.ShapeError(f"identity_pyramid wants a 3 x H x W image, got {data.shape}")
    rep = data[list(_IDENTITY_CHANNELS)]
    levels = [Tensor(np.ascontiguousarray(rep[:, ::s, ::s])) for s in LEVEL_SCALES]
    return FeaturePyramid(levels)


# ---------------------------------------------------------------------------
# checkpoints: a directory of CVGT tensor files plus a JSON manifest
# ---------------------------------------------------------------------------


def save_params(directory, params: ModelParams) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"format": 1, "tensors": {}}
    for name in params.names():
        t = params.tensors[name]
        fname = f"{name}.cvgt"
        T.save_tensor(directory / fname, t.data)
        manifest["tensors"][name] = {"file": fname, "group": group_of(name), "dims": list(t.shape)}
    with open(directory / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_params(directory) -> ModelParams:
    directory = Path(directory)
    with open(directory / "manifest.json") as f:
        manifest = json.load(f)
    tensors = {}
    for name, meta in manifest["tensors"].items():
        data = T.load_tensor(directory / meta["file"])
        if list(data.shape) != meta["dims"]:
            raise ValueError(f"checkpoint tensor {name}: dims {list(data.shape)} != manifest {meta['dims']}")
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(tensors)

"""Two-stream encoder-decoder backbone with RPN, RoI classification and per-class mask heads.

Layer names follow the layer tables the architecture is specified by
(``geometry0``, ``block2.convres1``, ``rpncls7a``, ``mask13`` ...), so a
checkpoint's parameter names identify the layer they belong to.
"""
from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .camera import CameraView
from .detection import AnchorSet, Box3
from .fusion import FeatureVolume, GridConfig, backproject_features
from .tensor import Tensor


@dataclass
class ModelConfig:
    n_classes: int = 4
    widths: tuple = (8, 16, 32)  # geometry/color stream, decoder, bottleneck
    color_channels: int = 16  # 2D CNN output, back-projected into the grid
    cnn_widths: tuple = (8, 16, 16)
    rpn_width: int = 64
    roi_channels: int = 16
    roi_size: int = 4
    mlp_widths: tuple = (64, 32, 32)
    mask_channels: int = 0  # 0 means "F5 width"
    chunk_extents: tuple = (32, 16, 32)
    anchors: dict = field(default_factory=lambda: AnchorSet([(4, 4, 4), (8, 6, 8)], [(10, 8, 10)]).to_dict())
    feature_stride: int = 8
    use_color: bool = True
    use_proxy: bool = True
    use_completion: bool = True
    use_refinement: bool = True
    padding: str = "zeros"  # "zeros", or "edge" to replicate border voxels
    loss_weights: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)  # objectness, box, class, completion, proxy
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.cnn_widths = tuple(int(w) for w in self.cnn_widths)
        self.mlp_widths = tuple(int(w) for w in self.mlp_widths)
        self.chunk_extents = tuple(int(e) for e in self.chunk_extents)
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        if isinstance(self.anchors, AnchorSet):
            self.anchors = self.anchors.to_dict()
        if min(self.widths + self.cnn_widths + self.mlp_widths) <= 0:
            raise ValueError("layer widths must be positive")
        if any(w % 2 for w in self.widths):
            raise ValueError("backbone widths must be even (residual bottleneck halves them)")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if any(e % 4 for e in self.chunk_extents):
            raise ValueError(f"chunk extents {self.chunk_extents} must be divisible by 4")
        if len(self.loss_weights) != 5:
            raise ValueError("five loss weights are required")
        if self.padding not in ("edge", "zeros"):
            raise ValueError(f"unknown padding mode {self.padding!r}")
        if self.cnn_widths[-1] != self.color_channels:
            raise ValueError("last 2D CNN width must equal color_channels")

    @property
    def anchor_set(self) -> AnchorSet:
        return AnchorSet.from_dict(self.anchors)

    @property
    def f5_channels(self) -> int:
        return self.widths[0]

    @property
    def mask_width(self) -> int:
        return self.mask_channels or self.f5_channels

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def full(cls, **kw) -> "ModelConfig":
        from .detection import SCANNET_ANCHORS

        base = dict(n_classes=8, widths=(32, 64, 128), color_channels=128, cnn_widths=(32, 64, 128),
                    rpn_width=256, roi_channels=64, mlp_widths=(256, 128, 128), chunk_extents=(96, 48, 96),
                    anchors=SCANNET_ANCHORS.to_dict())
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class FeaturePyramid:
    F2: Tensor
    F3: Tensor
    F5: Tensor
    proxy_logits: Tensor
    skip: Tensor | None = None  # concatenated half-resolution stream features


# ----------------------------------------------------------------------------
# parameter registry


def _layer_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple]":
    """Every parameter name with its shape, in construction order."""
    w0, w1, w2 = cfg.widths
    a = cfg.anchor_set
    S = OrderedDict()

    def conv(name, cin, cout, k):
        S[f"{name}.weight"] = (cout, cin) + (k,) * 3
        S[f"{name}.bias"] = (cout,)

    def tconv(name, cin, cout, k):
        S[f"{name}.weight"] = (cin, cout) + (k,) * 3
        S[f"{name}.bias"] = (cout,)

    def block(name, n):
        conv(f"{name}.convres0", n, n // 2, 1)
        conv(f"{name}.convres1", n // 2, n // 2, 3)
        conv(f"{name}.convres2", n // 2, n, 1)

    def lin(name, nin, nout):
        S[f"{name}.weight"] = (nout, nin)
        S[f"{name}.bias"] = (nout,)

    cin = 3
    for i, c in enumerate(cfg.cnn_widths):
        S[f"cnn2d.conv{i}.weight"] = (c, cin, 4, 4)
        S[f"cnn2d.conv{i}.bias"] = (c,)
        cin = c
    conv("geometry0", 2, w0, 2)
    block("block0", w0)
    conv("color1", cfg.color_channels, w0, 2)
    block("block1", w0)
    conv("combine2", 2 * w0, w2, 2)
    block("block2", w2)
    conv("encoder3", w2, w2, 3)
    block("block3", w2)
    tconv("skip4", w2, w1, 2)
    block("block4", w1)
    tconv("decoder5", w1 + 2 * w0, w0, 2)
    block("block5", w0)
    conv("proxy5", w0, 1, 1)
    conv("rpn6", w2, cfg.rpn_width, 3)
    conv("rpncls7a", cfg.rpn_width, 2 * a.n_small, 1)
    conv("rpnbbox7b", cfg.rpn_width, 6 * a.n_small, 1)
    conv("rpn8", w2, cfg.rpn_width, 3)
    conv("rpncls9a", cfg.rpn_width, 2 * a.n_big, 1)
    conv("rpnbbox9b", cfg.rpn_width, 6 * a.n_big, 1)
    conv("roireduce10", w2, cfg.roi_channels, 1)
    flat = cfg.roi_channels * cfg.roi_size ** 3
    m1, m2, m3 = cfg.mlp_widths
    lin("cls10a", flat, m1)
    lin("cls10b", m1, m2)
    lin("cls10c", m2, m3)
    lin("clscls10", m3, cfg.n_classes)
    lin("clsbbox10", m3, 6 * cfg.n_classes)
    n = cfg.mask_width
    for i, k in zip(range(11, 15), (9, 7, 5, 3)):
        conv(f"mask{i}", w0 if i == 11 else n, n, k)
    conv("mask15", n, cfg.n_classes, 1)
    # drop empty heads (a scale without anchors)
    return OrderedDict((k, v) for k, v in S.items() if all(d > 0 for d in v))


def _fan_in(name: str, shape: tuple) -> int:
    if name.startswith(("skip4", "decoder5")):
        return shape[0]  # stride equals kernel: each output sees one tap per input channel
    return int(np.prod(shape[1:]))


class Model:
    """Parameter registry plus the forward wiring."""

    def __init__(self, config: ModelConfig, params: dict | None = None):
        self.config = config
        shapes = _layer_shapes(config)
        if params is None:
            rng = np.random.default_rng(config.seed)
            params = OrderedDict()
            for name, shape in shapes.items():
                if name.endswith(".bias"):
                    params[name] = np.zeros(shape)
                else:
                    bound = np.sqrt(6.0 / _fan_in(name, shape))
                    params[name] = rng.uniform(-bound, bound, shape)
        missing = set(shapes) - set(params)
        extra = set(params) - set(shapes)
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        self.trace: dict | None = None  # layer name -> output shape, filled when a dict
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, shape in shapes.items():
            arr = np.asarray(params[name].data if isinstance(params[name], Tensor) else params[name], dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            self.params[name] = T.parameter(arr.copy())

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def anchor_set(self) -> AnchorSet:
        return self.config.anchor_set

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def has(self, name: str) -> bool:
        return f"{name}.weight" in self.params

    # -- building blocks -------------------------------------------------

    def _log(self, name, t):
        if self.trace is not None:
            self.trace[name] = t.shape
        return t

    def _conv(self, name, x, stride=1, padding=0):
        if padding and self.config.padding == "edge":
            x, padding = T.pad_edge(x, padding), 0
        return self._log(name, T.conv3d(x, self[f"{name}.weight"], self[f"{name}.bias"], stride, padding))

    def _conv_norm_relu(self, name, x, stride=1, padding=0):
        return T.relu(T.instance_norm(self._conv(name, x, stride, padding)))

    def _block(self, name, x):
        h = self._conv_norm_relu(f"{name}.convres0", x)
        h = self._conv_norm_relu(f"{name}.convres1", h, padding=1)
        h = T.instance_norm(self._conv(f"{name}.convres2", h))
        return self._log(name, T.relu(T.add(x, h)))

    def _up(self, name, x):
        y = self._log(name, T.conv_transpose3d(x, self[f"{name}.weight"], self[f"{name}.bias"], 2, 0))
        return T.relu(T.instance_norm(y))

    # -- 2D color stream -------------------------------------------------

    def image_features(self, view: CameraView) -> Tensor:
        x = Tensor(view.color.transpose(2, 0, 1))
        for i in range(len(self.config.cnn_widths)):
            name = f"cnn2d.conv{i}"
            x = self._log(name, T.conv2d(x, self[f"{name}.weight"], self[f"{name}.bias"], 2, 1))
            x = T.relu(T.instance_norm(x))
        return x

    def color_volume(self, views: Sequence[CameraView], grid: GridConfig, pool: str = "max") -> FeatureVolume:
        """Back-projected 2D features; all zeros when color is disabled or no view is given."""
        if not self.config.use_color or not views:
            return FeatureVolume(Tensor(np.zeros((self.config.color_channels,) + grid.extents)),
                                 np.zeros(grid.extents))
        feats = [self.image_features(v) for v in views]
        return backproject_features(feats, views, grid, pool)

    # -- backbone --------------------------------------------------------

    def forward_backbone(self, tsdf_input: Tensor, color: Tensor | FeatureVolume) -> FeaturePyramid:
        if isinstance(color, FeatureVolume):
            color = color.features
        if tsdf_input.shape[0] != 2 or tsdf_input.data.ndim != 4:
            raise T.ShapeError(f"tsdf input must be [2, X, Y, Z], got {tsdf_input.shape}")
        ext = tsdf_input.shape[1:]
        if any(e % 4 for e in ext):
            raise T.ShapeError(f"input extents {ext} must be divisible by 4")
        if color.shape != (self.config.color_channels,) + ext:
            raise T.ShapeError(f"color volume {color.shape} does not match input extents {ext}")
        g = self._block("block0", self._conv_norm_relu("geometry0", tsdf_input, stride=2))
        c = self._block("block1", self._conv_norm_relu("color1", color, stride=2))
        half = self._log("concat2", T.concat_channels(g, c))
        f2 = self._block("block2", self._conv_norm_relu("combine2", half, stride=2))
        f3 = self._block("block3", self._conv_norm_relu("encoder3", f2, padding=1))
        b4 = self._block("block4", self._up("skip4", f3))
        f5 = self._block("block5", self._up("decoder5", self._log("concat5", T.concat_channels(b4, half))))
        proxy = self._conv("proxy5", f5)
        return FeaturePyramid(f2, f3, f5, proxy, half)

    # -- heads -----------------------------------------------------------

    def rpn_forward(self, pyr: FeaturePyramid) -> list:
        """Per scale ``(objectness [2A, ...], deltas [6A, ...])``; ``(None, None)`` for an empty scale."""
        out = []
        for feat, trunk, cls, box in ((pyr.F2, "rpn6", "rpncls7a", "rpnbbox7b"),
                                      (pyr.F3, "rpn8", "rpncls9a", "rpnbbox9b")):
            if not self.has(cls):
                out.append((None, None))
                continue
            h = self._conv_norm_relu(trunk, feat, padding=1)
            out.append((self._conv(cls, h), self._conv(box, h)))
        return out

    def roi_features(self, pyr: FeaturePyramid) -> tuple[Tensor, Tensor]:
        return self._conv("roireduce10", pyr.F2), self._conv("roireduce10", pyr.F3)

    def classify_rois(self, pyr: FeaturePyramid, boxes: np.ndarray, scales: Sequence[int],
                      reduced: tuple | None = None) -> tuple[list, list]:
        """Class logits and per-class refinements for boxes in voxel units.

        Scale 0 pools from F2, scale 1 from F3. Boxes are clipped to the
        volume first; a box thinner than one voxel is rejected.
        """
        reduced = reduced or self.roi_features(pyr)
        ext = np.array(pyr.F5.shape[1:])
        logits, refine = [], []
        for b, s in zip(np.asarray(boxes, dtype=float).reshape(-1, 6), scales):
            lo, hi = feature_window(b, ext)
            x = self._log("roipool10", T.roi_max_pool3d(reduced[int(s)], lo, hi, self.config.roi_size))
            x = self._log("flat10", T.reshape(x, (x.size,)))
            for name in ("cls10a", "cls10b", "cls10c"):
                x = T.relu(self._log(name, T.linear(x, self[f"{name}.weight"], self[f"{name}.bias"])))
            logits.append(self._log("clscls10", T.linear(x, self["clscls10.weight"], self["clscls10.bias"])))
            refine.append(self._log("clsbbox10", T.linear(x, self["clsbbox10.weight"], self["clsbbox10.bias"])))
        return logits, refine

    def mask_logits_all(self, F5: Tensor, box) -> Tensor:
        """All ``n_classes`` mask channels over the box lattice."""
        lo, hi = box_lattice(box, F5.shape[1:])
        x = T.crop(F5, lo, hi)
        for i, k in zip(range(11, 15), (9, 7, 5, 3)):
            x = self._conv_norm_relu(f"mask{i}", x, padding=k // 2)
        return self._conv("mask15", x)

    def complete_instances(self, F5: Tensor, boxes, class_ids) -> list:
        """Per box, the mask logits of its class channel over the box lattice."""
        out = []
        for b, c in zip(np.asarray(boxes, dtype=float).reshape(-1, 6), class_ids):
            allc = self.mask_logits_all(F5, b)
            n = allc.size // allc.shape[0]
            sel = T.take(allc, np.arange(n) + int(c) * n)
            out.append(T.reshape(sel, allc.shape[1:]))
        return out

    # -- persistence -----------------------------------------------------

    def save(self, path, extra: dict | None = None) -> None:
        header = {"model_config": self.config.to_dict()}
        header.update(extra or {})
        T.save_checkpoint(path, self.params, header)

    @classmethod
    def load(cls, path) -> tuple["Model", dict]:
        arrays, header = T.load_checkpoint(path)
        cfg = ModelConfig.from_dict(header["model_config"])
        return cls(cfg, arrays), header


def build_model(config: ModelConfig) -> Model:
    return Model(config)


def box_lattice(box, extents) -> tuple[tuple, tuple]:
    """Integer voxel window of a box, clipped to the volume; at least one voxel thick."""
    b = np.asarray(box.as_array() if isinstance(box, Box3) else box, dtype=float)
    if np.any(b[3:] < 1.0):
        raise ValueError(f"degenerate box {b.tolist()}: extents below one voxel")
    return Box3.from_array(b).lattice(tuple(int(e) for e in extents))


def feature_window(box, extents, stride: int = 4) -> tuple[tuple, tuple]:
    """Window of a voxel-space box on the 1/stride feature grid."""
    lo, hi = box_lattice(box, extents)
    fext = np.asarray(extents) // stride
    flo = np.clip(np.floor(np.asarray(lo) / stride), 0, fext - 1).astype(int)
    fhi = np.clip(np.ceil(np.asarray(hi) / stride), flo + 1, fext).astype(int)
    return tuple(flo), tuple(fhi)


def config_json(cfg: ModelConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)

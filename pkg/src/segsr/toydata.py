"""Synthetic multi-scale shapes dataset, toy front-end, mIoU and PPM/PGM I/O."""
from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from .netgraph import BackendConfig, Builder, ConfigError, Graph, add_backend
from .ops import ConvSpec, IGNORE_INDEX
from .tensor import DTYPES, Rng, ShapeError, derive_seed

FRONTEND_WIDTHS = (16, 32, 64, 128, 128)
LOW_TAP = 1      # index of the stride-4 stage
NOISE_SIGMA = 0.05
SHAPE_KINDS = ("rect", "disk", "ring")
RING_WIDTH = 2.0   # label pixels; one input pixel at sr_factor 2
RING_WEIGHT = 4.0  # draw weight of ring classes relative to filled shapes


@dataclass
class SampleBatch:
    images: np.ndarray   # (n, 3, H', W') float32 in [0, 1]
    labels: np.ndarray   # (n, H, W) uint8, class index or 255

    def __len__(self):
        return self.images.shape[0]

    def take(self, idx) -> "SampleBatch":
        idx = np.asarray(idx)
        return SampleBatch(self.images[idx], self.labels[idx])


# ------------------------------------------------------------------ dataset

def _draw_class(rng, num_classes):
    # thin outlines cover few pixels, so ring classes are drawn more often
    weights = np.array([RING_WEIGHT if SHAPE_KINDS[(k - 1) % 3] == "ring" else 1.0 for k in range(1, num_classes)])
    u = rng.random() * weights.sum()
    return 1 + int(np.searchsorted(np.cumsum(weights), u, side="right"))


def radius_range(H, W):
    """Bounds of the log-uniform object radius; spans 10x on 128 px labels."""
    side = min(H, W)
    return max(2.0, 0.025 * side), 0.25 * side


def render_sample(rng: Rng, H: int, W: int, num_classes: int):
    """Full-resolution (image (3,H,W) float64, labels (H,W) uint8)."""
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    pal_hue = [0.0] + [(k - 1) / (num_classes - 1) for k in range(1, num_classes)]
    bg = rng.random() * 0.4 + 0.05
    image = np.empty((3, H, W))
    image[:] = (bg + 0.1 * (rng.uniform(3) - 0.5))[:, None, None]
    labels = np.zeros((H, W), np.uint8)

    r_lo, r_hi = radius_range(H, W)
    for _ in range(rng.randint(3, 8)):
        cls = _draw_class(rng, num_classes)
        kind = SHAPE_KINDS[(cls - 1) % 3]
        # log-uniform radius so objects span about a decade of scales
        r = r_lo * (r_hi / r_lo) ** rng.random()
        cy, cx = rng.random() * H, rng.random() * W
        if kind == "rect":
            a, b = r * (0.6 + 0.8 * rng.random()), r * (0.6 + 0.8 * rng.random())
            mask = (np.abs(yy - cy) <= b) & (np.abs(xx - cx) <= a)
        elif kind == "disk":
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            r = max(r, 4.0)
            mask = np.abs(np.hypot(yy - cy, xx - cx) - r) < 0.5 * RING_WIDTH
        # half the shapes get their class hue, the rest a random one, so
        # geometry is needed to label the uninformative half
        hue = pal_hue[cls] + 0.1 * (rng.random() - 0.5)
        if rng.random() < 0.5:
            hue = rng.random()
        colour = np.array(colorsys.hsv_to_rgb(hue % 1.0, 0.6 + 0.4 * rng.random(), 0.7 + 0.3 * rng.random()))
        image[:, mask] = colour[:, None]
        labels[mask] = cls
    image += NOISE_SIGMA * rng.normal(3 * H * W).reshape(3, H, W)
    return np.clip(image, 0.0, 1.0), labels


def area_downsample(image: np.ndarray, s: int) -> np.ndarray:
    if s == 1:
        return image
    c, h, w = image.shape
    return image.reshape(c, h // s, s, w // s, s).mean(axis=(2, 4))


def gen_shapes_dataset(seed, count, H, W, num_classes, sr_factor=1) -> SampleBatch:
    """Render ``count`` samples; returns them as one batch.

    Sample ``i`` depends only on ``(seed, i)`` and the geometry arguments, so
    any subset can be regenerated independently.
    """
    if num_classes < 3:
        raise ConfigError("num_classes must be >= 3 (background + two shape classes)")
    if sr_factor not in (1, 2):
        raise ConfigError("sr_factor must be 1 or 2")
    if H % sr_factor or W % sr_factor or (H // sr_factor) % 32 or (W // sr_factor) % 32:
        raise ConfigError(f"label dims {H}x{W} must be divisible by sr_factor={sr_factor} "
                          f"and give input dims divisible by 32")
    images = np.empty((count, 3, H // sr_factor, W // sr_factor), np.float32)
    labels = np.empty((count, H, W), np.uint8)
    for i in range(count):
        img, lab = render_sample(Rng(derive_seed(seed, i)), H, W, num_classes)
        images[i] = area_downsample(img, sr_factor)
        labels[i] = lab
    return SampleBatch(images, labels)


def train_val_split(n: int, seed: int, train_fraction: float = 0.8):
    order = Rng(derive_seed(seed, 0x5EED)).permutation(n)
    cut = int(round(n * train_fraction))
    return sorted(order[:cut]), sorted(order[cut:])


def hflip(batch: SampleBatch, flags) -> SampleBatch:
    flags = np.asarray(flags, bool)
    images = batch.images.copy()
    labels = batch.labels.copy()
    images[flags] = images[flags][..., ::-1]
    labels[flags] = labels[flags][..., ::-1]
    return SampleBatch(images, labels)


# ---------------------------------------------------------------- front-end

def add_frontend(b: Builder, src="image", widths=FRONTEND_WIDTHS, low_tap=LOW_TAP):
    """Strided 3x3 conv + BN + ReLU stages; returns (low, high) tensor names."""
    x, cin, low = src, 3, None
    for i, w in enumerate(widths):
        x = b.conv_bn_relu(f"stage{i + 1}", x, ConvSpec((3, 3), 1, cin, w, stride=2))
        cin = w
        if i == low_tap:
            low = x
    return low, x


def build_frontend(seed=0, dtype=np.float32) -> Graph:
    g = Graph(["image"], dtype)
    low, high = add_frontend(Builder(g, Rng(seed)))
    g.outputs = [low, high]
    return g


def toy_frontend_forward(graph: Graph, images, mode="infer"):
    if images.shape[2] % 32 or images.shape[3] % 32:
        raise ShapeError(f"front-end input {images.shape[2]}x{images.shape[3]} is not divisible by 32")
    out = graph.forward({"image": images}, mode)
    return out[graph.outputs[0]], out[graph.outputs[1]]


def toy_frontend_backward(graph: Graph, grad_low, grad_high):
    return graph.backward({graph.outputs[0]: grad_low, graph.outputs[1]: grad_high})["image"]


def toy_backend_config(**overrides) -> BackendConfig:
    """Back-end settings matched to the toy front-end's strides and widths."""
    cfg = dict(
        num_classes=4, high_channels=FRONTEND_WIDTHS[-1], low_channels=FRONTEND_WIDTHS[LOW_TAP],
        aspp_rates=[1, 2, 4], faspp1_channels=64, faspp2_channels=32, lowlevel_proj_channels=16,
        shuffle1_t=8, shuffle2_t=8, final_bilinear_t=1, high_stride=32, low_stride=4, sr_factor=2,
    )
    cfg.update(overrides)
    return BackendConfig(**cfg)


class SegModel:
    """Toy front-end and a back-end variant executed as one graph."""

    def __init__(self, backend: BackendConfig, seed=0, dtype=np.float32):
        backend.validate()
        fe_stride = 2 ** len(FRONTEND_WIDTHS)
        if backend.high_stride != fe_stride or backend.low_stride != 2 ** (LOW_TAP + 1):
            raise ConfigError(f"toy front-end emits strides {2 ** (LOW_TAP + 1)}/{fe_stride}, "
                              f"back-end expects {backend.low_stride}/{backend.high_stride}")
        if backend.high_channels != FRONTEND_WIDTHS[-1] or backend.low_channels != FRONTEND_WIDTHS[LOW_TAP]:
            raise ConfigError("back-end input widths do not match the toy front-end")
        self.backend_config = backend
        self.dtype = np.dtype(dtype)
        self.graph = Graph(["image"], dtype)
        low, high = add_frontend(Builder(self.graph, Rng(derive_seed(seed, 1))))
        self.graph.outputs = [add_backend(Builder(self.graph, Rng(derive_seed(seed, 2))), backend, high, low)]
        self.config = {"kind": "segmodel", "backend": backend.to_dict(), "dtype": self.dtype.name}

    @classmethod
    def from_config(cls, config):
        return cls(BackendConfig(**config["backend"]), dtype=DTYPES.get(config["dtype"], config["dtype"]))

    @property
    def sr_factor(self):
        return self.backend_config.sr_factor

    def forward(self, images, mode="infer"):
        if images.shape[2] % 32 or images.shape[3] % 32:
            raise ShapeError(f"input {images.shape[2]}x{images.shape[3]} is not divisible by 32")
        return self.graph.forward({"image": images}, mode)[self.graph.outputs[0]]

    def backward(self, grad_logits):
        return self.graph.backward({self.graph.outputs[0]: grad_logits})["image"]

    def predict(self, images):
        return np.argmax(self.forward(images, "infer"), axis=1).astype(np.uint8)

    def params(self):
        return self.graph.params()

    def named_params(self):
        return self.graph.named_params()

    def named_tensors(self):
        return self.graph.named_tensors()

    def zero_grad(self):
        self.graph.zero_grad()


# ------------------------------------------------------------------ metrics

class IoUStats:
    """Per-class TP/FP/FN counters accumulated over any number of maps."""

    def __init__(self, num_classes):
        self.num_classes = num_classes
        self.tp = np.zeros(num_classes, np.int64)
        self.fp = np.zeros(num_classes, np.int64)
        self.fn = np.zeros(num_classes, np.int64)

    def update(self, pred, truth, ignore=IGNORE_INDEX):
        pred = np.asarray(pred).ravel().astype(np.int64)
        truth = np.asarray(truth).ravel().astype(np.int64)
        keep = truth != ignore
        pred, truth = pred[keep], truth[keep]
        k = self.num_classes
        conf = np.bincount(truth * k + pred, minlength=k * k).reshape(k, k)
        tp = np.diag(conf)
        self.tp += tp
        self.fp += conf.sum(axis=0) - tp
        self.fn += conf.sum(axis=1) - tp
        return self

    def per_class(self):
        denom = self.tp + self.fp + self.fn
        return [float(t / d) if d else None for t, d in zip(self.tp, denom)]

    def mean(self):
        vals = [v for v in self.per_class() if v is not None]
        return float(np.mean(vals)) if vals else 0.0


def miou(pred, truth, num_classes, ignore=IGNORE_INDEX):
    """(per-class IoU list with None for absent classes, mean over present)."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    stats = IoUStats(num_classes).update(pred, truth, ignore)
    return stats.per_class(), stats.mean()


# ---------------------------------------------------------------- PPM / PGM

def _read_header(f, nfields):
    tokens = []
    while len(tokens) < nfields:
        line = f.readline()
        if not line:
            raise ValueError("truncated PNM header")
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
    return tokens


def _read_pnm(path, magic, channels):
    with open(path, "rb") as f:
        tokens = _read_header(f, 4)
        if tokens[0] != magic:
            raise ValueError(f"{path}: expected {magic.decode()} file, got {tokens[0][:2]!r}")
        width, height, maxval = (int(t) for t in tokens[1:4])
        if maxval != 255:
            raise ValueError(f"{path}: only maxval 255 is supported")
        buf = f.read(width * height * channels)
    if len(buf) != width * height * channels:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(buf, np.uint8).reshape(height, width, channels)


def write_ppm(path, image):
    """Write a (3, H, W) float image in [0, 1] as binary P6."""
    _, h, w = image.shape
    px = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(px.transpose(1, 2, 0)).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read binary P6 into a (3, H, W) float32 image in [0, 1]."""
    return (_read_pnm(path, b"P6", 3).transpose(2, 0, 1) / np.float32(255.0)).astype(np.float32)


def write_pgm(path, labels):
    h, w = labels.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)[..., 0].copy()


def export_samples(batch: SampleBatch, directory, prefix="sample"):
    """Persist each sample as ``<prefix>_<i>.ppm`` / ``<prefix>_<i>.pgm``."""
    import os
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i in range(len(batch)):
        stem = os.path.join(directory, f"{prefix}_{i:04d}")
        write_ppm(stem + ".ppm", batch.images[i])
        write_pgm(stem + ".pgm", batch.labels[i])
        paths.append(stem)
    return paths

"""The CNN eigenvalue predictor and the FNO eigenfunction predictor."""

from __future__ import annotations

import numpy as np

from .netcore import (
    Adam,
    BatchNorm2d,
    Conv2d,
    GeLU,
    Linear,
    MaxPool2,
    Param,
    PixelLinear,
    ReLU,
    SpectralConv2d,
)

CNN_SPECS = {
    # (channels, kernel, padding) per block; stride 1, pool 2 throughout
    32: ((64, 7, 3), (128, 5, 2), (256, 3, 1)),
    64: ((64, 9, 4), (128, 7, 3), (256, 5, 2), (512, 3, 1)),
}
FC_WIDTHS = (512, 64)
FNO_DEPTH = 4
FNO_MODES = 16


class UnsupportedResolution(Exception):
    """Model family is defined for d in {32, 64}."""


class ConvBlock:
    """Pool(ReLU(Bn(Conv(X)))) + Skip(X); skip is a 1x1 stride-2 conv."""

    def __init__(self, c_in, c_out, kernel, pad, rng, dtype, name):
        self.conv = Conv2d(c_in, c_out, kernel, stride=1, pad=pad, rng=rng,
                           dtype=dtype, name=f"{name}.conv")
        self.bn = BatchNorm2d(c_out, dtype=dtype, name=f"{name}.bn")
        self.relu = ReLU()
        self.pool = MaxPool2()
        self.skip = Conv2d(c_in, c_out, 1, stride=2, pad=0, rng=rng,
                           dtype=dtype, name=f"{name}.skip")

    def params(self):
        return self.conv.params() + self.bn.params() + self.skip.params()

    def forward(self, x, train=True):
        main = self.pool.forward(self.relu.forward(self.bn.forward(self.conv.forward(x), train)))
        return main + self.skip.forward(x)

    def backward(self, g):
        gx_skip = self.skip.backward(g)
        gx_main = self.conv.backward(self.bn.backward(self.relu.backward(self.pool.backward(g))))
        return gx_main + gx_skip


class CNNModel:
    """Stacked conv blocks plus a three-layer fully connected head."""

    def __init__(self, d: int, seed: int, out_dim: int = 1, dtype=np.float32):
        if d not in CNN_SPECS:
            raise UnsupportedResolution(f"d={d} not in {sorted(CNN_SPECS)}")
        rng = np.random.default_rng(seed)
        self.d, self.out_dim, self.seed = d, out_dim, seed
        self.blocks = []
        c_in = 1
        for i, (c_out, kernel, pad) in enumerate(CNN_SPECS[d]):
            self.blocks.append(ConvBlock(c_in, c_out, kernel, pad, rng, dtype, f"block{i + 1}"))
            c_in = c_out
        side = d // 2 ** len(self.blocks)
        self.flat_dim = c_in * side * side
        self.fc1 = Linear(self.flat_dim, FC_WIDTHS[0], rng=rng, dtype=dtype, name="head.fc1")
        self.relu1 = ReLU()
        self.fc2 = Linear(FC_WIDTHS[0], FC_WIDTHS[1], rng=rng, dtype=dtype, name="head.fc2")
        self.relu2 = ReLU()
        self.fc3 = Linear(FC_WIDTHS[1], out_dim, rng=rng, dtype=dtype, name="head.fc3")

    @property
    def architecture(self) -> str:
        return f"cnn{self.d}"

    def params(self) -> list[Param]:
        out = []
        for b in self.blocks:
            out += b.params()
        return out + self.fc1.params() + self.fc2.params() + self.fc3.params()

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for b in self.blocks:
            out.update(b.bn.buffers())
        return out

    def load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        for b in self.blocks:
            name = b.bn.name
            b.bn.load_buffers(buffers[f"{name}.running_mean"], buffers[f"{name}.running_var"])

    def forward(self, images: np.ndarray, train: bool = True) -> np.ndarray:
        x = images
        for b in self.blocks:
            x = b.forward(x, train)
        self._conv_shape = x.shape
        flat = x.reshape(x.shape[0], -1)
        h = self.relu1.forward(self.fc1.forward(flat))
        h = self.relu2.forward(self.fc2.forward(h))
        return self.fc3.forward(h)

    def backward(self, g: np.ndarray) -> np.ndarray:
        h = self.fc3.backward(g)
        h = self.fc2.backward(self.relu2.backward(h))
        h = self.fc1.backward(self.relu1.backward(h))
        x = h.reshape(self._conv_shape)
        for b in reversed(self.blocks):
            x = b.backward(x)
        return x


def build_cnn(d: int, seed: int, out_dim: int = 1, dtype=np.float32) -> CNNModel:
    return CNNModel(d, seed, out_dim=out_dim, dtype=dtype)


def cnn_forward(model: CNNModel, images: np.ndarray, train: bool = False) -> np.ndarray:
    return model.forward(images, train=train)


def add_positional_encoding(image: np.ndarray) -> np.ndarray:
    """Stack (value, x, y) channels; coordinates are pixel centers, row 0 at the bottom."""
    single = image.ndim == 3
    imgs = image[None] if single else image
    n, c, h, w = imgs.shape
    xs = (np.arange(w, dtype=imgs.dtype) + 0.5) / w
    ys = (np.arange(h, dtype=imgs.dtype) + 0.5) / h
    xc = np.broadcast_to(xs[None, None, None, :], (n, 1, h, w))
    yc = np.broadcast_to(ys[None, None, :, None], (n, 1, h, w))
    out = np.concatenate([imgs, xc, yc], axis=1)
    return out[0] if single else out


class FourierBlock:
    """GeLU(K_M(X) + W(X)) with W two stacked 1x1 convs and a GeLU between."""

    def __init__(self, channels, modes, rng, dtype, name):
        self.spectral = SpectralConv2d(channels, channels, modes, modes, rng=rng,
                                       dtype=dtype, name=f"{name}.spectral")
        self.w1 = Conv2d(channels, channels, 1, rng=rng, dtype=dtype, name=f"{name}.w1")
        self.gelu_mid = GeLU()
        self.w2 = Conv2d(channels, channels, 1, rng=rng, dtype=dtype, name=f"{name}.w2")
        self.gelu_out = GeLU()

    def params(self):
        return self.spectral.params() + self.w1.params() + self.w2.params()

    def forward(self, x, train=True):
        k = self.spectral.forward(x, train)
        w = self.w2.forward(self.gelu_mid.forward(self.w1.forward(x, train)), train)
        return self.gelu_out.forward(k + w)

    def backward(self, g):
        g = self.gelu_out.backward(g)
        gx = self.spectral.backward(g)
        gx += self.w1.backward(self.gelu_mid.backward(self.w2.backward(g)))
        return gx


class FNOModel:
    """Lift P, four Fourier blocks, project Q; hidden width equals the resolution."""

    def __init__(self, d: int, seed: int, c_hd: int | None = None,
                 modes: int = FNO_MODES, depth: int = FNO_DEPTH, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.d, self.seed = d, seed
        self.c_hd = d if c_hd is None else c_hd
        self.modes, self.depth = modes, depth
        self.p_map = PixelLinear(3, self.c_hd, rng=rng, dtype=dtype, name="P")
        self.blocks = [
            FourierBlock(self.c_hd, modes, rng, dtype, f"fourier{i + 1}")
            for i in range(depth)
        ]
        self.q_map = PixelLinear(self.c_hd, 1, rng=rng, dtype=dtype, name="Q")

    @property
    def architecture(self) -> str:
        return f"fno{self.d}"

    def params(self) -> list[Param]:
        out = self.p_map.params()
        for b in self.blocks:
            out += b.params()
        return out + self.q_map.params()

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def load_buffers(self, buffers) -> None:
        pass

    def forward(self, inputs: np.ndarray, train: bool = True) -> np.ndarray:
        x = self.p_map.forward(inputs, train)
        for b in self.blocks:
            x = b.forward(x, train)
        return self.q_map.forward(x, train)

    def backward(self, g: np.ndarray) -> np.ndarray:
        x = self.q_map.backward(g)
        for b in reversed(self.blocks):
            x = b.backward(x)
        return self.p_map.backward(x)


def build_fno(d: int, seed: int, dtype=np.float32) -> FNOModel:
    if d not in (32, 64):
        raise UnsupportedResolution(f"d={d} not in (32, 64)")
    return FNOModel(d, seed, dtype=dtype)


def fno_forward(model: FNOModel, inputs: np.ndarray, train: bool = False) -> np.ndarray:
    return model.forward(inputs, train=train)


def census(model) -> dict[str, tuple[int, ...]]:
    """Named parameter/buffer shapes; stable across builds with the same (d, seed)."""
    out = {p.name: tuple(p.value.shape) for p in model.params()}
    out.update({name: tuple(v.shape) for name, v in model.buffers().items()})
    return out

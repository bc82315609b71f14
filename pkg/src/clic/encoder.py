"""Toy staged convolutional encoder with a projection head.

Each stage is a valid 3x3 stride-2 convolution, a bias and a ReLU.  The
mean of every post-ReLU map is that stage's activation energy; the last
stage is average-pooled and projected to a unit-length embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numeric as nx
from .errors import ContractError, SizeError
from .imageio import check_image, to_gray
from .numeric import GradTape, Tensor

DEFAULT_CHANNELS = (8, 16, 32, 64)
EMBED_DIM = 128


@dataclass(frozen=True)
class EncoderState:
    kernels: tuple[Tensor, ...]
    biases: tuple[Tensor, ...]
    proj_weight: Tensor
    proj_bias: Tensor
    variant: str = "query"

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(k.shape[0] for k in self.kernels)

    @property
    def in_channels(self) -> int:
        return self.kernels[0].shape[1]

    @property
    def num_stages(self) -> int:
        return len(self.kernels)

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out.append((f"stage{i + 1}.kernel", k))
            out.append((f"stage{i + 1}.bias", b))
        out.append(("proj.weight", self.proj_weight))
        out.append(("proj.bias", self.proj_bias))
        return out

    def params(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]

    def with_params(self, arrays: Sequence[np.ndarray], variant: str | None = None) -> "EncoderState":
        """New state with parameters replaced in ``named_params`` order."""
        s = self.num_stages
        ts = [Tensor(a, requires_grad=True, name=n) for (n, _), a in zip(self.named_params(), arrays)]
        if len(ts) != 2 * s + 2:
            raise ContractError(f"expected {2 * s + 2} parameter arrays, got {len(arrays)}")
        return EncoderState(
            kernels=tuple(ts[0:2 * s:2]),
            biases=tuple(ts[1:2 * s:2]),
            proj_weight=ts[2 * s],
            proj_bias=ts[2 * s + 1],
            variant=variant or self.variant,
        )

    def arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.params()]


def init_encoder(
    seed: int,
    channels: Sequence[int] = DEFAULT_CHANNELS,
    in_channels: int = 1,
    embed_dim: int = EMBED_DIM,
) -> EncoderState:
    """Kaiming-uniform weights (variance 2 / fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    arrays = []
    names = []
    prev = in_channels
    for i, c in enumerate(channels):
        fan_in = prev * 9
        bound = np.sqrt(6.0 / fan_in)
        arrays.append(rng.uniform(-bound, bound, size=(c, prev, 3, 3)))
        arrays.append(np.zeros(c))
        names += [f"stage{i + 1}.kernel", f"stage{i + 1}.bias"]
        prev = c
    bound = np.sqrt(6.0 / prev)
    arrays.append(rng.uniform(-bound, bound, size=(prev, embed_dim)))
    arrays.append(np.zeros(embed_dim))
    names += ["proj.weight", "proj.bias"]
    ts = [Tensor(a, requires_grad=True, name=n) for n, a in zip(names, arrays)]
    s = len(channels)
    return EncoderState(
        kernels=tuple(ts[0:2 * s:2]),
        biases=tuple(ts[1:2 * s:2]),
        proj_weight=ts[2 * s],
        proj_bias=ts[2 * s + 1],
    )


def key_copy(query: EncoderState) -> EncoderState:
    return query.with_params([a.copy() for a in query.arrays()], variant="key")


def momentum_update(key: EncoderState, query: EncoderState, m: float) -> EncoderState:
    """``theta_k <- m * theta_k + (1 - m) * theta_q``, elementwise.

    Each element is evaluated in float64 and rounded once to the storage
    dtype, standing in for a fused multiply-add.  No tape is involved.
    """
    if not 0.0 <= m < 1.0:
        raise ContractError(f"momentum must lie in [0, 1), got {m}")
    ka, qa = key.arrays(), query.arrays()
    if len(ka) != len(qa) or any(a.shape != b.shape for a, b in zip(ka, qa)):
        raise ContractError("key and query encoders have different parameter shapes")
    out = [blend(k, q, m) for k, q in zip(ka, qa)]
    return key.with_params(out)


def blend(old: np.ndarray, other: np.ndarray, m: float) -> np.ndarray:
    return (m * old.astype(np.float64) + (1.0 - m) * other.astype(np.float64)).astype(old.dtype)


def check_resolution(h: int, w: int, num_stages: int) -> None:
    step = 2 ** num_stages
    if h % step or w % step:
        raise SizeError(f"resolution {w}x{h} is not divisible by {step} for {num_stages} stride-2 stages")
    size_h, size_w = h, w
    for _ in range(num_stages):
        if size_h < 3 or size_w < 3:
            raise SizeError(f"resolution {w}x{h} is too small for {num_stages} stages")
        size_h, size_w = (size_h - 3) // 2 + 1, (size_w - 3) // 2 + 1


def to_input(images, in_channels: int = 1) -> np.ndarray:
    """Stack images into an N,C,H,W float batch in [0, 1].

    uint8 images are scaled by 1/255 (RGB is converted to luma when the
    encoder is single-channel); float arrays are taken as already scaled.
    """
    if isinstance(images, np.ndarray) and images.ndim == 4:
        return images
    if isinstance(images, np.ndarray):
        images = [images]
    batch = []
    for img in images:
        if np.issubdtype(np.asarray(img).dtype, np.floating):
            arr = np.asarray(img, dtype=np.float64)
        else:
            img = check_image(img)
            if in_channels == 1:
                img = to_gray(img)
            arr = img.astype(np.float64) / 255.0
        if arr.ndim == 2:
            arr = arr[None]
        else:
            arr = np.moveaxis(arr, -1, 0)
        batch.append(arr)
    return np.stack(batch)


@dataclass
class ForwardResult:
    embedding: Tensor | None
    stage_energies: list[Tensor]
    pooled: Tensor
    fae: Tensor
    fae_raw: Tensor


def forward(state: EncoderState, x: Tensor, fae_stages: str = "all", embed: bool = True) -> ForwardResult:
    """Batch forward pass; records on the active tape if one is open."""
    if x.ndim != 4 or x.shape[1] != state.in_channels:
        raise SizeError(f"encoder expects N,{state.in_channels},H,W input, got {x.shape}")
    check_resolution(x.shape[2], x.shape[3], state.num_stages)
    n = x.shape[0]
    h = x
    energies = []
    for k, b in zip(state.kernels, state.biases):
        h = nx.relu(nx.add_bias(nx.conv2d(h, k, stride=2), b))
        energies.append(nx.mean(h, axis=(1, 2, 3)))
    pooled = nx.mean(h, axis=(2, 3))
    stacked = nx.concat([nx.reshape(e, (n, 1)) for e in energies], axis=1)
    fae_raw = nx.sum(stacked, axis=1)
    if fae_stages == "all":
        fae = nx.mean(stacked, axis=1)
    elif fae_stages == "last":
        fae = energies[-1]
    else:
        raise ContractError(f"fae_stages must be 'all' or 'last', got {fae_stages!r}")
    emb = None
    if embed:
        emb = nx.l2_normalize(nx.add_bias(nx.matmul(pooled, state.proj_weight), state.proj_bias), axis=1)
    return ForwardResult(emb, energies, pooled, fae, fae_raw)


@dataclass(frozen=True)
class EncodeOutput:
    embedding: np.ndarray | None
    stage_energies: np.ndarray
    fae: float
    fae_raw: float
    pooled: np.ndarray = field(repr=False, default=None)


def encode(
    state: EncoderState,
    img: np.ndarray,
    with_grad: bool = False,
    fae_stages: str = "all",
    embed: bool = True,
) -> EncodeOutput:
    """Encode one image.  ``with_grad`` only controls whether a tape records;
    forward values are identical either way."""
    x = Tensor(to_input(img, state.in_channels))
    if with_grad:
        with GradTape():
            res = forward(state, x, fae_stages, embed)
    else:
        res = forward(state, x, fae_stages, embed)
    return EncodeOutput(
        embedding=None if res.embedding is None else res.embedding.data[0].copy(),
        stage_energies=np.array([e.data[0] for e in res.stage_energies], dtype=np.float64),
        fae=float(res.fae.data[0]),
        fae_raw=float(res.fae_raw.data[0]),
        pooled=res.pooled.data[0].copy(),
    )


def encode_batch(state: EncoderState, images, fae_stages: str = "all", batch_size: int = 256) -> ForwardResult:
    """Forward many images without a tape, concatenating the results."""
    xs = to_input(images, state.in_channels)
    parts = []
    for start in range(0, len(xs), batch_size):
        parts.append(forward(state, Tensor(xs[start:start + batch_size]), fae_stages, embed=False))
    cat = lambda ts: Tensor(np.concatenate([t.data for t in ts], axis=0))  # noqa: E731
    return ForwardResult(
        embedding=None,
        stage_energies=[cat([p.stage_energies[i] for p in parts]) for i in range(state.num_stages)],
        pooled=cat([p.pooled for p in parts]),
        fae=cat([p.fae for p in parts]),
        fae_raw=cat([p.fae_raw for p in parts]),
    )


def state_tensors(state: EncoderState, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{name}": p.data for name, p in state.named_params()}


def state_from_tensors(tensors: dict[str, np.ndarray], prefix: str, variant: str) -> EncoderState:
    stages = 0
    while f"{prefix}/stage{stages + 1}.kernel" in tensors:
        stages += 1
    if stages == 0:
        raise ContractError(f"no encoder tensors under prefix {prefix!r}")
    names = []
    for i in range(stages):
        names += [f"stage{i + 1}.kernel", f"stage{i + 1}.bias"]
    names += ["proj.weight", "proj.bias"]
    ts = [Tensor(tensors[f"{prefix}/{n}"], requires_grad=True, name=n) for n in names]
    return EncoderState(
        kernels=tuple(ts[0:2 * stages:2]),
        biases=tuple(ts[1:2 * stages:2]),
        proj_weight=ts[2 * stages],
        proj_bias=ts[2 * stages + 1],
        variant=variant,
    )


def zero_like(state: EncoderState) -> EncoderState:
    return state.with_params([np.zeros_like(a) for a in state.arrays()])


__all__ = [
    "EncoderState",
    "EncodeOutput",
    "ForwardResult",
    "encode",
    "encode_batch",
    "forward",
    "init_encoder",
    "key_copy",
    "momentum_update",
]

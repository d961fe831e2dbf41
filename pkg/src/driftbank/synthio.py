"""Synthetic advecting-blob sequences and the binary frame format.

Frame file layout (little-endian)::

    offset  size  field
    0       4     magic b"MCFR"
    4       2     version (u16) = 1
    6       2     reserved (u16) = 0
    8       12    T, H, W (u32 each)
    20      8*N   N = T*H*W float64 values, frame-major then row-major
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MCFR"
VERSION = 1
_HEADER = struct.Struct("<4sHH3I")


class FrameFormatError(ValueError):
    """Malformed frame file; message names the byte offset."""


class SynthConfigError(ValueError):
    pass


@dataclass
class FrameSequence:
    """T x H x W intensities in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError(f"expected (T, H, W), got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("non-finite intensities")
        self.values = v

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def H(self) -> int:
        return self.values.shape[1]

    @property
    def W(self) -> int:
        return self.values.shape[2]


@dataclass
class AdvectionConfig:
    """Blob-field generator settings.

    Speeds are in cells per frame; ``rotation`` turns every blob's velocity
    by that many radians per frame. Blob amplitudes evolve as
    ``a0 * exp(rate * t)`` with ``rate`` drawn per blob from
    ``[-growth, growth]``; ``oscillation`` adds a sinusoidal modulation of
    that relative depth with a per-blob random period in ``period_range``.
    """

    n_blobs: int = 3
    speed: tuple[float, float] = (0.5, 1.5)
    rotation: float = 0.05
    sigma: tuple[float, float] = (2.0, 4.0)
    amplitude: tuple[float, float] = (0.4, 0.9)
    growth: float = 0.03
    oscillation: float = 0.3
    period_range: tuple[float, float] = (6.0, 12.0)
    noise: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_blobs < 0:
            raise SynthConfigError("n_blobs must be nonnegative")
        for name in ("speed", "sigma", "amplitude", "period_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise SynthConfigError(f"bad range for {name}: {(lo, hi)}")
        if self.sigma[0] <= 0:
            raise SynthConfigError("sigma must be positive")
        if self.noise < 0 or self.growth < 0 or self.oscillation < 0:
            raise SynthConfigError("noise, growth and oscillation must be nonnegative")


def periodic_gaussian(n: int, center: float, sigma: float, images: int = 2) -> np.ndarray:
    """1-D Gaussian profile on a ring of ``n`` cells, summed over wrapped images."""
    x = np.arange(n, dtype=np.float64)
    out = np.zeros(n)
    for k in range(-images, images + 1):
        d = x - center + k * n
        out += np.exp(-0.5 * (d / sigma) ** 2)
    return out


def render_blob(H: int, W: int, cy: float, cx: float, sigma: float) -> np.ndarray:
    return np.outer(periodic_gaussian(H, cy, sigma), periodic_gaussian(W, cx, sigma))


def _blob_tracks(rng: np.random.Generator, cfg: AdvectionConfig, T: int, H: int, W: int):
    tracks = []
    for _ in range(cfg.n_blobs):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        speed = rng.uniform(*cfg.speed)
        angle = rng.uniform(0, 2 * np.pi)
        sigma = rng.uniform(*cfg.sigma)
        amp = rng.uniform(*cfg.amplitude)
        rate = rng.uniform(-cfg.growth, cfg.growth) if cfg.growth > 0 else 0.0
        period = rng.uniform(*cfg.period_range)
        phase = rng.uniform(0, 2 * np.pi)
        ys, xs, amps = [], [], []
        for t in range(T):
            ys.append(cy % H)
            xs.append(cx % W)
            a = amp * np.exp(rate * t)
            if cfg.oscillation > 0:
                a *= 1.0 + cfg.oscillation * np.sin(2 * np.pi * t / period + phase)
            amps.append(a)
            heading = angle + cfg.rotation * t
            cy += speed * np.sin(heading)
            cx += speed * np.cos(heading)
        tracks.append((np.array(ys), np.array(xs), np.array(amps), sigma))
    return tracks


def generate_one(cfg: AdvectionConfig, rng: np.random.Generator, T: int, H: int,
                 W: int) -> FrameSequence:
    frames = np.zeros((T, H, W))
    for ys, xs, amps, sigma in _blob_tracks(rng, cfg, T, H, W):
        for t in range(T):
            frames[t] += amps[t] * render_blob(H, W, ys[t], xs[t], sigma)
    if cfg.noise > 0:
        frames += rng.normal(0.0, cfg.noise, size=frames.shape)
    return FrameSequence(np.clip(frames, 0.0, 1.0))


def generate(cfg: AdvectionConfig, n_sequences: int, T: int, H: int,
             W: int) -> list[FrameSequence]:
    """Deterministic list of sequences; each draws from its own child seed."""
    cfg.validate()
    if min(T, H, W) < 1 or n_sequences < 0:
        raise SynthConfigError(f"invalid extents T={T} H={H} W={W} n={n_sequences}")
    children = np.random.SeedSequence(cfg.seed).spawn(n_sequences)
    return [generate_one(cfg, np.random.default_rng(s), T, H, W) for s in children]


def shifted_blob_sequence(T: int, H: int, W: int, velocity: tuple[int, int], sigma: float,
                          amplitude: float = 0.8, center=(0, 0)) -> FrameSequence:
    """Single blob moving by an integer (dy, dx) per frame; for shift checks."""
    frames = np.stack([
        amplitude * render_blob(H, W, center[0] + velocity[0] * t, center[1] + velocity[1] * t,
                                sigma)
        for t in range(T)])
    return FrameSequence(np.clip(frames, 0.0, 1.0))


# ---------------------------------------------------------------- file I/O

def write_frames(path, seq: FrameSequence) -> None:
    v = np.ascontiguousarray(seq.values, dtype="<f8")
    T, H, W = v.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, 0, T, H, W))
        fh.write(v.tobytes(order="C"))


def read_frames(path) -> FrameSequence:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FrameFormatError(f"truncated header at byte {len(raw)}: need 4 bytes of magic")
    if raw[:4] != MAGIC:
        raise FrameFormatError(f"bad magic {raw[:4]!r} at byte 0")
    if len(raw) < _HEADER.size:
        raise FrameFormatError(
            f"truncated header at byte {len(raw)}: missing {_HEADER.size - len(raw)} bytes")
    _, version, reserved, T, H, W = _HEADER.unpack_from(raw)
    if version != VERSION:
        swapped = struct.unpack(">H", raw[4:6])[0]
        if swapped == VERSION:
            raise FrameFormatError("big-endian frame file at byte 4; only little-endian is supported")
        raise FrameFormatError(f"unsupported version {version} at byte 4")
    if reserved != 0:
        raise FrameFormatError(f"reserved field is {reserved} at byte 6, expected 0")
    n = T * H * W
    need = _HEADER.size + 8 * n
    if len(raw) < need:
        raise FrameFormatError(
            f"truncated payload at byte {len(raw)}: missing {need - len(raw)} bytes")
    if len(raw) > need:
        raise FrameFormatError(f"{len(raw) - need} trailing bytes after byte {need}")
    values = np.frombuffer(raw, dtype="<f8", count=n, offset=_HEADER.size)
    return FrameSequence(values.reshape(T, H, W).astype(np.float64))


def write_dataset(out_dir, splits: dict[str, list[FrameSequence]], config_echo: dict,
                  seed: int, tool_version: str) -> Path:
    """One file per sequence under ``out_dir/<split>/`` plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"tool_version": tool_version, "seed": seed, "config": config_echo,
                "splits": {}, "files": []}
    for split, seqs in splits.items():
        (out / split).mkdir(exist_ok=True)
        names = []
        for i, seq in enumerate(seqs):
            name = f"{split}/seq_{i:05d}.mcfr"
            write_frames(out / name, seq)
            names.append(name)
        manifest["splits"][split] = names
        manifest["files"].extend(names)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as err:
        raise FrameFormatError(f"no manifest at {path}") from err
    except json.JSONDecodeError as err:
        raise FrameFormatError(f"manifest {path} is not valid JSON at byte {err.pos}") from err


def load_split(data_dir, split: str) -> np.ndarray:
    """All sequences of a split stacked into (N, T, H, W)."""
    manifest = load_manifest(data_dir)
    names = manifest["splits"].get(split)
    if not names:
        raise FrameFormatError(f"split {split!r} missing or empty in {data_dir}")
    return np.stack([read_frames(Path(data_dir) / n).values for n in names])


def config_dict(cfg: AdvectionConfig) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

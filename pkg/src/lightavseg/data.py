"""Synthetic sounding-object scenes and the on-disk clip layout.

Scene construction makes audio indispensable by design: scenes come in pairs
(indices 2k and 2k+1) that render *pixel-identical* frames — two visually
identical shapes on a textured background — and differ only in which shape
emits the tone and therefore in the ground-truth mask. A predictor that
ignores audio cannot beat 0.5 IoU averaged over a pair.

Rasterization uses integer centers and extents only, so scenes are
bit-reproducible across platforms.

On-disk layout (one directory per clip):
    root/<video_id>/frames/%05d.png   8-bit RGB
    root/<video_id>/audio.wav         16-bit PCM mono
    root/<video_id>/masks/%05d.png    8-bit grayscale, 0/255 binary
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import Waveform, log_mel, read_wav, resample_to_16k, synth_tone, write_wav
from .pngio import read_png, write_png
from .tensor import ContractError, RngState, Tensor


class LoadError(ContractError):
    """A clip directory failed structural validation."""


@dataclass
class DatasetSpec:
    n_scenes: int = 64
    hw: int = 64
    frames_per_scene: int = 1
    shapes_per_scene: int = 2
    freq_table: dict = field(default_factory=lambda: {0: 800.0, 1: 2400.0})
    snr_db: float | None = None
    seed: int = 0
    amplitude: float = 0.5

    def __post_init__(self):
        freqs = list(self.freq_table.values())
        if len(set(freqs)) != len(freqs):
            raise ContractError("frequency table must be injective over shape ids")
        if self.shapes_per_scene > len(self.freq_table):
            raise ContractError("need one tone frequency per shape")


@dataclass
class Scene:
    frames: Tensor      # (T, 3, H, W) in [0, 1]
    waveform: Waveform  # T seconds at 16 kHz
    masks: Tensor       # (T, 1, H, W) in {0, 1}
    meta: dict


def _layout_rng(seed: int, pair: int) -> RngState:
    # disjoint counter blocks give every pair its own deterministic stream
    return RngState(seed, counter=pair * 4096)


def _render_background(rng: RngState, hw: int) -> np.ndarray:
    coarse = rng.uniform((3, 8, 8), 0.0, 1.0)
    reps = math.ceil(hw / 8)
    coarse_up = np.repeat(np.repeat(coarse, reps, axis=1), reps, axis=2)[:, :hw, :hw]
    fine = rng.uniform((3, hw, hw), 0.0, 1.0)
    return 0.2 + 0.15 * coarse_up + 0.05 * fine


def _shape_footprint(kind: int, cy: int, cx: int, half: int, hw: int) -> np.ndarray:
    ys, xs = np.mgrid[0:hw, 0:hw]
    if kind == 0:  # axis-aligned square
        return (np.abs(ys - cy) <= half) & (np.abs(xs - cx) <= half)
    return (ys - cy) ** 2 + (xs - cx) ** 2 <= half * half  # circle


def generate_scene(spec: DatasetSpec, index: int) -> Scene:
    """Deterministic scene for (spec.seed, index); pairs share frames."""
    if index >= spec.n_scenes:
        raise ContractError(f"scene index {index} >= n_scenes {spec.n_scenes}")
    pair, sounding = divmod(index, 2)
    if spec.shapes_per_scene == 1:
        pair, sounding = index, 0
    rng = _layout_rng(spec.seed, pair)
    hw = spec.hw

    image = _render_background(rng, hw)
    kind = int(rng.integers(0, 2))
    color = rng.uniform((3,), 0.55, 0.95)
    half = int(rng.integers(max(4, hw // 10), max(6, hw // 5)))

    # split-axis placement guarantees the two footprints never touch
    margin = half + 1
    footprints = []
    if spec.shapes_per_scene == 1:
        cy = int(rng.integers(margin, hw - margin))
        cx = int(rng.integers(margin, hw - margin))
        footprints.append((_shape_footprint(kind, cy, cx, half, hw), (cy, cx)))
    else:
        split_on_y = int(rng.integers(0, 2)) == 0
        lo_hi = hw // 2 - half - 1
        hi_lo = hw // 2 + half + 1
        if margin >= lo_hi:
            raise ContractError(
                f"shapes of half-extent {half} do not fit a {hw}x{hw} grid twice")
        for side in (0, 1):
            split = int(rng.integers(margin, lo_hi)) if side == 0 else \
                int(rng.integers(hi_lo, hw - margin))
            free = int(rng.integers(margin, hw - margin))
            cy, cx = (split, free) if split_on_y else (free, split)
            footprints.append((_shape_footprint(kind, cy, cx, half, hw), (cy, cx)))

    for fp, _ in footprints:
        image[:, fp] = color[:, None]

    t = spec.frames_per_scene
    frames = np.broadcast_to(image, (t,) + image.shape).copy()
    mask = footprints[sounding][0].astype(np.float64)
    masks = np.broadcast_to(mask[None, None], (t, 1, hw, hw)).copy()

    freq = spec.freq_table[sounding]
    audio_rng = RngState(spec.seed, counter=pair * 4096 + 2048 + sounding)
    wave = synth_tone(freq, float(t), spec.amplitude,
                      rng=audio_rng if spec.snr_db is not None else None,
                      snr_db=spec.snr_db)
    return Scene(
        frames=Tensor(np.clip(frames, 0.0, 1.0)),
        waveform=wave,
        masks=Tensor(masks),
        meta={"index": index, "pair": pair, "sounding_shape": sounding,
              "tone_hz": freq, "kind": "square" if kind == 0 else "circle",
              "centers": [c for _, c in footprints], "half_extent": half},
    )


def generate_dataset(spec: DatasetSpec) -> list:
    return [generate_scene(spec, i) for i in range(spec.n_scenes)]


# ---------------------------------------------------------------------------
# On-disk layout
# ---------------------------------------------------------------------------

def save_scene(scene: Scene, clip_dir):
    clip_dir = Path(clip_dir)
    (clip_dir / "frames").mkdir(parents=True, exist_ok=True)
    (clip_dir / "masks").mkdir(parents=True, exist_ok=True)
    frames = scene.frames.data
    masks = scene.masks.data
    for t in range(frames.shape[0]):
        rgb = np.round(frames[t].transpose(1, 2, 0) * 255.0).astype(np.uint8)
        write_png(clip_dir / "frames" / f"{t:05d}.png", rgb)
        write_png(clip_dir / "masks" / f"{t:05d}.png",
                  (masks[t, 0] * 255.0).astype(np.uint8))
    write_wav(clip_dir / "audio.wav", scene.waveform)


def materialize_dataset(spec: DatasetSpec, root) -> list:
    """Write every scene under root/scene_%05d/ and return the clip dirs."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    dirs = []
    for i in range(spec.n_scenes):
        d = root / f"scene_{i:05d}"
        save_scene(generate_scene(spec, i), d)
        dirs.append(d)
    return dirs


def load_avsbench_layout(root):
    """Lazily yield Scenes from the documented directory layout."""
    root = Path(root)
    if not root.is_dir():
        return
    for clip_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        vid = clip_dir.name
        frame_files = sorted((clip_dir / "frames").glob("*.png"))
        mask_files = sorted((clip_dir / "masks").glob("*.png"))
        wav_path = clip_dir / "audio.wav"
        if not frame_files:
            raise LoadError(f"{vid}: no frames found")
        if len(frame_files) != len(mask_files):
            raise LoadError(f"{vid}: {len(frame_files)} frames but "
                            f"{len(mask_files)} masks")
        if not wav_path.exists():
            raise LoadError(f"{vid}: missing audio.wav")

        frames = np.stack([read_png(p).astype(np.float64).transpose(2, 0, 1) / 255.0
                           for p in frame_files])
        mask_arrays = []
        for p in mask_files:
            m = read_png(p)
            if m.ndim != 2:
                raise LoadError(f"{vid}: mask {p.name} is not grayscale")
            mask_arrays.append((m > 127).astype(np.float64))
        masks = np.stack(mask_arrays)[:, None]

        wave = resample_to_16k(read_wav(wav_path))
        spec = log_mel(wave)
        if spec.num_windows != len(frame_files):
            raise LoadError(f"{vid}: {spec.num_windows} audio windows for "
                            f"{len(frame_files)} frames")
        yield Scene(frames=Tensor(frames), waveform=wave, masks=Tensor(masks),
                    meta={"video_id": vid})

"""Training, evaluation, and checkpointing.

Training is a plain loop: forward, compound loss, reverse pass, AdamW with
decoupled weight decay. The audio backbone is excluded from updates when
frozen (the default). Everything is seeded through counter-based RNG streams,
so two runs with the same config produce bit-identical logs and checkpoints.

Checkpoint format (little-endian):
    magic 'AVSC', u32 version, u32 json_len, config JSON, u64 step,
    u64 adam_t, i64 rng_seed, u64 rng_counter, u32 n_entries,
    then per entry: u32 name_len, name utf8, u32 ndim, u32 dims..., f64 data.
Optimizer moments are stored as entries named 'adam.m/<param>' and
'adam.v/<param>'.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .audio import log_mel
from .backbones import BackboneConfig
from .data import DatasetSpec, generate_dataset
from .losses import alignment_maps, foreground_mask, fscore, miou, total_loss
from .model import ModelConfig, SegModel
from .tensor import (
    ContractError, RngState, Tensor, _sigmoid_data, backward, no_grad,
)

CKPT_MAGIC = b"AVSC"
CKPT_VERSION = 1
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    steps: int = 500
    lam: float = 0.5                 # balance weight on the alignment term
    tau: float = 0.1                 # similarity temperature
    weight_decay: float = 1e-2
    seed: int = 0
    freeze_audio_backbone: bool = True
    loss_variant: str = "seg+msa"    # seg | seg+msa | seg+avm
    # model
    stage_channels: tuple = (16, 32, 64, 128)
    audio_channels: int = 128
    stem_channels: int = 8
    num_classes: int = 1
    interact_stages: int = 3
    enable_har: bool = True
    enable_agve: bool = True
    enable_cmfd: bool = True
    # synthetic dataset
    hw: int = 64
    n_scenes: int = 64
    frames_per_scene: int = 1
    snr_db: float | None = None
    # bookkeeping
    ckpt_every: int = 0              # 0: final checkpoint only
    log_every: int = 10

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if self.lr <= 0:
            raise ContractError(f"learning rate must be positive, got {self.lr}")
        if self.lam < 0 or self.tau < 0:
            raise ContractError("lambda and tau must be non-negative")
        if self.loss_variant not in ("seg", "seg+msa", "seg+avm"):
            raise ContractError(f"unknown loss variant {self.loss_variant!r}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            backbone=BackboneConfig(stage_channels=self.stage_channels,
                                    audio_channels=self.audio_channels,
                                    input_hw=self.hw,
                                    stem_channels=self.stem_channels),
            num_classes=self.num_classes,
            interact_stages=self.interact_stages,
            enable_har=self.enable_har,
            enable_agve=self.enable_agve,
            enable_cmfd=self.enable_cmfd)

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(n_scenes=self.n_scenes, hw=self.hw,
                           frames_per_scene=self.frames_per_scene,
                           snr_db=self.snr_db, seed=self.seed)


# Config file surface: flat key=value lines, one per TrainConfig field.
_KEY_ALIASES = {"lambda": "lam"}


def _parse_value(name: str, raw: str, pytype):
    raw = raw.strip()
    if raw.lower() in ("none", "null"):
        return None
    if pytype is bool or isinstance(pytype, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ContractError(f"config key {name}: bad boolean {raw!r}")
    if pytype is tuple:
        return tuple(int(v) for v in raw.split(","))
    if pytype is int:
        return int(raw)
    if pytype is float:
        return float(raw)
    return raw


def config_from_mapping(mapping: dict, base: TrainConfig | None = None) -> TrainConfig:
    """Build a TrainConfig from string or typed values, validating keys."""
    values = dataclasses.asdict(base) if base is not None else {}
    ftypes = {f.name: f.type for f in fields(TrainConfig)}
    defaults = TrainConfig()
    for key, raw in mapping.items():
        name = _KEY_ALIASES.get(key, key)
        if name not in ftypes:
            raise ContractError(f"unknown config key {key!r}")
        if isinstance(raw, str):
            current = getattr(defaults, name)
            pytype = type(current) if current is not None else float
            if name == "snr_db":
                pytype = float
            values[name] = _parse_value(name, raw, pytype)
        else:
            values[name] = tuple(raw) if name == "stage_channels" else raw
    merged = dataclasses.asdict(defaults)
    merged.update(values)
    return TrainConfig(**merged)


def config_from_file(path, overrides: dict | None = None) -> TrainConfig:
    mapping = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ContractError(f"bad config line (want key=value): {line!r}")
        key, _, raw = line.partition("=")
        mapping[key.strip()] = raw.strip()
    if overrides:
        mapping.update(overrides)
    return config_from_mapping(mapping)


def config_to_flat_text(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        key = "lambda" if f.name == "lam" else f.name
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{key}={v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict, grads: dict, state: AdamWState, cfg: TrainConfig,
               update_names=None):
    """One decoupled-weight-decay Adam step over the named parameters."""
    names = sorted(update_names if update_names is not None else params)
    state.t += 1
    t = state.t
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for name in names:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(params[name].data)
        if not np.all(np.isfinite(g)):
            raise ContractError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p = params[name].data
        if cfg.weight_decay:
            p -= cfg.lr * cfg.weight_decay * p
        p -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    version: int
    config: dict
    params: dict
    adam_m: dict
    adam_v: dict
    adam_t: int
    rng: RngState
    step: int


def _write_entry(f, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_entry(f):
    (nlen,) = struct.unpack("<I", f.read(4))
    name = f.read(nlen).decode("utf-8")
    (ndim,) = struct.unpack("<I", f.read(4))
    shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape).copy()
    return name, data


def save_checkpoint(path, cfg: TrainConfig, params: dict, state: AdamWState,
                    rng: RngState, step: int):
    cfg_json = json.dumps(dataclasses.asdict(cfg), sort_keys=True).encode("utf-8")
    entries = [(n, p.data) for n, p in sorted(params.items())]
    entries += [(f"adam.m/{n}", a) for n, a in sorted(state.m.items())]
    entries += [(f"adam.v/{n}", a) for n, a in sorted(state.v.items())]
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<I", len(cfg_json)))
        f.write(cfg_json)
        f.write(struct.pack("<Q", step))
        f.write(struct.pack("<Q", state.t))
        f.write(struct.pack("<q", rng.seed))
        f.write(struct.pack("<Q", rng.counter))
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            _write_entry(f, name, arr)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise ContractError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CKPT_VERSION:
            raise ContractError(f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", f.read(4))
        config = json.loads(f.read(cfg_len).decode("utf-8"))
        (step,) = struct.unpack("<Q", f.read(8))
        (adam_t,) = struct.unpack("<Q", f.read(8))
        (seed,) = struct.unpack("<q", f.read(8))
        (counter,) = struct.unpack("<Q", f.read(8))
        (n_entries,) = struct.unpack("<I", f.read(4))
        params, adam_m, adam_v = {}, {}, {}
        for _ in range(n_entries):
            name, arr = _read_entry(f)
            if name.startswith("adam.m/"):
                adam_m[name[len("adam.m/"):]] = arr
            elif name.startswith("adam.v/"):
                adam_v[name[len("adam.v/"):]] = arr
            else:
                params[name] = arr
    return Checkpoint(version=version, config=config, params=params,
                      adam_m=adam_m, adam_v=adam_v, adam_t=adam_t,
                      rng=RngState(seed, counter), step=step)


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[SegModel, TrainConfig]:
    cfg = config_from_mapping(ckpt.config)
    model = SegModel(cfg.model_config(), RngState(cfg.seed))
    model.load_state(ckpt.params)
    return model, cfg


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------

def _scene_tensors(scenes: list):
    """Stack per-scene frames/masks and cache per-scene mel windows."""
    frames = [s.frames.data for s in scenes]
    masks = [s.masks.data for s in scenes]
    mels = [log_mel(s.waveform).windows.data for s in scenes]
    return frames, masks, mels


@dataclass
class TrainResult:
    model: SegModel
    config: TrainConfig
    opt_state: AdamWState
    log_lines: list
    checkpoints: list
    batch_rng: RngState


def train(cfg: TrainConfig, scenes: list | None = None,
          out_dir=None) -> TrainResult:
    """Run the training loop; scenes default to the config's synthetic set."""
    if scenes is None:
        scenes = generate_dataset(cfg.dataset_spec())
    if not scenes:
        raise ContractError("training dataset is empty")
    frames_np, masks_np, mels_np = _scene_tensors(scenes)

    model = SegModel(cfg.model_config(), RngState(cfg.seed))
    frozen = model.audio_backbone_param_names() if cfg.freeze_audio_backbone else set()
    update_names = [n for n in model.params if n not in frozen]
    state = AdamWState()
    batch_rng = RngState(cfg.seed, counter=1_000_000)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(config_to_flat_text(cfg))

    log_lines, ckpt_paths = [], []
    log_f = open(out_dir / "log.jsonl", "w") if out_dir is not None else None
    order: list[int] = []

    def next_batch():
        nonlocal order
        while len(order) < cfg.batch_size:
            order.extend(batch_rng.permutation(len(scenes)).tolist())
        picked, order = order[:cfg.batch_size], order[cfg.batch_size:]
        return picked

    try:
        for step in range(1, cfg.steps + 1):
            idxs = next_batch()
            frames = Tensor(np.concatenate([frames_np[i] for i in idxs]))
            mel = Tensor(np.concatenate([mels_np[i] for i in idxs]))
            y = Tensor(np.concatenate([masks_np[i] for i in idxs]))

            for p in model.params.values():
                p.zero_grad()
            seg, _ = model.forward(frames, mel)
            rep = total_loss(seg.logits, seg.per_stage_features, seg.audio_states,
                             y, lam=cfg.lam, tau=cfg.tau, variant=cfg.loss_variant)
            backward(rep.loss)
            grads = {n: model.params[n].grad for n in update_names}
            adamw_step(model.params, grads, state, cfg, update_names=update_names)

            if step % cfg.log_every == 0 or step == cfg.steps:
                line = rep.to_json_dict(step)
                log_lines.append(line)
                if log_f is not None:
                    log_f.write(json.dumps(line, sort_keys=True) + "\n")
            if out_dir is not None and cfg.ckpt_every and step % cfg.ckpt_every == 0:
                p = out_dir / f"ckpt_step{step}.bin"
                save_checkpoint(p, cfg, model.params, state, batch_rng, step)
                ckpt_paths.append(p)
    finally:
        if log_f is not None:
            log_f.close()

    if out_dir is not None:
        p = out_dir / "ckpt_final.bin"
        save_checkpoint(p, cfg, model.params, state, batch_rng, cfg.steps)
        ckpt_paths.append(p)
    return TrainResult(model=model, config=cfg, opt_state=state,
                       log_lines=log_lines, checkpoints=ckpt_paths,
                       batch_rng=batch_rng)


def evaluate(model: SegModel, scenes: list, mute_audio: bool = False,
             threshold: float = 0.5) -> dict:
    """Mean IoU / F-score over scenes; per-scene table included."""
    per_scene = []
    for scene in scenes:
        mel = log_mel(scene.waveform).windows
        with no_grad():
            seg, _ = model.forward(scene.frames, mel, mute_audio=mute_audio)
        probs = _sigmoid_data(seg.logits.data)
        pred = probs > threshold
        gt = scene.masks.data > 0.5
        per_scene.append({
            "index": scene.meta.get("index", scene.meta.get("video_id")),
            "miou": miou(pred, gt),
            "fscore": fscore(pred, gt),
        })
    return {
        "miou": float(np.mean([r["miou"] for r in per_scene])) if per_scene else 0.0,
        "fscore": float(np.mean([r["fscore"] for r in per_scene])) if per_scene else 0.0,
        "per_scene": per_scene,
        "mute_audio": mute_audio,
    }


def alignment_separation(model: SegModel, scenes: list, tau: float = 0.1) -> dict:
    """Mean finest-scale alignment score over foreground vs background pixels."""
    fg_vals, bg_vals = [], []
    for scene in scenes:
        mel = log_mel(scene.waveform).windows
        with no_grad():
            seg, _ = model.forward(scene.frames, mel)
            maps = alignment_maps(seg.per_stage_features, seg.audio_states,
                                  tau, scene.frames.shape[2], scene.frames.shape[3])
        finest = maps.s_up[-1].data  # shallowest supervised scale
        mask = foreground_mask(scene.masks).data > 0.5
        fg_vals.append(finest[mask])
        bg_vals.append(finest[~mask])
    fg = float(np.concatenate(fg_vals).mean())
    bg = float(np.concatenate(bg_vals).mean())
    return {"fg_mean": fg, "bg_mean": bg, "separation": fg - bg}

"""Reciprocal audio-visual encoder.

Two moves per stage, interleaved with the visual backbone:

  * ``har_step`` refines the global audio state: the visual map is max-pooled
    to 1x1, both sides go through pointwise channel maps, and the pooled visual
    descriptor gates the audio channels through a hard sigmoid.
  * ``agve_step`` injects the refined state back by broadcasting it over the
    spatial grid and adding it residually (a pure per-channel bias).

Neither move touches token-to-token affinities: per-grid-cell work is one max
comparison and one addition per channel, so the interaction cost is linear in
H*W. FLOPs land in two scopes: ``fusion.interaction`` for the grid-dependent
work (pooling, broadcast adds) and ``fusion.state`` for the constant-size 1x1
state arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

from .backbones import AudioState, FeaturePyramid, VisualBackbone, project_audio_to_stage
from .layers import Linear1x1
from .tensor import (
    FLOPS, ContractError, RngState, Tensor, broadcast_add, elementwise_mul,
    global_max_pool, hsigmoid, section,
)


@dataclass
class EncoderStageParams:
    """Channel maps of one refinement step; both output the stage width."""

    audio_map: Linear1x1
    gate_map: Linear1x1


@dataclass
class EncoderOutput:
    enhanced: list       # audio-enhanced visual features, shallow to deep
    audio_states: list   # refined AudioState per stage, shallow to deep


def har_step(a_prev: AudioState, v: Tensor, p: EncoderStageParams) -> AudioState:
    """Gated audio refinement: map the state, gate it by pooled visual context."""
    if a_prev.frames != v.shape[0]:
        raise ContractError(
            f"audio state has {a_prev.frames} frames but visual batch is {v.shape[0]}")
    with FLOPS.scope("fusion.interaction"):
        pooled = global_max_pool(v)
    with FLOPS.scope("fusion.state"):
        gate = hsigmoid(p.gate_map(pooled))
        refined = elementwise_mul(p.audio_map(a_prev.value), gate)
    return AudioState(refined, stage=a_prev.stage)


def agve_step(v: Tensor, a: AudioState) -> Tensor:
    """Residual broadcast of the audio state over the visual grid."""
    with FLOPS.scope("fusion.interaction"):
        return broadcast_add(v, a.value)


class ReciprocalEncoder:
    """Visual stages interleaved with audio refinement and re-injection."""

    def __init__(self, backbone: VisualBackbone, rng: RngState, params: dict,
                 enable_har: bool = True, enable_agve: bool = True,
                 prefix: str = "encoder"):
        self.backbone = backbone
        self.enable_har = enable_har
        self.enable_agve = enable_agve
        cfg = backbone.cfg
        self.projections = []
        self.stage_params = []
        c_prev = cfg.audio_channels
        for i, c in enumerate(cfg.stage_channels):
            self.projections.append(
                Linear1x1(f"{prefix}.proj{i + 1}", c_prev, c, rng, params))
            self.stage_params.append(EncoderStageParams(
                audio_map=Linear1x1(f"{prefix}.audio{i + 1}", c, c, rng, params),
                gate_map=Linear1x1(f"{prefix}.gate{i + 1}", c, c, rng, params)))
            c_prev = c

    def forward(self, frames: Tensor, a0: AudioState) -> EncoderOutput:
        """Run all stages; each stage consumes the previous enhanced feature."""
        x = self.backbone.stem_forward(frames)
        audio = a0
        enhanced, states = [], []
        for i in range(len(self.backbone.stages)):
            v = self.backbone.stage_forward(i, x)
            with section("encoder_fusion"):
                audio = project_audio_to_stage(audio, self.projections[i], stage=i + 1)
                if self.enable_har:
                    audio = har_step(audio, v, self.stage_params[i])
                enhanced_v = agve_step(v, audio) if self.enable_agve else v
            enhanced.append(enhanced_v)
            states.append(audio)
            x = enhanced_v
        return EncoderOutput(enhanced=enhanced, audio_states=states)

    def pyramid(self, out: EncoderOutput) -> FeaturePyramid:
        return FeaturePyramid(out.enhanced)

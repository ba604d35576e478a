"""Cross-modal fusion decoder.

Top-down path over the pyramid, deepest stage first. At each of the deepest
``interact_stages`` stages the decoder keeps a recurrent audio state: the
previous decoder state and the stage's encoder state are channel-aligned,
concatenated and fused through a ReLU-gated pointwise map, then reweighted by
a hard-sigmoid gate computed from the max-pooled visual feature. The result is
injected into the visual feature as a broadcast channel bias. Features then
merge FPN-style: bilinear x2 upsample, channel-aligning pointwise map, add.
The shallowest stage merges in visually (no injection), and a pointwise head
plus a final bilinear resize produce logits at the input resolution.

The recurrence starts from the deepest encoder audio state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbones import AudioState
from .encoder import EncoderOutput
from .layers import Linear1x1
from .tensor import (
    FLOPS, ContractError, RngState, Tensor, add, bilinear_upsample,
    broadcast_add, concat_channels, elementwise_mul, global_max_pool,
    hsigmoid, relu, section,
)


@dataclass
class DecoderStageParams:
    proj_prev: Linear1x1   # previous decoder audio state -> shared width
    proj_enc: Linear1x1    # encoder audio state -> shared width
    fuse_map: Linear1x1    # concatenated states -> fused state
    gate_map: Linear1x1    # pooled visual -> gate pre-activation
    inject_map: Linear1x1  # fused state -> visual channel bias


@dataclass
class SegOutput:
    logits: Tensor                    # (B, K, H, W)
    per_stage_features: list          # injected features, deepest first
    audio_states: list = field(default_factory=list)  # fused states, deepest first


def audio_state_update(a_prev_dec: AudioState, a_enc: AudioState, v_enc: Tensor,
                       p: DecoderStageParams) -> AudioState:
    """Fuse the recurrent and encoder audio states, gated by pooled visuals."""
    with FLOPS.scope("fusion.state"):
        joint = concat_channels(p.proj_prev(a_prev_dec.value), p.proj_enc(a_enc.value))
        fused = relu(p.fuse_map(joint))
    with FLOPS.scope("fusion.interaction"):
        pooled = global_max_pool(v_enc)
    with FLOPS.scope("fusion.state"):
        gate = hsigmoid(p.gate_map(pooled))
        return AudioState(elementwise_mul(fused, gate), stage=a_enc.stage)


def visual_inject(v_enc: Tensor, a_hat: AudioState, p: DecoderStageParams) -> Tensor:
    """Residual broadcast of the mapped audio state into the visual feature."""
    with FLOPS.scope("fusion.state"):
        bias = p.inject_map(a_hat.value)
    with FLOPS.scope("fusion.interaction"):
        return broadcast_add(v_enc, bias)


class FusionDecoder:
    """Recurrent-audio top-down decoder emitting segmentation logits."""

    def __init__(self, stage_channels, rng: RngState, params: dict,
                 num_classes: int = 1, interact_stages: int = 3,
                 enable_cmfd: bool = True, prefix: str = "decoder"):
        if interact_stages > len(stage_channels):
            raise ContractError(
                f"cannot interact at {interact_stages} of {len(stage_channels)} stages")
        self.channels = tuple(stage_channels)
        self.num_classes = num_classes
        self.interact_stages = interact_stages
        self.enable_cmfd = enable_cmfd
        n = len(self.channels)
        first = n - interact_stages  # shallowest interacted stage index

        self.stage_params = {}
        prev_width = self.channels[-1]  # recurrence starts at the deepest state
        for i in range(n - 1, first - 1, -1):
            c = self.channels[i]
            self.stage_params[i] = DecoderStageParams(
                proj_prev=Linear1x1(f"{prefix}.s{i + 1}.proj_prev", prev_width, c, rng, params),
                proj_enc=Linear1x1(f"{prefix}.s{i + 1}.proj_enc", c, c, rng, params),
                fuse_map=Linear1x1(f"{prefix}.s{i + 1}.fuse", 2 * c, c, rng, params),
                gate_map=Linear1x1(f"{prefix}.s{i + 1}.gate", c, c, rng, params),
                inject_map=Linear1x1(f"{prefix}.s{i + 1}.inject", c, c, rng, params))
            prev_width = c

        # channel-aligning maps for the top-down merges (deep -> shallow)
        self.align = {}
        for i in range(n - 1, 0, -1):
            self.align[i] = Linear1x1(f"{prefix}.align{i + 1}to{i}",
                                      self.channels[i], self.channels[i - 1], rng, params)
        self.head = Linear1x1(f"{prefix}.head", self.channels[0], num_classes, rng, params)

    def forward(self, enc: EncoderOutput, out_hw,
                zero_recurrence: bool = False) -> SegOutput:
        """Decode to logits; ``zero_recurrence`` severs the recurrent audio
        path (each stage sees a zero previous state), an ablation hook."""
        n = len(self.channels)
        first = n - self.interact_stages
        out_h, out_w = out_hw

        feats, hats = [], []
        a_dec = enc.audio_states[-1]
        merged = None
        for i in range(n - 1, -1, -1):
            v = enc.enhanced[i]
            if i >= first:
                if self.enable_cmfd:
                    prev = a_dec
                    if zero_recurrence:
                        prev = AudioState(
                            Tensor(np.zeros_like(a_dec.value.data)), a_dec.stage)
                    with section("decoder_fusion"):
                        a_hat = audio_state_update(prev, enc.audio_states[i], v,
                                                   self.stage_params[i])
                        injected = visual_inject(v, a_hat, self.stage_params[i])
                    a_dec = a_hat
                else:
                    a_hat, injected = enc.audio_states[i], v
                feats.append(injected)
                hats.append(a_hat)
            else:
                injected = v
            with section("seg_head"):
                if merged is None:
                    merged = injected
                else:
                    up = bilinear_upsample(merged, v.shape[2], v.shape[3])
                    merged = add(self.align[i + 1](up), injected)
        with section("seg_head"):
            logits = bilinear_upsample(self.head(merged), out_h, out_w)
        return SegOutput(logits=logits, per_stage_features=feats, audio_states=hats)

"""Dense audio-conditioned cross-attention oracle and FLOP scaling sweeps.

The attention block flattens the spatial grid to N tokens and computes a full
token-to-token affinity matrix, so its cost carries an N^2 term. It exists as
the quadratic reference against which the gated fusion path's linear scaling
is demonstrated. Accounting: the two affinity matmuls record 2*N^2*d each
(scope ``xattn.affinity``), the four channel projections N*d*C each (scope
``xattn.proj``), so the scope total matches 4*N^2*d + 4*N*d*C exactly.

``scaling_sweep`` measures counted FLOPs and median wall time per grid size
for a chosen module and fits the log-log slope against N = H*W.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .backbones import AudioState
from .decoder import DecoderStageParams, audio_state_update, visual_inject
from .encoder import EncoderStageParams, agve_step, har_step
from .layers import Linear1x1
from .tensor import (
    FLOPS, ContractError, RngState, Tensor, broadcast_add, matmul, mul,
    reshape, softmax, transpose,
)


@dataclass
class AttentionParams:
    query: Linear1x1
    key: Linear1x1
    value: Linear1x1
    out: Linear1x1
    d: int


def make_attention_params(channels: int, d: int, rng: RngState,
                          params: dict | None = None,
                          prefix: str = "xattn") -> AttentionParams:
    params = params if params is not None else {}
    return AttentionParams(
        query=Linear1x1(f"{prefix}.query", channels, d, rng, params),
        key=Linear1x1(f"{prefix}.key", channels, d, rng, params),
        value=Linear1x1(f"{prefix}.value", channels, d, rng, params),
        out=Linear1x1(f"{prefix}.out", d, channels, rng, params),
        d=d)


def dense_attention(v: Tensor, audio: AudioState, p: AttentionParams) -> Tensor:
    """Single-head dense attention over spatial tokens, audio as query bias."""
    b, c, h, w = v.shape
    n = h * w
    with FLOPS.scope("xattn"):
        q_in = broadcast_add(v, audio.value)
        with FLOPS.scope("xattn.proj"):
            q = p.query(q_in)
            k = p.key(v)
            val = p.value(v)
        q_t = transpose(reshape(q, (b, p.d, n)), (0, 2, 1))      # (B, N, d)
        k_flat = reshape(k, (b, p.d, n))                          # (B, d, N)
        v_t = transpose(reshape(val, (b, p.d, n)), (0, 2, 1))     # (B, N, d)
        with FLOPS.scope("xattn.affinity"):
            scores = matmul(q_t, k_flat)                          # (B, N, N)
        scores = mul(scores, 1.0 / math.sqrt(p.d))
        weights = softmax(scores, axis=-1)
        with FLOPS.scope("xattn.affinity"):
            mixed = matmul(weights, v_t)                          # (B, N, d)
        mixed = reshape(transpose(mixed, (0, 2, 1)), (b, p.d, h, w))
        with FLOPS.scope("xattn.proj"):
            out = p.out(mixed)
    return out


def attention_flops_closed_form(n: int, d: int, c: int) -> tuple[int, int]:
    """(affinity, projection) madd counts for one batch-1 forward."""
    return 4 * n * n * d, 4 * n * d * c


# ---------------------------------------------------------------------------
# Scaling sweep
# ---------------------------------------------------------------------------

@dataclass
class FlopPoint:
    module: str
    n: int
    flops: int
    wall_ms: float
    madds: int = 0
    elems: int = 0


@dataclass
class FlopReport:
    module: str
    points: list
    slope: float
    channels: int
    extra: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        lines = ["module,N,flops,wall_ms"]
        for pt in self.points:
            lines.append(f"{pt.module},{pt.n},{pt.flops},{pt.wall_ms:.4f}")
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict:
        return {
            "module": self.module,
            "channels": self.channels,
            "slope": self.slope,
            "points": [{"N": pt.n, "flops": pt.flops, "wall_ms": pt.wall_ms,
                        "madds": pt.madds, "elems": pt.elems} for pt in self.points],
            **self.extra,
        }


def fit_loglog_slope(ns, counts) -> float:
    x = np.log(np.asarray(ns, dtype=np.float64))
    y = np.log(np.asarray(counts, dtype=np.float64))
    x = x - x.mean()
    return float((x * (y - y.mean())).sum() / (x * x).sum())


def _median_wall_ms(fn, reps: int = 5) -> float:
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def _fusion_step_fixture(channels: int, seed: int = 0):
    """One encoder refinement plus one decoder update at a fixed width."""
    rng = RngState(seed)
    enc_p = EncoderStageParams(
        audio_map=Linear1x1("sweep.enc.audio", channels, channels, rng, {}),
        gate_map=Linear1x1("sweep.enc.gate", channels, channels, rng, {}))
    dec_p = DecoderStageParams(
        proj_prev=Linear1x1("sweep.dec.pp", channels, channels, rng, {}),
        proj_enc=Linear1x1("sweep.dec.pe", channels, channels, rng, {}),
        fuse_map=Linear1x1("sweep.dec.fuse", 2 * channels, channels, rng, {}),
        gate_map=Linear1x1("sweep.dec.gate", channels, channels, rng, {}),
        inject_map=Linear1x1("sweep.dec.inj", channels, channels, rng, {}))

    def run(grid: int, data_rng: RngState):
        v = Tensor(data_rng.uniform((1, channels, grid, grid), -1, 1))
        a = AudioState(Tensor(data_rng.uniform((1, channels, 1, 1), -1, 1)))
        refined = har_step(a, v, enc_p)
        enhanced = agve_step(v, refined)
        a_hat = audio_state_update(refined, refined, enhanced, dec_p)
        visual_inject(enhanced, a_hat, dec_p)

    return run


def scaling_sweep(module: str, grid_sizes, channels: int | None = None,
                  d: int = 64, reps: int = 5, seed: int = 0) -> FlopReport:
    """Counted FLOPs and median-of-``reps`` wall time across grid sizes.

    ``module`` is ``fusion`` (gated channel interaction; the gated count is
    the grid-dependent interaction scope) or ``xattn`` (dense attention; the
    gated count is the N^2 affinity term).
    """
    grid_sizes = list(grid_sizes)
    if any(b <= a for a, b in zip(grid_sizes, grid_sizes[1:])):
        raise ContractError(f"grid sizes must be strictly increasing: {grid_sizes}")
    points = []
    if module == "fusion":
        channels = 16 if channels is None else channels
        run = _fusion_step_fixture(channels, seed=seed)
        for g in grid_sizes:
            FLOPS.reset()
            run(g, RngState(seed + g))
            flops = FLOPS.ops("fusion.interaction")
            madds = FLOPS.madds("fusion.interaction")
            elems = FLOPS.elems("fusion.interaction")
            wall = _median_wall_ms(lambda: run(g, RngState(seed + g)), reps=reps)
            points.append(FlopPoint("fusion", g * g, flops, wall, madds, elems))
        extra = {"gated_scope": "fusion.interaction",
                 "state_madds_last": FLOPS.madds("fusion.state")}
    elif module == "xattn":
        channels = 64 if channels is None else channels
        rng = RngState(seed)
        p = make_attention_params(channels, d, rng)
        for g in grid_sizes:
            data_rng = RngState(seed + g)
            v = Tensor(data_rng.uniform((1, channels, g, g), -1, 1))
            a = AudioState(Tensor(data_rng.uniform((1, channels, 1, 1), -1, 1)))
            FLOPS.reset()
            dense_attention(v, a, p)
            flops = FLOPS.madds("xattn.affinity")
            madds = FLOPS.madds("xattn")
            elems = FLOPS.elems("xattn")
            wall = _median_wall_ms(lambda: dense_attention(v, a, p), reps=reps)
            points.append(FlopPoint("xattn", g * g, flops, wall, madds, elems))
        extra = {"gated_scope": "xattn.affinity", "d": d}
    else:
        raise ContractError(f"unknown sweep module {module!r} (want fusion or xattn)")
    slope = fit_loglog_slope([pt.n for pt in points], [pt.flops for pt in points])
    return FlopReport(module=module, points=points, slope=slope,
                      channels=channels, extra=extra)


def component_report(model, hw: int = 224, reps: int = 3, seed: int = 0) -> dict:
    """Per-component FLOPs and wall time of a full forward (latency breakdown)."""
    from .tensor import TIMER, no_grad

    rng = RngState(seed)
    frames = Tensor(rng.uniform((1, 3, hw, hw), 0, 1))
    mel = Tensor(rng.uniform((1, 96, 64), -20, 0))
    names = ["visual_backbone", "audio_embed", "encoder_fusion",
             "decoder_fusion", "seg_head"]
    FLOPS.reset()
    with no_grad():
        model.forward(frames, mel)
    flops = {n: {"madds": FLOPS.madds(n), "elems": FLOPS.elems(n)} for n in names}

    times = []
    for _ in range(reps):
        TIMER.reset()
        with no_grad():
            model.forward(frames, mel)
        times.append({n: TIMER.seconds(n) * 1e3 for n in names})
    med = {n: float(np.median([t[n] for t in times])) for n in names}
    total_ms = sum(med.values())
    return {
        "hw": hw,
        "components": [
            {"name": n, "madds": flops[n]["madds"], "elems": flops[n]["elems"],
             "wall_ms": med[n],
             "share": med[n] / total_ms if total_ms > 0 else 0.0}
            for n in names],
        "total_wall_ms": total_ms,
    }

"""Command-line driver: train, eval, bench, gradcheck, synth-data, inspect.

Config comes from an optional flat key=value file with flag overrides on top;
LIGHTAVSEG_SEED in the environment overrides the seed from both. Run outputs
land in the --out directory: config.txt, log.jsonl, ckpt_*.bin, bench.csv,
bench.json. Exit codes: 0 success, 1 contract/runtime failure, 2 usage.
"""

from __future__ import annotations

import argparse
import json
import os
import struct
import sys
from pathlib import Path

import numpy as np

from .tensor import ContractError, DimensionError, NumericalError, RngState

TENSOR_MAGIC = b"TNSR"


def write_tensor_file(path, arr: np.ndarray):
    """Flat binary tensor: magic 'TNSR', u32 ndim, u32 dims, f64 LE data."""
    arr = np.asarray(arr, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            f.write(struct.pack("<I", d))
        f.write(arr.astype("<f8").tobytes())


def read_tensor_file(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(4) != TENSOR_MAGIC:
            raise ContractError(f"{path}: not a tensor dump")
        (ndim,) = struct.unpack("<I", f.read(4))
        shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(f.read(8 * count), dtype="<f8")
    return data.reshape(shape).copy()


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lightavseg",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p):
        p.add_argument("--config", type=str, default=None,
                       help="flat key=value config file")
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--lambda", dest="lam", type=float, default=None)
        p.add_argument("--tau", type=float, default=None)
        p.add_argument("--weight-decay", type=float, default=None)
        p.add_argument("--loss-variant", type=str, default=None,
                       choices=["seg", "seg+msa", "seg+avm"])
        p.add_argument("--scenes", type=int, default=None, dest="n_scenes")
        p.add_argument("--hw", type=int, default=None)
        p.add_argument("--snr-db", type=float, default=None)
        p.add_argument("--ckpt-every", type=int, default=None)
        p.add_argument("--log-every", type=int, default=None)
        p.add_argument("--freeze-audio-backbone", dest="freeze_audio_backbone",
                       action="store_true", default=None)
        p.add_argument("--no-freeze-audio-backbone", dest="freeze_audio_backbone",
                       action="store_false")
        p.add_argument("--no-har", dest="enable_har", action="store_false", default=None)
        p.add_argument("--no-agve", dest="enable_agve", action="store_false", default=None)
        p.add_argument("--no-cmfd", dest="enable_cmfd", action="store_false", default=None)

    p_train = sub.add_parser("train", help="run the training loop")
    add_config_flags(p_train)
    p_train.add_argument("--out", type=str, required=True, help="run directory")
    p_train.add_argument("--data", type=str, default=None,
                         help="clip-layout root (default: synthetic scenes)")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--ckpt", type=str, required=True)
    p_eval.add_argument("--data", type=str, default=None)
    p_eval.add_argument("--mute-audio", action="store_true",
                        help="zero the initial audio state at eval")
    p_eval.add_argument("--threshold", type=float, default=0.5)
    p_eval.add_argument("--out", type=str, default=None, help="write report JSON here")
    p_eval.add_argument("--dump-alignment", type=str, default=None,
                        help="directory for per-scene alignment map dumps")

    p_bench = sub.add_parser("bench", help="FLOP/time scaling sweeps")
    p_bench.add_argument("--module", type=str, required=True,
                         choices=["fusion", "xattn", "model"])
    p_bench.add_argument("--grids", type=str, default=None,
                         help="comma list of square grid sizes")
    p_bench.add_argument("--channels", type=int, default=None)
    p_bench.add_argument("--out", type=str, default=None, help="output directory")

    p_grad = sub.add_parser("gradcheck", help="run the gradient verification suite")
    p_grad.add_argument("--tol", type=float, default=1e-4)
    p_grad.add_argument("--quick", action="store_true",
                        help="subsample end-to-end coordinates")

    p_synth = sub.add_parser("synth-data", help="materialize synthetic scenes to disk")
    p_synth.add_argument("--out", type=str, required=True)
    p_synth.add_argument("--scenes", type=int, default=64)
    p_synth.add_argument("--hw", type=int, default=64)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--snr-db", type=float, default=None)

    p_inspect = sub.add_parser("inspect", help="dump activations and alignment maps")
    p_inspect.add_argument("--ckpt", type=str, required=True)
    p_inspect.add_argument("--index", type=int, default=0, help="synthetic scene index")
    p_inspect.add_argument("--data", type=str, default=None)
    p_inspect.add_argument("--out", type=str, required=True)
    return parser


def _collect_overrides(args) -> dict:
    keys = ["steps", "lr", "batch_size", "seed", "lam", "tau", "weight_decay",
            "loss_variant", "n_scenes", "hw", "snr_db", "ckpt_every", "log_every",
            "freeze_audio_backbone", "enable_har", "enable_agve", "enable_cmfd"]
    out = {}
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _load_config(args):
    from .harness import config_from_file, config_from_mapping
    overrides = _collect_overrides(args)
    if getattr(args, "config", None):
        cfg = config_from_file(args.config, {})
        cfg = config_from_mapping(overrides, base=cfg)
    else:
        cfg = config_from_mapping(overrides)
    env_seed = os.environ.get("LIGHTAVSEG_SEED")
    if env_seed is not None:
        cfg = config_from_mapping({"seed": int(env_seed)}, base=cfg)
    return cfg


def _load_scenes(cfg, data_root):
    from .data import generate_dataset, load_avsbench_layout
    if data_root:
        return list(load_avsbench_layout(data_root))
    return generate_dataset(cfg.dataset_spec())


def _cmd_train(args) -> int:
    from .harness import train
    cfg = _load_config(args)
    scenes = _load_scenes(cfg, args.data)
    result = train(cfg, scenes, out_dir=args.out)
    final = result.log_lines[-1] if result.log_lines else {}
    print(json.dumps({"run_dir": str(args.out), "steps": cfg.steps,
                      "final": final}, sort_keys=True))
    return 0


def _cmd_eval(args) -> int:
    from .harness import evaluate, load_checkpoint, model_from_checkpoint
    from .losses import alignment_maps
    from .audio import log_mel
    from .tensor import no_grad

    ckpt = load_checkpoint(args.ckpt)
    model, cfg = model_from_checkpoint(ckpt)
    scenes = _load_scenes(cfg, args.data)
    report = evaluate(model, scenes, mute_audio=args.mute_audio,
                      threshold=args.threshold)
    if args.dump_alignment:
        dump_dir = Path(args.dump_alignment)
        dump_dir.mkdir(parents=True, exist_ok=True)
        for i, scene in enumerate(scenes):
            mel = log_mel(scene.waveform).windows
            with no_grad():
                seg, _ = model.forward(scene.frames, mel,
                                       mute_audio=args.mute_audio)
                maps = alignment_maps(seg.per_stage_features, seg.audio_states,
                                      cfg.tau, scene.frames.shape[2],
                                      scene.frames.shape[3])
            for s_idx, m in enumerate(maps.s_up):
                write_tensor_file(dump_dir / f"scene{i:04d}_scale{s_idx}.tnsr",
                                  m.data)
    line = json.dumps({k: v for k, v in report.items() if k != "per_scene"},
                      sort_keys=True)
    print(line)
    if args.out:
        Path(args.out).write_text(json.dumps(report, sort_keys=True, indent=1))
    return 0


def _cmd_bench(args) -> int:
    from .attention import component_report, scaling_sweep
    out_dir = Path(args.out) if args.out else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    if args.module == "model":
        from .backbones import BackboneConfig
        from .model import ModelConfig, SegModel
        hw = int(args.grids.split(",")[0]) if args.grids else 224
        model = SegModel(ModelConfig(backbone=BackboneConfig(input_hw=hw)),
                         RngState(0))
        report = component_report(model, hw=hw)
        csv_lines = ["module,N,flops,wall_ms"]
        for comp in report["components"]:
            csv_lines.append(f"model.{comp['name']},{hw * hw},"
                             f"{comp['madds'] + comp['elems']},{comp['wall_ms']:.4f}")
        csv_text = "\n".join(csv_lines) + "\n"
        json_text = json.dumps(report, sort_keys=True, indent=1)
    else:
        if args.grids:
            grids = [int(g) for g in args.grids.split(",")]
        else:
            grids = [28, 56, 112, 224] if args.module == "fusion" else [14, 28, 56]
        report = scaling_sweep(args.module, grids, channels=args.channels)
        csv_text = report.to_csv()
        json_text = json.dumps(report.to_json_dict(), sort_keys=True, indent=1)
        print(f"{args.module}: fitted log-log slope vs N = {report.slope:.4f}")
    if out_dir:
        (out_dir / "bench.csv").write_text(csv_text)
        (out_dir / "bench.json").write_text(json_text)
    else:
        sys.stdout.write(csv_text)
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradsuite import full_suite
    results = full_suite(tol=args.tol, quick=args.quick)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:<28} max_rel_err={r.max_rel_err:.3e} (n={r.n_checked})")
        ok = ok and r.passed
    print(f"gradcheck: {'all checks passed' if ok else 'FAILURES PRESENT'}")
    return 0 if ok else 1


def _cmd_synth_data(args) -> int:
    from .data import DatasetSpec, materialize_dataset
    spec = DatasetSpec(n_scenes=args.scenes, hw=args.hw, seed=args.seed,
                       snr_db=args.snr_db)
    dirs = materialize_dataset(spec, args.out)
    print(f"wrote {len(dirs)} scenes under {args.out}")
    return 0


def _cmd_inspect(args) -> int:
    from .audio import log_mel
    from .data import generate_scene, load_avsbench_layout
    from .harness import load_checkpoint, model_from_checkpoint
    from .losses import alignment_maps
    from .pngio import write_png
    from .tensor import no_grad, _sigmoid_data

    ckpt = load_checkpoint(args.ckpt)
    model, cfg = model_from_checkpoint(ckpt)
    if args.data:
        scenes = list(load_avsbench_layout(args.data))
        scene = scenes[args.index]
    else:
        scene = generate_scene(cfg.dataset_spec(), args.index)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    mel = log_mel(scene.waveform).windows
    with no_grad():
        seg, enc = model.forward(scene.frames, mel)
        maps = alignment_maps(seg.per_stage_features, seg.audio_states, cfg.tau,
                              scene.frames.shape[2], scene.frames.shape[3])
    write_tensor_file(out_dir / "logits.tnsr", seg.logits.data)
    for i, (feat, state) in enumerate(zip(enc.enhanced, enc.audio_states)):
        write_tensor_file(out_dir / f"enc_stage{i + 1}_feat.tnsr", feat.data)
        write_tensor_file(out_dir / f"enc_stage{i + 1}_audio.tnsr", state.value.data)
    for i, m in enumerate(maps.s_up):
        write_tensor_file(out_dir / f"alignment_scale{i}.tnsr", m.data)
    pred = (_sigmoid_data(seg.logits.data[0, 0]) > 0.5).astype(np.uint8) * 255
    write_png(out_dir / "pred_mask.png", pred)
    print(f"wrote inspection dumps to {out_dir}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    handlers = {
        "train": _cmd_train,
        "eval": _cmd_eval,
        "bench": _cmd_bench,
        "gradcheck": _cmd_gradcheck,
        "synth-data": _cmd_synth_data,
        "inspect": _cmd_inspect,
    }
    try:
        return handlers[args.command](args)
    except (ContractError, DimensionError, NumericalError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

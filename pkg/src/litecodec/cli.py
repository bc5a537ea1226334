"""``litecodec`` command line.

Exit codes: 0 success, 1 usage, 2 config, 3 data or checkpoint, 4 numerical abort.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np
import torch

from . import attention, bitstream
from .backbone import UnsupportedError, count_macs
from .checkpoint import CheckpointError, load_state, save_state
from .codec import DimensionError
from .config import ConfigError, RunConfig, dump_config, load_config
from .data import DataError, load, load_folder, parse_dataset_arg, read_image, write_image
from .flow import pretrain_stage1, side_info_bits
from .models import MODES
from .one_step import CheckpointIncompatible, finetune_stage2
from .pipeline import NotOneStepCodec, bench, compress, decompress, require_one_step
from .presets import PRESET_ORDER, preset
from .training import NumericalAbort

log = logging.getLogger("litecodec")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def set_deterministic(seed):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def run_config(args):
    run = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        run = replace(run, train=replace(run.train, seed=args.seed), finetune=replace(run.finetune, seed=args.seed))
    return run


def dataset_from(args, run):
    spec = parse_dataset_arg(args.data, seed=run.data.seed) if getattr(args, "data", None) else run.data
    return load(spec)


def read_any_image(path):
    if path.endswith(".npy"):
        return np.load(path).astype(np.float32)
    return read_image(path)


def write_any_image(path, image):
    if path.endswith(".npy"):
        np.save(path, np.asarray(image, dtype=np.float32))
    else:
        write_image(path, image)


def _checkpointer(path):
    def save(state):
        save_state(path, state)
        log.info("step %d: checkpoint written to %s", state.step, path)
    return save


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args):
    run = run_config(args)
    schedule = run.train
    if args.steps is not None:
        schedule = replace(schedule, steps=args.steps)
    mode = args.mode or schedule.mode
    schedule = replace(schedule, mode=mode)
    dataset = dataset_from(args, run)
    state = load_state(args.resume) if args.resume else None
    num_classes = run.model.num_classes or (dataset.num_classes if mode == "class_conditional" else 0)
    state = pretrain_stage1(dataset, mode, run.codec, run.backbone, schedule, num_classes, state,
                            on_checkpoint=_checkpointer(args.output))
    save_state(args.output, state)
    h, w = dataset.images.shape[1:3]
    bits = side_info_bits(mode, h, w, num_classes, run.codec)
    print(f"mode={mode} steps={state.step} final_loss={state.history[-1]['loss'] if state.history else float('nan'):.6f}")
    print(f"side_info_bits_per_image={bits!r}")
    return EXIT_OK


def cmd_finetune(args):
    run = run_config(args)
    schedule = run.finetune
    if args.steps is not None:
        schedule = replace(schedule, steps=args.steps)
    stage1 = load_state(args.checkpoint)
    teacher_path = args.teacher or schedule.teacher_checkpoint
    teacher = load_state(teacher_path) if teacher_path else None
    state = load_state(args.resume) if args.resume else None
    dataset = dataset_from(args, run)
    state = finetune_stage2(stage1, dataset, run.weights, schedule, run.student, teacher, state,
                            on_checkpoint=_checkpointer(args.output))
    save_state(args.output, state)
    last = state.history[-1] if state.history else {}
    print(f"steps={state.step} " + " ".join(f"{k}={v:.6f}" for k, v in last.items()
                                            if isinstance(v, float)))
    return EXIT_OK


def cmd_encode(args):
    model = require_one_step(load_state(args.checkpoint))
    image = read_any_image(args.image)
    data = compress(model, image)
    with open(args.output, "wb") as fh:
        fh.write(data)
    h, w = image.shape[:2]
    cfg = model.codec_config
    print(f"{len(data)} bytes, bpp={bitstream.bpp(cfg.downsample_factor, cfg.codebook_bits, h, w)!r}")
    return EXIT_OK


def cmd_decode(args):
    model = require_one_step(load_state(args.checkpoint))
    with open(args.bitstream, "rb") as fh:
        data = fh.read()
    write_any_image(args.output, decompress(model, data))
    return EXIT_OK


def cmd_bench(args):
    run = run_config(args)
    dataset = load(parse_dataset_arg(args.dataset, seed=run.data.seed))
    model = None
    if args.checkpoint:
        model = require_one_step(load_state(args.checkpoint))
    recon = None
    if args.recon:
        recon = load_folder(args.recon, multiple=1).images
        if recon.shape != dataset.images.shape:
            raise DataError(f"reconstructions {recon.shape} do not match dataset {dataset.images.shape}")
    if model is None and recon is None:
        raise UsageError("bench needs a checkpoint or --recon")
    report, outputs = bench(dataset, model, recon, run.bench.patch_size, run.bench.stride, run.bench.extractor,
                            run.codec)
    if args.output:
        report.write(args.output)
    if args.save_recon:
        os.makedirs(args.save_recon, exist_ok=True)
        for name, img in zip(dataset.names or range(len(outputs)), outputs):
            write_image(os.path.join(args.save_recon, f"{os.path.splitext(str(name))[0]}.png"), img)
    print(f"images={len(report.rows)} bpp={report.mean('bpp')!r} psnr={report.mean('psnr'):.4f} "
          f"l1={report.mean('l1'):.6f} patch_fid={report.fid:.6f}")
    return EXIT_OK


def cmd_analyze_attn(args):
    run = run_config(args)
    state = load_state(args.checkpoint)
    dataset = dataset_from(args, run)
    images = dataset.images[:args.images]
    os.makedirs(args.output, exist_ok=True)
    timesteps = [float(t) for t in args.timesteps.split(",")]
    topk = {}
    mean_dist = []
    for t in timesteps:
        records = attention.collect_attention(state.model, images, t, seed=run.train.seed)
        for r in records:
            r.t = t
        attention.write_profile(os.path.join(args.output, f"profile_t{t:g}.tsv"),
                                attention.distance_profile(records, t))
        topk[f"t={t:g}"] = [attention.topk_attention_distance(records, k, "all_blocks")
                            for k in attention.TOPK_PERCENTS]
        n = records[0].num_tokens
        mean_dist.append(np.mean([attention.mean_attention_distance(r, q) for r in records for q in range(n)]))
        print(f"t={t:g} mean_distance={mean_dist[-1]:.6f} "
              + " ".join(f"top{k}%={v:.6f}" for k, v in zip(attention.TOPK_PERCENTS, topk[f't={t:g}'])))
    attention.write_series(os.path.join(args.output, "topk.tsv"), "k_percent", list(attention.TOPK_PERCENTS), topk)
    attention.write_series(os.path.join(args.output, "mean_distance.tsv"), "t", timesteps,
                           {"mean_distance": mean_dist})
    if args.mask:
        positions = [int(p) for p in args.mask.split(",")]
        res = attention.mask_sink_tokens(state.model, positions, images)
        print(" ".join(f"{k}={v:.6f}" for k, v in res.items()))
    return EXIT_OK


def _configs_for_macs(args):
    if args.preset:
        run = preset(args.preset)
    elif args.config_file or args.config:
        run = load_config(args.config_file or args.config)
    else:
        run = RunConfig()
    return run


def cmd_count_macs(args):
    run = _configs_for_macs(args)
    backbone = run.backbone
    if args.student:
        backbone = run.student or replace(run.backbone, timestep_conditioning=False)
    res = count_macs(backbone, run.codec, args.height, args.width)
    print(f"# {backbone.block_type} width={backbone.width} depth={backbone.depth} input={args.height}x{args.width}")
    print("module\tmacs\tkmacs_per_pixel")
    for name, macs in res["macs"].items():
        print(f"{name}\t{macs}\t{res['kmacs_per_pixel'][name]:.4f}")
    return EXIT_OK


def cmd_roadmap(args):
    names = PRESET_ORDER if args.preset == "all" else [args.preset]
    rows = []
    for name in names:
        run = preset(name)
        if args.seed is not None:
            run = replace(run, train=replace(run.train, seed=args.seed),
                          finetune=replace(run.finetune, seed=args.seed))
        if not args.run:
            print(f"# preset {name}")
            print(dump_config(run))
            continue
        out = os.path.join(args.output, name)
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "config.txt"), "w") as fh:
            fh.write(dump_config(run))
        dataset = load(run.data)
        s1 = pretrain_stage1(dataset, "compression", run.codec, run.backbone, run.train)
        s2 = finetune_stage2(s1, dataset, run.weights, run.finetune, run.student)
        save_state(os.path.join(out, "stage2.ckpt"), s2)
        report, _ = bench(dataset, s2.model, None, run.bench.patch_size, run.bench.stride, run.bench.extractor)
        report.write(os.path.join(out, "report.tsv"))
        macs = count_macs(s2.model.backbone_config, run.codec, 1024, 1920)["macs"]["backbone"]
        rows.append((name, report.fid, report.mean("psnr"), macs))
        print(f"{name}\tpatch_fid={report.fid:.6f}\tpsnr={report.mean('psnr'):.4f}\tbackbone_macs_1080p={macs}")
    if args.run:
        attention.write_series(os.path.join(args.output, "roadmap.tsv"), "preset_index", list(range(len(rows))),
                               {"patch_fid": [r[1] for r in rows], "psnr": [r[2] for r in rows]})
    return EXIT_OK


def cmd_plot(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    x_name, x, series = attention.read_series(args.datafile)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, y in series.items():
        ax.plot(x, y, marker="o", label=name)
    ax.set_xlabel(x_name)
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.output, dpi=120)
    plt.close(fig)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    common = Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    common.add_argument("--config", default=None, help="config file (see docs/config.md)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = Parser(prog="litecodec", description="Lightweight one-step diffusion image codec.")
    sub = parser.add_subparsers(dest="command", parser_class=Parser)
    sub.required = True

    p = sub.add_parser("pretrain", parents=[common], help="Stage I flow-matching pre-training")
    p.add_argument("--data", help="synthetic:<kind>:<count>:<size>[:<seed>] or an image folder")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="continue from a stage1 checkpoint")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common], help="Stage II one-step fine-tuning")
    p.add_argument("checkpoint", help="stage1 checkpoint")
    p.add_argument("--teacher", help="separate stage1 checkpoint used as DMD teacher")
    p.add_argument("--data")
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="continue from a stage2 checkpoint")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("encode", parents=[common], help="image -> bitstream")
    p.add_argument("image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", parents=[common], help="bitstream -> image (.png or .npy)")
    p.add_argument("bitstream")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("bench", parents=[common], help="rate/quality report over a dataset")
    p.add_argument("dataset")
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("--recon", help="folder of precomputed reconstructions instead of a checkpoint")
    p.add_argument("--save-recon", help="write reconstructions to this folder")
    p.add_argument("-o", "--output", help="report file (TSV)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("analyze-attn", parents=[common], help="attention locality statistics")
    p.add_argument("checkpoint")
    p.add_argument("--data")
    p.add_argument("--images", type=int, default=8)
    p.add_argument("--timesteps", default=",".join(str(t) for t in attention.DEFAULT_TIMESTEPS))
    p.add_argument("--mask", help="comma-separated token positions to mask as sinks")
    p.add_argument("-o", "--output", required=True, help="output directory for plot data")
    p.set_defaults(func=cmd_analyze_attn)

    p = sub.add_parser("count-macs", parents=[common], help="analytic MAC counts")
    p.add_argument("config_file", nargs="?")
    p.add_argument("--preset", choices=PRESET_ORDER)
    p.add_argument("--student", action="store_true", help="count the one-step student backbone")
    p.add_argument("--height", type=int, default=1024)
    p.add_argument("--width", type=int, default=1920)
    p.set_defaults(func=cmd_count_macs)

    p = sub.add_parser("roadmap", parents=[common], help="print or run a roadmap preset")
    p.add_argument("preset", choices=PRESET_ORDER + ("all",))
    p.add_argument("--run", action="store_true")
    p.add_argument("-o", "--output", default="roadmap_runs")
    p.set_defaults(func=cmd_roadmap)

    p = sub.add_parser("plot", parents=[common], help="render a plot-data file")
    p.add_argument("datafile")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    set_deterministic(args.seed if args.seed is not None else 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"litecodec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, DimensionError, CheckpointError, CheckpointIncompatible, NotOneStepCodec,
            bitstream.BitstreamError, UnsupportedError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""``pcnet`` command line: synth, pretrain, train, eval, infer.

Every command logs ``key=value`` records, one per line. Exit status is 0 on
success, 2 for configuration errors and 3 for data errors.
"""
import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, module_tensors, save_checkpoint
from .core import (
    ABLATIONS, Homography, RunConfig, format_homography, inverse, paper_config, parse_homography,
)
from .data import (
    MisalignParams, Sample, ToySceneSpec, generate_toy_dataset, load_vt_dataset, read_image,
    save_dataset, to_uint8, write_image,
)
from .errors import ConfigError, DataError, DecodeError, NonFiniteLoss
from .evaluation import evaluate_dataset
from .geometry import warp_array
from .model import ESTIMATOR_PREFIX
from .she import evaluate_estimator, pretrain_estimator, prepare_pairs
from .training import (
    Trainer, build_model, load_estimator, model_from_checkpoint, predict_samples, prepare_batch,
    split_by_id, thermal_channel,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


# ---------------------------------------------------------------------------
# logging

def format_value(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    s = str(v)
    return f'"{s}"' if (" " in s or not s) else s


class KeyValueLog:
    """Writes ``key=value`` lines to stdout and, optionally, a file."""

    def __init__(self, stream=None, path=None):
        self.stream = stream if stream is not None else sys.stdout
        self.file = open(path, "w") if path is not None else None

    def __call__(self, **fields):
        line = " ".join(f"{k}={format_value(v)}" for k, v in fields.items())
        print(line, file=self.stream, flush=True)
        if self.file:
            self.file.write(line + "\n")
            self.file.flush()

    def close(self):
        if self.file:
            self.file.close()
            self.file = None


# ---------------------------------------------------------------------------
# configuration

def resolve_config(args, base=None):
    """Defaults (or paper defaults, or ``base``), then the config file, then flags."""
    if args.paper_config:
        cfg = paper_config()
    elif base is not None and not args.config:
        cfg = base
    else:
        cfg = RunConfig()
    if args.config:
        cfg = RunConfig.load(args.config, base=cfg)
    if args.seed is not None:
        cfg = cfg.replace(rng_seed=args.seed)
    for name in args.ablation or ():
        cfg = cfg.with_ablation(name)
    cfg.validate()
    return cfg


def _require_dir(path, what):
    if not path:
        raise ConfigError(f"no {what} given")
    if not Path(path).is_dir():
        raise DataError(f"{what} {path} does not exist")
    return Path(path)


def _out_dir(args):
    if not args.out:
        raise ConfigError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args, log):
    cfg = resolve_config(args)
    out = _out_dir(args)
    count = cfg.synth_count if args.count is None else args.count
    spec = ToySceneSpec(cfg.synth_size, cfg.synth_objects, MisalignParams.from_config(cfg))
    samples = generate_toy_dataset(spec, count, cfg.rng_seed)
    save_dataset(samples, out)
    log(event="synth", count=len(samples), size=cfg.synth_size, seed=cfg.rng_seed, out=out)
    return EXIT_OK


def _pretrain_samples(root):
    samples = load_vt_dataset(root, "test")
    for s in samples:
        if s.true_homography is None:
            raise DataError(f"{s.id}: no true homography under {root}/H")
    return samples


def cmd_pretrain(args, log):
    cfg = resolve_config(args)
    out = _out_dir(args)
    root = _require_dir(args.data or cfg.pretrain_root, "pretraining dataset")
    samples = _pretrain_samples(root)
    train, val = split_by_id(samples)
    if not val:
        val = train
    torch.manual_seed(cfg.rng_seed)
    log(event="pretrain_start", n_train=len(train), n_val=len(val), lr=cfg.pretrain_lr,
        weight_decay=cfg.pretrain_weight_decay, batch_size=cfg.pretrain_batch_size,
        epochs=cfg.pretrain_epochs)
    est, history = pretrain_estimator(train, cfg, val, log=lambda **kw: log(event="epoch", **kw))
    errs = evaluate_estimator(est, prepare_pairs(val, est.size))
    tensors = module_tensors(est, ESTIMATOR_PREFIX)
    path = out / "estimator.ckpt"
    save_checkpoint(path, Checkpoint(
        kind="estimator", tensors=tensors, frozen={k: True for k in tensors}, config=cfg,
        epoch=cfg.pretrain_epochs, rng_state=torch.get_rng_state(),
        extra={"history": history},
    ))
    log(event="pretrain_done", held_out_mace=float(errs[-1].mean()),
        identity_mace=float(errs[0].mean()), checkpoint=path.name)
    return EXIT_OK


def cmd_train(args, log):
    out = _out_dir(args)
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        cfg = resolve_config(args, base=ckpt.config)
        trainer = Trainer.resume(ckpt, cfg, log)
    else:
        cfg = resolve_config(args)
        if not args.estimator:
            build_model(cfg, None)  # raises the two-stage protocol error
        est, _ = load_estimator(args.estimator)
        trainer = Trainer(build_model(cfg, est), cfg, log)
    root = _require_dir(args.data or cfg.train_root, "training dataset")
    train, val = split_by_id(load_vt_dataset(root, "train"))
    size = cfg.input_size
    train_b = prepare_batch(train, size)
    val_b = prepare_batch(val, size) if val else None
    trainer.fit(train_b, val_b, checkpoint_dir=out)
    final = out / "model.ckpt"
    trainer.save(final)
    log(event="train_done", epoch=trainer.epoch, checkpoint=final.name)
    return EXIT_OK


def _model_for_inference(args):
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    for name in args.ablation or ():
        cfg = cfg.with_ablation(name)
    return model_from_checkpoint(ckpt, cfg), cfg


def cmd_eval(args, log):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    if not args.report:
        raise ConfigError("--report is required")
    model, cfg = _model_for_inference(args)
    root = _require_dir(args.data or cfg.test_root, "evaluation dataset")
    samples = load_vt_dataset(root, "test")
    missing = [s.id for s in samples if s.gt_mask is None]
    if missing:
        raise DataError(f"{missing[0]}: no ground-truth mask for evaluation")
    preds = predict_samples(model, samples, cfg.input_size)
    pred_dir = None
    if args.out:
        pred_dir = _out_dir(args)
    items = []
    for s, (prob, _) in zip(samples, preds):
        # scored exactly as the exported 8-bit PNG decodes
        q = to_uint8(prob).astype(np.float32) / 255.0
        if pred_dir is not None:
            write_image(pred_dir / f"{s.id}.png", q)
        items.append((s.id, q, s.gt_mask[0], s.attributes))
    report = evaluate_dataset(items)
    report.save(args.report)
    e, sm, f = report.aggregate
    log(event="eval", count=len(items), Em=e, Sm=sm, Fm=f, report=args.report)
    return EXIT_OK


def warp_thermal(thermal, h: Homography, rgb_hw):
    """Thermal ``(1, H', W')`` resampled into the RGB frame through ``h``."""
    warped, _ = warp_array(thermal, inverse(h), out_hw=rgb_hw)
    return warped


def cmd_infer(args, log):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    if not args.rgb or not args.thermal:
        raise ConfigError("--rgb and --thermal are required")
    model, cfg = _model_for_inference(args)
    out = _out_dir(args)
    rgb = read_image(args.rgb, "RGB")
    thermal = thermal_channel(read_image(args.thermal))
    sample = Sample(id=Path(args.rgb).stem, rgb=rgb, thermal=thermal, gt_mask=None)
    ((prob, h),) = predict_samples(model, [sample], cfg.input_size)
    write_image(out / "pred.png", prob)
    text = format_homography(h)
    (out / "H.txt").write_text(text)
    write_image(out / "warped_t.png", warp_thermal(thermal, parse_homography(text), rgb.shape[1:]))
    log(event="infer", id=sample.id, height=prob.shape[0], width=prob.shape[1],
        h=text.strip().replace(" ", ","), out=out)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="overrides rng_seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--ablation", action="append", choices=sorted(ABLATIONS),
                        help="switch off a component; repeatable")
    common.add_argument("--paper-config", action="store_true",
                        help="start from the full-scale defaults (384 px input, 80 epochs)")

    parser = argparse.ArgumentParser(prog="pcnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic misaligned dataset")
    p.add_argument("--count", type=int, help="overrides synth_count")

    p = sub.add_parser("pretrain", parents=[common], help="pretrain the homography estimator")
    p.add_argument("--data", help="dataset root with H/ files (default: pretrain_root)")

    p = sub.add_parser("train", parents=[common], help="stage-2 saliency training")
    p.add_argument("--data", help="training dataset root (default: train_root)")
    p.add_argument("--estimator", help="pretrained estimator checkpoint")
    p.add_argument("--resume", help="continue from a network checkpoint")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="dataset root (default: test_root)")
    p.add_argument("--report", help="report file to write")

    p = sub.add_parser("infer", parents=[common], help="predict one RGB-thermal pair")
    p.add_argument("--checkpoint")
    p.add_argument("--rgb")
    p.add_argument("--thermal")
    return parser


def main(argv=None, stream=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    torch.set_num_threads(1)
    log_path = None
    if args.command in ("train", "pretrain") and args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        log_path = Path(args.out) / f"{args.command}.log"
    log = KeyValueLog(stream, log_path)
    try:
        return COMMANDS[args.command](args, log)
    except ConfigError as exc:
        log(event="error", kind="config", message=str(exc))
        return EXIT_CONFIG
    except (DataError, DecodeError) as exc:
        log(event="error", kind="data", message=str(exc))
        return EXIT_DATA
    except NonFiniteLoss as exc:
        log(event="error", kind="non_finite_loss", batch=exc.batch_id, value=exc.value)
        return 1
    finally:
        log.close()


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``ageus {synth,train,estimate,evaluate}``.

Every flag can also be set in a flat ``key = value`` config file passed with
``--config``; flags given on the command line win. Exit status is non-zero
only for configuration errors; per-study failures become report rows.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

log = logging.getLogger("ageus")


class ConfigError(Exception):
    pass


def read_config(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _require(path, what):
    if path is None or not Path(path).exists():
        raise ConfigError(f"{what} not found: {path}")
    return Path(path)


# ------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    from .synth import PhantomSpec, gen_dataset

    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    spec = PhantomSpec(image_size=args.image_size, seed=args.seed)
    manifest = gen_dataset(spec, args.n, args.out)
    print(f"wrote {args.n} studies, manifest {manifest}")
    return 0


def _train_config(args):
    from .training import TrainConfig

    kw = {"seed": args.seed, "image_size": args.image_size, "batch_size": args.batch_size,
          "lr": args.lr, "val_every": args.val_every, "checkpoint_every": args.checkpoint_every}
    if args.epochs is not None:
        kw.update(epochs_pretrain=args.epochs, epochs_finetune=args.epochs,
                  epochs_femur=args.epochs)
    return TrainConfig(**kw)


def cmd_train(args) -> int:
    from . import nets, training

    data = _require(args.data, "dataset")
    if args.mode == "finetune" and not args.ckpt_in:
        raise ConfigError("--mode finetune needs --ckpt-in")
    if args.ckpt_in:
        _require(args.ckpt_in, "input checkpoint")
    cfg = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    log_path.unlink(missing_ok=True)
    source = training.StudySource.from_dir(data)
    split = None
    if args.mode != "pretrain":
        if args.split_file:
            split = training.SplitPlan.from_dict(json.loads(Path(args.split_file).read_text()))
        else:
            split = training.make_split(source, cfg)
        (out / "split.json").write_text(json.dumps(split.to_dict(), indent=1))
    net_cfg = nets.NetConfig(base_width=args.base_width)
    common = dict(split=split, out_dir=out, log_path=log_path, resume=args.resume)
    if args.mode == "pretrain":
        model = (nets.model_from_checkpoint(args.ckpt_in) if args.ckpt_in
                 else nets.build_shared_unet(net_cfg, seed=cfg.seed))
        ckpt = training.pretrain_seg(model, source, cfg, **common)
    elif args.mode == "finetune":
        ckpt = training.finetune_seg(args.ckpt_in, source, cfg, **common)
    else:
        model = (nets.model_from_checkpoint(args.ckpt_in) if args.ckpt_in
                 else nets.build_femur_unet(net_cfg, seed=cfg.seed))
        ckpt = training.train_femur(model, source, cfg, **common)
    print(f"best epoch {ckpt['epoch']}, validation metric {ckpt['metric']}, "
          f"checkpoint {out / 'best.pt'}")
    return 0


def _ckpt_side(ckpt: dict, override):
    if override:
        return override
    return ckpt.get("extra", {}).get("train_config", {}).get("image_size", 256)


def cmd_estimate(args) -> int:
    from . import nets
    from .pipeline import FemurParams, estimate_dir, write_report

    root = _require(args.study, "study directory")
    only = None
    if not (root / "manifest.csv").exists() and (root.parent / "manifest.csv").exists():
        root, only = root.parent, {root.name}
    seg = fem = None
    side = args.image_size
    if not args.oracle:
        seg_ckpt = nets.load_checkpoint(_require(args.seg_ckpt, "segmentation checkpoint"))
        fem_ckpt = nets.load_checkpoint(_require(args.femur_ckpt, "femur checkpoint"))
        seg, fem = nets.model_from_checkpoint(seg_ckpt), nets.model_from_checkpoint(fem_ckpt)
        side = _ckpt_side(seg_ckpt, args.image_size)
        if _ckpt_side(fem_ckpt, args.image_size) != side:
            raise ConfigError("segmentation and femur checkpoints use different image sizes")
    if args.split_file:
        split = json.loads(Path(_require(args.split_file, "split file")).read_text())
        only = set(split[f"{args.subset}_ids"])
    params = FemurParams(sigma=args.sigma, percentile=args.percentile)
    ests = estimate_dir(root, seg, fem, oracle=args.oracle, side=side or 256,
                        femur_params=params, mask_dir=args.mask_dir, only=only)
    write_report(args.out, ests)
    n_err = sum(e.error is not None for e in ests)
    print(f"wrote {len(ests)} rows to {args.out} ({n_err} with errors)")
    return 0


def cmd_evaluate(args) -> int:
    from . import evaluation
    from .pipeline import estimate_dir, read_report

    pred = read_report(_require(args.pred, "prediction report"))
    truth_path = _require(args.truth, "truth")
    if truth_path.name == "manifest.csv" or truth_path.is_dir():
        root = truth_path if truth_path.is_dir() else truth_path.parent
        truth = {e.study_id: e.row() for e in estimate_dir(root, oracle=True)}
        truth = {k: {m: float(v[m]) if v[m] else float("nan") for m in evaluation.MEASURES}
                 for k, v in truth.items()}
        truth_root = root
    else:
        truth = read_report(truth_path)
        truth_root = None
    errors = evaluation.biometric_errors(pred, truth)
    seg = comparison = None
    scores = None
    if args.pred_masks:
        if truth_root is None:
            raise ConfigError("--pred-masks needs --truth pointing at a dataset manifest")
        scores = evaluation.segmentation_scores(_require(args.pred_masks, "mask dir"), truth_root)
        seg = evaluation.summarize_segmentation(scores)
    if args.compare:
        other = read_report(_require(args.compare, "comparison report"))
        comparison = evaluation.compare_reports(pred, other, truth)
        if args.compare_masks and scores is not None:
            other_scores = evaluation.segmentation_scores(
                _require(args.compare_masks, "comparison mask dir"), truth_root)
            comparison.update(evaluation.compare_segmentation(scores, other_scores))
    out = evaluation.write_evaluation(args.out, errors, seg, comparison)
    print((out / "report.txt").read_text())
    return 0


# -------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ageus", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="flat key = value file; flags override it")
        sp.set_defaults(func=fn)
        return sp

    s = add("synth", cmd_synth, "generate a synthetic phantom dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--image-size", type=int, default=256)

    t = add("train", cmd_train, "pre-train / fine-tune the shared U-Net or train the femur model")
    t.add_argument("--mode", choices=("pretrain", "finetune", "femur"), required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--ckpt-in")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--image-size", type=int, default=256)
    t.add_argument("--base-width", type=int, default=32)
    t.add_argument("--batch-size", type=int, default=10)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--val-every", type=int, default=2)
    t.add_argument("--checkpoint-every", type=int, default=50)
    t.add_argument("--split-file", help="JSON split (train_ids/val_ids/test_ids) to reuse")
    t.add_argument("--resume", help="periodic checkpoint (last.pt) to resume from")

    e = add("estimate", cmd_estimate, "estimate HC/BPD/AC/FL and GA per study")
    e.add_argument("--study", required=True, help="dataset root or a single study directory")
    e.add_argument("--seg-ckpt")
    e.add_argument("--femur-ckpt")
    e.add_argument("--out", required=True)
    e.add_argument("--oracle", action="store_true",
                   help="measure ground-truth masks/annotations instead of running the networks")
    e.add_argument("--mask-dir", help="also write predicted masks here")
    e.add_argument("--image-size", type=int, help="model input size (default: from checkpoint)")
    e.add_argument("--sigma", type=float, default=2.0)
    e.add_argument("--percentile", type=float, default=10.0)
    e.add_argument("--split-file")
    e.add_argument("--subset", choices=("train", "val", "test"), default="test")

    v = add("evaluate", cmd_evaluate, "compare a prediction report with ground truth")
    v.add_argument("--pred", required=True)
    v.add_argument("--truth", required=True, help="dataset manifest.csv or a truth report CSV")
    v.add_argument("--out", required=True)
    v.add_argument("--pred-masks")
    v.add_argument("--compare", help="second prediction report for a paired Wilcoxon test")
    v.add_argument("--compare-masks")
    return p


def _subparsers(parser) -> dict:
    for action in parser._subparsers._group_actions:
        return dict(action.choices)
    return {}


def parse_args(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    config = pre.parse_known_args(argv)[0].config
    subs = _subparsers(parser)
    command = next((a for a in argv if a in subs), None)
    if config and command:
        sp = subs[command]
        known = {a.dest: a for a in sp._actions}
        values = {}
        for k, v in read_config(config).items():
            if k not in known or k in ("help", "config"):
                raise ConfigError(f"{config}: unknown key {k!r}")
            act = known[k]
            if isinstance(act, argparse._StoreTrueAction):
                values[k] = v.lower() in ("1", "true", "yes", "on")
            else:
                values[k] = act.type(v) if act.type else v
        for act in sp._actions:
            if act.dest in values:
                act.required = False
        sp.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
        return args.func(args)
    except ConfigError as exc:
        print(f"ageus: configuration error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"ageus: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``dualseg <subcommand> ...``.

Failures print exactly one line, ``dualseg: error[<kind>]: <message>``, to
stderr and exit nonzero (2 for usage errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import imaging, metrics, synthdata
from .imaging import CropRecord
from .model import CheckpointError, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .pipeline import (
    PipelineConfig,
    RoiBox,
    SlicePrediction,
    case_scores,
    crop_target,
    make_multi_input,
    reassemble,
    run_pipeline,
    stage1_infer_batch,
    stage1_input,
    stage2_infer,
    write_predictions,
)
from .training import TrainConfig, TrainingError, fit

logger = logging.getLogger("dualseg")

CONFIG_KEYS = {"seed", "threads", "pipeline", "train", "stage1_train", "stage2_train"}
PREPROCESSED = "preprocessed.json"
ROIS = "rois.json"


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, 2)


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------

def load_config(path: Optional[str]) -> Dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError("missing-input", f"config file not found: {path}")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError("invalid-config", f"config is not valid JSON: {exc.msg} at line {exc.lineno}") from None
    if not isinstance(obj, dict):
        raise CliError("invalid-config", "config must be a JSON object")
    unknown = set(obj) - CONFIG_KEYS
    if unknown:
        raise CliError("invalid-config", f"unknown config keys: {sorted(unknown)}")
    return obj


def _pipeline_config(conf: Dict) -> PipelineConfig:
    try:
        return PipelineConfig.from_dict(conf.get("pipeline", {}))
    except (TypeError, ValueError) as exc:
        raise CliError("invalid-config", str(exc)) from None


def _train_config(conf: Dict, stage: int, seed: int) -> TrainConfig:
    merged = {**conf.get("train", {}), **conf.get(f"stage{stage}_train", {}), "seed": seed}
    try:
        return TrainConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise CliError("invalid-config", str(exc)) from None


def _stage_model(cfg: PipelineConfig, stage: int, seed: int = 0):
    if stage == 1:
        mcfg = ModelConfig(in_channels=3, input_size=(cfg.stage1_size,) * 2, use_mm_block=False)
    else:
        mcfg = ModelConfig(in_channels=3, input_size=(cfg.stage2_size,) * 2, use_mm_block=cfg.use_mm_block)
    return build_model(mcfg, seed)


def _load_stage(path: str, cfg: PipelineConfig, stage: int):
    model = _stage_model(cfg, stage)
    try:
        load_checkpoint(path, model)
    except CheckpointError as exc:
        raise CliError("incompatible-checkpoint", f"stage-{stage} checkpoint {path}: {exc}") from None
    return model


def _need_file(path: Optional[str], flag: str) -> Path:
    if path is None:
        raise CliError("usage", f"{flag} is required", 2)
    p = Path(path)
    if not p.exists():
        raise CliError("missing-input", f"{flag} path not found: {path}")
    return p


def _need_out(path: Optional[str]) -> Path:
    if path is None:
        raise CliError("usage", "--out is required", 2)
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# preprocessed frame sets
# --------------------------------------------------------------------------

def _read_preprocessed(data: Path) -> List[Dict]:
    path = data / PREPROCESSED if data.is_dir() else data
    if not path.is_file():
        raise CliError("missing-input", f"no {PREPROCESSED} under {data}; run preprocess first")
    obj = json.loads(path.read_text())
    root = path.parent
    entries = obj["entries"]
    for e in entries:
        e["image_array"] = imaging.png_read(root / e["image"])
        e["mask_array"] = (imaging.png_read(root / e["mask"]) > 0).astype(np.uint8) if e.get("mask") else None
        e["record"] = CropRecord.from_json(e["crop"], obj["crop_size"])
    return entries


def _read_rois(path: Path, entries: Sequence[Dict]) -> List[RoiBox]:
    obj = json.loads(path.read_text())
    table = {(r["case"], r["slice"]): RoiBox(*r["roi"], r["roi_source"]) for r in obj["entries"]}
    try:
        return [table[(e["case"], e["slice"])] for e in entries]
    except KeyError as exc:
        raise CliError("missing-input", f"ROI manifest has no entry for {exc.args[0]}") from None


def _roi_entries(entries, rois) -> Dict:
    return {"entries": [{"case": e["case"], "slice": e["slice"], "roi": r.as_list(), "roi_source": r.source}
                        for e, r in zip(entries, rois)]}


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_gen_data(args, conf):
    out = _need_out(args.out)
    manifest = synthdata.gen_corpus(args.n, args.seed, out, tuple(args.dims))
    print(manifest)


def cmd_preprocess(args, conf):
    data = _need_file(args.data, "--data")
    out = _need_out(args.out)
    cfg = _pipeline_config(conf)
    from .pipeline import prepare_case

    (out / "frames").mkdir(exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    entries = []
    for case in synthdata.load_manifest(data)["cases"]:
        vol, masks = imaging.read_nifti(case["volume_path"], case.get("mask_path"))
        for z, img, rec, _, gt376 in prepare_case(vol, masks, cfg):
            stem = f"{case['id']}_{z:04d}.png"
            imaging.png_write(out / "frames" / stem, img)
            entry = {"case": case["id"], "slice": z, "image": f"frames/{stem}", "crop": rec.to_json(),
                     "orig_dims": list(vol.voxels.shape[1:]), "mask": None}
            if gt376 is not None:
                imaging.png_write(out / "masks" / stem, gt376.astype(np.uint8) * 255)
                entry["mask"] = f"masks/{stem}"
            entries.append(entry)
    _write_json(out / PREPROCESSED, {"crop_size": cfg.crop_size, "entries": entries})
    print(out / PREPROCESSED)


def cmd_train(args, conf):
    data = _need_file(args.data, "--data")
    if args.stage == 2 and args.stage1_roi is None:
        raise CliError("usage", "stage-2 requires ROI manifest (--stage1-roi)", 2)
    roi_path = _need_file(args.stage1_roi, "--stage1-roi") if args.stage == 2 else None
    out = _need_out(args.out)
    cfg = _pipeline_config(conf)
    tcfg = _train_config(conf, args.stage, args.seed)
    entries = [e for e in _read_preprocessed(data) if e["mask_array"] is not None]
    if not entries:
        raise CliError("missing-input", "no labelled frames to train on")
    if args.stage == 1:
        s = cfg.stage1_size
        x = np.stack([stage1_input(e["image_array"], s) for e in entries])
        y = np.stack([imaging.resize_nearest(e["mask_array"], s, s) for e in entries])
    else:
        rois = _read_rois(roi_path, entries)
        s = cfg.stage2_size
        x = np.stack([make_multi_input(e["image_array"], r, cfg) for e, r in zip(entries, rois)])
        y = np.stack([crop_target(e["mask_array"], r, s) for e, r in zip(entries, rois)])
    model = _stage_model(cfg, args.stage, args.seed)
    ckpt = out / f"stage{args.stage}.ckpt"
    try:
        hist = fit(model, x, y[:, None].astype(np.float32), tcfg, ckpt)
    except TrainingError as exc:
        raise CliError("training-failed", str(exc)) from None
    save_checkpoint(model, ckpt)
    hist.write(out / f"history_stage{args.stage}.jsonl")
    print(json.dumps({"checkpoint": str(ckpt), "best_epoch": hist.best_epoch, "best_loss": hist.best_loss,
                      "stop_reason": hist.stop_reason}, sort_keys=True))


def _stage1_rois(args, conf, cfg, entries, flag_value):
    ckpt = _need_file(flag_value, "--stage1-ckpt" if args.command == "extract-roi" else "--ckpt")
    model = _load_stage(str(ckpt), cfg, 1)
    return stage1_infer_batch(model, [e["image_array"] for e in entries], cfg)


def cmd_extract_roi(args, conf):
    data = _need_file(args.data, "--data")
    out = _need_out(args.out)
    cfg = _pipeline_config(conf)
    entries = _read_preprocessed(data)
    outs = _stage1_rois(args, conf, cfg, entries, args.stage1_ckpt or args.ckpt)
    _write_json(out / ROIS, _roi_entries(entries, [o.roi for o in outs]))
    print(out / ROIS)


def cmd_infer(args, conf):
    data = _need_file(args.data, "--data")
    cfg = _pipeline_config(conf)
    if args.stage == 2 and args.stage1_roi is None:
        raise CliError("usage", "stage-2 requires ROI manifest (--stage1-roi)", 2)
    out = _need_out(args.out)
    entries = _read_preprocessed(data)
    if args.stage == 1:
        outs = _stage1_rois(args, conf, cfg, entries, args.ckpt or args.stage1_ckpt)
        for e, o in zip(entries, outs):
            imaging.png_write(out / f"{e['case']}_{e['slice']:04d}.png", o.mask * 255)
        _write_json(out / ROIS, _roi_entries(entries, [o.roi for o in outs]))
        print(out / ROIS)
        return
    rois = _read_rois(_need_file(args.stage1_roi, "--stage1-roi"), entries)
    model = _load_stage(str(_need_file(args.ckpt or args.stage2_ckpt, "--ckpt")), cfg, 2)
    preds = []
    for e, roi in zip(entries, rois):
        out2 = stage2_infer(model, make_multi_input(e["image_array"], roi, cfg), cfg.threshold)
        full = reassemble(out2.mask, roi, e["record"], tuple(e["orig_dims"]))
        preds.append(SlicePrediction(e["case"], e["slice"], full, roi, e["record"]))
    print(write_predictions(preds, out))


def _run_cases(args, conf):
    data = _need_file(args.data, "--data")
    cfg = _pipeline_config(conf)
    s1 = _load_stage(str(_need_file(args.stage1_ckpt, "--stage1-ckpt")), cfg, 1)
    s2 = _load_stage(str(_need_file(args.stage2_ckpt, "--stage2-ckpt")), cfg, 2)
    preds, gts = [], {}
    for case in synthdata.load_manifest(data)["cases"]:
        vol, masks = imaging.read_nifti(case["volume_path"], case.get("mask_path"))
        p, _ = run_pipeline(vol, masks, s1, s2, cfg, case["id"])
        preds += p
        if masks is not None:
            gts.update({(case["id"], q.slice): masks[q.slice] for q in p})
    return preds, gts


def _report(preds, gts) -> Optional[Dict]:
    scored = [p for p in preds if p.scores is not None]
    if not scored:
        return None
    return {
        "per_slice": metrics.aggregate([p.scores for p in scored]),
        "per_case": metrics.aggregate(case_scores(scored, gts)),
        "failed_slices": sum(p.error is not None for p in preds),
    }


def cmd_pipeline(args, conf):
    out = _need_out(args.out)
    preds, gts = _run_cases(args, conf)
    path = write_predictions(preds, out)
    report = _report(preds, gts)
    if report is not None:
        _write_json(out / "report.json", report)
    print(path)


def cmd_evaluate(args, conf):
    data = _need_file(args.data, "--data")
    pred_dir = _need_file(args.pred, "--pred")
    manifest = json.loads((pred_dir / "predictions.json").read_text())
    cases = {c["id"]: c for c in synthdata.load_manifest(data)["cases"]}
    vols: Dict[str, np.ndarray] = {}
    preds, gts = [], {}
    for e in manifest:
        case = cases.get(e["case"])
        if case is None:
            raise CliError("missing-input", f"case {e['case']} not in corpus manifest")
        if e["case"] not in vols:
            _, masks = imaging.read_nifti(case["volume_path"], case["mask_path"])
            vols[e["case"]] = masks
        gt = vols[e["case"]][e["slice"]]
        mask = (imaging.png_read(pred_dir / f"{e['case']}_{e['slice']:04d}.png") > 0).astype(np.uint8)
        p = SlicePrediction(e["case"], e["slice"], mask, None, None, metrics.score(mask, gt))
        preds.append(p)
        gts[(e["case"], e["slice"])] = gt
    report = _report(preds, gts)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text, end="")


def cmd_cross_validate(args, conf):
    from .crossval import DEFAULT_VARIANTS, FULL, cross_validate

    data = _need_file(args.data, "--data")
    cfg = _pipeline_config(conf)
    variants = DEFAULT_VARIANTS if args.ablations else (FULL,)
    report = cross_validate(data, args.folds, args.seed, cfg, _train_config(conf, 1, args.seed),
                            _train_config(conf, 2, args.seed), variants)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    print(text, end="")


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = argparse.ArgumentParser(add_help=False, formatter_class=fmt)
    common.add_argument("--config", default=None, help="JSON config file (keys: %s)" % ", ".join(sorted(CONFIG_KEYS)))
    common.add_argument("--seed", type=int, default=0, help="seed for every random stream")
    common.add_argument("--threads", type=int, default=1, help="cap on BLAS worker threads")
    common.add_argument("--data", default=None, help="input corpus manifest or preprocessed directory")
    common.add_argument("--out", default=None, help="output directory (or report file)")
    common.add_argument("-v", "--verbose", action="store_true", default=False, help="log progress to stderr")

    parser = _Parser(prog="dualseg", description="Dual-stage CT segmentation pipeline.", formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", parents=[common], formatter_class=fmt, help="write a synthetic phantom corpus")
    p.add_argument("--n", type=int, default=40, help="number of cases")
    p.add_argument("--dims", type=int, nargs=3, default=[6, 128, 128], metavar=("D", "H", "W"), help="volume dims")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("preprocess", parents=[common], formatter_class=fmt,
                       help="window, resample and crop every retained slice to PNG frames")
    p.set_defaults(func=cmd_preprocess)

    for name, func, text in (("train", cmd_train, "train one stage"), ("infer", cmd_infer, "run one stage")):
        p = sub.add_parser(name, parents=[common], formatter_class=fmt, help=text)
        p.add_argument("--stage", type=int, choices=(1, 2), required=True, help="network stage")
        p.add_argument("--stage1-roi", default=None, help="ROI manifest from extract-roi (stage 2)")
        if name == "infer":
            p.add_argument("--ckpt", default=None, help="checkpoint of the selected stage")
            p.add_argument("--stage1-ckpt", default=None, help="alias of --ckpt for stage 1")
            p.add_argument("--stage2-ckpt", default=None, help="alias of --ckpt for stage 2")
        p.set_defaults(func=func)

    p = sub.add_parser("extract-roi", parents=[common], formatter_class=fmt, help="stage-1 ROI boxes for preprocessed frames")
    p.add_argument("--stage1-ckpt", default=None, help="stage-1 checkpoint")
    p.add_argument("--ckpt", default=None, help="alias of --stage1-ckpt")
    p.set_defaults(func=cmd_extract_roi)

    p = sub.add_parser("pipeline", parents=[common], formatter_class=fmt, help="both stages over a corpus")
    p.add_argument("--stage1-ckpt", default=None, help="stage-1 checkpoint")
    p.add_argument("--stage2-ckpt", default=None, help="stage-2 checkpoint")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("evaluate", parents=[common], formatter_class=fmt, help="score a predictions directory")
    p.add_argument("--pred", default=None, help="directory holding predictions.json and mask PNGs")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("cross-validate", parents=[common], formatter_class=fmt, help="patient-level k-fold CV")
    p.add_argument("--folds", type=int, default=4, help="number of folds")
    p.add_argument("--ablations", action="store_true", default=False,
                   help="also run the no-MM-block and no-wavelet variants")
    p.set_defaults(func=cmd_cross_validate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        conf = load_config(args.config)
        if args.config:
            # flags given explicitly on the command line win over the file
            given = {a.split("=", 1)[0] for a in (argv if argv is not None else sys.argv[1:])}
            if "--seed" not in given and "seed" in conf:
                args.seed = int(conf["seed"])
            if "--threads" not in given and "threads" in conf:
                args.threads = int(conf["threads"])
        if args.threads < 1:
            raise CliError("usage", "--threads must be >= 1", 2)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            args.func(args, conf)
    except CliError as exc:
        print(f"dualseg: error[{exc.kind}]: {exc}", file=sys.stderr)
        return exc.code
    except (FileNotFoundError, imaging.NiftiError, imaging.PngError) as exc:
        print(f"dualseg: error[missing-input]: {exc}".replace("\n", " "), file=sys.stderr)
        return 1
    except (ValueError, KeyError) as exc:
        print(f"dualseg: error[invalid-input]: {exc}".replace("\n", " "), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

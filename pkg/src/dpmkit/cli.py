"""Command-line entry points.

Exit codes: 0 success, 2 I/O or invalid input, 3 staging error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import Config, load_config
from .data import SyntheticSpec, composite_images, generate_synthetic, load_manifest, load_split, to_uint8
from .errors import ConfigError, NumericError, StagingError, ValidationError
from .evaluator import embed, evaluate, head_correlation, masked_features, write_matrix_csv
from .spt import SaliencyMask, max_rolled_oiou, oiou, select_candidates
from .trainer import STAGES, build_model, check_prerequisites, default_plan, load_checkpoint, run_stage

EXIT_OK, EXIT_IO, EXIT_STAGING, EXIT_NUMERIC = 0, 2, 3, 4

logger = logging.getLogger("dpmkit")


def _manifest(config: Config):
    if not config.data.manifest:
        raise ConfigError("data.manifest is not set")
    return load_manifest(config.data.manifest, config.data.root or None)


def _split(config: Config, name: str):
    bc = config.backbone
    return load_split(_manifest(config), name, size=(bc.image_height, bc.image_width))


def cmd_gen_data(args) -> int:
    spec = SyntheticSpec.from_json(args.spec)
    generate_synthetic(spec, args.out)
    print(Path(args.out) / "manifest.jsonl")
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_config(args.config)
    data = _split(config, "train")
    num_ids = len(np.unique(data.identities))
    if args.resume:
        model = load_checkpoint(args.resume, config)
        if model.num_identities != num_ids:
            raise StagingError(f"checkpoint has {model.num_identities} identities, training split has {num_ids}")
    else:
        model = build_model(config, num_ids)
    plan = default_plan(args.stage, config)
    check_prerequisites(args.stage, model, config)
    out = Path(config.train.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, log = out / f"{args.stage}.ckpt", out / f"{args.stage}_metrics.jsonl"
    log.unlink(missing_ok=True)
    run_stage(plan, model, data, config, log, ckpt)
    print(ckpt)
    return EXIT_OK


def cmd_eval(args) -> int:
    config = load_config(args.config)
    query, gallery = _split(config, "query"), _split(config, "gallery")
    model = load_checkpoint(args.ckpt, config)
    bs = config.eval.batch_size
    if args.debug_oracle_features:
        ids = np.unique(np.concatenate([query.identities, gallery.identities]))
        qf = (query.identities[:, None] == ids[None]).astype(np.float64)
        gf = (gallery.identities[:, None] == ids[None]).astype(np.float64)
    elif config.eval.masked_distance:
        qf, gf = masked_features(model, query.images, query.cameras, bs), masked_features(
            model, gallery.images, gallery.cameras, bs)
    else:
        qf, gf = embed(model, query.images, query.cameras, bs), embed(model, gallery.images, gallery.cameras, bs)
    report = evaluate(qf, gf, query.identities, gallery.identities, query.cameras, gallery.cameras,
                      config.eval.max_rank, config.eval.metric)
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    report.write(path)
    write_matrix_csv(head_correlation(model, query.images, query.cameras, bs), path.with_suffix(".heads.csv"))
    print(f"mAP {report.map:.4f}  R1 {report.rank(1):.4f}")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    if args.count < 0:
        raise ConfigError("--count must be non-negative")
    config = load_config(args.config)
    model = load_checkpoint(args.ckpt, config)
    if "sps" not in model.stages_completed:
        raise StagingError("synthesis needs a checkpoint that completed stage 'sps'")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sidecar = out / "synthesized.jsonl"
    rows = []
    if args.count > 0:
        data = _split(config, "train")
        soft = torch.cat([model.saliency(data.images[i:i + 64], data.cameras[i:i + 64])
                          for i in range(0, len(data), 64)]).double().numpy()
        bc = config.backbone
        masks = [SaliencyMask(s, bc.grid_shape, config.spt.binarize_threshold) for s in soft]
        pairs = select_candidates(masks, data.identities.tolist(), config.spt)[:args.count]
        if len(pairs) < args.count:
            logger.warning("only %d eligible pairs for %d requested samples", len(pairs), args.count)
        pixels = to_uint8(data.images)
        for n, (i, j, _) in enumerate(pairs):
            _, shift = max_rolled_oiou(masks[i], masks[j], config.spt.roll_stride)
            img = composite_images(pixels[i], pixels[j], masks[j].binary, bc.grid_shape,
                                   bc.patch_size, bc.patch_stride)
            name = f"synth_{n:05d}.png"
            Image.fromarray(img).save(out / name, format="PNG")
            rows.append({"file": name, "target_id": int(data.identities[i]),
                         "candidate_id": int(data.identities[j]), "oiou": oiou(masks[i], masks[j]),
                         "shift": int(shift), "target_mask": masks[i].binary.astype(int).tolist(),
                         "candidate_mask": masks[j].binary.astype(int).tolist()})
    sidecar.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")
    print(sidecar)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpmkit", description="Occluded person re-identification toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic occluded dataset")
    p.add_argument("--spec", required=True, help="JSON file with SyntheticSpec fields")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", required=True, choices=STAGES)
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval evaluation on query/gallery")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--report", required=True, help="JSON report path; CSVs are written alongside")
    p.add_argument("--debug-oracle-features", action="store_true",
                   help="replace embeddings with one-hot identity features")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synthesize", help="emit composited occlusion samples")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", required=True, type=int)
    p.set_defaults(func=cmd_synthesize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StagingError as exc:
        print(f"staging error: {exc}", file=sys.stderr)
        return EXIT_STAGING
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValidationError, ConfigError, json.JSONDecodeError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

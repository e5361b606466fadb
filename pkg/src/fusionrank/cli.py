"""Command-line surface.

Subcommands: synth, train, score, rerank, eval, gradcheck, ensemble,
serve. Every run echoes its fully resolved configuration to stderr; all
randomness flows from --seed. Failures print one machine-parsable line
``error kind=<kind>: <message>`` on stderr and exit with a kind-specific
code (see EXIT_CODES).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import dataio, evaluation, reranking
from .errors import (
    ConfigError,
    DataFormatError,
    ShapeMismatchError,
    TrainingDivergedError,
)
from .matrix import SeededRng
from .model import ModelConfig, init_params
from .training import TrainConfig, grad_check, train

EXIT_CODES = {
    "missing-file": 3,
    "data-format": 4,
    "shape-mismatch": 5,
    "invalid-config": 6,
    "training-diverged": 7,
}


def _echo_config(args: argparse.Namespace) -> None:
    cfg = {k: (str(v) if isinstance(v, Path) else v)
           for k, v in sorted(vars(args).items()) if k != "func"}
    print(f"config {json.dumps(cfg, sort_keys=True)}", file=sys.stderr)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)


def _parse_dims(spec: str) -> ModelConfig:
    # DIMS[:DIMS_TT] for the projection/fusion dims; raw dims come from data
    parts = spec.split(":")
    try:
        d = int(parts[0])
        d_tt = int(parts[1]) if len(parts) > 1 else None
    except (ValueError, IndexError):
        raise ConfigError(f"--dims expects D or D:D_TT, got {spec!r}") from None
    return ModelConfig(d_img=d, d_txt=d, d_fused=d, d_fused_tt=d_tt)


def cmd_synth(args) -> int:
    spec = dataio.SyntheticSpec(
        n_images=args.images,
        captions_per_image=args.captions_per_image,
        d_img=args.d_img,
        d_txt=args.d_txt,
        n_clusters=args.clusters,
        noise_sigma=args.noise,
        seed=args.seed,
    )
    ds = dataio.gen_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataio.write_matrix(out / "images.cmf", ds.images)
    dataio.write_matrix(out / "texts.cmf", ds.texts)
    dataio.write_group_map(out / "groups.txt", ds.groups)
    dataio.write_manifest(out / "manifest.json", dataio.DatasetManifest(
        image_features="images.cmf",
        text_features="texts.cmf",
        group_map="groups.txt",
    ))
    print(f"wrote {ds.n_images} images x {ds.n_texts} texts to {out}")
    return 0


def cmd_train(args) -> int:
    ds = dataio.load_dataset(args.manifest, split=args.split)
    cfg = TrainConfig(
        batch_size=args.batch,
        epochs=args.epochs,
        lr0=args.lr,
        margin=args.margin,
        seed=args.seed,
        branch=args.branch,
        track_recall=not args.no_recall,
    )
    mc = _parse_dims(args.dims)
    mc = ModelConfig(
        d_raw_img=ds.images.shape[1], d_raw_txt=ds.texts.shape[1],
        d_img=mc.d_img, d_txt=mc.d_txt, d_fused=mc.d_fused,
        d_fused_tt=mc.d_fused_tt, rank=args.rank,
    )
    params = dataio.load_checkpoint(args.init_from) if args.init_from else None
    result = train(ds, cfg, model_cfg=mc, params=params)
    dataio.save_checkpoint(args.checkpoint, result.params)
    log_lines = [json.dumps(asdict(rec), sort_keys=True) for rec in result.log]
    if args.log:
        Path(args.log).write_text("".join(ln + "\n" for ln in log_lines))
    for ln in log_lines:
        print(ln)
    print(f"checkpoint written to {args.checkpoint}", file=sys.stderr)
    return 0


def cmd_score(args) -> int:
    from .model import score_matrix

    params = dataio.load_checkpoint(args.checkpoint)
    ds = dataio.load_dataset(args.manifest, split=args.split)
    s_it = score_matrix(params.image_text, ds.images, ds.texts,
                        workers=args.workers)
    dataio.write_matrix(args.out_it, s_it)
    print(f"wrote image-text scores {s_it.shape} to {args.out_it}")
    if args.out_tt:
        s_tt = score_matrix(params.text_text, ds.texts, ds.texts,
                            workers=args.workers)
        dataio.write_matrix(args.out_tt, s_tt)
        print(f"wrote text-text scores {s_tt.shape} to {args.out_tt}")
    return 0


def cmd_rerank(args) -> int:
    s_it = dataio.read_matrix(args.simmat_it)
    s_tt = dataio.read_matrix(args.simmat_tt) if args.simmat_tt else None
    cfg = reranking.RerankConfig(
        top_k=args.K,
        text_neighbors=args.Kprime,
        fallback_position=args.fallback,
    )
    i2t, t2i = reranking.rerank_all(s_it, s_tt, cfg, workers=args.workers)
    if args.out_i2t:
        dataio.write_rank_lists(args.out_i2t, i2t)
        print(f"wrote {len(i2t)} refined i2t rank lists to {args.out_i2t}")
    if args.out_t2i:
        dataio.write_rank_lists(args.out_t2i, t2i)
        print(f"wrote {len(t2i)} refined t2i rank lists to {args.out_t2i}")
    return 0


def cmd_eval(args) -> int:
    if args.recalls:
        vals = [float(x) for x in args.recalls.split(",")]
        if len(vals) != 6:
            raise ConfigError(
                f"--recalls expects six comma-separated values, got {len(vals)}"
            )
        m = evaluation.RetrievalMetrics(*(v / 100.0 for v in vals))
        print(f"mr={m.mr * 100!r}")
        return 0
    groups = dataio.read_group_map(args.group_map)
    gt = evaluation.GroundTruth.from_group_map(groups)
    if args.simmat_it:
        s_it = dataio.read_matrix(args.simmat_it)
        if args.folds and args.folds > 1:
            per_fold, m = evaluation.metrics_by_fold(s_it, gt, args.folds)
            for f, fm in enumerate(per_fold):
                print(f"fold {f}: mr={fm.mr * 100:.2f}", file=sys.stderr)
        else:
            m = evaluation.metrics_from_sim(s_it, gt)
    elif args.ranks_i2t and args.ranks_t2i:
        if args.folds and args.folds > 1:
            raise ConfigError("--folds needs --simmat-it, not rank lists")
        i2t = dataio.read_rank_lists(args.ranks_i2t)
        t2i = dataio.read_rank_lists(args.ranks_t2i)
        m = evaluation.metrics_from_rank_lists(i2t, t2i, gt)
    else:
        raise ConfigError(
            "eval needs --simmat-it, or both --ranks-i2t and --ranks-t2i, "
            "or --recalls"
        )
    record = evaluation.metrics_record(m)
    print(record)
    print(evaluation.metrics_table(m), file=sys.stderr)
    if args.out:
        Path(args.out).write_text(record + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    rng = SeededRng(args.seed)
    worst = 0.0
    for trial in range(args.trials):
        d = 3 + int(rng.choice(6, 1)[0])
        r = 1 + int(rng.choice(4, 1)[0])
        cfg = ModelConfig(d_raw_img=d, d_raw_txt=d, d_img=d, d_txt=d,
                          d_fused=d, rank=r)
        params = init_params(cfg, rng)
        x = rng.normal((d,))
        y = rng.normal((d,))
        worst = max(worst, grad_check(params.image_text, x, y, h=args.h))
    print(f"max_rel_error={worst!r} trials={args.trials}")
    if worst >= args.tol:
        print(f"error kind=gradcheck-failed: max_rel_error {worst} "
              f"exceeds tol {args.tol}", file=sys.stderr)
        return 1
    return 0


def cmd_ensemble(args) -> int:
    mats = [dataio.read_matrix(p) for p in args.inputs]
    out = evaluation.ensemble_average(mats)
    dataio.write_matrix(args.out, out)
    print(f"wrote mean of {len(mats)} matrices {out.shape} to {args.out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(checkpoint=args.checkpoint)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fusionrank",
        description="Cross-modal retrieval: fusion scoring and re-ranking",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic paired dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--images", type=int, default=32)
    sp.add_argument("--captions-per-image", type=int, default=5)
    sp.add_argument("--d-img", type=int, default=32)
    sp.add_argument("--d-txt", type=int, default=32)
    sp.add_argument("--clusters", type=int, default=None)
    sp.add_argument("--noise", type=float, default=0.05)
    _add_common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train fusion branches")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default=None)
    sp.add_argument("--branch", default="both",
                    choices=("both", "image-text", "text-text"))
    sp.add_argument("--init-from", default=None,
                    help="checkpoint providing starting weights")
    sp.add_argument("--dims", default="16",
                    help="projection/fusion dims, D or D:D_TT")
    sp.add_argument("--rank", type=int, default=4)
    sp.add_argument("--epochs", type=int, default=50)
    sp.add_argument("--batch", type=int, default=128)
    sp.add_argument("--lr", type=float, default=1e-4)
    sp.add_argument("--margin", type=float, default=0.2)
    sp.add_argument("--log", default=None, help="write JSONL epoch log here")
    sp.add_argument("--no-recall", action="store_true",
                    help="skip per-epoch train recall tracking")
    _add_common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("score", help="emit similarity matrices")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", default=None)
    sp.add_argument("--out-it", required=True)
    sp.add_argument("--out-tt", default=None)
    _add_common(sp)
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("rerank", help="re-rank similarity matrices")
    sp.add_argument("--simmat-it", required=True)
    sp.add_argument("--simmat-tt", default=None)
    sp.add_argument("--K", type=int, default=15)
    sp.add_argument("--Kprime", type=int, default=5)
    sp.add_argument("--fallback", type=int, default=None)
    sp.add_argument("--out-i2t", default=None)
    sp.add_argument("--out-t2i", default=None)
    _add_common(sp)
    sp.set_defaults(func=cmd_rerank)

    sp = sub.add_parser("eval", help="compute retrieval metrics")
    sp.add_argument("--simmat-it", default=None)
    sp.add_argument("--ranks-i2t", default=None)
    sp.add_argument("--ranks-t2i", default=None)
    sp.add_argument("--group-map", default=None)
    sp.add_argument("--folds", type=int, default=None)
    sp.add_argument("--recalls", default=None,
                    help="six recall percentages, comma-separated; prints mR")
    sp.add_argument("--out", default=None)
    _add_common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient check")
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--h", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-4)
    _add_common(sp)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("ensemble", help="average similarity matrices")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--out", required=True)
    _add_common(sp)
    sp.set_defaults(func=cmd_ensemble)

    sp = sub.add_parser("serve", help="run the HTTP service")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8000)
    sp.add_argument("--checkpoint", default=None)
    _add_common(sp)
    sp.set_defaults(func=cmd_serve)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _echo_config(args)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error kind=missing-file: {e}", file=sys.stderr)
        return EXIT_CODES["missing-file"]
    except DataFormatError as e:
        print(f"error kind=data-format: {e}", file=sys.stderr)
        return EXIT_CODES["data-format"]
    except ShapeMismatchError as e:
        print(f"error kind=shape-mismatch: {e}", file=sys.stderr)
        return EXIT_CODES["shape-mismatch"]
    except ConfigError as e:
        print(f"error kind=invalid-config: {e}", file=sys.stderr)
        return EXIT_CODES["invalid-config"]
    except TrainingDivergedError as e:
        print(f"error kind=training-diverged: {e}", file=sys.stderr)
        return EXIT_CODES["training-diverged"]


if __name__ == "__main__":
    sys.exit(main())

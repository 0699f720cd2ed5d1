"""Command line entry point: ``sitmlp <subcommand> ...``.

Exit status is 0 on success, 1 when the library reports an error (the message
goes to stderr) and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as skdata
from .engine.serialize import save_tensor
from .engine.tensor import Tensor
from .exceptions import ConfigError, SitMlpError
from .gradsuite import TOLERANCE, run_suite
from .network import ModelConfig, SitMlpModel, count_flops, count_params, flop_table, load_config, param_table
from .stgu import export_attention
from .train import (
    TrainConfig,
    ensemble,
    evaluate,
    fit,
    load_model,
    read_labels,
    write_labels,
    write_scores,
)

MODALITIES = [m.value for m in skdata.ModalityKind]


def labels_path(scores_path) -> Path:
    """Sidecar holding ``sample_id<TAB>label`` next to a score file."""
    p = Path(scores_path)
    return p.with_name(p.stem + ".labels.tsv")


def _weights(text: str) -> list:
    try:
        return [float(w) for w in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# -- subcommands -----------------------------------------------------------------


def cmd_generate(args) -> int:
    result = skdata.synth_generate(
        args.classes, args.per_class, joints=args.joints, frames=args.frames, seed=args.seed,
        out_dir=args.out, persons=args.persons, test_fraction=args.test_fraction, noise=args.noise,
    )
    print(f"wrote {len(result.train)} train / {len(result.test)} test samples to {args.out} "
          f"(nearest-centroid accuracy {result.centroid_accuracy:.3f})")
    return 0


def cmd_train(args) -> int:
    mcfg, train_raw = load_config(args.config)
    for key in ("epochs", "seed", "batch_size"):
        if getattr(args, key) is not None:
            train_raw[key] = getattr(args, key)
    tcfg = TrainConfig.from_dict(train_raw)
    manifest = skdata.DatasetManifest.load(skdata.find_manifest(args.data, "train"))
    if manifest.labels.max() >= mcfg.num_classes:
        raise ConfigError(f"data has label {manifest.labels.max()} but num_classes={mcfg.num_classes}")
    graph = skdata.load_graph(args.data, mcfg.joints)
    model = SitMlpModel(mcfg, graph)
    out = Path(args.out)

    def report(row):
        print(f"epoch {row.epoch:3d}  lr {row.lr:.6f}  loss {row.loss:.5f}  acc {row.acc:.4f}", flush=True)

    result = fit(model, manifest, tcfg, out, args.modality, graph, report)
    print(f"final checkpoint: {result.final_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    model, meta = load_model(args.ckpt)
    modality = args.modality or meta.get("modality", "joint")
    manifest = skdata.DatasetManifest.load(skdata.find_manifest(args.data, args.split))
    graph = skdata.load_graph(args.data, model.config.joints)
    report = evaluate(model, manifest, modality, graph)
    write_scores(args.scores, report.sample_ids, report.scores)
    write_labels(labels_path(args.scores), report.sample_ids, report.labels)
    text = report.to_json()
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(text)
    return 0


def cmd_ensemble(args) -> int:
    if args.labels:
        labels = read_labels(args.labels)
    elif args.data:
        manifest = skdata.DatasetManifest.load(skdata.find_manifest(args.data, args.split))
        labels = {p.stem: y for p, y in manifest.entries}
    else:
        sidecar = labels_path(args.files[0])
        if not sidecar.exists():
            raise ConfigError(f"no labels given and no sidecar {sidecar}; pass --labels or --data")
        labels = read_labels(sidecar)
    report = ensemble(args.files, args.weights, labels)
    text = report.to_json()
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(text)
    return 0


def cmd_inspect(args) -> int:
    if args.config:
        mcfg, _ = load_config(args.config)
    else:
        mcfg = ModelConfig()
    model = SitMlpModel(mcfg)
    shape = (1, mcfg.persons, mcfg.frames, mcfg.joints, mcfg.coord_dim)
    print(f"input [B, M, T, V, D] = {list(shape)}  widths {mcfg.widths}  heads {mcfg.heads}")
    print("\nparameters")
    for name, n in param_table(model, args.depth):
        print(f"  {name:32s} {n:>12,d}")
    print(f"  {'total':32s} {count_params(model):>12,d}")
    print("\nFLOPs per sequence (2 x multiply-accumulates)")
    for name, f in flop_table(model, shape):
        print(f"  {name:32s} {f:>16,d}")
    print(f"  {'total':32s} {count_flops(model, shape):>16,d}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(args.only or None, seed=args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:36s} rel.err {r.error:.2e}  ({r.seconds:.2f}s)")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} cases within {TOLERANCE:g}")
    return 1 if failed else 0


def cmd_export_attn(args) -> int:
    model, meta = load_model(args.ckpt)
    cfg = model.config
    seq = skdata.read_sample(args.sample)
    graph = skdata.default_graph(cfg.joints) if args.graph is None else skdata.SkeletonGraph.load(args.graph)
    x = skdata.preprocess(seq, cfg.frames, graph.root, cfg.persons)
    x = skdata.derive_modality(x, meta.get("modality", "joint"), graph)
    blocks = model.stgu_blocks
    if not 0 <= args.block < len(blocks):
        raise ConfigError(f"block must be in [0, {len(blocks)})")
    blocks[args.block].capture = True
    model(Tensor(x[None].astype(cfg.dtype)))
    attn = export_attention(blocks[args.block]).data  # [M, T, V, C]
    if args.format == "bin":
        save_tensor(args.out, attn)
    else:
        # long format, one row per (person, frame, joint, channel)
        with open(args.out, "w") as fh:
            fh.write("batch,frame,joint,channel,value\n")
            for idx in np.ndindex(attn.shape):
                fh.write(",".join(map(str, idx)) + f",{float(attn[idx])!r}\n")
    print(f"attention {list(attn.shape)} of block {args.block} written to {args.out}")
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sitmlp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic skeleton action dataset")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--joints", type=int, default=25)
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--persons", type=int, default=1)
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.add_argument("--noise", type=float, default=0.01)
    p.set_defaults(run=cmd_generate)

    p = sub.add_parser("train", help="train one modality stream")
    p.add_argument("--config", required=True, help="TOML model config with optional [train] table")
    p.add_argument("--data", required=True, help="directory holding train.tsv")
    p.add_argument("--modality", choices=MODALITIES, default="joint")
    p.add_argument("--out", required=True, help="run directory for log.csv and checkpoints")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(run=cmd_train)

    p = sub.add_parser("eval", help="score a split with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scores", required=True, help="output score CSV")
    p.add_argument("--split", default="test")
    p.add_argument("--modality", choices=MODALITIES, help="defaults to the checkpoint's modality")
    p.add_argument("--report", help="also write the report JSON here")
    p.set_defaults(run=cmd_eval)

    p = sub.add_parser("ensemble", help="fuse score files by weighted averaging")
    p.add_argument("files", nargs="+")
    p.add_argument("--weights", type=_weights, help="comma-separated, one per file (default uniform)")
    p.add_argument("--labels", help="sample_id<TAB>label file (default: first file's sidecar)")
    p.add_argument("--data", help="read labels from this dataset's manifest instead")
    p.add_argument("--split", default="test")
    p.add_argument("--report", help="also write the report JSON here")
    p.set_defaults(run=cmd_ensemble)

    p = sub.add_parser("inspect", help="print parameter and FLOP tables")
    p.add_argument("--config", help="TOML model config (default: built-in defaults)")
    p.add_argument("--depth", type=int, default=2, help="module path depth of the parameter table")
    p.set_defaults(run=cmd_inspect)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--only", nargs="*", help="case names to run")
    p.set_defaults(run=cmd_gradcheck)

    p = sub.add_parser("export-attn", help="dump one block's attention map for a sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", required=True, help="binary sample file")
    p.add_argument("--out", required=True)
    p.add_argument("--block", type=int, default=0)
    p.add_argument("--graph", help="graph.txt of the sample's dataset")
    p.add_argument("--format", choices=("csv", "bin"), default="csv")
    p.set_defaults(run=cmd_export_attn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.run(args)
    except (SitMlpError, OSError) as err:
        print(f"sitmlp {args.command}: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

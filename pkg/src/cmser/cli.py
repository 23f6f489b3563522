"""Command-line entry point: ``cmser <subcommand>``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as rc
from .data import (EMOTIONS, MSP_CLASS_NAMES, MSP_PROPORTIONS, allocate_counts, class_histogram,
                   load_dataset, read_manifest, synthesize_dataset)
from .errors import CmserError
from .metrics import evaluate
from .model import CrossModalModel, ModelConfig, count_params, load_model, save_model
from .numerics import set_matmul_kernel
from .stacking import (TreeParams, align_logits, fit_stacker, load_stacker, predict_stacker, read_logits,
                       save_stacker, write_logits)
from .training import DESIGN_WCE, DESIGNS, TrainConfig, predict_logits, train

log = logging.getLogger("cmser")

DEFAULT_MODALITY_NAMES = ("speech", "text", "paralinguistic")


def parse_modalities(spec: str) -> list[tuple]:
    """Parse ``[name:][FRAMES x]DIM`` entries, e.g. ``2x16,2x8`` or ``speech:4-12x16,text:8``.

    ``FRAMES`` is a fixed count or an inclusive ``lo-hi`` range.
    """
    out = []
    for i, item in enumerate(p for p in spec.split(",") if p):
        name, _, body = item.rpartition(":")
        name = name or (DEFAULT_MODALITY_NAMES[i] if i < 3 else f"mod{i}")
        try:
            if "x" in body:
                frames, dim = body.split("x")
                lo, _, hi = frames.partition("-")
                out.append((name, int(dim), (int(lo), int(hi or lo))))
            else:
                out.append((name, int(body)))
        except ValueError:
            raise rc.ConfigError(f"cannot parse modality entry {item!r}") from None
    if not out:
        raise rc.ConfigError("no modalities given")
    return out


def _frames_range(text: str) -> tuple[int, int]:
    lo, _, hi = text.partition("-")
    return int(lo), int(hi or lo)


# -- gen-synthetic ------------------------------------------------------------

def cmd_gen_synthetic(args) -> int:
    seed = rc.resolve_seed(args.seed)
    if args.imbalance == "msp":
        counts = allocate_counts(args.total, MSP_PROPORTIONS)
        names = list(MSP_CLASS_NAMES)
    elif args.counts:
        counts = [int(c) for c in args.counts.split(",")]
        names = [str(c) for c in range(len(counts))]
    else:
        counts = [args.per_class] * args.classes
        names = [str(c) for c in range(len(counts))]
    modalities = parse_modalities(args.modalities)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = synthesize_dataset(out, counts, modalities, _frames_range(args.frames), args.noise, seed)

    corpus = rc.RunConfig()
    corpus.update("model", modalities=",".join(f"{m[0]}:{m[1]}" for m in modalities), n_classes=len(counts))
    corpus.update("train", neutral_class=0)
    # relative to corpus.ini so the corpus stays byte-identical wherever it is written
    corpus.update("paths", manifest="manifest.tsv")
    rc.write_config(corpus, out / "corpus.ini")

    hist = class_histogram((r.label for r in manifest.rows), len(counts))
    print(f"manifest\t{manifest.path}")
    print(f"samples\t{len(manifest)}")
    for c, (name, n) in enumerate(zip(names, hist)):
        print(f"class\t{c}\t{name}\t{n}\t{n / len(manifest):.4f}")
    return 0


# -- train --------------------------------------------------------------------

def _train_run_config(args) -> rc.RunConfig:
    cfg = rc.load_config(args.config) if args.config else rc.RunConfig()
    cfg.update("model", hidden=args.hidden, classifier_hidden=args.classifier_hidden, n_classes=args.classes)
    cfg.update("train", design=args.design, lr=args.lr, lr_min=args.lr_min, epochs=args.epochs,
               batch_size=args.batch, sml_weight=args.sml_weight, neutral_class=args.neutral_class,
               max_grad_norm=args.max_grad_norm, max_frames=args.max_frames)
    if args.unweighted:
        cfg.set("train", "weighted", False)
    cfg.update("paths", manifest=args.manifest, out=args.out, train_split=args.train_split,
               dev_split=args.dev_split)
    seed = rc.resolve_seed(args.seed, cfg)
    cfg.set("train", "seed", seed)
    if cfg.get("model", "seed") is None:
        cfg.set("model", "seed", seed)
    if cfg.get("train", "design", DESIGN_WCE) == DESIGN_WCE:
        # design 1 trains with class-weighted CE only
        cfg.set("train", "sml_weight", 0.0)
    for key in ("manifest", "out"):
        if cfg.get("paths", key) is None:
            raise rc.ConfigError(f"--{key} is required (flag or [paths] {key})")
    return cfg


def cmd_train(args) -> int:
    cfg = _train_run_config(args)
    n_classes = cfg.get("model", "n_classes", 8)
    manifest = read_manifest(cfg.get("paths", "manifest"), n_classes)
    train_set = load_dataset(manifest, cfg.get("paths", "train_split", "train"))
    dev_set = load_dataset(manifest, cfg.get("paths", "dev_split", "dev"))
    if not len(train_set):
        raise rc.ConfigError("training split is empty")
    dims = train_set.dims()
    if cfg.get("model", "modalities"):
        declared = [(n, int(d)) for n, d in (m.split(":") for m in cfg.get("model", "modalities").split(","))]
        if declared != dims:
            raise rc.ConfigError(f"configured modalities {declared} do not match manifest features {dims}")
    cfg.set("model", "modalities", ",".join(f"{n}:{d}" for n, d in dims))

    mcfg = ModelConfig(dims, hidden=cfg.get("model", "hidden", 512), n_classes=n_classes,
                       classifier_hidden=cfg.get("model", "classifier_hidden"), seed=cfg.get("model", "seed"))
    tcfg = TrainConfig(design=cfg.get("train", "design", DESIGN_WCE), lr=cfg.get("train", "lr", 1e-4),
                       lr_min=cfg.get("train", "lr_min", 0.0), epochs=cfg.get("train", "epochs", 25),
                       batch_size=cfg.get("train", "batch_size", 64),
                       sml_weight=cfg.get("train", "sml_weight", 1.0),
                       weighted=cfg.get("train", "weighted", True),
                       neutral_class=cfg.get("train", "neutral_class", EMOTIONS.index("Neutral")),
                       max_grad_norm=cfg.get("train", "max_grad_norm"),
                       max_frames=cfg.get("train", "max_frames"), seed=cfg.get("train", "seed"))
    cfg.update("model", hidden=mcfg.hidden, classifier_hidden=mcfg.classifier_hidden)
    cfg.update("train", **{k: getattr(tcfg, k) for k in rc.SCHEMA["train"]})
    cfg.update("paths", manifest=str(Path(cfg.get("paths", "manifest")).resolve()),
               out=str(Path(cfg.get("paths", "out")).resolve()),
               train_split=cfg.get("paths", "train_split", "train"),
               dev_split=cfg.get("paths", "dev_split", "dev"))
    out = Path(cfg.get("paths", "out"))
    out.mkdir(parents=True, exist_ok=True)
    rc.write_config(cfg, out / "resolved_config.ini")

    model = CrossModalModel(mcfg)
    log.info("model with %d parameters, fused width %d", count_params(model), mcfg.fused_dim)
    result = train(model, train_set, tcfg, dev_set if len(dev_set) else None)
    save_model(result.model, out / "model.cmser")
    save_model(result.best_model, out / "model.best.cmser")
    (out / "train_log.tsv").write_text(result.log_tsv(), encoding="utf-8")
    if args.figures:
        from .plotting import plot_training_curves
        plot_training_curves(result.history, out / "figures" / "training_curves.png")
    print(f"model\t{out / 'model.cmser'}\tlast epoch {tcfg.epochs} (used for predict)")
    print(f"best\t{out / 'model.best.cmser'}\tbest-dev epoch {result.best_epoch}")
    print(f"log\t{out / 'train_log.tsv'}")
    return 0


# -- predict ------------------------------------------------------------------

def cmd_predict(args) -> int:
    model = load_model(args.model)
    manifest = read_manifest(args.manifest, model.config.n_classes)
    dataset = load_dataset(manifest, args.split)
    dims = dataset.dims() if len(dataset) else model.config.modalities
    if dims != model.config.modalities:
        raise rc.ConfigError(f"model expects modalities {model.config.modalities}, manifest provides {dims}")
    logits = predict_logits(model, dataset, max_frames=args.max_frames)
    write_logits(args.out, dataset.ids, logits)
    print(f"logits\t{args.out}\t{len(dataset)} rows")
    return 0


# -- stack --------------------------------------------------------------------

def _aligned_inputs(logit_paths, manifest_path, split):
    tables = [read_logits(p) for p in logit_paths]
    ids, blocks = align_logits(tables, [str(p) for p in logit_paths])
    n_classes = blocks[0].shape[1]
    if any(b.shape[1] != n_classes for b in blocks):
        raise rc.ConfigError("logit files disagree on class count")
    manifest = read_manifest(manifest_path, n_classes, check_files=False)
    known = {row.sample_id for row in manifest.rows}
    missing = [i for i in ids if i not in known]
    if missing:
        raise rc.ConfigError(f"{len(missing)} logit ids not in the manifest (e.g. {missing[0]!r})")
    label_of = {row.sample_id: row.label for row in manifest.select(split).rows}
    keep = np.array([i in label_of for i in ids], dtype=bool)
    if not keep.any():
        raise rc.ConfigError(f"no logit rows belong to split {split!r}")
    ids = [i for i, k in zip(ids, keep) if k]
    labels = np.array([label_of[i] for i in ids], dtype=np.int64)
    return ids, [b[keep] for b in blocks], labels, n_classes


def cmd_stack(args) -> int:
    seed = rc.resolve_seed(args.seed)
    ids, blocks, labels, n_classes = _aligned_inputs(args.logits, args.manifest, args.split)
    print(f"feature_width\t{len(blocks) * n_classes}\t({len(blocks)} models x {n_classes} logits)")
    params = TreeParams(args.max_depth, args.min_samples_split, args.min_samples_leaf)
    stacker = fit_stacker(blocks, labels, n_classes, seed=seed, n_folds=args.folds, n_trees=args.trees,
                          params=params)
    save_stacker(stacker, args.out)
    report, _ = evaluate(stacker.oof_labels, stacker.oof_pred, n_classes)
    print(f"balanced_rows\t{stacker.train_rows.size}")
    print(f"oof_F1\t{report.macro_f1:.4f}")
    print(f"oof_Acc\t{report.accuracy:.4f}")
    print(f"stacker\t{args.out}")
    return 0


# -- eval ---------------------------------------------------------------------

def cmd_eval(args) -> int:
    ids, blocks, labels, n_classes = _aligned_inputs(args.logits, args.manifest, args.split)
    if args.stacker:
        stacker = load_stacker(args.stacker)
        pred = predict_stacker(stacker, np.concatenate(blocks, axis=1))
    elif len(blocks) == 1:
        pred = blocks[0].argmax(axis=1)
    else:
        raise rc.ConfigError("several logit files need --stacker to combine them")
    names = list(EMOTIONS) if args.emotion_names and n_classes == len(EMOTIONS) else None
    seed = rc.resolve_seed(args.seed)
    report, boot = evaluate(labels, pred, n_classes, names, args.bootstrap, seed, args.per_class_n)
    sys.stdout.write(report.to_text())
    if args.report:
        Path(args.report).write_text(report.to_json(), encoding="utf-8")
    if args.figures:
        from .plotting import plot_bootstrap, plot_confusion
        fig_dir = Path(args.figures)
        plot_confusion(report.confusion, report.class_names, fig_dir / "confusion.png")
        if boot is not None:
            plot_bootstrap(boot.replicates, report.macro_f1, fig_dir / "bootstrap_f1.png")
    return 0


# -- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmser", description="Cross-modal emotion classifier pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--matmul", choices=("exact", "blas"), default="exact",
                        help="matrix product kernel (blas is faster, not bit-reproducible across machines)")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="write a synthetic class-conditional Gaussian corpus")
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--per-class", type=int, default=50)
    g.add_argument("--counts", help="comma-separated per-class counts (overrides --classes/--per-class)")
    g.add_argument("--imbalance", choices=("msp",), help="8-class imbalanced preset (Neutral 40%%, Fear 1.5%%)")
    g.add_argument("--total", type=int, default=2000, help="corpus size for --imbalance")
    g.add_argument("--modalities", default="16,8", help="[name:][FRAMESx]DIM entries, comma separated")
    g.add_argument("--frames", default="4-12", help="frame-count range for entries without FRAMES")
    g.add_argument("--noise", type=float, default=0.5)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_synthetic)

    t = sub.add_parser("train", help="train one cross-modal base model")
    t.add_argument("--config")
    t.add_argument("--manifest")
    t.add_argument("--out", help="output directory")
    t.add_argument("--design", choices=DESIGNS)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-min", type=float)
    t.add_argument("--sml-weight", type=float)
    t.add_argument("--hidden", type=int)
    t.add_argument("--classifier-hidden", type=int)
    t.add_argument("--classes", type=int)
    t.add_argument("--neutral-class", type=int)
    t.add_argument("--unweighted", action="store_true", help="plain cross-entropy instead of class weights")
    t.add_argument("--max-grad-norm", type=float)
    t.add_argument("--max-frames", type=int)
    t.add_argument("--train-split")
    t.add_argument("--dev-split")
    t.add_argument("--seed", type=int)
    t.add_argument("--figures", action="store_true", help="render training curves under OUT/figures")
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write per-sample logits for a manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split")
    p.add_argument("--max-frames", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    s = sub.add_parser("stack", help="fit the k-fold balanced random-forest stacker")
    s.add_argument("--logits", nargs="+", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--trees", type=int, default=200)
    s.add_argument("--max-depth", type=int, default=8)
    s.add_argument("--min-samples-split", type=int, default=10)
    s.add_argument("--min-samples-leaf", type=int, default=10)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_stack)

    e = sub.add_parser("eval", help="accuracy, macro-F1 and optional bootstrap BS-F1")
    e.add_argument("--logits", nargs="+", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="dev")
    e.add_argument("--stacker")
    e.add_argument("--bootstrap", type=int, metavar="B")
    e.add_argument("--per-class-n", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--emotion-names", action="store_true",
                   help="name the 8 classes Anger..Surprise (canonical label order) in the report")
    e.add_argument("--report", help="write the report as JSON")
    e.add_argument("--figures", help="directory for confusion / bootstrap figures")
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    set_matmul_kernel(args.matmul)
    try:
        return args.func(args)
    except (CmserError, ValueError, OSError) as exc:
        print(f"cmser: error: {exc}", file=sys.stderr)
        return 1
    finally:
        set_matmul_kernel("exact")


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point.

Verbs: generate, train-embeddings, pretrain-vision, train, evaluate,
predict, agreement.  Exit codes: 0 success, 2 configuration or usage
problem, 3 bad input data, 4 internal contract violation.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import checkpoint as ck
from . import datagen as dg
from . import metrics as mx
from . import report as rp
from .config import load_run_config, config_summary
from .errors import ConfigError, ContractError, DataError
from .fusion import predict_scores, train_htdn
from .ioutil import atomic_write_text
from .language_net import score_records, train_language_unimodal
from .prng import PrngState
from .textproc import (embedding_coverage, load_embeddings, save_embeddings,
                       tokenize, train_skipgram)
from .vision_net import (PROFILES, VisionTrainConfig, pretrain_backbone,
                         score_records_vision, train_vision_unimodal)

log = logging.getLogger("htdn")


# -- shared plumbing ---------------------------------------------------------------


def _common_flags(p: argparse.ArgumentParser, config=True):
    p.add_argument("--quiet", action="store_true", help="only warnings and errors")
    if config:
        p.add_argument("--config", type=Path, default=None, metavar="INI",
                       help="run configuration file")
        p.add_argument("--profile", choices=sorted(PROFILES), default=None,
                       help="preset bundle (network dims, image size, budgets)")
        p.add_argument("--seed", type=int, default=None, help="master random seed")


def _run_config(args, extra_overrides=None):
    overrides = dict(extra_overrides or {})
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_run_config(getattr(args, "config", None),
                           profile=getattr(args, "profile", None),
                           overrides=overrides)


def _load_records(path, what="dataset"):
    records = dg.load_dataset(path)
    if not records:
        raise DataError(f"{path}: {what} is empty")
    log.info("%s: %d ads (%d positive)", path, len(records),
             sum(dg.binarize_label(r.label7) for r in records))
    return records


def _carve_val(train_records, val_fraction: float, seed: int):
    keep, val, _ = dg.split_corpus(train_records,
                                   ratios=(1.0 - val_fraction, val_fraction, 0.0),
                                   seed=seed)
    log.info("carved validation set: %d train / %d val", len(keep), len(val))
    return keep, val


def _out_dir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def _epoch_logger(tag: str):
    """Adapt the trainers' (epoch, history) callback to the run log."""
    def fn(epoch, history):
        parts = [f"{tag} epoch {epoch + 1}"]
        losses = history.get("train_loss")
        if losses:
            parts.append(f"loss {losses[-1]:.4f}")
        val = history.get("val_weighted_accuracy")
        if val:
            parts.append(f"val wt-acc {val[-1]:.3f}")
        log.info("%s", "  ".join(parts))
    return fn


# -- generate ----------------------------------------------------------------------


def _cmd_generate(args) -> int:
    overrides = {}
    if args.ads is not None:
        overrides["data.ads"] = args.ads
    cfg = _run_config(args, overrides)
    out = _out_dir(args.out)

    records = dg.generate_corpus(cfg.data, out_dir=out)
    dg.save_corpus(records, out / "corpus.jsonl")
    dg.save_keywords(out / "keywords.txt")
    stats = dg.corpus_stats(records)
    atomic_write_text(out / "stats.txt",
                      dg.stats_to_text(stats, dg.config_echo_text(cfg.data)))

    lengths = [len(tokenize(r.text)) for r in records]
    rp.length_histogram(out / "length_hist.png", lengths, "ad length")
    counts = {}
    for r in records:
        counts[len(r.images)] = counts.get(len(r.images), 0) + 1
    rp.count_bars(out / "image_counts.png", counts, "images per ad", "images")

    if args.splits:
        try:
            ratios = tuple(float(v) for v in args.splits.split(","))
        except ValueError:
            raise ConfigError(f"--splits must be three comma-separated numbers, "
                              f"got {args.splits!r}") from None
        if len(ratios) != 3:
            raise ConfigError("--splits needs exactly three ratios (train,val,test)")
        train, val, test = dg.split_corpus(records, ratios=ratios, seed=cfg.seed)
        for name, part in (("train", train), ("val", val), ("test", test)):
            if part:
                dg.save_corpus(part, out / f"{name}.jsonl")
        log.info("splits: %d train / %d val / %d test", len(train), len(val), len(test))

    print(f"wrote {len(records)} ads ({stats['positive']} positive, "
          f"{stats['images_total']} images) to {out}")
    return 0


# -- embeddings ---------------------------------------------------------------------


def _cmd_train_embeddings(args) -> int:
    cfg = _run_config(args)
    records = _load_records(args.data)
    docs = [tokenize(r.text, cfg.language.max_len) for r in records]
    table = train_skipgram(docs, dim=cfg.embed.dim, window=cfg.embed.window,
                           negatives=cfg.embed.negatives, epochs=cfg.embed.epochs,
                           prng=PrngState(cfg.seed).split("embed"),
                           min_count=cfg.embed.min_count,
                           subsample=cfg.embed.subsample, lr=cfg.embed.lr)
    save_embeddings(args.out, table)
    cov = embedding_coverage(table, docs)
    print(f"trained {len(table)} vectors of dim {table.dim}; "
          f"token coverage {100.0 * cov:.1f}%; wrote {args.out}")
    return 0


# -- vision pretraining ---------------------------------------------------------------


def _cmd_pretrain_vision(args) -> int:
    cfg = _run_config(args)
    records = _load_records(args.data)
    out = _out_dir(args.out)
    pre_cfg = VisionTrainConfig(lr=cfg.vision.lr, epochs=cfg.pretrain_epochs,
                                batch_size=cfg.vision.batch_size)
    net, history = pretrain_backbone(records, PROFILES[cfg.profile], pre_cfg,
                                     PrngState(cfg.seed).split("pretrain"),
                                     log_fn=_epoch_logger("warm-up"))
    ck.save_backbone(out / "backbone.ckpt", net, {"seed": cfg.seed})
    rp.training_curves(out / "pretrain_curves.png", history, "backbone warm-up")
    print(f"pretrained {cfg.profile} backbone "
          f"(fingerprint {ck.backbone_fingerprint(net)[:12]}); wrote {out}")
    return 0


# -- joint training --------------------------------------------------------------------


def _cmd_train(args) -> int:
    cfg = _run_config(args)
    train_records = _load_records(args.data, what="training set")
    if args.val is not None:
        val_records = _load_records(args.val, what="validation set")
    else:
        train_records, val_records = _carve_val(train_records, cfg.val_fraction,
                                                cfg.seed)
    table = load_embeddings(args.embeddings)
    if table.dim != cfg.embed.dim:
        raise ConfigError(f"embedding file has dim {table.dim}, "
                          f"configuration expects {cfg.embed.dim}")
    pretrained = ck.load_backbone(args.pretrained) if args.pretrained else None
    out = _out_dir(args.out)

    model, history = train_htdn(train_records, table, cfg.language,
                                PROFILES[cfg.profile], cfg.decision, cfg.joint,
                                PrngState(cfg.seed).split("joint"),
                                val_records=val_records,
                                pretrained_backbone=pretrained,
                                log_fn=_epoch_logger("joint"))

    meta = {"seed": cfg.seed, "profile": cfg.profile,
            "pretrained": ck.backbone_fingerprint(pretrained) if pretrained else None}
    ck.save_checkpoint(out / "model.ckpt", model, table, meta)
    rp.training_curves(out / "curves.png", history, "joint training")
    hist_rows = []
    for epoch in range(len(history["train_loss"])):
        row = [str(epoch + 1), f"{history['train_loss'][epoch]:.6f}"]
        va = history.get("val_weighted_accuracy") or []
        row.append(f"{va[epoch]:.6f}" if epoch < len(va) else "-")
        hist_rows.append(row)
    rp.write_tsv(out / "history.tsv", ["epoch", "train_loss", "val_weighted_accuracy"],
                 hist_rows)
    print(f"trained joint model on {len(train_records)} ads; wrote {out}")
    return 0


# -- the evaluation grid -----------------------------------------------------------------


def _grid_rows(cfg, train_records, val_records, test_records, table, root, out):
    """Train every system and measure it on the held-out test set.

    Returns (rows, joint_scores, joint_model) where rows pair a system name
    with its summary metrics, in fixed report order.
    """
    y_train = [dg.binarize_label(r.label7) for r in train_records]
    y_test = np.array([dg.binarize_label(r.label7) for r in test_records])
    docs_train = [tokenize(r.text, cfg.language.max_len) for r in train_records]
    docs_test = [tokenize(r.text, cfg.language.max_len) for r in test_records]
    rows = []

    def add(name, preds):
        rows.append((name, mx.summarize(y_test, np.asarray(preds, dtype=np.int64))))
        log.info("%-18s weighted accuracy %.3f", name, rows[-1][1]["weighted_accuracy"])

    add("majority", np.full(len(y_test), bl.majority_predictor(y_train)))

    feature_sets = {}
    kw = dg.keyword_list()
    feature_sets["keywords"] = (bl.presence_features(docs_train, kw),
                                bl.presence_features(docs_test, kw))
    picked = bl.select_tokens(docs_train, y_train, k=dg.KEYWORD_COUNT)
    feature_sets["selected"] = (bl.presence_features(docs_train, picked),
                                bl.presence_features(docs_test, picked))
    bow = bl.BowVectorizer(max_features=2000).fit(docs_train)
    feature_sets["bow"] = (bow.transform(docs_train), bow.transform(docs_test))
    feature_sets["avgvec"] = (bl.average_vector_features(docs_train, table),
                              bl.average_vector_features(docs_test, table))

    for fname in ("keywords", "selected", "bow", "avgvec"):
        xtr, xte = feature_sets[fname]
        for clf in ("lr", "svm", "rf"):
            if clf == "rf":
                forest = bl.RandomForest(n_trees=cfg.forest_trees)
                forest.fit(xtr, y_train, root.split(f"rf-{fname}"))
                preds = forest.predict(xte)
            else:
                kind = "logistic" if clf == "lr" else "svm"
                linear = bl.train_linear(xtr, y_train, kind=kind, c=cfg.baseline_c)
                preds = linear.predict(xte)
            add(f"{fname}+{clf}", preds)

    lang_net, _ = train_language_unimodal(train_records, table, cfg.language,
                                          root.split("lang-uni"),
                                          val_records=val_records,
                                          log_fn=_epoch_logger("text"))
    add("text branch", score_records(lang_net, table, test_records) >= 0.5)

    profile = PROFILES[cfg.profile]
    vis_net, (w_h, b_h), _ = train_vision_unimodal(train_records, profile,
                                                   cfg.vision, root.split("vis-uni"),
                                                   val_records=val_records,
                                                   log_fn=_epoch_logger("image"))
    add("image branch", score_records_vision(vis_net, w_h, b_h, test_records) >= 0.5)

    pretrained = None
    if cfg.pretrain_epochs > 0:
        pre_cfg = VisionTrainConfig(lr=cfg.vision.lr, epochs=cfg.pretrain_epochs,
                                    batch_size=cfg.vision.batch_size)
        pretrained, _ = pretrain_backbone(train_records, profile, pre_cfg,
                                          root.split("pretrain"),
                                          log_fn=_epoch_logger("warm-up"))
        ck.save_backbone(out / "backbone.ckpt", pretrained, {"seed": cfg.seed})
    warm_net, (w_w, b_w), _ = train_vision_unimodal(train_records, profile,
                                                    cfg.vision, root.split("vis-warm"),
                                                    val_records=val_records,
                                                    init_net=pretrained,
                                                    log_fn=_epoch_logger("image warm"))
    add("image branch (warm)",
        score_records_vision(warm_net, w_w, b_w, test_records) >= 0.5)

    model, history = train_htdn(train_records, table, cfg.language, profile,
                                cfg.decision, cfg.joint, root.split("joint"),
                                val_records=val_records,
                                pretrained_backbone=pretrained,
                                log_fn=_epoch_logger("joint"))
    scores = predict_scores(model, table, test_records)
    add("joint", scores >= 0.5)
    rp.training_curves(out / "curves_joint.png", history, "joint training")
    return rows, scores, model


_METRIC_COLS = ("accuracy", "weighted_accuracy", "precision", "recall", "f1")
_COL_TITLES = ("system", "acc", "wt-acc", "prec", "rec", "f1")


def _cmd_evaluate(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args.out)
    root = PrngState(cfg.seed)

    if args.data is not None:
        if args.train or args.test:
            raise ConfigError("--data replaces --train/--test; give one or the other")
        records = _load_records(args.data, what="corpus")
        train_records, val_records, test_records = dg.split_corpus(
            records, ratios=(0.7, 0.1, 0.2), seed=cfg.seed)
    else:
        if not (args.train and args.test):
            raise ConfigError("evaluate needs either --data or both --train and --test")
        train_records = _load_records(args.train, what="training set")
        test_records = _load_records(args.test, what="test set")
        if args.val is not None:
            val_records = _load_records(args.val, what="validation set")
        else:
            train_records, val_records = _carve_val(train_records,
                                                    cfg.val_fraction, cfg.seed)
    log.info("evaluating: %d train / %d val / %d test",
             len(train_records), len(val_records), len(test_records))

    if args.embeddings is not None:
        table = load_embeddings(args.embeddings)
        if table.dim != cfg.embed.dim:
            raise ConfigError(f"embedding file has dim {table.dim}, "
                              f"configuration expects {cfg.embed.dim}")
    else:
        docs = [tokenize(r.text, cfg.language.max_len) for r in train_records]
        table = train_skipgram(docs, dim=cfg.embed.dim, window=cfg.embed.window,
                               negatives=cfg.embed.negatives,
                               epochs=cfg.embed.epochs,
                               prng=root.split("embed"),
                               min_count=cfg.embed.min_count,
                               subsample=cfg.embed.subsample, lr=cfg.embed.lr)
        save_embeddings(out / "embeddings.txt", table)
        log.info("trained embeddings: %d vectors, dim %d", len(table), table.dim)

    rows, scores, model = _grid_rows(cfg, train_records, val_records,
                                     test_records, table, root, out)

    table_rows = [[name] + [rp.fmt_pct(m[k]) for k in _METRIC_COLS]
                  for name, m in rows]
    text = rp.render_table(_COL_TITLES, table_rows)
    atomic_write_text(out / "results.txt", text)
    rp.write_tsv(out / "results.tsv", _COL_TITLES, table_rows)
    rp.metric_bars(out / "weighted_accuracy.png",
                   [name for name, _ in rows],
                   [m["weighted_accuracy"] for _, m in rows],
                   "held-out weighted accuracy", "weighted accuracy (%)")

    y_test = [dg.binarize_label(r.label7) for r in test_records]
    rp.write_scores(out / "scores.tsv", [r.id for r in test_records], y_test, scores)

    joint = dict(rows)["joint"]
    meta = {"seed": cfg.seed, "profile": cfg.profile,
            "test_weighted_accuracy": joint["weighted_accuracy"]}
    ck.save_checkpoint(out / "model.ckpt", model, table, meta)
    atomic_write_text(out / "config.ini", config_summary(cfg))

    print(text, end="")
    print(f"wrote report, figures, scores and checkpoint to {out}")
    return 0


# -- prediction -----------------------------------------------------------------------


def _cmd_predict(args) -> int:
    data = ck.load_checkpoint(args.model)
    model = ck.build_model(data)
    records = _load_records(args.data)
    scores = predict_scores(model, data.table, records)
    labels = [dg.binarize_label(r.label7) for r in records]
    rp.write_scores(args.out, [r.id for r in records], labels, scores)
    preds = scores >= 0.5
    summary = mx.summarize(np.array(labels), preds.astype(np.int64))
    print(f"scored {len(records)} ads; weighted accuracy "
          f"{100.0 * summary['weighted_accuracy']:.1f}%; wrote {args.out}")
    return 0


# -- annotator agreement ----------------------------------------------------------------


def _cmd_agreement(args) -> int:
    units = mx.load_annotations(args.annotations)
    alpha = mx.krippendorff_alpha(units)
    agree = mx.simple_agreement(units)
    lines = [f"units = {len(units)}",
             f"krippendorff_alpha = {alpha:.4f}",
             f"simple_agreement = {agree:.4f}"]
    text = "\n".join(lines) + "\n"
    if args.out is not None:
        atomic_write_text(args.out, text)
    print(text, end="")
    return 0


# -- wiring --------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="htdn",
        description="Multimodal ad classification on synthetic data: corpus "
                    "generation, branch and joint training, baseline grids, "
                    "scoring and agreement checks.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("generate", help="write a synthetic corpus")
    _common_flags(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--ads", type=int, default=None, help="number of ads")
    p.add_argument("--splits", default=None, metavar="TR,VA,TE",
                   help="also write stratified split files")
    p.set_defaults(fn=_cmd_generate)

    p = sub.add_parser("train-embeddings", help="train word vectors on a corpus")
    _common_flags(p)
    p.add_argument("--data", type=Path, required=True, help="corpus jsonl")
    p.add_argument("--out", type=Path, required=True, help="embedding text file")
    p.set_defaults(fn=_cmd_train_embeddings)

    p = sub.add_parser("pretrain-vision", help="warm up the image backbone")
    _common_flags(p)
    p.add_argument("--data", type=Path, required=True, help="training jsonl")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(fn=_cmd_pretrain_vision)

    p = sub.add_parser("train", help="train the joint model")
    _common_flags(p)
    p.add_argument("--data", type=Path, required=True, help="training jsonl")
    p.add_argument("--val", type=Path, default=None, help="validation jsonl")
    p.add_argument("--embeddings", type=Path, required=True, help="embedding file")
    p.add_argument("--pretrained", type=Path, default=None,
                   help="warm backbone checkpoint")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("evaluate",
                       help="train all systems and report held-out metrics")
    _common_flags(p)
    p.add_argument("--data", type=Path, default=None,
                   help="full corpus jsonl (split internally)")
    p.add_argument("--train", type=Path, default=None, help="training jsonl")
    p.add_argument("--val", type=Path, default=None, help="validation jsonl")
    p.add_argument("--test", type=Path, default=None, help="test jsonl")
    p.add_argument("--embeddings", type=Path, default=None,
                   help="pretrained embedding file (trained here when absent)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("predict", help="score ads with a saved model")
    _common_flags(p, config=False)
    p.add_argument("--model", type=Path, required=True, help="model checkpoint")
    p.add_argument("--data", type=Path, required=True, help="ads jsonl")
    p.add_argument("--out", type=Path, required=True, help="scores tsv")
    p.set_defaults(fn=_cmd_predict)

    p = sub.add_parser("agreement", help="annotator agreement from a ratings file")
    _common_flags(p, config=False)
    p.add_argument("--annotations", type=Path, required=True,
                   help="headerless tsv: unit id, then one rating per "
                        "annotator ('-' marks a missing rating)")
    p.add_argument("--out", type=Path, default=None, help="optional report file")
    p.set_defaults(fn=_cmd_agreement)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr,
                        level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    try:
        return args.fn(args)
    except ConfigError as e:
        log.error("%s", e)
        return 2
    except DataError as e:
        log.error("%s", e)
        return 3
    except OSError as e:
        log.error("%s", e)
        return 3
    except ContractError as e:
        log.error("internal error: %s", e)
        return 4
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())

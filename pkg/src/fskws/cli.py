"""Command-line interface: generate | train | enroll | detect | evaluate | export-embeddings."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .audio import AudioError, read_wav, write_wav
from .augment import SyntheticNoiseProvider, add_noise, augment
from .config import ConfigError, RunConfig, load_config
from .encoder import EncoderError, load_checkpoint
from .evaluation import embed_corpus, evaluate, format_table, report_records
from .inference import (DetectionConfig, EnrollmentProfile, detect, enroll,
                        export_embeddings, file_digest, result_label)
from .protonet import (CORPUS_STREAM, EVAL_STREAM, TrainingError, stream_seed, train)
from .sources import (DatasetError, OracleSource, dir_dataset_open, make_oracle_corpus,
                      write_class_manifest)

log = logging.getLogger("fskws")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _out_dir(cfg: RunConfig, args) -> Path:
    out = Path(getattr(args, "out", None) or cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(cfg: RunConfig, out: Path):
    cfg.dump(out / "resolved_config.yaml")


def cmd_generate(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, args)
    source = OracleSource(cfg.oracle)
    aug = cfg.augment_config() if args.augment else None
    base = stream_seed(cfg.seed, CORPUS_STREAM)
    classes = []
    for i in range(args.classes):
        cls = source.new_class(np.random.default_rng([base, i]))
        classes.append(cls)
        (out / cls.class_id).mkdir(exist_ok=True)
        for v in range(args.views):
            rng = np.random.default_rng([base, i, v])
            w = source.render(cls, rng)
            if aug is not None:
                w = augment(w, aug, rng)
            write_wav(out / cls.class_id / f"{v:04d}.wav", w)
    write_class_manifest(out / "manifest.tsv", classes)
    _snapshot(cfg, out)
    print(f"wrote {args.classes * args.views} clips for {args.classes} classes to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    from .plotting import plot_loss_curve

    out = _out_dir(cfg, args)
    _snapshot(cfg, out)
    source = OracleSource(cfg.oracle)
    result = train(source, cfg.dsp, cfg.augment_config(), cfg.buffer, cfg.encoder, cfg.train,
                   out_dir=out, resume=args.resume, workers=cfg.workers, steps=args.steps)
    losses = [json.loads(line)["loss"] for line in open(out / "loss.jsonl")]
    plot_loss_curve(losses, out / "loss.png")
    print(f"trained to step {result.step}; final checkpoint {out / 'final.npz'}")
    return EXIT_OK


def _load_supports(root: Path, keywords=None) -> dict:
    if not root.is_dir():
        raise DatasetError(f"missing supports directory: {root}")
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if keywords:
        names = {p.name for p in dirs}
        missing = [k for k in keywords if k not in names]
        if missing:
            raise DatasetError(f"missing keyword folder(s): {', '.join(missing)}")
        dirs = [root / k for k in keywords]
    supports = {}
    for d in dirs:
        waves = [read_wav(p) for p in sorted(d.glob("*.wav"))]
        if not waves:
            raise DatasetError(f"empty keyword folder: {d}")
        supports[d.name] = waves
    if not supports:
        raise DatasetError(f"no keyword folders in {root}")
    return supports


def cmd_enroll(cfg: RunConfig, args) -> int:
    ck = load_checkpoint(args.checkpoint)
    supports = _load_supports(Path(args.supports), args.keywords)
    profile = enroll(ck.encoder, supports, cfg.dsp, cfg.train.distance,
                     checkpoint_hash=file_digest(args.checkpoint))
    profile.d_th = cfg.detect.d_th
    profile.save(args.profile)
    print(f"enrolled {len(profile.keywords)} keywords -> {args.profile}")
    return EXIT_OK


def cmd_detect(cfg: RunConfig, args) -> int:
    profile = EnrollmentProfile.load(args.profile)
    if profile.checkpoint_hash and profile.checkpoint_hash != file_digest(args.checkpoint):
        raise ConfigError("profile was enrolled with a different checkpoint")
    if profile.distance != cfg.train.distance:
        raise ConfigError("profile distance differs from the configured metric")
    d_th = args.d_th if args.d_th is not None else (
        cfg.detect.d_th if cfg.detect.d_th is not None else profile.d_th)
    det = DetectionConfig(float("inf") if d_th is None else d_th, profile.distance)
    enc = load_checkpoint(args.checkpoint).encoder
    for path in args.wavs:
        r = detect(profile, enc, read_wav(path), cfg.dsp, det)
        print(f"{path}\t{result_label(profile, r)}\t{r.distance_to_candidate:.6f}")
    return EXIT_OK


def noisy_queries(snr_range=(10.0, 20.0)):
    noise = SyntheticNoiseProvider()

    def transform(w, rng):
        return add_noise(w, noise.next(rng, len(w)), rng.uniform(*snr_range))
    return transform


def build_corpus(cfg: RunConfig, dataset: str):
    if dataset == "oracle":
        e = cfg.eval
        rng = np.random.default_rng(stream_seed(cfg.seed, EVAL_STREAM))
        return make_oracle_corpus(OracleSource(cfg.oracle), e.oracle_classes,
                                  e.oracle_support, e.oracle_test, rng)
    ds = dir_dataset_open(dataset, cfg.eval.layout, test_count=cfg.eval.test_count,
                          min_count=cfg.eval.min_count, max_count=cfg.eval.max_count)
    return ds.corpus()


def cmd_evaluate(cfg: RunConfig, args) -> int:
    from .plotting import plot_k_sweep, plot_roc

    out = _out_dir(cfg, args)
    _snapshot(cfg, out)
    enc = load_checkpoint(args.checkpoint).encoder
    corpus = build_corpus(cfg, args.dataset)
    transform = noisy_queries(cfg.augment.snr_db_range) if cfg.eval.noisy_queries else None
    data = embed_corpus(corpus, cfg.dsp, enc.embed, transform,
                        np.random.default_rng([stream_seed(cfg.seed, EVAL_STREAM), 1]))
    reports = []
    for k in cfg.eval.k_sweep:
        rep = evaluate(data, cfg.trial_spec(k), method=args.method)
        reports.append(rep)
        first = rep.trials[0]
        plot_roc(*first["_scores"], out / f"roc_k{k}.png", first["d_th"])
    table = format_table(reports)
    (out / "report.txt").write_text(table)
    with open(out / "report.jsonl", "w") as fh:
        for line in report_records(reports):
            fh.write(line + "\n")
    plot_k_sweep(reports, out / "k_sweep.png")
    print(table, end="")
    return EXIT_OK


def cmd_export(cfg: RunConfig, args) -> int:
    enc = load_checkpoint(args.checkpoint).encoder
    corpus = build_corpus(cfg, args.dataset)
    n = export_embeddings(enc, (clip for _, clip in corpus.iter_clips()), cfg.dsp, args.out)
    print(f"wrote {n} embeddings to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML config (default: $FSKWS_CONFIG)")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("--workers", type=int, help="generation parallelism")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fskws", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="materialize a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, required=True)
    g.add_argument("--views", type=int, required=True)
    g.add_argument("--augment", action="store_true", help="apply the augmentation chain")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="episodic training on the oracle")
    t.add_argument("--out")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--steps", type=int, help="stop after this many steps")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("enroll", parents=[common], help="build an enrollment profile")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--supports", required=True, help="directory of <keyword>/*.wav")
    e.add_argument("--keywords", nargs="*", help="restrict to these keyword folders")
    e.add_argument("--profile", required=True, help="output profile file")
    e.set_defaults(func=cmd_enroll)

    d = sub.add_parser("detect", parents=[common], help="classify WAV files")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--profile", required=True)
    d.add_argument("--d-th", type=float, dest="d_th")
    d.add_argument("wavs", nargs="+")
    d.set_defaults(func=cmd_detect)

    v = sub.add_parser("evaluate", parents=[common], help="open-set few-shot trials")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--dataset", required=True, help="dataset root, or 'oracle'")
    v.add_argument("--out")
    v.add_argument("--method", default="model")
    v.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("export-embeddings", parents=[common], help="dump embeddings")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--dataset", required=True, help="dataset root, or 'oracle'")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.overrides)
        if args.workers is not None:
            overrides.append(f"workers={args.workers}")
        cfg = load_config(args.config, overrides)
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AudioError, DatasetError, EncoderError, TrainingError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``matvae <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
``MATVAE_NUM_THREADS`` sets the BLAS thread count (default 1, which also
keeps floating-point reductions reproducible).
"""
from __future__ import annotations

import os

_threads = os.environ.get("MATVAE_NUM_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import csv  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import shutil  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from importlib import resources  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from matvae import bundle as B  # noqa: E402
from matvae import checkpoint, evaluation, seqdata, structure, training  # noqa: E402
from matvae import model as M  # noqa: E402

log = logging.getLogger("matvae")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers


def _digest(path: Path) -> dict:
    path = Path(path)
    if path.is_dir():
        return {str(p.relative_to(path)): _digest(p) for p in sorted(path.iterdir()) if p.is_file()}
    return "sha256:" + hashlib.sha256(path.read_bytes()).hexdigest()


def _prepare_out_dir(out: Path, overwrite: bool) -> Path:
    out = Path(out)
    occupied = any(out.iterdir()) if out.is_dir() else out.exists()
    if occupied:
        if not overwrite:
            raise UsageError(f"{out} exists; pass --overwrite to replace it")
        shutil.rmtree(out) if out.is_dir() else out.unlink()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _prepare_out_file(out: Path, overwrite: bool) -> Path:
    out = Path(out)
    if out.exists() and not overwrite:
        raise UsageError(f"{out} exists; pass --overwrite to replace it")
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file or directory: {p}")
    return p


def _write_manifest(path: Path, args, config: dict, inputs: list[Path], seed, artifacts: list[Path], t0: float) -> None:
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config": config,
        "inputs": {str(p): _digest(p) for p in inputs},
        "seed": seed,
        "artifacts": [str(p) for p in artifacts],
        "duration_seconds": round(time.time() - t0, 3),
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_preset(name: str) -> dict:
    try:
        text = resources.files("matvae").joinpath("presets", f"{name}.json").read_text()
    except FileNotFoundError:
        raise UsageError(f"unknown preset {name!r}") from None
    return json.loads(text)


def _resolve_configs(args, L: int, mask) -> tuple[training.TrainConfig, M.ModelConfig]:
    train, model = {}, {}
    if args.preset:
        p = _load_preset(args.preset)
        train.update(p.get("train", {}))
        model.update(p.get("model", {}))
    if args.config:
        p = json.loads(_require(args.config).read_text())
        train.update(p.get("train", {}))
        model.update(p.get("model", {}))
    for key in ("learning_rate", "batch_size", "steps", "beta", "seed", "log_interval", "clip_norm"):
        v = getattr(args, key, None)
        if v is not None:
            train[key] = v
    if getattr(args, "freeze_encoder", False):
        train["freeze_encoder"] = True
    if getattr(args, "standardize", False):
        train["standardize"] = True
    for key in ("D", "h_min", "transformer_layers", "transformer_hidden", "head_hidden", "gumbel_temperature"):
        v = getattr(args, key, None)
        if v is not None:
            model[key] = v
    if args.fcb_hidden:
        model["fcb_hidden"] = [int(w) for w in args.fcb_hidden.split(",")]
    if args.no_transformer:
        model["use_transformer"] = False
    tc = training.TrainConfig.from_dict(train)
    model["beta_train"] = tc.beta
    use_mask = None if args.no_mask else mask
    mc = M.ModelConfig.from_dict({**model, "L": L}, mask=use_mask)
    return tc, mc


def _resolved(tc: training.TrainConfig, mc: M.ModelConfig) -> dict:
    return {"train": tc.to_dict(), "model": {**mc.to_dict(), "masked": mc.mask is not None}}


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(args) -> int:
    t0 = time.time()
    msa_path = _require(args.msa)
    inputs = [msa_path]
    raw = seqdata.parse_msa(msa_path, args.format)
    msa = seqdata.preprocess(raw, theta=args.theta)
    start = seqdata.query_start(raw.ids[0])
    qpos = seqdata.query_positions(raw.seqs[0], start)
    wild_type = {p: c for p, c in zip(qpos, raw.seqs[0]) if p > 0}
    mask = None
    if args.pdb:
        inputs.append(_require(args.pdb))
        coords = structure.parse_pdb(args.pdb, args.chain)
        mask = structure.contact_mask(coords, args.cutoff, msa.column_map).mask
    dms = None
    if args.dms:
        inputs.append(_require(args.dms))
        dms = seqdata.parse_dms(args.dms, wild_type, msa.column_map, args.threshold, not args.lower_is_fit)
    out = _prepare_out_dir(args.out, args.overwrite)
    summary = {
        "sequences_in": len(raw),
        "sequences_kept": len(msa),
        "sequences_removed": len(raw) - len(msa),
        "columns_in": raw.width,
        "columns_kept": msa.length,
        "columns_removed": raw.width - msa.length,
        "effective_sequences": float(msa.weights.sum()),
    }
    meta = {"theta": args.theta, "summary": summary, "query_id": raw.ids[0],
            "wild_type": "".join(wild_type[p] for p in sorted(wild_type)), "wild_type_start": start}
    if mask is not None:
        meta["contact_cutoff"] = args.cutoff
    if dms is not None:
        summary.update(variants_kept=len(dms), variants_dropped=dms.n_dropped)
        meta.update(dms_threshold=dms.threshold, higher_is_fit=dms.higher_is_fit, dms_dropped=dms.n_dropped)
    artifacts = B.write_bundle(out, msa, meta, mask, dms)
    _write_manifest(out / "manifest.json", args, {"theta": args.theta, "format": args.format, "cutoff": args.cutoff,
                                                   "threshold": args.threshold, "lower_is_fit": args.lower_is_fit},
                    inputs, None, artifacts, t0)
    for k, v in summary.items():
        print(f"{k}: {v}")
    return 0


def cmd_train_msa(args) -> int:
    t0 = time.time()
    bdir = _require(args.bundle)
    b = B.read_bundle(bdir)
    tc, mc = _resolve_configs(args, b.msa.length, b.mask)
    out = _prepare_out_dir(args.out, args.overwrite)
    log.info("training matVAE: L=%d H=%d D=%d steps=%d", mc.L, mc.H, mc.D, tc.steps)
    params, trace = training.train_msa(b.msa, tc, mc)
    ckpt = out / "model.ckpt"
    final = trace.total[-1] if trace.total else None
    checkpoint.save(ckpt, params, {"train": tc.to_dict(), "final_loss": final})
    trace.write_csv(out / "loss_trace.csv")
    _write_manifest(out / "manifest.json", args, _resolved(tc, mc), [bdir], tc.seed,
                    [ckpt, out / "loss_trace.csv"], t0)
    print(f"final_loss: {final!r}")
    return 0


def _write_cv(out: Path, dms, result: training.CVResult) -> list[Path]:
    artifacts = []
    for fr in result.folds:
        p = out / f"fold{fr.fold}.ckpt"
        checkpoint.save(p, fr.params, {"fold": fr.fold})
        t = out / f"fold{fr.fold}_trace.csv"
        fr.trace.write_csv(t)
        artifacts += [p, t]
    p = out / "predictions.csv"
    training.write_predictions(p, dms, result)
    rep = evaluation.evaluate_cv(result.predictions, result.assignment, dms)
    print(f"mean_spearman_r: {rep.spearman_r!r}")
    print(f"mean_auroc: {rep.auroc!r}")
    return artifacts + [p]


def _bundle_dms(b: B.Bundle, where) -> seqdata.DmsDataset:
    if b.dms is None:
        raise seqdata.DataError(f"{where}: bundle has no DMS data (preprocess with --dms)")
    return b.dms


def cmd_train_dms(args) -> int:
    t0 = time.time()
    bdir = _require(args.bundle)
    b = B.read_bundle(bdir)
    dms = _bundle_dms(b, bdir)
    tc, mc = _resolve_configs(args, b.msa.length, b.mask)
    folds = seqdata.kfold_split(len(dms), args.folds, tc.seed)
    out = _prepare_out_dir(args.out, args.overwrite)
    result = training.train_dms(dms, folds, tc, mc)
    artifacts = _write_cv(out, dms, result)
    _write_manifest(out / "manifest.json", args, {**_resolved(tc, mc), "folds": args.folds}, [bdir], tc.seed, artifacts, t0)
    return 0


def cmd_finetune(args) -> int:
    t0 = time.time()
    bdir = _require(args.bundle)
    ck = _require(args.checkpoint)
    b = B.read_bundle(bdir)
    dms = _bundle_dms(b, bdir)
    pre, _ = checkpoint.load(ck)
    tc, _ = _resolve_configs(args, b.msa.length, b.mask)
    folds = seqdata.kfold_split(len(dms), args.folds, tc.seed)
    out = _prepare_out_dir(args.out, args.overwrite)
    result = training.finetune(pre, dms, folds, tc)
    artifacts = _write_cv(out, dms, result)
    _write_manifest(out / "manifest.json", args, {"train": tc.to_dict(), "model": pre.config.to_dict(), "folds": args.folds},
                    [bdir, ck], tc.seed, artifacts, t0)
    return 0


def cmd_score(args) -> int:
    t0 = time.time()
    bdir = _require(args.bundle)
    ck = _require(args.checkpoint)
    b = B.read_bundle(bdir)
    dms = _bundle_dms(b, bdir)
    params, _ = checkpoint.load(ck)
    training.check_compatible(params.config, dms)
    out = _prepare_out_file(Path(args.out), args.overwrite)
    wt = b.msa.encoded[0]
    # wild type first so its zero ratio is visible in the output
    wt_rec = seqdata.DmsRecord("WT", wt.copy(), float("nan"), False)
    scores = evaluation.score_dms(params, seqdata.DmsDataset([wt_rec] + dms.records, dms.threshold, dms.higher_is_fit), wt)
    if not args.include_wild_type:
        scores = scores[1:]
    evaluation.write_scores(out, scores)
    _write_manifest(Path(str(out) + ".manifest.json"), args, {"include_wild_type": args.include_wild_type},
                    [bdir, ck], None, [out], t0)
    return 0


def _read_prediction_file(path: Path):
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise seqdata.DataError(f"{path}: no rows")
    rows = [r for r in rows if r["mutant"] != "WT"]
    return rows


def _load_tags(path) -> dict[str, dict[str, str]]:
    if not path:
        return {}
    with _require(path).open(newline="") as fh:
        return {r["dataset"]: {k: v for k, v in r.items() if k != "dataset"} for r in csv.DictReader(fh)}


def cmd_evaluate(args) -> int:
    t0 = time.time()
    tags = _load_tags(args.tags)
    paths = [_require(p) for p in args.predictions]
    out = _prepare_out_file(Path(args.out), args.overwrite)
    reports = []
    for p in paths:
        rows = _read_prediction_file(p)
        name = p.stem
        recs = [seqdata.DmsRecord(r["mutant"], np.zeros(0, np.int8), float(r["target"]), bool(int(r["target_binary"])))
                for r in rows]
        dms = seqdata.DmsDataset(recs, float("nan"), not args.lower_is_fit)
        pred = np.array([float(r["predicted"]) for r in rows])
        if "fold" in rows[0]:
            rep = evaluation.evaluate_cv(pred, np.array([int(r["fold"]) for r in rows]), dms, name, tags.get(name))
        else:
            rep = evaluation.evaluate_scores(
                [evaluation.VariantScore(r.mutant, pp, r.score, r.label) for r, pp in zip(recs, pred)],
                name, not args.lower_is_fit, tags.get(name))
        reports.append(rep)
    write_metrics(out, reports)
    _write_manifest(Path(str(out) + ".manifest.json"), args, {"lower_is_fit": args.lower_is_fit}, paths, None, [out], t0)
    for r in reports:
        print(f"{r.dataset}: spearman_r={r.spearman_r:.4f} auroc={r.auroc:.4f} n={r.n_variants}")
    return 0


TAG_COLUMNS = ("category", "selection_type")


def write_metrics(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "spearman_r", "auroc", "n_variants", *TAG_COLUMNS])
        for r in reports:
            w.writerow([r.dataset, repr(r.spearman_r), repr(r.auroc), r.n_variants, *(r.tags.get(t, "") for t in TAG_COLUMNS)])


def read_metrics(path) -> list[evaluation.MetricsReport]:
    with open(path, newline="") as fh:
        return [evaluation.MetricsReport(r["dataset"], float(r["spearman_r"]), float(r["auroc"]), int(r["n_variants"]),
                                         {t: r.get(t) or "unknown" for t in TAG_COLUMNS})
                for r in csv.DictReader(fh)]


def cmd_report(args) -> int:
    t0 = time.time()
    paths = [_require(p) for p in args.metrics]
    reports = [r for p in paths for r in read_metrics(p)]
    out = _prepare_out_dir(args.out, args.overwrite)
    rows = evaluation.aggregate_report(reports, args.group_by)
    (out / "report.csv").write_text(evaluation.report_csv(rows))
    text = evaluation.report_text(rows)
    (out / "report.txt").write_text(text)
    _write_manifest(out / "manifest.json", args, {"group_by": args.group_by}, paths, None,
                    [out / "report.csv", out / "report.txt"], t0)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p: argparse.ArgumentParser, model_flags: bool = True) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--preset", choices=["paper-msa", "paper-dms", "desk"], help="start from a shipped preset")
    g.add_argument("--config", help="JSON file with 'train' and 'model' objects")
    g.add_argument("--learning-rate", type=float, dest="learning_rate")
    g.add_argument("--batch-size", type=int, dest="batch_size")
    g.add_argument("--steps", type=int)
    g.add_argument("--beta", type=float, help="entropy weight during training")
    g.add_argument("--seed", type=int)
    g.add_argument("--log-interval", type=int, dest="log_interval")
    g.add_argument("--clip-norm", type=float, dest="clip_norm", help="gradient norm clip (off by default)")
    m = p.add_argument_group("model")
    m.add_argument("--latent-dim", type=int, dest="D")
    m.add_argument("--h-min", type=int, dest="h_min")
    m.add_argument("--transformer-layers", type=int, dest="transformer_layers")
    m.add_argument("--transformer-hidden", type=int, dest="transformer_hidden")
    m.add_argument("--fcb-hidden", help="comma-separated bottleneck widths, e.g. 1000,300")
    m.add_argument("--head-hidden", type=int, dest="head_hidden")
    m.add_argument("--gumbel-temperature", type=float, dest="gumbel_temperature")
    m.add_argument("--no-transformer", action="store_true", help="identity in place of the transformer stacks")
    m.add_argument("--no-mask", action="store_true", help="ignore the bundle contact mask (all-true attention)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="matvae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", help="filter, weight and encode an MSA (plus optional DMS / PDB)")
    p.add_argument("--msa", required=True)
    p.add_argument("--format", choices=["a2m", "fasta"], default="a2m")
    p.add_argument("--dms")
    p.add_argument("--pdb")
    p.add_argument("--chain")
    p.add_argument("--cutoff", type=float, default=structure.DEFAULT_CUTOFF, help="contact distance in Angstrom")
    p.add_argument("--theta", type=float, default=seqdata.DEFAULT_THETA, help="normalised Hamming radius for weights")
    p.add_argument("--threshold", type=float, help="DMS binarisation threshold (default: from DMS_score_bin or median)")
    p.add_argument("--lower-is-fit", action="store_true", help="lower DMS score means fitter")
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train-msa", help="train matVAE on a bundle's MSA")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_msa)

    p = sub.add_parser("train-dms", help="k-fold supervised matENC training on a bundle's DMS")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--standardize", action="store_true", help="z-score DMS scores before training")
    p.add_argument("--overwrite", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_dms)

    p = sub.add_parser("finetune", help="k-fold fine-tuning of a matVAE encoder with a fresh head")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--freeze-encoder", action="store_true", dest="freeze_encoder")
    p.add_argument("--overwrite", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("score", help="zero-shot log-ratio scores of the bundle's DMS variants")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-wild-type", action="store_false", dest="include_wild_type",
                   help="omit the leading wild-type row")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", help="SpearmanR / AUROC of score or cross-validation prediction files")
    p.add_argument("predictions", nargs="+")
    p.add_argument("--out", required=True, help="metrics CSV")
    p.add_argument("--tags", help="CSV with dataset,category,selection_type")
    p.add_argument("--lower-is-fit", action="store_true")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="mean ± std tables from metrics files")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--group-by", choices=["none", "category", "selection_type"], default="none")
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"matvae: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except training.NumericError as exc:
        print(f"matvae: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, ValueError, checkpoint.CheckpointError) as exc:
        print(f"matvae: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

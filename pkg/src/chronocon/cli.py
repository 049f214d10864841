"""Command line entry point: ``chronocon <command> ...``.

Every command is a pure function of its inputs, flags and seeds; outputs are
written with fixed formatting so reruns are byte-identical.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, metrics, pairing
from .config import load_config, with_seed
from .data import Cohort, load_cohort, save_cohort, subsample_labeled_patients
from .losses import SimilarityKind, contrastive_loss
from .synthetic import generate, save_truth
from .training import DAE_ONLY, VARIANTS, Model, finetune, pretrain, scratch

log = logging.getLogger("chronocon")


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return None if not math.isfinite(float(obj)) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, obj) -> None:
    text = json.dumps(_clean(obj), sort_keys=True, indent=1) + "\n"
    Path(path).write_text(text, encoding="utf-8")


class Context:
    def __init__(self, args):
        self.args = args
        self.out_dir = Path(args.out_dir) if args.out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.config = with_seed(load_config(getattr(args, "config", None)), args.seed)

    def path(self, p) -> Path:
        p = Path(p)
        if self.out_dir is not None and not p.is_absolute():
            p = self.out_dir / p
        p.parent.mkdir(parents=True, exist_ok=True)
        return p


def _emit(ctx, text, out):
    if out:
        ctx.path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _test_tables(model: Model, cohort: Cohort, split: str):
    return analysis.score_table(model, cohort, split)


def _write_predictions(ctx, model, cohort, split, pred_out, truth_out):
    table = _test_tables(model, cohort, split)
    if pred_out:
        metrics.save_pred_table(ctx.path(pred_out), table)
    if truth_out:
        metrics.save_truth_table(ctx.path(truth_out), table, cohort.score_max)


# ---------------------------------------------------------------- commands

def cmd_generate(ctx, a):
    cohort, trajectories = generate(ctx.config.cohort)
    save_cohort(cohort, ctx.path(a.out))
    if a.truth:
        save_truth(trajectories, ctx.path(a.truth))
    log.info("wrote %d samples, %d patients", len(cohort.samples), len(cohort.patients()))


def cmd_pretrain(ctx, a):
    cohort = load_cohort(a.cohort)
    model = pretrain(cohort, a.loss, a.dae == "on" or a.loss == DAE_ONLY, ctx.config.train)
    model.save(ctx.path(a.out))


def cmd_finetune(ctx, a):
    cohort = load_cohort(a.cohort)
    cfg = ctx.config.train
    masked = cohort if a.labeled_patients is None else \
        subsample_labeled_patients(cohort, a.labeled_patients, cfg.seed)
    if a.model:
        model = finetune(Model.load(a.model), masked, cfg)
    else:
        model = scratch(masked, cfg)
    model.save(ctx.path(a.out))
    _write_predictions(ctx, model, cohort, a.split, a.pred, a.truth)


def cmd_predict(ctx, a):
    cohort = load_cohort(a.cohort)
    _write_predictions(ctx, Model.load(a.model), cohort, a.split, a.out, a.truth)


def cmd_evaluate(ctx, a):
    table, score_max = metrics.load_tables(a.pred, a.truth)
    baseline = metrics.load_tables(a.baseline_pred, a.truth)[0] if a.baseline_pred else None
    seed = 0 if ctx.args.seed is None else ctx.args.seed
    report = metrics.evaluate_tables(table, score_max or None, B=a.bootstrap, seed=seed,
                                     cluster_by_patient=not a.per_sample, baseline=baseline)
    write_json(ctx.path(a.out), report)


def cmd_sweep(ctx, a):
    cohort = load_cohort(a.cohort)
    spec = ctx.config.sweep
    out = a.sweep_dir or (str(ctx.out_dir) if ctx.out_dir else "sweep")
    spec = replace(spec, out_dir=out, jobs=ctx.args.jobs or spec.jobs)
    if a.repetitions:
        spec = replace(spec, repetitions=a.repetitions)
    if a.n_labeled:
        spec = replace(spec, n_labeled=tuple(int(x) for x in a.n_labeled.split(",")))
    if a.variants:
        spec = replace(spec, variants=tuple(a.variants.split(",")))
    rows = analysis.run_sweep(spec, cohort, ctx.config.train, max_cells=a.max_cells)
    failed = sum(r["status"] != "ok" for r in rows)
    log.info("sweep: %d cells, %d failed", len(rows), failed)


def cmd_analyze(ctx, a):
    cohort = load_cohort(a.cohort)
    result = analysis.analyze_embeddings(Model.load(a.model), cohort, a.split or None)
    analysis.save_embedding_analysis(ctx.path(a.out), _clean(result))


def cmd_report(ctx, a):
    rows = analysis.read_sweep(a.sweep)
    emb = analysis.load_embedding_analysis(a.embeddings) if a.embeddings else None
    analysis.emit_report(rows, emb, ctx.path(Path(a.out) / "summary.md").parent)


def _batch_plan(batch, variant, score):
    samples = list(batch.samples)
    if variant == "chrono":
        return pairing.chrono_pairs(samples)
    if variant == "rnc":
        return pairing.rnc_label_pairs(samples, score)
    if variant == "rnc-t":
        return pairing.rnc_time_pairs(samples)
    if variant == "ordinal-y":
        return pairing.ordinal_label_pairs(samples, score)
    if variant == "simclr":
        return pairing.simclr_pairs(samples)
    raise ValueError(f"no pairing for variant {variant!r}")


def cmd_pairing_dump(ctx, a):
    plan = _batch_plan(load_cohort(a.batch), a.variant, a.score)
    _emit(ctx, plan.dump() + "\n", a.out)


def cmd_loss_eval(ctx, a):
    batch = load_cohort(a.batch)
    plan = _batch_plan(batch, a.variant, a.score)
    X = batch.features()
    V = Model.load(a.model).embed(X) if a.model else X
    sim = SimilarityKind(a.similarity, a.temperature, a.squared)
    out = contrastive_loss(plan, V, sim)
    doc = {"variant": a.variant, "loss": out.value, "terms": len(plan), "forward": plan.n_forward,
           "backward": plan.n_backward, "term_values": list(out.term_values)}
    _emit(ctx, json.dumps(_clean(doc), sort_keys=True, indent=1) + "\n", a.out)


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chronocon", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="override cohort and training seeds")
    p.add_argument("--jobs", type=int, default=None, help="parallel sweep cells")
    p.add_argument("--out-dir", default=None, help="base directory for relative output paths")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, fn, **kw):
        sp = sub.add_parser(name, **kw)
        sp.set_defaults(fn=fn)
        return sp

    sp = cmd("generate", cmd_generate, help="write a synthetic cohort CSV")
    sp.add_argument("--config")
    sp.add_argument("--out", default="cohort.csv")
    sp.add_argument("--truth", help="also write latent severities")

    sp = cmd("pretrain", cmd_pretrain, help="stage-1 contrastive/DAE pretraining")
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--loss", choices=VARIANTS, default="chrono")
    sp.add_argument("--dae", choices=("on", "off"), default="on")
    sp.add_argument("--config")
    sp.add_argument("--out", default="pretrained.json")

    sp = cmd("finetune", cmd_finetune, help="stage-2 regression; without --model trains from scratch")
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--model")
    sp.add_argument("--labeled-patients", type=int)
    sp.add_argument("--config")
    sp.add_argument("--split", default="test")
    sp.add_argument("--out", default="model.json")
    sp.add_argument("--pred", help="write predictions for --split")
    sp.add_argument("--truth", help="write matching truth table")

    sp = cmd("predict", cmd_predict, help="predict scores for one split")
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--out", default="pred.csv")
    sp.add_argument("--truth")

    sp = cmd("evaluate", cmd_evaluate, help="metrics with bootstrap CIs as JSON")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--baseline-pred")
    sp.add_argument("--bootstrap", type=int, default=2000)
    sp.add_argument("--per-sample", action="store_true", help="resample rows instead of patients")
    sp.add_argument("--out", default="report.json")

    sp = cmd("sweep", cmd_sweep, help="label-efficiency sweep (resumable)")
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--config")
    sp.add_argument("--sweep-dir")
    sp.add_argument("--n-labeled", help="comma-separated labeled-patient counts")
    sp.add_argument("--variants", help="comma-separated, e.g. scratch,dae,chrono+dae")
    sp.add_argument("--repetitions", type=int)
    sp.add_argument("--max-cells", type=int, help="stop after this many new cells")

    sp = cmd("analyze-embeddings", cmd_analyze, help="PCA and similarity-vs-label-change tables")
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--out", default="embeddings.json")

    sp = cmd("report", cmd_report, help="plot-ready CSVs and a markdown summary")
    sp.add_argument("--sweep", required=True)
    sp.add_argument("--embeddings")
    sp.add_argument("--out", default="report")

    grp = sub.add_parser("pairing", help="inspect contrastive pair sets")
    gsub = grp.add_subparsers(dest="action", required=True)
    sp = gsub.add_parser("dump")
    sp.set_defaults(fn=cmd_pairing_dump)
    sp.add_argument("--batch", required=True, help="cohort CSV holding one batch")
    sp.add_argument("--variant", default="chrono", choices=("chrono", "rnc", "rnc-t", "ordinal-y", "simclr"))
    sp.add_argument("--score")
    sp.add_argument("--out")

    grp = sub.add_parser("loss", help="evaluate contrastive losses")
    gsub = grp.add_subparsers(dest="action", required=True)
    sp = gsub.add_parser("eval")
    sp.set_defaults(fn=cmd_loss_eval)
    sp.add_argument("--batch", required=True)
    sp.add_argument("--variant", default="chrono", choices=("chrono", "rnc", "rnc-t", "ordinal-y", "simclr"))
    sp.add_argument("--score")
    sp.add_argument("--model", help="embed features first; otherwise features are the embeddings")
    sp.add_argument("--similarity", default="neg_l2", choices=("neg_l2", "cosine"))
    sp.add_argument("--temperature", type=float, default=1.0)
    sp.add_argument("--squared", action="store_true")
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(Context(args), args)
    except (ValueError, KeyError, OSError) as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

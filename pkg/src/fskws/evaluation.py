"""Repeated open-set trials: Acc(target), Acc(total) at the EER threshold, AUROC."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .audio import DspConfig, featurize
from .protonet import pairwise_distances

METRICS = ("acc_target", "acc_total", "auroc")
METRIC_TITLES = {"acc_target": "Acc (target)", "acc_total": "Acc (total)", "auroc": "AUROC"}


def auroc(scores_unknown, scores_known) -> float:
    """P(unknown score > known score), ties counted as one half."""
    u = np.asarray(scores_unknown, dtype=np.float64)
    k = np.sort(np.asarray(scores_known, dtype=np.float64))
    if u.size == 0 or k.size == 0:
        raise ValueError("auroc needs non-empty score lists")
    below = np.searchsorted(k, u, side="left")
    at_or_below = np.searchsorted(k, u, side="right")
    twice = 2 * int(below.sum()) + int((at_or_below - below).sum())
    return twice / (2 * u.size * k.size)


def error_rates(scores_unknown, scores_known, thresholds):
    """FPR (unknowns accepted) and FNR (knowns rejected) for ``accept iff score < t``."""
    u = np.sort(np.asarray(scores_unknown, dtype=np.float64))
    k = np.sort(np.asarray(scores_known, dtype=np.float64))
    t = np.asarray(thresholds, dtype=np.float64)
    fpr = np.searchsorted(u, t, side="left") / u.size
    fnr = 1.0 - np.searchsorted(k, t, side="left") / k.size
    return fpr, fnr


def eer_threshold(scores_unknown, scores_known):
    """Threshold among the distinct scores minimizing |FPR - FNR| (ties -> smaller)."""
    if len(scores_unknown) == 0 or len(scores_known) == 0:
        raise ValueError("eer_threshold needs non-empty score lists")
    cands = np.unique(np.concatenate([np.asarray(scores_unknown, dtype=np.float64),
                                      np.asarray(scores_known, dtype=np.float64)]))
    fpr, fnr = error_rates(scores_unknown, scores_known, cands)
    i = int(np.argmin(np.abs(fpr - fnr)))
    return float(cands[i]), float((fpr[i] + fnr[i]) / 2.0)


@dataclass(frozen=True)
class TrialSpec:
    n_targets: int = 10
    n_unknown: int = 20
    k_shots: int = 5
    n_trials: int = 100
    seed: int = 0
    distance: str = "squared_euclidean"
    threshold_mode: str = "oracle"   # "oracle": EER on the scored queries; "heldout": half/half

    def __post_init__(self):
        if self.n_targets < 1 or self.n_unknown < 1 or self.k_shots < 1 or self.n_trials < 1:
            raise ValueError("trial sizes must be positive")
        if self.threshold_mode not in ("oracle", "heldout"):
            raise ValueError("threshold_mode must be 'oracle' or 'heldout'")


@dataclass
class EmbeddedCorpus:
    """Per-keyword embeddings of the support pool and of the test clips."""
    support: dict
    test: dict

    @property
    def keywords(self):
        return sorted(self.test)


def embed_corpus(corpus, dsp: DspConfig, embed_fn, test_transform=None, rng=None,
                 batch_size: int = 256) -> EmbeddedCorpus:
    """Featurize and embed every clip once; ``test_transform(w, rng)`` corrupts queries."""
    support, test = {}, {}
    for kw in corpus.keywords:
        for split, table, out in (("support", corpus.support, support),
                                  ("test", corpus.test, test)):
            feats = []
            for clip in table.get(kw, []):
                w = clip.load()
                if split == "test" and test_transform is not None:
                    w = test_transform(w, rng)
                feats.append(featurize(w, dsp))
            if feats:
                out[kw] = np.asarray(embed_fn(np.stack(feats)), dtype=np.float64)
            else:
                out[kw] = np.zeros((0, 0))
    return EmbeddedCorpus(support, test)


def run_trial(data: EmbeddedCorpus, spec: TrialSpec, rng: np.random.Generator,
              keep_scores: bool = False) -> dict:
    kws = data.keywords
    need = spec.n_targets + spec.n_unknown
    if need > len(kws):
        raise ValueError(f"need {need} keywords, dataset has {len(kws)}")
    order = rng.choice(len(kws), size=need, replace=False)
    targets = [kws[i] for i in order[:spec.n_targets]]
    unknowns = [kws[i] for i in order[spec.n_targets:]]

    protos = []
    for kw in targets:
        pool = data.support[kw]
        if len(pool) < spec.k_shots:
            raise ValueError(f"keyword {kw!r} has {len(pool)} supports < k={spec.k_shots}")
        pick = rng.choice(len(pool), size=spec.k_shots, replace=False)
        protos.append(pool[pick].mean(axis=0))
    protos = np.stack(protos)

    queries, labels = [], []
    for i, kw in enumerate(targets):
        queries.append(data.test[kw])
        labels += [i] * len(data.test[kw])
    for kw in unknowns:
        queries.append(data.test[kw])
        labels += [-1] * len(data.test[kw])
    queries = np.concatenate(queries)
    labels = np.asarray(labels)

    d = pairwise_distances(queries, protos, spec.distance)
    cand = np.argmin(d, axis=1)
    score = d[np.arange(len(d)), cand]
    known = labels >= 0

    if spec.threshold_mode == "heldout":
        fit = np.zeros(len(labels), dtype=bool)
        fit[rng.permutation(len(labels))[: len(labels) // 2]] = True
    else:
        fit = np.ones(len(labels), dtype=bool)
    d_th, eer = eer_threshold(score[fit & ~known], score[fit & known])
    ev = ~fit if spec.threshold_mode == "heldout" else fit

    pred = np.where(score < d_th, cand, -1)
    ev_known = ev & known
    record = {
        "targets": targets,
        "acc_target": 100.0 * float(np.mean(cand[ev_known] == labels[ev_known])),
        "acc_total": 100.0 * float(np.mean(pred[ev] == labels[ev])),
        "auroc": 100.0 * auroc(score[ev & ~known], score[ev_known]),
        "d_th": d_th,
        "eer": eer,
        "n_queries": int(ev.sum()),
    }
    if keep_scores:
        record["_scores"] = (score[ev & ~known], score[ev_known])
    return record


@dataclass
class EvalReport:
    trials: list
    summary: dict              # metric -> (mean %, 95% half-width %)
    k_shots: int = 0
    method: str = ""

    def row(self):
        return {m: self.summary[m] for m in METRICS}


def aggregate(trials, k_shots: int = 0, method: str = "") -> EvalReport:
    if len(trials) < 2:
        raise ValueError("aggregate needs at least 2 trials")
    summary = {}
    for m in METRICS:
        v = np.array([t[m] for t in trials], dtype=np.float64)
        half = 1.96 * v.std(ddof=1) / np.sqrt(len(v))
        summary[m] = (float(v.mean()), float(half))
    return EvalReport(list(trials), summary, k_shots, method)


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng([seed, trial])


def evaluate(data: EmbeddedCorpus, spec: TrialSpec, method: str = "") -> EvalReport:
    """``spec.n_trials`` independent trials; trial i draws from ``[seed, i]``."""
    trials = [run_trial(data, spec, trial_rng(spec.seed, i), keep_scores=(i == 0))
              for i in range(spec.n_trials)]
    return aggregate(trials, spec.k_shots, method)


def format_table(reports) -> str:
    """Method x K rows with mean±CI for each metric, all in %."""
    header = f"{'Method':<24} {'K':>3}  " + "  ".join(f"{METRIC_TITLES[m]:>14}" for m in METRICS)
    lines = [header, "-" * len(header)]
    for r in reports:
        cells = "  ".join(f"{r.summary[m][0]:>7.1f}±{r.summary[m][1]:<6.2f}" for m in METRICS)
        lines.append(f"{r.method:<24} {r.k_shots:>3}  {cells}")
    return "\n".join(lines) + "\n"


def report_records(reports):
    """Line-delimited JSON: one record per trial, then one summary per report."""
    for r in reports:
        for i, t in enumerate(r.trials):
            fields = {k: v for k, v in t.items() if not k.startswith("_")}
            yield json.dumps({"kind": "trial", "method": r.method, "k": r.k_shots,
                              "trial": i, **fields}, sort_keys=True)
        yield json.dumps({"kind": "summary", "method": r.method, "k": r.k_shots,
                          **{m: {"mean": r.summary[m][0], "ci95": r.summary[m][1]}
                             for m in METRICS}}, sort_keys=True)

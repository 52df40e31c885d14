"""Ablation variants and the train-then-evaluate pipeline shared by the CLI and the scripts."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import evalsuite as ev
from . import features as ft
from .dataset import Dataset
from .trainer import DasModel, TrainConfig, fit

_NO_VIEWS = dict(use_u2i=False, use_view=False, use_cooccur=False)

VARIANTS: dict[str, dict] = {
    "no-align": dict(_NO_VIEWS),
    "biased": dict(debiased=False, gamma=0.0),
    "debiased": dict(_NO_VIEWS, use_u2i=True),
    "minus-dual-u2i": dict(use_u2i=False),
    "minus-dual-view": dict(use_view=False),
    "minus-cooccur": dict(use_cooccur=False),
    "full": {},
}

# alignment views stacked one at a time
STACK = ("no-align", "debiased", "minus-cooccur", "full")
SINGLE_ABLATIONS = ("minus-dual-u2i", "minus-dual-view", "minus-cooccur")


def variant_config(base: TrainConfig, name: str) -> TrainConfig:
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {list(VARIANTS)}")
    return replace(base, **VARIANTS[name])


@dataclass
class EvalConfig:
    k: int = 100
    n_neg: int = 99
    full_pool: bool = False
    probe: ft.ProbeConfig = None
    probe_features: str = "all"

    def __post_init__(self):
        if self.probe is None:
            self.probe = ft.ProbeConfig()


def probe_auc(data: Dataset, toggles: ft.FeatureToggles, reps: ev.EntityRepresentations | None,
              probe: ft.ProbeConfig) -> float:
    kw = {}
    if reps is not None:
        kw = dict(user_codes=reps.user_codes, ad_codes=reps.ad_codes, z_u=reps.z_u, z_i=reps.z_i)
    train = ft.featurize(data, data.train_rows, toggles, **kw)
    test = ft.featurize(data, data.test_rows, toggles, **kw)
    return ft.ctr_probe(train, test, probe)


def evaluate(model: DasModel, data: Dataset, config: EvalConfig | None = None, seed: int = 0,
             probe: bool = True) -> dict:
    """Retrieval on held-out click pairs, level-wise codebook statistics and the CTR probe."""
    config = config or EvalConfig()
    reps = ev.entity_representations(model, data)
    pairs = data.heldout_pairs()
    retrieval = ev.retrieval_tasks(reps, pairs, config.k, config.n_neg, seed, config.full_pool)
    n = model.config.N
    codebooks = {side: [ev.codebook_stats(codes, level, n) for level in range(1, model.config.L + 1)]
                 for side, codes in (("user", reps.user_codes), ("ad", reps.ad_codes))}
    report = {"retrieval": retrieval, "codebooks": codebooks}
    if probe:
        toggles = ft.FeatureToggles.parse(config.probe_features)
        report["probe_auc"] = probe_auc(data, toggles, reps, config.probe)
    return report


def baseline_probe_auc(data: Dataset, config: EvalConfig | None = None) -> float:
    """Probe AUC with id features only (no SID input)."""
    config = config or EvalConfig()
    return probe_auc(data, ft.ID_ONLY, None, config.probe)


def summary_row(name: str, report: dict) -> dict:
    r, cb = report["retrieval"], report["codebooks"]
    row = {
        "variant": name,
        "auc_cu_int_zi": r["cu_int_zi"].auc,
        "auc_zu_ci_pro": r["zu_ci_pro"].auc,
        "recall_cu_int_zi": r["cu_int_zi"].recall,
        "recall_zu_ci_pro": r["zu_ci_pro"].recall,
        "ppl_user_l1": cb["user"][0].perplexity,
        "usage_user_l1": cb["user"][0].usage_rate,
        "ppl_ad_l1": cb["ad"][0].perplexity,
        "usage_ad_l1": cb["ad"][0].usage_rate,
    }
    if "probe_auc" in report:
        row["probe_auc"] = report["probe_auc"]
    return row


def run_variant(data: Dataset, base: TrainConfig, name: str, eval_config: EvalConfig | None = None,
                probe: bool = True) -> dict:
    cfg = variant_config(base, name)
    t0 = time.perf_counter()
    result = fit(data, cfg)
    report = evaluate(result.model, data, eval_config, seed=cfg.seed, probe=probe)
    row = summary_row(name, report)
    row["seconds"] = time.perf_counter() - t0
    return {"row": row, "report": report, "result": result}


def median_by_variant(rows: list[dict], key: str) -> dict[str, float]:
    out: dict[str, list[float]] = {}
    for r in rows:
        out.setdefault(r["variant"], []).append(r[key])
    return {k: float(np.median(v)) for k, v in out.items()}

"""Protocol runner: base training, incremental sessions, routing, records.

Session order per incremental task: embed the session's samples with the
frozen prefix-free backbone, fit and accumulate Gaussian statistics
(optionally enriched by pseudo-labeled test-pool embeddings), train the
session's prediction network on outlier pairs, refine the routing
statistics, extend the classifier with rows initialized from the refined
prototypes, then train the session's prefixes together with those new rows.
Evaluation routes every test sample through the shared-covariance ranking to
pick a session's prefixes before the stochastic head predicts the label.
"""

from __future__ import annotations

import datetime
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .base_trainer import class_prototypes, embed_all, linear_probe, train_base
from .config import RunConfig
from .delta_params import PrefixSet, train_session, trainable_fraction
from .errors import ArgumentError
from .events import EventLog
from .harness import (
    ArrayDataset,
    SessionDataVault,
    build_fscil_splits,
    check_disjoint,
    compute_metrics,
    generate_blobs,
    load_idx_dataset,
)
from .numerics import SeededRng, Tensor, no_grad
from .optim import make_optimizer
from .prototype_rectification import (
    PredictionNet,
    merge_pairs,
    pseudo_label,
    refine_gaussian_stats,
    select_outlier_pairs,
    train_prediction_net,
)
from .stochastic_classifier import init_means_from_prototypes
from .task_inference import SharedCovariance, accumulate_covariance, fit_class_stats, select_class_batch

ABLATION_TOGGLES = ("ssl", "prediction_net", "stochastic_head", "delta_params")


@dataclass
class RunRecord:
    """Everything one run produced, minus raw samples."""

    config: dict
    seed: int
    session_results: list
    metrics: dict
    trainable_fractions: list = field(default_factory=list)
    bayes_accuracy: float | None = None
    probe_accuracy: float | None = None
    started_at: str = ""
    finished_at: str = ""

    def content_hash(self) -> str:
        payload = {
            "config": self.config,
            "seed": self.seed,
            "session_results": self.session_results,
            "metrics": self.metrics,
            "trainable_fractions": self.trainable_fractions,
            "bayes_accuracy": self.bayes_accuracy,
            "probe_accuracy": self.probe_accuracy,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "seed": self.seed,
            "session_results": self.session_results,
            "metrics": self.metrics,
            "trainable_fractions": self.trainable_fractions,
            "bayes_accuracy": self.bayes_accuracy,
            "probe_accuracy": self.probe_accuracy,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "content_hash": self.content_hash(),
        }


def build_dataset(config: RunConfig, seed: int) -> ArrayDataset:
    ds = config.dataset
    if ds.kind == "blobs":
        blob_seed = ds.seed if ds.seed is not None else seed
        return generate_blobs(ds.classes, ds.dim, ds.train_per_class, ds.separation, blob_seed, test_per_class=ds.test_per_class)
    return load_idx_dataset(ds.train_images, ds.train_labels, ds.test_images, ds.test_labels)


class _ProtocolState:
    """Mutable per-run state: stats, prefixes, prediction nets, head rows."""

    def __init__(self):
        self.gaussians_by_session: dict[int, list] = {}
        self.scatter_by_session: dict[int, np.ndarray] = {}
        self.prefixes: dict[int, PrefixSet] = {}
        self.prednets: dict[int, PredictionNet] = {}
        self.covariance: SharedCovariance | None = None

    def all_gaussians(self) -> list:
        out = []
        for k in sorted(self.gaussians_by_session):
            out.extend(self.gaussians_by_session[k])
        return out

    def rebuild_covariance(self):
        self.covariance = None
        for k in sorted(self.scatter_by_session):
            self.covariance = accumulate_covariance(self.covariance, self.scatter_by_session[k], k)

    def set_session_stats(self, session: int, gaussians: list, scatter: np.ndarray):
        self.gaussians_by_session[session] = gaussians
        self.scatter_by_session[session] = scatter
        self.rebuild_covariance()


def _fit_session_stats(state, encoder, view_images, remapped_labels, session, pool_x, config, toggles, rng, log):
    """Fit (and optionally pseudo-enrich and rectify) one session's statistics.

    Returns the embeddings/labels the statistics were fitted on, so the head
    extension can reuse the refined prototypes.
    """
    tc = config.training
    metric = config.resolved_metric()
    embeddings = embed_all(encoder, view_images)
    gaussians, scatter = fit_class_stats(embeddings, remapped_labels, session)
    state.set_session_stats(session, gaussians, scatter)

    stats_x, stats_y = embeddings, np.asarray(remapped_labels)
    session_classes = sorted(set(int(c) for c in remapped_labels))
    pseudo_x = np.zeros((0, embeddings.shape[1]))
    pseudo_y = np.zeros(0, dtype=int)

    wants_pseudo = tc.pseudo_stats == "all" or (tc.pseudo_stats == "inc" and session > 0)
    prednet_pseudo = tc.pseudo_prednet == "all" or (tc.pseudo_prednet == "inc" and session > 0)
    if (wants_pseudo or prednet_pseudo) and len(pool_x):
        pool_emb = embed_all(encoder, pool_x)
        assigned = pseudo_label(pool_emb, state.all_gaussians(), state.covariance, metric)
        keep = np.isin(assigned, session_classes)  # only this session's classes; past embeddings are gone
        pseudo_x, pseudo_y = pool_emb[keep], assigned[keep]

    if wants_pseudo and len(pseudo_x):
        stats_x = np.concatenate([embeddings, pseudo_x])
        stats_y = np.concatenate([stats_y, pseudo_y])
        gaussians, scatter = fit_class_stats(stats_x, stats_y, session)
        state.set_session_stats(session, gaussians, scatter)

    if "prediction_net" not in toggles:
        n_out = tc.outliers_base if session == 0 else tc.outliers_inc
        by_class = {g.class_id: g for g in gaussians}
        parts = []
        for cls in session_classes:
            rows = embeddings[np.asarray(remapped_labels) == cls]
            parts.append(select_outlier_pairs(rows, by_class[cls].mean, min(n_out, len(rows)), lenient=True))
        if prednet_pseudo and len(pseudo_x):
            from .prototype_rectification import OutlierPairs

            targets = np.stack([by_class[int(c)].mean for c in pseudo_y])
            parts.append(OutlierPairs(inputs=pseudo_x, targets=targets, per_class=0))
        pairs = merge_pairs(parts)
        net = PredictionNet(embeddings.shape[1], session, rng.child("prednet"), depth=tc.prednet_depth)
        train_prediction_net(net, pairs, tc, rng.child("prednet_train"), log=log, session=session)
        state.prednets[session] = net
        refined, refined_scatter = refine_gaussian_stats(net, stats_x, stats_y, gaussians)
        state.set_session_stats(session, refined, refined_scatter)
    return embeddings


def _finetune_backbone_session(view, remapped, encoder, head, new_rows, tc, rng, log, session):
    """Delta-parameter ablation path: no prefixes, the backbone itself trains."""
    from .base_trainer import cross_entropy_loss

    encoder.set_requires_grad(True)
    head.set_requires_grad(False)
    head.set_requires_grad(True, classes=new_rows)
    params = list(encoder.params().values()) + [head.mu[m] for m in new_rows] + [head.sigma[m] for m in new_rows]
    opt = make_optimizer(tc.optimizer, [{"params": params, "lr": tc.inc_lr, "weight_decay": tc.inc_weight_decay}])
    encoder.eval()  # keep running stats frozen; gradients still flow
    n = len(view.images)
    batch = min(tc.inc_batch_size, n)
    for epoch in range(tc.inc_epochs):
        order = rng.child("shuffle", f"epoch{epoch}").permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            z = encoder.forward(Tensor(view.images[idx]))
            loss = cross_entropy_loss(head, z, remapped[idx], rng.child("eps", f"e{epoch}", f"b{start}"), noise=tc.head_noise_train)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        if log is not None:
            log.emit(phase="incremental", session=session, epoch=epoch, key="loss", value=total / n)
    encoder.set_requires_grad(False)


def _evaluate(encoder, head, state, pool_x, metric, config, rng, use_prefixes: bool):
    """Route every pool sample to a session, then predict with the head."""
    tc = config.training
    pool_emb = embed_all(encoder, pool_x)
    _, routed_sessions = select_class_batch(pool_emb, state.all_gaussians(), state.covariance, metric)
    predictions = np.full(len(pool_x), -1, dtype=int)
    for sess in sorted(set(routed_sessions.tolist())):
        idx = np.flatnonzero(routed_sessions == sess)
        prefixes = state.prefixes.get(sess) if use_prefixes else None
        z = embed_all(encoder, pool_x[idx], prefixes=prefixes)
        preds = head.predict_label(Tensor(z), rng=rng.child(f"eval{sess}"), noise=tc.head_noise_eval)
        predictions[idx] = np.atleast_1d(preds)
    return predictions


def run_protocol(
    dataset: ArrayDataset,
    specs: list,
    config: RunConfig,
    seed: int,
    log: EventLog | None = None,
    toggles=frozenset(),
):
    """Execute the full incremental protocol; returns (RunRecord, artifacts)."""
    toggles = frozenset(toggles)
    unknown = toggles - set(ABLATION_TOGGLES)
    if unknown:
        raise ArgumentError(f"unknown ablation toggles: {sorted(unknown)}")
    check_disjoint(specs)
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()

    tc = config.training
    if "stochastic_head" in toggles:
        from dataclasses import replace

        tc = replace(tc, head_noise_train=False, head_noise_eval=False)
        config = RunConfig(model=config.model, training=tc, dataset=config.dataset, split=config.split, metric=config.metric)
    use_prefixes = "delta_params" not in toggles and config.model.prefix_capable
    metric = config.resolved_metric()

    rng = SeededRng(seed)
    vault = SessionDataVault(dataset, specs)
    state = _ProtocolState()

    # global label order: base classes first, then each session's, all sorted
    order = [c for spec in specs for c in spec.label_set]
    remap = {c: i for i, c in enumerate(order)}
    original = {i: c for c, i in remap.items()}
    class_to_task = {c: spec.session for spec in specs for c in spec.label_set}

    session_results = []
    trainable_fractions = []
    probe_accuracy = None
    encoder = head = None

    for spec in specs:
        k = spec.session
        view = vault.open(k)
        remapped = np.array([remap[int(c)] for c in view.labels])
        pool_x, pool_y = vault.test_pool(k)

        if k == 0:
            encoder, head, teacher, _ = train_base(
                view.images, remapped, config.model, tc, rng.child("base"), log=log, skip_ssl="ssl" in toggles
            )
            encoder.set_requires_grad(False)
            encoder.eval()
            if tc.run_probe:
                _, probe_accuracy = linear_probe(teacher, view.images, remapped, tc, rng.child("probe"), log=log)
            new_rows = list(range(head.num_classes))
            if use_prefixes:
                prefixes = PrefixSet(k, config.model.layers, tc.prefix_len, config.model.embed_dim, rng.child(f"prefix{k}"))
                state.prefixes[k] = prefixes
                train_session(view.images, remapped, encoder, head, prefixes, new_rows, tc, rng.child(f"session{k}"), log=log, session=k)
                trainable_fractions.append(trainable_fraction(prefixes, [head.mu[m] for m in new_rows] + [head.sigma[m] for m in new_rows], encoder))
            _fit_session_stats(state, encoder, view.images, remapped, k, pool_x, config, toggles, rng.child(f"stats{k}"), log)
        else:
            embeddings = _fit_session_stats(state, encoder, view.images, remapped, k, pool_x, config, toggles, rng.child(f"stats{k}"), log)
            session_classes = sorted(set(int(c) for c in remapped))
            by_class = {g.class_id: g for g in state.gaussians_by_session[k]}
            if "prediction_net" not in toggles and tc.rectify_head_means:
                prototypes = {cls: by_class[cls].mean for cls in session_classes}  # refined prototypes
            else:
                prototypes = {cls: embeddings[remapped == cls].mean(axis=0) for cls in session_classes}
            new_rows = list(range(head.num_classes, head.num_classes + len(session_classes)))
            init_means_from_prototypes(head, prototypes)
            if use_prefixes:
                prefixes = PrefixSet(k, config.model.layers, tc.prefix_len, config.model.embed_dim, rng.child(f"prefix{k}"))
                state.prefixes[k] = prefixes
                train_session(view.images, remapped, encoder, head, prefixes, new_rows, tc, rng.child(f"session{k}"), log=log, session=k)
                trainable_fractions.append(trainable_fraction(prefixes, [head.mu[m] for m in new_rows] + [head.sigma[m] for m in new_rows], encoder))
            else:
                _finetune_backbone_session(view, remapped, encoder, head, new_rows, tc, rng.child(f"session{k}"), log, k)

        view.close()

        predictions = _evaluate(encoder, head, state, pool_x, metric, config, rng.child(f"evalrng{k}"), use_prefixes)
        pred_original = [int(original[int(p)]) for p in predictions]
        true_original = [int(c) for c in pool_y]
        accuracy = 100.0 * sum(1 for p, t in zip(pred_original, true_original) if p == t) / len(true_original)
        session_results.append(
            {
                "session": k,
                "n_test": len(true_original),
                "accuracy": accuracy,
                "predictions": pred_original,
                "labels": true_original,
            }
        )
        if log is not None:
            log.emit(phase="evaluate", session=k, epoch=0, key="accuracy", value=accuracy)

    metrics = compute_metrics(
        [r["predictions"] for r in session_results],
        [r["labels"] for r in session_results],
        class_to_task,
    )
    record = RunRecord(
        config=config.to_dict(),
        seed=seed,
        session_results=session_results,
        metrics=metrics.to_dict(),
        trainable_fractions=trainable_fractions,
        bayes_accuracy=dataset.bayes_accuracy,
        probe_accuracy=probe_accuracy,
        started_at=started,
        finished_at=datetime.datetime.now(datetime.timezone.utc).isoformat(),
    )
    artifacts = {
        "encoder": encoder,
        "head": head,
        "prefixes": state.prefixes,
        "gaussians": state.gaussians_by_session,
        "covariance": state.covariance,
        "prednets": state.prednets,
    }
    return record, artifacts


def save_run(out_dir, config: RunConfig, record: RunRecord, artifacts: dict):
    """One directory per run: config, metrics, record, per-session artifacts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.json")
    with open(out / "metrics.json", "w") as fh:
        json.dump(record.metrics, fh, indent=2, sort_keys=True)
    with open(out / "record.json", "w") as fh:
        json.dump(record.to_dict(), fh, indent=2, sort_keys=True)

    from .backbone import save_state

    save_state(out / "checkpoint.json", {"encoder": artifacts["encoder"], "head": artifacts["head"]})
    sessions_dir = out / "sessions"
    sessions_dir.mkdir(exist_ok=True)
    for k, gaussians in artifacts["gaussians"].items():
        payload = {
            "session": k,
            "gaussians": [
                {"class_id": g.class_id, "session": g.session, "count": g.count, "mean": g.mean.tolist()} for g in gaussians
            ],
        }
        if k in artifacts["prefixes"]:
            payload["prefixes"] = {name: p.data.tolist() for name, p in artifacts["prefixes"][k].params().items()}
        if k in artifacts["prednets"]:
            payload["prediction_net"] = {name: p.data.tolist() for name, p in artifacts["prednets"][k].params().items()}
        with open(sessions_dir / f"session_{k}.json", "w") as fh:
            json.dump(payload, fh)
    if artifacts["covariance"] is not None:
        with open(out / "covariance.json", "w") as fh:
            json.dump({"matrix": artifacts["covariance"].matrix.tolist(), "sessions": artifacts["covariance"].sessions}, fh)


def run_from_config(config: RunConfig, seed: int, out_dir=None, toggles=frozenset()):
    """Build the dataset and splits from `config`, run, optionally persist."""
    dataset = build_dataset(config, seed)
    specs = build_fscil_splits(
        dataset.train_y, dataset.test_y, config.split.base_classes, config.split.ways, config.split.shots, seed
    )
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        log = EventLog(Path(out_dir) / "events.jsonl")
    else:
        log = EventLog(None)
    try:
        record, artifacts = run_protocol(dataset, specs, config, seed, log=log, toggles=toggles)
    finally:
        log.close()
    if out_dir:
        save_run(out_dir, config, record, artifacts)
    return record, artifacts


def run_many(config: RunConfig, seeds, toggles=frozenset()):
    """Run several seeds; aggregate mean and std of the headline metrics."""
    records = [run_from_config(config, s, toggles=toggles)[0] for s in seeds]
    acc = [r.metrics["average_accuracy"] for r in records]
    forget = [r.metrics["average_forgetting"] for r in records]
    f1 = [r.metrics["macro_f1"] for r in records]
    summary = {
        "seeds": list(seeds),
        "average_accuracy_mean": float(np.mean(acc)),
        "average_accuracy_std": float(np.std(acc)),
        "average_forgetting_mean": float(np.mean(forget)),
        "average_forgetting_std": float(np.std(forget)),
        "macro_f1_mean": float(np.mean(f1)),
        "macro_f1_std": float(np.std(f1)),
    }
    return records, summary


def run_ablation(config: RunConfig, without: str | None, seeds) -> dict:
    """Paired full-vs-ablated runs; returns a side-by-side metric report."""
    if without is not None and without not in ABLATION_TOGGLES:
        raise ArgumentError(f"unknown ablation toggle {without!r}; expected one of {ABLATION_TOGGLES}")
    base_records, base_summary = run_many(config, seeds)
    report = {
        "toggle": without,
        "baseline": base_summary,
        "baseline_per_seed": [
            {"seed": r.seed, "average_accuracy": r.metrics["average_accuracy"], "average_forgetting": r.metrics["average_forgetting"]}
            for r in base_records
        ],
    }
    if without is not None:
        ablated_records, ablated_summary = run_many(config, seeds, toggles=frozenset({without}))
        report["ablated"] = ablated_summary
        report["ablated_per_seed"] = [
            {"seed": r.seed, "average_accuracy": r.metrics["average_accuracy"], "average_forgetting": r.metrics["average_forgetting"]}
            for r in ablated_records
        ]
        report["delta"] = {
            "average_accuracy": ablated_summary["average_accuracy_mean"] - base_summary["average_accuracy_mean"],
            "average_forgetting": ablated_summary["average_forgetting_mean"] - base_summary["average_forgetting_mean"],
        }
    return report


def format_ablation_report(report: dict) -> str:
    lines = [f"{'arm':<22}{'avg acc':>10}{'forgetting':>12}{'macro F1':>10}"]
    base = report["baseline"]
    lines.append(f"{'full system':<22}{base['average_accuracy_mean']:>10.2f}{base['average_forgetting_mean']:>12.2f}{base['macro_f1_mean']:>10.3f}")
    if "ablated" in report:
        ab = report["ablated"]
        lines.append(
            f"{'without ' + report['toggle']:<22}{ab['average_accuracy_mean']:>10.2f}{ab['average_forgetting_mean']:>12.2f}{ab['macro_f1_mean']:>10.3f}"
        )
        lines.append(
            f"{'delta':<22}{report['delta']['average_accuracy']:>10.2f}{report['delta']['average_forgetting']:>12.2f}"
        )
    return "\n".join(lines)

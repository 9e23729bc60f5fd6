"""End-to-end runs behind the service endpoints and the CLI.

Each runner takes manifest text plus config values, performs the full
seeded pipeline (split, train, evaluate, census, ...) and returns the
artifacts as strings or bytes; callers decide where they land on disk.
All randomness is derived from the single run seed, so a runner called
twice with the same inputs produces byte-identical artifacts.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import census as census_mod
from . import data as data_mod
from . import evaluation, model, optim
from .losses import (
    LossConfig,
    contrastive_grad,
    contrastive_loss,
    triplet_grad,
    triplet_loss,
)
from .rng import RngStream

RESULTS_HEADER = "dataset,loss_kind,model_tag,map1_mean,map1_std,map5_mean,map5_std,fold"


@dataclass(frozen=True)
class ModelSpec:
    hidden_dims: tuple[int, ...] = (64,)
    embedding_dim: int = 128
    l2_normalize: bool = False

    def dims_for(self, input_dim: int) -> list[int]:
        return [input_dim, *self.hidden_dims, self.embedding_dim]


def dataset_input_dim(manifest: data_mod.Manifest, image_root=None) -> int:
    """Feature dimension of the dataset; inline dims must agree."""
    if not manifest.samples:
        raise data_mod.DataError("manifest has no samples")
    dims = {s.features.shape[0] for s in manifest.samples if s.is_inline}
    if len(dims) > 1:
        raise data_mod.DataError(f"inline feature dims disagree: {sorted(dims)}")
    if dims:
        return dims.pop()
    return data_mod.sample_features(manifest.samples[0], image_root).shape[0]


# ---------------------------------------------------------------------------
# synth / split


@dataclass
class SynthResult:
    manifest_csv: str
    num_entries: int
    num_individuals: int


def run_synth(
    num_individuals: int,
    images_per_individual: int,
    feature_dim: int,
    cluster_spread: float,
    inter_cluster_distance: float,
    seed: int,
    species_tag: str = "synthetic",
) -> SynthResult:
    manifest = data_mod.synth_dataset(
        num_individuals,
        images_per_individual,
        feature_dim,
        cluster_spread,
        inter_cluster_distance,
        RngStream(seed),
        species_tag=species_tag,
    )
    return SynthResult(
        data_mod.manifest_to_csv(manifest), len(manifest), len(manifest.individual_ids())
    )


@dataclass
class SplitResult:
    plan_csv: str
    fold_summaries: list[dict]
    notes: list[str]


def run_split(manifest: data_mod.Manifest, cfg: data_mod.SplitConfig) -> SplitResult:
    plan = data_mod.five_fold_plan(manifest, cfg)
    counts = manifest.image_counts()
    summaries = []
    for fold in range(plan.folds):
        roles = plan.role_sets(fold)
        summary = {"fold": fold}
        for role in data_mod.ROLES:
            ids = roles[role]
            summary[f"{role}_individuals"] = len(ids)
            summary[f"{role}_images"] = sum(counts[i] for i in ids)
        summaries.append(summary)
    return SplitResult(plan.to_csv(), summaries, plan.notes)


# ---------------------------------------------------------------------------
# train


@dataclass
class TrainResult:
    checkpoint: bytes
    loss_log_csv: str
    model_tag: str
    input_dim: int
    epochs_run: int
    final_train_loss: float
    final_val_loss: float | None
    split_counts: dict


def run_train(
    manifest: data_mod.Manifest,
    *,
    seed: int,
    loss_kind: str,
    split_cfg: data_mod.SplitConfig,
    fold: int = 0,
    model_spec: ModelSpec = ModelSpec(),
    loss_cfg: LossConfig = LossConfig(),
    optim_cfg: optim.OptimConfig = optim.OptimConfig(),
    sampler_cfg: optim.SamplerConfig = optim.SamplerConfig(),
    augment_cfg: data_mod.AugmentConfig | None = None,
    image_root=None,
    early_stop_patience: int | None = None,
) -> TrainResult:
    """Split, train on the fold's train portion, monitor its val portion."""
    train_m, val_m, _ = data_mod.split_by_individual(manifest, split_cfg, fold)
    input_dim = dataset_input_dim(train_m, image_root)
    root = RngStream(seed)
    net = model.init(
        model_spec.dims_for(input_dim), root.derive(1), model_spec.l2_normalize
    )
    log = optim.train(
        net,
        train_m,
        loss_kind,
        optim_cfg,
        root.derive(2),
        loss_cfg=loss_cfg,
        sampler=sampler_cfg,
        val_dataset=val_m,
        augment_cfg=augment_cfg,
        image_root=image_root,
        early_stop_patience=early_stop_patience,
    )
    return TrainResult(
        checkpoint=model.net_to_bytes(net),
        loss_log_csv=optim.loss_log_to_csv(log),
        model_tag=net.tag(),
        input_dim=input_dim,
        epochs_run=len(log),
        final_train_loss=log[-1].train_loss,
        final_val_loss=log[-1].val_loss,
        split_counts={
            "train_images": len(train_m),
            "val_images": len(val_m),
            "train_individuals": len(train_m.individual_ids()),
            "val_individuals": len(val_m.individual_ids()),
        },
    )


# ---------------------------------------------------------------------------
# eval


@dataclass
class EvalRow:
    dataset: str
    loss_kind: str
    model_tag: str
    map1_mean: float
    map1_std: float
    map5_mean: float
    map5_std: float
    fold: str


@dataclass
class EvalResult:
    results_csv: str
    rows: list[EvalRow]


def _rows_to_csv(rows: list[EvalRow]) -> str:
    lines = [RESULTS_HEADER]
    for r in rows:
        lines.append(
            f"{r.dataset},{r.loss_kind},{r.model_tag},"
            f"{repr(r.map1_mean)},{repr(r.map1_std)},"
            f"{repr(r.map5_mean)},{repr(r.map5_std)},{r.fold}"
        )
    return "\n".join(lines) + "\n"


def _eval_net_on(
    net: model.EmbeddingNet,
    test_m: data_mod.Manifest,
    repetitions: int,
    ap_mode: str,
    eval_seed: int,
    image_root=None,
) -> dict[int, evaluation.MapEstimate]:
    cfg = evaluation.EvalConfig(
        repetitions=repetitions, k_values=(1, 5), seed=eval_seed, ap_mode=ap_mode
    )
    return evaluation.map_at_k(test_m, net, cfg, image_root)


def run_eval(
    manifest: data_mod.Manifest,
    *,
    seed: int,
    loss_kind: str,
    split_cfg: data_mod.SplitConfig,
    model_spec: ModelSpec = ModelSpec(),
    loss_cfg: LossConfig = LossConfig(),
    optim_cfg: optim.OptimConfig = optim.OptimConfig(),
    sampler_cfg: optim.SamplerConfig = optim.SamplerConfig(),
    augment_cfg: data_mod.AugmentConfig | None = None,
    repetitions: int = 1000,
    ap_mode: str = "ap",
    checkpoint: bytes | None = None,
    fold: int | None = None,
    image_root=None,
) -> EvalResult:
    """Closed-set mAP over the fold protocol.

    Without a checkpoint this is the full protocol: per fold, train a
    fresh net on the fold's train split and evaluate its test split, then
    append the across-fold mean row.  With a checkpoint, only that fold's
    test split is evaluated with the given net.
    """
    dataset = manifest.species_tag or "dataset"
    rows: list[EvalRow] = []
    root = RngStream(seed)

    def make_row(
        est: dict[int, evaluation.MapEstimate], tag: str, fold_label: str
    ) -> EvalRow:
        return EvalRow(
            dataset,
            loss_kind,
            tag,
            est[1].mean,
            est[1].std,
            est[5].mean,
            est[5].std,
            fold_label,
        )

    if checkpoint is not None:
        the_fold = 0 if fold is None else fold
        net = model.net_from_bytes(checkpoint)
        _, _, test_m = data_mod.split_by_individual(manifest, split_cfg, the_fold)
        est = _eval_net_on(
            net, test_m, repetitions, ap_mode,
            root.derive(1000 + the_fold).seed, image_root,
        )
        rows.append(make_row(est, net.tag(), str(the_fold)))
        return EvalResult(_rows_to_csv(rows), rows)

    for f in range(split_cfg.folds):
        train_res = run_train(
            manifest,
            seed=RngStream(seed).derive(10 + f).seed,
            loss_kind=loss_kind,
            split_cfg=split_cfg,
            fold=f,
            model_spec=model_spec,
            loss_cfg=loss_cfg,
            optim_cfg=optim_cfg,
            sampler_cfg=sampler_cfg,
            augment_cfg=augment_cfg,
            image_root=image_root,
        )
        net = model.net_from_bytes(train_res.checkpoint)
        _, _, test_m = data_mod.split_by_individual(manifest, split_cfg, f)
        est = _eval_net_on(
            net, test_m, repetitions, ap_mode, root.derive(1000 + f).seed, image_root
        )
        rows.append(make_row(est, net.tag(), str(f)))
    mean_row = EvalRow(
        dataset,
        loss_kind,
        rows[0].model_tag,
        float(np.mean([r.map1_mean for r in rows])),
        float(np.mean([r.map1_std for r in rows])),
        float(np.mean([r.map5_mean for r in rows])),
        float(np.mean([r.map5_std for r in rows])),
        "mean",
    )
    rows.append(mean_row)
    return EvalResult(_rows_to_csv(rows), rows)


# ---------------------------------------------------------------------------
# census


@dataclass
class CensusRunResult:
    report_csv: str
    estimated_population: int
    true_population: int | None
    assignment_precision: float | None
    assignment_recall: float | None
    threshold_used: float
    calibration_accuracy: float | None


def run_census(
    sightings: data_mod.Manifest,
    *,
    checkpoint: bytes | None = None,
    threshold: float | None = None,
    calibrate_manifest: data_mod.Manifest | None = None,
    max_exemplars_per_id: int = 5,
    ids_are_truth: bool = True,
    image_root=None,
) -> CensusRunResult:
    """Open-set census over the sighting stream, in manifest order."""
    net = model.net_from_bytes(checkpoint) if checkpoint is not None else None
    calibration_accuracy = None
    if threshold is None:
        if calibrate_manifest is None:
            raise ValueError("census needs a threshold or a calibration manifest")
        embedded = evaluation.EmbeddedSet.from_manifest(
            calibrate_manifest, net, image_root
        )
        threshold, calibration_accuracy = evaluation.calibrate_threshold(embedded)
    if not ids_are_truth:
        stream = [
            (data_mod.sample_features(s, image_root), None) for s in sightings.samples
        ]
        report = census_mod.run_census(
            stream, threshold, net, max_exemplars_per_id=max_exemplars_per_id
        )
    else:
        report = census_mod.run_census(
            sightings,
            threshold,
            net,
            max_exemplars_per_id=max_exemplars_per_id,
            image_root=image_root,
        )
    return CensusRunResult(
        report.to_csv(),
        report.estimated_population,
        report.true_population,
        report.assignment_precision,
        report.assignment_recall,
        threshold,
        calibration_accuracy,
    )


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class SuiteResult:
    name: str
    cases: int
    max_rel_error: float


@dataclass
class GradcheckResult:
    max_rel_error: float
    suites: list[SuiteResult]
    report_csv: str


_FD_STEP = 1e-5
_KINK_MARGIN = 1e-4


def _central_diff(f, x: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)  # view: perturbations hit the real parameter
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        flat_x[i] += _FD_STEP
        hi = f()
        flat_x[i] -= 2 * _FD_STEP
        lo = f()
        flat_x[i] += _FD_STEP
        flat_g[i] = (hi - lo) / (2 * _FD_STEP)
    return grad


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


def _contrastive_case(rng: RngStream, cfg: LossConfig) -> float:
    dim = 8
    while True:
        e1 = np.array(rng.normals(dim))
        e2 = np.array(rng.normals(dim))
        same = rng.uniform() < 0.5
        d = float(np.linalg.norm(e1 - e2))
        if not same and (abs(cfg.margin - d) < _KINK_MARGIN or d < _KINK_MARGIN):
            continue  # hinge kink or undefined direction: resample
        break
    g1, g2 = contrastive_grad(e1, e2, same, cfg)
    analytic = np.concatenate([g1, g2])
    joint = np.concatenate([e1, e2])
    numeric = _central_diff(
        lambda: contrastive_loss(joint[:dim], joint[dim:], same, cfg), joint
    )
    return _rel_error(analytic, numeric)


def _triplet_case(rng: RngStream, cfg: LossConfig) -> float:
    dim = 8
    while True:
        a = np.array(rng.normals(dim))
        p = np.array(rng.normals(dim))
        n = np.array(rng.normals(dim))
        if cfg.squared_distances:
            gap = np.dot(a - p, a - p) - np.dot(a - n, a - n) + cfg.margin
        else:
            gap = (
                np.linalg.norm(a - p) - np.linalg.norm(a - n) + cfg.margin
            )
        if abs(gap) < _KINK_MARGIN:
            continue
        break
    ga, gp, gn = triplet_grad(a, p, n, cfg)
    analytic = np.concatenate([ga, gp, gn])
    joint = np.concatenate([a, p, n])
    numeric = _central_diff(
        lambda: triplet_loss(joint[:dim], joint[dim : 2 * dim], joint[2 * dim :], cfg),
        joint,
    )
    return _rel_error(analytic, numeric)


def _flatten_params(net: model.EmbeddingNet) -> list[np.ndarray]:
    return list(net.weights) + list(net.biases)


def _composed_case(rng: RngStream, cfg: LossConfig, loss_kind: str) -> float:
    dims = [6, 5, 4]
    n_inputs = 2 if loss_kind == "siamese" else 3
    attempt = 0
    while True:
        attempt += 1
        arng = rng.derive(attempt)
        net = model.init(dims, arng.derive(0))
        draw = arng.derive(1)
        xs = [np.array(draw.normals(dims[0])) for _ in range(n_inputs)]
        same = draw.uniform() < 0.5
        outs = [model.forward(net, x) for x in xs]
        embs = [e for e, _ in outs]
        # Stay clear of every kink: ReLU pre-activations and the loss hinge.
        min_pre = min(
            float(np.min(np.abs(z)))
            for _, tr in outs
            for z in tr.pre_activations[:-1]
        )
        if min_pre < _KINK_MARGIN:
            continue
        if loss_kind == "siamese":
            d = float(np.linalg.norm(embs[0] - embs[1]))
            if not same and (abs(cfg.margin - d) < _KINK_MARGIN or d < _KINK_MARGIN):
                continue
        else:
            gap = (
                np.dot(embs[0] - embs[1], embs[0] - embs[1])
                - np.dot(embs[0] - embs[2], embs[0] - embs[2])
                + cfg.margin
            )
            if abs(gap) < _KINK_MARGIN:
                continue
        break

    if loss_kind == "siamese":
        embed_grads = contrastive_grad(embs[0], embs[1], same, cfg)
    else:
        embed_grads = triplet_grad(embs[0], embs[1], embs[2], cfg)
    analytic = model.ParamGrads.zeros_for(net)
    for (_, trace), g in zip(outs, embed_grads):
        analytic.add_(model.backward(net, trace, g))
    analytic_flat = np.concatenate(
        [a.reshape(-1) for a in _flatten_params_of(analytic)]
    )

    def loss_now() -> float:
        es = [model.forward(net, x)[0] for x in xs]
        if loss_kind == "siamese":
            return contrastive_loss(es[0], es[1], same, cfg)
        return triplet_loss(es[0], es[1], es[2], cfg)

    numeric_parts = [_central_diff(loss_now, p) for p in _flatten_params(net)]
    numeric_flat = np.concatenate([g.reshape(-1) for g in numeric_parts])
    return _rel_error(analytic_flat, numeric_flat)


def _flatten_params_of(grads: model.ParamGrads) -> list[np.ndarray]:
    return list(grads.weights) + list(grads.biases)


def run_gradcheck(seed: int, cases: int = 100) -> GradcheckResult:
    """Finite-difference suites over the losses and the composed network."""
    cfg = LossConfig()
    root = RngStream(seed)
    suites = []
    specs = [
        ("contrastive", lambda r: _contrastive_case(r, cfg)),
        ("triplet", lambda r: _triplet_case(r, cfg)),
        ("composed_siamese", lambda r: _composed_case(r, cfg, "siamese")),
        ("composed_triplet", lambda r: _composed_case(r, cfg, "triplet")),
    ]
    for s_idx, (name, runner) in enumerate(specs):
        srng = root.derive(s_idx)
        worst = max(runner(srng.derive(c)) for c in range(cases))
        suites.append(SuiteResult(name, cases, worst))
    overall = max(s.max_rel_error for s in suites)
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["suite", "cases", "max_rel_error"])
    for s in suites:
        writer.writerow([s.name, s.cases, repr(s.max_rel_error)])
    writer.writerow(["overall", cases * len(suites), repr(overall)])
    return GradcheckResult(overall, suites, out.getvalue())


# ---------------------------------------------------------------------------
# benchmark: triplet vs siamese on synthetic data


@dataclass
class BenchRow:
    seed: str
    loss_kind: str
    map1_mean: float
    map1_std: float
    map5_mean: float
    map5_std: float


@dataclass
class BenchResult:
    table_csv: str
    rows: list[BenchRow]
    siamese_mean_map1: float
    triplet_mean_map1: float


def run_bench(
    seeds: list[int],
    *,
    train_individuals: int = 20,
    test_individuals: int = 10,
    images_per_individual: int = 25,
    feature_dim: int = 16,
    cluster_spread: float = 1.0,
    inter_cluster_distance: float = 3.0,
    epochs: int = 30,
    repetitions: int = 1000,
    model_spec: ModelSpec = ModelSpec(hidden_dims=(32,), embedding_dim=128),
    loss_cfg: LossConfig = LossConfig(),
    lr: float = 0.001,
) -> BenchResult:
    """Train both objectives per seed on disjoint synthetic individuals.

    Both nets start from the same initialization and consume the same
    derived streams, so the loss objective is the only difference.
    """
    if not seeds:
        raise ValueError("need at least one seed")
    rows: list[BenchRow] = []
    sampler = optim.SamplerConfig()
    optim_cfg = optim.OptimConfig(lr=lr, epochs=epochs)
    for seed in seeds:
        root = RngStream(seed)
        manifest = data_mod.synth_dataset(
            train_individuals + test_individuals,
            images_per_individual,
            feature_dim,
            cluster_spread,
            inter_cluster_distance,
            root.derive(0),
        )
        ids = manifest.individual_ids()
        train_m = manifest.subset(ids[:train_individuals])
        test_m = manifest.subset(ids[train_individuals:])
        base = model.init(model_spec.dims_for(feature_dim), root.derive(1),
                          model_spec.l2_normalize)
        for kind in ("siamese", "triplet"):
            net = base.copy()
            optim.train(
                net, train_m, kind, optim_cfg, root.derive(2),
                loss_cfg=loss_cfg, sampler=sampler,
            )
            est = _eval_net_on(
                net, test_m, repetitions, "ap", root.derive(3).seed
            )
            rows.append(
                BenchRow(
                    str(seed), kind,
                    est[1].mean, est[1].std, est[5].mean, est[5].std,
                )
            )
    means = {}
    for kind in ("siamese", "triplet"):
        kind_rows = [r for r in rows if r.loss_kind == kind]
        means[kind] = BenchRow(
            "mean",
            kind,
            float(np.mean([r.map1_mean for r in kind_rows])),
            float(np.mean([r.map1_std for r in kind_rows])),
            float(np.mean([r.map5_mean for r in kind_rows])),
            float(np.mean([r.map5_std for r in kind_rows])),
        )
    all_rows = rows + [means["siamese"], means["triplet"]]
    lines = ["seed,loss_kind,map1_mean,map1_std,map5_mean,map5_std"]
    for r in all_rows:
        lines.append(
            f"{r.seed},{r.loss_kind},{repr(r.map1_mean)},{repr(r.map1_std)},"
            f"{repr(r.map5_mean)},{repr(r.map5_std)}"
        )
    return BenchResult(
        "\n".join(lines) + "\n",
        all_rows,
        means["siamese"].map1_mean,
        means["triplet"].map1_mean,
    )

"""FastAPI application wrapping the re-identification engine.

Pipeline endpoints (/synth, /split, /train, /eval, /census, /gradcheck,
/bench) are stateless: everything they need arrives in the request and
everything they produce returns in the response, so identical seeded
requests yield identical artifacts.  The /galleries endpoints hold the
one piece of server state, the open-set galleries that camera-trap
clients stream sightings into.
"""

from __future__ import annotations

import base64
import threading

from fastapi import FastAPI, HTTPException

from .. import __version__
from .. import census as census_mod
from .. import data as data_mod
from .. import model, optim, pipeline
from ..losses import LossConfig
from ..mining import MiningError
from . import schemas

SERVICE_NAME = "simreid"


def _manifest(csv_text: str, species_tag: str = "") -> data_mod.Manifest:
    return data_mod.manifest_from_csv(csv_text, species_tag)


def _loss_cfg(s: schemas.LossSettings) -> LossConfig:
    if s.loss_kind not in optim.LOSS_KINDS:
        raise ValueError(f"loss_kind must be one of {optim.LOSS_KINDS}, got {s.loss_kind!r}")
    return LossConfig(s.margin, s.squared_distances)


def _optim_cfg(s: schemas.OptimSettings) -> optim.OptimConfig:
    return optim.OptimConfig(
        lr=s.lr,
        beta1=s.beta1,
        beta2=s.beta2,
        epsilon=s.epsilon,
        decay_per_epoch=s.decay_per_epoch,
        decay_mode=s.decay_mode,
        epochs=s.epochs,
        batch_size=s.batch_size,
    )


def _split_cfg(s: schemas.SplitSettings, seed: int) -> data_mod.SplitConfig:
    return data_mod.SplitConfig((s.train_ratio, s.val_ratio, s.test_ratio), s.folds, seed)


def _model_spec(s: schemas.ModelSettings) -> pipeline.ModelSpec:
    return pipeline.ModelSpec(tuple(s.hidden_dims), s.embedding_dim, s.l2_normalize)


def _augment_cfg(s: schemas.AugmentSettings | None) -> data_mod.AugmentConfig | None:
    if s is None:
        return None
    p = s.probability
    return data_mod.AugmentConfig(
        mirror_prob=p,
        shift_prob=p,
        shift_max_pixels=s.shift_max_pixels,
        rotate_prob=p,
        rotate_max_degrees=s.rotate_max_degrees,
        channel_noise_prob=p,
        channel_noise_std=s.channel_noise_std,
        pixel_noise_prob=p,
        pixel_noise_std=s.pixel_noise_std,
        blur_prob=p,
        dropout_prob=p,
        dropout_rate=s.dropout_rate,
    )


def _decode_checkpoint(b64: str | None) -> bytes | None:
    if b64 is None:
        return None
    try:
        return base64.b64decode(b64.encode("ascii"), validate=True)
    except Exception:
        raise ValueError("checkpoint_b64 is not valid base64") from None


class GallerySession:
    def __init__(self, gallery: census_mod.Gallery, net: model.EmbeddingNet | None):
        self.gallery = gallery
        self.net = net
        self.decisions: list[census_mod.SightingDecision] = []


class GalleryStore:
    """In-memory gallery sessions; one lock since steps are cheap."""

    def __init__(self):
        self._lock = threading.Lock()
        self._sessions: dict[str, GallerySession] = {}
        self._counter = 0

    def create(self, gallery: census_mod.Gallery, net) -> str:
        with self._lock:
            self._counter += 1
            gid = f"gallery-{self._counter:04d}"
            self._sessions[gid] = GallerySession(gallery, net)
            return gid

    def get(self, gid: str) -> GallerySession:
        with self._lock:
            if gid not in self._sessions:
                raise KeyError(gid)
            return self._sessions[gid]

    def drop(self, gid: str) -> None:
        with self._lock:
            if gid not in self._sessions:
                raise KeyError(gid)
            del self._sessions[gid]


def create_app() -> FastAPI:
    app = FastAPI(
        title="simreid",
        version=__version__,
        description="similarity-learning re-identification engine",
    )
    store = GalleryStore()
    app.state.galleries = store

    @app.exception_handler(ValueError)
    async def value_error_handler(request, exc: ValueError):
        from fastapi.responses import JSONResponse

        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", service=SERVICE_NAME, version=__version__)

    @app.post("/synth", response_model=schemas.SynthResponse)
    def synth(req: schemas.SynthRequest):
        res = pipeline.run_synth(
            req.num_individuals,
            req.images_per_individual,
            req.feature_dim,
            req.cluster_spread,
            req.inter_cluster_distance,
            req.seed,
            req.species_tag,
        )
        return schemas.SynthResponse(
            manifest_csv=res.manifest_csv,
            num_entries=res.num_entries,
            num_individuals=res.num_individuals,
        )

    @app.post("/split", response_model=schemas.SplitResponse)
    def split(req: schemas.SplitRequest):
        res = pipeline.run_split(
            _manifest(req.manifest_csv), _split_cfg(req.split, req.seed)
        )
        return schemas.SplitResponse(
            plan_csv=res.plan_csv,
            folds=[schemas.FoldSummary(**s) for s in res.fold_summaries],
            notes=res.notes,
        )

    @app.post("/train", response_model=schemas.TrainResponse)
    def train(req: schemas.TrainRequest):
        try:
            res = pipeline.run_train(
                _manifest(req.manifest_csv, req.species_tag),
                seed=req.seed,
                loss_kind=req.loss.loss_kind,
                split_cfg=_split_cfg(req.split, req.seed),
                fold=req.fold,
                model_spec=_model_spec(req.model),
                loss_cfg=_loss_cfg(req.loss),
                optim_cfg=_optim_cfg(req.optim),
                sampler_cfg=schemas_sampler(req.sampler),
                augment_cfg=_augment_cfg(req.augment),
                image_root=req.image_root,
                early_stop_patience=req.optim.early_stop_patience,
            )
        except MiningError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return schemas.TrainResponse(
            checkpoint_b64=base64.b64encode(res.checkpoint).decode("ascii"),
            loss_log_csv=res.loss_log_csv,
            model_tag=res.model_tag,
            input_dim=res.input_dim,
            epochs_run=res.epochs_run,
            final_train_loss=res.final_train_loss,
            final_val_loss=res.final_val_loss,
            **res.split_counts,
        )

    @app.post("/eval", response_model=schemas.EvalResponse)
    def evaluate(req: schemas.EvalRequest):
        try:
            res = pipeline.run_eval(
                _manifest(req.manifest_csv, req.species_tag),
                seed=req.seed,
                loss_kind=req.loss.loss_kind,
                split_cfg=_split_cfg(req.split, req.seed),
                model_spec=_model_spec(req.model),
                loss_cfg=_loss_cfg(req.loss),
                optim_cfg=_optim_cfg(req.optim),
                sampler_cfg=schemas_sampler(req.sampler),
                augment_cfg=_augment_cfg(req.augment),
                repetitions=req.repetitions,
                ap_mode=req.ap_mode,
                checkpoint=_decode_checkpoint(req.checkpoint_b64),
                fold=req.fold,
                image_root=req.image_root,
            )
        except MiningError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return schemas.EvalResponse(
            results_csv=res.results_csv,
            rows=[schemas.EvalRowModel(**vars(r)) for r in res.rows],
        )

    @app.post("/census", response_model=schemas.CensusResponse)
    def census(req: schemas.CensusRequest):
        res = pipeline.run_census(
            _manifest(req.manifest_csv),
            checkpoint=_decode_checkpoint(req.checkpoint_b64),
            threshold=req.threshold,
            calibrate_manifest=(
                _manifest(req.calibrate_manifest_csv)
                if req.calibrate_manifest_csv is not None
                else None
            ),
            max_exemplars_per_id=req.max_exemplars_per_id,
            ids_are_truth=req.ids_are_truth,
            image_root=req.image_root,
        )
        return schemas.CensusResponse(
            report_csv=res.report_csv,
            estimated_population=res.estimated_population,
            true_population=res.true_population,
            assignment_precision=res.assignment_precision,
            assignment_recall=res.assignment_recall,
            threshold_used=res.threshold_used,
            calibration_accuracy=res.calibration_accuracy,
        )

    @app.post("/gradcheck", response_model=schemas.GradcheckResponse)
    def gradcheck(req: schemas.GradcheckRequest):
        if req.cases < 1:
            raise HTTPException(status_code=400, detail="cases must be >= 1")
        res = pipeline.run_gradcheck(req.seed, req.cases)
        return schemas.GradcheckResponse(
            max_rel_error=res.max_rel_error,
            suites=[schemas.SuiteResultModel(**vars(s)) for s in res.suites],
            report_csv=res.report_csv,
        )

    @app.post("/bench", response_model=schemas.BenchResponse)
    def bench(req: schemas.BenchRequest):
        res = pipeline.run_bench(
            req.seeds,
            train_individuals=req.train_individuals,
            test_individuals=req.test_individuals,
            images_per_individual=req.images_per_individual,
            feature_dim=req.feature_dim,
            cluster_spread=req.cluster_spread,
            inter_cluster_distance=req.inter_cluster_distance,
            epochs=req.epochs,
            repetitions=req.repetitions,
            model_spec=_model_spec(req.model),
            loss_cfg=_loss_cfg(req.loss) if req.loss.loss_kind else LossConfig(),
        )
        return schemas.BenchResponse(
            table_csv=res.table_csv,
            rows=[schemas.BenchRowModel(**vars(r)) for r in res.rows],
            siamese_mean_map1=res.siamese_mean_map1,
            triplet_mean_map1=res.triplet_mean_map1,
        )

    # --- stateful galleries -------------------------------------------------

    @app.post("/galleries", response_model=schemas.GalleryCreateResponse)
    def create_gallery(req: schemas.GalleryCreateRequest):
        blob = _decode_checkpoint(req.checkpoint_b64)
        net = model.net_from_bytes(blob) if blob is not None else None
        gallery = census_mod.Gallery(req.match_threshold, req.max_exemplars_per_id)
        gid = store.create(gallery, net)
        return schemas.GalleryCreateResponse(gallery_id=gid, population=0)

    def _session_or_404(gid: str) -> GallerySession:
        try:
            return store.get(gid)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"no such gallery {gid!r}")

    @app.post("/galleries/{gid}/sightings", response_model=schemas.SightingResponse)
    def add_sighting(gid: str, req: schemas.SightingRequest):
        session = _session_or_404(gid)
        emb = req.values
        if session.net is not None:
            emb = model.forward(session.net, emb)[0]
        decision = session.gallery.observe(emb)
        decision.true_id = req.true_id
        session.decisions.append(decision)
        return schemas.SightingResponse(
            index=decision.index,
            decision="matched" if decision.matched else "enrolled",
            gallery_id=decision.gallery_id,
            min_distance=decision.min_distance,
            population=session.gallery.population,
        )

    @app.get("/galleries/{gid}", response_model=schemas.GalleryStateResponse)
    def gallery_state(gid: str):
        session = _session_or_404(gid)
        gallery = session.gallery
        truth_known = bool(session.decisions) and all(
            d.true_id is not None for d in session.decisions
        )
        report = census_mod.CensusReport(gallery.population, session.decisions)
        if truth_known:
            report.true_population = len({d.true_id for d in session.decisions})
        return schemas.GalleryStateResponse(
            gallery_id=gid,
            population=gallery.population,
            match_threshold=gallery.match_threshold,
            sightings_seen=len(session.decisions),
            enrolled={k: len(v) for k, v in gallery.exemplars.items()},
            report_csv=report.to_csv(),
        )

    @app.delete("/galleries/{gid}")
    def drop_gallery(gid: str):
        try:
            store.drop(gid)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"no such gallery {gid!r}")
        return {"status": "deleted", "gallery_id": gid}

    return app


def schemas_sampler(s: schemas.SamplerSettings) -> optim.SamplerConfig:
    return optim.SamplerConfig(s.individuals_per_batch, s.images_per_individual)


app = create_app()

"""Pydantic request/response models for the HTTP service.

Requests carry dataset manifests inline as CSV text and model
checkpoints as base64, so the service holds no client files; responses
return every artifact the same way and the client owns the disk.
"""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    service: str
    version: str


class ErrorResponse(BaseModel):
    detail: str


# --- shared settings blocks ------------------------------------------------


class ModelSettings(BaseModel):
    hidden_dims: list[int] = [64]
    embedding_dim: int = 128
    l2_normalize: bool = False


class LossSettings(BaseModel):
    loss_kind: str = "triplet"  # 'siamese' or 'triplet'
    margin: float = 1.0
    squared_distances: bool = True


class OptimSettings(BaseModel):
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    decay_per_epoch: float = 0.02
    decay_mode: str = "lr"
    epochs: int = 100
    batch_size: int = 32
    early_stop_patience: int | None = None


class SamplerSettings(BaseModel):
    individuals_per_batch: int = 8
    images_per_individual: int = 4


class SplitSettings(BaseModel):
    train_ratio: float = 0.7
    val_ratio: float = 0.1
    test_ratio: float = 0.2
    folds: int = 5


class AugmentSettings(BaseModel):
    probability: float = 0.5
    shift_max_pixels: int = 2
    rotate_max_degrees: float = 15.0
    channel_noise_std: float = 10.0
    pixel_noise_std: float = 5.0
    dropout_rate: float = 0.05


# --- synth ------------------------------------------------------------------


class SynthRequest(BaseModel):
    seed: int = 0
    num_individuals: int = 30
    images_per_individual: int = 20
    feature_dim: int = 16
    cluster_spread: float = 1.0
    inter_cluster_distance: float = 6.0
    species_tag: str = "synthetic"


class SynthResponse(BaseModel):
    manifest_csv: str
    num_entries: int
    num_individuals: int


# --- split ------------------------------------------------------------------


class SplitRequest(BaseModel):
    manifest_csv: str
    seed: int = 0
    split: SplitSettings = SplitSettings()


class FoldSummary(BaseModel):
    fold: int
    train_individuals: int
    train_images: int
    val_individuals: int
    val_images: int
    test_individuals: int
    test_images: int


class SplitResponse(BaseModel):
    plan_csv: str
    folds: list[FoldSummary]
    notes: list[str]


# --- train -------------------------------------------------------------------


class TrainRequest(BaseModel):
    manifest_csv: str
    seed: int = 0
    fold: int = 0
    species_tag: str = ""
    image_root: str | None = None
    model: ModelSettings = ModelSettings()
    loss: LossSettings = LossSettings()
    optim: OptimSettings = OptimSettings()
    sampler: SamplerSettings = SamplerSettings()
    split: SplitSettings = SplitSettings()
    augment: AugmentSettings | None = None


class TrainResponse(BaseModel):
    checkpoint_b64: str
    loss_log_csv: str
    model_tag: str
    input_dim: int
    epochs_run: int
    final_train_loss: float
    final_val_loss: float | None
    train_images: int
    val_images: int
    train_individuals: int
    val_individuals: int


# --- eval --------------------------------------------------------------------


class EvalRequest(BaseModel):
    manifest_csv: str
    seed: int = 0
    species_tag: str = ""
    image_root: str | None = None
    repetitions: int = 1000
    ap_mode: str = "ap"
    # protocol mode (checkpoint_b64 unset): train per fold with these
    model: ModelSettings = ModelSettings()
    loss: LossSettings = LossSettings()
    optim: OptimSettings = OptimSettings()
    sampler: SamplerSettings = SamplerSettings()
    split: SplitSettings = SplitSettings()
    augment: AugmentSettings | None = None
    # checkpoint mode: evaluate this net on one fold's test split
    checkpoint_b64: str | None = None
    fold: int | None = None


class EvalRowModel(BaseModel):
    dataset: str
    loss_kind: str
    model_tag: str
    map1_mean: float
    map1_std: float
    map5_mean: float
    map5_std: float
    fold: str


class EvalResponse(BaseModel):
    results_csv: str
    rows: list[EvalRowModel]


# --- census --------------------------------------------------------------------


class CensusRequest(BaseModel):
    manifest_csv: str = Field(description="sighting stream, in row order")
    checkpoint_b64: str | None = None
    threshold: float | None = None
    calibrate_manifest_csv: str | None = None
    max_exemplars_per_id: int = 5
    ids_are_truth: bool = True
    image_root: str | None = None


class CensusResponse(BaseModel):
    report_csv: str
    estimated_population: int
    true_population: int | None
    assignment_precision: float | None
    assignment_recall: float | None
    threshold_used: float
    calibration_accuracy: float | None


# --- gradcheck / bench -----------------------------------------------------


class GradcheckRequest(BaseModel):
    seed: int = 0
    cases: int = 100


class SuiteResultModel(BaseModel):
    name: str
    cases: int
    max_rel_error: float


class GradcheckResponse(BaseModel):
    max_rel_error: float
    suites: list[SuiteResultModel]
    report_csv: str


class BenchRequest(BaseModel):
    seeds: list[int] = [1, 2, 3, 4, 5]
    train_individuals: int = 20
    test_individuals: int = 10
    images_per_individual: int = 25
    feature_dim: int = 16
    cluster_spread: float = 1.0
    inter_cluster_distance: float = 3.0
    epochs: int = 30
    repetitions: int = 1000
    model: ModelSettings = ModelSettings(hidden_dims=[32])
    loss: LossSettings = LossSettings()


class BenchRowModel(BaseModel):
    seed: str
    loss_kind: str
    map1_mean: float
    map1_std: float
    map5_mean: float
    map5_std: float


class BenchResponse(BaseModel):
    table_csv: str
    rows: list[BenchRowModel]
    siamese_mean_map1: float
    triplet_mean_map1: float


# --- gallery sessions (stateful open-set workflow) --------------------------


class GalleryCreateRequest(BaseModel):
    match_threshold: float
    max_exemplars_per_id: int = 5
    checkpoint_b64: str | None = Field(
        default=None,
        description="when set, sightings are raw features embedded server-side",
    )


class GalleryCreateResponse(BaseModel):
    gallery_id: str
    population: int


class SightingRequest(BaseModel):
    values: list[float] = Field(description="embedding, or raw features if the gallery has a net")
    true_id: str | None = None


class SightingResponse(BaseModel):
    index: int
    decision: str  # 'matched' or 'enrolled'
    gallery_id: str
    min_distance: float | None
    population: int


class GalleryStateResponse(BaseModel):
    gallery_id: str
    population: int
    match_threshold: float
    sightings_seen: int
    enrolled: dict[str, int]  # gallery id -> exemplar count
    report_csv: str

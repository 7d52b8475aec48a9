"""Two-stage flow: classify, take the predicted class's CAM, crop, classify the crop."""
from __future__ import annotations

import contextlib
import csv
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import cam as cam_ops
from .augment import AugmentPolicy, expand_images
from .data import BBox, as_rgb, resize_bilinear
from .errors import ConfigError, FormatError, ShapeError
from .hair_removal import HairParams, remove_hairs
from .network import Network, NetworkConfig, TrainParams, build_network, images_to_tensor, load_weights, train
from .region import RegionParams, extract_import_region

log = logging.getLogger(__name__)

SCORE_SOURCES = ("stage2", "mean")


@dataclass
class PipelineConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    region: RegionParams = field(default_factory=RegionParams)
    hair_removal: bool = False
    hair: HairParams = field(default_factory=HairParams)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    augment_stage2: bool = True
    train: TrainParams = field(default_factory=TrainParams)
    stage2_epochs: int | None = None
    stage2_init: str = "copy"
    final_score_source: str = "stage2"
    cam_class: int | None = None
    stage1_weights: Path | None = None
    stage2_weights: Path | None = None

    def __post_init__(self):
        if self.final_score_source not in SCORE_SOURCES:
            raise ConfigError(f"final_score_source must be one of {SCORE_SOURCES}")
        if self.stage2_init not in ("copy", "fresh"):
            raise ConfigError("stage2_init must be 'copy' or 'fresh'")
        if self.cam_class is not None and not 0 <= self.cam_class < self.network.num_classes:
            raise ConfigError(f"cam_class {self.cam_class} out of range")

    @property
    def input_size(self):
        return self.network.input_size

    @property
    def stage2_train(self) -> TrainParams:
        if self.stage2_epochs is None:
            return self.train
        return TrainParams(**{**self.train.__dict__, "epochs": self.stage2_epochs})


def _section(cls, data, name):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"[{name}] unknown keys {sorted(extra)}")
    return cls(**data)


def config_from_dict(d: dict, base_dir=None) -> PipelineConfig:
    """Build a PipelineConfig from the sections network/region/hair/augment/train/pipeline."""
    d = dict(d)
    extra = set(d) - {"network", "region", "hair", "augment", "train", "pipeline"}
    if extra:
        raise ConfigError(f"unknown config sections {sorted(extra)}")
    hair = dict(d.get("hair", {}))
    enabled = bool(hair.pop("enabled", False))
    augment = dict(d.get("augment", {}))
    if "rotations" in augment:
        augment["rotations"] = tuple(augment["rotations"])
    pipe = dict(d.get("pipeline", {}))
    for key in ("stage1_weights", "stage2_weights"):
        if pipe.get(key):
            p = Path(pipe[key])
            pipe[key] = p if p.is_absolute() or base_dir is None else Path(base_dir) / p
    allowed = {"augment_stage2", "stage2_epochs", "stage2_init", "final_score_source", "cam_class",
               "stage1_weights", "stage2_weights"}
    if set(pipe) - allowed:
        raise ConfigError(f"[pipeline] unknown keys {sorted(set(pipe) - allowed)}")
    return PipelineConfig(
        network=NetworkConfig.from_dict(d.get("network", {})),
        region=_section(RegionParams, d.get("region"), "region"),
        hair_removal=enabled,
        hair=_section(HairParams, hair, "hair"),
        augment=_section(AugmentPolicy, augment, "augment"),
        train=TrainParams.from_dict(d.get("train", {})),
        **pipe,
    )


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return config_from_dict(data, base_dir=path.parent)


# ---------------------------------------------------------------- inference

@dataclass
class Stage1Result:
    probs: np.ndarray
    cam: cam_ops.CamMap
    heatmap: np.ndarray  # normalized, at the resolution of the (preprocessed) input image
    image: np.ndarray  # preprocessed full-resolution image the heatmap refers to


@dataclass
class PredictionRecord:
    image_id: str
    probs: np.ndarray  # final p_mel, p_sk, p_nevus
    stage1_probs: np.ndarray
    bbox: BBox
    predicted_class: int


def preprocess(image, config: PipelineConfig):
    image = as_rgb(np.asarray(image))
    if config.hair_removal:
        image, _ = remove_hairs(image, config.hair)
    return image


def to_network_input(image, size):
    if image.shape[:2] != (size, size):
        image = resize_bilinear(image, size, size)
    return images_to_tensor(image)


def run_stage1(image, network: Network, config: PipelineConfig, preprocessed=False) -> Stage1Result:
    if not preprocessed:
        image = preprocess(image, config)
    trace = network.forward(to_network_input(image, config.input_size))
    if config.cam_class is None:
        cam_map = cam_ops.cam_for_predicted(trace, network.fc_weights)
    else:
        cam_map = cam_ops.compute_cam(trace, network.fc_weights, config.cam_class)
    h, w = image.shape[:2]
    if h < cam_map.grid.shape[0] or w < cam_map.grid.shape[1]:
        raise ShapeError(f"image {w}x{h} is smaller than the CAM grid {cam_map.grid.shape}")
    heat = cam_ops.heatmap(cam_map, w, h)
    return Stage1Result(trace.probs[0], cam_map, heat, image)


def stage2_input(stage1: Stage1Result, config: PipelineConfig):
    region = extract_import_region(stage1.image, stage1.heatmap, config.region)
    return region, to_network_input(region.crop, config.input_size)


def run_two_stage(image, stage1_net: Network, stage2_net: Network, config: PipelineConfig,
                  image_id="image") -> PredictionRecord:
    s1 = run_stage1(image, stage1_net, config)
    region, x2 = stage2_input(s1, config)
    p2 = stage2_net.forward(x2).probs[0]
    final = p2 if config.final_score_source == "stage2" else (s1.probs + p2) / 2
    return PredictionRecord(image_id, final, s1.probs, region.bbox, int(np.argmax(final)))


def load_networks(config: PipelineConfig):
    if config.stage1_weights is None or config.stage2_weights is None:
        raise ConfigError("pipeline needs both stage1_weights and stage2_weights")
    return load_weights(config.stage1_weights, config.network), load_weights(config.stage2_weights, config.network)


# ---------------------------------------------------------------- training

@contextlib.contextmanager
def deterministic_mode(enabled=True):
    """Pin BLAS to one thread so reductions run in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def _training_tensor(images, labels, policy, size):
    imgs, labs = expand_images(images, labels, policy)
    x = np.concatenate([to_network_input(im, size) for im in imgs]) if imgs else np.zeros((0, 3, size, size))
    return x, labs


def train_stage1(images, labels, config: PipelineConfig, progress=None):
    """``images`` are preprocessed full-resolution uint8 images."""
    net = build_network(config.network)
    x, y = _training_tensor(images, labels, config.augment, config.input_size)
    log.info("stage 1: %d training tensors", len(x))
    history = train(net, x, y, config.train, progress)
    return net, history


def stage2_crops(images, stage1_net: Network, config: PipelineConfig):
    """Crop of each image's stage-1 import region (one per image, at original resolution)."""
    crops, boxes = [], []
    for img in images:
        region, _ = stage2_input(run_stage1(img, stage1_net, config, preprocessed=True), config)
        crops.append(region.crop)
        boxes.append(region.bbox)
    return crops, boxes


def train_stage2(images, labels, stage1_net: Network, config: PipelineConfig, progress=None):
    crops, _ = stage2_crops(images, stage1_net, config)
    policy = config.augment if config.augment_stage2 else AugmentPolicy.identity()
    net = stage1_net.copy() if config.stage2_init == "copy" else build_network(config.network)
    x, y = _training_tensor(crops, labels, policy, config.input_size)
    log.info("stage 2: %d training tensors from %d crops", len(x), len(crops))
    params = config.stage2_train
    history = train(net, x, y, params, progress) if params.epochs else []
    return net, history


def train_two_stage(images, labels, config: PipelineConfig, progress=None):
    """Returns ``(stage1_net, stage2_net)``; preprocesses (hair removal) when configured."""
    images = [preprocess(im, config) for im in images]
    labels = np.asarray(labels)
    net1, _ = train_stage1(images, labels, config, progress)
    net2, _ = train_stage2(images, labels, net1, config, progress)
    return net1, net2


# ---------------------------------------------------------------- predictions CSV

PREDICTION_HEADER = ["image_id", "p_mel", "p_sk", "p_nevus"]


def write_predictions(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_HEADER)
        for r in records:
            w.writerow([r.image_id] + [f"{float(p):.6f}" for p in r.probs])

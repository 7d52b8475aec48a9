"""Two-stage skin-lesion classification driven by class activation maps.

A NumPy CNN with a global-average-pooling head classifies the image, the
predicted class's activation map selects the lesion region, and the same
architecture re-classifies the crop.
"""
from .cam import CamMap, cam_for_predicted, compute_cam, normalize, render_overlay, upsample_bilinear
from .data import BBox, LabelRecord, SyntheticSpec, generate_synthetic, load_labels
from .evaluation import AucReport, report, roc_auc
from .hair_removal import HairParams, remove_hairs
from .network import ForwardTrace, Network, NetworkConfig, TrainParams, build_network, load_weights, save_weights
from .pipeline import PipelineConfig, run_stage1, run_two_stage, train_two_stage
from .region import RegionParams, extract_import_region

__version__ = "0.1.0"

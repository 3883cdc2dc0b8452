"""Zero-shot presentation attack detection for OCT fingertip scans.

An autoencoder trained on bonafide B-scans only scores new scans by their
saliency-weighted reconstruction error, summarised per scan volume as a
Gaussian and compared against a bonafide score set.
"""
from .autoencoder import (AEConfig, AutoencoderModel, FeatureMapSet, ReconRecord, build_model,
                          load_model, raw_error, reconstruct, save_model, train)
from .bscan_io import (BScan, DatasetSplit, Label, ScanVolume, load_bscan, load_manifest,
                       save_bscan)
from .evaluator import EvalReport, LabeledScore, eval_ms, eval_score, export_report
from .finemap import SaliencyMap, fine_map, layer_map, refined_error
from .preprocess import PreprocessConfig, nlm_denoise, preprocess_volume, resize_bilinear
from .scorer import (ConfidenceReport, ScanGaussian, ScoreCalibration, Thresholds, calibrate,
                     fit_scan_gaussian, iou_score, kl_divergence, score_volume)
from .synth import SynthParams, generate_dataset, generate_volume

__version__ = "0.1.0"

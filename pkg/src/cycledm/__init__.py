"""Unpaired glyph-domain conversion built on a conditional denoising backbone.

Two conversion networks bridge the noisy manifolds of the handwritten and
machine-printed domains at a fixed diffusion timestep; converting an image
means diffusing it, mapping it across, and denoising it in the target
domain. The package also ships the diffuse-then-denoise baseline, a fully
synthetic two-domain benchmark, and the evaluation metric suite.
"""

__version__ = "0.1.0"

from .schedule import NoiseSchedule, make_schedule
from .diffusion import (HW, MP, Condition, DdpmTrainParams, DenoiserBundle,
                        ImageBatch, ddpm_loss, denoise_from, p_sample_step,
                        q_sample, smoothed, train_ddpm)
from .conversion import (HW_TO_MP, MP_TO_HW, ConversionHyperparams, ConversionNet,
                         ConversionPair, Discriminator, adversarial_loss, convert,
                         cycle_loss, gradient_penalty, identity_loss, sdedit_convert,
                         total_loss, train_conversion)
from .data import (DomainDataset, SyntheticGlyphSpec, generate_synthetic_domains,
                   load_emnist_letters, load_image_directory, read_idx,
                   split_dataset)
from .evaluation import (EvalReport, FeatureExtractor, FeatureSet, build_report,
                         compute_fid, knn_precision_recall, nn_classify_accuracy,
                         ocr_gain_experiment, render_table, train_feature_extractor)
from .seeding import TorchStream, derive_seed, numpy_stream, torch_stream

__all__ = [name for name in dir() if not name.startswith("_")]

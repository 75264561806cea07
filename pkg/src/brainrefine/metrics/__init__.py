from .distribution import coverage_density, fid, frechet_distance
from .hog import hog_descriptor, hog_similarity
from .noise import NoiseEstimate, extract_noise, histogram_kl, noise_kl
from .perceptual import (BackboneMissing, FeatureSet, RandomConvBackbone, TorchvisionBackbone, lpips_patches,
                         patch_features)
from .report import evaluate_sets, summary_table, write_report
from .sharpness import laplacian_response, laplacian_variance_sharpness

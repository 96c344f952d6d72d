"""Noise-space steganalysis for diffusion-based generative steganography,
with a desk-scale analytic diffusion model to run it on."""
from .analysis import (CodecDivergence, FiniteDist, FiniteMap, codec_divergence, codec_kl, kl,
                       normalized_overall, pushforward, tradeoff_sweep, verify_theorem1)
from .codecs import CodecParams, Key, Scheme, chunk, decode, encode, unchunk
from .detector import NoiseSpaceInverter, make_nsdser
from .diffusion import (GmmPrior, GuidanceConfig, NoiseSchedule, Provenance, StateSample, build_schedule,
                        marginal_score)
from .ensemble import DetectionReport, FldEnsemble, evaluate
from .features import NoiseStatistics, dct, extract_features, stat5
from .harness import ScenarioConfig, ablate, build_dataset, run_detector, run_scenario
from .solvers import Direction, SolverConfig, SolverKind, integrate, integrate_array
from .stego import Backbone, ChannelConfig, builtin_backbones, embed_and_generate, extract, gen_cover

__version__ = "0.1.0"

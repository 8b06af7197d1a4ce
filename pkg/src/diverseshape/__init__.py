"""Diverse mesh completions from a single partial shape observation.

Pipeline: fit a global+local PCA model to the visible region, encode the
partial fit into a latent completion model, then optimize a set of latent
samples under a DPP diversity objective so the completions agree where the
shape was seen and differ where it was not.
"""

from .mesh import (Mesh, RegionAtlas, RigidTransform, VertexMask, graph_laplacian,
                   load_obj, masked_mean_l2, procrustes_align, save_obj)
from .synth import (CurriculumSchedule, GroundTruthGenerator, curriculum_fraction,
                    grow_occlusion, make_generator, make_region_atlas, make_template,
                    sample_dataset, sample_subject_dataset, template_landmarks)
from .blendshape import (BlendshapeModel, GlobalModel, LocalModels, coarse_reconstruct,
                         evaluate, fit_global_params, load_model, save_model,
                         strip_locals, train_global, train_local)
from .fitter import (Camera, FitHyper, FitParams, FitResult, Observation, fit_partial,
                     fitting_loss, project_weak_perspective, select_visible_landmarks)
from .latent import (LatentModel, VaeTrainConfig, decode, decoder_pullback, encode,
                     load_latent_model, sample_latents, save_latent_model,
                     train_linear, train_vae)
from .dpp import (DppKernel, brute_force_expected_cardinality, build_kernel,
                  expected_cardinality_loss, loss_gradient_wrt_kernel, quality,
                  similarity)
from .diversify import (CompletionSet, DiversifyHyper, diversity_loss, interpolate,
                        optimize_completions)
from .metrics import BenchmarkConfig, BenchmarkReport, asd, cse, mse, run_benchmark
from .config import RunConfig, parse_config

__version__ = "0.1.0"

"""Metrical 3D face toolkit.

Linear morphable-model decoding and pinhole projection (:mod:`.geometry`),
metrical vs. scale-optimised benchmark evaluation (:mod:`.alignment`), scan
registration into model topology (:mod:`.registration`), the identity-feature
shape predictor (:mod:`.predictor`), an analysis-by-synthesis expression
tracker (:mod:`.tracker`) and a synthetic data generator (:mod:`.synthetic`).
"""
from .alignment import (IcpOptions, MeshIndex, Protocol, ScanCloud, Subject, benchmark_evaluate,
                        cumulative_error_curve, icp_align, kabsch_rigid, scan_to_mesh_distance,
                        umeyama_similarity)
from .geometry import (Camera, LinearShapeModel, Mesh, RigidTransform, SimilarityTransform, decode_linear,
                       decoder_parameter_count, pinhole, project, rodrigues)
from .predictor import (AdamW, MappingNetwork, SirenDecoder, TrainConfig, grad_check, masked_l1, predict_shape,
                        train)
from .registration import RegistrationConfig, fit_landmarks, fit_model_icp, nonrigid_refine, register, unify
from .synthetic import SyntheticSpec, synth_cohort, synth_model, synth_sequence
from .tracker import (EnergyBreakdown, EnergyWeights, FaceRig, Frame, TrackConfig, TrackerState, energy,
                      energy_grad, eval_rmse, init_first_frame, rasterize_visible, render, sh_shade, track)

__version__ = "0.1.0"

"""Multi-character pose-guided video generation on a toy diffusion model.

The library splits a tagged prompt into per-character prompts, turns each
character's pose track into soft region masks, and uses those masks both in
region-masked cross-attention and to fuse per-character control residuals.
"""

__version__ = "0.1.0"

from .attention import AttentionParams, cross_attention_block, spatial_aligned_cross_attention
from .control import ControlEncoder, ControlResiduals, control_branch_forward, fuse_control_residuals
from .diffusion import Denoiser, NoiseSchedule, ddim_sample, forward_diffuse
from .masks import MaskPyramid, build_pyramids, extract_bbox_mask, mask_flow, normalize_masks
from .pipeline import ABLATIONS, FULL, Engine, Regime, SceneCondition, TrainConfig, generate, train
from .poses import CharacterTrack, PoseTrackSet, load_pose_json, rasterize_pose, save_pose_json
from .prompts import EmbeddingTable, parse_prompt, split_prompt, tokenize_embed
from .tensorio import read_tensor, read_weights, write_tensor, write_weights

__all__ = [
    "ABLATIONS", "FULL", "AttentionParams", "CharacterTrack", "ControlEncoder", "ControlResiduals",
    "Denoiser", "EmbeddingTable", "Engine", "MaskPyramid", "NoiseSchedule", "PoseTrackSet", "Regime",
    "SceneCondition", "TrainConfig", "build_pyramids", "control_branch_forward", "cross_attention_block",
    "ddim_sample", "extract_bbox_mask", "forward_diffuse", "fuse_control_residuals", "generate",
    "load_pose_json", "mask_flow", "normalize_masks", "parse_prompt", "rasterize_pose", "read_tensor",
    "read_weights", "save_pose_json", "spatial_aligned_cross_attention", "split_prompt", "tokenize_embed",
    "train", "write_tensor", "write_weights",
]

"""Catheter segmentation and centerline extraction in fluoroscopy sequences.

The package combines a small from-scratch neural-network core (residual
encoder-decoder trained with a Dice loss on stacks of consecutive frames),
a skeleton-based centerline extraction pipeline that handles loops and
side branches, data augmentation, evaluation metrics, and a synthetic data
generator, all wired together behind the ``cathseg`` command-line tool.
"""

from .augment import AugmentConfig, AugmentParams, augment_arrays, augment_sample
from .centerline import (
    Centerline,
    ExtractParams,
    extract_centerline,
    load_centerline_json,
    render_overlay,
    resample_polyline,
    save_centerline_json,
    skeletonize,
    smooth_spline,
    threshold,
)
from .imagecore import (
    BinaryMask,
    FrameSequence,
    Image,
    PixelSpacing,
    ProbabilityMap,
    catmull_rom_chain,
    dilate_5x5,
    load_image,
    load_mask,
    normalize_percentile,
    rasterize_curve,
    save_image,
    save_mask,
    save_probability_map,
)
from .metrics import (
    FrameResult,
    centerline_distance,
    dice_coefficient,
    evaluate_frame,
    summarize,
    tip_distance,
    tip_precision,
)
from .nn import (
    ModelConfig,
    OptimizerState,
    SegModel,
    build_frame_stack,
    dice_loss,
    load_checkpoint,
    model_forward,
    save_checkpoint,
    sgd_step,
    train,
)
from .synthgen import SynthConfig, generate_dataset, generate_sequence

__version__ = "0.1.0"

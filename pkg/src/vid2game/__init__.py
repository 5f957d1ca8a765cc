"""vid2game: learn a character's motion and appearance from pose-annotated
clips, then drive it live with 2D displacement commands on any background.

The pipeline has two trainable networks: a motion-conditioned autoregressive
next-pose generator and a pose-to-frame renderer that emits a raw image plus
a blending mask.  Compositing against a user-supplied background happens per
tick in the session engine.
"""

__version__ = "0.1.0"

from vid2game.domain import (
    BinaryMask,
    BlendMask,
    CombinedPose,
    Displacement2,
    EmptyMaskError,
    Frame,
    ObjectMap,
    Point2,
    PoseMap,
    binarize_pose,
    center_of_mass,
    combine_pose_object,
)

__all__ = [
    "BinaryMask",
    "BlendMask",
    "CombinedPose",
    "Displacement2",
    "EmptyMaskError",
    "Frame",
    "ObjectMap",
    "Point2",
    "PoseMap",
    "binarize_pose",
    "center_of_mass",
    "combine_pose_object",
    "__version__",
]

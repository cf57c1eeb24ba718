"""segforge: lung-field segmentation with a from-scratch U-Net pipeline.

The package layers cleanly: ``autodiff`` provides rank-4 tensors with
reverse-mode differentiation, ``unet`` builds and runs the network,
``training`` owns losses, metrics, Adam, and the training loop, ``data``
handles manifests, PNG I/O, augmentation, and synthetic datasets,
``morphology`` implements mask postprocessing, and ``cli`` ties everything
into the ``segforge`` command.
"""

from segforge.autodiff import (
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    concat_channels,
    conv2d,
    maxpool2x2,
    relu,
    sigmoid,
    upsample_nearest2x,
)
from segforge.data import (
    AugmentConfig,
    DataError,
    DatasetManifest,
    ManifestEntry,
    ManifestError,
    Sample,
    augment,
    generate_synthetic,
    load_manifest,
    load_sample,
    merge_lobes,
    resize,
    save_manifest,
    split,
)
from segforge.morphology import (
    PostprocessConfig,
    PostprocessStep,
    binarize,
    closing,
    connected_components,
    dilate,
    erode,
    keep_largest,
    opening,
    postprocess,
    square,
)
from segforge.training import (
    AdamState,
    EvalReport,
    TrainConfig,
    TrainData,
    adam_step,
    bce_loss,
    dice_binary,
    evaluate,
    iou_binary,
    soft_dice_loss,
    train,
)
from segforge.unet import (
    ConfigError,
    ModelFileError,
    ModelParams,
    UNetConfig,
    build,
    forward,
    load,
    save,
)

__version__ = "0.1.0"

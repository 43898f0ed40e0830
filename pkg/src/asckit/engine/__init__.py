from .layers import (  # noqa: F401
    AvgPool2D,
    BatchNorm,
    BiGRU,
    Concat,
    Conv2D,
    Dense,
    Dropout,
    GlobalAvgPool,
    Layer,
    Param,
    ReLU,
    Reshape,
    Sequential,
    Softmax,
    TimeFeatureMean,
)
from .loss import apply_l2, kl_loss  # noqa: F401
from .optim import adam_init, adam_step  # noqa: F401

"""Backdoor watermarks for contrastively pre-trained image encoders.

Pipeline: pre-train a clean encoder (in-batch or queue-based contrastive
loss), embed a trigger-keyed watermark by feature anti-alignment, build
downstream classifiers, attack them (fine-tuning, pruning), and verify
ownership from predictions alone.
"""

from .tensor import Tensor, SGD, Adam, cosine_sim, dropout_mask, l2_normalize
from .data import (AugmentConfig, LabeledDataset, TriggerSpec, TRIGGER_KINDS,
                   apply_trigger, augment, gen_synthetic, load_cifar10, make_trigger)
from .encoder import EncoderModel
from .contrastive import (MomentumQueue, PretrainConfig, momentum_update,
                          moco_loss, ntxent_loss, pretrain, queue_push)
from .watermark import (EmbeddingDiverged, WatermarkConfig, WatermarkedEncoder,
                        embed_watermark, preservation_loss, uniqueness_loss)
from .downstream import AttackConfig, Classifier, finetune, prune, train_head
from .verify import VerificationReport, acc, verify_ownership, wacc
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config, validate_config

__version__ = "0.1.0"

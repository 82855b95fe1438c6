"""Attack success rate."""
from __future__ import annotations

import numpy as np

from .attack import TriggerMask, TriggerPattern, patch_frames
from .videodata import Split


def asr_from_predictions(labels, predictions, target_class: int) -> float:
    """Fraction of samples with label != target that are predicted as target."""
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    eligible = labels != target_class
    if not eligible.any():
        raise ValueError("no samples outside the target class; ASR is undefined")
    return float(np.count_nonzero(predictions[eligible] == target_class) / np.count_nonzero(eligible))


def compute_asr(model, split: Split, trigger: TriggerPattern, mask: TriggerMask, target_class: int) -> float:
    """Patch every non-target test video with the trigger and count target predictions."""
    from .models import predict_labels

    eligible = split.labels != target_class
    if not eligible.any():
        raise ValueError("no samples outside the target class; ASR is undefined")
    x = patch_frames(split.frames[eligible], trigger, mask)
    preds = predict_labels(model, x)
    return float(np.count_nonzero(preds == target_class) / len(preds))

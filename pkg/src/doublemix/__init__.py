"""Continual speech-event detection with a mixture of adapter experts and mixed replay."""
from .audio import AudioClip, EventLabel, Featurizer, featurize, overlay, splice, synth_clip
from .bench import CorpusSpec, TaskStream, build_task_stream, permute_order
from .estimators import (AGEM, EWC, ContinualLearner, DoubleMixture, ExperienceReplay, FineTune,
                         LwF, MultiTask, make_learner)
from .metrics import ResultMatrix, avg_accuracy, avg_forgetting
from .model import MoeDecoderModel

__version__ = "0.1.0"

__all__ = [
    "AGEM", "EWC", "AudioClip", "ContinualLearner", "CorpusSpec", "DoubleMixture", "EventLabel",
    "ExperienceReplay", "Featurizer", "FineTune", "LwF", "MoeDecoderModel", "MultiTask",
    "ResultMatrix", "TaskStream", "avg_accuracy", "avg_forgetting", "build_task_stream",
    "featurize", "make_learner", "overlay", "permute_order", "splice", "synth_clip",
]

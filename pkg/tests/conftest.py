import numpy as np
import pytest

from doublemix.audio import synth_clip


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_clips():
    """A handful of short single-event and combined clips."""
    return [
        synth_clip(semantic=0, duration_s=0.5, seed=1),
        synth_clip(semantic=1, duration_s=0.5, seed=2),
        synth_clip(acoustic=0, duration_s=0.5, seed=3),
        synth_clip(semantic=1, acoustic=0, duration_s=0.5, seed=4),
    ]


@pytest.fixture(scope="session")
def splice_stream():
    """The default 3-task corpus with held-out spliced combined tasks."""
    from doublemix.bench import CorpusSpec, build_task_stream
    return build_task_stream(CorpusSpec(seed=0, combined_mode="splice"))


@pytest.fixture(scope="session")
def small_spec():
    from doublemix.bench import CorpusSpec
    return CorpusSpec(clips_per_class=6, seed=5, combined_mode="overlay", combined_clips_per_task=4)

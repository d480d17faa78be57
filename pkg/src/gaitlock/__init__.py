"""Gait-biometric gating of zero-interaction challenge-response authentication."""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    Channel,
    DeviceKind,
    FeatureId,
    FeatureVector,
    Role,
    SensorKind,
    SensorSample,
    SensorTrace,
    Stat,
    WalkSession,
    canonical_schema,
    schema_for_mode,
)
from .corpus import (  # noqa: F401
    Corpus,
    GaitProfile,
    load_corpus,
    save_corpus,
    synth_corpus,
    synth_imitator,
    synth_profile,
    synth_session,
)
from .features import extract, extract_matrix  # noqa: F401
from .forest import (  # noqa: F401
    EvalReport,
    ForestModel,
    ForestParams,
    LabeledMatrix,
    crossval,
    feature_importance,
    metrics,
    predict,
    train,
)
from .selection import (  # noqa: F401
    SensorSubset,
    correlation,
    correlation_matrix,
    sensor_subset_search,
    uncorrelated_subset,
)
from .attacks import cluster_features, imposter_eval, treadmill_eval  # noqa: F401
from .simulate import run_simulation  # noqa: F401

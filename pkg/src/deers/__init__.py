"""DEERS: dual-stream deep Q-learning recommender with negative feedback."""

from deers.session import (
    PADDING_ID,
    DualState,
    Feedback,
    RewardMapping,
    Session,
    SessionEvent,
    read_sessions,
    transition,
    transition_basic,
    write_sessions,
)
from deers.catalog import (
    Catalog,
    Item,
    build_neighbor_index,
    candidate_pool,
    read_catalog,
    recall_candidates,
    train_embeddings,
    write_catalog,
)
from deers.qnetwork import (
    Architecture,
    Hyperparameters,
    NetworkParameters,
    QVariant,
    apply_update,
    init_parameters,
    loss_and_gradient,
    q_value,
    q_values,
    td_target,
)

__version__ = "0.1.0"

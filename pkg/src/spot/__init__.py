"""Soft prompt transfer toolkit.

Task embeddings from early prompt checkpoints, similarity-based retrieval of
source prompts, multi-task mixtures, a toy frozen model to tune prompts on,
and the statistics used to study how well prompts transfer.
"""

__version__ = "0.1.0"

from .errors import SpotError
from .prompt import (
    Prompt,
    SimilarityMetric,
    TaskEmbedding,
    cosine,
    cross_run_similarity,
    mean_pool,
    sim_avg_tokens,
    sim_per_token,
)
from .library import LibraryEntry, LibraryManifest, load_library, read_checkpoint, write_checkpoint
from .retrieval import (
    MixtureSpec,
    RankedSource,
    best_of_top_k_plan,
    compose_mixture,
    mixture_rates,
    rank_sources,
    weighted_average_prompt,
)
from .analysis import (
    TransferTable,
    aggregate_runs,
    cluster_order,
    export_heatmap,
    load_published_fixture,
    oracle_search,
    pearson,
    relative_error_reduction,
)

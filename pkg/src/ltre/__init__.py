"""Desk-scale dense-retrieval laboratory.

Train a small query encoder against a fixed document index by full retrieval
at every step, compare against classic negative-sampling baselines, and
evaluate with TREC-style metrics — all on seeded synthetic corpora with
known ground truth.
"""

from .corpus import (
    CorpusBundle,
    Document,
    QrelSet,
    Query,
    SyntheticSpec,
    generate_synthetic,
    load_collection,
    load_qrels,
    load_queries,
    tokenize,
)
from .encoder import (
    DocEmbeddingMatrix,
    OptimizerState,
    ParamGrads,
    QueryEncoderParams,
    TermEmbeddingTable,
    adamw_step,
    encode_query,
    extract_query_features,
    finite_difference_gradients,
    load_checkpoint,
    save_checkpoint,
)
from .index import (
    FlatIndex,
    PQCodebooks,
    PQIndex,
    SearchResult,
    brute_force_topn,
    build_pq_index,
    flat_search,
    load_embeddings,
    load_pq_index,
    pq_encode,
    pq_reconstruct,
    pq_search,
    save_embeddings,
    save_pq_index,
    search,
    train_pq,
)
from .lexical import InvertedIndex, bm25_search, build_lexical_index
from .loss import (
    LossKind,
    ScoredCandidateList,
    batch_pairwise_loss,
    delta_metric,
    lambdarank,
    ranknet,
    ranknet_grad,
)
from .metrics import (
    MetricsReport,
    RunRanking,
    evaluate_run,
    mrr_at_k,
    ndcg_at_k,
    overlap_at_k,
    read_run,
    recall_at_k,
    write_run,
)
from .trainer import (
    Strategy,
    TrainConfig,
    TrainingLog,
    TrainResult,
    TrainerStatics,
    evaluate_params,
    inject_relevant,
    ltre_train_step,
    sample_candidates,
    train_loop,
)

__version__ = "0.1.0"

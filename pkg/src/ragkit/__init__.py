"""Random attributed graph prototypes, likelihood-space embedding, and
classification of attributed graphs."""

from .graphs import (AttributedGraph, GraphDataset, GraphError, canonical_order,
                     load_jsonl, save_jsonl, validate)
from .matcher import (AnnealSchedule, Compatibility, MatchError, Morphism,
                      attribute_compatibility, likelihood_compatibility, match,
                      match_call_count, reset_match_counter, sinkhorn_normalize)
from .model import (EdgeLaw, ModelError, NodeLaw, RandomGraphModel,
                    best_log_likelihood, fit, init_prototype, load_model,
                    log_likelihood, observe, save_model,
                    structural_outcome_log_prob)
from .embedding import (LikelihoodEmbedding, apply_standardization, embed,
                        embed_dataset, standardization_stats)
from .classify import (KernelSpec, PredictionRecord, PredictionSet,
                       knn_graph_classify, model_select, rag_ml_classify,
                       roc_auc, significance_test, svm_predict, svm_train)
from .synth import DistortionSpec, distort, generate_base, make_dataset

__version__ = "0.1.0"

"""Multiple-choice reading comprehension with option comparison, phrasal
attention, retrieval-built contexts, and joint explanation generation."""

from .data import (DatasetError, EncodedItem, McqItem, TokenSequence, TruncationCaps,
                   Vocabulary, debias_shuffle, encode_item, load_dataset,
                   option_distribution, save_dataset, tokenize_text, truncate_item)
from .gradcheck import GradCheckReport, gradcheck, gradcheck_module
from .heads import LossBreakdown, multitask_loss, option_probabilities, option_scores, \
    select_option
from .inference import OptionComparator, trilinear_attention
from .metrics import bleu4, classification_metrics, generation_metrics, rouge_l
from .model import Batch, McqModel, collate
from .phrasal import PhrasalTextEncoder, link_probabilities, phrasal_matrix
from .retrieval import (HashEmbedder, RankedList, RetrievalJudgment, Retriever,
                        SentenceUnit, SparseIndex, bm25_score, build_context,
                        dense_query_vector, retrieval_metrics, rrf_fuse, segment_corpus)
from .synth import synth_generate
from .train import (MetricReport, TrainConfig, TrainResult, ablate_grid, evaluate,
                    load_checkpoint, save_checkpoint, train)

__version__ = "0.1.0"

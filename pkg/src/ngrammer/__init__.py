"""Latent n-gram augmentation for small transformer language models."""

from ngrammer.tensor import Tensor, Tape, NumericError, finite_diff_check
from ngrammer.hashing import HashFamily, bigram_ids, make_hash_family, hash_to_vocab
from ngrammer.codebook import Codebook, assign, kmeans_step, init_from_batch, freeze
from ngrammer.bigram_table import BigramTable, SparseGrad, init_table, lookup, adagrad_update
from ngrammer.layer import NGrammerConfig, NGrammerState, ngrammer_forward, ngrammer_forward_cached
from ngrammer.corpus import SyntheticCorpus, gen_corpus
from ngrammer.lm import ModelConfig, TrainConfig, Model, build_model, train, evaluate_ppl
from ngrammer.latent import LatentCache, ClusterReport, build_cache, inspect_clusters, bench_latent_paths

__version__ = "0.1.0"

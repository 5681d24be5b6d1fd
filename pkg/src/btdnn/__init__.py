"""Desk-scale sequence-discriminative training of factored time-delay
networks whose first layer can model uncertainty over weights, dropout
mixtures, activation-basis choice, or hidden outputs."""

from .bayes import (BayesDropoutConfig, GaussianVariational, NoiseStream,
                    elbo_hyperparam_grads, kl_bayes_dropout, kl_gaussian,
                    sample_weights, sample_weights_bayes_dropout,
                    standard_dropout_mask)
from .corpus import (CorpusSpec, DomainShift, Utterance, estimate_bigram,
                     generate, load_bigram, load_split, run_length_collapse)
from .criterion import (CriterionConfig, ElboBreakdown, SequenceGraph,
                        build_denominator_graph, build_numerator_graph,
                        ce_loss_and_grad, combine, forward_backward,
                        mmi_loss_and_grad)
from .decode import (Hypothesis, decode_corpus, evaluate_corpus,
                     label_error_rate, score_report, viterbi_decode)
from .grad import (Param, Tape, activation_forward, affine_forward, backward)
from .tdnn import (DEFAULT_OFFSETS, MODES, FactoredLayer, ParamCounts,
                   SpliceSpec, TdnnStack, apply_semi_orthogonal_constraint,
                   forward_det, forward_tape, param_count,
                   posterior_mean_collapse, semi_orthogonal_residual, splice)
from .trainer import (AdaptConfig, Checkpoint, TrainConfig, adapt,
                      bootstrap_prior, checkpoint_from_stack, evaluate_batch,
                      load_checkpoint, save_checkpoint, stack_from_checkpoint,
                      train, train_pipeline)

__version__ = "0.1.0"

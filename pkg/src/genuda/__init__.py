"""genuda: a desk-scale lab for generative unsupervised domain adaptation.

Masking and classification are both cast as next-word prediction over a
tiny from-scratch autoregressive transformer.  The package provides the
continued pre-training schedules, the MK-MMD invariance baselines,
PMI-driven selective masking, IA3/adapter tuning, and a reproducible
experiment harness around them.
"""

from .corpus import (BINARY_SENTIMENT, Corpus, DomainPair, Example, LabelSpace,
                     SplitCorpora, SplitSpec, SynthSpec, evaluation_labels,
                     kshot_subsample, load_corpus, load_pair_dir, save_corpus,
                     save_pair_dir, split_corpus, synth_generate)
from .divergence import (KernelBank, LambdaSchedule, coral, lambda_at,
                         mkmmd_layerwise, mmd2, mmd_over_logits)
from .evaluation import (EvalReport, evaluate, export_embeddings,
                         mann_whitney_u, masked_inference_eval, rank_classify,
                         students_t)
from .masking import (MaskPlan, MaskStrategy, PmiTable, WordSets, compute_pmi,
                      mask_at_inference, plan_masks, select_word_sets)
from .model import (ForwardOutput, ModelConfig, ModelState, Parameters,
                    PeftConfig, backward, embed, forward, init_parameters,
                    load_parameters, make_batch, nll_loss, save_parameters)
from .templating import (PromptTemplate, TemplatePair, clm_template,
                         cls_template, deverbalize, mlm_template)
from .tokenizer import Vocab, build_vocab, decode, encode
from .training import (AdamState, TrainConfig, TrainResult, adam_step,
                       init_adam, run)

__version__ = "0.1.0"

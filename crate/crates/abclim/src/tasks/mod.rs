//! Desk-scale task drivers exercising the feature-learning vs kernel-regime
//! dichotomy: first-order MAML (finite, infinite-linear, kernel), CBOW
//! Word2Vec with analogy evaluation, synthetic data generators, and the
//! transfer-triviality experiment.

mod fewshot;
mod maml;
pub mod transfer;
mod w2v;

pub use fewshot::{gen_fewshot, FewShotSpec, FewShotTask};
pub use maml::{
    maml_kernel_meta_test, maml_kernel_train, maml_meta_test, maml_train, nngp_ntk_kernel_mc,
    KernelModelQ, MamlConfig, McKernel, McKernelKind,
};
pub use transfer::{transfer_triviality, TransferSpec};
pub use w2v::{
    analogy_eval, analogy_eval_with_candidates, binomial_two_sided_p, gen_planted_corpus,
    load_corpus, w2v_train, Corpus, W2VConfig, W2VState,
};

// Captioning, beat-sentence local contrastive and global contrastive losses.
#pragma once

#include "ecglp/model.hpp"

namespace ecglp {

/// Teacher-forced token NLL. `targets` < 0 (or PAD) are skipped.
template <typename S>
Tensor<S> lm_loss(const Tensor<S>& logits, std::span<const int> targets, Reduction reduction = Reduction::kMean);

template <typename S>
struct BeatSentenceAttention {
  Tensor<S> alpha;  // n_sent x N_B, rows sum to 1
  Tensor<S> b_hat;  // n_sent x D
};

/// alpha[l][j] = softmax_j(cos(S(l), B(j)) / tau1); b_hat[l] = sum_j alpha[l][j] B(j).
/// With `literal`, b_hat[l] = sum_j alpha[l][j] S(l) instead (weights applied to the sentence).
template <typename S>
BeatSentenceAttention<S> beat_sentence_attention(const Tensor<S>& beats, const Tensor<S>& sentences, double tau1,
                                                 bool literal = false);

/// Z = tau2 * logsumexp_l(cos(b_hat(l), S(l)) / tau2).
template <typename S>
Tensor<S> pair_similarity(const Tensor<S>& b_hat, const Tensor<S>& sentences, double tau2);

template <typename S>
struct AlignmentTrace {
  Matrix<S> alpha;
  Matrix<S> b_hat;
  Matrix<S> z_matrix;
};

template <typename S>
struct ContrastiveResult {
  Tensor<S> loss;  // (e2t + t2e) / 2
  Tensor<S> e2t;
  Tensor<S> t2e;
  Tensor<S> similarity;  // B x B logits before temperature (Z or cosine)
};

/// Symmetric cross-entropy over a B x B score matrix scaled by 1/temperature.
template <typename S>
ContrastiveResult<S> symmetric_cross_entropy(const Tensor<S>& scores, const Tensor<S>& temperature);

/// Local loss over a batch: Z is recomputed for every (ECG i, report k) pair.
/// When `traces` is given, it receives the matched-pair (i == k) alpha and b_hat
/// for each sample, all sharing the batch z_matrix.
template <typename S>
ContrastiveResult<S> local_contrastive(const std::vector<Tensor<S>>& beats, const std::vector<Tensor<S>>& sentences,
                                       double tau1, double tau2, bool literal = false,
                                       std::vector<AlignmentTrace<S>>* traces = nullptr);

/// InfoNCE over cosine similarities of global embeddings; tau = exp(log_tau).
template <typename S>
ContrastiveResult<S> global_contrastive(const Tensor<S>& x_g, const Tensor<S>& t_g, const Tensor<S>& log_tau);

struct LossBreakdown {
  double l_lm = 0, l_local = 0, l_local_e2t = 0, l_local_t2e = 0;
  double l_g = 0, l_g_e2t = 0, l_g_t2e = 0;
  double total = 0;
  double tau_learnable = 0;
};

/// Which terms of the objective are computed. Disabled terms are skipped
/// entirely and reported as 0.
struct LossSwitches {
  bool global = true;
  bool lm = true;
  bool local = true;
};

/// total = l_g + lambda_lm * l_lm + lambda_local * l_local, over enabled terms.
template <typename S>
Tensor<S> total_loss(const Tensor<S>* l_g, const Tensor<S>* l_lm, const Tensor<S>* l_local, double lambda_lm,
                     double lambda_local);

template <typename S>
struct BatchLoss {
  Tensor<S> total;
  LossBreakdown parts;
};

/// Full objective on a batch of paired samples. Every report must have at least one sentence.
template <typename S>
BatchLoss<S> batch_loss(const Model<S>& model, const std::vector<const EcgTextPair*>& batch, const LossSwitches& sw,
                        const ForwardMode& mode);

struct MaskedTokens {
  std::vector<int> input;    // ids with masking applied
  std::vector<int> targets;  // original id at masked positions, -1 elsewhere
};

/// Selects each word token with probability 0.15 (at least one is forced);
/// selected tokens become MASK 80%, a random word 10%, unchanged 10%.
MaskedTokens mask_tokens(std::span<const int> token_ids, int vocab_size, Rng& rng, double rate = 0.15);

/// Mean NLL of the original tokens at masked positions.
template <typename S>
Tensor<S> mlm_loss(const Tensor<S>& logits, std::span<const int> targets);

}  // namespace ecglp

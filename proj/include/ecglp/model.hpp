// ECG encoder, text encoder, caption decoder and projection heads.
//
// ECG path:  signal -> conv blocks -> conv positions -> transformer -> E
//            E -> caption pooler -> E_tilde;  E -> beat pooler -> B -> p_E -> B_proj
//            X_g = mean over rows of B_proj
// Text path: BOS w_1..w_N EOS -> causal transformer; word rows 1..N, CLS = final row
//            S = per-sentence mean of word rows -> p_T -> S_proj;  T_g = p_T(CLS)
#pragma once

#include "ecglp/config.hpp"
#include "ecglp/data.hpp"
#include "ecglp/nn.hpp"

#include <optional>

namespace ecglp {

template <typename S>
struct EcgEncoding {
  Tensor<S> E;        // L_t x D
  Tensor<S> E_tilde;  // L_q x D
  Tensor<S> B;        // N_B x D
  Tensor<S> B_proj;   // N_B x D
  Tensor<S> X_g;      // 1 x D
};

template <typename T>
struct TextEncoding {
  Tensor<T> words;   // N x D (undefined when the report has no words)
  Tensor<T> cls;     // 1 x D
  Tensor<T> S;       // n_sent x D (undefined without sentences)
  Tensor<T> S_proj;  // n_sent x D
  Tensor<T> T_g;     // 1 x D
};

template <typename T>
struct EmbeddingBundle {
  Tensor<T> E, E_tilde, B, B_proj, S, S_proj, X_g, T_g;
};

/// Mean of the word rows inside each span, stacked in span order.
template <typename S>
Tensor<S> sentence_embed(const Tensor<S>& words, std::span<const Span> spans);

template <typename S>
struct Projector {
  ProjectorKind kind = ProjectorKind::kMlp;
  Linear<S> fc1;
  Linear<S> fc2;

  Projector() = default;
  Projector(ParameterSet<S>& ps, const std::string& name, int dim, ProjectorKind kind, Rng& rng);
  Tensor<S> operator()(const Tensor<S>& x) const;
};

template <typename S>
class Model {
 public:
  /// vocab_size must be set in `config`. Weights are drawn from derive(seed, "init").
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParameterSet<S>& parameters() { return params_; }
  const ParameterSet<S>& parameters() const { return params_; }

  ForwardMode mode(bool training, Rng* rng) const { return {training, rng, config_.dropout}; }

  Tensor<S> ecg_feature_extract(const ECGRecord& record, const ForwardMode& mode) const;
  Tensor<S> ecg_feature_extract(const Matrix<S>& signal, const ForwardMode& mode) const;
  Tensor<S> ecg_encode(const Tensor<S>& features, const ForwardMode& mode) const;
  Tensor<S> caption_pool(const Tensor<S>& E, std::vector<Matrix<S>>* weights_out = nullptr) const;
  Tensor<S> beat_pool(const Tensor<S>& E, std::vector<Matrix<S>>* weights_out = nullptr) const;
  Tensor<S> project_ecg(const Tensor<S>& x) const { return p_ecg_(x); }
  Tensor<S> project_text(const Tensor<S>& x) const { return p_text_(x); }

  /// Hidden states for the full token sequence (n_tokens x D).
  Tensor<S> text_hidden(std::span<const int> token_ids, const ForwardMode& mode) const;
  TextEncoding<S> encode_text(const TextReport& report, const ForwardMode& mode) const;
  EcgEncoding<S> encode_ecg(const ECGRecord& record, const ForwardMode& mode) const;
  EmbeddingBundle<S> forward(const ECGRecord& record, const TextReport& report, const ForwardMode& mode) const;

  /// Teacher-forced decoder pass; row i predicts token i + 1.
  Tensor<S> caption_logits(const Tensor<S>& E_tilde, std::span<const int> prefix, const ForwardMode& mode) const;
  /// Per-position vocabulary logits from the text encoder.
  Tensor<S> mlm_logits(std::span<const int> token_ids, const ForwardMode& mode) const;

  Tensor<S>& log_tau() { return log_tau_; }
  const Tensor<S>& log_tau() const { return log_tau_; }
  double tau() const { return std::exp(static_cast<double>(log_tau_.item())); }
  /// Keeps tau within [tau_min, tau_max] after an optimizer step.
  void clamp_tau();

  /// Parameters owned by the text encoder (token/position tables and blocks).
  bool is_text_encoder_param(const std::string& name) const;

 private:
  ModelConfig config_;
  ParameterSet<S> params_;
  std::vector<ConvBlock<S>> conv_;
  ConvPositional<S> conv_pos_;
  std::vector<TransformerBlock<S>> ecg_blocks_;
  LayerNorm<S> ecg_norm_;
  AttentionPooler<S> caption_pooler_;
  AttentionPooler<S> beat_pooler_;
  Tensor<S> text_tok_, text_pos_;
  std::vector<TransformerBlock<S>> text_blocks_;
  LayerNorm<S> text_norm_;
  Linear<S> mlm_head_;
  Tensor<S> dec_tok_, dec_pos_;
  std::vector<TransformerBlock<S>> dec_blocks_;
  LayerNorm<S> dec_norm_;
  Linear<S> dec_head_;
  Projector<S> p_ecg_;
  Projector<S> p_text_;
  Tensor<S> log_tau_;
};

}  // namespace ecglp

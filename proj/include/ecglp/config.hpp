// Model and training configuration, JSON (de)serialization and hashing.
#pragma once

#include <json.hpp>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ecglp {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class ProjectorKind { kMlp, kLinear };

struct ModelConfig {
  int dim = 64;
  int heads = 4;
  int mlp_ratio = 4;
  int ecg_layers = 2;
  int text_enc_layers = 2;
  int text_dec_layers = 2;
  int input_leads = 4;
  int conv_blocks = 2;
  std::vector<int> conv_strides{4, 4};
  int conv_kernel = 9;
  int norm_groups = 8;
  int pos_conv_kernel = 5;
  int caption_queries = 16;  // L_q
  int beat_tokens = 10;      // N_B
  int vocab_size = 0;        // taken from the corpus vocabulary
  int max_text_len = 32;
  double dropout = 0.1;

  double tau_local = 0.25;  // beat-sentence attention temperature
  double tau_pair = 0.1;    // pair-similarity / local contrastive temperature
  double tau_init = 0.07;   // learnable global temperature, initial value
  double tau_min = 1e-3;
  double tau_max = 1.0;
  double lambda_lm = 2.0;
  double lambda_local = 0.2;

  ProjectorKind projector = ProjectorKind::kMlp;
  bool lm_sum_reduction = false;  // per-report token sum instead of token mean
  bool literal_beat_sum = false;  // weight sentences instead of beats when pooling (literal variant)
  bool train_text_encoder = true;

  /// Desk scale (the defaults above).
  static ModelConfig desk();
  /// Full-scale depths: 8 ECG layers, 12 text encoder layers, 6 decoder layers,
  /// 4 conv blocks, 128 caption queries.
  static ModelConfig full_scale();

  int total_stride() const;
  void validate() const;
};

struct TrainConfig {
  double lr = 2e-4;
  double weight_decay = 0.2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 16;
  int max_epochs = 100;
  int patience = 5;
  int max_steps = 0;     // 0 = no step cap beyond max_epochs
  int warmup_steps = 0;  // linear warmup before the cosine decay
  int eval_every = 0;    // extra validation every N steps; 0 = epoch ends only
  std::uint64_t seed = 0;
  std::string schedule = "cosine";
  bool early_stopping = true;
  bool use_global = true;
  bool use_lm = true;
  bool use_local = true;

  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
/// Missing keys keep the values already in `c`, so files can be partial.
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Stable hash of the canonical JSON form.
std::string config_hash(const ModelConfig& c);

}  // namespace ecglp

#include "ecglp/config.hpp"

#include "ecglp/rng.hpp"

#include <numeric>

namespace ecglp {

using nlohmann::json;

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::full_scale() {
  ModelConfig c;
  c.dim = 256;
  c.heads = 8;
  c.ecg_layers = 8;
  c.text_enc_layers = 12;
  c.text_dec_layers = 6;
  c.conv_blocks = 4;
  c.conv_strides = {5, 2, 2, 2};
  c.caption_queries = 128;
  return c;
}

int ModelConfig::total_stride() const {
  return std::accumulate(conv_strides.begin(), conv_strides.end(), 1, std::multiplies<>());
}

void ModelConfig::validate() const {
  if (dim < 1 || heads < 1 || dim % heads != 0) throw ConfigError("dim must be a positive multiple of heads");
  if (beat_tokens < 1) throw ConfigError("beat_tokens must be >= 1");
  if (caption_queries < 1) throw ConfigError("caption_queries must be >= 1");
  if (!(tau_local > 0) || !(tau_pair > 0)) throw ConfigError("temperatures must be positive");
  if (!(tau_min > 0) || !(tau_max >= tau_min) || tau_init < tau_min || tau_init > tau_max) {
    throw ConfigError("tau_init must lie in [tau_min, tau_max]");
  }
  if (conv_blocks < 1 || static_cast<int>(conv_strides.size()) != conv_blocks) {
    throw ConfigError("conv_strides needs one entry per conv block");
  }
  for (int s : conv_strides) {
    if (s < 1 || s > conv_kernel) throw ConfigError("conv strides must lie in [1, conv_kernel]");
  }
  if (dim % norm_groups != 0) throw ConfigError("dim must be divisible by norm_groups");
  if (pos_conv_kernel < 1 || pos_conv_kernel % 2 == 0) throw ConfigError("pos_conv_kernel must be odd");
  if (ecg_layers < 0 || text_enc_layers < 0 || text_dec_layers < 0) throw ConfigError("negative layer count");
  if (input_leads < 1 || max_text_len < 2 || mlp_ratio < 1) throw ConfigError("invalid model size");
  if (dropout < 0 || dropout >= 1) throw ConfigError("dropout must lie in [0, 1)");
}

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("lr must be positive");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2 for contrastive losses");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  if (schedule != "cosine" && schedule != "constant") throw ConfigError("schedule must be cosine or constant");
  if (!use_global && !use_lm && !use_local) throw ConfigError("at least one loss term must be enabled");
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"dim", c.dim},
           {"heads", c.heads},
           {"mlp_ratio", c.mlp_ratio},
           {"ecg_layers", c.ecg_layers},
           {"text_enc_layers", c.text_enc_layers},
           {"text_dec_layers", c.text_dec_layers},
           {"input_leads", c.input_leads},
           {"conv_blocks", c.conv_blocks},
           {"conv_strides", c.conv_strides},
           {"conv_kernel", c.conv_kernel},
           {"norm_groups", c.norm_groups},
           {"pos_conv_kernel", c.pos_conv_kernel},
           {"caption_queries", c.caption_queries},
           {"beat_tokens", c.beat_tokens},
           {"vocab_size", c.vocab_size},
           {"max_text_len", c.max_text_len},
           {"dropout", c.dropout},
           {"tau_local", c.tau_local},
           {"tau_pair", c.tau_pair},
           {"tau_init", c.tau_init},
           {"tau_min", c.tau_min},
           {"tau_max", c.tau_max},
           {"lambda_lm", c.lambda_lm},
           {"lambda_local", c.lambda_local},
           {"projector", c.projector == ProjectorKind::kMlp ? "mlp" : "linear"},
           {"lm_sum_reduction", c.lm_sum_reduction},
           {"literal_beat_sum", c.literal_beat_sum},
           {"train_text_encoder", c.train_text_encoder}};
}

namespace {

template <typename T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void from_json(const json& j, ModelConfig& c) {
  try {
    maybe(j, "dim", c.dim);
    maybe(j, "heads", c.heads);
    maybe(j, "mlp_ratio", c.mlp_ratio);
    maybe(j, "ecg_layers", c.ecg_layers);
    maybe(j, "text_enc_layers", c.text_enc_layers);
    maybe(j, "text_dec_layers", c.text_dec_layers);
    maybe(j, "input_leads", c.input_leads);
    maybe(j, "conv_blocks", c.conv_blocks);
    maybe(j, "conv_strides", c.conv_strides);
    maybe(j, "conv_kernel", c.conv_kernel);
    maybe(j, "norm_groups", c.norm_groups);
    maybe(j, "pos_conv_kernel", c.pos_conv_kernel);
    maybe(j, "caption_queries", c.caption_queries);
    maybe(j, "beat_tokens", c.beat_tokens);
    maybe(j, "vocab_size", c.vocab_size);
    maybe(j, "max_text_len", c.max_text_len);
    maybe(j, "dropout", c.dropout);
    maybe(j, "tau_local", c.tau_local);
    maybe(j, "tau_pair", c.tau_pair);
    maybe(j, "tau_init", c.tau_init);
    maybe(j, "tau_min", c.tau_min);
    maybe(j, "tau_max", c.tau_max);
    maybe(j, "lambda_lm", c.lambda_lm);
    maybe(j, "lambda_local", c.lambda_local);
    if (j.contains("projector")) {
      const auto p = j.at("projector").get<std::string>();
      if (p != "mlp" && p != "linear") throw ConfigError("projector must be mlp or linear");
      c.projector = p == "mlp" ? ProjectorKind::kMlp : ProjectorKind::kLinear;
    }
    maybe(j, "lm_sum_reduction", c.lm_sum_reduction);
    maybe(j, "literal_beat_sum", c.literal_beat_sum);
    maybe(j, "train_text_encoder", c.train_text_encoder);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad model config: ") + e.what());
  }
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"lr", c.lr},
           {"weight_decay", c.weight_decay},
           {"beta1", c.beta1},
           {"beta2", c.beta2},
           {"adam_eps", c.adam_eps},
           {"batch_size", c.batch_size},
           {"max_epochs", c.max_epochs},
           {"patience", c.patience},
           {"max_steps", c.max_steps},
           {"warmup_steps", c.warmup_steps},
           {"eval_every", c.eval_every},
           {"seed", c.seed},
           {"schedule", c.schedule},
           {"early_stopping", c.early_stopping},
           {"use_global", c.use_global},
           {"use_lm", c.use_lm},
           {"use_local", c.use_local}};
}

void from_json(const json& j, TrainConfig& c) {
  try {
    maybe(j, "lr", c.lr);
    maybe(j, "weight_decay", c.weight_decay);
    maybe(j, "beta1", c.beta1);
    maybe(j, "beta2", c.beta2);
    maybe(j, "adam_eps", c.adam_eps);
    maybe(j, "batch_size", c.batch_size);
    maybe(j, "max_epochs", c.max_epochs);
    maybe(j, "patience", c.patience);
    maybe(j, "max_steps", c.max_steps);
    maybe(j, "warmup_steps", c.warmup_steps);
    maybe(j, "eval_every", c.eval_every);
    maybe(j, "seed", c.seed);
    maybe(j, "schedule", c.schedule);
    maybe(j, "early_stopping", c.early_stopping);
    maybe(j, "use_global", c.use_global);
    maybe(j, "use_lm", c.use_lm);
    maybe(j, "use_local", c.use_local);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad train config: ") + e.what());
  }
}

std::string config_hash(const ModelConfig& c) {
  json j = c;
  return hex64(fnv1a64(j.dump()));
}

}  // namespace ecglp

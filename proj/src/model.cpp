#include "ecglp/model.hpp"

#include <cmath>
#include <numeric>

namespace ecglp {

template <typename S>
Tensor<S> sentence_embed(const Tensor<S>& words, std::span<const Span> spans) {
  if (spans.empty()) throw ShapeError("sentence_embed: no sentences");
  std::vector<Tensor<S>> rows;
  rows.reserve(spans.size());
  for (const auto& sp : spans) {
    if (sp.end <= sp.begin) throw ShapeError("sentence_embed: empty sentence span");
    if (sp.begin < 0 || !words.defined() || sp.end > words.rows()) throw ShapeError("sentence_embed: span out of range");
    rows.push_back(mean_rows(slice_rows(words, sp.begin, sp.end - sp.begin)));
  }
  return rows.size() == 1 ? rows.front() : concat_rows(rows);
}

template <typename S>
Projector<S>::Projector(ParameterSet<S>& ps, const std::string& name, int dim, ProjectorKind k, Rng& rng)
    : kind(k), fc1(ps, name + ".fc1", dim, dim, rng) {
  if (kind == ProjectorKind::kMlp) fc2 = Linear<S>(ps, name + ".fc2", dim, dim, rng);
}

template <typename S>
Tensor<S> Projector<S>::operator()(const Tensor<S>& x) const {
  if (kind == ProjectorKind::kLinear) return fc1(x);
  return fc2(gelu(fc1(x)));
}

namespace {

std::vector<int> iota_ids(std::size_t n) {
  std::vector<int> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

}  // namespace

template <typename S>
Model<S>::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  if (config_.vocab_size <= kNumSpecial) throw ConfigError("vocab_size must be set from the corpus vocabulary");
  Rng rng(Rng::derive(seed, "init"));
  const int d = config_.dim, h = config_.heads, r = config_.mlp_ratio;
  const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));

  int in = config_.input_leads;
  for (int i = 0; i < config_.conv_blocks; ++i) {
    conv_.emplace_back(params_, "ecg.conv" + std::to_string(i), in, d, config_.conv_kernel, config_.conv_strides[i],
                       config_.norm_groups, rng);
    in = d;
  }
  conv_pos_ = ConvPositional<S>(params_, "ecg.pos_conv", d, config_.pos_conv_kernel, rng);
  for (int i = 0; i < config_.ecg_layers; ++i) {
    ecg_blocks_.emplace_back(params_, "ecg.block" + std::to_string(i), d, h, r, false, false, rng);
  }
  ecg_norm_ = LayerNorm<S>(params_, "ecg.norm", d);
  caption_pooler_ = AttentionPooler<S>(params_, "caption_pooler", config_.caption_queries, d, h, rng);
  beat_pooler_ = AttentionPooler<S>(params_, "beat_pooler", config_.beat_tokens, d, h, rng);

  const int v = config_.vocab_size, len = config_.max_text_len;
  text_tok_ = params_.add("text.tok", normal_init<S>(v, d, emb_std, rng));
  text_pos_ = params_.add("text.pos", normal_init<S>(len, d, emb_std, rng));
  for (int i = 0; i < config_.text_enc_layers; ++i) {
    text_blocks_.emplace_back(params_, "text.block" + std::to_string(i), d, h, r, true, false, rng);
  }
  text_norm_ = LayerNorm<S>(params_, "text.norm", d);
  mlm_head_ = Linear<S>(params_, "mlm_head", d, v, rng);

  dec_tok_ = params_.add("dec.tok", normal_init<S>(v, d, emb_std, rng));
  dec_pos_ = params_.add("dec.pos", normal_init<S>(len, d, emb_std, rng));
  for (int i = 0; i < config_.text_dec_layers; ++i) {
    dec_blocks_.emplace_back(params_, "dec.block" + std::to_string(i), d, h, r, true, true, rng);
  }
  dec_norm_ = LayerNorm<S>(params_, "dec.norm", d);
  dec_head_ = Linear<S>(params_, "dec.head", d, v, rng);

  p_ecg_ = Projector<S>(params_, "proj_ecg", d, config_.projector, rng);
  p_text_ = Projector<S>(params_, "proj_text", d, config_.projector, rng);
  Matrix<S> lt(1, 1);
  lt(0, 0) = static_cast<S>(std::log(config_.tau_init));
  log_tau_ = params_.add("log_tau", lt);
}

template <typename S>
Tensor<S> Model<S>::ecg_feature_extract(const ECGRecord& record, const ForwardMode& mode) const {
  return ecg_feature_extract(Matrix<S>(record.signal.template cast<S>()), mode);
}

template <typename S>
Tensor<S> Model<S>::ecg_feature_extract(const Matrix<S>& signal, const ForwardMode& mode) const {
  if (signal.rows() != config_.input_leads) {
    throw ShapeError("expected " + std::to_string(config_.input_leads) + " leads, got " +
                     std::to_string(signal.rows()));
  }
  if (signal.cols() < config_.total_stride()) {
    throw ShapeError("signal of " + std::to_string(signal.cols()) + " samples is shorter than the total stride " +
                     std::to_string(config_.total_stride()));
  }
  Tensor<S> x(Matrix<S>(signal.transpose()));
  for (const auto& block : conv_) x = block(x, mode);
  return x;
}

template <typename S>
Tensor<S> Model<S>::ecg_encode(const Tensor<S>& features, const ForwardMode& mode) const {
  if (features.rows() < 1) throw ShapeError("ecg_encode: empty feature sequence");
  auto x = conv_pos_(features);
  for (const auto& block : ecg_blocks_) x = block(x, nullptr, mode);
  return ecg_norm_(x);
}

template <typename S>
Tensor<S> Model<S>::caption_pool(const Tensor<S>& E, std::vector<Matrix<S>>* weights_out) const {
  return caption_pooler_(E, weights_out);
}

template <typename S>
Tensor<S> Model<S>::beat_pool(const Tensor<S>& E, std::vector<Matrix<S>>* weights_out) const {
  return beat_pooler_(E, weights_out);
}

template <typename S>
EcgEncoding<S> Model<S>::encode_ecg(const ECGRecord& record, const ForwardMode& mode) const {
  EcgEncoding<S> out;
  out.E = ecg_encode(ecg_feature_extract(record, mode), mode);
  out.E_tilde = caption_pool(out.E);
  out.B = beat_pool(out.E);
  out.B_proj = project_ecg(out.B);
  out.X_g = mean_rows(out.B_proj);
  return out;
}

template <typename S>
Tensor<S> Model<S>::text_hidden(std::span<const int> ids, const ForwardMode& mode) const {
  if (ids.empty()) throw ShapeError("text encoder needs at least one token");
  if (static_cast<int>(ids.size()) > config_.max_text_len) {
    throw ShapeError("report of " + std::to_string(ids.size()) + " tokens exceeds max_text_len " +
                     std::to_string(config_.max_text_len));
  }
  const auto pos = iota_ids(ids.size());
  auto x = embedding(text_tok_, ids) + embedding(text_pos_, std::span<const int>(pos));
  for (const auto& block : text_blocks_) x = block(x, nullptr, mode);
  return text_norm_(x);
}

template <typename S>
TextEncoding<S> Model<S>::encode_text(const TextReport& report, const ForwardMode& mode) const {
  TextEncoding<S> out;
  const auto hidden = text_hidden(report.token_ids, mode);
  const Index n = hidden.rows();
  out.cls = slice_rows(hidden, n - 1, 1);
  const int words = report.word_count();
  if (words > 0) out.words = slice_rows(hidden, 1, words);
  if (!report.sentence_spans.empty()) {
    out.S = sentence_embed(out.words, std::span<const Span>(report.sentence_spans));
    out.S_proj = project_text(out.S);
  }
  out.T_g = project_text(out.cls);
  return out;
}

template <typename S>
EmbeddingBundle<S> Model<S>::forward(const ECGRecord& record, const TextReport& report,
                                     const ForwardMode& mode) const {
  auto e = encode_ecg(record, mode);
  auto t = encode_text(report, mode);
  return {e.E, e.E_tilde, e.B, e.B_proj, t.S, t.S_proj, e.X_g, t.T_g};
}

template <typename S>
Tensor<S> Model<S>::caption_logits(const Tensor<S>& E_tilde, std::span<const int> prefix,
                                   const ForwardMode& mode) const {
  if (prefix.empty() || prefix.front() != kBos) throw ShapeError("caption prefix must start with BOS");
  if (static_cast<int>(prefix.size()) > config_.max_text_len) throw ShapeError("caption prefix exceeds max_text_len");
  const auto pos = iota_ids(prefix.size());
  auto x = embedding(dec_tok_, prefix) + embedding(dec_pos_, std::span<const int>(pos));
  for (const auto& block : dec_blocks_) x = block(x, &E_tilde, mode);
  return dec_head_(dec_norm_(x));
}

template <typename S>
Tensor<S> Model<S>::mlm_logits(std::span<const int> token_ids, const ForwardMode& mode) const {
  return mlm_head_(text_hidden(token_ids, mode));
}

template <typename S>
void Model<S>::clamp_tau() {
  auto& v = log_tau_.mutable_value()(0, 0);
  const S lo = static_cast<S>(std::log(config_.tau_min)), hi = static_cast<S>(std::log(config_.tau_max));
  v = std::clamp(v, lo, hi);
}

template <typename S>
bool Model<S>::is_text_encoder_param(const std::string& name) const {
  return name.rfind("text.", 0) == 0;
}

template Tensor<float> sentence_embed<float>(const Tensor<float>&, std::span<const Span>);
template Tensor<double> sentence_embed<double>(const Tensor<double>&, std::span<const Span>);
template struct Projector<float>;
template struct Projector<double>;
template class Model<float>;
template class Model<double>;

}  // namespace ecglp

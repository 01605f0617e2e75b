// Explicit-loop loss oracles and a tiny model fixture, shared by the unit
// tests and the acceptance binary.
#pragma once

#include "ecglp/losses.hpp"
#include "test_util.hpp"

#include <cmath>
#include <vector>

namespace ecglp::testing {

// ---- explicit-loop oracles (plain doubles, no tensor ops) -------------------

using Mat = Matrix<double>;

inline double dot_row(const Mat& a, Index i, const Mat& b, Index j) {
  double s = 0;
  for (Index d = 0; d < a.cols(); ++d) s += a(i, d) * b(j, d);
  return s;
}

inline double cos_row(const Mat& a, Index i, const Mat& b, Index j) {
  return dot_row(a, i, b, j) / std::sqrt(dot_row(a, i, a, i) * dot_row(b, j, b, j));
}

inline Mat oracle_alpha(const Mat& beats, const Mat& sents, double tau1) {
  Mat alpha(sents.rows(), beats.rows());
  for (Index l = 0; l < sents.rows(); ++l) {
    double denom = 0;
    for (Index j = 0; j < beats.rows(); ++j) denom += std::exp(cos_row(sents, l, beats, j) / tau1);
    for (Index j = 0; j < beats.rows(); ++j) alpha(l, j) = std::exp(cos_row(sents, l, beats, j) / tau1) / denom;
  }
  return alpha;
}

inline Mat oracle_bhat(const Mat& beats, const Mat& sents, double tau1) {
  const Mat alpha = oracle_alpha(beats, sents, tau1);
  Mat out = Mat::Zero(sents.rows(), beats.cols());
  for (Index l = 0; l < sents.rows(); ++l) {
    for (Index j = 0; j < beats.rows(); ++j) {
      for (Index d = 0; d < beats.cols(); ++d) out(l, d) += alpha(l, j) * beats(j, d);
    }
  }
  return out;
}

inline double oracle_z(const Mat& bhat, const Mat& sents, double tau2) {
  double s = 0;
  for (Index l = 0; l < sents.rows(); ++l) s += std::exp(cos_row(bhat, l, sents, l) / tau2);
  return tau2 * std::log(s);
}

// Symmetric cross-entropy with the diagonal as positives over logits = scores / t.
inline double oracle_symmetric_ce(const Mat& scores, double t) {
  const Index b = scores.rows();
  double e2t = 0, t2e = 0;
  for (Index i = 0; i < b; ++i) {
    double row = 0, col = 0;
    for (Index k = 0; k < b; ++k) {
      row += std::exp(scores(i, k) / t);
      col += std::exp(scores(k, i) / t);
    }
    e2t += -std::log(std::exp(scores(i, i) / t) / row);
    t2e += -std::log(std::exp(scores(i, i) / t) / col);
  }
  return 0.5 * (e2t / b + t2e / b);
}

inline double oracle_local(const std::vector<Mat>& beats, const std::vector<Mat>& sents, double tau1, double tau2) {
  const Index b = static_cast<Index>(beats.size());
  Mat z(b, b);
  for (Index i = 0; i < b; ++i) {
    for (Index k = 0; k < b; ++k) z(i, k) = oracle_z(oracle_bhat(beats[i], sents[k], tau1), sents[k], tau2);
  }
  return oracle_symmetric_ce(z, tau2);
}

inline double oracle_nll(const Mat& logits, const std::vector<int>& targets) {
  double total = 0;
  int n = 0;
  for (Index r = 0; r < logits.rows(); ++r) {
    const int t = targets[static_cast<std::size_t>(r)];
    if (t < 0) continue;
    double z = 0;
    for (Index c = 0; c < logits.cols(); ++c) z += std::exp(logits(r, c));
    total += -std::log(std::exp(logits(r, t)) / z);
    ++n;
  }
  return total / n;
}

inline std::vector<Tensor<double>> as_tensors(const std::vector<Mat>& ms) {
  std::vector<Tensor<double>> out;
  for (const auto& m : ms) out.emplace_back(m);
  return out;
}

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.dim = 16;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.ecg_layers = 1;
  c.text_enc_layers = 1;
  c.text_dec_layers = 1;
  c.input_leads = 2;
  c.conv_strides = {4, 4};
  c.norm_groups = 4;
  c.caption_queries = 3;
  c.beat_tokens = 2;
  c.vocab_size = 12;
  c.max_text_len = 10;
  c.dropout = 0.0;
  return c;
}

inline std::vector<EcgTextPair> tiny_batch(Rng& rng, int n) {
  std::vector<EcgTextPair> pairs(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    auto& p = pairs[static_cast<std::size_t>(i)];
    p.ecg.id = "r" + std::to_string(i);
    p.ecg.signal = random_matrix<float>(rng, 2, 64, 0.5);
    TextReport rep;
    rep.token_ids = {kBos, 6 + i, 7, 8 + i % 3, 9, kEos};
    rep.sentence_spans = {{0, 2}, {2, 4}};
    p.report = rep;
  }
  return pairs;
}

}  // namespace ecglp::testing

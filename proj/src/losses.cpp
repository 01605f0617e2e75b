#include "ecglp/losses.hpp"

#include <algorithm>

namespace ecglp {

template <typename S>
Tensor<S> lm_loss(const Tensor<S>& logits, std::span<const int> targets, Reduction reduction) {
  std::vector<int> t(targets.begin(), targets.end());
  for (int& v : t) {
    if (v == kPad) v = -1;
  }
  return cross_entropy(logits, std::span<const int>(t), reduction);
}

namespace {

template <typename S>
Tensor<S> row_dots(const Tensor<S>& a, const Tensor<S>& b) {
  // n x D, n x D -> 1 x n
  return transpose(matmul(mul(a, b), Tensor<S>(Matrix<S>::Ones(a.cols(), 1))));
}

template <typename S>
BeatSentenceAttention<S> attend_normalized(const Tensor<S>& beats, const Tensor<S>& beats_unit,
                                           const Tensor<S>& sentences, const Tensor<S>& sentences_unit, double tau1,
                                           bool literal) {
  BeatSentenceAttention<S> out;
  out.alpha = softmax(scale(matmul_nt(sentences_unit, beats_unit), static_cast<S>(1.0 / tau1)), 1);
  if (literal) {
    const Tensor<S> ones(Matrix<S>::Ones(beats.rows(), sentences.cols()));
    out.b_hat = mul(matmul(out.alpha, ones), sentences);
  } else {
    out.b_hat = matmul(out.alpha, beats);
  }
  return out;
}

template <typename S>
Tensor<S> pair_similarity_unit(const Tensor<S>& b_hat, const Tensor<S>& sentences_unit, double tau2) {
  const auto cos = row_dots(normalize_rows(b_hat), sentences_unit);
  return scale(logsumexp(scale(cos, static_cast<S>(1.0 / tau2)), 1), static_cast<S>(tau2));
}

}  // namespace

template <typename S>
BeatSentenceAttention<S> beat_sentence_attention(const Tensor<S>& beats, const Tensor<S>& sentences, double tau1,
                                                 bool literal) {
  if (beats.rows() < 1 || sentences.rows() < 1) throw ShapeError("beat_sentence_attention: empty input");
  return attend_normalized(beats, normalize_rows(beats), sentences, normalize_rows(sentences), tau1, literal);
}

template <typename S>
Tensor<S> pair_similarity(const Tensor<S>& b_hat, const Tensor<S>& sentences, double tau2) {
  if (sentences.rows() < 1 || b_hat.rows() != sentences.rows()) throw ShapeError("pair_similarity: shape mismatch");
  return pair_similarity_unit(b_hat, normalize_rows(sentences), tau2);
}

template <typename S>
ContrastiveResult<S> symmetric_cross_entropy(const Tensor<S>& scores, const Tensor<S>& temperature) {
  const Index b = scores.rows();
  if (b < 2 || scores.cols() != b) throw ShapeError("contrastive loss needs a square batch of at least 2");
  std::vector<int> diag(static_cast<std::size_t>(b));
  for (Index i = 0; i < b; ++i) diag[static_cast<std::size_t>(i)] = static_cast<int>(i);
  const auto logits = div_scalar(scores, temperature);
  ContrastiveResult<S> r;
  r.similarity = scores;
  r.e2t = cross_entropy(logits, std::span<const int>(diag));
  r.t2e = cross_entropy(transpose(logits), std::span<const int>(diag));
  r.loss = scale(add(r.e2t, r.t2e), S(0.5));
  return r;
}

template <typename S>
ContrastiveResult<S> local_contrastive(const std::vector<Tensor<S>>& beats, const std::vector<Tensor<S>>& sentences,
                                       double tau1, double tau2, bool literal, std::vector<AlignmentTrace<S>>* traces) {
  const std::size_t b = beats.size();
  if (b < 2 || sentences.size() != b) throw ShapeError("local_contrastive needs matching batches of at least 2");
  std::vector<Tensor<S>> beats_unit, sent_unit;
  for (std::size_t i = 0; i < b; ++i) {
    beats_unit.push_back(normalize_rows(beats[i]));
    sent_unit.push_back(normalize_rows(sentences[i]));
  }
  std::vector<Tensor<S>> z;
  z.reserve(b * b);
  if (traces) traces->assign(b, {});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t k = 0; k < b; ++k) {
      auto att = attend_normalized(beats[i], beats_unit[i], sentences[k], sent_unit[k], tau1, literal);
      z.push_back(pair_similarity_unit(att.b_hat, sent_unit[k], tau2));
      if (traces && i == k) {
        (*traces)[i].alpha = att.alpha.value();
        (*traces)[i].b_hat = att.b_hat.value();
      }
    }
  }
  const auto scores = stack_scalars(z, static_cast<Index>(b), static_cast<Index>(b));
  if (traces) {
    for (auto& t : *traces) t.z_matrix = scores.value();
  }
  return symmetric_cross_entropy(scores, Tensor<S>::scalar(static_cast<S>(tau2)));
}

template <typename S>
ContrastiveResult<S> global_contrastive(const Tensor<S>& x_g, const Tensor<S>& t_g, const Tensor<S>& log_tau) {
  if (x_g.rows() != t_g.rows()) throw ShapeError("global_contrastive: batch size mismatch");
  return symmetric_cross_entropy(cosine_matrix(x_g, t_g), exp(log_tau));
}

template <typename S>
Tensor<S> total_loss(const Tensor<S>* l_g, const Tensor<S>* l_lm, const Tensor<S>* l_local, double lambda_lm,
                     double lambda_local) {
  Tensor<S> total;
  auto accumulate = [&](const Tensor<S>& term) { total = total.defined() ? add(total, term) : term; };
  if (l_g) accumulate(*l_g);
  if (l_lm) accumulate(scale(*l_lm, static_cast<S>(lambda_lm)));
  if (l_local) accumulate(scale(*l_local, static_cast<S>(lambda_local)));
  if (!total.defined()) throw std::invalid_argument("total_loss: no loss term enabled");
  return total;
}

template <typename S>
BatchLoss<S> batch_loss(const Model<S>& model, const std::vector<const EcgTextPair*>& batch, const LossSwitches& sw,
                        const ForwardMode& mode) {
  const auto& cfg = model.config();
  std::vector<Tensor<S>> x_rows, t_rows, beats, sents, logits;
  std::vector<int> targets;
  std::vector<Tensor<S>> per_report_lm;
  for (const auto* pair : batch) {
    if (!pair->report) throw DataError("record " + pair->ecg.id + " has no report");
    const auto& report = *pair->report;
    auto e = model.encode_ecg(pair->ecg, mode);
    if (sw.global || sw.local) {
      auto t = model.encode_text(report, mode);
      if (sw.global) {
        x_rows.push_back(e.X_g);
        t_rows.push_back(t.T_g);
      }
      if (sw.local) {
        if (!t.S_proj.defined()) throw DataError("report for " + pair->ecg.id + " has no sentences");
        beats.push_back(e.B_proj);
        sents.push_back(t.S_proj);
      }
    }
    if (sw.lm) {
      const std::span<const int> ids(report.token_ids);
      auto lg = model.caption_logits(e.E_tilde, ids.first(ids.size() - 1), mode);
      const auto tgt = ids.subspan(1);
      if (cfg.lm_sum_reduction) {
        per_report_lm.push_back(lm_loss(lg, tgt, Reduction::kSum));
      } else {
        logits.push_back(lg);
        targets.insert(targets.end(), tgt.begin(), tgt.end());
      }
    }
  }

  BatchLoss<S> out;
  Tensor<S> l_g, l_lm, l_local;
  if (sw.global) {
    auto g = global_contrastive(concat_rows(x_rows), concat_rows(t_rows), model.log_tau());
    l_g = g.loss;
    out.parts.l_g = g.loss.item();
    out.parts.l_g_e2t = g.e2t.item();
    out.parts.l_g_t2e = g.t2e.item();
  }
  if (sw.lm) {
    if (cfg.lm_sum_reduction) {
      l_lm = scale(sum(concat_rows(per_report_lm)), static_cast<S>(1.0 / static_cast<double>(batch.size())));
    } else {
      l_lm = lm_loss(concat_rows(logits), std::span<const int>(targets), Reduction::kMean);
    }
    out.parts.l_lm = l_lm.item();
  }
  if (sw.local) {
    auto loc = local_contrastive(beats, sents, cfg.tau_local, cfg.tau_pair, cfg.literal_beat_sum);
    l_local = loc.loss;
    out.parts.l_local = loc.loss.item();
    out.parts.l_local_e2t = loc.e2t.item();
    out.parts.l_local_t2e = loc.t2e.item();
  }
  out.total = total_loss(sw.global ? &l_g : nullptr, sw.lm ? &l_lm : nullptr, sw.local ? &l_local : nullptr,
                         cfg.lambda_lm, cfg.lambda_local);
  out.parts.total = out.total.item();
  out.parts.tau_learnable = model.tau();
  return out;
}

MaskedTokens mask_tokens(std::span<const int> ids, int vocab_size, Rng& rng, double rate) {
  MaskedTokens m{std::vector<int>(ids.begin(), ids.end()), std::vector<int>(ids.size(), -1)};
  std::vector<std::size_t> words;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= kNumSpecial) words.push_back(i);
  }
  if (words.empty()) throw DataError("mask_tokens: report has no word tokens");
  std::vector<std::size_t> chosen;
  for (auto i : words) {
    if (rng.uniform() < rate) chosen.push_back(i);
  }
  if (chosen.empty()) chosen.push_back(words[rng.below(words.size())]);
  for (auto i : chosen) {
    m.targets[i] = ids[i];
    const double u = rng.uniform();
    if (u < 0.8) {
      m.input[i] = kMask;
    } else if (u < 0.9) {
      m.input[i] = kNumSpecial + static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab_size - kNumSpecial)));
    }
  }
  return m;
}

template <typename S>
Tensor<S> mlm_loss(const Tensor<S>& logits, std::span<const int> targets) {
  if (std::none_of(targets.begin(), targets.end(), [](int t) { return t >= 0; })) {
    throw ShapeError("mlm_loss: no masked positions");
  }
  return cross_entropy(logits, targets, Reduction::kMean);
}

#define ECGLP_INSTANTIATE_LOSSES(S)                                                                              \
  template Tensor<S> lm_loss<S>(const Tensor<S>&, std::span<const int>, Reduction);                              \
  template BeatSentenceAttention<S> beat_sentence_attention<S>(const Tensor<S>&, const Tensor<S>&, double, bool); \
  template Tensor<S> pair_similarity<S>(const Tensor<S>&, const Tensor<S>&, double);                              \
  template ContrastiveResult<S> symmetric_cross_entropy<S>(const Tensor<S>&, const Tensor<S>&);                   \
  template ContrastiveResult<S> local_contrastive<S>(const std::vector<Tensor<S>>&, const std::vector<Tensor<S>>&, \
                                                     double, double, bool, std::vector<AlignmentTrace<S>>*);      \
  template ContrastiveResult<S> global_contrastive<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);      \
  template Tensor<S> total_loss<S>(const Tensor<S>*, const Tensor<S>*, const Tensor<S>*, double, double);         \
  template BatchLoss<S> batch_loss<S>(const Model<S>&, const std::vector<const EcgTextPair*>&, const LossSwitches&, \
                                      const ForwardMode&);                                                        \
  template Tensor<S> mlm_loss<S>(const Tensor<S>&, std::span<const int>);

ECGLP_INSTANTIATE_LOSSES(float)
ECGLP_INSTANTIATE_LOSSES(double)

}  // namespace ecglp

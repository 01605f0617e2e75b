#include "ecglp/eval.hpp"

#include "ecglp/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace ecglp {

using nlohmann::json;
namespace fs = std::filesystem;

double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw EvalError("auroc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  double n_pos = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;  // 1-based average over the tie block
    for (std::size_t k = i; k <= j; ++k) {
      if (labels[order[k]] != 0) {
        pos_rank_sum += avg_rank;
        n_pos += 1.0;
      }
    }
    i = j + 1;
  }
  const double n_neg = static_cast<double>(n) - n_pos;
  if (n_pos == 0.0 || n_neg == 0.0) throw EvalError("auroc undefined: labels contain a single class");
  return (pos_rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

MacroAuroc macro_auroc(const Matrix<double>& scores, const Matrix<int>& labels, const std::vector<std::string>& names) {
  if (scores.rows() != labels.rows() || scores.cols() != labels.cols() ||
      static_cast<std::size_t>(scores.cols()) != names.size()) {
    throw EvalError("macro_auroc: shape mismatch");
  }
  MacroAuroc out;
  double total = 0.0;
  for (Index c = 0; c < scores.cols(); ++c) {
    std::vector<double> col(static_cast<std::size_t>(scores.rows()));
    std::vector<int> lab(static_cast<std::size_t>(scores.rows()));
    int pos = 0;
    for (Index r = 0; r < scores.rows(); ++r) {
      col[static_cast<std::size_t>(r)] = scores(r, c);
      lab[static_cast<std::size_t>(r)] = labels(r, c);
      pos += labels(r, c) != 0;
    }
    if (pos == 0 || pos == scores.rows()) {
      out.skipped.push_back(names[static_cast<std::size_t>(c)]);
      continue;
    }
    const double a = auroc(col, lab);
    out.per_label.emplace_back(names[static_cast<std::size_t>(c)], a);
    total += a;
  }
  if (out.per_label.empty()) throw EvalError("macro AUROC undefined: no label has both classes");
  out.value = total / static_cast<double>(out.per_label.size());
  return out;
}

// ---------------------------------------------------------------------------

PromptTable PromptTable::standard() {
  PromptTable t;
  t.prompts_ = {
      {Code::kNorm, {"sinus rhythm normal ecg"}},
      {Code::kAfib, {"atrial fibrillation abnormal ecg"}},
      {Code::kLbbb, {"left bundle branch block abnormal ecg"}},
      {Code::kSte, {"st elevation abnormal ecg"}},
      {Code::kTachy, {"sinus tachycardia abnormal ecg"}},
      {Code::kBrady, {"sinus bradycardia abnormal ecg"}},
      {Code::kPvc, {"occasional premature ventricular contractions abnormal ecg"}},
      {Code::kLowVolt, {"low qrs voltages abnormal ecg"}},
  };
  return t;
}

PromptTable PromptTable::ensemble() {
  PromptTable t = standard();
  for (auto& [code, list] : t.prompts_) {
    const std::string suffix = code == Code::kNorm ? " normal ecg" : " abnormal ecg";
    for (const auto& sentence : abnormality(code).sentence_templates) {
      std::string text = normalize_text(sentence);
      list.push_back(text + suffix);
    }
  }
  return t;
}

const std::vector<std::string>& PromptTable::prompts(Code code) const {
  auto it = prompts_.find(code);
  if (it == prompts_.end() || it->second.empty()) {
    throw EvalError("no prompt for class " + std::string(code_name(code)));
  }
  return it->second;
}

const std::string& PromptTable::prompt(Code code) const { return prompts(code).front(); }

json PromptTable::to_json() const {
  json j = json::object();
  for (const auto& [code, list] : prompts_) j[std::string(code_name(code))] = list;
  return json{{"version", kPromptTableVersion}, {"prompts", j}};
}

std::vector<Code> codes_in(const ClassMix& mix) {
  std::set<Code> all;
  for (const auto& [labels, w] : mix.classes) all.insert(labels.begin(), labels.end());
  return {all.begin(), all.end()};
}

std::vector<std::string> code_names(const std::vector<Code>& codes) {
  std::vector<std::string> out;
  for (Code c : codes) out.emplace_back(code_name(c));
  return out;
}

Matrix<int> label_matrix(const std::vector<EcgTextPair>& pairs, const std::vector<Code>& classes) {
  Matrix<int> y(static_cast<Index>(pairs.size()), static_cast<Index>(classes.size()));
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    for (std::size_t c = 0; c < classes.size(); ++c) {
      y(static_cast<Index>(i), static_cast<Index>(c)) = pairs[i].ecg.labels.count(classes[c]) ? 1 : 0;
    }
  }
  return y;
}

// ---------------------------------------------------------------------------

template <typename S>
Matrix<double> ecg_global_embeddings(const Model<S>& model, const std::vector<EcgTextPair>& pairs) {
  NoGradGuard guard;
  Matrix<double> out(static_cast<Index>(pairs.size()), model.config().dim);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    out.row(static_cast<Index>(i)) = model.encode_ecg(pairs[i].ecg, ForwardMode::eval()).X_g.value().template cast<double>();
  }
  return out;
}

template <typename S>
Matrix<double> text_global_embeddings(const Model<S>& model, const std::vector<TextReport>& reports) {
  NoGradGuard guard;
  Matrix<double> out(static_cast<Index>(reports.size()), model.config().dim);
  for (std::size_t i = 0; i < reports.size(); ++i) {
    out.row(static_cast<Index>(i)) = model.encode_text(reports[i], ForwardMode::eval()).T_g.value().template cast<double>();
  }
  return out;
}

template <typename S>
Matrix<double> extract_features(const Model<S>& model, const std::vector<EcgTextPair>& pairs) {
  NoGradGuard guard;
  Matrix<double> out(static_cast<Index>(pairs.size()), model.config().dim);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto e = model.encode_ecg(pairs[i].ecg, ForwardMode::eval());
    out.row(static_cast<Index>(i)) = mean_rows(e.B).value().template cast<double>();
  }
  return out;
}

Matrix<double> normalized_rows(const Matrix<double>& m) {
  Matrix<double> out = m;
  for (Index r = 0; r < m.rows(); ++r) {
    const double n = m.row(r).norm();
    if (!(n >= kNormFloor)) throw NumericError("embedding row " + std::to_string(r) + " has near-zero norm");
    out.row(r) /= n;
  }
  return out;
}

Matrix<double> cosine_scores(const Matrix<double>& x, const Matrix<double>& t) {
  if (x.cols() != t.cols()) throw EvalError("cosine_scores: embedding widths differ");
  return normalized_rows(x) * normalized_rows(t).transpose();
}

template <typename S>
ZeroShotScores zero_shot_scores(const Model<S>& model, const std::vector<EcgTextPair>& pairs,
                                const std::vector<Code>& classes, const Vocabulary& vocab, const PromptTable& prompts) {
  Matrix<double> t(static_cast<Index>(classes.size()), model.config().dim);
  for (std::size_t c = 0; c < classes.size(); ++c) {
    std::vector<TextReport> encoded;
    for (const auto& text : prompts.prompts(classes[c])) encoded.push_back(tokenize(text, vocab));
    t.row(static_cast<Index>(c)) = normalized_rows(text_global_embeddings(model, encoded)).colwise().mean();
  }
  return {classes, cosine_scores(ecg_global_embeddings(model, pairs), t)};
}

template <typename S>
MacroAuroc zero_shot_auroc(const Model<S>& model, const std::vector<EcgTextPair>& pairs,
                           const std::vector<Code>& classes, const Vocabulary& vocab, const PromptTable& prompts) {
  const auto zs = zero_shot_scores(model, pairs, classes, vocab, prompts);
  return macro_auroc(zs.scores, label_matrix(pairs, classes), code_names(classes));
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> stratified_subsample(const std::vector<std::string>& keys, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0) || ratio > 1.0) throw EvalError("probe ratio must lie in (0, 1]");
  std::map<std::string, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < keys.size(); ++i) strata[keys[i]].push_back(i);
  Rng rng(Rng::derive(seed, "subsample"));
  std::vector<std::size_t> out;
  for (auto& [key, members] : strata) {
    for (std::size_t i = members.size(); i > 1; --i) std::swap(members[i - 1], members[rng.below(i)]);
    const auto take = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(ratio * members.size())));
    out.insert(out.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(std::min(take, members.size())));
  }
  std::sort(out.begin(), out.end());
  return out;
}

namespace {

Matrix<double> sigmoid(const Matrix<double>& z) {
  return z.unaryExpr([](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); });
}

// Macro AUROC over `active` columns that hold both classes; nullopt when none do.
std::optional<double> masked_macro(const Matrix<double>& scores, const Matrix<int>& labels,
                                   const std::vector<bool>& active) {
  double total = 0;
  int used = 0;
  for (Index c = 0; c < scores.cols(); ++c) {
    if (!active[static_cast<std::size_t>(c)]) continue;
    const int pos = labels.col(c).sum();
    if (pos == 0 || pos == labels.rows()) continue;
    std::vector<double> s(scores.col(c).begin(), scores.col(c).end());
    std::vector<int> l(labels.col(c).begin(), labels.col(c).end());
    total += auroc(s, l);
    ++used;
  }
  if (used == 0) return std::nullopt;
  return total / used;
}

}  // namespace

ProbeResult linear_probe(const Matrix<double>& train_x, const Matrix<int>& train_y, const Matrix<double>& val_x,
                         const Matrix<int>& val_y, const Matrix<double>& test_x, const Matrix<int>& test_y,
                         const std::vector<std::string>& class_names, std::uint64_t seed, const ProbeOptions& opts) {
  const Index n = train_x.rows(), d = train_x.cols(), c = train_y.cols();
  if (n < 1 || train_y.rows() != n || static_cast<std::size_t>(c) != class_names.size()) {
    throw EvalError("linear_probe: inconsistent training data");
  }
  ProbeResult result;
  result.n_train = static_cast<int>(n);
  std::vector<bool> active(static_cast<std::size_t>(c), true);
  for (Index k = 0; k < c; ++k) {
    if (train_y.col(k).sum() == 0) {
      active[static_cast<std::size_t>(k)] = false;
      result.skipped.push_back(class_names[static_cast<std::size_t>(k)]);
    }
  }

  const Eigen::RowVectorXd mu = train_x.colwise().mean();
  Eigen::RowVectorXd sd = ((train_x.rowwise() - mu).array().square().colwise().sum() / static_cast<double>(n)).sqrt();
  for (Index j = 0; j < d; ++j) {
    if (sd(j) < 1e-8) sd(j) = 1.0;
  }
  auto standardize = [&](const Matrix<double>& x) -> Matrix<double> {
    return (x.rowwise() - mu).array().rowwise() / sd.array();
  };
  const Matrix<double> xs = standardize(train_x), vs = standardize(val_x), ts = standardize(test_x);
  const Matrix<double> y = train_y.cast<double>();
  Matrix<double> mask(1, c);
  int n_active = 0;
  for (Index k = 0; k < c; ++k) {
    mask(0, k) = active[static_cast<std::size_t>(k)] ? 1.0 : 0.0;
    n_active += active[static_cast<std::size_t>(k)];
  }
  if (n_active == 0) throw EvalError("linear_probe: no class has a positive training sample");

  Matrix<double> w = Matrix<double>::Zero(d, c), b = Matrix<double>::Zero(1, c);
  Matrix<double> mw = w, vw = w, mb = b, vb = b;
  Matrix<double> best_w = w, best_b = b;
  double best_val = -1.0;
  int since_best = 0;
  long step = 0;
  const Index batch = std::min<Index>(opts.max_batch, n);
  Rng rng(Rng::derive(seed, "probe"));
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (Index start = 0; start < n; start += batch) {
      const Index m = std::min(batch, n - start);
      Matrix<double> xb(m, d), yb(m, c);
      for (Index r = 0; r < m; ++r) {
        xb.row(r) = xs.row(order[static_cast<std::size_t>(start + r)]);
        yb.row(r) = y.row(order[static_cast<std::size_t>(start + r)]);
      }
      const Matrix<double> p = sigmoid((xb * w).rowwise() + b.row(0));
      Matrix<double> g = (p - yb).array().rowwise() * mask.row(0).array();
      g /= static_cast<double>(m * n_active);
      const Matrix<double> gw = xb.transpose() * g;
      const Matrix<double> gb = g.colwise().sum();
      ++step;
      adamw_update(w, gw, mw, vw, step, opts.lr, opts.weight_decay);
      adamw_update(b, gb, mb, vb, step, opts.lr, 0.0);
    }
    result.epochs_run = epoch + 1;
    const auto val = masked_macro((vs * w).rowwise() + b.row(0), val_y, active);
    if (!val) {
      best_w = w;
      best_b = b;
      continue;
    }
    if (*val > best_val) {
      best_val = *val;
      best_w = w;
      best_b = b;
      since_best = 0;
    } else if (++since_best >= opts.patience) {
      break;
    }
  }
  result.test_scores = (ts * best_w).rowwise() + best_b.row(0);
  const auto test = masked_macro(result.test_scores, test_y, active);
  if (!test) throw EvalError("linear_probe: no evaluable class in the test split");
  result.test_auroc = *test;
  return result;
}

// ---------------------------------------------------------------------------

LabelMapping LabelMapping::identity(const std::vector<std::string>& classes) {
  LabelMapping m;
  for (const auto& c : classes) m.map[c] = {c};
  return m;
}

LabelMapping LabelMapping::from_json(const json& j) {
  LabelMapping m;
  try {
    for (const auto& [src, targets] : j.at("map").items()) {
      auto& set = m.map[src];
      if (targets.is_string()) {
        set.insert(targets.get<std::string>());
      } else {
        for (const auto& t : targets) set.insert(t.get<std::string>());
      }
    }
    if (j.contains("relabel")) {
      for (const auto& [src, dst] : j.at("relabel").items()) m.relabel[src] = dst.get<std::string>();
    }
  } catch (const json::exception& e) {
    throw EvalError(std::string("bad label mapping: ") + e.what());
  }
  return m;
}

LabelMapping LabelMapping::load(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw EvalError("cannot read mapping file " + path.string());
  try {
    return from_json(json::parse(is));
  } catch (const json::parse_error& e) {
    throw EvalError("malformed mapping file " + path.string() + ": " + e.what());
  }
}

std::set<std::string> target_labels(const LabelSet& codes, const LabelMapping& mapping) {
  std::set<std::string> out;
  for (Code c : codes) {
    const std::string name(code_name(c));
    auto it = mapping.relabel.find(name);
    out.insert(it == mapping.relabel.end() ? name : it->second);
  }
  return out;
}

MacroAuroc transfer_eval(const Matrix<double>& scores, const std::vector<std::string>& source_classes,
                         const std::vector<std::set<std::string>>& targets, const LabelMapping& mapping) {
  if (static_cast<std::size_t>(scores.cols()) != source_classes.size() ||
      static_cast<std::size_t>(scores.rows()) != targets.size()) {
    throw EvalError("transfer_eval: shape mismatch");
  }
  std::vector<Index> cols;
  std::vector<std::string> names;
  for (std::size_t c = 0; c < source_classes.size(); ++c) {
    auto it = mapping.map.find(source_classes[c]);
    if (it == mapping.map.end() || it->second.empty()) continue;
    cols.push_back(static_cast<Index>(c));
    names.push_back(source_classes[c]);
  }
  if (cols.empty()) throw EvalError("transfer_eval: mapping leaves no evaluable class");
  Matrix<double> s(scores.rows(), static_cast<Index>(cols.size()));
  Matrix<int> y(scores.rows(), static_cast<Index>(cols.size()));
  for (std::size_t k = 0; k < cols.size(); ++k) {
    const auto& mapped = mapping.map.at(names[k]);
    s.col(static_cast<Index>(k)) = scores.col(cols[k]);
    for (Index r = 0; r < scores.rows(); ++r) {
      const auto& t = targets[static_cast<std::size_t>(r)];
      y(r, static_cast<Index>(k)) =
          std::any_of(t.begin(), t.end(), [&](const std::string& label) { return mapped.count(label) > 0; }) ? 1 : 0;
    }
  }
  return macro_auroc(s, y, names);
}

// ---------------------------------------------------------------------------

std::vector<double> recall_at_k(const Matrix<double>& queries, const Matrix<double>& gallery, std::span<const int> ks,
                                const std::vector<int>* groups) {
  const Index n = queries.rows();
  if (n < 2 || gallery.rows() != n) throw EvalError("recall_at_k needs at least 2 query/gallery pairs");
  if (groups && static_cast<Index>(groups->size()) != n) throw EvalError("recall_at_k: group vector size mismatch");
  const Matrix<double> sims = normalized_rows(queries) * normalized_rows(gallery).transpose();
  std::vector<double> hits(ks.size(), 0.0);
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return sims(i, a) > sims(i, b); });
    Index rank = 0;
    while (groups ? (*groups)[static_cast<std::size_t>(order[static_cast<std::size_t>(rank)])] !=
                        (*groups)[static_cast<std::size_t>(i)]
                  : order[static_cast<std::size_t>(rank)] != i) {
      ++rank;
    }
    for (std::size_t k = 0; k < ks.size(); ++k) {
      if (rank < ks[k]) hits[k] += 1.0;
    }
  }
  for (auto& h : hits) h /= static_cast<double>(n);
  return hits;
}

std::vector<EcgTextPair> revisit_records(const Corpus& corpus, const std::vector<EcgTextPair>& pairs) {
  std::vector<EcgTextPair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    const auto patient = draw_patient(p.ecg.labels, Rng::derive(corpus.seed, "patient/" + p.ecg.id));
    EcgTextPair q;
    q.ecg = render_ecg(patient, Rng::derive(corpus.seed, "revisit/" + p.ecg.id), corpus.options.synth);
    q.ecg.id = p.ecg.id + "b";
    q.ecg.patient_id = p.ecg.patient_id;
    q.report = p.report;
    out.push_back(std::move(q));
  }
  return out;
}

std::vector<int> report_groups(const std::vector<EcgTextPair>& pairs) {
  std::map<std::vector<int>, int> ids;
  std::vector<int> out;
  for (const auto& p : pairs) {
    const std::vector<int> key = p.report ? p.report->token_ids : std::vector<int>{};
    auto [it, fresh] = ids.emplace(key, static_cast<int>(ids.size()));
    out.push_back(it->second);
  }
  return out;
}

// ---------------------------------------------------------------------------

template <typename S>
std::vector<int> generate_report(const Model<S>& model, const ECGRecord& record, int max_len) {
  if (max_len < 1 || max_len > model.config().max_text_len) {
    throw EvalError("generate_report: max_len must lie in [1, max_text_len]");
  }
  NoGradGuard guard;
  const auto mode = ForwardMode::eval();
  const auto ctx = model.encode_ecg(record, mode).E_tilde;
  std::vector<int> ids{kBos};
  while (static_cast<int>(ids.size()) < max_len) {
    const auto logits = model.caption_logits(ctx, ids, mode).value();
    Index best = 0;
    logits.row(logits.rows() - 1).maxCoeff(&best);
    ids.push_back(static_cast<int>(best));
    if (best == kEos) break;
  }
  return ids;
}

std::vector<std::string> decoded_words(std::span<const int> ids, const Vocabulary& vocab) {
  std::vector<std::string> out;
  for (int id : ids) {
    if (id == kBos || id == kPad) continue;
    if (id == kEos) break;
    out.push_back(vocab.word(id));
  }
  return out;
}

namespace {

std::map<std::vector<std::string>, int> ngram_counts(const std::vector<std::string>& words, int n) {
  std::map<std::vector<std::string>, int> counts;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= words.size(); ++i) {
    ++counts[std::vector<std::string>(words.begin() + static_cast<std::ptrdiff_t>(i),
                                      words.begin() + static_cast<std::ptrdiff_t>(i) + n)];
  }
  return counts;
}

}  // namespace

double bleu(const std::vector<std::string>& candidate, const std::vector<std::vector<std::string>>& references, int n) {
  if (n < 1) throw EvalError("bleu: n must be >= 1");
  if (references.empty()) throw EvalError("bleu: no references");
  if (candidate.empty()) return 0.0;
  double log_sum = 0.0;
  for (int order = 1; order <= n; ++order) {
    const auto cand = ngram_counts(candidate, order);
    std::map<std::vector<std::string>, int> max_ref;
    for (const auto& ref : references) {
      for (const auto& [gram, count] : ngram_counts(ref, order)) max_ref[gram] = std::max(max_ref[gram], count);
    }
    double matched = 0, total = 0;
    for (const auto& [gram, count] : cand) {
      total += count;
      auto it = max_ref.find(gram);
      if (it != max_ref.end()) matched += std::min(count, it->second);
    }
    const double p = matched > 0 ? matched / total : kBleuEpsilon / std::max(total, 1.0);
    log_sum += std::log(p);
  }
  const double c = static_cast<double>(candidate.size());
  double r = static_cast<double>(references.front().size());
  for (const auto& ref : references) {
    const double len = static_cast<double>(ref.size());
    if (std::abs(len - c) < std::abs(r - c) || (std::abs(len - c) == std::abs(r - c) && len < r)) r = len;
  }
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / n);
}

double rouge_l(const std::vector<std::string>& candidate, const std::vector<std::string>& reference) {
  if (candidate.empty() || reference.empty()) return 0.0;
  const std::size_t m = candidate.size(), k = reference.size();
  std::vector<std::vector<int>> dp(m + 1, std::vector<int>(k + 1, 0));
  for (std::size_t i = 1; i <= m; ++i) {
    for (std::size_t j = 1; j <= k; ++j) {
      dp[i][j] = candidate[i - 1] == reference[j - 1] ? dp[i - 1][j - 1] + 1 : std::max(dp[i - 1][j], dp[i][j - 1]);
    }
  }
  const double lcs = dp[m][k];
  if (lcs == 0) return 0.0;
  const double p = lcs / static_cast<double>(m), r = lcs / static_cast<double>(k);
  const double b2 = kRougeBeta * kRougeBeta;
  return (1 + b2) * p * r / (r + b2 * p);
}

// ---------------------------------------------------------------------------

namespace {

std::string format_value(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

bool needs_header(const fs::path& path) { return !fs::exists(path) || fs::file_size(path) == 0; }

}  // namespace

void append_results_csv(const fs::path& path, const std::vector<EvalResult>& rows) {
  const bool header = needs_header(path);
  std::ofstream os(path, std::ios::app);
  if (!os) throw EvalError("cannot write " + path.string());
  if (header) os << "task,metric,value,n,seed,config_hash\n";
  for (const auto& r : rows) {
    os << r.task << ',' << r.metric << ',' << format_value(r.value) << ',' << r.n_samples << ',' << r.seed << ','
       << r.config_hash << '\n';
  }
}

void append_results_jsonl(const fs::path& path, const std::vector<EvalResult>& rows) {
  std::ofstream os(path, std::ios::app);
  if (!os) throw EvalError("cannot write " + path.string());
  for (const auto& r : rows) {
    os << json{{"task", r.task}, {"metric", r.metric}, {"value", r.value}, {"n", r.n_samples}, {"seed", r.seed},
               {"config_hash", r.config_hash}}
              .dump()
       << '\n';
  }
}

void write_embeddings_csv(const fs::path& path, const std::vector<EcgTextPair>& pairs,
                          const Matrix<double>& embeddings) {
  if (static_cast<std::size_t>(embeddings.rows()) != pairs.size()) throw EvalError("embedding/record count mismatch");
  std::ofstream os(path);
  if (!os) throw EvalError("cannot write " + path.string());
  os << "id,labels";
  for (Index j = 0; j < embeddings.cols(); ++j) os << ",e" << j;
  os << '\n';
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    os << pairs[i].ecg.id << ',' << label_set_name(pairs[i].ecg.labels);
    for (Index j = 0; j < embeddings.cols(); ++j) os << ',' << format_value(embeddings(static_cast<Index>(i), j));
    os << '\n';
  }
}

#define ECGLP_INSTANTIATE_EVAL(S)                                                                                 \
  template Matrix<double> ecg_global_embeddings<S>(const Model<S>&, const std::vector<EcgTextPair>&);             \
  template Matrix<double> text_global_embeddings<S>(const Model<S>&, const std::vector<TextReport>&);             \
  template Matrix<double> extract_features<S>(const Model<S>&, const std::vector<EcgTextPair>&);                  \
  template ZeroShotScores zero_shot_scores<S>(const Model<S>&, const std::vector<EcgTextPair>&,                   \
                                              const std::vector<Code>&, const Vocabulary&, const PromptTable&);   \
  template MacroAuroc zero_shot_auroc<S>(const Model<S>&, const std::vector<EcgTextPair>&, const std::vector<Code>&, \
                                         const Vocabulary&, const PromptTable&);                                   \
  template std::vector<int> generate_report<S>(const Model<S>&, const ECGRecord&, int);

ECGLP_INSTANTIATE_EVAL(float)
ECGLP_INSTANTIATE_EVAL(double)

}  // namespace ecglp

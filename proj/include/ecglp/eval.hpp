// Downstream evaluation: AUROC, zero-shot classification, linear probing,
// label-mapped transfer, patient retrieval and report generation metrics.
#pragma once

#include "ecglp/model.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <optional>

namespace ecglp {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// AUROC.

/// Mann-Whitney AUROC; tied scores count one half. Throws EvalError unless
/// labels contain both classes.
double auroc(std::span<const double> scores, std::span<const int> labels);

struct MacroAuroc {
  double value = 0.0;
  std::vector<std::pair<std::string, double>> per_label;
  std::vector<std::string> skipped;  // single-class labels
};

/// Macro average over columns of `scores` (n x C) against 0/1 `labels` (n x C).
/// Columns whose labels are all one class are skipped and listed.
MacroAuroc macro_auroc(const Matrix<double>& scores, const Matrix<int>& labels, const std::vector<std::string>& names);

// ---------------------------------------------------------------------------
// Prompts and label matrices.

class PromptTable {
 public:
  /// One fixed prompt per code.
  static PromptTable standard();
  /// The standard prompt plus one paraphrase per report template of the code.
  /// Zero-shot scores then average the normalized prompt embeddings.
  static PromptTable ensemble();

  /// First (canonical) prompt of a code.
  const std::string& prompt(Code code) const;
  const std::vector<std::string>& prompts(Code code) const;
  const std::map<Code, std::vector<std::string>>& entries() const { return prompts_; }
  nlohmann::json to_json() const;

 private:
  std::map<Code, std::vector<std::string>> prompts_;
};

inline constexpr int kPromptTableVersion = 1;

/// Codes that occur in any label set of `mix`, in enum order.
std::vector<Code> codes_in(const ClassMix& mix);
std::vector<std::string> code_names(const std::vector<Code>& codes);
Matrix<int> label_matrix(const std::vector<EcgTextPair>& pairs, const std::vector<Code>& classes);

// ---------------------------------------------------------------------------
// Embeddings (eval mode, no graph).

template <typename S>
Matrix<double> ecg_global_embeddings(const Model<S>& model, const std::vector<EcgTextPair>& pairs);
template <typename S>
Matrix<double> text_global_embeddings(const Model<S>& model, const std::vector<TextReport>& reports);
/// Mean over the N_B rows of the pre-projection beat embeddings B.
template <typename S>
Matrix<double> extract_features(const Model<S>& model, const std::vector<EcgTextPair>& pairs);

/// Rows of (n x D) embeddings scaled to unit length; zero rows are an error.
Matrix<double> normalized_rows(const Matrix<double>& m);

// ---------------------------------------------------------------------------
// Zero-shot.

/// Cosine between every row of `x` (n x D) and every row of `t` (C x D).
Matrix<double> cosine_scores(const Matrix<double>& x, const Matrix<double>& t);

struct ZeroShotScores {
  std::vector<Code> classes;
  Matrix<double> scores;  // n x C raw cosine
};

template <typename S>
ZeroShotScores zero_shot_scores(const Model<S>& model, const std::vector<EcgTextPair>& pairs,
                                const std::vector<Code>& classes, const Vocabulary& vocab,
                                const PromptTable& prompts = PromptTable::standard());

template <typename S>
MacroAuroc zero_shot_auroc(const Model<S>& model, const std::vector<EcgTextPair>& pairs,
                           const std::vector<Code>& classes, const Vocabulary& vocab,
                           const PromptTable& prompts = PromptTable::standard());

// ---------------------------------------------------------------------------
// Linear probe.

struct ProbeOptions {
  int epochs = 50;
  int max_batch = 128;
  int patience = 5;
  double lr = 1e-3;
  double weight_decay = 0.0;
};

struct ProbeResult {
  double test_auroc = 0.0;
  int n_train = 0;
  int epochs_run = 0;
  std::vector<std::string> skipped;
  Matrix<double> test_scores;  // n_test x C logits
};

/// Per-label-set stratified subsample of `keys` at `ratio`; every stratum keeps at least one.
std::vector<std::size_t> stratified_subsample(const std::vector<std::string>& keys, double ratio, std::uint64_t seed);

/// One linear layer with per-class sigmoid outputs, trained on standardized
/// features with binary cross-entropy and AdamW; early stopping on
/// validation macro AUROC.
ProbeResult linear_probe(const Matrix<double>& train_x, const Matrix<int>& train_y, const Matrix<double>& val_x,
                         const Matrix<int>& val_y, const Matrix<double>& test_x, const Matrix<int>& test_y,
                         const std::vector<std::string>& class_names, std::uint64_t seed,
                         const ProbeOptions& opts = {});

// ---------------------------------------------------------------------------
// Transfer.

/// Source class -> target classes. An empty set excludes the source class.
/// `relabel` optionally renames source codes to target label names when a
/// target dataset is synthesized from codes.
struct LabelMapping {
  std::map<std::string, std::set<std::string>> map;
  std::map<std::string, std::string> relabel;

  static LabelMapping identity(const std::vector<std::string>& classes);
  static LabelMapping from_json(const nlohmann::json& j);
  static LabelMapping load(const std::filesystem::path& path);
};

/// Target label names of a record after the mapping's relabel step.
std::set<std::string> target_labels(const LabelSet& codes, const LabelMapping& mapping);

/// Scores for source classes (n x C) evaluated against target labels:
/// a record is positive for source class s when any of its target labels is
/// in map[s]. Unmapped and empty-mapped classes are excluded.
MacroAuroc transfer_eval(const Matrix<double>& scores, const std::vector<std::string>& source_classes,
                         const std::vector<std::set<std::string>>& targets, const LabelMapping& mapping);

// ---------------------------------------------------------------------------
// Retrieval.

/// For query i the true match is gallery row i. Gallery rows are ranked by
/// cosine, ties broken by index. With `groups`, any gallery row whose group
/// equals the query's group counts as a hit. Returns one recall per k.
std::vector<double> recall_at_k(const Matrix<double>& queries, const Matrix<double>& gallery, std::span<const int> ks,
                                const std::vector<int>* groups = nullptr);

/// Re-renders each record's patient with a fresh noise draw.
std::vector<EcgTextPair> revisit_records(const Corpus& corpus, const std::vector<EcgTextPair>& pairs);

/// Equal ids for identical report texts, in order of first appearance.
std::vector<int> report_groups(const std::vector<EcgTextPair>& pairs);

// ---------------------------------------------------------------------------
// Report generation.

/// Greedy decoding from BOS; stops after EOS or `max_len` tokens (BOS included).
template <typename S>
std::vector<int> generate_report(const Model<S>& model, const ECGRecord& record, int max_len);

/// Words of a generated id sequence, dropping BOS/EOS/PAD.
std::vector<std::string> decoded_words(std::span<const int> ids, const Vocabulary& vocab);

/// BLEU-n with brevity penalty against the closest-length reference and
/// add-epsilon (1e-9) smoothing of zero precisions. Empty candidate -> 0.
double bleu(const std::vector<std::string>& candidate, const std::vector<std::vector<std::string>>& references, int n);
inline constexpr double kBleuEpsilon = 1e-9;
/// LCS-based F-measure with beta = 1.2.
double rouge_l(const std::vector<std::string>& candidate, const std::vector<std::string>& reference);
inline constexpr double kRougeBeta = 1.2;

// ---------------------------------------------------------------------------
// Result rows.

struct EvalResult {
  std::string task;
  std::string metric;
  double value = 0.0;
  int n_samples = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
};

/// Appends rows; writes the header when the file is new or empty.
void append_results_csv(const std::filesystem::path& path, const std::vector<EvalResult>& rows);
void append_results_jsonl(const std::filesystem::path& path, const std::vector<EvalResult>& rows);
/// id, labels, then one column per embedding dimension.
void write_embeddings_csv(const std::filesystem::path& path, const std::vector<EcgTextPair>& pairs,
                          const Matrix<double>& embeddings);

}  // namespace ecglp

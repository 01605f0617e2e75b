// Synthetic ECG recordings, template reports, tokenization and corpus assembly.
#pragma once

#include "ecglp/rng.hpp"
#include "ecglp/tensor.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace ecglp {

/// Invalid generator input (conflicting codes, bad class mix, ...).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Code : std::uint8_t { kNorm, kAfib, kLbbb, kSte, kTachy, kBrady, kPvc, kLowVolt };
inline constexpr std::array<Code, 8> kAllCodes{Code::kNorm,  Code::kAfib,  Code::kLbbb, Code::kSte,
                                               Code::kTachy, Code::kBrady, Code::kPvc,  Code::kLowVolt};

std::string_view code_name(Code code);
Code parse_code(std::string_view name);

using LabelSet = std::set<Code>;
std::string label_set_name(const LabelSet& labels);  // "AFIB+STE"
LabelSet parse_label_set(std::string_view name);

/// Parametric waveform deltas. Each range is interpolated by a per-patient
/// severity draw u in [0, 1); u < 0.5 selects the first report template.
struct WaveformEffect {
  double p_amplitude = 1.0;                // multiplier on the P bump (0 removes it)
  std::pair<double, double> qrs_width{1.0, 1.0};
  std::pair<double, double> st_offset_mv{0.0, 0.0};
  double rr_jitter = 0.0;                  // +/- fraction of RR
  std::optional<std::pair<double, double>> rate_bpm;
  std::pair<double, double> amplitude{1.0, 1.0};
  std::pair<int, int> ectopic_beats{0, 0};
};

struct AbnormalitySpec {
  Code code;
  WaveformEffect effect;
  /// Template sentences, mildest presentation first.
  std::vector<std::string> sentence_templates;
};

const AbnormalitySpec& abnormality(Code code);

/// Throws DataError for combinations the generator cannot honor
/// (NORM with anything else, more than one rate-setting rhythm code).
void validate_labels(const LabelSet& labels);

struct SynthOptions {
  int leads = 4;
  int sampling_rate_hz = 100;
  int duration_s = 10;
  double noise_mv = 0.02;
};

/// Per-patient draws that fix the waveform shape. The measurement noise is
/// seeded separately so a patient can be re-recorded.
struct PatientParams {
  LabelSet labels;
  double rate_bpm = 75;
  double first_beat_fraction = 0.5;
  double qrs_width = 1.0;
  double st_offset_mv = 0.0;
  double amplitude = 1.0;
  int ectopic_beats = 0;
  std::uint64_t rhythm_seed = 0;  // RR jitter and ectopic placement
  /// Template index chosen per code (by severity of the draw).
  std::vector<std::pair<Code, int>> templates;
};

PatientParams draw_patient(const LabelSet& labels, std::uint64_t seed);

struct ECGRecord {
  std::string id;
  std::string patient_id;
  Matrix<float> signal;  // leads x samples, millivolts
  int sampling_rate_hz = 0;
  int duration_s = 0;
  LabelSet labels;

  Index leads() const { return signal.rows(); }
  Index samples() const { return signal.cols(); }
};

ECGRecord render_ecg(const PatientParams& patient, std::uint64_t noise_seed, const SynthOptions& opts = {});
/// Regular R-peak times in seconds before ectopic beats are moved earlier.
std::vector<double> beat_times(const PatientParams& patient, const SynthOptions& opts = {});
ECGRecord synth_ecg(const LabelSet& labels, std::uint64_t seed, const SynthOptions& opts = {});

// ---------------------------------------------------------------------------
// Text.

enum SpecialToken : int { kPad = 0, kUnk = 1, kBos = 2, kEos = 3, kCls = 4, kMask = 5, kNumSpecial = 6 };

class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> words);  // words only; specials are prepended

  /// Specials plus every word of every template and prompt, sorted.
  static Vocabulary build_default();

  int id(std::string_view word) const;  // kUnk when absent
  const std::string& word(int id) const;
  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

struct Span {
  int begin = 0;  // word index (BOS excluded)
  int end = 0;
  bool operator==(const Span&) const = default;
};

struct TextReport {
  std::vector<int> token_ids;  // BOS w_1 ... w_N EOS
  std::vector<Span> sentence_spans;
  std::string raw_text;

  int word_count() const { return token_ids.size() >= 2 ? static_cast<int>(token_ids.size()) - 2 : 0; }
  std::span<const int> words() const { return std::span<const int>(token_ids).subspan(token_ids.empty() ? 0 : 1, word_count()); }
};

/// Lowercase, drop punctuation and special characters, collapse whitespace.
std::string normalize_text(std::string_view text);
TextReport tokenize(std::string_view raw_text, const Vocabulary& vocab);
std::string detokenize(const TextReport& report, const Vocabulary& vocab);
std::string detokenize(std::span<const int> ids, const Vocabulary& vocab);

TextReport synth_report(const PatientParams& patient, const Vocabulary& vocab);
TextReport synth_report(const LabelSet& labels, std::uint64_t seed, const Vocabulary& vocab);

// ---------------------------------------------------------------------------
// Corpus.

struct EcgTextPair {
  ECGRecord ecg;
  std::optional<TextReport> report;
};

struct ClassMix {
  std::vector<std::pair<LabelSet, double>> classes;

  /// Uniform over NORM, AFIB, LBBB, STE.
  static ClassMix default_mix();
  /// "NORM,AFIB" (uniform) or "NORM:0.5,AFIB+STE:0.5".
  static ClassMix parse(std::string_view text);
  std::string to_string() const;
  void validate() const;
};

/// Largest-remainder apportionment of n items over weights (ties: lower index first).
std::vector<int> apportion(int n, std::span<const double> weights);

struct CorpusOptions {
  SynthOptions synth;
  // Corruption switches, only for exercising filter_pairs.
  double nan_fraction = 0.0;
  double short_report_fraction = 0.0;
  double missing_report_fraction = 0.0;
};

struct Corpus {
  std::vector<EcgTextPair> train, val, test;
  Vocabulary vocab;
  ClassMix mix;
  std::uint64_t seed = 0;
  CorpusOptions options;

  std::size_t size() const { return train.size() + val.size() + test.size(); }
};

Corpus make_corpus(int n, const ClassMix& mix, std::uint64_t seed, const CorpusOptions& opts = {});

/// Drops pairs with empty or non-finite signals, missing reports, or fewer than four words.
std::vector<EcgTextPair> filter_pairs(std::vector<EcgTextPair> pairs);
inline constexpr int kMinReportWords = 4;

}  // namespace ecglp

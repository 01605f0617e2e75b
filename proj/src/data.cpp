#include "ecglp/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace ecglp {

namespace {

constexpr std::array<std::string_view, 8> kCodeNames{"NORM", "AFIB", "LBBB", "STE", "TACHY", "BRADY", "PVC", "LOWVOLT"};

double lerp(std::pair<double, double> range, double u) { return range.first + (range.second - range.first) * u; }

bool sets_rate(Code c) { return c == Code::kNorm || c == Code::kAfib || c == Code::kTachy || c == Code::kBrady; }

std::vector<AbnormalitySpec> build_table() {
  std::vector<AbnormalitySpec> table;
  auto add = [&](Code code, WaveformEffect effect, std::vector<std::string> templates) {
    table.push_back({code, effect, std::move(templates)});
  };
  WaveformEffect norm;
  norm.rate_bpm = {{60.0, 90.0}};
  add(Code::kNorm, norm, {"sinus rhythm", "normal sinus rhythm"});

  WaveformEffect afib;
  afib.p_amplitude = 0.0;
  afib.rr_jitter = 0.2;
  afib.rate_bpm = {{70.0, 130.0}};
  add(Code::kAfib, afib, {"atrial fibrillation", "atrial fibrillation with rapid ventricular response"});

  WaveformEffect lbbb;
  lbbb.qrs_width = {2.0, 3.0};
  add(Code::kLbbb, lbbb, {"incomplete left bundle branch block", "left bundle branch block"});

  WaveformEffect ste;
  ste.st_offset_mv = {0.15, 0.45};
  add(Code::kSte, ste, {"st elevation", "marked st elevation"});

  WaveformEffect tachy;
  tachy.rate_bpm = {{105.0, 150.0}};
  add(Code::kTachy, tachy, {"sinus tachycardia", "marked sinus tachycardia"});

  WaveformEffect brady;
  brady.rate_bpm = {{55.0, 38.0}};
  add(Code::kBrady, brady, {"sinus bradycardia", "marked sinus bradycardia"});

  WaveformEffect pvc;
  pvc.ectopic_beats = {1, 3};
  add(Code::kPvc, pvc, {"occasional premature ventricular contractions", "frequent premature ventricular contractions"});

  WaveformEffect lowvolt;
  lowvolt.amplitude = {0.4, 0.25};
  add(Code::kLowVolt, lowvolt, {"low qrs voltages", "markedly low qrs voltages"});
  return table;
}

const std::vector<AbnormalitySpec>& table() {
  static const std::vector<AbnormalitySpec> t = build_table();
  return t;
}

double gaussian(double t, double center, double sigma) {
  const double z = (t - center) / sigma;
  return std::exp(-0.5 * z * z);
}

}  // namespace

std::string_view code_name(Code code) { return kCodeNames[static_cast<std::size_t>(code)]; }

Code parse_code(std::string_view name) {
  for (std::size_t i = 0; i < kCodeNames.size(); ++i) {
    if (kCodeNames[i] == name) return static_cast<Code>(i);
  }
  throw DataError("unknown abnormality code '" + std::string(name) + "'");
}

std::string label_set_name(const LabelSet& labels) {
  std::string out;
  for (Code c : labels) {
    if (!out.empty()) out += '+';
    out += code_name(c);
  }
  return out;
}

LabelSet parse_label_set(std::string_view name) {
  LabelSet labels;
  std::size_t start = 0;
  while (start <= name.size()) {
    const std::size_t plus = name.find('+', start);
    const auto part = name.substr(start, plus == std::string_view::npos ? std::string_view::npos : plus - start);
    if (part.empty()) throw DataError("empty code in label set '" + std::string(name) + "'");
    labels.insert(parse_code(part));
    if (plus == std::string_view::npos) break;
    start = plus + 1;
  }
  return labels;
}

const AbnormalitySpec& abnormality(Code code) { return table()[static_cast<std::size_t>(code)]; }

void validate_labels(const LabelSet& labels) {
  if (labels.empty()) throw DataError("empty label set");
  if (labels.contains(Code::kNorm) && labels.size() > 1) {
    throw DataError("NORM cannot be combined with " + label_set_name(labels));
  }
  int rate_codes = 0;
  for (Code c : labels) rate_codes += sets_rate(c) ? 1 : 0;
  if (rate_codes > 1) throw DataError("conflicting rate codes in " + label_set_name(labels));
}

PatientParams draw_patient(const LabelSet& labels, std::uint64_t seed) {
  validate_labels(labels);
  Rng rng(seed);
  PatientParams p;
  p.labels = labels;
  p.rate_bpm = rng.uniform(60.0, 90.0);
  p.first_beat_fraction = rng.uniform(0.3, 0.7);
  p.rhythm_seed = rng.next();
  for (Code c : labels) {
    const double u = rng.uniform();
    const auto& effect = abnormality(c).effect;
    if (effect.rate_bpm) p.rate_bpm = lerp(*effect.rate_bpm, u);
    if (c == Code::kLbbb) p.qrs_width = lerp(effect.qrs_width, u);
    if (c == Code::kSte) p.st_offset_mv = lerp(effect.st_offset_mv, u);
    if (c == Code::kLowVolt) p.amplitude = lerp(effect.amplitude, u);
    if (c == Code::kPvc) p.ectopic_beats = u < 0.5 ? 1 : (u < 0.75 ? 2 : 3);
    p.templates.emplace_back(c, u < 0.5 ? 0 : 1);
  }
  return p;
}

std::vector<double> beat_times(const PatientParams& patient, const SynthOptions& opts) {
  const double rr = 60.0 / patient.rate_bpm;
  const double jitter = patient.labels.contains(Code::kAfib) ? abnormality(Code::kAfib).effect.rr_jitter : 0.0;
  Rng rng(patient.rhythm_seed);
  std::vector<double> times;
  double t = patient.first_beat_fraction * rr;
  while (t < opts.duration_s) {
    times.push_back(t);
    t += rr * (1.0 + jitter * rng.uniform(-1.0, 1.0));
  }
  return times;
}

ECGRecord render_ecg(const PatientParams& patient, std::uint64_t noise_seed, const SynthOptions& opts) {
  if (opts.leads < 1 || opts.sampling_rate_hz < 1 || opts.duration_s < 1) throw DataError("invalid synth options");
  const Index n = static_cast<Index>(opts.sampling_rate_hz) * opts.duration_s;
  const double fs = opts.sampling_rate_hz;
  const double rr = 60.0 / patient.rate_bpm;
  const bool has_p = !patient.labels.contains(Code::kAfib);

  std::vector<double> times = beat_times(patient, opts);
  std::vector<bool> ectopic(times.size(), false);
  if (patient.ectopic_beats > 0 && times.size() > 3) {
    Rng rng(patient.rhythm_seed ^ 0xec70b1cULL);
    int placed = 0;
    for (int attempt = 0; attempt < 100 && placed < patient.ectopic_beats; ++attempt) {
      const std::size_t k = 1 + rng.below(times.size() - 2);
      if (ectopic[k] || ectopic[k - 1] || ectopic[k + 1]) continue;
      ectopic[k] = true;
      times[k] = times[k - 1] + 0.6 * (times[k] - times[k - 1]);
      ++placed;
    }
  }

  std::vector<double> lead2(n, 0.0);
  for (std::size_t b = 0; b < times.size(); ++b) {
    const double r = times[b];
    const double w = ectopic[b] ? 2.5 : patient.qrs_width;
    const double qt = std::sqrt(rr);
    const Index lo = std::max<Index>(0, static_cast<Index>((r - 0.4) * fs));
    const Index hi = std::min<Index>(n, static_cast<Index>((r + 0.8) * fs) + 1);
    for (Index i = lo; i < hi; ++i) {
      const double t = i / fs;
      double v = 0.0;
      if (has_p && !ectopic[b]) v += 0.15 * gaussian(t, r - 0.16, 0.022);
      v += -0.12 * gaussian(t, r - 0.022 * w, 0.008 * w);
      v += 1.10 * gaussian(t, r, 0.011 * w);
      v += -0.28 * gaussian(t, r + 0.024 * w, 0.009 * w);
      v += patient.st_offset_mv * gaussian(t, r + 0.025 * w + 0.08, 0.04);
      v += (ectopic[b] ? -0.45 : 0.32) * gaussian(t, r + 0.30 * qt, 0.05 * qt);
      lead2[i] += patient.amplitude * v;
    }
  }

  // Extra leads are scaled, shifted copies of lead II with their own noise.
  static constexpr std::array<double, 4> kGain{1.0, 0.6, -0.5, 0.9};
  static constexpr std::array<int, 4> kShift{0, 1, 2, -1};
  Rng noise(noise_seed);
  ECGRecord rec;
  rec.signal.resize(opts.leads, n);
  rec.sampling_rate_hz = opts.sampling_rate_hz;
  rec.duration_s = opts.duration_s;
  rec.labels = patient.labels;
  for (int l = 0; l < opts.leads; ++l) {
    const double gain = kGain[l % 4] * (1.0 - 0.1 * (l / 4));
    const int shift = kShift[l % 4] + l / 4;
    for (Index i = 0; i < n; ++i) {
      const Index src = std::clamp<Index>(i - shift, 0, n - 1);
      rec.signal(l, i) = static_cast<float>(gain * lead2[src] + opts.noise_mv * noise.normal());
    }
  }
  return rec;
}

ECGRecord synth_ecg(const LabelSet& labels, std::uint64_t seed, const SynthOptions& opts) {
  const PatientParams patient = draw_patient(labels, Rng::derive(seed, "patient"));
  return render_ecg(patient, Rng::derive(seed, "noise"), opts);
}

// ---------------------------------------------------------------------------

Vocabulary::Vocabulary(std::vector<std::string> words) {
  words_ = {"<pad>", "<unk>", "<bos>", "<eos>", "<cls>", "<mask>"};
  for (auto& w : words) words_.push_back(std::move(w));
  for (int i = 0; i < static_cast<int>(words_.size()); ++i) index_.emplace(words_[i], i);
}

Vocabulary Vocabulary::build_default() {
  std::set<std::string> words{"normal", "abnormal", "ecg"};
  for (Code c : kAllCodes) {
    for (const auto& sentence : abnormality(c).sentence_templates) {
      std::istringstream is(normalize_text(sentence));
      std::string w;
      while (is >> w) words.insert(w);
    }
  }
  return Vocabulary(std::vector<std::string>(words.begin(), words.end()));
}

int Vocabulary::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || id >= size()) throw DataError("token id " + std::to_string(id) + " outside vocabulary");
  return words_[id];
}

std::string normalize_text(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (unsigned char ch : text) {
    if (std::isalnum(ch)) {
      if (pending_space && !out.empty()) out += ' ';
      pending_space = false;
      out += static_cast<char>(std::tolower(ch));
    } else if (std::isspace(ch)) {
      pending_space = true;
    }
    // Punctuation and any other character are removed outright.
  }
  return out;
}

TextReport tokenize(std::string_view raw_text, const Vocabulary& vocab) {
  TextReport report;
  report.raw_text = std::string(raw_text);
  report.token_ids.push_back(kBos);
  int word_index = 0;
  std::size_t start = 0;
  while (start < raw_text.size()) {
    std::size_t stop = raw_text.find('.', start);
    if (stop == std::string_view::npos) stop = raw_text.size();
    std::istringstream is(normalize_text(raw_text.substr(start, stop - start)));
    const int begin = word_index;
    std::string w;
    while (is >> w) {
      report.token_ids.push_back(vocab.id(w));
      ++word_index;
    }
    if (word_index > begin) report.sentence_spans.push_back({begin, word_index});
    start = stop + 1;
  }
  report.token_ids.push_back(kEos);
  return report;
}

std::string detokenize(std::span<const int> ids, const Vocabulary& vocab) {
  std::string out;
  for (int id : ids) {
    if (id == kBos || id == kPad) continue;
    if (id == kEos) break;
    if (!out.empty()) out += ' ';
    out += vocab.word(id);
  }
  return out;
}

std::string detokenize(const TextReport& report, const Vocabulary& vocab) {
  return detokenize(std::span<const int>(report.token_ids), vocab);
}

TextReport synth_report(const PatientParams& patient, const Vocabulary& vocab) {
  if (patient.labels.empty()) throw DataError("synth_report needs at least one code");
  std::string text;
  for (const auto& [code, which] : patient.templates) {
    text += abnormality(code).sentence_templates.at(which);
    text += ". ";
  }
  const bool normal = patient.labels == LabelSet{Code::kNorm};
  text += normal ? "normal ecg." : "abnormal ecg.";
  return tokenize(text, vocab);
}

TextReport synth_report(const LabelSet& labels, std::uint64_t seed, const Vocabulary& vocab) {
  return synth_report(draw_patient(labels, Rng::derive(seed, "patient")), vocab);
}

// ---------------------------------------------------------------------------

ClassMix ClassMix::default_mix() {
  ClassMix mix;
  for (Code c : {Code::kNorm, Code::kAfib, Code::kLbbb, Code::kSte}) mix.classes.push_back({{c}, 0.25});
  return mix;
}

ClassMix ClassMix::parse(std::string_view text) {
  ClassMix mix;
  bool any_weight = false, any_plain = false;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t comma = text.find(',', start);
    if (comma == std::string_view::npos) comma = text.size();
    const auto item = text.substr(start, comma - start);
    const auto colon = item.find(':');
    if (colon == std::string_view::npos) {
      mix.classes.push_back({parse_label_set(item), 0.0});
      any_plain = true;
    } else {
      const std::string weight(item.substr(colon + 1));
      char* end = nullptr;
      const double w = std::strtod(weight.c_str(), &end);
      if (weight.empty() || *end != '\0') throw DataError("bad class weight '" + weight + "'");
      mix.classes.push_back({parse_label_set(item.substr(0, colon)), w});
      any_weight = true;
    }
    start = comma + 1;
  }
  if (any_weight && any_plain) throw DataError("class mix mixes weighted and unweighted entries");
  if (any_plain) {
    for (auto& c : mix.classes) c.second = 1.0 / static_cast<double>(mix.classes.size());
  }
  mix.validate();
  return mix;
}

std::string ClassMix::to_string() const {
  std::string out;
  char buf[32];
  for (const auto& [labels, w] : classes) {
    if (!out.empty()) out += ',';
    std::snprintf(buf, sizeof(buf), "%.6g", w);
    out += label_set_name(labels) + ":" + buf;
  }
  return out;
}

void ClassMix::validate() const {
  if (classes.empty()) throw DataError("class mix is empty");
  double total = 0.0;
  std::set<LabelSet> seen;
  for (const auto& [labels, w] : classes) {
    validate_labels(labels);
    if (!(w >= 0.0)) throw DataError("negative class weight for " + label_set_name(labels));
    if (!seen.insert(labels).second) throw DataError("duplicate class " + label_set_name(labels));
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-6) throw DataError("class mix sums to " + std::to_string(total) + ", not 1");
}

std::vector<int> apportion(int n, std::span<const double> weights) {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<int> counts(weights.size(), 0);
  if (n <= 0 || total <= 0.0) return counts;
  std::vector<std::pair<double, std::size_t>> remainders;
  int assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = n * weights[i] / total;
    counts[i] = static_cast<int>(std::floor(exact + 1e-9));
    assigned += counts[i];
    remainders.push_back({exact - counts[i], i});
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first + 1e-12; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) counts[remainders[k % remainders.size()].second] += 1;
  return counts;
}

Corpus make_corpus(int n, const ClassMix& mix, std::uint64_t seed, const CorpusOptions& opts) {
  if (n < 1) throw DataError("corpus size must be at least 1");
  mix.validate();
  Corpus corpus;
  corpus.vocab = Vocabulary::build_default();
  corpus.mix = mix;
  corpus.seed = seed;
  corpus.options = opts;

  std::vector<double> weights;
  for (const auto& c : mix.classes) weights.push_back(c.second);
  const std::vector<int> counts = apportion(n, weights);

  std::vector<int> class_of;
  for (std::size_t c = 0; c < counts.size(); ++c) class_of.insert(class_of.end(), counts[c], static_cast<int>(c));
  Rng order(Rng::derive(seed, "order"));
  for (std::size_t i = class_of.size(); i > 1; --i) std::swap(class_of[i - 1], class_of[order.below(i)]);

  std::vector<EcgTextPair> all;
  all.reserve(n);
  Rng corrupt(Rng::derive(seed, "corrupt"));
  for (int i = 0; i < n; ++i) {
    char id[32], pid[32];
    std::snprintf(id, sizeof(id), "rec%06d", i);
    std::snprintf(pid, sizeof(pid), "pat%06d", i);
    const auto& labels = mix.classes[class_of[i]].first;
    const PatientParams patient = draw_patient(labels, Rng::derive(seed, std::string("patient/") + id));
    EcgTextPair pair;
    pair.ecg = render_ecg(patient, Rng::derive(seed, std::string("noise/") + id), opts.synth);
    pair.ecg.id = id;
    pair.ecg.patient_id = pid;
    pair.report = synth_report(patient, corpus.vocab);

    if (opts.nan_fraction > 0 && corrupt.bernoulli(opts.nan_fraction)) {
      pair.ecg.signal(0, pair.ecg.samples() / 2) = std::numeric_limits<float>::quiet_NaN();
    }
    if (opts.short_report_fraction > 0 && corrupt.bernoulli(opts.short_report_fraction)) {
      pair.report = tokenize("sinus rhythm.", corpus.vocab);
    }
    if (opts.missing_report_fraction > 0 && corrupt.bernoulli(opts.missing_report_fraction)) {
      pair.report.reset();
    }
    all.push_back(std::move(pair));
  }

  // Stratified 80/10/10 split with exact global sizes.
  const int n_val = (n + 5) / 10;
  const int n_test = (n + 5) / 10;
  std::vector<std::vector<int>> members(counts.size());
  for (int i = 0; i < n; ++i) members[class_of[i]].push_back(i);
  Rng split_rng(Rng::derive(seed, "split"));
  for (auto& m : members) {
    for (std::size_t i = m.size(); i > 1; --i) std::swap(m[i - 1], m[split_rng.below(i)]);
  }
  std::vector<double> remaining(counts.begin(), counts.end());
  const auto val_counts = apportion(n_val, remaining);
  for (std::size_t c = 0; c < counts.size(); ++c) remaining[c] -= val_counts[c];
  const auto test_counts = apportion(n_test, remaining);

  std::vector<int> assignment(n, 0);  // 0 train, 1 val, 2 test
  for (std::size_t c = 0; c < counts.size(); ++c) {
    for (int k = 0; k < static_cast<int>(members[c].size()); ++k) {
      assignment[members[c][k]] = k < val_counts[c] ? 1 : (k < val_counts[c] + test_counts[c] ? 2 : 0);
    }
  }
  for (int i = 0; i < n; ++i) {
    auto& dest = assignment[i] == 0 ? corpus.train : (assignment[i] == 1 ? corpus.val : corpus.test);
    dest.push_back(std::move(all[i]));
  }
  return corpus;
}

std::vector<EcgTextPair> filter_pairs(std::vector<EcgTextPair> pairs) {
  std::vector<EcgTextPair> kept;
  kept.reserve(pairs.size());
  for (auto& p : pairs) {
    if (p.ecg.signal.size() == 0 || !p.ecg.signal.allFinite()) continue;
    if (!p.report || p.report->word_count() < kMinReportWords) continue;
    kept.push_back(std::move(p));
  }
  return kept;
}

}  // namespace ecglp

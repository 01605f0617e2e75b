#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "ecglp/corpus_io.hpp"
#include "ecglp/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

using namespace ecglp;

namespace {

// Threshold peak picking on lead II, independent of the generator's beat list.
std::vector<Index> detect_r_peaks(const ECGRecord& rec) {
  const auto lead = rec.signal.row(0);
  const float threshold = 0.5f * lead.maxCoeff();
  const Index refractory = rec.sampling_rate_hz / 4;
  std::vector<Index> peaks;
  for (Index i = 1; i + 1 < lead.size(); ++i) {
    if (lead(i) < threshold || lead(i) < lead(i - 1) || lead(i) < lead(i + 1)) continue;
    if (!peaks.empty() && i - peaks.back() < refractory) {
      if (lead(i) > lead(peaks.back())) peaks.back() = i;
      continue;
    }
    peaks.push_back(i);
  }
  return peaks;
}

double window_energy(const ECGRecord& rec, Index peak, double from_s, double to_s) {
  const Index a = peak + static_cast<Index>(std::lround(from_s * rec.sampling_rate_hz));
  const Index b = peak + static_cast<Index>(std::lround(to_s * rec.sampling_rate_hz));
  double e = 0;
  for (Index i = std::max<Index>(a, 0); i <= std::min<Index>(b, rec.samples() - 1); ++i) {
    e += double(rec.signal(0, i)) * rec.signal(0, i);
  }
  return e;
}

double p_band_energy(const ECGRecord& rec) {
  double total = 0;
  auto peaks = detect_r_peaks(rec);
  for (Index p : peaks) total += window_energy(rec, p, -0.20, -0.12);
  return total / static_cast<double>(peaks.size());
}

double window_mean(const ECGRecord& rec, Index peak, double from_s, double to_s) {
  const Index a = std::max<Index>(0, peak + static_cast<Index>(std::lround(from_s * rec.sampling_rate_hz)));
  const Index b = std::min<Index>(rec.samples() - 1, peak + static_cast<Index>(std::lround(to_s * rec.sampling_rate_hz)));
  double s = 0;
  for (Index i = a; i <= b; ++i) s += rec.signal(0, i);
  return s / double(b - a + 1);
}

// rate, QRS width, P energy, ST offset, amplitude
std::array<double, 5> handcrafted_features(const ECGRecord& rec) {
  auto peaks = detect_r_peaks(rec);
  const double rr = double(peaks.back() - peaks.front()) / double(peaks.size() - 1) / rec.sampling_rate_hz;
  double width = 0, st = 0, n = 0;
  const Index margin = rec.sampling_rate_hz / 4;
  for (Index p : peaks) {
    if (p < margin || p + margin >= rec.samples()) continue;
    n += 1;
    const float half = 0.5f * rec.signal(0, p);
    Index lo = p, hi = p;
    while (lo > 0 && rec.signal(0, lo - 1) > half) --lo;
    while (hi + 1 < rec.samples() && rec.signal(0, hi + 1) > half) ++hi;
    width += double(hi - lo + 1);
    st += window_mean(rec, p, 0.10, 0.16) - window_mean(rec, p, -0.08, -0.05);
  }
  return {60.0 / rr, width / n, p_band_energy(rec), st / n, double(rec.signal.row(0).maxCoeff())};
}

// Maps each report sentence back to the code whose template produced it.
std::set<Code> codes_mentioned(const TextReport& report, const Vocabulary& vocab) {
  std::set<Code> codes;
  for (const auto& span : report.sentence_spans) {
    std::string sentence;
    for (int w = span.begin; w < span.end; ++w) {
      if (!sentence.empty()) sentence += ' ';
      sentence += vocab.word(report.token_ids[w + 1]);
    }
    for (Code c : kAllCodes) {
      for (const auto& t : abnormality(c).sentence_templates) {
        if (t == sentence) codes.insert(c);
      }
    }
  }
  return codes;
}

}  // namespace

TEST_CASE("abnormality table covers every code with templates and effects") {
  for (Code c : kAllCodes) {
    const auto& spec = abnormality(c);
    CHECK(spec.code == c);
    CHECK(spec.sentence_templates.size() >= 2);
    const auto& e = spec.effect;
    const bool has_effect = e.p_amplitude != 1.0 || e.qrs_width.second != 1.0 || e.st_offset_mv.second != 0.0 ||
                            e.rr_jitter != 0.0 || e.rate_bpm.has_value() || e.amplitude.second != 1.0 ||
                            e.ectopic_beats.second != 0;
    CHECK(has_effect);
    CHECK(parse_code(code_name(c)) == c);
  }
}

TEST_CASE("NORM at 60 bpm for 10 s has exactly 10 detectable QRS peaks") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    PatientParams p = draw_patient({Code::kNorm}, seed);
    p.rate_bpm = 60.0;
    auto rec = render_ecg(p, seed + 100);
    CHECK(rec.samples() == rec.sampling_rate_hz * rec.duration_s);
    CHECK(rec.samples() == 1000);
    CHECK(rec.leads() == 4);
    CHECK(detect_r_peaks(rec).size() == 10);
  }
}

TEST_CASE("AFIB removes P-wave band energy relative to NORM") {
  // Pairs share the patient's rate so the previous T wave sits in the same place.
  double afib = 0, norm = 0;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const PatientParams normal = draw_patient({Code::kNorm}, seed);
    PatientParams fib = draw_patient({Code::kAfib}, seed);
    fib.rate_bpm = normal.rate_bpm;
    afib += p_band_energy(render_ecg(fib, seed));
    norm += p_band_energy(render_ecg(normal, seed));
  }
  CHECK(afib < 0.1 * norm);
}

TEST_CASE("LOWVOLT peak amplitude is at most half of NORM") {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    auto low = synth_ecg({Code::kLowVolt}, seed);
    auto norm = synth_ecg({Code::kNorm}, seed);
    CHECK(low.signal.cwiseAbs().maxCoeff() <= 0.5f * norm.signal.cwiseAbs().maxCoeff());
  }
}

TEST_CASE("incompatible label sets are rejected") {
  CHECK_THROWS_AS(synth_ecg({Code::kTachy, Code::kBrady}, 1), DataError);
  CHECK_THROWS_AS(synth_ecg({Code::kNorm, Code::kSte}, 1), DataError);
  CHECK_THROWS_AS(synth_ecg({}, 1), DataError);
  CHECK_NOTHROW(synth_ecg({Code::kAfib, Code::kSte, Code::kLowVolt}, 1));
}

TEST_CASE("synth_report templates, summary and determinism") {
  const auto vocab = Vocabulary::build_default();
  auto norm = synth_report({Code::kNorm}, 3, vocab);
  const auto text = detokenize(norm, vocab);
  CHECK((text == "sinus rhythm normal ecg" || text == "normal sinus rhythm normal ecg"));
  CHECK(norm.sentence_spans.size() == 2);

  auto two = synth_report({Code::kAfib, Code::kSte}, 4, vocab);
  CHECK(two.sentence_spans.size() == 3);
  CHECK(detokenize(two, vocab).ends_with("abnormal ecg"));

  CHECK(synth_report({Code::kLbbb}, 9, vocab).token_ids == synth_report({Code::kLbbb}, 9, vocab).token_ids);
  CHECK_THROWS_AS(synth_report(LabelSet{}, 9, vocab), DataError);
}

TEST_CASE("tokenize spans, normalization and UNK") {
  const auto vocab = Vocabulary::build_default();
  auto r = tokenize("Atrial fibrillation. Abnormal ECG!", vocab);
  REQUIRE(r.sentence_spans.size() == 2);
  CHECK(r.sentence_spans[0] == Span{0, 2});
  CHECK(r.sentence_spans[1] == Span{2, 4});
  CHECK(r.token_ids.front() == kBos);
  CHECK(r.token_ids.back() == kEos);
  CHECK(detokenize(r, vocab) == "atrial fibrillation abnormal ecg");

  auto empty = tokenize("", vocab);
  CHECK(empty.word_count() == 0);
  CHECK(empty.sentence_spans.empty());

  auto oov = tokenize("sinus zebra rhythm.", vocab);
  CHECK(oov.token_ids[2] == kUnk);

  CHECK(normalize_text("  ST-Elevation,  noted;\t(V1)  ") == "stelevation noted v1");
}

TEST_CASE("tokenize round-trips normalized template reports") {
  const auto vocab = Vocabulary::build_default();
  Rng rng(42);
  for (int i = 0; i < 100; ++i) {
    const Code c = kAllCodes[rng.below(kAllCodes.size())];
    const auto& templates = abnormality(c).sentence_templates;
    std::string raw = templates[rng.below(templates.size())];
    raw[0] = static_cast<char>(std::toupper(raw[0]));
    raw += ". Abnormal ECG.";
    auto report = tokenize(raw, vocab);
    CHECK(detokenize(report, vocab) == normalize_text(raw));
    // Spans are ordered, disjoint and cover every word.
    int expect = 0;
    for (const auto& s : report.sentence_spans) {
      CHECK(s.begin == expect);
      CHECK(s.end > s.begin);
      expect = s.end;
    }
    CHECK(expect == report.word_count());
  }
}

TEST_CASE("apportion and class counts") {
  std::vector<double> uniform4(4, 0.25);
  auto counts = apportion(10, uniform4);
  std::multiset<int> got(counts.begin(), counts.end());
  CHECK(got == std::multiset<int>{3, 3, 2, 2});

  auto corpus = make_corpus(10, ClassMix::parse("NORM,AFIB,LBBB,STE"), 1);
  std::map<LabelSet, int> per_class;
  for (const auto* split : {&corpus.train, &corpus.val, &corpus.test}) {
    for (const auto& p : *split) per_class[p.ecg.labels]++;
  }
  std::multiset<int> class_counts;
  for (const auto& [k, v] : per_class) class_counts.insert(v);
  CHECK(class_counts == std::multiset<int>{3, 3, 2, 2});
  CHECK(corpus.size() == 10);

  CHECK_THROWS_AS(ClassMix::parse("NORM:0.5,AFIB:0.4"), DataError);
  CHECK_THROWS_AS(ClassMix::parse("NORM:0.5,BOGUS:0.5"), DataError);
  CHECK_THROWS_AS(make_corpus(0, ClassMix::default_mix(), 1), DataError);
}

TEST_CASE("class mix proportions hold within one sample") {
  auto mix = ClassMix::parse("NORM:0.5,AFIB:0.3,STE+LOWVOLT:0.2");
  auto corpus = make_corpus(37, mix, 5);
  std::map<LabelSet, int> per_class;
  for (const auto* split : {&corpus.train, &corpus.val, &corpus.test}) {
    for (const auto& p : *split) per_class[p.ecg.labels]++;
  }
  for (const auto& [labels, w] : mix.classes) CHECK(std::abs(per_class[labels] - 37 * w) <= 1.0);
}

TEST_CASE("default corpus: split sizes, determinism, consistency, filter pass") {
  auto corpus = make_corpus(2000, ClassMix::default_mix(), 17);
  CHECK(corpus.train.size() == 1600);
  CHECK(corpus.val.size() == 200);
  CHECK(corpus.test.size() == 200);

  // Stratification: every class holds ~10% of the val and test splits.
  std::map<LabelSet, int> val_counts;
  for (const auto& p : corpus.val) val_counts[p.ecg.labels]++;
  for (const auto& [labels, n] : val_counts) CHECK(n == 50);

  std::size_t total = 0;
  for (const auto* split : {&corpus.train, &corpus.val, &corpus.test}) {
    total += split->size();
    CHECK(filter_pairs(*split).size() == split->size());
    for (const auto& p : *split) CHECK(codes_mentioned(*p.report, corpus.vocab) == p.ecg.labels);
  }
  CHECK(total == 2000);

  auto again = make_corpus(2000, ClassMix::default_mix(), 17);
  for (std::size_t i = 0; i < corpus.test.size(); ++i) {
    CHECK(corpus.test[i].ecg.id == again.test[i].ecg.id);
    CHECK(corpus.test[i].ecg.signal == again.test[i].ecg.signal);
    CHECK(corpus.test[i].report->token_ids == again.test[i].report->token_ids);
  }
}

TEST_CASE("filter_pairs drops NaN signals, short and missing reports, keeps order") {
  const auto vocab = Vocabulary::build_default();
  std::vector<EcgTextPair> pairs;
  for (int i = 0; i < 5; ++i) {
    EcgTextPair p;
    p.ecg = synth_ecg({Code::kAfib}, i);
    p.ecg.id = "r" + std::to_string(i);
    p.report = synth_report({Code::kAfib}, i, vocab);
    pairs.push_back(p);
  }
  pairs[1].ecg.signal(2, 10) = std::numeric_limits<float>::quiet_NaN();
  pairs[2].report = tokenize("sinus rhythm", vocab);
  pairs[3].report.reset();
  auto kept = filter_pairs(pairs);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].ecg.id == "r0");
  CHECK(kept[1].ecg.id == "r4");
  CHECK(kept[0].ecg.signal == pairs[0].ecg.signal);

  EcgTextPair empty;
  empty.report = pairs[0].report;
  CHECK(filter_pairs({empty}).empty());
}

TEST_CASE("corruption flags produce filterable pairs") {
  CorpusOptions opts;
  opts.nan_fraction = 0.2;
  opts.short_report_fraction = 0.2;
  opts.missing_report_fraction = 0.1;
  auto corpus = make_corpus(100, ClassMix::default_mix(), 3, opts);
  const auto kept = filter_pairs(corpus.train);
  CHECK(kept.size() < corpus.train.size());
  CHECK(kept.size() > corpus.train.size() / 3);
}

TEST_CASE("hand-crafted features separate the four default classes") {
  auto corpus = make_corpus(600, ClassMix::default_mix(), 8);
  auto to_xy = [&](const std::vector<EcgTextPair>& split) {
    Eigen::MatrixXd x(split.size(), 6);
    std::vector<int> y;
    for (std::size_t i = 0; i < split.size(); ++i) {
      auto f = handcrafted_features(split[i].ecg);
      for (int j = 0; j < 5; ++j) x(i, j) = f[j];
      x(i, 5) = 1.0;
      y.push_back(static_cast<int>(*split[i].ecg.labels.begin()));
    }
    return std::pair{x, y};
  };
  auto [xtr, ytr] = to_xy(corpus.train);
  auto [xte, yte] = to_xy(corpus.test);
  Eigen::RowVectorXd mu = xtr.leftCols(5).colwise().mean();
  Eigen::RowVectorXd sd = ((xtr.leftCols(5).rowwise() - mu).array().square().colwise().mean()).sqrt();
  for (auto* x : {&xtr, &xte}) x->leftCols(5) = ((x->leftCols(5).rowwise() - mu).array().rowwise() / sd.array()).matrix();

  // Softmax regression by full-batch gradient descent; classes are code indices 0..3.
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(6, 4);
  for (int it = 0; it < 3000; ++it) {
    Eigen::MatrixXd z = xtr * w;
    Eigen::MatrixXd p = (z.colwise() - z.rowwise().maxCoeff()).array().exp();
    p = p.array().colwise() / p.rowwise().sum().array();
    for (std::size_t i = 0; i < ytr.size(); ++i) p(i, ytr[i]) -= 1.0;
    w -= 0.5 * xtr.transpose() * p / double(ytr.size());
  }
  int correct = 0;
  Eigen::MatrixXd z = xte * w;
  for (std::size_t i = 0; i < yte.size(); ++i) {
    Index best;
    z.row(i).maxCoeff(&best);
    correct += best == yte[i];
  }
  const double acc = double(correct) / double(yte.size());
  MESSAGE("hand-crafted 4-class accuracy: " << acc);
  CHECK(acc >= 0.95);
}

TEST_CASE("corpus directory round trip is bit-exact") {
  auto corpus = make_corpus(20, ClassMix::parse("NORM,AFIB+STE"), 12);
  const auto dir = std::filesystem::temp_directory_path() / "ecglp_test_corpus";
  std::filesystem::remove_all(dir);
  save_corpus(corpus, dir);
  auto loaded = load_corpus(dir);
  CHECK(loaded.seed == 12);
  CHECK(loaded.vocab.words() == corpus.vocab.words());
  REQUIRE(loaded.train.size() == corpus.train.size());
  for (std::size_t i = 0; i < corpus.train.size(); ++i) {
    CHECK(loaded.train[i].ecg.signal == corpus.train[i].ecg.signal);
    CHECK(loaded.train[i].ecg.labels == corpus.train[i].ecg.labels);
    CHECK(loaded.train[i].report->token_ids == corpus.train[i].report->token_ids);
    CHECK(loaded.train[i].report->sentence_spans == corpus.train[i].report->sentence_spans);
  }
  // Raw file: little-endian float32, lead-major.
  const auto& first = corpus.train[0].ecg;
  std::ifstream is(dir / "train" / (first.id + ".f32"), std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), {});
  CHECK(bytes.size() == static_cast<std::size_t>(first.signal.size()) * 4);
  std::uint32_t bits = bytes[4] | bytes[5] << 8 | bytes[6] << 16 | std::uint32_t(bytes[7]) << 24;
  float v;
  std::memcpy(&v, &bits, 4);
  CHECK(v == first.signal(0, 1));
  std::filesystem::remove_all(dir);
}

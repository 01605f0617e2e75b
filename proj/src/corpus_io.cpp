#include "ecglp/corpus_io.hpp"

#include "ecglp/binary_io.hpp"

#include <json.hpp>

#include <fstream>

namespace ecglp {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kSplitNames[] = {"train", "val", "test"};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
}

json read_json(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw DataError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void save_record(const EcgTextPair& pair, const fs::path& dir) {
  const auto& ecg = pair.ecg;
  {
    std::ofstream os(dir / (ecg.id + ".f32"), std::ios::binary);
    if (!os) throw DataError("cannot write signal for " + ecg.id);
    for (Index l = 0; l < ecg.leads(); ++l) {
      for (Index i = 0; i < ecg.samples(); ++i) io::write_le<float>(os, ecg.signal(l, i));
    }
  }
  json labels = json::array();
  for (Code c : ecg.labels) labels.push_back(std::string(code_name(c)));
  json sidecar{{"id", ecg.id},
               {"patient_id", ecg.patient_id},
               {"leads", ecg.leads()},
               {"samples", ecg.samples()},
               {"sampling_rate_hz", ecg.sampling_rate_hz},
               {"duration_s", ecg.duration_s},
               {"labels", labels},
               {"report_text", pair.report ? json(pair.report->raw_text) : json(nullptr)}};
  write_text(dir / (ecg.id + ".json"), sidecar.dump(2) + "\n");
}

EcgTextPair load_record(const fs::path& dir, const std::string& id, const Vocabulary& vocab) {
  const json sidecar = read_json(dir / (id + ".json"));
  EcgTextPair pair;
  auto& ecg = pair.ecg;
  try {
    ecg.id = sidecar.at("id").get<std::string>();
    ecg.patient_id = sidecar.value("patient_id", std::string{});
    ecg.sampling_rate_hz = sidecar.at("sampling_rate_hz").get<int>();
    ecg.duration_s = sidecar.value("duration_s", 0);
    const auto leads = sidecar.at("leads").get<Index>();
    const auto samples = sidecar.value("samples", static_cast<Index>(ecg.sampling_rate_hz) * ecg.duration_s);
    for (const auto& name : sidecar.at("labels")) ecg.labels.insert(parse_code(name.get<std::string>()));
    if (!sidecar.at("report_text").is_null()) pair.report = tokenize(sidecar.at("report_text").get<std::string>(), vocab);
    ecg.signal.resize(leads, samples);
  } catch (const json::exception& e) {
    throw DataError("bad sidecar for " + id + ": " + e.what());
  }
  std::ifstream is(dir / (id + ".f32"), std::ios::binary);
  if (!is) throw DataError("missing signal file for " + id);
  try {
    for (Index l = 0; l < ecg.leads(); ++l) {
      for (Index i = 0; i < ecg.samples(); ++i) ecg.signal(l, i) = io::read_le<float>(is);
    }
  } catch (const io::FormatError&) {
    throw DataError("truncated signal file for " + id);
  }
  return pair;
}

}  // namespace

void save_corpus(const Corpus& corpus, const fs::path& dir) {
  fs::create_directories(dir);
  json splits = json::object();
  const std::vector<const std::vector<EcgTextPair>*> parts{&corpus.train, &corpus.val, &corpus.test};
  for (std::size_t s = 0; s < parts.size(); ++s) {
    const fs::path sub = dir / kSplitNames[s];
    fs::create_directories(sub);
    json ids = json::array();
    for (const auto& pair : *parts[s]) {
      save_record(pair, sub);
      ids.push_back(pair.ecg.id);
    }
    splits[kSplitNames[s]] = ids;
  }
  const auto& synth = corpus.options.synth;
  json manifest{{"format", "ecglp-corpus"},
                {"version", kCorpusFormatVersion},
                {"seed", corpus.seed},
                {"n", corpus.size()},
                {"class_mix", corpus.mix.to_string()},
                {"vocabulary", corpus.vocab.words()},
                {"synth",
                 {{"leads", synth.leads},
                  {"sampling_rate_hz", synth.sampling_rate_hz},
                  {"duration_s", synth.duration_s},
                  {"noise_mv", synth.noise_mv}}},
                {"splits", splits}};
  write_text(dir / "corpus.json", manifest.dump(2) + "\n");
}

Corpus load_corpus(const fs::path& dir) {
  const json manifest = read_json(dir / "corpus.json");
  Corpus corpus;
  try {
    if (manifest.at("version").get<int>() != kCorpusFormatVersion) {
      throw DataError("unsupported corpus version " + manifest.at("version").dump());
    }
    corpus.seed = manifest.at("seed").get<std::uint64_t>();
    corpus.mix = ClassMix::parse(manifest.at("class_mix").get<std::string>());
    auto words = manifest.at("vocabulary").get<std::vector<std::string>>();
    if (words.size() < kNumSpecial) throw DataError("vocabulary is missing special tokens");
    corpus.vocab = Vocabulary(std::vector<std::string>(words.begin() + kNumSpecial, words.end()));
    const auto& synth = manifest.at("synth");
    corpus.options.synth.leads = synth.at("leads").get<int>();
    corpus.options.synth.sampling_rate_hz = synth.at("sampling_rate_hz").get<int>();
    corpus.options.synth.duration_s = synth.at("duration_s").get<int>();
    corpus.options.synth.noise_mv = synth.at("noise_mv").get<double>();
    std::vector<EcgTextPair>* parts[] = {&corpus.train, &corpus.val, &corpus.test};
    for (std::size_t s = 0; s < 3; ++s) {
      for (const auto& id : manifest.at("splits").at(kSplitNames[s])) {
        parts[s]->push_back(load_record(dir / kSplitNames[s], id.get<std::string>(), corpus.vocab));
      }
    }
  } catch (const json::exception& e) {
    throw DataError("bad corpus manifest: " + std::string(e.what()));
  }
  return corpus;
}

}  // namespace ecglp

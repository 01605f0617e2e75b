// Corpus directory layout:
//
//   <dir>/corpus.json          manifest: seed, class mix, vocabulary, split membership
//   <dir>/<split>/<id>.f32     signal, little-endian float32, lead-major
//   <dir>/<split>/<id>.json    sidecar: id, leads, sampling_rate_hz, labels, report_text, ...
#pragma once

#include "ecglp/data.hpp"

#include <filesystem>

namespace ecglp {

inline constexpr int kCorpusFormatVersion = 1;

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);

}  // namespace ecglp

#pragma once

// MELB matrix files and the JSON-lines corpus manifest.
//
// MELB layout: "MELB", u32 version (=1), u32 n_frames, u32 n_bins, then
// n_frames * n_bins float32 values, row-major, little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stablevc/autograd.hpp"
#include "stablevc/synth.hpp"

namespace stablevc::io {

static_assert(std::endian::native == std::endian::little, "MELB and checkpoint I/O assume a little-endian host");

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kMelbMagic[4] = {'M', 'E', 'L', 'B'};
inline constexpr std::uint32_t kMelbVersion = 1;

inline void append_u32(std::string& out, std::uint32_t v) {
  char buf[4];
  std::memcpy(buf, &v, 4);
  out.append(buf, 4);
}

inline std::uint32_t read_u32(const char* p) {
  std::uint32_t v;
  std::memcpy(&v, p, 4);
  return v;
}

inline std::string encode_melb(const Matrix<float>& m) {
  std::string out;
  out.reserve(16 + std::size_t(m.size()) * 4);
  out.append(kMelbMagic, 4);
  append_u32(out, kMelbVersion);
  append_u32(out, std::uint32_t(m.rows()));
  append_u32(out, std::uint32_t(m.cols()));
  out.append(reinterpret_cast<const char*>(m.data()), std::size_t(m.size()) * sizeof(float));
  return out;
}

inline Matrix<float> decode_melb(const std::string& bytes) {
  if (bytes.size() < 16) throw FormatError("MELB: truncated header");
  if (std::memcmp(bytes.data(), kMelbMagic, 4) != 0) throw FormatError("MELB: bad magic");
  if (read_u32(bytes.data() + 4) != kMelbVersion) throw FormatError("MELB: unsupported version");
  const std::uint64_t rows = read_u32(bytes.data() + 8);
  const std::uint64_t cols = read_u32(bytes.data() + 12);
  if (bytes.size() != 16 + rows * cols * 4) throw FormatError("MELB: payload size does not match header");
  Matrix<float> m{Eigen::Index(rows), Eigen::Index(cols)};
  std::memcpy(m.data(), bytes.data() + 16, rows * cols * 4);
  return m;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline void write_melb(const std::filesystem::path& path, const Matrix<float>& m) { write_file(path, encode_melb(m)); }
inline Matrix<float> read_melb(const std::filesystem::path& path) { return decode_melb(read_file(path)); }

template <class Int>
Matrix<float> column_of(const std::vector<Int>& values) {
  Matrix<float> m{Eigen::Index(values.size()), 1};
  for (std::size_t i = 0; i < values.size(); ++i) m(Eigen::Index(i), 0) = float(values[i]);
  return m;
}

// ---------------------------------------------------------------------------
// Corpus on disk:
//   <dir>/manifest.jsonl   one utterance per line
//   <dir>/speakers.jsonl   one speaker per line (speaker_id, tau)
//   <dir>/corpus.json      generation parameters
//   <dir>/feats/<utt>.{mel,ssl,style,units,f0}.melb

struct ManifestEntry {
  std::string utt_id;
  int speaker_id = 0;
  std::string style_class;
  double rate = 1.0;
  nlohmann::json paths;
};

inline nlohmann::json to_json(const ManifestEntry& e) {
  return nlohmann::json{{"utt_id", e.utt_id}, {"speaker_id", e.speaker_id}, {"style_class", e.style_class},
                        {"rate", e.rate}, {"paths", e.paths}};
}

inline ManifestEntry manifest_entry_from_json(const nlohmann::json& j) {
  ManifestEntry e;
  e.utt_id = j.at("utt_id").get<std::string>();
  e.speaker_id = j.at("speaker_id").get<int>();
  e.style_class = j.at("style_class").get<std::string>();
  e.rate = j.at("rate").get<double>();
  e.paths = j.at("paths");
  return e;
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  std::vector<ManifestEntry> entries;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    entries.push_back(manifest_entry_from_json(nlohmann::json::parse(line)));
  }
  return entries;
}

inline nlohmann::json corpus_spec_json(const synth::CorpusSpec& s) {
  return nlohmann::json{{"n_speakers", s.n_speakers}, {"n_styles", s.n_styles}, {"per_cell", s.per_cell},
                        {"min_units", s.min_units},   {"max_units", s.max_units}, {"seed", s.seed},
                        {"mel_noise", s.mel_noise}};
}

inline void save_corpus(const synth::Corpus& corpus, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "feats");
  std::ofstream manifest(dir / "manifest.jsonl", std::ios::trunc);
  if (!manifest) throw std::runtime_error("cannot write manifest in " + dir.string());
  for (const auto& u : corpus.utterances) {
    const std::string stem = "feats/" + u.utt_id;
    ManifestEntry e{u.utt_id, u.speaker_id, std::string(synth::to_string(u.style_class)), u.rate,
                    nlohmann::json{{"mel", stem + ".mel.melb"},
                                   {"ssl", stem + ".ssl.melb"},
                                   {"style", stem + ".style.melb"},
                                   {"units", stem + ".units.melb"},
                                   {"f0", stem + ".f0.melb"}}};
    write_melb(dir / (stem + ".mel.melb"), u.mel);
    write_melb(dir / (stem + ".ssl.melb"), u.ssl_features);
    write_melb(dir / (stem + ".style.melb"), u.style_features);
    write_melb(dir / (stem + ".units.melb"), column_of(u.token_ids));
    write_melb(dir / (stem + ".f0.melb"), column_of(u.f0));
    manifest << to_json(e).dump() << '\n';
  }
  std::ofstream speakers(dir / "speakers.jsonl", std::ios::trunc);
  for (const auto& s : corpus.speakers) {
    speakers << nlohmann::json{{"speaker_id", s.speaker_id}, {"tau", s.tau}}.dump() << '\n';
  }
  std::ofstream meta(dir / "corpus.json", std::ios::trunc);
  meta << corpus_spec_json(corpus.spec).dump(2) << '\n';
}

/// Loads a corpus written by save_corpus. The unit bank is rebuilt from the
/// recorded seed.
inline synth::Corpus load_corpus(const std::filesystem::path& dir, const synth::CorpusConfig& cfg = {}) {
  synth::Corpus corpus;
  corpus.config = cfg;
  const auto meta = nlohmann::json::parse(read_file(dir / "corpus.json"));
  corpus.spec.n_speakers = meta.at("n_speakers").get<int>();
  corpus.spec.n_styles = meta.at("n_styles").get<int>();
  corpus.spec.per_cell = meta.at("per_cell").get<int>();
  corpus.spec.min_units = meta.at("min_units").get<int>();
  corpus.spec.max_units = meta.at("max_units").get<int>();
  corpus.spec.seed = meta.at("seed").get<std::uint64_t>();
  corpus.spec.mel_noise = meta.at("mel_noise").get<bool>();
  corpus.bank = synth::make_unit_bank(corpus.spec.seed, cfg);

  {
    std::ifstream in(dir / "speakers.jsonl");
    if (!in) throw std::runtime_error("cannot open speakers.jsonl in " + dir.string());
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      const int id = j.at("speaker_id").get<int>();
      if (id != int(corpus.speakers.size())) throw FormatError("speakers.jsonl: ids must be dense and ordered");
      corpus.speakers.push_back(synth::speaker_from_tau(id, j.at("tau").get<std::vector<double>>(), cfg));
    }
  }

  for (const auto& e : read_manifest(dir / "manifest.jsonl")) {
    synth::Utterance u;
    u.utt_id = e.utt_id;
    u.speaker_id = e.speaker_id;
    u.style_class = synth::style_from_string(e.style_class);
    u.rate = e.rate;
    u.speaker_embedding = corpus.speaker(e.speaker_id).tau;
    u.mel = read_melb(dir / e.paths.at("mel").get<std::string>());
    u.ssl_features = read_melb(dir / e.paths.at("ssl").get<std::string>());
    u.style_features = read_melb(dir / e.paths.at("style").get<std::string>());
    const Matrix<float> units = read_melb(dir / e.paths.at("units").get<std::string>());
    const Matrix<float> f0 = read_melb(dir / e.paths.at("f0").get<std::string>());
    for (Eigen::Index t = 0; t < units.rows(); ++t) u.token_ids.push_back(int(units(t, 0)));
    for (Eigen::Index t = 0; t < f0.rows(); ++t) u.f0.push_back(double(f0(t, 0)));
    if (u.mel.rows() != u.ssl_features.rows() || u.mel.rows() != u.style_features.rows() ||
        u.mel.rows() != Eigen::Index(u.token_ids.size())) {
      throw FormatError("utterance " + u.utt_id + ": per-frame streams disagree in length");
    }
    corpus.utterances.push_back(std::move(u));
  }
  return corpus;
}

}  // namespace stablevc::io

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "speechchain/checkpoint.hpp"  // little-endian read/write helpers
#include "speechchain/rng.hpp"
#include "speechchain/tensor.hpp"
#include "speechchain/vocab.hpp"

namespace speechchain {

// A referenced file is missing or malformed.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Frame geometry of the feature stream. The defaults are the toy setting;
// 80-dim features with the same 50 ms / 12.5 ms framing reproduce the
// real-scale delay arithmetic.
struct FrameSpec {
  double frame_length_ms = 50.0;
  double frame_shift_ms = 12.5;
  std::size_t feature_dim = 8;

  void validate() const {
    if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
    if (frame_shift_ms > frame_length_ms)
      throw ConfigError("frame_shift_ms must not exceed frame_length_ms");
    if (frame_length_ms <= 0 || frame_shift_ms <= 0)
      throw ConfigError("frame timing must be positive");
  }
};

// Wall-clock span covered by a run of consecutive frames: the first frame's
// window plus one shift per additional frame.
inline double block_duration(const FrameSpec& spec,
                             std::size_t frames_per_block) {
  if (frames_per_block < 1)
    throw ConfigError("frames_per_block must be >= 1");
  return spec.frame_length_ms / 1000.0 +
         static_cast<double>(frames_per_block - 1) * spec.frame_shift_ms /
             1000.0;
}

struct Utterance {
  std::string id;
  std::string text;
  Tensor features;  // [S x feature_dim]

  std::size_t num_frames() const { return features.rows(); }
};

struct SplitCounts {
  std::size_t train = 0;
  std::size_t dev = 0;
  std::size_t test = 0;
  std::size_t chain = 0;  // unpaired-role split for closed-loop training
};

struct CorpusConfig {
  std::string vocabulary = "abcdefghij ";
  std::size_t frames_per_char = 4;
  double noise_std = 0.05;
  std::size_t min_text_len = 5;
  std::size_t max_text_len = 40;
  SplitCounts counts{40, 16, 16, 80};
  std::uint64_t seed = 1;

  void validate() const {
    if (vocabulary.empty()) throw ConfigError("vocabulary is empty");
    Vocab probe(vocabulary);  // rejects duplicates
    if (frames_per_char < 1) throw ConfigError("frames_per_char must be >= 1");
    if (noise_std < 0) throw ConfigError("noise_std must be >= 0");
    if (min_text_len < 1 || max_text_len < min_text_len)
      throw ConfigError("text length range is invalid");
    if (counts.train < 1 || counts.dev < 1 || counts.test < 1)
      throw ConfigError("train/dev/test splits need at least one utterance");
  }
};

struct Corpus {
  std::vector<Utterance> train, dev, test, chain;

  const std::vector<Utterance>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "dev") return dev;
    if (name == "test") return test;
    if (name == "chain") return chain;
    throw ConfigError("unknown split '" + name + "'");
  }
};

namespace detail {

// Every character owns a fixed prototype block of frames; an utterance's
// feature matrix is its characters' prototypes in sequence.
inline std::map<char, Tensor> draw_prototypes(const CorpusConfig& cfg, Rng& rng,
                                              std::size_t dim) {
  std::map<char, Tensor> protos;
  for (char c : cfg.vocabulary) {
    Tensor block({cfg.frames_per_char, dim});
    for (double& v : block.data) v = rng.uniform(-1.0, 1.0);
    protos.emplace(c, std::move(block));
  }
  return protos;
}

inline std::string draw_text(const CorpusConfig& cfg, Rng& rng) {
  const std::size_t len =
      cfg.min_text_len + rng.uniform_int(0, cfg.max_text_len - cfg.min_text_len);
  std::string letters;
  for (char c : cfg.vocabulary)
    if (c != ' ') letters.push_back(c);
  if (letters.empty()) throw ConfigError("vocabulary has no non-space characters");

  auto letter = [&] { return letters[rng.uniform_int(0, letters.size() - 1)]; };
  const bool spaced = cfg.vocabulary.find(' ') != std::string::npos;

  std::string text;
  while (text.size() < len) {
    if (spaced && !text.empty()) text.push_back(' ');
    const std::size_t word = rng.uniform_int(2, 6);
    for (std::size_t i = 0; i < word && text.size() < len; ++i)
      text.push_back(letter());
  }
  text.resize(len);
  if (text.back() == ' ') text.back() = letter();
  return text;
}

inline Utterance synthesize_utterance(const CorpusConfig& cfg,
                                      const std::map<char, Tensor>& protos,
                                      std::string id, std::string text,
                                      std::size_t dim, Rng& rng) {
  Utterance u;
  u.id = std::move(id);
  u.text = std::move(text);
  u.features = Tensor({u.text.size() * cfg.frames_per_char, dim});
  std::size_t row = 0;
  for (char c : u.text) {
    const Tensor& proto = protos.at(c);
    for (std::size_t i = 0; i < proto.numel(); ++i)
      u.features.data[row * dim + i] = proto.data[i];
    row += cfg.frames_per_char;
  }
  if (cfg.noise_std > 0)
    for (double& v : u.features.data) v += cfg.noise_std * rng.normal();
  return u;
}

inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace detail

// Deterministic synthetic corpus: one RNG stream seeded from the config,
// prototypes first, then splits in a fixed order. Same config, same bits.
inline Corpus generate(const CorpusConfig& cfg, const FrameSpec& spec) {
  cfg.validate();
  spec.validate();
  Rng rng(cfg.seed);
  const auto protos = detail::draw_prototypes(cfg, rng, spec.feature_dim);

  Corpus corpus;
  const std::pair<const char*, std::size_t> plan[] = {
      {"train", cfg.counts.train},
      {"dev", cfg.counts.dev},
      {"test", cfg.counts.test},
      {"chain", cfg.counts.chain},
  };
  for (const auto& [split, count] : plan) {
    std::vector<Utterance>* dst = &corpus.train;
    if (std::string(split) == "dev") dst = &corpus.dev;
    if (std::string(split) == "test") dst = &corpus.test;
    if (std::string(split) == "chain") dst = &corpus.chain;
    for (std::size_t i = 0; i < count; ++i) {
      std::ostringstream id;
      id << split << "_" << std::setw(4) << std::setfill('0') << i;
      std::string text = detail::draw_text(cfg, rng);
      dst->push_back(detail::synthesize_utterance(cfg, protos, id.str(),
                                                  std::move(text),
                                                  spec.feature_dim, rng));
    }
  }
  return corpus;
}

// Feature file: u64 frame count, u64 dim, then row-major doubles, all
// little-endian.
inline void write_features(const Tensor& features,
                           const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write feature file: " + path.string());
  detail::write_u64(os, features.rows());
  detail::write_u64(os, features.cols());
  for (double v : features.data) detail::write_f64(os, v);
  if (!os) throw DataError("short write: " + path.string());
}

inline Tensor read_features(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("missing feature file: " + path.string());
  const std::uint64_t rows = detail::read_u64(is);
  const std::uint64_t cols = detail::read_u64(is);
  if (!is || rows == 0 || cols == 0)
    throw DataError("malformed feature file: " + path.string());
  Tensor t({rows, cols});
  for (double& v : t.data) v = detail::read_f64(is);
  if (!is) throw DataError("truncated feature file: " + path.string());
  return t;
}

// Manifest line format: id <TAB> text <TAB> feature path (relative to the
// manifest's directory).
inline void write_split(const std::vector<Utterance>& utts,
                        const std::filesystem::path& manifest_path) {
  const auto dir = manifest_path.parent_path();
  std::filesystem::create_directories(dir / "features");
  std::ofstream os(manifest_path, std::ios::trunc);
  if (!os) throw DataError("cannot write manifest: " + manifest_path.string());
  for (const Utterance& u : utts) {
    const std::string rel = "features/" + u.id + ".feat";
    write_features(u.features, dir / rel);
    os << u.id << '\t' << u.text << '\t' << rel << '\n';
  }
}

inline std::vector<Utterance> load_manifest(
    const std::filesystem::path& manifest_path, const Vocab& vocab) {
  std::ifstream is(manifest_path);
  if (!is) throw DataError("missing manifest: " + manifest_path.string());
  const auto dir = manifest_path.parent_path();
  std::vector<Utterance> utts;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = line.rfind('\t');
    if (t1 == std::string::npos || t2 == t1)
      throw DataError("malformed manifest line " + std::to_string(lineno) +
                      " in " + manifest_path.string());
    Utterance u;
    u.id = line.substr(0, t1);
    u.text = line.substr(t1 + 1, t2 - t1 - 1);
    if (u.text.empty())
      throw DataError("utterance '" + u.id + "' has empty text");
    try {
      (void)vocab.encode(u.text);
    } catch (const ConfigError& e) {
      throw DataError("utterance '" + u.id + "': " + e.what());
    }
    const std::string rel = line.substr(t2 + 1);
    try {
      u.features = read_features(dir / rel);
    } catch (const DataError& e) {
      throw DataError("utterance '" + u.id + "': " + e.what());
    }
    utts.push_back(std::move(u));
  }
  return utts;
}

// Write all four splits plus an FNV-1a integrity listing.
inline void write_corpus(const Corpus& corpus,
                         const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_split(corpus.train, dir / "train.tsv");
  write_split(corpus.dev, dir / "dev.tsv");
  write_split(corpus.test, dir / "test.tsv");
  write_split(corpus.chain, dir / "chain.tsv");

  std::ofstream sums(dir / "checksums.txt", std::ios::trunc);
  for (const auto* split : {&corpus.train, &corpus.dev, &corpus.test,
                            &corpus.chain}) {
    for (const Utterance& u : *split) {
      const std::string rel = "features/" + u.id + ".feat";
      std::ifstream f(dir / rel, std::ios::binary);
      std::ostringstream buf;
      buf << f.rdbuf();
      sums << std::hex << std::setw(16) << std::setfill('0')
           << detail::fnv1a64(buf.str()) << std::dec << "  " << rel << '\n';
    }
  }
}

inline Corpus load_corpus(const std::filesystem::path& dir, const Vocab& vocab) {
  Corpus c;
  c.train = load_manifest(dir / "train.tsv", vocab);
  c.dev = load_manifest(dir / "dev.tsv", vocab);
  c.test = load_manifest(dir / "test.tsv", vocab);
  if (std::filesystem::exists(dir / "chain.tsv"))
    c.chain = load_manifest(dir / "chain.tsv", vocab);
  return c;
}

}  // namespace speechchain

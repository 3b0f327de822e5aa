#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "speechchain/corpus.hpp"

using namespace speechchain;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* stem) {
  auto p = fs::temp_directory_path() /
           (std::string(stem) + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("vocab layout: specials then characters in order") {
  Vocab v("abc ");
  REQUIRE(v.size() == 7);
  REQUIRE(v.id_of('a') == 3);
  REQUIRE(v.id_of(' ') == 6);
  REQUIRE(v.char_of(4) == 'b');
  REQUIRE(Vocab::is_special(Vocab::kBos));
  REQUIRE(Vocab::is_special(Vocab::kEos));
  REQUIRE(Vocab::is_special(Vocab::kEob));
  REQUIRE_FALSE(Vocab::is_special(3));
  REQUIRE(v.decode(v.encode("ba c")) == "ba c");
  REQUIRE(v.decode({Vocab::kBos, 3, Vocab::kEob, 4, Vocab::kEos}) == "ab");
}

TEST_CASE("vocab rejects duplicates and unknown characters") {
  REQUIRE_THROWS_AS(Vocab("aba"), ConfigError);
  REQUIRE_THROWS_AS(Vocab(""), ConfigError);
  Vocab v("ab");
  try {
    v.encode("abz");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    REQUIRE(msg.find("'z'") != std::string::npos);
    REQUIRE(msg.find("position 2") != std::string::npos);
  }
}

TEST_CASE("block duration formula") {
  FrameSpec spec;  // 50 ms / 12.5 ms
  REQUIRE(block_duration(spec, 8) == 0.1375);
  REQUIRE(block_duration(spec, 1) == 0.050);
  REQUIRE(block_duration(spec, 64) == 0.8375);
  REQUIRE_THROWS_AS(block_duration(spec, 0), ConfigError);
}

TEST_CASE("generated features are prototypes plus noise") {
  CorpusConfig cfg;
  cfg.vocabulary = "ab";
  cfg.frames_per_char = 4;
  cfg.noise_std = 0.0;
  cfg.min_text_len = 2;
  cfg.max_text_len = 2;
  cfg.counts = {8, 1, 1, 0};
  FrameSpec spec;
  spec.feature_dim = 8;

  Corpus c = generate(cfg, spec);
  REQUIRE(c.train.size() == 8);
  for (const Utterance& u : c.train) {
    REQUIRE(u.text.size() == 2);
    REQUIRE(u.features.rows() == 8);  // 2 chars x 4 frames
    REQUIRE(u.features.cols() == 8);
    REQUIRE(u.features.all_finite());
  }

  // Noise-free "aa": the two halves are the same prototype block.
  bool saw_double = false;
  for (const Utterance& u : c.train) {
    if (u.text[0] != u.text[1]) continue;
    saw_double = true;
    const std::size_t half = u.features.numel() / 2;
    for (std::size_t i = 0; i < half; ++i)
      REQUIRE(u.features.data[i] == u.features.data[half + i]);
  }
  REQUIRE(saw_double);  // 8 draws over {aa, ab, ba, bb}: overwhelmingly likely
}

TEST_CASE("generation is a pure function of config") {
  CorpusConfig cfg;
  cfg.counts = {4, 2, 2, 3};
  FrameSpec spec;
  Corpus a = generate(cfg, spec);
  Corpus b = generate(cfg, spec);
  for (auto [sa, sb] : {std::pair{&a.train, &b.train}, {&a.dev, &b.dev},
                        {&a.test, &b.test}, {&a.chain, &b.chain}}) {
    REQUIRE(sa->size() == sb->size());
    for (std::size_t i = 0; i < sa->size(); ++i) {
      REQUIRE((*sa)[i].id == (*sb)[i].id);
      REQUIRE((*sa)[i].text == (*sb)[i].text);
      REQUIRE(bit_equal((*sa)[i].features, (*sb)[i].features));
    }
  }

  CorpusConfig cfg2 = cfg;
  cfg2.seed = cfg.seed + 1;
  Corpus c = generate(cfg2, spec);
  bool differ = false;
  for (std::size_t i = 0; i < a.train.size() && !differ; ++i)
    differ = a.train[i].text != c.train[i].text ||
             !bit_equal(a.train[i].features, c.train[i].features);
  REQUIRE(differ);
}

TEST_CASE("text lengths respect the configured range") {
  CorpusConfig cfg;
  cfg.min_text_len = 5;
  cfg.max_text_len = 40;
  cfg.counts = {60, 1, 1, 0};
  Corpus c = generate(cfg, FrameSpec{});
  std::size_t lo = 1000, hi = 0;
  for (const Utterance& u : c.train) {
    REQUIRE(u.text.size() >= 5);
    REQUIRE(u.text.size() <= 40);
    REQUIRE(u.text.front() != ' ');
    REQUIRE(u.text.back() != ' ');
    REQUIRE(u.text.find("  ") == std::string::npos);
    lo = std::min(lo, u.text.size());
    hi = std::max(hi, u.text.size());
  }
  REQUIRE(lo < 15);  // spread across the range
  REQUIRE(hi > 30);
}

TEST_CASE("manifest round trip preserves utterances and reserializes identically") {
  const fs::path dir = temp_dir("corpus_rt");
  CorpusConfig cfg;
  cfg.counts = {5, 2, 2, 3};
  Corpus c = generate(cfg, FrameSpec{});
  write_corpus(c, dir);

  Vocab vocab(cfg.vocabulary);
  Corpus back = load_corpus(dir, vocab);
  REQUIRE(back.train.size() == 5);
  REQUIRE(back.chain.size() == 3);
  for (std::size_t i = 0; i < c.train.size(); ++i) {
    REQUIRE(back.train[i].id == c.train[i].id);
    REQUIRE(back.train[i].text == c.train[i].text);
    REQUIRE(bit_equal(back.train[i].features, c.train[i].features));
  }

  // Re-serialize the loaded corpus: manifests must be byte-identical.
  const fs::path dir2 = temp_dir("corpus_rt2");
  write_corpus(back, dir2);
  for (const char* name : {"train.tsv", "dev.tsv", "test.tsv", "chain.tsv"}) {
    std::ifstream f1(dir / name), f2(dir2 / name);
    std::string s1((std::istreambuf_iterator<char>(f1)), {});
    std::string s2((std::istreambuf_iterator<char>(f2)), {});
    REQUIRE(s1 == s2);
  }
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("manifest errors name the utterance") {
  const fs::path dir = temp_dir("corpus_err");
  CorpusConfig cfg;
  cfg.counts = {2, 1, 1, 0};
  Corpus c = generate(cfg, FrameSpec{});
  write_corpus(c, dir);

  // Remove one feature file: the load must name the orphaned id.
  fs::remove(dir / "features" / (c.train[1].id + ".feat"));
  Vocab vocab(cfg.vocabulary);
  try {
    load_manifest(dir / "train.tsv", vocab);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    REQUIRE(std::string(e.what()).find(c.train[1].id) != std::string::npos);
  }

  // Text containing a character outside the vocabulary: id and position.
  {
    std::ofstream os(dir / "bad.tsv");
    os << "bad_000\taZb\tfeatures/" << c.train[0].id << ".feat\n";
  }
  try {
    load_manifest(dir / "bad.tsv", vocab);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    REQUIRE(msg.find("bad_000") != std::string::npos);
    REQUIRE(msg.find("'Z'") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("config validation rejects bad settings") {
  CorpusConfig cfg;
  cfg.vocabulary = "";
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  cfg = CorpusConfig{};
  cfg.noise_std = -1;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  cfg = CorpusConfig{};
  cfg.min_text_len = 10;
  cfg.max_text_len = 5;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  cfg = CorpusConfig{};
  cfg.counts.train = 0;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  FrameSpec spec;
  spec.frame_shift_ms = 100.0;
  REQUIRE_THROWS_AS(spec.validate(), ConfigError);
}

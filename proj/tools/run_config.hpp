#pragma once

// Run configuration: one JSON document per experiment, strict about unknown
// keys so typos fail loudly instead of silently falling back to defaults.
// The effective (post-default) form is written next to every command's
// outputs and reloading it reproduces the run byte for byte.

#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>

#include "json.hpp"
#include "speechchain/corpus.hpp"
#include "speechchain/recognizer.hpp"
#include "speechchain/stream.hpp"
#include "speechchain/synthesizer.hpp"

namespace speechchain {

// Training settings shared by all stages; stage/mode/intermediate selection
// stays on the command line so one config can drive a whole experiment.
struct TrainSettings {
  std::size_t epochs = 10;
  std::size_t batch_size = 4;
  double learning_rate = 1e-3;
  std::size_t patience = 10;
  double divergence_factor = 100.0;
  bool supervised_interleave = false;
  std::size_t teacher_epochs = 10;
  // Checkpoint paths; empty entries resolve to <out_dir>/checkpoints/<name>.
  std::string teacher_checkpoint;
  std::string stage1_recognizer;
  std::string stage1_synthesizer;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "run";
  CorpusConfig corpus;
  FrameSpec frames;
  StreamConfig stream;            // carries the block geometry
  RecognizerConfig recognizer;    // feature_dim/vocab_size filled from context
  SynthesizerConfig synthesizer;  // likewise
  TrainSettings train;

  std::string corpus_dir() const { return out_dir + "/corpus"; }
  std::string checkpoint_dir() const { return out_dir + "/checkpoints"; }
  std::string records_dir() const { return out_dir + "/records"; }
  std::string state_dir() const { return out_dir + "/state"; }
  std::string stage2_checkpoint() const {
    return checkpoint_dir() + "/stage2_chain.ckpt";
  }

  void validate() const {
    auto scoped = [](const char* section, auto&& fn) {
      try {
        fn();
      } catch (const ConfigError& e) {
        throw ConfigError(std::string(section) + ": " + e.what());
      }
    };
    scoped("corpus", [&] { corpus.validate(); });
    scoped("frames", [&] { frames.validate(); });
    scoped("blocks", [&] { stream.blocks.validate(); });
    if (recognizer.enc_hidden < 1 || recognizer.dec_hidden < 1 ||
        recognizer.embed_dim < 1 || recognizer.attn_dim < 1 ||
        recognizer.enc_layers < 1)
      throw ConfigError("recognizer: dimensions must be positive");
    if ((std::size_t{1} << recognizer.enc_layers) !=
        stream.blocks.frames_per_block)
      throw ConfigError(
          "recognizer.enc_layers: encoder subsampling 2^enc_layers must equal "
          "blocks.frames_per_block so one block maps to one encoder step");
    if (synthesizer.embed_dim < 1 || synthesizer.enc_hidden < 1 ||
        synthesizer.dec_hidden < 1 || synthesizer.prenet_dim < 1 ||
        synthesizer.attn_dim < 1 || synthesizer.frames_per_step < 1)
      throw ConfigError("synthesizer: dimensions must be positive");
    if (train.batch_size < 1)
      throw ConfigError("train.batch_size must be >= 1");
    if (train.learning_rate <= 0)
      throw ConfigError("train.learning_rate must be positive");
    if (train.divergence_factor <= 1.0)
      throw ConfigError("train.divergence_factor must exceed 1");
    if (train.patience < 1) throw ConfigError("train.patience must be >= 1");
  }
};

namespace cfgdetail {

using json = nlohmann::json;

inline void check_keys(const json& j, const std::string& path,
                       std::initializer_list<const char*> keys) {
  if (!j.is_object())
    throw ConfigError("config section " + path + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : keys)
      if (it.key() == k) {
        known = true;
        break;
      }
    if (!known)
      throw ConfigError("unknown config key " + path + "." + it.key());
  }
}

inline void read_size(const json& j, const std::string& path, const char* key,
                      std::size_t& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_number_unsigned())
    throw ConfigError("config field " + path + "." + key +
                      " must be a nonnegative integer");
  out = v.get<std::size_t>();
}

inline void read_u64(const json& j, const std::string& path, const char* key,
                     std::uint64_t& out) {
  std::size_t v = static_cast<std::size_t>(out);
  read_size(j, path, key, v);
  out = v;
}

inline void read_double(const json& j, const std::string& path,
                        const char* key, double& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_number())
    throw ConfigError("config field " + path + "." + key +
                      " must be a number");
  out = v.get<double>();
}

inline void read_bool(const json& j, const std::string& path, const char* key,
                      bool& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_boolean())
    throw ConfigError("config field " + path + "." + key +
                      " must be a boolean");
  out = v.get<bool>();
}

inline void read_string(const json& j, const std::string& path,
                        const char* key, std::string& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_string())
    throw ConfigError("config field " + path + "." + key +
                      " must be a string");
  out = v.get<std::string>();
}

}  // namespace cfgdetail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  using namespace cfgdetail;
  RunConfig cfg;
  check_keys(j, "config",
             {"seed", "out_dir", "corpus", "frames", "blocks", "stream",
              "recognizer", "synthesizer", "train"});
  read_u64(j, "config", "seed", cfg.seed);
  read_string(j, "config", "out_dir", cfg.out_dir);

  if (j.contains("corpus")) {
    const auto& c = j.at("corpus");
    check_keys(c, "corpus",
               {"vocabulary", "frames_per_char", "noise_std", "min_text_len",
                "max_text_len", "counts", "seed"});
    read_string(c, "corpus", "vocabulary", cfg.corpus.vocabulary);
    read_size(c, "corpus", "frames_per_char", cfg.corpus.frames_per_char);
    read_double(c, "corpus", "noise_std", cfg.corpus.noise_std);
    read_size(c, "corpus", "min_text_len", cfg.corpus.min_text_len);
    read_size(c, "corpus", "max_text_len", cfg.corpus.max_text_len);
    read_u64(c, "corpus", "seed", cfg.corpus.seed);
    if (c.contains("counts")) {
      const auto& n = c.at("counts");
      check_keys(n, "corpus.counts", {"train", "dev", "test", "chain"});
      read_size(n, "corpus.counts", "train", cfg.corpus.counts.train);
      read_size(n, "corpus.counts", "dev", cfg.corpus.counts.dev);
      read_size(n, "corpus.counts", "test", cfg.corpus.counts.test);
      read_size(n, "corpus.counts", "chain", cfg.corpus.counts.chain);
    }
  }

  if (j.contains("frames")) {
    const auto& f = j.at("frames");
    check_keys(f, "frames",
               {"frame_length_ms", "frame_shift_ms", "feature_dim"});
    read_double(f, "frames", "frame_length_ms", cfg.frames.frame_length_ms);
    read_double(f, "frames", "frame_shift_ms", cfg.frames.frame_shift_ms);
    read_size(f, "frames", "feature_dim", cfg.frames.feature_dim);
  }

  if (j.contains("blocks")) {
    const auto& b = j.at("blocks");
    check_keys(b, "blocks",
               {"frames_per_block", "main_blocks", "look_back_blocks",
                "look_ahead_blocks", "chars_per_block"});
    BlockConfig& bl = cfg.stream.blocks;
    read_size(b, "blocks", "frames_per_block", bl.frames_per_block);
    read_size(b, "blocks", "main_blocks", bl.main_blocks);
    read_size(b, "blocks", "look_back_blocks", bl.look_back_blocks);
    read_size(b, "blocks", "look_ahead_blocks", bl.look_ahead_blocks);
    read_size(b, "blocks", "chars_per_block", bl.chars_per_block);
  }

  if (j.contains("stream")) {
    const auto& s = j.at("stream");
    check_keys(s, "stream",
               {"itts_main_char_blocks", "max_tokens_per_step",
                "max_synth_steps"});
    read_size(s, "stream", "itts_main_char_blocks",
              cfg.stream.itts_main_char_blocks);
    read_size(s, "stream", "max_tokens_per_step",
              cfg.stream.max_tokens_per_step);
    read_size(s, "stream", "max_synth_steps", cfg.stream.max_synth_steps);
  }

  if (j.contains("recognizer")) {
    const auto& r = j.at("recognizer");
    check_keys(r, "recognizer",
               {"enc_hidden", "enc_layers", "dec_hidden", "embed_dim",
                "attn_dim", "attention_history"});
    read_size(r, "recognizer", "enc_hidden", cfg.recognizer.enc_hidden);
    read_size(r, "recognizer", "enc_layers", cfg.recognizer.enc_layers);
    read_size(r, "recognizer", "dec_hidden", cfg.recognizer.dec_hidden);
    read_size(r, "recognizer", "embed_dim", cfg.recognizer.embed_dim);
    read_size(r, "recognizer", "attn_dim", cfg.recognizer.attn_dim);
    read_bool(r, "recognizer", "attention_history",
              cfg.recognizer.attention_history);
  }

  if (j.contains("synthesizer")) {
    const auto& t = j.at("synthesizer");
    check_keys(t, "synthesizer",
               {"embed_dim", "enc_hidden", "dec_hidden", "prenet_dim",
                "attn_dim", "frames_per_step", "speaker_dim"});
    read_size(t, "synthesizer", "embed_dim", cfg.synthesizer.embed_dim);
    read_size(t, "synthesizer", "enc_hidden", cfg.synthesizer.enc_hidden);
    read_size(t, "synthesizer", "dec_hidden", cfg.synthesizer.dec_hidden);
    read_size(t, "synthesizer", "prenet_dim", cfg.synthesizer.prenet_dim);
    read_size(t, "synthesizer", "attn_dim", cfg.synthesizer.attn_dim);
    read_size(t, "synthesizer", "frames_per_step",
              cfg.synthesizer.frames_per_step);
    read_size(t, "synthesizer", "speaker_dim", cfg.synthesizer.speaker_dim);
  }

  if (j.contains("train")) {
    const auto& t = j.at("train");
    check_keys(t, "train",
               {"epochs", "batch_size", "learning_rate", "patience",
                "divergence_factor", "supervised_interleave", "teacher_epochs",
                "teacher_checkpoint", "stage1_recognizer",
                "stage1_synthesizer"});
    read_size(t, "train", "epochs", cfg.train.epochs);
    read_size(t, "train", "batch_size", cfg.train.batch_size);
    read_double(t, "train", "learning_rate", cfg.train.learning_rate);
    read_size(t, "train", "patience", cfg.train.patience);
    read_double(t, "train", "divergence_factor", cfg.train.divergence_factor);
    read_bool(t, "train", "supervised_interleave",
              cfg.train.supervised_interleave);
    read_size(t, "train", "teacher_epochs", cfg.train.teacher_epochs);
    read_string(t, "train", "teacher_checkpoint",
                cfg.train.teacher_checkpoint);
    read_string(t, "train", "stage1_recognizer", cfg.train.stage1_recognizer);
    read_string(t, "train", "stage1_synthesizer",
                cfg.train.stage1_synthesizer);
  }

  // Resolve defaulted checkpoint paths so the effective config is explicit.
  auto resolve = [&](std::string& s, const char* name) {
    if (s.empty()) s = cfg.checkpoint_dir() + "/" + name;
  };
  resolve(cfg.train.teacher_checkpoint, "teacher_asr.ckpt");
  resolve(cfg.train.stage1_recognizer, "stage1_recognizer.ckpt");
  resolve(cfg.train.stage1_synthesizer, "stage1_synthesizer.ckpt");
  return cfg;
}

inline nlohmann::ordered_json run_config_to_json(const RunConfig& cfg) {
  nlohmann::ordered_json j;
  j["seed"] = cfg.seed;
  j["out_dir"] = cfg.out_dir;
  j["corpus"] = {{"vocabulary", cfg.corpus.vocabulary},
                 {"frames_per_char", cfg.corpus.frames_per_char},
                 {"noise_std", cfg.corpus.noise_std},
                 {"min_text_len", cfg.corpus.min_text_len},
                 {"max_text_len", cfg.corpus.max_text_len},
                 {"counts",
                  {{"train", cfg.corpus.counts.train},
                   {"dev", cfg.corpus.counts.dev},
                   {"test", cfg.corpus.counts.test},
                   {"chain", cfg.corpus.counts.chain}}},
                 {"seed", cfg.corpus.seed}};
  j["frames"] = {{"frame_length_ms", cfg.frames.frame_length_ms},
                 {"frame_shift_ms", cfg.frames.frame_shift_ms},
                 {"feature_dim", cfg.frames.feature_dim}};
  const BlockConfig& bl = cfg.stream.blocks;
  j["blocks"] = {{"frames_per_block", bl.frames_per_block},
                 {"main_blocks", bl.main_blocks},
                 {"look_back_blocks", bl.look_back_blocks},
                 {"look_ahead_blocks", bl.look_ahead_blocks},
                 {"chars_per_block", bl.chars_per_block}};
  j["stream"] = {{"itts_main_char_blocks", cfg.stream.itts_main_char_blocks},
                 {"max_tokens_per_step", cfg.stream.max_tokens_per_step},
                 {"max_synth_steps", cfg.stream.max_synth_steps}};
  j["recognizer"] = {{"enc_hidden", cfg.recognizer.enc_hidden},
                     {"enc_layers", cfg.recognizer.enc_layers},
                     {"dec_hidden", cfg.recognizer.dec_hidden},
                     {"embed_dim", cfg.recognizer.embed_dim},
                     {"attn_dim", cfg.recognizer.attn_dim},
                     {"attention_history", cfg.recognizer.attention_history}};
  j["synthesizer"] = {{"embed_dim", cfg.synthesizer.embed_dim},
                      {"enc_hidden", cfg.synthesizer.enc_hidden},
                      {"dec_hidden", cfg.synthesizer.dec_hidden},
                      {"prenet_dim", cfg.synthesizer.prenet_dim},
                      {"attn_dim", cfg.synthesizer.attn_dim},
                      {"frames_per_step", cfg.synthesizer.frames_per_step},
                      {"speaker_dim", cfg.synthesizer.speaker_dim}};
  j["train"] = {{"epochs", cfg.train.epochs},
                {"batch_size", cfg.train.batch_size},
                {"learning_rate", cfg.train.learning_rate},
                {"patience", cfg.train.patience},
                {"divergence_factor", cfg.train.divergence_factor},
                {"supervised_interleave", cfg.train.supervised_interleave},
                {"teacher_epochs", cfg.train.teacher_epochs},
                {"teacher_checkpoint", cfg.train.teacher_checkpoint},
                {"stage1_recognizer", cfg.train.stage1_recognizer},
                {"stage1_synthesizer", cfg.train.stage1_synthesizer}};
  return j;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::ostringstream text;
  text << in.rdbuf();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " +
                      e.what());
  }
  RunConfig cfg = run_config_from_json(j);
  cfg.validate();
  return cfg;
}

inline void save_run_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write config file " + path);
  out << run_config_to_json(cfg).dump(2) << '\n';
}

}  // namespace speechchain

// Command-line workbench: corpus generation, two-stage training, evaluation,
// alignment export, streaming demos, and the summary report. Every command is
// a pure function of (config, seed, files on disk); re-running a command with
// the same inputs rewrites byte-identical outputs.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "run_config.hpp"
#include "speechchain/trainer.hpp"

namespace fs = std::filesystem;
using namespace speechchain;

namespace {

// Model construction: dimensions come from the config, vocabulary size from
// the corpus alphabet, and initial weights from the run seed plus a fixed
// per-component salt so the three models never share an init stream.
Recognizer build_recognizer(const RunConfig& cfg, const Vocab& vocab,
                            std::uint64_t salt) {
  RecognizerConfig rc = cfg.recognizer;
  rc.feature_dim = cfg.frames.feature_dim;
  rc.vocab_size = vocab.size();
  Rng rng(cfg.seed * 1000003 + salt);
  return Recognizer(rc, rng);
}

Synthesizer build_synthesizer(const RunConfig& cfg, const Vocab& vocab,
                              std::uint64_t salt) {
  SynthesizerConfig sc = cfg.synthesizer;
  sc.feature_dim = cfg.frames.feature_dim;
  sc.vocab_size = vocab.size();
  Rng rng(cfg.seed * 1000003 + salt);
  return Synthesizer(sc, rng);
}

constexpr std::uint64_t kTeacherSalt = 1;
constexpr std::uint64_t kRecognizerSalt = 2;
constexpr std::uint64_t kSynthesizerSalt = 3;

void ensure_run_dirs(const RunConfig& cfg) {
  fs::create_directories(cfg.checkpoint_dir());
  fs::create_directories(cfg.records_dir());
  fs::create_directories(cfg.state_dir());
  save_run_config(cfg, cfg.out_dir + "/effective_config.json");
}

void require_checkpoint(const std::string& path, const std::string& what) {
  if (!fs::exists(path))
    throw ConfigError(what + " at " + path +
                      "; train the producing stage first or point the config "
                      "at an existing file");
}

// Newest per-epoch state file in a directory, or "" when none exists.
std::string latest_state(const fs::path& dir) {
  std::size_t best = 0;
  std::string found;
  if (!fs::exists(dir)) return found;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("epoch_", 0) != 0 || entry.path().extension() != ".ckpt")
      continue;
    const std::size_t n = std::stoul(name.substr(6));
    if (n >= best) {
      best = n;
      found = entry.path().string();
    }
  }
  return found;
}

// The stage-2 artifact holds both loop components in one file, prefixed the
// same way as the trainer's resume state.
void save_chain_checkpoint(const std::string& path, const ParamSet& isr,
                           const ParamSet& itts, std::uint64_t seed,
                           std::uint64_t step) {
  Checkpoint ck;
  ck.seed = seed;
  ck.step = step;
  for (const Parameter& p : isr) ck.add("isr/" + p.name, p.value);
  for (const Parameter& p : itts) ck.add("itts/" + p.name, p.value);
  save_checkpoint(ck, path);
}

void load_chain_checkpoint(const std::string& path, ParamSet& isr,
                           ParamSet& itts) {
  apply_trainer_state(load_checkpoint(path), isr, itts, nullptr, nullptr,
                      nullptr);
}

void write_lines(const std::string& path,
                 const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  for (const std::string& l : lines) out << l << '\n';
}

TrainConfig trainer_config(const RunConfig& cfg, TrainStage stage,
                           TrainMode mode, IntermediateMode intermediate) {
  TrainConfig tc;
  tc.stage = stage;
  tc.mode = mode;
  tc.intermediate = intermediate;
  tc.epochs = cfg.train.epochs;
  tc.batch_size = cfg.train.batch_size;
  tc.learning_rate = cfg.train.learning_rate;
  tc.seed = cfg.seed;
  tc.patience = cfg.train.patience;
  tc.divergence_factor = cfg.train.divergence_factor;
  tc.supervised_interleave = cfg.train.supervised_interleave;
  tc.stream = cfg.stream;
  return tc;
}

int cmd_generate(const std::string& config_path, bool force) {
  const RunConfig cfg = load_run_config(config_path);
  const fs::path dir = cfg.corpus_dir();
  if (fs::exists(dir) && !fs::is_empty(dir) && !force)
    throw ConfigError("corpus directory " + dir.string() +
                      " is not empty; pass --force to regenerate");
  fs::create_directories(dir);
  const Corpus corpus = generate(cfg.corpus, cfg.frames);
  write_corpus(corpus, dir);
  ensure_run_dirs(cfg);
  std::cout << "corpus written to " << dir.string() << "\n"
            << "splits: train=" << corpus.train.size()
            << " dev=" << corpus.dev.size() << " test=" << corpus.test.size()
            << " chain=" << corpus.chain.size() << "\n"
            << "checksums: " << (dir / "checksums.txt").string() << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, int stage,
              const std::string& mode_s, const std::string& intermediate_s,
              bool resume) {
  const RunConfig cfg = load_run_config(config_path);
  const TrainMode mode = parse_train_mode(mode_s);
  const IntermediateMode intermediate = parse_intermediate_mode(intermediate_s);
  ensure_run_dirs(cfg);
  const Vocab vocab(cfg.corpus.vocabulary);
  const Corpus corpus = load_corpus(cfg.corpus_dir(), vocab);
  const bool incremental = mode == TrainMode::kIncremental;

  TrainConfig tc = trainer_config(
      cfg, stage == 1 ? TrainStage::kOne : TrainStage::kTwo, mode,
      intermediate);

  Recognizer teacher = build_recognizer(cfg, vocab, kTeacherSalt);
  Recognizer* teacher_ptr = nullptr;

  if (stage == 1) {
    if (incremental) {
      if (fs::exists(cfg.train.teacher_checkpoint)) {
        load_params(cfg.train.teacher_checkpoint, teacher.params());
        std::cout << "teacher: loaded " << cfg.train.teacher_checkpoint
                  << "\n";
      } else {
        TrainConfig ttc = tc;
        ttc.mode = TrainMode::kNonincremental;
        ttc.epochs = cfg.train.teacher_epochs;
        const fs::path tstate = fs::path(cfg.state_dir()) / "teacher";
        fs::create_directories(tstate);
        const std::string from = resume ? latest_state(tstate) : "";
        const TrainResult tr =
            train_teacher(corpus, vocab, teacher, ttc, tstate.string(), from);
        save_params(cfg.train.teacher_checkpoint, teacher.params(), cfg.seed,
                    tr.epochs_run);
        write_train_records(cfg.records_dir() + "/teacher_records.tsv",
                            tr.records);
        std::cout << "teacher: trained " << tr.epochs_run << " epochs -> "
                  << cfg.train.teacher_checkpoint << "\n";
      }
      teacher_ptr = &teacher;
    }

    Recognizer rec = build_recognizer(cfg, vocab, kRecognizerSalt);
    Synthesizer synth = build_synthesizer(cfg, vocab, kSynthesizerSalt);
    const fs::path sstate = fs::path(cfg.state_dir()) / "stage1";
    fs::create_directories(sstate);
    const std::string from = resume ? latest_state(sstate) : "";
    const TrainResult r = train_stage1(corpus, vocab, rec, synth, tc,
                                       teacher_ptr, sstate.string(), from);
    save_params(cfg.train.stage1_recognizer, rec.params(), cfg.seed,
                r.epochs_run);
    save_params(cfg.train.stage1_synthesizer, synth.params(), cfg.seed,
                r.epochs_run);
    write_train_records(cfg.records_dir() + "/stage1_records.tsv", r.records);
    std::cout << "stage 1 (" << mode_s << "): " << r.epochs_run
              << " epochs\n"
              << "recognizer checkpoint: " << cfg.train.stage1_recognizer
              << "\n"
              << "synthesizer checkpoint: " << cfg.train.stage1_synthesizer
              << "\n";
    return 0;
  }

  require_checkpoint(cfg.train.stage1_recognizer,
                     "stage-two training needs the stage-one recognizer "
                     "checkpoint");
  require_checkpoint(cfg.train.stage1_synthesizer,
                     "stage-two training needs the stage-one synthesizer "
                     "checkpoint");
  Recognizer isr = build_recognizer(cfg, vocab, kRecognizerSalt);
  Synthesizer itts = build_synthesizer(cfg, vocab, kSynthesizerSalt);
  load_params(cfg.train.stage1_recognizer, isr.params());
  load_params(cfg.train.stage1_synthesizer, itts.params());
  if (incremental) {
    require_checkpoint(cfg.train.teacher_checkpoint,
                       "incremental stage-two training needs the teacher "
                       "checkpoint");
    load_params(cfg.train.teacher_checkpoint, teacher.params());
    teacher_ptr = &teacher;
  }

  const fs::path sstate = fs::path(cfg.state_dir()) / "stage2";
  fs::create_directories(sstate);
  const std::string from = resume ? latest_state(sstate) : "";
  const TrainResult r = train_stage2(corpus, vocab, isr, itts, tc, teacher_ptr,
                                     sstate.string(), from);
  save_chain_checkpoint(cfg.stage2_checkpoint(), isr.params(), itts.params(),
                        cfg.seed, r.epochs_run);
  write_train_records(cfg.records_dir() + "/stage2_records.tsv", r.records);
  std::cout << "stage 2 (" << mode_s << ", " << intermediate_s
            << "): " << r.epochs_run << " epochs"
            << (r.early_stopped ? ", early stop" : "") << "\n"
            << "chain checkpoint: " << cfg.stage2_checkpoint() << "\n";
  if (r.diverged) {
    std::cout << "training diverged; parameters rolled back to the last "
                 "clean epoch\n";
    return 3;
  }
  return 0;
}

int cmd_eval(const std::string& config_path, const std::string& system,
             const std::string& mode_s, const std::string& input,
             const std::string& split_name) {
  const RunConfig cfg = load_run_config(config_path);
  const bool incremental = parse_train_mode(mode_s) == TrainMode::kIncremental;
  if (input != "natural" && input != "synthetic")
    throw ConfigError("--input must be natural or synthetic");
  if (system != "stage1" && system != "stage2")
    throw ConfigError("--system must be stage1 or stage2");
  ensure_run_dirs(cfg);
  const Vocab vocab(cfg.corpus.vocabulary);
  const Corpus corpus = load_corpus(cfg.corpus_dir(), vocab);
  const std::vector<Utterance>& split = corpus.split(split_name);

  Recognizer rec = build_recognizer(cfg, vocab, kRecognizerSalt);
  Synthesizer synth = build_synthesizer(cfg, vocab, kSynthesizerSalt);
  if (system == "stage1") {
    require_checkpoint(cfg.train.stage1_recognizer,
                       "evaluation needs the stage-one recognizer checkpoint");
    require_checkpoint(cfg.train.stage1_synthesizer,
                       "evaluation needs the stage-one synthesizer checkpoint");
    load_params(cfg.train.stage1_recognizer, rec.params());
    load_params(cfg.train.stage1_synthesizer, synth.params());
  } else {
    require_checkpoint(cfg.stage2_checkpoint(),
                       "evaluation needs the stage-two chain checkpoint");
    load_chain_checkpoint(cfg.stage2_checkpoint(), rec.params(),
                          synth.params());
  }

  std::map<std::string, SegmentAlignment> align;
  const std::map<std::string, SegmentAlignment>* align_ptr = nullptr;
  Recognizer teacher = build_recognizer(cfg, vocab, kTeacherSalt);
  if (incremental) {
    require_checkpoint(cfg.train.teacher_checkpoint,
                       "incremental evaluation needs the teacher checkpoint");
    load_params(cfg.train.teacher_checkpoint, teacher.params());
    align = compute_alignments(teacher, split, vocab, cfg.stream.blocks);
    align_ptr = &align;
  }

  const SystemMetrics m = evaluate_system(system, rec, synth, split, vocab,
                                          cfg.stream, incremental, align_ptr);

  const std::string regime = incremental ? "incremental" : "nonincremental";
  std::vector<std::string> lines;
  lines.push_back("system\tregime\tinput\tmetric\tvalue");
  auto push = [&](const char* metric, double v) {
    lines.push_back(system + "\t" + regime + "\t" + input + "\t" + metric +
                    "\t" + format_double(v));
  };
  if (input == "natural") {
    push("asr_cer", m.asr_cer_natural);
    push("tts_feature_loss", m.tts_loss_natural);
  } else {
    push("asr_cer", m.asr_cer_synthetic);
    push("tts_feature_loss", m.tts_loss_synthetic);
  }
  if (incremental) {
    const Delays d = compute_delays(cfg.stream.blocks, cfg.frames);
    push("isr_delay_seconds", d.isr_seconds);
    push("itts_delay_characters", d.itts_characters);
  }
  const std::string rec_path = cfg.records_dir() + "/eval_" + system + "_" +
                               regime + "_" + input + ".tsv";
  write_lines(rec_path, lines);
  for (const std::string& l : lines) std::cout << l << "\n";
  std::cout << "written: " << rec_path << "\n";
  return 0;
}

int cmd_align(const std::string& config_path, const std::string& split_name) {
  const RunConfig cfg = load_run_config(config_path);
  ensure_run_dirs(cfg);
  const Vocab vocab(cfg.corpus.vocabulary);
  const Corpus corpus = load_corpus(cfg.corpus_dir(), vocab);
  const std::vector<Utterance>& split = corpus.split(split_name);
  require_checkpoint(cfg.train.teacher_checkpoint,
                     "alignment export needs the teacher checkpoint");
  Recognizer teacher = build_recognizer(cfg, vocab, kTeacherSalt);
  load_params(cfg.train.teacher_checkpoint, teacher.params());

  const auto alignments =
      compute_alignments(teacher, split, vocab, cfg.stream.blocks);
  std::vector<std::string> lines;
  for (const auto& [id, a] : alignments)
    lines.push_back(alignment_to_record(id, a));
  const std::string path =
      cfg.records_dir() + "/alignments_" + split_name + ".tsv";
  write_lines(path, lines);
  std::cout << lines.size() << " alignments written to " << path << "\n";
  return 0;
}

int cmd_stream(const std::string& config_path, const std::string& mode_s,
               const std::string& system, const std::string& split_name,
               std::size_t index) {
  const RunConfig cfg = load_run_config(config_path);
  const StreamMode sm = parse_stream_mode(mode_s);
  if (system != "stage1" && system != "stage2")
    throw ConfigError("--system must be stage1 or stage2");
  const Vocab vocab(cfg.corpus.vocabulary);
  const Corpus corpus = load_corpus(cfg.corpus_dir(), vocab);
  const std::vector<Utterance>& split = corpus.split(split_name);
  if (index >= split.size())
    throw ConfigError("--index " + std::to_string(index) +
                      " is out of range; split '" + split_name + "' has " +
                      std::to_string(split.size()) + " utterances");
  const Utterance& u = split[index];

  Recognizer rec = build_recognizer(cfg, vocab, kRecognizerSalt);
  Synthesizer synth = build_synthesizer(cfg, vocab, kSynthesizerSalt);
  if (system == "stage1") {
    require_checkpoint(cfg.train.stage1_recognizer,
                       "streaming needs the stage-one recognizer checkpoint");
    require_checkpoint(cfg.train.stage1_synthesizer,
                       "streaming needs the stage-one synthesizer checkpoint");
    load_params(cfg.train.stage1_recognizer, rec.params());
    load_params(cfg.train.stage1_synthesizer, synth.params());
  } else {
    require_checkpoint(cfg.stage2_checkpoint(),
                       "streaming needs the stage-two chain checkpoint");
    load_chain_checkpoint(cfg.stage2_checkpoint(), rec.params(),
                          synth.params());
  }

  StreamResult res;
  switch (sm) {
    case StreamMode::kIsr:
      res = run_isr_stream(rec, u.features, cfg.stream, cfg.frames);
      break;
    case StreamMode::kItts:
      res = run_itts_stream(synth, vocab.encode(u.text), cfg.stream);
      break;
    case StreamMode::kIsrToItts:
      res = run_isr_to_itts(rec, synth, u.features, cfg.stream, cfg.frames);
      break;
    case StreamMode::kIttsToIsr:
      res = run_itts_to_isr(synth, rec, vocab.encode(u.text), cfg.stream);
      break;
  }

  // Traces go to stdout only: wall-clock fields are not reproducible, and
  // files under the run directory must stay byte-identical across re-runs.
  for (const StepTrace& t : res.traces)
    std::cout << trace_to_record(u.id, t) << "\n";
  std::cout << "reference: " << u.text << "\n";
  if (sm != StreamMode::kItts)
    std::cout << "hypothesis: " << vocab.decode(res.tokens) << "\n";
  std::cout << "frames out: " << res.frames.rows()
            << (res.any_truncated ? " (some step hit its cap)" : "") << "\n";
  return 0;
}

struct ReportRow {
  std::string metric;
  std::string input;
};

int cmd_report(const std::string& run_dir) {
  std::vector<std::string> missing;
  const fs::path cfg_path = fs::path(run_dir) / "effective_config.json";
  if (!fs::exists(cfg_path)) missing.push_back(cfg_path.string());

  // Collect evaluation records: (metric, input, system) -> value.
  std::map<std::string, std::string> cells;
  std::set<std::string> regimes;
  const fs::path records = fs::path(run_dir) / "records";
  std::vector<fs::path> eval_files;
  if (fs::exists(records))
    for (const auto& entry : fs::directory_iterator(records)) {
      const std::string name = entry.path().filename().string();
      if (name.rfind("eval_", 0) == 0 && entry.path().extension() == ".tsv")
        eval_files.push_back(entry.path());
    }
  std::sort(eval_files.begin(), eval_files.end());
  if (eval_files.empty())
    missing.push_back((records / "eval_*.tsv").string() +
                      " (run the eval command first)");

  for (const fs::path& f : eval_files) {
    std::ifstream in(f);
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      std::istringstream ls(line);
      std::string system, regime, input, metric, value;
      if (!std::getline(ls, system, '\t') ||
          !std::getline(ls, regime, '\t') || !std::getline(ls, input, '\t') ||
          !std::getline(ls, metric, '\t') || !std::getline(ls, value, '\t'))
        continue;
      regimes.insert(regime);
      if (metric == "asr_cer" || metric == "tts_feature_loss")
        cells[metric + "|" + input + "|" + system] = value;
    }
  }

  if (cells.empty()) {
    std::cerr << "report inputs missing:\n";
    for (const std::string& m : missing) std::cerr << "  - " << m << "\n";
    return 2;
  }

  const std::vector<ReportRow> rows = {{"asr_cer", "natural"},
                                       {"asr_cer", "synthetic"},
                                       {"tts_feature_loss", "natural"},
                                       {"tts_feature_loss", "synthetic"}};
  auto cell = [&](const ReportRow& r, const char* system) -> std::string {
    const auto it = cells.find(r.metric + "|" + r.input + "|" + system);
    return it == cells.end() ? "-" : it->second;
  };

  std::vector<std::string> csv;
  csv.push_back("metric,input,stage1,stage2");
  for (const ReportRow& r : rows)
    csv.push_back(r.metric + "," + r.input + "," + cell(r, "stage1") + "," +
                  cell(r, "stage2"));

  std::string delay_isr = "-", delay_itts = "-";
  if (fs::exists(cfg_path)) {
    const RunConfig cfg = load_run_config(cfg_path.string());
    const Delays d = compute_delays(cfg.stream.blocks, cfg.frames);
    delay_isr = format_double(d.isr_seconds);
    delay_itts = format_double(d.itts_characters);
    csv.push_back("isr_delay_seconds,modeled," + delay_isr + "," + delay_isr);
    csv.push_back("itts_delay_characters,modeled," + delay_itts + "," +
                  delay_itts);
  }

  std::ostringstream txt;
  txt << "metric                 input      stage1           stage2\n";
  txt << "---------------------- ---------- ---------------- ----------------\n";
  auto pad = [](std::string s, std::size_t w) {
    s.append(s.size() < w ? w - s.size() : 1, ' ');
    return s;
  };
  for (const ReportRow& r : rows)
    txt << pad(r.metric, 23) << pad(r.input, 11) << pad(cell(r, "stage1"), 17)
        << cell(r, "stage2") << "\n";
  txt << pad("modeled delay", 23) << pad("-", 11)
      << pad(delay_isr + " s", 17) << delay_itts + " chars" << "\n";
  if (!regimes.empty()) {
    txt << "regimes:";
    for (const std::string& r : regimes) txt << " " << r;
    txt << "\n";
  }
  for (const std::string& m : missing) txt << "missing: " << m << "\n";

  fs::create_directories(records);
  write_lines((records / "report.csv").string(), csv);
  std::ofstream rt(records / "report.txt", std::ios::binary);
  rt << txt.str();
  std::cout << txt.str();
  std::cout << "written: " << (records / "report.csv").string() << " and "
            << (records / "report.txt").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "speechchain: an incremental machine speech chain workbench.\n"
      "Recognizer and synthesizer train in a closed loop; all commands are\n"
      "deterministic functions of the config, the seed, and files on disk."};
  app.require_subcommand(1);

  std::string config_path, run_dir;
  std::string mode_s = "incremental";
  std::string intermediate_s = "teacher_forcing";
  std::string system = "stage1";
  std::string input = "natural";
  std::string split = "test";
  std::string stream_mode = "isr_to_itts";
  int stage = 1;
  bool force = false, resume = false;
  std::size_t index = 0;

  CLI::App* g = app.add_subcommand(
      "generate", "synthesize the toy parallel corpus onto disk");
  g->add_option("--config", config_path, "run configuration JSON")->required();
  g->add_flag("--force", force, "overwrite a nonempty corpus directory");

  CLI::App* t =
      app.add_subcommand("train", "run one training stage end to end");
  t->add_option("--config", config_path, "run configuration JSON")->required();
  t->add_option("--stage", stage,
                "1: independent supervised, 2: closed-loop chain")
      ->required()
      ->check(CLI::Range(1, 2));
  t->add_option("--mode", mode_s, "incremental|nonincremental")
      ->capture_default_str();
  t->add_option("--intermediate", intermediate_s,
                "teacher_forcing|greedy hand-off between the loop halves")
      ->capture_default_str();
  t->add_flag("--resume", resume,
              "continue from the newest per-epoch state file");

  CLI::App* e = app.add_subcommand(
      "eval", "evaluate a trained system on one corpus split");
  e->add_option("--config", config_path, "run configuration JSON")->required();
  e->add_option("--system", system, "stage1|stage2")->capture_default_str();
  e->add_option("--mode", mode_s, "incremental|nonincremental")
      ->capture_default_str();
  e->add_option("--input", input, "natural|synthetic")->capture_default_str();
  e->add_option("--split", split, "train|dev|test|chain")
      ->capture_default_str();

  CLI::App* a = app.add_subcommand(
      "align", "export teacher attention alignments for one split");
  a->add_option("--config", config_path, "run configuration JSON")->required();
  a->add_option("--split", split, "train|dev|test|chain")
      ->capture_default_str();

  CLI::App* s = app.add_subcommand(
      "stream",
      "run one utterance through a streaming pipeline, tracing each step");
  s->add_option("--config", config_path, "run configuration JSON")->required();
  s->add_option("--mode", stream_mode, "isr|itts|isr_to_itts|itts_to_isr")
      ->capture_default_str();
  s->add_option("--system", system, "stage1|stage2")->capture_default_str();
  s->add_option("--split", split, "train|dev|test|chain")
      ->capture_default_str();
  s->add_option("--index", index, "utterance index within the split")
      ->capture_default_str();

  CLI::App* r = app.add_subcommand(
      "report", "assemble the four-quadrant metric table and delay row");
  r->add_option("--run", run_dir, "run directory (the config's out_dir)")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (g->parsed()) return cmd_generate(config_path, force);
    if (t->parsed())
      return cmd_train(config_path, stage, mode_s, intermediate_s, resume);
    if (e->parsed())
      return cmd_eval(config_path, system, mode_s, input, split);
    if (a->parsed()) return cmd_align(config_path, split);
    if (s->parsed())
      return cmd_stream(config_path, stream_mode, system, split, index);
    if (r->parsed()) return cmd_report(run_dir);
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return 1;
  } catch (const ShapeError& err) {
    std::cerr << "shape error: " << err.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& err) {
    std::cerr << "invalid input: " << err.what() << "\n";
    return 1;
  } catch (const DataError& err) {
    std::cerr << "data error: " << err.what() << "\n";
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  }
  return 0;
}

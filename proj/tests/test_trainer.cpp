#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "speechchain/trainer.hpp"

using namespace speechchain;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const char* stem, const char* ext) {
  return fs::temp_directory_path() /
         (std::string(stem) + "_" + std::to_string(::getpid()) + ext);
}

CorpusConfig toy_corpus_config() {
  CorpusConfig cfg;
  cfg.vocabulary = "abcd";
  cfg.frames_per_char = 2;
  cfg.noise_std = 0.02;
  cfg.min_text_len = 5;
  cfg.max_text_len = 10;
  cfg.counts = {6, 3, 2, 8};
  cfg.seed = 7;
  return cfg;
}

Recognizer make_recognizer(std::uint64_t seed, std::size_t vocab_size) {
  RecognizerConfig rc;
  rc.feature_dim = 4;
  rc.enc_hidden = 6;
  rc.enc_layers = 2;
  rc.dec_hidden = 8;
  rc.embed_dim = 5;
  rc.attn_dim = 6;
  rc.vocab_size = vocab_size;
  Rng rng(seed);
  return Recognizer(rc, rng);
}

Synthesizer make_synthesizer(std::uint64_t seed, std::size_t vocab_size) {
  SynthesizerConfig sc;
  sc.feature_dim = 4;
  sc.embed_dim = 5;
  sc.enc_hidden = 6;
  sc.dec_hidden = 8;
  sc.prenet_dim = 6;
  sc.attn_dim = 6;
  sc.frames_per_step = 4;
  sc.vocab_size = vocab_size;
  Rng rng(seed);
  return Synthesizer(sc, rng);
}

TrainConfig toy_train_config() {
  TrainConfig cfg;
  cfg.stream.blocks.frames_per_block = 4;
  cfg.stream.blocks.main_blocks = 2;
  cfg.stream.blocks.look_back_blocks = 1;
  cfg.stream.blocks.look_ahead_blocks = 1;
  cfg.stream.blocks.chars_per_block = 3;
  cfg.epochs = 2;
  cfg.batch_size = 3;
  cfg.learning_rate = 5e-3;
  cfg.seed = 11;
  return cfg;
}

Corpus toy_corpus() {
  FrameSpec spec;
  spec.feature_dim = 4;
  return generate(toy_corpus_config(), spec);
}

Vocab toy_vocab() { return Vocab(toy_corpus_config().vocabulary); }

}  // namespace

TEST_CASE("zero training epochs leave the models untouched") {
  Corpus corpus = toy_corpus();
  Vocab vocab = toy_vocab();
  Recognizer rec = make_recognizer(1, vocab.size());
  Synthesizer synth = make_synthesizer(2, vocab.size());
  std::vector<Tensor> rec_before = snapshot_params(rec.params());
  std::vector<Tensor> synth_before = snapshot_params(synth.params());

  TrainConfig cfg = toy_train_config();
  cfg.mode = TrainMode::kNonincremental;
  cfg.epochs = 0;
  TrainResult out = train_stage1(corpus, vocab, rec, synth, cfg);
  REQUIRE(out.records.empty());
  REQUIRE(out.epochs_run == 0);
  std::size_t i = 0;
  for (const Parameter& p : rec.params())
    REQUIRE(bit_equal(p.value, rec_before[i++]));
  i = 0;
  for (const Parameter& p : synth.params())
    REQUIRE(bit_equal(p.value, synth_before[i++]));
}

TEST_CASE("whole-utterance supervised training reduces the loss") {
  Corpus corpus = toy_corpus();
  Vocab vocab = toy_vocab();
  Recognizer rec = make_recognizer(3, vocab.size());
  Synthesizer synth = make_synthesizer(4, vocab.size());

  TrainConfig cfg = toy_train_config();
  cfg.mode = TrainMode::kNonincremental;
  cfg.epochs = 4;
  TrainResult out = train_stage1(corpus, vocab, rec, synth, cfg);
  REQUIRE(out.records.size() == 8);  // one recognizer + one synthesizer line
  REQUIRE(out.epochs_run == 4);

  double first_rec = -1, last_rec = -1, first_synth = -1, last_synth = -1;
  for (const TrainRecord& r : out.records) {
    REQUIRE(std::isfinite(r.loss));
    if (r.component == "asr") {
      if (first_rec < 0) first_rec = r.loss;
      last_rec = r.loss;
      REQUIRE(r.dev_cer >= 0.0);
    } else {
      REQUIRE(r.component == "tts");
      if (first_synth < 0) first_synth = r.loss;
      last_synth = r.loss;
      REQUIRE(r.dev_feature_loss >= 0.0);
    }
  }
  REQUIRE(last_rec < first_rec);
  REQUIRE(last_synth < first_synth);
}

TEST_CASE("windowed supervised training follows the teacher's segmentation") {
  Corpus corpus = toy_corpus();
  Vocab vocab = toy_vocab();
  Recognizer rec = make_recognizer(5, vocab.size());
  Synthesizer synth = make_synthesizer(6, vocab.size());
  Recognizer teacher = make_recognizer(7, vocab.size());

  TrainConfig cfg = toy_train_config();
  cfg.mode = TrainMode::kIncremental;
  REQUIRE_THROWS_AS(train_stage1(corpus, vocab, rec, synth, cfg), ConfigError);

  TrainResult out = train_stage1(corpus, vocab, rec, synth, cfg, &teacher);
  REQUIRE(out.records.size() == 4);
  for (const TrainRecord& r : out.records) {
    REQUIRE((r.component == "isr" || r.component == "itts"));
    REQUIRE(std::isfinite(r.loss));
    REQUIRE(r.avg_main_blocks > 0.0);
    if (r.component == "isr") REQUIRE(r.dev_cer >= 0.0);
    if (r.component == "itts") REQUIRE(r.dev_feature_loss >= 0.0);
  }
}

TEST_CASE("training is deterministic given config and seed") {
  Corpus corpus = toy_corpus();
  Vocab vocab = toy_vocab();
  TrainConfig cfg = toy_train_config();
  cfg.mode = TrainMode::kNonincremental;

  Recognizer rec_a = make_recognizer(8, vocab.size());
  Synthesizer synth_a = make_synthesizer(9, vocab.size());
  TrainResult a = train_stage1(corpus, vocab, rec_a, synth_a, cfg);

  Recognizer rec_b = make_recognizer(8, vocab.size());
  Synthesizer synth_b = make_synthesizer(9, vocab.size());
  TrainResult b = train_stage1(corpus, vocab, rec_b, synth_b, cfg);

  REQUIRE(bit_equal(rec_a.params(), rec_b.params()));
  REQUIRE(bit_equal(synth_a.params(), synth_b.params()));
  REQUIRE(a.records.size() == b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i)
    REQUIRE(record_to_line(a.records[i]) == record_to_line(b.records[i]));
}

TEST_CASE("closed-loop training alternates and tracks its best dev metrics") {
  Corpus corpus = toy_corpus();
  Vocab vocab = toy_vocab();
  Recognizer isr = make_recognizer(10, vocab.size());
  Synthesizer itts = make_synthesizer(11, vocab.size());

  TrainConfig cfg = toy_train_config();
  cfg.mode = TrainMode::kNonincremental;
  cfg.intermediate = IntermediateMode::kTeacherForcing;
  cfg.epochs = 5;
  cfg.patience = 2;

  // The run starts from these dev metrics; improvement is measured against
  // the best value seen so far, starting here.
  double best_cer =
      eval_recognizer_cer(isr, corpus.dev, vocab, cfg.stream, false);
  double best_feat =
      eval_synthesizer_loss(itts, corpus.dev, vocab, nullptr,
                            cfg.stream.blocks);

  TrainResult out = train_stage2(corpus, vocab, isr, itts, cfg);
  REQUIRE_FALSE(out.diverged);
  REQUIRE(out.records.size() == 2 * out.epochs_run);

  // Replay the early-stopping bookkeeping from the records.
  std::size_t since = 0, expected_epochs = cfg.epochs;
  bool expected_stop = false;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const TrainRecord& ir = out.records.at(2 * e);
    const TrainRecord& tr = out.records.at(2 * e + 1);
    REQUIRE(ir.component == "asr");
    REQUIRE(tr.component == "tts");
    bool improved = false;
    if (ir.dev_cer < best_cer) {
      best_cer = ir.dev_cer;
      improved = true;
    }
    if (tr.dev_feature_loss < best_feat) {
      best_feat = tr.dev_feature_loss;
      improved = true;
    }
    since = improved ? 0 : since + 1;
    if (since >= cfg.patience) {
      expected_epochs = e + 1;
      expected_stop = true;
      break;
    }
  }
  REQUIRE(out.epochs_run == expected_epochs);
  REQUIRE(out.early_stopped == expected_stop);

  // The handed-back parameters are the best-dev snapshots.
  double final_cer =
      eval_recognizer_cer(isr, corpus.dev, vocab, cfg.stream, false);
  double final_feat = eval_synthesizer_loss(itts, corpus.dev, vocab, nullptr,
                                            cfg.stream.blocks);
  REQUIRE(final_cer == best_cer);
  REQUIRE(final_feat == best_feat);
}

TEST_CASE("greedy closed-loop training runs on disjoint unlabeled views") {
  Corpus corpus = toy_corpus();
  Vocab vocab = toy_vocab();
  Recognizer isr = make_recognizer(12, vocab.size());
  Synthesizer itts = make_synthesizer(13, vocab.size());
  Recognizer teacher = make_recognizer(14, vocab.size());

  TrainConfig cfg = toy_train_config();
  cfg.mode = TrainMode::kIncremental;
  cfg.intermediate = IntermediateMode::kGreedy;
  cfg.epochs = 1;

  REQUIRE_THROWS_AS(train_stage2(corpus, vocab, isr, itts, cfg), ConfigError);
  TrainResult out = train_stage2(corpus, vocab, isr, itts, cfg, &teacher);
  REQUIRE(out.epochs_run >= 1);
  for (const TrainRecord& r : out.records) REQUIRE(std::isfinite(r.loss));
}

TEST_CASE("a diverging loop aborts and keeps the last good parameters") {
  Corpus corpus = toy_corpus();
  Vocab vocab = toy_vocab();
  Recognizer isr = make_recognizer(15, vocab.size());
  Synthesizer itts = make_synthesizer(16, vocab.size());

  TrainConfig cfg = toy_train_config();
  cfg.mode = TrainMode::kNonincremental;
  cfg.intermediate = IntermediateMode::kTeacherForcing;
  cfg.epochs = 6;
  cfg.learning_rate = 50.0;  // guaranteed blow-up

  TrainResult out = train_stage2(corpus, vocab, isr, itts, cfg);
  REQUIRE(out.diverged);
  REQUIRE(out.epochs_run < cfg.epochs);
  for (const Parameter& p : isr.params())
    for (double v : p.value.data) REQUIRE(std::isfinite(v));
  for (const Parameter& p : itts.params())
    for (double v : p.value.data) REQUIRE(std::isfinite(v));
}

TEST_CASE("trainer state round-trips bit-exactly") {
  Corpus corpus = toy_corpus();
  Vocab vocab = toy_vocab();
  Recognizer isr = make_recognizer(17, vocab.size());
  Synthesizer itts = make_synthesizer(18, vocab.size());

  TrainConfig cfg = toy_train_config();
  cfg.mode = TrainMode::kNonincremental;
  cfg.epochs = 1;
  train_stage1(corpus, vocab, isr, itts, cfg);

  AdamConfig ac;
  ac.lr = cfg.learning_rate;
  Adam adam_isr(ac), adam_itts(ac);
  adam_isr.step(isr.params());
  adam_isr.step(isr.params());
  adam_itts.step(itts.params());
  Rng rng(404);
  rng.normal();  // advance away from the seed state

  const fs::path path = temp_path("trainer_state", ".ckpt");
  save_trainer_state(path.string(), isr.params(), itts.params(), adam_isr,
                     adam_itts, rng, 3, cfg.seed);

  Recognizer isr2 = make_recognizer(99, vocab.size());
  Synthesizer itts2 = make_synthesizer(98, vocab.size());
  Adam adam_isr2(ac), adam_itts2(ac);
  Rng rng2(1);
  std::uint64_t epoch = 0, seed = 0;
  load_trainer_state(path.string(), isr2.params(), itts2.params(), &adam_isr2,
                     &adam_itts2, &rng2, &epoch, &seed);
  fs::remove(path);

  REQUIRE(bit_equal(isr.params(), isr2.params()));
  REQUIRE(bit_equal(itts.params(), itts2.params()));
  REQUIRE(adam_isr2.step_count() == 2);
  REQUIRE(adam_itts2.step_count() == 1);
  REQUIRE(rng2.state() == rng.state());
  REQUIRE(epoch == 3);
  REQUIRE(seed == cfg.seed);

  // Restored optimizer moments continue identically.
  for (Parameter& p : isr.params())
    for (double& g : p.grad.data) g = 0.25;
  for (Parameter& p : isr2.params())
    for (double& g : p.grad.data) g = 0.25;
  adam_isr.step(isr.params());
  adam_isr2.step(isr2.params());
  REQUIRE(bit_equal(isr.params(), isr2.params()));
}

TEST_CASE("train records and metric summaries are written as tables") {
  std::vector<TrainRecord> records(2);
  records[0].epoch = 1;
  records[0].component = "isr";
  records[0].loss = 1.5;
  records[0].dev_cer = 31.25;
  records[1].epoch = 1;
  records[1].component = "itts";
  records[1].loss = 0.75;
  records[1].dev_feature_loss = 0.125;
  records[1].avg_main_blocks = 2.5;
  records[1].degenerate_steps = 3;

  const fs::path rec_path = temp_path("train_records", ".tsv");
  write_train_records(rec_path.string(), records);
  std::ifstream in(rec_path);
  std::string header, l1, l2, extra;
  REQUIRE(std::getline(in, header));
  REQUIRE(std::getline(in, l1));
  REQUIRE(std::getline(in, l2));
  REQUIRE_FALSE(std::getline(in, extra));
  in.close();
  fs::remove(rec_path);
  REQUIRE(header ==
          "epoch\tcomponent\tloss\tdev_cer\tdev_feature_loss\tavg_main_blocks"
          "\tdegenerate_steps");
  REQUIRE(l1 == "1\tisr\t1.5\t31.25\t0\t0\t0");
  REQUIRE(l2 == "1\titts\t0.75\t0\t0.125\t2.5\t3");

  std::vector<SystemMetrics> rows(1);
  rows[0].system = "loop_tf";
  rows[0].asr_cer_natural = 12.5;
  rows[0].asr_cer_synthetic = 25.0;
  rows[0].tts_loss_natural = 0.5;
  rows[0].tts_loss_synthetic = 0.625;
  const fs::path csv_path = temp_path("metrics", ".csv");
  write_metrics_csv(csv_path.string(), rows);
  std::ifstream csv(csv_path);
  std::string chead, crow;
  REQUIRE(std::getline(csv, chead));
  REQUIRE(std::getline(csv, crow));
  csv.close();
  fs::remove(csv_path);
  REQUIRE(chead ==
          "system,asr_cer_natural,asr_cer_synthetic,tts_loss_natural,"
          "tts_loss_synthetic");
  REQUIRE(crow == "loop_tf,12.5,25,0.5,0.625");
}

TEST_CASE("system evaluation scores both components on both input kinds") {
  Corpus corpus = toy_corpus();
  Vocab vocab = toy_vocab();
  Recognizer rec = make_recognizer(19, vocab.size());
  Synthesizer synth = make_synthesizer(20, vocab.size());
  StreamConfig stream = toy_train_config().stream;

  SystemMetrics m = evaluate_system("baseline", rec, synth, corpus.dev, vocab,
                                    stream, false, nullptr);
  REQUIRE(m.system == "baseline");
  REQUIRE(m.asr_cer_natural >= 0.0);
  REQUIRE(m.asr_cer_synthetic >= 0.0);
  REQUIRE(m.tts_loss_natural >= 0.0);
  REQUIRE(m.tts_loss_synthetic >= 0.0);

  Recognizer teacher = make_recognizer(21, vocab.size());
  auto alignments =
      compute_alignments(teacher, corpus.dev, vocab, stream.blocks);
  SystemMetrics mi = evaluate_system("loop", rec, synth, corpus.dev, vocab,
                                     stream, true, &alignments);
  REQUIRE(std::isfinite(mi.asr_cer_natural));
  REQUIRE(std::isfinite(mi.tts_loss_natural));
}

TEST_CASE("interrupted runs resume bit-identically") {
  const Corpus corpus = toy_corpus();
  const Vocab vocab = toy_vocab();
  TrainConfig cfg = toy_train_config();
  cfg.mode = TrainMode::kNonincremental;
  cfg.epochs = 3;
  TrainConfig two = cfg;
  two.epochs = 2;

  const fs::path dir = temp_path("resume_state", "");
  fs::create_directories(dir);
  const std::string ep2 = (dir / "epoch_2.ckpt").string();

  SECTION("teacher") {
    Recognizer a = make_recognizer(30, vocab.size());
    train_teacher(corpus, vocab, a, cfg);

    Recognizer b = make_recognizer(30, vocab.size());
    train_teacher(corpus, vocab, b, two, dir.string());
    Recognizer c = make_recognizer(99, vocab.size());
    TrainResult tail = train_teacher(corpus, vocab, c, cfg, "", ep2);
    REQUIRE(tail.epochs_run == 3);
    REQUIRE(tail.records.size() == 1);
    REQUIRE(bit_equal(a.params(), c.params()));
  }

  SECTION("stage one") {
    Recognizer rec_a = make_recognizer(31, vocab.size());
    Synthesizer synth_a = make_synthesizer(32, vocab.size());
    train_stage1(corpus, vocab, rec_a, synth_a, cfg);

    Recognizer rec_b = make_recognizer(31, vocab.size());
    Synthesizer synth_b = make_synthesizer(32, vocab.size());
    train_stage1(corpus, vocab, rec_b, synth_b, two, nullptr, dir.string());
    Recognizer rec_c = make_recognizer(98, vocab.size());
    Synthesizer synth_c = make_synthesizer(97, vocab.size());
    TrainResult tail =
        train_stage1(corpus, vocab, rec_c, synth_c, cfg, nullptr, "", ep2);
    REQUIRE(tail.epochs_run == 3);
    REQUIRE(bit_equal(rec_a.params(), rec_c.params()));
    REQUIRE(bit_equal(synth_a.params(), synth_c.params()));
  }

  SECTION("stage two") {
    cfg.intermediate = IntermediateMode::kTeacherForcing;
    two.intermediate = IntermediateMode::kTeacherForcing;

    Recognizer isr_a = make_recognizer(33, vocab.size());
    Synthesizer itts_a = make_synthesizer(34, vocab.size());
    TrainResult full =
        train_stage2(corpus, vocab, isr_a, itts_a, cfg, nullptr);

    Recognizer isr_b = make_recognizer(33, vocab.size());
    Synthesizer itts_b = make_synthesizer(34, vocab.size());
    train_stage2(corpus, vocab, isr_b, itts_b, two, nullptr, dir.string());
    Recognizer isr_c = make_recognizer(96, vocab.size());
    Synthesizer itts_c = make_synthesizer(95, vocab.size());
    TrainResult tail = train_stage2(corpus, vocab, isr_c, itts_c, cfg, nullptr,
                                    "", ep2);
    REQUIRE(tail.epochs_run == full.epochs_run);
    REQUIRE(bit_equal(isr_a.params(), isr_c.params()));
    REQUIRE(bit_equal(itts_a.params(), itts_c.params()));
    if (!tail.records.empty() && full.records.size() >= 2) {
      REQUIRE(record_to_line(tail.records.back()) ==
              record_to_line(full.records.back()));
    }
  }

  fs::remove_all(dir);
}

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "speechchain/chain.hpp"
#include "speechchain/checkpoint.hpp"
#include "speechchain/corpus.hpp"
#include "speechchain/optimizer.hpp"

namespace speechchain {

enum class TrainStage { kOne, kTwo };
enum class TrainMode { kNonincremental, kIncremental };

inline TrainStage parse_train_stage(const std::string& s) {
  if (s == "one") return TrainStage::kOne;
  if (s == "two") return TrainStage::kTwo;
  throw ConfigError("unknown training stage '" + s + "'");
}

inline TrainMode parse_train_mode(const std::string& s) {
  if (s == "nonincremental") return TrainMode::kNonincremental;
  if (s == "incremental") return TrainMode::kIncremental;
  throw ConfigError("unknown training mode '" + s + "'");
}

struct TrainConfig {
  TrainStage stage = TrainStage::kOne;
  TrainMode mode = TrainMode::kIncremental;
  IntermediateMode intermediate = IntermediateMode::kTeacherForcing;
  std::size_t epochs = 10;
  std::size_t batch_size = 4;
  double learning_rate = 1e-3;
  std::uint64_t seed = 1;
  std::size_t patience = 10;         // stage-two early stopping
  double divergence_factor = 100.0;  // abort when loss exceeds this x initial
  bool supervised_interleave = false;  // stage two: mix in labeled batches
  StreamConfig stream;

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
    if (divergence_factor <= 1.0)
      throw ConfigError("divergence_factor must exceed 1");
    if (patience < 1) throw ConfigError("patience must be >= 1");
    stream.blocks.validate();
  }
};

// One line per (epoch, component).
struct TrainRecord {
  std::size_t epoch = 0;
  std::string component;  // asr | tts | isr | itts
  double loss = 0.0;
  double dev_cer = 0.0;           // recognizer rows
  double dev_feature_loss = 0.0;  // synthesizer rows
  double avg_main_blocks = 0.0;   // realized text-side segment size, in blocks
  std::size_t degenerate_steps = 0;
};

struct TrainResult {
  std::vector<TrainRecord> records;
  std::size_t epochs_run = 0;
  bool diverged = false;
  bool early_stopped = false;
};

// ---------------------------------------------------------------------------
// Small utilities

inline void scale_grads(ParamSet& ps, double k) {
  for (Parameter& p : ps)
    for (double& g : p.grad.data) g *= k;
}

inline std::vector<Tensor> snapshot_params(const ParamSet& ps) {
  std::vector<Tensor> snap;
  for (const Parameter& p : ps) snap.push_back(p.value);
  return snap;
}

inline void restore_params(ParamSet& ps, const std::vector<Tensor>& snap) {
  std::size_t i = 0;
  for (Parameter& p : ps) p.value = snap.at(i++);
}

// Fisher-Yates over a copy of the base order, so each epoch's permutation is
// a pure function of the generator state and resumed runs replay it exactly.
inline std::vector<std::size_t> shuffled(const std::vector<std::size_t>& base,
                                         Rng& rng) {
  std::vector<std::size_t> idx = base;
  for (std::size_t i = idx.size(); i > 1; --i)
    std::swap(idx[i - 1], idx[rng.uniform_int(0, i - 1)]);
  return idx;
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// Alignment precomputation and evaluation

inline std::map<std::string, SegmentAlignment> compute_alignments(
    Recognizer& teacher, const std::vector<Utterance>& split,
    const Vocab& vocab, const BlockConfig& blocks) {
  std::map<std::string, SegmentAlignment> out;
  for (const Utterance& u : split)
    out.emplace(u.id, compute_alignment(teacher, u.features,
                                        vocab.encode(u.text), blocks));
  return out;
}

// Corpus-level character error rate of greedy decoding: total edit distance
// over total reference characters, in percent.
inline double eval_recognizer_cer(Recognizer& model,
                                  const std::vector<Utterance>& split,
                                  const Vocab& vocab,
                                  const StreamConfig& stream,
                                  bool incremental) {
  if (split.empty()) throw DataError("evaluation split is empty");
  std::size_t edits = 0, chars = 0;
  for (const Utterance& u : split) {
    const std::vector<std::size_t> ref = vocab.encode(u.text);
    std::vector<std::size_t> hyp;
    if (incremental) {
      hyp = run_isr_stream(model, u.features, stream, FrameSpec{}).tokens;
    } else {
      for (std::size_t t :
           recognize(model, u.features, 2 * ref.size() + 8).tokens)
        if (!Vocab::is_special(t)) hyp.push_back(t);
    }
    edits += levenshtein(hyp, ref);
    chars += ref.size();
  }
  return 100.0 * static_cast<double>(edits) / static_cast<double>(chars);
}

// Mean teacher-forced frame prediction error against the natural speech.
// With alignments, prediction runs segment by segment the way the model is
// trained and streamed; without, over the whole utterance at once.
inline double eval_synthesizer_loss(
    Synthesizer& model, const std::vector<Utterance>& split, const Vocab& vocab,
    const std::map<std::string, SegmentAlignment>* alignments,
    const BlockConfig& blocks) {
  if (split.empty()) throw DataError("evaluation split is empty");
  const std::size_t lb = blocks.look_back_blocks * blocks.chars_per_block;
  const std::size_t la = blocks.look_ahead_blocks * blocks.chars_per_block;
  double total = 0.0;
  for (const Utterance& u : split) {
    const std::vector<std::size_t> tokens = vocab.encode(u.text);
    Synthesizer::StateValues sv = model.initial_state();
    Tensor pred;
    if (alignments) {
      const SegmentAlignment merged =
          build_itts_segments(alignments->at(u.id));
      for (const Segment& s : merged.segments) {
        Tensor ref({s.frame_end - s.frame_begin, u.features.cols()});
        std::copy(u.features.row_ptr(s.frame_begin),
                  u.features.row_ptr(s.frame_begin) + ref.numel(),
                  ref.data.begin());
        Tensor seg = itts_tf_segment_frames(
            model, sv,
            detail::context_window(tokens, s.token_begin, s.token_end, lb, la),
            ref);
        detail::append_frames(pred, seg);
      }
    } else {
      pred = itts_tf_segment_frames(model, sv, tokens, u.features);
    }
    total += feature_loss(pred, u.features);
  }
  return total / static_cast<double>(split.size());
}

// ---------------------------------------------------------------------------
// Trainer state: both parameter sets, both optimizers, and the RNG, in one
// file, so a run can resume bit-identically.

namespace detail {

inline Tensor pack_u64s(const std::vector<std::uint64_t>& words) {
  Tensor t({words.size() * 2});  // hi/lo halves stay exactly representable
  for (std::size_t i = 0; i < words.size(); ++i) {
    t.data[2 * i] = static_cast<double>(words[i] >> 32);
    t.data[2 * i + 1] = static_cast<double>(words[i] & 0xffffffffULL);
  }
  return t;
}

inline std::vector<std::uint64_t> unpack_u64s(const Tensor& t) {
  std::vector<std::uint64_t> words(t.numel() / 2);
  for (std::size_t i = 0; i < words.size(); ++i)
    words[i] = (static_cast<std::uint64_t>(t.data[2 * i]) << 32) |
               static_cast<std::uint64_t>(t.data[2 * i + 1]);
  return words;
}

inline void add_adam_entries(Checkpoint& ck, const std::string& prefix,
                             const Adam& adam) {
  for (const auto& me : adam.moments()) {
    ck.add(prefix + me.name + "/m", Tensor({me.m->size()}, *me.m));
    ck.add(prefix + me.name + "/v", Tensor({me.v->size()}, *me.v));
  }
}

inline void load_adam_entries(const Checkpoint& ck, const std::string& prefix,
                              const ParamSet& ps, Adam& adam) {
  for (const Parameter& p : ps) {
    const Tensor* m = ck.find(prefix + p.name + "/m");
    const Tensor* v = ck.find(prefix + p.name + "/v");
    if (m && v) adam.restore_moment(p.name, m->data, v->data);
  }
}

}  // namespace detail

inline Checkpoint trainer_state_checkpoint(const ParamSet& isr_ps,
                                           const ParamSet& itts_ps,
                                           const Adam& adam_isr,
                                           const Adam& adam_itts, const Rng& rng,
                                           std::uint64_t epoch,
                                           std::uint64_t seed) {
  Checkpoint ck;
  ck.seed = seed;
  ck.step = epoch;
  for (const Parameter& p : isr_ps) ck.add("isr/" + p.name, p.value);
  for (const Parameter& p : itts_ps) ck.add("itts/" + p.name, p.value);
  detail::add_adam_entries(ck, "adam/isr/", adam_isr);
  detail::add_adam_entries(ck, "adam/itts/", adam_itts);
  ck.add("trainer/adam_steps",
         detail::pack_u64s({adam_isr.step_count(), adam_itts.step_count()}));
  const auto st = rng.state();
  ck.add("trainer/rng", detail::pack_u64s({st[0], st[1], st[2], st[3]}));
  return ck;
}

inline void save_trainer_state(const std::string& path, const ParamSet& isr_ps,
                               const ParamSet& itts_ps, const Adam& adam_isr,
                               const Adam& adam_itts, const Rng& rng,
                               std::uint64_t epoch, std::uint64_t seed) {
  save_checkpoint(trainer_state_checkpoint(isr_ps, itts_ps, adam_isr,
                                           adam_itts, rng, epoch, seed),
                  path);
}

inline void apply_trainer_state(const Checkpoint& ck, ParamSet& isr_ps,
                                ParamSet& itts_ps, Adam* adam_isr,
                                Adam* adam_itts, Rng* rng,
                                std::uint64_t* epoch = nullptr,
                                std::uint64_t* seed = nullptr) {
  for (Parameter& p : isr_ps) {
    const Tensor* t = ck.find("isr/" + p.name);
    if (!t) throw DataError("trainer state is missing isr/" + p.name);
    if (!t->same_shape(p.value))
      throw ShapeError("trainer state isr/" + p.name + ": " +
                       shape_str(t->shape) + " vs " + shape_str(p.value.shape));
    p.value = *t;
  }
  for (Parameter& p : itts_ps) {
    const Tensor* t = ck.find("itts/" + p.name);
    if (!t) throw DataError("trainer state is missing itts/" + p.name);
    if (!t->same_shape(p.value))
      throw ShapeError("trainer state itts/" + p.name + ": " +
                       shape_str(t->shape) + " vs " + shape_str(p.value.shape));
    p.value = *t;
  }
  const Tensor* steps = ck.find("trainer/adam_steps");
  if (adam_isr) {
    detail::load_adam_entries(ck, "adam/isr/", isr_ps, *adam_isr);
    if (steps) adam_isr->set_step_count(detail::unpack_u64s(*steps)[0]);
  }
  if (adam_itts) {
    detail::load_adam_entries(ck, "adam/itts/", itts_ps, *adam_itts);
    if (steps) adam_itts->set_step_count(detail::unpack_u64s(*steps)[1]);
  }
  if (rng) {
    const Tensor* st = ck.find("trainer/rng");
    if (st) {
      const auto words = detail::unpack_u64s(*st);
      rng->set_state({words[0], words[1], words[2], words[3]});
    }
  }
  if (epoch) *epoch = ck.step;
  if (seed) *seed = ck.seed;
}

inline void load_trainer_state(const std::string& path, ParamSet& isr_ps,
                               ParamSet& itts_ps, Adam* adam_isr,
                               Adam* adam_itts, Rng* rng,
                               std::uint64_t* epoch = nullptr,
                               std::uint64_t* seed = nullptr) {
  apply_trainer_state(load_checkpoint(path), isr_ps, itts_ps, adam_isr,
                      adam_itts, rng, epoch, seed);
}

// Single-component checkpoints: one entry per parameter, shape-checked on
// load (so e.g. a vocabulary mismatch is caught before any computation).
inline void save_params(const std::string& path, const ParamSet& ps,
                        std::uint64_t seed, std::uint64_t step) {
  Checkpoint ck;
  ck.seed = seed;
  ck.step = step;
  for (const Parameter& p : ps) ck.add(p.name, p.value);
  save_checkpoint(ck, path);
}

inline void load_params(const std::string& path, ParamSet& ps) {
  Checkpoint ck = load_checkpoint(path);
  for (Parameter& p : ps) {
    const Tensor* t = ck.find(p.name);
    if (!t) throw DataError("checkpoint " + path + " is missing " + p.name);
    if (!t->same_shape(p.value))
      throw ShapeError("checkpoint " + path + " entry " + p.name + ": " +
                       shape_str(t->shape) + " vs " + shape_str(p.value.shape));
    p.value = *t;
  }
}

// ---------------------------------------------------------------------------
// Teacher training: a whole-utterance supervised recognizer whose attention
// later aligns the streaming windows. State files reuse the two-component
// layout with an empty synthesizer slot.

inline TrainResult train_teacher(const Corpus& corpus, const Vocab& vocab,
                                 Recognizer& rec, const TrainConfig& cfg,
                                 const std::string& checkpoint_dir = "",
                                 const std::string& resume_from = "") {
  cfg.validate();
  const std::vector<Utterance>& train = corpus.train;
  if (train.empty()) throw DataError("training split is empty");

  Rng rng(cfg.seed);
  AdamConfig ac;
  ac.lr = cfg.learning_rate;
  Adam adam(ac), unused(ac);
  ParamSet none;

  std::uint64_t done_epochs = 0;
  if (!resume_from.empty())
    apply_trainer_state(load_checkpoint(resume_from), rec.params(), none,
                        &adam, nullptr, &rng, &done_epochs);

  TrainResult out;
  std::vector<std::size_t> base(train.size());
  for (std::size_t i = 0; i < base.size(); ++i) base[i] = i;

  for (std::size_t epoch = done_epochs + 1; epoch <= cfg.epochs; ++epoch) {
    const std::vector<std::size_t> idx = shuffled(base, rng);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < idx.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(b + cfg.batch_size, idx.size());
      rec.params().zero_grad();
      for (std::size_t i = b; i < e; ++i) {
        const Utterance& u = train[idx[i]];
        const std::vector<std::size_t> tokens = vocab.encode(u.text);
        Graph g;
        ChainStepResult r;
        NodeRef loss = asr_supervised_loss(
            g, rec, u.features,
            detail::segment_targets(tokens, 0, tokens.size(), true));
        detail::finish_chain_result(r, g, {loss}, true);
        loss_sum += r.loss;
      }
      scale_grads(rec.params(), 1.0 / static_cast<double>(e - b));
      adam.step(rec.params());
    }

    TrainRecord r;
    r.epoch = epoch;
    r.component = "teacher";
    r.loss = loss_sum / static_cast<double>(train.size());
    if (!corpus.dev.empty())
      r.dev_cer = eval_recognizer_cer(rec, corpus.dev, vocab, cfg.stream, false);
    out.records.push_back(r);
    out.epochs_run = epoch;

    if (!checkpoint_dir.empty()) {
      std::ostringstream name;
      name << checkpoint_dir << "/epoch_" << epoch << ".ckpt";
      save_trainer_state(name.str(), rec.params(), none, adam, unused, rng,
                         epoch, cfg.seed);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stage 1: independent supervised training. Non-incremental models learn on
// whole utterances; incremental models learn on the windowed decomposition
// given by the teacher's attention alignment.

inline TrainResult train_stage1(const Corpus& corpus, const Vocab& vocab,
                                Recognizer& rec, Synthesizer& synth,
                                const TrainConfig& cfg,
                                Recognizer* teacher = nullptr,
                                const std::string& checkpoint_dir = "",
                                const std::string& resume_from = "") {
  cfg.validate();
  const std::vector<Utterance>& train = corpus.train;
  if (train.empty()) throw DataError("training split is empty");
  const bool incremental = cfg.mode == TrainMode::kIncremental;
  if (incremental && !teacher)
    throw ConfigError(
        "incremental stage-one training needs a whole-utterance teacher");

  const BlockConfig& blocks = cfg.stream.blocks;
  const std::size_t W = blocks.window_frames();
  const std::size_t lb = blocks.look_back_blocks * blocks.chars_per_block;
  const std::size_t la = blocks.look_ahead_blocks * blocks.chars_per_block;

  std::map<std::string, SegmentAlignment> train_align, dev_align;
  if (incremental) {
    train_align = compute_alignments(*teacher, train, vocab, blocks);
    if (!corpus.dev.empty())
      dev_align = compute_alignments(*teacher, corpus.dev, vocab, blocks);
  }

  double avg_blocks = 0.0;
  if (incremental) {
    std::size_t segs = 0, toks = 0;
    for (const auto& [id, a] : train_align) {
      const SegmentAlignment merged = build_itts_segments(a);
      segs += merged.segments.size();
      toks += merged.total_tokens;
    }
    avg_blocks = static_cast<double>(toks) /
                 static_cast<double>(segs * blocks.chars_per_block);
  }

  Rng rng(cfg.seed);
  AdamConfig ac;
  ac.lr = cfg.learning_rate;
  Adam adam_rec(ac), adam_synth(ac);

  std::uint64_t done_epochs = 0;
  if (!resume_from.empty())
    apply_trainer_state(load_checkpoint(resume_from), rec.params(),
                        synth.params(), &adam_rec, &adam_synth, &rng,
                        &done_epochs);

  // Per-utterance loss builders; both return the mean loss value and push
  // gradients into the owning parameter set.
  auto rec_loss = [&](const Utterance& u) {
    const std::vector<std::size_t> tokens = vocab.encode(u.text);
    Graph g;
    ChainStepResult r;
    if (incremental) {
      const SegmentAlignment& a = train_align.at(u.id);
      const std::size_t N = a.segments.size();
      std::vector<Tensor> windows;
      for (std::size_t n = 0; n < N; ++n)
        windows.push_back(build_isr_window(u.features, n * W, blocks));
      auto losses = isr_unroll_ce(g, rec, windows, build_isr_targets(a, tokens));
      detail::finish_chain_result(r, g, losses, true);
    } else {
      NodeRef loss = asr_supervised_loss(
          g, rec, u.features,
          detail::segment_targets(tokens, 0, tokens.size(), true));
      detail::finish_chain_result(r, g, {loss}, true);
    }
    return r.loss;
  };

  auto synth_loss = [&](const Utterance& u) {
    const std::vector<std::size_t> tokens = vocab.encode(u.text);
    Graph g;
    ChainStepResult r;
    if (incremental) {
      const SegmentAlignment merged =
          build_itts_segments(train_align.at(u.id));
      std::vector<std::vector<std::size_t>> token_windows;
      std::vector<Tensor> frame_segments;
      for (const Segment& s : merged.segments) {
        token_windows.push_back(
            detail::context_window(tokens, s.token_begin, s.token_end, lb, la));
        Tensor seg({s.frame_end - s.frame_begin, u.features.cols()});
        std::copy(u.features.row_ptr(s.frame_begin),
                  u.features.row_ptr(s.frame_begin) + seg.numel(),
                  seg.data.begin());
        frame_segments.push_back(std::move(seg));
      }
      auto losses = itts_unroll_loss(g, synth, token_windows, frame_segments);
      detail::finish_chain_result(r, g, losses, true);
    } else {
      NodeRef loss = tts_supervised_loss(g, synth, tokens, u.features);
      detail::finish_chain_result(r, g, {loss}, true);
    }
    return r.loss;
  };

  TrainResult out;
  std::vector<std::size_t> base(train.size());
  for (std::size_t i = 0; i < base.size(); ++i) base[i] = i;

  for (std::size_t epoch = done_epochs + 1; epoch <= cfg.epochs; ++epoch) {
    const std::vector<std::size_t> idx = shuffled(base, rng);
    double rec_sum = 0.0, synth_sum = 0.0;
    for (std::size_t b = 0; b < idx.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(b + cfg.batch_size, idx.size());
      rec.params().zero_grad();
      for (std::size_t i = b; i < e; ++i) rec_sum += rec_loss(train[idx[i]]);
      scale_grads(rec.params(), 1.0 / static_cast<double>(e - b));
      adam_rec.step(rec.params());

      synth.params().zero_grad();
      for (std::size_t i = b; i < e; ++i)
        synth_sum += synth_loss(train[idx[i]]);
      scale_grads(synth.params(), 1.0 / static_cast<double>(e - b));
      adam_synth.step(synth.params());
    }

    const double n = static_cast<double>(train.size());
    TrainRecord rr;
    rr.epoch = epoch;
    rr.component = incremental ? "isr" : "asr";
    rr.loss = rec_sum / n;
    rr.avg_main_blocks = avg_blocks;
    if (!corpus.dev.empty())
      rr.dev_cer =
          eval_recognizer_cer(rec, corpus.dev, vocab, cfg.stream, incremental);
    out.records.push_back(rr);

    TrainRecord sr;
    sr.epoch = epoch;
    sr.component = incremental ? "itts" : "tts";
    sr.loss = synth_sum / n;
    sr.avg_main_blocks = avg_blocks;
    if (!corpus.dev.empty())
      sr.dev_feature_loss = eval_synthesizer_loss(
          synth, corpus.dev, vocab, incremental ? &dev_align : nullptr, blocks);
    out.records.push_back(sr);
    out.epochs_run = epoch;

    if (!checkpoint_dir.empty()) {
      std::ostringstream name;
      name << checkpoint_dir << "/epoch_" << epoch << ".ckpt";
      save_trainer_state(name.str(), rec.params(), synth.params(), adam_rec,
                         adam_synth, rng, epoch, cfg.seed);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stage 2: joint closed-loop training. Batches alternate strictly between the
// two unrolled directions; each direction's optimizer step touches only the
// reconstructing component. Teacher-forcing works through labeled pairs;
// greedy splits the loop data into disjoint speech-only and text-only views.

inline TrainResult train_stage2(const Corpus& corpus, const Vocab& vocab,
                                Recognizer& isr, Synthesizer& itts,
                                const TrainConfig& cfg,
                                Recognizer* teacher = nullptr,
                                const std::string& checkpoint_dir = "",
                                const std::string& resume_from = "") {
  cfg.validate();
  const std::vector<Utterance>& chain = corpus.chain;
  if (chain.empty()) throw DataError("loop split is empty");
  const bool incremental = cfg.mode == TrainMode::kIncremental;
  const bool tf = cfg.intermediate == IntermediateMode::kTeacherForcing;
  if (incremental && !teacher)
    throw ConfigError(
        "incremental stage-two training needs the whole-utterance teacher");
  if (cfg.supervised_interleave && corpus.train.empty())
    throw DataError("supervised interleave needs a labeled training split");

  const BlockConfig& blocks = cfg.stream.blocks;

  // Disjoint unlabeled views for greedy mode; teacher forcing is labeled and
  // may use every loop utterance in both directions.
  std::vector<std::size_t> speech_view, text_view;
  if (tf) {
    for (std::size_t i = 0; i < chain.size(); ++i) {
      speech_view.push_back(i);
      text_view.push_back(i);
    }
  } else {
    if (chain.size() < 2)
      throw DataError("greedy loop training needs at least two utterances");
    for (std::size_t i = 0; i < chain.size() / 2; ++i) speech_view.push_back(i);
    for (std::size_t i = chain.size() / 2; i < chain.size(); ++i)
      text_view.push_back(i);
  }

  std::map<std::string, SegmentAlignment> chain_align, dev_align, train_align;
  if (incremental) {
    if (tf) chain_align = compute_alignments(*teacher, chain, vocab, blocks);
    if (!corpus.dev.empty())
      dev_align = compute_alignments(*teacher, corpus.dev, vocab, blocks);
    if (cfg.supervised_interleave)
      train_align = compute_alignments(*teacher, corpus.train, vocab, blocks);
  }

  Rng rng(cfg.seed);
  AdamConfig ac;
  ac.lr = cfg.learning_rate;
  Adam adam_isr(ac), adam_itts(ac);

  std::uint64_t done_epochs = 0;
  Checkpoint resume_ck;
  if (!resume_from.empty()) {
    resume_ck = load_checkpoint(resume_from);
    apply_trainer_state(resume_ck, isr.params(), itts.params(), &adam_isr,
                        &adam_itts, &rng, &done_epochs);
  }

  const std::size_t W = blocks.window_frames();
  const std::size_t lb = blocks.look_back_blocks * blocks.chars_per_block;
  const std::size_t la = blocks.look_ahead_blocks * blocks.chars_per_block;

  // Direction passes over one utterance; gradients accumulate in the consumer.
  auto itts_update = [&](const Utterance& u) {
    const std::vector<std::size_t> tokens = vocab.encode(u.text);
    if (incremental)
      return chain_step_isr_to_itts(
          isr, itts, u.features, tf ? &tokens : nullptr,
          tf ? &chain_align.at(u.id) : nullptr, cfg.stream,
          cfg.intermediate, true);
    // Decode cap from the acoustic length: the speech view carries no labels.
    const std::size_t cap =
        2 * (u.features.rows() / isr.config().subsampling() + 1) *
            blocks.chars_per_block +
        8;
    return chain_loss_asr_to_tts(isr, itts, u.features, tf ? &tokens : nullptr,
                                 cap, cfg.intermediate, true);
  };
  auto isr_update = [&](const Utterance& u) {
    const std::vector<std::size_t> tokens = vocab.encode(u.text);
    if (incremental)
      return chain_step_itts_to_isr(
          isr, itts, tokens, tf ? &u.features : nullptr,
          tf ? &chain_align.at(u.id) : nullptr, cfg.stream,
          cfg.intermediate, true);
    return chain_loss_tts_to_asr(isr, itts, tokens, tf ? &u.features : nullptr,
                                 2 * tokens.size() + 8, cfg.intermediate, true);
  };

  // Stage-1-style supervised losses, for the optional interleave.
  auto supervised_isr = [&](const Utterance& u) {
    const std::vector<std::size_t> tokens = vocab.encode(u.text);
    Graph g;
    ChainStepResult r;
    if (incremental) {
      const SegmentAlignment& a = train_align.at(u.id);
      std::vector<Tensor> windows;
      for (std::size_t n = 0; n < a.segments.size(); ++n)
        windows.push_back(build_isr_window(u.features, n * W, blocks));
      auto losses = isr_unroll_ce(g, isr, windows, build_isr_targets(a, tokens));
      detail::finish_chain_result(r, g, losses, true);
    } else {
      NodeRef loss = asr_supervised_loss(
          g, isr, u.features,
          detail::segment_targets(tokens, 0, tokens.size(), true));
      detail::finish_chain_result(r, g, {loss}, true);
    }
    return r.loss;
  };
  auto supervised_itts = [&](const Utterance& u) {
    const std::vector<std::size_t> tokens = vocab.encode(u.text);
    Graph g;
    ChainStepResult r;
    if (incremental) {
      const SegmentAlignment merged = build_itts_segments(train_align.at(u.id));
      std::vector<std::vector<std::size_t>> tw;
      std::vector<Tensor> fs;
      for (const Segment& s : merged.segments) {
        tw.push_back(
            detail::context_window(tokens, s.token_begin, s.token_end, lb, la));
        Tensor seg({s.frame_end - s.frame_begin, u.features.cols()});
        std::copy(u.features.row_ptr(s.frame_begin),
                  u.features.row_ptr(s.frame_begin) + seg.numel(),
                  seg.data.begin());
        fs.push_back(std::move(seg));
      }
      auto losses = itts_unroll_loss(g, itts, tw, fs);
      detail::finish_chain_result(r, g, losses, true);
    } else {
      NodeRef loss = tts_supervised_loss(g, itts, tokens, u.features);
      detail::finish_chain_result(r, g, {loss}, true);
    }
    return r.loss;
  };

  TrainResult out;

  // Best-so-far tracking starts from the stage-1 state, so a run that never
  // improves hands back the parameters it was given. A resumed run restores
  // the tracking state it had saved instead of re-evaluating.
  double best_cer = 0.0, best_feat = 0.0;
  std::vector<Tensor> best_isr = snapshot_params(isr.params());
  std::vector<Tensor> best_itts = snapshot_params(itts.params());
  std::size_t since_improvement = 0;
  double isr_baseline = -1.0, itts_baseline = -1.0;
  std::size_t sup_cursor = 0;

  const Tensor* resumed = resume_ck.find("trainer/stage2");
  if (resumed) {
    best_cer = resumed->data[0];
    best_feat = resumed->data[1];
    since_improvement = static_cast<std::size_t>(resumed->data[2]);
    isr_baseline = resumed->data[3];
    itts_baseline = resumed->data[4];
    sup_cursor = static_cast<std::size_t>(resumed->data[5]);
    std::size_t k = 0;
    for (const Parameter& p : isr.params()) {
      const Tensor* t = resume_ck.find("best/isr/" + p.name);
      if (!t) throw DataError("trainer state is missing best/isr/" + p.name);
      best_isr[k++] = *t;
    }
    k = 0;
    for (const Parameter& p : itts.params()) {
      const Tensor* t = resume_ck.find("best/itts/" + p.name);
      if (!t) throw DataError("trainer state is missing best/itts/" + p.name);
      best_itts[k++] = *t;
    }
  } else if (!corpus.dev.empty()) {
    best_cer =
        eval_recognizer_cer(isr, corpus.dev, vocab, cfg.stream, incremental);
    best_feat = eval_synthesizer_loss(itts, corpus.dev, vocab,
                                      incremental ? &dev_align : nullptr,
                                      blocks);
  }

  std::vector<std::size_t> sup_idx(corpus.train.size());
  for (std::size_t i = 0; i < sup_idx.size(); ++i) sup_idx[i] = i;

  for (std::size_t epoch = done_epochs + 1;
       epoch <= cfg.epochs && !out.diverged; ++epoch) {
    std::vector<Tensor> last_good_isr = snapshot_params(isr.params());
    std::vector<Tensor> last_good_itts = snapshot_params(itts.params());
    const std::vector<std::size_t> speech_order = shuffled(speech_view, rng);
    const std::vector<std::size_t> text_order = shuffled(text_view, rng);
    const std::vector<std::size_t> sup_order =
        cfg.supervised_interleave ? shuffled(sup_idx, rng)
                                  : std::vector<std::size_t>{};

    double itts_loss_sum = 0.0, isr_loss_sum = 0.0;
    std::size_t itts_used = 0, isr_used = 0;
    std::size_t itts_degenerate = 0, isr_degenerate = 0;
    double itts_tokens_sum = 0.0, isr_tokens_sum = 0.0;

    const std::size_t speech_batches =
        (speech_view.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t text_batches =
        (text_view.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t cycles = std::max(speech_batches, text_batches);

    for (std::size_t c = 0; c < cycles && !out.diverged; ++c) {
      if (c < speech_batches) {  // speech in: update the synthesizer
        const std::size_t b = c * cfg.batch_size;
        const std::size_t e =
            std::min(b + cfg.batch_size, speech_view.size());
        itts.params().zero_grad();
        double batch_loss = 0.0;
        std::size_t effective = 0;
        for (std::size_t i = b; i < e; ++i) {
          ChainStepResult r = itts_update(chain[speech_order[i]]);
          itts_degenerate += r.steps_skipped;
          if (r.degenerate) continue;
          batch_loss += r.loss;
          itts_tokens_sum += r.mean_segment_tokens;
          ++effective;
        }
        if (effective > 0) {
          scale_grads(itts.params(), 1.0 / static_cast<double>(effective));
          adam_itts.step(itts.params());
          const double mean = batch_loss / static_cast<double>(effective);
          itts_loss_sum += batch_loss;
          itts_used += effective;
          if (itts_baseline < 0.0) itts_baseline = mean;
          if (mean > cfg.divergence_factor * itts_baseline) out.diverged = true;
        }
      }
      if (out.diverged) break;
      if (c < text_batches) {  // text in: update the recognizer
        const std::size_t b = c * cfg.batch_size;
        const std::size_t e = std::min(b + cfg.batch_size, text_view.size());
        isr.params().zero_grad();
        double batch_loss = 0.0;
        std::size_t effective = 0;
        for (std::size_t i = b; i < e; ++i) {
          ChainStepResult r = isr_update(chain[text_order[i]]);
          isr_degenerate += r.steps_skipped;
          if (r.degenerate) continue;
          batch_loss += r.loss;
          isr_tokens_sum += r.mean_segment_tokens;
          ++effective;
        }
        if (effective > 0) {
          scale_grads(isr.params(), 1.0 / static_cast<double>(effective));
          adam_isr.step(isr.params());
          const double mean = batch_loss / static_cast<double>(effective);
          isr_loss_sum += batch_loss;
          isr_used += effective;
          if (isr_baseline < 0.0) isr_baseline = mean;
          if (mean > cfg.divergence_factor * isr_baseline) out.diverged = true;
        }
      }
      if (out.diverged) break;
      if (cfg.supervised_interleave) {
        isr.params().zero_grad();
        itts.params().zero_grad();
        std::size_t count = 0;
        for (; count < cfg.batch_size && !sup_order.empty(); ++count) {
          const Utterance& u =
              corpus.train[sup_order[sup_cursor % sup_order.size()]];
          ++sup_cursor;
          supervised_isr(u);
          supervised_itts(u);
        }
        if (count > 0) {
          scale_grads(isr.params(), 1.0 / static_cast<double>(count));
          scale_grads(itts.params(), 1.0 / static_cast<double>(count));
          adam_isr.step(isr.params());
          adam_itts.step(itts.params());
        }
      }
    }

    if (out.diverged) {  // roll back to the last epoch that finished cleanly
      restore_params(isr.params(), last_good_isr);
      restore_params(itts.params(), last_good_itts);
      break;
    }

    const double cpb = static_cast<double>(blocks.chars_per_block);
    TrainRecord ir;
    ir.epoch = epoch;
    ir.component = incremental ? "isr" : "asr";
    ir.loss = isr_used ? isr_loss_sum / static_cast<double>(isr_used) : 0.0;
    ir.degenerate_steps = isr_degenerate;
    ir.avg_main_blocks =
        isr_used ? isr_tokens_sum / static_cast<double>(isr_used) / cpb : 0.0;
    TrainRecord tr;
    tr.epoch = epoch;
    tr.component = incremental ? "itts" : "tts";
    tr.loss = itts_used ? itts_loss_sum / static_cast<double>(itts_used) : 0.0;
    tr.degenerate_steps = itts_degenerate;
    tr.avg_main_blocks =
        itts_used ? itts_tokens_sum / static_cast<double>(itts_used) / cpb : 0.0;

    bool improved = false;
    if (!corpus.dev.empty()) {
      ir.dev_cer =
          eval_recognizer_cer(isr, corpus.dev, vocab, cfg.stream, incremental);
      tr.dev_feature_loss = eval_synthesizer_loss(
          itts, corpus.dev, vocab, incremental ? &dev_align : nullptr, blocks);
      if (ir.dev_cer < best_cer) {
        best_cer = ir.dev_cer;
        best_isr = snapshot_params(isr.params());
        improved = true;
      }
      if (tr.dev_feature_loss < best_feat) {
        best_feat = tr.dev_feature_loss;
        best_itts = snapshot_params(itts.params());
        improved = true;
      }
    }
    out.records.push_back(ir);
    out.records.push_back(tr);
    out.epochs_run = epoch;

    if (!corpus.dev.empty()) since_improvement = improved ? 0 : since_improvement + 1;

    if (!checkpoint_dir.empty()) {
      Checkpoint ck = trainer_state_checkpoint(
          isr.params(), itts.params(), adam_isr, adam_itts, rng, epoch,
          cfg.seed);
      std::size_t k = 0;
      for (const Parameter& p : isr.params())
        ck.add("best/isr/" + p.name, best_isr[k++]);
      k = 0;
      for (const Parameter& p : itts.params())
        ck.add("best/itts/" + p.name, best_itts[k++]);
      Tensor st({6});
      st.data = {best_cer,
                 best_feat,
                 static_cast<double>(since_improvement),
                 isr_baseline,
                 itts_baseline,
                 static_cast<double>(sup_cursor)};
      ck.add("trainer/stage2", st);
      std::ostringstream name;
      name << checkpoint_dir << "/epoch_" << epoch << ".ckpt";
      save_checkpoint(ck, name.str());
    }

    if (!corpus.dev.empty() && since_improvement >= cfg.patience) {
      out.early_stopped = true;
      break;
    }
  }

  if (!corpus.dev.empty()) {  // hand back the best dev-metric parameters
    restore_params(isr.params(), best_isr);
    restore_params(itts.params(), best_itts);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Records and the four-quadrant metric summary

inline std::string record_to_line(const TrainRecord& r) {
  std::ostringstream os;
  os << r.epoch << '\t' << r.component << '\t' << format_double(r.loss) << '\t'
     << format_double(r.dev_cer) << '\t' << format_double(r.dev_feature_loss)
     << '\t' << format_double(r.avg_main_blocks) << '\t' << r.degenerate_steps;
  return os.str();
}

inline void write_train_records(const std::string& path,
                                const std::vector<TrainRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << "epoch\tcomponent\tloss\tdev_cer\tdev_feature_loss\tavg_main_blocks"
         "\tdegenerate_steps\n";
  for (const TrainRecord& r : records) out << record_to_line(r) << '\n';
}

// One row of the summary: each component scored on natural input and on the
// other component's synthetic output.
struct SystemMetrics {
  std::string system;
  double asr_cer_natural = 0.0;
  double asr_cer_synthetic = 0.0;
  double tts_loss_natural = 0.0;
  double tts_loss_synthetic = 0.0;
};

inline SystemMetrics evaluate_system(
    const std::string& name, Recognizer& rec, Synthesizer& synth,
    const std::vector<Utterance>& split, const Vocab& vocab,
    const StreamConfig& stream, bool incremental,
    const std::map<std::string, SegmentAlignment>* alignments) {
  if (split.empty()) throw DataError("evaluation split is empty");
  SystemMetrics m;
  m.system = name;
  m.asr_cer_natural =
      eval_recognizer_cer(rec, split, vocab, stream, incremental);
  m.tts_loss_natural = eval_synthesizer_loss(synth, split, vocab, alignments,
                                             stream.blocks);

  // Recognition of synthetic speech.
  std::size_t edits = 0, chars = 0;
  for (const Utterance& u : split) {
    const std::vector<std::size_t> ref = vocab.encode(u.text);
    Tensor frames = incremental
                        ? run_itts_stream(synth, ref, stream).frames
                        : synthesize(synth, ref, 2 * ref.size() + 8).frames;
    std::vector<std::size_t> hyp;
    if (frames.rows() > 0) {
      if (incremental) {
        hyp = run_isr_stream(rec, frames, stream, FrameSpec{}).tokens;
      } else {
        for (std::size_t t : recognize(rec, frames, 2 * ref.size() + 8).tokens)
          if (!Vocab::is_special(t)) hyp.push_back(t);
      }
    }
    edits += levenshtein(hyp, ref);
    chars += ref.size();
  }
  m.asr_cer_synthetic =
      100.0 * static_cast<double>(edits) / static_cast<double>(chars);

  // Synthesis from recognized text, scored against the natural frames.
  double total = 0.0;
  std::size_t counted = 0;
  for (const Utterance& u : split) {
    std::vector<std::size_t> hyp;
    if (incremental) {
      hyp = run_isr_stream(rec, u.features, stream, FrameSpec{}).tokens;
    } else {
      const std::size_t cap = 2 * vocab.encode(u.text).size() + 8;
      for (std::size_t t : recognize(rec, u.features, cap).tokens)
        if (!Vocab::is_special(t)) hyp.push_back(t);
    }
    if (hyp.empty()) continue;
    Synthesizer::StateValues sv = synth.initial_state();
    Tensor pred = itts_tf_segment_frames(synth, sv, hyp, u.features);
    total += feature_loss(pred, u.features);
    ++counted;
  }
  m.tts_loss_synthetic =
      counted ? total / static_cast<double>(counted) : 0.0;
  return m;
}

inline void write_metrics_csv(const std::string& path,
                              const std::vector<SystemMetrics>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << "system,asr_cer_natural,asr_cer_synthetic,tts_loss_natural,"
         "tts_loss_synthetic\n";
  for (const SystemMetrics& m : rows)
    out << m.system << ',' << format_double(m.asr_cer_natural) << ','
        << format_double(m.asr_cer_synthetic) << ','
        << format_double(m.tts_loss_natural) << ','
        << format_double(m.tts_loss_synthetic) << '\n';
}

}  // namespace speechchain

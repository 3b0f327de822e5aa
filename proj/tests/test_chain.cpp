#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "speechchain/chain.hpp"
#include "speechchain/trainer.hpp"

using namespace speechchain;

namespace {

Recognizer make_recognizer(std::uint64_t seed, std::size_t vocab_size,
                           std::size_t enc_layers = 2) {
  RecognizerConfig rc;
  rc.feature_dim = 4;
  rc.enc_hidden = 6;
  rc.enc_layers = enc_layers;
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

Tensor random_features(Rng& rng, std::size_t frames, std::size_t dim) {
  Tensor f({frames, dim});
  for (double& v : f.data) v = rng.normal();
  return f;
}

std::vector<std::size_t> random_text(Rng& rng, std::size_t len,
                                     std::size_t vocab_size) {
  std::vector<std::size_t> t(len);
  for (auto& v : t)
    v = Vocab::kNumSpecial +
        rng.uniform_int(0, vocab_size - Vocab::kNumSpecial - 1);
  return t;
}

// Window geometry matched to the 2-layer (4x subsampled) toy encoder.
StreamConfig toy_stream_config() {
  StreamConfig cfg;
  cfg.blocks.frames_per_block = 4;
  cfg.blocks.main_blocks = 2;
  cfg.blocks.look_back_blocks = 1;
  cfg.blocks.look_ahead_blocks = 1;
  cfg.blocks.chars_per_block = 3;
  cfg.itts_main_char_blocks = 2;
  return cfg;
}

Tensor slice_rows(const Tensor& m, std::size_t b, std::size_t e) {
  Tensor out({e - b, m.cols()});
  std::copy(m.row_ptr(b), m.row_ptr(b) + out.numel(), out.data.begin());
  return out;
}

// --- Plain-double loss arithmetic, independent of the graph's loss nodes ---

double lse2(double a, double b) {
  const double m = a > b ? a : b;
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

double ce_value(const Tensor& logits, std::size_t target) {
  double m = logits.data[0];
  for (double v : logits.data) m = v > m ? v : m;
  double sum = 0.0;
  for (double v : logits.data) sum += std::exp(v - m);
  return m + std::log(sum) - logits.data[target];
}

double stop_ce_value(double logit, bool last) {
  // Cross-entropy of softmax([logit, 0]) against class 0 (stop) or 1 (go).
  return lse2(logit, 0.0) - (last ? logit : 0.0);
}

Tensor pad_rows(const Tensor& m, std::size_t r) {
  const std::size_t groups = (m.rows() + r - 1) / r;
  Tensor out({groups * r, m.cols()});
  std::copy(m.data.begin(), m.data.end(), out.data.begin());
  for (std::size_t t = m.rows(); t < groups * r; ++t)
    std::copy(m.row_ptr(m.rows() - 1), m.row_ptr(m.rows() - 1) + m.cols(),
              out.row_ptr(t));
  return out;
}

// Value-carried recognizer state for step-by-step loss recomputation on a
// fresh graph per segment.
struct IsrCarry {
  Tensor h, c, context;
  std::size_t prev = Vocab::kBos;
};

IsrCarry isr_carry_init(const Recognizer& m) {
  IsrCarry carry;
  carry.h = Tensor({m.config().dec_hidden}, 0.0);
  carry.c = Tensor({m.config().dec_hidden}, 0.0);
  carry.context = Tensor({m.config().state_dim()}, 0.0);
  return carry;
}

double isr_segment_loss_value(Recognizer& m, IsrCarry& carry,
                              const Tensor& window,
                              const std::vector<std::size_t>& targets) {
  Graph g;
  auto enc = m.encode(g, window);
  LstmState lstm{g.constant(carry.h), g.constant(carry.c)};
  NodeRef context = g.constant(carry.context);
  std::size_t prev = carry.prev;
  std::vector<NodeRef> logits;
  for (std::size_t t : targets) {
    auto s = m.step(g, enc, lstm, context, prev);
    logits.push_back(s.logits);
    lstm = s.lstm;
    context = s.context;
    prev = t;
  }
  g.forward();
  double sum = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i)
    sum += ce_value(g.value(logits[i]), targets[i]);
  carry.h = g.value(lstm.h);
  carry.c = g.value(lstm.c);
  carry.context = g.value(context);
  carry.prev = prev;
  return sum / static_cast<double>(targets.size());
}

double itts_segment_loss_value(Synthesizer& m, Synthesizer::StateValues& sv,
                               const std::vector<std::size_t>& window,
                               const Tensor& reference) {
  const std::size_t r = m.config().frames_per_step;
  const std::size_t d = m.config().feature_dim;
  Graph g;
  auto enc = m.encode_text(g, window);
  Tensor padded = pad_rows(reference, r);
  const std::size_t groups = padded.rows() / r;
  LstmState l1{g.constant(sv.h1), g.constant(sv.c1)};
  LstmState l2{g.constant(sv.h2), g.constant(sv.c2)};
  NodeRef context = g.constant(sv.context);
  NodeRef prev = g.constant(sv.prev_frame);
  std::vector<NodeRef> frame_nodes, stop_nodes;
  for (std::size_t k = 0; k < groups; ++k) {
    auto s = m.step(g, enc, l1, l2, context, prev);
    frame_nodes.push_back(s.frames);
    stop_nodes.push_back(s.stop_logit);
    l1 = s.l1;
    l2 = s.l2;
    context = s.context;
    Tensor truth({d});
    std::copy(padded.row_ptr((k + 1) * r - 1),
              padded.row_ptr((k + 1) * r - 1) + d, truth.data.begin());
    prev = g.constant(truth);
  }
  g.forward();
  double frame_sum = 0.0, stop_sum = 0.0;
  for (std::size_t k = 0; k < groups; ++k) {
    const Tensor& fr = g.value(frame_nodes[k]);
    for (std::size_t i = 0; i < r * d; ++i) {
      const double diff = fr.data[i] - padded.data[k * r * d + i];
      frame_sum += diff * diff;
    }
    stop_sum += stop_ce_value(g.value(stop_nodes[k]).data[0], k + 1 == groups);
  }
  sv.h1 = g.value(l1.h);
  sv.c1 = g.value(l1.c);
  sv.h2 = g.value(l2.h);
  sv.c2 = g.value(l2.c);
  sv.context = g.value(context);
  sv.prev_frame = g.value(prev);
  return frame_sum / static_cast<double>(padded.rows()) +
         stop_sum / static_cast<double>(groups);
}

void shift_bias(ParamSet& ps, const std::string& name, std::size_t index,
                double delta) {
  ps.at(name).value.data.at(index) += delta;
}

bool grads_all_zero(const ParamSet& ps) {
  for (const Parameter& p : ps)
    for (double g : p.grad.data)
      if (g != 0.0) return false;
  return true;
}

bool grads_any_nonzero(const ParamSet& ps) {
  return !grads_all_zero(ps);
}

}  // namespace

TEST_CASE("speech-loop loss equals independent per-step recomputation") {
  const std::size_t vocab = 10;
  const StreamConfig cfg = toy_stream_config();
  const std::size_t W = cfg.blocks.window_frames();
  const std::size_t lb = cfg.blocks.look_back_blocks * cfg.blocks.chars_per_block;
  const std::size_t la = cfg.blocks.look_ahead_blocks * cfg.blocks.chars_per_block;

  for (std::uint64_t seed = 1; seed <= 25; ++seed) {
    Rng rng(seed * 71 + 5);
    Recognizer isr = make_recognizer(seed, vocab);
    // Keep greedy decodes emitting content so both modes exercise real steps.
    shift_bias(isr.params(), "dec/out/b", Vocab::kEos, -8.0);
    shift_bias(isr.params(), "dec/out/b", Vocab::kEob, -4.0);
    Synthesizer itts = make_synthesizer(seed + 400, vocab);
    Recognizer teacher = make_recognizer(seed + 900, vocab);

    const std::size_t S = 12 + rng.uniform_int(0, 28);
    const std::size_t T = 6 + rng.uniform_int(0, 12);
    Tensor X = random_features(rng, S, 4);
    std::vector<std::size_t> Y = random_text(rng, T, vocab);
    const std::size_t N = (S + W - 1) / W;

    for (int greedy = 0; greedy <= 1; ++greedy) {
      const IntermediateMode mode = greedy ? IntermediateMode::kGreedy
                                           : IntermediateMode::kTeacherForcing;
      SegmentAlignment align =
          compute_alignment(teacher, X, Y, cfg.blocks);
      ChainStepResult res = chain_step_isr_to_itts(
          isr, itts, X, greedy ? nullptr : &Y, greedy ? nullptr : &align, cfg,
          mode, false);

      // Reproduce the hand-off independently.
      std::vector<std::vector<std::size_t>> handoff(N);
      if (greedy) {
        IsrStreamState st;
        st.decoder = isr.initial_state();
        for (std::size_t n = 0; n < N && !st.finished; ++n) {
          handoff[n] =
              isr_step(isr, cfg, st, build_isr_window(X, st.origin, cfg.blocks))
                  .content;
          st.origin += W;
        }
      } else {
        for (std::size_t n = 0; n < N; ++n)
          handoff[n].assign(Y.begin() + align.segments[n].token_begin,
                            Y.begin() + align.segments[n].token_end);
      }

      Synthesizer::StateValues sv = itts.initial_state();
      std::vector<std::size_t> history;
      std::vector<double> expected;
      for (std::size_t n = 0; n < N; ++n) {
        if (handoff[n].empty()) continue;
        std::vector<std::size_t> window;
        const std::size_t from = history.size() > lb ? history.size() - lb : 0;
        window.assign(history.begin() + from, history.end());
        window.insert(window.end(), handoff[n].begin(), handoff[n].end());
        if (!greedy && la > 0) {
          const std::size_t te = align.segments[n].token_end;
          const std::size_t to = std::min(te + la, Y.size());
          window.insert(window.end(), Y.begin() + te, Y.begin() + to);
        }
        Tensor seg = slice_rows(X, n * W, std::min((n + 1) * W, S));
        expected.push_back(itts_segment_loss_value(itts, sv, window, seg));
        history.insert(history.end(), handoff[n].begin(), handoff[n].end());
      }

      REQUIRE(res.steps_total == N);
      REQUIRE(res.per_step.size() == expected.size());
      REQUIRE(res.steps_skipped == N - expected.size());
      if (expected.empty()) {
        REQUIRE(res.degenerate);
        continue;
      }
      double mean = 0.0;
      for (std::size_t i = 0; i < expected.size(); ++i) {
        mean += expected[i];
        REQUIRE(std::abs(res.per_step[i] - expected[i]) < 1e-10);
      }
      mean /= static_cast<double>(expected.size());
      REQUIRE(std::abs(res.loss - mean) < 1e-10);
    }
  }
}

TEST_CASE("text-loop loss equals independent per-step recomputation") {
  const std::size_t vocab = 10;
  const StreamConfig cfg = toy_stream_config();
  const std::size_t cpb = cfg.blocks.chars_per_block;
  const std::size_t lb = cfg.blocks.look_back_blocks * cpb;
  const std::size_t la = cfg.blocks.look_ahead_blocks * cpb;

  for (std::uint64_t seed = 1; seed <= 25; ++seed) {
    Rng rng(seed * 37 + 11);
    Recognizer isr = make_recognizer(seed + 30, vocab);
    Synthesizer itts = make_synthesizer(seed + 60, vocab);
    Recognizer teacher = make_recognizer(seed + 90, vocab);

    const std::size_t S = 12 + rng.uniform_int(0, 28);
    const std::size_t T = 6 + rng.uniform_int(0, 12);
    Tensor X = random_features(rng, S, 4);
    std::vector<std::size_t> Y = random_text(rng, T, vocab);

    for (int greedy = 0; greedy <= 1; ++greedy) {
      const IntermediateMode mode = greedy ? IntermediateMode::kGreedy
                                           : IntermediateMode::kTeacherForcing;
      SegmentAlignment align = compute_alignment(teacher, X, Y, cfg.blocks);
      ChainStepResult res = chain_step_itts_to_isr(
          isr, itts, Y, greedy ? nullptr : &X, greedy ? nullptr : &align, cfg,
          mode, false);

      // Reproduce the synthetic hand-off and target segmentation.
      struct Span {
        std::size_t tb, te, fb, fe;
      };
      std::vector<Span> spans;
      if (greedy) {
        const std::size_t main_sz = cfg.itts_main_char_blocks * cpb;
        for (std::size_t b = 0; b < Y.size(); b += main_sz)
          spans.push_back({b, std::min(b + main_sz, Y.size()), 0, 0});
      } else {
        for (const Segment& s : build_itts_segments(align).segments)
          spans.push_back({s.token_begin, s.token_end, s.frame_begin,
                           s.frame_end});
      }

      std::vector<Tensor> frames(spans.size());
      Synthesizer::StateValues sv = itts.initial_state();
      IttsStreamState gst;
      gst.decoder = itts.initial_state();
      for (std::size_t n = 0; n < spans.size(); ++n) {
        TokenWindow tw;
        tw.main.assign(Y.begin() + spans[n].tb, Y.begin() + spans[n].te);
        const std::size_t from = spans[n].tb > lb ? spans[n].tb - lb : 0;
        tw.look_back.assign(Y.begin() + from, Y.begin() + spans[n].tb);
        const std::size_t to = std::min(spans[n].te + la, Y.size());
        tw.look_ahead.assign(Y.begin() + spans[n].te, Y.begin() + to);
        if (greedy) {
          frames[n] =
              itts_step(itts, cfg, gst, tw, spans[n].te == Y.size()).frames;
        } else {
          frames[n] = itts_tf_segment_frames(itts, sv, tw.flattened(),
                                             slice_rows(X, spans[n].fb,
                                                        spans[n].fe));
        }
      }

      IsrCarry carry = isr_carry_init(isr);
      std::vector<double> expected;
      for (std::size_t n = 0; n < spans.size(); ++n) {
        if (frames[n].rows() == 0) continue;
        std::vector<std::size_t> targets(Y.begin() + spans[n].tb,
                                         Y.begin() + spans[n].te);
        if (n + 1 == spans.size()) targets.push_back(Vocab::kEos);
        targets.push_back(Vocab::kEob);
        expected.push_back(
            isr_segment_loss_value(isr, carry, frames[n], targets));
      }

      REQUIRE(res.steps_total == spans.size());
      REQUIRE(res.per_step.size() == expected.size());
      double mean = 0.0;
      for (std::size_t i = 0; i < expected.size(); ++i) {
        mean += expected[i];
        REQUIRE(std::abs(res.per_step[i] - expected[i]) < 1e-10);
      }
      mean /= static_cast<double>(expected.size());
      REQUIRE(std::abs(res.loss - mean) < 1e-10);
    }
  }
}

TEST_CASE("single-window loop collapses to the whole-utterance chain loss") {
  const std::size_t vocab = 9;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed * 13 + 3);
    const std::size_t S = 10 + rng.uniform_int(0, 20);
    const std::size_t T = 5 + rng.uniform_int(0, 10);

    StreamConfig cfg;
    cfg.blocks.frames_per_block = 4;
    cfg.blocks.main_blocks = (S + 3) / 4;  // one window spans the utterance
    cfg.blocks.look_back_blocks = 0;
    cfg.blocks.look_ahead_blocks = 0;
    cfg.blocks.chars_per_block = 32;  // one text segment spans the transcript
    cfg.itts_main_char_blocks = 2;
    cfg.max_tokens_per_step = 40;
    cfg.max_synth_steps = 30;

    Recognizer isr = make_recognizer(seed + 7, vocab);
    shift_bias(isr.params(), "dec/out/b", Vocab::kBos, -30.0);
    shift_bias(isr.params(), "dec/out/b", Vocab::kEos, -30.0);
    shift_bias(isr.params(), "dec/out/b", Vocab::kEob, -30.0);
    Synthesizer itts = make_synthesizer(seed + 77, vocab);
    Recognizer teacher = make_recognizer(seed + 777, vocab);

    Tensor X = random_features(rng, S, 4);
    std::vector<std::size_t> Y = random_text(rng, T, vocab);
    SegmentAlignment align = compute_alignment(teacher, X, Y, cfg.blocks);
    REQUIRE(align.segments.size() == 1);

    for (int greedy = 0; greedy <= 1; ++greedy) {
      const IntermediateMode mode = greedy ? IntermediateMode::kGreedy
                                           : IntermediateMode::kTeacherForcing;
      CAPTURE(seed, greedy, S, T);
      ChainStepResult inc_tts = chain_step_isr_to_itts(
          isr, itts, X, greedy ? nullptr : &Y, greedy ? nullptr : &align, cfg,
          mode, false);
      ChainStepResult whole_tts = chain_loss_asr_to_tts(
          isr, itts, X, greedy ? nullptr : &Y, cfg.max_tokens_per_step, mode,
          false);
      REQUIRE(inc_tts.steps_total == 1);
      REQUIRE_FALSE(inc_tts.degenerate);
      REQUIRE(inc_tts.loss == whole_tts.loss);

      ChainStepResult inc_asr = chain_step_itts_to_isr(
          isr, itts, Y, greedy ? nullptr : &X, greedy ? nullptr : &align, cfg,
          mode, false);
      ChainStepResult whole_asr = chain_loss_tts_to_asr(
          isr, itts, Y, greedy ? nullptr : &X, cfg.max_synth_steps, mode,
          false);
      REQUIRE(inc_asr.steps_total == 1);
      REQUIRE_FALSE(inc_asr.degenerate);
      REQUIRE(inc_asr.loss == whole_asr.loss);
    }
  }
}

TEST_CASE("loop gradients reach only the reconstructing component") {
  const std::size_t vocab = 10;
  const StreamConfig cfg = toy_stream_config();
  Rng rng(2024);
  Tensor X = random_features(rng, 22, 4);
  std::vector<std::size_t> Y = random_text(rng, 9, vocab);

  for (int greedy = 0; greedy <= 1; ++greedy) {
    const IntermediateMode mode = greedy ? IntermediateMode::kGreedy
                                         : IntermediateMode::kTeacherForcing;
    CAPTURE(greedy);

    SECTION(std::string("speech loop trains the synthesizer, ") +
            (greedy ? "greedy" : "teacher-forced")) {
      Recognizer isr = make_recognizer(11, vocab);
      shift_bias(isr.params(), "dec/out/b", Vocab::kBos, -8.0);
      shift_bias(isr.params(), "dec/out/b", Vocab::kEos, -8.0);
      shift_bias(isr.params(), "dec/out/b", Vocab::kEob, -4.0);
      Synthesizer itts = make_synthesizer(12, vocab);
      Recognizer teacher = make_recognizer(13, vocab);
      SegmentAlignment align = compute_alignment(teacher, X, Y, cfg.blocks);

      std::vector<Tensor> producer_vals = snapshot_params(isr.params());
      isr.params().zero_grad();
      itts.params().zero_grad();

      ChainStepResult res = chain_step_isr_to_itts(
          isr, itts, X, greedy ? nullptr : &Y, greedy ? nullptr : &align, cfg,
          mode, true);
      REQUIRE_FALSE(res.degenerate);
      REQUIRE(grads_all_zero(isr.params()));
      REQUIRE(grads_any_nonzero(itts.params()));

      AdamConfig ac;
      Adam adam(ac);
      adam.step(itts.params());
      std::size_t i = 0;
      for (const Parameter& p : isr.params())
        REQUIRE(bit_equal(p.value, producer_vals[i++]));
    }

    SECTION(std::string("text loop trains the recognizer, ") +
            (greedy ? "greedy" : "teacher-forced")) {
      Recognizer isr = make_recognizer(21, vocab);
      Synthesizer itts = make_synthesizer(22, vocab);
      Recognizer teacher = make_recognizer(23, vocab);
      SegmentAlignment align = compute_alignment(teacher, X, Y, cfg.blocks);

      std::vector<Tensor> producer_vals = snapshot_params(itts.params());
      isr.params().zero_grad();
      itts.params().zero_grad();

      ChainStepResult res = chain_step_itts_to_isr(
          isr, itts, Y, greedy ? nullptr : &X, greedy ? nullptr : &align, cfg,
          mode, true);
      REQUIRE_FALSE(res.degenerate);
      REQUIRE(grads_all_zero(itts.params()));
      REQUIRE(grads_any_nonzero(isr.params()));

      AdamConfig ac;
      Adam adam(ac);
      adam.step(isr.params());
      std::size_t i = 0;
      for (const Parameter& p : itts.params())
        REQUIRE(bit_equal(p.value, producer_vals[i++]));
    }

    SECTION(std::string("whole-utterance loop isolates the producer, ") +
            (greedy ? "greedy" : "teacher-forced")) {
      Recognizer isr = make_recognizer(31, vocab);
      shift_bias(isr.params(), "dec/out/b", Vocab::kBos, -8.0);
      shift_bias(isr.params(), "dec/out/b", Vocab::kEos, -8.0);
      Synthesizer itts = make_synthesizer(32, vocab);

      isr.params().zero_grad();
      itts.params().zero_grad();
      ChainStepResult r1 = chain_loss_asr_to_tts(
          isr, itts, X, greedy ? nullptr : &Y, 30, mode, true);
      REQUIRE_FALSE(r1.degenerate);
      REQUIRE(grads_all_zero(isr.params()));
      REQUIRE(grads_any_nonzero(itts.params()));

      isr.params().zero_grad();
      itts.params().zero_grad();
      ChainStepResult r2 = chain_loss_tts_to_asr(
          isr, itts, Y, greedy ? nullptr : &X, 30, mode, true);
      REQUIRE_FALSE(r2.degenerate);
      REQUIRE(grads_all_zero(itts.params()));
      REQUIRE(grads_any_nonzero(isr.params()));
    }
  }
}

TEST_CASE("empty hand-offs are dropped from the loss denominator") {
  const std::size_t vocab = 8;
  const StreamConfig cfg = toy_stream_config();
  const std::size_t W = cfg.blocks.window_frames();
  Rng rng(501);
  Tensor X = random_features(rng, 3 * W, 4);
  std::vector<std::size_t> Y = random_text(rng, 7, vocab);

  SECTION("teacher-forced step with a token-empty window") {
    Recognizer isr = make_recognizer(41, vocab);
    Synthesizer itts = make_synthesizer(42, vocab);

    // Hand-built alignment: the middle window holds no tokens.
    SegmentAlignment align;
    align.window_frames = W;
    align.total_frames = 3 * W;
    align.total_tokens = Y.size();
    align.segments = {{0, W, 0, 4}, {W, 2 * W, 4, 4}, {2 * W, 3 * W, 4, 7}};

    ChainStepResult res = chain_step_isr_to_itts(isr, itts, X, &Y, &align, cfg,
                                                 IntermediateMode::kTeacherForcing,
                                                 false);
    REQUIRE(res.steps_total == 3);
    REQUIRE(res.steps_skipped == 1);
    REQUIRE(res.per_step.size() == 2);
    REQUIRE_FALSE(res.degenerate);
    REQUIRE(std::abs(res.loss - (res.per_step[0] + res.per_step[1]) / 2.0) <
            1e-12);
    REQUIRE(res.mean_segment_tokens == Catch::Approx(Y.size() / 2.0));
  }

  SECTION("a stream that emits nothing is degenerate and moves nothing") {
    Recognizer isr = make_recognizer(43, vocab);
    shift_bias(isr.params(), "dec/out/b", Vocab::kEos, 50.0);
    Synthesizer itts = make_synthesizer(44, vocab);
    itts.params().zero_grad();

    ChainStepResult res = chain_step_isr_to_itts(
        isr, itts, X, nullptr, nullptr, cfg, IntermediateMode::kGreedy, true);
    REQUIRE(res.degenerate);
    REQUIRE(res.steps_total == 3);
    REQUIRE(res.steps_skipped == 3);
    REQUIRE(res.per_step.empty());
    REQUIRE(res.loss == 0.0);
    REQUIRE(grads_all_zero(itts.params()));

    ChainStepResult whole = chain_loss_asr_to_tts(
        isr, itts, X, nullptr, 20, IntermediateMode::kGreedy, true);
    REQUIRE(whole.degenerate);
    REQUIRE(whole.steps_skipped == 1);
    REQUIRE(grads_all_zero(itts.params()));
  }
}

TEST_CASE("loop steps reject inconsistent inputs") {
  const std::size_t vocab = 8;
  const StreamConfig cfg = toy_stream_config();
  Rng rng(77);
  Tensor X = random_features(rng, 20, 4);
  std::vector<std::size_t> Y = random_text(rng, 6, vocab);
  Recognizer isr = make_recognizer(51, vocab);
  Synthesizer itts = make_synthesizer(52, vocab);
  Recognizer teacher = make_recognizer(53, vocab);

  REQUIRE_THROWS_AS(
      chain_step_isr_to_itts(isr, itts, X, nullptr, nullptr, cfg,
                             IntermediateMode::kTeacherForcing, false),
      ConfigError);
  REQUIRE_THROWS_AS(
      chain_step_itts_to_isr(isr, itts, Y, nullptr, nullptr, cfg,
                             IntermediateMode::kTeacherForcing, false),
      ConfigError);
  REQUIRE_THROWS_AS(
      chain_step_itts_to_isr(isr, itts, {}, &X, nullptr, cfg,
                             IntermediateMode::kGreedy, false),
      std::invalid_argument);

  SegmentAlignment wrong = compute_alignment(teacher, X, Y, cfg.blocks);
  wrong.total_frames += 1;
  REQUIRE_THROWS_AS(
      chain_step_isr_to_itts(isr, itts, X, &Y, &wrong, cfg,
                             IntermediateMode::kTeacherForcing, false),
      std::invalid_argument);

  REQUIRE_THROWS_AS(
      chain_loss_asr_to_tts(isr, itts, X, nullptr, 20,
                            IntermediateMode::kTeacherForcing, false),
      ConfigError);
  REQUIRE_THROWS_AS(
      chain_loss_tts_to_asr(isr, itts, Y, nullptr, 20,
                            IntermediateMode::kTeacherForcing, false),
      ConfigError);
}

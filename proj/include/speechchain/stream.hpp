#pragma once

#include <chrono>
#include <sstream>
#include <string>
#include <vector>

#include "speechchain/alignment.hpp"
#include "speechchain/recognizer.hpp"
#include "speechchain/synthesizer.hpp"

namespace speechchain {

// Streaming inference settings. Caps exist purely to guarantee termination
// on badly trained models; a 0 means "use the derived default".
struct StreamConfig {
  BlockConfig blocks;
  std::size_t itts_main_char_blocks = 2;  // text-side main size, pure ITTS
  std::size_t max_tokens_per_step = 0;    // 0 -> 3 x chars_per_block
  std::size_t max_synth_steps = 0;        // 0 -> 3 x min steps + 2

  std::size_t token_cap() const {
    return max_tokens_per_step ? max_tokens_per_step
                               : 3 * blocks.chars_per_block;
  }

  // The synthesizer must cover at least one recognition window of frames
  // per non-final segment, so the consumer side of the loop never starves.
  std::size_t min_synth_steps(std::size_t r) const {
    return (blocks.window_frames() + r - 1) / r;
  }

  std::size_t synth_cap(std::size_t r) const {
    return max_synth_steps ? max_synth_steps : 3 * min_synth_steps(r) + 2;
  }
};

struct StepTrace {
  std::string stage;  // "isr" or "itts"
  std::size_t n = 0;
  std::size_t input_begin = 0, input_end = 0;  // frames (isr) / tokens (itts)
  std::size_t emitted_tokens = 0;
  std::size_t emitted_frames = 0;
  double modeled_delay_seconds = 0.0;
  double modeled_delay_characters = 0.0;
  double wall_ms = 0.0;
};

struct StreamResult {
  std::vector<std::size_t> tokens;  // content tokens in emission order
  Tensor frames;                    // [total x feature_dim], rows 0 if none
  std::vector<StepTrace> traces;
  bool finished = false;       // recognizer emitted end-of-sentence
  bool any_truncated = false;  // some step hit its cap
};

enum class StreamMode { kIsr, kItts, kIsrToItts, kIttsToIsr };

inline StreamMode parse_stream_mode(const std::string& s) {
  if (s == "isr") return StreamMode::kIsr;
  if (s == "itts") return StreamMode::kItts;
  if (s == "isr_to_itts") return StreamMode::kIsrToItts;
  if (s == "itts_to_isr") return StreamMode::kIttsToIsr;
  throw ConfigError("unknown stream mode '" + s + "'");
}

namespace detail {

class WallTimer {
 public:
  WallTimer() : start_(std::chrono::steady_clock::now()) {}
  double ms() const {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now() - start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

inline void append_frames(Tensor& acc, const Tensor& chunk) {
  if (chunk.rows() == 0) return;
  if (acc.numel() == 0) {
    acc = chunk;
    return;
  }
  if (acc.cols() != chunk.cols())
    throw ShapeError("frame accumulation: " + shape_str(acc.shape) + " vs " +
                     shape_str(chunk.shape));
  acc.shape[0] += chunk.rows();
  acc.data.insert(acc.data.end(), chunk.data.begin(), chunk.data.end());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// ISR streaming

struct IsrStreamState {
  Recognizer::StateValues decoder;
  std::size_t origin = 0;  // frame index where the next main window starts
  bool finished = false;   // end-of-sentence seen; stream is closed
};

// Fixed-width window around the main segment at `origin`: look-back frames
// that precede the utterance are zeros, main/look-ahead frames past its end
// repeat the final frame.
inline Tensor build_isr_window(const Tensor& features, std::size_t origin,
                               const BlockConfig& b) {
  const std::size_t d = features.cols();
  const std::size_t S = features.rows();
  const std::size_t lb = b.look_back_blocks * b.frames_per_block;
  const std::size_t span =
      (b.look_back_blocks + b.main_blocks + b.look_ahead_blocks) *
      b.frames_per_block;
  Tensor w({span, d});
  for (std::size_t i = 0; i < span; ++i) {
    if (origin + i < lb) continue;  // before the utterance: zeros
    const std::size_t t = std::min(origin + i - lb, S - 1);
    std::copy(features.row_ptr(t), features.row_ptr(t) + d, w.row_ptr(i));
  }
  return w;
}

struct IsrStepResult {
  std::vector<std::size_t> content;  // non-special tokens this step
  bool truncated = false;
};

// One recognition step: encode the window, decode greedily until the model
// closes the block (or the cap trips), carry the decoder state forward.
inline IsrStepResult isr_step(Recognizer& model, const StreamConfig& cfg,
                              IsrStreamState& state, const Tensor& window) {
  if (state.finished) throw StateError("isr stream already closed");
  if (cfg.blocks.frames_per_block != model.config().subsampling())
    throw ConfigError("frames_per_block must equal the encoder subsampling");
  Graph g;
  auto enc = model.encode(g, window);
  DecodeResult dec =
      model.decode_greedy_from(g, enc, state.decoder, cfg.token_cap());
  IsrStepResult out;
  out.truncated = dec.truncated;
  for (std::size_t t : dec.tokens) {
    if (t == Vocab::kEos) state.finished = true;
    if (!Vocab::is_special(t)) out.content.push_back(t);
  }
  return out;
}

inline StreamResult run_isr_stream(Recognizer& model, const Tensor& features,
                                   const StreamConfig& cfg,
                                   const FrameSpec& spec) {
  cfg.blocks.validate();
  const std::size_t S = features.rows();
  const std::size_t W = cfg.blocks.window_frames();
  const double delay = compute_delays(cfg.blocks, spec).isr_seconds;

  StreamResult res;
  IsrStreamState state;
  state.decoder = model.initial_state();
  std::size_t n = 0;
  while (state.origin < S && !state.finished) {
    detail::WallTimer timer;
    Tensor window = build_isr_window(features, state.origin, cfg.blocks);
    IsrStepResult step = isr_step(model, cfg, state, window);

    StepTrace tr;
    tr.stage = "isr";
    tr.n = n++;
    tr.input_begin = state.origin;
    tr.input_end = std::min(state.origin + W, S);
    tr.emitted_tokens = step.content.size();
    tr.modeled_delay_seconds = delay;
    tr.wall_ms = timer.ms();
    res.traces.push_back(tr);

    res.tokens.insert(res.tokens.end(), step.content.begin(),
                      step.content.end());
    res.any_truncated = res.any_truncated || step.truncated;
    state.origin += W;
  }
  res.finished = state.finished;
  return res;
}

// ---------------------------------------------------------------------------
// ITTS streaming

struct IttsStreamState {
  Synthesizer::StateValues decoder;
  std::size_t origin = 0;  // token index where the next main segment starts
};

struct TokenWindow {
  std::vector<std::size_t> look_back, main, look_ahead;

  std::vector<std::size_t> flattened() const {
    std::vector<std::size_t> all;
    all.reserve(look_back.size() + main.size() + look_ahead.size());
    all.insert(all.end(), look_back.begin(), look_back.end());
    all.insert(all.end(), main.begin(), main.end());
    all.insert(all.end(), look_ahead.begin(), look_ahead.end());
    return all;
  }
};

// One synthesis step over a main token segment plus surrounding context.
// Non-final segments must put out at least a recognition window's worth of
// frames; the final segment may stop as soon as the model raises the flag.
inline SynthesisResult itts_step(Synthesizer& model, const StreamConfig& cfg,
                                 IttsStreamState& state,
                                 const TokenWindow& window,
                                 bool final_segment) {
  if (window.main.empty())
    throw std::invalid_argument("itts_step: empty main segment");
  const std::size_t r = model.config().frames_per_step;
  Graph g;
  auto enc = model.encode_text(g, window.flattened());
  const std::size_t min_steps = final_segment ? 1 : cfg.min_synth_steps(r);
  return model.synthesize_greedy_from(g, enc, state.decoder, cfg.synth_cap(r),
                                      min_steps);
}

inline StreamResult run_itts_stream(Synthesizer& model,
                                    const std::vector<std::size_t>& tokens,
                                    const StreamConfig& cfg) {
  cfg.blocks.validate();
  if (tokens.empty())
    throw std::invalid_argument("itts stream: empty token sequence");
  const std::size_t cpb = cfg.blocks.chars_per_block;
  const std::size_t main_sz = cfg.itts_main_char_blocks * cpb;
  const std::size_t lb_sz = cfg.blocks.look_back_blocks * cpb;
  const std::size_t la_sz = cfg.blocks.look_ahead_blocks * cpb;

  StreamResult res;
  IttsStreamState state;
  state.decoder = model.initial_state();
  std::size_t n = 0;
  while (state.origin < tokens.size()) {
    detail::WallTimer timer;
    const std::size_t begin = state.origin;
    const std::size_t end = std::min(begin + main_sz, tokens.size());
    TokenWindow window;
    window.main.assign(tokens.begin() + begin, tokens.begin() + end);
    const std::size_t lb_from = begin >= lb_sz ? begin - lb_sz : 0;
    window.look_back.assign(tokens.begin() + lb_from, tokens.begin() + begin);
    const std::size_t la_to = std::min(end + la_sz, tokens.size());
    window.look_ahead.assign(tokens.begin() + end, tokens.begin() + la_to);
    const bool final_segment = end == tokens.size();

    SynthesisResult synth = itts_step(model, cfg, state, window, final_segment);

    StepTrace tr;
    tr.stage = "itts";
    tr.n = n++;
    tr.input_begin = begin;
    tr.input_end = end;
    tr.emitted_frames = synth.frames.rows();
    tr.modeled_delay_characters =
        static_cast<double>((end - begin) + (la_to - end));
    tr.wall_ms = timer.ms();
    res.traces.push_back(tr);

    detail::append_frames(res.frames, synth.frames);
    res.any_truncated = res.any_truncated || synth.truncated;
    state.origin = end;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Chained modes: strict alternation, producer step n feeds consumer step n
// before producer step n+1 begins.

inline StreamResult run_isr_to_itts(Recognizer& isr, Synthesizer& itts,
                                    const Tensor& features,
                                    const StreamConfig& cfg,
                                    const FrameSpec& spec) {
  cfg.blocks.validate();
  const std::size_t S = features.rows();
  const std::size_t W = cfg.blocks.window_frames();
  const std::size_t lb_sz =
      cfg.blocks.look_back_blocks * cfg.blocks.chars_per_block;
  const double delay = compute_delays(cfg.blocks, spec).isr_seconds;

  StreamResult res;
  IsrStreamState isr_state;
  isr_state.decoder = isr.initial_state();
  IttsStreamState itts_state;
  itts_state.decoder = itts.initial_state();
  std::size_t n = 0;
  while (isr_state.origin < S && !isr_state.finished) {
    detail::WallTimer timer;
    Tensor window = build_isr_window(features, isr_state.origin, cfg.blocks);
    IsrStepResult step = isr_step(isr, cfg, isr_state, window);

    StepTrace tr;
    tr.stage = "isr";
    tr.n = n;
    tr.input_begin = isr_state.origin;
    tr.input_end = std::min(isr_state.origin + W, S);
    tr.emitted_tokens = step.content.size();
    tr.modeled_delay_seconds = delay;
    tr.wall_ms = timer.ms();
    res.traces.push_back(tr);
    res.any_truncated = res.any_truncated || step.truncated;
    isr_state.origin += W;

    // Hand this step's text straight to the synthesizer. Look-back context
    // is the already-committed transcript; the future is unknown, so there
    // is no look-ahead on this path.
    if (!step.content.empty()) {
      detail::WallTimer synth_timer;
      TokenWindow tw;
      const std::size_t have = res.tokens.size();
      const std::size_t lb_from = have >= lb_sz ? have - lb_sz : 0;
      tw.look_back.assign(res.tokens.begin() + lb_from, res.tokens.end());
      tw.main = step.content;
      const bool final_segment =
          isr_state.finished || isr_state.origin >= S;
      SynthesisResult synth =
          itts_step(itts, cfg, itts_state, tw, final_segment);

      StepTrace st;
      st.stage = "itts";
      st.n = n;
      st.input_begin = have;
      st.input_end = have + step.content.size();
      st.emitted_frames = synth.frames.rows();
      st.modeled_delay_characters = static_cast<double>(step.content.size());
      st.wall_ms = synth_timer.ms();
      res.traces.push_back(st);
      detail::append_frames(res.frames, synth.frames);
      res.any_truncated = res.any_truncated || synth.truncated;
    }
    res.tokens.insert(res.tokens.end(), step.content.begin(),
                      step.content.end());
    ++n;
  }
  res.finished = isr_state.finished;
  return res;
}

inline StreamResult run_itts_to_isr(Synthesizer& itts, Recognizer& isr,
                                    const std::vector<std::size_t>& tokens,
                                    const StreamConfig& cfg) {
  cfg.blocks.validate();
  if (tokens.empty())
    throw std::invalid_argument("itts stream: empty token sequence");
  const std::size_t cpb = cfg.blocks.chars_per_block;
  const std::size_t main_sz = cfg.itts_main_char_blocks * cpb;
  const std::size_t lb_sz = cfg.blocks.look_back_blocks * cpb;
  const std::size_t la_sz = cfg.blocks.look_ahead_blocks * cpb;

  StreamResult res;
  IttsStreamState itts_state;
  itts_state.decoder = itts.initial_state();
  IsrStreamState isr_state;
  isr_state.decoder = isr.initial_state();
  std::size_t n = 0;
  while (itts_state.origin < tokens.size()) {
    detail::WallTimer timer;
    const std::size_t begin = itts_state.origin;
    const std::size_t end = std::min(begin + main_sz, tokens.size());
    TokenWindow window;
    window.main.assign(tokens.begin() + begin, tokens.begin() + end);
    const std::size_t lb_from = begin >= lb_sz ? begin - lb_sz : 0;
    window.look_back.assign(tokens.begin() + lb_from, tokens.begin() + begin);
    const std::size_t la_to = std::min(end + la_sz, tokens.size());
    window.look_ahead.assign(tokens.begin() + end, tokens.begin() + la_to);
    const bool final_segment = end == tokens.size();

    SynthesisResult synth =
        itts_step(itts, cfg, itts_state, window, final_segment);

    StepTrace tr;
    tr.stage = "itts";
    tr.n = n;
    tr.input_begin = begin;
    tr.input_end = end;
    tr.emitted_frames = synth.frames.rows();
    tr.modeled_delay_characters =
        static_cast<double>((end - begin) + (la_to - end));
    tr.wall_ms = timer.ms();
    res.traces.push_back(tr);
    res.any_truncated = res.any_truncated || synth.truncated;
    detail::append_frames(res.frames, synth.frames);
    itts_state.origin = end;

    // The recognizer transcribes this segment's synthetic speech as soon as
    // it lands; its decoder state persists across segments.
    if (!isr_state.finished) {
      detail::WallTimer isr_timer;
      Graph g;
      auto enc = isr.encode(g, synth.frames);
      DecodeResult dec = isr.decode_greedy_from(g, enc, isr_state.decoder,
                                                cfg.token_cap());
      StepTrace st;
      st.stage = "isr";
      st.n = n;
      st.input_begin = res.frames.rows() - synth.frames.rows();
      st.input_end = res.frames.rows();
      st.wall_ms = isr_timer.ms();
      for (std::size_t t : dec.tokens) {
        if (t == Vocab::kEos) isr_state.finished = true;
        if (!Vocab::is_special(t)) {
          res.tokens.push_back(t);
          ++st.emitted_tokens;
        }
      }
      res.any_truncated = res.any_truncated || dec.truncated;
      res.traces.push_back(st);
    }
    ++n;
  }
  res.finished = isr_state.finished;
  return res;
}

// Trace export, one line per step.
inline std::string trace_to_record(const std::string& id, const StepTrace& t) {
  std::ostringstream os;
  os << id << '\t' << t.stage << ' ' << t.n << ' ' << t.input_begin << '-'
     << t.input_end << " tokens=" << t.emitted_tokens
     << " frames=" << t.emitted_frames << " delay_s=" << t.modeled_delay_seconds
     << " delay_chars=" << t.modeled_delay_characters << " wall_ms=" << t.wall_ms;
  return os.str();
}

}  // namespace speechchain

#pragma once

#include <string>
#include <vector>

#include "speechchain/stream.hpp"

namespace speechchain {

// How the producing component generates the intermediate hand-off during
// closed-loop training: conditioned on ground truth, or free-running.
enum class IntermediateMode { kTeacherForcing, kGreedy };

inline IntermediateMode parse_intermediate_mode(const std::string& s) {
  if (s == "teacher_forcing") return IntermediateMode::kTeacherForcing;
  if (s == "greedy") return IntermediateMode::kGreedy;
  throw ConfigError("unknown intermediate mode '" + s + "'");
}

// Outcome of one closed-loop pass over a single utterance: the per-step
// losses that went into the average, plus how many steps produced nothing
// usable and were dropped from the denominator.
struct ChainStepResult {
  double loss = 0.0;
  std::vector<double> per_step;
  std::size_t steps_total = 0;
  std::size_t steps_skipped = 0;
  double mean_segment_tokens = 0.0;  // text-side tokens per used step
  bool degenerate = false;  // every step skipped; no gradients flowed
};

// ---------------------------------------------------------------------------
// Loss assembly (shared by supervised and closed-loop paths)

// Mean token cross-entropy over one decoded segment.
inline NodeRef assemble_ce_loss(Graph& g, const std::vector<NodeRef>& logits,
                                const std::vector<std::size_t>& targets) {
  if (logits.size() != targets.size() || targets.empty())
    throw std::invalid_argument("ce loss: logit/target count mismatch");
  NodeRef sum = g.cross_entropy(logits[0], targets[0]);
  for (std::size_t t = 1; t < targets.size(); ++t)
    sum = g.add(sum, g.cross_entropy(logits[t], targets[t]));
  return g.scale(sum, 1.0 / static_cast<double>(targets.size()));
}

// Frame regression (mean per-frame squared L2) plus stop-flag cross-entropy
// (the flag fires on the final group only).
inline NodeRef assemble_tts_loss(Graph& g,
                                 const std::vector<NodeRef>& frame_groups,
                                 const std::vector<NodeRef>& stop_logits,
                                 const Tensor& padded_reference) {
  if (frame_groups.empty() || frame_groups.size() != stop_logits.size())
    throw std::invalid_argument("tts loss: group/stop count mismatch");
  const std::size_t rows = padded_reference.rows();
  const std::size_t d = padded_reference.cols();
  if (rows % frame_groups.size() != 0)
    throw std::invalid_argument("tts loss: reference rows not grouped evenly");
  const std::size_t r = rows / frame_groups.size();
  NodeRef frame_sum{}, stop_sum{};
  for (std::size_t n = 0; n < frame_groups.size(); ++n) {
    Tensor ref_group({r * d});
    std::copy(padded_reference.row_ptr(n * r),
              padded_reference.row_ptr(n * r) + r * d, ref_group.data.begin());
    NodeRef sq = g.squared_error(frame_groups[n], g.constant(ref_group));
    NodeRef st =
        stop_loss_node(g, stop_logits[n], n + 1 == frame_groups.size());
    frame_sum = n == 0 ? sq : g.add(frame_sum, sq);
    stop_sum = n == 0 ? st : g.add(stop_sum, st);
  }
  return g.add(g.scale(frame_sum, 1.0 / static_cast<double>(rows)),
               g.scale(stop_sum, 1.0 / static_cast<double>(frame_groups.size())));
}

namespace detail {

inline Tensor pad_to_groups(const Tensor& reference, std::size_t r) {
  const std::size_t groups = (reference.rows() + r - 1) / r;
  Tensor padded({groups * r, reference.cols()});
  std::copy(reference.data.begin(), reference.data.end(), padded.data.begin());
  for (std::size_t t = reference.rows(); t < groups * r; ++t)
    std::copy(reference.row_ptr(reference.rows() - 1),
              reference.row_ptr(reference.rows() - 1) + reference.cols(),
              padded.row_ptr(t));
  return padded;
}

inline std::vector<std::size_t> segment_targets(
    const std::vector<std::size_t>& tokens, std::size_t begin, std::size_t end,
    bool final_segment) {
  std::vector<std::size_t> t(tokens.begin() + begin, tokens.begin() + end);
  if (final_segment) t.push_back(Vocab::kEos);
  t.push_back(Vocab::kEob);
  return t;
}

// Segment [begin, end) flanked by up to lb/la ground-truth context tokens.
inline std::vector<std::size_t> context_window(
    const std::vector<std::size_t>& tokens, std::size_t begin, std::size_t end,
    std::size_t lb_chars, std::size_t la_chars) {
  const std::size_t from = begin >= lb_chars ? begin - lb_chars : 0;
  const std::size_t to = std::min(end + la_chars, tokens.size());
  return {tokens.begin() + from, tokens.begin() + to};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Supervised losses, whole-utterance (the non-incremental training path)

inline NodeRef asr_supervised_loss(Graph& g, Recognizer& model,
                                   const Tensor& features,
                                   const std::vector<std::size_t>& targets) {
  auto enc = model.encode(g, features);
  auto tf = model.decode_teacher_forced(g, enc, targets);
  return assemble_ce_loss(g, tf.logits, targets);
}

inline NodeRef tts_supervised_loss(Graph& g, Synthesizer& model,
                                   const std::vector<std::size_t>& tokens,
                                   const Tensor& reference) {
  auto enc = model.encode_text(g, tokens);
  auto tf = model.synthesize_teacher_forced(g, enc, reference);
  return assemble_tts_loss(g, tf.frame_groups, tf.stop_logits,
                           tf.padded_reference);
}

// ---------------------------------------------------------------------------
// Segment-sequence unrolls: teacher-forced passes over a series of
// (input window, target segment) pairs with decoder state carried across
// segments inside one graph, so the models train the way they stream.

// Per-window mean cross-entropy losses for the recognizer.
inline std::vector<NodeRef> isr_unroll_ce(
    Graph& g, Recognizer& model, const std::vector<Tensor>& windows,
    const std::vector<std::vector<std::size_t>>& targets) {
  if (windows.size() != targets.size() || windows.empty())
    throw std::invalid_argument("isr unroll: window/target count mismatch");
  LstmState lstm = lstm_zero_state(g, model.config().dec_hidden);
  NodeRef context = g.constant(Tensor({model.config().state_dim()}, 0.0));
  std::size_t prev = Vocab::kBos;
  std::vector<NodeRef> losses;
  losses.reserve(windows.size());
  for (std::size_t n = 0; n < windows.size(); ++n) {
    auto enc = model.encode(g, windows[n]);
    std::vector<NodeRef> logits;
    logits.reserve(targets[n].size());
    for (std::size_t t : targets[n]) {
      auto s = model.step(g, enc, lstm, context, prev);
      logits.push_back(s.logits);
      lstm = s.lstm;
      context = s.context;
      prev = t;  // ground truth feed
    }
    losses.push_back(assemble_ce_loss(g, logits, targets[n]));
  }
  return losses;
}

// Per-segment frame + stop losses for the synthesizer.
inline std::vector<NodeRef> itts_unroll_loss(
    Graph& g, Synthesizer& model,
    const std::vector<std::vector<std::size_t>>& token_windows,
    const std::vector<Tensor>& frame_segments) {
  if (token_windows.size() != frame_segments.size() || token_windows.empty())
    throw std::invalid_argument("itts unroll: segment count mismatch");
  const std::size_t r = model.config().frames_per_step;
  const std::size_t d = model.config().feature_dim;
  LstmState l1 = lstm_zero_state(g, model.config().dec_hidden);
  LstmState l2 = lstm_zero_state(g, model.config().dec_hidden);
  NodeRef context = g.constant(Tensor({model.config().state_dim()}, 0.0));
  NodeRef prev_frame = g.constant(Tensor({d}, 0.0));
  std::vector<NodeRef> losses;
  losses.reserve(token_windows.size());
  for (std::size_t n = 0; n < token_windows.size(); ++n) {
    auto enc = model.encode_text(g, token_windows[n]);
    Tensor padded = detail::pad_to_groups(frame_segments[n], r);
    const std::size_t groups = padded.rows() / r;
    std::vector<NodeRef> frame_groups, stop_logits;
    for (std::size_t k = 0; k < groups; ++k) {
      auto s = model.step(g, enc, l1, l2, context, prev_frame);
      frame_groups.push_back(s.frames);
      stop_logits.push_back(s.stop_logit);
      l1 = s.l1;
      l2 = s.l2;
      context = s.context;
      Tensor truth({d});  // ground-truth previous frame for the next step
      std::copy(padded.row_ptr((k + 1) * r - 1),
                padded.row_ptr((k + 1) * r - 1) + d, truth.data.begin());
      prev_frame = g.constant(truth);
    }
    losses.push_back(assemble_tts_loss(g, frame_groups, stop_logits, padded));
  }
  return losses;
}

// Producer-side teacher-forced synthesis: predicted frames as plain values
// with value-carried state, on a throwaway graph — nothing here can receive
// gradients, which is exactly the point of the hand-off.
inline Tensor itts_tf_segment_frames(Synthesizer& model,
                                     Synthesizer::StateValues& sv,
                                     const std::vector<std::size_t>& window,
                                     const Tensor& reference_segment) {
  const std::size_t r = model.config().frames_per_step;
  const std::size_t d = model.config().feature_dim;
  Graph g;
  auto enc = model.encode_text(g, window);
  Tensor padded = detail::pad_to_groups(reference_segment, r);
  const std::size_t groups = padded.rows() / r;
  LstmState l1{g.constant(sv.h1), g.constant(sv.c1)};
  LstmState l2{g.constant(sv.h2), g.constant(sv.c2)};
  NodeRef context = g.constant(sv.context);
  NodeRef prev_frame = g.constant(sv.prev_frame);
  std::vector<NodeRef> frame_groups;
  for (std::size_t k = 0; k < groups; ++k) {
    auto s = model.step(g, enc, l1, l2, context, prev_frame);
    frame_groups.push_back(s.frames);
    l1 = s.l1;
    l2 = s.l2;
    context = s.context;
    Tensor truth({d});
    std::copy(padded.row_ptr((k + 1) * r - 1),
              padded.row_ptr((k + 1) * r - 1) + d, truth.data.begin());
    prev_frame = g.constant(truth);
  }
  g.forward();
  Tensor out({groups * r, d});
  for (std::size_t k = 0; k < groups; ++k) {
    const Tensor& fr = g.value(frame_groups[k]);
    std::copy(fr.data.begin(), fr.data.end(), out.row_ptr(k * r));
  }
  sv.h1 = g.value(l1.h);
  sv.c1 = g.value(l1.c);
  sv.h2 = g.value(l2.h);
  sv.c2 = g.value(l2.c);
  sv.context = g.value(context);
  sv.prev_frame = g.value(prev_frame);
  return out;
}

// ---------------------------------------------------------------------------
// Alignment extraction from a trained whole-utterance recognizer's attention.

inline SegmentAlignment compute_alignment(Recognizer& teacher,
                                          const Tensor& features,
                                          const std::vector<std::size_t>& tokens,
                                          const BlockConfig& blocks) {
  if (teacher.config().subsampling() != blocks.frames_per_block)
    throw ConfigError("frames_per_block must equal the teacher's subsampling");
  if (tokens.empty())
    throw std::invalid_argument("compute_alignment: empty transcript");
  Graph g;
  auto enc = teacher.encode(g, features);
  std::vector<std::size_t> targets = tokens;
  targets.push_back(Vocab::kEos);
  targets.push_back(Vocab::kEob);
  auto tf = teacher.decode_teacher_forced(g, enc, targets);
  g.forward();
  const std::size_t T = tokens.size();
  Tensor attn({T, enc.count});
  for (std::size_t t = 0; t < T; ++t) {
    const Tensor& row = g.value(tf.attn_rows[t]);
    std::copy(row.data.begin(), row.data.end(), attn.row_ptr(t));
  }
  return extract_alignment(attn, blocks, features.rows(), T);
}

// ---------------------------------------------------------------------------
// Closed-loop steps. Each direction trains only the reconstructing (second)
// component: the hand-off is discrete tokens or detached frame values, so the
// producer never appears in the consumer's graph.

namespace detail {

inline std::vector<std::size_t> tail_tokens(const std::vector<std::size_t>& v,
                                            std::size_t max_len) {
  const std::size_t from = v.size() > max_len ? v.size() - max_len : 0;
  return {v.begin() + from, v.end()};
}

// Averages the per-step losses and, when asked, pushes gradients into the
// consumer's parameters. Gradients accumulate: the caller zeroes them at
// batch boundaries.
inline void finish_chain_result(ChainStepResult& res, Graph& g,
                                const std::vector<NodeRef>& losses,
                                bool backprop) {
  if (losses.empty()) {
    res.degenerate = true;
    return;
  }
  NodeRef total = losses[0];
  for (std::size_t i = 1; i < losses.size(); ++i)
    total = g.add(total, losses[i]);
  total = g.scale(total, 1.0 / static_cast<double>(losses.size()));
  g.forward();
  for (NodeRef l : losses) res.per_step.push_back(g.value(l).data[0]);
  res.loss = g.value(total).data[0];
  if (backprop) {
    g.backward(total);
    g.accumulate_leaf_grads();
  }
}

}  // namespace detail

// Speech in, speech back out: the recognizer transcribes window by window and
// the synthesizer learns to reconstruct each window's frames from that text.
// Teacher-forcing mode hands over the ground-truth segment tokens (the
// sequence the recognizer's forced decode emits); greedy mode hands over its
// free-running output. Steps whose hand-off is empty are dropped from the
// average. Gradients reach the synthesizer only.
inline ChainStepResult chain_step_isr_to_itts(
    Recognizer& isr, Synthesizer& itts, const Tensor& features,
    const std::vector<std::size_t>* transcript,
    const SegmentAlignment* alignment, const StreamConfig& cfg,
    IntermediateMode mode, bool backprop) {
  cfg.blocks.validate();
  const std::size_t S = features.rows();
  const std::size_t W = cfg.blocks.window_frames();
  const std::size_t N = (S + W - 1) / W;
  const std::size_t lb_chars =
      cfg.blocks.look_back_blocks * cfg.blocks.chars_per_block;
  const std::size_t la_chars =
      cfg.blocks.look_ahead_blocks * cfg.blocks.chars_per_block;

  // Producer pass: one token segment per window.
  std::vector<std::vector<std::size_t>> handoff(N);
  if (mode == IntermediateMode::kTeacherForcing) {
    if (!transcript || !alignment)
      throw ConfigError(
          "teacher-forced loop direction needs a transcript and an alignment");
    if (alignment->segments.size() != N || alignment->total_frames != S ||
        alignment->total_tokens != transcript->size())
      throw std::invalid_argument("alignment does not match this utterance");
    for (std::size_t n = 0; n < N; ++n) {
      const Segment& s = alignment->segments[n];
      handoff[n].assign(transcript->begin() + s.token_begin,
                        transcript->begin() + s.token_end);
    }
  } else {
    IsrStreamState st;
    st.decoder = isr.initial_state();
    for (std::size_t n = 0; n < N && !st.finished; ++n) {
      Tensor window = build_isr_window(features, st.origin, cfg.blocks);
      handoff[n] = isr_step(isr, cfg, st, window).content;
      st.origin += W;
    }
  }

  // Consumer pass: reconstruct each window's frames from its segment.
  ChainStepResult res;
  res.steps_total = N;
  Graph g;
  std::vector<std::vector<std::size_t>> token_windows;
  std::vector<Tensor> frame_segments;
  std::vector<std::size_t> history;
  for (std::size_t n = 0; n < N; ++n) {
    if (handoff[n].empty()) {
      ++res.steps_skipped;
      continue;
    }
    std::vector<std::size_t> window = detail::tail_tokens(history, lb_chars);
    window.insert(window.end(), handoff[n].begin(), handoff[n].end());
    if (mode == IntermediateMode::kTeacherForcing && la_chars > 0) {
      const std::size_t te = alignment->segments[n].token_end;
      const std::size_t la_to = std::min(te + la_chars, transcript->size());
      window.insert(window.end(), transcript->begin() + te,
                    transcript->begin() + la_to);
    }
    token_windows.push_back(std::move(window));

    const std::size_t fb = n * W, fe = std::min(fb + W, S);
    Tensor seg({fe - fb, features.cols()});
    std::copy(features.row_ptr(fb), features.row_ptr(fb) + seg.numel(),
              seg.data.begin());
    frame_segments.push_back(std::move(seg));
    history.insert(history.end(), handoff[n].begin(), handoff[n].end());
  }
  if (!token_windows.empty()) {
    std::size_t handed = 0;
    for (const auto& h : handoff) handed += h.size();
    res.mean_segment_tokens =
        static_cast<double>(handed) / static_cast<double>(token_windows.size());
    auto losses = itts_unroll_loss(g, itts, token_windows, frame_segments);
    detail::finish_chain_result(res, g, losses, backprop);
  } else {
    res.degenerate = true;
  }
  return res;
}

// Text in, text back out: the synthesizer speaks segment by segment and the
// recognizer learns to transcribe each synthetic segment. Teacher-forcing
// mode conditions the synthesizer on the real frames (needs paired data);
// greedy mode lets it free-run over text alone. Gradients reach the
// recognizer only.
inline ChainStepResult chain_step_itts_to_isr(
    Recognizer& isr, Synthesizer& itts,
    const std::vector<std::size_t>& transcript, const Tensor* features,
    const SegmentAlignment* alignment, const StreamConfig& cfg,
    IntermediateMode mode, bool backprop) {
  cfg.blocks.validate();
  if (transcript.empty())
    throw std::invalid_argument("loop direction needs a nonempty transcript");
  const std::size_t cpb = cfg.blocks.chars_per_block;
  const std::size_t lb_chars = cfg.blocks.look_back_blocks * cpb;
  const std::size_t la_chars = cfg.blocks.look_ahead_blocks * cpb;

  // Segment spans over the transcript (and, teacher-forced, over the frames).
  struct Span {
    std::size_t tb, te;
    std::size_t fb = 0, fe = 0;  // teacher-forcing only
  };
  std::vector<Span> spans;
  if (mode == IntermediateMode::kTeacherForcing) {
    if (!features || !alignment)
      throw ConfigError(
          "teacher-forced loop direction needs features and an alignment");
    SegmentAlignment merged = build_itts_segments(*alignment);
    if (merged.total_tokens != transcript.size() ||
        merged.total_frames != features->rows())
      throw std::invalid_argument("alignment does not match this utterance");
    for (const Segment& s : merged.segments)
      spans.push_back({s.token_begin, s.token_end, s.frame_begin, s.frame_end});
  } else {
    const std::size_t main_sz = cfg.itts_main_char_blocks * cpb;
    for (std::size_t b = 0; b < transcript.size(); b += main_sz)
      spans.push_back({b, std::min(b + main_sz, transcript.size())});
  }

  // Producer pass: synthesize every segment with carried state.
  ChainStepResult res;
  res.steps_total = spans.size();
  std::vector<Tensor> synth_segments(spans.size());
  Synthesizer::StateValues sv = itts.initial_state();
  IttsStreamState greedy_state;
  greedy_state.decoder = itts.initial_state();
  for (std::size_t n = 0; n < spans.size(); ++n) {
    TokenWindow tw;
    tw.main.assign(transcript.begin() + spans[n].tb,
                   transcript.begin() + spans[n].te);
    const std::size_t lb_from =
        spans[n].tb >= lb_chars ? spans[n].tb - lb_chars : 0;
    tw.look_back.assign(transcript.begin() + lb_from,
                        transcript.begin() + spans[n].tb);
    const std::size_t la_to =
        std::min(spans[n].te + la_chars, transcript.size());
    tw.look_ahead.assign(transcript.begin() + spans[n].te,
                         transcript.begin() + la_to);
    if (mode == IntermediateMode::kTeacherForcing) {
      Tensor ref({spans[n].fe - spans[n].fb, features->cols()});
      std::copy(features->row_ptr(spans[n].fb),
                features->row_ptr(spans[n].fb) + ref.numel(), ref.data.begin());
      synth_segments[n] = itts_tf_segment_frames(itts, sv, tw.flattened(), ref);
    } else {
      const bool final_segment = spans[n].te == transcript.size();
      synth_segments[n] =
          itts_step(itts, cfg, greedy_state, tw, final_segment).frames;
    }
  }

  // Consumer pass: transcribe each synthetic segment, state carried.
  Graph g;
  std::vector<Tensor> windows;
  std::vector<std::vector<std::size_t>> targets;
  for (std::size_t n = 0; n < spans.size(); ++n) {
    if (synth_segments[n].rows() == 0) {
      ++res.steps_skipped;
      continue;
    }
    windows.push_back(synth_segments[n]);
    targets.push_back(detail::segment_targets(
        transcript, spans[n].tb, spans[n].te, n + 1 == spans.size()));
  }
  if (!windows.empty()) {
    std::size_t covered = 0;
    for (std::size_t n = 0; n < spans.size(); ++n)
      if (synth_segments[n].rows() > 0) covered += spans[n].te - spans[n].tb;
    res.mean_segment_tokens =
        static_cast<double>(covered) / static_cast<double>(windows.size());
    auto losses = isr_unroll_ce(g, isr, windows, targets);
    detail::finish_chain_result(res, g, losses, backprop);
  } else {
    res.degenerate = true;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Whole-utterance loop losses (the single-step chain the incremental loop
// collapses to when one window covers the utterance).

inline ChainStepResult chain_loss_asr_to_tts(
    Recognizer& isr, Synthesizer& itts, const Tensor& features,
    const std::vector<std::size_t>* transcript, std::size_t token_cap,
    IntermediateMode mode, bool backprop) {
  std::vector<std::size_t> handoff;
  if (mode == IntermediateMode::kTeacherForcing) {
    if (!transcript)
      throw ConfigError("teacher-forced loop direction needs a transcript");
    handoff = *transcript;
  } else {
    for (std::size_t t : recognize(isr, features, token_cap).tokens)
      if (!Vocab::is_special(t)) handoff.push_back(t);
  }
  ChainStepResult res;
  res.steps_total = 1;
  if (handoff.empty()) {
    res.steps_skipped = 1;
    res.degenerate = true;
    return res;
  }
  res.mean_segment_tokens = static_cast<double>(handoff.size());
  Graph g;
  NodeRef loss = tts_supervised_loss(g, itts, handoff, features);
  detail::finish_chain_result(res, g, {loss}, backprop);
  return res;
}

inline ChainStepResult chain_loss_tts_to_asr(
    Recognizer& isr, Synthesizer& itts,
    const std::vector<std::size_t>& transcript, const Tensor* features,
    std::size_t synth_cap, IntermediateMode mode, bool backprop) {
  if (transcript.empty())
    throw std::invalid_argument("loop direction needs a nonempty transcript");
  Tensor synth_frames;
  if (mode == IntermediateMode::kTeacherForcing) {
    if (!features)
      throw ConfigError("teacher-forced loop direction needs features");
    Synthesizer::StateValues sv = itts.initial_state();
    synth_frames = itts_tf_segment_frames(itts, sv, transcript, *features);
  } else {
    synth_frames = synthesize(itts, transcript, synth_cap).frames;
  }
  ChainStepResult res;
  res.steps_total = 1;
  if (synth_frames.rows() == 0) {
    res.steps_skipped = 1;
    res.degenerate = true;
    return res;
  }
  res.mean_segment_tokens = static_cast<double>(transcript.size());
  Graph g;
  std::vector<std::size_t> targets =
      detail::segment_targets(transcript, 0, transcript.size(), true);
  NodeRef loss = asr_supervised_loss(g, isr, synth_frames, targets);
  detail::finish_chain_result(res, g, {loss}, backprop);
  return res;
}

}  // namespace speechchain

#pragma once

#include <sstream>
#include <string>
#include <vector>

#include "speechchain/corpus.hpp"
#include "speechchain/tensor.hpp"
#include "speechchain/vocab.hpp"

namespace speechchain {

// Block geometry shared by both incremental systems. A speech block is
// frames_per_block consecutive frames (one encoder state's receptive span);
// a recognition window is main_blocks of them, optionally flanked by
// look-back and look-ahead blocks. Character blocks play the same role on
// the text side.
struct BlockConfig {
  std::size_t frames_per_block = 8;
  std::size_t main_blocks = 4;
  std::size_t look_back_blocks = 2;
  std::size_t look_ahead_blocks = 4;
  std::size_t chars_per_block = 5;

  std::size_t window_frames() const { return main_blocks * frames_per_block; }

  void validate() const {
    if (frames_per_block < 1 || main_blocks < 1 || chars_per_block < 1)
      throw ConfigError("block sizes must be positive");
  }
};

// One aligned segment: a half-open frame range and a half-open token range.
struct Segment {
  std::size_t frame_begin = 0, frame_end = 0;
  std::size_t token_begin = 0, token_end = 0;

  std::size_t width() const { return frame_end - frame_begin; }
  std::size_t tokens() const { return token_end - token_begin; }

  bool operator==(const Segment&) const = default;
};

struct SegmentAlignment {
  std::vector<Segment> segments;
  std::size_t total_frames = 0;   // S
  std::size_t total_tokens = 0;   // T
  std::size_t window_frames = 0;  // W, the fixed main-window width
  std::size_t repairs = 0;        // monotonicity clamps applied

  bool operator==(const SegmentAlignment& o) const {
    return segments == o.segments && total_frames == o.total_frames &&
           total_tokens == o.total_tokens && window_frames == o.window_frames;
  }
};

// Reduce a teacher attention matrix (one row per content token, one column
// per encoder state) to a segment alignment. Each token goes to the window
// containing its argmax state, ties toward the earlier state; windows are
// fixed strips of main_blocks x frames_per_block frames. A token whose
// argmax jumps backwards is clamped to the previous token's window so that
// token segments stay contiguous; clamps are counted in `repairs`.
inline SegmentAlignment extract_alignment(const Tensor& attention,
                                          const BlockConfig& cfg,
                                          std::size_t S, std::size_t T) {
  cfg.validate();
  if (S < 1 || T < 1)
    throw std::invalid_argument("extract_alignment: S and T must be >= 1");
  if (attention.rank() != 2 || attention.rows() != T)
    throw std::invalid_argument(
        "extract_alignment: attention has " + std::to_string(attention.rows()) +
        " rows, expected " + std::to_string(T));
  const std::size_t fpb = cfg.frames_per_block;
  const std::size_t n_states = (S + fpb - 1) / fpb;
  if (attention.cols() != n_states)
    throw std::invalid_argument(
        "extract_alignment: attention has " + std::to_string(attention.cols()) +
        " columns, expected " + std::to_string(n_states));

  const std::size_t W = cfg.window_frames();
  const std::size_t N = (S + W - 1) / W;

  SegmentAlignment out;
  out.total_frames = S;
  out.total_tokens = T;
  out.window_frames = W;

  std::vector<std::size_t> win(T);
  std::size_t prev = 0;
  for (std::size_t t = 0; t < T; ++t) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < n_states; ++j)
      if (attention.at(t, j) > attention.at(t, best)) best = j;
    std::size_t w = best / cfg.main_blocks;
    if (t > 0 && w < prev) {
      w = prev;
      ++out.repairs;
    }
    win[t] = w;
    prev = w;
  }

  out.segments.resize(N);
  std::size_t tok = 0;
  for (std::size_t n = 0; n < N; ++n) {
    Segment& seg = out.segments[n];
    seg.frame_begin = n * W;
    seg.frame_end = std::min((n + 1) * W, S);
    seg.token_begin = tok;
    while (tok < T && win[tok] == n) ++tok;
    seg.token_end = tok;
  }
  return out;
}

// ISR per-segment training targets: the segment's tokens plus end-of-block;
// the utterance-final segment carries end-of-sentence before end-of-block.
// `tokens` are the utterance's content token ids in order.
inline std::vector<std::vector<std::size_t>> build_isr_targets(
    const SegmentAlignment& alignment, const std::vector<std::size_t>& tokens) {
  if (tokens.size() != alignment.total_tokens)
    throw std::invalid_argument("build_isr_targets: token count " +
                                std::to_string(tokens.size()) +
                                " does not match alignment T " +
                                std::to_string(alignment.total_tokens));
  std::vector<std::vector<std::size_t>> targets;
  targets.reserve(alignment.segments.size());
  for (std::size_t n = 0; n < alignment.segments.size(); ++n) {
    const Segment& seg = alignment.segments[n];
    std::vector<std::size_t> t(tokens.begin() + seg.token_begin,
                               tokens.begin() + seg.token_end);
    if (n + 1 == alignment.segments.size()) t.push_back(Vocab::kEos);
    t.push_back(Vocab::kEob);
    targets.push_back(std::move(t));
  }
  return targets;
}

// ITTS needs every segment to own at least one token and at least a full
// window of frames. Token-less segments are merged: leading ones forward
// into the first token-bearing segment, the rest backward into their
// predecessor. A final segment left narrower than one window (the ragged
// tail of the utterance) is folded into its predecessor too.
inline SegmentAlignment build_itts_segments(const SegmentAlignment& a) {
  if (a.total_tokens == 0)
    throw std::invalid_argument("build_itts_segments: alignment has no tokens");
  SegmentAlignment out;
  out.total_frames = a.total_frames;
  out.total_tokens = a.total_tokens;
  out.window_frames = a.window_frames;
  out.repairs = a.repairs;

  bool leading = true;
  std::size_t pending_begin = 0;  // frame start of swallowed leading empties
  for (const Segment& seg : a.segments) {
    if (seg.tokens() == 0) {
      if (leading) continue;  // frames folded via pending_begin
      out.segments.back().frame_end = seg.frame_end;
      out.segments.back().token_end = seg.token_end;
      continue;
    }
    Segment s = seg;
    if (leading) {
      s.frame_begin = pending_begin;
      s.token_begin = 0;
      leading = false;
    }
    out.segments.push_back(s);
  }

  if (out.segments.size() >= 2 &&
      out.segments.back().width() < a.window_frames) {
    Segment tail = out.segments.back();
    out.segments.pop_back();
    out.segments.back().frame_end = tail.frame_end;
    out.segments.back().token_end = tail.token_end;
  }
  return out;
}

struct Delays {
  double isr_seconds = 0.0;
  double itts_characters = 0.0;
};

// Modeled per-step commitment delay. ISR must wait for the main window plus
// the look-ahead blocks before it may commit (look-back frames are already
// in the past and cost nothing); ITTS waits for its main character blocks
// (given as an average, since they vary with the alignment) plus look-ahead
// character blocks.
inline Delays compute_delays(const BlockConfig& cfg, const FrameSpec& spec,
                             double avg_main_char_blocks = 2.0) {
  cfg.validate();
  spec.validate();
  Delays d;
  d.isr_seconds = block_duration(
      spec, (cfg.main_blocks + cfg.look_ahead_blocks) * cfg.frames_per_block);
  d.itts_characters = (avg_main_char_blocks + cfg.look_ahead_blocks) *
                      static_cast<double>(cfg.chars_per_block);
  return d;
}

// Line format for offline inspection:
//   id <TAB> S T W <TAB> fb-fe:tb-te <SPACE> fb-fe:tb-te ...
inline std::string alignment_to_record(const std::string& id,
                                       const SegmentAlignment& a) {
  std::ostringstream os;
  os << id << '\t' << a.total_frames << ' ' << a.total_tokens << ' '
     << a.window_frames << '\t';
  for (std::size_t n = 0; n < a.segments.size(); ++n) {
    const Segment& s = a.segments[n];
    if (n) os << ' ';
    os << s.frame_begin << '-' << s.frame_end << ':' << s.token_begin << '-'
       << s.token_end;
  }
  return os.str();
}

inline std::pair<std::string, SegmentAlignment> alignment_from_record(
    const std::string& line) {
  const auto t1 = line.find('\t');
  const auto t2 = line.find('\t', t1 + 1);
  if (t1 == std::string::npos || t2 == std::string::npos)
    throw DataError("malformed alignment record: " + line);
  SegmentAlignment a;
  {
    std::istringstream head(line.substr(t1 + 1, t2 - t1 - 1));
    head >> a.total_frames >> a.total_tokens >> a.window_frames;
    if (!head) throw DataError("malformed alignment header: " + line);
  }
  std::istringstream body(line.substr(t2 + 1));
  std::string item;
  while (body >> item) {
    Segment s;
    char dash1, colon, dash2;
    std::istringstream is(item);
    is >> s.frame_begin >> dash1 >> s.frame_end >> colon >> s.token_begin >>
        dash2 >> s.token_end;
    if (!is || dash1 != '-' || colon != ':' || dash2 != '-')
      throw DataError("malformed alignment segment '" + item + "'");
    a.segments.push_back(s);
  }
  return {line.substr(0, t1), a};
}

}  // namespace speechchain

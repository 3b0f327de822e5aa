#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "speechchain/attention.hpp"
#include "speechchain/corpus.hpp"
#include "speechchain/graph.hpp"
#include "speechchain/lstm.hpp"
#include "speechchain/vocab.hpp"

namespace speechchain {

// Attention-based text-to-feature synthesizer. The decoder emits r frames
// per step plus a stop flag; text encoding is a recurrent layer over
// character embeddings (a toy-scale stand-in for a convolutional bank).
struct SynthesizerConfig {
  std::size_t feature_dim = 8;
  std::size_t embed_dim = 16;
  std::size_t enc_hidden = 16;  // per direction, one bidirectional layer
  std::size_t dec_hidden = 32;  // two stacked LSTM layers
  std::size_t prenet_dim = 16;
  std::size_t attn_dim = 16;
  std::size_t frames_per_step = 4;  // r
  std::size_t vocab_size = 0;
  std::size_t speaker_dim = 0;  // optional fixed conditioning vector
  double lrelu_slope = 0.01;
  double stop_threshold = 0.5;

  std::size_t state_dim() const { return 2 * enc_hidden; }

  void validate() const {
    if (feature_dim < 1 || embed_dim < 1 || enc_hidden < 1 || dec_hidden < 1 ||
        prenet_dim < 1 || attn_dim < 1 || frames_per_step < 1)
      throw ConfigError("synthesizer dimensions must be positive");
    if (vocab_size <= Vocab::kNumSpecial)
      throw ConfigError("synthesizer vocab_size must exceed the special tokens");
    if (stop_threshold <= 0.0 || stop_threshold >= 1.0)
      throw ConfigError("stop_threshold must lie in (0, 1)");
  }
};

struct SynthesisResult {
  Tensor frames;                   // [steps*r x feature_dim]
  std::vector<double> stop_probs;  // one per decoder step
  Tensor attention;                // [steps x token count]
  bool truncated = false;
};

struct SynthTeacherForcedResult {
  std::vector<NodeRef> frame_groups;  // each [r*feature_dim]
  std::vector<NodeRef> stop_logits;   // each [1]
  std::vector<NodeRef> attn_rows;     // each [token count]
  Tensor padded_reference;            // reference padded to a multiple of r
};

// Mean over frames of the squared Euclidean distance per frame. When the
// two sequences differ in length (greedy evaluation), the shorter one is
// padded with copies of its last frame.
inline double feature_loss(const Tensor& predicted, const Tensor& reference) {
  if (predicted.rank() != 2 || reference.rank() != 2 ||
      predicted.cols() != reference.cols())
    throw ShapeError("feature_loss: " + shape_str(predicted.shape) + " vs " +
                     shape_str(reference.shape));
  if (predicted.rows() == 0 || reference.rows() == 0)
    throw std::invalid_argument("feature_loss: empty sequence");
  const std::size_t frames = std::max(predicted.rows(), reference.rows());
  const std::size_t d = predicted.cols();
  double total = 0.0;
  for (std::size_t t = 0; t < frames; ++t) {
    const double* p = predicted.row_ptr(std::min(t, predicted.rows() - 1));
    const double* r = reference.row_ptr(std::min(t, reference.rows() - 1));
    for (std::size_t i = 0; i < d; ++i) {
      const double diff = p[i] - r[i];
      total += diff * diff;
    }
  }
  return total / static_cast<double>(frames);
}

// Binary cross-entropy of per-step stop probabilities against the target
// "last step stops, earlier steps do not". Reported separately from the
// frame loss.
inline double stop_bce(const std::vector<double>& stop_probs) {
  if (stop_probs.empty())
    throw std::invalid_argument("stop_bce: no decoder steps");
  double total = 0.0;
  for (std::size_t i = 0; i < stop_probs.size(); ++i) {
    const double p = std::clamp(stop_probs[i], 1e-12, 1.0 - 1e-12);
    const bool last = i + 1 == stop_probs.size();
    total += last ? -std::log(p) : -std::log(1.0 - p);
  }
  return total / static_cast<double>(stop_probs.size());
}

class Synthesizer {
 public:
  struct Encoded {
    NodeRef states;  // [T x state_dim]
    NodeRef keys;
    std::size_t count = 0;
  };

  struct StepOut {
    LstmState l1, l2;
    NodeRef context;
    NodeRef attn;
    NodeRef frames;      // [r*feature_dim]
    NodeRef stop_logit;  // [1]
  };

  // Value-level decoder state, detachable across graphs for streaming.
  struct StateValues {
    Tensor h1, c1, h2, c2, context, prev_frame;
  };

  Synthesizer(SynthesizerConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    ps_.add("enc/embed", {cfg_.vocab_size, cfg_.embed_dim}, rng);
    ps_.add("enc/proj/W", {cfg_.embed_dim, cfg_.enc_hidden}, rng);
    ps_.add("enc/proj/b", {cfg_.enc_hidden}, rng);
    add_lstm_params(ps_, "enc/l0/fw", cfg_.enc_hidden, cfg_.enc_hidden, rng);
    add_lstm_params(ps_, "enc/l0/bw", cfg_.enc_hidden, cfg_.enc_hidden, rng);
    ps_.add("dec/prenet/W", {cfg_.feature_dim, cfg_.prenet_dim}, rng);
    ps_.add("dec/prenet/b", {cfg_.prenet_dim}, rng);
    const std::size_t dec_in =
        cfg_.prenet_dim + cfg_.state_dim() + cfg_.speaker_dim;
    add_lstm_params(ps_, "dec/l1", dec_in, cfg_.dec_hidden, rng);
    add_lstm_params(ps_, "dec/l2", cfg_.dec_hidden, cfg_.dec_hidden, rng);
    add_attention_params(ps_, "attn", cfg_.state_dim(), cfg_.dec_hidden,
                         cfg_.attn_dim, rng);
    const std::size_t out_in = cfg_.dec_hidden + cfg_.state_dim();
    ps_.add("dec/frame/W", {out_in, cfg_.frames_per_step * cfg_.feature_dim},
            rng);
    ps_.add("dec/frame/b", {cfg_.frames_per_step * cfg_.feature_dim}, rng);
    ps_.add("dec/stop/W", {out_in, 1}, rng);
    ps_.add("dec/stop/b", {1}, rng);
    if (cfg_.speaker_dim > 0) ps_.add("dec/speaker", {cfg_.speaker_dim}, rng);
  }

  const SynthesizerConfig& config() const { return cfg_; }
  ParamSet& params() { return ps_; }
  const ParamSet& params() const { return ps_; }

  Encoded encode_text(Graph& g, const std::vector<std::size_t>& tokens) {
    if (tokens.empty())
      throw std::invalid_argument("encode_text: empty token sequence");
    for (std::size_t i = 0; i < tokens.size(); ++i)
      if (tokens[i] >= cfg_.vocab_size)
        throw std::invalid_argument("encode_text: token " +
                                    std::to_string(tokens[i]) + " at position " +
                                    std::to_string(i) + " outside vocabulary");
    NodeRef table = g.leaf(ps_.at("enc/embed"));
    std::vector<NodeRef> xs(tokens.size());
    for (std::size_t t = 0; t < tokens.size(); ++t)
      xs[t] = g.lrelu(
          g.add(g.matmul(g.row(table, tokens[t]), g.leaf(ps_.at("enc/proj/W"))),
                g.leaf(ps_.at("enc/proj/b"))),
          cfg_.lrelu_slope);
    xs = bilstm_layer(g, ps_, "enc/l0", xs);
    Encoded enc;
    enc.count = xs.size();
    enc.states = g.stack_rows(xs);
    enc.keys = attention_keys(g, ps_, "attn", enc.states);
    return enc;
  }

  StateValues initial_state() const {
    StateValues sv;
    sv.h1 = Tensor({cfg_.dec_hidden}, 0.0);
    sv.c1 = Tensor({cfg_.dec_hidden}, 0.0);
    sv.h2 = Tensor({cfg_.dec_hidden}, 0.0);
    sv.c2 = Tensor({cfg_.dec_hidden}, 0.0);
    sv.context = Tensor({cfg_.state_dim()}, 0.0);
    sv.prev_frame = Tensor({cfg_.feature_dim}, 0.0);
    return sv;
  }

  // One decoder step conditioned on the previous output frame.
  StepOut step(Graph& g, const Encoded& enc, const LstmState& l1,
               const LstmState& l2, NodeRef prev_context, NodeRef prev_frame) {
    NodeRef pre = g.lrelu(
        g.add(g.matmul(prev_frame, g.leaf(ps_.at("dec/prenet/W"))),
              g.leaf(ps_.at("dec/prenet/b"))),
        cfg_.lrelu_slope);
    NodeRef input = cfg_.speaker_dim > 0
                        ? g.concat({pre, prev_context,
                                    g.leaf(ps_.at("dec/speaker"))})
                        : g.concat({pre, prev_context});
    LstmState n1 = lstm_step(g, ps_.at("dec/l1/W"), ps_.at("dec/l1/b"), input,
                             l1);
    LstmState n2 = lstm_step(g, ps_.at("dec/l2/W"), ps_.at("dec/l2/b"), n1.h,
                             l2);
    AttentionOut att = attend(g, ps_, "attn", enc.keys, enc.states, n2.h);
    NodeRef head = g.concat({n2.h, att.context});
    NodeRef frames = g.add(g.matmul(head, g.leaf(ps_.at("dec/frame/W"))),
                           g.leaf(ps_.at("dec/frame/b")));
    NodeRef stop = g.add(g.matmul(head, g.leaf(ps_.at("dec/stop/W"))),
                         g.leaf(ps_.at("dec/stop/b")));
    return {n1, n2, att.context, att.weights, frames, stop};
  }

  SynthesisResult synthesize_greedy(Graph& g, const Encoded& enc,
                                    std::size_t max_steps) {
    StateValues sv = initial_state();
    return synthesize_greedy_from(g, enc, sv, max_steps, 0);
  }

  // Continue from carried decoder state. min_steps forces at least that
  // many groups before the stop flag may end the segment (the incremental
  // engine uses this to guarantee a window's worth of output).
  SynthesisResult synthesize_greedy_from(Graph& g, const Encoded& enc,
                                         StateValues& sv, std::size_t max_steps,
                                         std::size_t min_steps) {
    if (max_steps == 0)
      throw std::invalid_argument("synthesize: max_steps must be >= 1");
    SynthesisResult res;
    res.truncated = true;
    LstmState l1{g.constant(sv.h1), g.constant(sv.c1)};
    LstmState l2{g.constant(sv.h2), g.constant(sv.c2)};
    NodeRef context = g.constant(sv.context);
    NodeRef prev_frame = g.constant(sv.prev_frame);
    std::vector<double> frame_data, attn_data;
    const std::size_t rd = cfg_.frames_per_step * cfg_.feature_dim;
    std::size_t steps = 0;
    for (std::size_t t = 0; t < max_steps; ++t) {
      StepOut out = step(g, enc, l1, l2, context, prev_frame);
      NodeRef stop_prob = g.sigmoid(out.stop_logit);
      g.forward();
      const Tensor& fr = g.value(out.frames);
      frame_data.insert(frame_data.end(), fr.data.begin(), fr.data.end());
      const Tensor& at = g.value(out.attn);
      attn_data.insert(attn_data.end(), at.data.begin(), at.data.end());
      const double p_stop = g.value(stop_prob).data[0];
      res.stop_probs.push_back(p_stop);
      ++steps;
      l1 = out.l1;
      l2 = out.l2;
      context = out.context;
      prev_frame = g.slice(out.frames, rd - cfg_.feature_dim, cfg_.feature_dim);
      if (p_stop > cfg_.stop_threshold &&
          steps >= std::max<std::size_t>(min_steps, 1)) {
        res.truncated = false;
        break;
      }
    }
    sv.h1 = g.value(l1.h);
    sv.c1 = g.value(l1.c);
    sv.h2 = g.value(l2.h);
    sv.c2 = g.value(l2.c);
    sv.context = g.value(context);
    g.forward();
    sv.prev_frame = g.value(prev_frame);
    res.frames = Tensor({steps * cfg_.frames_per_step, cfg_.feature_dim},
                        std::move(frame_data));
    res.attention = Tensor({steps, enc.count}, std::move(attn_data));
    return res;
  }

  // Decoder consumes ground-truth previous frames; one prediction group per
  // r reference frames. A reference whose length is not a multiple of r is
  // right-padded with its last frame.
  SynthTeacherForcedResult synthesize_teacher_forced(Graph& g,
                                                     const Encoded& enc,
                                                     const Tensor& reference) {
    if (reference.rank() != 2 || reference.cols() != cfg_.feature_dim)
      throw ShapeError("teacher forcing: reference " +
                       shape_str(reference.shape) + " does not match feature dim " +
                       std::to_string(cfg_.feature_dim));
    if (reference.rows() == 0)
      throw std::invalid_argument("teacher forcing: empty reference");
    const std::size_t r = cfg_.frames_per_step;
    const std::size_t groups = (reference.rows() + r - 1) / r;
    Tensor padded({groups * r, cfg_.feature_dim});
    std::copy(reference.data.begin(), reference.data.end(),
              padded.data.begin());
    for (std::size_t t = reference.rows(); t < groups * r; ++t)
      std::copy(reference.row_ptr(reference.rows() - 1),
                reference.row_ptr(reference.rows() - 1) + cfg_.feature_dim,
                padded.row_ptr(t));

    SynthTeacherForcedResult out;
    out.padded_reference = padded;
    NodeRef ref_mat = g.constant(std::move(padded));
    LstmState l1 = lstm_zero_state(g, cfg_.dec_hidden);
    LstmState l2 = lstm_zero_state(g, cfg_.dec_hidden);
    NodeRef context = g.constant(Tensor({cfg_.state_dim()}, 0.0));
    NodeRef prev_frame = g.constant(Tensor({cfg_.feature_dim}, 0.0));
    for (std::size_t n = 0; n < groups; ++n) {
      StepOut s = step(g, enc, l1, l2, context, prev_frame);
      out.frame_groups.push_back(s.frames);
      out.stop_logits.push_back(s.stop_logit);
      out.attn_rows.push_back(s.attn);
      l1 = s.l1;
      l2 = s.l2;
      context = s.context;
      prev_frame = g.row(ref_mat, (n + 1) * r - 1);  // ground truth feed
    }
    return out;
  }

 private:
  SynthesizerConfig cfg_;
  ParamSet ps_;
};

// Stop-flag training target: step n stops iff it is the final group.
// Binary cross-entropy realized as two-class cross-entropy over the logit
// paired with a fixed zero, so sigmoid(logit) is the stop probability.
inline NodeRef stop_loss_node(Graph& g, NodeRef stop_logit, bool is_last) {
  NodeRef two_class = g.concat({stop_logit, g.constant(Tensor::scalar(0.0))});
  return g.cross_entropy(two_class, is_last ? 0 : 1);
}

// Convenience: encode + greedy synthesis on a private graph.
inline SynthesisResult synthesize(Synthesizer& model,
                                  const std::vector<std::size_t>& tokens,
                                  std::size_t max_steps) {
  Graph g;
  auto enc = model.encode_text(g, tokens);
  return model.synthesize_greedy(g, enc, max_steps);
}

}  // namespace speechchain

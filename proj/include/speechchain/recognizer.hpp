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

// Attention-based seq2seq recognizer. The same architecture serves as the
// non-incremental teacher, the non-incremental baseline, and the incremental
// student; only the feeding discipline differs.
struct RecognizerConfig {
  std::size_t feature_dim = 8;
  std::size_t enc_hidden = 16;  // per direction
  std::size_t enc_layers = 3;   // each halves the time axis
  std::size_t dec_hidden = 32;
  std::size_t embed_dim = 16;
  std::size_t attn_dim = 16;
  std::size_t vocab_size = 0;
  double lrelu_slope = 0.01;
  bool attention_history = false;  // extra scoring term fed by prev context

  std::size_t subsampling() const { return std::size_t{1} << enc_layers; }
  std::size_t state_dim() const { return 2 * enc_hidden; }

  void validate() const {
    if (feature_dim < 1 || enc_hidden < 1 || dec_hidden < 1 || embed_dim < 1 ||
        attn_dim < 1 || enc_layers < 1)
      throw ConfigError("recognizer dimensions must be positive");
    if (vocab_size <= Vocab::kNumSpecial)
      throw ConfigError("recognizer vocab_size must exceed the special tokens");
  }
};

struct DecodeResult {
  std::vector<std::size_t> tokens;
  Tensor attention;  // [tokens x encoder states]
  std::vector<double> log_probs;
  bool truncated = false;
};

struct TeacherForcedResult {
  std::vector<NodeRef> logits;     // one per reference position
  std::vector<NodeRef> attn_rows;  // one per reference position
  NodeRef states;                  // encoder states used
};

inline std::size_t levenshtein(const std::vector<std::size_t>& a,
                               const std::vector<std::size_t>& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// Character error rate in percent. Control tokens never count: both sides
// are stripped first.
inline double cer(const std::vector<std::size_t>& hyp,
                  const std::vector<std::size_t>& ref) {
  auto strip = [](const std::vector<std::size_t>& xs) {
    std::vector<std::size_t> out;
    out.reserve(xs.size());
    for (std::size_t x : xs)
      if (!Vocab::is_special(x)) out.push_back(x);
    return out;
  };
  const auto h = strip(hyp);
  const auto r = strip(ref);
  if (r.empty()) throw std::invalid_argument("cer: empty reference");
  return 100.0 * static_cast<double>(levenshtein(h, r)) /
         static_cast<double>(r.size());
}

class Recognizer {
 public:
  struct Encoded {
    NodeRef states;  // [n x state_dim]
    NodeRef keys;    // [n x attn_dim], precomputed for scoring
    std::size_t count = 0;
  };

  struct StepOut {
    LstmState lstm;
    NodeRef context;
    NodeRef attn;    // [n]
    NodeRef logits;  // [vocab]
  };

  // Decoder state as plain values, detachable across graphs. This is what
  // the incremental engine carries from one window to the next.
  struct StateValues {
    Tensor h, c, context;
    std::size_t prev_token = Vocab::kBos;
  };

  Recognizer(RecognizerConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    ps_.add("enc/proj/W", {cfg_.feature_dim, cfg_.enc_hidden}, rng);
    ps_.add("enc/proj/b", {cfg_.enc_hidden}, rng);
    for (std::size_t l = 0; l < cfg_.enc_layers; ++l) {
      const std::size_t in = l == 0 ? cfg_.enc_hidden : cfg_.state_dim();
      const std::string prefix = "enc/l" + std::to_string(l);
      add_lstm_params(ps_, prefix + "/fw", in, cfg_.enc_hidden, rng);
      add_lstm_params(ps_, prefix + "/bw", in, cfg_.enc_hidden, rng);
    }
    ps_.add("dec/embed", {cfg_.vocab_size, cfg_.embed_dim}, rng);
    add_lstm_params(ps_, "dec/lstm",
                    cfg_.embed_dim + cfg_.state_dim(), cfg_.dec_hidden, rng);
    add_attention_params(ps_, "attn", cfg_.state_dim(), cfg_.dec_hidden,
                         cfg_.attn_dim, rng, cfg_.attention_history);
    ps_.add("dec/out/W",
            {cfg_.dec_hidden + cfg_.state_dim(), cfg_.vocab_size}, rng);
    ps_.add("dec/out/b", {cfg_.vocab_size}, rng);
  }

  const RecognizerConfig& config() const { return cfg_; }
  ParamSet& params() { return ps_; }
  const ParamSet& params() const { return ps_; }

  // Encode a frame matrix into ceil(S / 2^L) states. Lengths that do not
  // divide by the subsampling factor are right-padded with the last frame.
  Encoded encode(Graph& g, const Tensor& features) {
    if (features.rank() != 2 || features.rows() == 0)
      throw std::invalid_argument("encode: empty feature sequence");
    if (features.cols() != cfg_.feature_dim)
      throw ShapeError("encode: feature dim " + std::to_string(features.cols()) +
                       " does not match configured " +
                       std::to_string(cfg_.feature_dim));
    const std::size_t factor = cfg_.subsampling();
    const std::size_t S = features.rows();
    const std::size_t padded = (S + factor - 1) / factor * factor;
    Tensor input({padded, cfg_.feature_dim});
    std::copy(features.data.begin(), features.data.end(), input.data.begin());
    for (std::size_t t = S; t < padded; ++t)
      std::copy(features.row_ptr(S - 1), features.row_ptr(S - 1) + features.cols(),
                input.row_ptr(t));

    NodeRef mat = g.constant(std::move(input));
    ParamSet& ps = ps_;
    std::vector<NodeRef> xs(padded);
    for (std::size_t t = 0; t < padded; ++t)
      xs[t] = g.lrelu(g.add(g.matmul(g.row(mat, t), g.leaf(ps.at("enc/proj/W"))),
                            g.leaf(ps.at("enc/proj/b"))),
                      cfg_.lrelu_slope);
    for (std::size_t l = 0; l < cfg_.enc_layers; ++l) {
      xs = bilstm_layer(g, ps, "enc/l" + std::to_string(l), xs);
      xs = subsample2(xs);
    }
    Encoded enc;
    enc.count = xs.size();
    enc.states = g.stack_rows(xs);
    enc.keys = attention_keys(g, ps, "attn", enc.states);
    return enc;
  }

  StateValues initial_state() const {
    StateValues sv;
    sv.h = Tensor({cfg_.dec_hidden}, 0.0);
    sv.c = Tensor({cfg_.dec_hidden}, 0.0);
    sv.context = Tensor({cfg_.state_dim()}, 0.0);
    sv.prev_token = Vocab::kBos;
    return sv;
  }

  // One decoder step: embed previous token, advance the LSTM, attend, score.
  StepOut step(Graph& g, const Encoded& enc, const LstmState& lstm,
               NodeRef prev_context, std::size_t prev_token) {
    if (prev_token >= cfg_.vocab_size)
      throw std::invalid_argument("decoder token " + std::to_string(prev_token) +
                                  " outside vocabulary");
    ParamSet& ps = ps_;
    NodeRef emb = g.row(g.leaf(ps.at("dec/embed")), prev_token);
    LstmState next = lstm_step(g, ps.at("dec/lstm/W"), ps.at("dec/lstm/b"),
                               g.concat({emb, prev_context}), lstm);
    AttentionOut att = attend(g, ps, "attn", enc.keys, enc.states, next.h,
                              cfg_.attention_history ? &prev_context : nullptr);
    NodeRef logits =
        g.add(g.matmul(g.concat({next.h, att.context}),
                       g.leaf(ps.at("dec/out/W"))),
              g.leaf(ps.at("dec/out/b")));
    return {next, att.context, att.weights, logits};
  }

  // Greedy decode from a fresh decoder state until end-of-sentence or
  // end-of-block, capped at max_len (sets the truncated flag).
  DecodeResult decode_greedy(Graph& g, const Encoded& enc,
                             std::size_t max_len) {
    StateValues sv = initial_state();
    return decode_greedy_from(g, enc, sv, max_len);
  }

  // Same, but continuing from (and updating) carried decoder state. The
  // carried state is value-level, so successive calls may use new graphs.
  DecodeResult decode_greedy_from(Graph& g, const Encoded& enc,
                                  StateValues& sv, std::size_t max_len) {
    if (enc.count == 0) throw std::invalid_argument("decode: no encoder states");
    if (max_len == 0) throw std::invalid_argument("decode: max_len must be >= 1");
    DecodeResult res;
    std::vector<double> attn_rows;
    LstmState lstm{g.constant(sv.h), g.constant(sv.c)};
    NodeRef context = g.constant(sv.context);
    std::size_t prev = sv.prev_token;
    res.truncated = true;
    for (std::size_t t = 0; t < max_len; ++t) {
      StepOut out = step(g, enc, lstm, context, prev);
      NodeRef logp = g.log_softmax(out.logits);
      g.forward();
      const Tensor& lp = g.value(logp);
      std::size_t best = 0;
      for (std::size_t i = 1; i < lp.numel(); ++i)
        if (lp.data[i] > lp.data[best]) best = i;
      res.tokens.push_back(best);
      res.log_probs.push_back(lp.data[best]);
      const Tensor& a = g.value(out.attn);
      attn_rows.insert(attn_rows.end(), a.data.begin(), a.data.end());
      lstm = out.lstm;
      context = out.context;
      prev = best;
      if (best == Vocab::kEos || best == Vocab::kEob) {
        res.truncated = false;
        break;
      }
    }
    sv.h = g.value(lstm.h);
    sv.c = g.value(lstm.c);
    sv.context = g.value(context);
    sv.prev_token = prev;
    res.attention = Tensor({res.tokens.size(), enc.count}, std::move(attn_rows));
    return res;
  }

  // Feed the reference sequence as decoder input; one logit row and one
  // attention row per reference position.
  TeacherForcedResult decode_teacher_forced(
      Graph& g, const Encoded& enc,
      const std::vector<std::size_t>& reference) {
    if (reference.empty())
      throw std::invalid_argument("teacher forcing: empty reference");
    for (std::size_t i = 0; i < reference.size(); ++i)
      if (reference[i] >= cfg_.vocab_size)
        throw std::invalid_argument("teacher forcing: token " +
                                    std::to_string(reference[i]) +
                                    " at position " + std::to_string(i) +
                                    " outside vocabulary");
    TeacherForcedResult out;
    out.states = enc.states;
    LstmState lstm = lstm_zero_state(g, cfg_.dec_hidden);
    NodeRef context = g.constant(Tensor({cfg_.state_dim()}, 0.0));
    std::size_t prev = Vocab::kBos;
    for (std::size_t t = 0; t < reference.size(); ++t) {
      StepOut s = step(g, enc, lstm, context, prev);
      out.logits.push_back(s.logits);
      out.attn_rows.push_back(s.attn);
      lstm = s.lstm;
      context = s.context;
      prev = reference[t];
    }
    return out;
  }

 private:
  RecognizerConfig cfg_;
  ParamSet ps_;
};

// Convenience: run encode + greedy decode on a private graph.
inline DecodeResult recognize(Recognizer& model, const Tensor& features,
                              std::size_t max_len) {
  Graph g;
  auto enc = model.encode(g, features);
  return model.decode_greedy(g, enc, max_len);
}

}  // namespace speechchain

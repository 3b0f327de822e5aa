#pragma once

#include <string>
#include <vector>

#include "speechchain/graph.hpp"
#include "speechchain/params.hpp"

namespace speechchain {

// LSTM cell built from graph primitives. One fused weight matrix holds the
// four gates in [input, forget, cell, output] order; the step input is the
// concatenation [x; h_prev].
inline void add_lstm_params(ParamSet& ps, const std::string& prefix,
                            std::size_t in_dim, std::size_t hidden, Rng& rng) {
  ps.add(prefix + "/W", {4 * hidden, in_dim + hidden}, rng);
  ps.add(prefix + "/b", {4 * hidden}, rng);
}

struct LstmState {
  NodeRef h, c;
};

inline LstmState lstm_zero_state(Graph& g, std::size_t hidden) {
  return {g.constant(Tensor({hidden}, 0.0)), g.constant(Tensor({hidden}, 0.0))};
}

inline LstmState lstm_step(Graph& g, Parameter& W, Parameter& b, NodeRef x,
                           const LstmState& prev) {
  const std::size_t hidden = b.value.numel() / 4;
  NodeRef pre = g.add(g.matmul(g.leaf(W), g.concat({x, prev.h})), g.leaf(b));
  NodeRef i = g.sigmoid(g.slice(pre, 0, hidden));
  NodeRef f = g.sigmoid(g.slice(pre, hidden, hidden));
  NodeRef cand = g.tanh(g.slice(pre, 2 * hidden, hidden));
  NodeRef o = g.sigmoid(g.slice(pre, 3 * hidden, hidden));
  NodeRef c = g.add(g.mul(f, prev.c), g.mul(i, cand));
  NodeRef h = g.mul(o, g.tanh(c));
  return {h, c};
}

// Run a unidirectional pass over a sequence; returns one hidden vector per
// input position.
inline std::vector<NodeRef> lstm_run(Graph& g, Parameter& W, Parameter& b,
                                     const std::vector<NodeRef>& xs,
                                     bool reverse) {
  const std::size_t hidden = b.value.numel() / 4;
  LstmState state = lstm_zero_state(g, hidden);
  std::vector<NodeRef> out(xs.size());
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const std::size_t t = reverse ? xs.size() - 1 - k : k;
    state = lstm_step(g, W, b, xs[t], state);
    out[t] = state.h;
  }
  return out;
}

// Bidirectional layer: forward and backward passes concatenated per step.
inline std::vector<NodeRef> bilstm_layer(Graph& g, ParamSet& ps,
                                         const std::string& prefix,
                                         const std::vector<NodeRef>& xs) {
  auto fw = lstm_run(g, ps.at(prefix + "/fw/W"), ps.at(prefix + "/fw/b"), xs,
                     false);
  auto bw = lstm_run(g, ps.at(prefix + "/bw/W"), ps.at(prefix + "/bw/b"), xs,
                     true);
  std::vector<NodeRef> out(xs.size());
  for (std::size_t t = 0; t < xs.size(); ++t)
    out[t] = g.concat({fw[t], bw[t]});
  return out;
}

// Keep every second step (t = 0, 2, 4, ...): temporal subsampling factor 2.
inline std::vector<NodeRef> subsample2(const std::vector<NodeRef>& xs) {
  std::vector<NodeRef> out;
  out.reserve((xs.size() + 1) / 2);
  for (std::size_t t = 0; t < xs.size(); t += 2) out.push_back(xs[t]);
  return out;
}

}  // namespace speechchain

#pragma once

#include <string>

#include "speechchain/graph.hpp"
#include "speechchain/params.hpp"

namespace speechchain {

// Additive (MLP-scored) soft attention:
//   score_j = v . tanh(K_j + Wq q [+ Wh hist] + b),   attn = softmax(score)
// Keys K = states Wk are query-independent, so they are projected once per
// encoded sequence and reused every decoding step.
inline void add_attention_params(ParamSet& ps, const std::string& prefix,
                                 std::size_t state_dim, std::size_t query_dim,
                                 std::size_t attn_dim, Rng& rng,
                                 bool history = false) {
  ps.add(prefix + "/Wk", {state_dim, attn_dim}, rng);
  ps.add(prefix + "/Wq", {query_dim, attn_dim}, rng);
  ps.add(prefix + "/b", {attn_dim}, rng);
  ps.add(prefix + "/v", {attn_dim}, rng);
  if (history) ps.add(prefix + "/Wh", {state_dim, attn_dim}, rng);
}

// states: [n x state_dim] stacked encoder states.
inline NodeRef attention_keys(Graph& g, ParamSet& ps, const std::string& prefix,
                              NodeRef states) {
  return g.matmul(states, g.leaf(ps.at(prefix + "/Wk")));
}

struct AttentionOut {
  NodeRef weights;  // [n], a probability distribution
  NodeRef context;  // [state_dim]
};

// history: previous context vector, used only when the Wh hook is enabled.
inline AttentionOut attend(Graph& g, ParamSet& ps, const std::string& prefix,
                           NodeRef keys, NodeRef states, NodeRef query,
                           const NodeRef* history = nullptr) {
  NodeRef add_term = g.matmul(query, g.leaf(ps.at(prefix + "/Wq")));
  if (history && ps.contains(prefix + "/Wh"))
    add_term = g.add(add_term,
                     g.matmul(*history, g.leaf(ps.at(prefix + "/Wh"))));
  add_term = g.add(add_term, g.leaf(ps.at(prefix + "/b")));
  NodeRef scores =
      g.matmul(g.tanh(g.add(keys, add_term)), g.leaf(ps.at(prefix + "/v")));
  NodeRef weights = g.softmax(scores);
  return {weights, g.matmul(weights, states)};
}

}  // namespace speechchain

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "speechchain/params.hpp"
#include "speechchain/tensor.hpp"

namespace speechchain {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moment buffers are addressed by parameter name
// so they survive checkpoint round trips independent of registration order.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  std::uint64_t step_count() const { return step_; }

  void step(ParamSet& params) {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (Parameter& p : params) {
      for (double gv : p.grad.data)
        if (!std::isfinite(gv))
          throw NumericError("non-finite gradient in parameter '" + p.name +
                             "'");
      Slot& s = slot(p);
      for (std::size_t i = 0; i < p.value.numel(); ++i) {
        const double g = p.grad.data[i];
        s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g;
        s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = s.m[i] / bc1;
        const double vhat = s.v[i] / bc2;
        p.value.data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  // Moment state exposure for checkpointing: two tensors per parameter.
  struct MomentEntry {
    std::string name;
    const std::vector<double>* m;
    const std::vector<double>* v;
  };

  std::vector<MomentEntry> moments() const {
    std::vector<MomentEntry> out;
    out.reserve(slots_.size());
    for (const auto& [name, s] : slots_)
      out.push_back({name, &s.m, &s.v});
    return out;
  }

  void restore_moment(const std::string& name, std::vector<double> m,
                      std::vector<double> v) {
    Slot s;
    s.m = std::move(m);
    s.v = std::move(v);
    slots_[name] = std::move(s);
  }

  void set_step_count(std::uint64_t t) { step_ = t; }

 private:
  struct Slot {
    std::vector<double> m, v;
  };

  Slot& slot(const Parameter& p) {
    auto it = slots_.find(p.name);
    if (it == slots_.end()) {
      Slot s;
      s.m.assign(p.value.numel(), 0.0);
      s.v.assign(p.value.numel(), 0.0);
      it = slots_.emplace(p.name, std::move(s)).first;
    } else if (it->second.m.size() != p.value.numel()) {
      throw ShapeError("optimizer state for '" + p.name +
                       "' does not match parameter size");
    }
    return it->second;
  }

  AdamConfig cfg_;
  std::uint64_t step_ = 0;
  std::map<std::string, Slot> slots_;
};

}  // namespace speechchain

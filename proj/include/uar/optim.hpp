#pragma once

#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "uar/autograd.hpp"

namespace uar::optim {

struct NamedParameter {
  std::string name;
  ag::Parameter* param = nullptr;
  bool decay = true;  // biases, gains and the mask logits are excluded from weight decay
};

// Adam with decoupled weight decay. Moments and step counts are kept per
// parameter so tensors that join training late get their own bias correction.
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  struct State {
    Matrix m;
    Matrix v;
    long step = 0;
  };

  AdamW() = default;
  explicit AdamW(Options opts) : opts_(opts) {}

  // Updates every listed parameter that carries a gradient.
  void step(std::span<const NamedParameter> params, double lr);

  const State* state(const ag::Parameter* p) const;
  // Restores saved moments (checkpoint resume).
  void set_state(const ag::Parameter* p, State s) { state_[p] = std::move(s); }
  const Options& options() const { return opts_; }

  // State keyed by parameter name, independent of where the tensors live.
  struct Snapshot {
    Options options;
    std::map<std::string, State> states;
  };
  Snapshot snapshot(std::span<const NamedParameter> params) const;
  static AdamW restore(const Snapshot& snap, std::span<const NamedParameter> params);

 private:
  Options opts_;
  std::unordered_map<const ag::Parameter*, State> state_;
};

double global_grad_norm(std::span<const NamedParameter> params);
// Scales all gradients so their global norm is at most max_norm; returns the pre-clip norm.
double clip_grad_norm(std::span<const NamedParameter> params, double max_norm);
void zero_grads(std::span<const NamedParameter> params);

}  // namespace uar::optim

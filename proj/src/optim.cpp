#include "uar/optim.hpp"

#include <cmath>

namespace uar::optim {

void AdamW::step(std::span<const NamedParameter> params, double lr) {
  for (const NamedParameter& np : params) {
    ag::Parameter& p = *np.param;
    if (p.grad.size() == 0) continue;
    State& s = state_[&p];
    if (s.m.size() == 0) {
      s.m.setZero(p.value.rows(), p.value.cols());
      s.v.setZero(p.value.rows(), p.value.cols());
    }
    ++s.step;
    s.m = opts_.beta1 * s.m + (1.0 - opts_.beta1) * p.grad;
    s.v = opts_.beta2 * s.v + (1.0 - opts_.beta2) * p.grad.cwiseAbs2();
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(s.step));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(s.step));
    if (np.decay && opts_.weight_decay > 0.0) p.value *= (1.0 - lr * opts_.weight_decay);
    p.value.array() -=
        lr * (s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + opts_.eps);
  }
}

const AdamW::State* AdamW::state(const ag::Parameter* p) const {
  auto it = state_.find(p);
  return it == state_.end() ? nullptr : &it->second;
}

double global_grad_norm(std::span<const NamedParameter> params) {
  double sq = 0.0;
  for (const NamedParameter& np : params) {
    if (np.param->grad.size() > 0) sq += np.param->grad.squaredNorm();
  }
  return std::sqrt(sq);
}

double clip_grad_norm(std::span<const NamedParameter> params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm && norm > 0.0) {
    const double f = max_norm / norm;
    for (const NamedParameter& np : params) {
      if (np.param->grad.size() > 0) np.param->grad *= f;
    }
  }
  return norm;
}

void zero_grads(std::span<const NamedParameter> params) {
  for (const NamedParameter& np : params) np.param->grad.resize(0, 0);
}

AdamW::Snapshot AdamW::snapshot(std::span<const NamedParameter> params) const {
  Snapshot snap{opts_, {}};
  for (const auto& np : params) {
    if (const State* st = state(np.param)) snap.states[np.name] = *st;
  }
  return snap;
}

AdamW AdamW::restore(const Snapshot& snap, std::span<const NamedParameter> params) {
  AdamW adam(snap.options);
  for (const auto& np : params) {
    auto it = snap.states.find(np.name);
    if (it != snap.states.end()) adam.set_state(np.param, it->second);
  }
  return adam;
}

}  // namespace uar::optim

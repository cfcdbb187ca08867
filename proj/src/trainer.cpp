#include "uar/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "uar/errors.hpp"
#include "uar/lsu.hpp"

namespace uar::train {

using nlohmann::json;

StageSchedule StageSchedule::two_stage(int stage1_epochs, int stage2_epochs, double stage2_lr_mult) {
  StageSchedule s;
  s.stages.push_back(Stage{1.0, 1.0, 0.0, stage1_epochs, false, 1.0});
  s.stages.push_back(Stage{1.0, 1.0, 1.0, stage2_epochs, true, stage2_lr_mult});
  return s;
}

void StageSchedule::validate() const {
  if (stages.empty()) throw ConfigError("schedule: at least one stage is required");
  for (const Stage& s : stages) {
    if (s.lambda_ce < 0 || s.lambda_global < 0 || s.lambda_mask < 0) {
      throw ConfigError("schedule: loss weights must be non-negative");
    }
    if (s.epochs < 0) throw ConfigError("schedule: negative epoch count");
    if (!(s.lr_mult > 0)) throw ConfigError("schedule: learning-rate multiplier must be positive");
    if (s.lambda_mask > 0 && !s.mask_enabled) {
      throw ConfigError("schedule: a mask loss weight requires the mask to be enabled");
    }
  }
}

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0)) throw ConfigError("optimizer: learning rate must be positive");
  if (!(clip_norm > 0)) throw ConfigError("optimizer: clip norm must be positive");
  if (weight_decay < 0) throw ConfigError("optimizer: weight decay must be non-negative");
  if (batch_size < 1) throw ConfigError("optimizer: batch size must be positive");
  if (warmup_steps < 0) throw ConfigError("optimizer: warmup must be non-negative");
}

double total_loss(const std::array<double, 3>& lambda, const std::array<double, 3>& c) {
  return lambda[0] * c[0] + lambda[1] * c[1] + lambda[2] * c[2];
}

json TrainReport::to_json() const {
  json epochs_json = json::array();
  for (const EpochLog& e : epochs) {
    epochs_json.push_back({{"stage", e.stage},
                           {"epoch", e.epoch},
                           {"L_CE", e.ce},
                           {"L_Global", e.global},
                           {"L_Mask", e.mask},
                           {"val_L_CE", e.val_ce},
                           {"val_metrics", e.val_metrics.to_json()}});
  }
  return json{{"initial_val_L_CE", initial_val_ce},
              {"epochs", std::move(epochs_json)},
              {"best_epoch", best_epoch},
              {"best_val_BLEU-4", best_val_bleu4},
              {"best_checkpoint", best_checkpoint}};
}

namespace {

// Linear warmup then cosine decay to a tenth of the peak over the stage.
double lr_factor(long step, long warmup, long total) {
  if (warmup > 0 && step < warmup) return static_cast<double>(step + 1) / static_cast<double>(warmup);
  const long span = std::max(1L, total - warmup);
  const double progress = std::clamp(static_cast<double>(step - warmup) / static_cast<double>(span), 0.0, 1.0);
  return 0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * progress));
}

struct Snapshot {
  std::vector<Matrix> values;
  bool mask_active = false;
};

Snapshot snapshot(UarModel& model) {
  Snapshot s;
  for (const auto& np : model.named_parameters()) s.values.push_back(np.param->value);
  s.mask_active = model.mask_active;
  return s;
}

void restore(UarModel& model, const Snapshot& s) {
  const auto params = model.named_parameters();
  for (size_t i = 0; i < params.size(); ++i) params[i].param->value = s.values[i];
  model.mask_active = s.mask_active;
}

}  // namespace

double validation_ce(const UarModel& model, std::span<const ModelSample> samples, bool mask_enabled) {
  if (samples.empty()) return 0.0;
  const FeatureTables tables = feature_tables(model);
  double total = 0.0;
  for (const ModelSample& s : samples) {
    const std::span<const int> text(s.text);
    const tir::DecoderOutput out =
        tir::forward(visual_features(model, tables, s), text_features(tables, text.first(text.size() - 1)),
                     model.transformer, mask_enabled);
    total += tir::cross_entropy_loss(out.distributions, text.subspan(1), lsu::TextVocabulary::kPad);
  }
  return total / static_cast<double>(samples.size());
}

std::vector<std::string> generate_reports(const UarModel& model, std::span<const ModelSample> samples,
                                          const lsu::TextVocabulary* vocab, int max_len, int beam_width) {
  const FeatureTables tables = feature_tables(model);
  tir::GenerateOptions opts;
  opts.strategy = beam_width > 1 ? tir::DecodeStrategy::kBeam : tir::DecodeStrategy::kGreedy;
  opts.beam_width = beam_width;
  opts.max_len = max_len;
  std::vector<std::string> out;
  for (const ModelSample& s : samples) {
    const std::vector<int> ids = generate_report(model, tables, s, opts);
    if (vocab != nullptr) {
      out.push_back(vocab->decode(ids));
    } else {
      std::string t;
      for (int id : ids) {
        if (id <= lsu::TextVocabulary::kEos) continue;
        if (!t.empty()) t += ' ';
        t += "w" + std::to_string(id);
      }
      out.push_back(t);
    }
  }
  return out;
}

TrainReport train_two_stage(UarModel& model, TrainingData& data, const StageSchedule& schedule,
                            const OptimizerConfig& optimizer, const TrainHooks& hooks, optim::AdamW* external) {
  schedule.validate();
  optimizer.validate();
  if (data.train.empty()) throw EmptyCorpus("train_two_stage: empty training split");

  const auto params = model.named_parameters();
  optim::AdamW local(optim::AdamW::Options{0.9, 0.999, 1e-8, optimizer.weight_decay});
  optim::AdamW& adam = external != nullptr ? *external : local;
  std::mt19937_64 rng(optimizer.seed * 0x9E3779B97F4A7C15ULL + 17);

  TrainReport report;
  for (ag::Parameter* m : model.mask_parameters()) report.mask_initial.push_back(m->value);
  report.initial_val_ce = validation_ce(model, data.val, schedule.stages.front().mask_enabled);
  std::optional<Snapshot> best;

  const auto n = static_cast<long>(data.train.size());
  const long steps_per_epoch = (n + optimizer.batch_size - 1) / optimizer.batch_size;
  int global_epoch = 0;
  std::vector<int> order(static_cast<size_t>(n));

  for (size_t si = 0; si < schedule.stages.size(); ++si) {
    const Stage& stage = schedule.stages[si];
    model.mask_active = stage.mask_enabled;
    const long total_steps = steps_per_epoch * stage.epochs;
    long step = 0;
    const std::array<double, 3> lambda{stage.lambda_ce, stage.lambda_global, stage.lambda_mask};
    for (int e = 0; e < stage.epochs; ++e) {
      ++global_epoch;
      if (data.augment) data.augment(global_epoch, data.train);
      std::iota(order.begin(), order.end(), 0);
      for (long i = n - 1; i > 0; --i) {
        const long j = static_cast<long>(rng() % static_cast<std::uint64_t>(i + 1));
        std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
      }
      EpochLog log;
      log.stage = static_cast<int>(si) + 1;
      log.epoch = global_epoch;
      for (long b = 0; b < steps_per_epoch; ++b, ++step) {
        std::vector<const ModelSample*> batch;
        for (long k = b * optimizer.batch_size; k < std::min(n, (b + 1) * optimizer.batch_size); ++k) {
          batch.push_back(&data.train[static_cast<size_t>(order[static_cast<size_t>(k)])]);
        }
        ag::Tape tape;
        ForwardOptions fo;
        fo.mask_enabled = stage.mask_enabled;
        fo.training = true;
        fo.rng = &rng;
        const BatchLoss bl = batch_loss(tape, model, batch, fo);
        const std::array<double, 3> comps{bl.ce.value()(0, 0), bl.global.value()(0, 0), bl.mask.value()(0, 0)};
        const double loss = total_loss(lambda, comps);
        if (!std::isfinite(loss)) {
          throw NonFinite("train: non-finite loss at epoch " + std::to_string(global_epoch));
        }
        const std::vector<ag::Var> terms{bl.ce, bl.global, bl.mask};
        const ag::Var objective = ag::linear_combination(terms, lambda);
        optim::zero_grads(params);
        tape.backward(objective);
        optim::clip_grad_norm(params, optimizer.clip_norm);
        const double lr = optimizer.learning_rate * stage.lr_mult *
                          lr_factor(step, optimizer.warmup_steps, total_steps);
        adam.step(params, lr);
        report.step_losses.push_back(loss);
        log.ce += comps[0];
        log.global += comps[1];
        log.mask += comps[2];
      }
      log.ce /= static_cast<double>(steps_per_epoch);
      log.global /= static_cast<double>(steps_per_epoch);
      log.mask /= static_cast<double>(steps_per_epoch);
      log.val_ce = validation_ce(model, data.val, stage.mask_enabled);
      if (!std::isfinite(log.val_ce)) throw NonFinite("train: non-finite validation loss");
      if (data.generate_on_validation && !data.val.empty()) {
        if (static_cast<size_t>(data.val.size()) != data.val_references.size()) {
          throw ShapeError("train: one validation reference per sample required");
        }
        const auto cands = generate_reports(model, data.val, data.vocab, data.max_len, 1);
        log.val_metrics = eval::evaluate(cands, data.val_references);
      }
      const double score = log.val_metrics.bleu[3];
      // Without generation every epoch ties at 0, and >= keeps the latest one.
      const bool better = data.generate_on_validation ? score > report.best_val_bleu4 : true;
      if (better) {
        report.best_val_bleu4 = score;
        report.best_epoch = global_epoch;
        best = snapshot(model);
        if (hooks.on_best) hooks.on_best(model, log);
      }
      report.epochs.push_back(log);
      if (hooks.on_epoch) hooks.on_epoch(log);
    }
    std::vector<Matrix> masks;
    for (ag::Parameter* p : model.mask_parameters()) masks.push_back(p->value);
    report.mask_after_stage.push_back(std::move(masks));
    if (hooks.on_stage_end) hooks.on_stage_end(static_cast<int>(si) + 1, model);
  }
  if (best) restore(model, *best);
  return report;
}

// ---- gradient verification ---------------------------------------------------

FdResult finite_difference_check(const std::function<ag::Var(ag::Tape&)>& build,
                                 std::span<const optim::NamedParameter> params, const FdOptions& opts) {
  if (!(opts.epsilon >= 1e-6 && opts.epsilon <= 1e-3)) throw ConfigError("finite differences: epsilon outside [1e-6, 1e-3]");
  std::vector<Matrix> analytic;
  {
    ag::Tape tape;
    const ag::Var loss = build(tape);
    if (!std::isfinite(loss.value()(0, 0))) throw NonFinite("finite differences: loss is not finite");
    optim::zero_grads(params);
    tape.backward(loss);
    for (const auto& np : params) {
      analytic.push_back(np.param->grad.size() == 0 ? Matrix::Zero(np.param->value.rows(), np.param->value.cols())
                                                    : np.param->grad);
    }
  }
  auto evaluate = [&]() {
    ag::Tape tape(false);
    const double v = build(tape).value()(0, 0);
    if (!std::isfinite(v)) throw NonFinite("finite differences: loss is not finite at a probe");
    return v;
  };

  // (tensor, flat index) pairs
  std::vector<std::pair<size_t, Index>> coords;
  Index total = 0;
  for (const auto& np : params) total += np.param->value.size();
  if (total <= opts.samples) {
    for (size_t t = 0; t < params.size(); ++t) {
      for (Index i = 0; i < params[t].param->value.size(); ++i) coords.emplace_back(t, i);
    }
  } else {
    std::mt19937_64 rng(opts.seed + 0x51ED);
    std::vector<Index> flat(static_cast<size_t>(total));
    std::iota(flat.begin(), flat.end(), 0);
    for (int k = 0; k < opts.samples; ++k) {
      const auto j = static_cast<size_t>(k) + static_cast<size_t>(rng() % static_cast<std::uint64_t>(total - k));
      std::swap(flat[static_cast<size_t>(k)], flat[j]);
      Index f = flat[static_cast<size_t>(k)];
      size_t t = 0;
      while (f >= params[t].param->value.size()) f -= params[t++].param->value.size();
      coords.emplace_back(t, f);
    }
  }

  FdResult r;
  for (const auto& [t, i] : coords) {
    double& theta = params[t].param->value.data()[i];
    const double saved = theta;
    theta = saved + opts.epsilon;
    const double fp = evaluate();
    theta = saved - opts.epsilon;
    const double fm = evaluate();
    theta = saved;
    const double numeric = (fp - fm) / (2.0 * opts.epsilon);
    const double a = analytic[t].data()[i];
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    if (rel > r.max_relative_error) {
      r.max_relative_error = rel;
      r.worst_analytic = a;
    }
    if (rel > 1e-4) ++r.above_1e4;
    ++r.coordinates;
  }
  optim::zero_grads(params);
  return r;
}

FdResult finite_difference_check(const std::function<double(const Eigen::VectorXd&)>& f,
                                 const Eigen::VectorXd& theta, const Eigen::VectorXd& analytic, double epsilon) {
  if (!(epsilon >= 1e-6 && epsilon <= 1e-3)) throw ConfigError("finite differences: epsilon outside [1e-6, 1e-3]");
  if (analytic.size() != theta.size()) throw ShapeError("finite differences: gradient size mismatch");
  FdResult r;
  Eigen::VectorXd x = theta;
  if (!std::isfinite(f(x))) throw NonFinite("finite differences: loss is not finite");
  for (Index i = 0; i < theta.size(); ++i) {
    x(i) = theta(i) + epsilon;
    const double fp = f(x);
    x(i) = theta(i) - epsilon;
    const double fm = f(x);
    x(i) = theta(i);
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw NonFinite("finite differences: loss is not finite at a probe");
    const double numeric = (fp - fm) / (2.0 * epsilon);
    const double rel = std::abs(analytic(i) - numeric) / std::max({std::abs(analytic(i)), std::abs(numeric), 1e-8});
    if (rel > r.max_relative_error) {
      r.max_relative_error = rel;
      r.worst_analytic = analytic(i);
    }
    if (rel > 1e-4) ++r.above_1e4;
    ++r.coordinates;
  }
  return r;
}

}  // namespace uar::train

#pragma once

// Two-stage optimization driver, validation-based selection and the
// finite-difference gradient harness.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "uar/eval.hpp"
#include "uar/lsu.hpp"
#include "uar/model.hpp"
#include "uar/optim.hpp"

namespace uar::train {

struct Stage {
  double lambda_ce = 1.0;
  double lambda_global = 1.0;
  double lambda_mask = 0.0;
  int epochs = 0;
  bool mask_enabled = false;
  double lr_mult = 1.0;
};

struct StageSchedule {
  std::vector<Stage> stages;

  // (1,1,0) without the mask, then (1,1,1) with it at lr * stage2_lr_mult.
  static StageSchedule two_stage(int stage1_epochs, int stage2_epochs, double stage2_lr_mult = 0.5);
  // Throws ConfigError on an empty schedule or negative weights.
  void validate() const;
};

struct OptimizerConfig {
  double learning_rate = 3e-4;
  double weight_decay = 1e-2;
  double clip_norm = 1.0;
  int batch_size = 16;
  int warmup_steps = 50;
  std::uint64_t seed = 0;

  void validate() const;
};

double total_loss(const std::array<double, 3>& lambda, const std::array<double, 3>& components);

struct EpochLog {
  int stage = 0;  // 1-based
  int epoch = 0;  // 1-based, global across stages
  double ce = 0.0;      // training means over the epoch's steps
  double global = 0.0;
  double mask = 0.0;
  double val_ce = 0.0;  // mean per-sample summed token loss on the validation split
  eval::MetricReport val_metrics;
};

struct TrainReport {
  double initial_val_ce = 0.0;  // before any update ("epoch 0")
  std::vector<EpochLog> epochs;
  std::vector<double> step_losses;  // weighted total per step
  int best_epoch = 0;               // 0 = the initial parameters
  double best_val_bleu4 = -1.0;
  std::string best_checkpoint;
  // Values of the mask tensors before training and after each completed stage.
  std::vector<Matrix> mask_initial;
  std::vector<std::vector<Matrix>> mask_after_stage;

  nlohmann::json to_json() const;
};

struct TrainingData {
  std::vector<ModelSample> train;
  std::vector<ModelSample> val;
  std::vector<std::string> val_references;
  const lsu::TextVocabulary* vocab = nullptr;  // decodes generated ids for validation metrics
  int max_len = 64;
  // Optional per-epoch refresh of the training samples (e.g. new random crops).
  std::function<void(int epoch, std::vector<ModelSample>& train)> augment;
  // Validation generation is skipped when false (BLEU-4 selection then keeps the last epoch).
  bool generate_on_validation = true;
};

struct TrainHooks {
  // Called with the 1-based stage index once that stage's epochs are done.
  std::function<void(int stage, const UarModel&)> on_stage_end;
  // Called when validation BLEU-4 improves.
  std::function<void(const UarModel&, const EpochLog&)> on_best;
  std::function<void(const EpochLog&)> on_epoch;
};

// Trains in place; on return the model holds the best-by-validation-BLEU-4 parameters.
// When adam is given it carries optimizer moments in and out (resuming a later stage).
TrainReport train_two_stage(UarModel& model, TrainingData& data, const StageSchedule& schedule,
                            const OptimizerConfig& optimizer, const TrainHooks& hooks = {},
                            optim::AdamW* adam = nullptr);

double validation_ce(const UarModel& model, std::span<const ModelSample> samples, bool mask_enabled);
std::vector<std::string> generate_reports(const UarModel& model, std::span<const ModelSample> samples,
                                          const lsu::TextVocabulary* vocab, int max_len, int beam_width);

// ---- gradient verification ---------------------------------------------------

struct FdOptions {
  double epsilon = 1e-6;
  int samples = 200;  // coordinates probed (all when the parameters have fewer)
  std::uint64_t seed = 0;
};

struct FdResult {
  double max_relative_error = 0.0;
  int coordinates = 0;
  double worst_analytic = 0.0;  // analytic gradient at the worst coordinate
  int above_1e4 = 0;            // coordinates with relative error > 1e-4
};

// build records the scalar loss on the given tape. Analytic gradients come
// from one backward pass; each sampled coordinate is then perturbed by
// +-epsilon and re-evaluated on gradient-free tapes. Throws NonFinite when any
// evaluation is NaN/Inf and ConfigError when epsilon is outside [1e-6, 1e-3].
FdResult finite_difference_check(const std::function<ag::Var(ag::Tape&)>& build,
                                 std::span<const optim::NamedParameter> params, const FdOptions& opts = {});

// Plain-function form: f at theta, analytic gradient supplied by the caller.
FdResult finite_difference_check(const std::function<double(const Eigen::VectorXd&)>& f,
                                 const Eigen::VectorXd& theta, const Eigen::VectorXd& analytic, double epsilon);

}  // namespace uar::train

#pragma once

// End-to-end pipeline shared by the CLI and the acceptance suite: corpus
// loading, tokenizer training, sample construction, training, evaluation
// and probe exports.

#include <optional>
#include <string>
#include <vector>

#include "uar/config.hpp"
#include "uar/data.hpp"
#include "uar/eval.hpp"
#include "uar/lsu.hpp"
#include "uar/model.hpp"
#include "uar/trainer.hpp"

namespace uar::experiment {

struct LoadedCorpus {
  data::DatasetManifest manifest;
  std::vector<std::vector<ImageTensor>> views;  // native images per record

  std::vector<int> indices(const std::string& split) const;
};

LoadedCorpus load_corpus(const std::string& manifest_path);
LoadedCorpus from_synthetic(const data::SyntheticCorpus& corpus);

lsu::TextVocabulary build_text_vocabulary(const LoadedCorpus& corpus, const RunConfig& cfg);
// Trains the dVAE on one seeded training-mode crop of every training image,
// plus its inference resize when cfg.infer_view_mix > 0.
lsu::DvaeModel train_tokenizer(const LoadedCorpus& corpus, const RunConfig& cfg, lsu::DvaeTrainLog* log = nullptr);

// One record turned into model inputs; seed drives the training-mode crop.
ModelSample make_sample(const LoadedCorpus& corpus, int record, const lsu::DvaeModel* dvae,
                        const lsu::TextVocabulary& vocab, const RunConfig& cfg, data::Mode mode,
                        std::uint64_t seed);
std::vector<ModelSample> make_samples(const LoadedCorpus& corpus, const std::vector<int>& records,
                                      const lsu::DvaeModel* dvae, const lsu::TextVocabulary& vocab,
                                      const RunConfig& cfg, data::Mode mode, std::uint64_t seed);
// Per record, draws between the training crop and the inference resize with
// probability cfg.infer_view_mix for the latter.
std::vector<ModelSample> make_training_samples(const LoadedCorpus& corpus, const std::vector<int>& records,
                                               const lsu::DvaeModel* dvae, const lsu::TextVocabulary& vocab,
                                               const RunConfig& cfg, std::uint64_t seed);

train::StageSchedule schedule_for(const RunConfig& cfg);
train::OptimizerConfig optimizer_for(const RunConfig& cfg);

struct TrainOutcome {
  UarModel model;
  train::TrainReport report;
  optim::AdamW::Snapshot optimizer;
};

// which_stages: 0 = all, 1 = only stage 1, 2 = only stage 2 (resume must hold a
// stage-1 model). Checkpoints go to <out>/checkpoints when out is non-empty.
TrainOutcome train_model(const RunConfig& cfg, const LoadedCorpus& corpus, const lsu::DvaeModel* dvae,
                         const lsu::TextVocabulary& vocab, int which_stages = 0,
                         const UarModel* resume = nullptr,
                         const optim::AdamW::Snapshot* resume_optimizer = nullptr,
                         const std::string& out = "");

struct Evaluation {
  std::vector<std::string> ids;
  std::vector<std::string> candidates;
  std::vector<std::string> references;
  eval::MetricReport metrics;
};

Evaluation evaluate_split(const UarModel& model, const LoadedCorpus& corpus, const lsu::DvaeModel* dvae,
                          const lsu::TextVocabulary& vocab, const RunConfig& cfg, const std::string& split = "test");

struct LocalizationResult {
  int words = 0;      // present-finding keywords scored
  int localized = 0;  // ... with >= threshold attention mass inside their region
  double fraction() const { return words == 0 ? 0.0 : static_cast<double>(localized) / words; }
  std::vector<double> masses;
};

// Teacher-forced final-layer, head-averaged cross-attention of the query that
// predicts each present finding's keyword, scored against the region oracle.
LocalizationResult localization(const UarModel& model, const LoadedCorpus& corpus, const lsu::DvaeModel* dvae,
                                const lsu::TextVocabulary& vocab, const RunConfig& cfg,
                                const std::vector<int>& records, double threshold = 0.4);

struct ProbeSummary {
  double alignment_score = 0.0;
  eval::RetrievalReport retrieval;
  std::optional<LocalizationResult> localization;
};

// Global features of a split: rows are samples.
void global_features(const UarModel& model, const std::vector<ModelSample>& samples, Matrix& image, Matrix& report);

// Alignment score, retrieval, similarity heatmap, Gram exports and attention
// heatmaps; files go under <out>/probes when out is non-empty.
ProbeSummary run_probes(const UarModel& model, const LoadedCorpus& corpus, const lsu::DvaeModel* dvae,
                        const lsu::TextVocabulary& vocab, const RunConfig& cfg, const std::string& out);

}  // namespace uar::experiment

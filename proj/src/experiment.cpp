#include "uar/experiment.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "uar/checkpoint.hpp"
#include "uar/cra.hpp"
#include "uar/errors.hpp"
#include "uar/image_io.hpp"

namespace uar::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void write_json(const json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  out << j.dump(2) << "\n";
}

int downsample_of(const lsu::DvaeModel* dvae, const RunConfig& cfg) {
  return dvae != nullptr ? dvae->downsample() : cfg.dvae.downsample;
}

// Views stacked vertically, matching the attention grid layout.
ImageTensor stack_views(const std::vector<ImageTensor>& views) {
  const ImageTensor& first = views.front();
  ImageTensor out(first.height * static_cast<int>(views.size()), first.width, first.channels);
  for (size_t v = 0; v < views.size(); ++v) {
    std::copy(views[v].values.begin(), views[v].values.end(),
              out.values.begin() + static_cast<std::ptrdiff_t>(v * views[v].values.size()));
  }
  return out;
}

// Radiographs are single-channel; colour PNGs are averaged down.
ImageTensor to_gray(const ImageTensor& im) {
  if (im.channels == 1) return im;
  ImageTensor g(im.height, im.width, 1);
  const int c = std::min(im.channels, 3);
  for (int y = 0; y < im.height; ++y) {
    for (int x = 0; x < im.width; ++x) {
      double s = 0.0;
      for (int k = 0; k < c; ++k) s += im.at(y, x, k);
      g.at(y, x) = s / c;
    }
  }
  return g;
}

struct KeywordPosition {
  int finding = 0;
  int position = 0;  // index into the BOS..EOS token sequence
  std::string keyword;
};

// Token positions of each present finding's keyword in the templated report.
std::vector<KeywordPosition> keyword_positions(const data::Record& r, const lsu::TextVocabulary& vocab,
                                               const std::vector<int>& text) {
  const auto& specs = data::default_findings();
  const int k = static_cast<int>(std::count(r.report.begin(), r.report.end(), '.'));
  std::vector<KeywordPosition> out;
  int offset = 1;  // after BOS
  for (int f = 0; f < std::min(k, data::kMaxFindings); ++f) {
    const bool present = std::find(r.findings.begin(), r.findings.end(), f) != r.findings.end();
    const auto& spec = specs[static_cast<size_t>(f)];
    const auto words = lsu::tokenize(present ? spec.present : spec.absent);
    if (present) {
      const auto it = std::find(words.begin(), words.end(), spec.keyword);
      if (it != words.end()) {
        const int pos = offset + static_cast<int>(it - words.begin());
        if (pos < static_cast<int>(text.size()) && text[static_cast<size_t>(pos)] == vocab.id(spec.keyword)) {
          out.push_back({f, pos, spec.keyword});
        }
      }
    }
    offset += static_cast<int>(words.size());
  }
  return out;
}

}  // namespace

std::vector<int> LoadedCorpus::indices(const std::string& split) const {
  std::vector<int> out;
  for (size_t i = 0; i < manifest.records.size(); ++i) {
    if (manifest.records[i].split == split) out.push_back(static_cast<int>(i));
  }
  return out;
}

LoadedCorpus load_corpus(const std::string& manifest_path) {
  LoadedCorpus c;
  c.manifest = data::load_manifest(manifest_path);
  if (c.manifest.records.empty()) throw EmptyCorpus("manifest has no records: " + manifest_path);
  for (const auto& r : c.manifest.records) {
    std::vector<ImageTensor> views;
    for (const auto& p : r.images) views.push_back(to_gray(io::read_png(c.manifest.image_path(p))));
    if (views.empty()) throw ParseError("record '" + r.id + "' has no images");
    c.views.push_back(std::move(views));
  }
  return c;
}

LoadedCorpus from_synthetic(const data::SyntheticCorpus& corpus) {
  LoadedCorpus c;
  c.manifest = corpus.manifest;
  for (const auto& s : corpus.samples) c.views.push_back(s.views);
  return c;
}

lsu::TextVocabulary build_text_vocabulary(const LoadedCorpus& corpus, const RunConfig& cfg) {
  std::vector<std::vector<std::string>> texts;
  for (int i : corpus.indices("train")) texts.push_back(lsu::tokenize(corpus.manifest.records[static_cast<size_t>(i)].report));
  if (texts.empty()) throw EmptyCorpus("no training reports");
  return lsu::build_vocabulary(texts, cfg.vocab_min_count);
}

lsu::DvaeModel train_tokenizer(const LoadedCorpus& corpus, const RunConfig& cfg, lsu::DvaeTrainLog* log) {
  std::vector<ImageTensor> images;
  for (int i : corpus.indices("train")) {
    const auto& views = corpus.views[static_cast<size_t>(i)];
    for (size_t v = 0; v < views.size(); ++v) {
      images.push_back(data::preprocess(views[v], cfg.preprocess, data::Mode::kTrain,
                                        mix(cfg.seed + 7, static_cast<std::uint64_t>(i) * 4 + v)));
      if (cfg.infer_view_mix > 0.0) images.push_back(data::preprocess(views[v], cfg.preprocess, data::Mode::kInfer, 0));
    }
  }
  if (images.empty()) throw EmptyCorpus("no training images for the tokenizer");
  lsu::DvaeConfig dc = cfg.dvae;
  dc.channels = images.front().channels;
  dc.seed = mix(cfg.seed, 11) + cfg.dvae.seed;
  return lsu::train_dvae(images, dc, log);
}

ModelSample make_sample(const LoadedCorpus& corpus, int record, const lsu::DvaeModel* dvae,
                        const lsu::TextVocabulary& vocab, const RunConfig& cfg, data::Mode mode,
                        std::uint64_t seed) {
  const auto& r = corpus.manifest.records.at(static_cast<size_t>(record));
  const auto& native = corpus.views.at(static_cast<size_t>(record));
  std::vector<ImageTensor> views;
  for (size_t v = 0; v < native.size(); ++v) {
    views.push_back(data::preprocess(native[v], cfg.preprocess, mode, mix(seed, v)));
  }
  ModelSample s;
  if (cfg.model.use_lsu) {
    if (dvae == nullptr) throw ConfigError("the discrete visual path needs a trained tokenizer");
    s.visual_tokens = lsu::tokenize_views(*dvae, views).tokens;
  } else {
    const int m = downsample_of(dvae, cfg);
    std::vector<Matrix> parts;
    Index rows = 0;
    for (const auto& v : views) {
      parts.push_back(lsu::extract_patches(v, m));
      rows += parts.back().rows();
    }
    s.patches.resize(rows, parts.front().cols());
    Index at = 0;
    for (const auto& p : parts) {
      s.patches.middleRows(at, p.rows()) = p;
      at += p.rows();
    }
  }
  s.text = vocab.encode(r.report, cfg.model.max_text + 1).tokens;
  return s;
}

std::vector<ModelSample> make_samples(const LoadedCorpus& corpus, const std::vector<int>& records,
                                      const lsu::DvaeModel* dvae, const lsu::TextVocabulary& vocab,
                                      const RunConfig& cfg, data::Mode mode, std::uint64_t seed) {
  std::vector<ModelSample> out;
  out.reserve(records.size());
  for (int i : records) out.push_back(make_sample(corpus, i, dvae, vocab, cfg, mode, mix(seed, static_cast<std::uint64_t>(i))));
  return out;
}

std::vector<ModelSample> make_training_samples(const LoadedCorpus& corpus, const std::vector<int>& records,
                                               const lsu::DvaeModel* dvae, const lsu::TextVocabulary& vocab,
                                               const RunConfig& cfg, std::uint64_t seed) {
  std::vector<ModelSample> out;
  out.reserve(records.size());
  for (int i : records) {
    const std::uint64_t s = mix(seed, static_cast<std::uint64_t>(i));
    const double u = static_cast<double>(mix(s, 77) >> 11) * 0x1.0p-53;
    const data::Mode mode = u < cfg.infer_view_mix ? data::Mode::kInfer : data::Mode::kTrain;
    out.push_back(make_sample(corpus, i, dvae, vocab, cfg, mode, s));
  }
  return out;
}

train::StageSchedule schedule_for(const RunConfig& cfg) {
  train::StageSchedule s = train::StageSchedule::two_stage(cfg.stage1_epochs, cfg.stage2_epochs, cfg.stage2_lr_mult);
  if (!cfg.refine) {
    // Same two-phase learning-rate schedule, but stage 2 keeps (1,1,0) and no mask.
    s.stages[1].lambda_mask = 0.0;
    s.stages[1].mask_enabled = false;
  }
  return s;
}

train::OptimizerConfig optimizer_for(const RunConfig& cfg) {
  train::OptimizerConfig o;
  o.learning_rate = cfg.lr;
  o.weight_decay = cfg.weight_decay;
  o.clip_norm = cfg.clip_norm;
  o.batch_size = cfg.batch_size;
  o.warmup_steps = cfg.warmup_steps;
  o.seed = cfg.seed;
  return o;
}

TrainOutcome train_model(const RunConfig& cfg, const LoadedCorpus& corpus, const lsu::DvaeModel* dvae,
                         const lsu::TextVocabulary& vocab, int which_stages, const UarModel* resume,
                         const optim::AdamW::Snapshot* resume_optimizer, const std::string& out) {
  if (which_stages < 0 || which_stages > 2) throw ConfigError("stage must be 1, 2 or all");
  if (which_stages == 2 && resume == nullptr) throw ConfigError("stage 2 needs a stage-1 checkpoint");
  cfg.validate();

  TrainOutcome outcome;
  outcome.model = resume != nullptr ? *resume : UarModel::initialize(cfg.resolved_model(), vocab.size(), mix(cfg.seed, 1000));

  train::StageSchedule schedule = schedule_for(cfg);
  int first_stage = 1;
  int epoch_offset = 0;
  if (which_stages == 1) {
    schedule.stages.resize(1);
  } else if (which_stages == 2) {
    schedule.stages.erase(schedule.stages.begin());
    first_stage = 2;
    epoch_offset = cfg.stage1_epochs;
  }
  const train::OptimizerConfig oc = optimizer_for(cfg);

  optim::AdamW adam = resume_optimizer != nullptr
                          ? optim::AdamW::restore(*resume_optimizer, outcome.model.named_parameters())
                          : optim::AdamW(optim::AdamW::Options{0.9, 0.999, 1e-8, cfg.weight_decay});

  const std::vector<int> train_idx = corpus.indices("train");
  const std::vector<int> val_idx = corpus.indices("val");
  if (train_idx.empty()) throw EmptyCorpus("no training records");
  const std::uint64_t crop_seed = mix(cfg.seed, 2000);

  train::TrainingData td;
  td.train = make_training_samples(corpus, train_idx, dvae, vocab, cfg, mix(crop_seed, epoch_offset + 1));
  td.val = make_samples(corpus, val_idx, dvae, vocab, cfg, data::Mode::kInfer, 0);
  for (int i : val_idx) td.val_references.push_back(corpus.manifest.records[static_cast<size_t>(i)].report);
  td.vocab = &vocab;
  td.max_len = cfg.decode_max_len;
  td.augment = [&](int epoch, std::vector<ModelSample>& train) {
    if (epoch == 1) return;  // built above
    train = make_training_samples(corpus, train_idx, dvae, vocab, cfg, mix(crop_seed, epoch_offset + epoch));
  };

  std::string ckpt_dir;
  if (!out.empty()) {
    ckpt_dir = (fs::path(out) / "checkpoints").string();
    fs::create_directories(ckpt_dir);
  }
  train::TrainHooks hooks;
  hooks.on_epoch = [&](const train::EpochLog& e) {
    std::cerr << "stage " << e.stage + first_stage - 1 << " epoch " << e.epoch + epoch_offset << "  ce " << e.ce
              << "  global " << e.global << "  mask " << e.mask << "  val_ce " << e.val_ce << "  val_bleu4 "
              << e.val_metrics.bleu[3] << "\n";
  };
  if (!ckpt_dir.empty()) {
    hooks.on_stage_end = [&](int stage, const UarModel& m) {
      const int s = stage + first_stage - 1;
      ckpt::save_checkpoint(ckpt_dir + "/stage" + std::to_string(s) + ".ckpt", m, dvae, vocab, cfg, s, &adam);
    };
    hooks.on_best = [&](const UarModel& m, const train::EpochLog& e) {
      ckpt::save_checkpoint(ckpt_dir + "/best.ckpt", m, dvae, vocab, cfg, e.stage + first_stage - 1);
    };
  }

  outcome.report = train::train_two_stage(outcome.model, td, schedule, oc, hooks, &adam);
  // Report stage and epoch numbers in the full schedule's terms.
  for (auto& e : outcome.report.epochs) {
    e.stage += first_stage - 1;
    e.epoch += epoch_offset;
  }
  if (outcome.report.best_epoch > 0) outcome.report.best_epoch += epoch_offset;
  if (!ckpt_dir.empty()) {
    outcome.report.best_checkpoint = ckpt_dir + "/best.ckpt";
    if (outcome.report.best_epoch == 0) {
      ckpt::save_checkpoint(outcome.report.best_checkpoint, outcome.model, dvae, vocab, cfg, first_stage - 1);
    }
  }
  outcome.optimizer = adam.snapshot(outcome.model.named_parameters());
  return outcome;
}

Evaluation evaluate_split(const UarModel& model, const LoadedCorpus& corpus, const lsu::DvaeModel* dvae,
                          const lsu::TextVocabulary& vocab, const RunConfig& cfg, const std::string& split) {
  const std::vector<int> idx = corpus.indices(split);
  if (idx.empty()) throw EmptyCorpus("split '" + split + "' is empty");
  const auto samples = make_samples(corpus, idx, dvae, vocab, cfg, data::Mode::kInfer, 0);
  Evaluation ev;
  ev.candidates = train::generate_reports(model, samples, &vocab, cfg.decode_max_len, cfg.beam_width);
  for (int i : idx) {
    ev.ids.push_back(corpus.manifest.records[static_cast<size_t>(i)].id);
    ev.references.push_back(corpus.manifest.records[static_cast<size_t>(i)].report);
  }
  ev.metrics = eval::evaluate(ev.candidates, ev.references);
  return ev;
}

LocalizationResult localization(const UarModel& model, const LoadedCorpus& corpus, const lsu::DvaeModel* dvae,
                                const lsu::TextVocabulary& vocab, const RunConfig& cfg,
                                const std::vector<int>& records, double threshold) {
  const FeatureTables tables = feature_tables(model);
  const int m = downsample_of(dvae, cfg);
  LocalizationResult res;
  for (int i : records) {
    const auto& r = corpus.manifest.records.at(static_cast<size_t>(i));
    const ModelSample s = make_sample(corpus, i, dvae, vocab, cfg, data::Mode::kInfer, 0);
    const auto keys = keyword_positions(r, vocab, s.text);
    if (keys.empty()) continue;
    const tir::DecoderOutput out = teacher_forced(model, tables, s);
    const Matrix& w = out.cross_weights.back();
    const int views = static_cast<int>(corpus.views[static_cast<size_t>(i)].size());
    for (const auto& k : keys) {
      std::vector<int> region;
      for (int v = 0; v < views; ++v) {
        const auto t = data::region_tokens(k.finding, cfg.preprocess.infer_size, m, v);
        region.insert(region.end(), t.begin(), t.end());
      }
      const Eigen::RowVectorXd row = w.row(k.position - 1);
      const double mass = eval::attention_mass(std::span<const double>(row.data(), static_cast<size_t>(row.size())), region);
      res.masses.push_back(mass);
      ++res.words;
      if (mass >= threshold) ++res.localized;
    }
  }
  return res;
}

void global_features(const UarModel& model, const std::vector<ModelSample>& samples, Matrix& image, Matrix& report) {
  const FeatureTables tables = feature_tables(model);
  const Index d = model.config.width;
  image.resize(static_cast<Index>(samples.size()), d);
  report.resize(static_cast<Index>(samples.size()), d);
  for (size_t i = 0; i < samples.size(); ++i) {
    image.row(static_cast<Index>(i)) = global_image_feature(model, tables, samples[i]);
    report.row(static_cast<Index>(i)) = global_report_feature(tables, samples[i].text);
  }
}

ProbeSummary run_probes(const UarModel& model, const LoadedCorpus& corpus, const lsu::DvaeModel* dvae,
                        const lsu::TextVocabulary& vocab, const RunConfig& cfg, const std::string& out) {
  const std::vector<int> idx = corpus.indices("test");
  if (idx.empty()) throw EmptyCorpus("test split is empty");
  const auto samples = make_samples(corpus, idx, dvae, vocab, cfg, data::Mode::kInfer, 0);
  Matrix image, report;
  global_features(model, samples, image, report);

  ProbeSummary sum;
  sum.alignment_score = cra::alignment_score(image, report);
  sum.retrieval = eval::retrieval_probe(image, report);

  const std::vector<int> probe(idx.begin(), idx.begin() + std::min<std::ptrdiff_t>(cfg.probe_samples, static_cast<std::ptrdiff_t>(idx.size())));
  bool has_findings = false;
  for (int i : probe) has_findings = has_findings || !corpus.manifest.records[static_cast<size_t>(i)].findings.empty();
  if (has_findings) sum.localization = localization(model, corpus, dvae, vocab, cfg, probe);

  if (out.empty()) return sum;
  const fs::path dir = fs::path(out) / "probes";
  fs::create_directories(dir / "attention");
  write_json({{"alignment_score", sum.alignment_score}, {"samples", image.rows()}}, (dir / "alignment.json").string());
  write_json(sum.retrieval.to_json(), (dir / "retrieval.json").string());
  const Matrix cross = eval::cross_similarity(image, report);
  eval::write_csv(cross, (dir / "similarity_image_report.csv").string());
  eval::write_heatmap_png(cross, (dir / "similarity_image_report.png").string(), -1.0, 1.0, 2);
  eval::similarity_heatmap(image, (dir / "similarity_images").string());
  eval::gram_export(image, (dir / "gram_image_features").string());
  if (model.config.use_cra) {
    eval::gram_export(model.cra.basis.basis.matrix(), (dir / "gram_basis").string());
    eval::gram_export(model.cra.basis.scaled(), (dir / "gram_scaled_basis").string());
  }
  if (sum.localization) {
    const auto& loc = *sum.localization;
    write_json({{"words", loc.words}, {"localized", loc.localized}, {"fraction", loc.fraction()}, {"masses", loc.masses}},
               (dir / "localization.json").string());
  }

  // Attention heatmaps for a handful of probe samples.
  const FeatureTables tables = feature_tables(model);
  const int m = downsample_of(dvae, cfg);
  int exported = 0;
  for (int i : probe) {
    if (exported >= 8) break;
    const auto& r = corpus.manifest.records[static_cast<size_t>(i)];
    const ModelSample s = make_sample(corpus, i, dvae, vocab, cfg, data::Mode::kInfer, 0);
    const auto keys = keyword_positions(r, vocab, s.text);
    if (keys.empty()) continue;
    std::vector<int> rows;
    std::vector<std::string> labels;
    for (const auto& k : keys) {
      rows.push_back(k.position - 1);
      labels.push_back(k.keyword);
    }
    std::vector<ImageTensor> views;
    for (const auto& v : corpus.views[static_cast<size_t>(i)]) {
      views.push_back(data::preprocess(v, cfg.preprocess, data::Mode::kInfer, 0));
    }
    eval::ImageLayout layout{cfg.preprocess.infer_size, cfg.preprocess.infer_size, m, static_cast<int>(views.size())};
    eval::attention_heatmap_export(teacher_forced(model, tables, s), rows, labels, stack_views(views), layout,
                                   (dir / "attention").string(), r.id);
    ++exported;
  }
  return sum;
}

}  // namespace uar::experiment

// uar_cli: corpus synthesis, tokenizer pre-training, two-stage training,
// generation, evaluation and probe export.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "uar/checkpoint.hpp"
#include "uar/config.hpp"
#include "uar/data.hpp"
#include "uar/errors.hpp"
#include "uar/eval.hpp"
#include "uar/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace uar;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitEmpty = 4;

// Every documented key becomes a --key flag on each subcommand.
struct KeyFlags {
  std::string config_file;
  std::map<std::string, std::string> values;
  std::vector<std::pair<std::string, CLI::Option*>> options;
  KeyValues aliases;  // values given through short alias flags

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "key=value config file (flags override it)");
    for (const auto& [key, doc] : RunConfig::documented_keys()) {
      options.emplace_back(key, app->add_option("--" + key, values[key], doc));
    }
  }

  // Config file first, then explicit flags.
  KeyValues collect() const {
    KeyValues kv;
    if (!config_file.empty()) kv = read_config_file(config_file);
    for (const auto& [key, opt] : options) {
      if (opt->count() > 0) kv[key] = values.at(key);
    }
    for (const auto& [k, v] : aliases) kv[k] = v;
    return kv;
  }
};

// variant first so explicit switches given alongside it win.
void apply_ordered(RunConfig& cfg, const KeyValues& kv) {
  if (auto it = kv.find("variant"); it != kv.end()) cfg.set("variant", it->second);
  for (const auto& [k, v] : kv) {
    if (k != "variant") cfg.set(k, v);
  }
}

RunConfig fresh_config(const KeyFlags& flags) {
  RunConfig cfg;
  apply_ordered(cfg, flags.collect());
  cfg.validate();
  return cfg;
}

void write_json(const json& j, const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

experiment::LoadedCorpus corpus_for(const RunConfig& cfg) {
  if (cfg.corpus.empty()) throw ConfigError("corpus is required (--corpus path/to/manifest.json)");
  if (!fs::exists(cfg.corpus)) throw MissingFile("corpus manifest not found: " + cfg.corpus);
  return experiment::load_corpus(cfg.corpus);
}

// Checkpoint-driven commands take their model settings from the checkpoint.
struct Loaded {
  ckpt::Checkpoint ckpt;
  RunConfig cfg;
};

Loaded load_for_inference(const KeyFlags& flags, const std::string& checkpoint) {
  const KeyValues kv = flags.collect();
  RunConfig probe_cfg;
  apply_ordered(probe_cfg, kv);
  const std::string path =
      checkpoint.empty() ? (fs::path(probe_cfg.out) / "checkpoints" / "best.ckpt").string() : checkpoint;
  if (!fs::exists(path)) throw ConfigError("checkpoint not found: " + path);
  Loaded l{ckpt::load_checkpoint(path), {}};
  l.cfg = l.ckpt.config;
  apply_ordered(l.cfg, kv);
  l.cfg.validate();
  return l;
}

json id_map(const std::vector<std::string>& ids, const std::vector<std::string>& texts) {
  json j = json::object();
  for (size_t i = 0; i < ids.size(); ++i) j[ids[i]] = texts[i];
  return j;
}

std::map<std::string, std::string> read_id_map(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingFile("file not found: " + path);
  try {
    return json::parse(in).get<std::map<std::string, std::string>>();
  } catch (const json::exception& e) {
    throw ParseError(path + ": expected a JSON object of id -> text (" + e.what() + ")");
  }
}

int cmd_synth(const KeyFlags& flags) {
  const RunConfig cfg = fresh_config(flags);
  data::SyntheticOptions o;
  o.n = cfg.synth_n;
  o.k_findings = cfg.synth_k;
  o.seed = cfg.seed;
  o.two_view = cfg.synth_two_view;
  const data::SyntheticCorpus corpus = data::generate_synthetic(o);
  data::write_corpus(corpus, cfg.out);
  std::cout << "wrote " << corpus.samples.size() << " records to " << (fs::path(cfg.out) / "manifest.json").string()
            << "\n";
  return kExitOk;
}

int cmd_train_dvae(const KeyFlags& flags) {
  const RunConfig cfg = fresh_config(flags);
  const auto corpus = corpus_for(cfg);
  lsu::DvaeTrainLog log;
  const lsu::DvaeModel dvae = experiment::train_tokenizer(corpus, cfg, &log);
  const fs::path dir = fs::path(cfg.out) / "checkpoints";
  fs::create_directories(dir);
  ckpt::save_dvae((dir / "dvae.ckpt").string(), dvae);
  write_json({{"step_mse", log.step_mse}}, fs::path(cfg.out) / "dvae_log.json");
  std::cout << "dvae: final relaxed mse " << (log.step_mse.empty() ? 0.0 : log.step_mse.back()) << "\n";
  return kExitOk;
}

int cmd_train(const KeyFlags& flags, const std::string& stage, const std::string& dvae_path,
              const std::string& resume_path) {
  int which = 0;
  if (stage == "1") {
    which = 1;
  } else if (stage == "2") {
    which = 2;
  } else if (stage != "all") {
    throw ConfigError("--stage must be 1, 2 or all");
  }
  RunConfig cfg = fresh_config(flags);
  const fs::path ckdir = fs::path(cfg.out) / "checkpoints";

  std::optional<ckpt::Checkpoint> resume;
  if (which == 2) {
    const std::string path = resume_path.empty() ? (ckdir / "stage1.ckpt").string() : resume_path;
    if (!fs::exists(path)) throw ConfigError("stage 2 needs a stage-1 checkpoint: " + path + " not found");
    resume = ckpt::load_checkpoint(path);
    if (resume->stage < 1) throw ConfigError("checkpoint " + path + " has not completed stage 1");
    // The architecture is fixed by the checkpoint; schedule and paths may change.
    RunConfig merged = resume->config;
    apply_ordered(merged, flags.collect());
    cfg = merged;
    cfg.validate();
  }
  const auto corpus = corpus_for(cfg);

  std::optional<lsu::DvaeModel> dvae;
  lsu::TextVocabulary vocab;
  if (resume) {
    dvae = resume->dvae;
    vocab = resume->vocab;
  } else {
    vocab = experiment::build_text_vocabulary(corpus, cfg);
    if (!dvae_path.empty()) {
      dvae = ckpt::load_dvae(dvae_path);
    } else if (cfg.model.use_lsu) {
      lsu::DvaeTrainLog log;
      dvae = experiment::train_tokenizer(corpus, cfg, &log);
      fs::create_directories(ckdir);
      ckpt::save_dvae((ckdir / "dvae.ckpt").string(), *dvae);
    }
    if (dvae && (dvae->config.codebook_size != cfg.dvae.codebook_size || dvae->config.downsample != cfg.dvae.downsample)) {
      throw ConfigError("tokenizer archive does not match dvae.codebook_size / dvae.downsample");
    }
  }
  const lsu::DvaeModel* dv = dvae ? &*dvae : nullptr;
  const auto outcome = experiment::train_model(cfg, corpus, dv, vocab, which, resume ? &resume->model : nullptr,
                                               resume && resume->optimizer ? &*resume->optimizer : nullptr, cfg.out);
  write_json(outcome.report.to_json(), fs::path(cfg.out) / "train_report.json");
  std::cout << "best epoch " << outcome.report.best_epoch << ", validation BLEU-4 " << outcome.report.best_val_bleu4
            << "\n";
  return kExitOk;
}

int cmd_generate(const KeyFlags& flags, const std::string& checkpoint, const std::string& split) {
  const Loaded l = load_for_inference(flags, checkpoint);
  const auto corpus = corpus_for(l.cfg);
  const auto ev = experiment::evaluate_split(l.ckpt.model, corpus, l.ckpt.dvae ? &*l.ckpt.dvae : nullptr, l.ckpt.vocab,
                                             l.cfg, split);
  const fs::path path = fs::path(l.cfg.out) / "reports" / ("generated_" + split + ".json");
  write_json(id_map(ev.ids, ev.candidates), path);
  std::cout << "wrote " << ev.ids.size() << " reports to " << path.string() << "\n";
  return kExitOk;
}

int cmd_evaluate(const KeyFlags& flags, const std::string& checkpoint, const std::string& split,
                 const std::string& candidates, const std::string& references) {
  eval::MetricReport metrics;
  fs::path out_dir;
  if (!candidates.empty() || !references.empty()) {
    if (candidates.empty() || references.empty()) throw ConfigError("--candidates and --references go together");
    RunConfig cfg;
    apply_ordered(cfg, flags.collect());
    out_dir = cfg.out;
    const auto cand = read_id_map(candidates);
    const auto refs = read_id_map(references);
    std::vector<std::string> c, r;
    for (const auto& [id, text] : refs) {
      auto it = cand.find(id);
      if (it == cand.end()) throw ParseError("no candidate for id '" + id + "'");
      c.push_back(it->second);
      r.push_back(text);
    }
    if (r.empty()) throw EmptyCorpus("no references to score");
    metrics = eval::evaluate(c, r);
  } else {
    const Loaded l = load_for_inference(flags, checkpoint);
    out_dir = l.cfg.out;
    const auto corpus = corpus_for(l.cfg);
    const auto ev = experiment::evaluate_split(l.ckpt.model, corpus, l.ckpt.dvae ? &*l.ckpt.dvae : nullptr,
                                               l.ckpt.vocab, l.cfg, split);
    write_json(id_map(ev.ids, ev.candidates), out_dir / "reports" / ("generated_" + split + ".json"));
    metrics = ev.metrics;
  }
  write_json(metrics.to_json(), out_dir / "metrics.json");
  std::cout << metrics.to_json().dump() << "\n";
  return kExitOk;
}

int cmd_probe(const KeyFlags& flags, const std::string& checkpoint) {
  const Loaded l = load_for_inference(flags, checkpoint);
  const auto corpus = corpus_for(l.cfg);
  const auto sum = experiment::run_probes(l.ckpt.model, corpus, l.ckpt.dvae ? &*l.ckpt.dvae : nullptr, l.ckpt.vocab,
                                          l.cfg, l.cfg.out);
  json j = {{"alignment_score", sum.alignment_score}, {"retrieval", sum.retrieval.to_json()}};
  if (sum.localization) j["localized_fraction"] = sum.localization->fraction();
  write_json(j, fs::path(l.cfg.out) / "probes" / "summary.json");
  std::cout << j.dump() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Radiology report generation: synth, train-dvae, train, generate, evaluate, probe"};
  app.require_subcommand(1);

  KeyFlags synth_flags, dvae_flags, train_flags, gen_flags, eval_flags, probe_flags;
  auto* synth = app.add_subcommand("synth", "write a synthetic paired image/report corpus");
  synth_flags.attach(synth);
  // Short aliases for the corpus size and findings.
  std::string n_alias, k_alias;
  auto* n_opt = synth->add_option("--n", n_alias, "alias of --synth.n");
  auto* k_opt = synth->add_option("--k", k_alias, "alias of --synth.k_findings");
  bool two_view = false;
  synth->add_flag("--two-view", two_view, "alias of --synth.two_view true");

  auto* dvae = app.add_subcommand("train-dvae", "pre-train the image tokenizer");
  dvae_flags.attach(dvae);

  auto* train = app.add_subcommand("train", "pre-train the tokenizer (unless --dvae) and run two-stage training");
  train_flags.attach(train);
  std::string stage = "all", dvae_path, resume_path;
  train->add_option("--stage", stage, "1, 2 or all")->check(CLI::IsMember({"1", "2", "all"}));
  train->add_option("--dvae", dvae_path, "tokenizer archive from train-dvae");
  train->add_option("--resume", resume_path, "stage-1 checkpoint for --stage 2 (default <out>/checkpoints/stage1.ckpt)");

  std::string checkpoint, split = "test", candidates, references;
  auto* gen = app.add_subcommand("generate", "write generated reports for a split");
  gen_flags.attach(gen);
  gen->add_option("--checkpoint", checkpoint, "checkpoint (default <out>/checkpoints/best.ckpt)");
  gen->add_option("--split", split, "train, val or test");

  auto* evaluate = app.add_subcommand("evaluate", "compute BLEU-1..4, ROUGE-L and CIDEr");
  eval_flags.attach(evaluate);
  evaluate->add_option("--checkpoint", checkpoint, "checkpoint (default <out>/checkpoints/best.ckpt)");
  evaluate->add_option("--split", split, "train, val or test");
  evaluate->add_option("--candidates", candidates, "JSON object id -> generated text");
  evaluate->add_option("--references", references, "JSON object id -> reference text");

  auto* probe = app.add_subcommand("probe", "alignment score, retrieval, heatmaps and Gram exports");
  probe_flags.attach(probe);
  probe->add_option("--checkpoint", checkpoint, "checkpoint (default <out>/checkpoints/best.ckpt)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (synth->parsed()) {
      if (n_opt->count() > 0) synth_flags.aliases["synth.n"] = n_alias;
      if (k_opt->count() > 0) synth_flags.aliases["synth.k_findings"] = k_alias;
      if (two_view) synth_flags.aliases["synth.two_view"] = "true";
      return cmd_synth(synth_flags);
    }
    if (dvae->parsed()) return cmd_train_dvae(dvae_flags);
    if (train->parsed()) return cmd_train(train_flags, stage, dvae_path, resume_path);
    if (gen->parsed()) return cmd_generate(gen_flags, checkpoint, split);
    if (evaluate->parsed()) return cmd_evaluate(eval_flags, checkpoint, split, candidates, references);
    if (probe->parsed()) return cmd_probe(probe_flags, checkpoint);
  } catch (const NonFinite& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const DegenerateBasis& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ZeroNorm& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const EmptyCorpus& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitEmpty;
  } catch (const BatchTooSmall& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitEmpty;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitOk;
}

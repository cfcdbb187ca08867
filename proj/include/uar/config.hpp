#pragma once

// Flat key=value run configuration shared by the CLI and the experiment driver.

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "uar/data.hpp"
#include "uar/lsu.hpp"
#include "uar/model.hpp"

namespace uar {

using KeyValues = std::map<std::string, std::string>;

// '#' starts a comment; blank lines are ignored. Throws ConfigError on a
// line without '=' or a repeated key.
KeyValues parse_key_values(const std::string& text);
KeyValues read_config_file(const std::string& path);

struct RunConfig {
  std::uint64_t seed = 0;
  std::string corpus;  // manifest path
  std::string out = "run";

  // synthetic corpus
  int synth_n = 2000;
  int synth_k = 4;
  bool synth_two_view = false;

  lsu::DvaeConfig dvae;
  int vocab_min_count = 3;
  data::PreprocessSpec preprocess;
  // Chance that a training sample uses the inference resize instead of a random
  // crop in a given epoch. The two paths differ in scale by crop/resize.
  double infer_view_mix = 0.5;
  ModelConfig model;

  int stage1_epochs = 15;
  int stage2_epochs = 15;
  bool refine = true;  // stage 2 with the mask; false trains (1,1,0) without it throughout
  double stage2_lr_mult = 0.5;

  double lr = 3e-4;
  double weight_decay = 1e-2;
  double clip_norm = 1.0;
  int batch_size = 16;
  int warmup_steps = 50;

  int decode_max_len = 64;
  int beam_width = 1;  // 1 = greedy
  int probe_samples = 50;

  RunConfig();

  // Sets one key; throws ConfigError for unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  void apply(const KeyValues& kv);
  // Model config with the fields derived from the tokenizer (|V_I|, patch size).
  ModelConfig resolved_model() const;
  // Checks value ranges (not paths).
  void validate() const;

  nlohmann::json to_json() const;
  // Re-applies a to_json() dump.
  static RunConfig from_json(const nlohmann::json& j);

  // (key, description) for every accepted key, in documentation order.
  static const std::vector<std::pair<std::string, std::string>>& documented_keys();
};

}  // namespace uar

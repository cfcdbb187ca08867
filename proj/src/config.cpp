#include "uar/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "uar/errors.hpp"

namespace uar {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  int no = 0;
  while (std::getline(in, line)) {
    ++no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(no) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(no) + ": empty key");
    if (kv.count(key) != 0) throw ConfigError("config line " + std::to_string(no) + ": duplicate key " + key);
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValues read_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_key_values(ss.str());
}

namespace {

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("config: bad value '" + v + "' for " + key);
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config: bad boolean '" + v + "' for " + key);
}

struct KeySpec {
  std::string key;
  std::string doc;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define UAR_INT(K, FIELD, DOC)                                                                          \
  KeySpec{K, DOC, [](RunConfig& c, const std::string& k, const std::string& v) { c.FIELD = parse_number<int>(k, v); }, \
          [](const RunConfig& c) { return std::to_string(c.FIELD); }}
#define UAR_DBL(K, FIELD, DOC)                                                                             \
  KeySpec{K, DOC, [](RunConfig& c, const std::string& k, const std::string& v) { c.FIELD = parse_number<double>(k, v); }, \
          [](const RunConfig& c) { std::ostringstream o; o.precision(17); o << c.FIELD; return o.str(); }}
#define UAR_BOOL(K, FIELD, DOC)                                                                    \
  KeySpec{K, DOC, [](RunConfig& c, const std::string& k, const std::string& v) { c.FIELD = parse_bool(k, v); }, \
          [](const RunConfig& c) { return std::string(c.FIELD ? "true" : "false"); }}
#define UAR_STR(K, FIELD, DOC)                                                                \
  KeySpec{K, DOC, [](RunConfig& c, const std::string&, const std::string& v) { c.FIELD = v; }, \
          [](const RunConfig& c) { return c.FIELD; }}

const std::vector<KeySpec>& specs() {
  static const std::vector<KeySpec> s = {
      KeySpec{"seed", "master seed; component seeds are fixed offsets of it",
              [](RunConfig& c, const std::string& k, const std::string& v) {
                c.seed = parse_number<std::uint64_t>(k, v);
              },
              [](const RunConfig& c) { return std::to_string(c.seed); }},
      UAR_STR("corpus", corpus, "path to a manifest JSON"),
      UAR_STR("out", out, "output directory"),
      UAR_INT("synth.n", synth_n, "synthetic corpus size"),
      UAR_INT("synth.k_findings", synth_k, "number of findings used by the synthetic corpus"),
      UAR_BOOL("synth.two_view", synth_two_view, "render a lateral view as a second image"),
      UAR_INT("dvae.steps", dvae.steps, "dVAE training steps"),
      UAR_INT("dvae.batch_size", dvae.batch_size, "images per dVAE step"),
      UAR_DBL("dvae.lr", dvae.learning_rate, "dVAE learning rate"),
      UAR_INT("dvae.codebook_size", dvae.codebook_size, "visual vocabulary size |V_I|"),
      UAR_INT("dvae.code_dim", dvae.code_dim, "codebook entry width"),
      UAR_INT("dvae.hidden", dvae.hidden, "dVAE hidden width"),
      UAR_INT("dvae.downsample", dvae.downsample, "patch size M"),
      UAR_DBL("dvae.tau_start", dvae.tau_start, "initial Gumbel-softmax temperature"),
      UAR_DBL("dvae.tau_end", dvae.tau_end, "final Gumbel-softmax temperature"),
      UAR_INT("vocab.min_count", vocab_min_count, "keep words occurring more than this many times"),
      UAR_INT("preprocess.resize", preprocess.resize, "training resize"),
      UAR_INT("preprocess.crop", preprocess.crop, "training random crop"),
      UAR_INT("preprocess.infer_size", preprocess.infer_size, "inference resize"),
      UAR_DBL("preprocess.infer_view_mix", infer_view_mix, "share of training samples drawn with the inference resize"),
      UAR_INT("model.width", model.width, "shared feature width d"),
      UAR_INT("model.heads", model.heads, "attention heads"),
      UAR_INT("model.layers", model.layers, "encoder and decoder layers"),
      UAR_INT("model.ffn_width", model.ffn_width, "feed-forward hidden width"),
      UAR_DBL("model.dropout", model.dropout, "dropout rate"),
      UAR_INT("model.max_text", model.max_text, "mask rows T_max"),
      UAR_INT("model.max_visual", model.max_visual, "mask columns L_max"),
      UAR_DBL("model.mask_scale", model.mask_scale, "mask scale k"),
      UAR_DBL("model.margin", model.margin, "triplet margin alpha"),
      UAR_BOOL("model.use_lsu", model.use_lsu, "discrete visual tokens (false: linear patch embedding)"),
      UAR_BOOL("model.use_cra", model.use_cra, "aligner and triplet loss (false: F = E)"),
      UAR_INT("schedule.stage1_epochs", stage1_epochs, "epochs with lambda=(1,1,0), mask off"),
      UAR_INT("schedule.stage2_epochs", stage2_epochs, "epochs with lambda=(1,1,1), mask on"),
      UAR_BOOL("schedule.refine", refine, "false keeps stage-2 epochs at lambda=(1,1,0) without the mask"),
      UAR_DBL("schedule.stage2_lr_mult", stage2_lr_mult, "stage-2 learning-rate multiplier"),
      UAR_DBL("optim.lr", lr, "AdamW learning rate"),
      UAR_DBL("optim.weight_decay", weight_decay, "decoupled weight decay"),
      UAR_DBL("optim.clip_norm", clip_norm, "global gradient-norm clip"),
      UAR_INT("optim.batch_size", batch_size, "samples per step"),
      UAR_INT("optim.warmup_steps", warmup_steps, "linear warmup steps at the start of each stage"),
      UAR_INT("decode.max_len", decode_max_len, "maximum generated tokens including BOS/EOS"),
      UAR_INT("decode.beam_width", beam_width, "1 for greedy, otherwise beam width"),
      UAR_INT("probe.samples", probe_samples, "test samples used for attention heatmaps"),
  };
  return s;
}

#undef UAR_INT
#undef UAR_DBL
#undef UAR_BOOL
#undef UAR_STR

}  // namespace

RunConfig::RunConfig() {
  dvae.steps = 600;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (key == "variant") {
    // Shorthand for the ablation switches.
    if (value == "full") {
      model.use_lsu = model.use_cra = refine = true;
    } else if (value == "base") {
      model.use_lsu = model.use_cra = refine = false;
    } else if (value == "no_tir") {
      model.use_lsu = model.use_cra = true;
      refine = false;
    } else {
      throw ConfigError("config: variant must be full, base or no_tir");
    }
    return;
  }
  for (const KeySpec& s : specs()) {
    if (s.key == key) {
      s.set(*this, key, value);
      return;
    }
  }
  throw ConfigError("config: unknown key '" + key + "'");
}

void RunConfig::apply(const KeyValues& kv) {
  for (const auto& [k, v] : kv) set(k, v);
}

ModelConfig RunConfig::resolved_model() const {
  ModelConfig m = model;
  m.visual_vocab = dvae.codebook_size;
  m.patch_dim = dvae.downsample * dvae.downsample * dvae.channels;
  return m;
}

void RunConfig::validate() const {
  dvae.validate();
  preprocess.validate();
  resolved_model().validate();
  if (synth_n < 10) throw ConfigError("synth.n must be at least 10");
  if (synth_k < 1 || synth_k > data::kMaxFindings) throw ConfigError("synth.k_findings must be in [1, 8]");
  if (!(infer_view_mix >= 0.0 && infer_view_mix <= 1.0)) throw ConfigError("preprocess.infer_view_mix must be in [0, 1]");
  if (vocab_min_count < 0) throw ConfigError("vocab.min_count must be non-negative");
  if (stage1_epochs < 0 || stage2_epochs < 0) throw ConfigError("epoch counts must be non-negative");
  if (stage1_epochs + stage2_epochs == 0) throw ConfigError("schedule has no epochs");
  if (!(lr > 0.0)) throw ConfigError("optim.lr must be positive");
  if (!(clip_norm > 0.0)) throw ConfigError("optim.clip_norm must be positive");
  if (weight_decay < 0.0) throw ConfigError("optim.weight_decay must be non-negative");
  if (!(stage2_lr_mult > 0.0)) throw ConfigError("schedule.stage2_lr_mult must be positive");
  if (batch_size < 1) throw ConfigError("optim.batch_size must be positive");
  if (warmup_steps < 0) throw ConfigError("optim.warmup_steps must be non-negative");
  if (decode_max_len < 2) throw ConfigError("decode.max_len must be at least 2");
  if (beam_width < 1) throw ConfigError("decode.beam_width must be at least 1");
  if (probe_samples < 0) throw ConfigError("probe.samples must be non-negative");
  if (preprocess.crop % dvae.downsample != 0 || preprocess.infer_size % dvae.downsample != 0) {
    throw ConfigError("image sizes must be divisible by dvae.downsample");
  }
  if (preprocess.crop != preprocess.infer_size) {
    throw ConfigError("preprocess.crop and preprocess.infer_size must give the same token count");
  }
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const KeySpec& s : specs()) j[s.key] = s.get(*this);
  return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    for (const auto& [k, v] : j.items()) c.set(k, v.get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("config json: ") + e.what());
  }
  return c;
}

const std::vector<std::pair<std::string, std::string>>& RunConfig::documented_keys() {
  static const std::vector<std::pair<std::string, std::string>> keys = [] {
    std::vector<std::pair<std::string, std::string>> k;
    k.emplace_back("variant", "full | base | no_tir (sets model.use_lsu, model.use_cra, schedule.refine)");
    for (const KeySpec& s : specs()) k.emplace_back(s.key, s.doc);
    return k;
  }();
  return keys;
}

}  // namespace uar

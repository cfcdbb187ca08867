#include "uar/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "uar/errors.hpp"

namespace uar::ckpt {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'U', 'A', 'R', 'C', 'K', 'P', 'T', '1'};
static_assert(std::endian::native == std::endian::little, "archive IO assumes a little-endian host");

}  // namespace

const Matrix& Archive::at(const std::string& name) const {
  for (const auto& [n, m] : tensors) {
    if (n == name) return m;
  }
  throw ParseError("archive: tensor '" + name + "' not found");
}

bool Archive::contains(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.first == name) return true;
  }
  return false;
}

void write_archive(const std::string& path, const Archive& archive) {
  json header;
  header["meta"] = archive.meta;
  json table = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : archive.tensors) {
    table.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(m.size());
  }
  header["tensors"] = std::move(table);
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write checkpoint " + path);
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : archive.tensors) {
    out.write(reinterpret_cast<const char*>(t.second.data()),
              static_cast<std::streamsize>(t.second.size() * sizeof(double)));
  }
  if (!out) throw ConfigError("failed writing checkpoint " + path);
}

Archive read_archive(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFile("checkpoint not found: " + path);
  char magic[8];
  std::uint64_t len = 0;
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw ParseError("not a checkpoint: " + path);
  if (!in.read(reinterpret_cast<char*>(&len), sizeof(len)) || len > (1ULL << 32)) {
    throw ParseError("checkpoint header truncated: " + path);
  }
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw ParseError("checkpoint header truncated");
  Archive a;
  try {
    const json header = json::parse(text);
    a.meta = header.at("meta");
    for (const auto& t : header.at("tensors")) {
      Matrix m(t.at("rows").get<Index>(), t.at("cols").get<Index>());
      if (!in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)))) {
        throw ParseError("checkpoint data truncated: " + path);
      }
      a.tensors.emplace_back(t.at("name").get<std::string>(), std::move(m));
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint header: ") + e.what());
  }
  return a;
}

namespace {

json dvae_config_json(const lsu::DvaeConfig& c) {
  return {{"downsample", c.downsample}, {"codebook_size", c.codebook_size}, {"code_dim", c.code_dim},
          {"hidden", c.hidden},         {"channels", c.channels},           {"steps", c.steps},
          {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate}, {"tau_start", c.tau_start},
          {"tau_end", c.tau_end},       {"seed", c.seed}};
}

lsu::DvaeConfig dvae_config_from(const json& j) {
  lsu::DvaeConfig c;
  c.downsample = j.at("downsample");
  c.codebook_size = j.at("codebook_size");
  c.code_dim = j.at("code_dim");
  c.hidden = j.at("hidden");
  c.channels = j.at("channels");
  c.steps = j.at("steps");
  c.batch_size = j.at("batch_size");
  c.learning_rate = j.at("learning_rate");
  c.tau_start = j.at("tau_start");
  c.tau_end = j.at("tau_end");
  c.seed = j.at("seed");
  return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const UarModel& model, const lsu::DvaeModel* dvae,
                     const lsu::TextVocabulary& vocab, const RunConfig& config, int stage,
                     const optim::AdamW* optimizer) {
  Archive a;
  a.meta["stage"] = stage;
  a.meta["config"] = config.to_json();
  a.meta["vocab"] = vocab.tokens();
  a.meta["mask_active"] = model.mask_active;
  UarModel& m = const_cast<UarModel&>(model);  // named_parameters() hands out mutable pointers; only read here
  for (const auto& np : m.named_parameters()) a.tensors.emplace_back(np.name, np.param->value);
  if (model.config.use_cra) a.tensors.emplace_back("cra.basis.matrix", model.cra.basis.basis.matrix());
  if (dvae != nullptr) {
    a.meta["dvae"] = dvae_config_json(dvae->config);
    for (auto& [name, p] : const_cast<lsu::DvaeModel*>(dvae)->parameters()) a.tensors.emplace_back(name, p->value);
  }
  if (optimizer != nullptr) {
    const auto& o = optimizer->options();
    a.meta["adam"] = {{"beta1", o.beta1}, {"beta2", o.beta2}, {"eps", o.eps}, {"weight_decay", o.weight_decay}};
    json steps = json::object();
    for (const auto& np : m.named_parameters()) {
      const optim::AdamW::State* st = optimizer->state(np.param);
      if (st == nullptr) continue;
      steps[np.name] = st->step;
      a.tensors.emplace_back("adam.m." + np.name, st->m);
      a.tensors.emplace_back("adam.v." + np.name, st->v);
    }
    a.meta["adam_steps"] = std::move(steps);
  }
  write_archive(path, a);
}

void save_dvae(const std::string& path, const lsu::DvaeModel& dvae) {
  Archive a;
  a.meta["dvae"] = dvae_config_json(dvae.config);
  for (auto& [name, p] : const_cast<lsu::DvaeModel&>(dvae).parameters()) a.tensors.emplace_back(name, p->value);
  write_archive(path, a);
}

lsu::DvaeModel load_dvae(const std::string& path) {
  const Archive a = read_archive(path);
  try {
    lsu::DvaeModel d = lsu::DvaeModel::initialize(dvae_config_from(a.meta.at("dvae")));
    for (auto& [name, p] : d.parameters()) p->value = a.at(name);
    return d;
  } catch (const json::exception& e) {
    throw ParseError(std::string("dvae archive: ") + e.what());
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  const Archive a = read_archive(path);
  Checkpoint c;
  try {
    c.stage = a.meta.at("stage").get<int>();
    c.config = RunConfig::from_json(a.meta.at("config"));
    c.vocab = lsu::TextVocabulary::from_tokens(a.meta.at("vocab").get<std::vector<std::string>>());
    c.model = UarModel::initialize(c.config.resolved_model(), c.vocab.size(), 0);
    c.model.mask_active = a.meta.at("mask_active").get<bool>();
    for (const auto& np : c.model.named_parameters()) {
      const Matrix& m = a.at(np.name);
      if (m.rows() != np.param->value.rows() || m.cols() != np.param->value.cols()) {
        throw ParseError("checkpoint: tensor '" + np.name + "' has the wrong shape");
      }
      np.param->value = m;
    }
    if (c.config.model.use_cra) {
      c.model.cra.basis.basis = cra::OrthonormalBasis::from_matrix(a.at("cra.basis.matrix"));
    }
    if (a.meta.contains("dvae")) {
      lsu::DvaeModel d = lsu::DvaeModel::initialize(dvae_config_from(a.meta.at("dvae")));
      for (auto& [name, p] : d.parameters()) p->value = a.at(name);
      c.dvae = std::move(d);
    }
    if (a.meta.contains("adam")) {
      const json& o = a.meta.at("adam");
      optim::AdamW::Snapshot snap;
      snap.options = optim::AdamW::Options{o.at("beta1"), o.at("beta2"), o.at("eps"), o.at("weight_decay")};
      for (const auto& [name, step] : a.meta.at("adam_steps").items()) {
        snap.states[name] = optim::AdamW::State{a.at("adam.m." + name), a.at("adam.v." + name), step.get<long>()};
      }
      c.optimizer = std::move(snap);
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint metadata: ") + e.what());
  }
  return c;
}

}  // namespace uar::ckpt

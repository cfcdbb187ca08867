#pragma once

// Named-tensor archive: the 8-byte magic "UARCKPT1", a little-endian uint64
// header length, a JSON header (metadata + tensor table) and the raw
// row-major doubles of every tensor.

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "uar/config.hpp"
#include "uar/lsu.hpp"
#include "uar/model.hpp"
#include "uar/optim.hpp"

namespace uar::ckpt {

struct Archive {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Matrix>> tensors;

  const Matrix& at(const std::string& name) const;  // throws ParseError when absent
  bool contains(const std::string& name) const;
};

void write_archive(const std::string& path, const Archive& archive);
// Throws MissingFile or ParseError.
Archive read_archive(const std::string& path);

struct Checkpoint {
  int stage = 0;  // last completed training stage (0 = untrained)
  RunConfig config;
  lsu::TextVocabulary vocab;
  std::optional<lsu::DvaeModel> dvae;
  UarModel model;
  std::optional<optim::AdamW::Snapshot> optimizer;  // moments, when saved for resuming
};

void save_checkpoint(const std::string& path, const UarModel& model, const lsu::DvaeModel* dvae,
                     const lsu::TextVocabulary& vocab, const RunConfig& config, int stage,
                     const optim::AdamW* optimizer = nullptr);
Checkpoint load_checkpoint(const std::string& path);

// Tokenizer-only archive written by the dVAE pre-training command.
void save_dvae(const std::string& path, const lsu::DvaeModel& dvae);
lsu::DvaeModel load_dvae(const std::string& path);

}  // namespace uar::ckpt

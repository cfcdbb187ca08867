#include "uar/model.hpp"

#include <algorithm>
#include <map>
#include <memory>

#include "uar/errors.hpp"
#include "uar/lsu.hpp"

namespace uar {

void ModelConfig::validate() const {
  transformer().validate();
  if (visual_vocab < 2) throw ConfigError("model: visual vocabulary needs at least 2 entries");
  if (patch_dim <= 0) throw ConfigError("model: patch_dim must be positive");
  if (margin < 0.0) throw ConfigError("model: margin must be non-negative");
}

tir::TransformerConfig ModelConfig::transformer() const {
  tir::TransformerConfig t;
  t.layers = layers;
  t.width = width;
  t.heads = heads;
  t.ffn_width = ffn_width;
  t.dropout = dropout;
  t.max_text = max_text;
  t.max_visual = max_visual;
  t.mask_scale = mask_scale;
  return t;
}

namespace {

ag::Parameter normal(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return ag::Parameter(std::move(m));
}

}  // namespace

UarModel UarModel::initialize(const ModelConfig& config, int text_vocab, std::uint64_t seed) {
  config.validate();
  if (text_vocab <= lsu::TextVocabulary::kNumSpecial - 1) {
    throw ConfigError("model: text vocabulary must contain the special tokens");
  }
  UarModel m;
  m.config = config;
  // Separate streams keep each component's initialization independent of the others.
  std::mt19937_64 rng_embed(seed * 4 + 1);
  std::mt19937_64 rng_cra(seed * 4 + 2);
  std::mt19937_64 rng_tir(seed * 4 + 3);
  m.visual_lookup = normal(config.visual_vocab, config.width, 1.0, rng_embed);
  m.text_lookup = normal(text_vocab, config.width, 1.0, rng_embed);
  m.patch_w = normal(config.patch_dim, config.width, 1.0 / std::sqrt(static_cast<double>(config.patch_dim)),
                     rng_embed);
  m.patch_b = ag::Parameter(Matrix::Zero(1, config.width));
  m.cra = cra::CraParams::initialize(config.width, config.heads, config.basis_seed, rng_cra);
  m.transformer = tir::TransformerParams::initialize(config.transformer(), text_vocab, rng_tir);
  return m;
}

std::vector<optim::NamedParameter> UarModel::named_parameters() {
  std::vector<optim::NamedParameter> out;
  auto add = [&](std::string name, ag::Parameter& p, bool decay) {
    out.push_back({std::move(name), &p, decay});
  };
  if (config.use_lsu) {
    add("lsu.visual_lookup", visual_lookup, true);
  } else {
    add("base.patch.w", patch_w, true);
    add("base.patch.b", patch_b, false);
  }
  add("lsu.text_lookup", text_lookup, true);
  if (config.use_cra) {
    add("cra.basis.gain", cra.basis.gain, false);
    add("cra.basis.bias", cra.basis.bias, false);
    add("cra.attention.wq", cra.attention.wq, true);
    add("cra.attention.wk", cra.attention.wk, true);
    add("cra.attention.wv", cra.attention.wv, true);
    add("cra.attention.wo", cra.attention.wo, true);
    add("cra.gate.input.w1", cra.gates.input_w1, true);
    add("cra.gate.input.w2", cra.gates.input_w2, true);
    add("cra.gate.forget.w1", cra.gates.forget_w1, true);
    add("cra.gate.forget.w2", cra.gates.forget_w2, true);
  }
  auto attn = [&](const std::string& pre, tir::AttentionParams& a) {
    add(pre + ".wq", a.wq, true);
    add(pre + ".wk", a.wk, true);
    add(pre + ".wv", a.wv, true);
    add(pre + ".wo", a.wo, true);
  };
  auto norm = [&](const std::string& pre, tir::LayerNormParams& n) {
    add(pre + ".gain", n.gain, false);
    add(pre + ".bias", n.bias, false);
  };
  auto ffn = [&](const std::string& pre, tir::FeedForwardParams& f) {
    add(pre + ".w1", f.w1, true);
    add(pre + ".b1", f.b1, false);
    add(pre + ".w2", f.w2, true);
    add(pre + ".b2", f.b2, false);
  };
  for (size_t i = 0; i < transformer.encoder.size(); ++i) {
    const std::string pre = "tir.encoder." + std::to_string(i);
    auto& l = transformer.encoder[i];
    attn(pre + ".self_attn", l.self_attn);
    norm(pre + ".norm1", l.norm1);
    ffn(pre + ".ffn", l.ffn);
    norm(pre + ".norm2", l.norm2);
  }
  for (size_t i = 0; i < transformer.decoder.size(); ++i) {
    const std::string pre = "tir.decoder." + std::to_string(i);
    auto& l = transformer.decoder[i];
    attn(pre + ".self_attn", l.self_attn);
    norm(pre + ".norm1", l.norm1);
    attn(pre + ".cross_attn", l.cross_attn);
    add(pre + ".mask", l.mask.logits, false);
    norm(pre + ".norm2", l.norm2);
    ffn(pre + ".ffn", l.ffn);
    norm(pre + ".norm3", l.norm3);
  }
  add("tir.head.w", transformer.head_w, true);
  add("tir.head.b", transformer.head_b, false);
  return out;
}

std::vector<ag::Parameter*> UarModel::mask_parameters() {
  std::vector<ag::Parameter*> out;
  for (auto& l : transformer.decoder) out.push_back(&l.mask.logits);
  return out;
}

namespace {

// Sorted unique ids and each input id's row in that list.
struct IdIndex {
  std::vector<int> unique;
  std::map<int, int> row;

  void add(int id) { row.emplace(id, 0); }
  void finalize() {
    unique.clear();
    for (auto& [id, r] : row) {
      r = static_cast<int>(unique.size());
      unique.push_back(id);
    }
  }
  std::vector<int> rows(std::span<const int> ids) const {
    std::vector<int> out;
    out.reserve(ids.size());
    for (int id : ids) out.push_back(row.at(id));
    return out;
  }
};

std::vector<int> content_ids(std::span<const int> text) {
  std::vector<int> out;
  for (int id : text) {
    if (id > lsu::TextVocabulary::kEos) out.push_back(id);
  }
  // An all-special report falls back to every token.
  if (out.empty()) out.assign(text.begin(), text.end());
  return out;
}

void check_ids(std::span<const int> ids, Index limit, const char* what) {
  for (int id : ids) {
    if (id < 0 || id >= limit) throw IndexError(std::string(what) + ": id out of range");
  }
}

}  // namespace

BatchLoss batch_loss(ag::Tape& tape, UarModel& model, std::span<const ModelSample* const> batch,
                     const ForwardOptions& opts) {
  if (batch.empty()) throw BatchTooSmall("batch_loss: empty batch");
  const ModelConfig& cfg = model.config;
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  cra::BasisKeys keys;
  if (cfg.use_cra) {
    keys = cra::project_basis(tape, cra::scaled_basis(tape, model.cra.basis), model.cra.attention);
  }

  IdIndex vis, txt;
  for (const ModelSample* s : batch) {
    if (s->text.size() < 2) throw ShapeError("batch_loss: text needs BOS and EOS");
    check_ids(s->text, model.text_vocab(), "batch_loss text");
    for (int id : s->text) txt.add(id);
    if (cfg.use_lsu) {
      check_ids(s->visual_tokens, cfg.visual_vocab, "batch_loss visual");
      for (int id : s->visual_tokens) vis.add(id);
    }
  }
  vis.finalize();
  txt.finalize();

  ag::Var vis_table;
  if (cfg.use_lsu) {
    vis_table = ag::gather_rows(tape.parameter(model.visual_lookup), vis.unique);
    if (cfg.use_cra) vis_table = cra::align(vis_table, keys, model.cra);
  }
  ag::Var txt_table = ag::gather_rows(tape.parameter(model.text_lookup), txt.unique);
  if (cfg.use_cra) txt_table = cra::align(txt_table, keys, model.cra);

  tir::PassOptions pass;
  pass.mask_enabled = opts.mask_enabled;
  pass.training = opts.training;
  pass.rng = opts.rng;

  std::vector<ag::Var> ces, masks, g_img, g_rep;
  for (const ModelSample* s : batch) {
    ag::Var fi;
    if (cfg.use_lsu) {
      fi = ag::gather_rows(vis_table, vis.rows(s->visual_tokens));
    } else {
      if (s->patches.cols() != cfg.patch_dim) throw ShapeError("batch_loss: patch width mismatch");
      fi = ag::add_row(ag::matmul(tape.constant(s->patches), tape.parameter(model.patch_w)),
                       tape.parameter(model.patch_b));
      if (cfg.use_cra) fi = cra::align(fi, keys, model.cra);
    }
    const std::span<const int> text(s->text);
    const std::span<const int> prefix = text.first(text.size() - 1);
    std::vector<int> targets;
    for (size_t t = 1; t < text.size(); ++t) {
      targets.push_back(text[t] == lsu::TextVocabulary::kPad ? -1 : text[t]);
    }
    std::unique_ptr<bool[]> valid(new bool[prefix.size()]);
    for (size_t i = 0; i < prefix.size(); ++i) valid[i] = prefix[i] != lsu::TextVocabulary::kPad;

    ag::Var fr = ag::gather_rows(txt_table, txt.rows(prefix));
    ag::Var memory = tir::encode(fi, model.transformer, pass);
    ag::Var hidden = tir::decode(memory, fr, std::span<const bool>(valid.get(), prefix.size()),
                                 model.transformer, pass);
    ces.push_back(ag::cross_entropy_sum(tir::output_logits(hidden, model.transformer), targets));
    if (opts.mask_enabled) {
      for (auto& layer : model.transformer.decoder) {
        masks.push_back(tir::mask_loss(tape, layer.mask, fr.rows(), fi.rows()));
      }
    }
    if (cfg.use_cra) {
      const std::vector<int> content = content_ids(text);
      g_img.push_back(cra::pool_global(fi));
      g_rep.push_back(cra::pool_global(ag::gather_rows(txt_table, txt.rows(content))));
    }
  }

  auto mean_of = [&](const std::vector<ag::Var>& terms) {
    std::vector<double> coefs(terms.size(), inv_b);
    return ag::linear_combination(terms, coefs);
  };
  BatchLoss out;
  out.ce = mean_of(ces);
  out.mask = masks.empty() ? tape.constant(Matrix::Zero(1, 1)) : mean_of(masks);
  if (cfg.use_cra && batch.size() >= 2) {
    out.global = cra::triplet_loss(ag::concat_rows(g_img), ag::concat_rows(g_rep), cfg.margin);
  } else {
    out.global = tape.constant(Matrix::Zero(1, 1));
  }
  return out;
}

namespace {

UarModel& unconst(const UarModel& m) {
  // Gradient-free tapes only read parameter values.
  return const_cast<UarModel&>(m);
}

}  // namespace

FeatureTables feature_tables(const UarModel& model) {
  ag::Tape tape(false);
  UarModel& m = unconst(model);
  FeatureTables t;
  cra::BasisKeys keys;
  if (m.config.use_cra) {
    keys = cra::project_basis(tape, cra::scaled_basis(tape, m.cra.basis), m.cra.attention);
  }
  auto table = [&](ag::Parameter& lookup) {
    ag::Var e = tape.parameter(lookup);
    return (m.config.use_cra ? cra::align(e, keys, m.cra) : e).value();
  };
  if (m.config.use_lsu) t.visual = table(m.visual_lookup);
  t.text = table(m.text_lookup);
  return t;
}

Matrix visual_features(const UarModel& model, const FeatureTables& tables, const ModelSample& s) {
  if (model.config.use_lsu) {
    check_ids(s.visual_tokens, tables.visual.rows(), "visual_features");
    Matrix out(static_cast<Index>(s.visual_tokens.size()), tables.visual.cols());
    for (size_t i = 0; i < s.visual_tokens.size(); ++i) {
      out.row(static_cast<Index>(i)) = tables.visual.row(s.visual_tokens[i]);
    }
    return out;
  }
  if (s.patches.cols() != model.config.patch_dim) throw ShapeError("visual_features: patch width mismatch");
  Matrix e = s.patches * model.patch_w.value;
  e.rowwise() += model.patch_b.value.row(0);
  if (!model.config.use_cra) return e;
  return cra::align(EmbeddingSequence{Modality::kImage, e}, model.cra).values;
}

Matrix text_features(const FeatureTables& tables, std::span<const int> ids) {
  check_ids(ids, tables.text.rows(), "text_features");
  Matrix out(static_cast<Index>(ids.size()), tables.text.cols());
  for (size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Index>(i)) = tables.text.row(ids[i]);
  return out;
}

namespace {

Eigen::RowVectorXd pooled(const Matrix& f) {
  return cra::pool_global(cra::FusedFeatureSequence{Modality::kImage, f}).values;
}

}  // namespace

Eigen::RowVectorXd global_image_feature(const UarModel& model, const FeatureTables& tables,
                                        const ModelSample& s) {
  return pooled(visual_features(model, tables, s));
}

Eigen::RowVectorXd global_report_feature(const FeatureTables& tables, std::span<const int> text) {
  return pooled(text_features(tables, content_ids(text)));
}

std::vector<int> generate_report(const UarModel& model, const FeatureTables& tables,
                                 const ModelSample& s, const tir::GenerateOptions& opts) {
  tir::GenerateOptions o = opts;
  o.mask_enabled = model.mask_active;
  o.bos_id = lsu::TextVocabulary::kBos;
  o.eos_id = lsu::TextVocabulary::kEos;
  return tir::generate(visual_features(model, tables, s), tables.text, model.transformer, o);
}

tir::DecoderOutput teacher_forced(const UarModel& model, const FeatureTables& tables,
                                  const ModelSample& s) {
  if (s.text.size() < 2) throw ShapeError("teacher_forced: text needs BOS and EOS");
  const std::span<const int> prefix(s.text.data(), s.text.size() - 1);
  return tir::forward(visual_features(model, tables, s), text_features(tables, prefix),
                      model.transformer, model.mask_active);
}

}  // namespace uar
